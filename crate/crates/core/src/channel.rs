//! Narrowband mmWave uplink over a half-wavelength uniform linear array.
//!
//! The base station receives `y = h^H f s + n` through a beam `f` picked from
//! an oversampled DFT codebook; the optimal beam maximizes `|h^H f|^2`.
//! Complex arithmetic lives here only: everything downstream consumes real
//! features and integer beam labels.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type CVec = Vec<Complex64>;

/// `M` unit-norm beamforming vectors over an `N`-element ULA.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamCodebook {
    n_antennas: usize,
    vectors: Vec<CVec>,
}

impl BeamCodebook {
    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn n_beams(&self) -> usize {
        self.vectors.len()
    }

    pub fn beam(&self, m: usize) -> &[Complex64] {
        &self.vectors[m]
    }

    pub fn beams(&self) -> &[CVec] {
        &self.vectors
    }

    /// Direction sine the `m`-th beam points at.
    pub fn beam_sine(&self, m: usize) -> f64 {
        grid_sine(m, self.n_beams())
    }

    /// Gains `|h^H f_m|^2` for every beam.
    pub fn gains(&self, h: &ChannelSnapshot) -> Result<Vec<f64>> {
        self.vectors.iter().map(|f| beamforming_gain(h, f)).collect()
    }
}

fn grid_sine(m: usize, n_beams: usize) -> f64 {
    -1.0 + (2 * m + 1) as f64 / n_beams as f64
}

/// Oversampled DFT codebook: beam `m` steers to `sin = -1 + (2m + 1) / M`.
///
/// Codebooks with fewer beams than antennas leave gaps between beams and are
/// rejected; [`dft_codebook_unchecked`] builds them anyway.
pub fn dft_codebook(n_antennas: usize, n_beams: usize) -> Result<BeamCodebook> {
    if n_beams < n_antennas {
        return Err(Error::Config(format!(
            "undersampled codebook: {n_beams} beams for {n_antennas} antennas"
        )));
    }
    dft_codebook_unchecked(n_antennas, n_beams)
}

pub fn dft_codebook_unchecked(n_antennas: usize, n_beams: usize) -> Result<BeamCodebook> {
    if n_antennas == 0 || n_beams == 0 {
        return Err(Error::Config("codebook needs at least one antenna and one beam".into()));
    }
    let norm = 1.0 / (n_antennas as f64).sqrt();
    let vectors = (0..n_beams)
        .map(|m| {
            steering_unchecked(n_antennas, grid_sine(m, n_beams))
                .into_iter()
                .map(|a| a * norm)
                .collect()
        })
        .collect();
    Ok(BeamCodebook { n_antennas, vectors })
}

/// Unnormalized ULA response: element `n` is `exp(-j pi n sin)`.
pub fn steering_vector(n_antennas: usize, sine: f64) -> Result<CVec> {
    if !(-1.0..=1.0).contains(&sine) {
        return Err(Error::Domain(format!("direction sine {sine} outside [-1, 1]")));
    }
    Ok(steering_unchecked(n_antennas, sine))
}

fn steering_unchecked(n_antennas: usize, sine: f64) -> CVec {
    (0..n_antennas)
        .map(|n| Complex64::from_polar(1.0, -PI * n as f64 * sine))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSnapshot {
    pub h: CVec,
    pub t: i64,
}

impl ChannelSnapshot {
    pub fn new(h: CVec, t: i64) -> Self {
        ChannelSnapshot { h, t }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.iter().map(Complex64::norm_sqr).sum()
    }
}

/// Transmit power and receiver noise variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RxConfig {
    pub tx_power: f64,
    pub noise_var: f64,
}

impl RxConfig {
    pub fn new(tx_power: f64, noise_var: f64) -> Result<Self> {
        if !(tx_power > 0.0) {
            return Err(Error::Domain("transmit power must be positive".into()));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::Domain("noise variance must be non-negative".into()));
        }
        Ok(RxConfig { tx_power, noise_var })
    }
}

/// Sine of the direction from `bs` to `ue`, measured against the array
/// broadside; `array_axis` points along the elements (need not be unit length).
pub fn direction_sine(bs: [f64; 2], ue: [f64; 2], array_axis: [f64; 2]) -> Result<f64> {
    let d = [ue[0] - bs[0], ue[1] - bs[1]];
    let dist = d[0].hypot(d[1]);
    if dist == 0.0 {
        return Err(Error::Geometry("base station and UE coincide".into()));
    }
    let axis_len = array_axis[0].hypot(array_axis[1]);
    if axis_len == 0.0 {
        return Err(Error::Geometry("zero-length array axis".into()));
    }
    let s = (d[0] * array_axis[0] + d[1] * array_axis[1]) / (dist * axis_len);
    Ok(s.clamp(-1.0, 1.0))
}

/// Line-of-sight channel `h = (ref_gain / d) a(sin)` with `N` inferred from
/// the codebook the caller uses.
pub fn los_channel(
    n_antennas: usize,
    bs: [f64; 2],
    ue: [f64; 2],
    array_axis: [f64; 2],
    ref_gain: f64,
) -> Result<ChannelSnapshot> {
    let sine = direction_sine(bs, ue, array_axis)?;
    let dist = (ue[0] - bs[0]).hypot(ue[1] - bs[1]);
    let g = ref_gain / dist;
    let h = steering_unchecked(n_antennas, sine)
        .into_iter()
        .map(|a| a * g)
        .collect();
    Ok(ChannelSnapshot::new(h, 0))
}

/// `h^H f`.
pub fn inner(h: &[Complex64], f: &[Complex64]) -> Result<Complex64> {
    if h.len() != f.len() {
        return Err(Error::Dimension(format!("channel length {} vs beam length {}", h.len(), f.len())));
    }
    Ok(h.iter().zip(f).map(|(a, b)| a.conj() * b).sum())
}

/// `|h^H f|^2`.
pub fn beamforming_gain(h: &ChannelSnapshot, f: &[Complex64]) -> Result<f64> {
    Ok(inner(&h.h, f)?.norm_sqr())
}

/// Index of the highest-gain beam; ties go to the lowest index.
pub fn optimal_beam(h: &ChannelSnapshot, cb: &BeamCodebook) -> Result<usize> {
    let mut best = 0;
    let mut best_gain = f64::NEG_INFINITY;
    for (m, f) in cb.beams().iter().enumerate() {
        let g = beamforming_gain(h, f)?;
        if g > best_gain {
            best = m;
            best_gain = g;
        }
    }
    Ok(best)
}

/// One received sample `y = h^H f s + n`, `n ~ CN(0, noise_var)`.
pub fn simulate_rx<R: Rng + ?Sized>(
    h: &ChannelSnapshot,
    f: &[Complex64],
    s: Complex64,
    noise_var: f64,
    rng: &mut R,
) -> Result<Complex64> {
    if !(noise_var >= 0.0) {
        return Err(Error::Domain(format!("noise variance {noise_var} is negative")));
    }
    let clean = inner(&h.h, f)? * s;
    if noise_var == 0.0 {
        return Ok(clean);
    }
    let sd = (noise_var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Ok(clean + Complex64::new(re * sd, im * sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn single_antenna_beams_are_one() {
        let cb = dft_codebook(1, 5).unwrap();
        for f in cb.beams() {
            assert!((f[0] - c(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn critical_codebook_is_orthonormal() {
        for n in [2, 4, 16] {
            let cb = dft_codebook(n, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let g = inner(cb.beam(i), cb.beam(j)).unwrap();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g - c(want, 0.0)).norm() < 1e-12, "n={n} ({i},{j}) {g}");
                }
            }
        }
    }

    #[test]
    fn adjacent_beam_overlap_is_uniform() {
        let cb = dft_codebook(16, 32).unwrap();
        let overlaps: Vec<f64> = (0..31)
            .map(|m| inner(cb.beam(m), cb.beam(m + 1)).unwrap().norm())
            .collect();
        // Dirichlet kernel at a sine offset of 2/32: |sin(N pi d / 2)| / (N |sin(pi d / 2)|)
        let d = 2.0 / 32.0;
        let want = (16.0 * PI * d / 2.0).sin().abs() / (16.0 * (PI * d / 2.0).sin().abs());
        for o in overlaps {
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn undersampled_codebook_rejected() {
        assert!(matches!(dft_codebook(16, 8), Err(Error::Config(_))));
        assert_eq!(dft_codebook_unchecked(16, 8).unwrap().n_beams(), 8);
    }

    #[test]
    fn steering_examples() {
        assert!(steering_vector(4, 0.0).unwrap().iter().all(|a| (a - c(1.0, 0.0)).norm() < 1e-15));
        let a = steering_vector(2, 1.0).unwrap();
        assert!((a[0] - c(1.0, 0.0)).norm() < 1e-15 && (a[1] - c(-1.0, 0.0)).norm() < 1e-15);
        assert!(matches!(steering_vector(2, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn los_examples() {
        let h = los_channel(8, [0.0, 0.0], [0.0, 1.0], [1.0, 0.0], 1.0).unwrap();
        assert!(h.h.iter().all(|a| (a - c(1.0, 0.0)).norm() < 1e-15));
        let far = los_channel(8, [0.0, 0.0], [0.0, 2.0], [1.0, 0.0], 1.0).unwrap();
        assert!((far.norm_sqr().sqrt() * 2.0 - h.norm_sqr().sqrt()).abs() < 1e-12);
        assert!(matches!(
            los_channel(8, [1.0, 1.0], [1.0, 1.0], [1.0, 0.0], 1.0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn on_grid_direction_selects_grid_beam() {
        let cb = dft_codebook(16, 32).unwrap();
        for m in 0..32 {
            let s = cb.beam_sine(m);
            let ue = [10.0 * s, 10.0 * (1.0 - s * s).sqrt()];
            let h = los_channel(16, [0.0, 0.0], ue, [1.0, 0.0], 1.0).unwrap();
            assert_eq!(optimal_beam(&h, &cb).unwrap(), m);
        }
    }

    #[test]
    fn gain_examples() {
        let h = ChannelSnapshot::new(vec![c(1.0, 0.5), c(-0.3, 2.0), c(0.7, -1.1)], 0);
        let norm = h.norm_sqr().sqrt();
        let f: CVec = h.h.iter().map(|a| a / norm).collect();
        assert!((beamforming_gain(&h, &f).unwrap() - h.norm_sqr()).abs() < 1e-12);
        let h2 = ChannelSnapshot::new(vec![c(1.0, 0.0), c(1.0, 0.0)], 0);
        let r = 1.0 / 2f64.sqrt();
        assert!(beamforming_gain(&h2, &[c(r, 0.0), c(-r, 0.0)]).unwrap().abs() < 1e-15);
        assert!(beamforming_gain(&h2, &[c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn optimal_beam_scaling_and_degenerate_cases() {
        let cb = dft_codebook(16, 32).unwrap();
        let h = ChannelSnapshot::new(cb.beam(5).iter().map(|a| a * 3.0).collect(), 0);
        assert_eq!(optimal_beam(&h, &cb).unwrap(), 5);
        let zero = ChannelSnapshot::new(vec![c(0.0, 0.0); 16], 0);
        assert_eq!(optimal_beam(&zero, &cb).unwrap(), 0);
    }

    #[test]
    fn noiseless_rx_is_exact_and_seeded_rx_repeats() {
        let cb = dft_codebook(4, 8).unwrap();
        let h = los_channel(4, [0.0, 0.0], [3.0, 4.0], [1.0, 0.0], 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = simulate_rx(&h, cb.beam(2), c(1.0, 0.0), 0.0, &mut rng).unwrap();
        assert_eq!(y, inner(&h.h, cb.beam(2)).unwrap());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| simulate_rx(&h, cb.beam(2), c(1.0, 0.0), 0.1, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert!(simulate_rx(&h, cb.beam(2), c(1.0, 0.0), -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_variance_matches_monte_carlo() {
        let cb = dft_codebook(4, 8).unwrap();
        let h = los_channel(4, [0.0, 0.0], [1.0, 1.0], [1.0, 0.0], 1.0).unwrap();
        let s = c(0.6, -0.8);
        let clean = inner(&h.h, cb.beam(3)).unwrap() * s;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let var = 0.25;
        let mean_sq: f64 = (0..n)
            .map(|_| (simulate_rx(&h, cb.beam(3), s, var, &mut rng).unwrap() - clean).norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((mean_sq - var).abs() / var < 0.05, "{mean_sq}");
    }

    fn complex_vec(n: usize) -> impl Strategy<Value = CVec> {
        proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), n)
            .prop_map(|v| v.into_iter().map(|(a, b)| c(a, b)).collect())
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_complex_scaling(h in complex_vec(16), re in 0.1f64..5.0, im in -5.0f64..5.0) {
            let cb = dft_codebook(16, 32).unwrap();
            let snap = ChannelSnapshot::new(h.clone(), 0);
            let scaled = ChannelSnapshot::new(h.iter().map(|a| a * c(re, im)).collect(), 0);
            prop_assert_eq!(optimal_beam(&snap, &cb).unwrap(), optimal_beam(&scaled, &cb).unwrap());
        }

        #[test]
        fn gain_invariant_to_global_phase(h in complex_vec(8), f in complex_vec(8), phase in 0.0f64..6.3) {
            let rot = Complex64::from_polar(1.0, phase);
            let snap = ChannelSnapshot::new(h.clone(), 0);
            let base = beamforming_gain(&snap, &f).unwrap();
            let rh = ChannelSnapshot::new(h.iter().map(|a| a * rot).collect(), 0);
            let rf: CVec = f.iter().map(|a| a * rot).collect();
            prop_assert!((beamforming_gain(&rh, &f).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
            prop_assert!((beamforming_gain(&snap, &rf).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn codebook_vectors_are_unit_norm(n in 1usize..20, extra in 0usize..20) {
            let cb = dft_codebook(n, n + extra).unwrap();
            for f in cb.beams() {
                let norm: f64 = f.iter().map(Complex64::norm_sqr).sum();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
}
