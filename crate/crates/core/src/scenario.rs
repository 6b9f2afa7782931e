//! Synthetic V2I passes, dataset files, windowing and splitting.
//!
//! A roadside base station carries a camera and a ULA that share one
//! boresight. Vehicles drive along a straight road parallel to the array; for
//! every frame inside the horizontal field of view the generator emits a
//! pinhole-projected bounding box and the optimal beam of the LOS channel.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{dft_codebook, los_channel};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Smallest width/height a jittered box is clamped to, so it stays a detection.
pub const MIN_EXTENT: f64 = 1e-4;

/// Normalized `[x_c, y_c, w, h]`; the all-zero box means "no detection".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_c: f64,
    pub y_c: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const NONE: BoundingBox = BoundingBox { x_c: 0.0, y_c: 0.0, w: 0.0, h: 0.0 };

    pub fn new(x_c: f64, y_c: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x_c, y_c, w, h };
        let v = b.to_array();
        if v.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!("bounding box {v:?} outside [0, 1]")));
        }
        if !b.is_none() && (w == 0.0 || h == 0.0) {
            return Err(Error::Validation(format!("bounding box {v:?} has zero extent")));
        }
        Ok(b)
    }

    pub fn is_none(&self) -> bool {
        self.to_array().iter().all(|c| *c == 0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_c, self.y_c, self.w, self.h]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Image geometry used to normalize pixel-unit detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
}

/// Pixel-unit box: center and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x_c: f64,
    pub y_c: f64,
    pub w: f64,
    pub h: f64,
}

pub fn normalize_bbox(b: PixelBox, meta: FrameMeta) -> Result<BoundingBox> {
    if meta.width == 0 || meta.height == 0 || meta.channels == 0 {
        return Err(Error::Validation("frame dimensions must be positive".into()));
    }
    let (wi, hi) = (meta.width as f64, meta.height as f64);
    let tol = 1e-9;
    let inside = |c: f64, e: f64, lim: f64| e >= 0.0 && c - e / 2.0 >= -tol && c + e / 2.0 <= lim + tol;
    if !inside(b.x_c, b.w, wi) || !inside(b.y_c, b.h, hi) {
        return Err(Error::Validation(format!(
            "pixel box ({}, {}, {}, {}) outside {}x{} image",
            b.x_c, b.y_c, b.w, b.h, meta.width, meta.height
        )));
    }
    BoundingBox::new(b.x_c / wi, b.y_c / hi, b.w / wi, b.h / hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub t: i64,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_powers: Option<Vec<f64>>,
    pub optimal_beam: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub seq_id: i64,
    pub frames: Vec<Frame>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl SequenceRecord {
    /// Checks time ordering, label ranges and label/power consistency.
    pub fn validate(&self, n_beams: Option<usize>) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Validation(format!(
                    "sequence {}: t not strictly increasing at t={}",
                    self.seq_id, w[1].t
                )));
            }
        }
        for f in &self.frames {
            if let Some(m) = n_beams {
                if f.optimal_beam >= m {
                    return Err(Error::Validation(format!(
                        "sequence {} t={}: beam {} outside [0, {m})",
                        self.seq_id, f.t, f.optimal_beam
                    )));
                }
            }
            if let Some(p) = &f.beam_powers {
                if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "sequence {} t={}: beam_powers must be non-empty and finite",
                        self.seq_id, f.t
                    )));
                }
                if n_beams.is_some_and(|m| m != p.len()) {
                    return Err(Error::Validation(format!(
                        "sequence {} t={}: {} beam powers",
                        self.seq_id,
                        f.t,
                        p.len()
                    )));
                }
                let best = argmax(p);
                if best != f.optimal_beam {
                    return Err(Error::Validation(format!(
                        "sequence {} t={}: optimal_beam {} but argmax(beam_powers) = {best}",
                        self.seq_id, f.t, f.optimal_beam
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    LeftToRight,
    RightToLeft,
    /// Even passes left to right, odd passes right to left.
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Base station position in world metres.
    pub bs_position: [f64; 2],
    /// Boresight rotation from the +y axis, degrees, clockwise.
    pub heading_deg: f64,
    /// Road line `y = road_offset` (world frame).
    pub road_offset: f64,
    pub road_start: f64,
    pub road_end: f64,
    pub direction: Direction,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub camera_height: f64,
    pub vehicle_length: f64,
    pub vehicle_height: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub fps: f64,
    pub n_passes: usize,
    /// Cap on simulated frames per pass, before FOV filtering.
    pub max_frames: usize,
    pub bbox_noise: f64,
    pub n_antennas: usize,
    pub n_beams: usize,
    pub ref_gain: f64,
    pub emit_beam_powers: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            bs_position: [0.0, 0.0],
            heading_deg: 0.0,
            road_offset: 30.0,
            road_start: -100.0,
            road_end: 100.0,
            direction: Direction::LeftToRight,
            hfov_deg: 90.0,
            vfov_deg: 60.0,
            camera_height: 6.0,
            vehicle_length: 4.5,
            vehicle_height: 1.6,
            speed_min: 8.0,
            speed_max: 14.0,
            fps: 7.79,
            n_passes: 60,
            max_frames: 400,
            bbox_noise: 0.01,
            n_antennas: 16,
            n_beams: 32,
            ref_gain: 1.0,
            emit_beam_powers: true,
        }
    }
}

impl ScenarioConfig {
    /// The default scene without box jitter.
    pub fn noiseless() -> Self {
        ScenarioConfig {
            bbox_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) || !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) {
            return cfg(format!("fields of view must lie in (0, 180): {} / {}", self.hfov_deg, self.vfov_deg));
        }
        if !(self.fps > 0.0) {
            return cfg("fps must be positive".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return cfg(format!("bad speed range [{}, {}]", self.speed_min, self.speed_max));
        }
        if !(self.road_end >= self.road_start) {
            return cfg("road_end precedes road_start".into());
        }
        if self.n_passes == 0 || self.max_frames == 0 {
            return cfg("n_passes and max_frames must be positive".into());
        }
        if !(self.bbox_noise >= 0.0) {
            return cfg("bbox_noise must be non-negative".into());
        }
        if !(self.vehicle_length > 0.0 && self.vehicle_height > 0.0 && self.ref_gain > 0.0) {
            return cfg("vehicle size and ref_gain must be positive".into());
        }
        let finite = self.bs_position.iter().chain([
            &self.heading_deg,
            &self.road_offset,
            &self.road_start,
            &self.road_end,
            &self.camera_height,
        ]);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return cfg("geometry values must be finite".into());
        }
        dft_codebook(self.n_antennas, self.n_beams)?;
        Ok(())
    }
}

struct Camera {
    bs: [f64; 2],
    boresight: [f64; 2],
    axis: [f64; 2],
    half_h: f64,
    tan_h: f64,
    vfov: f64,
    tan_v: f64,
}

impl Camera {
    fn new(cfg: &ScenarioConfig) -> Self {
        let hd = cfg.heading_deg.to_radians();
        let hfov = cfg.hfov_deg.to_radians();
        let vfov = cfg.vfov_deg.to_radians();
        Camera {
            bs: cfg.bs_position,
            boresight: [hd.sin(), hd.cos()],
            axis: [hd.cos(), -hd.sin()],
            half_h: hfov / 2.0,
            tan_h: (hfov / 2.0).tan(),
            vfov,
            tan_v: (vfov / 2.0).tan(),
        }
    }

    /// Bounding box of a vehicle at `ue`, or `None` outside the horizontal FOV.
    fn project(&self, ue: [f64; 2], cfg: &ScenarioConfig) -> Option<BoundingBox> {
        let d = [ue[0] - self.bs[0], ue[1] - self.bs[1]];
        let along = d[0] * self.axis[0] + d[1] * self.axis[1];
        let ahead = d[0] * self.boresight[0] + d[1] * self.boresight[1];
        let bearing = along.atan2(ahead);
        let r = d[0].hypot(d[1]);
        if bearing.abs() > self.half_h || r == 0.0 {
            return None;
        }
        let x_c = 0.5 + bearing / (2.0 * self.half_h);
        let y_c = 0.5 + (cfg.camera_height / r).atan() / self.vfov;
        let w = cfg.vehicle_length / (2.0 * r * self.tan_h);
        let h = cfg.vehicle_height / (2.0 * r * self.tan_v);
        Some(BoundingBox {
            x_c: x_c.clamp(0.0, 1.0),
            y_c: y_c.clamp(0.0, 1.0),
            w: w.clamp(MIN_EXTENT, 1.0),
            h: h.clamp(MIN_EXTENT, 1.0),
        })
    }
}

/// One record per pass; pass `p` draws from stream `p` of a ChaCha generator
/// keyed by `seed`, so passes are independent of each other's length.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<SequenceRecord>> {
    cfg.validate()?;
    let cb = dft_codebook(cfg.n_antennas, cfg.n_beams)?;
    let cam = Camera::new(cfg);
    let mut out = Vec::with_capacity(cfg.n_passes);
    for p in 0..cfg.n_passes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
        let step = speed / cfg.fps;
        let phase = rng.random::<f64>() * step;
        let forward = match cfg.direction {
            Direction::LeftToRight => true,
            Direction::RightToLeft => false,
            Direction::Alternate => p % 2 == 0,
        };
        let mut frames = Vec::new();
        for i in 0..cfg.max_frames {
            let s = phase + step * i as f64;
            let x = if forward { cfg.road_start + s } else { cfg.road_end - s };
            if x > cfg.road_end || x < cfg.road_start {
                break;
            }
            let ue = [x, cfg.road_offset];
            let Some(mut bbox) = cam.project(ue, cfg) else {
                continue;
            };
            if cfg.bbox_noise > 0.0 {
                let mut jitter = |v: f64, lo: f64| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (v + cfg.bbox_noise * n).clamp(lo, 1.0)
                };
                bbox = BoundingBox {
                    x_c: jitter(bbox.x_c, 0.0),
                    y_c: jitter(bbox.y_c, 0.0),
                    w: jitter(bbox.w, MIN_EXTENT),
                    h: jitter(bbox.h, MIN_EXTENT),
                };
            }
            let h = los_channel(cfg.n_antennas, cam.bs, ue, cam.axis, cfg.ref_gain)?;
            let gains = cb.gains(&h)?;
            frames.push(Frame {
                t: i as i64,
                bbox,
                optimal_beam: argmax(&gains),
                beam_powers: cfg.emit_beam_powers.then_some(gains),
            });
        }
        if frames.is_empty() {
            return Err(Error::Config(format!("pass {p} never enters the camera field of view")));
        }
        out.push(SequenceRecord {
            seq_id: p as i64,
            frames,
        });
    }
    Ok(out)
}

/// Standard (8 → 5) or few-shot (3 → 10) prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Standard,
    Fewshot,
}

impl Mode {
    pub fn t_hist(self) -> usize {
        match self {
            Mode::Standard => 8,
            Mode::Fewshot => 3,
        }
    }

    pub fn t_pred(self) -> usize {
        match self {
            Mode::Standard => 5,
            Mode::Fewshot => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Fewshot => "fewshot",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "fewshot" => Ok(Mode::Fewshot),
            _ => Err(Error::Config(format!("unknown mode {s:?} (standard|fewshot)"))),
        }
    }
}

/// Box history (4 × T_hist, rows x_c, y_c, w, h) and the beams that follow.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub seq_id: i64,
    pub t0: i64,
    pub history: Tensor,
    pub future_beams: Vec<usize>,
}

impl WindowSample {
    pub fn t_hist(&self) -> usize {
        self.history.cols()
    }

    pub fn t_pred(&self) -> usize {
        self.future_beams.len()
    }
}

/// Stride-1 windows of `t_hist + t_pred` frames. Windows never cross a gap
/// in `t`; a run shorter than the window yields nothing.
pub fn sliding_windows(rec: &SequenceRecord, t_hist: usize, t_pred: usize) -> Result<Vec<WindowSample>> {
    if t_hist == 0 || t_pred == 0 {
        return Err(Error::Config("t_hist and t_pred must be positive".into()));
    }
    let total = t_hist + t_pred;
    let mut out = Vec::new();
    let mut run_start = 0;
    for end in 1..=rec.frames.len() {
        let broken = end == rec.frames.len() || rec.frames[end].t != rec.frames[end - 1].t + 1;
        if !broken {
            continue;
        }
        let run = &rec.frames[run_start..end];
        for w in run.windows(total) {
            let mut data = vec![0.0; 4 * t_hist];
            for (j, f) in w[..t_hist].iter().enumerate() {
                for (i, v) in f.bbox.to_array().into_iter().enumerate() {
                    data[i * t_hist + j] = v;
                }
            }
            out.push(WindowSample {
                seq_id: rec.seq_id,
                t0: w[0].t,
                history: Tensor::matrix(4, t_hist, data)?,
                future_beams: w[t_hist..].iter().map(|f| f.optimal_beam).collect(),
            });
        }
        run_start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub train_ids: Vec<i64>,
    pub val_ids: Vec<i64>,
    pub test_ids: Vec<i64>,
    pub seed: u64,
}

pub const MIN_SEQUENCES: usize = 10;

/// Shuffles sequences with `seed` and assigns floor(70%) to train, floor(10%)
/// to val and the rest to test, then windows each part.
pub fn split_dataset(records: &[SequenceRecord], seed: u64, t_hist: usize, t_pred: usize) -> Result<DatasetSplit> {
    if records.len() < MIN_SEQUENCES {
        return Err(Error::Config(format!(
            "need at least {MIN_SEQUENCES} sequences to split, got {}",
            records.len()
        )));
    }
    let mut sorted: Vec<i64> = records.iter().map(|r| r.seq_id).collect();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate seq_id".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = records.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let take = |range: std::ops::Range<usize>| -> Result<(Vec<WindowSample>, Vec<i64>)> {
        let mut windows = Vec::new();
        let mut part_ids = Vec::new();
        for &i in &order[range] {
            windows.extend(sliding_windows(&records[i], t_hist, t_pred)?);
            part_ids.push(records[i].seq_id);
        }
        Ok((windows, part_ids))
    };
    let (train, train_ids) = take(0..n_train)?;
    let (val, val_ids) = take(n_train..n_train + n_val)?;
    let (test, test_ids) = take(n_train + n_val..n)?;
    Ok(DatasetSplit {
        train,
        val,
        test,
        train_ids,
        val_ids,
        test_ids,
        seed,
    })
}

pub fn save_jsonl(records: &[SequenceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one record per non-blank line. Schema errors carry the 1-based line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<SequenceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate(None).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}
