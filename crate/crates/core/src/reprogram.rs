//! The BeamLLM predictor.
//!
//! Each of the four box channels is instance-normalized, cut into patches,
//! linearly embedded and reprogrammed by cross-attention onto `V'` text
//! prototypes `E' = W_proto^T E`. The result runs through the frozen backbone,
//! optionally behind an embedded prompt prefix whose outputs are discarded.
//! A shared flatten projection maps every channel to `T_pred` values, and a
//! per-step MLP fuses the four channels into `M` beam logits.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{build_backbone, tokenize, Backbone, BackboneConfig, PrefixKv, SeqSpec};
use crate::error::{Error, Result};
use crate::model::{check_history, BeamModel};
use crate::numcore::params::uniform;
use crate::numcore::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scenario::{argmax, Mode};

pub const REVIN_EPS: f64 = 1e-5;

pub const CHANNEL_NAMES: [&str; 4] = ["x_c", "y_c", "w", "h"];

/// Normalized row plus the mean and std needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct Revin {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn revin_normalize(row: &[f64]) -> Result<Revin> {
    if row.len() < 2 {
        return Err(Error::Config(format!("instance norm needs at least 2 steps, got {}", row.len())));
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = (var + REVIN_EPS).sqrt();
    Ok(Revin {
        values: row.iter().map(|x| (x - mean) / std).collect(),
        mean,
        std,
    })
}

pub fn revin_invert(r: &Revin) -> Vec<f64> {
    r.values.iter().map(|z| z * r.std + r.mean).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn validate(&self, t_hist: usize) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.patch_len > t_hist {
            return Err(Error::Config(format!(
                "patch length {} / stride {} invalid for {t_hist} steps",
                self.patch_len, self.stride
            )));
        }
        Ok(())
    }

    /// `floor((T_hist - L_p) / S) + 2`.
    pub fn n_patches(&self, t_hist: usize) -> usize {
        (t_hist - self.patch_len) / self.stride + 2
    }
}

/// Pads `row` with `S` copies of its last value and cuts length-`L_p`
/// windows at stride `S`.
pub fn patchify(row: &[f64], cfg: PatchConfig) -> Result<Tensor> {
    cfg.validate(row.len())?;
    let last = *row.last().expect("validated non-empty");
    let padded: Vec<f64> = row.iter().copied().chain(std::iter::repeat_n(last, cfg.stride)).collect();
    let n = cfg.n_patches(row.len());
    let mut data = Vec::with_capacity(n * cfg.patch_len);
    for p in 0..n {
        data.extend_from_slice(&padded[p * cfg.stride..p * cfg.stride + cfg.patch_len]);
    }
    Tensor::matrix(n, cfg.patch_len, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptText {
    pub dataset_desc: String,
    pub task_desc: String,
    pub stats_desc: String,
}

/// Four significant digits.
pub fn fmt_sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (3 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        return s[1..].to_string();
    }
    s
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Lags `1..T` ordered by decreasing |autocorrelation|, lowest lag first on
/// ties; at most three.
pub fn top_lags(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = values.iter().map(|x| x - mean).collect();
    let denom: f64 = c.iter().map(|x| x * x).sum();
    let mut lags: Vec<(usize, f64)> = (1..n)
        .map(|k| {
            let num: f64 = (0..n - k).map(|t| c[t] * c[t + k]).sum();
            (k, if denom > 0.0 { (num / denom).abs() } else { 0.0 })
        })
        .collect();
    lags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    lags.into_iter().take(3).map(|(k, _)| k).collect()
}

/// Templated prompt for channel `channel` of a 4 × T_hist window, using the
/// raw (un-normalized) values.
pub fn build_prompt(window: &Tensor, channel: usize, t_pred: usize) -> Result<PromptText> {
    if window.ndim() != 2 || window.rows() != 4 || channel >= 4 {
        return Err(Error::Dimension(format!(
            "prompt needs a 4-row window and channel < 4, got {:?} / {channel}",
            window.shape()
        )));
    }
    let row = window.row(channel);
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta = row[row.len() - 1] - row[0];
    let trend = if delta > 0.0 {
        "up"
    } else if delta < 0.0 {
        "down"
    } else {
        "flat"
    };
    let lags: Vec<String> = top_lags(row).iter().map(usize::to_string).collect();
    Ok(PromptText {
        dataset_desc: "Dataset: V2I mmWave bounding-box features of a vehicle seen by a roadside camera.".into(),
        task_desc: format!(
            "Task: predict the optimal beam indices for the next {t_pred} steps given the previous {} steps.",
            row.len()
        ),
        stats_desc: format!(
            "Input statistics of channel {}: min {}, max {}, median {}, trend {}, top lags {}.",
            CHANNEL_NAMES[channel],
            fmt_sig4(min),
            fmt_sig4(max),
            fmt_sig4(median(row)),
            trend,
            lags.join(" ")
        ),
    })
}

/// `M × T_pred` logits; column `j` scores the beams for future step `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamPrediction {
    scores: Tensor,
}

impl BeamPrediction {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.ndim() != 2 {
            return Err(Error::Dimension(format!("prediction scores {:?}", scores.shape())));
        }
        Ok(BeamPrediction { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn n_beams(&self) -> usize {
        self.scores.rows()
    }

    pub fn t_pred(&self) -> usize {
        self.scores.cols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_beams()).map(|m| self.scores.get(m, j)).collect()
    }

    /// Softmax of column `j`.
    pub fn probabilities(&self, j: usize) -> Vec<f64> {
        let col = self.column(j);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }
}

/// Per-step argmax; ties go to the lowest beam index.
pub fn predict_beams(pred: &BeamPrediction) -> Vec<usize> {
    (0..pred.t_pred()).map(|j| argmax(&pred.column(j))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamLlmConfig {
    pub t_hist: usize,
    pub t_pred: usize,
    pub n_beams: usize,
    pub patch: PatchConfig,
    /// Patch embedding width `d_m`.
    pub d_model: usize,
    /// Reprogramming heads `K`.
    pub n_heads: usize,
    /// Text prototypes `V'`.
    pub n_prototypes: usize,
    pub pap: bool,
    pub backbone: BackboneConfig,
    /// Seed for the trainable layers.
    pub seed: u64,
}

impl Default for BeamLlmConfig {
    fn default() -> Self {
        Self::for_mode(Mode::Standard)
    }
}

impl BeamLlmConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let patch = match mode {
            Mode::Standard => PatchConfig { patch_len: 4, stride: 2 },
            Mode::Fewshot => PatchConfig { patch_len: 2, stride: 1 },
        };
        BeamLlmConfig {
            t_hist: mode.t_hist(),
            t_pred: mode.t_pred(),
            n_beams: 32,
            patch,
            d_model: 32,
            n_heads: 4,
            n_prototypes: 64,
            pap: true,
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }

    /// A few-hundred-parameter model for finite-difference checks.
    pub fn tiny() -> Self {
        BeamLlmConfig {
            t_hist: 4,
            t_pred: 2,
            n_beams: 4,
            patch: PatchConfig { patch_len: 2, stride: 2 },
            d_model: 8,
            n_heads: 2,
            n_prototypes: 8,
            pap: true,
            backbone: BackboneConfig {
                vocab_size: 40,
                hidden: 16,
                n_layers: 1,
                n_heads: 2,
                max_seq: 64,
                seed: 1,
            },
            seed: 2,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patch.n_patches(self.t_hist)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patch.validate(self.t_hist)?;
        if self.t_hist < 2 || self.t_pred == 0 || self.n_beams == 0 || self.n_prototypes == 0 {
            return Err(Error::Config("t_hist >= 2 and positive t_pred, n_beams, n_prototypes required".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} reprogramming heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_prototypes > self.backbone.vocab_size {
            return Err(Error::Config("more prototypes than vocabulary rows".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

pub struct BeamLlm {
    cfg: BeamLlmConfig,
    store: ParamStore,
    backbone: Backbone,
    embed_w: ParamId,
    embed_b: ParamId,
    proto: ParamId,
    heads: Vec<Head>,
    w_out: ParamId,
    flat_w: ParamId,
    flat_b: ParamId,
    fusion: [(ParamId, ParamId); 3],
    shared_prefix: RefCell<Option<Rc<PrefixKv>>>,
    stats_cache: RefCell<StatsCache>,
}

/// Default memory budget for cached per-sample prompt keys/values.
pub const DEFAULT_PROMPT_CACHE_BYTES: usize = 1 << 30;

/// Backbone keys/values of per-sample statistics prompts, keyed by token ids.
/// The backbone is frozen, so entries stay valid until parameters are reloaded.
/// Entries stop being added once `budget` bytes are held.
#[derive(Debug)]
struct StatsCache {
    entries: HashMap<Vec<usize>, Rc<PrefixKv>>,
    bytes: usize,
    budget: usize,
}

impl StatsCache {
    fn new(budget: usize) -> Self {
        StatsCache {
            entries: HashMap::new(),
            bytes: 0,
            budget,
        }
    }

    fn insert(&mut self, key: Vec<usize>, kv: Rc<PrefixKv>) {
        if self.entries.contains_key(&key) {
            return;
        }
        let n = kv.n_bytes() + key.len() * std::mem::size_of::<usize>();
        if self.bytes + n <= self.budget {
            self.bytes += n;
            self.entries.insert(key, kv);
        }
    }
}

/// Linear-layer init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

impl BeamLlm {
    pub fn new(cfg: BeamLlmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = build_backbone(&cfg.backbone, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (lp, dm, d, vp, v) = (
            cfg.patch.patch_len,
            cfg.d_model,
            cfg.backbone.hidden,
            cfg.n_prototypes,
            cfg.backbone.vocab_size,
        );
        let dk = dm / cfg.n_heads;
        let mut add = |store: &mut ParamStore, name: &str, fan_in: usize, shape: &[usize]| {
            store.add(name, linear_init(&mut rng, fan_in, shape), true)
        };
        let embed_w = add(&mut store, "reprogram.patch_embed.w", lp, &[lp, dm])?;
        let embed_b = add(&mut store, "reprogram.patch_embed.b", lp, &[dm])?;
        let proto = add(&mut store, "reprogram.proto", v, &[v, vp])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for k in 0..cfg.n_heads {
            heads.push(Head {
                wq: add(&mut store, &format!("reprogram.head{k}.wq"), dm, &[dm, dk])?,
                wk: add(&mut store, &format!("reprogram.head{k}.wk"), d, &[d, dk])?,
                wv: add(&mut store, &format!("reprogram.head{k}.wv"), d, &[d, dk])?,
            });
        }
        let w_out = add(&mut store, "reprogram.w_out", dm, &[dm, d])?;
        let pd = cfg.n_patches() * d;
        let flat_w = add(&mut store, "output.w_flat", pd, &[pd, cfg.t_pred])?;
        let flat_b = add(&mut store, "output.b_flat", pd, &[cfg.t_pred])?;
        let mut fusion = Vec::new();
        for (i, (fi, fo)) in [(4, 16), (16, 32), (32, cfg.n_beams)].into_iter().enumerate() {
            let w = add(&mut store, &format!("output.fc{}.w", i + 1), fi, &[fi, fo])?;
            let b = add(&mut store, &format!("output.fc{}.b", i + 1), fi, &[fo])?;
            fusion.push((w, b));
        }
        Ok(BeamLlm {
            cfg,
            store,
            backbone,
            embed_w,
            embed_b,
            proto,
            heads,
            w_out,
            flat_w,
            flat_b,
            fusion: [fusion[0], fusion[1], fusion[2]],
            shared_prefix: RefCell::new(None),
            stats_cache: RefCell::new(StatsCache::new(DEFAULT_PROMPT_CACHE_BYTES)),
        })
    }

    pub fn config(&self) -> &BeamLlmConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn set_pap(&mut self, on: bool) {
        self.cfg.pap = on;
    }

    /// Caps the memory spent on cached prompt keys/values; 0 disables caching.
    pub fn set_prompt_cache_budget(&mut self, bytes: usize) {
        self.stats_cache.replace(StatsCache::new(bytes));
    }

    /// Number of cached prompts and the bytes they hold.
    pub fn prompt_cache_usage(&self) -> (usize, usize) {
        let c = self.stats_cache.borrow();
        (c.entries.len(), c.bytes)
    }

    /// Ids of the frozen parameters (backbone including `E`).
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    pub fn prompts(&self, history: &Tensor) -> Result<Vec<PromptText>> {
        (0..4).map(|i| build_prompt(history, i, self.cfg.t_pred)).collect()
    }

    fn shared_prefix(&self) -> Result<Rc<PrefixKv>> {
        if let Some(p) = self.shared_prefix.borrow().as_ref() {
            return Ok(p.clone());
        }
        let any = Tensor::zeros(&[4, self.cfg.t_hist]);
        let p = build_prompt(&any, 0, self.cfg.t_pred)?;
        let text = format!("{} {}", p.dataset_desc, p.task_desc);
        let ids = tokenize(&text, self.cfg.backbone.vocab_size);
        let emb = self.backbone.embed_tokens(&self.store, &ids)?;
        let kv = self.backbone.encode_prefixes(&self.store, &[emb], None)?.remove(0);
        *self.shared_prefix.borrow_mut() = Some(kv.clone());
        Ok(kv)
    }

    /// Prompt caches for every (channel, sample), channel-major.
    fn prefixes(&self, histories: &[&Tensor]) -> Result<Vec<Rc<PrefixKv>>> {
        let shared = self.shared_prefix()?;
        let mut keys = Vec::with_capacity(4 * histories.len());
        for i in 0..4 {
            for h in histories {
                let p = build_prompt(h, i, self.cfg.t_pred)?;
                keys.push(tokenize(&p.stats_desc, self.cfg.backbone.vocab_size));
            }
        }
        let mut own: Vec<Option<Rc<PrefixKv>>> = {
            let cache = self.stats_cache.borrow();
            keys.iter().map(|k| cache.entries.get(k).cloned()).collect()
        };
        let missing: Vec<usize> = (0..keys.len()).filter(|&j| own[j].is_none()).collect();
        if !missing.is_empty() {
            let embeds = missing
                .iter()
                .map(|&j| self.backbone.embed_tokens(&self.store, &keys[j]))
                .collect::<Result<Vec<_>>>()?;
            let fresh = self.backbone.encode_suffixes(&self.store, &embeds, Some(&shared))?;
            let mut cache = self.stats_cache.borrow_mut();
            for (&j, kv) in missing.iter().zip(fresh) {
                let kv = Rc::new(kv);
                cache.insert(keys[j].clone(), kv.clone());
                own[j] = Some(kv);
            }
        }
        Ok(own
            .into_iter()
            .map(|o| PrefixKv::join(&shared, &o.expect("filled above")))
            .collect())
    }

    /// Reprogrammed patch rows (R × D) for stacked patch embeddings.
    fn reprogram(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let p = |g: &mut Graph, id| g.param(&self.store, id);
        let e = p(g, self.backbone.vocab_id());
        let w_proto = p(g, self.proto);
        let w_proto_t = g.transpose(w_proto)?;
        let protos = g.matmul(w_proto_t, e)?;
        let cat = |g: &mut Graph, pick: fn(&Head) -> ParamId| -> Result<Var> {
            let parts: Vec<Var> = self.heads.iter().map(|h| g.param(&self.store, pick(h))).collect();
            g.concat_cols(&parts)
        };
        let wq = cat(g, |h| h.wq)?;
        let wk = cat(g, |h| h.wk)?;
        let wv = cat(g, |h| h.wv)?;
        let q = g.matmul(emb, wq)?;
        let k = g.matmul(protos, wk)?;
        let v = g.matmul(protos, wv)?;
        let rows = g.shape(emb)[0];
        let z = g.attention(
            q,
            k,
            v,
            self.cfg.n_heads,
            vec![AttnSegment {
                q_start: 0,
                q_len: rows,
                k_start: 0,
                k_len: self.cfg.n_prototypes,
                past: None,
                causal: false,
            }],
        )?;
        let w_out = p(g, self.w_out);
        g.matmul(z, w_out)
    }
}

impl BeamModel for BeamLlm {
    fn kind(&self) -> &'static str {
        "beamllm"
    }

    fn t_hist(&self) -> usize {
        self.cfg.t_hist
    }

    fn t_pred(&self) -> usize {
        self.cfg.t_pred
    }

    fn n_beams(&self) -> usize {
        self.cfg.n_beams
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn meta(&self) -> Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn pap(&self) -> Option<bool> {
        Some(self.cfg.pap)
    }

    fn params_reloaded(&mut self) {
        self.shared_prefix.replace(None);
        self.stats_cache.borrow_mut().entries.clear();
        self.stats_cache.borrow_mut().bytes = 0;
    }

    fn logits(&self, g: &mut Graph, histories: &[&Tensor]) -> Result<Var> {
        let s = histories.len();
        if s == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let (lp, np, d) = (self.cfg.patch.patch_len, self.cfg.n_patches(), self.cfg.backbone.hidden);
        // channel-major stacking: block (i, s) holds channel i of sample s
        let mut patches = Vec::with_capacity(4 * s * np * lp);
        for h in histories {
            check_history(h, self.cfg.t_hist)?;
        }
        for i in 0..4 {
            for h in histories {
                let norm = revin_normalize(h.row(i))?;
                patches.extend_from_slice(patchify(&norm.values, self.cfg.patch)?.data());
            }
        }
        let rows = 4 * s * np;
        let x = g.constant(Tensor::matrix(rows, lp, patches)?);
        let (ew, eb) = (g.param(&self.store, self.embed_w), g.param(&self.store, self.embed_b));
        let emb = g.linear(x, ew, Some(eb))?;
        let body = self.reprogram(g, emb)?;
        let prefixes: Vec<Option<Rc<PrefixKv>>> = if self.cfg.pap {
            self.prefixes(histories)?.into_iter().map(Some).collect()
        } else {
            vec![None; 4 * s]
        };
        let seqs: Vec<SeqSpec> = prefixes.into_iter().map(|prefix| SeqSpec { rows: np, prefix }).collect();
        let (out, _) = self.backbone.forward_stacked(g, &self.store, body, &seqs)?;
        let flat = g.reshape(out, &[4 * s, np * d])?;
        let (fw, fb) = (g.param(&self.store, self.flat_w), g.param(&self.store, self.flat_b));
        let c = g.linear(flat, fw, Some(fb))?;
        // (4·S) × T  →  4 × (S·T)  →  (S·T) × 4
        let c = g.reshape(c, &[4, s * self.cfg.t_pred])?;
        let mut h = g.transpose(c)?;
        for (k, (w, b)) in self.fusion.iter().enumerate() {
            let (w, b) = (g.param(&self.store, *w), g.param(&self.store, *b));
            h = g.linear(h, w, Some(b))?;
            if k < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{check_params, DEFAULT_FLOOR, DEFAULT_STEP};
    use proptest::prelude::*;

    pub(crate) fn tiny_config() -> BeamLlmConfig {
        BeamLlmConfig::tiny()
    }

    fn window(seed: u64, t: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, &[4, t], 0.5)
    }

    #[test]
    fn revin_examples() {
        assert!(revin_normalize(&[5.0; 4]).unwrap().values.iter().all(|v| v.abs() < 1e-12));
        let r = revin_normalize(&[0.0, 2.0]).unwrap();
        assert!((r.values[0] + 1.0).abs() < 1e-5 && (r.values[1] - 1.0).abs() < 1e-5);
        assert!(revin_normalize(&[1.0]).is_err());
    }

    #[test]
    fn patch_examples() {
        let row: Vec<f64> = (0..8).map(f64::from).collect();
        let p = patchify(&row, PatchConfig { patch_len: 4, stride: 2 }).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(3), &[6.0, 7.0, 7.0, 7.0]);
        let p = patchify(&[1.0, 2.0, 3.0], PatchConfig { patch_len: 2, stride: 1 }).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        let p = patchify(&[1.0, 2.0, 3.0], PatchConfig { patch_len: 3, stride: 3 }).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        assert!(matches!(patchify(&[1.0, 2.0], PatchConfig { patch_len: 3, stride: 1 }), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_examples() {
        let constant = Tensor::full(&[4, 8], 0.25);
        let p = build_prompt(&constant, 0, 5).unwrap();
        assert!(p.stats_desc.contains("min 0.2500, max 0.2500, median 0.2500, trend flat"), "{}", p.stats_desc);
        let rising = Tensor::from_rows(&[
            (0..8).map(|i| 0.1 * i as f64).collect(),
            vec![0.5; 8],
            vec![0.1; 8],
            vec![0.1; 8],
        ])
        .unwrap();
        let p = build_prompt(&rising, 0, 5).unwrap();
        assert!(p.stats_desc.contains("trend up"));
        assert_eq!(p, build_prompt(&rising, 0, 5).unwrap());
        assert!(p.task_desc.contains("next 5 steps") && p.task_desc.contains("previous 8 steps"));
        assert_eq!(top_lags(&[1.0, 2.0, 3.0]), vec![2, 1]);
    }

    #[test]
    fn sig4_formatting() {
        assert_eq!(fmt_sig4(0.123456), "0.1235");
        assert_eq!(fmt_sig4(12.3456), "12.35");
        assert_eq!(fmt_sig4(0.0), "0");
        assert_eq!(fmt_sig4(-0.000012345), "-0.00001234");
        assert_eq!(fmt_sig4(123456.0), "123456");
    }

    #[test]
    fn predict_beams_examples() {
        let mut s = Tensor::zeros(&[4, 3]);
        s.data_mut()[2 * 3] = 1.0;
        s.data_mut()[3 * 3 + 1] = 1.0;
        let p = BeamPrediction::new(s).unwrap();
        assert_eq!(predict_beams(&p), vec![2, 3, 0]);
        let shifted = BeamPrediction::new(Tensor::new(vec![4, 3], p.scores().data().iter().map(|x| x + 7.0).collect()).unwrap()).unwrap();
        assert_eq!(predict_beams(&shifted), predict_beams(&p));
        assert!(p.probabilities(2).iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn standard_output_shape_and_probabilities() {
        let cfg = BeamLlmConfig {
            backbone: BackboneConfig { hidden: 16, n_layers: 1, ..BackboneConfig::default() },
            ..BeamLlmConfig::default()
        };
        let m = BeamLlm::new(cfg).unwrap();
        let pred = m.predict(&window(1, 8)).unwrap();
        assert_eq!(pred.scores().shape(), &[32, 5]);
        for j in 0..5 {
            assert!((pred.probabilities(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(pred, m.predict(&window(1, 8)).unwrap());
    }

    #[test]
    fn batched_equals_single() {
        let m = BeamLlm::new(tiny_config()).unwrap();
        let (a, b) = (window(1, 4), window(2, 4));
        let both = m.predict_batch(&[&a, &b]).unwrap();
        assert!(both[0].scores().max_abs_diff(m.predict(&a).unwrap().scores()) < 1e-12);
        assert!(both[1].scores().max_abs_diff(m.predict(&b).unwrap().scores()) < 1e-12);
    }

    #[test]
    fn pap_changes_outputs() {
        let mut m = BeamLlm::new(tiny_config()).unwrap();
        let w = window(3, 4);
        let on = m.predict(&w).unwrap();
        m.set_pap(false);
        let off = m.predict(&w).unwrap();
        assert!(on.scores().max_abs_diff(off.scores()) > 1e-9);
    }

    #[test]
    fn single_prototype_collapses_attention() {
        let cfg = BeamLlmConfig { n_prototypes: 1, ..tiny_config() };
        let m = BeamLlm::new(cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(window(4, 8).reshape(&[4, 8]).unwrap());
        let x = g.reshape(x, &[4, 8]).unwrap();
        let out = m.reprogram(&mut g, x).unwrap();
        let out = g.value(out).clone();
        for r in 1..4 {
            assert!(out.row(r).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn prototype_permutation_invariance() {
        let m = BeamLlm::new(tiny_config()).unwrap();
        let mut permuted = BeamLlm::new(tiny_config()).unwrap();
        let w = m.store.tensor(m.proto).clone();
        let (v, vp) = (w.rows(), w.cols());
        let perm: Vec<usize> = (0..vp).rev().collect();
        let mut data = vec![0.0; v * vp];
        for r in 0..v {
            for (c, &src) in perm.iter().enumerate() {
                data[r * vp + c] = w.get(r, src);
            }
        }
        permuted.store.set_tensor(permuted.proto, Tensor::matrix(v, vp, data).unwrap()).unwrap();
        let x = window(5, 4);
        assert!(m.predict(&x).unwrap().scores().max_abs_diff(permuted.predict(&x).unwrap().scores()) < 1e-12);
    }

    #[test]
    fn frozen_count_excludes_backbone() {
        let m = BeamLlm::new(tiny_config()).unwrap();
        let (total, trainable) = m.store().counts();
        let frozen: usize = m.frozen_ids().iter().map(|id| m.store().tensor(*id).len()).sum();
        assert_eq!(total - trainable, frozen);
        assert!(m.frozen_ids().iter().all(|id| !m.store().get(*id).trainable));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for pap in [true, false] {
            let probe = RefCell::new(BeamLlm::new(BeamLlmConfig { pap, ..tiny_config() }).unwrap());
            let mut store = probe.borrow().store.clone();
            let hs = [window(6, 4), window(7, 4)];
            let refs: Vec<&Tensor> = hs.iter().collect();
            let report = check_params(
                &mut store,
                |st, g| {
                    probe.borrow_mut().store = st.clone();
                    let l = probe.borrow().logits(g, &refs)?;
                    g.cross_entropy(l, &[1, 3, 0, 2])
                },
                DEFAULT_STEP,
                DEFAULT_FLOOR,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "pap={pap}: {report:?}");
            assert!(report.checked > 100);
        }
    }

    proptest! {
        #[test]
        fn patch_count_formula((t, lp, s) in (1usize..=16)
            .prop_flat_map(|t| (Just(t), 1..=t))
            .prop_flat_map(|(t, lp)| (Just(t), Just(lp), 1..=lp)))
        {
            let row: Vec<f64> = (0..t).map(|i| i as f64).collect();
            let cfg = PatchConfig { patch_len: lp, stride: s };
            prop_assert_eq!(patchify(&row, cfg).unwrap().rows(), (t - lp) / s + 2);
        }

        #[test]
        fn revin_round_trip(row in proptest::collection::vec(-50.0f64..50.0, 2..20)) {
            let r = revin_normalize(&row).unwrap();
            for (a, b) in revin_invert(&r).iter().zip(&row) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
