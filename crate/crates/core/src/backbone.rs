//! Frozen decoder-only transformer, its token table and a hash tokenizer.
//!
//! Blocks are pre-norm: `x + attn(ln1(x))` then `x + mlp(ln2(x))` with a
//! 4x gelu MLP, learned positions and a final layer norm. Every parameter is
//! registered frozen under the `backbone.` prefix; `backbone.wte` doubles as
//! the vocabulary embedding `E` used for reprogramming.
//!
//! Prompt prefixes never need gradients, so they are run once and kept as
//! per-layer key/value caches ([`PrefixKv`]) that body rows attend to.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::gaussian;
use crate::numcore::{AttnSegment, Checkpoint, Graph, ParamId, ParamStore, PastKv, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 1000,
            hidden: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.hidden == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Cached keys/values of an already-processed prefix, one entry per layer.
#[derive(Clone, Debug)]
pub struct PrefixKv {
    pub len: usize,
    pub layers: Vec<Rc<PastKv>>,
}

impl PrefixKv {
    /// `head` followed by `tail`, layer by layer.
    pub fn join(head: &PrefixKv, tail: &PrefixKv) -> Rc<PrefixKv> {
        let stack = |a: &Tensor, b: &Tensor| {
            let mut rows = a.data().to_vec();
            rows.extend_from_slice(b.data());
            Tensor::new(vec![a.rows() + b.rows(), a.cols()], rows).expect("matching widths")
        };
        let layers = head
            .layers
            .iter()
            .zip(&tail.layers)
            .map(|(a, b)| {
                Rc::new(PastKv {
                    keys: stack(&a.keys, &b.keys),
                    values: stack(&a.values, &b.values),
                })
            })
            .collect();
        Rc::new(PrefixKv {
            len: head.len + tail.len,
            layers,
        })
    }

    pub fn n_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.keys.data().len() + l.values.data().len()) * std::mem::size_of::<f64>())
            .sum()
    }
}

/// One sequence inside a stacked forward: `rows` body rows that continue
/// after an optional cached prefix.
#[derive(Clone, Debug)]
pub struct SeqSpec {
    pub rows: usize,
    pub prefix: Option<Rc<PrefixKv>>,
}

impl SeqSpec {
    fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, |p| p.len)
    }
}

/// Registers a freshly initialized, frozen backbone in `store`.
pub fn build_backbone(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden;
    let mut add = |name: String, t: Tensor| store.add(name, t, false);
    let wte = add("backbone.wte".into(), gaussian(&mut rng, &[cfg.vocab_size, d], INIT_STD))?;
    let wpe = add("backbone.wpe".into(), gaussian(&mut rng, &[cfg.max_seq, d], INIT_STD))?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("backbone.h{l}.{s}");
        blocks.push(Block {
            ln1_g: add(p("ln1.g"), Tensor::full(&[d], 1.0))?,
            ln1_b: add(p("ln1.b"), Tensor::zeros(&[d]))?,
            w_qkv: add(p("attn.w_qkv"), gaussian(&mut rng, &[d, 3 * d], INIT_STD))?,
            b_qkv: add(p("attn.b_qkv"), Tensor::zeros(&[3 * d]))?,
            w_o: add(p("attn.w_o"), gaussian(&mut rng, &[d, d], INIT_STD))?,
            b_o: add(p("attn.b_o"), Tensor::zeros(&[d]))?,
            ln2_g: add(p("ln2.g"), Tensor::full(&[d], 1.0))?,
            ln2_b: add(p("ln2.b"), Tensor::zeros(&[d]))?,
            w_fc: add(p("mlp.w_fc"), gaussian(&mut rng, &[d, 4 * d], INIT_STD))?,
            b_fc: add(p("mlp.b_fc"), Tensor::zeros(&[4 * d]))?,
            w_proj: add(p("mlp.w_proj"), gaussian(&mut rng, &[4 * d, d], INIT_STD))?,
            b_proj: add(p("mlp.b_proj"), Tensor::zeros(&[d]))?,
        });
    }
    let lnf_g = add("backbone.lnf.g".into(), Tensor::full(&[d], 1.0))?;
    let lnf_b = add("backbone.lnf.b".into(), Tensor::zeros(&[d]))?;
    Ok(Backbone {
        cfg: cfg.clone(),
        wte,
        wpe,
        blocks,
        lnf_g,
        lnf_b,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    /// The vocabulary embedding table `E` (V × D).
    pub fn vocab_id(&self) -> ParamId {
        self.wte
    }

    pub fn vocab<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.tensor(self.wte)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wte, self.wpe];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    /// Copies `backbone.*` tensors from a checkpoint (which may hold only a
    /// backbone or a whole model).
    pub fn load_weights(&self, store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
        for id in self.param_ids() {
            let name = store.get(id).name.clone();
            let k = ckpt
                .entries
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            store
                .set_tensor(id, ckpt.tensors[k].clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Rows of `E` for `ids` (L × D); a constant with respect to training.
    pub fn embed_tokens(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let e = store.tensor(self.wte);
        let d = self.cfg.hidden;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::Index(format!("token id {id} >= vocab size {}", self.cfg.vocab_size)));
            }
            data.extend_from_slice(e.row(id));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Runs stacked sequences through the blocks. `x` holds every sequence's
    /// body rows back to back; row `j` of a sequence sits at position
    /// `prefix_len + j`. Returns the final-norm output (same rows as `x`) and,
    /// per layer, the keys and values of those rows.
    pub fn forward_stacked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seqs: &[SeqSpec],
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let d = self.cfg.hidden;
        let total: usize = seqs.iter().map(|s| s.rows).sum();
        let shape = g.shape(x).to_vec();
        if shape != [total, d] {
            return Err(Error::Dimension(format!("backbone input {shape:?}, expected [{total}, {d}]")));
        }
        let wpe = store.tensor(self.wpe);
        let mut pos = Vec::with_capacity(total * d);
        for s in seqs {
            if s.prefix_len() + s.rows > self.cfg.max_seq {
                return Err(Error::Length(format!(
                    "sequence of {} rows exceeds max_seq {}",
                    s.prefix_len() + s.rows,
                    self.cfg.max_seq
                )));
            }
            if let Some(p) = &s.prefix {
                if p.layers.len() != self.blocks.len() {
                    return Err(Error::Dimension("prefix cache built for another depth".into()));
                }
            }
            for j in 0..s.rows {
                pos.extend_from_slice(wpe.row(s.prefix_len() + j));
            }
        }
        let pos = g.constant(Tensor::new(vec![total, d], pos)?);
        let mut h = g.add(x, pos)?;
        let mut kvs = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |g: &mut Graph, id| g.param(store, id);
            let (g1, b1) = (p(g, b.ln1_g), p(g, b.ln1_b));
            let a = g.layer_norm(h, g1, b1, LN_EPS)?;
            let (w, bias) = (p(g, b.w_qkv), p(g, b.b_qkv));
            let qkv = g.linear(a, w, Some(bias))?;
            let q = g.slice_cols(qkv, 0, d)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let mut start = 0;
            let segments = seqs
                .iter()
                .map(|s| {
                    let seg = AttnSegment {
                        q_start: start,
                        q_len: s.rows,
                        k_start: start,
                        k_len: s.rows,
                        past: s.prefix.as_ref().map(|p| p.layers[l].clone()),
                        causal: true,
                    };
                    start += s.rows;
                    seg
                })
                .collect();
            let att = g.attention(q, k, v, self.cfg.n_heads, segments)?;
            let (w, bias) = (p(g, b.w_o), p(g, b.b_o));
            let o = g.linear(att, w, Some(bias))?;
            h = g.add(h, o)?;
            let (g2, b2) = (p(g, b.ln2_g), p(g, b.ln2_b));
            let a = g.layer_norm(h, g2, b2, LN_EPS)?;
            let (w, bias) = (p(g, b.w_fc), p(g, b.b_fc));
            let f = g.linear(a, w, Some(bias))?;
            let f = g.gelu(f)?;
            let (w, bias) = (p(g, b.w_proj), p(g, b.b_proj));
            let f = g.linear(f, w, Some(bias))?;
            h = g.add(h, f)?;
            kvs.push((k, v));
        }
        let (gf, bf) = (g.param(store, self.lnf_g), g.param(store, self.lnf_b));
        let out = g.layer_norm(h, gf, bf, LN_EPS)?;
        Ok((out, kvs))
    }

    /// Plain forward of one `L × D` embedding sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let rows = g.shape(x).first().copied().unwrap_or(0);
        Ok(self.forward_stacked(g, store, x, &[SeqSpec { rows, prefix: None }])?.0)
    }

    /// Processes each embedded prefix (continuing after `base`, if any) and
    /// returns its key/value cache including `base`'s entries.
    pub fn encode_prefixes(
        &self,
        store: &ParamStore,
        prefixes: &[Tensor],
        base: Option<&Rc<PrefixKv>>,
    ) -> Result<Vec<Rc<PrefixKv>>> {
        let own = self.encode_suffixes(store, prefixes, base)?;
        Ok(match base {
            Some(b) => own.iter().map(|o| PrefixKv::join(b, o)).collect(),
            None => own.into_iter().map(Rc::new).collect(),
        })
    }

    /// Like [`Backbone::encode_prefixes`] but keeps only the rows produced by
    /// each prefix itself; [`PrefixKv::join`] reattaches `base`.
    pub fn encode_suffixes(
        &self,
        store: &ParamStore,
        prefixes: &[Tensor],
        base: Option<&Rc<PrefixKv>>,
    ) -> Result<Vec<PrefixKv>> {
        let d = self.cfg.hidden;
        let seqs: Vec<SeqSpec> = prefixes
            .iter()
            .map(|p| SeqSpec {
                rows: p.rows(),
                prefix: base.cloned(),
            })
            .collect();
        let mut data = Vec::new();
        for p in prefixes {
            if p.cols() != d {
                return Err(Error::Dimension(format!("prefix width {} vs hidden {d}", p.cols())));
            }
            data.extend_from_slice(p.data());
        }
        let total: usize = seqs.iter().map(|s| s.rows).sum();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![total, d], data)?);
        let (_, kvs) = self.forward_stacked(&mut g, store, x, &seqs)?;
        let mut out = Vec::with_capacity(prefixes.len());
        let mut start = 0;
        for s in &seqs {
            let layers = kvs
                .iter()
                .map(|(k, v)| {
                    let cut = |t: &Tensor| t.slice_rows(start, s.rows);
                    Ok(Rc::new(PastKv {
                        keys: cut(g.value(*k))?,
                        values: cut(g.value(*v))?,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(PrefixKv { len: s.rows, layers });
            start += s.rows;
        }
        Ok(out)
    }

    /// Runs `prefix ++ body` and keeps the last `P` rows.
    pub fn forward_with_prefix(&self, g: &mut Graph, store: &ParamStore, prefix: &Tensor, body: Var) -> Result<Var> {
        let rows = g.shape(body).first().copied().unwrap_or(0);
        if prefix.rows() + rows > self.cfg.max_seq {
            return Err(Error::Length(format!(
                "prefix {} + body {rows} exceeds max_seq {}",
                prefix.rows(),
                self.cfg.max_seq
            )));
        }
        let cache = if prefix.rows() == 0 {
            None
        } else {
            self.encode_prefixes(store, std::slice::from_ref(prefix), None)?.pop()
        };
        Ok(self.forward_stacked(g, store, body, &[SeqSpec { rows, prefix: cache }])?.0)
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on anything that is not alphanumeric and hashes each
/// word to `1 + fnv1a64(word) mod (V - 1)`. Id 0 is reserved for padding.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    assert!(vocab_size >= 2, "vocabulary needs room for padding plus one token");
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| 1 + (fnv1a64(w.as_bytes()) % (vocab_size as u64 - 1)) as usize)
        .collect()
}
