//! RNN, GRU and LSTM baselines.
//!
//! A linear 4 → H input map feeds a stack of recurrent layers (PyTorch cell
//! conventions, two bias vectors per layer). After the history is encoded the
//! last observed box is replayed as input for every future step and a linear
//! readout turns the top hidden state into beam logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{check_history, BeamModel};
use crate::numcore::params::uniform;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scenario::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::Config(format!("unknown recurrent kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentConfig {
    pub kind: CellKind,
    pub hidden: usize,
    pub n_layers: usize,
    pub t_hist: usize,
    pub t_pred: usize,
    pub n_beams: usize,
    pub seed: u64,
}

impl RecurrentConfig {
    pub fn new(kind: CellKind, mode: Mode) -> Self {
        RecurrentConfig {
            kind,
            hidden: 32,
            n_layers: 4,
            t_hist: mode.t_hist(),
            t_pred: mode.t_pred(),
            n_beams: 32,
            seed: 0,
        }
    }

    /// Small two-layer model for finite-difference checks.
    pub fn tiny(kind: CellKind) -> Self {
        RecurrentConfig {
            kind,
            hidden: 4,
            n_layers: 2,
            t_hist: 3,
            t_pred: 2,
            n_beams: 5,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

pub struct RecurrentModel {
    cfg: RecurrentConfig,
    store: ParamStore,
    in_w: ParamId,
    in_b: ParamId,
    layers: Vec<Layer>,
    out_w: ParamId,
    out_b: ParamId,
}

struct State {
    h: Var,
    c: Option<Var>,
}

impl RecurrentModel {
    pub fn new(cfg: RecurrentConfig) -> Result<Self> {
        if cfg.hidden == 0 || cfg.n_layers == 0 || cfg.t_hist == 0 || cfg.t_pred == 0 || cfg.n_beams == 0 {
            return Err(Error::Config(format!("degenerate recurrent config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let gh = cfg.kind.gates() * h;
        let mut add = |store: &mut ParamStore, name: &str, fan_in: usize, shape: &[usize]| {
            store.add(name, uniform(&mut rng, shape, 1.0 / (fan_in as f64).sqrt()), true)
        };
        let in_w = add(&mut store, "input.w", 4, &[4, h])?;
        let in_b = add(&mut store, "input.b", 4, &[h])?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(Layer {
                w_ih: add(&mut store, &format!("layer{l}.w_ih"), h, &[h, gh])?,
                w_hh: add(&mut store, &format!("layer{l}.w_hh"), h, &[h, gh])?,
                b_ih: add(&mut store, &format!("layer{l}.b_ih"), h, &[gh])?,
                b_hh: add(&mut store, &format!("layer{l}.b_hh"), h, &[gh])?,
            });
        }
        let out_w = add(&mut store, "readout.w", h, &[h, cfg.n_beams])?;
        let out_b = add(&mut store, "readout.b", h, &[cfg.n_beams])?;
        Ok(RecurrentModel {
            cfg,
            store,
            in_w,
            in_b,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.cfg
    }

    fn cell(&self, g: &mut Graph, layer: &Layer, x: Var, st: &State) -> Result<State> {
        let h = self.cfg.hidden;
        let p = |g: &mut Graph, id| g.param(&self.store, id);
        let (w_ih, b_ih, w_hh, b_hh) = (p(g, layer.w_ih), p(g, layer.b_ih), p(g, layer.w_hh), p(g, layer.b_hh));
        let gi = g.linear(x, w_ih, Some(b_ih))?;
        let gh = g.linear(st.h, w_hh, Some(b_hh))?;
        match self.cfg.kind {
            CellKind::Rnn => {
                let a = g.add(gi, gh)?;
                Ok(State { h: g.tanh(a)?, c: None })
            }
            CellKind::Gru => {
                let gate = |g: &mut Graph, k: usize| -> Result<(Var, Var)> {
                    Ok((g.slice_cols(gi, k * h, h)?, g.slice_cols(gh, k * h, h)?))
                };
                let (ir, hr) = gate(g, 0)?;
                let (iz, hz) = gate(g, 1)?;
                let (in_, hn) = gate(g, 2)?;
                let r = g.add(ir, hr)?;
                let r = g.sigmoid(r)?;
                let z = g.add(iz, hz)?;
                let z = g.sigmoid(z)?;
                let rn = g.mul(r, hn)?;
                let n = g.add(in_, rn)?;
                let n = g.tanh(n)?;
                // h' = n + z (h - n)
                let d = g.sub(st.h, n)?;
                let zd = g.mul(z, d)?;
                Ok(State { h: g.add(n, zd)?, c: None })
            }
            CellKind::Lstm => {
                let a = g.add(gi, gh)?;
                let i = g.slice_cols(a, 0, h)?;
                let f = g.slice_cols(a, h, h)?;
                let gg = g.slice_cols(a, 2 * h, h)?;
                let o = g.slice_cols(a, 3 * h, h)?;
                let (i, f, gg, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.tanh(gg)?, g.sigmoid(o)?);
                let c_prev = st.c.expect("lstm state carries a cell");
                let fc = g.mul(f, c_prev)?;
                let ig = g.mul(i, gg)?;
                let c = g.add(fc, ig)?;
                let tc = g.tanh(c)?;
                Ok(State { h: g.mul(o, tc)?, c: Some(c) })
            }
        }
    }
}

impl BeamModel for RecurrentModel {
    fn kind(&self) -> &'static str {
        self.cfg.kind.name()
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

    fn logits(&self, g: &mut Graph, histories: &[&Tensor]) -> Result<Var> {
        let s = histories.len();
        if s == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let (th, h) = (self.cfg.t_hist, self.cfg.hidden);
        for x in histories {
            check_history(x, th)?;
        }
        let column = |t: usize| -> Result<Tensor> {
            let data = histories.iter().flat_map(|x| (0..4).map(move |i| x.get(i, t))).collect();
            Tensor::matrix(s, 4, data)
        };
        let zeros = g.constant(Tensor::zeros(&[s, h]));
        let lstm = self.cfg.kind == CellKind::Lstm;
        let mut states: Vec<State> = (0..self.layers.len())
            .map(|_| State {
                h: zeros,
                c: lstm.then_some(zeros),
            })
            .collect();
        let (in_w, in_b) = (g.param(&self.store, self.in_w), g.param(&self.store, self.in_b));
        let (out_w, out_b) = (g.param(&self.store, self.out_w), g.param(&self.store, self.out_b));
        let last = g.constant(column(th - 1)?);
        let mut outputs = Vec::with_capacity(self.cfg.t_pred);
        for t in 0..th + self.cfg.t_pred {
            let x = if t < th { g.constant(column(t)?) } else { last };
            let mut inp = g.linear(x, in_w, Some(in_b))?;
            for (l, layer) in self.layers.iter().enumerate() {
                states[l] = self.cell(g, layer, inp, &states[l])?;
                inp = states[l].h;
            }
            if t >= th {
                outputs.push(g.linear(inp, out_w, Some(out_b))?);
            }
        }
        // S × (T·M) → (S·T) × M
        let wide = g.concat_cols(&outputs)?;
        g.reshape(wide, &[s * self.cfg.t_pred, self.cfg.n_beams])
    }
}

/// `(total, trainable)` element counts.
pub fn count_params(model: &dyn BeamModel) -> (usize, usize) {
    model.store().counts()
}
