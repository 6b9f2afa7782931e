//! Interface shared by every predictor so training and evaluation stay
//! model-agnostic, plus checkpoint save/load for any model kind.

use std::path::Path;

use serde_json::{json, Value};

use crate::baselines::{RecurrentConfig, RecurrentModel};
use crate::error::{Error, Result};
use crate::numcore::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::reprogram::{BeamLlm, BeamLlmConfig, BeamPrediction};

pub trait BeamModel {
    /// `beamllm`, `rnn`, `gru` or `lstm`.
    fn kind(&self) -> &'static str;
    fn t_hist(&self) -> usize;
    fn t_pred(&self) -> usize;
    fn n_beams(&self) -> usize;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Logits for a batch of 4 × T_hist histories, shaped
    /// `(batch · T_pred) × M` with row `s · T_pred + j` for sample `s`, step `j`.
    fn logits(&self, g: &mut Graph, histories: &[&Tensor]) -> Result<Var>;

    /// Architecture description stored in checkpoints.
    fn meta(&self) -> Value;

    /// Prompt-as-prefix flag where the model has one.
    fn pap(&self) -> Option<bool> {
        None
    }

    /// Called after parameters are replaced wholesale (e.g. on load).
    fn params_reloaded(&mut self) {}

    fn predict_batch(&self, histories: &[&Tensor]) -> Result<Vec<BeamPrediction>> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, histories)?;
        let logits = g.value(l);
        let t = self.t_pred();
        (0..histories.len())
            .map(|s| BeamPrediction::new(logits.slice_rows(s * t, t)?.transpose()?))
            .collect()
    }

    fn predict(&self, history: &Tensor) -> Result<BeamPrediction> {
        Ok(self.predict_batch(&[history])?.remove(0))
    }
}

pub fn check_history(h: &Tensor, t_hist: usize) -> Result<()> {
    if h.shape() != [4, t_hist] {
        return Err(Error::Dimension(format!("history {:?}, expected [4, {t_hist}]", h.shape())));
    }
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &dyn BeamModel) -> Result<()> {
    save_checkpoint(path, model.store(), &json!({ "kind": model.kind(), "config": model.meta() }))
}

/// Rebuilds the architecture recorded in a checkpoint and loads its tensors.
pub fn load_model(path: impl AsRef<Path>) -> Result<Box<dyn BeamModel>> {
    let ckpt = load_checkpoint(path)?;
    let kind = ckpt.meta["kind"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("manifest lacks model kind".into()))?
        .to_string();
    let cfg = ckpt.meta["config"].clone();
    let bad = |e: serde_json::Error| Error::Checkpoint(format!("model config: {e}"));
    let mut model: Box<dyn BeamModel> = match kind.as_str() {
        "beamllm" => Box::new(BeamLlm::new(serde_json::from_value::<BeamLlmConfig>(cfg).map_err(bad)?)?),
        "rnn" | "gru" | "lstm" => Box::new(RecurrentModel::new(serde_json::from_value::<RecurrentConfig>(cfg).map_err(bad)?)?),
        other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    };
    ckpt.load_into(model.store_mut())?;
    model.params_reloaded();
    Ok(model)
}
