//! Supervised training with Adam and a multi-step schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::baselines::{CellKind, RecurrentConfig, RecurrentModel};
use crate::model::BeamModel;
use crate::numcore::gradcheck::{check_params, GradCheckReport, DEFAULT_FLOOR, DEFAULT_STEP};
use crate::numcore::params::uniform;
use crate::reprogram::{BeamLlm, BeamLlmConfig};
use crate::numcore::{adam_step, AdamState, Graph, LrSchedule, Tensor, Var};
use crate::scenario::{argmax, DatasetSplit, WindowSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        LrSchedule::new(self.schedule.milestones.clone(), self.schedule.gamma, self.schedule.base_lr)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation top-1).
    pub best_epoch: usize,
}

fn check_labels(samples: &[&WindowSample], model: &dyn BeamModel) -> Result<Vec<usize>> {
    let (t, m) = (model.t_pred(), model.n_beams());
    let mut targets = Vec::with_capacity(samples.len() * t);
    for s in samples {
        if s.future_beams.len() != t {
            return Err(Error::Validation(format!(
                "sample has {} future beams, model predicts {t}",
                s.future_beams.len()
            )));
        }
        if let Some(b) = s.future_beams.iter().find(|b| **b >= m) {
            return Err(Error::Validation(format!("beam label {b} outside [0, {m})")));
        }
        targets.extend_from_slice(&s.future_beams);
    }
    Ok(targets)
}

/// Cross-entropy summed over samples and horizon, plus the logits.
fn summed_loss(g: &mut Graph, model: &dyn BeamModel, samples: &[&WindowSample]) -> Result<(Var, Var, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let targets = check_labels(samples, model)?;
    let hist: Vec<&Tensor> = samples.iter().map(|s| &s.history).collect();
    let logits = model.logits(g, &hist)?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((loss, logits, targets))
}

/// Mean over samples of the horizon-summed cross-entropy.
pub fn loss_batch(g: &mut Graph, model: &dyn BeamModel, samples: &[&WindowSample]) -> Result<Var> {
    let (loss, _, _) = summed_loss(g, model, samples)?;
    g.scale(loss, 1.0 / samples.len() as f64)
}

fn count_top1(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(r, t)| argmax(logits.row(*r)) == **t)
        .count()
}

/// Mean loss and top-1 accuracy over all steps, without gradients.
pub fn score(model: &dyn BeamModel, samples: &[WindowSample], chunk: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut hits) = (0.0, 0);
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&WindowSample> = part.iter().collect();
        let mut g = Graph::new();
        let (l, logits, targets) = summed_loss(&mut g, model, &refs)?;
        loss += g.value(l).item()?;
        hits += count_top1(g.value(logits), &targets);
    }
    let n = samples.len();
    Ok((loss / n as f64, hits as f64 / (n * model.t_pred()) as f64))
}

/// Trains `model` on `split.train`, tracks validation after every epoch and
/// finally restores the parameters with the best validation top-1 (the last
/// epoch's when there is no validation data). `on_epoch` sees each record as
/// it is produced.
pub fn train(
    model: &mut dyn BeamModel,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.schedule.base_lr);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<_>)> = None;
    model.store_mut().zero_grads();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&WindowSample> = batch.iter().map(|i| &split.train[*i]).collect();
            let mut g = Graph::new();
            let (loss, logits, targets) = summed_loss(&mut g, model, &samples)?;
            loss_sum += g.value(loss).item()?;
            hits += count_top1(g.value(logits), &targets);
            g.backward(loss)?;
            g.export_grads(model.store_mut())?;
            adam_step(&mut adam, model.store_mut(), samples.len())?;
        }
        let n = split.train.len();
        let (val_loss, val_top1) = score(model, &split.val, 64)?;
        let rec = EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: loss_sum / n as f64,
            val_loss,
            train_top1: hits as f64 / (n * model.t_pred()) as f64,
            val_top1,
        };
        if !split.val.is_empty() && best.as_ref().is_none_or(|b| val_top1 > b.0) {
            best = Some((val_top1, epoch, model.store().snapshot_trainable()));
        }
        on_epoch(&rec);
        history.push(rec);
    }
    let best_epoch = match best {
        Some((_, epoch, snap)) => {
            model.store_mut().restore(&snap)?;
            epoch
        }
        None => cfg.epochs - 1,
    };
    Ok(TrainOutcome { history, best_epoch })
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_loss,train_top1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.train_top1
        ));
    }
    out
}

/// Finite-difference check of the training loss over every trainable
/// parameter of `model` on `samples`.
pub fn check_model_gradients(model: &mut dyn BeamModel, samples: &[WindowSample]) -> Result<GradCheckReport> {
    let mut store = model.store().clone();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let report = check_params(
        &mut store,
        |st, g| {
            *model.store_mut() = st.clone();
            loss_batch(g, model, &refs)
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    );
    *model.store_mut() = store;
    report
}

/// Random windows with labels in range for `model`.
pub fn random_samples(model: &dyn BeamModel, n: usize, seed: u64) -> Vec<WindowSample> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| WindowSample {
            seq_id: 0,
            t0: i as i64,
            history: uniform(&mut rng, &[4, model.t_hist()], 1.0),
            future_beams: (0..model.t_pred()).map(|_| rng.random_range(0..model.n_beams())).collect(),
        })
        .collect()
}

/// Gradient check of the training loss for every model family on tiny
/// configurations: BeamLLM with and without the prompt prefix, then each
/// recurrent cell.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut models: Vec<(String, Box<dyn BeamModel>)> = Vec::new();
    for pap in [true, false] {
        let name = if pap { "beamllm-pap" } else { "beamllm-nopap" };
        models.push((name.into(), Box::new(BeamLlm::new(BeamLlmConfig { pap, ..BeamLlmConfig::tiny() })?)));
    }
    for kind in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
        models.push((kind.name().into(), Box::new(RecurrentModel::new(RecurrentConfig::tiny(kind))?)));
    }
    models
        .into_iter()
        .map(|(name, mut m)| {
            let samples = random_samples(m.as_ref(), 2, seed);
            Ok((name, check_model_gradients(m.as_mut(), &samples)?))
        })
        .collect()
}
