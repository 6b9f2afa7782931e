//! Top-K accuracy, evaluation reports and complexity accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BeamModel;
use crate::numcore::Tensor;
use crate::reprogram::BeamPrediction;
use crate::scenario::{Mode, WindowSample};

pub const K_GRID: [usize; 3] = [1, 3, 5];

/// Whether `label` is among the `k` best scores; equal scores rank the lower
/// index first.
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|(m, v)| **v > s || (**v == s && *m < label))
        .count();
    ahead < k
}

/// Fraction of predictions whose step-`step` label is in the top `k`.
pub fn top_k_accuracy(preds: &[BeamPrediction], labels: &[Vec<usize>], k: usize, step: usize) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let mut hits = 0;
    for (p, l) in preds.iter().zip(labels) {
        let m = p.n_beams();
        if k == 0 || k > m {
            return Err(Error::Domain(format!("K = {k} outside [1, {m}]")));
        }
        if step >= p.t_pred() || step >= l.len() {
            return Err(Error::Index(format!("step {step} beyond horizon")));
        }
        if l[step] >= m {
            return Err(Error::Validation(format!("label {} outside [0, {m})", l[step])));
        }
        if in_top_k(&p.column(step), l[step], k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub model: String,
    pub mode: Mode,
    pub pap: Option<bool>,
    pub n_test: usize,
    pub ks: Vec<usize>,
    /// `per_step[k][j]`: accuracy for `ks[k]` at future step `j`.
    pub per_step: Vec<Vec<f64>>,
}

impl TopKReport {
    fn row(&self, k: usize) -> Result<&[f64]> {
        self.ks
            .iter()
            .position(|x| *x == k)
            .map(|i| self.per_step[i].as_slice())
            .ok_or_else(|| Error::Index(format!("K = {k} not in report")))
    }

    pub fn at(&self, k: usize, step: usize) -> Result<f64> {
        self.row(k)?
            .get(step)
            .copied()
            .ok_or_else(|| Error::Index(format!("step {step} beyond horizon")))
    }

    /// Horizon-averaged accuracy.
    pub fn mean(&self, k: usize) -> Result<f64> {
        let r = self.row(k)?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Accuracy at the first step minus accuracy at the last.
    pub fn degradation(&self, k: usize) -> Result<f64> {
        let r = self.row(k)?;
        Ok(r[0] - r[r.len() - 1])
    }

    pub fn pap_label(&self) -> &'static str {
        match self.pap {
            Some(true) => "on",
            Some(false) => "off",
            None => "na",
        }
    }

    /// `model,mode,pap,K,step,accuracy,n_test` rows; step `mean` carries the
    /// horizon average.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (i, k) in self.ks.iter().enumerate() {
            let steps = self.per_step[i].iter().enumerate().map(|(j, a)| ((j + 1).to_string(), *a));
            let mean = self.per_step[i].iter().sum::<f64>() / self.per_step[i].len() as f64;
            for (step, acc) in steps.chain(std::iter::once(("mean".to_string(), mean))) {
                rows.push(format!(
                    "{},{},{},{k},{step},{acc},{}",
                    self.model,
                    self.mode.name(),
                    self.pap_label(),
                    self.n_test
                ));
            }
        }
        rows
    }
}

pub const METRICS_HEADER: &str = "model,mode,pap,K,step,accuracy,n_test";

pub fn metrics_csv(reports: &[TopKReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Predictions for every sample, in batches.
pub fn predict_all(model: &dyn BeamModel, samples: &[WindowSample], chunk: usize) -> Result<Vec<BeamPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Tensor> = part.iter().map(|s| &s.history).collect();
        out.extend(model.predict_batch(&refs)?);
    }
    Ok(out)
}

/// Top-{1,3,5} accuracy per step on `samples`.
pub fn evaluate(model: &dyn BeamModel, samples: &[WindowSample], mode: Mode) -> Result<TopKReport> {
    if model.t_hist() != mode.t_hist() || model.t_pred() != mode.t_pred() {
        return Err(Error::Config(format!(
            "model is {}→{} but mode {} is {}→{}",
            model.t_hist(),
            model.t_pred(),
            mode.name(),
            mode.t_hist(),
            mode.t_pred()
        )));
    }
    let preds = predict_all(model, samples, 64)?;
    report_from_predictions(model.kind(), mode, model.pap(), &preds, samples)
}

pub fn report_from_predictions(
    model: &str,
    mode: Mode,
    pap: Option<bool>,
    preds: &[BeamPrediction],
    samples: &[WindowSample],
) -> Result<TopKReport> {
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.future_beams.clone()).collect();
    let t = mode.t_pred();
    let per_step = K_GRID
        .iter()
        .map(|&k| (0..t).map(|j| top_k_accuracy(preds, &labels, k, j)).collect())
        .collect::<Result<_>>()?;
    Ok(TopKReport {
        model: model.to_string(),
        mode,
        pap,
        n_test: samples.len(),
        ks: K_GRID.to_vec(),
        per_step,
    })
}

/// Accuracy of always predicting the most frequent training label.
pub fn majority_baseline(train: &[WindowSample], test: &[WindowSample], n_beams: usize) -> Result<f64> {
    let mut counts = vec![0usize; n_beams];
    for s in train {
        for &b in &s.future_beams {
            *counts
                .get_mut(b)
                .ok_or_else(|| Error::Validation(format!("label {b} outside [0, {n_beams})")))? += 1;
        }
    }
    let best = (0..n_beams).max_by_key(|&m| (counts[m], std::cmp::Reverse(m))).unwrap_or(0);
    let (hits, total) = test.iter().fold((0, 0), |(h, t), s| {
        (h + s.future_beams.iter().filter(|b| **b == best).count(), t + s.future_beams.len())
    });
    if total == 0 {
        return Err(Error::Dimension("empty test set".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub model: String,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Mean seconds per single-sample forward.
    pub mean_infer_sec: f64,
}

/// Parameter counts and mean single-sample inference time over `runs` timed
/// forwards (after a short warm-up) on `history`.
pub fn complexity_report(models: &[&dyn BeamModel], history: &[Tensor], runs: usize) -> Result<Vec<ComplexityRow>> {
    let mut rows = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        let h = history
            .get(i)
            .ok_or_else(|| Error::Dimension("one probe history per model required".into()))?;
        for _ in 0..runs.clamp(1, 10) {
            m.predict(h)?;
        }
        let start = Instant::now();
        for _ in 0..runs.max(1) {
            m.predict(h)?;
        }
        let (total, trainable) = m.store().counts();
        rows.push(ComplexityRow {
            model: m.kind().to_string(),
            total_params: total,
            trainable_params: trainable,
            mean_infer_sec: start.elapsed().as_secs_f64() / runs.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = String::from("model,total_params,trainable_params,mean_infer_sec\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.total_params, r.trainable_params, r.mean_infer_sec
        ));
    }
    out
}
