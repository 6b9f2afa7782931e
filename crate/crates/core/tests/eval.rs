mod common;

use beamllm::baselines::{CellKind, RecurrentConfig, RecurrentModel};
use beamllm::eval::{
    complexity_csv, complexity_report, evaluate, majority_baseline, metrics_csv, report_from_predictions, top_k_accuracy,
    METRICS_HEADER,
};
use beamllm::model::BeamModel;
use beamllm::numcore::params::uniform;
use beamllm::numcore::Tensor;
use beamllm::reprogram::{BeamLlm, BeamPrediction};
use beamllm::scenario::{generate_scenario, split_dataset, Mode, ScenarioConfig, WindowSample};
use beamllm::training::random_samples;
use beamllm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{narrow_beamllm, small_split};

fn pred(columns: &[&[f64]]) -> BeamPrediction {
    let m = columns[0].len();
    let t = columns.len();
    let mut data = vec![0.0; m * t];
    for (j, c) in columns.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * t + j] = *v;
        }
    }
    BeamPrediction::new(Tensor::matrix(m, t, data).unwrap()).unwrap()
}

#[test]
fn two_of_four_in_top_three() {
    let scores: &[f64] = &[0.1, 0.5, 0.3, 0.2, 0.0];
    let preds: Vec<_> = (0..4).map(|_| pred(&[scores])).collect();
    // top-3 set is {1, 2, 3}
    let labels = vec![vec![1], vec![0], vec![3], vec![4]];
    assert_eq!(top_k_accuracy(&preds, &labels, 3, 0).unwrap(), 0.5);
    assert_eq!(top_k_accuracy(&preds, &labels, 5, 0).unwrap(), 1.0);
    assert!(matches!(top_k_accuracy(&preds, &labels, 6, 0), Err(Error::Domain(_))));
    assert!(matches!(top_k_accuracy(&preds, &labels, 0, 0), Err(Error::Domain(_))));
}

#[test]
fn ties_take_lowest_index() {
    let p = [pred(&[&[1.0, 1.0, 1.0, 0.0]])];
    assert_eq!(top_k_accuracy(&p, &[vec![0]], 1, 0).unwrap(), 1.0);
    assert_eq!(top_k_accuracy(&p, &[vec![1]], 1, 0).unwrap(), 0.0);
    assert_eq!(top_k_accuracy(&p, &[vec![1]], 2, 0).unwrap(), 1.0);
    assert_eq!(top_k_accuracy(&p, &[vec![2]], 2, 0).unwrap(), 0.0);
}

fn default_windows(mode: Mode) -> Vec<WindowSample> {
    let records = generate_scenario(&ScenarioConfig::noiseless(), 7).unwrap();
    let split = split_dataset(&records, 7, mode.t_hist(), mode.t_pred()).unwrap();
    split.train.into_iter().chain(split.val).chain(split.test).collect()
}

#[test]
fn random_scores_hit_one_in_m() {
    let samples = default_windows(Mode::Standard);
    let n = samples.len();
    assert!(n >= 1000, "{n} windows");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let preds: Vec<_> = (0..n)
        .map(|_| BeamPrediction::new(uniform(&mut rng, &[32, 5], 1.0)).unwrap())
        .collect();
    let r = report_from_predictions("random", Mode::Standard, None, &preds, &samples).unwrap();
    let p = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for j in 0..5 {
        let a = r.at(1, j).unwrap();
        assert!((a - p).abs() <= 3.0 * sigma, "step {j}: {a} vs {p} ± {}", 3.0 * sigma);
    }
    let sigma_mean = (p * (1.0 - p) / (5 * n) as f64).sqrt();
    assert!((r.mean(1).unwrap() - p).abs() <= 3.0 * sigma_mean);
}

#[test]
fn report_invariants() {
    let split = small_split(Mode::Standard, 3);
    let m = RecurrentModel::new(RecurrentConfig::new(CellKind::Lstm, Mode::Standard)).unwrap();
    let r = evaluate(&m, &split.test, Mode::Standard).unwrap();
    assert_eq!(r.n_test, split.test.len());
    assert_eq!(r.pap_label(), "na");
    for j in 0..5 {
        let (a1, a3, a5) = (r.at(1, j).unwrap(), r.at(3, j).unwrap(), r.at(5, j).unwrap());
        assert!(0.0 <= a1 && a1 <= a3 && a3 <= a5 && a5 <= 1.0);
    }
    for k in [1, 3, 5] {
        let avg = (0..5).map(|j| r.at(k, j).unwrap()).sum::<f64>() / 5.0;
        assert!((r.mean(k).unwrap() - avg).abs() < 1e-15);
        assert_eq!(r.degradation(k).unwrap(), r.at(k, 0).unwrap() - r.at(k, 4).unwrap());
    }
    assert!(r.at(2, 0).is_err());
    assert!(r.at(1, 5).is_err());
}

#[test]
fn mode_mismatch_is_config_error() {
    let split = small_split(Mode::Fewshot, 3);
    let m = RecurrentModel::new(RecurrentConfig::new(CellKind::Rnn, Mode::Standard)).unwrap();
    assert!(matches!(evaluate(&m, &split.test, Mode::Fewshot), Err(Error::Config(_))));
}

#[test]
fn metrics_csv_is_stable_and_complete() {
    let split = small_split(Mode::Fewshot, 4);
    let m = BeamLlm::new(narrow_beamllm(Mode::Fewshot, false, 2)).unwrap();
    let a = metrics_csv(&[evaluate(&m, &split.test, Mode::Fewshot).unwrap()]);
    let b = metrics_csv(&[evaluate(&m, &split.test, Mode::Fewshot).unwrap()]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    // 3 values of K × (10 steps + mean)
    assert_eq!(lines.len(), 1 + 3 * 11);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&first[..5], &["beamllm", "fewshot", "off", "1", "1"]);
    assert_eq!(first[6], split.test.len().to_string());
    assert!(lines.iter().filter(|l| l.contains(",mean,")).count() == 3);
}

#[test]
fn majority_class_baseline_counts_the_modal_label() {
    let mk = |beams: Vec<usize>| WindowSample {
        seq_id: 0,
        t0: 0,
        history: Tensor::zeros(&[4, 1]),
        future_beams: beams,
    };
    let train = vec![mk(vec![2, 2]), mk(vec![1, 2])];
    let test = vec![mk(vec![2, 0]), mk(vec![1, 1])];
    assert_eq!(majority_baseline(&train, &test, 4).unwrap(), 0.25);
    assert!(matches!(majority_baseline(&[mk(vec![9])], &test, 4), Err(Error::Validation(_))));
}

#[test]
fn complexity_ordering_and_timing() {
    let cells: Vec<RecurrentModel> = [CellKind::Rnn, CellKind::Gru, CellKind::Lstm]
        .into_iter()
        .map(|k| RecurrentModel::new(RecurrentConfig::new(k, Mode::Standard)).unwrap())
        .collect();
    let llm = BeamLlm::new(narrow_beamllm(Mode::Standard, true, 0)).unwrap();
    let mut models: Vec<&dyn BeamModel> = cells.iter().map(|m| m as &dyn BeamModel).collect();
    models.push(&llm);
    let probes: Vec<Tensor> = models.iter().map(|m| random_samples(*m, 1, 5).remove(0).history).collect();
    let rows = complexity_report(&models, &probes, 1000).unwrap();
    assert!(rows[0].total_params < rows[1].total_params && rows[1].total_params < rows[2].total_params);
    for r in &rows[..3] {
        assert_eq!(r.total_params, r.trainable_params);
    }
    let llm_row = &rows[3];
    assert_eq!(llm.store().counts(), (llm_row.total_params, llm_row.trainable_params));
    assert!(llm_row.trainable_params < llm_row.total_params);
    let backbone: usize = llm.frozen_ids().iter().map(|id| llm.store().tensor(*id).len()).sum();
    assert_eq!(llm_row.trainable_params + backbone, llm_row.total_params);

    let again = complexity_report(&models[..1], &probes[..1], 1000).unwrap();
    let (a, b) = (rows[0].mean_infer_sec, again[0].mean_infer_sec);
    assert!(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0);
    assert!((a - b).abs() <= 0.5 * a.max(b), "{a} vs {b}");

    let csv = complexity_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), "model,total_params,trainable_params,mean_infer_sec");
    assert_eq!(csv.lines().count(), 5);
}
