mod common;

use beamllm::baselines::{CellKind, RecurrentConfig, RecurrentModel};
use beamllm::model::BeamModel;
use beamllm::numcore::{adam_step, AdamState, Graph, LrSchedule, Tensor};
use beamllm::reprogram::BeamLlm;
use beamllm::scenario::{Mode, WindowSample};
use beamllm::training::{history_csv, loss_batch, random_samples, score, train, TrainConfig, HISTORY_HEADER};
use beamllm::Error;

use common::{frozen_bits, narrow_beamllm, samples_fingerprint, small_split, store_bits};

fn batch_loss(model: &dyn BeamModel, samples: &[WindowSample]) -> f64 {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let mut g = Graph::new();
    let l = loss_batch(&mut g, model, &refs).unwrap();
    g.value(l).item().unwrap()
}

/// One optimizer step on the whole of `samples`; returns the pre-step loss.
fn step(model: &mut dyn BeamModel, adam: &mut AdamState, samples: &[WindowSample]) -> f64 {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let mut g = Graph::new();
    let l = loss_batch(&mut g, model, &refs).unwrap();
    let loss = g.value(l).item().unwrap();
    // loss_batch averages; scale back so adam's 1/batch division yields the mean gradient
    let total = g.scale(l, samples.len() as f64).unwrap();
    g.backward(total).unwrap();
    g.export_grads(model.store_mut()).unwrap();
    adam_step(adam, model.store_mut(), samples.len()).unwrap();
    loss
}

#[test]
fn uniform_logits_cost_horizon_times_ln_m() {
    let mut m = BeamLlm::new(narrow_beamllm(Mode::Standard, true, 1)).unwrap();
    for name in ["output.fc3.w", "output.fc3.b"] {
        let id = m.store().id(name).unwrap();
        let shape = m.store().tensor(id).shape().to_vec();
        m.store_mut().set_tensor(id, Tensor::zeros(&shape)).unwrap();
    }
    let samples = random_samples(&m, 6, 3);
    let expected = 5.0 * 32f64.ln();
    assert!((expected - 17.328679514).abs() < 1e-8);
    assert!((batch_loss(&m, &samples) - expected).abs() < 1e-9);
}

#[test]
fn loss_is_mean_over_batch() {
    let m = RecurrentModel::new(RecurrentConfig::tiny(CellKind::Gru)).unwrap();
    let samples = random_samples(&m, 4, 9);
    let each: f64 = samples.iter().map(|s| batch_loss(&m, std::slice::from_ref(s))).sum();
    assert!((batch_loss(&m, &samples) - each / 4.0).abs() < 1e-12);
}

#[test]
fn out_of_range_labels_are_validation_errors() {
    let m = RecurrentModel::new(RecurrentConfig::tiny(CellKind::Rnn)).unwrap();
    let mut samples = random_samples(&m, 2, 1);
    samples[1].future_beams[0] = m.n_beams();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let err = loss_batch(&mut Graph::new(), &m, &refs).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");

    samples[1].future_beams.pop();
    let refs: Vec<&WindowSample> = samples.iter().collect();
    assert!(matches!(loss_batch(&mut Graph::new(), &m, &refs), Err(Error::Validation(_))));
}

#[test]
fn overfits_ten_samples() {
    let mut m = RecurrentModel::new(RecurrentConfig {
        hidden: 16,
        ..RecurrentConfig::tiny(CellKind::Lstm)
    })
    .unwrap();
    let samples = random_samples(&m, 10, 4);
    let mut adam = AdamState::new(0.01);
    let first = step(&mut m, &mut adam, &samples);
    for _ in 1..50 {
        step(&mut m, &mut adam, &samples);
    }
    let last = batch_loss(&m, &samples);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn repeated_batch_loss_is_monotone_after_warmup() {
    for model in [
        Box::new(RecurrentModel::new(RecurrentConfig::tiny(CellKind::Gru)).unwrap()) as Box<dyn BeamModel>,
        Box::new(BeamLlm::new(beamllm::reprogram::BeamLlmConfig::tiny()).unwrap()),
    ] {
        let mut m = model;
        let samples = random_samples(m.as_ref(), 4, 12);
        let mut adam = AdamState::new(1e-3);
        let losses: Vec<f64> = (0..40).map(|_| step(m.as_mut(), &mut adam, &samples)).collect();
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{}: {losses:?}", m.kind());
        }
    }
}

#[test]
fn schedule_matches_closed_form() {
    let s = LrSchedule::default();
    for epoch in 0..=250 {
        let passed = s.milestones.iter().filter(|m| **m <= epoch).count() as i32;
        assert!((s.lr_at(epoch) - 0.01 * 0.9f64.powi(passed)).abs() < 1e-15);
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_leaves_backbone_and_data_alone() {
    let split = small_split(Mode::Standard, 5);
    let val_before = samples_fingerprint(&split.val);
    let test_before = samples_fingerprint(&split.test);
    let run = || {
        let mut m = BeamLlm::new(narrow_beamllm(Mode::Standard, true, 8)).unwrap();
        let frozen = frozen_bits(m.store());
        let out = train(&mut m, &split, &quick_config(8), |_| {}).unwrap();
        assert_eq!(frozen, frozen_bits(m.store()));
        (out, store_bits(m.store()))
    };
    let (a, params_a) = run();
    let (b, params_b) = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(params_a, params_b);
    assert_eq!(val_before, samples_fingerprint(&split.val));
    assert_eq!(test_before, samples_fingerprint(&split.test));

    assert_eq!(a.history.len(), 3);
    for (i, r) in a.history.iter().enumerate() {
        assert_eq!(r.epoch, i);
        assert_eq!(r.lr, LrSchedule::default().lr_at(i));
        for v in [r.train_loss, r.val_loss, r.train_top1, r.val_top1] {
            assert!(v.is_finite());
        }
        assert!((0.0..=1.0).contains(&r.train_top1));
    }
}

#[test]
fn different_seeds_shuffle_differently() {
    let split = small_split(Mode::Standard, 5);
    let hist = |seed| {
        let mut m = RecurrentModel::new(RecurrentConfig::new(CellKind::Rnn, Mode::Standard)).unwrap();
        train(&mut m, &split, &quick_config(seed), |_| {}).unwrap().history
    };
    assert_ne!(hist(1), hist(2));
}

#[test]
fn best_validation_epoch_is_restored() {
    let split = small_split(Mode::Fewshot, 6);
    let mut m = RecurrentModel::new(RecurrentConfig::new(CellKind::Gru, Mode::Fewshot)).unwrap();
    let out = train(&mut m, &split, &quick_config(2), |_| {}).unwrap();
    let best = out.history.iter().map(|r| r.val_top1).fold(f64::MIN, f64::max);
    assert_eq!(out.history[out.best_epoch].val_top1, best);
    let (_, top1) = score(&m, &split.val, 64).unwrap();
    assert_eq!(top1, best);
}

#[test]
fn history_csv_layout() {
    let split = small_split(Mode::Standard, 5);
    let mut m = RecurrentModel::new(RecurrentConfig::new(CellKind::Rnn, Mode::Standard)).unwrap();
    let mut seen = 0;
    let out = train(&mut m, &split, &quick_config(1), |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    let csv = history_csv(&out.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(HISTORY_HEADER, "epoch,lr,train_loss,val_loss,train_top1");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn config_rejects_degenerate_values() {
    let bad = [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let toml_like = serde_json::json!({"batch_size": 4, "momentum": 0.9});
    assert!(serde_json::from_value::<TrainConfig>(toml_like).is_err());
}
