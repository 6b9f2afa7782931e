#![allow(dead_code)]

use beamllm::backbone::BackboneConfig;
use beamllm::numcore::{ParamStore, Tensor};
use beamllm::reprogram::BeamLlmConfig;
use beamllm::scenario::{generate_scenario, split_dataset, DatasetSplit, Mode, ScenarioConfig, WindowSample};

/// A dozen noiseless passes split for `mode`.
pub fn small_split(mode: Mode, seed: u64) -> DatasetSplit {
    let cfg = ScenarioConfig {
        n_passes: 12,
        ..ScenarioConfig::noiseless()
    };
    let records = generate_scenario(&cfg, seed).unwrap();
    split_dataset(&records, seed, mode.t_hist(), mode.t_pred()).unwrap()
}

/// Full-width BeamLLM head over a narrow one-layer backbone.
pub fn narrow_beamllm(mode: Mode, pap: bool, seed: u64) -> BeamLlmConfig {
    BeamLlmConfig {
        d_model: 8,
        n_heads: 2,
        n_prototypes: 16,
        pap,
        backbone: BackboneConfig {
            hidden: 16,
            n_layers: 1,
            n_heads: 2,
            ..BackboneConfig::default()
        },
        seed,
        ..BeamLlmConfig::for_mode(mode)
    }
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

/// Exact bit patterns of every parameter, by name.
pub fn store_bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store.iter().map(|(_, p)| (p.name.clone(), bits(&p.tensor))).collect()
}

pub fn frozen_bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), bits(&p.tensor)))
        .collect()
}

pub fn samples_fingerprint(samples: &[WindowSample]) -> Vec<(i64, i64, Vec<u64>, Vec<usize>)> {
    samples
        .iter()
        .map(|s| (s.seq_id, s.t0, bits(&s.history), s.future_beams.clone()))
        .collect()
}
