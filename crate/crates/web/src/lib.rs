//! Browser bindings for three small interactive views: codebook gains for a
//! direction, one simulated vehicle pass, and the patch/prompt preview of a
//! series. Each binding returns JSON; the `*_json` functions hold the logic so
//! they can be tested natively.

use beamllm::channel::{dft_codebook, steering_vector, ChannelSnapshot};
use beamllm::numcore::Tensor;
use beamllm::reprogram::{build_prompt, patchify, revin_normalize, PatchConfig};
use beamllm::scenario::{argmax, generate_scenario, ScenarioConfig};
use beamllm::Result;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Gain of every DFT beam for a line-of-sight user at direction `sine`.
pub fn beam_gains_json(n_antennas: usize, n_beams: usize, sine: f64) -> Result<Value> {
    let cb = dft_codebook(n_antennas, n_beams)?;
    let h = ChannelSnapshot::new(steering_vector(n_antennas, sine)?, 0);
    let gains = cb.gains(&h)?;
    let sines: Vec<f64> = (0..n_beams).map(|m| cb.beam_sine(m)).collect();
    Ok(json!({ "gains": gains, "beam_sines": sines, "best": argmax(&gains) }))
}

/// Frames of a single pass: time, `[x_c, y_c, w, h]` and the optimal beam.
pub fn simulate_pass_json(seed: u64, road_offset: f64, bbox_noise: f64) -> Result<Value> {
    let cfg = ScenarioConfig {
        n_passes: 1,
        road_offset,
        bbox_noise,
        emit_beam_powers: false,
        ..ScenarioConfig::default()
    };
    let rec = generate_scenario(&cfg, seed)?.remove(0);
    let frames: Vec<Value> = rec
        .frames
        .iter()
        .map(|f| json!({ "t": f.t, "bbox": f.bbox.to_array(), "beam": f.optimal_beam }))
        .collect();
    Ok(json!({ "n_beams": cfg.n_beams, "frames": frames }))
}

/// Instance-normalized patches of a comma/space separated series and the
/// statistics prompt the model would see for it.
pub fn patch_preview_json(series: &str, patch_len: usize, stride: usize, t_pred: usize) -> Result<Value> {
    let values = series
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| beamllm::Error::Config(format!("not a number: {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let norm = revin_normalize(&values)?;
    let patches = patchify(&norm.values, PatchConfig { patch_len, stride })?;
    let rows: Vec<&[f64]> = (0..patches.rows()).map(|r| patches.row(r)).collect();
    let window = Tensor::matrix(4, values.len(), values.repeat(4))?;
    let prompt = build_prompt(&window, 0, t_pred)?;
    Ok(json!({
        "mean": norm.mean,
        "std": norm.std,
        "normalized": norm.values,
        "patches": rows,
        "prompt": [prompt.dataset_desc, prompt.task_desc, prompt.stats_desc],
    }))
}

fn to_js(v: Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn beam_gains(n_antennas: usize, n_beams: usize, sine: f64) -> Result<String, JsError> {
    to_js(beam_gains_json(n_antennas, n_beams, sine))
}

#[wasm_bindgen]
pub fn simulate_pass(seed: u64, road_offset: f64, bbox_noise: f64) -> Result<String, JsError> {
    to_js(simulate_pass_json(seed, road_offset, bbox_noise))
}

#[wasm_bindgen]
pub fn patch_preview(series: &str, patch_len: usize, stride: usize, t_pred: usize) -> Result<String, JsError> {
    to_js(patch_preview_json(series, patch_len, stride, t_pred))
}
