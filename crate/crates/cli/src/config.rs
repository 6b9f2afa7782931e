use std::path::{Path, PathBuf};

use anyhow::Result;
use beamllm::backbone::BackboneConfig;
use beamllm::baselines::{CellKind, RecurrentConfig};
use beamllm::reprogram::BeamLlmConfig;
use beamllm::scenario::{Mode, ScenarioConfig};
use beamllm::training::TrainConfig;
use beamllm::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "BEAMLLM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Beamllm,
    Rnn,
    Gru,
    Lstm,
}

impl ModelKind {
    pub fn cell(self) -> Option<CellKind> {
        match self {
            ModelKind::Beamllm => None,
            ModelKind::Rnn => Some(CellKind::Rnn),
            ModelKind::Gru => Some(CellKind::Gru),
            ModelKind::Lstm => Some(CellKind::Lstm),
        }
    }
}

/// Architecture knobs. BeamLLM uses `d_model`, `n_heads`, `n_prototypes`,
/// `pap` and `backbone`; the recurrent baselines use `hidden` and `n_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub mode: Mode,
    pub pap: bool,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_prototypes: usize,
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub n_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BeamLlmConfig::default();
        let r = RecurrentConfig::new(CellKind::Rnn, Mode::Standard);
        ModelSection {
            kind: ModelKind::Beamllm,
            mode: Mode::Standard,
            pap: b.pap,
            d_model: b.d_model,
            n_heads: b.n_heads,
            n_prototypes: b.n_prototypes,
            backbone: b.backbone,
            hidden: r.hidden,
            n_layers: r.n_layers,
        }
    }
}

impl ModelSection {
    pub fn beamllm(&self, n_beams: usize, seed: u64) -> BeamLlmConfig {
        BeamLlmConfig {
            n_beams,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_prototypes: self.n_prototypes,
            pap: self.pap,
            backbone: self.backbone.clone(),
            seed,
            ..BeamLlmConfig::for_mode(self.mode)
        }
    }

    pub fn recurrent(&self, kind: CellKind, n_beams: usize, seed: u64) -> RecurrentConfig {
        RecurrentConfig {
            hidden: self.hidden,
            n_layers: self.n_layers,
            n_beams,
            seed,
            ..RecurrentConfig::new(kind, self.mode)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory that receives every output; defaults to the working directory.
    pub run_dir: Option<PathBuf>,
    /// Dataset JSONL used by train/eval/ablate.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenario: ScenarioConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(cfg)
    }

    /// Flag, then config file, then the seed environment variable, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.model.beamllm(self.scenario.n_beams, 0).validate()?;
        Ok(())
    }

    /// Hash of everything that determines results; paths are left out since
    /// the manifest records content hashes of inputs and outputs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
