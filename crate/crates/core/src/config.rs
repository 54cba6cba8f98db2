//! The single JSON run configuration. Every section and key is required and
//! unknown keys are rejected, so a config file fully pins an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::network::{NetworkConfig, NetworkDims};
use crate::synth::CorpusConfig;
use crate::train::{System, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub systems: Vec<System>,
    /// Training seeds; each system is trained once per seed.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            systems: System::ALL.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives corpus generation and trial sampling.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub episode: EpisodeConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            episode: EpisodeConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file. A relative `output_dir` is
    /// resolved against the directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.episode.validate()?;
        self.train.validate()?;
        self.eval.dcf.validate()?;
        NetworkDims::new(self.corpus.dim, &self.network, self.corpus.num_speakers)?;
        if self.episode.n_speakers > self.corpus.num_speakers {
            return Err(Error::Config(format!(
                "episode.n_speakers {} exceeds corpus.num_speakers {}",
                self.episode.n_speakers, self.corpus.num_speakers
            )));
        }
        if self.episode.k_support + self.episode.k_query > self.corpus.utterances_per_speaker {
            return Err(Error::Config(
                "episode.k_support + episode.k_query exceeds corpus.utterances_per_speaker".into(),
            ));
        }
        if self.episode.crop_min > self.corpus.min_frames {
            return Err(Error::Config(
                "episode.crop_min exceeds corpus.min_frames".into(),
            ));
        }
        let ex = &self.experiment;
        if ex.systems.is_empty() || ex.seeds.is_empty() {
            return Err(Error::Config(
                "experiment.systems and experiment.seeds must be non-empty".into(),
            ));
        }
        let mut systems = ex.systems.clone();
        systems.sort();
        systems.dedup();
        let mut seeds = ex.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if systems.len() != ex.systems.len() || seeds.len() != ex.seeds.len() {
            return Err(Error::Config(
                "experiment.systems and experiment.seeds must not repeat".into(),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is empty".into()));
        }
        Ok(())
    }
}
