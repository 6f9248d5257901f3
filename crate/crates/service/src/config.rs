//! Experiment configuration.
//!
//! One file, TOML or JSON (picked by extension), where every section and
//! field is optional. Together with `--seed` it fixes every experiment:
//!
//! ```toml
//! seed = 7                      # overridden by --seed
//!
//! [corpus]
//! grammar = "grammar.toml"      # omit for the built-in calendar grammar
//! path = "corpus.jsonl"         # read this corpus instead of generating one
//! sizes = { train = 5000, validation = 500, test = 500 }
//!
//! [models]
//! parse = "models/parse.json"   # load instead of training
//! gloss = "models/gloss.json"
//!
//! [parse]                       # training parameters, parse direction
//! alpha = 0.05
//! [gloss]                       # training parameters, gloss direction
//! emitted = true
//!
//! [decode]
//! max_len = 64
//! beam = 5                      # gloss beam size
//!
//! [calibration]
//! bins = 10
//! temperatures = [0.5, 0.75, 1.0]
//! tune_temperature = false      # apply the best temperature to the parser
//!
//! [hitl]
//! thresholds = [0.0, 0.5, 1.01] # omit for 0.0, 0.1, ..., 1.0, 1.01
//!
//! [selective]
//! beta = 1.0                    # F-beta used by the threshold tuner
//! threshold = 0.54              # omit to tune on the validation split
//! user = "oracle"               # or { noisy = { epsilon = 0.1, seed = 3 } }
//!
//! [nucleus]
//! cutoff = 0.85
//! cap = 10
//!
//! [study]
//! bins = 10
//! per_bin = 10
//! max_conf = 0.6
//!
//! [service]
//! addr = "127.0.0.1:8080"
//! quorum = 3
//! log_dir = "logs"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dym_core::dsl::SplitSizes;
use dym_core::model::{Direction, NucleusConfig, TrainParams};
use dym_core::selective::UserModel;
use serde::{Deserialize, Serialize};

use crate::session::DEFAULT_QUORUM;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub models: ModelPaths,
    pub parse: TrainParams,
    pub gloss: TrainParams,
    pub decode: DecodeConfig,
    pub calibration: CalibrationConfig,
    pub hitl: HitlConfig,
    pub selective: SelectiveConfig,
    pub nucleus: NucleusConfig,
    pub study: StudyConfig,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            corpus: CorpusConfig::default(),
            models: ModelPaths::default(),
            parse: TrainParams::for_direction(Direction::Parse),
            gloss: TrainParams::for_direction(Direction::Gloss),
            decode: DecodeConfig::default(),
            calibration: CalibrationConfig::default(),
            hitl: HitlConfig::default(),
            selective: SelectiveConfig::default(),
            nucleus: NucleusConfig::default(),
            study: StudyConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub grammar: Option<PathBuf>,
    pub path: Option<PathBuf>,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub parse: Option<PathBuf>,
    pub gloss: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            beam: dym_core::gloss::DEFAULT_BEAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub temperatures: Vec<f64>,
    pub tune_temperature: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            temperatures: (0..=10).map(|i| 0.5 + 0.25 * f64::from(i)).collect(),
            tune_temperature: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HitlConfig {
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectiveConfig {
    pub beta: f64,
    pub threshold: Option<f64>,
    pub user: UserModel,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            threshold: None,
            user: UserModel::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub bins: usize,
    pub per_bin: usize,
    pub max_conf: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            per_bin: 10,
            max_conf: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub quorum: usize,
    pub log_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            quorum: DEFAULT_QUORUM,
            log_dir: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a `.json` file as JSON and anything else as TOML. Relative
    /// paths inside the file resolve against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json { Self::from_json(&text) } else { Self::from_toml(&text) }
            .with_context(|| format!("parsing {}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.corpus.grammar,
            &mut self.corpus.path,
            &mut self.models.parse,
            &mut self.models.gloss,
            &mut self.service.log_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.decode.max_len == 0 || self.decode.beam == 0 {
            bail!("decode.max_len and decode.beam must be positive");
        }
        if self.calibration.bins == 0 || self.study.bins == 0 {
            bail!("bin counts must be positive");
        }
        if self.service.quorum == 0 {
            bail!("service.quorum must be at least 1");
        }
        if let Some(t) = self.selective.threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("selective.threshold must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// The configuration with `seed` applied, if given.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }
}
