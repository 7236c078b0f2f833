//! Run configuration: one TOML document with a section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialograph::MentionSource;
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::model::generate::DecodeConfig;
use crate::model::ModelConfig;
use crate::recall::RecallConfig;
use crate::retriever::RetrieverConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub kg: PathBuf,
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig::under(Path::new("runs"), PathBuf::from("data/corpus.jsonl"), PathBuf::from("data/kg.jsonl"))
    }
}

impl PathsConfig {
    pub fn under(root: &Path, corpus: PathBuf, kg: PathBuf) -> Self {
        PathsConfig {
            corpus,
            kg,
            cache: root.join("cache"),
            checkpoints: root.join("checkpoints"),
            outputs: root.join("outputs"),
        }
    }

    pub fn graphs(&self) -> PathBuf {
        self.cache.join("graphs.jsonl")
    }
    pub fn recall(&self) -> PathBuf {
        self.cache.join("recall.jsonl")
    }
    pub fn retrieval(&self) -> PathBuf {
        self.cache.join("retrieval.jsonl")
    }
    pub fn retriever_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("retriever.ckpt")
    }
    pub fn model_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("model.ckpt")
    }
    pub fn loss_trace(&self) -> PathBuf {
        self.outputs.join("loss_trace.csv")
    }
    pub fn retriever_trace(&self) -> PathBuf {
        self.outputs.join("retriever_trace.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.outputs.join("predictions.jsonl")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.outputs.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.outputs.join("metrics.csv")
    }
    pub fn ablation_csv(&self) -> PathBuf {
        self.outputs.join("ablation.csv")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub mention_source: MentionSource,
    /// Split that `generate` decodes.
    pub eval_split: Split,
    /// Cap on training samples (0 = all).
    pub max_train_samples: usize,
    /// Cap on evaluated samples (0 = all).
    pub max_eval_samples: usize,
    pub synth_dialogues: usize,
    pub synth_entities: usize,
    pub synth_triples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dev_fraction: 0.1,
            test_fraction: 0.1,
            mention_source: MentionSource::default(),
            eval_split: Split::Test,
            max_train_samples: 0,
            max_eval_samples: 0,
            synth_dialogues: 200,
            synth_entities: 60,
            synth_triples: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    Kdge,
    Reg,
    Knowledge,
    KdgeReg,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::None, Ablation::Kdge, Ablation::Reg, Ablation::Knowledge, Ablation::KdgeReg];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::Kdge => "-kdge",
            Ablation::Reg => "-reg",
            Ablation::Knowledge => "-knowledge",
            Ablation::KdgeReg => "-kdge-reg",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::Kdge => "no_kdge",
            Ablation::Reg => "no_reg",
            Ablation::Knowledge => "no_knowledge",
            Ablation::KdgeReg => "no_kdge_reg",
        }
    }

    /// Turns components off; never turns one on.
    pub fn apply(self, m: &mut ModelConfig) {
        match self {
            Ablation::None => {}
            Ablation::Kdge => m.use_kdge = false,
            Ablation::Reg => m.use_reg = false,
            Ablation::Knowledge => m.use_knowledge = false,
            Ablation::KdgeReg => {
                m.use_kdge = false;
                m.use_reg = false;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub recall: RecallConfig,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            ablation: Ablation::None,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            retriever: RetrieverConfig::default(),
            recall: RecallConfig::default(),
            embedder: EmbedderSpec::default(),
            training: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    /// File (or defaults), then flags, then validation.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = Some(s);
        }
        if let Some(a) = ov.ablation {
            cfg.ablation = a;
        }
        if let Some(out) = &ov.out {
            cfg.paths = PathsConfig::under(out, cfg.paths.corpus.clone(), cfg.paths.kg.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config("a seed is required (set `seed` in the config or pass --seed)".into()));
        }
        let d = &self.data;
        let fractions_ok = [d.dev_fraction, d.test_fraction].iter().all(|f| (0.0..1.0).contains(f));
        if !fractions_ok || d.dev_fraction + d.test_fraction >= 1.0 {
            return Err(Error::Config("dev and test fractions must be in [0, 1) and sum below 1".into()));
        }
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = 1;
        }
        m.validate()?;
        self.retriever.validate()?;
        self.recall.validate()?;
        self.embedder.validate()?;
        self.training.validate()?;
        self.decode.validate(&self.model)?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    /// Model configuration with the ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        self.ablation.apply(&mut m);
        m
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
