//! Run configuration: one JSON file, flag overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use consor::error::{Error, Result};
use consor::model::ModelConfig;
use consor::prompts::{CorpusKind, CorpusSet};
use consor::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub fixtures: PathBuf,
    /// Corpora directory; `None` uses the bundled vocabularies.
    pub corpora: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: PathBuf::from("annotations.json"),
            fixtures: PathBuf::from("fixtures"),
            corpora: None,
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Fixture,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub provider: ProviderKind,
    /// Seed of the synthetic provider (ignored for fixtures).
    pub provider_seed: u64,
    /// Enabled corpus kinds; `None` enables all four.
    pub corpora_subset: Option<Vec<String>>,
    pub precision: Precision,
    /// Optional builtin-taxonomy override of the dataset's own taxonomy.
    pub taxonomy: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            provider: ProviderKind::Fixture,
            provider_seed: 0,
            corpora_subset: None,
            precision: Precision::F32,
            taxonomy: None,
        }
    }
}

impl RunConfig {
    /// Loads the config and resolves its relative paths against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        cfg.paths.data = resolve(&cfg.paths.data);
        cfg.paths.fixtures = resolve(&cfg.paths.fixtures);
        cfg.paths.corpora = cfg.paths.corpora.as_ref().map(&resolve);
        cfg.paths.output = resolve(&cfg.paths.output);
        Ok(cfg)
    }

    pub fn corpus_kinds(&self) -> Result<Vec<CorpusKind>> {
        match &self.corpora_subset {
            None => Ok(CorpusKind::ALL.to_vec()),
            Some(names) => names.iter().map(|n| n.parse()).collect(),
        }
    }

    pub fn corpora(&self) -> Result<CorpusSet> {
        let kinds = self.corpus_kinds()?;
        match &self.paths.corpora {
            Some(dir) => CorpusSet::from_dir(dir, &kinds),
            None => CorpusSet::bundled_subset(&kinds),
        }
    }

    pub fn hash(&self) -> String {
        use sha2::digest::Digest;
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = sha2::Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
