//! Run configuration: one JSON document holding paths, the teacher order,
//! the method and every hyperparameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::EndpointConfig;
use crate::corpus::SplitRatio;
use crate::encoder::HashedEncoderConfig;
use crate::error::{Error, Result};
use crate::eval::MethodConfig;
use crate::purify::Method;
use crate::student::{DistillConfig, StudentConfig};

/// File name of the resolved config written next to a run's outputs.
pub const RESOLVED_NAME: &str = "config.resolved.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub questions: Option<PathBuf>,
    pub rationales: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub example_bank: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorMode {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub mode: AggregatorMode,
    /// Overrides the built-in instruction.
    pub instruction: Option<String>,
    pub endpoint: EndpointConfig,
    /// JSONL cache of completed aggregations, keyed by prompt hash.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Teacher order; `None` keeps the order of first appearance.
    pub ensemble: Option<Vec<String>>,
    pub method: Method,
    pub split: SplitRatio,
    pub encoder: HashedEncoderConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub methods: MethodConfig,
    pub aggregator: AggregatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            ensemble: None,
            method: Method::Sim,
            split: SplitRatio::default(),
            encoder: HashedEncoderConfig::default(),
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
            methods: MethodConfig::default(),
            aggregator: AggregatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Push the run seed into every component. Components draw from named
    /// streams of this one seed, so the per-section seed fields only exist
    /// to make each section usable on its own.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.encoder.seed = s;
        self.student.vocab_seed = s;
        self.distill.seed = s;
        self.methods.cls.seed = s;
        self.methods.sim.seed = s;
        self.methods.selector.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.encoder.dim == 0 {
            return Err(Error::Config("encoder.dim must be positive".into()));
        }
        if self.student.hidden == 0 || self.student.vocab_buckets == 0 {
            return Err(Error::Config("student dimensions must be positive".into()));
        }
        if !(self.methods.gamma > 1.0) {
            return Err(Error::Config("methods.gamma must exceed 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form. The output directory is left out:
    /// where artifacts go does not change what they contain.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Write the config into `dir` and return the file path.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::from_json(r#"{"seed": 5, "distill": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.distill.epochs, 3);
        assert_eq!(c.distill.lambda, 4.0);
        assert_eq!(c.methods.gamma, 10.0);
        assert_eq!(c.methods.cls.lr, 5e-5);
        assert_eq!(c.methods.sim.lr, 2e-5);
        assert_eq!(c.methods.selector.beta, 5e-5);
        assert_eq!(c.methods.selector.batch_size, 8);
        assert_eq!(c.methods.selector.epochs, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"distill": {"lamda": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"methods": {"cls": {"hiden": 2}}}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig {
            seed: 42,
            ..Default::default()
        }
        .resolved();
        assert_eq!(c.encoder.seed, 42);
        assert_eq!(c.student.vocab_seed, 42);
        assert_eq!(c.methods.selector.seed, 42);
    }

    #[test]
    fn hash_tracks_content_and_round_trips() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.distill.lambda = 2.0;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.paths.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), c.hash());
        let back = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(back.hash(), a.hash());
        let dir = tempfile::tempdir().unwrap();
        let p = a.persist(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), a);
    }
}
