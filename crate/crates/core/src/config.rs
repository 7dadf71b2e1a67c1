//! JSON run configuration with strict keys and filled-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{load_jsonl, DomainCorpus, Example, SyntheticSpec, Verbalizer};
use crate::error::{Error, Result};
use crate::experiments::{Ablation, Domains, Method, Settings, TaskSpec, DEFAULT_SEEDS};
use crate::model::ModelConfig;
use crate::training::{StageConfig, WarmupConfig};

/// Where the corpus comes from. With neither set, the default synthetic
/// benchmark is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    /// Directory of `<domain>.labeled.jsonl` and `<domain>.unlabeled.jsonl`.
    pub dir: Option<PathBuf>,
}

impl DataConfig {
    /// Loads or generates every domain.
    pub fn load(&self) -> Result<Domains> {
        match (&self.synthetic, &self.dir) {
            (Some(_), Some(_)) => Err(Error::Config("data: set only one of `synthetic` and `dir`".into())),
            (None, Some(dir)) => load_domain_dir(dir),
            (spec, None) => crate::corpus::generate_synthetic(&spec.clone().unwrap_or_default()),
        }
    }
}

/// Reads every `<domain>.labeled.jsonl` in `dir` with its unlabeled sibling.
pub fn load_domain_dir(dir: &Path) -> Result<Domains> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Domains::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".labeled.jsonl"))
        else {
            continue;
        };
        let labeled = load_jsonl(&path)?;
        let unlabeled_path = dir.join(format!("{name}.unlabeled.jsonl"));
        let unlabeled: Vec<Example> = if unlabeled_path.exists() {
            load_jsonl(&unlabeled_path)?
        } else {
            Vec::new()
        };
        out.insert(name.to_string(), DomainCorpus { labeled, unlabeled });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no *.labeled.jsonl files in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source_domains: Vec<String>,
    pub target_domain: String,
    pub method: Method,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub adapt: Option<bool>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_domains: vec!["A".into()],
            target_domain: "B".into(),
            method: Method::TamePt,
            ablation: Ablation::None,
            seeds: DEFAULT_SEEDS.to_vec(),
            adapt: None,
        }
    }
}

impl ExperimentConfig {
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            source_domains: self.source_domains.clone(),
            target_domain: self.target_domain.clone(),
            method: self.method,
            ablation: self.ablation,
            seeds: self.seeds.clone(),
            adapt: self.adapt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub warmup: Option<WarmupConfig>,
    pub max_len: usize,
    pub verbalizer: Verbalizer,
    pub min_frequency: usize,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    /// Defaults to a name derived from the experiment.
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = Settings::default();
        Self {
            data: DataConfig::default(),
            model: s.model,
            stage1: s.stage1,
            stage2: s.stage2,
            warmup: s.warmup,
            max_len: s.max_len,
            verbalizer: s.verbalizer,
            min_frequency: s.min_frequency,
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

/// Overlays `user` onto `defaults`. Objects merge key by key; anything else
/// replaces. Keys absent from a default object are rejected.
fn merge(defaults: &mut Value, user: Value, path: &str) -> Result<()> {
    match (defaults, user) {
        (Value::Object(d), Value::Object(u)) => {
            for (k, v) in u {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &child)?,
                    None => return Err(Error::Config(format!("unknown key `{child}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Parses a config, filling every omitted key from the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("top level must be an object".into()));
        }
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, user, "")?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("`{path}`: {}", e.into_inner()))
        })?;
        if cfg.data.synthetic.is_none() && cfg.data.dir.is_none() {
            cfg.data.synthetic = Some(SyntheticSpec::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, e: Error| Error::Config(format!("`{section}`: {e}"));
        if self.data.synthetic.is_some() && self.data.dir.is_some() {
            return Err(Error::Config("`data`: set only one of `synthetic` and `dir`".into()));
        }
        if let Some(spec) = &self.data.synthetic {
            spec.validate().map_err(|e| at("data.synthetic", e))?;
        }
        self.stage1.validate().map_err(|e| at("stage1", e))?;
        self.stage2.validate().map_err(|e| at("stage2", e))?;
        self.experiment.task().validate().map_err(|e| at("experiment", e))?;
        if self.max_len == 0 {
            return Err(Error::Config("`max_len`: must be positive".into()));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains("..") || Path::new(id).is_absolute() {
                return Err(Error::Config(format!("`run_id`: `{id}` is not a relative directory name")));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings {
            model: self.model.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            warmup: self.warmup.clone(),
            max_len: self.max_len,
            verbalizer: self.verbalizer.clone(),
            min_frequency: self.min_frequency,
        }
    }

    pub fn task(&self) -> TaskSpec {
        self.experiment.task()
    }

    /// The configured run id, or `<sources>-to-<target>/<method>/<ablation>`.
    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let t = self.task();
            format!(
                "{}-to-{}/{}/{}",
                t.source_domains.concat(),
                t.target_domain,
                t.method,
                t.ablation
            )
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
