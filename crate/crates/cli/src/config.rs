//! Audit configuration, its validation and the content-addressed run
//! directory derived from it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use faudit_core::explainers::{ids, RiseConfig};
use faudit_core::faithfulness::{AuditSettings, StabilityConfig};
use faudit_core::models::train::TrainConfig;
use faudit_core::models::{Arch, CnnConfig, Family, VitConfig};
use faudit_core::stats::BootstrapConfig;
use faudit_core::synthwafer::{DatasetSpec, Geometry, SplitCounts, WaferClass};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bad configuration or missing inputs; the binary exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub const EXPLAINERS: [&str; 5] = [ids::GRADCAM, ids::ROLLOUT, ids::CLS_ATTENTION, ids::RISE, ids::RANDOM];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub per_class: SplitCounts,
    /// Per-class overrides of `per_class`.
    pub counts: BTreeMap<WaferClass, SplitCounts>,
    pub noise_rate: f64,
    pub master_seed: u64,
    pub geometry: Geometry,
    /// Test samples per class drawn into the audited subset.
    pub eval_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            per_class: SplitCounts {
                train: 120,
                val: 40,
                test: 40,
            },
            counts: BTreeMap::new(),
            noise_rate: 0.05,
            master_seed: 0,
            geometry: Geometry::default(),
            eval_per_class: 20,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::uniform(self.per_class, self.noise_rate, self.master_seed);
        spec.image_size = self.image_size;
        spec.geometry = self.geometry;
        for (class, counts) in &self.counts {
            spec.counts.insert(*class, *counts);
        }
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Built-in convolutional reference model, trained per seed.
    Cnn,
    /// Built-in transformer reference model, trained per seed.
    Vit,
    /// A saved reference-model checkpoint, shared by all seeds.
    Checkpoint,
    /// An external classifier behind the black-box protocol.
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub kind: ModelKind,
    pub explainers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

impl ModelEntry {
    pub fn trained(&self) -> bool {
        matches!(self.kind, ModelKind::Cnn | ModelKind::Vit)
    }

    /// Architecture of a built-in model, sized to the dataset.
    pub fn resolved_arch(&self, image_size: usize) -> Option<Arch> {
        match (self.kind, &self.arch) {
            (ModelKind::Cnn | ModelKind::Vit, Some(a)) => Some(a.clone()),
            (ModelKind::Cnn, None) => Some(Arch::Cnn(CnnConfig::with_size(image_size))),
            (ModelKind::Vit, None) => Some(Arch::Vit(VitConfig::with_size(image_size))),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub enabled: bool,
    /// Explainers for which stability is not computed.
    pub skip: Vec<String>,
    #[serde(flatten)]
    pub config: StabilityConfig,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            enabled: true,
            skip: vec![ids::RISE.to_string()],
            config: StabilityConfig::default(),
        }
    }
}

impl StabilitySection {
    pub fn applies_to(&self, explainer: &str) -> bool {
        self.enabled && !self.skip.iter().any(|s| s == explainer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub bootstrap: BootstrapConfig,
    pub bootstrap_seed: u64,
    /// Class dropped in the exclusion rerun.
    pub exclude_class: Option<WaferClass>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            bootstrap: BootstrapConfig::default(),
            bootstrap_seed: 0,
            exclude_class: Some(WaferClass::None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub audit: AuditSettings,
    #[serde(default)]
    pub rise: RiseConfig,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub report: ReportConfig,
    pub models: Vec<ModelEntry>,
}

impl AuditConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_error(format!("invalid config: {e}")))
    }

    /// Reads a config file; relative model paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            if let Some(p) = &m.path {
                if p.is_relative() {
                    m.path = Some(base.join(p));
                }
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).map_err(|e| config_error(format!("config cannot be serialized: {e}")))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("`seeds` must not be empty"));
        }
        if self.models.is_empty() {
            return Err(config_error("no models configured"));
        }
        self.dataset
            .spec()
            .validate()
            .map_err(|e| config_error(format!("dataset: {e}")))?;
        if self.dataset.eval_per_class == 0 {
            return Err(config_error("dataset.eval_per_class must be positive"));
        }
        self.rise
            .validate(self.dataset.image_size, self.dataset.image_size)
            .map_err(|e| config_error(format!("rise: {e}")))?;
        if self.audit.curve_steps == 0 || self.audit.fills.is_empty() {
            return Err(config_error("audit needs at least one curve step and one fill"));
        }
        if let Some(k) = self.audit.topk_percents.iter().find(|&&k| k == 0 || k > 100) {
            return Err(config_error(format!("top-k percent {k} outside 1..=100")));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            self.validate_model(m)?;
            if !names.insert(m.name.as_str()) {
                return Err(config_error(format!("duplicate model name `{}`", m.name)));
            }
        }
        Ok(())
    }

    fn validate_model(&self, m: &ModelEntry) -> anyhow::Result<()> {
        let bad = |msg: String| Err(config_error(format!("model `{}`: {msg}", m.name)));
        if m.name.is_empty() || m.name.contains(['/', '\\', ',']) {
            return bad("names must be non-empty and free of `/`, `\\` and `,`".into());
        }
        if m.explainers.is_empty() {
            return bad("no explainers listed".into());
        }
        for e in &m.explainers {
            if !EXPLAINERS.contains(&e.as_str()) {
                return bad(format!("unknown explainer `{e}` (known: {})", EXPLAINERS.join(", ")));
            }
        }
        let family = match m.kind {
            ModelKind::Cnn | ModelKind::Vit => {
                let arch = m.resolved_arch(self.dataset.image_size).unwrap();
                let family = match &arch {
                    Arch::Cnn(c) => (c.image_size, Family::Cnn),
                    Arch::Vit(v) => (v.image_size, Family::Vit),
                };
                if (m.kind == ModelKind::Cnn) != (family.1 == Family::Cnn) {
                    return bad("`arch` family does not match `kind`".into());
                }
                if family.0 != self.dataset.image_size {
                    return bad(format!(
                        "architecture expects {}px images, dataset has {}px",
                        family.0, self.dataset.image_size
                    ));
                }
                Some(family.1)
            }
            ModelKind::Checkpoint => {
                let Some(p) = &m.path else {
                    return bad("checkpoint models need `path`".into());
                };
                if !p.is_file() {
                    return bad(format!("checkpoint {} does not exist", p.display()));
                }
                None
            }
            ModelKind::Adapter => {
                let Some(cmd) = m.command.as_ref().filter(|c| !c.is_empty()) else {
                    return bad("adapter models need a non-empty `command`".into());
                };
                if !executable_exists(&cmd[0]) {
                    return bad(format!("adapter executable `{}` not found", cmd[0]));
                }
                for e in &m.explainers {
                    if e != ids::RISE && e != ids::RANDOM {
                        return bad(format!("explainer `{e}` needs model internals; adapters allow rise and random"));
                    }
                }
                None
            }
        };
        if family == Some(Family::Cnn) {
            for e in &m.explainers {
                if e == ids::ROLLOUT || e == ids::CLS_ATTENTION {
                    return bad(format!("explainer `{e}` needs an attention model"));
                }
            }
        }
        Ok(())
    }

    /// Hex digest of the resolved config.
    pub fn digest(&self) -> anyhow::Result<String> {
        let hash = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn run_dir(&self) -> anyhow::Result<PathBuf> {
        Ok(self.output_dir.join(format!("run-{}", &self.digest()?[..12])))
    }

    pub fn train_config(&self, m: &ModelEntry, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..m.train.clone().unwrap_or_else(|| self.train.clone())
        }
    }
}

fn executable_exists(cmd: &str) -> bool {
    let p = Path::new(cmd);
    if p.components().count() > 1 {
        return p.is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(cmd).is_file()))
        .unwrap_or(false)
}
