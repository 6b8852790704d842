//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use mgg_core::backbone::BackboneConfig;
use mgg_core::groups::{validate, AttributeCatalog, GroupAssignment};
use mgg_core::heads::LossMode;
use mgg_core::model::{ModelConfig, Variant};
use mgg_core::synth::SyntheticSpec;
use mgg_core::train::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Kind, ResultExt};

/// A named backbone preset or a full description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneChoice {
    Preset(String),
    Custom(BackboneConfig),
}

impl BackboneChoice {
    pub fn resolve(&self) -> CliResult<BackboneConfig> {
        match self {
            Self::Custom(c) => Ok(c.clone()),
            Self::Preset(name) => match name.as_str() {
                "synthetic_32" => Ok(BackboneConfig::synthetic_32()),
                "desk_64" => Ok(BackboneConfig::desk_64()),
                "reference_224" => Ok(BackboneConfig::reference_224()),
                other => Err(CliError::config(format!(
                    "unknown backbone preset `{other}` (expected synthetic_32, desk_64 or reference_224)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneChoice,
    /// Overrides the backbone's tapped blocks (1-based).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_blocks: Option<Vec<usize>>,
    pub n_attrs: usize,
    /// `"default"` or a `group_name,attr_index` CSV path.
    #[serde(default = "default_groups")]
    pub groups: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_groups() -> String {
    "default".into()
}

fn default_alpha() -> f64 {
    mgg_core::gcl::DEFAULT_ALPHA
}

fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_loss")]
    pub mode: LossMode,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// `[epochs, learning_rate]` pairs run in order.
    pub schedule: Vec<(usize, f64)>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
}

fn default_loss() -> LossMode {
    LossMode::Plain
}

fn default_batch() -> usize {
    32
}

fn default_momentum() -> f64 {
    0.9
}

/// The built-in desk generator or an explicit spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorChoice {
    Named(String),
    Spec(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: PathBuf,
}

/// Where the samples come from, after validation.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Generator { spec: SyntheticSpec, count: usize },
}

impl RunConfig {
    /// The 32x32 synthetic benchmark: 12 attributes in 4 groups, 1000 samples.
    pub fn desk_default() -> Self {
        Self {
            model: ModelSection {
                backbone: BackboneChoice::Preset("synthetic_32".into()),
                tap_blocks: None,
                n_attrs: 12,
                groups: default_groups(),
                alpha: default_alpha(),
                variant: Variant::Full,
            },
            training: TrainingSection {
                mode: LossMode::Plain,
                batch_size: 32,
                schedule: vec![(20, 0.01), (10, 0.001)],
                momentum: 0.9,
                seed: 7,
                augment: false,
            },
            data: DataSection {
                manifest: None,
                generator: Some(GeneratorChoice::Named("default".into())),
                count: Some(1000),
                split: default_split(),
            },
            output: PathBuf::from("runs/desk"),
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).or_kind(Kind::Config, "config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).or_kind(Kind::Config, path.display())?;
        let mut cfg = Self::from_json(&text).map_err(|e| e.context(path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = cfg.data.manifest.as_mut() {
            *m = base.join(&*m);
        }
        if cfg.model.groups != "default" {
            cfg.model.groups = base.join(&cfg.model.groups).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn backbone(&self) -> CliResult<BackboneConfig> {
        let mut b = self.model.backbone.resolve()?;
        if let Some(t) = &self.model.tap_blocks {
            b.tap_blocks = t.clone();
        }
        b.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(b)
    }

    pub fn data_source(&self) -> CliResult<DataSource> {
        match (&self.data.manifest, &self.data.generator) {
            (Some(m), None) => Ok(DataSource::Manifest(m.clone())),
            (None, Some(g)) => {
                let spec = match g {
                    GeneratorChoice::Spec(s) => s.clone(),
                    GeneratorChoice::Named(n) if n == "default" => SyntheticSpec::desk_default(),
                    GeneratorChoice::Named(n) => return Err(CliError::config(format!("unknown generator `{n}`"))),
                };
                spec.validate().map_err(|e| CliError::config(e.to_string()))?;
                let count = self.data.count.ok_or_else(|| CliError::config("data.count is required with a generator"))?;
                if count == 0 {
                    return Err(CliError::config("data.count must be at least 1"));
                }
                Ok(DataSource::Generator { spec, count })
            }
            _ => Err(CliError::config("data needs exactly one of `manifest` or `generator`")),
        }
    }

    /// The configured partition: a CSV file, or `"default"`, which means the
    /// generator's groups for synthetic data and the face table for 40
    /// attributes.
    pub fn groups(&self) -> CliResult<GroupAssignment> {
        let n = self.model.n_attrs;
        if self.model.groups != "default" {
            let path = Path::new(&self.model.groups);
            let text = fs::read_to_string(path).or_kind(Kind::Config, path.display())?;
            return GroupAssignment::from_csv(&text, &AttributeCatalog::numbered(n))
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())));
        }
        if let Ok(DataSource::Generator { spec, .. }) = self.data_source() {
            return Ok(spec.group_assignment());
        }
        if n == 40 {
            return Ok(GroupAssignment::face_default());
        }
        Err(CliError::config(format!("no default group assignment for {n} attributes; give a CSV path")))
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone()?,
            n_attrs: self.model.n_attrs,
            alpha: self.model.alpha,
            variant: self.model.variant,
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.training;
        let cfg = TrainConfig {
            loss: t.mode,
            batch_size: t.batch_size,
            schedule: t.schedule.iter().map(|&(epochs, lr)| Phase { epochs, lr }).collect(),
            momentum: t.momentum,
            seed: t.seed,
            augment: t.augment,
        };
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> CliResult<()> {
        self.model_config()?;
        self.train_config()?;
        let n = self.model.n_attrs;
        if let DataSource::Generator { spec, .. } = self.data_source()? {
            if spec.attributes.len() != n {
                return Err(CliError::config(format!("generator has {} attributes, model.n_attrs is {n}", spec.attributes.len())));
            }
        }
        let groups = self.groups()?;
        if let Some(v) = validate(&groups, &AttributeCatalog::numbered(n)).first() {
            return Err(CliError::config(format!("group assignment does not partition {n} attributes: {v}")));
        }
        Ok(())
    }
}
