//! Run configuration, read from TOML.
//!
//! Every optimizer and loss hyper-parameter has a named key whose default is
//! the value used for the gated models; see `README.md` for the full schema.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hagroute_core::data::SynthConfig;
use hagroute_core::loss::{Objective, SizeLossConfig};
use hagroute_core::metrics::F1Average;
use hagroute_core::nn::{Architecture, HeadKind, ModelConfig};
use hagroute_core::optim::GroupConfig;
use hagroute_core::train::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliResult, Failure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    /// Objective of the gate phase. Defaults follow the head type.
    #[serde(default)]
    pub loss_att: Option<Objective>,
    /// Objective of the main phase (and of standard training).
    #[serde(default)]
    pub loss_main: Option<Objective>,
    /// Required by every subcommand except `gradcheck`.
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// Two-phase gradient routing; defaults to `model.use_hag`.
    #[serde(default)]
    pub gr_enabled: Option<bool>,
    /// Force plain SGD in both groups.
    #[serde(default)]
    pub sgd_mode: bool,
    #[serde(default)]
    pub att: Option<GroupConfig>,
    #[serde(default)]
    pub main: Option<GroupConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV table or CIFAR-100 binary file; relative paths resolve against
    /// the config file's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub cifar: CifarSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    /// Standardise image channels with training-split statistics.
    #[serde(default = "yes")]
    pub normalize_channels: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSection {
    /// Fine labels to keep, relabelled to their position in this list.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub per_class: Option<usize>,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "five")]
    pub k: usize,
    #[serde(default)]
    pub test_fold: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            k: 5,
            test_fold: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    /// Standard deviation of additive Gaussian noise on training inputs.
    #[serde(default)]
    pub gaussian_noise_std: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "ten")]
    pub epochs: usize,
    #[serde(default = "thirty_two")]
    pub batch_size: usize,
    /// Seeds model initialisation and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Element type of checkpoint payloads.
    #[serde(default)]
    pub precision: Precision,
    /// Store Adam moments and schedule state with the best checkpoint.
    #[serde(default)]
    pub save_optimizer_state: bool,
    #[serde(default)]
    pub f1_average: F1Average,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: ten(),
            batch_size: thirty_two(),
            seed: 0,
            out_dir: default_out_dir(),
            precision: Precision::F32,
            save_optimizer_state: false,
            f1_average: F1Average::Macro,
        }
    }
}

fn yes() -> bool {
    true
}
fn five() -> usize {
    5
}
fn ten() -> usize {
    10
}
fn thirty_two() -> usize {
    32
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Command-line overrides applied after parsing, before validation.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::validation(format!("`{field}`: {msg}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| Failure::Validation(anyhow::anyhow!("{e}")))
    }

    /// Reads, resolves relative paths, applies `overrides` and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Validation)?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.data.as_mut().and_then(|d| d.path.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.run.seed = seed;
            self.model.seed = seed;
        }
        if let (Some(p), Some(d)) = (&o.data, self.data.as_mut()) {
            d.path = Some(p.clone());
        }
        if let Some(d) = &o.out_dir {
            self.run.out_dir = d.clone();
        }
    }

    pub fn data(&self) -> CliResult<&DataSection> {
        self.data
            .as_ref()
            .ok_or_else(|| invalid("data", "this command needs a [data] section"))
    }

    pub fn gr_enabled(&self) -> bool {
        self.optimizer.gr_enabled.unwrap_or(self.model.use_hag)
    }

    pub fn att_group(&self) -> GroupConfig {
        let mut g = self.optimizer.att.clone().unwrap_or_else(GroupConfig::att_default);
        g.sgd |= self.optimizer.sgd_mode;
        g
    }

    pub fn main_group(&self) -> GroupConfig {
        let vit = self.model.architecture == Architecture::MicroVit;
        let mut g = self
            .optimizer
            .main
            .clone()
            .unwrap_or_else(|| GroupConfig::main_default(vit));
        g.sgd |= self.optimizer.sgd_mode;
        g
    }

    fn default_objective(&self) -> Objective {
        match self.model.head {
            HeadKind::Regression => Objective::WeightedHuber(SizeLossConfig::default()),
            HeadKind::Classification => Objective::CrossEntropy,
        }
    }

    pub fn loss_att(&self) -> Objective {
        self.loss_att.clone().unwrap_or_else(|| self.default_objective())
    }

    pub fn loss_main(&self) -> Objective {
        self.loss_main.clone().unwrap_or_else(|| self.default_objective())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            gr_enabled: self.gr_enabled(),
            att: self.att_group(),
            main: self.main_group(),
            loss_att: self.loss_att(),
            loss_main: self.loss_main(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        if self.optimizer.gr_enabled == Some(true) && !self.model.use_hag {
            return Err(invalid(
                "optimizer.gr_enabled",
                "gradient routing needs gates; set model.use_hag = true",
            ));
        }
        self.att_group().validate("optimizer.att")?;
        self.main_group().validate("optimizer.main")?;
        for (field, obj) in [("loss_att", self.loss_att()), ("loss_main", self.loss_main())] {
            match (&obj, self.model.head) {
                (Objective::WeightedHuber(cfg), HeadKind::Regression) => {
                    cfg.validate().map_err(|e| invalid(field, e))?
                }
                (Objective::Mse, HeadKind::Regression) | (Objective::CrossEntropy, HeadKind::Classification) => {}
                _ => {
                    return Err(invalid(
                        &format!("{field}.kind"),
                        format!("objective does not fit a {:?} head", self.model.head),
                    ))
                }
            }
        }
        if let Some(d) = &self.data {
            self.validate_data(d)?;
        }
        let r = &self.run;
        if r.epochs == 0 {
            return Err(invalid("run.epochs", "must be at least 1"));
        }
        if r.batch_size == 0 {
            return Err(invalid("run.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn validate_data(&self, d: &DataSection) -> CliResult<()> {
        let s = d.split;
        hagroute_core::data::SplitPlan::new(s.k, s.test_fold)?;
        if !(d.augmentation.gaussian_noise_std >= 0.0 && d.augmentation.gaussian_noise_std.is_finite()) {
            return Err(invalid("data.augmentation.gaussian_noise_std", "must be finite and >= 0"));
        }
        let features: usize = self.model.input_shape.iter().product();
        let want_head = match d.source {
            DataSource::Synthetic => {
                let syn = d
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| invalid("data.synthetic", "required when source = \"synthetic\""))?;
                syn.validate()?;
                if syn.n_features() != features {
                    return Err(invalid(
                        "data.synthetic",
                        format!(
                            "{} features do not fill model.input_shape {:?}",
                            syn.n_features(),
                            self.model.input_shape
                        ),
                    ));
                }
                HeadKind::Regression
            }
            DataSource::Csv => {
                require_path(d)?;
                HeadKind::Regression
            }
            DataSource::Cifar100 => {
                require_path(d)?;
                if self.model.input_shape != [3, 32, 32] {
                    return Err(invalid("model.input_shape", "CIFAR-100 images are [3, 32, 32]"));
                }
                let k = d.cifar.classes.as_ref().map_or(100, Vec::len);
                if self.model.num_classes != k {
                    return Err(invalid(
                        "model.num_classes",
                        format!("data provides {k} classes, model has {}", self.model.num_classes),
                    ));
                }
                HeadKind::Classification
            }
        };
        if self.model.head != want_head {
            return Err(invalid(
                "model.head",
                format!("{:?} data needs a {want_head:?} head", d.source),
            ));
        }
        Ok(())
    }
}

fn require_path(d: &DataSection) -> CliResult<&Path> {
    let p = d
        .path
        .as_deref()
        .ok_or_else(|| invalid("data.path", "required for this source"))?;
    if !p.exists() {
        return Err(invalid("data.path", format!("{} does not exist", p.display())));
    }
    Ok(p)
}
