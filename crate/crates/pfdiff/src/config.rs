//! Pipeline configuration: one declarative TOML document covering every
//! stage, with every default materialized explicitly.
//!
//! [`PipelineConfig::for_case`] produces the per-case default document
//! (bound-width multiplier, terminal imbalance level, retry budgets differ
//! between the bundled grids); [`PipelineConfig::to_toml`] renders it with
//! all values written out, and [`PipelineConfig::load`] reads a user file,
//! filling any omitted field from the generic defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::bound::ImbalanceBound;
use crate::diffusion::schedule::{DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_T_STEPS};
use crate::diffusion::train::{HingeAttach, TrainingConfig};
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::nn::DenoiserConfig;
use crate::pf::dataset::GenerationConfig;
use crate::pf::dispatch::PerturbRanges;

/// Dataset-generation settings (`[data]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n: usize,
    /// Per-load demand multiplier range.
    pub load_range: (f64, f64),
    /// Per-generator marginal-cost multiplier range.
    pub cost_range: (f64, f64),
    /// Voltage-setpoint band, intersected with case bus limits.
    pub voltage_range: (f64, f64),
    /// Loss cushion added to total demand before dispatch.
    pub loss_estimate: f64,
    /// Width multiplier for the data-calibrated normalization bounds.
    pub k_sigma: f64,
    pub max_attempts: usize,
    pub window: usize,
    pub abort_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        DataSection {
            n: 70_000,
            load_range: g.ranges.load,
            cost_range: g.ranges.cost,
            voltage_range: g.ranges.voltage,
            loss_estimate: g.loss_estimate,
            k_sigma: g.k_sigma,
            max_attempts: g.max_attempts,
            window: g.window,
            abort_rate: g.abort_rate,
        }
    }
}

/// Schedule-learner settings (`[schedule]`). The β endpoints parameterize
/// the linear baseline the learner starts from (and the `--schedule linear`
/// mode of the trainer and sampler).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub t_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub gamma_terminal: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub per_step_noise: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let l = LearnerConfig::default();
        ScheduleSection {
            t_steps: DEFAULT_T_STEPS,
            beta_1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
            gamma_terminal: l.gamma_terminal,
            batch_size: l.batch_size,
            max_epochs: l.max_epochs,
            lr: l.lr,
            patience: l.patience,
            min_rel_improvement: l.min_rel_improvement,
            per_step_noise: l.per_step_noise,
        }
    }
}

/// Denoiser training settings (`[ddpm]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmSection {
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub hinge_attach: HingeAttach,
    pub predict_x0: bool,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub attention: bool,
    pub attention_channels: usize,
}

impl Default for DdpmSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        let d = DenoiserConfig::default();
        DdpmSection {
            eta: t.eta,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            hinge_attach: t.hinge_attach,
            predict_x0: t.predict_x0,
            hidden: d.hidden,
            time_dim: d.time_dim,
            attention: d.attention,
            attention_channels: d.attention_channels,
        }
    }
}

/// Sampling settings (`[sample]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: 500 }
    }
}

/// The whole pipeline document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub case: String,
    pub seed: u64,
    pub workers: usize,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub ddpm: DdpmSection,
    pub sample: SampleSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            case: "case14".into(),
            seed: 0,
            workers: 1,
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
            ddpm: DdpmSection::default(),
            sample: SampleSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Default document for a bundled case: generation retry budgets, the
    /// bound-width multiplier, and the terminal imbalance level all depend
    /// on the grid.
    pub fn for_case(case_name: &str) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.case = case_name.to_string();
        let g = GenerationConfig::for_case(case_name);
        cfg.data.k_sigma = g.k_sigma;
        cfg.data.max_attempts = g.max_attempts;
        cfg.data.abort_rate = g.abort_rate;
        if let Some(gamma) = ImbalanceBound::gamma_terminal_for(case_name) {
            cfg.schedule.gamma_terminal = gamma;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.case.is_empty() {
            return Err(Error::InvalidConfig("case name must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.data.n == 0 {
            return Err(Error::InvalidConfig("data.n must be >= 1".into()));
        }
        if self.sample.n == 0 {
            return Err(Error::InvalidConfig("sample.n must be >= 1".into()));
        }
        self.generation_config().validate()?;
        self.learner_config().validate()?;
        self.training_config().validate()?;
        // The denoiser dimension is case-dependent; validate the
        // architecture with a stand-in width.
        self.denoiser_config(60).validate()?;
        if !(self.schedule.beta_1 > 0.0
            && self.schedule.beta_1 < 1.0
            && self.schedule.beta_t > 0.0
            && self.schedule.beta_t < 1.0)
        {
            return Err(Error::InvalidConfig(
                "schedule beta endpoints must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            ranges: PerturbRanges {
                load: self.data.load_range,
                cost: self.data.cost_range,
                voltage: self.data.voltage_range,
            },
            loss_estimate: self.data.loss_estimate,
            k_sigma: self.data.k_sigma,
            max_attempts: self.data.max_attempts,
            window: self.data.window,
            abort_rate: self.data.abort_rate,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            t_steps: self.schedule.t_steps,
            gamma_terminal: self.schedule.gamma_terminal,
            batch_size: self.schedule.batch_size,
            max_epochs: self.schedule.max_epochs,
            lr: self.schedule.lr,
            patience: self.schedule.patience,
            min_rel_improvement: self.schedule.min_rel_improvement,
            seed: self.seed,
            per_step_noise: self.schedule.per_step_noise,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            eta: self.ddpm.eta,
            t_steps: self.schedule.t_steps,
            gamma_terminal: self.schedule.gamma_terminal,
            batch_size: self.ddpm.batch_size,
            epochs: self.ddpm.epochs,
            seed: self.seed,
            lr: self.ddpm.lr,
            hinge_attach: self.ddpm.hinge_attach,
            predict_x0: self.ddpm.predict_x0,
        }
    }

    pub fn denoiser_config(&self, dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            dim,
            hidden: self.ddpm.hidden.clone(),
            time_dim: self.ddpm.time_dim,
            attention: self.ddpm.attention,
            attention_channels: self.ddpm.attention_channels,
        }
    }

    /// Render the document with every value written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read a (possibly partial) document; omitted fields take the generic
    /// defaults. The result is validated.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: PipelineConfig =
            toml::from_str(&body).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
