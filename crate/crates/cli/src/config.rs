//! Run configuration file.
//!
//! Every section is optional and falls back to the reference defaults.
//! Unknown keys anywhere are rejected. Command-line flags override values
//! read from the file, and the resolved result is echoed into every output.

use std::path::{Path, PathBuf};

use refinebridge::data::{
    default_context, DatasetConfig, NormScope, PriorKind, SplitSpec, Transform, DEFAULT_EPS,
};
use refinebridge::eval::MetricSpace;
use refinebridge::sampler::{RefinementConfig, SamplerKind};
use refinebridge::trainer::TrainConfig;
use refinebridge::{ModelConfig, Schedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub asset: String,
    pub context: usize,
    pub horizon: usize,
    pub prior: PriorKind,
    pub eps: f64,
    pub normalization: NormScope,
    pub transform: Transform,
    pub split: SplitSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            asset: "series".into(),
            context: default_context(5),
            horizon: 5,
            prior: PriorKind::Mean,
            eps: DEFAULT_EPS,
            normalization: NormScope::PerWindow,
            transform: Transform::Level,
            split: SplitSpec::default(),
        }
    }
}

impl DataSection {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            context: self.context,
            horizon: self.horizon,
            eps: self.eps,
            normalization: self.normalization,
            transform: self.transform,
            split: self.split,
        }
    }
}

/// Explicit `beta0`/`beta1`; when both are absent the schedule follows the
/// horizon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
}

impl ScheduleSection {
    pub fn resolve(&self, horizon: usize) -> Result<Schedule, String> {
        match (self.beta0, self.beta1) {
            (None, None) => Ok(Schedule::for_horizon(horizon)),
            (Some(b0), Some(b1)) => Schedule::new(b0, b1).map_err(|e| e.to_string()),
            _ => Err("schedule.beta0 and schedule.beta1 must be given together".into()),
        }
    }
}

/// Network widths; horizon and context come from the data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub kernel_size: usize,
    pub ma_kernel: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            embed_dim: m.embed_dim,
            base_channels: m.base_channels,
            time_embed_dim: m.time_embed_dim,
            time_hidden: m.time_hidden,
            kernel_size: m.kernel_size,
            ma_kernel: m.ma_kernel,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, horizon: usize, context: usize) -> ModelConfig {
        ModelConfig {
            horizon,
            context,
            embed_dim: self.embed_dim,
            base_channels: self.base_channels,
            time_embed_dim: self.time_embed_dim,
            time_hidden: self.time_hidden,
            kernel_size: self.kernel_size,
            ma_kernel: self.ma_kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Independent SDE runs; ODE refinement is deterministic and runs once.
    pub runs: usize,
    pub start: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ode,
            steps: 10,
            temperature: 1.0,
            seed: 0,
            runs: 5,
            start: 1.0,
        }
    }
}

impl SamplerSection {
    pub fn refinement(&self, seed: u64) -> RefinementConfig {
        RefinementConfig {
            kind: self.kind,
            steps: self.steps,
            temperature: self.temperature,
            seed: Some(seed),
            record_trajectory: false,
            start: self.start,
        }
    }

    pub fn effective_runs(&self) -> usize {
        match self.kind {
            SamplerKind::Ode => 1,
            SamplerKind::Sde => self.runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub space: MetricSpace,
    /// Number of samples exported for plotting (0 disables).
    pub plot_samples: usize,
    /// Context points shown before the horizon in plots.
    pub plot_context: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            space: MetricSpace::Normalized,
            plot_samples: 0,
            plot_context: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Worker threads; 0 lets the pool decide, 1 runs sequentially.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub runtime: RuntimeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn schedule(&self) -> Result<Schedule, String> {
        self.schedule.resolve(self.data.horizon)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .model_config(self.data.horizon, self.data.context)
    }

    /// Every problem at once, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.data.dataset_config().validate();
        if let Err(e) = self.schedule() {
            errs.push(e);
        }
        errs.extend(self.model_config().validate());
        errs.extend(self.train.validate());
        errs.extend(self.sampler.refinement(self.sampler.seed).validate());
        if self.sampler.runs == 0 {
            errs.push("sampler.runs must be >= 1".into());
        }
        errs
    }
}

/// Paths that must exist before any compute starts.
pub fn check_inputs(paths: &[(&str, &Path)]) -> Vec<String> {
    paths
        .iter()
        .filter(|(_, p)| !p.exists())
        .map(|(what, p)| format!("{what} not found: {}", p.display()))
        .collect()
}

/// `<path><suffix>` next to an output file, e.g. `out.csv.meta.toml`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.adam_eps, 1e-8);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.schedule().unwrap(), Schedule::SHORT_HORIZON);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg =
            RunConfig::parse("[data]\nhorizon = 63\ncontext = 252\n[train]\nbatch_size = 64\n")
                .unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.schedule().unwrap(), Schedule::LONG_HORIZON);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rte"), "{err}");
        assert!(RunConfig::parse("[extra]\nx = 1\n").is_err());
        assert!(RunConfig::parse(
            "[data.split]\ntrain = 0.8\nval = 0.1\ntest = 0.1\nholdout = 0.0\n"
        )
        .is_err());
    }

    #[test]
    fn validation_is_exhaustive() {
        let cfg = RunConfig::parse(
            "[data]\nhorizon = 0\n[schedule]\nbeta0 = 1.0\n[train]\nbatch_size = 0\n[sampler]\nsteps = 0\nruns = 0\n",
        )
        .unwrap();
        let errs = cfg.validate();
        for needle in [
            "data.horizon",
            "schedule.beta0",
            "train.batch_size",
            "sampler.steps",
            "sampler.runs",
        ] {
            assert!(
                errs.iter().any(|e| e.contains(needle)),
                "missing {needle} in {errs:?}"
            );
        }
    }

    #[test]
    fn explicit_schedule_overrides_horizon_choice() {
        let cfg = RunConfig::parse("[schedule]\nbeta0 = 0.1\nbeta1 = 2.0\n").unwrap();
        let s = cfg.schedule().unwrap();
        assert_eq!((s.beta0(), s.beta1()), (0.1, 2.0));
        let bad = RunConfig::parse("[schedule]\nbeta0 = 3.0\nbeta1 = 2.0\n").unwrap();
        assert!(bad.schedule().is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(
            sidecar(Path::new("a/out.csv"), ".meta.toml"),
            PathBuf::from("a/out.csv.meta.toml")
        );
    }
}
