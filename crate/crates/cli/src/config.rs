//! Experiment configuration files.
//!
//! TOML is the authoring format. The resolved per-repetition echo is written
//! as JSON and accepted back by `--config`, so a run can be reproduced from
//! its own artifacts.

use std::path::{Path, PathBuf};

use fairsaoml_core::engine::SplitSpec;
use fairsaoml_core::experts::ActivityRule;
use fairsaoml_core::optim::{DiffMode, LagrangianConfig};
use fairsaoml_core::stream::{generate_stream, load_csv, CsvSchema, StreamSpec};
use fairsaoml_core::{
    AblationFlags, Error, FairnessKind, FairnessSpec, IntervalScheme, LossSpec, Mode, Result, RunConfig, SchemeKind,
    TaskBatch,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    Weights,
    BaseLearner,
    Both,
}

impl Ablation {
    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            disable_weights: matches!(self, Ablation::Weights | Ablation::Both),
            disable_base_learner: matches!(self, Ablation::BaseLearner | Ablation::Both),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub scheme: SchemeKind,
    pub base: usize,
    /// Defaults to the stream length.
    pub horizon: Option<usize>,
    pub n_meta: usize,
    pub inner_steps: usize,
    pub delta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub l2: f64,
    pub fairness: Vec<FairnessKind>,
    pub epsilon: f64,
    pub support_per_class: usize,
    pub query_size: usize,
    pub lambda0_max: f64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub diff_mode: DiffMode,
    pub activity: ActivityRule,
}

impl Default for RunSection {
    fn default() -> Self {
        let lc = LagrangianConfig::default();
        let split = SplitSpec::default();
        Self {
            scheme: SchemeKind::Dgc,
            base: 2,
            horizon: None,
            n_meta: 20,
            inner_steps: lc.inner_steps,
            delta: lc.delta,
            eta1: lc.eta1,
            eta2: lc.eta2,
            l2: LossSpec::default().l2,
            fairness: vec![FairnessKind::Ddp],
            epsilon: 0.05,
            support_per_class: split.support_per_class,
            query_size: split.query_size,
            lambda0_max: 0.01,
            mode: Mode::Fairsaoml,
            ablation: Ablation::None,
            diff_mode: DiffMode::FirstOrder,
            activity: ActivityRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// FairSAR window lengths.
    pub taus: Vec<usize>,
    pub tail_fraction: f64,
    /// Window stride; exhaustive up to T = 256 when omitted.
    pub stride: Option<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { taus: vec![16], tail_fraction: 0.25, stride: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

fn default_reps() -> usize {
    10
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(csv) = cfg.csv.as_mut() {
            if csv.path.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                let joined = dir.join(&csv.path);
                csv.path = std::fs::canonicalize(&joined).unwrap_or(joined);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before data is touched.
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        match (&self.stream, &self.csv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("exactly one of [stream] or [csv] is required".into())),
        }
        if self.run.scheme == SchemeKind::Single {
            return Err(Error::Config("use mode = \"single-expert\" for the one-interval baseline".into()));
        }
        if self.run.fairness.is_empty() {
            return Err(Error::Config("at least one fairness constraint is required".into()));
        }
        if self.metrics.taus.contains(&0) {
            return Err(Error::Config("FairSAR window lengths must be >= 1".into()));
        }
        if !(self.metrics.tail_fraction > 0.0 && self.metrics.tail_fraction <= 1.0) {
            return Err(Error::Config("tail_fraction must lie in (0, 1]".into()));
        }
        if self.metrics.stride == Some(0) {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if let Some(h) = self.run.horizon {
            self.run_config(h, self.seed)?;
        } else {
            self.run_config(1, self.seed)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.reps as u64).map(|i| self.seed + i).collect()
    }

    pub fn load_stream(&self) -> Result<Vec<TaskBatch>> {
        match (&self.stream, &self.csv) {
            (Some(spec), _) => generate_stream(spec),
            (_, Some(csv)) => load_csv(&csv.path, &csv.schema),
            _ => Err(Error::Config("no data source".into())),
        }
    }

    pub fn horizon(&self, stream_len: usize) -> Result<usize> {
        let h = self.run.horizon.unwrap_or(stream_len);
        if h > stream_len {
            return Err(Error::Config(format!("horizon {h} exceeds the {stream_len} available rounds")));
        }
        Ok(h)
    }

    pub fn loss(&self) -> Result<LossSpec> {
        LossSpec::new(self.run.l2)
    }

    pub fn fairness(&self) -> Result<Vec<FairnessSpec>> {
        self.run.fairness.iter().map(|&k| FairnessSpec::new(k, self.run.epsilon)).collect()
    }

    /// Engine configuration for one repetition.
    pub fn run_config(&self, horizon: usize, seed: u64) -> Result<RunConfig> {
        let r = &self.run;
        let scheme = IntervalScheme::new(r.scheme, (r.scheme == SchemeKind::Agc).then_some(horizon), r.base)?;
        let mut cfg = RunConfig::new(scheme, horizon);
        cfg.n_meta = r.n_meta;
        cfg.lagrangian = LagrangianConfig::new(r.delta, r.eta1, r.eta2, r.inner_steps)?;
        cfg.loss = self.loss()?;
        cfg.fairness = self.fairness()?;
        cfg.split = SplitSpec { support_per_class: r.support_per_class, query_size: r.query_size };
        cfg.seed = seed;
        cfg.ablation = r.ablation.flags();
        cfg.mode = r.mode;
        cfg.activity = r.activity;
        cfg.diff_mode = r.diff_mode;
        cfg.lambda0_max = r.lambda0_max;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The single-repetition config that reproduces repetition `seed`.
    pub fn echo(&self, seed: u64) -> Self {
        Self { seed, reps: 1, out: None, ..self.clone() }
    }
}
