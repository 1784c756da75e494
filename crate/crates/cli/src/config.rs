//! Experiment configuration: one JSON document per experiment.

use std::path::Path;

use anyhow::{bail, Context};
use mdclosure::identify::ThetaMethod;
use mdclosure::lstm::TrainConfig;
use mdclosure::predict::NoisePolicy;
use mdclosure::rkhs::RkhsOptions;
use mdclosure::stats::WellSpec;
use mdclosure::systems::SystemSpec;
use mdclosure::theory::{HorizonConfig, RateExperiment};
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

pub const SCHEMA: &str = include_str!("../../../schema/experiment.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemSpec,
    pub data: DataConfig,
    pub closure: ClosureConfig,
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Recorded observations after burn-in.
    pub n_steps: usize,
    /// Leading observations used for training; the rest is verification data.
    pub train_steps: usize,
    pub seed: u64,
    /// Observations simulated and dropped before recording.
    #[serde(default)]
    pub burn_in: usize,
    pub theta_method: ThetaMethod,
    /// Burn-in of the Gibbs sampler drawing the NLS initial condition.
    #[serde(default = "d_gibbs_burn")]
    pub gibbs_burn: usize,
}

fn d_gibbs_burn() -> usize {
    20_000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureKind {
    Rkhs,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosureConfig {
    pub kind: ClosureKind,
    /// Memory length: the estimator sees `m + 1` cells.
    pub m: usize,
    /// False drops theta from the inputs (resolved-history ablation).
    #[serde(default = "d_true")]
    pub theta_history: bool,
    #[serde(default)]
    pub rkhs: Option<RkhsOptions>,
    #[serde(default)]
    pub lstm: Option<TrainConfig>,
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    /// Closed-loop steps per member.
    pub steps: usize,
    pub members: usize,
    /// Observations between consecutive initial conditions in the verification data.
    pub spacing: usize,
    #[serde(default = "d_off")]
    pub xi: NoisePolicy,
    #[serde(default = "d_off")]
    pub eta: NoisePolicy,
    #[serde(default)]
    pub blowup_bound: Option<f64>,
}

fn d_off() -> NoisePolicy {
    NoisePolicy::Off
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportName {
    Acf,
    Pdf,
    ExitTime,
    Spectrum,
    RmseAncr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    /// Empty means every report that applies to the system.
    #[serde(default)]
    pub reports: Vec<ReportName>,
    /// Resolved column the scalar diagnostics use.
    #[serde(default)]
    pub column: usize,
    #[serde(default = "d_lag")]
    pub acf_max_lag: usize,
    #[serde(default = "d_points")]
    pub pdf_points: usize,
    #[serde(default)]
    pub well: WellSpec,
    /// Physical grid size for the KSE skill scores.
    #[serde(default = "d_phys")]
    pub physical_points: usize,
}

fn d_lag() -> usize {
    500
}
fn d_points() -> usize {
    512
}
fn d_phys() -> usize {
    64
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            reports: Vec::new(),
            column: 0,
            acf_max_lag: d_lag(),
            pdf_points: d_points(),
            well: WellSpec::default(),
            physical_points: d_phys(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Strong-error rates of a perturbed Langevin closure.
    #[serde(default)]
    pub rate: Option<RateExperiment>,
    /// Prediction horizon of the trained Langevin closure.
    #[serde(default)]
    pub horizon: Option<HorizonConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::config)?;
        Self::parse(&text).map_err(|e| Failure::config(e.context(format!("config {}", path.display()))))
    }

    /// Deserialize and validate. Errors name the JSON path of the offending key.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("at {}: {}", pointer(&path), e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("at /name: must be a non-empty name without path separators");
        }
        self.system.validate().context("at /system")?;
        let d = &self.data;
        if d.n_steps < 2 {
            bail!("at /data/n_steps: need at least 2 observations");
        }
        if d.train_steps == 0 || d.train_steps >= d.n_steps {
            bail!("at /data/train_steps: must lie in 1..{} to leave verification data", d.n_steps);
        }
        if matches!(d.theta_method, ThetaMethod::Subtraction) && !self.system.is_additive() {
            bail!("at /data/theta_method: subtraction needs an additive resolved map");
        }
        let c = &self.closure;
        match c.kind {
            ClosureKind::Rkhs if c.rkhs.is_none() => bail!("at /closure/rkhs: required for kind rkhs"),
            ClosureKind::Lstm if c.lstm.is_none() => bail!("at /closure/lstm: required for kind lstm"),
            _ => {}
        }
        if let Some(t) = &c.lstm {
            t.validate().context("at /closure/lstm")?;
        }
        let p = &self.prediction;
        if p.steps == 0 || p.members == 0 || p.spacing == 0 {
            bail!("at /prediction: steps, members and spacing must be positive");
        }
        if let Some(r) = &self.verify.rate {
            r.validate().context("at /verify/rate")?;
        }
        if self.verify.horizon.is_some() && !matches!(self.system, SystemSpec::Langevin(_)) {
            bail!("at /verify/horizon: the horizon check is defined for the langevin system");
        }
        if self.stats.column >= self.system.resolved_dim() {
            bail!("at /stats/column: the resolved state has {} columns", self.system.resolved_dim());
        }
        Ok(())
    }

    /// Replace every seed by one derived from `seed`, in a fixed order.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.seed = seed;
        if let Some(t) = &mut self.closure.lstm {
            t.seed = seed.wrapping_add(1);
        }
        if let NoisePolicy::Sampled { seed: s } = &mut self.prediction.xi {
            *s = seed.wrapping_add(2);
        }
        if let NoisePolicy::Sampled { seed: s } = &mut self.prediction.eta {
            *s = seed.wrapping_add(3);
        }
        if let Some(r) = &mut self.verify.rate {
            r.seed = seed.wrapping_add(4);
        }
        if let Some(h) = &mut self.verify.horizon {
            h.seed = seed.wrapping_add(5);
        }
    }

    /// Reports to produce: the configured list, or every applicable one.
    pub fn reports(&self) -> Vec<ReportName> {
        if !self.stats.reports.is_empty() {
            return self.stats.reports.clone();
        }
        let mut r = vec![ReportName::Acf, ReportName::Pdf];
        match self.system {
            SystemSpec::Langevin(_) => r.push(ReportName::ExitTime),
            SystemSpec::Kse(_) => r.extend([ReportName::Spectrum, ReportName::RmseAncr]),
            _ => {}
        }
        r
    }
}

/// serde_path_to_error renders `a.b[2]`; report it as a JSON pointer.
fn pointer(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        for seg in part.split('[') {
            let seg = seg.trim_end_matches(']');
            if !seg.is_empty() {
                out.push('/');
                out.push_str(seg);
            }
        }
    }
    out
}
