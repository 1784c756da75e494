//! The pipeline stages. Each reads its inputs from the run directory,
//! checks them against the upstream provenance record and writes its
//! artifacts plus its own record.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use mdclosure::identify::{align, extract_theta, extract_theta_exact, ThetaMethod};
use mdclosure::io::{read_mdts, sidecar_path, write_mdts};
use mdclosure::lstm::{train, LstmModel};
use mdclosure::predict::{closed_loop_ensemble, history_at, ClosureRun, RunRecord};
use mdclosure::rkhs::{fit_rkhs, HermiteModel};
use mdclosure::stats::{
    acf_ensemble_report, acf_report, energy_spectrum, kde_pdf, l1_distance, linspace, modes_to_physical,
    pooled_well_statistics, rmse_ancr, StatsReport,
};
use mdclosure::systems::{simulate_kse, simulate_langevin, simulate_nls, simulate_topo, nls_gibbs_sample, SystemSpec};
use mdclosure::theory::{verify_prediction_horizon, verify_strong_error_rate};
use mdclosure::{make_delay_dataset, ClosureEstimator, EstimatorKind, TimeSeries};
use serde_json::{json, Value};

use crate::config::{ClosureKind, ExperimentConfig, ReportName};
use crate::exit::Failure;
use crate::provenance::{self, hash_file, Stage};

pub const TRAJECTORY: &str = "trajectory.mdts";
pub const RESOLVED: &str = "resolved.mdts";
pub const THETA: &str = "theta.mdts";
pub const MODEL_DIR: &str = "model";
pub const PREDICTION_DIR: &str = "prediction";
pub const RUN_RECORD: &str = "prediction/run_record.json";
pub const STATS_DIR: &str = "stats";
pub const VERIFY_DIR: &str = "verify";

type StageResult = Result<(), Failure>;

fn with_sidecar(out: &Path, name: &str) -> Vec<PathBuf> {
    let p = out.join(name);
    vec![sidecar_path(&p), p]
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let d = &cfg.data;
    let total = d.burn_in + d.n_steps;
    info!("simulating {} observations of {}", total, cfg.system.id());
    let full = match &cfg.system {
        SystemSpec::Langevin(p) => simulate_langevin(p, total, d.seed)?,
        SystemSpec::Topo(p) => simulate_topo(p, total, d.seed)?,
        SystemSpec::Nls(p) => {
            let (u0, acc) = nls_gibbs_sample(p, d.seed, d.gibbs_burn, 1)?;
            info!("Gibbs initial condition drawn, acceptance {acc:.3}");
            simulate_nls(p, total, &u0)?
        }
        SystemSpec::Kse(p) => simulate_kse(p, total, d.seed)?,
    };
    let ts = full.slice(d.burn_in, total)?;
    std::fs::create_dir_all(out)?;
    let meta = json!({ "system": cfg.system.id().name(), "seed": d.seed, "burn_in": d.burn_in });
    write_mdts(&out.join(TRAJECTORY), &ts, meta)?;
    provenance::write(out, Stage::Simulate, cfg, Vec::new(), &with_sidecar(out, TRAJECTORY))?;
    Ok(())
}

pub fn extract(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let inputs = provenance::require(out, Stage::Simulate, cfg, &[TRAJECTORY])?;
    let (full, _) = read_mdts(&out.join(TRAJECTORY))?;
    let spec = &cfg.system;
    let x = spec.resolved_view(&full)?;
    let th = match cfg.data.theta_method {
        ThetaMethod::Exact => extract_theta_exact(&full, spec)?,
        m => extract_theta(&x, spec, m)?,
    };
    let x = align(&x, &th)?;
    let meta = json!({ "method": th.method });
    write_mdts(&out.join(RESOLVED), &x, meta.clone())?;
    write_mdts(&out.join(THETA), &th.values, meta)?;
    let mut outs = with_sidecar(out, RESOLVED);
    outs.extend(with_sidecar(out, THETA));
    provenance::write(out, Stage::Extract, cfg, inputs, &outs)?;
    Ok(())
}

fn aligned(out: &Path) -> Result<(TimeSeries, TimeSeries), Failure> {
    let (x, _) = read_mdts(&out.join(RESOLVED))?;
    let (th, _) = read_mdts(&out.join(THETA))?;
    Ok((x, th))
}

fn files_under(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| p.is_file());
    v.sort();
    Ok(v)
}

pub fn train_stage(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let inputs = provenance::require(out, Stage::Extract, cfg, &[RESOLVED, THETA])?;
    let (x, th) = aligned(out)?;
    let n = cfg.data.train_steps.min(x.n_steps());
    let c = &cfg.closure;
    let mut data = make_delay_dataset(&x.slice(0, n)?, &th.slice(0, n)?, c.m)
        .context("building the training set")?
        .with_system(cfg.system.id().name());
    if !c.theta_history {
        data = data.resolved_only();
    }
    if data.is_empty() {
        return Err(Failure::config(anyhow!("training set is empty")));
    }
    info!("training {:?} closure on {} pairs", c.kind, data.len());
    let dir = out.join(MODEL_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let rv = match c.kind {
        ClosureKind::Rkhs => {
            let opts = c.rkhs.as_ref().expect("validated");
            let model = fit_rkhs(&data, opts)?;
            model.save(&dir)?;
            model.residual_variance().to_vec()
        }
        ClosureKind::Lstm => {
            let tc = c.lstm.as_ref().expect("validated");
            let model = train(&data, tc)?;
            model.save(&dir)?;
            model.residual_variance.clone()
        }
    };
    info!("training residual variance {rv:?}");
    provenance::write(out, Stage::Train, cfg, inputs, &files_under(&dir)?)?;
    Ok(())
}

/// Load whichever estimator the checkpoint manifest names.
pub fn load_model(dir: &Path) -> anyhow::Result<Box<dyn ClosureEstimator>> {
    let man: Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let kind: EstimatorKind = serde_json::from_value(man.get("kind").cloned().unwrap_or(Value::Null))
        .context("checkpoint manifest has no valid kind")?;
    Ok(match kind {
        EstimatorKind::Rkhs => Box::new(HermiteModel::load(dir)?),
        EstimatorKind::Lstm => Box::new(LstmModel::load(dir)?),
        EstimatorKind::Analytic => return Err(anyhow!("analytic estimators have no checkpoint")),
    })
}

fn require_model(cfg: &ExperimentConfig, out: &Path) -> Result<(Box<dyn ClosureEstimator>, Vec<provenance::FileHash>), Failure> {
    let files = provenance::listed(out, Stage::Train, "model/")?;
    // a shape mismatch is a config error, so check it before the section hashes
    let est = load_model(&out.join(MODEL_DIR)).map_err(Failure::config)?;
    if est.memory() != cfg.closure.m {
        return Err(Failure::config(anyhow!(
            "checkpoint has memory {} but the config asks for m = {}",
            est.memory(),
            cfg.closure.m
        )));
    }
    let refs: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
    let hashes = provenance::require(out, Stage::Train, cfg, &refs)?;
    Ok((est, hashes))
}

/// Verification initial times in aligned indices.
pub fn starts(cfg: &ExperimentConfig, n: usize) -> Result<Vec<usize>, Failure> {
    let p = &cfg.prediction;
    let first = cfg.data.train_steps.max(cfg.closure.m);
    let v: Vec<usize> = (0..p.members).map(|i| first + i * p.spacing).collect();
    let last = *v.last().expect("members >= 1");
    if last >= n {
        return Err(Failure::config(anyhow!(
            "verification data has {} observations; {} members spaced {} need {}",
            n.saturating_sub(first),
            p.members,
            p.spacing,
            last + 1 - first
        )));
    }
    Ok(v)
}

fn member_name(i: usize) -> String {
    format!("{PREDICTION_DIR}/member_{i:03}.mdts")
}

pub fn predict(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let mut inputs = provenance::require(out, Stage::Extract, cfg, &[RESOLVED, THETA])?;
    let (est, model_hashes) = require_model(cfg, out)?;
    inputs.extend(model_hashes);
    let (x, th) = aligned(out)?;
    let m = cfg.closure.m;
    let histories = starts(cfg, x.n_steps())?
        .into_iter()
        .map(|t| history_at(&x, &th, t, m))
        .collect::<mdclosure::Result<Vec<_>>>()?;
    let p = &cfg.prediction;
    let mut run = ClosureRun::new(cfg.system.clone(), p.steps)
        .with_xi(p.xi.clone())
        .with_eta(p.eta.clone());
    run.blowup_bound = p.blowup_bound;
    info!("running {} closed-loop members for {} steps", histories.len(), p.steps);
    let outputs = closed_loop_ensemble(&run, est.as_ref(), &histories)?;
    let dir = out.join(PREDICTION_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (i, o) in outputs.iter().enumerate() {
        let name = member_name(i);
        write_mdts(&out.join(&name), &o.x, json!({ "member": i, "blowup": o.blowup }))?;
        files.extend(with_sidecar(out, &name));
    }
    let model_hash = hash_file(&out.join(MODEL_DIR).join("manifest.json"))?;
    let record = RunRecord::new(&run, est.as_ref(), &outputs, Some(model_hash));
    std::fs::write(out.join(RUN_RECORD), serde_json::to_vec_pretty(&record)?)?;
    files.push(out.join(RUN_RECORD));
    provenance::write(out, Stage::Predict, cfg, inputs, &files)?;
    let blown: Vec<usize> = outputs.iter().enumerate().filter(|(_, o)| o.blowup.is_some()).map(|(i, _)| i).collect();
    if !blown.is_empty() {
        return Err(Failure {
            code: crate::exit::Code::Numerical,
            error: anyhow!("members {blown:?} left the admissible range; artifacts hold the valid prefixes"),
        });
    }
    Ok(())
}

fn write_report(dir: &Path, stem: &str, r: &StatsReport, files: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    r.write(dir, stem)?;
    files.push(dir.join(format!("{stem}.csv")));
    files.push(dir.join(format!("{stem}.json")));
    Ok(())
}

pub fn stats(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let mut inputs = provenance::require(out, Stage::Extract, cfg, &[RESOLVED])?;
    let members = provenance::listed(out, Stage::Predict, PREDICTION_DIR)?;
    let members: Vec<String> = members.into_iter().filter(|p| p.ends_with(".mdts")).collect();
    let mut need: Vec<&str> = members.iter().map(|s| s.as_str()).collect();
    need.push(RUN_RECORD);
    inputs.extend(provenance::require(out, Stage::Predict, cfg, &need)?);

    let (x, _) = read_mdts(&out.join(RESOLVED))?;
    let n = x.n_steps();
    let truth = x.slice(cfg.data.train_steps.min(n - 1), n)?;
    let runs: Vec<TimeSeries> = members
        .iter()
        .map(|f| read_mdts(&out.join(f)).map(|(ts, _)| ts))
        .collect::<mdclosure::Result<_>>()?;
    let s = &cfg.stats;
    let col = s.column;
    let dir = out.join(STATS_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut summary = serde_json::Map::new();

    for report in cfg.reports() {
        match report {
            ReportName::Acf => {
                let lag = s.acf_max_lag;
                let rt = acf_report(&truth, col, lag)?;
                let rc = acf_ensemble_report(&runs, col, lag)?;
                let dev = rt.values[0].iter().zip(&rc.values[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                write_report(&dir, "acf_truth", &rt, &mut files)?;
                write_report(&dir, "acf_closure", &rc, &mut files)?;
                summary.insert("acf_max_abs_deviation".into(), json!(dev));
            }
            ReportName::Pdf => {
                let t = truth.column(col);
                let mean = t.iter().sum::<f64>() / t.len() as f64;
                let sd = (t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64).sqrt();
                let grid = linspace(mean - 5.0 * sd, mean + 5.0 * sd, s.pdf_points);
                let pooled: Vec<f64> = runs.iter().flat_map(|r| r.column(col)).collect();
                let rt = kde_pdf(&t, &grid)?;
                let rc = kde_pdf(&pooled, &grid)?;
                summary.insert("pdf_l1".into(), json!(l1_distance(&grid, &rt.values[0], &rc.values[0])));
                write_report(&dir, "pdf_truth", &rt, &mut files)?;
                write_report(&dir, "pdf_closure", &rc, &mut files)?;
            }
            ReportName::ExitTime => {
                if !matches!(cfg.system, SystemSpec::Langevin(_)) {
                    return Err(Failure::config(anyhow!("at /stats/reports: exit_time applies to langevin only")));
                }
                let dt = x.dt();
                let t = truth.column(col);
                let paths: Vec<Vec<f64>> = runs.iter().map(|r| r.column(col)).collect();
                let refs: Vec<&[f64]> = paths.iter().map(|p| p.as_slice()).collect();
                let pair = |r: mdclosure::Result<(f64, f64)>| match r {
                    Ok((tau, nu)) => json!({ "mean_exit_time": tau, "reaction_rate": nu }),
                    Err(e) => {
                        warn!("exit statistics unavailable: {e}");
                        json!({ "error": e.to_string() })
                    }
                };
                summary.insert(
                    "exit".into(),
                    json!({
                        "well": s.well,
                        "truth": pair(pooled_well_statistics(&[t.as_slice()], dt, &s.well)),
                        "closure": pair(pooled_well_statistics(&refs, dt, &s.well)),
                    }),
                );
            }
            ReportName::Spectrum => {
                let pooled: Vec<f64> = runs.iter().flat_map(|r| r.values().to_vec()).collect();
                let closure = TimeSeries::with_default_names(pooled, truth.n_vars(), truth.dt(), "v", 0)?;
                let rt = energy_spectrum(&truth)?;
                let rc = energy_spectrum(&closure)?;
                let rel: Vec<f64> = rc.values[0].iter().zip(&rt.values[0]).map(|(a, b)| (a - b).abs() / b).collect();
                summary.insert("spectrum_relative_error".into(), json!(rel));
                write_report(&dir, "spectrum_truth", &rt, &mut files)?;
                write_report(&dir, "spectrum_closure", &rc, &mut files)?;
            }
            ReportName::RmseAncr => {
                let len = runs.iter().map(|r| r.n_steps()).min().unwrap_or(0);
                let st = starts(cfg, n)?;
                if len < 2 || st.iter().any(|&t| t + len > n) {
                    return Err(Failure::config(anyhow!(
                        "rmse_ancr needs verification truth covering every member's run"
                    )));
                }
                let cut: Vec<TimeSeries> = runs.iter().map(|r| r.slice(0, len)).collect::<mdclosure::Result<_>>()?;
                let tw: Vec<TimeSeries> = st.iter().map(|&t| x.slice(t, t + len)).collect::<mdclosure::Result<_>>()?;
                let (pred, tr, clim) = match &cfg.system {
                    SystemSpec::Kse(p) => {
                        let phys = |v: &[TimeSeries]| -> mdclosure::Result<Vec<TimeSeries>> {
                            v.iter().map(|t| modes_to_physical(t, p.length, s.physical_points)).collect()
                        };
                        let all = modes_to_physical(&truth, p.length, s.physical_points)?;
                        (phys(&cut)?, phys(&tw)?, column_means(&all))
                    }
                    _ => (cut, tw, column_means(&truth)),
                };
                let r = rmse_ancr(&pred, &tr, &clim)?;
                write_report(&dir, "rmse_ancr", &r, &mut files)?;
            }
        }
    }
    let summary_path = dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&Value::Object(summary))?)?;
    files.push(summary_path);
    provenance::write(out, Stage::Stats, cfg, inputs, &files)?;
    Ok(())
}

fn column_means(ts: &TimeSeries) -> Vec<f64> {
    (0..ts.n_vars())
        .map(|j| ts.column(j).iter().sum::<f64>() / ts.n_steps() as f64)
        .collect()
}

pub fn verify(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    let v = &cfg.verify;
    if v.rate.is_none() && v.horizon.is_none() {
        return Err(Failure::config(anyhow!("at /verify: nothing to verify; give a rate or horizon block")));
    }
    let dir = out.join(VERIFY_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut inputs = Vec::new();
    let mut files = Vec::new();
    if let Some(rate) = &v.rate {
        info!("rate experiment: {} members, {} epsilons", rate.ensemble, rate.epsilons.len());
        let r = verify_strong_error_rate(rate)?;
        r.write_csv(&dir.join("rate.csv"))?;
        std::fs::write(dir.join("rate.json"), serde_json::to_vec_pretty(&r)?)?;
        info!(
            "epsilon slope {:.3} [{:.3}, {:.3}], growth exponent {:.3} [{:.3}, {:.3}]",
            r.epsilon_fit.slope,
            r.epsilon_fit.ci_low,
            r.epsilon_fit.ci_high,
            r.growth_fit.slope,
            r.growth_fit.ci_low,
            r.growth_fit.ci_high
        );
        files.extend([dir.join("rate.csv"), dir.join("rate.json")]);
    }
    if let Some(h) = &v.horizon {
        let SystemSpec::Langevin(p) = &cfg.system else {
            unreachable!("validated")
        };
        let (est, hashes) = require_model(cfg, out)?;
        inputs.extend(hashes);
        let mut h = h.clone();
        h.langevin = p.clone();
        let table = verify_prediction_horizon(&h, &[(cfg.data.train_steps, est.as_ref())])?;
        table.write_csv(&dir.join("horizon.csv"))?;
        std::fs::write(dir.join("horizon.json"), serde_json::to_vec_pretty(&table)?)?;
        files.extend([dir.join("horizon.csv"), dir.join("horizon.json")]);
    }
    provenance::write(out, Stage::Verify, cfg, inputs, &files)?;
    Ok(())
}

pub fn pipeline(cfg: &ExperimentConfig, out: &Path) -> StageResult {
    simulate(cfg, out)?;
    extract(cfg, out)?;
    train_stage(cfg, out)?;
    predict(cfg, out)?;
    stats(cfg, out)?;
    if cfg.verify.rate.is_some() || cfg.verify.horizon.is_some() {
        verify(cfg, out)?;
    }
    Ok(())
}
