//! Closed-loop integration of the resolved map driven by a learned closure.
//!
//! Each step advances `x_{t+1} = map(x_t, theta_t)` and replaces the unknown
//! `theta_{t+1}` by the estimator's prediction from the current delay window,
//! optionally perturbed by Gaussian residual noise. Ensembles advance all
//! members in lockstep so the estimator sees one batch per step.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ClosureEstimator, EstimatorKind};
use crate::identify::ThetaSeries;
use crate::rng::Rng;
use crate::series::{DelayVector, TimeSeries};
use crate::systems::{kse, ResolvedMap, SystemSpec, TopoParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoisePolicy {
    Off,
    /// Fresh Gaussian draws; ensemble member `i` uses substream `i` of `seed`.
    Sampled { seed: u64 },
    /// A fixed realization shared by every member, consumed one entry (or one
    /// row of width `d_theta` for the residual noise) per step.
    Realized { values: Vec<f64> },
}

impl NoisePolicy {
    fn label(&self) -> &'static str {
        match self {
            NoisePolicy::Off => "off",
            NoisePolicy::Sampled { .. } => "sampled",
            NoisePolicy::Realized { .. } => "realized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureRun {
    pub spec: SystemSpec,
    /// Number of prediction steps `T`.
    pub steps: usize,
    /// Residual noise added to the predicted theta.
    pub xi: NoisePolicy,
    /// Mean-flow noise of the topographic resolved map; ignored elsewhere.
    pub eta: NoisePolicy,
    /// A state entry (KSE: mode modulus) at or beyond this bound ends the run.
    pub blowup_bound: Option<f64>,
}

impl ClosureRun {
    pub fn new(spec: SystemSpec, steps: usize) -> Self {
        ClosureRun {
            spec,
            steps,
            xi: NoisePolicy::Off,
            eta: NoisePolicy::Off,
            blowup_bound: None,
        }
    }

    pub fn with_xi(mut self, xi: NoisePolicy) -> Self {
        self.xi = xi;
        self
    }

    pub fn with_eta(mut self, eta: NoisePolicy) -> Self {
        self.eta = eta;
        self
    }

    fn bound(&self) -> f64 {
        self.blowup_bound.unwrap_or(match self.spec {
            SystemSpec::Kse(_) => kse::BLOWUP_THRESHOLD,
            _ => 1e6,
        })
    }

    fn validate(&self, est: &dyn ClosureEstimator, history: &DelayVector) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("a run needs at least one step".into()));
        }
        let d = self.spec.resolved_dim();
        if history.m != est.memory() {
            return Err(Error::Shape(format!(
                "history of memory {} for an estimator of memory {}",
                history.m,
                est.memory()
            )));
        }
        if history.d_x() != d || history.d_theta() != d {
            return Err(Error::Shape(format!(
                "history widths ({}, {}) for {} with resolved width {d}",
                history.d_x(),
                history.d_theta(),
                self.spec.id()
            )));
        }
        if est.output_dim() != d {
            return Err(Error::Shape(format!("estimator predicts {} values, theta has {d}", est.output_dim())));
        }
        let cell = est.input_dim() / (est.memory() + 1);
        if cell != 2 * d && cell != d {
            return Err(Error::Shape(format!("estimator cell width {cell} for resolved width {d}")));
        }
        if let NoisePolicy::Realized { values } = &self.xi {
            if values.len() < self.steps * d {
                return Err(Error::Shape(format!("{} realized xi values for {} steps", values.len(), self.steps)));
            }
        }
        if let (NoisePolicy::Realized { values }, SystemSpec::Topo(_)) = (&self.eta, &self.spec) {
            if values.len() < self.steps {
                return Err(Error::Shape(format!("{} realized eta values for {} steps", values.len(), self.steps)));
            }
        }
        if matches!(self.xi, NoisePolicy::Sampled { .. }) && est.residual_variance().len() != d {
            return Err(Error::Consistency("estimator carries no residual variance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `x_hat` at the last history time and every completed step.
    pub x: TimeSeries,
    pub theta: TimeSeries,
    /// Step at which the state left the admissible range, if it did.
    pub blowup: Option<usize>,
}

/// Provenance of a run, serialized next to its trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub system: String,
    pub estimator: EstimatorKind,
    pub estimator_hash: Option<String>,
    pub steps: usize,
    pub members: usize,
    pub xi: String,
    pub xi_seed: Option<u64>,
    pub eta: String,
    pub eta_seed: Option<u64>,
    pub blowups: Vec<Option<usize>>,
}

impl RunRecord {
    pub fn new(run: &ClosureRun, est: &dyn ClosureEstimator, outputs: &[RunOutput], estimator_hash: Option<String>) -> Self {
        let seed = |p: &NoisePolicy| match p {
            NoisePolicy::Sampled { seed } => Some(*seed),
            _ => None,
        };
        RunRecord {
            system: run.spec.id().to_string(),
            estimator: est.kind(),
            estimator_hash,
            steps: run.steps,
            members: outputs.len(),
            xi: run.xi.label().into(),
            xi_seed: seed(&run.xi),
            eta: run.eta.label().into(),
            eta_seed: seed(&run.eta),
            blowups: outputs.iter().map(|o| o.blowup).collect(),
        }
    }
}

/// Delay window ending at index `t` of aligned `x` and `theta` series.
pub fn history_at(x: &TimeSeries, theta: &TimeSeries, t: usize, m: usize) -> Result<DelayVector> {
    if t < m || t >= x.n_steps() || t >= theta.n_steps() {
        return Err(Error::InvalidParameter(format!(
            "window ending at {t} with memory {m} outside series of {} / {} steps",
            x.n_steps(),
            theta.n_steps()
        )));
    }
    DelayVector::new(
        (t - m..=t).map(|s| x.row(s).to_vec()).collect(),
        (t - m..=t).map(|s| theta.row(s).to_vec()).collect(),
    )
}

/// Zero-mean Gaussian draw with the estimator's residual variance.
pub fn sample_xi(est: &dyn ClosureEstimator, rng: &mut Rng) -> Vec<f64> {
    est.residual_variance().iter().map(|v| v.max(0.0).sqrt() * rng.normal()).collect()
}

/// Invert the topographic mean-flow update for the noise that produced it:
/// `eta_{t+1} = (u_{t+1} - u_t - dt theta_t + dt d (u_t - u_eq)) / (sqrt(dt) sigma mu^{-1/2})`.
/// Entry `t` of the result is the noise consumed by the step `t -> t+1`.
pub fn recover_eta(u: &TimeSeries, theta: &ThetaSeries, p: &TopoParams) -> Result<Vec<f64>> {
    let amp = p.sigma_u();
    if !(amp > 0.0) {
        return Err(Error::InvalidParameter("noise amplitude is zero; eta is not identifiable".into()));
    }
    let th = &theta.values;
    if u.n_vars() != 1 || th.n_vars() != 1 {
        return Err(Error::Shape("recover_eta needs scalar u and theta".into()));
    }
    let n = u.n_steps().min(th.n_steps() + 1);
    if n < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let dt = u.dt();
    let scale = dt.sqrt() * amp;
    Ok((0..n - 1)
        .map(|t| {
            let (ut, un, tt) = (u.get(t, 0), u.get(t + 1, 0), th.get(t, 0));
            (un - (ut + dt * tt - dt * p.d_bar * (ut - p.u_eq()))) / scale
        })
        .collect())
}

struct Member {
    map: ResolvedMap,
    window: Vec<f64>,
    x: Vec<f64>,
    theta: Vec<f64>,
    xs: Vec<f64>,
    thetas: Vec<f64>,
    xi_rng: Option<Rng>,
    eta_rng: Option<Rng>,
    blowup: Option<usize>,
    done: bool,
}

/// One closed-loop run.
pub fn closed_loop_run(run: &ClosureRun, est: &dyn ClosureEstimator, history: &DelayVector) -> Result<RunOutput> {
    Ok(closed_loop_ensemble(run, est, std::slice::from_ref(history))?.remove(0))
}

/// Closed-loop runs from several initial histories, advanced in lockstep.
pub fn closed_loop_ensemble(run: &ClosureRun, est: &dyn ClosureEstimator, histories: &[DelayVector]) -> Result<Vec<RunOutput>> {
    if histories.is_empty() {
        return Err(Error::InvalidParameter("no initial histories".into()));
    }
    for h in histories {
        run.validate(est, h)?;
    }
    let d = run.spec.resolved_dim();
    let m = est.memory();
    let x_only = est.input_dim() / (m + 1) == d;
    let cell = if x_only { d } else { 2 * d };
    let bound = run.bound();
    let is_kse = matches!(run.spec, SystemSpec::Kse(_));
    let is_topo = matches!(run.spec, SystemSpec::Topo(_));
    let sd: Vec<f64> = est.residual_variance().iter().map(|v| v.max(0.0).sqrt()).collect();

    let mut members: Vec<Member> = histories
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut window = Vec::with_capacity((m + 1) * cell);
            for s in 0..=m {
                window.extend_from_slice(&h.x_hist[s]);
                if !x_only {
                    window.extend_from_slice(&h.theta_hist[s]);
                }
            }
            let x = h.x_hist[m].clone();
            let theta = h.theta_hist[m].clone();
            let stream = |p: &NoisePolicy| match p {
                NoisePolicy::Sampled { seed } => Some(Rng::new(*seed).substream(i as u64)),
                _ => None,
            };
            Member {
                map: ResolvedMap::new(run.spec.clone()),
                window,
                xs: x.clone(),
                thetas: theta.clone(),
                x,
                theta,
                xi_rng: stream(&run.xi),
                eta_rng: stream(&run.eta),
                blowup: None,
                done: false,
            }
        })
        .collect();

    let di = est.input_dim();
    let mut inputs = Vec::with_capacity(members.len() * di);
    let mut preds = Vec::new();
    let mut active = Vec::with_capacity(members.len());
    for t in 0..run.steps {
        active.clear();
        inputs.clear();
        for (i, mb) in members.iter().enumerate() {
            if !mb.done {
                active.push(i);
                inputs.extend_from_slice(&mb.window);
            }
        }
        if active.is_empty() {
            break;
        }
        preds.resize(active.len() * d, 0.0);
        est.predict_batch(&inputs, &mut preds)?;

        for (k, &i) in active.iter().enumerate() {
            let mb = &mut members[i];
            let eta = if is_topo {
                match &run.eta {
                    NoisePolicy::Off => 0.0,
                    NoisePolicy::Sampled { .. } => mb.eta_rng.as_mut().expect("sampled stream").normal(),
                    NoisePolicy::Realized { values } => values[t],
                }
            } else {
                0.0
            };
            let step = mb.map.step(&mut mb.x, &mb.theta, eta);
            let mut next: Vec<f64> = preds[k * d..(k + 1) * d].to_vec();
            match &run.xi {
                NoisePolicy::Off => {}
                NoisePolicy::Sampled { .. } => {
                    let rng = mb.xi_rng.as_mut().expect("sampled stream");
                    for (v, s) in next.iter_mut().zip(&sd) {
                        *v += s * rng.normal();
                    }
                }
                NoisePolicy::Realized { values } => {
                    for (v, e) in next.iter_mut().zip(&values[t * d..(t + 1) * d]) {
                        *v += e;
                    }
                }
            }
            let out_of_range = if is_kse {
                mb.x.chunks_exact(2).any(|c| c[0].hypot(c[1]) >= bound)
            } else {
                mb.x.iter().any(|v| v.abs() >= bound)
            };
            if step.is_err() || out_of_range || next.iter().any(|v| !v.is_finite()) {
                mb.blowup = Some(t + 1);
                mb.done = true;
                log::warn!("closed-loop run left the admissible range at step {}", t + 1);
                continue;
            }
            mb.theta = next;
            mb.xs.extend_from_slice(&mb.x);
            mb.thetas.extend_from_slice(&mb.theta);
            mb.window.copy_within(cell.., 0);
            let w = mb.window.len();
            mb.window[w - cell..w - cell + d].copy_from_slice(&mb.x);
            if !x_only {
                mb.window[w - d..].copy_from_slice(&mb.theta);
            }
        }
    }

    let dt = run.spec.dt_obs();
    let x_names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    members
        .into_iter()
        .enumerate()
        .map(|(i, mb)| {
            Ok(RunOutput {
                x: TimeSeries::new(mb.xs, d, dt, x_names.clone(), i as u64)?,
                theta: TimeSeries::new(mb.thetas, d, dt, run.spec.theta_names(), i as u64)?,
                blowup: mb.blowup,
            })
        })
        .collect()
}

/// Test double that replays a recorded theta sequence, one row per call, in
/// call order. Useful as an oracle closure for a single run.
pub struct ReplayEstimator {
    theta: Vec<f64>,
    d: usize,
    m: usize,
    cell: usize,
    cursor: AtomicUsize,
    zero: Vec<f64>,
}

impl ReplayEstimator {
    /// `theta` holds rows `theta_{t0+1}, theta_{t0+2}, ...` to be returned in order.
    pub fn new(theta: Vec<f64>, d: usize, m: usize) -> Self {
        ReplayEstimator {
            theta,
            d,
            m,
            cell: 2 * d,
            cursor: AtomicUsize::new(0),
            zero: vec![0.0; d],
        }
    }
}

impl ClosureEstimator for ReplayEstimator {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Rkhs
    }
    fn memory(&self) -> usize {
        self.m
    }
    fn input_dim(&self) -> usize {
        (self.m + 1) * self.cell
    }
    fn output_dim(&self) -> usize {
        self.d
    }
    fn residual_variance(&self) -> &[f64] {
        &self.zero
    }
    fn predict_into(&self, _input: &[f64], out: &mut [f64]) -> Result<()> {
        let c = self.cursor.fetch_add(1, Ordering::SeqCst);
        let row = self
            .theta
            .get(c * self.d..(c + 1) * self.d)
            .ok_or_else(|| Error::InsufficientData("replay sequence exhausted".into()))?;
        out.copy_from_slice(row);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::{extract_theta_subtraction, ThetaMethod};
    use crate::systems::{simulate_langevin, LangevinParams, TopoRegime};

    struct Constant {
        v: Vec<f64>,
        var: Vec<f64>,
        m: usize,
    }

    impl ClosureEstimator for Constant {
        fn kind(&self) -> EstimatorKind {
            EstimatorKind::Rkhs
        }
        fn memory(&self) -> usize {
            self.m
        }
        fn input_dim(&self) -> usize {
            (self.m + 1) * 2 * self.v.len()
        }
        fn output_dim(&self) -> usize {
            self.v.len()
        }
        fn residual_variance(&self) -> &[f64] {
            &self.var
        }
        fn predict_into(&self, _: &[f64], out: &mut [f64]) -> Result<()> {
            out.copy_from_slice(&self.v);
            Ok(())
        }
    }

    fn langevin() -> SystemSpec {
        SystemSpec::Langevin(LangevinParams::default())
    }

    #[test]
    fn oracle_reproduces_langevin_path() {
        let p = LangevinParams::default();
        let full = simulate_langevin(&p, 3000, 11).unwrap();
        let spec = langevin();
        let x = spec.resolved_view(&full).unwrap();
        let th = extract_theta_subtraction(&x, &spec).unwrap();
        let m = 2;
        let h = history_at(&x, &th.values, m, m).unwrap();
        let replay = ReplayEstimator::new(th.values.values()[(m + 1)..].to_vec(), 1, m);
        let steps = th.values.n_steps() - m - 1;
        let out = closed_loop_run(&ClosureRun::new(spec, steps), &replay, &h).unwrap();
        assert_eq!(out.blowup, None);
        for t in 0..=steps {
            assert!((out.x.get(t, 0) - x.get(t + m, 0)).abs() <= 1e-8);
        }
    }

    #[test]
    fn noise_off_is_deterministic_and_sampled_is_seeded() {
        let est = Constant {
            v: vec![0.1],
            var: vec![0.04],
            m: 1,
        };
        let h = DelayVector::new(vec![vec![0.5], vec![0.6]], vec![vec![0.0], vec![0.1]]).unwrap();
        let run = ClosureRun::new(langevin(), 50);
        let a = closed_loop_run(&run, &est, &h).unwrap();
        let b = closed_loop_run(&run, &est, &h).unwrap();
        assert_eq!(a.x.values(), b.x.values());
        let noisy = run.clone().with_xi(NoisePolicy::Sampled { seed: 3 });
        let c = closed_loop_run(&noisy, &est, &h).unwrap();
        let d = closed_loop_run(&noisy, &est, &h).unwrap();
        assert_eq!(c.theta.values(), d.theta.values());
        assert_ne!(c.theta.values(), a.theta.values());
    }

    #[test]
    fn blowup_returns_valid_prefix() {
        let est = Constant {
            v: vec![1e5],
            var: vec![0.0],
            m: 0,
        };
        let h = DelayVector::new(vec![vec![0.0]], vec![vec![1e5]]).unwrap();
        let mut run = ClosureRun::new(langevin(), 100);
        run.blowup_bound = Some(1e4);
        let out = closed_loop_run(&run, &est, &h).unwrap();
        // x grows by 1e3 per step and crosses 1e4 on step 10
        assert_eq!(out.blowup, Some(10));
        assert_eq!(out.x.n_steps(), 10);
        assert!(out.x.values().iter().all(|v| v.abs() < 1e4));
    }

    #[test]
    fn rejects_mismatched_memory() {
        let est = Constant {
            v: vec![0.0],
            var: vec![0.0],
            m: 3,
        };
        let h = DelayVector::new(vec![vec![0.0]; 2], vec![vec![0.0]; 2]).unwrap();
        assert!(matches!(
            closed_loop_run(&ClosureRun::new(langevin(), 5), &est, &h),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sample_xi_examples() {
        let zero = Constant {
            v: vec![0.0, 0.0],
            var: vec![0.0, 0.0],
            m: 0,
        };
        assert_eq!(sample_xi(&zero, &mut Rng::new(1)), vec![0.0, 0.0]);
        let est = Constant {
            v: vec![0.0, 0.0],
            var: vec![0.25, 4.0],
            m: 0,
        };
        let (mut r1, mut r2) = (Rng::new(9), Rng::new(9));
        assert_eq!(sample_xi(&est, &mut r1), sample_xi(&est, &mut r2));
        let n = 1_000_000;
        let mut acc = [0.0; 2];
        let mut rng = Rng::new(10);
        for _ in 0..n {
            let x = sample_xi(&est, &mut rng);
            acc[0] += x[0] * x[0];
            acc[1] += x[1] * x[1];
        }
        assert!((acc[0] / n as f64 / 0.25 - 1.0).abs() < 0.01);
        assert!((acc[1] / n as f64 / 4.0 - 1.0).abs() < 0.01);
    }

    fn topo_series(u: Vec<f64>, dt: f64) -> TimeSeries {
        TimeSeries::new(u, 1, dt, vec!["u".into()], 0).unwrap()
    }

    #[test]
    fn recover_eta_inverts_the_map() {
        let p = TopoParams::regime(TopoRegime::Strong);
        let spec = SystemSpec::Topo(p.clone());
        let mut rng = Rng::new(4);
        let n = 500;
        let theta: Vec<f64> = (0..n).map(|t| 0.3 * (t as f64 * 0.05).sin()).collect();
        let eta: Vec<f64> = (0..n - 1).map(|_| rng.normal()).collect();
        let mut map = ResolvedMap::new(spec);
        let mut u = vec![p.u_eq() + 0.2];
        let mut x = [u[0]];
        for t in 0..n - 1 {
            map.step(&mut x, &[theta[t]], eta[t]).unwrap();
            u.push(x[0]);
        }
        let th = ThetaSeries {
            values: topo_series(theta, p.dt_obs),
            method: ThetaMethod::Exact,
        };
        let back = recover_eta(&topo_series(u, p.dt_obs), &th, &p).unwrap();
        for (a, b) in back.iter().zip(&eta) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn balanced_drift_gives_zero_eta() {
        let p = TopoParams::regime(TopoRegime::Weak);
        let u0 = 0.4;
        let th = ThetaSeries {
            values: topo_series(vec![p.d_bar * (u0 - p.u_eq()); 20], p.dt_obs),
            method: ThetaMethod::Exact,
        };
        let eta = recover_eta(&topo_series(vec![u0; 20], p.dt_obs), &th, &p).unwrap();
        assert!(eta.iter().all(|e| e.abs() < 1e-12));
        let mut q = p.clone();
        q.sigma = Some(0.0);
        assert!(recover_eta(&topo_series(vec![u0; 20], p.dt_obs), &th, &q).is_err());
    }

    #[test]
    fn realized_eta_replays_the_path() {
        let p = TopoParams::regime(TopoRegime::Intermediate);
        let spec = SystemSpec::Topo(p.clone());
        let mut rng = Rng::new(5);
        let n = 200;
        let eta: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let est = Constant {
            v: vec![0.05],
            var: vec![0.0],
            m: 0,
        };
        let h = DelayVector::new(vec![vec![0.1]], vec![vec![0.05]]).unwrap();
        let run = ClosureRun::new(spec.clone(), n).with_eta(NoisePolicy::Realized { values: eta.clone() });
        let out = closed_loop_run(&run, &est, &h).unwrap();
        let th = ThetaSeries {
            values: out.theta.clone(),
            method: ThetaMethod::Exact,
        };
        let back = recover_eta(&out.x, &th, &p).unwrap();
        for (a, b) in back.iter().zip(&eta) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn ensemble_members_match_single_runs() {
        let est = Constant {
            v: vec![0.2],
            var: vec![0.01],
            m: 1,
        };
        let hs: Vec<DelayVector> = (0..3)
            .map(|i| DelayVector::new(vec![vec![i as f64 * 0.1]; 2], vec![vec![0.0]; 2]).unwrap())
            .collect();
        let run = ClosureRun::new(langevin(), 30).with_xi(NoisePolicy::Sampled { seed: 8 });
        let ens = closed_loop_ensemble(&run, &est, &hs).unwrap();
        let single = closed_loop_run(&run, &est, &hs[0]).unwrap();
        assert_eq!(ens[0].x.values(), single.x.values());
        assert_ne!(ens[1].theta.values(), ens[0].theta.values());
    }
}
