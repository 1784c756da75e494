use mdclosure::identify::{align, extract_theta, ThetaMethod};
use mdclosure::lstm::{train, LstmModel, TrainConfig};
use mdclosure::predict::{closed_loop_ensemble, history_at, ClosureRun, RunOutput};
use mdclosure::stats::{energy_spectrum, modes_to_physical, rmse_ancr};
use mdclosure::systems::{simulate_kse, KseParams, SystemSpec};
use mdclosure::{make_delay_dataset, ClosureEstimator, EstimatorKind, Error, Result, TimeSeries};

use super::Outcome;

const N_TRAIN: usize = 100_000;
const MEMORY: usize = 19;
const HIDDEN: usize = 128;
const ITERATIONS: usize = 3000;
const N_IC: usize = 100;
const LEAD_STEPS: usize = 1000;
const SPECTRUM_MEMBERS: usize = 20;
const SPECTRUM_STEPS: usize = 5000;
const POINTS: usize = 64;

/// Bare truncation: theta is identically zero.
struct Bare {
    d: usize,
    rv: Vec<f64>,
}

impl ClosureEstimator for Bare {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Analytic
    }
    fn memory(&self) -> usize {
        0
    }
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.d
    }
    fn residual_variance(&self) -> &[f64] {
        &self.rv
    }
    fn predict_into(&self, _input: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

fn theta_of(x: &TimeSeries, spec: &SystemSpec) -> Result<(TimeSeries, TimeSeries)> {
    let th = extract_theta(x, spec, ThetaMethod::SchemeInverse)?;
    Ok((align(x, &th)?, th.values))
}

fn fit(spec: &SystemSpec, p: &KseParams) -> Result<LstmModel> {
    let full = simulate_kse(p, N_TRAIN + MEMORY + 2, 31)?;
    let (x, th) = theta_of(&spec.resolved_view(&full)?, spec)?;
    let data = make_delay_dataset(&x, &th, MEMORY)?;
    let mut cfg = TrainConfig::new(HIDDEN, 64, ITERATIONS, 7);
    cfg.lr = 3e-3;
    cfg.noise_var = 0.01;
    train(&data, &cfg)
}

fn physical(runs: &[RunOutput], length: f64) -> Result<Vec<TimeSeries>> {
    runs.iter().map(|r| modes_to_physical(&r.x, length, POINTS)).collect()
}

pub fn ac5() -> Outcome {
    let p = KseParams::default();
    let spec = SystemSpec::Kse(p.clone());
    let model = fit(&spec, &p)?;

    // out-of-sample verification run
    let spacing = 200;
    let verify = simulate_kse(&p, MEMORY + N_IC * spacing + LEAD_STEPS + 2, 97)?;
    let (vx, vth) = theta_of(&spec.resolved_view(&verify)?, &spec)?;
    let starts: Vec<usize> = (0..N_IC).map(|i| MEMORY + i * spacing).collect();
    let histories = starts.iter().map(|&t| history_at(&vx, &vth, t, MEMORY)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<TimeSeries> = starts.iter().map(|&t| vx.slice(t, t + LEAD_STEPS + 1)).collect::<Result<_>>()?;

    let run = ClosureRun::new(spec.clone(), LEAD_STEPS);
    let closure = closed_loop_ensemble(&run, &model, &histories)?;
    if let Some(b) = closure.iter().find_map(|o| o.blowup) {
        return Ok((false, format!("closure blew up at step {b}")));
    }
    let d = spec.resolved_dim();
    let bare_est = Bare { d, rv: vec![0.0; d] };
    // bare truncation knows no theta at all, including the first step's
    let bare_hist = histories
        .iter()
        .map(|h| mdclosure::DelayVector::new(vec![h.x_hist[MEMORY].clone()], vec![vec![0.0; d]]))
        .collect::<Result<Vec<_>>>()?;
    let bare = closed_loop_ensemble(&run, &bare_est, &bare_hist)?;

    let truth_phys: Vec<TimeSeries> = truth.iter().map(|t| modes_to_physical(t, p.length, POINTS)).collect::<Result<_>>()?;
    let all_phys = modes_to_physical(&vx, p.length, POINTS)?;
    let clim: Vec<f64> = (0..POINTS).map(|j| all_phys.column(j).iter().sum::<f64>() / all_phys.n_steps() as f64).collect();
    let rc = rmse_ancr(&physical(&closure, p.length)?, &truth_phys, &clim)?;
    // bare runs may stop early; compare over the common prefix and count the rest as a closure win
    let bare_len = bare.iter().map(|o| o.x.n_steps()).min().unwrap_or(0);
    let cut = |v: &[TimeSeries]| -> Result<Vec<TimeSeries>> { v.iter().map(|t| t.slice(0, bare_len)).collect() };
    let rb = if bare_len > 1 {
        Some(rmse_ancr(&cut(&physical(&bare, p.length)?)?, &cut(&truth_phys)?, &clim)?)
    } else {
        None
    };
    let c_rmse = rc.column("rmse").ok_or_else(|| Error::Consistency("rmse column".into()))?;
    let c_ancr = rc.column("ancr").ok_or_else(|| Error::Consistency("ancr column".into()))?;
    let losing: Vec<usize> = match &rb {
        Some(rb) => {
            let b_rmse = rb.column("rmse").ok_or_else(|| Error::Consistency("rmse column".into()))?;
            (1..bare_len).filter(|&t| c_rmse[t] >= b_rmse[t]).collect()
        }
        None => Vec::new(),
    };
    let beats = losing.is_empty();
    let lead25 = (25.0 / p.dt_obs).round() as usize;
    let ancr25 = c_ancr[lead25];

    // long-run spectrum of the closure vs the full model on the resolved modes
    let long = ClosureRun::new(spec.clone(), SPECTRUM_STEPS);
    let spec_runs = closed_loop_ensemble(&long, &model, &histories[..SPECTRUM_MEMBERS])?;
    if let Some(b) = spec_runs.iter().find_map(|o| o.blowup) {
        return Ok((false, format!("long closure run blew up at step {b}")));
    }
    let mut pooled = Vec::new();
    for r in &spec_runs {
        pooled.extend_from_slice(r.x.values());
    }
    let closure_modes = TimeSeries::with_default_names(pooled, d, p.dt_obs, "v", 0)?;
    let ec = energy_spectrum(&closure_modes)?;
    let et = energy_spectrum(&vx)?;
    let rel: Vec<f64> = ec.values[0].iter().zip(&et.values[0]).map(|(a, b)| (a - b).abs() / b).collect();
    let worst = rel.iter().copied().fold(0.0, f64::max);

    let ok = beats && ancr25 >= 0.6 && worst <= 0.25;
    let b_last = rb
        .as_ref()
        .and_then(|r| r.column("rmse").map(|c| c[bare_len - 1]))
        .unwrap_or(f64::NAN);
    Ok((
        ok,
        format!(
            "closure RMSE below bare at every lead: {beats} ({} losing leads, first at t={:.2}; bare runs {bare_len} steps; RMSE at lead 50: closure {:.3}, bare {b_last:.3}); ANCR at lead 25 {ancr25:.3}; spectrum relative errors {:?}; training residual {:.2e}",
            losing.len(),
            losing.first().map_or(f64::NAN, |&t| t as f64 * p.dt_obs),
            c_rmse[LEAD_STEPS],
            rel.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            model.residual_variance.iter().sum::<f64>() / d as f64
        ),
    ))
}
