use std::sync::OnceLock;

use mdclosure::identify::extract_theta_exact;
use mdclosure::predict::{closed_loop_ensemble, ClosureRun, NoisePolicy};
use mdclosure::rkhs::{fit_rkhs, Extrapolation, HermiteModel, RkhsOptions};
use mdclosure::stats::{pooled_well_statistics, WellSpec};
use mdclosure::systems::langevin::simulate_langevin_from;
use mdclosure::systems::{LangevinParams, SystemSpec};
use mdclosure::theory::{verify_prediction_horizon, verify_strong_error_rate, HorizonConfig, RateExperiment};
use mdclosure::{make_delay_dataset, ClosureEstimator, DelayVector, Result};

use super::Outcome;

const SMALL: usize = 50_000;
const LARGE: usize = 500_000;
const BANDS: [f64; 3] = [0.2, 0.3, 0.4];
const MEMBERS: usize = 16;
const RUN_STEPS: usize = 625_000;

fn spec() -> SystemSpec {
    SystemSpec::Langevin(LangevinParams::default())
}

/// 50x50 Hermite closures fitted on the first `n` pairs of one training path.
fn models() -> &'static [(usize, HermiteModel)] {
    static M: OnceLock<Vec<(usize, HermiteModel)>> = OnceLock::new();
    M.get_or_init(|| {
        let p = LangevinParams::default();
        let burn = 100_000;
        let full = simulate_langevin_from(&p, burn + LARGE + 1, 2024, (1.0, 0.0)).expect("training path");
        let full = full.slice(burn, full.n_steps()).expect("slice");
        [SMALL, LARGE]
            .iter()
            .map(|&n| {
                let part = full.slice(0, n + 1).expect("slice");
                let x = spec().resolved_view(&part).expect("x");
                let th = extract_theta_exact(&part, &spec()).expect("theta");
                let data = make_delay_dataset(&x, &th.values, 0).expect("dataset");
                let mut opts = RkhsOptions::new(vec![50, 50]);
                opts.extrapolation = Extrapolation::Clamp;
                (n, fit_rkhs(&data, &opts).expect("fit"))
            })
            .collect()
    })
}

fn pooled(paths: &[Vec<f64>], band: f64) -> Result<(f64, f64)> {
    let refs: Vec<&[f64]> = paths.iter().map(|p| p.as_slice()).collect();
    pooled_well_statistics(&refs, 0.01, &WellSpec::with_band(band))
}

fn closure_paths(est: &dyn ClosureEstimator, seed: u64) -> Result<Vec<Vec<f64>>> {
    let run = ClosureRun::new(spec(), RUN_STEPS).with_xi(NoisePolicy::Sampled { seed });
    let h = DelayVector::new(vec![vec![1.0]], vec![vec![0.0]])?;
    let out = closed_loop_ensemble(&run, est, &vec![h; MEMBERS])?;
    Ok(out.into_iter().map(|o| o.x.column(0)).collect())
}

fn truth_paths(seed: u64) -> Result<Vec<Vec<f64>>> {
    let p = LangevinParams::default();
    (0..MEMBERS as u64)
        .map(|i| Ok(simulate_langevin_from(&p, RUN_STEPS + 1, seed + i, (1.0, 0.0))?.column(0)))
        .collect()
}

pub fn ac1() -> Outcome {
    let truth = truth_paths(77)?;
    let runs: Vec<(usize, Vec<Vec<f64>>)> = models()
        .iter()
        .map(|(n, m)| Ok((*n, closure_paths(m, 91)?)))
        .collect::<Result<_>>()?;
    let mut ok = true;
    let mut detail = Vec::new();
    for band in BANDS {
        let (tau, nu) = pooled(&truth, band)?;
        let mut ratios = Vec::new();
        for (n, paths) in &runs {
            let (ct, cn) = pooled(paths, band)?;
            ratios.push((ct / tau, cn / nu));
            detail.push(format!("band {band} N={n}: tau {ct:.1}/{tau:.1} nu {cn:.4}/{nu:.4}"));
        }
        let (small, large) = (ratios[0], ratios[1]);
        let inside = |r: f64| (0.75..=1.35).contains(&r);
        let beats = |a: f64, b: f64| (a - 1.0).abs() <= (b - 1.0).abs();
        ok &= inside(large.0) && inside(large.1) && beats(large.0, small.0) && beats(large.1, small.1);
    }
    Ok((ok, detail.join("; ")))
}

pub fn ac2() -> Outcome {
    let cfg = HorizonConfig::new(300.0, 5);
    let closures: Vec<(usize, &dyn ClosureEstimator)> =
        models().iter().map(|(n, m)| (*n, m as &dyn ClosureEstimator)).collect();
    let t = verify_prediction_horizon(&cfg, &closures)?;
    let (s, l) = (t.rows[0].median, t.rows[1].median);
    let ok = l > s && (8.0..=25.0).contains(&s) && (18.0..=40.0).contains(&l);
    Ok((ok, format!("median horizon N={SMALL}: {s:.2}, N={LARGE}: {l:.2} (means {:.2}, {:.2})", t.rows[0].mean, t.rows[1].mean)))
}

pub fn ac3() -> Outcome {
    let r = verify_strong_error_rate(&RateExperiment::standard(11))?;
    let (e, g) = (&r.epsilon_fit, &r.growth_fit);
    let ok = e.within(0.8, 1.2) && g.ci_high <= 2.5;
    Ok((
        ok,
        format!(
            "epsilon slope {:.3} [{:.3}, {:.3}], growth exponent {:.3} [{:.3}, {:.3}]",
            e.slope, e.ci_low, e.ci_high, g.slope, g.ci_low, g.ci_high
        ),
    ))
}
