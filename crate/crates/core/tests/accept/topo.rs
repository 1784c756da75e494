use mdclosure::identify::extract_theta_exact;
use mdclosure::lstm::{train, TrainConfig};
use mdclosure::predict::{closed_loop_ensemble, history_at, ClosureRun, NoisePolicy};
use mdclosure::stats::{acf, kde_with_bandwidth, l1_distance, linspace, silverman_bandwidth};
use mdclosure::systems::{simulate_topo, SystemSpec, TopoParams, TopoRegime};
use mdclosure::{make_delay_dataset, Result};

use super::Outcome;

const N_TRAIN: usize = 200_000;
const MEMORY: usize = 19;
const HIDDEN: usize = 64;
const ITERATIONS: usize = 6000;
const MEMBERS: usize = 8;
const RUN_STEPS: usize = 50_000;
const MAX_LAG: usize = 200;

fn train_cfg(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(HIDDEN, 64, ITERATIONS, seed);
    c.lr = 5e-3;
    c
}

fn mean_acf(paths: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; MAX_LAG + 1];
    for p in paths {
        let a = acf(p, MAX_LAG)?;
        out.iter_mut().zip(&a).for_each(|(o, v)| *o += v / paths.len() as f64);
    }
    Ok(out)
}

pub fn ac4() -> Outcome {
    let p = TopoParams::regime(TopoRegime::Strong);
    let spec = SystemSpec::Topo(p.clone());
    let full = simulate_topo(&p, N_TRAIN + MEMORY + 1, 101)?;
    let u = spec.resolved_view(&full)?;
    let th = extract_theta_exact(&full, &spec)?;
    let data = make_delay_dataset(&u, &th.values, MEMORY)?;
    let with_theta = train(&data, &train_cfg(1))?;
    let x_only = train(&data.resolved_only(), &train_cfg(1))?;
    let (rv_full, rv_x) = (with_theta.residual_variance[0], x_only.residual_variance[0]);
    let ratio = rv_x / rv_full;

    // independent verification run for the reference statistics and initial windows
    let verify = simulate_topo(&p, N_TRAIN, 202)?;
    let vu = spec.resolved_view(&verify)?;
    let vth = extract_theta_exact(&verify, &spec)?;
    let histories = (0..MEMBERS)
        .map(|i| history_at(&vu, &vth.values, MEMORY + i * (N_TRAIN / MEMBERS - 1), MEMORY))
        .collect::<Result<Vec<_>>>()?;
    let run = ClosureRun::new(spec.clone(), RUN_STEPS)
        .with_xi(NoisePolicy::Sampled { seed: 303 })
        .with_eta(NoisePolicy::Sampled { seed: 404 });
    let outs = closed_loop_ensemble(&run, &with_theta, &histories)?;
    if let Some(b) = outs.iter().find_map(|o| o.blowup) {
        return Ok((false, format!("closure left the admissible range at step {b}; residual variances {rv_full:.3e} vs {rv_x:.3e}")));
    }
    let paths: Vec<Vec<f64>> = outs.iter().map(|o| o.x.column(0)).collect();
    let truth = vu.column(0);
    let truth_paths: Vec<Vec<f64>> = truth.chunks(N_TRAIN / MEMBERS).map(|c| c.to_vec()).collect();
    let (ca, ta) = (mean_acf(&paths)?, mean_acf(&truth_paths)?);
    let acf_dev = ca.iter().zip(&ta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let pooled: Vec<f64> = paths.concat();
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    let s = (truth.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / truth.len() as f64).sqrt();
    let grid = linspace(m - 5.0 * s, m + 5.0 * s, 512);
    let pt = kde_with_bandwidth(&truth, &grid, silverman_bandwidth(&truth)?);
    let pc = kde_with_bandwidth(&pooled, &grid, silverman_bandwidth(&pooled)?);
    let l1 = l1_distance(&grid, &pc, &pt);

    let ok = ratio >= 100.0 && acf_dev <= 0.1 && l1 <= 0.15;
    Ok((
        ok,
        format!(
            "residual variance (x, theta) {rv_full:.3e} vs x-only {rv_x:.3e} (ratio {ratio:.1}); ACF max deviation {acf_dev:.3}; PDF L1 {l1:.3}"
        ),
    ))
}

