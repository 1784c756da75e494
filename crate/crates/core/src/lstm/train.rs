//! Mini-batch Adam training, the fitted model and its checkpoint format.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{forward_batch, loss_and_grad, LstmArch, LstmParams};
use crate::error::{Error, Result};
use crate::estimator::{ClosureEstimator, EstimatorKind};
use crate::io;
use crate::rng::Rng;
use crate::series::DelayDataset;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d_hidden: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Peak learning rate; cosine-decayed to `lr_final`.
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lr_final")]
    pub lr_final: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_val")]
    pub val_frac: f64,
    /// Validation loss is evaluated every this many iterations (0: 50 times per run).
    #[serde(default)]
    pub eval_every: usize,
    /// Cap on the number of validation pairs evaluated.
    #[serde(default = "d_val_max")]
    pub val_max: usize,
    /// Variance of Gaussian noise added to standardized inputs and targets,
    /// drawn afresh every time a pair enters a batch.
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default = "d_true")]
    pub standardize: bool,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_lr_final() -> f64 {
    1e-5
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    5.0
}
fn d_val() -> f64 {
    0.1
}
fn d_val_max() -> usize {
    4096
}
fn d_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(d_hidden: usize, batch_size: usize, iterations: usize, seed: u64) -> Self {
        TrainConfig {
            d_hidden,
            batch_size,
            iterations,
            seed,
            lr: d_lr(),
            lr_final: d_lr_final(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_eps(),
            clip_norm: d_clip(),
            val_frac: d_val(),
            eval_every: 0,
            val_max: d_val_max(),
            noise_var: 0.0,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.d_hidden == 0 {
            return Err(Error::InvalidParameter(
                "batch_size, iterations and d_hidden must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_final >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParameter("learning rates and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) || !(self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "val_frac {} / noise_var {}",
                self.val_frac, self.noise_var
            )));
        }
        Ok(())
    }

    fn learning_rate(&self, it: usize) -> f64 {
        let s = it as f64 / self.iterations.max(2).saturating_sub(1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub train_loss: f64,
    /// NaN when no validation set is used.
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct LstmModel {
    pub params: LstmParams,
    /// Per cell-feature standardizer, shared by all cells.
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub residual_variance: Vec<f64>,
    pub config: TrainConfig,
    pub best_iteration: usize,
    pub best_val_loss: Option<f64>,
    /// Training curve; not part of the checkpoint tensors.
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmManifest {
    pub format_version: u32,
    pub kind: EstimatorKind,
    pub arch: LstmArch,
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub residual_variance: Vec<f64>,
    pub train_config: TrainConfig,
    pub optimizer: String,
    pub best_iteration: usize,
    pub best_val_loss: Option<f64>,
    pub tensors: Vec<String>,
}

const TENSORS: [&str; 4] = ["w_gates.bin", "b_gates.bin", "w_out.bin", "b_out.bin"];

impl LstmModel {
    pub fn arch(&self) -> LstmArch {
        self.params.arch
    }

    fn standardize_inputs(&self, inputs: &[f64]) -> Vec<f64> {
        let d = self.arch().d_in;
        inputs
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.in_mean[i % d]) / self.in_scale[i % d])
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let man = LstmManifest {
            format_version: FORMAT_VERSION,
            kind: EstimatorKind::Lstm,
            arch: self.arch(),
            in_mean: self.in_mean.clone(),
            in_scale: self.in_scale.clone(),
            out_mean: self.out_mean.clone(),
            out_scale: self.out_scale.clone(),
            residual_variance: self.residual_variance.clone(),
            train_config: self.config.clone(),
            optimizer: "adam".into(),
            best_iteration: self.best_iteration,
            best_val_loss: self.best_val_loss,
            tensors: TENSORS.iter().map(|s| s.to_string()).collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&man)?)?;
        let p = &self.params;
        for (name, t) in TENSORS.iter().zip([p.w_gates(), p.b_gates(), p.w_out(), p.b_out()]) {
            io::write_f64_bin(&dir.join(name), t)?;
        }
        if !self.log.is_empty() {
            write_log_csv(&dir.join("train_log.csv"), &self.log)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man: LstmManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if man.format_version != FORMAT_VERSION || man.kind != EstimatorKind::Lstm {
            return Err(Error::Format(format!("not an lstm checkpoint of version {FORMAT_VERSION}")));
        }
        let a = man.arch;
        a.validate()?;
        let (h, k) = (a.d_hidden, a.concat());
        let w = io::read_f64_bin(&dir.join(TENSORS[0]), 4 * h * k)?;
        let b = io::read_f64_bin(&dir.join(TENSORS[1]), 4 * h)?;
        let wr = io::read_f64_bin(&dir.join(TENSORS[2]), a.d_out * h)?;
        let br = io::read_f64_bin(&dir.join(TENSORS[3]), a.d_out)?;
        if man.in_mean.len() != a.d_in || man.in_scale.len() != a.d_in || man.out_mean.len() != a.d_out || man.out_scale.len() != a.d_out {
            return Err(Error::Format("standardizer shape does not match the architecture".into()));
        }
        Ok(LstmModel {
            params: LstmParams::from_parts(a, &w, &b, &wr, &br)?,
            in_mean: man.in_mean,
            in_scale: man.in_scale,
            out_mean: man.out_mean,
            out_scale: man.out_scale,
            residual_variance: man.residual_variance,
            config: man.train_config,
            best_iteration: man.best_iteration,
            best_val_loss: man.best_val_loss,
            log: Vec::new(),
        })
    }
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,train_loss,val_loss")?;
    for r in log {
        writeln!(f, "{},{:e},{:e}", r.iteration, r.train_loss, r.val_loss)?;
    }
    f.flush()?;
    Ok(())
}

impl ClosureEstimator for LstmModel {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Lstm
    }
    fn memory(&self) -> usize {
        self.arch().m
    }
    fn input_dim(&self) -> usize {
        self.arch().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.arch().d_out
    }
    fn residual_variance(&self) -> &[f64] {
        &self.residual_variance
    }
    fn predict_into(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!("input of {} for an LSTM of {}", input.len(), self.input_dim())));
        }
        self.predict_batch(input, out)
    }
    fn predict_batch(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        let z = self.standardize_inputs(inputs);
        forward_batch(&self.params, &z, out)?;
        let d = self.arch().d_out;
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.out_mean[i % d] + self.out_scale[i % d] * *v;
        }
        Ok(())
    }
}

struct Prepared {
    /// Standardized `[x, theta]` rows of the underlying table.
    rows: Vec<f64>,
    /// Standardized targets per pair.
    targets: Vec<f64>,
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in &rows {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn prepare(data: &DelayDataset, in_mean: &[f64], in_scale: &[f64], out_mean: &[f64], out_scale: &[f64]) -> Prepared {
    let d = data.cell_width();
    let d_o = data.output_dim();
    let mut rows = Vec::with_capacity(data.n_rows() * d);
    for t in 0..data.n_rows() {
        for (j, v) in data.row(t).iter().enumerate() {
            rows.push((v - in_mean[j]) / in_scale[j]);
        }
    }
    let mut targets = Vec::with_capacity(data.len() * d_o);
    for i in 0..data.len() {
        for (j, v) in data.target(i).iter().enumerate() {
            targets.push((v - out_mean[j]) / out_scale[j]);
        }
    }
    Prepared { rows, targets }
}

fn gather(data: &DelayDataset, prep: &Prepared, idx: &[usize], noise: Option<(&mut Rng, f64)>, x: &mut Vec<f64>, y: &mut Vec<f64>) {
    let w = data.cell_width();
    let d_o = data.output_dim();
    let m = data.m();
    x.clear();
    y.clear();
    for &i in idx {
        let s = data.newest_index(i);
        x.extend_from_slice(&prep.rows[(s - m) * w..(s + 1) * w]);
        y.extend_from_slice(&prep.targets[i * d_o..(i + 1) * d_o]);
    }
    if let Some((rng, var)) = noise {
        let sd = var.sqrt();
        for v in x.iter_mut().chain(y.iter_mut()) {
            *v += sd * rng.normal();
        }
    }
}

/// Train an LSTM closure by mini-batch Adam on the MSE loss, keeping the
/// parameters with the best validation loss.
pub fn train(data: &DelayDataset, cfg: &TrainConfig) -> Result<LstmModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training dataset".into()));
    }
    let (train_set, val_set) = data.split_validation(cfg.val_frac)?;
    let arch = LstmArch {
        d_in: data.cell_width(),
        d_hidden: cfg.d_hidden,
        d_out: data.output_dim(),
        m: data.m(),
    };
    arch.validate()?;

    let w = data.cell_width();
    let (in_mean, in_scale, out_mean, out_scale) = if cfg.standardize {
        let lo = train_set.newest_index(0) - train_set.m();
        let hi = train_set.newest_index(train_set.len() - 1);
        let (im, is) = moments((lo..=hi).map(|t| train_set.row(t)), w);
        // targets are the theta series, so they share its input standardizer
        let (om, os) = if train_set.d_theta_in() == arch.d_out {
            (im[train_set.d_x()..].to_vec(), is[train_set.d_x()..].to_vec())
        } else {
            moments((0..train_set.len()).map(|i| train_set.target(i)), arch.d_out)
        };
        (im, is, om, os)
    } else {
        (vec![0.0; w], vec![1.0; w], vec![0.0; arch.d_out], vec![1.0; arch.d_out])
    };
    let prep = prepare(data, &in_mean, &in_scale, &out_mean, &out_scale);
    let n_train = train_set.len();

    let rng = Rng::new(cfg.seed);
    let mut params = LstmParams::init(arch, &mut rng.substream(0));
    let mut order_rng = rng.substream(1);
    let mut noise_rng = rng.substream(2);
    let mut model = LstmModel {
        params: params.clone(),
        in_mean,
        in_scale,
        out_mean,
        out_scale,
        residual_variance: vec![0.0; arch.d_out],
        config: cfg.clone(),
        best_iteration: 0,
        best_val_loss: None,
        log: Vec::new(),
    };

    // validation pairs: an evenly strided subset of the trailing split
    let val_idx: Vec<usize> = if val_set.is_empty() {
        Vec::new()
    } else {
        let stride = val_set.len().div_ceil(cfg.val_max.max(1));
        (0..val_set.len()).step_by(stride).map(|i| n_train + i).collect()
    };
    let (mut vx, mut vy) = (Vec::new(), Vec::new());
    gather(data, &prep, &val_idx, None, &mut vx, &mut vy);
    let os2: Vec<f64> = model.out_scale.iter().map(|s| s * s).collect();
    let orig_loss = |sse: &[f64], n: usize| sse.iter().zip(&os2).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let val_loss = |p: &LstmParams| -> Result<f64> {
        let mut out = vec![0.0; vy.len()];
        forward_batch(p, &vx, &mut out)?;
        let mut sse = vec![0.0; arch.d_out];
        for (i, (a, b)) in out.iter().zip(&vy).enumerate() {
            sse[i % arch.d_out] += (a - b) * (a - b);
        }
        Ok(orig_loss(&sse, val_idx.len()))
    };

    let eval_every = if cfg.eval_every > 0 {
        cfg.eval_every
    } else {
        (cfg.iterations / 50).max(1)
    };
    let np = arch.n_params();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let mut grad = vec![0.0; np];
    let mut perm: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    let mut idx = Vec::with_capacity(cfg.batch_size);
    let mut best: Option<(f64, LstmParams, usize)> = None;
    let mut running = f64::NAN;

    for it in 0..cfg.iterations {
        idx.clear();
        while idx.len() < cfg.batch_size {
            if cursor == n_train {
                perm.shuffle(&mut order_rng);
                cursor = 0;
            }
            let take = (cfg.batch_size - idx.len()).min(n_train - cursor);
            idx.extend_from_slice(&perm[cursor..cursor + take]);
            cursor += take;
        }
        let noise = (cfg.noise_var > 0.0).then_some((&mut noise_rng, cfg.noise_var));
        gather(data, &prep, &idx, noise, &mut bx, &mut by);
        grad.fill(0.0);
        let sse = loss_and_grad(&params, &bx, &by, &mut grad).map_err(|e| Error::Divergence {
            iteration: it,
            detail: e.to_string(),
        })?;
        let loss = orig_loss(&sse, idx.len());
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("batch loss {loss}"),
            });
        }
        running = if running.is_nan() { loss } else { 0.95 * running + 0.05 * loss };

        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let lr = cfg.learning_rate(it);
        for j in 0..np {
            let g = grad[j] * clip;
            m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * g;
            m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * g * g;
            params.values[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + cfg.adam_eps);
        }

        let last = it + 1 == cfg.iterations;
        if (it + 1) % eval_every == 0 || last {
            let vl = if val_idx.is_empty() { f64::NAN } else { val_loss(&params)? };
            if !val_idx.is_empty() && !vl.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    detail: format!("validation loss {vl}"),
                });
            }
            log::debug!("iteration {} train {running:.3e} val {vl:.3e}", it + 1);
            model.log.push(LogRow {
                iteration: it + 1,
                train_loss: running,
                val_loss: vl,
            });
            if !val_idx.is_empty() && best.as_ref().is_none_or(|b| vl < b.0) {
                best = Some((vl, params.clone(), it + 1));
            }
        }
    }

    match best {
        Some((vl, p, it)) => {
            model.params = p;
            model.best_val_loss = Some(vl);
            model.best_iteration = it;
        }
        None => {
            model.params = params;
            model.best_iteration = cfg.iterations;
        }
    }
    model.residual_variance = crate::identify::residual_variance(&model, &train_set)?;
    Ok(model)
}
