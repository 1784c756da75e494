use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Rkhs,
    Lstm,
    /// Closed-form drift, used as an oracle or for controlled perturbations.
    Analytic,
}

/// Evaluation contract shared by the learned closures.
///
/// Inputs are flattened delay vectors (see [`crate::DelayVector::flatten`]).
pub trait ClosureEstimator: Send + Sync {
    fn kind(&self) -> EstimatorKind;
    fn memory(&self) -> usize;
    /// Flattened input length `(m+1)·d_in`.
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Per-output training residual variance.
    fn residual_variance(&self) -> &[f64];

    fn predict_into(&self, input: &[f64], out: &mut [f64]) -> Result<()>;

    fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.predict_into(input, &mut out)?;
        Ok(out)
    }

    /// Row-major batch evaluation; `inputs.len()` must be a multiple of
    /// `input_dim`.
    fn predict_batch(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        let (di, d_o) = (self.input_dim(), self.output_dim());
        if di == 0 || inputs.len() % di != 0 || out.len() != inputs.len() / di * d_o {
            return Err(Error::Shape(format!(
                "batch of {} values for input dim {di}, output buffer {}",
                inputs.len(),
                out.len()
            )));
        }
        for (x, y) in inputs.chunks_exact(di).zip(out.chunks_exact_mut(d_o)) {
            self.predict_into(x, y)?;
        }
        Ok(())
    }
}

impl<T: ClosureEstimator + ?Sized> ClosureEstimator for Box<T> {
    fn kind(&self) -> EstimatorKind {
        (**self).kind()
    }
    fn memory(&self) -> usize {
        (**self).memory()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn residual_variance(&self) -> &[f64] {
        (**self).residual_variance()
    }
    fn predict_into(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).predict_into(input, out)
    }
    fn predict_batch(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).predict_batch(inputs, out)
    }
}
