//! Central finite-difference comparison against tape gradients.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Relative error with a floor on the denominator, so that two tiny
/// gradients do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Cap on the number of probed entries per input; larger inputs are
    /// probed at evenly strided positions.
    pub max_entries: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: None,
        }
    }
}

/// Entries probed for an input of `len` elements.
pub fn probe_indices(len: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(cap) if cap < len => {
            // odd stride keeps the probes from aligning with channel blocks
            let stride = (len / cap) | 1;
            (0..cap).map(|i| (i * stride + i / 2) % len).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Per-input worst relative error between analytic and numeric gradients of
/// the scalar produced by `f`.
pub fn check<T, F>(f: F, inputs: &[Tensor<T>], opts: FdOptions) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect();

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item().real())
    };

    let mut worst = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut err: f64 = 0.0;
        for idx in probe_indices(input.len(), opts.max_entries) {
            let mut probe = inputs.to_vec();
            let x0 = input.data()[idx].real();
            probe[i].data_mut()[idx] = T::c(x0 + opts.step);
            let up = eval(&probe)?;
            probe[i].data_mut()[idx] = T::c(x0 - opts.step);
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * opts.step);
            err = err.max(rel_err(analytic[i].data()[idx].real(), numeric));
        }
        worst.push(err);
    }
    Ok(worst)
}
