//! Central finite-difference gradient checks.
//!
//! The checker never looks at how the function is built: it perturbs every
//! input entry by `±h`, re-evaluates the scalar function and compares the
//! slope with the gradient from reverse-mode differentiation.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;
use crate::nn::{rng_for, to_vec_f64};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||fd - analytic|| / max(||fd||, ||analytic||)` per input.
    pub relative_errors: Vec<f64>,
    pub fd_norms: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks `f(inputs)` (a scalar) against finite differences with step `h`.
/// Inputs must be f64.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| Var::from_tensor(&t.to_dtype(DType::F64)?.copy()?))
        .collect::<std::result::Result<_, _>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let out = f(&tensors)?;
    let grads = out.backward()?;

    let base: Vec<Vec<f64>> = inputs.iter().map(to_vec_f64).collect::<Result<_>>()?;
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut fd_norms = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[i].as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; input.elem_count()],
        };
        let mut fd = vec![0.0; input.elem_count()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let args: Vec<Tensor> = base
                    .iter()
                    .enumerate()
                    .map(|(k, vals)| {
                        let mut v = vals.clone();
                        if k == i {
                            v[j] += delta;
                        }
                        Tensor::from_vec(v, inputs[k].shape(), &Device::Cpu)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                crate::nn::scalar_f64(&f(&args)?)
            };
            *slot = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        let diff = norm(fd.iter().zip(&analytic).map(|(a, b)| a - b));
        let scale = norm(fd.iter().copied()).max(norm(analytic.iter().copied()));
        relative_errors.push(if scale < 1e-12 { diff } else { diff / scale });
        fd_norms.push(norm(fd.iter().copied()));
    }
    Ok(GradCheck {
        relative_errors,
        fd_norms,
    })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

/// Fixed pseudo-random f64 tensor for probing.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = rng_for(seed, "gradcheck");
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Contracts `t` with a fixed random tensor of the same shape so that every
/// output entry influences the scalar.
pub fn project(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = probe_tensor(t.dims(), seed)?.to_dtype(t.dtype())?;
    Ok(t.mul(&w)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = probe_tensor(&[3, 2], 1).unwrap();
        let ok = check(&[x.clone()], 1e-6, |a| Ok(a[0].sqr()?.sum_all()?)).unwrap();
        assert!(ok.max_relative_error() < 1e-8);
        // detach hides the dependency from backprop but not from finite differences
        let bad = check(&[x], 1e-6, |a| Ok(a[0].detach().sqr()?.sum_all()?)).unwrap();
        assert!(bad.max_relative_error() > 0.5);
    }
}
