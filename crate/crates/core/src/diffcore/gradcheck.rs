use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compares tape gradients of `f` against central differences.
///
/// Returns the maximum over all parameter entries of
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    check_gradients(value, &analytic, params, eps)
}

/// Finite-difference comparison for an arbitrary scalar function and a
/// supplied set of analytic gradients.
pub fn check_gradients<V>(value: V, analytic: &[Tensor], params: &[Tensor], eps: f64) -> Result<f64>
where
    V: Fn(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    if params.is_empty() {
        return Ok(0.0);
    }
    let first = value(params)?;
    let second = value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = value(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = value(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = grad.data()[j];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
