use crate::diffcore::{Ctx, Tensor, Var};
use crate::error::{Error, Result};

use super::{NoisySample, ReweightConfig};

/// Rows `prefix_len..` of the velocity target `a − ε`.
fn band_target(sample: &NoisySample, prefix_len: usize) -> Result<Tensor> {
    let u = sample.target();
    let (r, c) = u.dims2()?;
    if prefix_len > r {
        return Err(Error::dim("flow_loss", format!("prefix {prefix_len} > horizon {r}")));
    }
    Tensor::new(&[r - prefix_len, c], u.data()[prefix_len * c..].to_vec())
}

/// Mean squared error between `v` and `a − ε` over the noisy band.
pub fn flow_loss(cx: &mut Ctx, v: Var, sample: &NoisySample, prefix_len: usize) -> Result<Var> {
    let u = band_target(sample, prefix_len)?;
    if cx.value(v).shape() != u.shape() {
        return Err(Error::dim("flow_loss", format!("{:?} vs {:?}", cx.value(v).shape(), u.shape())));
    }
    let u = cx.constant(u);
    let d = cx.tape.sub(v, u)?;
    let sq = cx.tape.square(d)?;
    Ok(cx.tape.mean(sq))
}

pub fn flow_loss_value(v: &Tensor, sample: &NoisySample, prefix_len: usize) -> Result<f64> {
    let u = band_target(sample, prefix_len)?;
    let d = v.zip_map(&u, |a, b| (a - b) * (a - b))?;
    Ok(d.sum() / d.len() as f64)
}

/// Per-sample weights with batch mean 1. `None` marks a sample without a
/// prefix, whose raw weight is exactly 1.
pub fn reweight_weights(prefix_errors: &[Option<f64>], cfg: &ReweightConfig) -> Vec<f64> {
    if prefix_errors.is_empty() {
        return Vec::new();
    }
    let raw: Vec<f64> = prefix_errors
        .iter()
        .map(|e| match e {
            Some(err) => (1.0 + cfg.lambda * err).min(cfg.max_weight),
            None => 1.0,
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// `Σ wᵢ·lossᵢ / batch` with the weights of [`reweight_weights`].
pub fn reweight(losses: &[f64], prefix_errors: &[Option<f64>], cfg: &ReweightConfig) -> f64 {
    assert_eq!(losses.len(), prefix_errors.len(), "one prefix error per loss");
    let w = reweight_weights(prefix_errors, cfg);
    losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / losses.len().max(1) as f64
}
