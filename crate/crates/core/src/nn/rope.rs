//! Rotary positional encoding with a separate index band for noisy actions.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::layout::{TokenLayout, TokenRole};

pub const ROPE_BASE: f64 = 10_000.0;

/// Positional index of every token in a layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RopePlan {
    pub indices: Vec<usize>,
    pub noisy_offset: usize,
}

impl RopePlan {
    pub fn new(layout: &TokenLayout, noisy_offset: usize) -> Self {
        Self { indices: rope_indices(layout, noisy_offset), noisy_offset }
    }
}

/// `sink → 0`, `state → 1`, prefix action `i → 2+i`, noisy action
/// `i → 2+i+offset`.
pub fn rope_indices(layout: &TokenLayout, offset: usize) -> Vec<usize> {
    layout
        .roles()
        .into_iter()
        .map(|r| match r {
            TokenRole::Sink => 0,
            TokenRole::State => 1,
            TokenRole::Prefix(i) => 2 + i,
            TokenRole::Noisy(i) => 2 + i + offset,
        })
        .collect()
}

/// Rotation angles, one per token and channel pair, row-major.
pub fn rope_angles(indices: &[usize], head_dim: usize) -> Result<Vec<f64>> {
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!("rotary encoding needs an even head dim, got {head_dim}")));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|c| ROPE_BASE.powf(-2.0 * c as f64 / head_dim as f64))
        .collect();
    let mut out = Vec::with_capacity(indices.len() * half);
    for &i in indices {
        out.extend(freqs.iter().map(|f| i as f64 * f));
    }
    Ok(out)
}

/// Rotates each token row of `x` (`tokens × head_dim`) by its index.
pub fn apply_rope(tape: &mut Tape, x: Var, indices: &[usize]) -> Result<Var> {
    let (rows, head_dim) = tape.value(x).dims2()?;
    if rows != indices.len() {
        return Err(Error::dim("apply_rope", format!("{rows} rows, {} indices", indices.len())));
    }
    let angles = rope_angles(indices, head_dim)?;
    tape.rotate_pairs(x, &angles)
}

pub fn apply_rope_tensor(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let r = apply_rope(&mut t, v, indices)?;
    Ok(t.value(r).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pretraining_layout_indices() {
        assert_eq!(rope_indices(&TokenLayout::new(0, 3), 10), vec![0, 1, 12, 13, 14]);
    }

    #[test]
    fn posttraining_layout_indices() {
        assert_eq!(rope_indices(&TokenLayout::new(2, 2), 10), vec![0, 1, 2, 3, 14, 15]);
    }

    #[test]
    fn no_offset() {
        assert_eq!(rope_indices(&TokenLayout::new(0, 1), 0), vec![0, 1, 2]);
    }

    #[test]
    fn index_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(apply_rope_tensor(&x, &[0]).unwrap(), x);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(apply_rope_tensor(&x, &[1]), Err(Error::Config(_))));
    }

    #[test]
    fn relative_position_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let dot = |i: usize, j: usize| {
            let a = apply_rope_tensor(&q, &[i]).unwrap();
            let b = apply_rope_tensor(&k, &[j]).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(5, 3) - dot(12, 10)).abs() <= 1e-10);
    }

    #[test]
    fn prefix_and_noisy_indices_never_collide() {
        for t in 6..=30 {
            for prefix in 0..=6 {
                let idx = rope_indices(&TokenLayout::new(prefix, t - prefix), 10);
                let (pre, noisy) = idx[2..].split_at(prefix);
                assert!(pre.iter().all(|i| !noisy.contains(i)), "T={t} c={prefix}");
                assert!(pre.windows(2).all(|w| w[0] < w[1]));
                assert!(noisy.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(seed in any::<u64>(), idx in 0usize..500, half in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 2 * half], 1.0, &mut rng);
            let y = apply_rope_tensor(&x, &[idx]).unwrap();
            let n = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n(&x) - n(&y)).abs() <= 1e-12);
        }
    }
}
