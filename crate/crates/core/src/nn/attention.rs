//! Multi-head attention over `[context ∥ self]` keys.
//!
//! Context columns (the conditioner's cached keys and values) are always
//! visible. Self columns follow the [`Mask`]. Rotary encoding touches self
//! queries and keys only.

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

use super::layout::Mask;
use super::rope::apply_rope;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlockConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub context_enabled: bool,
}

impl AttnBlockConfig {
    pub fn new(model_dim: usize, head_count: usize, context_enabled: bool) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible by {head_count} heads"
            )));
        }
        Ok(Self { model_dim, head_count, context_enabled })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }
}

/// Keys and values recorded from one conditioner layer, `tokens × model_dim`.
#[derive(Clone, Copy, Debug)]
pub struct ContextKv {
    pub keys: Var,
    pub values: Var,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention probabilities, `self tokens × (context + self)`.
    pub weights: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention(
    tape: &mut Tape,
    cfg: &AttnBlockConfig,
    queries: Var,
    self_keys: Var,
    self_values: Var,
    context: Option<&ContextKv>,
    mask: &Mask,
    rope: Option<&[usize]>,
) -> Result<Var> {
    Ok(attention_with_weights(tape, cfg, queries, self_keys, self_values, context, mask, rope)?.output)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_with_weights(
    tape: &mut Tape,
    cfg: &AttnBlockConfig,
    queries: Var,
    self_keys: Var,
    self_values: Var,
    context: Option<&ContextKv>,
    mask: &Mask,
    rope: Option<&[usize]>,
) -> Result<AttentionOutput> {
    let (n, d) = tape.value(queries).dims2()?;
    if d != cfg.model_dim || tape.value(self_keys).dims2()? != (n, d) || tape.value(self_values).dims2()? != (n, d) {
        return Err(Error::dim("attention", format!("queries {n}x{d}, model dim {}", cfg.model_dim)));
    }
    if mask.size() != n {
        return Err(Error::dim("attention", format!("mask {} for {n} tokens", mask.size())));
    }
    let context = if cfg.context_enabled { context } else { None };
    let ctx_len = match context {
        Some(c) => {
            let (cn, cd) = tape.value(c.keys).dims2()?;
            if cd != d || tape.value(c.values).dims2()? != (cn, cd) {
                return Err(Error::dim("attention", format!("context {cn}x{cd} vs model dim {d}")));
            }
            cn
        }
        None => 0,
    };

    let cols = ctx_len + n;
    let mut visible = Vec::with_capacity(n * cols);
    for q in 0..n {
        visible.extend(std::iter::repeat_n(true, ctx_len));
        visible.extend_from_slice(mask.row(q));
    }

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.head_count);
    let mut weights = Vec::with_capacity(cfg.head_count);
    for h in 0..cfg.head_count {
        let mut q = tape.slice_cols(queries, h * hd, hd)?;
        let mut k = tape.slice_cols(self_keys, h * hd, hd)?;
        let mut v = tape.slice_cols(self_values, h * hd, hd)?;
        if let Some(idx) = rope {
            q = apply_rope(tape, q, idx)?;
            k = apply_rope(tape, k, idx)?;
        }
        if let Some(c) = context {
            let ck = tape.slice_cols(c.keys, h * hd, hd)?;
            let cv = tape.slice_cols(c.values, h * hd, hd)?;
            k = tape.concat_rows(&[ck, k])?;
            v = tape.concat_rows(&[cv, v])?;
        }
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let probs = tape.masked_softmax(logits, &visible)?;
        heads.push(tape.matmul(probs, v)?);
        weights.push(probs);
    }
    let output = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::nn::{MaskSpec, TokenLayout, build_mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_returns_its_value() {
        let cfg = AttnBlockConfig::new(4, 2, false).unwrap();
        let mut t = Tape::new();
        let q = t.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.5]));
        let k = t.constant(Tensor::row(&[1.0, 1.0, -1.0, 0.0]));
        let v = t.constant(Tensor::row(&[7.0, 8.0, 9.0, 10.0]));
        let m = Mask::from_fn(1, |_, _| true);
        let o = attention(&mut t, &cfg, q, k, v, None, &m, Some(&[3])).unwrap();
        let out = t.value(o).data();
        for (a, b) in out.iter().zip([7.0, 8.0, 9.0, 10.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_context_dominates() {
        let cfg = AttnBlockConfig::new(2, 1, true).unwrap();
        let mut t = Tape::new();
        // logit gap = (50·1 - 0) / sqrt(2) ≈ 35 > 30
        let q = t.constant(Tensor::row(&[50.0, 0.0]));
        let k = t.constant(Tensor::row(&[0.0, 0.0]));
        let v = t.constant(Tensor::row(&[-3.0, 4.0]));
        let ck = t.constant(Tensor::row(&[1.0, 0.0]));
        let cv = t.constant(Tensor::row(&[1.0, 2.0]));
        let ctx = ContextKv { keys: ck, values: cv };
        let m = Mask::from_fn(1, |_, _| true);
        let out = attention_with_weights(&mut t, &cfg, q, k, v, Some(&ctx), &m, None).unwrap();
        assert!(t.value(out.weights[0]).data()[0] > 1.0 - 1e-6);
        assert!((t.value(out.output).data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn masked_columns_get_zero_weight_and_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AttnBlockConfig::new(8, 2, true).unwrap();
        let layout = TokenLayout::new(2, 4);
        let mask = build_mask(&layout, &MaskSpec::lambda(1)).unwrap();
        let n = layout.token_count();
        let qv = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let vv = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let ckv = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let run = |k: &Tensor, v: &Tensor| {
            let mut t = Tape::new();
            let q = t.constant(qv.clone());
            let k = t.constant(k.clone());
            let v = t.constant(v.clone());
            let c = ContextKv { keys: t.constant(ckv.clone()), values: t.constant(ckv.clone()) };
            let idx = crate::nn::rope_indices(&layout, 10);
            let o = attention_with_weights(&mut t, &cfg, q, k, v, Some(&c), &mask, Some(&idx)).unwrap();
            let w: Vec<Tensor> = o.weights.iter().map(|w| t.value(*w).clone()).collect();
            (t.value(o.output).clone(), w)
        };
        let (base, weights) = run(&kv, &vv);
        for w in &weights {
            for q in 0..n {
                for k in 0..n {
                    if !mask.get(q, k) {
                        assert_eq!(w.at(q, 3 + k), 0.0);
                    }
                }
            }
        }
        // scramble the contents of token 2 (prefix t=0), masked for the last query
        let mut k2 = kv.clone();
        let mut v2 = vv.clone();
        for c in 0..8 {
            k2.data_mut()[2 * 8 + c] = 100.0 * c as f64;
            v2.data_mut()[2 * 8 + c] = -55.0;
        }
        let (pert, _) = run(&k2, &v2);
        assert_eq!(base.row_slice(n - 1), pert.row_slice(n - 1));
    }

    #[test]
    fn fully_masked_row_without_context_fails() {
        let cfg = AttnBlockConfig::new(2, 1, false).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        let m = Mask::from_fn(2, |q, _| q == 0);
        let e = attention(&mut t, &cfg, x, x, x, None, &m, None);
        assert!(matches!(e, Err(Error::DegenerateMask { row: 1 })));
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(AttnBlockConfig::new(10, 4, true).is_err());
    }
}
