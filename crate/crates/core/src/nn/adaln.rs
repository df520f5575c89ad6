//! Adaptive layer normalization with zero-initialized gates.

use rand::Rng;

use crate::diffcore::{Ctx, ParamStore, Tensor, Var};
use crate::error::Result;

use super::linear::Linear;

pub const LN_EPS: f64 = 1e-6;

/// Projects a conditioning row to `shift`, `scale` and `gate` rows.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub proj: Linear,
    pub dim: usize,
}

/// Per-layer conditioning rows, each `1 × dim`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

impl AdaLn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cond_dim: usize, dim: usize, rng: &mut R) -> Self {
        let proj = Linear::new(store, name, cond_dim, 3 * dim, true, rng);
        // gate columns start at zero so a fresh block is the identity
        let w = store.get_mut(proj.weight);
        for r in 0..cond_dim {
            for c in 2 * dim..3 * dim {
                w.data_mut()[r * 3 * dim + c] = 0.0;
            }
        }
        Self { proj, dim }
    }

    /// `cond` is `1 × cond_dim`; passed through SiLU before projection.
    pub fn modulation(&self, cx: &mut Ctx, cond: Var) -> Result<Modulation> {
        let c = cx.tape.silu(cond);
        let m = self.proj.forward(cx, c)?;
        Ok(Modulation {
            shift: cx.tape.slice_cols(m, 0, self.dim)?,
            scale: cx.tape.slice_cols(m, self.dim, self.dim)?,
            gate: cx.tape.slice_cols(m, 2 * self.dim, self.dim)?,
        })
    }
}

impl Modulation {
    /// `norm(x) ∘ (1 + scale) + shift`
    pub fn modulate(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let rows = cx.value(x).rows();
        let n = cx.tape.layer_norm(x, LN_EPS)?;
        let s1 = cx.tape.add_scalar(self.scale, 1.0);
        let s = cx.tape.repeat_rows(s1, rows)?;
        let sh = cx.tape.repeat_rows(self.shift, rows)?;
        let y = cx.tape.mul(n, s)?;
        cx.tape.add(y, sh)
    }

    /// `x + gate ∘ update`
    pub fn gated_residual(&self, cx: &mut Ctx, x: Var, update: Var) -> Result<Var> {
        let rows = cx.value(x).rows();
        let g = cx.tape.repeat_rows(self.gate, rows)?;
        let u = cx.tape.mul(g, update)?;
        cx.tape.add(x, u)
    }
}

/// `y = x + gate(cond) ∘ sublayer(norm(x) ∘ (1 + scale(cond)) + shift(cond))`
pub fn adaln_block<F>(cx: &mut Ctx, ada: &AdaLn, x: Var, cond: Var, sublayer: F) -> Result<Var>
where
    F: FnOnce(&mut Ctx, Var) -> Result<Var>,
{
    let m = ada.modulation(cx, cond)?;
    let h = m.modulate(cx, x)?;
    let u = sublayer(cx, h)?;
    m.gated_residual(cx, x, u)
}

/// Fixed modulation rows, for exercising the block with chosen values.
pub fn fixed_modulation(cx: &mut Ctx, shift: Tensor, scale: Tensor, gate: Tensor) -> Modulation {
    Modulation { shift: cx.constant(shift), scale: cx.constant(scale), gate: cx.constant(gate) }
}
