use rand::Rng;

use crate::diffcore::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// `y = x·W + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let y = cx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let rows = cx.value(y).rows();
                let b = cx.param(b);
                let bb = cx.tape.repeat_rows(b, rows)?;
                cx.tape.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Two affine maps with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.silu(h);
        self.fc2.forward(cx, h)
    }
}
