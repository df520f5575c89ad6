use rand::Rng;

use crate::diffcore::{Ctx, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

use super::linear::Mlp;

/// Multiplier applied to the flow time before the sinusoids.
pub const TIME_SCALE: f64 = 1000.0;

/// Interleaved `[sin, cos]` features of `tau · 1000`, `dim` channels.
pub fn sinusoidal_features(tau: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Range { what: "flow time", value: tau, lo: 0.0, hi: 1.0 });
    }
    let half = dim / 2;
    let x = tau * TIME_SCALE;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (x * freq).sin();
        out[2 * i + 1] = (x * freq).cos();
    }
    Tensor::new(&[1, dim], out)
}

/// Sinusoidal features followed by a learned two-layer map.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    pub mlp: Mlp,
    pub dim: usize,
}

impl TimestepEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, name, dim, dim, dim, rng), dim }
    }

    pub fn forward(&self, cx: &mut Ctx, tau: f64) -> Result<Var> {
        let raw = sinusoidal_features(tau, self.dim)?;
        let x = cx.constant(raw);
        self.mlp.forward(cx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_time_alternates() {
        let f = sinusoidal_features(0.0, 8).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn distinct_times_are_separated() {
        let a = sinusoidal_features(0.1, 16).unwrap();
        let b = sinusoidal_features(0.9, 16).unwrap();
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(d > 0.1, "{d}");
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(sinusoidal_features(1.5, 4), Err(Error::Range { .. })));
        assert!(matches!(sinusoidal_features(-0.1, 4), Err(Error::Range { .. })));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = TimestepEmbedder::new(&mut store, "t", 8, &mut rng);
        let run = || {
            let mut cx = Ctx::inference(&store);
            let v = emb.forward(&mut cx, 0.37).unwrap();
            cx.value(v).clone()
        };
        assert_eq!(run(), run());
    }
}
