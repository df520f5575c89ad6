use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::FlowConfig;

/// `τ = tau_max · (1 − u)`, `u ~ Beta(tau_alpha, tau_beta)`.
pub fn sample_tau<R: Rng + ?Sized>(cfg: &FlowConfig, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(cfg.tau_alpha, cfg.tau_beta)
        .map_err(|e| Error::Config(format!("Beta({}, {}): {e}", cfg.tau_alpha, cfg.tau_beta)))?;
    let u: f64 = beta.sample(rng);
    Ok(cfg.tau_max * (1.0 - u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub clean: Tensor,
    pub noise: Tensor,
    pub tau: f64,
    pub noisy: Tensor,
}

impl NoisySample {
    /// `u = a − ε`.
    pub fn target(&self) -> Tensor {
        self.clean.zip_map(&self.noise, |a, e| a - e).expect("shapes checked at construction")
    }
}

/// `ã = τ·a + (1 − τ)·ε`.
pub fn make_noisy(clean: &Tensor, tau: f64, noise: &Tensor) -> Result<NoisySample> {
    let noisy = clean.zip_map(noise, |a, e| tau * a + (1.0 - tau) * e)?;
    Ok(NoisySample { clean: clean.clone(), noise: noise.clone(), tau, noisy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tau_in_range_with_expected_mean() {
        let cfg = FlowConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_tau(&cfg, &mut rng).unwrap();
            assert!((0.0..=0.999).contains(&t));
            sum += t;
        }
        let expected = 0.999 * (1.0 - 1.5 / 2.5);
        assert!((sum / n as f64 - expected).abs() < 0.005);
    }

    #[test]
    fn uniform_reduction() {
        let cfg = FlowConfig { tau_alpha: 1.0, tau_beta: 1.0, ..FlowConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_tau(&cfg, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.4995).abs() < 0.005, "{mean}");
    }

    #[test]
    fn endpoints() {
        let a = Tensor::row(&[0.3, -0.7]);
        let e = Tensor::row(&[1.1, 0.2]);
        assert_eq!(make_noisy(&a, 1.0, &e).unwrap().noisy, a);
        assert_eq!(make_noisy(&a, 0.0, &e).unwrap().noisy, e);
    }

    #[test]
    fn target_is_path_derivative() {
        let a = Tensor::row(&[1.0, 0.0]);
        let e = Tensor::row(&[0.0, 1.0]);
        for tau in [0.0, 0.3, 0.9] {
            assert_eq!(make_noisy(&a, tau, &e).unwrap().target().data(), &[1.0, -1.0]);
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(make_noisy(&Tensor::row(&[1.0]), 0.5, &Tensor::row(&[1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn noisy_recomputable(vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..20), tau in 0.0f64..0.999) {
            let a = Tensor::row(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
            let e = Tensor::row(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
            let s = make_noisy(&a, tau, &e).unwrap();
            for i in 0..vals.len() {
                let r = tau * a.data()[i] + (1.0 - tau) * e.data()[i];
                prop_assert!((s.noisy.data()[i] - r).abs() <= 1e-12);
            }
        }
    }
}
