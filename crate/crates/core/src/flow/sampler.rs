use rand::Rng;

use crate::conditioner::KvCacheSet;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::MaskSpec;

use super::{FlowExpert, PrefixSpec};

/// Anything that maps `(ã, τ)` to a velocity of the same shape.
pub trait VelocityField {
    fn velocity(&mut self, x: &Tensor, tau: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&mut self, x: &Tensor, tau: f64) -> Result<Tensor> {
        self(x, tau)
    }
}

/// Left-endpoint Euler on the grid `τ_k = k / steps`.
pub fn euler_integrate<F: VelocityField + ?Sized>(field: &mut F, init: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("Euler integration needs at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = init;
    for k in 0..steps {
        let v = field.velocity(&x, k as f64 / steps as f64)?;
        if v.shape() != x.shape() {
            return Err(Error::dim("euler_integrate", format!("{:?} vs {:?}", v.shape(), x.shape())));
        }
        for (a, b) in x.data_mut().iter_mut().zip(v.data()) {
            *a += h * b;
        }
    }
    Ok(x)
}

/// Integrates the noisy band from `init` and returns the full chunk with the
/// prefix copied into its first rows.
#[allow(clippy::too_many_arguments)]
pub fn sample_chunk_from(
    expert: &FlowExpert,
    store: &ParamStore,
    kv: &KvCacheSet,
    state: &[f64],
    prefix: &PrefixSpec,
    mask: &MaskSpec,
    init: Tensor,
) -> Result<Tensor> {
    let cfg = &expert.cfg;
    if prefix.len() > cfg.horizon {
        return Err(Error::Config(format!("prefix {} longer than horizon {}", prefix.len(), cfg.horizon)));
    }
    let mut field = |x: &Tensor, tau: f64| expert.dit_forward(store, kv, state, x, tau, prefix, mask);
    let band = euler_integrate(&mut field, init, cfg.sample_steps)?;
    let mut data = prefix.actions.data().to_vec();
    data.extend_from_slice(band.data());
    Tensor::new(&[cfg.horizon, cfg.action_dim], data)
}

/// Standard-normal start for the noisy band, then [`sample_chunk_from`].
pub fn sample_chunk<R: Rng + ?Sized>(
    expert: &FlowExpert,
    store: &ParamStore,
    kv: &KvCacheSet,
    state: &[f64],
    prefix: &PrefixSpec,
    mask: &MaskSpec,
    rng: &mut R,
) -> Result<Tensor> {
    let cfg = &expert.cfg;
    let rows = cfg.horizon.checked_sub(prefix.len()).ok_or_else(|| {
        Error::Config(format!("prefix {} longer than horizon {}", prefix.len(), cfg.horizon))
    })?;
    let init = Tensor::randn(&[rows, cfg.action_dim], 1.0, rng);
    sample_chunk_from(expert, store, kv, state, prefix, mask, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::{Conditioner, ContextInput};
    use crate::flow::{FlowConfig, KvSource};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_mass(target: Tensor) -> impl FnMut(&Tensor, f64) -> Result<Tensor> {
        move |x: &Tensor, tau: f64| x.zip_map(&target, |xi, ai| (ai - xi) / (1.0 - tau))
    }

    #[test]
    fn point_mass_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target = Tensor::randn(&[4, 2], 1.0, &mut rng);
        for _ in 0..20 {
            let init = Tensor::randn(&[4, 2], 3.0, &mut rng);
            let out = euler_integrate(&mut point_mass(target.clone()), init, 5).unwrap();
            assert!(out.max_abs_diff(&target) <= 1e-12);
        }
    }

    #[test]
    fn single_step_constant_field() {
        let init = Tensor::row(&[0.5, -1.0]);
        let c = Tensor::row(&[2.0, 3.0]);
        let mut f = |_: &Tensor, _: f64| Ok(c.clone());
        let out = euler_integrate(&mut f, init, 1).unwrap();
        assert_eq!(out.data(), &[2.5, 2.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        let mut f = |x: &Tensor, _: f64| Ok(x.clone());
        assert!(euler_integrate(&mut f, Tensor::row(&[1.0]), 0).is_err());
    }

    #[test]
    fn grid_is_left_endpoints() {
        let mut seen = Vec::new();
        let mut f = |x: &Tensor, t: f64| {
            seen.push(t);
            Ok(Tensor::zeros(x.shape()))
        };
        euler_integrate(&mut f, Tensor::row(&[0.0]), 5).unwrap();
        assert_eq!(seen, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
    }

    fn model(seed: u64) -> (ParamStore, Conditioner, FlowExpert) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fc = FlowConfig {
            horizon: 6,
            model_dim: 8,
            head_count: 2,
            layer_count: 1,
            mlp_hidden: 8,
            window: 2,
            kv_source: KvSource::Embeddings,
            ..FlowConfig::default()
        };
        let cc = crate::conditioner::ConditionerConfig {
            obs_dim: 2,
            state_dim: 2,
            action_dim: 2,
            horizon: 6,
            vocab: 1,
            model_dim: 8,
            head_count: 2,
            layer_count: 1,
            mlp_hidden: 8,
            candidates: 2,
            score_weight: 0.1,
        };
        let c = Conditioner::new(&mut store, cc, &mut rng).unwrap();
        let f = FlowExpert::new(&mut store, fc, &mut rng).unwrap();
        (store, c, f)
    }

    #[test]
    fn sampling_is_deterministic_and_keeps_prefix() {
        let (store, c, f) = model(1);
        let kv = c.encode_context(&store, &ContextInput::new(vec![0.1, 0.2], 0)).unwrap();
        let prefix = PrefixSpec::new(Tensor::from_rows(&[vec![0.3, -0.1], vec![0.2, 0.0]]).unwrap()).unwrap();
        let mask = MaskSpec::lambda(2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_chunk(&f, &store, &kv, &[0.0, 0.0], &prefix, &mask, &mut rng).unwrap()
        };
        let a = draw(4);
        assert_eq!(a, draw(4));
        assert_eq!(a.shape(), [6, 2]);
        assert_eq!(&a.data()[..4], prefix.actions.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn point_mass_from_any_start(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let init = Tensor::randn(&[3, 2], scale, &mut rng);
            let out = euler_integrate(&mut point_mass(target.clone()), init, 5).unwrap();
            prop_assert!(out.max_abs_diff(&target) <= 1e-12);
        }

        #[test]
        fn prefix_rows_copied(seed in any::<u64>(), plen in 0usize..=4) {
            let (store, c, f) = model(2);
            let kv = c.encode_context(&store, &ContextInput::new(vec![0.4, -0.2], 0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prefix = PrefixSpec::new(Tensor::randn(&[plen, 2], 1.0, &mut rng)).unwrap();
            let mask = if plen == 0 { MaskSpec::causal() } else { MaskSpec::lambda(2) };
            let out = sample_chunk(&f, &store, &kv, &[0.1, 0.1], &prefix, &mask, &mut rng).unwrap();
            prop_assert_eq!(&out.data()[..plen * 2], prefix.actions.data());
        }
    }
}
