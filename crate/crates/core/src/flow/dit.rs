use rand::Rng;

use crate::conditioner::KvCacheSet;
use crate::diffcore::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AdaLn, AttnBlockConfig, ContextKv, LN_EPS, Linear, MaskKind, MaskSpec, Mlp, TimestepEmbedder, TokenLayout,
    attention, build_mask, rope_indices,
};

use super::{FlowConfig, KvSource, PrefixSpec};

/// Every action-expert parameter name starts with this prefix.
pub const PREFIX: &str = "flow.";

#[derive(Clone, Debug)]
struct DitLayer {
    ada_attn: AdaLn,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ada_mlp: AdaLn,
    mlp: Mlp,
}

/// Velocity network over `[SINK, state, prefix actions, noisy actions]`.
#[derive(Clone, Debug)]
pub struct FlowExpert {
    pub cfg: FlowConfig,
    sink: ParamId,
    state_enc: Mlp,
    action_enc: Mlp,
    time: TimestepEmbedder,
    layers: Vec<DitLayer>,
    final_mod: Linear,
    out: Linear,
}

impl FlowExpert {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let p = PREFIX;
        let sink = store.add(format!("{p}sink"), Tensor::randn(&[1, d], 1.0, rng));
        let state_enc = Mlp::new(store, &format!("{p}state_enc"), cfg.state_dim, d, d, rng);
        let action_enc = Mlp::new(store, &format!("{p}action_enc"), cfg.action_dim, d, d, rng);
        let time = TimestepEmbedder::new(store, &format!("{p}time"), d, rng);
        let layers = (0..cfg.layer_count)
            .map(|i| DitLayer {
                ada_attn: AdaLn::new(store, &format!("{p}layer{i}.ada_attn"), d, d, rng),
                wq: Linear::new(store, &format!("{p}layer{i}.wq"), d, d, true, rng),
                wk: Linear::new(store, &format!("{p}layer{i}.wk"), d, d, true, rng),
                wv: Linear::new(store, &format!("{p}layer{i}.wv"), d, d, true, rng),
                wo: Linear::new(store, &format!("{p}layer{i}.wo"), d, d, true, rng),
                ada_mlp: AdaLn::new(store, &format!("{p}layer{i}.ada_mlp"), d, d, rng),
                mlp: Mlp::new(store, &format!("{p}layer{i}.mlp"), d, cfg.mlp_hidden, d, rng),
            })
            .collect();
        let final_mod = Linear::new(store, &format!("{p}final_mod"), d, 2 * d, true, rng);
        let out = Linear::new(store, &format!("{p}out"), d, cfg.action_dim, true, rng);
        Ok(Self { cfg, sink, state_enc, action_enc, time, layers, final_mod, out })
    }

    /// Predicted velocity for the noisy band, `(T − prefix_len) × A`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        cx: &mut Ctx,
        kv: &[ContextKv],
        state: &[f64],
        noisy: Var,
        tau: f64,
        prefix: &PrefixSpec,
        mask_spec: &MaskSpec,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        mask_spec.validate()?;
        if matches!(mask_spec.kind, MaskKind::Causal) && !prefix.is_empty() {
            return Err(Error::Config(format!(
                "causal mask cannot carry a prefix (prefix_len = {})",
                prefix.len()
            )));
        }
        if kv.len() != cfg.layer_count {
            return Err(Error::Config(format!(
                "context has {} layers, expert has {}",
                kv.len(),
                cfg.layer_count
            )));
        }
        if state.len() != cfg.state_dim {
            return Err(Error::Config(format!("state has {} entries, expert expects {}", state.len(), cfg.state_dim)));
        }
        let (noisy_len, a) = cx.value(noisy).dims2()?;
        if a != cfg.action_dim || prefix.actions.shape()[1] != cfg.action_dim {
            return Err(Error::dim("dit_forward", format!("action width {a}, expected {}", cfg.action_dim)));
        }
        if prefix.len() + noisy_len != cfg.horizon {
            return Err(Error::dim(
                "dit_forward",
                format!("prefix {} + noisy {noisy_len} != horizon {}", prefix.len(), cfg.horizon),
            ));
        }

        let layout = TokenLayout::new(prefix.len(), noisy_len);
        let mask = build_mask(&layout, mask_spec)?;
        let rope = rope_indices(&layout, cfg.rope_offset);
        let attn = AttnBlockConfig::new(cfg.model_dim, cfg.head_count, true)?;

        let sink = cx.param(self.sink);
        let s = cx.constant(Tensor::row(state));
        let s = self.state_enc.forward(cx, s)?;
        let actions = if prefix.is_empty() {
            noisy
        } else {
            let p = cx.constant(prefix.actions.clone());
            cx.tape.concat_rows(&[p, noisy])?
        };
        let actions = self.action_enc.forward(cx, actions)?;
        let x0 = cx.tape.concat_rows(&[sink, s, actions])?;
        let cond = self.time.forward(cx, tau)?;

        let mut h = x0;
        for (layer, ctx_kv) in self.layers.iter().zip(kv) {
            let m = layer.ada_attn.modulation(cx, cond)?;
            let hn = m.modulate(cx, h)?;
            let q = layer.wq.forward(cx, hn)?;
            let src = match cfg.kv_source {
                KvSource::Embeddings => m.modulate(cx, x0)?,
                KvSource::Hidden => hn,
            };
            let k = layer.wk.forward(cx, src)?;
            let v = layer.wv.forward(cx, src)?;
            let o = attention(&mut cx.tape, &attn, q, k, v, Some(ctx_kv), &mask, Some(&rope))?;
            let o = layer.wo.forward(cx, o)?;
            h = m.gated_residual(cx, h, o)?;

            let m = layer.ada_mlp.modulation(cx, cond)?;
            let hn = m.modulate(cx, h)?;
            let u = layer.mlp.forward(cx, hn)?;
            h = m.gated_residual(cx, h, u)?;
        }

        let band = cx.tape.slice_rows(h, layout.first_noisy(), noisy_len)?;
        let c = cx.tape.silu(cond);
        let fm = self.final_mod.forward(cx, c)?;
        let shift = cx.tape.slice_cols(fm, 0, cfg.model_dim)?;
        let scale = cx.tape.slice_cols(fm, cfg.model_dim, cfg.model_dim)?;
        let n = cx.tape.layer_norm(band, LN_EPS)?;
        let scale = cx.tape.add_scalar(scale, 1.0);
        let scale = cx.tape.repeat_rows(scale, noisy_len)?;
        let shift = cx.tape.repeat_rows(shift, noisy_len)?;
        let n = cx.tape.mul(n, scale)?;
        let n = cx.tape.add(n, shift)?;
        self.out.forward(cx, n)
    }

    /// Inference-mode forward over a cached context.
    #[allow(clippy::too_many_arguments)]
    pub fn dit_forward(
        &self,
        store: &ParamStore,
        kv: &KvCacheSet,
        state: &[f64],
        noisy: &Tensor,
        tau: f64,
        prefix: &PrefixSpec,
        mask_spec: &MaskSpec,
    ) -> Result<Tensor> {
        let mut cx = Ctx::inference(store);
        let kv = kv.bind(&mut cx);
        let x = cx.constant(noisy.clone());
        let v = self.forward(&mut cx, &kv, state, x, tau, prefix, mask_spec)?;
        Ok(cx.tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::{Conditioner, ConditionerConfig, ContextInput};
    use crate::diffcore::{GradBuffer, check_gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(kv_source: KvSource, layers: usize) -> (FlowConfig, ConditionerConfig) {
        let flow = FlowConfig {
            horizon: 8,
            action_dim: 2,
            state_dim: 2,
            layer_count: layers,
            model_dim: 8,
            head_count: 2,
            mlp_hidden: 16,
            window: 2,
            kv_source,
            ..FlowConfig::default()
        };
        let cond = ConditionerConfig {
            obs_dim: 3,
            state_dim: 2,
            action_dim: 2,
            horizon: 8,
            vocab: 2,
            model_dim: 8,
            head_count: 2,
            layer_count: layers,
            mlp_hidden: 16,
            candidates: 2,
            score_weight: 0.1,
        };
        (flow, cond)
    }

    struct Setup {
        store: ParamStore,
        cond: Conditioner,
        expert: FlowExpert,
    }

    fn setup(kv_source: KvSource, layers: usize, seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fc, cc) = tiny(kv_source, layers);
        let mut store = ParamStore::new();
        let cond = Conditioner::new(&mut store, cc, &mut rng).unwrap();
        let expert = FlowExpert::new(&mut store, fc, &mut rng).unwrap();
        store.perturb(0.3, &mut rng);
        Setup { store, cond, expert }
    }

    fn ctx_input() -> ContextInput {
        ContextInput::new(vec![0.2, -0.3, 0.5], 1)
    }

    fn run(s: &Setup, obs: &ContextInput, prefix: &PrefixSpec, noisy: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
        let kv = s.cond.encode_context(&s.store, obs)?;
        s.expert.dit_forward(&s.store, &kv, &[0.1, 0.4], noisy, 0.3, prefix, mask)
    }

    #[test]
    fn deterministic() {
        let s = setup(KvSource::Embeddings, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let p = PrefixSpec::none(2);
        let a = run(&s, &ctx_input(), &p, &noisy, &MaskSpec::causal()).unwrap();
        let b = run(&s, &ctx_input(), &p, &noisy, &MaskSpec::causal()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [8, 2]);
    }

    #[test]
    fn observation_changes_output() {
        let s = setup(KvSource::Embeddings, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let p = PrefixSpec::none(2);
        let a = run(&s, &ctx_input(), &p, &noisy, &MaskSpec::causal()).unwrap();
        let b = run(&s, &ContextInput::new(vec![0.9, -0.3, 0.5], 1), &p, &noisy, &MaskSpec::causal()).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn causal_with_prefix_rejected() {
        let s = setup(KvSource::Embeddings, 2, 2);
        let p = PrefixSpec::new(Tensor::zeros(&[2, 2])).unwrap();
        let e = run(&s, &ctx_input(), &p, &Tensor::zeros(&[6, 2]), &MaskSpec::causal());
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn layer_count_mismatch_rejected() {
        let s = setup(KvSource::Embeddings, 2, 3);
        let mut kv = s.cond.encode_context(&s.store, &ctx_input()).unwrap();
        kv.layers.pop();
        let e = s.expert.dit_forward(
            &s.store,
            &kv,
            &[0.0, 0.0],
            &Tensor::zeros(&[8, 2]),
            0.5,
            &PrefixSpec::none(2),
            &MaskSpec::causal(),
        );
        assert!(matches!(e, Err(Error::Config(_))));
    }

    /// Rows of the noisy band whose query cannot see any prefix column.
    fn shielded_rows(prefix_len: usize, window: usize, horizon: usize) -> Vec<usize> {
        (prefix_len..horizon)
            .filter(|&p| p as i64 - window as i64 > prefix_len as i64 - 1)
            .map(|p| p - prefix_len)
            .collect()
    }

    fn prefix_influence(s: &Setup, prefix_len: usize, mask: &MaskSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = Tensor::randn(&[8 - prefix_len, 2], 1.0, &mut rng);
        let p1 = PrefixSpec::new(Tensor::randn(&[prefix_len, 2], 1.0, &mut rng)).unwrap();
        let p2 = PrefixSpec::new(Tensor::randn(&[prefix_len, 2], 1.0, &mut rng)).unwrap();
        let a = run(s, &ctx_input(), &p1, &noisy, mask).unwrap();
        let b = run(s, &ctx_input(), &p2, &noisy, mask).unwrap();
        (0..a.rows())
            .map(|r| a.row_slice(r).iter().zip(b.row_slice(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .collect()
    }

    #[test]
    fn lambda_shields_distant_rows_bitwise() {
        for seed in 0..5 {
            let s = setup(KvSource::Embeddings, 3, seed);
            for prefix_len in 1..=3 {
                let diff = prefix_influence(&s, prefix_len, &MaskSpec::lambda(2), seed + 100);
                let shielded = shielded_rows(prefix_len, 2, 8);
                assert!(!shielded.is_empty());
                for r in shielded {
                    assert_eq!(diff[r], 0.0, "seed {seed} prefix {prefix_len} row {r}");
                }
                assert!(diff[0] > 0.0);
            }
        }
    }

    #[test]
    fn hidden_kv_source_leaks_through_depth() {
        let s = setup(KvSource::Hidden, 3, 4);
        let diff = prefix_influence(&s, 2, &MaskSpec::lambda(2), 7);
        let shielded = shielded_rows(2, 2, 8);
        assert!(shielded.iter().any(|&r| diff[r] > 0.0));
    }

    #[test]
    fn wide_window_baseline_sees_prefix() {
        let s = setup(KvSource::Embeddings, 2, 5);
        let diff = prefix_influence(&s, 3, &MaskSpec::lambda(8), 11);
        assert!(diff.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn frozen_conditioner_gets_no_gradient() {
        let s = setup(KvSource::Embeddings, 2, 6);
        let mask = s.store.mask(|n| n.starts_with(PREFIX));
        let mut cx = Ctx::new(&s.store, Some(&mask));
        let kv = s.cond.encode(&mut cx, &ctx_input()).unwrap();
        let x = cx.constant(Tensor::full(&[8, 2], 0.2));
        let v = s.expert.forward(&mut cx, &kv, &[0.0, 0.1], x, 0.4, &PrefixSpec::none(2), &MaskSpec::causal()).unwrap();
        let sq = cx.tape.square(v).unwrap();
        let loss = cx.tape.sum(sq);
        let g = cx.tape.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&s.store);
        cx.collect_grads(&g, &mut buf);
        let mut flow_grad = 0.0f64;
        for (id, grad) in buf.iter() {
            let m = grad.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if s.store.name(id).starts_with(crate::conditioner::PREFIX) {
                assert_eq!(m, 0.0, "{}", s.store.name(id));
            } else {
                flow_grad = flow_grad.max(m);
            }
        }
        assert!(flow_grad > 0.0);
    }

    #[test]
    fn full_forward_gradient_check() {
        let s = setup(KvSource::Embeddings, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let prefix = PrefixSpec::new(Tensor::randn(&[3, 2], 1.0, &mut rng)).unwrap();
        let obs = ctx_input();
        let weights = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let loss = |cx: &mut Ctx| -> Result<Var> {
            let kv = s.cond.encode(cx, &obs)?;
            let x = cx.constant(noisy.clone());
            let v = s.expert.forward(cx, &kv, &[0.1, 0.4], x, 0.3, &prefix, &MaskSpec::lambda(2))?;
            let w = cx.constant(weights.clone());
            let p = cx.tape.mul(v, w)?;
            let sq = cx.tape.square(p)?;
            Ok(cx.tape.sum(sq))
        };
        let all = vec![true; s.store.len()];
        let mut cx = Ctx::new(&s.store, Some(&all));
        let l = loss(&mut cx).unwrap();
        let g = cx.tape.backward(l).unwrap();
        let mut buf = GradBuffer::new(&s.store);
        cx.collect_grads(&g, &mut buf);
        let ids: Vec<_> = s.store.ids().collect();
        let analytic: Vec<Tensor> = ids
            .iter()
            .map(|&id| buf.get(id).cloned().unwrap_or_else(|| Tensor::zeros(s.store.get(id).shape())))
            .collect();
        let params: Vec<Tensor> = ids.iter().map(|&id| s.store.get(id).clone()).collect();
        let err = check_gradients(
            |vals| {
                let store = s.store.with_values(vals)?;
                let mut cx = Ctx::inference(&store);
                let l = loss(&mut cx)?;
                Ok(cx.value(l).item())
            },
            &analytic,
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
