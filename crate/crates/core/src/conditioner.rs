//! Small transformer standing in for the vision-language backbone.
//!
//! It turns an observation vector and an instruction id into per-layer key /
//! value caches for the action expert, and carries the multi-candidate
//! ("choice") head used in the first pre-training stage.
//!
//! Context tokens only attend to context tokens, so the caches produced by
//! [`Conditioner::encode`] are identical to the context part of a
//! [`Conditioner::choice`] pass.

use rand::Rng;

use crate::diffcore::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{AttnBlockConfig, ContextKv, LN_EPS, Linear, Mask, Mlp, attention};

/// Every conditioner parameter name starts with this prefix.
pub const PREFIX: &str = "cond.";

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionerConfig {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub vocab: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub mlp_hidden: usize,
    /// Number of candidate chunks N.
    pub candidates: usize,
    /// Weight of the score regression term.
    pub score_weight: f64,
}

impl ConditionerConfig {
    pub fn validate(&self) -> Result<()> {
        AttnBlockConfig::new(self.model_dim, self.head_count, false)?;
        if self.candidates < 2 {
            return Err(Error::Config(format!("choice head needs N >= 2, got {}", self.candidates)));
        }
        if self.vocab == 0 || self.obs_dim == 0 || self.layer_count == 0 || self.horizon == 0 {
            return Err(Error::Config("conditioner dimensions must be positive".into()));
        }
        Ok(())
    }

    fn context_len(&self) -> usize {
        1 + self.obs_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextInput {
    pub observation: Vec<f64>,
    pub instruction_id: usize,
    pub timestamp_tick: usize,
}

impl ContextInput {
    pub fn new(observation: Vec<f64>, instruction_id: usize) -> Self {
        Self { observation, instruction_id, timestamp_tick: 0 }
    }
}

/// Per-layer keys and values over the context tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheSet {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl KvCacheSet {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn token_count(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    /// Places the cache on `cx`'s tape as constants.
    pub fn bind(&self, cx: &mut Ctx) -> Vec<ContextKv> {
        self.layers
            .iter()
            .map(|(k, v)| ContextKv { keys: cx.constant(k.clone()), values: cx.constant(v.clone()) })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &KvCacheSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|((k1, v1), (k2, v2))| k1.max_abs_diff(k2).max(v1.max_abs_diff(v2)))
            .fold(0.0, f64::max)
    }
}

/// N candidate chunks and their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceOutput {
    pub candidates: Vec<Tensor>,
    pub scores: Vec<f64>,
}

impl ChoiceOutput {
    /// Index of the lowest score (lowest predicted distance).
    pub fn best(&self) -> usize {
        argmin(&self.scores)
    }
}

/// Tape handles for a choice pass.
#[derive(Clone, Debug)]
pub struct ChoiceVars {
    /// One `T × A` var per candidate.
    pub candidates: Vec<Var>,
    /// `1 × N`.
    pub scores: Var,
}

#[derive(Clone, Debug)]
struct Layer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: ConditionerConfig,
    instruction: ParamId,
    feature_weight: ParamId,
    feature_bias: ParamId,
    layers: Vec<Layer>,
    state_enc: Mlp,
    action_queries: ParamId,
    score_query: ParamId,
    action_head: Linear,
    score_head: Linear,
}

/// Position of every token in a choice pass.
struct ChoiceLayout {
    context: usize,
    horizon: usize,
}

impl ChoiceLayout {
    fn total(&self) -> usize {
        self.context + 1 + self.horizon + 1
    }

    fn mask(&self) -> Mask {
        let c = self.context;
        Mask::from_fn(self.total(), |q, k| if q < c { k < c } else { k <= q })
    }
}

impl Conditioner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ConditionerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let p = PREFIX;
        let instruction = store.add(format!("{p}instruction"), Tensor::randn(&[cfg.vocab, d], 1.0, rng));
        let feature_weight = store.add(format!("{p}feature.weight"), Tensor::randn(&[cfg.obs_dim, d], 1.0, rng));
        let feature_bias = store.add(format!("{p}feature.bias"), Tensor::randn(&[cfg.obs_dim, d], 1.0, rng));
        let layers = (0..cfg.layer_count)
            .map(|i| Layer {
                wq: Linear::new(store, &format!("{p}layer{i}.wq"), d, d, true, rng),
                wk: Linear::new(store, &format!("{p}layer{i}.wk"), d, d, true, rng),
                wv: Linear::new(store, &format!("{p}layer{i}.wv"), d, d, true, rng),
                wo: Linear::new(store, &format!("{p}layer{i}.wo"), d, d, true, rng),
                mlp: Mlp::new(store, &format!("{p}layer{i}.mlp"), d, cfg.mlp_hidden, d, rng),
            })
            .collect();
        let state_enc = Mlp::new(store, &format!("{p}choice.state"), cfg.state_dim, d, d, rng);
        let action_queries =
            store.add(format!("{p}choice.action_queries"), Tensor::randn(&[cfg.horizon, d], 1.0, rng));
        let score_query = store.add(format!("{p}choice.score_query"), Tensor::randn(&[1, d], 1.0, rng));
        let action_head =
            Linear::new(store, &format!("{p}choice.action_head"), d, cfg.candidates * cfg.action_dim, true, rng);
        let score_head = Linear::new(store, &format!("{p}choice.score_head"), d, cfg.candidates, true, rng);
        Ok(Self {
            cfg,
            instruction,
            feature_weight,
            feature_bias,
            layers,
            state_enc,
            action_queries,
            score_query,
            action_head,
            score_head,
        })
    }

    pub fn action_head(&self) -> &Linear {
        &self.action_head
    }

    pub fn score_head(&self) -> &Linear {
        &self.score_head
    }

    fn check(&self, ctx: &ContextInput) -> Result<()> {
        if ctx.instruction_id >= self.cfg.vocab {
            return Err(Error::Vocabulary { id: ctx.instruction_id, vocab: self.cfg.vocab });
        }
        if ctx.observation.len() != self.cfg.obs_dim {
            return Err(Error::Config(format!(
                "observation has {} features, conditioner expects {}",
                ctx.observation.len(),
                self.cfg.obs_dim
            )));
        }
        Ok(())
    }

    /// `[instruction, feature_1 .. feature_D]`, `(1 + D) × d`.
    fn context_tokens(&self, cx: &mut Ctx, ctx: &ContextInput) -> Result<Var> {
        let table = cx.param(self.instruction);
        let instr = cx.tape.slice_rows(table, ctx.instruction_id, 1)?;
        let dim = self.cfg.obs_dim;
        let mut diag = Tensor::zeros(&[dim, dim]);
        for (i, &v) in ctx.observation.iter().enumerate() {
            diag.data_mut()[i * dim + i] = v;
        }
        let diag = cx.constant(diag);
        let w = cx.param(self.feature_weight);
        let b = cx.param(self.feature_bias);
        let scaled = cx.tape.matmul(diag, w)?;
        let feats = cx.tape.add(scaled, b)?;
        cx.tape.concat_rows(&[instr, feats])
    }

    /// Runs the layer stack and returns the final hidden state together with
    /// the keys and values of the first `record` tokens at every layer.
    fn run_layers(&self, cx: &mut Ctx, x: Var, mask: &Mask, record: usize) -> Result<(Var, Vec<ContextKv>)> {
        let attn = AttnBlockConfig::new(self.cfg.model_dim, self.cfg.head_count, false)?;
        let mut h = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = cx.tape.layer_norm(h, LN_EPS)?;
            let q = layer.wq.forward(cx, n)?;
            let k = layer.wk.forward(cx, n)?;
            let v = layer.wv.forward(cx, n)?;
            let rows = cx.value(k).rows();
            let (ck, cv) = if record == rows {
                (k, v)
            } else {
                (cx.tape.slice_rows(k, 0, record)?, cx.tape.slice_rows(v, 0, record)?)
            };
            caches.push(ContextKv { keys: ck, values: cv });
            let a = attention(&mut cx.tape, &attn, q, k, v, None, mask, None)?;
            let o = layer.wo.forward(cx, a)?;
            h = cx.tape.add(h, o)?;
            let n = cx.tape.layer_norm(h, LN_EPS)?;
            let m = layer.mlp.forward(cx, n)?;
            h = cx.tape.add(h, m)?;
        }
        Ok((h, caches))
    }

    /// Per-layer caches as tape vars (differentiable when the conditioner is
    /// trainable in `cx`).
    pub fn encode(&self, cx: &mut Ctx, ctx: &ContextInput) -> Result<Vec<ContextKv>> {
        self.check(ctx)?;
        let x = self.context_tokens(cx, ctx)?;
        let n = self.cfg.context_len();
        let mask = Mask::from_fn(n, |_, _| true);
        Ok(self.run_layers(cx, x, &mask, n)?.1)
    }

    pub fn encode_context(&self, store: &ParamStore, ctx: &ContextInput) -> Result<KvCacheSet> {
        let mut cx = Ctx::inference(store);
        let kv = self.encode(&mut cx, ctx)?;
        Ok(KvCacheSet {
            layers: kv.iter().map(|c| (cx.value(c.keys).clone(), cx.value(c.values).clone())).collect(),
        })
    }

    /// Choice pass: context, state, `T` action queries and one score query.
    pub fn choice(&self, cx: &mut Ctx, ctx: &ContextInput, state: &[f64]) -> Result<ChoiceVars> {
        self.check(ctx)?;
        if state.len() != self.cfg.state_dim {
            return Err(Error::Config(format!(
                "state has {} entries, conditioner expects {}",
                state.len(),
                self.cfg.state_dim
            )));
        }
        let layout = ChoiceLayout { context: self.cfg.context_len(), horizon: self.cfg.horizon };
        let ctx_tokens = self.context_tokens(cx, ctx)?;
        let s = cx.constant(Tensor::row(state));
        let s = self.state_enc.forward(cx, s)?;
        let aq = cx.param(self.action_queries);
        let sq = cx.param(self.score_query);
        let x = cx.tape.concat_rows(&[ctx_tokens, s, aq, sq])?;
        let (h, _) = self.run_layers(cx, x, &layout.mask(), layout.context)?;
        let h = cx.tape.layer_norm(h, LN_EPS)?;

        let t = self.cfg.horizon;
        let a = self.cfg.action_dim;
        let act_rows = cx.tape.slice_rows(h, layout.context + 1, t)?;
        let act = self.action_head.forward(cx, act_rows)?;
        let candidates = (0..self.cfg.candidates)
            .map(|n| cx.tape.slice_cols(act, n * a, a))
            .collect::<Result<Vec<_>>>()?;
        let score_row = cx.tape.slice_rows(h, layout.context + 1 + t, 1)?;
        let scores = self.score_head.forward(cx, score_row)?;
        Ok(ChoiceVars { candidates, scores })
    }

    pub fn choice_forward(&self, store: &ParamStore, ctx: &ContextInput, state: &[f64]) -> Result<ChoiceOutput> {
        let mut cx = Ctx::inference(store);
        let out = self.choice(&mut cx, ctx, state)?;
        Ok(ChoiceOutput {
            candidates: out.candidates.iter().map(|&c| cx.value(c).clone()).collect(),
            scores: cx.value(out.scores).data().to_vec(),
        })
    }
}

/// Mean absolute difference between two equally shaped chunks.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// First index of the minimum.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceLossStats {
    pub winner: usize,
    /// Realized mean-L1 distance of every candidate; also the score targets.
    pub distances: Vec<f64>,
    pub value: f64,
}

/// Winner-takes-all chunk loss plus score regression.
///
/// Only the winning candidate's action path enters the loss; scores regress
/// onto the (detached) distances of all candidates.
pub fn choice_loss(cx: &mut Ctx, out: &ChoiceVars, gt: &Tensor, score_weight: f64) -> Result<(Var, ChoiceLossStats)> {
    let mut distances = Vec::with_capacity(out.candidates.len());
    for &c in &out.candidates {
        let cand = cx.value(c);
        if cand.shape() != gt.shape() {
            return Err(Error::dim("choice_loss", format!("{:?} vs {:?}", cand.shape(), gt.shape())));
        }
        distances.push(mean_l1(cand, gt));
    }
    let winner = argmin(&distances);
    let g = cx.constant(gt.clone());
    let diff = cx.tape.sub(out.candidates[winner], g)?;
    let abs = cx.tape.abs(diff);
    let action_term = cx.tape.mean(abs);

    let n = distances.len();
    let targets = cx.constant(Tensor::new(&[1, n], distances.clone())?);
    let sd = cx.tape.sub(out.scores, targets)?;
    let sq = cx.tape.square(sd)?;
    let score_term = cx.tape.mean(sq);
    let score_term = cx.tape.scale(score_term, score_weight);
    let loss = cx.tape.add(action_term, score_term)?;
    let value = cx.value(loss).item();
    Ok((loss, ChoiceLossStats { winner, distances, value }))
}
