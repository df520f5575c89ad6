use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioner::{PREFIX as COND_PREFIX, choice_loss, mean_l1};
use crate::diffcore::{Ctx, GradBuffer, Tensor};
use crate::error::{Error, Result};
use crate::flow::{PrefixSpec, ReweightConfig, flow_loss, make_noisy, reweight_weights, sample_chunk, sample_tau};
use crate::nn::MaskSpec;
use crate::policy::Policy;
use crate::storage::Dataset;

use super::batch::{Sample, Sampler};
use super::optim::{AdamConfig, OptimizerState, adamw_step, warmup_lr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Multi-candidate head on the conditioner.
    Choice,
    /// Action expert from scratch, conditioner frozen, no prefix.
    Flow,
    /// Prefix-conditioned fine-tuning with random prefix lengths.
    PostAsync,
    /// Fine-tuning without a prefix.
    PostSync,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Choice => "choice",
            Stage::Flow => "flow",
            Stage::PostAsync => "posttrain_async",
            Stage::PostSync => "posttrain_sync",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Choice, Stage::Flow, Stage::PostAsync, Stage::PostSync].into_iter().find(|x| x.name() == s)
    }
}

/// Attention pattern used in prefix-conditioned fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostMask {
    /// Noisy actions see only the last `window` action tokens.
    Lambda,
    /// Noisy actions see every earlier action token, the prefix included.
    CausalPrefix,
}

impl PostMask {
    pub fn name(self) -> &'static str {
        match self {
            PostMask::Lambda => "lambda",
            PostMask::CausalPrefix => "causal_prefix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [PostMask::Lambda, PostMask::CausalPrefix].into_iter().find(|x| x.name() == s)
    }

    pub fn spec(self, window: usize, horizon: usize) -> MaskSpec {
        match self {
            PostMask::Lambda => MaskSpec::lambda(window),
            PostMask::CausalPrefix => MaskSpec::lambda(horizon),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Prefix lengths are drawn from `0..=max_prefix`.
    pub max_prefix: usize,
    pub reweight: ReweightConfig,
    pub reweight_enabled: bool,
    pub post_mask: PostMask,
    /// Keep the conditioner fixed during post-training.
    pub freeze_conditioner: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 3e-4,
            warmup: 100,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            max_prefix: 6,
            reweight: ReweightConfig::default(),
            reweight_enabled: true,
            post_mask: PostMask::Lambda,
            freeze_conditioner: false,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.max_prefix >= horizon {
            return Err(Error::Config(format!("max prefix {} leaves no noisy actions in horizon {horizon}", self.max_prefix)));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Histograms count since the start of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub prefix_hist: Vec<usize>,
    pub winner_hist: Vec<usize>,
}

pub fn write_log_csv<W: Write>(w: &mut W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "step,loss,lr,grad_norm,prefix_hist,winner_hist")?;
    let join = |h: &[usize]| h.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{},{}",
            r.step,
            r.loss,
            r.lr,
            r.grad_norm,
            join(&r.prefix_hist),
            join(&r.winner_hist)
        )?;
    }
    Ok(())
}

/// Which parameters a stage updates. The choice head never moves outside
/// the choice stage.
pub fn trainable_mask(policy: &Policy, stage: Stage, cfg: &TrainConfig) -> Vec<bool> {
    let choice = format!("{COND_PREFIX}choice.");
    policy.store.mask(|n| {
        let cond = n.starts_with(COND_PREFIX);
        match stage {
            Stage::Choice => cond,
            Stage::Flow => !cond,
            Stage::PostAsync | Stage::PostSync => !cond || (!cfg.freeze_conditioner && !n.starts_with(&choice)),
        }
    })
}

fn conditioner_frozen(stage: Stage, cfg: &TrainConfig) -> bool {
    match stage {
        Stage::Choice => false,
        Stage::Flow => true,
        Stage::PostAsync | Stage::PostSync => cfg.freeze_conditioner,
    }
}

/// Uniform prefix length in `0..=max`.
pub fn draw_prefix_len(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(0..=max)
}

/// Per-sample drawn quantities of a flow-matching step.
struct FlowDraw {
    prefix_len: usize,
    tau: f64,
    noise: Tensor,
}

/// Flow-matching loss of one sample, scaled by `weight`, with its gradients
/// added to `grads`. Returns the unscaled loss.
#[allow(clippy::too_many_arguments)]
fn flow_sample_grad(
    policy: &Policy,
    trainable: &[bool],
    frozen: bool,
    sample: &Sample,
    draw: &FlowDraw,
    mask: &MaskSpec,
    weight: f64,
    grads: &mut GradBuffer,
) -> Result<f64> {
    let mut cx = Ctx::new(&policy.store, Some(trainable));
    let kv = if frozen {
        policy.conditioner.encode_context(&policy.store, &sample.context)?.bind(&mut cx)
    } else {
        policy.conditioner.encode(&mut cx, &sample.context)?
    };
    let ns = make_noisy(&sample.chunk, draw.tau, &draw.noise)?;
    let (t, a) = ns.noisy.dims2()?;
    let c = draw.prefix_len;
    let band = cx.constant(Tensor::new(&[t - c, a], ns.noisy.data()[c * a..].to_vec())?);
    let prefix = PrefixSpec::from_chunk(&sample.chunk, c)?;
    let v = policy.expert.forward(&mut cx, &kv, &sample.state, band, draw.tau, &prefix, mask)?;
    let loss = flow_loss(&mut cx, v, &ns, c)?;
    let value = cx.value(loss).item();
    let scaled = cx.tape.scale(loss, weight);
    let g = cx.tape.backward(scaled)?;
    cx.collect_grads(&g, grads);
    Ok(value)
}

/// Runs `cfg.steps` optimizer steps of `stage` on `policy`, calling `on_log`
/// for every log row as it is produced.
pub fn train(
    policy: &mut Policy,
    data: &Dataset,
    stage: Stage,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    let horizon = policy.cfg.flow.horizon;
    cfg.validate(horizon)?;
    if data.obs_dim != policy.cfg.conditioner.obs_dim
        || data.state_dim != policy.cfg.flow.state_dim
        || data.action_dim != policy.cfg.flow.action_dim
    {
        return Err(Error::Config(format!(
            "dataset is {}/{}/{} (obs/state/action), model expects {}/{}/{}",
            data.obs_dim,
            data.state_dim,
            data.action_dim,
            policy.cfg.conditioner.obs_dim,
            policy.cfg.flow.state_dim,
            policy.cfg.flow.action_dim
        )));
    }
    let sampler = Sampler::new(data, horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable = trainable_mask(policy, stage, cfg);
    let frozen = conditioner_frozen(stage, cfg);
    let cond_ids: Vec<_> = policy.store.ids().filter(|&id| policy.store.name(id).starts_with(COND_PREFIX)).collect();
    let mut opt = OptimizerState::new(&policy.store);
    let post_mask = cfg.post_mask.spec(policy.cfg.flow.window, horizon);
    let flow_mask = match stage {
        Stage::PostAsync => post_mask.clone(),
        _ => MaskSpec::causal(),
    };
    let mut prefix_hist = vec![0usize; cfg.max_prefix + 1];
    let mut winner_hist = vec![0usize; policy.cfg.conditioner.candidates];
    let mut rows = Vec::new();
    let inv_batch = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let lr = warmup_lr(cfg.lr, cfg.warmup, step);
        let batch = sampler.batch(cfg.batch, &mut rng);
        let mut grads = GradBuffer::new(&policy.store);
        let mut loss_sum = 0.0;

        if stage == Stage::Choice {
            for s in &batch {
                let mut cx = Ctx::new(&policy.store, Some(&trainable));
                let out = policy.conditioner.choice(&mut cx, &s.context, &s.state)?;
                let (loss, stats) = choice_loss(&mut cx, &out, &s.chunk, policy.cfg.conditioner.score_weight)?;
                winner_hist[stats.winner] += 1;
                loss_sum += stats.value * inv_batch;
                let scaled = cx.tape.scale(loss, inv_batch);
                let g = cx.tape.backward(scaled)?;
                cx.collect_grads(&g, &mut grads);
            }
        } else {
            let a = policy.cfg.flow.action_dim;
            let mut draws = Vec::with_capacity(batch.len());
            for _ in &batch {
                let prefix_len = if stage == Stage::PostAsync { draw_prefix_len(&mut rng, cfg.max_prefix) } else { 0 };
                let tau = sample_tau(&policy.cfg.flow, &mut rng)?;
                let noise = Tensor::randn(&[horizon, a], 1.0, &mut rng);
                prefix_hist[prefix_len] += 1;
                draws.push(FlowDraw { prefix_len, tau, noise });
            }
            let mut errors = vec![None; batch.len()];
            if stage == Stage::PostAsync && cfg.reweight_enabled {
                for (i, (s, d)) in batch.iter().zip(&draws).enumerate() {
                    if d.prefix_len == 0 {
                        continue;
                    }
                    let kv = policy.conditioner.encode_context(&policy.store, &s.context)?;
                    let pred =
                        sample_chunk(&policy.expert, &policy.store, &kv, &s.state, &PrefixSpec::none(a), &post_mask, &mut rng)?;
                    let head = |t: &Tensor| Tensor::new(&[d.prefix_len, a], t.data()[..d.prefix_len * a].to_vec());
                    errors[i] = Some(mean_l1(&head(&pred)?, &head(&s.chunk)?));
                }
            }
            let weights = reweight_weights(&errors, &cfg.reweight);
            for ((s, d), w) in batch.iter().zip(&draws).zip(&weights) {
                let l = flow_sample_grad(policy, &trainable, frozen, s, d, &flow_mask, w * inv_batch, &mut grads)?;
                loss_sum += l * w * inv_batch;
            }
        }

        if frozen {
            for &id in &cond_ids {
                if grads.get(id).is_some_and(|g| g.data().iter().any(|&x| x != 0.0)) {
                    return Err(Error::FreezeViolation { step, param: policy.store.name(id).to_string() });
                }
            }
        }
        let grad_norm = grads.global_norm();
        if !loss_sum.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingFault { step, msg: format!("loss {loss_sum}, gradient norm {grad_norm}") });
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / grad_norm);
        }
        adamw_step(&mut policy.store, &grads, &mut opt, &trainable, lr, &cfg.adam);

        if (cfg.log_every > 0 && step % cfg.log_every == 0) || step + 1 == cfg.steps {
            let row = LogRow {
                step,
                loss: loss_sum,
                lr,
                grad_norm,
                prefix_hist: prefix_hist.clone(),
                winner_hist: winner_hist.clone(),
            };
            on_log(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn pretrain_choice(policy: &mut Policy, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    train(policy, data, Stage::Choice, cfg, |_| {})
}

pub fn pretrain_flow(policy: &mut Policy, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    train(policy, data, Stage::Flow, cfg, |_| {})
}

pub fn posttrain_async(policy: &mut Policy, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    train(policy, data, Stage::PostAsync, cfg, |_| {})
}

pub fn posttrain_sync(policy: &mut Policy, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    train(policy, data, Stage::PostSync, cfg, |_| {})
}
