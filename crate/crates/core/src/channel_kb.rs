//! RL-agent channel knowledge base: rate control on top of the preset map.
//!
//! The agent observes a three-channel state (normalized entropy map, SNR map,
//! previous action), picks a rate-index offset through an actor-critic
//! network, and is trained with clipped-surrogate PPO against a frozen codec
//! checkpoint. Episodes are single-step by default (one decision per image);
//! the discounted machinery is still implemented for multi-step configs.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{awgn, ChannelSpec};
use crate::codec::{CodecError, CodecModel, SymbolFrame};
use crate::entropy::{rate_preset_map, EntropyMap, RateIndexMap};
use crate::image::Image;
use crate::metrics::{cbr, psnr, LinkReport};
use crate::nn::{
    leaky_relu, leaky_relu_backward, Adam, Conv2d, Conv2dCache, GradSet, Linear, ParamSet,
};
use crate::rng::RngStream;
use crate::source_kb::{kb_search, side_info, Captioner, Embedder, KbStore};

/// Rate-index offsets the agent can apply.
pub const ACTION_OFFSETS: [i32; 5] = [-2, -1, 0, 1, 2];

/// Neutral action: offset 0.
pub const NEUTRAL_ACTION: usize = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("length mismatch in rollout arrays: {0}")]
    LengthMismatch(String),
    #[error("policy produced non-finite logits")]
    NonFiniteLogits,
    #[error("update produced a non-finite loss; aborting this update")]
    NonFiniteLoss,
    #[error("rollout shorter than one minibatch: {len} < {minibatch}")]
    BufferTooSmall { len: usize, minibatch: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Kb(#[from] crate::source_kb::KbError),
    #[error("agent checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("agent checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Action granularity: one global offset, or one offset per 4x4 region block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Global,
    Region4x4,
}

impl ActionMode {
    pub fn heads(&self) -> usize {
        match self {
            ActionMode::Global => 1,
            ActionMode::Region4x4 => 16,
        }
    }
}

/// Chosen offsets, one index into [`ACTION_OFFSETS`] per head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub indices: Vec<usize>,
}

impl Action {
    pub fn global(index: usize) -> Self {
        assert!(index < ACTION_OFFSETS.len());
        Self {
            indices: vec![index],
        }
    }

    pub fn neutral(mode: ActionMode) -> Self {
        Self {
            indices: vec![NEUTRAL_ACTION; mode.heads()],
        }
    }

    /// Mean action index, used for the previous-action state channel and for
    /// bandwidth-tendency diagnostics.
    pub fn mean_index(&self) -> f64 {
        self.indices.iter().sum::<usize>() as f64 / self.indices.len() as f64
    }

    pub fn mean_offset(&self) -> f64 {
        self.indices
            .iter()
            .map(|&i| ACTION_OFFSETS[i] as f64)
            .sum::<f64>()
            / self.indices.len() as f64
    }
}

/// PPO hyper-parameters and reward weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Reward weights: alpha scales reconstruction quality, beta bandwidth.
    pub alpha: f64,
    pub beta: f64,
    pub steps_per_update: usize,
    /// Normalizer for the entropy state channel, in bits per token.
    pub e_norm: f64,
    /// Normalizer for the SNR state channel, in dB.
    pub snr_norm: f64,
    pub action_mode: ActionMode,
    /// Trunk width of the policy network.
    pub trunk_channels: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch: 32,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            alpha: 1.0,
            beta: 1.0,
            steps_per_update: 128,
            e_norm: 32.0,
            snr_norm: 20.0,
            action_mode: ActionMode::Global,
            trunk_channels: 8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.clip_epsilon && self.clip_epsilon < 1.0) {
            return Err(format!("clip_epsilon must be in (0,1), got {}", self.clip_epsilon));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0,1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda must be in [0,1], got {}", self.gae_lambda));
        }
        if self.minibatch == 0 || self.steps_per_update == 0 {
            return Err("minibatch and steps_per_update must be positive".into());
        }
        Ok(())
    }
}

/// Normalized 3-channel observation `[3, grid_h, grid_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlState {
    pub tensor: Array3<f64>,
}

/// Builds the state: channel 0 entropy/e_norm, channel 1 snr/snr_norm,
/// channel 2 previous action index over (|A|-1), broadcast per head region.
pub fn build_state(
    e: &EntropyMap,
    spec: &ChannelSpec,
    prev: &Action,
    cfg: &PpoConfig,
) -> RlState {
    let (gh, gw) = e.grid();
    let mut tensor = Array3::zeros((3, gh, gw));
    let denom = (ACTION_OFFSETS.len() - 1) as f64;
    for i in 0..gh {
        for j in 0..gw {
            tensor[[0, i, j]] = e.bits[[i, j]] / cfg.e_norm;
            tensor[[1, i, j]] = spec.snr_db / cfg.snr_norm;
            let head = region_head_for(prev.indices.len(), i, j, gh, gw);
            tensor[[2, i, j]] = prev.indices[head] as f64 / denom;
        }
    }
    RlState { tensor }
}

fn region_head_for(heads: usize, i: usize, j: usize, gh: usize, gw: usize) -> usize {
    if heads == 1 {
        return 0;
    }
    // 4x4 block partition with ceiling-sized cells.
    let cell_h = gh.div_ceil(4);
    let cell_w = gw.div_ceil(4);
    let bi = (i / cell_h).min(3);
    let bj = (j / cell_w).min(3);
    bi * 4 + bj
}

/// Applies per-head offsets to the preset map. Indices clamp to the rate-set
/// range and dropped tokens (index 0) stay dropped.
pub fn apply_action(rm: &RateIndexMap, action: &Action, n_rates: usize) -> RateIndexMap {
    let (gh, gw) = rm.grid();
    let mut out = rm.idx.clone();
    for i in 0..gh {
        for j in 0..gw {
            let idx = rm.idx[[i, j]];
            if idx == 0 {
                continue;
            }
            let head = region_head_for(action.indices.len(), i, j, gh, gw);
            let offset = ACTION_OFFSETS[action.indices[head]];
            let shifted = (idx as i64 + offset as i64).clamp(0, n_rates as i64 - 1);
            out[[i, j]] = shifted as usize;
        }
    }
    RateIndexMap { idx: out }
}

/// Weighted reward: `alpha * psnr_norm - beta * cbr_norm` with
/// `psnr_norm = clamp((psnr-20)/20, 0, 1)` and `cbr_norm = cbr/0.06`.
pub fn reward(psnr_db: f64, cbr_value: f64, cfg: &PpoConfig) -> f64 {
    let psnr_norm = ((psnr_db - 20.0) / 20.0).clamp(0.0, 1.0);
    let cbr_norm = cbr_value / 0.06;
    cfg.alpha * psnr_norm - cfg.beta * cbr_norm
}

/// Generalized advantage estimation.
///
/// Returns raw (unnormalized) advantages and returns; batch normalization is
/// applied later, inside the update.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let n = rewards.len();
    if values.len() != n || terminals.len() != n {
        return Err(AgentError::LengthMismatch(format!(
            "rewards {n}, values {}, terminals {}",
            values.len(),
            terminals.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_terminal = if terminals[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap_value
        };
        let delta = rewards[t] + gamma * next_value * not_terminal - values[t];
        acc = delta + gamma * lambda * not_terminal * acc;
        advantages[t] = acc;
    }
    let returns: Vec<f64> = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Zero-mean unit-variance normalization with an epsilon guard.
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = (var + 1e-8).sqrt();
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Clipped-surrogate contribution for one sample, the PPO core.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

// ---------------------------------------------------------------------------
// Policy network
// ---------------------------------------------------------------------------

/// Shared convolutional trunk with global mean pooling, categorical actor
/// head(s) and a scalar critic head.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub params: ParamSet,
    conv1: Conv2d,
    conv2: Conv2d,
    actor: Linear,
    critic: Linear,
    pub config: PpoConfig,
}

#[derive(Debug, Clone)]
struct PolicyCache {
    pre1: Array3<f64>,
    pre2: Array3<f64>,
    pooled: Array2<f64>,
    c1: Conv2dCache,
    c2: Conv2dCache,
}

/// Forward outputs for one state.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    /// Per-head log-probabilities over the offset set, `[heads, |A|]`.
    pub log_probs: Array2<f64>,
    pub value: f64,
}

impl PolicyNet {
    pub fn new(config: PpoConfig, seed: u64) -> Self {
        let mut rng = crate::rng::rng_derive(seed, &[u64::from_le_bytes(*b"agentini")]).rng();
        let mut ps = ParamSet::new();
        let c = config.trunk_channels;
        let conv1 = Conv2d::new(&mut ps, "trunk.c1", 3, c, 3, 1, 1, &mut rng);
        let conv2 = Conv2d::new(&mut ps, "trunk.c2", c, c, 3, 1, 1, &mut rng);
        let heads = config.action_mode.heads();
        // Zero-initialized heads: uniform policy and zero value at start.
        let actor = Linear::new(
            &mut ps,
            "actor",
            c,
            heads * ACTION_OFFSETS.len(),
            true,
            &mut rng,
        );
        let critic = Linear::new(&mut ps, "critic", c, 1, true, &mut rng);
        Self {
            params: ps,
            conv1,
            conv2,
            actor,
            critic,
            config,
        }
    }

    fn forward_with(&self, ps: &ParamSet, state: &RlState) -> (PolicyEval, PolicyCache) {
        let x = &state.tensor;
        let (pre1, c1) = self.conv1.forward(ps, x);
        let a1 = leaky_relu(&pre1);
        let (pre2, c2) = self.conv2.forward(ps, &a1);
        let a2 = leaky_relu(&pre2);
        // Global mean pool over the grid.
        let (c, h, w) = a2.dim();
        let mut pooled = Array2::zeros((1, c));
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += a2[[ci, i, j]];
                }
            }
            pooled[[0, ci]] = acc / (h * w) as f64;
        }
        let logits_flat = self.actor.forward(ps, &pooled);
        let value = self.critic.forward(ps, &pooled)[[0, 0]];
        let heads = self.config.action_mode.heads();
        let k = ACTION_OFFSETS.len();
        let mut log_probs = Array2::zeros((heads, k));
        for hd in 0..heads {
            let row: Vec<f64> = (0..k).map(|a| logits_flat[[0, hd * k + a]]).collect();
            let ls = log_softmax(&row);
            for a in 0..k {
                log_probs[[hd, a]] = ls[a];
            }
        }
        (
            PolicyEval { log_probs, value },
            PolicyCache {
                pre1,
                pre2,
                pooled,
                c1,
                c2,
            },
        )
    }

    pub fn evaluate(&self, state: &RlState) -> Result<PolicyEval, AgentError> {
        let (eval, _) = self.forward_with(&self.params, state);
        if eval.log_probs.iter().any(|v| !v.is_finite()) || !eval.value.is_finite() {
            return Err(AgentError::NonFiniteLogits);
        }
        Ok(eval)
    }

    /// Samples an action in training mode or takes the argmax per head in
    /// deterministic evaluation mode.
    pub fn policy_step(
        &self,
        state: &RlState,
        rng: Option<&mut rand_chacha::ChaCha12Rng>,
    ) -> Result<(Action, f64, f64), AgentError> {
        let eval = self.evaluate(state)?;
        let heads = self.config.action_mode.heads();
        let k = ACTION_OFFSETS.len();
        let mut indices = Vec::with_capacity(heads);
        let mut log_prob = 0.0;
        match rng {
            Some(rng) => {
                for hd in 0..heads {
                    let u: f64 = rng.random_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut chosen = k - 1;
                    for a in 0..k {
                        acc += eval.log_probs[[hd, a]].exp();
                        if u < acc {
                            chosen = a;
                            break;
                        }
                    }
                    indices.push(chosen);
                    log_prob += eval.log_probs[[hd, chosen]];
                }
            }
            None => {
                for hd in 0..heads {
                    let mut best = 0usize;
                    let mut best_lp = f64::NEG_INFINITY;
                    for a in 0..k {
                        if eval.log_probs[[hd, a]] > best_lp {
                            best_lp = eval.log_probs[[hd, a]];
                            best = a;
                        }
                    }
                    indices.push(best);
                    log_prob += eval.log_probs[[hd, best]];
                }
            }
        }
        Ok((Action { indices }, log_prob, eval.value))
    }

    /// Log-probability of a specific action under the current policy.
    pub fn log_prob_of(&self, state: &RlState, action: &Action) -> Result<f64, AgentError> {
        let eval = self.evaluate(state)?;
        Ok(action
            .indices
            .iter()
            .enumerate()
            .map(|(hd, &a)| eval.log_probs[[hd, a]])
            .sum())
    }

    /// PPO loss over a minibatch with gradients into `grads`.
    ///
    /// total = -mean(clip objective) + value_coef * mean((v - ret)^2)
    ///         - entropy_coef * mean(policy entropy)
    fn minibatch_loss(
        &self,
        ps: &ParamSet,
        batch: &[&Transition],
        advantages: &[f64],
        epsilon: f64,
        grads: Option<&mut GradSet>,
    ) -> Result<UpdateStats, AgentError> {
        let m = batch.len() as f64;
        let k = ACTION_OFFSETS.len();
        let mut stats = UpdateStats::default();
        let mut grad_sink = grads;
        for (sample, &adv) in batch.iter().zip(advantages) {
            let (eval, cache) = self.forward_with(ps, &sample.state);
            let new_log_prob: f64 = sample
                .action
                .indices
                .iter()
                .enumerate()
                .map(|(hd, &a)| eval.log_probs[[hd, a]])
                .sum();
            let ratio = (new_log_prob - sample.log_prob).exp();
            let surrogate = clipped_objective(ratio, adv, epsilon);
            let entropy: f64 = -(0..eval.log_probs.dim().0)
                .map(|hd| {
                    (0..k)
                        .map(|a| {
                            let lp = eval.log_probs[[hd, a]];
                            lp.exp() * lp
                        })
                        .sum::<f64>()
                })
                .sum::<f64>();
            let value_err = eval.value - sample.ret;
            stats.policy_loss += -surrogate / m;
            stats.value_loss += value_err * value_err / m;
            stats.entropy += entropy / m;
            let clipped_active = (ratio - 1.0).abs() > epsilon;
            if clipped_active {
                stats.clip_fraction += 1.0 / m;
            }

            if let Some(grads) = grad_sink.as_deref_mut() {
                // d total / d new_log_prob: the unclipped branch is active when
                // ratio*adv <= clipped*adv; inside the clip band both agree.
                let unclipped_active = ratio * adv <= ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
                let d_surr_d_lp = if unclipped_active { ratio * adv } else { 0.0 };
                // Gradient of -surrogate/m w.r.t. chosen-action log-prob.
                let g_chosen_lp = -d_surr_d_lp / m;

                // Build gradient over log_probs [heads, k]:
                // chosen entries get g_chosen_lp; entropy adds
                // -entropy_coef/m * d(entropy)/d(log p).
                let mut g_log_probs: Array2<f64> = Array2::zeros(eval.log_probs.raw_dim());
                for (hd, &a) in sample.action.indices.iter().enumerate() {
                    g_log_probs[[hd, a]] += g_chosen_lp;
                }
                // entropy = -sum p*lp; d entropy / d lp_i = -(p_i * lp_i + p_i)
                // falls through log-softmax below via chain rule on lp.
                let ec = self.config.entropy_coef;
                for hd in 0..eval.log_probs.dim().0 {
                    for a in 0..k {
                        let lp = eval.log_probs[[hd, a]];
                        let p = lp.exp();
                        g_log_probs[[hd, a]] += -ec / m * (-(p * lp + p));
                    }
                }

                // Backprop through log-softmax to logits: for row gradient g,
                // d/d logit_j = g_j - softmax_j * sum(g).
                let heads = eval.log_probs.dim().0;
                let mut g_logits = Array2::zeros((1, heads * k));
                for hd in 0..heads {
                    let gsum: f64 = (0..k).map(|a| g_log_probs[[hd, a]]).sum();
                    for a in 0..k {
                        let p = eval.log_probs[[hd, a]].exp();
                        g_logits[[0, hd * k + a]] = g_log_probs[[hd, a]] - p * gsum;
                    }
                }

                // Value head: d/dv of value_coef*(v-ret)^2/m.
                let g_value = self.config.value_coef * 2.0 * value_err / m;
                self.backward_from_heads(ps, &cache, &g_logits, g_value, grads);
            }
        }
        let total = stats.policy_loss
            + self.config.value_coef * stats.value_loss
            - self.config.entropy_coef * stats.entropy;
        if !total.is_finite() {
            return Err(AgentError::NonFiniteLoss);
        }
        stats.total_loss = total;
        Ok(stats)
    }

    fn backward_from_heads(
        &self,
        ps: &ParamSet,
        cache: &PolicyCache,
        g_logits: &Array2<f64>,
        g_value: f64,
        grads: &mut GradSet,
    ) {
        let g_pooled_actor = self.actor.backward(ps, &cache.pooled, g_logits, grads);
        let g_value_arr = Array2::from_elem((1, 1), g_value);
        let g_pooled_critic = self.critic.backward(ps, &cache.pooled, &g_value_arr, grads);
        let g_pooled = &g_pooled_actor + &g_pooled_critic;

        // Un-pool: distribute mean gradient over the grid.
        let (c, h, w) = cache.pre2.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut g_a2 = Array3::zeros((c, h, w));
        for ci in 0..c {
            let g = g_pooled[[0, ci]] * scale;
            for i in 0..h {
                for j in 0..w {
                    g_a2[[ci, i, j]] = g;
                }
            }
        }
        let g_pre2 = leaky_relu_backward(&cache.pre2, &g_a2);
        let g_a1 = self.conv2.backward(ps, &cache.c2, &g_pre2, grads);
        let g_pre1 = leaky_relu_backward(&cache.pre1, &g_a1);
        let _ = self.conv1.backward(ps, &cache.c1, &g_pre1, grads);
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_sum).collect()
}

// ---------------------------------------------------------------------------
// Rollouts and updates
// ---------------------------------------------------------------------------

/// One experience tuple (S, a, p, v, r, terminal).
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: RlState,
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub terminal: bool,
    /// Filled by [`prepare_rollout`].
    pub advantage: f64,
    pub ret: f64,
}

/// Experience buffer collected under the behaviour policy.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
}

impl Rollout {
    pub fn push(
        &mut self,
        state: RlState,
        action: Action,
        log_prob: f64,
        value: f64,
        reward: f64,
        terminal: bool,
    ) {
        debug_assert!(log_prob <= 1e-9, "log-probabilities must be <= 0");
        self.transitions.push(Transition {
            state,
            action,
            log_prob,
            value,
            reward,
            terminal,
            advantage: 0.0,
            ret: 0.0,
        });
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Computes GAE advantages and returns over the buffer and normalizes the
/// advantages to zero mean, unit variance.
pub fn prepare_rollout(
    rollout: &mut Rollout,
    cfg: &PpoConfig,
    bootstrap_value: f64,
) -> Result<(), AgentError> {
    let rewards: Vec<f64> = rollout.transitions.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = rollout.transitions.iter().map(|t| t.value).collect();
    let terminals: Vec<bool> = rollout.transitions.iter().map(|t| t.terminal).collect();
    let (mut advantages, returns) = gae(
        &rewards,
        &values,
        &terminals,
        cfg.gamma,
        cfg.gae_lambda,
        bootstrap_value,
    )?;
    normalize_advantages(&mut advantages);
    for ((t, a), r) in rollout
        .transitions
        .iter_mut()
        .zip(&advantages)
        .zip(&returns)
    {
        t.advantage = *a;
        t.ret = *r;
    }
    Ok(())
}

/// Statistics from one PPO update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub total_loss: f64,
}

/// Runs `epochs` passes of minibatched clipped-surrogate updates.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    rollout: &Rollout,
    rng: &RngStream,
) -> Result<UpdateStats, AgentError> {
    let cfg = net.config.clone();
    let n = rollout.len();
    if n < cfg.minibatch {
        return Err(AgentError::BufferTooSmall {
            len: n,
            minibatch: cfg.minibatch,
        });
    }
    let mut last = UpdateStats::default();
    let mut generator = rng.rng();
    for _epoch in 0..cfg.epochs {
        // Deterministic seeded shuffle.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = generator.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.minibatch) {
            if chunk.len() < cfg.minibatch {
                continue;
            }
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &rollout.transitions[i]).collect();
            let advantages: Vec<f64> = batch.iter().map(|t| t.advantage).collect();
            let mut grads = net.params.zeros_like();
            let stats = net.minibatch_loss(
                &net.params,
                &batch,
                &advantages,
                cfg.clip_epsilon,
                Some(&mut grads),
            )?;
            opt.step(&mut net.params, &grads);
            last = stats;
        }
    }
    Ok(last)
}

// ---------------------------------------------------------------------------
// Environment: one image transmission per episode
// ---------------------------------------------------------------------------

/// Everything the agent's environment needs for one episode.
pub struct Environment<'a> {
    pub codec: &'a CodecModel,
    pub kb: &'a KbStore,
    pub captioner: &'a dyn Captioner,
    pub embedder: &'a dyn Embedder,
    pub prompt: &'a str,
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub state: RlState,
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub report: LinkReport,
    pub frame: SymbolFrame,
}

/// One environment step: build state from the preset map, pick an action,
/// apply it, transmit, score reward from (PSNR, CBR). Terminal by design.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &Environment,
    net: &PolicyNet,
    img: &Image,
    spec: &ChannelSpec,
    prev: &Action,
    rng: &RngStream,
    deterministic: bool,
    scheme: &str,
) -> Result<EpisodeOutcome, AgentError> {
    let cfg = &net.config;
    let f = env.codec.analysis(img)?;
    let (_, emap) = env.codec.entropy_map_for(&f)?;
    let rm0 = rate_preset_map(&emap, &env.codec.rate_set, env.codec.eta)
        .map_err(CodecError::Entropy)?;
    let state = build_state(&emap, spec, prev, cfg);

    let mut sample_rng = rng.child(0).rng();
    let (action, log_prob, value) = if deterministic {
        net.policy_step(&state, None)?
    } else {
        net.policy_step(&state, Some(&mut sample_rng))?
    };
    let rm = apply_action(&rm0, &action, env.codec.rate_set.len());

    // Source-KB conditioning and its side information.
    let caption = env.captioner.caption(img, env.prompt)?;
    let query = env.embedder.embed(&caption.text)?;
    let retrieval = kb_search(&query.vector, env.kb)?;
    let (side_bits, _) = side_info(retrieval.index, env.kb.len());
    let cond = Array1::from(
        retrieval
            .vector
            .0
            .iter()
            .map(|&v| v as f64)
            .collect::<Vec<f64>>(),
    );

    let frame = env.codec.jscc_encode(&f, &rm, &cond, side_bits)?;
    let received = SymbolFrame {
        payload: awgn(&frame.payload, spec, &rng.child(1)),
        ..frame.clone()
    };
    let decoded = env.codec.jscc_decode(&received, spec, &cond)?;
    let recon = env.codec.synthesis(&decoded);
    let psnr_db = psnr(img, &recon).expect("same shapes by construction");
    let cbr_value = cbr(
        frame.payload.len(),
        frame.total_side_symbols(&env.codec.rate_set),
        img,
    );
    let r = reward(psnr_db, cbr_value, cfg);

    Ok(EpisodeOutcome {
        state,
        action,
        log_prob,
        value,
        reward: r,
        report: LinkReport {
            scheme: scheme.to_string(),
            snr_db: spec.snr_db,
            cbr: cbr_value,
            psnr_db,
            n_images: 1,
            seed: rng.root_seed(),
        },
        frame,
    })
}

// ---------------------------------------------------------------------------
// Agent checkpoints
// ---------------------------------------------------------------------------

/// Policy checkpoint bound to the codec checkpoint it was trained against.
pub struct AgentCheckpoint {
    pub net: PolicyNet,
    pub codec_hash: String,
}

const AGENT_MAGIC: &[u8; 4] = b"AKBA";

#[derive(Serialize, Deserialize)]
struct AgentHeader {
    config: PpoConfig,
    codec_hash: String,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn sha256_file(path: &std::path::Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl PolicyNet {
    pub fn save(&self, path: &std::path::Path, codec_hash: &str) -> Result<(), AgentError> {
        use std::io::Write;
        let header = AgentHeader {
            config: self.config.clone(),
            codec_hash: codec_hash.to_string(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| AgentError::CheckpointFormat(e.to_string()))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.iter() {
            for &v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint; `expected_codec_hash` mismatches produce a warning
    /// string in the result rather than a failure.
    pub fn load(
        path: &std::path::Path,
        expected_codec_hash: Option<&str>,
    ) -> Result<(AgentCheckpoint, Option<String>), AgentError> {
        use std::io::Read;
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != AGENT_MAGIC {
            return Err(AgentError::CheckpointFormat(format!(
                "bad magic {magic:?}"
            )));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let len = u32::from_le_bytes(word) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: AgentHeader = serde_json::from_slice(&json)
            .map_err(|e| AgentError::CheckpointFormat(e.to_string()))?;
        let mut net = PolicyNet::new(header.config, 0);
        for (name, shape) in &header.tensors {
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)
                .map_err(|e| AgentError::CheckpointFormat(format!("truncated {name}: {e}")))?;
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = ndarray::ArrayD::from_shape_vec(shape.clone(), values)
                .map_err(|e| AgentError::CheckpointFormat(e.to_string()))?;
            net.params
                .load_named(name, tensor)
                .map_err(AgentError::CheckpointFormat)?;
        }
        let warning = match expected_codec_hash {
            Some(expected) if expected != header.codec_hash => Some(format!(
                "agent checkpoint was trained against codec {} but {} is loaded",
                &header.codec_hash[..12.min(header.codec_hash.len())],
                &expected[..12.min(expected.len())]
            )),
            _ => None,
        };
        Ok((
            AgentCheckpoint {
                net,
                codec_hash: header.codec_hash,
            },
            warning,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;

    fn uniform_state(gh: usize, gw: usize, e_bits: f64, snr_db: f64, prev_idx: usize) -> RlState {
        let cfg = PpoConfig::default();
        let e = EntropyMap {
            bits: Array2::from_elem((gh, gw), e_bits),
        };
        build_state(
            &e,
            &ChannelSpec::awgn(snr_db),
            &Action::global(prev_idx),
            &cfg,
        )
    }

    #[test]
    fn build_state_normalization_examples() {
        let s = uniform_state(4, 4, 16.0, 10.0, 2);
        assert!(s.tensor.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.5));
        assert!(s.tensor.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.5));
        assert!(s.tensor.index_axis(ndarray::Axis(0), 2).iter().all(|&v| v == 0.5));

        let zero_snr = uniform_state(2, 2, 16.0, 0.0, 2);
        assert!(zero_snr
            .tensor
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .all(|&v| v == 0.0));

        // Episode start: neutral previous action maps to 0.5.
        let neutral = Action::neutral(ActionMode::Global);
        assert_eq!(neutral.indices, vec![2]);
    }

    #[test]
    fn apply_action_examples() {
        let rm = RateIndexMap::uniform(2, 2, 3);
        let up = apply_action(&rm, &Action::global(3), 8); // offset +1
        assert!(up.idx.iter().all(|&i| i == 4));

        let rm1 = RateIndexMap::uniform(2, 2, 1);
        let down = apply_action(&rm1, &Action::global(0), 8); // offset -2 clamps
        assert!(down.idx.iter().all(|&i| i == 0));

        let rm0 = RateIndexMap::uniform(2, 2, 0);
        let str_up = apply_action(&rm0, &Action::global(4), 8); // dropped stays dropped
        assert!(str_up.idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn apply_action_never_escapes_range_or_revives() {
        use rand::Rng;
        let mut rng = rng_derive(5, &[3]).rng();
        for _ in 0..200 {
            let idx = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..8usize));
            let rm = RateIndexMap { idx };
            let a = Action::global(rng.random_range(0..5));
            let out = apply_action(&rm, &a, 8);
            for (before, after) in rm.idx.iter().zip(out.idx.iter()) {
                assert!(*after < 8);
                if *before == 0 {
                    assert_eq!(*after, 0);
                }
            }
        }
    }

    #[test]
    fn reward_examples() {
        let mut cfg = PpoConfig::default();
        cfg.alpha = 1.0;
        cfg.beta = 0.0;
        assert!((reward(30.0, 0.05, &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(reward(15.0, 0.05, &cfg), 0.0);

        cfg.beta = 1.0;
        // psnr_norm 0.5 and cbr 0.018 -> 0.5 - 0.3.
        let r = reward(30.0, 0.018, &cfg);
        assert!((r - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gae_examples() {
        // Single-step terminal episode: A = r - v.
        let (adv, ret) = gae(&[1.0], &[0.3], &[true], 0.99, 0.95, 0.7).unwrap();
        assert!((adv[0] - 0.7).abs() < 1e-12);
        assert!((ret[0] - 1.0).abs() < 1e-12);

        // gamma = 0: A_t = r_t - v_t.
        let (adv, _) = gae(
            &[1.0, 2.0, 3.0],
            &[0.5, 0.5, 0.5],
            &[false, false, true],
            0.0,
            0.95,
            0.0,
        )
        .unwrap();
        assert!((adv[0] - 0.5).abs() < 1e-12);
        assert!((adv[1] - 1.5).abs() < 1e-12);
        assert!((adv[2] - 2.5).abs() < 1e-12);

        // gamma = lambda = 1, no terminals: A_t = sum_{k>=t} r_k + v_boot - v_t.
        let rewards = [1.0, 1.0, 1.0];
        let values = [0.2, 0.4, 0.6];
        let boot = 0.9;
        let (adv, _) = gae(&rewards, &values, &[false, false, false], 1.0, 1.0, boot).unwrap();
        assert!((adv[0] - (3.0 + boot - 0.2)).abs() < 1e-12);
        assert!((adv[1] - (2.0 + boot - 0.4)).abs() < 1e-12);
        assert!((adv[2] - (1.0 + boot - 0.6)).abs() < 1e-12);

        assert!(gae(&[1.0], &[1.0, 2.0], &[true], 0.9, 0.9, 0.0).is_err());
    }

    #[test]
    fn advantage_normalization_contract() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0];
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clip_arithmetic_examples() {
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_objective(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-12);
        assert!((clipped_objective(1.0, 0.7, 0.2) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_at_zero_init() {
        let net = PolicyNet::new(PpoConfig::default(), 3);
        let s = uniform_state(4, 4, 10.0, 10.0, 2);
        let eval = net.evaluate(&s).unwrap();
        let probs: Vec<f64> = (0..5).map(|a| eval.log_probs[[0, a]].exp()).collect();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for p in probs {
            assert!((p - 0.2).abs() < 1e-9, "p = {p}");
        }
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn deterministic_mode_is_stable() {
        let net = PolicyNet::new(PpoConfig::default(), 4);
        let s = uniform_state(4, 4, 12.0, 6.0, 1);
        let (a1, lp1, v1) = net.policy_step(&s, None).unwrap();
        let (a2, lp2, v2) = net.policy_step(&s, None).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(lp1, lp2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn behaviour_log_probs_recompute_exactly_before_update() {
        let net = PolicyNet::new(PpoConfig::default(), 5);
        let mut rollout = Rollout::default();
        let mut rng = rng_derive(6, &[0]).rng();
        for i in 0..16 {
            let s = uniform_state(4, 4, 5.0 + i as f64, (i % 15) as f64, i % 5);
            let (a, lp, v) = net.policy_step(&s, Some(&mut rng)).unwrap();
            rollout.push(s, a, lp, v, 0.1, true);
        }
        for t in &rollout.transitions {
            let recomputed = net.log_prob_of(&t.state, &t.action).unwrap();
            assert!((recomputed - t.log_prob).abs() < 1e-6);
        }
    }

    #[test]
    fn clipped_objective_equals_unclipped_at_huge_epsilon() {
        let ratios = [0.01, 0.5, 1.0, 2.5, 40.0];
        let advs = [-2.0, -0.1, 0.0, 0.3, 5.0];
        for &r in &ratios {
            for &a in &advs {
                let clipped = clipped_objective(r, a, 1e6);
                assert_eq!(clipped, r * a);
            }
        }
    }

    // PPO loss gradient on a frozen batch vs central finite differences
    // (tiny trunk with 2 conv channels, step 1e-5, rel error < 1e-4).
    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let cfg = PpoConfig {
            trunk_channels: 2,
            minibatch: 8,
            ..PpoConfig::default()
        };
        let mut net = PolicyNet::new(cfg, 8);
        // Move heads off zero-init so value/policy gradients are non-trivial.
        let flat = net.params.flat_len();
        for idx in 0..flat {
            let v = net.params.get_flat(idx);
            net.params
                .set_flat(idx, v + 0.05 * (((idx * 7) % 11) as f64 - 5.0) / 5.0);
        }

        let mut rng = rng_derive(9, &[1]).rng();
        let mut rollout = Rollout::default();
        for i in 0..8 {
            let s = uniform_state(4, 4, 4.0 + 2.0 * i as f64, (2 * i) as f64, i % 5);
            let (a, lp, v) = net.policy_step(&s, Some(&mut rng)).unwrap();
            rollout.push(s, a, lp, v, (i as f64 - 3.5) * 0.2, true);
        }
        prepare_rollout(&mut rollout, &net.config, 0.0).unwrap();

        let batch: Vec<&Transition> = rollout.transitions.iter().collect();
        let advantages: Vec<f64> = batch.iter().map(|t| t.advantage).collect();
        let mut grads = net.params.zeros_like();
        net.minibatch_loss(
            &net.params,
            &batch,
            &advantages,
            net.config.clip_epsilon,
            Some(&mut grads),
        )
        .unwrap();

        let mut ps = net.params.clone();
        let net_ref = &net;
        let batch_ref = &batch;
        let adv_ref = &advantages;
        let loss_fn = |ps: &ParamSet| {
            net_ref
                .minibatch_loss(ps, batch_ref, adv_ref, net_ref.config.clip_epsilon, None)
                .unwrap()
                .total_loss
        };
        let worst = crate::nn::finite_difference_check(&mut ps, &grads, 1e-5, loss_fn);
        assert!(worst < 1e-4, "ppo fd error {worst}");
    }

    #[test]
    fn ppo_update_runs_and_learns_on_bandit() {
        // Contextual bandit: action 0 always gets the best reward.
        let cfg = PpoConfig {
            trunk_channels: 4,
            minibatch: 16,
            steps_per_update: 64,
            epochs: 4,
            learning_rate: 0.01,
            entropy_coef: 0.001,
            ..PpoConfig::default()
        };
        let mut net = PolicyNet::new(cfg, 10);
        let mut opt = Adam::new(&net.params, net.config.learning_rate);
        let stream = rng_derive(11, &[0]);
        let mut sample_rng = stream.child(100).rng();
        for round in 0..30 {
            let mut rollout = Rollout::default();
            for i in 0..64 {
                let s = uniform_state(4, 4, 8.0 + (i % 3) as f64, 10.0, 2);
                let (a, lp, v) = net.policy_step(&s, Some(&mut sample_rng)).unwrap();
                let r = match a.indices[0] {
                    0 => 1.0,
                    1 => 0.2,
                    _ => 0.0,
                };
                rollout.push(s, a, lp, v, r, true);
            }
            prepare_rollout(&mut rollout, &net.config, 0.0).unwrap();
            ppo_update(&mut net, &mut opt, &rollout, &stream.child(round)).unwrap();
        }
        let s = uniform_state(4, 4, 8.0, 10.0, 2);
        let eval = net.evaluate(&s).unwrap();
        let p0 = eval.log_probs[[0, 0]].exp();
        assert!(p0 > 0.8, "policy did not converge to best arm: p0 = {p0}");
    }

    #[test]
    fn region_mode_shapes() {
        let cfg = PpoConfig {
            action_mode: ActionMode::Region4x4,
            ..PpoConfig::default()
        };
        let net = PolicyNet::new(cfg.clone(), 12);
        let e = EntropyMap {
            bits: Array2::from_elem((8, 8), 10.0),
        };
        let prev = Action::neutral(ActionMode::Region4x4);
        let s = build_state(&e, &ChannelSpec::awgn(10.0), &prev, &cfg);
        let mut rng = rng_derive(13, &[0]).rng();
        let (a, lp, _) = net.policy_step(&s, Some(&mut rng)).unwrap();
        assert_eq!(a.indices.len(), 16);
        assert!(lp <= 0.0);
        let rm = RateIndexMap::uniform(8, 8, 3);
        let out = apply_action(&rm, &a, 8);
        assert_eq!(out.grid(), (8, 8));
    }

    #[test]
    fn ppo_config_validation() {
        let mut cfg = PpoConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.clip_epsilon = 1.5;
        assert!(cfg.validate().is_err());
    }
}
