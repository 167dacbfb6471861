//! Group-decoupled policy optimization over flow trajectories.
//!
//! Stage-2 post-training rolls out G stochastic (SDE) generations per
//! context under a frozen behavior policy, scores each rollout with
//! per-channel-group rewards, and normalizes advantages *within each group
//! across the G rollouts* before aggregating — so a group whose reward
//! happens to live on a larger numeric scale cannot drown out the others.
//! The update maximizes a PPO-style clipped surrogate with a KL penalty
//! against the Stage-1 reference policy.
//!
//! Trajectories are cached without gradient linkage (states, injected
//! noises, behavior log-densities) and replayed through the duplex forward
//! in chunks of a few denoising steps, so peak autodiff memory is bounded
//! by the chunk size rather than the full step count. Behavior
//! log-densities are computed through the same duplex replay the update
//! uses, which makes the importance ratio exactly 1 right after a
//! behavior-policy sync.

use serde::{Deserialize, Serialize};

use crate::arflow::{build_prefix_on_tape, velocities_duplex, FlowConfig, FlowDataset, PrefixInputs};
use crate::diffcore::{AdamW, Array, Grads, ParamStore, Scalar, Tape};
use crate::error::{Error, Result};
use crate::motionvae::{vae_decode, LatentSequence, VaeConfig};
use crate::nn::TapeParams;
use crate::rng::Stream;
use crate::samplers::{generate_sequence, GenerationTrace, SampleMode, SamplerConfig};
use crate::synthdata::{denormalize, DyadSample, GroupPartition, NormStats};

/// Weights of the four reward penalty terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Per-frame positional variance mismatch.
    pub w_v: f64,
    /// Per-frame velocity variance mismatch.
    pub w_vv: f64,
    /// Sequence mean drift.
    pub w_m: f64,
    /// Plain reconstruction error.
    pub w_mse: f64,
}

impl Default for RewardWeights {
    /// Dynamics statistics dominate; plain MSE is kept small so the policy
    /// is pushed toward matching motion *texture*, not frame-exact copying.
    fn default() -> Self {
        RewardWeights { w_v: 1.0, w_vv: 1.0, w_m: 0.5, w_mse: 0.25 }
    }
}

/// Stage-2 optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdpoConfig {
    /// Rollouts per context G.
    pub group_size: usize,
    /// SDE exploration scale σ (also the transition-density scale).
    pub sigma: f64,
    /// Surrogate clip width ε.
    pub clip: f64,
    /// KL penalty weight β against the Stage-1 reference.
    pub beta: f64,
    /// Denoising steps re-executed with gradients per replay chunk.
    pub chunk_step: usize,
    /// Behavior-policy sync period in iterations.
    pub sync_every: usize,
    /// Per-channel-group aggregation weights λ_i (six FLAME-style groups).
    pub lambda: Vec<f64>,
    /// Regularizer in the aggregation denominator.
    pub eps0: f64,
    /// Floor on the per-group reward std before dividing.
    pub adv_floor: f64,
    /// Denoising steps T per rollout (short on purpose — exploration, not
    /// polish).
    pub rollout_steps: usize,
    /// Restrict rewards to listening frames.
    pub listener_only: bool,
    /// Probability a rollout context keeps its text prompt (contexts must
    /// also cover the text-free regime the collapse evaluation probes).
    pub text_prob: f64,
    pub iters: usize,
    pub lr: f64,
    pub weights: RewardWeights,
}

impl Default for GdpoConfig {
    fn default() -> Self {
        GdpoConfig {
            group_size: 4,
            sigma: 0.5,
            clip: 0.2,
            beta: 0.01,
            chunk_step: 2,
            sync_every: 8,
            lambda: vec![1.0; 6],
            eps0: 1e-8,
            adv_floor: 1e-6,
            rollout_steps: 4,
            listener_only: true,
            text_prob: 0.5,
            iters: 40,
            lr: 1e-4,
            weights: RewardWeights::default(),
        }
    }
}

impl GdpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size {} leaves the in-group std undefined",
                self.group_size
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!(
                "transition density needs σ > 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.clip) || self.clip == 0.0 {
            return Err(Error::Config(format!("clip width {} outside (0, 1)", self.clip)));
        }
        if self.lambda.iter().any(|&l| l < 0.0) || self.lambda.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("group weights must be ≥ 0 with a positive sum".into()));
        }
        if self.lambda.len() != 6 {
            return Err(Error::Config(format!(
                "expected one weight per channel group (6), got {}",
                self.lambda.len()
            )));
        }
        if self.chunk_step == 0 || self.sync_every == 0 || self.rollout_steps == 0 {
            return Err(Error::Config("chunk, sync and rollout steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.text_prob) {
            return Err(Error::Config(format!("text probability {} outside [0,1]", self.text_prob)));
        }
        Ok(())
    }
}

/// The six channel-group ranges in layout order.
pub fn group_ranges(g: &GroupPartition) -> [std::ops::Range<usize>; 6] {
    [
        g.expr_range(),
        g.jaw_range(),
        g.neck_range(),
        g.eyelid_range(),
        g.eyepose_range(),
        g.rot_range(),
    ]
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Population std across the channels of one frame slice.
fn cross_channel_std(frame: &[f64]) -> f64 {
    let n = frame.len() as f64;
    let mean = frame.iter().sum::<f64>() / n;
    (frame.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Contiguous true runs of a mask as [start, end) pairs.
fn mask_segments(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                segs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s, mask.len()));
    }
    segs
}

/// Reward of one channel group: the negated weighted sum of per-frame
/// cross-channel-variance mismatch, the same on frame-difference
/// velocities, sequence mean drift, and summed squared error — all
/// restricted to `mask` frames and channels [lo, hi). Velocities never
/// bridge gaps between masked segments. Perfect agreement scores 0, the
/// maximum; sums are left unnormalized because advantages are invariant to
/// positive per-group scaling.
pub fn reward_group(
    pred: &Array<f64>,
    gt: &Array<f64>,
    range: std::ops::Range<usize>,
    mask: &[bool],
    w: &RewardWeights,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and reference {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let (l_total, d) = (pred.shape()[0], pred.shape()[1]);
    if mask.len() != l_total || range.end > d || range.is_empty() {
        return Err(Error::Contract(format!(
            "mask of {} frames / channels {:?} do not fit motion ({l_total}, {d})",
            mask.len(),
            range
        )));
    }
    let segs = mask_segments(mask);
    if segs.is_empty() {
        eprintln!("warning: empty reward mask — group scored 0");
        return Ok(0.0);
    }
    let row = |a: &Array<f64>, l: usize| -> Vec<f64> {
        a.data()[l * d + range.start..l * d + range.end].to_vec()
    };

    let mut var_term = 0.0;
    let mut vel_term = 0.0;
    let mut mse_term = 0.0;
    let mut mean_pred = 0.0;
    let mut mean_gt = 0.0;
    let mut frames = 0usize;
    for &(s, e) in &segs {
        for l in s..e {
            let p = row(pred, l);
            let g = row(gt, l);
            var_term += (cross_channel_std(&p) - cross_channel_std(&g)).abs();
            mse_term += p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            mean_pred += p.iter().sum::<f64>();
            mean_gt += g.iter().sum::<f64>();
            frames += 1;
            if l > s {
                let vp: Vec<f64> =
                    row(pred, l).iter().zip(row(pred, l - 1)).map(|(a, b)| a - b).collect();
                let vg: Vec<f64> =
                    row(gt, l).iter().zip(row(gt, l - 1)).map(|(a, b)| a - b).collect();
                vel_term += (cross_channel_std(&vp) - cross_channel_std(&vg)).abs();
            }
        }
    }
    let count = (frames * range.len()) as f64;
    let drift = (mean_pred / count - mean_gt / count).abs();
    Ok(-(w.w_v * var_term + w.w_vv * vel_term + w.w_m * drift + w.w_mse * mse_term))
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

/// Per-group and aggregated advantages of one rollout group.
#[derive(Clone, Debug)]
pub struct AdvantageSet {
    /// `per_group[i][j]`: group i, rollout j.
    pub per_group: Vec<Vec<f64>>,
    /// `aggregated[j]`.
    pub aggregated: Vec<f64>,
}

/// Standardize rewards within each group across the rollouts:
/// A_i^j = (R_i^j − mean_j) / max(popstd_j, floor). A group with identical
/// rewards yields zeros — it simply contributes nothing this iteration.
pub fn decoupled_advantages(rewards: &[Vec<f64>], floor: f64) -> Result<Vec<Vec<f64>>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Contract(format!("need ≥ 2 rollouts to normalize, got {g}")));
    }
    let n = rewards[0].len();
    if rewards.iter().any(|r| r.len() != n) {
        return Err(Error::Contract("ragged reward matrix".into()));
    }
    let mut out = vec![vec![0.0; g]; n];
    for i in 0..n {
        let mean = rewards.iter().map(|r| r[i]).sum::<f64>() / g as f64;
        let var = rewards.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / g as f64;
        let std = var.sqrt().max(floor);
        for (j, r) in rewards.iter().enumerate() {
            out[i][j] = (r[i] - mean) / std;
        }
    }
    Ok(out)
}

/// Weighted aggregation A^j = Σ_i λ_i A_i^j / (Σ_i λ_i + ε₀).
pub fn aggregate_advantage(per_group: &[Vec<f64>], lambda: &[f64], eps0: f64) -> Result<Vec<f64>> {
    if per_group.len() != lambda.len() {
        return Err(Error::Contract(format!(
            "{} advantage groups but {} weights",
            per_group.len(),
            lambda.len()
        )));
    }
    let g = per_group.first().map_or(0, |a| a.len());
    let denom = lambda.iter().sum::<f64>() + eps0;
    let mut out = vec![0.0; g];
    for (a_i, &l_i) in per_group.iter().zip(lambda) {
        for (j, &a) in a_i.iter().enumerate() {
            out[j] += l_i * a;
        }
    }
    for a in &mut out {
        *a /= denom;
    }
    Ok(out)
}

/// Both normalization stages in one call.
pub fn advantage_set(rewards: &[Vec<f64>], cfg: &GdpoConfig) -> Result<AdvantageSet> {
    let per_group = decoupled_advantages(rewards, cfg.adv_floor)?;
    let aggregated = aggregate_advantage(&per_group, &cfg.lambda, cfg.eps0)?;
    Ok(AdvantageSet { per_group, aggregated })
}

// ---------------------------------------------------------------------------
// Transition densities and duplex replay
// ---------------------------------------------------------------------------

/// Log-density of `post` under N(pre + Δt·v, σ²Δt·I), summed over every
/// element of the arrays.
pub fn step_log_prob(
    pre: &Array<f64>,
    velocity: &Array<f64>,
    post: &Array<f64>,
    dt: f64,
    sigma: f64,
) -> Result<f64> {
    if sigma <= 0.0 || dt <= 0.0 {
        return Err(Error::Config(format!("density needs σ, Δt > 0; got σ={sigma}, Δt={dt}")));
    }
    if pre.shape() != velocity.shape() || pre.shape() != post.shape() {
        return Err(Error::Shape("state/velocity/post shapes differ".into()));
    }
    let var = sigma * sigma * dt;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut logp = 0.0;
    for ((&a, &v), &b) in pre.data().iter().zip(velocity.data()).zip(post.data()) {
        let resid = (b - a) - dt * v;
        logp += norm - resid * resid / (2.0 * var);
    }
    Ok(logp)
}

/// All tokens' pre-states at denoising step `s`, stacked (T_lat, D_v).
fn stacked_states<F: Scalar>(
    trace: &GenerationTrace<F>,
    s: usize,
    post: bool,
) -> Result<Array<F>> {
    let rows: Vec<&Array<F>> = trace
        .tokens
        .iter()
        .map(|tok| if post { &tok.steps[s].post } else { &tok.steps[s].pre })
        .collect();
    Array::concat0(&rows)
}

/// Velocities of every token at every denoising step of a cached
/// trajectory, recomputed through the duplex forward (no gradients):
/// `out[s]` is (T_lat, D_v) at flow time s·Δt. The duplex mask makes token
/// l see exactly the finished latents of tokens < l — the same context the
/// incremental rollout saw.
pub fn trajectory_step_velocities<F: Scalar>(
    store: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    inputs: &PrefixInputs<F>,
    trace: &GenerationTrace<F>,
) -> Result<Vec<Array<F>>> {
    let t_steps = trace.tokens.first().map_or(0, |t| t.steps.len());
    let dt = 1.0 / t_steps as f64;
    let mut tape = Tape::new();
    let p = TapeParams::register(&mut tape, store)?;
    let (prefix, prefix_ts) =
        build_prefix_on_tape(&mut tape, &p, flow_cfg, inputs, Default::default())?;
    let t_lat = trace.tokens.len();
    let mut out = Vec::with_capacity(t_steps);
    for s in 0..t_steps {
        let pre = stacked_states(trace, s, false)?;
        let t_flow = vec![s as f64 * dt; t_lat];
        let v = velocities_duplex(
            &mut tape,
            &p,
            flow_cfg,
            prefix,
            &prefix_ts,
            &trace.latents,
            &pre,
            &t_flow,
        )?;
        out.push(tape.value(v).clone());
    }
    Ok(out)
}

/// Tape-side transition log-density: log N(post; pre + Δt·v, σ²Δt·I)
/// summed over all elements, as a differentiable scalar node. Both the
/// surrogate update and the cached behavior densities go through this exact
/// node sequence, so equal parameters give bitwise-equal log-densities —
/// and an importance ratio of exactly 1.
fn logp_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    v: crate::diffcore::NodeId,
    pre: &Array<F>,
    post: &Array<F>,
    dt: f64,
    sigma: f64,
) -> Result<crate::diffcore::NodeId> {
    let var = sigma * sigma * dt;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let resid = tape.leaf(post.zip_map(pre, |a, b| a - b)?)?;
    let drift = tape.scale(v, dt)?;
    let diff = tape.sub(resid, drift)?;
    let sq = tape.mul(diff, diff)?;
    let sumsq = tape.sum(sq)?;
    let scaled = tape.scale(sumsq, -1.0 / (2.0 * var))?;
    tape.add_scalar(scaled, norm * pre.len() as f64)
}

/// Per-step pooled log-densities of a cached trajectory under `store`,
/// computed through the same duplex replay and tape arithmetic the
/// optimizer uses — so the importance ratio is exactly 1 whenever numerator
/// and denominator share parameters.
pub fn trajectory_step_logp<F: Scalar>(
    store: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    inputs: &PrefixInputs<F>,
    trace: &GenerationTrace<F>,
    sigma: f64,
) -> Result<Vec<f64>> {
    let t_steps = trace.tokens.first().map_or(0, |t| t.steps.len());
    if t_steps == 0 {
        return Err(Error::Contract("empty trajectory".into()));
    }
    let dt = 1.0 / t_steps as f64;
    let t_lat = trace.tokens.len();
    let mut tape = Tape::new();
    let p = TapeParams::register(&mut tape, store)?;
    let (prefix, prefix_ts) =
        build_prefix_on_tape(&mut tape, &p, flow_cfg, inputs, Default::default())?;
    let mut out = Vec::with_capacity(t_steps);
    for s in 0..t_steps {
        let pre = stacked_states(trace, s, false)?;
        let post = stacked_states(trace, s, true)?;
        let t_flow = vec![s as f64 * dt; t_lat];
        let v = velocities_duplex(
            &mut tape,
            &p,
            flow_cfg,
            prefix,
            &prefix_ts,
            &trace.latents,
            &pre,
            &t_flow,
        )?;
        let logp = logp_on_tape(&mut tape, v, &pre, &post, dt, sigma)?;
        out.push(tape.value(logp).item()?.as_f64());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// Everything one rollout group conditions on and is scored against.
#[derive(Clone, Debug)]
pub struct RolloutContext<F: Scalar> {
    pub inputs: PrefixInputs<F>,
    pub actor_vad: Vec<bool>,
    pub partner_vad: Vec<bool>,
    /// Ground-truth actor motion in original units, (frames, d).
    pub gt_motion: Array<f64>,
    pub groups: GroupPartition,
}

impl<F: Scalar> RolloutContext<F> {
    /// Frames where the actor listens while the partner speaks.
    pub fn listening_mask(&self) -> Vec<bool> {
        self.actor_vad
            .iter()
            .zip(&self.partner_vad)
            .map(|(&a, &p)| !a && p)
            .collect()
    }
}

/// One cached rollout: the gradient-free trajectory, its behavior-policy
/// log-densities, the decoded motion, and the per-group rewards.
#[derive(Clone, Debug)]
pub struct RolloutCache<F: Scalar> {
    pub trace: GenerationTrace<F>,
    /// Pooled log-density per denoising step under the behavior policy.
    pub behavior_logp: Vec<f64>,
    /// (frames, d), original units.
    pub motion: Array<f64>,
    /// One reward per channel group.
    pub rewards: Vec<f64>,
}

/// Decode z-normalized latents through the frozen VAE back to motion in
/// original units.
pub fn decode_rollout_motion<F: Scalar>(
    latents: &Array<F>,
    frames: usize,
    vae_store: &ParamStore<F>,
    vae_cfg: &VaeConfig,
    latent_stats: &NormStats,
    motion_stats: &NormStats,
) -> Result<Array<f64>> {
    let denorm = denormalize(latents, latent_stats)?;
    let motion_norm = vae_decode(
        vae_store,
        vae_cfg,
        &LatentSequence { tokens: denorm, logvar: None, frames },
    )?;
    Ok(denormalize(&motion_norm, motion_stats)?.cast::<f64>())
}

/// Roll out G stochastic generations from one shared context under the
/// behavior policy and cache everything the update needs. A rollout that
/// goes non-finite is redrawn once with a fresh seed; a second failure is a
/// hard error.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group<F: Scalar>(
    behavior: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    cfg: &GdpoConfig,
    ctx: &RolloutContext<F>,
    vae_store: &ParamStore<F>,
    vae_cfg: &VaeConfig,
    latent_stats: &NormStats,
    motion_stats: &NormStats,
    seed: u64,
    iter: u64,
) -> Result<Vec<RolloutCache<F>>> {
    cfg.validate()?;
    let frames = ctx.inputs.actor_audio.shape()[0];
    let n_tokens = frames.div_ceil(flow_cfg.r);
    let mask = if cfg.listener_only {
        ctx.listening_mask()
    } else {
        vec![true; frames]
    };
    let ranges = group_ranges(&ctx.groups);

    let mut caches = Vec::with_capacity(cfg.group_size);
    for j in 0..cfg.group_size {
        let mut trace = None;
        for attempt in 0..2u64 {
            let roll_seed = Stream::derive(seed, &["gdpo", "rollseed"], &[iter, j as u64, attempt])
                .below(u64::MAX);
            let sampler = SamplerConfig {
                steps: cfg.rollout_steps,
                sigma: cfg.sigma,
                omega_speak: 1.0,
                omega_listen: 1.0,
                mode: SampleMode::Sde,
                seed: roll_seed,
            };
            match generate_sequence(behavior, flow_cfg, &sampler, &ctx.inputs, &ctx.actor_vad, n_tokens)
            {
                Ok(t) => {
                    trace = Some(t);
                    break;
                }
                Err(Error::Numeric(msg)) if attempt == 0 => {
                    eprintln!("warning: rollout {j} went non-finite ({msg}); redrawing once");
                }
                Err(e) => return Err(e),
            }
        }
        let trace = trace.ok_or_else(|| {
            Error::Numeric(format!("rollout {j} non-finite twice in iteration {iter}"))
        })?;

        let behavior_logp =
            trajectory_step_logp(behavior, flow_cfg, &ctx.inputs, &trace, cfg.sigma)?;
        if behavior_logp.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric(format!("non-finite behavior log-density in rollout {j}")));
        }
        let motion = decode_rollout_motion(
            &trace.latents,
            frames,
            vae_store,
            vae_cfg,
            latent_stats,
            motion_stats,
        )?;
        let rewards = ranges
            .iter()
            .map(|r| reward_group(&motion, &ctx.gt_motion, r.clone(), &mask, &cfg.weights))
            .collect::<Result<Vec<f64>>>()?;
        caches.push(RolloutCache { trace, behavior_logp, motion, rewards });
    }
    Ok(caches)
}

// ---------------------------------------------------------------------------
// Surrogate optimization
// ---------------------------------------------------------------------------

/// Value-level statistics of one surrogate evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SurrogateStats {
    pub loss: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Steps dropped for non-finite ratios.
    pub skipped: usize,
}

/// Gradients of the clipped-surrogate loss over all cached rollouts,
/// accumulated across replay chunks of `chunk_step` denoising steps each.
/// Within one chunk a single tape holds the prefix (built once) plus one
/// duplex forward per rollout and step; chunks run on separate tapes, so
/// peak live-graph size is governed by `chunk_step`, not the trajectory
/// length. Summing per-chunk gradients is exact because the loss is a sum
/// over steps.
pub fn surrogate_grads<F: Scalar>(
    current: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    cfg: &GdpoConfig,
    inputs: &PrefixInputs<F>,
    caches: &[RolloutCache<F>],
    advantages: &[f64],
    ref_velocities: &[Vec<Array<F>>],
) -> Result<(Grads<F>, SurrogateStats)> {
    if caches.is_empty() || caches.len() != advantages.len() || caches.len() != ref_velocities.len()
    {
        return Err(Error::Contract(format!(
            "{} caches, {} advantages, {} reference velocity sets",
            caches.len(),
            advantages.len(),
            ref_velocities.len()
        )));
    }
    let t_steps = caches[0].trace.tokens.first().map_or(0, |t| t.steps.len());
    if t_steps == 0 {
        return Err(Error::Contract("empty trajectory in cache".into()));
    }
    let t_lat = caches[0].trace.tokens.len();
    let dt = 1.0 / t_steps as f64;
    let g = caches.len() as f64;
    // Mean over rollouts and steps for the surrogate; additionally over
    // tokens for the KL term.
    let surr_scale = -1.0 / (g * t_steps as f64);
    let kl_scale = cfg.beta * dt / (2.0 * cfg.sigma * cfg.sigma)
        / (g * t_steps as f64 * t_lat as f64);

    let mut total: Grads<F> = Grads::new();
    let mut stats = SurrogateStats {
        ratio_min: f64::INFINITY,
        ratio_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut counted = 0usize;

    let mut chunk_start = 0;
    while chunk_start < t_steps {
        let chunk_end = (chunk_start + cfg.chunk_step).min(t_steps);
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, current)?;
        let (prefix, prefix_ts) =
            build_prefix_on_tape(&mut tape, &p, flow_cfg, inputs, Default::default())?;
        let mut loss_terms = Vec::new();
        for (j, cache) in caches.iter().enumerate() {
            if cache.trace.tokens.len() != t_lat
                || cache.behavior_logp.len() != t_steps
                || ref_velocities[j].len() != t_steps
            {
                return Err(Error::Contract(format!("rollout {j} cache is incomplete")));
            }
            for s in chunk_start..chunk_end {
                let pre = stacked_states(&cache.trace, s, false)?;
                let post = stacked_states(&cache.trace, s, true)?;
                let t_flow = vec![s as f64 * dt; t_lat];
                let v = velocities_duplex(
                    &mut tape,
                    &p,
                    flow_cfg,
                    prefix,
                    &prefix_ts,
                    &cache.trace.latents,
                    &pre,
                    &t_flow,
                )?;
                let logp = logp_on_tape(&mut tape, v, &pre, &post, dt, cfg.sigma)?;
                let logp_val = tape.value(logp).item()?.as_f64();
                let ratio_val = (logp_val - cache.behavior_logp[s]).exp();
                if !ratio_val.is_finite() {
                    eprintln!(
                        "warning: non-finite importance ratio at rollout {j} step {s}; skipped"
                    );
                    stats.skipped += 1;
                    continue;
                }
                ratio_sum += ratio_val;
                stats.ratio_min = stats.ratio_min.min(ratio_val);
                stats.ratio_max = stats.ratio_max.max(ratio_val);
                if ratio_val < 1.0 - cfg.clip || ratio_val > 1.0 + cfg.clip {
                    clipped += 1;
                }
                counted += 1;

                let ratio = {
                    let centered = tape.add_scalar(logp, -cache.behavior_logp[s])?;
                    tape.exp(centered)?
                };
                let unclipped = tape.scale(ratio, advantages[j])?;
                let clamped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
                let clipped_term = tape.scale(clamped, advantages[j])?;
                let surr = tape.minimum(unclipped, clipped_term)?;
                loss_terms.push(tape.scale(surr, surr_scale)?);

                // KL(π_θ ‖ π_ref) per step/token: Δt‖v_θ − v_ref‖²/(2σ²).
                let v_ref = tape.leaf(ref_velocities[j][s].clone())?;
                let v_diff = tape.sub(v, v_ref)?;
                let v_sq = tape.mul(v_diff, v_diff)?;
                let kl_sum = tape.sum(v_sq)?;
                stats.kl += tape.value(kl_sum).item()?.as_f64() * dt
                    / (2.0 * cfg.sigma * cfg.sigma)
                    / (g * t_steps as f64 * t_lat as f64);
                if cfg.beta != 0.0 {
                    loss_terms.push(tape.scale(kl_sum, kl_scale)?);
                }
            }
        }
        if !loss_terms.is_empty() {
            let mut loss = loss_terms[0];
            for &t in &loss_terms[1..] {
                loss = tape.add(loss, t)?;
            }
            stats.loss += tape.value(loss).item()?.as_f64();
            let grads = tape.backward(loss)?;
            for (name, grad) in grads {
                match total.get_mut(&name) {
                    Some(acc) => *acc = acc.zip_map(&grad, |a, b| a + b)?,
                    None => {
                        total.insert(name, grad);
                    }
                }
            }
        }
        chunk_start = chunk_end;
    }

    if counted > 0 {
        stats.ratio_mean = ratio_sum / counted as f64;
        stats.clip_fraction = clipped as f64 / counted as f64;
    } else {
        stats.ratio_min = 0.0;
        stats.ratio_max = 0.0;
    }
    Ok((total, stats))
}

/// One optimizer update from cached rollouts: accumulate chunked gradients,
/// then apply a single AdamW step.
#[allow(clippy::too_many_arguments)]
pub fn chunked_update<F: Scalar>(
    current: &mut ParamStore<F>,
    flow_cfg: &FlowConfig,
    cfg: &GdpoConfig,
    inputs: &PrefixInputs<F>,
    caches: &[RolloutCache<F>],
    advantages: &[f64],
    ref_velocities: &[Vec<Array<F>>],
    opt: &AdamW,
) -> Result<SurrogateStats> {
    let (grads, stats) =
        surrogate_grads(current, flow_cfg, cfg, inputs, caches, advantages, ref_velocities)?;
    current.adamw_step(&grads, opt)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// The full Stage-2 loop
// ---------------------------------------------------------------------------

/// Everything Stage 2 needs besides the policy itself.
pub struct GdpoTask<'a, F: Scalar> {
    pub flow_cfg: &'a FlowConfig,
    pub vae_cfg: &'a VaeConfig,
    pub vae_store: &'a ParamStore<F>,
    /// Motion z-normalization from Stage-1 data preparation.
    pub motion_stats: &'a NormStats,
    /// The encoded corpus (provides conditioning and latent statistics).
    pub dataset: &'a FlowDataset<F>,
    /// The raw corpus, index-aligned with `dataset` (provides VAD streams
    /// and ground-truth motion for rewards).
    pub dyads: &'a [DyadSample],
    pub groups: GroupPartition,
}

/// One iteration's log line.
#[derive(Clone, Debug, Serialize)]
pub struct IterStats {
    pub iter: usize,
    pub synced: bool,
    /// Mean reward per channel group over the G rollouts.
    pub group_mean_reward: Vec<f64>,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub loss: f64,
}

/// Stage-2 result: the post-trained policy and the per-iteration log.
pub struct GdpoOutcome<F: Scalar> {
    pub store: ParamStore<F>,
    pub log: Vec<IterStats>,
}

/// Run GDPO post-training from a Stage-1 checkpoint. The reference policy
/// is the untouched Stage-1 checkpoint throughout; the behavior policy is
/// re-snapshotted from the current one every `sync_every` iterations.
pub fn posttrain_gdpo<F: Scalar>(
    stage1: &ParamStore<F>,
    task: &GdpoTask<F>,
    cfg: &GdpoConfig,
    seed: u64,
) -> Result<GdpoOutcome<F>> {
    cfg.validate()?;
    if task.dataset.samples.len() != task.dyads.len() || task.dyads.is_empty() {
        return Err(Error::Contract(format!(
            "{} encoded samples vs {} raw dyads",
            task.dataset.samples.len(),
            task.dyads.len()
        )));
    }
    let reference = stage1;
    let mut current = stage1.clone();
    let mut behavior = stage1.clone();
    let opt = AdamW::with_lr(cfg.lr);
    let mut log = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let synced = iter % cfg.sync_every == 0;
        if synced {
            behavior = current.clone();
        }
        let idx = Stream::derive(seed, &["gdpo", "pick"], &[iter as u64])
            .below(task.dataset.samples.len() as u64) as usize;
        let keep_text =
            Stream::derive(seed, &["gdpo", "text"], &[iter as u64]).coin(cfg.text_prob);
        let sample = &task.dataset.samples[idx];
        let dyad = &task.dyads[idx];
        let mut inputs = sample.inputs.clone();
        if !keep_text {
            inputs.text_id = None;
        }
        let ctx = RolloutContext {
            inputs,
            actor_vad: dyad.actor_vad.clone(),
            partner_vad: dyad.partner_vad.clone(),
            gt_motion: dyad.actor_motion.clone(),
            groups: task.groups,
        };

        let caches = rollout_group(
            &behavior,
            task.flow_cfg,
            cfg,
            &ctx,
            task.vae_store,
            task.vae_cfg,
            &task.dataset.latent_stats,
            task.motion_stats,
            seed,
            iter as u64,
        )?;
        let rewards: Vec<Vec<f64>> = caches.iter().map(|c| c.rewards.clone()).collect();
        let adv = advantage_set(&rewards, cfg)?;
        let ref_velocities: Vec<Vec<Array<F>>> = caches
            .iter()
            .map(|c| trajectory_step_velocities(reference, task.flow_cfg, &ctx.inputs, &c.trace))
            .collect::<Result<_>>()?;
        let stats = chunked_update(
            &mut current,
            task.flow_cfg,
            cfg,
            &ctx.inputs,
            &caches,
            &adv.aggregated,
            &ref_velocities,
            &opt,
        )?;

        let n_groups = caches[0].rewards.len();
        let group_mean_reward: Vec<f64> = (0..n_groups)
            .map(|i| rewards.iter().map(|r| r[i]).sum::<f64>() / rewards.len() as f64)
            .collect();
        let mean_abs_advantage =
            adv.aggregated.iter().map(|a| a.abs()).sum::<f64>() / adv.aggregated.len() as f64;
        log.push(IterStats {
            iter,
            synced,
            group_mean_reward,
            mean_abs_advantage,
            clip_fraction: stats.clip_fraction,
            kl: stats.kl,
            ratio_mean: stats.ratio_mean,
            ratio_min: stats.ratio_min,
            ratio_max: stats.ratio_max,
            loss: stats.loss,
        });
    }
    Ok(GdpoOutcome { store: current, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arflow::init_flow;
    use crate::motionvae::init_vae;
    use crate::synthdata::DyadConfig;

    fn tiny_flow_cfg() -> FlowConfig {
        FlowConfig {
            layers: 1,
            heads: 2,
            width: 8,
            ffn_mult: 2,
            p_drop: 0.1,
            text_vocab: 2,
            audio_dim: 8,
            latent_dim: 2,
            r: 2,
            steps: 0,
            batch: 1,
            lr: 1e-3,
        }
    }

    fn tiny_vae_cfg() -> VaeConfig {
        VaeConfig {
            r: 2,
            latent_dim: 2,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            width: 8,
            ffn_mult: 2,
            beta: 1e-4,
            steps: 0,
            batch: 1,
            lr: 1e-3,
        }
    }

    fn tiny_gdpo_cfg() -> GdpoConfig {
        GdpoConfig {
            group_size: 2,
            rollout_steps: 2,
            chunk_step: 2,
            iters: 1,
            lr: 1e-4,
            ..Default::default()
        }
    }

    /// A coherent micro-world: one dyad, initialized (untrained) VAE and
    /// flow, identity latent/motion normalization.
    struct Micro {
        flow_cfg: FlowConfig,
        vae_cfg: VaeConfig,
        flow_store: ParamStore<f64>,
        vae_store: ParamStore<f64>,
        dyad: DyadSample,
        ctx: RolloutContext<f64>,
        latent_stats: NormStats,
        motion_stats: NormStats,
    }

    fn micro(seed: u64) -> Micro {
        let flow_cfg = tiny_flow_cfg();
        let vae_cfg = tiny_vae_cfg();
        let mut dc = DyadConfig::default();
        dc.frames = 12;
        dc.seg_min = 4;
        dc.seg_max = 6;
        dc.groups = GroupPartition { expr: 1, jaw: 1, neck: 1, eyelid: 1, eyepose: 1, rot: 1 };
        dc.seed = seed;
        let dyad = crate::synthdata::generate_dyad(&dc, 0).unwrap();

        let mut flow_store = ParamStore::new();
        init_flow(&mut flow_store, &flow_cfg, &mut Stream::derive(seed, &["gd-flow"], &[])).unwrap();
        let mut vae_store = ParamStore::new();
        init_vae(&mut vae_store, &vae_cfg, 6, &mut Stream::derive(seed, &["gd-vae"], &[])).unwrap();

        let mut rng = Stream::derive(seed, &["gd-inputs"], &[]);
        let frames = dc.frames;
        let t = frames.div_ceil(flow_cfg.r);
        let inputs = PrefixInputs {
            text_id: Some(0),
            partner_audio: dyad.partner_audio.cast::<f64>(),
            partner_latents: Array::new(
                vec![t, flow_cfg.latent_dim],
                rng.normal_vec(t * flow_cfg.latent_dim),
            )
            .unwrap(),
            actor_audio: dyad.actor_audio.cast::<f64>(),
        };
        let ctx = RolloutContext {
            inputs,
            actor_vad: dyad.actor_vad.clone(),
            partner_vad: dyad.partner_vad.clone(),
            gt_motion: dyad.actor_motion.clone(),
            groups: dc.groups,
        };
        Micro {
            flow_cfg,
            vae_cfg,
            flow_store,
            vae_store,
            dyad,
            ctx,
            latent_stats: NormStats { mean: vec![0.0; 2], std: vec![1.0; 2] },
            motion_stats: NormStats { mean: vec![0.0; 6], std: vec![1.0; 6] },
        }
    }

    fn micro_caches(m: &Micro, cfg: &GdpoConfig, seed: u64) -> Vec<RolloutCache<f64>> {
        rollout_group(
            &m.flow_store,
            &m.flow_cfg,
            cfg,
            &m.ctx,
            &m.vae_store,
            &m.vae_cfg,
            &m.latent_stats,
            &m.motion_stats,
            seed,
            0,
        )
        .unwrap()
    }

    #[test]
    fn transition_density_matches_the_gaussian_closed_form() {
        // At the mean with D_v = 2 and σ²Δt = 0.0625 the density is
        // −½·2·ln(2π·0.0625) ≈ 0.9348.
        let pre = Array::<f64>::from_f64(vec![1, 2], &[0.3, -0.2]).unwrap();
        let v = Array::<f64>::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let dt = 0.25;
        let sigma = 0.5; // σ²Δt = 0.0625
        let post = Array::<f64>::from_f64(vec![1, 2], &[0.3 + dt * 1.0, -0.2 + dt * 2.0]).unwrap();
        let lp = step_log_prob(&pre, &v, &post, dt, sigma).unwrap();
        assert!((lp - 0.9348).abs() < 2e-4, "{lp}"); // 0.93471 to four figures
        let exact = -(2.0 * std::f64::consts::PI * 0.0625_f64).ln();
        assert!((lp - exact).abs() < 1e-12);

        // One unit off the mean in one dim costs exactly 1/(2σ²Δt) = 8.
        let mut off = post.clone();
        off.data_mut()[0] += 1.0;
        let lp_off = step_log_prob(&pre, &v, &off, dt, sigma).unwrap();
        assert!((lp - lp_off - 8.0).abs() < 1e-12);

        // Same policy in numerator and denominator → ratio exactly 1.
        assert_eq!((lp - lp).exp(), 1.0);

        assert!(step_log_prob(&pre, &v, &post, dt, 0.0).is_err());
    }

    #[test]
    fn advantages_standardize_each_group_independently() {
        let rewards = vec![
            vec![-2.0, 10.0],
            vec![0.0, 10.0],
            vec![2.0, 10.0],
            vec![4.0, 10.0],
        ];
        let a = decoupled_advantages(&rewards, 1e-6).unwrap();
        // Group 0: (−2,0,2,4), population std √5.
        let expect = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738];
        for (got, want) in a[0].iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Group 1 is degenerate: all zeros, not a blow-up.
        assert_eq!(a[1], vec![0.0; 4]);
        // Standardization invariants.
        let sum: f64 = a[0].iter().sum();
        let var: f64 = a[0].iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(sum.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_ignore_per_group_affine_and_scale_changes() {
        let rewards = vec![
            vec![-2.0, 1.0, 0.3],
            vec![0.0, 5.0, 0.1],
            vec![2.0, -3.0, 0.2],
            vec![4.0, 2.0, 0.7],
        ];
        let base = decoupled_advantages(&rewards, 1e-6).unwrap();

        // Affine per-group map aR + b with a > 0 leaves advantages fixed.
        let scaled: Vec<Vec<f64>> = rewards
            .iter()
            .map(|r| vec![3.0 * r[0] - 7.0, 0.25 * r[1] + 2.0, 100.0 * r[2]])
            .collect();
        let after = decoupled_advantages(&scaled, 1e-6).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!(
                    (base[i][j] - after[i][j]).abs() < 1e-9,
                    "group {i} rollout {j}: {} vs {}",
                    base[i][j],
                    after[i][j]
                );
            }
        }
        // Hence the aggregate is scale-decoupled too — the core claim.
        let lam = [1.0, 1.0, 1.0];
        let agg_a = aggregate_advantage(&base, &lam, 1e-8).unwrap();
        let agg_b = aggregate_advantage(&after, &lam, 1e-8).unwrap();
        for (x, y) in agg_a.iter().zip(&agg_b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_is_a_weighted_mean_with_regularizer() {
        // λ=(1,1), A=(0.5,−0.5) → 0.
        let a = aggregate_advantage(&[vec![0.5], vec![-0.5]], &[1.0, 1.0], 1e-8).unwrap();
        assert!(a[0].abs() < 1e-12);
        // λ=(2,0), A=(1,5) → 2/(2+1e-8) ≈ 1.
        let b = aggregate_advantage(&[vec![1.0], vec![5.0]], &[2.0, 0.0], 1e-8).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-8);
        // Equal λ → plain mean up to ε₀.
        let c = aggregate_advantage(&[vec![1.0], vec![2.0], vec![6.0]], &[1.0; 3], 1e-8).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn rewards_are_zero_at_perfect_match_and_ignore_unmasked_frames() {
        let gt = Array::<f64>::new(
            vec![6, 2],
            vec![0.1, -0.1, 0.4, 0.2, -0.3, 0.0, 5.0, -5.0, 0.2, 0.1, 0.0, 0.3],
        )
        .unwrap();
        let mask = [true, true, true, false, true, true];
        let w = RewardWeights::default();
        // Identical on masked frames, garbage on the masked-out frame 3.
        let mut pred = gt.clone();
        pred.data_mut()[3 * 2] = -99.0;
        pred.data_mut()[3 * 2 + 1] = 42.0;
        let r = reward_group(&pred, &gt, 0..2, &mask, &w).unwrap();
        assert_eq!(r, 0.0, "masked-out frames leaked into the reward");
        // A velocity bridging the gap would have seen the −99 jump; the
        // exact zero above proves velocities stay within segments.

        // Empty mask scores zero (with a warning) rather than erroring.
        let none = [false; 6];
        assert_eq!(reward_group(&pred, &gt, 0..2, &none, &w).unwrap(), 0.0);
    }

    #[test]
    fn collapse_scores_strictly_worse_than_motion() {
        // Constant prediction against an oscillating target: variance and
        // velocity-variance terms must bite.
        let l = 10;
        let mut gt_data = vec![0.0; l * 2];
        for i in 0..l {
            gt_data[i * 2] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let gt = Array::<f64>::new(vec![l, 2], gt_data).unwrap();
        let pred = Array::<f64>::zeros(vec![l, 2]);
        let mask = vec![true; l];
        let w = RewardWeights::default();
        let r = reward_group(&pred, &gt, 0..2, &mask, &w).unwrap();
        assert!(r < 0.0, "collapsed output was not penalized: {r}");

        // More weight on MSE → strictly lower reward.
        let heavier = RewardWeights { w_mse: 2.0 * w.w_mse, ..w };
        let r2 = reward_group(&pred, &gt, 0..2, &mask, &heavier).unwrap();
        assert!(r2 < r);
    }

    #[test]
    fn speaking_frames_never_touch_listener_masked_rewards() {
        let m = micro(3);
        let mask = m.ctx.listening_mask();
        assert!(mask.iter().any(|&x| x) && mask.iter().any(|&x| !x));
        let w = RewardWeights::default();
        let ranges = group_ranges(&m.ctx.groups);

        let pred = m.dyad.partner_motion.clone(); // any motion ≠ gt
        let base: Vec<f64> = ranges
            .iter()
            .map(|r| reward_group(&pred, &m.ctx.gt_motion, r.clone(), &mask, &w).unwrap())
            .collect();
        let mut bumped = pred.clone();
        let d = bumped.shape()[1];
        for (l, &listening) in mask.iter().enumerate() {
            if !listening {
                for c in 0..d {
                    bumped.data_mut()[l * d + c] += 7.5;
                }
            }
        }
        let after: Vec<f64> = ranges
            .iter()
            .map(|r| reward_group(&bumped, &m.ctx.gt_motion, r.clone(), &mask, &w).unwrap())
            .collect();
        assert_eq!(base, after, "speaking-frame perturbation changed a reward");
    }

    #[test]
    fn rollouts_are_cached_deterministically_with_finite_densities() {
        let m = micro(5);
        let cfg = tiny_gdpo_cfg();
        let a = micro_caches(&m, &cfg, 11);
        let b = micro_caches(&m, &cfg, 11);
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trace.latents.data(), y.trace.latents.data());
            assert_eq!(x.behavior_logp, y.behavior_logp);
            assert_eq!(x.rewards, y.rewards);
        }
        // Distinct rollouts explore distinct trajectories.
        assert_ne!(a[0].trace.latents.data(), a[1].trace.latents.data());
        for c in &a {
            assert_eq!(c.behavior_logp.len(), cfg.rollout_steps);
            assert!(c.behavior_logp.iter().all(|l| l.is_finite()));
            assert_eq!(c.rewards.len(), 6);
            assert_eq!(c.motion.shape(), &[12, 6]);
            c.trace.replay_check(1.0 / cfg.rollout_steps as f64, cfg.sigma).unwrap();
        }
    }

    #[test]
    fn clipping_follows_the_surrogate_arithmetic() {
        // Craft caches whose behavior densities put the ratio exactly where
        // we want it, then read the clipped objective off the loss.
        let m = micro(7);
        let mut cfg = tiny_gdpo_cfg();
        cfg.beta = 0.0;
        cfg.rollout_steps = 1;
        let mut caches = micro_caches(&m, &cfg, 13);
        caches.truncate(1);
        let true_logp = trajectory_step_logp(
            &m.flow_store,
            &m.flow_cfg,
            &m.ctx.inputs,
            &caches[0].trace,
            cfg.sigma,
        )
        .unwrap();
        let refv = vec![trajectory_step_velocities(
            &m.flow_store,
            &m.flow_cfg,
            &m.ctx.inputs,
            &caches[0].trace,
        )
        .unwrap()];

        // ρ = 1.5, A = 1 → min(1.5, 1.2) = 1.2 → loss −1.2.
        caches[0].behavior_logp = vec![true_logp[0] - 1.5_f64.ln()];
        let (_, stats) = surrogate_grads(
            &m.flow_store, &m.flow_cfg, &cfg, &m.ctx.inputs, &caches, &[1.0], &refv,
        )
        .unwrap();
        assert!((stats.loss + 1.2).abs() < 1e-9, "loss {}", stats.loss);
        assert!((stats.ratio_mean - 1.5).abs() < 1e-9);
        assert_eq!(stats.clip_fraction, 1.0);

        // ρ = 0.5, A = −1 → min(−0.5, −0.8) = −0.8 → loss +0.8.
        caches[0].behavior_logp = vec![true_logp[0] + 2.0_f64.ln()];
        let (_, stats) = surrogate_grads(
            &m.flow_store, &m.flow_cfg, &cfg, &m.ctx.inputs, &caches, &[-1.0], &refv,
        )
        .unwrap();
        assert!((stats.loss - 0.8).abs() < 1e-9, "loss {}", stats.loss);
    }

    #[test]
    fn kl_is_zero_at_the_reference_and_quadratic_away_from_it() {
        let m = micro(9);
        let mut cfg = tiny_gdpo_cfg();
        cfg.beta = 0.01;
        let caches = micro_caches(&m, &cfg, 17);
        let caches = vec![caches[0].clone()];
        let refv_same = vec![trajectory_step_velocities(
            &m.flow_store,
            &m.flow_cfg,
            &m.ctx.inputs,
            &caches[0].trace,
        )
        .unwrap()];
        let (_, stats) = surrogate_grads(
            &m.flow_store, &m.flow_cfg, &cfg, &m.ctx.inputs, &caches, &[0.5], &refv_same,
        )
        .unwrap();
        assert_eq!(stats.kl, 0.0, "KL at the reference must vanish exactly");

        // Offset one reference velocity element by δ: KL picks up exactly
        // δ²Δt/(2σ²) averaged over (rollouts · steps · tokens).
        let delta = 0.5;
        let mut refv_off = refv_same.clone();
        refv_off[0][0].data_mut()[0] += delta;
        let (_, stats_off) = surrogate_grads(
            &m.flow_store, &m.flow_cfg, &cfg, &m.ctx.inputs, &caches, &[0.5], &refv_off,
        )
        .unwrap();
        let t_steps = cfg.rollout_steps as f64;
        let t_lat = caches[0].trace.tokens.len() as f64;
        let dt = 1.0 / t_steps;
        let expect = delta * delta * dt / (2.0 * cfg.sigma * cfg.sigma) / (t_steps * t_lat);
        assert!(
            (stats_off.kl - expect).abs() < 1e-12,
            "KL {} vs {expect}",
            stats_off.kl
        );
        assert!(stats_off.kl >= 0.0);
    }

    #[test]
    fn first_update_is_neutral_and_matches_reinforce() {
        // With current = behavior = reference and β = 0 the surrogate value
        // is the mean advantage (0 by construction), every ratio is exactly
        // 1, and the gradient equals the plain REINFORCE estimator.
        let m = micro(11);
        let mut cfg = tiny_gdpo_cfg();
        cfg.beta = 0.0;
        let caches = micro_caches(&m, &cfg, 19);
        let rewards: Vec<Vec<f64>> = caches.iter().map(|c| c.rewards.clone()).collect();
        let adv = advantage_set(&rewards, &cfg).unwrap();
        let refv: Vec<Vec<Array<f64>>> = caches
            .iter()
            .map(|c| {
                trajectory_step_velocities(&m.flow_store, &m.flow_cfg, &m.ctx.inputs, &c.trace)
                    .unwrap()
            })
            .collect();
        let (grads, stats) = surrogate_grads(
            &m.flow_store,
            &m.flow_cfg,
            &cfg,
            &m.ctx.inputs,
            &caches,
            &adv.aggregated,
            &refv,
        )
        .unwrap();
        assert!(stats.loss.abs() < 1e-8, "first-update loss {}", stats.loss);
        assert_eq!(stats.ratio_min, 1.0, "ratio must be exactly 1 at sync");
        assert_eq!(stats.ratio_max, 1.0);
        assert_eq!(stats.clip_fraction, 0.0);

        // REINFORCE on the same caches: −mean_{j,s} A_j · log p_θ.
        let t_steps = cfg.rollout_steps;
        let t_lat = caches[0].trace.tokens.len();
        let dt = 1.0 / t_steps as f64;
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, &m.flow_store).unwrap();
        let (prefix, prefix_ts) =
            build_prefix_on_tape(&mut tape, &p, &m.flow_cfg, &m.ctx.inputs, Default::default())
                .unwrap();
        let mut terms = Vec::new();
        for (j, cache) in caches.iter().enumerate() {
            for s in 0..t_steps {
                let pre = stacked_states(&cache.trace, s, false).unwrap();
                let post = stacked_states(&cache.trace, s, true).unwrap();
                let v = velocities_duplex(
                    &mut tape,
                    &p,
                    &m.flow_cfg,
                    prefix,
                    &prefix_ts,
                    &cache.trace.latents,
                    &pre,
                    &vec![s as f64 * dt; t_lat],
                )
                .unwrap();
                let logp = logp_on_tape(&mut tape, v, &pre, &post, dt, cfg.sigma).unwrap();
                terms.push(tape.scale(logp, adv.aggregated[j]).unwrap());
            }
        }
        let mut obj = terms[0];
        for &t in &terms[1..] {
            obj = tape.add(obj, t).unwrap();
        }
        let loss_r = tape
            .scale(obj, -1.0 / (caches.len() * t_steps) as f64)
            .unwrap();
        let grads_r = tape.backward(loss_r).unwrap();

        for (name, g) in &grads {
            let gr = &grads_r[name];
            for (a, b) in g.data().iter().zip(gr.data()) {
                let denom = b.abs().max(1e-12);
                assert!(
                    ((a - b).abs() / denom) < 1e-9,
                    "{name}: surrogate {a} vs REINFORCE {b}"
                );
            }
        }
    }

    #[test]
    fn chunked_gradients_equal_full_graph_gradients() {
        let m = micro(13);
        let mut cfg = tiny_gdpo_cfg();
        cfg.rollout_steps = 4;
        let caches = micro_caches(&m, &cfg, 23);
        let rewards: Vec<Vec<f64>> = caches.iter().map(|c| c.rewards.clone()).collect();
        let adv = advantage_set(&rewards, &cfg).unwrap();
        let refv: Vec<Vec<Array<f64>>> = caches
            .iter()
            .map(|c| {
                trajectory_step_velocities(&m.flow_store, &m.flow_cfg, &m.ctx.inputs, &c.trace)
                    .unwrap()
            })
            .collect();
        let run = |chunk: usize| {
            let mut c = cfg.clone();
            c.chunk_step = chunk;
            surrogate_grads(
                &m.flow_store,
                &m.flow_cfg,
                &c,
                &m.ctx.inputs,
                &caches,
                &adv.aggregated,
                &refv,
            )
            .unwrap()
        };
        let (full, stats_full) = run(4); // one chunk holds the whole trajectory
        let (chunked, stats_chunked) = run(1); // four chunks
        assert!((stats_full.loss - stats_chunked.loss).abs() < 1e-12);
        for (name, g) in &full {
            let c = &chunked[name];
            for (a, b) in g.data().iter().zip(c.data()) {
                let denom = a.abs().max(1e-10);
                assert!(
                    ((a - b).abs() / denom) < 1e-5,
                    "{name}: full {a} vs chunked {b}"
                );
            }
        }
    }

    #[test]
    fn posttraining_logs_synced_iterations_with_unit_ratios() {
        let m = micro(15);
        let mut dc = DyadConfig::default();
        dc.frames = 12;
        dc.seg_min = 4;
        dc.seg_max = 6;
        dc.groups = GroupPartition { expr: 1, jaw: 1, neck: 1, eyelid: 1, eyepose: 1, rot: 1 };
        let dyads: Vec<DyadSample> =
            (0..2).map(|i| crate::synthdata::generate_dyad(&dc, i).unwrap()).collect();
        let motions: Vec<Array<f64>> = dyads.iter().map(|d| d.actor_motion.clone()).collect();
        let motion_stats = crate::synthdata::fit_norm_stats(&motions).unwrap();
        let dataset = crate::arflow::prepare_flow_dataset(
            &dyads,
            &m.vae_store,
            &m.vae_cfg,
            &motion_stats,
            &m.flow_cfg,
        )
        .unwrap();

        let mut cfg = tiny_gdpo_cfg();
        cfg.iters = 2;
        cfg.sync_every = 8;
        cfg.lr = 1e-3;
        let task = GdpoTask {
            flow_cfg: &m.flow_cfg,
            vae_cfg: &m.vae_cfg,
            vae_store: &m.vae_store,
            motion_stats: &motion_stats,
            dataset: &dataset,
            dyads: &dyads,
            groups: dc.groups,
        };
        let out = posttrain_gdpo(&m.flow_store, &task, &cfg, 77).unwrap();
        assert_eq!(out.log.len(), 2);

        // Iteration 0 runs right after a sync: ratios exactly 1.
        assert!(out.log[0].synced);
        assert_eq!(out.log[0].ratio_min, 1.0);
        assert_eq!(out.log[0].ratio_max, 1.0);
        assert_eq!(out.log[0].clip_fraction, 0.0);
        // Iteration 1 is off-policy: θ moved, behavior did not.
        assert!(!out.log[1].synced);
        assert_ne!(out.log[1].ratio_mean, 1.0);

        // The policy actually changed, and the log is JSON-serializable.
        assert_ne!(
            out.store.get("flow.head.w").unwrap().data(),
            m.flow_store.get("flow.head.w").unwrap().data()
        );
        let line = serde_json::to_string(&out.log[0]).unwrap();
        assert!(line.contains("\"group_mean_reward\""));
        for s in &out.log {
            assert!(s.loss.is_finite() && s.kl.is_finite());
            assert_eq!(s.group_mean_reward.len(), 6);
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let ok = GdpoConfig::default();
        ok.validate().unwrap();
        assert!(GdpoConfig { group_size: 1, ..ok.clone() }.validate().is_err());
        assert!(GdpoConfig { sigma: 0.0, ..ok.clone() }.validate().is_err());
        assert!(GdpoConfig { clip: 0.0, ..ok.clone() }.validate().is_err());
        assert!(GdpoConfig { lambda: vec![1.0; 5], ..ok.clone() }.validate().is_err());
        assert!(GdpoConfig { lambda: vec![0.0; 6], ..ok.clone() }.validate().is_err());
        assert!(GdpoConfig { lambda: vec![-1.0, 1.0, 1.0, 1.0, 1.0, 1.0], ..ok.clone() }
            .validate()
            .is_err());
        assert!(GdpoConfig { text_prob: 1.5, ..ok }.validate().is_err());
    }
}
