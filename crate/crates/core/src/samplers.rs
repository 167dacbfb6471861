//! Token samplers: Euler ODE and Euler–Maruyama SDE integration of the
//! learned velocity field, classifier-free guidance with separate weights
//! for speaking and listening stretches, auto-regressive generation with a
//! full per-step trace, and sliding-window inference for sequences longer
//! than the training horizon.
//!
//! Each latent token is denoised from pure noise over T uniform steps
//! Δt = 1/T, then appended to the actor's history before the next token
//! starts. The SDE variant injects σ·√Δt·ε exploration noise per step and
//! records every ε so a trajectory replays bit-identically — the contract
//! reinforcement-learning replay depends on.

use serde::{Deserialize, Serialize};

use crate::arflow::{DropoutMask, FlowConfig, FlowRunner, PrefixInputs};
use crate::diffcore::{Array, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::motionvae::{vae_decode, LatentSequence, VaeConfig};
use crate::pipeline::ArrayContainer;
use crate::rng::Stream;
use crate::synthdata::{denormalize, NormStats};

/// Integration mode for the denoising trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Deterministic Euler steps.
    Ode,
    /// Euler–Maruyama with per-step exploration noise.
    Sde,
}

/// Denoising schedule and guidance settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Denoising steps T; Δt = 1/T.
    pub steps: usize,
    /// SDE noise scale σ.
    pub sigma: f64,
    /// Guidance weight on tokens where the actor speaks.
    pub omega_speak: f64,
    /// Guidance weight on tokens where the actor listens.
    pub omega_listen: f64,
    pub mode: SampleMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 10,
            sigma: 0.5,
            omega_speak: 1.0,
            omega_listen: 1.0,
            mode: SampleMode::Ode,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one denoising step".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!("SDE noise scale {} is negative", self.sigma)));
        }
        Ok(())
    }

    /// Guidance is a no-op when both weights are exactly 1: the conditional
    /// velocity passes through and the unconditional pass can be skipped.
    pub fn needs_guidance(&self) -> bool {
        self.omega_speak != 1.0 || self.omega_listen != 1.0
    }
}

/// Euler step m̂ + Δt·v.
pub fn ode_step<F: Scalar>(m: &Array<F>, v: &Array<F>, dt: f64) -> Result<Array<F>> {
    if m.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "state {:?} and velocity {:?} differ",
            m.shape(),
            v.shape()
        )));
    }
    let data = m
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| F::of_f64(a.as_f64() + dt * b.as_f64()))
        .collect();
    Array::new(m.shape().to_vec(), data)
}

/// Euler–Maruyama step m̂ + Δt·v + σ·√Δt·ε.
pub fn sde_step<F: Scalar>(
    m: &Array<F>,
    v: &Array<F>,
    dt: f64,
    sigma: f64,
    eps: &Array<F>,
) -> Result<Array<F>> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("SDE noise scale {sigma} is negative")));
    }
    if m.shape() != v.shape() || m.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "state {:?}, velocity {:?} and noise {:?} differ",
            m.shape(),
            v.shape(),
            eps.shape()
        )));
    }
    let coef = sigma * dt.sqrt();
    let data = m
        .data()
        .iter()
        .zip(v.data())
        .zip(eps.data())
        .map(|((a, b), e)| F::of_f64(a.as_f64() + dt * b.as_f64() + coef * e.as_f64()))
        .collect();
    Array::new(m.shape().to_vec(), data)
}

/// Guided velocity v_∅ + ω·(v_cond − v_∅). The identities at ω = 0 and
/// ω = 1 are exact (no arithmetic), so gating weights of 1 provably never
/// perturb the conditional trajectory.
pub fn cfg_velocity<F: Scalar>(
    v_uncond: &Array<F>,
    v_cond: &Array<F>,
    omega: f64,
) -> Result<Array<F>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::Shape(format!(
            "unconditional {:?} and conditional {:?} velocities differ",
            v_uncond.shape(),
            v_cond.shape()
        )));
    }
    if omega == 1.0 {
        return Ok(v_cond.clone());
    }
    if omega == 0.0 {
        return Ok(v_uncond.clone());
    }
    let data = v_uncond
        .data()
        .iter()
        .zip(v_cond.data())
        .map(|(u, c)| {
            let u = u.as_f64();
            F::of_f64(u + omega * (c.as_f64() - u))
        })
        .collect();
    Array::new(v_uncond.shape().to_vec(), data)
}

/// Guidance weight of latent token `token`: majority voice-activity over
/// the frames it compresses decides speaking vs listening; ties and
/// fully-out-of-range windows count as listening.
pub fn token_omega(
    actor_vad: &[bool],
    token: usize,
    r: usize,
    omega_speak: f64,
    omega_listen: f64,
) -> f64 {
    let lo = token * r;
    let hi = ((token + 1) * r).min(actor_vad.len());
    let frames = hi.saturating_sub(lo);
    if frames == 0 {
        return omega_listen;
    }
    let speaking = actor_vad[lo..hi].iter().filter(|&&v| v).count();
    if 2 * speaking > frames {
        omega_speak
    } else {
        omega_listen
    }
}

/// One recorded denoising step of one token.
#[derive(Clone, Debug)]
pub struct TraceStep<F: Scalar> {
    /// Flow time at the start of the step.
    pub t: f64,
    pub pre: Array<F>,
    /// The velocity actually integrated (guided when guidance is active).
    pub velocity: Array<F>,
    /// Injected exploration noise; `None` in ODE mode.
    pub noise: Option<Array<F>>,
    pub post: Array<F>,
}

/// All denoising steps of one token plus the guidance weight applied.
#[derive(Clone, Debug)]
pub struct TokenTrace<F: Scalar> {
    pub steps: Vec<TraceStep<F>>,
    pub omega: f64,
}

/// Complete record of one generation: every intermediate state, the final
/// latents, and the peak attention context reached (memory instrumentation).
#[derive(Clone, Debug)]
pub struct GenerationTrace<F: Scalar> {
    pub tokens: Vec<TokenTrace<F>>,
    /// (n_tokens, D_v) final denoised latents.
    pub latents: Array<F>,
    /// Whether an unconditional pass ran alongside the conditional one.
    pub guided: bool,
    pub peak_context_tokens: usize,
}

impl<F: Scalar> GenerationTrace<F> {
    /// Re-integrate every step from its recorded pre-state, velocity and
    /// noise; errors if any post-state fails to reproduce bit-identically.
    pub fn replay_check(&self, dt: f64, sigma: f64) -> Result<()> {
        for (l, tok) in self.tokens.iter().enumerate() {
            for (s, step) in tok.steps.iter().enumerate() {
                let again = match &step.noise {
                    Some(eps) => sde_step(&step.pre, &step.velocity, dt, sigma, eps)?,
                    None => ode_step(&step.pre, &step.velocity, dt)?,
                };
                if again.data() != step.post.data() {
                    return Err(Error::Contract(format!(
                        "token {l} step {s} does not replay bit-identically"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pack the trace into the array container format for offline
    /// inspection.
    pub fn to_container(&self) -> Result<ArrayContainer> {
        let mut c = ArrayContainer::new();
        c.put_array("latents", &self.latents)?;
        for (l, tok) in self.tokens.iter().enumerate() {
            for (s, step) in tok.steps.iter().enumerate() {
                c.put_array(&format!("tok{l:04}.s{s:02}.pre"), &step.pre)?;
                c.put_array(&format!("tok{l:04}.s{s:02}.vel"), &step.velocity)?;
                c.put_array(&format!("tok{l:04}.s{s:02}.post"), &step.post)?;
                if let Some(eps) = &step.noise {
                    c.put_array(&format!("tok{l:04}.s{s:02}.eps"), eps)?;
                }
            }
        }
        Ok(c)
    }
}

/// Shared generation core: append `carry` pre-existing latents as history,
/// then denoise `n_tokens` fresh tokens. Noise streams are keyed by
/// `key_offset` plus the fresh token's ordinal, so a token's randomness is
/// tied to its global position, not to the window it lands in.
fn denoise_tokens<F: Scalar>(
    store: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    sampler: &SamplerConfig,
    inputs: &PrefixInputs<F>,
    actor_vad: &[bool],
    carry: &[Array<F>],
    n_tokens: usize,
    key_offset: u64,
) -> Result<GenerationTrace<F>> {
    sampler.validate()?;
    if n_tokens == 0 {
        return Err(Error::Contract("cannot generate zero tokens".into()));
    }
    let dt = 1.0 / sampler.steps as f64;
    let dv = flow_cfg.latent_dim;
    let guided = sampler.needs_guidance();

    let mut cond = FlowRunner::new(store, flow_cfg, inputs, DropoutMask::none())?;
    // The unconditional branch nulls the conditioning streams only; it sees
    // the same generated history as the conditional one.
    let mut uncond = if guided {
        Some(FlowRunner::new(store, flow_cfg, inputs, DropoutMask::all())?)
    } else {
        None
    };
    for lat in carry {
        cond.append_history(lat)?;
        if let Some(u) = &mut uncond {
            u.append_history(lat)?;
        }
    }

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut finished: Vec<Array<F>> = Vec::with_capacity(n_tokens);
    let mut peak = cond.context_tokens();
    for fresh in 0..n_tokens {
        let token = cond.next_token(); // window-local index, drives timestamps
        let omega = token_omega(
            actor_vad,
            token,
            flow_cfg.r,
            sampler.omega_speak,
            sampler.omega_listen,
        );
        let mut rng =
            Stream::derive(sampler.seed, &["sample", "noise"], &[key_offset + fresh as u64]);
        let mut m =
            Array::new(vec![1, dv], rng.normal_vec(dv).into_iter().map(F::of_f64).collect())?;
        let mut steps = Vec::with_capacity(sampler.steps);
        for s in 0..sampler.steps {
            let t = s as f64 * dt;
            let v_c = cond.velocity(&m, t)?;
            let v = match &mut uncond {
                Some(u) => cfg_velocity(&u.velocity(&m, t)?, &v_c, omega)?,
                None => v_c,
            };
            let (noise, post) = match sampler.mode {
                SampleMode::Ode => (None, ode_step(&m, &v, dt)?),
                SampleMode::Sde => {
                    let eps = Array::new(
                        vec![1, dv],
                        rng.normal_vec(dv).into_iter().map(F::of_f64).collect(),
                    )?;
                    let post = sde_step(&m, &v, dt, sampler.sigma, &eps)?;
                    (Some(eps), post)
                }
            };
            if !post.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite state at token {token} step {s}"
                )));
            }
            steps.push(TraceStep { t, pre: m.clone(), velocity: v, noise, post: post.clone() });
            m = post;
        }
        cond.append_history(&m)?;
        if let Some(u) = &mut uncond {
            u.append_history(&m)?;
        }
        peak = peak.max(cond.context_tokens());
        tokens.push(TokenTrace { steps, omega });
        finished.push(m);
    }

    let refs: Vec<&Array<F>> = finished.iter().collect();
    Ok(GenerationTrace {
        latents: Array::concat0(&refs)?,
        tokens,
        guided,
        peak_context_tokens: peak,
    })
}

/// Generate `n_tokens` latents auto-regressively from an empty history.
///
/// Each token starts from a standard-normal draw and is integrated over the
/// sampler's step grid; the finished latent joins the history before the
/// next token begins.
pub fn generate_sequence<F: Scalar>(
    store: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    sampler: &SamplerConfig,
    inputs: &PrefixInputs<F>,
    actor_vad: &[bool],
    n_tokens: usize,
) -> Result<GenerationTrace<F>> {
    denoise_tokens(store, flow_cfg, sampler, inputs, actor_vad, &[], n_tokens, 0)
}

/// Sliding-window settings for sequences longer than the training horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Latent tokens per window W.
    pub window_tokens: usize,
    /// Trailing latents carried into the next window as causal history k.
    pub carry: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_tokens: 25, carry: 1 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_tokens == 0 || self.carry >= self.window_tokens {
            return Err(Error::Config(format!(
                "window of {} tokens with {} carried is degenerate",
                self.window_tokens, self.carry
            )));
        }
        Ok(())
    }
}

/// Per-window accounting for tests and memory instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowReport {
    /// First global token index covered by the window.
    pub start: usize,
    pub carried: usize,
    pub generated: usize,
}

/// Output of sliding-window inference: the stitched latent sequence, the
/// decoded motion, and how the windows unfolded.
#[derive(Clone, Debug)]
pub struct SlidingOutput<F: Scalar> {
    /// (ceil(total_frames/r), D_v), z-normalized latents.
    pub latents: Array<F>,
    /// (total_frames, d) motion in original units.
    pub motion: Array<F>,
    pub windows: Vec<WindowReport>,
    /// Maximum attention context across all windows — stays bounded by the
    /// window size no matter how long the sequence grows.
    pub peak_context_tokens: usize,
}

/// Generate an arbitrarily long sequence in windows of W latent tokens,
/// carrying the last k finished latents into the next window as causal
/// history (never re-generated). Conditioning streams are re-sliced per
/// window and timestamps restart locally, matching what the model saw in
/// training. The stitched latents are denormalized and decoded to motion.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_generate<F: Scalar>(
    store: &ParamStore<F>,
    flow_cfg: &FlowConfig,
    sampler: &SamplerConfig,
    window: &WindowConfig,
    inputs: &PrefixInputs<F>,
    actor_vad: &[bool],
    vae_store: &ParamStore<F>,
    vae_cfg: &VaeConfig,
    latent_stats: &NormStats,
    motion_stats: &NormStats,
) -> Result<SlidingOutput<F>> {
    window.validate()?;
    let total_frames = inputs.actor_audio.shape()[0];
    if actor_vad.len() != total_frames {
        return Err(Error::Contract(format!(
            "{} VAD frames for {} audio frames",
            actor_vad.len(),
            total_frames
        )));
    }
    let r = flow_cfg.r;
    let total_tokens = total_frames.div_ceil(r);
    let (w, k) = (window.window_tokens, window.carry);

    let mut stitched: Vec<Array<F>> = Vec::with_capacity(total_tokens);
    let mut reports = Vec::new();
    let mut peak = 0usize;
    let mut start = 0usize;
    while stitched.len() < total_tokens {
        let end = (start + w).min(total_tokens);
        let carried = stitched.len() - start;
        let f0 = start * r;
        let f1 = (end * r).min(total_frames);
        let win_inputs = PrefixInputs {
            text_id: inputs.text_id,
            partner_audio: inputs.partner_audio.slice0(f0, f1)?,
            partner_latents: inputs.partner_latents.slice0(start, end)?,
            actor_audio: inputs.actor_audio.slice0(f0, f1)?,
        };
        let trace = denoise_tokens(
            store,
            flow_cfg,
            sampler,
            &win_inputs,
            &actor_vad[f0..f1],
            &stitched[start..],
            end - start - carried,
            stitched.len() as u64,
        )?;
        peak = peak.max(trace.peak_context_tokens);
        reports.push(WindowReport { start, carried, generated: end - start - carried });
        for j in 0..trace.latents.shape()[0] {
            stitched.push(trace.latents.slice0(j, j + 1)?);
        }
        if end == total_tokens {
            break;
        }
        start = end - k;
    }

    let refs: Vec<&Array<F>> = stitched.iter().collect();
    let latents = Array::concat0(&refs)?;
    let denorm = denormalize(&latents, latent_stats)?;
    let motion_norm = vae_decode(
        vae_store,
        vae_cfg,
        &LatentSequence { tokens: denorm, logvar: None, frames: total_frames },
    )?;
    let motion = denormalize(&motion_norm, motion_stats)?;
    Ok(SlidingOutput { latents, motion, windows: reports, peak_context_tokens: peak })
}
