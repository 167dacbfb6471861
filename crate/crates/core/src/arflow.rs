//! Auto-regressive flow matching over motion latents.
//!
//! A transformer predicts the straight-line velocity (m_l − m_{l,0}) of each
//! latent token from a multimodal conditioning prefix, the actor's motion
//! history, and the noisy token itself. All modalities share one integer
//! timeline: text sits at 0, audio frame i at i, and latent token j at the
//! center of the frame window it compresses, j·r + ⌊r/2⌋. Rotary attention
//! then sees true temporal gaps rather than sequence offsets.
//!
//! Training teacher-forces the history with ground-truth latents and drops
//! each conditioning stream independently with probability `p_drop`,
//! replacing it by a learned per-modality null embedding — the unconditional
//! branch later used for classifier-free guidance.
//!
//! Two execution paths produce identical velocities (pinned by a test):
//! a single "duplex" forward that scores every token of a sequence at once
//! (training and cached-rollout replay), and a key/value-cached incremental
//! runner (generation).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamW, Array, Mask, NodeId, ParamStore, RopeTable, Scalar, Tape};
use crate::error::{Error, Result};
use crate::motionvae::{vae_encode, VaeConfig};
use crate::nn::{
    init_stack, linear, sinusoidal_embedding, stack_forward, stack_forward_cached, KvCache,
    StackConfig, TapeParams,
};
use crate::rng::Stream;
use crate::synthdata::{fit_norm_stats, normalize, DyadSample, NormStats};

/// Flow time is multiplied by this before the sinusoidal embedding so the
/// handful of denoising steps in [0,1] spread across several octaves.
const FLOW_TIME_SCALE: f64 = 1000.0;

/// Architecture and Stage-1 training settings of the velocity model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub heads: usize,
    /// Model width D.
    pub width: usize,
    pub ffn_mult: usize,
    /// Per-modality condition dropout probability.
    pub p_drop: f64,
    /// Text prompt vocabulary (reaction-mode names).
    pub text_vocab: usize,
    /// Audio feature width d_a.
    pub audio_dim: usize,
    /// Latent width D_v.
    pub latent_dim: usize,
    /// Frames per latent token (must match the VAE).
    pub r: usize,
    /// Training schedule.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 4,
            heads: 8,
            width: 128,
            ffn_mult: 2,
            p_drop: 0.1,
            text_vocab: 2,
            audio_dim: 8,
            latent_dim: 16,
            r: 8,
            steps: 1500,
            batch: 8,
            lr: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("dropout probability {} outside [0,1]", self.p_drop)));
        }
        if self.text_vocab == 0 || self.audio_dim == 0 || self.latent_dim == 0 || self.r == 0 {
            return Err(Error::Config("flow stream dimensions must be positive".into()));
        }
        self.stack().head_dim()?;
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Timeline index of latent token j: the center of its frame window.
pub fn motion_timestamp(j: usize, r: usize) -> usize {
    j * r + r / 2
}

/// Timestamps of the conditioning prefix [text; partner audio; partner
/// latents; actor audio] for `frames` audio frames and `latent_tokens`
/// partner latents.
pub fn prefix_timestamps(frames: usize, latent_tokens: usize, r: usize) -> Vec<f64> {
    let mut ts = Vec::with_capacity(1 + 2 * frames + latent_tokens);
    ts.push(0.0);
    ts.extend((0..frames).map(|i| i as f64));
    ts.extend((0..latent_tokens).map(|j| motion_timestamp(j, r) as f64));
    ts.extend((0..frames).map(|i| i as f64));
    ts
}

/// Which conditioning streams are replaced by their null embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropoutMask {
    pub txt: bool,
    pub a_ptn: bool,
    pub m_ptn: bool,
    pub a_act: bool,
}

impl DropoutMask {
    /// Everything conditioned (the fully conditional branch).
    pub fn none() -> Self {
        DropoutMask::default()
    }

    /// Everything nulled (the unconditional branch of guidance).
    pub fn all() -> Self {
        DropoutMask { txt: true, a_ptn: true, m_ptn: true, a_act: true }
    }

    /// Independent per-modality draw.
    pub fn draw(rng: &mut Stream, p: f64) -> Self {
        DropoutMask {
            txt: rng.coin(p),
            a_ptn: rng.coin(p),
            m_ptn: rng.coin(p),
            a_act: rng.coin(p),
        }
    }
}

/// Raw conditioning for one generation: the three observed streams plus an
/// optional text prompt. Partner latents must already be z-normalized with
/// the flow's latent statistics.
#[derive(Clone, Debug)]
pub struct PrefixInputs<F: Scalar> {
    pub text_id: Option<u32>,
    /// (frames, audio_dim)
    pub partner_audio: Array<F>,
    /// (frames/r, latent_dim)
    pub partner_latents: Array<F>,
    /// (frames, audio_dim)
    pub actor_audio: Array<F>,
}

impl<F: Scalar> PrefixInputs<F> {
    fn validate(&self, cfg: &FlowConfig) -> Result<(usize, usize)> {
        let l = self.actor_audio.shape()[0];
        if self.actor_audio.shape() != [l, cfg.audio_dim]
            || self.partner_audio.shape() != [l, cfg.audio_dim]
        {
            return Err(Error::Contract(format!(
                "audio streams must both be ({l}, {}); got {:?} and {:?}",
                cfg.audio_dim,
                self.actor_audio.shape(),
                self.partner_audio.shape()
            )));
        }
        let t_ptn = l.div_ceil(cfg.r);
        if self.partner_latents.shape() != [t_ptn, cfg.latent_dim] {
            return Err(Error::Contract(format!(
                "partner latents must be ({t_ptn}, {}); got {:?}",
                cfg.latent_dim,
                self.partner_latents.shape()
            )));
        }
        if let Some(id) = self.text_id {
            if id as usize >= cfg.text_vocab {
                return Err(Error::Contract(format!(
                    "text id {id} outside vocabulary of {}",
                    cfg.text_vocab
                )));
            }
        }
        Ok((l, t_ptn))
    }

    /// Prefix token count: 1 text + partner audio + partner latents + actor audio.
    pub fn prefix_len(&self, cfg: &FlowConfig) -> usize {
        let l = self.actor_audio.shape()[0];
        1 + 2 * l + l.div_ceil(cfg.r)
    }
}

/// Create all flow-model parameters under the prefix `flow.`.
pub fn init_flow<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &FlowConfig,
    rng: &mut Stream,
) -> Result<()> {
    cfg.validate()?;
    let (d, dv, da) = (cfg.width, cfg.latent_dim, cfg.audio_dim);
    store.insert_weight("flow.txt.emb", vec![cfg.text_vocab, d], 0.02, rng)?;
    store.insert_weight("flow.paud.w", vec![da, d], 0.02, rng)?;
    store.insert_zeros("flow.paud.b", vec![d])?;
    store.insert_weight("flow.pmot.w", vec![dv, d], 0.02, rng)?;
    store.insert_zeros("flow.pmot.b", vec![d])?;
    store.insert_weight("flow.phist.w", vec![dv, d], 0.02, rng)?;
    store.insert_zeros("flow.phist.b", vec![d])?;
    store.insert_weight("flow.pnoise.w", vec![dv, d], 0.02, rng)?;
    store.insert_zeros("flow.pnoise.b", vec![d])?;
    for null in ["txt", "aptn", "mptn", "aact"] {
        store.insert_weight(&format!("flow.null.{null}"), vec![1, d], 0.02, rng)?;
    }
    init_stack(store, "flow.stack", &cfg.stack(), rng)?;
    store.insert_weight("flow.head.w", vec![d, dv], 0.02, rng)?;
    store.insert_zeros("flow.head.b", vec![dv])
}

/// Assemble the conditioning prefix on the tape: projected (or nulled)
/// streams concatenated as [text; partner audio; partner latents; actor
/// audio]. Returns the (P, D) node and the per-token timestamps.
pub fn build_prefix_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &FlowConfig,
    inputs: &PrefixInputs<F>,
    drop: DropoutMask,
) -> Result<(NodeId, Vec<f64>)> {
    let (l, t_ptn) = inputs.validate(cfg)?;

    let txt = match (drop.txt, inputs.text_id) {
        (false, Some(id)) => {
            let emb = p.get("flow.txt.emb")?;
            tape.gather_rows(emb, Arc::new(vec![id as usize]))?
        }
        _ => p.get("flow.null.txt")?,
    };
    let a_ptn = if drop.a_ptn {
        let null = p.get("flow.null.aptn")?;
        tape.repeat_rows(null, l)?
    } else {
        let x = tape.leaf(inputs.partner_audio.clone())?;
        linear(tape, p, "flow.paud", x)?
    };
    let m_ptn = if drop.m_ptn {
        let null = p.get("flow.null.mptn")?;
        tape.repeat_rows(null, t_ptn)?
    } else {
        let x = tape.leaf(inputs.partner_latents.clone())?;
        linear(tape, p, "flow.pmot", x)?
    };
    let a_act = if drop.a_act {
        let null = p.get("flow.null.aact")?;
        tape.repeat_rows(null, l)?
    } else {
        let x = tape.leaf(inputs.actor_audio.clone())?;
        linear(tape, p, "flow.paud", x)?
    };

    let prefix = tape.concat0(&[txt, a_ptn, m_ptn, a_act])?;
    Ok((prefix, prefix_timestamps(l, t_ptn, cfg.r)))
}

/// The duplex attention pattern over [prefix; history; noisy] with P prefix
/// tokens and T latent tokens:
///   prefix  — bidirectional among itself, blind to the suffix;
///   hist j  — prefix plus history up to and including j;
///   noisy j — prefix, history strictly before j, and itself.
/// Noisy tokens are invisible to everyone else, so one forward scores every
/// token exactly as incremental generation would.
pub fn duplex_mask(p_len: usize, t_lat: usize) -> Mask {
    let s = p_len + 2 * t_lat;
    Mask::from_fn(s, s, move |q, k| {
        if q < p_len {
            k < p_len
        } else if q < p_len + t_lat {
            k < p_len || (k >= p_len && k <= q && k < p_len + t_lat)
        } else {
            let j = q - p_len - t_lat;
            k < p_len || (k >= p_len && k < p_len + j) || k == q
        }
    })
}

/// Rows of sinusoidal flow-time embeddings, one per token.
fn time_embedding_rows<F: Scalar>(ts: &[f64], d: usize) -> Result<Array<F>> {
    let rows: Vec<Array<F>> = ts
        .iter()
        .map(|&t| sinusoidal_embedding(t * FLOW_TIME_SCALE, d))
        .collect::<Result<_>>()?;
    let refs: Vec<&Array<F>> = rows.iter().collect();
    Array::concat0(&refs)
}

fn check_flow_times(t_flow: &[f64]) -> Result<()> {
    for &t in t_flow {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
        }
    }
    Ok(())
}

/// One duplex forward: velocities for all T latent tokens at their given
/// flow times. `hist` are the (teacher-forced or generated) clean latents,
/// `noisy` the partially denoised states, both (T, D_v).
pub fn velocities_duplex<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &FlowConfig,
    prefix: NodeId,
    prefix_ts: &[f64],
    hist: &Array<F>,
    noisy: &Array<F>,
    t_flow: &[f64],
) -> Result<NodeId> {
    let t_lat = hist.shape()[0];
    if noisy.shape() != hist.shape() || t_flow.len() != t_lat {
        return Err(Error::Contract(format!(
            "history {:?}, noisy {:?} and {} flow times must agree",
            hist.shape(),
            noisy.shape(),
            t_flow.len()
        )));
    }
    check_flow_times(t_flow)?;
    let p_len = tape.value(prefix).shape()[0];

    let h = tape.leaf(hist.clone())?;
    let h = linear(tape, p, "flow.phist", h)?;
    let n = tape.leaf(noisy.clone())?;
    let n = linear(tape, p, "flow.pnoise", n)?;
    let temb = tape.leaf(time_embedding_rows(t_flow, cfg.width)?)?;
    let n = tape.add(n, temb)?;

    let x = tape.concat0(&[prefix, h, n])?;
    let motion_ts: Vec<f64> = (0..t_lat).map(|j| motion_timestamp(j, cfg.r) as f64).collect();
    let mut all_ts = prefix_ts.to_vec();
    all_ts.extend(&motion_ts);
    all_ts.extend(&motion_ts);
    let rope = Arc::new(RopeTable::new(&all_ts, cfg.head_dim(), 10_000.0)?);
    let mask = Arc::new(duplex_mask(p_len, t_lat));

    let out = stack_forward(tape, p, "flow.stack", &cfg.stack(), x, &rope, &mask)?;
    let noisy_rows = tape.slice0(out, p_len + t_lat, p_len + 2 * t_lat)?;
    linear(tape, p, "flow.head", noisy_rows)
}

/// Linear interpolation between noise and data at per-token times, and the
/// straight-line regression target: (m_t, m − m_0).
pub fn flow_training_pair<F: Scalar>(
    clean: &Array<F>,
    noise: &Array<F>,
    t_flow: &[f64],
) -> Result<(Array<F>, Array<F>)> {
    if clean.shape() != noise.shape() || clean.shape()[0] != t_flow.len() {
        return Err(Error::Contract(format!(
            "clean {:?}, noise {:?}, {} times must agree",
            clean.shape(),
            noise.shape(),
            t_flow.len()
        )));
    }
    check_flow_times(t_flow)?;
    let dv = clean.shape()[1];
    let mut noisy = Vec::with_capacity(clean.len());
    let mut target = Vec::with_capacity(clean.len());
    for (j, &t) in t_flow.iter().enumerate() {
        for c in 0..dv {
            let m = clean.data()[j * dv + c].as_f64();
            let m0 = noise.data()[j * dv + c].as_f64();
            noisy.push(F::of_f64(t * m + (1.0 - t) * m0));
            target.push(F::of_f64(m - m0));
        }
    }
    Ok((
        Array::new(clean.shape().to_vec(), noisy)?,
        Array::new(clean.shape().to_vec(), target)?,
    ))
}

/// Rectified-flow objective for one sample: MSE between predicted velocities
/// and (m − m_0), teacher-forced history.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &FlowConfig,
    inputs: &PrefixInputs<F>,
    drop: DropoutMask,
    clean: &Array<F>,
    noise: &Array<F>,
    t_flow: &[f64],
) -> Result<NodeId> {
    let (noisy, target) = flow_training_pair(clean, noise, t_flow)?;
    let (prefix, prefix_ts) = build_prefix_on_tape(tape, p, cfg, inputs, drop)?;
    let v = velocities_duplex(tape, p, cfg, prefix, &prefix_ts, clean, &noisy, t_flow)?;
    let tgt = tape.leaf(target)?;
    tape.mse(v, tgt)
}

/// One prepared Stage-1 training sample: conditioning plus the z-normalized
/// actor latents the flow learns to generate.
#[derive(Clone, Debug)]
pub struct FlowSample<F: Scalar> {
    pub inputs: PrefixInputs<F>,
    /// (frames/r, D_v), z-normalized.
    pub latents: Array<F>,
    /// Actor voice activity per frame (drives speak/listen guidance gating).
    pub actor_vad: Vec<bool>,
}

/// A corpus encoded for flow training, with the latent normalization the
/// flow operates under (stored in its checkpoint, needed to undo at decode).
#[derive(Clone, Debug)]
pub struct FlowDataset<F: Scalar> {
    pub samples: Vec<FlowSample<F>>,
    pub latent_stats: NormStats,
}

/// Encode one conversation through the frozen VAE under *given*
/// normalization statistics. Held-out evaluation must reuse the training
/// statistics rather than refit them, so this is the shared path for both.
pub fn encode_flow_sample<F: Scalar>(
    dyad: &DyadSample,
    vae_store: &ParamStore<F>,
    vae_cfg: &VaeConfig,
    motion_stats: &NormStats,
    latent_stats: &NormStats,
) -> Result<FlowSample<F>> {
    let a = normalize(&dyad.actor_motion.cast::<F>(), motion_stats)?;
    let p = normalize(&dyad.partner_motion.cast::<F>(), motion_stats)?;
    let a_lat = vae_encode(vae_store, vae_cfg, &a)?.tokens;
    let p_lat = vae_encode(vae_store, vae_cfg, &p)?.tokens;
    Ok(FlowSample {
        inputs: PrefixInputs {
            text_id: dyad.text_prompt,
            partner_audio: dyad.partner_audio.cast::<F>(),
            partner_latents: normalize(&p_lat, latent_stats)?,
            actor_audio: dyad.actor_audio.cast::<F>(),
        },
        latents: normalize(&a_lat, latent_stats)?,
        actor_vad: dyad.actor_vad.clone(),
    })
}

/// Encode dyad samples through the frozen VAE into flow training samples:
/// normalize motion, take posterior means, z-normalize the latent channels
/// (statistics fitted over actor and partner latents jointly).
pub fn prepare_flow_dataset<F: Scalar>(
    dyads: &[DyadSample],
    vae_store: &ParamStore<F>,
    vae_cfg: &VaeConfig,
    motion_stats: &NormStats,
    flow_cfg: &FlowConfig,
) -> Result<FlowDataset<F>> {
    if vae_cfg.r != flow_cfg.r || vae_cfg.latent_dim != flow_cfg.latent_dim {
        return Err(Error::Config(format!(
            "flow (r={}, D_v={}) does not match VAE (r={}, D_v={})",
            flow_cfg.r, flow_cfg.latent_dim, vae_cfg.r, vae_cfg.latent_dim
        )));
    }
    let mut pool = Vec::with_capacity(2 * dyads.len());
    for dyad in dyads {
        let a = normalize(&dyad.actor_motion.cast::<F>(), motion_stats)?;
        let p = normalize(&dyad.partner_motion.cast::<F>(), motion_stats)?;
        pool.push(vae_encode(vae_store, vae_cfg, &a)?.tokens);
        pool.push(vae_encode(vae_store, vae_cfg, &p)?.tokens);
    }
    let latent_stats = fit_norm_stats(&pool)?;

    let samples = dyads
        .iter()
        .map(|d| encode_flow_sample(d, vae_store, vae_cfg, motion_stats, &latent_stats))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowDataset { samples, latent_stats })
}

/// A Stage-1 checkpoint: parameters plus the training loss curve.
pub struct TrainedFlow<F: Scalar> {
    pub store: ParamStore<F>,
    pub losses: Vec<f64>,
}

/// Stage-1 training: teacher-forced rectified flow with per-token uniform
/// times, fresh noise every step, and independent per-modality condition
/// dropout.
pub fn train_flow<F: Scalar>(
    dataset: &FlowDataset<F>,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<TrainedFlow<F>> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Contract("cannot train the flow on an empty dataset".into()));
    }
    let mut store = ParamStore::new();
    let mut init_rng = Stream::derive(seed, &["flow", "init"], &[]);
    init_flow(&mut store, cfg, &mut init_rng)?;
    let opt = AdamW::with_lr(cfg.lr);

    let mut batch_rng = Stream::derive(seed, &["flow", "batch"], &[]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut draw_rng = Stream::derive(seed, &["flow", "draw"], &[step as u64]);
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, &store)?;
        let mut per_sample = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let sample = &dataset.samples[batch_rng.below(dataset.samples.len() as u64) as usize];
            let t_lat = sample.latents.shape()[0];
            let t_flow: Vec<f64> = (0..t_lat).map(|_| draw_rng.uniform()).collect();
            let noise = Array::new(
                vec![t_lat, cfg.latent_dim],
                draw_rng.normal_vec(t_lat * cfg.latent_dim).into_iter().map(F::of_f64).collect(),
            )?;
            let drop = DropoutMask::draw(&mut draw_rng, cfg.p_drop);
            per_sample.push(flow_loss_on_tape(
                &mut tape, &p, cfg, &sample.inputs, drop, &sample.latents, &noise, &t_flow,
            )?);
        }
        let mut total = per_sample[0];
        for &l in &per_sample[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / cfg.batch as f64)?;
        let grads = tape.backward(loss)?;
        store.adamw_step(&grads, &opt)?;
        losses.push(tape.value(loss).item()?.as_f64());
    }
    Ok(TrainedFlow { store, losses })
}

/// Incremental velocity evaluator: the conditioning prefix is encoded once,
/// generated latents are appended as history, and each denoising probe runs
/// a single-token pass against the cached keys/values.
pub struct FlowRunner<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    cfg: FlowConfig,
    cache: KvCache<F>,
    prefix_len: usize,
    hist_tokens: usize,
}

impl<'a, F: Scalar> FlowRunner<'a, F> {
    /// Encode the prefix into the cache.
    pub fn new(
        store: &'a ParamStore<F>,
        cfg: &FlowConfig,
        inputs: &PrefixInputs<F>,
        drop: DropoutMask,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, store)?;
        let (prefix, prefix_ts) = build_prefix_on_tape(&mut tape, &p, cfg, inputs, drop)?;
        let p_len = prefix_ts.len();
        let rope = Arc::new(RopeTable::new(&prefix_ts, cfg.head_dim(), 10_000.0)?);
        let mask = Arc::new(Mask::from_fn(p_len, p_len, |_, _| true));
        let mut cache = KvCache::new();
        stack_forward_cached(
            &mut tape,
            &p,
            "flow.stack",
            &cfg.stack(),
            prefix,
            &rope,
            &mask,
            &mut cache,
            true,
        )?;
        Ok(FlowRunner { store, cfg: cfg.clone(), cache, prefix_len: p_len, hist_tokens: 0 })
    }

    /// Tokens currently attended to (prefix + appended history).
    pub fn context_tokens(&self) -> usize {
        self.prefix_len + self.hist_tokens
    }

    /// Index of the latent token currently being generated.
    pub fn next_token(&self) -> usize {
        self.hist_tokens
    }

    fn one_token_pass(
        &mut self,
        x_proj: &str,
        latent: &Array<F>,
        add_time: Option<f64>,
        timestamp: f64,
        append: bool,
    ) -> Result<Array<F>> {
        if latent.shape() != [1, self.cfg.latent_dim] {
            return Err(Error::Contract(format!(
                "runner expects a (1, {}) latent, got {:?}",
                self.cfg.latent_dim,
                latent.shape()
            )));
        }
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, self.store)?;
        let x = tape.leaf(latent.clone())?;
        let mut x = linear(&mut tape, &p, x_proj, x)?;
        if let Some(t) = add_time {
            let temb = tape.leaf(time_embedding_rows(&[t], self.cfg.width)?)?;
            x = tape.add(x, temb)?;
        }
        let rope = Arc::new(RopeTable::new(&[timestamp], self.cfg.head_dim(), 10_000.0)?);
        let mask = Arc::new(Mask::from_fn(1, self.context_tokens() + 1, |_, _| true));
        let out = stack_forward_cached(
            &mut tape,
            &p,
            "flow.stack",
            &self.cfg.stack(),
            x,
            &rope,
            &mask,
            &mut self.cache,
            append,
        )?;
        let out = if append {
            out // history tokens do not need the velocity head
        } else {
            linear(&mut tape, &p, "flow.head", out)?
        };
        Ok(tape.value(out).clone())
    }

    /// Velocity of the next token at flow time `t` and noisy state `m_t`.
    pub fn velocity(&mut self, noisy: &Array<F>, t: f64) -> Result<Array<F>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
        }
        let ts = motion_timestamp(self.hist_tokens, self.cfg.r) as f64;
        self.one_token_pass("flow.pnoise", noisy, Some(t), ts, false)
    }

    /// Append a finished latent to the history.
    pub fn append_history(&mut self, latent: &Array<F>) -> Result<()> {
        let ts = motion_timestamp(self.hist_tokens, self.cfg.r) as f64;
        self.one_token_pass("flow.phist", latent, None, ts, true)?;
        self.hist_tokens += 1;
        Ok(())
    }
}
