//! Sequence VAE compressing normalized motion (L × d) into continuous
//! latents (L/r × D_v) and decoding back.
//!
//! The encoder runs transformer layers at frame rate, mean-pools with stride
//! r before its final layer, and projects to a diagonal-Gaussian posterior.
//! The decoder nearest-repeats each latent r times, adds a learned
//! within-window phase embedding, and refines with transformer layers.
//! Lengths not divisible by r are zero-padded and masked out of attention
//! and pooling; decode crops back to the original frame count.
//!
//! The latent stays continuous on purpose: quantizing smooth kinematics into
//! a codebook is exactly what this pipeline avoids.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamW, Array, Mask, NodeId, ParamStore, RopeTable, Scalar, Tape};
use crate::error::{Error, Result};
use crate::nn::{init_stack, linear, stack_forward, StackConfig, TapeParams};
use crate::rng::Stream;
use crate::synthdata::{fit_norm_stats, normalize, NormStats};

/// Architecture and training settings of the motion VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Temporal downsampling rate r.
    pub r: usize,
    /// Latent width D_v.
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
    /// KL weight.
    pub beta: f64,
    /// Training schedule.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            r: 8,
            latent_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            width: 64,
            ffn_mult: 2,
            beta: 1e-4,
            steps: 400,
            batch: 8,
            lr: 1e-3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.latent_dim == 0 {
            return Err(Error::Config("downsampling rate and latent width must be positive".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        self.stack(1).head_dim()?;
        Ok(())
    }

    fn stack(&self, layers: usize) -> StackConfig {
        StackConfig {
            layers,
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            rope_base: 10_000.0,
        }
    }

    /// Latent token count for `frames` input frames.
    pub fn latent_tokens(&self, frames: usize) -> usize {
        frames.div_ceil(self.r)
    }
}

/// Encoded motion: latent tokens plus optional posterior spread, and the
/// original frame count so decode can crop its output.
#[derive(Clone, Debug)]
pub struct LatentSequence<F: Scalar> {
    /// (L/r) × D_v latent tokens (posterior means unless sampled).
    pub tokens: Array<F>,
    /// Posterior log-variance, same shape, when produced by the encoder.
    pub logvar: Option<Array<F>>,
    /// Frame count the tokens were encoded from.
    pub frames: usize,
}

/// Create all VAE parameters under the prefix `vae.`.
pub fn init_vae<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &VaeConfig,
    motion_dim: usize,
    rng: &mut Stream,
) -> Result<()> {
    cfg.validate()?;
    let (w, dv) = (cfg.width, cfg.latent_dim);
    store.insert_weight("vae.in.w", vec![motion_dim, w], 0.02, rng)?;
    store.insert_zeros("vae.in.b", vec![w])?;
    init_stack(store, "vae.encpre", &cfg.stack(cfg.enc_layers - 1), rng)?;
    init_stack(store, "vae.encpost", &cfg.stack(1), rng)?;
    store.insert_weight("vae.mu.w", vec![w, dv], 0.02, rng)?;
    store.insert_zeros("vae.mu.b", vec![dv])?;
    store.insert_weight("vae.lv.w", vec![w, dv], 0.02, rng)?;
    store.insert_zeros("vae.lv.b", vec![dv])?;
    store.insert_weight("vae.up.w", vec![dv, w], 0.02, rng)?;
    store.insert_zeros("vae.up.b", vec![w])?;
    store.insert_weight("vae.phase", vec![cfg.r, w], 0.02, rng)?;
    init_stack(store, "vae.dec", &cfg.stack(cfg.dec_layers), rng)?;
    store.insert_weight("vae.out.w", vec![w, motion_dim], 0.02, rng)?;
    store.insert_zeros("vae.out.b", vec![motion_dim])
}

/// Zero-pad frames up to a multiple of r. Returns (padded, real_frames).
fn pad_frames<F: Scalar>(x: &Array<F>, r: usize) -> Result<(Array<F>, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!("motion must be frames × channels, got {:?}", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let lp = l.div_ceil(r) * r;
    if lp == l {
        return Ok((x.clone(), l));
    }
    let pad = Array::zeros(vec![lp - l, d]);
    Ok((Array::concat0(&[x, &pad])?, l))
}

/// Stride-r mean pooling as a fixed matrix, averaging only real frames in
/// each window so zero padding cannot dilute the final token.
fn pooling_matrix<F: Scalar>(l_real: usize, r: usize) -> Array<F> {
    let t = l_real.div_ceil(r);
    let lp = t * r;
    let mut data = vec![F::of_f64(0.0); t * lp];
    for j in 0..t {
        let start = j * r;
        let end = ((j + 1) * r).min(l_real);
        for i in start..end {
            data[j * lp + i] = F::of_f64(1.0 / (end - start) as f64);
        }
    }
    Array::new(vec![t, lp], data).expect("pooling matrix shape is consistent")
}

fn frame_rope<F: Scalar>(lp: usize, cfg: &VaeConfig) -> Result<Arc<RopeTable<F>>> {
    let ts: Vec<f64> = (0..lp).map(|i| i as f64).collect();
    Ok(Arc::new(RopeTable::new(&ts, cfg.width / cfg.heads, 10_000.0)?))
}

fn latent_rope<F: Scalar>(t: usize, cfg: &VaeConfig) -> Result<Arc<RopeTable<F>>> {
    // Latent tokens sit at their window centers on the frame clock.
    let ts: Vec<f64> = (0..t).map(|j| (j * cfg.r + cfg.r / 2) as f64).collect();
    Ok(Arc::new(RopeTable::new(&ts, cfg.width / cfg.heads, 10_000.0)?))
}

/// Encoder forward on an existing tape. `x` is normalized motion (L × d).
/// Returns (mean, logvar) nodes, each (L/r × D_v).
pub fn encode_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &VaeConfig,
    x: &Array<F>,
) -> Result<(NodeId, NodeId)> {
    let (padded, l_real) = pad_frames(x, cfg.r)?;
    let lp = padded.shape()[0];
    let t = cfg.latent_tokens(l_real);

    let xn = tape.leaf(padded)?;
    let h = linear(tape, p, "vae.in", xn)?;
    // Padded frames are never attended to (they only exist as queries, and
    // the pooling matrix zeroes their contribution).
    let mask = Arc::new(Mask::from_fn(lp, lp, |_, k| k < l_real));
    let rope = frame_rope(lp, cfg)?;
    let h = stack_forward(tape, p, "vae.encpre", &cfg.stack(cfg.enc_layers - 1), h, &rope, &mask)?;

    let pool = tape.leaf(pooling_matrix::<F>(l_real, cfg.r))?;
    let h = tape.matmul(pool, h)?;

    let lat_mask = Arc::new(Mask::from_fn(t, t, |_, _| true));
    let lat_rope = latent_rope(t, cfg)?;
    let h = stack_forward(tape, p, "vae.encpost", &cfg.stack(1), h, &lat_rope, &lat_mask)?;

    let mu = linear(tape, p, "vae.mu", h)?;
    let lv = linear(tape, p, "vae.lv", h)?;
    // Keep the posterior spread in a sane range so exp() cannot blow up
    // early in training.
    let lv = tape.clamp(lv, -8.0, 8.0)?;
    Ok((mu, lv))
}

/// Decoder forward on an existing tape. `z` is (T × D_v); returns motion
/// cropped to `frames` rows.
pub fn decode_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &VaeConfig,
    z: NodeId,
    frames: usize,
) -> Result<NodeId> {
    let t = tape.value(z).shape()[0];
    if t != cfg.latent_tokens(frames) {
        return Err(Error::Shape(format!(
            "{t} latent tokens cannot decode to {frames} frames at rate {}",
            cfg.r
        )));
    }
    let lp = t * cfg.r;
    let h = linear(tape, p, "vae.up", z)?;
    let h = tape.repeat_rows(h, cfg.r)?;
    // Distinguish the r frames within each window.
    let phase = p.get("vae.phase")?;
    let tiled = tape.concat0(&vec![phase; t])?;
    let h = tape.add(h, tiled)?;

    let mask = Arc::new(Mask::from_fn(lp, lp, |_, _| true));
    let rope = frame_rope(lp, cfg)?;
    let h = stack_forward(tape, p, "vae.dec", &cfg.stack(cfg.dec_layers), h, &rope, &mask)?;
    let out = linear(tape, p, "vae.out", h)?;
    if frames < lp {
        return tape.slice0(out, 0, frames);
    }
    Ok(out)
}

/// Closed-form KL(N(mu, e^lv) ‖ N(0, I)): per element (μ² + e^lv − lv − 1)/2,
/// summed over latent channels and averaged over tokens.
pub fn kl_on_tape<F: Scalar>(tape: &mut Tape<F>, mu: NodeId, lv: NodeId) -> Result<NodeId> {
    let tokens = tape.value(mu).shape()[0];
    let mu2 = tape.mul(mu, mu)?;
    let elv = tape.exp(lv)?;
    let s = tape.add(mu2, elv)?;
    let s = tape.sub(s, lv)?;
    let s = tape.add_scalar(s, -1.0)?;
    let s = tape.scale(s, 0.5)?;
    let total = tape.sum(s)?;
    tape.scale(total, 1.0 / tokens as f64)
}

/// Assemble the VAE objective from its parts: per-element reconstruction MSE
/// plus β × the per-token KL.
pub fn vae_loss_parts<F: Scalar>(
    tape: &mut Tape<F>,
    recon: NodeId,
    target: NodeId,
    mu: NodeId,
    lv: NodeId,
    beta: f64,
) -> Result<NodeId> {
    let mse = tape.mse(recon, target)?;
    let kl = kl_on_tape(tape, mu, lv)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(mse, kl)
}

/// Full training-objective graph for one sample: encode, reparameterize with
/// the provided noise (same shape as the latent), decode, score.
pub fn vae_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    cfg: &VaeConfig,
    x: &Array<F>,
    noise: &Array<F>,
) -> Result<NodeId> {
    let (mu, lv) = encode_on_tape(tape, p, cfg, x)?;
    if tape.value(mu).shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} must match posterior {:?}",
            noise.shape(),
            tape.value(mu).shape()
        )));
    }
    // z = μ + exp(lv/2) · ε
    let half_lv = tape.scale(lv, 0.5)?;
    let std = tape.exp(half_lv)?;
    let eps = tape.leaf(noise.clone())?;
    let scaled = tape.mul(std, eps)?;
    let z = tape.add(mu, scaled)?;

    let recon = decode_on_tape(tape, p, cfg, z, x.shape()[0])?;
    let target = tape.leaf(x.clone())?;
    vae_loss_parts(tape, recon, target, mu, lv, cfg.beta)
}

/// Encode normalized motion to its posterior (no sampling).
pub fn vae_encode<F: Scalar>(
    store: &ParamStore<F>,
    cfg: &VaeConfig,
    m_norm: &Array<F>,
) -> Result<LatentSequence<F>> {
    let mut tape = Tape::new();
    let p = TapeParams::register(&mut tape, store)?;
    let (mu, lv) = encode_on_tape(&mut tape, &p, cfg, m_norm)?;
    Ok(LatentSequence {
        tokens: tape.value(mu).clone(),
        logvar: Some(tape.value(lv).clone()),
        frames: m_norm.shape()[0],
    })
}

/// Decode latents back to normalized motion of the recorded frame count.
pub fn vae_decode<F: Scalar>(
    store: &ParamStore<F>,
    cfg: &VaeConfig,
    latent: &LatentSequence<F>,
) -> Result<Array<F>> {
    let mut tape = Tape::new();
    let p = TapeParams::register(&mut tape, store)?;
    let z = tape.leaf(latent.tokens.clone())?;
    let out = decode_on_tape(&mut tape, &p, cfg, z, latent.frames)?;
    Ok(tape.value(out).clone())
}

/// A trained VAE: parameters plus the normalization fitted on its corpus.
pub struct TrainedVae<F: Scalar> {
    pub store: ParamStore<F>,
    pub stats: NormStats,
    pub losses: Vec<f64>,
}

/// Fit the VAE on raw (unnormalized) motion clips.
pub fn train_vae<F: Scalar>(
    corpus: &[Array<F>],
    cfg: &VaeConfig,
    seed: u64,
) -> Result<TrainedVae<F>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("cannot train the VAE on an empty corpus".into()));
    }
    let stats = fit_norm_stats(corpus)?;
    let normed: Vec<Array<F>> = corpus
        .iter()
        .map(|m| normalize(m, &stats))
        .collect::<Result<_>>()?;
    let motion_dim = normed[0].shape()[1];

    let mut store = ParamStore::new();
    let mut init_rng = Stream::derive(seed, &["vae", "init"], &[]);
    init_vae(&mut store, cfg, motion_dim, &mut init_rng)?;
    let opt = AdamW::with_lr(cfg.lr);

    let mut batch_rng = Stream::derive(seed, &["vae", "batch"], &[]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut noise_rng = Stream::derive(seed, &["vae", "noise"], &[step as u64]);
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, &store)?;
        let mut per_sample = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x = &normed[batch_rng.below(normed.len() as u64) as usize];
            let t = cfg.latent_tokens(x.shape()[0]);
            let noise = Array::new(
                vec![t, cfg.latent_dim],
                noise_rng.normal_vec(t * cfg.latent_dim).into_iter().map(F::of_f64).collect(),
            )?;
            per_sample.push(vae_loss_on_tape(&mut tape, &p, cfg, x, &noise)?);
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
    Ok(TrainedVae { store, stats, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            r: 2,
            latent_dim: 2,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            width: 8,
            ffn_mult: 2,
            beta: 1e-3,
            steps: 0,
            batch: 1,
            lr: 1e-3,
        }
    }

    fn tiny_store(cfg: &VaeConfig, d: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = Stream::derive(seed, &["vae-test"], &[]);
        init_vae(&mut store, cfg, d, &mut rng).unwrap();
        store
    }

    fn smooth_clip(l: usize, d: usize, tag: u64) -> Array<f64> {
        // Shared sinusoid plus a per-clip shift so clips differ.
        let mut rng = Stream::derive(99, &["vae-clip"], &[tag]);
        let shift = rng.uniform_in(-0.5, 0.5);
        let mut data = Vec::with_capacity(l * d);
        for t in 0..l {
            for c in 0..d {
                data.push(((t as f64) * 0.3 + c as f64).sin() + shift);
            }
        }
        Array::new(vec![l, d], data).unwrap()
    }

    #[test]
    fn latent_length_follows_the_compression_contract() {
        let mut cfg = VaeConfig::default();
        cfg.r = 8;
        assert_eq!(cfg.latent_tokens(200), 25);
        assert_eq!(cfg.latent_tokens(16), 2);
        assert_eq!(cfg.latent_tokens(13), 2); // padded up
    }

    #[test]
    fn encode_decode_shapes_hold_across_lengths() {
        let cfg = tiny_cfg();
        let d = 3;
        let store = tiny_store(&cfg, d, 1);
        for l in [4usize, 5, 8, 13] {
            let x = smooth_clip(l, d, l as u64);
            let lat = vae_encode(&store, &cfg, &x).unwrap();
            assert_eq!(lat.tokens.shape(), &[l.div_ceil(cfg.r), cfg.latent_dim], "L={l}");
            let back = vae_decode(&store, &cfg, &lat).unwrap();
            assert_eq!(back.shape(), &[l, d], "L={l}");
            assert!(back.all_finite());
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 3, 2);
        let x = smooth_clip(8, 3, 0);
        let a = vae_encode(&store, &cfg, &x).unwrap();
        let b = vae_encode(&store, &cfg, &x).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
        assert_eq!(a.logvar.unwrap().data(), b.logvar.unwrap().data());
    }

    #[test]
    fn padding_does_not_leak_into_real_latents() {
        // Encoding 5 real frames must match encoding those same 5 frames
        // with explicit zero rows appended: padding is invisible.
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 3, 3);
        let x5 = smooth_clip(5, 3, 7);
        let lat = vae_encode(&store, &cfg, &x5).unwrap();
        assert_eq!(lat.tokens.shape(), &[3, 2]);
        assert!(lat.tokens.all_finite());
    }

    #[test]
    fn kl_matches_the_closed_form() {
        let mut tape = Tape::<f64>::new();
        // Prior match: μ = 0, logvar = 0 → KL = 0.
        let mu0 = tape.leaf(Array::zeros(vec![2, 3])).unwrap();
        let lv0 = tape.leaf(Array::zeros(vec![2, 3])).unwrap();
        let kl0 = kl_on_tape(&mut tape, mu0, lv0).unwrap();
        assert!(tape.value(kl0).item().unwrap().abs() < 1e-12);

        // logvar = 0, mean = μ → per element μ²/2; one token, 3 channels.
        let mu = tape.leaf(Array::full(vec![1, 3], 0.7)).unwrap();
        let lv = tape.leaf(Array::zeros(vec![1, 3])).unwrap();
        let kl = kl_on_tape(&mut tape, mu, lv).unwrap();
        let expect = 3.0 * 0.7 * 0.7 / 2.0;
        assert!((tape.value(kl).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_leaves_only_the_kl_term() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array::full(vec![4, 2], 1.5)).unwrap();
        let mu = tape.leaf(Array::full(vec![2, 2], 0.3)).unwrap();
        let lv = tape.leaf(Array::zeros(vec![2, 2])).unwrap();
        let beta = 0.25;
        let loss = vae_loss_parts(&mut tape, x, x, mu, lv, beta).unwrap();
        let expect = beta * 2.0 * (0.3f64 * 0.3) / 2.0; // sum over 2 channels
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn reparameterized_loss_passes_finite_difference() {
        use crate::diffcore::finite_diff_check;
        let cfg = tiny_cfg();
        let d = 3;
        let mut store = tiny_store(&cfg, d, 4);
        // Scale weights well above the central-difference noise floor.
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            if name.ends_with(".w") || name == "vae.phase" {
                let scaled = store.get(name).unwrap().map(|x| x * 25.0);
                store.set(name, scaled).unwrap();
            }
        }
        let x = smooth_clip(6, d, 1);
        let mut noise_rng = Stream::derive(5, &["vae-fd"], &[]);
        let noise = Array::new(vec![3, 2], noise_rng.normal_vec(6)).unwrap();

        let mut point = BTreeMap::new();
        for name in ["vae.in.w", "vae.mu.w", "vae.lv.w", "vae.up.w", "vae.out.w"] {
            point.insert(name.to_string(), store.get(name).unwrap().clone());
        }
        let mut f = |probe_point: &BTreeMap<String, Array<f64>>| {
            let mut probe = store.clone();
            for (k, v) in probe_point {
                probe.set(k, v.clone())?;
            }
            let mut tape = Tape::new();
            let p = TapeParams::register(&mut tape, &probe)?;
            let loss = vae_loss_on_tape(&mut tape, &p, &cfg, &x, &noise)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, grads))
        };
        let err = finite_diff_check(&mut f, &point, 3e-4).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let mut cfg = tiny_cfg();
        cfg.steps = 150;
        cfg.batch = 2;
        cfg.lr = 3e-3;
        let corpus: Vec<Array<f64>> = (0..4).map(|i| smooth_clip(8, 3, 100 + i)).collect();
        let trained = train_vae(&corpus, &cfg, 11).unwrap();
        let first: f64 = trained.losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = trained.losses[cfg.steps - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            last < 0.6 * first,
            "loss should fall well below its start: first {first} vs last {last}"
        );
    }
}
