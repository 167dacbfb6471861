//! The dyad generator itself.
//!
//! Stream discipline: every random quantity (turn lengths, intents, modes,
//! audio sinusoids, per-group idle noise, response amplitudes) draws from its
//! own stream derived from (seed, stream name, participant, sample index).
//! Changing the size of one channel group therefore never perturbs another
//! group's trajectory for the same seed.

use crate::diffcore::Array;
use crate::error::Result;
use crate::rng::Stream;

use super::{DyadConfig, DyadSample, ListenSegment, Speaker, Turn};

/// Sum of `n` random-phase sinusoids added onto one channel.
struct SinusoidBank {
    amps: Vec<f64>,
    /// Angular increment per frame.
    steps: Vec<f64>,
    phases: Vec<f64>,
}

impl SinusoidBank {
    fn draw(rng: &mut Stream, n: usize, amp_range: (f64, f64), freq_hz: (f64, f64), fps: f64) -> Self {
        let mut amps = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for _ in 0..n {
            amps.push(rng.uniform_in(amp_range.0, amp_range.1));
            steps.push(2.0 * std::f64::consts::PI * rng.uniform_in(freq_hz.0, freq_hz.1) / fps);
            phases.push(rng.uniform_in(0.0, 2.0 * std::f64::consts::PI));
        }
        SinusoidBank { amps, steps, phases }
    }

    fn at(&self, t: usize) -> f64 {
        let mut v = 0.0;
        for k in 0..self.amps.len() {
            v += self.amps[k] * (self.steps[k] * t as f64 + self.phases[k]).sin();
        }
        v
    }
}

/// Raised-cosine onset ramp over the first `ramp` frames of a turn.
fn edge_ramp(i: usize, ramp: usize) -> f64 {
    if i >= ramp {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * (i + 1) as f64 / (ramp + 1) as f64).cos())
    }
}

/// Full Hann window over a segment of `n` frames: zero at both ends.
fn hann(i: usize, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
}

/// Response waveform frequency for an utterance intent.
fn intent_freq_hz(intent: u32) -> f64 {
    0.6 + 0.35 * intent as f64
}

/// Phase offset selecting one of `modes` equally likely reactions. The
/// offsets are equally spaced, so the average response over modes is zero
/// for any mode count ≥ 2, and ±w(t) exactly for two modes.
fn mode_phase(mode: u32, modes: u32) -> f64 {
    2.0 * std::f64::consts::PI * mode as f64 / modes as f64
}

struct Participant {
    motion: Vec<f64>,
    audio: Vec<f64>,
    vad: Vec<bool>,
}

/// Build the alternating turn structure. The tail is absorbed into the last
/// turn so no turn is shorter than `seg_min`.
fn draw_turns(cfg: &DyadConfig, rng: &mut Stream) -> Vec<Turn> {
    let mut turns = Vec::new();
    let mut speaker = if rng.coin(0.5) { Speaker::Actor } else { Speaker::Partner };
    let mut pos = 0;
    while pos < cfg.frames {
        let mut len =
            cfg.seg_min + rng.below((cfg.seg_max - cfg.seg_min + 1) as u64) as usize;
        if cfg.frames - pos < len + cfg.seg_min {
            len = cfg.frames - pos;
        }
        turns.push(Turn { start: pos, end: pos + len, speaker, intent: 0 });
        pos += len;
        speaker = match speaker {
            Speaker::Actor => Speaker::Partner,
            Speaker::Partner => Speaker::Actor,
        };
    }
    turns
}

/// Generate audio features for one participant: smooth random processes
/// gated by that participant's speaking turns, with a short raised-cosine
/// ramp at each turn edge. Returns (features, per-frame envelope).
fn gen_audio(
    cfg: &DyadConfig,
    rng: &mut Stream,
    turns: &[Turn],
    who: Speaker,
) -> (Vec<f64>, Vec<f64>) {
    let (l, da) = (cfg.frames, cfg.audio_dim);
    let banks: Vec<SinusoidBank> = (0..da)
        .map(|_| SinusoidBank::draw(rng, 3, (0.3, 1.0), (0.5, 3.0), cfg.fps))
        .collect();
    let mut gate = vec![0.0; l];
    for turn in turns.iter().filter(|t| t.speaker == who) {
        let n = turn.end - turn.start;
        for i in 0..n {
            gate[turn.start + i] = edge_ramp(i, 3) * edge_ramp(n - 1 - i, 3);
        }
    }
    let mut audio = vec![0.0; l * da];
    let mut envelope = vec![0.0; l];
    for t in 0..l {
        let mut abs_sum = 0.0;
        for (c, bank) in banks.iter().enumerate() {
            let v = bank.at(t) * gate[t];
            audio[t * da + c] = v;
            abs_sum += v.abs();
        }
        envelope[t] = abs_sum / da as f64;
    }
    (audio, envelope)
}

fn participant_label(who: Speaker) -> &'static str {
    match who {
        Speaker::Actor => "actor",
        Speaker::Partner => "partner",
    }
}

/// Generate motion for one participant given both envelopes and the shared
/// turn structure. `mode` is this participant's hidden reaction mode.
fn gen_motion(
    cfg: &DyadConfig,
    index: u64,
    who: Speaker,
    turns: &[Turn],
    own_envelope: &[f64],
    mode: u32,
) -> Vec<f64> {
    let (l, d) = (cfg.frames, cfg.motion_dim());
    let g = &cfg.groups;
    let label = participant_label(who);
    let mut motion = vec![0.0; l * d];

    // Idle noise: every group gets small smooth wander from its own stream.
    let group_ranges = [
        ("expr", g.expr_range()),
        ("jaw", g.jaw_range()),
        ("neck", g.neck_range()),
        ("eyelid", g.eyelid_range()),
        ("eyepose", g.eyepose_range()),
        ("rot", g.rot_range()),
    ];
    for (name, range) in group_ranges.iter() {
        let mut rng = Stream::derive(cfg.seed, &["dyad", "idle", name, label], &[index]);
        for c in range.clone() {
            let bank = SinusoidBank::draw(&mut rng, 3, (0.005, 0.02), (0.1, 2.5), cfg.fps);
            for t in 0..l {
                motion[t * d + c] += bank.at(t);
            }
        }
    }

    // Speech: jaw channels track the participant's own audio envelope.
    let mut jaw_rng = Stream::derive(cfg.seed, &["dyad", "jawgain", label], &[index]);
    for c in g.jaw_range() {
        let gain = jaw_rng.uniform_in(0.8, 1.2);
        for t in 0..l {
            motion[t * d + c] += gain * own_envelope[t];
        }
    }

    // Listening: while the other participant speaks, rotation and expression
    // channels carry an intent-keyed waveform whose phase is set by the
    // hidden mode.
    let mut rot_rng = Stream::derive(cfg.seed, &["dyad", "resp", "rot", label], &[index]);
    let rot_amps: Vec<f64> =
        g.rot_range().map(|_| cfg.response_gain * rot_rng.uniform_in(0.6, 1.0)).collect();
    let mut expr_rng = Stream::derive(cfg.seed, &["dyad", "resp", "expr", label], &[index]);
    let expr_amps: Vec<f64> =
        g.expr_range().map(|_| cfg.response_gain * expr_rng.uniform_in(0.3, 0.7)).collect();

    let phase = mode_phase(mode, cfg.modes);
    for turn in turns.iter().filter(|t| t.speaker != who) {
        let n = turn.end - turn.start;
        let step = 2.0 * std::f64::consts::PI * intent_freq_hz(turn.intent) / cfg.fps;
        for i in 0..n {
            let w = hann(i, n) * (step * i as f64 + phase).sin();
            let t = turn.start + i;
            for (j, c) in g.rot_range().enumerate() {
                motion[t * d + c] += rot_amps[j] * w;
            }
            for (j, c) in g.expr_range().enumerate() {
                motion[t * d + c] += expr_amps[j] * w;
            }
        }
    }

    motion
}

fn gen_participant(
    cfg: &DyadConfig,
    index: u64,
    who: Speaker,
    turns: &[Turn],
    mode: u32,
) -> Participant {
    let label = participant_label(who);
    let mut audio_rng = Stream::derive(cfg.seed, &["dyad", "audio", label], &[index]);
    let (audio, envelope) = gen_audio(cfg, &mut audio_rng, turns, who);
    let motion = gen_motion(cfg, index, who, turns, &envelope, mode);
    let mut vad = vec![false; cfg.frames];
    for turn in turns.iter().filter(|t| t.speaker == who) {
        for t in turn.start..turn.end {
            vad[t] = true;
        }
    }
    Participant { motion, audio, vad }
}

/// Generate sample `index` of the corpus described by `cfg`.
pub fn generate_dyad(cfg: &DyadConfig, index: u64) -> Result<DyadSample> {
    generate_dyad_with_mode(cfg, index, None)
}

/// Same, but force the actor's hidden reaction mode. Used to probe the
/// one-to-many structure: identical conditioning, different realization.
pub fn generate_dyad_with_mode(
    cfg: &DyadConfig,
    index: u64,
    force_mode: Option<u32>,
) -> Result<DyadSample> {
    cfg.validate()?;

    let mut turn_rng = Stream::derive(cfg.seed, &["dyad", "turns"], &[index]);
    let mut turns = draw_turns(cfg, &mut turn_rng);
    let mut intent_rng = Stream::derive(cfg.seed, &["dyad", "intent"], &[index]);
    for turn in turns.iter_mut() {
        turn.intent = intent_rng.below(cfg.intents as u64) as u32;
    }

    let mut mode_rng = Stream::derive(cfg.seed, &["dyad", "mode"], &[index]);
    let drawn_mode = mode_rng.below(cfg.modes as u64) as u32;
    let actor_mode = force_mode.unwrap_or(drawn_mode);
    let mut pmode_rng = Stream::derive(cfg.seed, &["dyad", "pmode"], &[index]);
    let partner_mode = pmode_rng.below(cfg.modes as u64) as u32;

    let actor = gen_participant(cfg, index, Speaker::Actor, &turns, actor_mode);
    let partner = gen_participant(cfg, index, Speaker::Partner, &turns, partner_mode);

    let listen_segments: Vec<ListenSegment> = turns
        .iter()
        .filter(|t| t.speaker == Speaker::Partner)
        .map(|t| ListenSegment { start: t.start, end: t.end, intent: t.intent, mode: actor_mode })
        .collect();

    let (l, d, da) = (cfg.frames, cfg.motion_dim(), cfg.audio_dim);
    Ok(DyadSample {
        actor_motion: Array::new(vec![l, d], actor.motion)?,
        partner_motion: Array::new(vec![l, d], partner.motion)?,
        actor_audio: Array::new(vec![l, da], actor.audio)?,
        partner_audio: Array::new(vec![l, da], partner.audio)?,
        actor_vad: actor.vad,
        partner_vad: partner.vad,
        turns,
        listen_segments,
        text_prompt: Some(actor_mode),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DyadConfig {
        DyadConfig::default()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dyad(&cfg(), 5).unwrap();
        let b = generate_dyad(&cfg(), 5).unwrap();
        assert_eq!(a.actor_motion.data(), b.actor_motion.data());
        assert_eq!(a.partner_audio.data(), b.partner_audio.data());
        assert_eq!(a.turns, b.turns);
        assert_eq!(a.listen_segments, b.listen_segments);
    }

    #[test]
    fn vad_structure_is_exclusive_and_exhaustive() {
        let s = generate_dyad(&cfg(), 0).unwrap();
        for t in 0..cfg().frames {
            // Turns partition the timeline: exactly one participant speaks.
            assert_ne!(s.actor_vad[t], s.partner_vad[t], "frame {t}");
        }
        // Listening frames are exactly the partner's turns.
        let listening = s.listening_frames();
        let from_turns: Vec<usize> = s
            .turns
            .iter()
            .filter(|t| t.speaker == Speaker::Partner)
            .flat_map(|t| t.start..t.end)
            .collect();
        assert_eq!(listening, from_turns);
        // Every listening interval carries exactly one hidden-mode label.
        assert_eq!(
            s.listen_segments.len(),
            s.turns.iter().filter(|t| t.speaker == Speaker::Partner).count()
        );
    }

    #[test]
    fn two_modes_are_exact_mirror_responses() {
        let c = cfg();
        let m0 = generate_dyad_with_mode(&c, 3, Some(0)).unwrap();
        let m1 = generate_dyad_with_mode(&c, 3, Some(1)).unwrap();
        let d = c.motion_dim();
        let g = &c.groups;

        // Off the response groups, the mode has no effect at all.
        for t in 0..c.frames {
            for ch in g.jaw_range().chain(g.neck_range()).chain(g.eyelid_range()) {
                assert_eq!(m0.actor_motion.data()[t * d + ch], m1.actor_motion.data()[t * d + ch]);
            }
        }

        // On listening frames the two modes are ±w around the shared idle
        // wander: the half-sum is tiny, the half-difference is large.
        let listening = m0.listening_frames();
        let mut mean_abs_sum = 0.0f64;
        let mut rms_diff = 0.0f64;
        let mut n = 0usize;
        for &t in &listening {
            for ch in g.rot_range() {
                let a = m0.actor_motion.data()[t * d + ch];
                let b = m1.actor_motion.data()[t * d + ch];
                mean_abs_sum += (0.5 * (a + b)).abs();
                rms_diff += (0.5 * (a - b)) * (0.5 * (a - b));
                n += 1;
            }
        }
        mean_abs_sum /= n as f64;
        rms_diff = (rms_diff / n as f64).sqrt();
        // Idle wander is at most 3 sinusoids × 0.02 amplitude.
        assert!(mean_abs_sum < 0.06, "conditional mean magnitude {mean_abs_sum}");
        assert!(rms_diff > 0.2, "per-mode amplitude {rms_diff}");
    }

    #[test]
    fn single_mode_listener_is_deterministic_given_inputs() {
        let mut c = cfg();
        c.modes = 1;
        // With one mode the "hidden" draw can take only one value, so the
        // response is a function of the observable intent alone.
        let a = generate_dyad_with_mode(&c, 9, None).unwrap();
        let b = generate_dyad_with_mode(&c, 9, Some(0)).unwrap();
        assert_eq!(a.actor_motion.data(), b.actor_motion.data());
    }

    #[test]
    fn monte_carlo_mode_mean_vanishes_while_amplitude_stays() {
        // Over many samples the equally likely ±w reactions average out on
        // the listening frames, yet each sample retains full amplitude.
        let c = cfg();
        let d = c.motion_dim();
        let n_samples = 1000u64;
        let mut grand_sum = 0.0f64;
        let mut grand_n = 0usize;
        let mut rms_sum = 0.0f64;
        let mut mode_counts = [0usize; 2];
        for idx in 0..n_samples {
            let s = generate_dyad(&c, idx).unwrap();
            mode_counts[s.listen_segments[0].mode as usize % 2] += 1;
            let mut sq = 0.0f64;
            let mut n = 0usize;
            for &t in &s.listening_frames() {
                for ch in c.groups.rot_range() {
                    let v = s.actor_motion.data()[t * d + ch];
                    grand_sum += v;
                    sq += v * v;
                    n += 1;
                }
            }
            grand_n += n;
            rms_sum += (sq / n as f64).sqrt();
        }
        let grand_mean = grand_sum / grand_n as f64;
        let mean_rms = rms_sum / n_samples as f64;
        assert!(grand_mean.abs() < 0.02, "grand mean {grand_mean}");
        assert!(mean_rms > 0.15, "mean per-sample amplitude {mean_rms}");
        // Both modes are drawn with equal probability.
        assert!(
            (440..=560).contains(&mode_counts[0]),
            "mode balance {mode_counts:?}"
        );
    }

    #[test]
    fn constant_predictor_variance_is_under_a_tenth_of_truth() {
        // The quantitative collapse trap: on listening channels, the
        // conditional mean over modes carries <10% of the per-frame variance.
        let c = cfg();
        let d = c.motion_dim();
        let mut var_mean = 0.0f64;
        let mut var_truth = 0.0f64;
        for idx in 0..50 {
            let m0 = generate_dyad_with_mode(&c, idx, Some(0)).unwrap();
            let m1 = generate_dyad_with_mode(&c, idx, Some(1)).unwrap();
            for &t in &m0.listening_frames() {
                for ch in c.groups.rot_range().chain(c.groups.expr_range()) {
                    let a = m0.actor_motion.data()[t * d + ch];
                    let b = m1.actor_motion.data()[t * d + ch];
                    let mean = 0.5 * (a + b);
                    var_mean += mean * mean;
                    var_truth += 0.5 * (a * a + b * b);
                }
            }
        }
        assert!(
            var_mean < 0.1 * var_truth,
            "predictable fraction {}",
            var_mean / var_truth
        );
    }

    #[test]
    fn trajectories_are_band_limited() {
        // No channel jumps more than 5 of its own stds between frames.
        let c = cfg();
        let d = c.motion_dim();
        for idx in 0..10 {
            let s = generate_dyad(&c, idx).unwrap();
            for ch in 0..d {
                let vals: Vec<f64> =
                    (0..c.frames).map(|t| s.actor_motion.data()[t * d + ch]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / vals.len() as f64)
                    .sqrt();
                let max_jump = vals
                    .windows(2)
                    .map(|w| (w[1] - w[0]).abs())
                    .fold(0.0f64, f64::max);
                assert!(
                    max_jump <= 5.0 * std,
                    "sample {idx} channel {ch}: jump {max_jump} vs std {std}"
                );
            }
        }
    }

    #[test]
    fn unrelated_group_size_leaves_jaw_identical() {
        let base = cfg();
        let mut wide = cfg();
        wide.groups.expr = 10; // d grows from 16 to 20
        let a = generate_dyad(&base, 2).unwrap();
        let b = generate_dyad(&wide, 2).unwrap();
        let (da, db) = (base.motion_dim(), wide.motion_dim());
        let (ja, jb) = (base.groups.jaw_range(), wide.groups.jaw_range());
        for t in 0..base.frames {
            for (ca, cb) in ja.clone().zip(jb.clone()) {
                assert_eq!(
                    a.actor_motion.data()[t * da + ca],
                    b.actor_motion.data()[t * db + cb],
                    "jaw differs at frame {t}"
                );
            }
        }
        assert_eq!(a.turns, b.turns);
        assert_eq!(a.actor_audio.data(), b.actor_audio.data());
    }

    #[test]
    fn infeasible_segments_are_a_config_error() {
        let mut c = cfg();
        c.seg_max = c.frames + 1;
        assert!(generate_dyad(&c, 0).is_err());
        let mut c = cfg();
        c.seg_min = 120;
        c.seg_max = 150; // two turns cannot fit in 200 frames
        assert!(generate_dyad(&c, 0).is_err());
        let mut c = cfg();
        c.modes = 0;
        assert!(generate_dyad(&c, 0).is_err());
    }
}
