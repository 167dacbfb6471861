//! Synthetic dyadic-conversation data.
//!
//! Two participants alternate speaking turns. While the actor speaks, their
//! jaw channels track the audio envelope deterministically (tight
//! audio-motion coupling). While the actor listens, a hidden "reaction mode"
//! picks one of several equally likely smooth waveforms on the rotation and
//! expression channels, keyed to the partner's utterance intent — so the
//! conditional mean over modes is near zero while each realization has large
//! amplitude. That one-to-many structure is the trap a mean-seeking
//! regression collapses into, and what the RL stage must escape.
//!
//! Everything here is a pure function of (config, sample index): each random
//! quantity draws from its own derived stream, so adding channels to one
//! group never perturbs another group's trajectories.

mod filter;
mod generate;
mod norm;

pub use filter::{savgol_coeffs, savgol_smooth};
pub use generate::{generate_dyad, generate_dyad_with_mode};
pub use norm::{denormalize, fit_norm_stats, normalize, NormStats};

use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Channel layout: six named groups laid out in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupPartition {
    pub expr: usize,
    pub jaw: usize,
    pub neck: usize,
    pub eyelid: usize,
    pub eyepose: usize,
    pub rot: usize,
}

impl Default for GroupPartition {
    fn default() -> Self {
        GroupPartition::desk()
    }
}

impl GroupPartition {
    /// Desk-scale 16-channel layout.
    pub fn desk() -> Self {
        GroupPartition { expr: 6, jaw: 2, neck: 2, eyelid: 2, eyepose: 2, rot: 2 }
    }

    /// Full 67-channel layout matching standard head-model dimensionalities.
    pub fn full() -> Self {
        GroupPartition { expr: 50, jaw: 3, neck: 3, eyelid: 2, eyepose: 6, rot: 3 }
    }

    pub fn total(&self) -> usize {
        self.expr + self.jaw + self.neck + self.eyelid + self.eyepose + self.rot
    }

    pub fn expr_range(&self) -> std::ops::Range<usize> {
        0..self.expr
    }

    pub fn jaw_range(&self) -> std::ops::Range<usize> {
        let s = self.expr;
        s..s + self.jaw
    }

    pub fn neck_range(&self) -> std::ops::Range<usize> {
        let s = self.expr + self.jaw;
        s..s + self.neck
    }

    pub fn eyelid_range(&self) -> std::ops::Range<usize> {
        let s = self.expr + self.jaw + self.neck;
        s..s + self.eyelid
    }

    pub fn eyepose_range(&self) -> std::ops::Range<usize> {
        let s = self.expr + self.jaw + self.neck + self.eyelid;
        s..s + self.eyepose
    }

    pub fn rot_range(&self) -> std::ops::Range<usize> {
        let s = self.total() - self.rot;
        s..s + self.rot
    }

    fn validate(&self) -> Result<()> {
        let sizes = [self.expr, self.jaw, self.neck, self.eyelid, self.eyepose, self.rot];
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("every channel group needs at least one channel".into()));
        }
        Ok(())
    }
}

/// Generator settings for one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DyadConfig {
    /// Motion length in frames.
    pub frames: usize,
    /// Channel groups; their sizes sum to the motion width d.
    pub groups: GroupPartition,
    /// Audio feature width per participant.
    pub audio_dim: usize,
    /// Nominal frame rate, used to scale waveform frequencies.
    pub fps: f64,
    /// Utterance intent vocabulary size K.
    pub intents: u32,
    /// Hidden reaction modes per intent. 1 = deterministic listener;
    /// 2 = the symmetric ±w(t) pair.
    pub modes: u32,
    /// Speaking-turn length range in frames, inclusive.
    pub seg_min: usize,
    pub seg_max: usize,
    /// Scale on the listening-response waveform amplitude. Below 1 the
    /// reaction is subtle relative to the denoising noise scale, which makes
    /// the hidden mode hard to infer from partially denoised states — the
    /// regime where a supervised model hedges toward the conditional mean.
    pub response_gain: f64,
    /// Master seed; per-sample streams derive from (seed, stream name, index).
    pub seed: u64,
}

impl Default for DyadConfig {
    fn default() -> Self {
        DyadConfig {
            frames: 200,
            groups: GroupPartition::desk(),
            audio_dim: 8,
            fps: 25.0,
            intents: 4,
            modes: 2,
            seg_min: 30,
            seg_max: 60,
            response_gain: 1.0,
            seed: 0,
        }
    }
}

impl DyadConfig {
    pub fn motion_dim(&self) -> usize {
        self.groups.total()
    }

    pub fn validate(&self) -> Result<()> {
        self.groups.validate()?;
        if self.intents < 1 {
            return Err(Error::Config("intent vocabulary must be non-empty".into()));
        }
        if self.modes < 1 {
            return Err(Error::Config("need at least one reaction mode".into()));
        }
        if self.seg_min < 4 || self.seg_min > self.seg_max {
            return Err(Error::Config(format!(
                "segment range {}..={} must satisfy 4 <= min <= max",
                self.seg_min, self.seg_max
            )));
        }
        if self.frames < self.seg_min + self.seg_max {
            // Guarantees at least two turns, so both participants speak.
            return Err(Error::Config(format!(
                "{} frames cannot hold turns of {}..={} frames from both sides",
                self.frames, self.seg_min, self.seg_max
            )));
        }
        if self.audio_dim == 0 {
            return Err(Error::Config("audio feature width must be positive".into()));
        }
        if !self.response_gain.is_finite() || self.response_gain <= 0.0 {
            return Err(Error::Config(format!(
                "response gain {} must be positive and finite",
                self.response_gain
            )));
        }
        Ok(())
    }
}

/// Who holds the floor during a turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Actor,
    Partner,
}

/// One speaking turn, frames [start, end).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub start: usize,
    pub end: usize,
    pub speaker: Speaker,
    /// Utterance intent, in [0, K).
    pub intent: u32,
}

/// One actor-listening interval with its hidden reaction mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenSegment {
    pub start: usize,
    pub end: usize,
    /// Intent of the partner utterance being reacted to.
    pub intent: u32,
    /// Which of the equally likely reactions this sample realized.
    pub mode: u32,
}

/// One generated conversation, from the actor's point of view.
#[derive(Clone, Debug)]
pub struct DyadSample {
    /// Actor motion, frames × channels.
    pub actor_motion: Array<f64>,
    /// Partner motion, frames × channels.
    pub partner_motion: Array<f64>,
    /// Actor audio features, frames × audio_dim.
    pub actor_audio: Array<f64>,
    /// Partner audio features, frames × audio_dim.
    pub partner_audio: Array<f64>,
    /// Voice activity per frame. Listening frames for the actor are exactly
    /// (!actor_vad && partner_vad).
    pub actor_vad: Vec<bool>,
    pub partner_vad: Vec<bool>,
    /// All speaking turns in order.
    pub turns: Vec<Turn>,
    /// Actor listening intervals with hidden mode labels.
    pub listen_segments: Vec<ListenSegment>,
    /// Categorical prompt naming the actor's reaction mode.
    pub text_prompt: Option<u32>,
}

impl DyadSample {
    /// Frames where the actor is listening: not speaking while the partner is.
    pub fn listening_frames(&self) -> Vec<usize> {
        (0..self.actor_vad.len())
            .filter(|&t| !self.actor_vad[t] && self.partner_vad[t])
            .collect()
    }

    /// Frames where the actor holds the floor.
    pub fn speaking_frames(&self) -> Vec<usize> {
        (0..self.actor_vad.len()).filter(|&t| self.actor_vad[t]).collect()
    }
}
