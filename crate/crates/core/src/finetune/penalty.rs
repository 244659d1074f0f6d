//! Regularization penalties on a generated chord track. Each is <= 0.

use serde::{Deserialize, Serialize};

use crate::symbolic::{chord_segments, ChordToken, MelodyToken};

/// Frames a chord may sound before each further frame is penalized.
pub const MAX_HELD_FRAMES: usize = 32;
/// Frames at the start exempt from the silence penalty.
pub const SILENCE_GRACE_FRAMES: usize = 8;
/// Tolerated rate of silent accompaniment under a sounding melody.
pub const SILENCE_TOLERANCE: f64 = 0.04;

/// −1 for every frame of a chord segment past its 32nd.
pub fn repetition_penalty(y: &[ChordToken]) -> f64 {
    let over: usize = chord_segments(y).iter().map(|s| s.len.saturating_sub(MAX_HELD_FRAMES)).sum();
    -(over as f64)
}

/// −S when the S silent-chord frames (after the grace window) under a
/// sounding melody exceed 4% of all sounding-melody frames, else 0.
pub fn silence_penalty(x: &[MelodyToken], y: &[ChordToken]) -> f64 {
    let sounding = x.iter().filter(|m| !m.is_silence()).count();
    let silent = x
        .iter()
        .zip(y)
        .enumerate()
        .skip(SILENCE_GRACE_FRAMES)
        .filter(|(_, (m, c))| !m.is_silence() && **c == ChordToken::Silence)
        .count();
    if sounding > 0 && silent as f64 / sounding as f64 > SILENCE_TOLERANCE {
        -(silent as f64)
    } else {
        0.0
    }
}

/// −1 for each melody frame remaining after the chord track's EOS.
pub fn early_eos_penalty(x: &[MelodyToken], y: &[ChordToken]) -> f64 {
    match y.iter().position(|c| *c == ChordToken::Eos) {
        Some(e) => -(x.len().saturating_sub(e + 1) as f64),
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub repetition: f64,
    pub silence: f64,
    pub early_eos: f64,
}

impl Penalties {
    pub fn of(x: &[MelodyToken], y: &[ChordToken]) -> Self {
        Penalties {
            repetition: repetition_penalty(y),
            silence: silence_penalty(x, y),
            early_eos: early_eos_penalty(x, y),
        }
    }

    pub fn weighted(&self, c: &PenaltyCoefficients) -> f64 {
        c.repetition * self.repetition + c.silence * self.silence + c.early_eos * self.early_eos
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyCoefficients {
    pub repetition: f64,
    pub silence: f64,
    pub early_eos: f64,
}

impl PenaltyCoefficients {
    pub const fn new(repetition: f64, silence: f64, early_eos: f64) -> Self {
        PenaltyCoefficients {
            repetition,
            silence,
            early_eos,
        }
    }

    pub const ZERO: Self = Self::new(0.0, 0.0, 0.0);
}

impl Default for PenaltyCoefficients {
    fn default() -> Self {
        Self::new(1.0, 1.0, 20.0)
    }
}

/// `reward_coef · score + Σ coefficient · penalty`.
pub fn total_reward(score: f64, penalties: &Penalties, reward_coef: f64, coefs: &PenaltyCoefficients) -> f64 {
    reward_coef * score + penalties.weighted(coefs)
}
