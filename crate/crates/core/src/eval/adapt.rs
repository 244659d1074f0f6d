//! Adaptation benchmarks: per-beat note-in-chord under priming, cold start
//! and a mid-piece key change.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{per_beat_curve, BeatCurve, BeatMetric};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::{group_by_len, ChordModel, GenerateOptions};
use crate::symbolic::{ChordToken, MelodyToken, Piece, FRAMES_PER_BEAT};

pub const PRIMED_BEATS: usize = 8;
pub const PERTURB_BEAT: usize = 17;
pub const PERTURB_SEMITONES: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Ground-truth chords are forced for the first `beats` beats.
    Primed { beats: usize },
    ColdStart,
    /// Melody transposed by `semitones` from beat `beat` on.
    Perturb { semitones: i32, beat: usize },
}

impl Scenario {
    pub const PRIMED: Scenario = Scenario::Primed { beats: PRIMED_BEATS };
    pub const PERTURB: Scenario = Scenario::Perturb {
        semitones: PERTURB_SEMITONES,
        beat: PERTURB_BEAT,
    };

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Primed { .. } => "primed",
            Scenario::ColdStart => "cold_start",
            Scenario::Perturb { .. } => "perturb",
        }
    }

    /// Shortest melody the scenario can score: the forced or unperturbed
    /// prefix plus one full beat.
    pub fn min_frames(self) -> usize {
        match self {
            Scenario::Primed { beats } => (beats + 1) * FRAMES_PER_BEAT,
            Scenario::ColdStart => FRAMES_PER_BEAT,
            Scenario::Perturb { beat, .. } => beat * FRAMES_PER_BEAT,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primed" => Ok(Scenario::PRIMED),
            "cold_start" | "cold-start" => Ok(Scenario::ColdStart),
            "perturb" => Ok(Scenario::PERTURB),
            other => Err(Error::Config(format!("unknown scenario `{other}` (primed, cold_start, perturb)"))),
        }
    }
}

/// Transposes every melody frame from `from` on by `semitones`. Notes that
/// would leave the MIDI range move by the complementary interval instead,
/// which keeps the pitch class shift.
pub fn perturb_melody(x: &[MelodyToken], from: usize, semitones: i32) -> Vec<MelodyToken> {
    x.iter()
        .enumerate()
        .map(|(t, m)| {
            if t < from {
                *m
            } else {
                m.transposed(semitones)
                    .or_else(|| m.transposed(semitones - 12 * semitones.signum()))
                    .unwrap_or(*m)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationResult {
    pub scenario: Scenario,
    pub curve: BeatCurve,
    /// Melodies too short for the scenario.
    pub skipped: usize,
    pub melodies: Vec<Vec<MelodyToken>>,
    pub chords: Vec<Vec<ChordToken>>,
}

/// Generates accompaniment for every long-enough test piece under
/// `scenario` and scores note-in-chord per beat against the melody the
/// model actually heard.
pub fn adaptation_benchmark<T: Scalar>(
    model: &dyn ChordModel<T>,
    pieces: &[Piece],
    scenario: Scenario,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptationResult> {
    let kept: Vec<&Piece> = pieces.iter().filter(|p| p.len() >= scenario.min_frames()).collect();
    let skipped = pieces.len() - kept.len();
    let melodies: Vec<Vec<MelodyToken>> = kept
        .iter()
        .map(|p| match scenario {
            Scenario::Perturb { semitones, beat } => perturb_melody(p.melody(), (beat - 1) * FRAMES_PER_BEAT, semitones),
            _ => p.melody().to_vec(),
        })
        .collect();
    let forced: Vec<Vec<ChordToken>> = kept
        .iter()
        .map(|p| match scenario {
            Scenario::Primed { beats } => p.chords()[..beats * FRAMES_PER_BEAT].to_vec(),
            _ => Vec::new(),
        })
        .collect();
    let lens: Vec<usize> = melodies.iter().map(Vec::len).collect();
    let mut chords: Vec<Vec<ChordToken>> = vec![Vec::new(); melodies.len()];
    for group in group_by_len(&lens) {
        for chunk in group.chunks(32) {
            let ms: Vec<&[MelodyToken]> = chunk.iter().map(|&i| melodies[i].as_slice()).collect();
            let opts = GenerateOptions {
                temperature,
                forced: chunk.iter().map(|&i| forced[i].clone()).collect(),
            };
            for (&i, y) in chunk.iter().zip(model.generate(&ms, &opts, rng)?) {
                chords[i] = y;
            }
        }
    }
    let curve = per_beat_curve(melodies.iter().zip(&chords).map(|(x, y)| (x.as_slice(), y.as_slice())), BeatMetric::NoteInChord);
    Ok(AdaptationResult {
        scenario,
        curve,
        skipped,
        melodies,
        chords,
    })
}

/// How a per-beat curve behaves after a perturbation at beat `at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Mean over beats `1..at`.
    pub pre_mean: f64,
    /// `level` times the pre-perturbation mean.
    pub threshold: f64,
    /// First beat in `at..at + window` at or above the threshold.
    pub recovered_at: Option<usize>,
    /// Defined beats from `at` to the end, and how many reach the threshold.
    pub beats_after: usize,
    pub beats_above: usize,
}

pub fn recovery(curve: &BeatCurve, at: usize, window: usize, level: f64) -> Option<Recovery> {
    let pre_mean = curve.mean_over(1, at.checked_sub(1)?)?;
    let threshold = level * pre_mean;
    let after: Vec<(usize, f64)> = (at..=curve.values.len()).filter_map(|b| curve.beat(b).map(|v| (b, v))).collect();
    Some(Recovery {
        pre_mean,
        threshold,
        recovered_at: after.iter().find(|(b, v)| *b < at + window && *v >= threshold).map(|(b, _)| *b),
        beats_after: after.len(),
        beats_above: after.iter().filter(|(_, v)| *v >= threshold).count(),
    })
}

/// Mean over beats `from..=from + window - 1` divided by the mean over the
/// `window` beats before `from`.
pub fn recovery_ratio(curve: &BeatCurve, from: usize, window: usize) -> Option<f64> {
    let before = curve.mean_over(from.checked_sub(window)?, from - 1)?;
    let after = curve.mean_over(from, from + window - 1)?;
    (before > 0.0).then(|| after / before)
}
