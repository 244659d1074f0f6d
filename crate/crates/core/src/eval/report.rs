//! Aggregate metric reports for a system on a split.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{
    auxiliary_counts, chord_length_histogram, emd, entropy, onset_interval_histogram, system_note_in_chord, Histogram,
};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::seqmodel::{group_by_len, ChordModel, GenerateOptions, Pair};
use crate::symbolic::{ChordToken, MelodyToken, Piece};

/// Table-style metrics. Ratios are fractions; the EMD is scaled by 10³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub split: String,
    pub pieces: usize,
    pub note_in_chord: Option<f64>,
    pub onset_interval_emd_x1000: f64,
    pub chord_length_entropy: Option<f64>,
    pub chord_silence_ratio: Option<f64>,
    pub long_chords_ratio: Option<f64>,
    pub early_stop_ratio: Option<f64>,
    /// Chord onsets with no preceding melody onset.
    pub onset_excluded: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub onset_histogram: Histogram,
    pub chord_length_histogram: Histogram,
}

/// Scores chord tracks against their melodies; the onset-interval EMD is
/// taken against the ground truth of `reference`.
pub fn score_tracks(system: &str, split: &str, pairs: &[Pair<'_>], reference: &[Piece]) -> Result<EvalOutput> {
    let onset = onset_interval_histogram(pairs.iter().copied());
    let truth = onset_interval_histogram(reference.iter().map(|p| (p.melody(), p.chords())));
    let lengths = chord_length_histogram(pairs.iter().map(|p| p.1));
    let aux = auxiliary_counts(pairs.iter().copied())?;
    let report = EvalReport {
        system: system.to_string(),
        split: split.to_string(),
        pieces: pairs.len(),
        note_in_chord: system_note_in_chord(pairs.iter().copied())?,
        onset_interval_emd_x1000: 1000.0 * emd::<f64>(&onset.histogram, &truth.histogram)?,
        chord_length_entropy: entropy(&lengths),
        chord_silence_ratio: aux.chord_silence_ratio(),
        long_chords_ratio: aux.long_chords_ratio(),
        early_stop_ratio: aux.early_stop_ratio(),
        onset_excluded: onset.excluded,
    };
    Ok(EvalOutput {
        report,
        onset_histogram: onset.histogram,
        chord_length_histogram: lengths,
    })
}

/// Decodes every melody in batches of equal length.
pub fn generate_all<T: Scalar>(
    model: &dyn ChordModel<T>,
    melodies: &[&[MelodyToken]],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<ChordToken>>> {
    let lens: Vec<usize> = melodies.iter().map(|m| m.len()).collect();
    let mut out = vec![Vec::new(); melodies.len()];
    let opts = GenerateOptions::sampled(temperature);
    for group in group_by_len(&lens) {
        for chunk in group.chunks(32) {
            let ms: Vec<&[MelodyToken]> = chunk.iter().map(|&i| melodies[i]).collect();
            for (&i, y) in chunk.iter().zip(model.generate(&ms, &opts, rng)?) {
                out[i] = y;
            }
        }
    }
    Ok(out)
}

/// Generates accompaniment for every piece and scores it against the
/// ground truth. Returns the report and the generated tracks.
pub fn evaluate_model<T: Scalar>(
    model: &dyn ChordModel<T>,
    system: &str,
    split: &str,
    pieces: &[Piece],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(EvalOutput, Vec<Vec<ChordToken>>)> {
    let melodies: Vec<&[MelodyToken]> = pieces.iter().map(Piece::melody).collect();
    let ys = generate_all(model, &melodies, temperature, rng)?;
    let pairs: Vec<Pair<'_>> = melodies.iter().zip(&ys).map(|(x, y)| (*x, y.as_slice())).collect();
    let out = score_tracks(system, split, &pairs, pieces)?;
    Ok((out, ys))
}
