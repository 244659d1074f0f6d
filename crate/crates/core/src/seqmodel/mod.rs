//! Online (decoder-only) and offline (encoder-decoder) chord models, the
//! value model, MLE training and decoding.

mod offline;
mod online;
mod train;
mod value;

use std::sync::OnceLock;

use ndarray::ArrayView1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::symbolic::{ChordToken, MelodyToken};

pub use offline::{OfflineBatch, OfflineModel, OfflineModelConfig, OfflineState, DECODER_BOS};
pub use online::{OnlineBatch, OnlineModel, OnlineModelConfig, OnlineOutputs, OnlineState, BOS, JOINT_VOCAB};
pub use train::{evaluate_nll, train_mle, MleModel, NllParts, NllReport, TrainConfig, TrainRecord, TrainReport};
pub use value::ValueModel;

pub const CHORD_VOCAB: usize = ChordToken::VOCAB;

/// Additive logit for tokens excluded by the chord grammar. Finite so that
/// masked terms in `p · log p` products stay exactly zero.
pub const MASKED_LOGIT: f64 = -1e9;

/// A melody and a (possibly shorter, EOS-terminated) chord track.
pub type Pair<'a> = (&'a [MelodyToken], &'a [ChordToken]);

fn grammar_table() -> &'static Vec<[bool; CHORD_VOCAB]> {
    static TABLE: OnceLock<Vec<[bool; CHORD_VOCAB]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=CHORD_VOCAB)
            .map(|p| {
                let prev = p.checked_sub(1).and_then(ChordToken::from_id);
                let mut row = [false; CHORD_VOCAB];
                for (id, slot) in row.iter_mut().enumerate() {
                    *slot = ChordToken::from_id(id).is_some_and(|t| t.may_follow(prev));
                }
                row
            })
            .collect()
    })
}

/// Chord tokens that may follow `prev`: any onset, silence or EOS, plus the
/// hold of the sounding chord.
pub fn allowed_chords(prev: Option<ChordToken>) -> &'static [bool; CHORD_VOCAB] {
    &grammar_table()[prev.map_or(0, |t| t.id() + 1)]
}

/// Additive `[n, CHORD_VOCAB]` mask; all zeros when `enabled` is false.
pub fn chord_mask<T: Scalar>(prevs: &[Option<ChordToken>], enabled: bool) -> Mat<T> {
    let mut m = Mat::zeros((prevs.len(), CHORD_VOCAB));
    if enabled {
        let masked = T::of(MASKED_LOGIT);
        for (mut row, prev) in m.rows_mut().into_iter().zip(prevs) {
            for (v, ok) in row.iter_mut().zip(allowed_chords(*prev)) {
                if !ok {
                    *v = masked;
                }
            }
        }
    }
    m
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be >= 0, got {temperature}")))
    }
}

/// Draws an index from `log_probs` at `temperature`; 0 means argmax with
/// ties broken toward the lower index.
pub fn sample_index<T: Scalar, R: Rng>(log_probs: ArrayView1<T>, temperature: f64, rng: &mut R) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, v) in log_probs.iter().enumerate() {
            if *v > log_probs[best] {
                best = i;
            }
        }
        best
    };
    if temperature == 0.0 {
        return argmax();
    }
    let scaled: Vec<f64> = log_probs.iter().map(|v| v.to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax()
}

/// Decoding options shared by both model families.
#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    pub temperature: f64,
    /// Per-melody chord prefixes fed instead of sampled (priming).
    pub forced: Vec<Vec<ChordToken>>,
}

impl GenerateOptions {
    pub fn greedy() -> Self {
        GenerateOptions::default()
    }

    pub fn sampled(temperature: f64) -> Self {
        GenerateOptions {
            temperature,
            forced: Vec::new(),
        }
    }

    fn forced_at(&self, b: usize, t: usize) -> Option<ChordToken> {
        self.forced.get(b).and_then(|f| f.get(t)).copied()
    }
}

/// A model that predicts chords for a melody, used as a policy, a
/// distillation teacher or an evaluation subject.
pub trait ChordModel<T: Scalar> {
    fn kind(&self) -> &'static str;

    fn chord_vocab(&self) -> usize {
        CHORD_VOCAB
    }

    /// Teacher-forced chord log-distributions, one `[len(y), CHORD_VOCAB]`
    /// matrix per pair; all melodies in a call must have equal length.
    fn chord_log_probs(&self, pairs: &[Pair<'_>]) -> Result<Vec<Mat<T>>>;

    /// Decodes one chord track per melody. Tracks stop early at EOS.
    fn generate(&self, melodies: &[&[MelodyToken]], opts: &GenerateOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ChordToken>>>;
}

/// Teacher-forced log-probabilities of the observed chords.
pub fn sequence_log_prob<T: Scalar, M: ChordModel<T> + ?Sized>(model: &M, x: &[MelodyToken], y: &[ChordToken]) -> Result<Vec<f64>> {
    let lp = model.chord_log_probs(&[(x, y)])?.remove(0);
    Ok(y.iter().enumerate().map(|(t, tok)| lp[[t, tok.id()]].to_f64_lossy()).collect())
}

/// Groups indices of `lens` by equal value, preserving first-seen order.
pub fn group_by_len(lens: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in lens.iter().enumerate() {
        match groups.iter_mut().find(|(len, _)| *len == l) {
            Some((_, g)) => g.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Runs `f` on each equal-length group of pairs and scatters results back.
pub fn by_length<R, F>(pairs: &[Pair<'_>], mut f: F) -> Result<Vec<R>>
where
    F: FnMut(&[Pair<'_>]) -> Result<Vec<R>>,
{
    let lens: Vec<usize> = pairs.iter().map(|p| p.0.len()).collect();
    let mut out: Vec<Option<R>> = (0..pairs.len()).map(|_| None).collect();
    for group in group_by_len(&lens) {
        let sub: Vec<Pair<'_>> = group.iter().map(|&i| pairs[i]).collect();
        for (i, r) in group.into_iter().zip(f(&sub)?) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every index filled")).collect())
}

/// Checks a chord track against its melody: no longer than the melody and
/// shorter only when it ends in EOS.
pub fn check_pair(x: &[MelodyToken], y: &[ChordToken]) -> Result<()> {
    let ok = y.len() == x.len() || (y.len() < x.len() && y.last() == Some(&ChordToken::Eos));
    if ok {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            melody: x.len(),
            chords: y.len(),
        })
    }
}

/// Outcome of paired greedy decodes whose melodies share a prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CausalityReport {
    pub trials: usize,
    /// Trials where a chord at or before the altered frame changed.
    pub breaks: usize,
    /// Trials where a chord after the altered frame changed, showing the
    /// decoder does read the melody.
    pub later_changes: usize,
}

fn random_melody(rng: &mut ChaCha8Rng, len: usize) -> Vec<MelodyToken> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let run = rng.random_range(1..=8).min(len - out.len());
        if rng.random_bool(0.2) {
            out.extend(std::iter::repeat_n(MelodyToken::Silence, run));
        } else {
            let p = rng.random_range(48..84u8);
            out.push(MelodyToken::NoteOn(p));
            out.extend(std::iter::repeat_n(MelodyToken::NoteHold(p), run - 1));
        }
    }
    out
}

/// For each melody, replaces every frame from a random frame `t` onward with
/// fresh material and greedy-decodes both versions; chords up to and
/// including frame `t` must not change, since chord `t` is emitted before
/// melody frame `t` is read.
pub fn causality_check<T: Scalar, M: ChordModel<T> + ?Sized>(
    model: &M,
    melodies: &[&[MelodyToken]],
    rng: &mut ChaCha8Rng,
) -> Result<CausalityReport> {
    let mut report = CausalityReport::default();
    for x in melodies.iter().filter(|x| !x.is_empty()) {
        let t = rng.random_range(0..x.len());
        let mut altered = x[..t].to_vec();
        altered.extend(random_melody(rng, x.len() - t));
        if altered[t] == x[t] {
            altered[t] = match x[t] {
                MelodyToken::Silence => MelodyToken::NoteOn(60),
                _ => MelodyToken::Silence,
            };
            if let Some(MelodyToken::NoteHold(p)) = altered.get(t + 1).copied() {
                altered[t + 1] = MelodyToken::NoteOn(p);
            }
        }
        let ys = model.generate(&[x, &altered], &GenerateOptions::greedy(), rng)?;
        let (a, b) = (&ys[0], &ys[1]);
        let head = (t + 1).min(a.len()).min(b.len());
        report.trials += 1;
        report.breaks += (a[..head] != b[..head] || (a.len() <= t) != (b.len() <= t)) as usize;
        report.later_changes += (a != b) as usize;
    }
    Ok(report)
}
