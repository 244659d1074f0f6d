//! Self-supervised reward models scoring melody/chord compatibility.

mod contrastive;
mod discriminative;
mod ensemble;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, LrSchedule, ParamStore, Var};
use crate::corpus::crop;
use crate::error::{Error, Result};
use crate::nn::TransformerConfig;
use crate::scalar::Scalar;
use crate::seqmodel::{Pair, TrainConfig, TrainRecord};
use crate::symbolic::{chord_segments, ChordSymbol, ChordToken, MelodyToken, Piece, MAX_FRAMES};

pub use contrastive::{retrieval_hits, ContrastiveModel};
pub use discriminative::{balanced_accuracy, DiscriminativeModel};
pub use ensemble::{AnyReward, EnsembleMember, RewardEnsemble};

/// Input scales of the multi-scale variants, in frames.
pub const SCALES: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Contrastive,
    Discriminative,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Contrastive => "contrastive",
            RewardKind::Discriminative => "discriminative",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" | "c" => Ok(RewardKind::Contrastive),
            "discriminative" | "d" => Ok(RewardKind::Discriminative),
            other => Err(Error::Config(format!("unknown reward kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_mult: usize,
    /// Window length in frames.
    pub scale: usize,
    /// Contrastive embedding size.
    pub embed_dim: usize,
    pub init_temperature: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            layers: 2,
            heads: 4,
            dim: 128,
            ff_mult: 4,
            scale: MAX_FRAMES,
            embed_dim: 64,
            init_temperature: 0.07,
        }
    }
}

impl RewardConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        if self.scale == 0 || self.scale > MAX_FRAMES || self.embed_dim == 0 {
            return Err(Error::Config(format!("scale must be in 1..={MAX_FRAMES}")));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Sliding windows of length `s` with 50% overlap, plus a final window
/// ending at `len` when the stride does not land there.
pub fn windows(len: usize, s: usize) -> Vec<(usize, usize)> {
    if s == 0 || s >= len {
        return vec![(0, len)];
    }
    let stride = (s / 2).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + s <= len {
        out.push((start, start + s));
        start += stride;
    }
    if out.last().is_some_and(|w| w.1 < len) {
        out.push((len - s, len));
    }
    out
}

/// Pads an EOS-terminated chord track with silence to the melody length.
pub fn pad_chords(x: &[MelodyToken], y: &[ChordToken]) -> Vec<ChordToken> {
    let mut out = y.to_vec();
    out.resize(x.len(), ChordToken::Silence);
    out
}

/// A model that scores equal-length (melody, chords) windows.
pub trait RewardModel<T: Scalar> {
    fn kind(&self) -> RewardKind;
    fn scale(&self) -> usize;
    /// False for freshly initialized parameters.
    fn is_trained(&self) -> bool;
    /// Scores for equal-length windows no longer than [`Self::scale`].
    fn score_windows(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>>;

    /// Mean window score per pair.
    fn score(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        let padded: Vec<Vec<ChordToken>> = pairs.iter().map(|(x, y)| pad_chords(x, y)).collect();
        let mut items: Vec<(usize, usize, usize)> = Vec::new();
        for (i, (x, _)) in pairs.iter().enumerate() {
            if x.is_empty() {
                return Err(Error::InvalidPiece("empty melody".into()));
            }
            items.extend(windows(x.len(), self.scale()).into_iter().map(|(a, b)| (i, a, b)));
        }
        let mut sums = vec![0.0; pairs.len()];
        let mut counts = vec![0usize; pairs.len()];
        let lens: Vec<usize> = items.iter().map(|(_, a, b)| b - a).collect();
        for group in crate::seqmodel::group_by_len(&lens) {
            for chunk in group.chunks(64) {
                let wins: Vec<Pair<'_>> = chunk
                    .iter()
                    .map(|&k| {
                        let (i, a, b) = items[k];
                        (&pairs[i].0[a..b], &padded[i][a..b])
                    })
                    .collect();
                for (&k, s) in chunk.iter().zip(self.score_windows(&wins)?) {
                    sums[items[k].0] += s;
                    counts[items[k].0] += 1;
                }
            }
        }
        Ok(sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect())
    }
}

/// Graph-level training objective shared by both reward kinds.
pub(crate) trait RewardTrainable<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[Piece], rng: &mut ChaCha8Rng) -> Result<Var>;
}

/// Samples batches of `scale`-frame crops and minimizes the model's loss.
pub(crate) fn train_reward<T: Scalar, M: RewardTrainable<T>>(
    model: &mut M,
    scale: usize,
    train: &[Piece],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Config("reward training needs batch size >= 2 for negatives".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} pieces is smaller than batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(
        model.store(),
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let schedule = LrSchedule {
        base: cfg.lr,
        warmup: cfg.warmup,
    };
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let picks = index::sample(&mut rng, train.len(), cfg.batch_size);
        let mut batch: Vec<Piece> = picks
            .iter()
            .map(|i| {
                let p = &train[i];
                let p = if cfg.transpose_augment { crate::corpus::augment(p, &mut rng) } else { p.clone() };
                crop(&p, scale, &mut rng)
            })
            .collect();
        let min_len = batch.iter().map(Piece::len).min().unwrap_or(0);
        for p in batch.iter_mut().filter(|p| p.len() > min_len) {
            *p = p.window(0, min_len);
        }
        let drop_rng = ChaCha8Rng::from_rng(&mut rng);
        let mut loss_rng = ChaCha8Rng::from_rng(&mut rng);
        let (loss, mut grads) = {
            let mut g = Graph::new(model.store()).with_dropout(cfg.dropout, drop_rng);
            let l = model.batch_loss(&mut g, &batch, &mut loss_rng)?;
            (g.scalar(l).to_f64_lossy(), g.backward(l))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("reward loss {loss}"),
            });
        }
        let grad_norm = grads.clip_global_norm(T::of(cfg.grad_clip)).to_f64_lossy();
        let lr = schedule.at(step);
        opt.step(model.store_mut(), &grads, lr);
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = TrainRecord {
                step: step + 1,
                lr,
                train_nll: loss,
                grad_norm,
                val: None,
            };
            on_log(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

/// Replaces the chord of a `fraction` of chord segments with a uniformly
/// drawn chord, keeping every onset/hold boundary and the melody.
pub fn perturb_harmony<R: Rng>(piece: &Piece, fraction: f64, rng: &mut R) -> Result<Piece> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let segments = chord_segments(piece.chords());
    let k = (fraction * segments.len() as f64).round() as usize;
    let (melody, mut chords, meta) = piece.clone().into_parts();
    for i in index::sample(rng, segments.len(), k.min(segments.len())) {
        let seg = segments[i];
        let new = ChordSymbol::from_id(rng.random_range(0..ChordSymbol::COUNT)).expect("id in range");
        for tok in &mut chords[seg.start..seg.start + seg.len] {
            *tok = match *tok {
                ChordToken::On(_) => ChordToken::On(new),
                ChordToken::Hold(_) => ChordToken::Hold(new),
                other => other,
            };
        }
    }
    Piece::with_meta(melody, chords, meta)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Mean score over `pieces` after perturbing each at every fraction.
pub fn degradation_curve<T: Scalar, M: RewardModel<T> + ?Sized>(
    model: &M,
    pieces: &[Piece],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    fractions
        .iter()
        .map(|&f| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perturbed = pieces.iter().map(|p| perturb_harmony(p, f, &mut rng)).collect::<Result<Vec<_>>>()?;
            let pairs: Vec<Pair<'_>> = perturbed.iter().map(|p| (p.melody(), p.chords())).collect();
            let scores = model.score(&pairs)?;
            Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
        })
        .collect()
}

/// Shuffled pairing used for negatives: piece `i` gets the chords of piece
/// `(i + shift) mod n`, truncated or padded with silence.
pub fn mismatched_chords(pieces: &[Piece], shift: usize) -> Vec<Vec<ChordToken>> {
    let n = pieces.len();
    (0..n)
        .map(|i| {
            let other = pieces[(i + shift) % n].chords();
            let mut y: Vec<ChordToken> = other.iter().copied().filter(|c| *c != ChordToken::Eos).take(pieces[i].len()).collect();
            y.resize(pieces[i].len(), ChordToken::Silence);
            if let Some(ChordToken::Hold(c)) = y.first().copied() {
                y[0] = ChordToken::On(c);
            }
            y
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn window_arithmetic() {
        assert_eq!(windows(256, 128), vec![(0, 128), (64, 192), (128, 256)]);
        assert_eq!(windows(256, 256), vec![(0, 256)]);
        assert_eq!(windows(16, 16), vec![(0, 16)]);
        assert_eq!(windows(10, 16), vec![(0, 10)]);
        assert_eq!(windows(100, 64), vec![(0, 64), (32, 96), (36, 100)]);
    }

    #[test]
    fn windows_cover_sequence() {
        for len in 1..80 {
            for s in [1, 2, 3, 16, 32, 64] {
                let w = windows(len, s);
                let mut covered = vec![false; len];
                for (a, b) in w {
                    assert!(a < b && b <= len);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|c| *c), "len {len} s {s}");
            }
        }
    }

    fn corpus() -> Vec<Piece> {
        generate_corpus(&CorpusConfig {
            num_pieces: 20,
            min_frames: 64,
            max_frames: 64,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn perturbation_keeps_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in corpus() {
            assert_eq!(perturb_harmony(&p, 0.0, &mut rng).unwrap(), p);
            let q = perturb_harmony(&p, 1.0, &mut rng).unwrap();
            assert_eq!(q.melody(), p.melody());
            for (a, b) in p.chords().iter().zip(q.chords()) {
                assert_eq!(a.is_onset(), b.is_onset());
                assert_eq!(a.chord().is_some(), b.chord().is_some());
            }
            assert_eq!(chord_segments(q.chords()).len(), chord_segments(p.chords()).len());
        }
    }

    #[test]
    fn full_perturbation_changes_most_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut changed, mut total) = (0usize, 0usize);
        for p in corpus() {
            let q = perturb_harmony(&p, 1.0, &mut rng).unwrap();
            for (a, b) in chord_segments(p.chords()).iter().zip(chord_segments(q.chords())) {
                total += 1;
                changed += (a.chord != b.chord) as usize;
            }
        }
        let expected = 1.0 - 1.0 / ChordSymbol::COUNT as f64;
        let rate = changed as f64 / total as f64;
        let sd = (expected * (1.0 - expected) / total as f64).sqrt();
        assert!((rate - expected).abs() < 4.0 * sd + 1e-9, "rate {rate}");
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[0.0, 1.0, 2.0], &[1.0, 5.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn mismatched_chords_are_valid() {
        let c = corpus();
        for y in mismatched_chords(&c, 1) {
            crate::symbolic::validate_chords(&y).unwrap();
        }
    }
}
