//! Synthetic melody/chord corpus with controllable aggregate statistics,
//! plus splitting, transposition augmentation and cropping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::{
    transpose, ChordEvent, ChordQuality, ChordSymbol, ChordToken, MelodyToken, NoteEvent, Piece,
    PieceMeta, MAX_FRAMES,
};

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

/// A discrete distribution over frame counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationDist {
    pub values: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DurationDist {
    fn validate(&self, what: &str) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.weights.len() {
            return Err(Error::Config(format!("{what}: values/weights mismatch")));
        }
        if self.values.contains(&0) {
            return Err(Error::Config(format!("{what}: durations must be positive")));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("{what}: weights must be non-negative with positive sum")));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (v, w) in self.values.iter().zip(&self.weights) {
            if u < *w {
                return *v;
            }
            u -= w;
        }
        *self.values.last().expect("non-empty")
    }
}

/// Probabilities of melody event kinds; must sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelodyPolicy {
    pub chord_tone: f64,
    pub scale_tone: f64,
    pub silence: f64,
    pub note_duration: DurationDist,
    /// Inclusive MIDI pitch range for generated notes.
    pub low: u8,
    pub high: u8,
    /// Larger values allow wider leaps between consecutive notes.
    pub leap_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_pieces: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Relative weight of each of the 12 key roots.
    pub key_weights: Vec<f64>,
    /// Progressions as roman numerals (e.g. "I", "V7", "vi", "IVmaj7").
    pub templates: Vec<Vec<String>>,
    pub chord_duration: DurationDist,
    /// Probability a piece opens with a short unaccompanied pickup.
    pub pickup_prob: f64,
    pub melody: MelodyPolicy,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        CorpusConfig {
            num_pieces: 2000,
            min_frames: 128,
            max_frames: 128,
            key_weights: vec![1.0; 12],
            templates: vec![
                t("I V vi IV"),
                t("vi IV I V"),
                t("I vi IV V"),
                t("I IV V I"),
                t("ii7 V7 Imaj7 vi7"),
                t("I iii IV V"),
                t("IV V iii vi"),
                t("I V IV V"),
                t("vi ii V I"),
                t("I IVmaj7 vi Vsus4"),
                t("IV I V vi"),
                t("I bVII IV I"),
            ],
            chord_duration: DurationDist {
                values: vec![2, 4, 6, 8, 12, 16, 24, 32],
                weights: vec![0.06, 0.2, 0.06, 0.26, 0.08, 0.22, 0.06, 0.06],
            },
            pickup_prob: 0.25,
            melody: MelodyPolicy {
                chord_tone: 0.72,
                scale_tone: 0.25,
                silence: 0.03,
                note_duration: DurationDist {
                    values: vec![1, 2, 3, 4, 6, 8],
                    weights: vec![0.1, 0.35, 0.1, 0.3, 0.08, 0.07],
                },
                low: 60,
                high: 81,
                leap_scale: 3.0,
            },
            seed: 17,
        }
    }
}

/// Parses a roman-numeral chord relative to a major key.
pub fn parse_degree(numeral: &str) -> Result<(u8, ChordQuality)> {
    let bad = || Error::Config(format!("cannot parse scale-degree chord `{numeral}`"));
    let (flat, body) = match numeral.strip_prefix('b') {
        Some(rest) => (true, rest),
        None => (false, numeral),
    };
    let roman_len = body
        .chars()
        .take_while(|c| matches!(c, 'I' | 'V' | 'i' | 'v'))
        .count();
    let (roman, suffix) = body.split_at(roman_len);
    let degree = match roman.to_ascii_uppercase().as_str() {
        "I" => 0,
        "II" => 1,
        "III" => 2,
        "IV" => 3,
        "V" => 4,
        "VI" => 5,
        "VII" => 6,
        _ => return Err(bad()),
    };
    let upper = roman.chars().next().is_some_and(char::is_uppercase);
    let quality = match (upper, suffix) {
        (true, "") => ChordQuality::Maj,
        (false, "") => ChordQuality::Min,
        (true, "7") => ChordQuality::Dom7,
        (false, "7") => ChordQuality::Min7,
        (_, "maj7") => ChordQuality::Maj7,
        (_, "dim") | (_, "o") => ChordQuality::Dim,
        (_, "aug") | (_, "+") => ChordQuality::Aug,
        (_, "sus2") => ChordQuality::Sus2,
        (_, "sus4") => ChordQuality::Sus4,
        _ => return Err(bad()),
    };
    let offset = (MAJOR_SCALE[degree] + if flat { 11 } else { 0 }) % 12;
    Ok((offset, quality))
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<Vec<Vec<(u8, ChordQuality)>>> {
        if self.templates.is_empty() || self.templates.iter().any(Vec::is_empty) {
            return Err(Error::Config("at least one non-empty progression template is required".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames || self.max_frames > MAX_FRAMES {
            return Err(Error::Config(format!(
                "frame range {}..={} must lie in 1..={MAX_FRAMES}",
                self.min_frames, self.max_frames
            )));
        }
        if self.key_weights.len() != 12 || self.key_weights.iter().any(|w| *w < 0.0) || self.key_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("key_weights needs 12 non-negative weights".into()));
        }
        let m = &self.melody;
        let total = m.chord_tone + m.scale_tone + m.silence;
        if [m.chord_tone, m.scale_tone, m.silence].iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("melody probabilities must be non-negative and sum to 1 (got {total})")));
        }
        if !(0.0..=1.0).contains(&self.pickup_prob) {
            return Err(Error::Config("pickup_prob must lie in [0,1]".into()));
        }
        if m.low > m.high || m.high > 127 || m.high - m.low < 12 {
            return Err(Error::Config("melody pitch range must span at least an octave within 0..=127".into()));
        }
        self.chord_duration.validate("chord_duration")?;
        m.note_duration.validate("melody.note_duration")?;
        self.templates
            .iter()
            .map(|t| t.iter().map(|s| parse_degree(s)).collect())
            .collect()
    }
}

/// Deterministic per-piece stream derived from the master seed.
pub fn piece_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct MelodyWriter<'a> {
    policy: &'a MelodyPolicy,
    notes: Vec<NoteEvent>,
    prev_pitch: i32,
}

impl MelodyWriter<'_> {
    fn pick_pitch<R: Rng>(&mut self, classes: &[u8], rng: &mut R) -> i32 {
        let candidates: Vec<i32> = (self.policy.low..=self.policy.high)
            .filter(|p| classes.contains(&(p % 12)))
            .map(i32::from)
            .collect();
        let weights: Vec<f64> = candidates
            .iter()
            .map(|p| (-((p - self.prev_pitch).abs() as f64) / self.policy.leap_scale).exp())
            .collect();
        let pitch = candidates[sample_weighted(&weights, rng)];
        self.prev_pitch = pitch;
        pitch
    }

    /// Fills `start..end` with notes and rests, never crossing `end`.
    fn fill<R: Rng>(&mut self, start: usize, end: usize, chord: Option<ChordSymbol>, key: u8, rng: &mut R) {
        let scale: Vec<u8> = MAJOR_SCALE.iter().map(|d| (d + key) % 12).collect();
        let mut t = start;
        while t < end {
            let dur = self.policy.note_duration.sample(rng).min(end - t);
            let kind = sample_weighted(
                &[self.policy.chord_tone, self.policy.scale_tone, self.policy.silence],
                rng,
            );
            let chord_classes: Vec<u8> = chord.map(|c| c.pitch_classes().iter().collect()).unwrap_or_default();
            let non_chord: Vec<u8> = scale.iter().copied().filter(|pc| !chord_classes.contains(pc)).collect();
            let classes = match kind {
                0 if !chord_classes.is_empty() => chord_classes,
                0 | 1 if !non_chord.is_empty() => non_chord,
                0 | 1 => scale.clone(),
                _ => Vec::new(),
            };
            if !classes.is_empty() {
                let pitch = self.pick_pitch(&classes, rng);
                self.notes.push(NoteEvent {
                    pitch,
                    onset: t,
                    duration: dur,
                });
            }
            t += dur;
        }
    }
}

fn generate_piece(
    config: &CorpusConfig,
    templates: &[Vec<(u8, ChordQuality)>],
    index: usize,
) -> Result<Piece> {
    let mut rng = piece_rng(config.seed, index as u64);
    let frames = rng.random_range(config.min_frames..=config.max_frames);
    let key = sample_weighted(&config.key_weights, &mut rng) as u8;
    let template_idx = rng.random_range(0..templates.len());
    let template = &templates[template_idx];

    let mut melody = MelodyWriter {
        policy: &config.melody,
        notes: Vec::new(),
        prev_pitch: (config.melody.low as i32 + config.melody.high as i32) / 2,
    };
    let mut chords = Vec::new();
    let mut t = 0;
    if frames > 8 && rng.random::<f64>() < config.pickup_prob {
        let pickup = rng.random_range(2..=4);
        melody.fill(0, pickup, None, key, &mut rng);
        t = pickup;
    }
    let mut degree = 0;
    while t < frames {
        let (offset, quality) = template[degree % template.len()];
        degree += 1;
        let chord = ChordSymbol::new(key + offset, quality);
        let len = config.chord_duration.sample(&mut rng).min(frames - t);
        chords.push(ChordEvent {
            chord,
            onset: t,
            duration: len,
        });
        melody.fill(t, t + len, Some(chord), key, &mut rng);
        t += len;
    }

    let mut meta = PieceMeta::new();
    meta.insert("key".into(), serde_json::Value::from(crate::symbolic::pitch_class_name(key)));
    meta.insert("template".into(), serde_json::Value::from(template_idx));
    meta.insert("index".into(), serde_json::Value::from(index));
    Piece::with_meta(
        crate::symbolic::tokenize_melody(&melody.notes, frames)?,
        crate::symbolic::tokenize_chords(&chords, frames)?,
        meta,
    )
}

/// Generates `config.num_pieces` pieces; piece `i` depends only on
/// `(config, i)`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<Piece>> {
    let templates = config.validate()?;
    (0..config.num_pieces)
        .map(|i| generate_piece(config, &templates, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Piece>,
    pub validation: Vec<Piece>,
    pub test: Vec<Piece>,
}

/// Index assignment behind [`split`]: a seeded shuffle cut at rounded
/// fraction boundaries.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let fractions = [spec.train, spec.validation, spec.test];
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((n as f64) * spec.train).round() as usize;
    let n_val = (((n as f64) * spec.validation).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

pub fn split(corpus: &[Piece], spec: &SplitSpec) -> Result<Splits> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".into()));
    }
    let [tr, va, te] = split_indices(corpus.len(), spec)?;
    let take = |idx: Vec<usize>| idx.into_iter().map(|i| corpus[i].clone()).collect();
    Ok(Splits {
        train: take(tr),
        validation: take(va),
        test: take(te),
    })
}

/// Transposes by a uniform shift in `-6..=6`, redrawing shifts that push a
/// pitch out of range.
pub fn augment<R: Rng>(piece: &Piece, rng: &mut R) -> Piece {
    augment_with_shift(piece, rng).0
}

pub fn augment_with_shift<R: Rng>(piece: &Piece, rng: &mut R) -> (Piece, i32) {
    for _ in 0..64 {
        let shift = rng.random_range(-6..=6);
        if let Ok(p) = transpose(piece, shift) {
            return (p, shift);
        }
    }
    (piece.clone(), 0)
}

/// A random contiguous window of at most `max_len` frames.
pub fn crop<R: Rng>(piece: &Piece, max_len: usize, rng: &mut R) -> Piece {
    if piece.len() <= max_len {
        return piece.clone();
    }
    let start = rng.random_range(0..=piece.len() - max_len);
    piece.window(start, start + max_len)
}

/// Fraction of frames where both tracks sound and the melody pitch class is
/// in the chord, pooled over the corpus.
pub fn pooled_note_in_chord(pieces: &[Piece]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pieces {
        for (m, c) in p.melody().iter().zip(p.chords()) {
            if let (Some(pitch), Some(chord)) = (m.pitch(), c.chord()) {
                total += 1;
                hit += chord.pitch_classes().contains(pitch % 12) as usize;
            }
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Chord silence against sounding melody, pooled over the corpus.
pub fn pooled_chord_silence(pieces: &[Piece]) -> f64 {
    let (mut silent, mut total) = (0usize, 0usize);
    for p in pieces {
        for (m, c) in p.melody().iter().zip(p.chords()) {
            if !m.is_silence() {
                total += 1;
                silent += (*c == ChordToken::Silence) as usize;
            }
        }
    }
    silent as f64 / total.max(1) as f64
}

pub fn melody_silence_rate(pieces: &[Piece]) -> f64 {
    let total: usize = pieces.iter().map(Piece::len).sum();
    let silent: usize = pieces
        .iter()
        .map(|p| p.melody().iter().filter(|m| **m == MelodyToken::Silence).count())
        .sum();
    silent as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CorpusConfig {
        CorpusConfig {
            num_pieces: n,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn roman_numerals() {
        assert_eq!(parse_degree("I").unwrap(), (0, ChordQuality::Maj));
        assert_eq!(parse_degree("vi").unwrap(), (9, ChordQuality::Min));
        assert_eq!(parse_degree("V7").unwrap(), (7, ChordQuality::Dom7));
        assert_eq!(parse_degree("ii7").unwrap(), (2, ChordQuality::Min7));
        assert_eq!(parse_degree("IVmaj7").unwrap(), (5, ChordQuality::Maj7));
        assert_eq!(parse_degree("viidim").unwrap(), (11, ChordQuality::Dim));
        assert_eq!(parse_degree("bVII").unwrap(), (10, ChordQuality::Maj));
        assert!(parse_degree("X").is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&small(20)).unwrap();
        let b = generate_corpus(&small(20)).unwrap();
        let text = |c: &[Piece]| c.iter().map(crate::symbolic::serialize).collect::<Vec<_>>().join("\n");
        assert_eq!(text(&a), text(&b));
        let other = generate_corpus(&CorpusConfig { seed: 99, ..small(20) }).unwrap();
        assert_ne!(text(&a), text(&other));
    }

    #[test]
    fn forced_chord_tones_fit_every_frame() {
        let mut cfg = small(50);
        cfg.melody.chord_tone = 1.0;
        cfg.melody.scale_tone = 0.0;
        cfg.melody.silence = 0.0;
        cfg.pickup_prob = 0.0;
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(pooled_note_in_chord(&corpus), 1.0);
    }

    #[test]
    fn rejects_impossible_configs() {
        let mut cfg = small(1);
        cfg.templates.clear();
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = small(1);
        cfg.melody.silence = 0.5;
        assert!(generate_corpus(&cfg).is_err());
        let mut cfg = small(1);
        cfg.max_frames = 300;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let corpus = generate_corpus(&CorpusConfig {
            min_frames: 16,
            max_frames: 16,
            ..small(10)
        })
        .unwrap();
        let s = split(&corpus, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let [a, b, c] = split_indices(10, &SplitSpec::default()).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, &SplitSpec::default()).unwrap(), [a, b, c]);
        assert!(split(&[], &SplitSpec::default()).is_err());
    }

    #[test]
    fn crop_short_piece_unchanged_and_repairs_window_start() {
        let corpus = generate_corpus(&small(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = &corpus[0];
        assert_eq!(&crop(p, 256, &mut rng), p);
        // Find a start in the middle of a chord and check it became an onset.
        let mid = p.chords().iter().position(|c| matches!(c, ChordToken::Hold(_))).unwrap();
        let w = p.window(mid, p.len());
        assert!(w.chords()[0].is_onset());
    }

    #[test]
    fn shift_distribution_is_uniform() {
        let corpus = generate_corpus(&small(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 13];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, s) = augment_with_shift(&corpus[0], &mut rng);
            counts[(s + 6) as usize] += 1;
        }
        let expected = draws as f64 / 13.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 12 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 32.91, "chi2 = {chi2}, counts = {counts:?}");
        assert!(counts[6] > 0);
    }
}
