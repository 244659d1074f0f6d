//! Harmonic, synchronization and rhythm metrics over melody/chord pairs.
//!
//! A generated chord track may be shorter than its melody when it ends in
//! EOS; frames past the end of the chord track are not scored.

use num_traits::{Float, FromPrimitive, Num, Signed};

use crate::error::{Error, Result};
use crate::symbolic::{chord_segments, ChordToken, MelodyToken, FRAMES_PER_BEAT};

/// Chord segments longer than this many frames count as long chords.
pub const LONG_CHORD_FRAMES: usize = 32;

/// Numeric type a metric can be reported in: floats or exact rationals.
pub trait MetricValue: Clone + Num + Signed + FromPrimitive + PartialOrd {}

impl<T: Clone + Num + Signed + FromPrimitive + PartialOrd> MetricValue for T {}

fn ratio<T: MetricValue>(num: u64, den: u64) -> Option<T> {
    (den > 0).then(|| T::from_u64(num).expect("count fits") / T::from_u64(den).expect("count fits"))
}

/// Checks that `y` covers `x`, or stops early with a final EOS.
pub fn check_aligned(x: &[MelodyToken], y: &[ChordToken]) -> Result<()> {
    let early_eos = y.len() < x.len() && y.last() == Some(&ChordToken::Eos);
    if y.len() == x.len() || early_eos {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            melody: x.len(),
            chords: y.len(),
        })
    }
}

/// Frame counts behind the note-in-chord ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoteInChord {
    pub hits: u64,
    /// Frames where both melody and chord sound.
    pub counted: u64,
}

impl NoteInChord {
    pub fn ratio<T: MetricValue>(&self) -> Option<T> {
        ratio(self.hits, self.counted)
    }
}

fn note_in_chord_frames(x: &[MelodyToken], y: &[ChordToken]) -> NoteInChord {
    let mut out = NoteInChord::default();
    for (m, c) in x.iter().zip(y) {
        if let (Some(pitch), Some(chord)) = (m.pitch(), c.chord()) {
            out.counted += 1;
            out.hits += chord.pitch_classes().contains(pitch % 12) as u64;
        }
    }
    out
}

pub fn note_in_chord(x: &[MelodyToken], y: &[ChordToken]) -> Result<NoteInChord> {
    check_aligned(x, y)?;
    Ok(note_in_chord_frames(x, y))
}

/// Per-song ratio; `None` when no frame has both melody and chord sounding.
pub fn note_in_chord_ratio(x: &[MelodyToken], y: &[ChordToken]) -> Result<Option<f64>> {
    Ok(note_in_chord(x, y)?.ratio())
}

/// Mean of per-song ratios over songs where the ratio is defined.
pub fn system_note_in_chord<'a, I>(pairs: I) -> Result<Option<f64>>
where
    I: IntoIterator<Item = (&'a [MelodyToken], &'a [ChordToken])>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in pairs {
        if let Some(r) = note_in_chord_ratio(x, y)? {
            sum += r;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Integer-binned histogram. Bin `i` covers `[edges[i], edges[i+1])`; the
/// final bin is `[edges.last(), ∞)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    edges: Vec<u32>,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn with_edges(edges: Vec<u32>) -> Self {
        assert!(!edges.is_empty(), "histogram needs at least one edge");
        assert!(edges.windows(2).all(|w| w[0] < w[1]), "edges must increase");
        let counts = vec![0; edges.len()];
        Histogram { edges, counts }
    }

    /// Chord-to-note onset intervals: `[0,1), ..., [16,17), [17,∞)`.
    pub fn onset_interval() -> Self {
        Self::with_edges((0..=17).collect())
    }

    /// Chord lengths: `[0,1), ..., [32,33), [33,∞)`.
    pub fn chord_length() -> Self {
        Self::with_edges((0..=33).collect())
    }

    pub fn bin_of(&self, value: u32) -> Option<usize> {
        if value < self.edges[0] {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= value) - 1)
    }

    pub fn add(&mut self, value: u32) {
        if let Some(i) = self.bin_of(value) {
            self.counts[i] += 1;
        }
    }

    pub fn edges(&self) -> &[u32] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized counts; all zeros for an empty histogram.
    pub fn frequencies<T: MetricValue>(&self) -> Vec<T> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| ratio(c, total).unwrap_or_else(T::zero))
            .collect()
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::BinningMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `bin_start,bin_end,count` rows; the overflow bin ends at `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let end = self
                .edges
                .get(i + 1)
                .map_or_else(|| "inf".to_string(), u32::to_string);
            out.push_str(&format!("{},{},{}\n", self.edges[i], end, c));
        }
        out
    }
}

/// 1-D earth mover's distance with unit distance between adjacent bins:
/// the L1 distance between the cumulative distributions.
pub fn emd_frequencies<T: MetricValue>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::BinningMismatch);
    }
    let mut cdf_gap = T::zero();
    let mut total = T::zero();
    for (pa, pb) in a.iter().zip(b) {
        cdf_gap = cdf_gap + pa.clone() - pb.clone();
        total = total + cdf_gap.abs();
    }
    Ok(total)
}

pub fn emd<T: MetricValue>(a: &Histogram, b: &Histogram) -> Result<T> {
    if a.edges != b.edges {
        return Err(Error::BinningMismatch);
    }
    emd_frequencies(&a.frequencies::<T>(), &b.frequencies::<T>())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OnsetIntervals {
    pub histogram: Histogram,
    /// Chord onsets with no earlier melody onset to measure from.
    pub excluded: u64,
}

/// For each chord onset, frames since the latest melody onset at or before it.
pub fn onset_intervals(x: &[MelodyToken], y: &[ChordToken]) -> (Vec<u32>, u64) {
    let mut last_note: Option<usize> = None;
    let mut intervals = Vec::new();
    let mut excluded = 0;
    for (t, (m, c)) in x.iter().zip(y).enumerate() {
        if m.is_onset() {
            last_note = Some(t);
        }
        if c.is_onset() {
            match last_note {
                Some(n) => intervals.push((t - n) as u32),
                None => excluded += 1,
            }
        }
    }
    (intervals, excluded)
}

pub fn onset_interval_histogram<'a, I>(pairs: I) -> OnsetIntervals
where
    I: IntoIterator<Item = (&'a [MelodyToken], &'a [ChordToken])>,
{
    let mut histogram = Histogram::onset_interval();
    let mut excluded = 0;
    for (x, y) in pairs {
        let (iv, ex) = onset_intervals(x, y);
        iv.into_iter().for_each(|v| histogram.add(v));
        excluded += ex;
    }
    OnsetIntervals {
        histogram,
        excluded,
    }
}

pub fn chord_length_histogram<'a, I>(tracks: I) -> Histogram
where
    I: IntoIterator<Item = &'a [ChordToken]>,
{
    let mut h = Histogram::chord_length();
    for y in tracks {
        for seg in chord_segments(y) {
            h.add(seg.len as u32);
        }
    }
    h
}

/// Shannon entropy in nats; `None` for an empty histogram.
pub fn entropy<T: Float + FromPrimitive>(h: &Histogram) -> Option<T> {
    let total = h.total();
    if total == 0 {
        return None;
    }
    let n = T::from_u64(total)?;
    let mut acc = T::zero();
    for &c in h.counts() {
        if c > 0 {
            let p = T::from_u64(c)? / n;
            acc = acc - p * p.ln();
        }
    }
    Some(acc)
}

/// Entropy of the chord-length distribution; `None` if there are no chords.
pub fn chord_length_entropy<'a, I>(tracks: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [ChordToken]>,
{
    entropy(&chord_length_histogram(tracks))
}

/// Counts behind the auxiliary penalty-related ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuxiliaryCounts {
    pub silent_chord_frames: u64,
    pub sounding_melody_frames: u64,
    pub long_segments: u64,
    pub segments: u64,
    pub early_stops: u64,
    pub pieces: u64,
}

impl AuxiliaryCounts {
    pub fn chord_silence_ratio<T: MetricValue>(&self) -> Option<T> {
        ratio(self.silent_chord_frames, self.sounding_melody_frames)
    }

    pub fn long_chords_ratio<T: MetricValue>(&self) -> Option<T> {
        ratio(self.long_segments, self.segments)
    }

    pub fn early_stop_ratio<T: MetricValue>(&self) -> Option<T> {
        ratio(self.early_stops, self.pieces)
    }
}

/// Whether `y` emits EOS while melody frames remain.
pub fn stops_early(x: &[MelodyToken], y: &[ChordToken]) -> bool {
    y.iter()
        .position(|c| *c == ChordToken::Eos)
        .is_some_and(|e| e + 1 < x.len())
}

pub fn auxiliary_counts<'a, I>(pairs: I) -> Result<AuxiliaryCounts>
where
    I: IntoIterator<Item = (&'a [MelodyToken], &'a [ChordToken])>,
{
    let mut out = AuxiliaryCounts::default();
    for (x, y) in pairs {
        check_aligned(x, y)?;
        for (m, c) in x.iter().zip(y) {
            if !m.is_silence() {
                out.sounding_melody_frames += 1;
                out.silent_chord_frames += (*c == ChordToken::Silence) as u64;
            }
        }
        for seg in chord_segments(y) {
            out.segments += 1;
            out.long_segments += (seg.len > LONG_CHORD_FRAMES) as u64;
        }
        out.pieces += 1;
        out.early_stops += stops_early(x, y) as u64;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeatMetric {
    NoteInChord,
    ChordSilence,
}

/// Metric value for one song over frames `start..end`, or `None` when the
/// beat has nothing to score (whole beat silent).
pub fn beat_value(x: &[MelodyToken], y: &[ChordToken], start: usize, end: usize, metric: BeatMetric) -> Option<f64> {
    let end = end.min(x.len()).min(y.len());
    if start >= end {
        return None;
    }
    let (x, y) = (&x[start..end], &y[start..end]);
    match metric {
        BeatMetric::NoteInChord => note_in_chord_frames(x, y).ratio(),
        BeatMetric::ChordSilence => {
            let sounding = x.iter().filter(|m| !m.is_silence()).count() as u64;
            let silent = x
                .iter()
                .zip(y)
                .filter(|(m, c)| !m.is_silence() && **c == ChordToken::Silence)
                .count() as u64;
            ratio(silent, sounding)
        }
    }
}

/// Per-beat averages across songs, with the number of contributing songs.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatCurve {
    /// `values[b-1]` is beat `b`; `None` where no song contributes.
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl BeatCurve {
    /// Averages raw per-song values (`raw[song][beat-1]`).
    pub fn from_song_values(raw: &[Vec<Option<f64>>]) -> Self {
        let beats = raw.iter().map(Vec::len).max().unwrap_or(0);
        let mut values = Vec::with_capacity(beats);
        let mut counts = Vec::with_capacity(beats);
        for b in 0..beats {
            let vals: Vec<f64> = raw.iter().filter_map(|s| s.get(b).copied().flatten()).collect();
            counts.push(vals.len());
            values.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
        }
        BeatCurve { values, counts }
    }

    pub fn beat(&self, b: usize) -> Option<f64> {
        self.values.get(b.checked_sub(1)?).copied().flatten()
    }

    /// Mean of defined values over beats `from..=to` (1-based).
    pub fn mean_over(&self, from: usize, to: usize) -> Option<f64> {
        let vals: Vec<f64> = (from..=to).filter_map(|b| self.beat(b)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `beat,value,n_songs` rows; undefined beats have an empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beat,value,n_songs\n");
        for (i, (v, n)) in self.values.iter().zip(&self.counts).enumerate() {
            let v = v.map_or_else(String::new, |v| format!("{v}"));
            out.push_str(&format!("{},{},{}\n", i + 1, v, n));
        }
        out
    }
}

/// Raw per-song, per-beat values; beat `b` covers frames `4(b-1)..4b`.
pub fn per_beat_values<'a, I>(pairs: I, metric: BeatMetric) -> Vec<Vec<Option<f64>>>
where
    I: IntoIterator<Item = (&'a [MelodyToken], &'a [ChordToken])>,
{
    pairs
        .into_iter()
        .map(|(x, y)| {
            let beats = x.len().div_ceil(FRAMES_PER_BEAT);
            (0..beats)
                .map(|b| beat_value(x, y, b * FRAMES_PER_BEAT, (b + 1) * FRAMES_PER_BEAT, metric))
                .collect()
        })
        .collect()
}

pub fn per_beat_curve<'a, I>(pairs: I, metric: BeatMetric) -> BeatCurve
where
    I: IntoIterator<Item = (&'a [MelodyToken], &'a [ChordToken])>,
{
    BeatCurve::from_song_values(&per_beat_values(pairs, metric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{ChordQuality, ChordSymbol};
    use num_rational::Ratio;

    fn held(pitch: u8, n: usize) -> Vec<MelodyToken> {
        let mut v = vec![MelodyToken::NoteHold(pitch); n];
        v[0] = MelodyToken::NoteOn(pitch);
        v
    }

    fn chord(root: u8, n: usize) -> Vec<ChordToken> {
        let c = ChordSymbol::new(root, ChordQuality::Maj);
        let mut v = vec![ChordToken::Hold(c); n];
        v[0] = ChordToken::On(c);
        v
    }

    #[test]
    fn note_in_chord_examples() {
        assert_eq!(note_in_chord_ratio(&held(60, 16), &chord(0, 16)).unwrap(), Some(1.0));
        assert_eq!(note_in_chord_ratio(&held(60, 16), &chord(2, 16)).unwrap(), Some(0.0));
        let mut x = held(60, 8);
        x.extend(held(62, 8));
        assert_eq!(note_in_chord_ratio(&x, &chord(0, 16)).unwrap(), Some(0.5));
        assert_eq!(
            note_in_chord_ratio(&[MelodyToken::Silence; 4], &chord(0, 4)).unwrap(),
            None
        );
        assert!(note_in_chord_ratio(&held(60, 4), &chord(0, 3)).is_err());
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::onset_interval();
        assert_eq!(h.num_bins(), 18);
        assert_eq!(h.bin_of(0), Some(0));
        assert_eq!(h.bin_of(16), Some(16));
        assert_eq!(h.bin_of(17), Some(17));
        assert_eq!(h.bin_of(500), Some(17));
        assert_eq!(Histogram::chord_length().num_bins(), 34);
        let mut h = Histogram::with_edges(vec![0, 1, 2]);
        h.add(1);
        assert!(h.to_csv().contains("1,2,1\n2,inf,0"));
    }

    #[test]
    fn emd_examples() {
        let mut a = Histogram::with_edges(vec![0, 1, 2]);
        let mut b = a.clone();
        a.add(0);
        b.add(2);
        assert_eq!(emd::<f64>(&a, &b).unwrap(), 2.0);
        assert_eq!(emd::<Ratio<i64>>(&a, &a).unwrap(), Ratio::from_integer(0));
        assert!(emd::<f64>(&a, &Histogram::onset_interval()).is_err());
    }

    #[test]
    fn onset_interval_examples() {
        let x = held(60, 8);
        let y = chord(0, 8);
        assert_eq!(onset_intervals(&x, &y), (vec![0], 0));
        let mut y = vec![ChordToken::Silence; 3];
        y.extend(chord(0, 5));
        assert_eq!(onset_intervals(&x, &y), (vec![3], 0));
        let mut x = vec![MelodyToken::Silence; 2];
        x.extend(held(60, 6));
        assert_eq!(onset_intervals(&x, &chord(0, 8)), (vec![], 1));
    }

    #[test]
    fn entropy_examples() {
        let tracks: Vec<Vec<ChordToken>> = (0..5).map(|_| chord(0, 4)).collect();
        let e = chord_length_entropy(tracks.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(e, 0.0);
        let tracks: Vec<Vec<ChordToken>> = (1..=8).map(|n| chord(0, n)).collect();
        let e = chord_length_entropy(tracks.iter().map(Vec::as_slice)).unwrap();
        assert!((e - 8f64.ln()).abs() < 1e-12);
        assert_eq!(chord_length_entropy([&[ChordToken::Silence][..]]), None);
    }

    #[test]
    fn auxiliary_examples() {
        let x = held(60, 64);
        let y = chord(0, 64);
        let c = auxiliary_counts([(&x[..], &y[..])]).unwrap();
        assert_eq!(c.chord_silence_ratio::<f64>(), Some(0.0));
        assert_eq!(c.early_stop_ratio::<f64>(), Some(0.0));

        let mut y = chord(0, 40);
        y.extend(chord(2, 8));
        y.extend(chord(4, 8));
        y.extend(chord(5, 8));
        let x = held(60, 64);
        let c = auxiliary_counts([(&x[..], &y[..])]).unwrap();
        assert_eq!(c.long_chords_ratio::<f64>(), Some(0.25));

        let mut y = chord(0, 10);
        y.push(ChordToken::Eos);
        let c = auxiliary_counts([(&x[..], &y[..])]).unwrap();
        assert_eq!(c.early_stop_ratio::<f64>(), Some(1.0));
    }

    #[test]
    fn beat_indexing_uses_four_frames() {
        let mut x = held(60, 4);
        x.extend(held(62, 4));
        let y = chord(0, 8);
        let curve = per_beat_curve([(&x[..], &y[..])], BeatMetric::NoteInChord);
        assert_eq!(curve.values, vec![Some(1.0), Some(0.0)]);
        let silent = vec![MelodyToken::Silence; 8];
        let curve = per_beat_curve([(&x[..], &y[..]), (&silent[..], &y[..])], BeatMetric::NoteInChord);
        assert_eq!(curve.counts, vec![1, 1]);
    }
}
