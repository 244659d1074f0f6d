//! Brute-force reference implementations of the evaluation metrics, written
//! independently of the library: frame enumeration, backward scans for the
//! nearest onset, and exhaustive or greedy transport for the earth mover's
//! distance. Everything except entropy is computed in exact rationals.

use chordjam::eval::{
    auxiliary_counts, chord_length_histogram, emd, emd_frequencies, entropy, note_in_chord, onset_interval_histogram,
};
use chordjam::symbolic::{ChordQuality, ChordSymbol, ChordToken, MelodyToken};
use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Q = Ratio<i64>;

/// Semitones above the root, indexed like `ChordQuality::ALL`.
const INTERVALS: [&[i32]; 9] = [
    &[0, 4, 7],
    &[0, 3, 7],
    &[0, 3, 6],
    &[0, 4, 8],
    &[0, 2, 7],
    &[0, 5, 7],
    &[0, 4, 7, 11],
    &[0, 3, 7, 10],
    &[0, 4, 7, 10],
];

const ONSET_BINS: usize = 18;
const LENGTH_BINS: usize = 34;

pub struct Instance {
    pub x: Vec<MelodyToken>,
    pub y: Vec<ChordToken>,
}

/// A valid melody of `len` frames and a valid chord track that covers it or
/// stops early with EOS. Pitches and chords come from small pools so that
/// hits, misses, holds and silences all occur often.
pub fn random_instance(rng: &mut ChaCha8Rng, len: usize) -> Instance {
    let mut x = Vec::with_capacity(len);
    while x.len() < len {
        let run = rng.random_range(1..=6).min(len - x.len());
        if rng.random_bool(0.25) {
            x.extend(std::iter::repeat_n(MelodyToken::Silence, run));
        } else {
            let p = rng.random_range(55..80u8);
            x.push(MelodyToken::NoteOn(p));
            x.extend(std::iter::repeat_n(MelodyToken::NoteHold(p), run - 1));
        }
    }
    let y_len = if rng.random_bool(0.2) { rng.random_range(1..=len) } else { len };
    let early = y_len < len;
    let body = if early { y_len - 1 } else { y_len };
    let roots = [0u8, 2, 5, 7, 9];
    let mut y = Vec::with_capacity(y_len);
    while y.len() < body {
        let run = rng.random_range(1..=12).min(body - y.len());
        if rng.random_bool(0.2) {
            y.extend(std::iter::repeat_n(ChordToken::Silence, run));
        } else {
            let c = ChordSymbol::new(*roots.choose(rng).unwrap(), *ChordQuality::ALL.choose(rng).unwrap());
            y.push(ChordToken::On(c));
            y.extend(std::iter::repeat_n(ChordToken::Hold(c), run - 1));
        }
    }
    if early {
        y.push(ChordToken::Eos);
    }
    Instance { x, y }
}

fn melody_pitch(m: MelodyToken) -> Option<i32> {
    match m {
        MelodyToken::NoteOn(p) | MelodyToken::NoteHold(p) => Some(p as i32),
        MelodyToken::Silence => None,
    }
}

fn chord_of(c: ChordToken) -> Option<ChordSymbol> {
    match c {
        ChordToken::On(s) | ChordToken::Hold(s) => Some(s),
        _ => None,
    }
}

fn in_chord(pitch: i32, chord: ChordSymbol) -> bool {
    let rel = (pitch - chord.root() as i32).rem_euclid(12);
    INTERVALS[chord.quality().index()].contains(&rel)
}

/// `(hits, counted)` over frames where both tracks sound.
pub fn oracle_note_in_chord(inst: &Instance) -> (i64, i64) {
    let (mut hits, mut counted) = (0, 0);
    for t in 0..inst.x.len().min(inst.y.len()) {
        if let (Some(p), Some(c)) = (melody_pitch(inst.x[t]), chord_of(inst.y[t])) {
            counted += 1;
            hits += in_chord(p, c) as i64;
        }
    }
    (hits, counted)
}

/// Onset-interval histogram and excluded count by scanning backwards from
/// each chord onset.
pub fn oracle_onset_histogram(insts: &[Instance]) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; ONSET_BINS];
    let mut excluded = 0;
    for inst in insts {
        let n = inst.x.len().min(inst.y.len());
        for f in 0..n {
            if !matches!(inst.y[f], ChordToken::On(_)) {
                continue;
            }
            match (0..=f).rev().find(|&t| matches!(inst.x[t], MelodyToken::NoteOn(_))) {
                Some(t) => counts[(f - t).min(ONSET_BINS - 1)] += 1,
                None => excluded += 1,
            }
        }
    }
    (counts, excluded)
}

/// Segment lengths: an onset followed by holds of the same chord.
pub fn oracle_segment_lengths(y: &[ChordToken]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < y.len() {
        if let ChordToken::On(c) = y[t] {
            let mut len = 1;
            while t + len < y.len() && y[t + len] == ChordToken::Hold(c) {
                len += 1;
            }
            out.push(len);
            t += len;
        } else {
            t += 1;
        }
    }
    out
}

pub fn oracle_length_histogram(insts: &[Instance]) -> Vec<u64> {
    let mut counts = vec![0u64; LENGTH_BINS];
    for inst in insts {
        for len in oracle_segment_lengths(&inst.y) {
            counts[len.min(LENGTH_BINS - 1)] += 1;
        }
    }
    counts
}

/// Entropy via `ln N - (1/N) Σ c ln c`, a different evaluation order from
/// the plug-in formula.
pub fn oracle_entropy(counts: &[u64]) -> Option<f64> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let s: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 * (c as f64).ln()).sum();
    Some(nf.ln() - s / nf)
}

fn normalize(counts: &[u64]) -> Vec<Q> {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if n == 0 { Q::from_integer(0) } else { Q::new(c as i64, n as i64) })
        .collect()
}

/// Northwest-corner transport between two distributions of equal mass,
/// moving mass in bin order; optimal for a convex ground cost on a line.
pub fn oracle_emd_greedy(a: &[Q], b: &[Q]) -> Q {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    let mut cost = Q::from_integer(0);
    let zero = Q::from_integer(0);
    while i < a.len() && j < b.len() {
        if a[i] == zero {
            i += 1;
            continue;
        }
        if b[j] == zero {
            j += 1;
            continue;
        }
        let m = a[i].min(b[j]);
        cost += m * Q::from_integer((i as i64 - j as i64).abs());
        a[i] -= m;
        b[j] -= m;
    }
    cost
}

fn permutations(n: usize, f: &mut impl FnMut(&[usize])) {
    fn go(k: usize, p: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            go(k + 1, p, f);
            p.swap(k, i);
        }
    }
    go(0, &mut (0..n).collect(), f);
}

/// Exact transport cost by trying every matching of unit masses. Counts are
/// rescaled to a common total `lcm(Na, Nb)`, which must stay small.
pub fn oracle_emd_exhaustive(a: &[u64], b: &[u64]) -> Q {
    let (na, nb) = (a.iter().sum::<u64>(), b.iter().sum::<u64>());
    let l = num_integer_lcm(na, nb);
    let units = |h: &[u64], n: u64| -> Vec<usize> {
        h.iter()
            .enumerate()
            .flat_map(|(bin, &c)| std::iter::repeat_n(bin, (c * (l / n)) as usize))
            .collect()
    };
    let (ua, ub) = (units(a, na), units(b, nb));
    assert!(ua.len() <= 8, "exhaustive transport limited to 8 units");
    let mut best = i64::MAX;
    permutations(ub.len(), &mut |p| {
        let c: i64 = ua.iter().zip(p).map(|(&i, &k)| (i as i64 - ub[k] as i64).abs()).sum();
        best = best.min(c);
    });
    Q::new(best, l as i64)
}

fn num_integer_lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    a / gcd(a, b) * b
}

/// `(silent chord frames under sounding melody, sounding melody frames,
/// long segments, segments, early stops)` by direct enumeration.
pub fn oracle_auxiliary(insts: &[Instance]) -> [i64; 5] {
    let mut out = [0i64; 5];
    for inst in insts {
        for t in 0..inst.x.len().min(inst.y.len()) {
            if melody_pitch(inst.x[t]).is_some() {
                out[1] += 1;
                out[0] += (inst.y[t] == ChordToken::Silence) as i64;
            }
        }
        for len in oracle_segment_lengths(&inst.y) {
            out[3] += 1;
            out[2] += (len > 32) as i64;
        }
        let eos = inst.y.iter().position(|c| *c == ChordToken::Eos);
        out[4] += eos.is_some_and(|e| e < inst.x.len() - 1) as i64;
    }
    out
}

fn q_ratio(num: i64, den: i64) -> Option<Q> {
    (den > 0).then(|| Q::new(num, den))
}

/// Per-check mismatch descriptions over `instances` random cases of at most
/// `max_len` frames; empty means every metric agreed.
pub fn run_metric_oracles(seed: u64, instances: usize, max_len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    let mut fail = |what: &str, i: usize, detail: String| errors.push(format!("instance {i}: {what}: {detail}"));
    for i in 0..instances {
        // A small corpus per instance so histograms pool several songs.
        let songs = rng.random_range(1..=3);
        let insts: Vec<Instance> = (0..songs)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                random_instance(&mut rng, len)
            })
            .collect();
        let pairs = || insts.iter().map(|s| (s.x.as_slice(), s.y.as_slice()));

        for s in &insts {
            let (h, c) = oracle_note_in_chord(s);
            let got = note_in_chord(&s.x, &s.y).unwrap();
            if (got.hits as i64, got.counted as i64) != (h, c) || got.ratio::<Q>() != q_ratio(h, c) {
                fail("note-in-chord", i, format!("{got:?} vs ({h}, {c})"));
            }
        }

        let onset = onset_interval_histogram(pairs());
        let (counts, excluded) = oracle_onset_histogram(&insts);
        if onset.histogram.counts() != counts.as_slice() || onset.excluded != excluded {
            fail("onset histogram", i, format!("{:?}/{} vs {counts:?}/{excluded}", onset.histogram.counts(), onset.excluded));
        }

        let lengths = chord_length_histogram(insts.iter().map(|s| s.y.as_slice()));
        let length_counts = oracle_length_histogram(&insts);
        if lengths.counts() != length_counts.as_slice() {
            fail("chord-length histogram", i, format!("{:?} vs {length_counts:?}", lengths.counts()));
        }
        match (entropy::<f64>(&lengths), oracle_entropy(&length_counts)) {
            (None, None) => {}
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (a, b) => fail("entropy", i, format!("{a:?} vs {b:?}")),
        }

        // EMD between the pooled onset histogram and one from a fresh song,
        // checked against greedy transport.
        let other = {
            let extra = random_instance(&mut rng, max_len);
            onset_interval_histogram([(extra.x.as_slice(), extra.y.as_slice())]).histogram
        };
        if onset.histogram.total() > 0 && other.total() > 0 {
            let got: Q = emd(&onset.histogram, &other).unwrap();
            let want = oracle_emd_greedy(&normalize(onset.histogram.counts()), &normalize(other.counts()));
            if got != want {
                fail("emd (greedy transport)", i, format!("{got} vs {want}"));
            }
        }

        // Small histograms: exhaustive matching of unit masses.
        let bins = rng.random_range(1..=8);
        let small = |rng: &mut ChaCha8Rng, total: u64| -> Vec<u64> {
            let mut h = vec![0u64; bins];
            for _ in 0..total {
                h[rng.random_range(0..bins)] += 1;
            }
            h
        };
        let (na, nb) = *[(1, 1), (2, 2), (3, 3), (4, 4), (2, 4), (4, 8), (8, 8), (1, 8), (6, 6), (2, 3), (5, 5), (7, 7)]
            .choose(&mut rng)
            .unwrap();
        let (ha, hb) = (small(&mut rng, na), small(&mut rng, nb));
        let got = emd_frequencies(&normalize(&ha), &normalize(&hb)).unwrap();
        let want = oracle_emd_exhaustive(&ha, &hb);
        if got != want || oracle_emd_greedy(&normalize(&ha), &normalize(&hb)) != want {
            fail("emd (exhaustive transport)", i, format!("{ha:?} {hb:?}: {got} vs {want}"));
        }

        let aux = auxiliary_counts(pairs()).unwrap();
        let [sil, sounding, long, segs, stops] = oracle_auxiliary(&insts);
        let checks = [
            ("chord silence ratio", aux.chord_silence_ratio::<Q>(), q_ratio(sil, sounding)),
            ("long chords ratio", aux.long_chords_ratio::<Q>(), q_ratio(long, segs)),
            ("early stop ratio", aux.early_stop_ratio::<Q>(), q_ratio(stops, insts.len() as i64)),
        ];
        for (name, got, want) in checks {
            if got != want {
                fail(name, i, format!("{got:?} vs {want:?}"));
            }
        }
    }
    errors
}
