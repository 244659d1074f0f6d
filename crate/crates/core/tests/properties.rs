#[path = "support/oracle.rs"]
#[allow(dead_code)]
mod oracle;

use chordjam::corpus::{generate_corpus, CorpusConfig};
use chordjam::eval::{emd_frequencies, entropy, note_in_chord, Histogram};
use chordjam::finetune::{kl_divergence, Penalties};
use chordjam::reward::{perturb_harmony, windows};
use chordjam::symbolic::{chord_segments, deinterleave, interleave, parse, serialize, transpose, Piece};
use ndarray::Array1;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i64>;

fn freqs(counts: &[u64]) -> Vec<Q> {
    let n: u64 = counts.iter().sum();
    counts.iter().map(|&c| Q::new(c as i64, n.max(1) as i64)).collect()
}

fn counts(bins: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0u64..20, bins).prop_filter("non-empty", |v| v.iter().sum::<u64>() > 0)
}

fn full_piece(seed: u64, len: usize) -> Piece {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inst = oracle::random_instance(&mut rng, len);
        if inst.y.len() == len && !inst.y.contains(&chordjam::symbolic::ChordToken::Eos) {
            return Piece::new(inst.x, inst.y).unwrap();
        }
    }
}

fn log_softmax(z: &[f64]) -> Array1<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

proptest! {
    #[test]
    fn emd_is_a_metric(a in counts(18), b in counts(18), c in counts(18)) {
        let (a, b, c) = (freqs(&a), freqs(&b), freqs(&c));
        let d = |x: &[Q], y: &[Q]| emd_frequencies(x, y).unwrap();
        let zero = Q::from_integer(0);
        prop_assert!(d(&a, &b) >= zero);
        prop_assert_eq!(d(&a, &a), zero);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        if a != b {
            prop_assert!(d(&a, &b) > zero);
        }
    }

    #[test]
    fn entropy_is_bounded(c in counts(34)) {
        let mut h = Histogram::chord_length();
        for (bin, &n) in c.iter().enumerate() {
            for _ in 0..n {
                h.add(bin as u32);
            }
        }
        let e: f64 = entropy(&h).unwrap();
        prop_assert!(e >= -1e-12);
        prop_assert!(e <= (34f64).ln() + 1e-12);
    }

    #[test]
    fn note_in_chord_is_transposition_invariant(seed in any::<u64>(), len in 1usize..64, k in -12i32..=12) {
        let p = full_piece(seed, len);
        let q = transpose(&p, k).unwrap();
        prop_assert_eq!(note_in_chord(p.melody(), p.chords()).unwrap(), note_in_chord(q.melody(), q.chords()).unwrap());
    }

    #[test]
    fn windows_cover_the_sequence(len in 1usize..300, s in 1usize..300) {
        let w = windows(len, s);
        let mut covered = vec![false; len];
        for &(a, b) in &w {
            prop_assert!(a < b && b <= len);
            prop_assert_eq!(b - a, s.min(len));
            covered[a..b].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|c| *c));
        prop_assert_eq!(w.first().unwrap().0, 0);
        prop_assert_eq!(w.last().unwrap().1, len);
    }

    #[test]
    fn penalties_are_non_positive(seed in any::<u64>(), len in 1usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracle::random_instance(&mut rng, len);
        let p = Penalties::of(&inst.x, &inst.y);
        prop_assert!(p.repetition <= 0.0 && p.silence <= 0.0 && p.early_eos <= 0.0);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in prop::collection::vec(-5.0f64..5.0, 2..40), seed in any::<u64>()) {
        let q: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            p.iter().map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect()
        };
        let (lp, lq) = (log_softmax(&p), log_softmax(&q));
        prop_assert!(kl_divergence(lp.view(), lq.view()) >= -1e-12);
        prop_assert!(kl_divergence(lp.view(), lp.view()).abs() < 1e-12);
    }

    #[test]
    fn harmony_perturbation_keeps_boundaries(seed in any::<u64>(), len in 1usize..128, f in 0.0f64..=1.0) {
        let p = full_piece(seed, len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = perturb_harmony(&p, f, &mut rng).unwrap();
        prop_assert_eq!(p.melody(), q.melody());
        let bounds = |y| chord_segments(y).iter().map(|s| (s.start, s.len)).collect::<Vec<_>>();
        prop_assert_eq!(bounds(p.chords()), bounds(q.chords()));
    }

    #[test]
    fn token_round_trips(seed in any::<u64>(), len in 1usize..128) {
        let p = full_piece(seed, len);
        prop_assert_eq!(&deinterleave(&interleave(&p)).unwrap(), &p);
        prop_assert_eq!(&parse(&serialize(&p)).unwrap(), &p);
    }
}

#[test]
fn penalties_vanish_on_clean_ground_truth() {
    let corpus = generate_corpus(&CorpusConfig {
        num_pieces: 200,
        ..CorpusConfig::default()
    })
    .unwrap();
    let mut clean = 0;
    for p in &corpus {
        let long = chord_segments(p.chords()).iter().any(|s| s.len > 32);
        let sounding = p.melody().iter().filter(|m| !m.is_silence()).count();
        let silent = p
            .melody()
            .iter()
            .zip(p.chords())
            .skip(8)
            .filter(|(m, c)| !m.is_silence() && **c == chordjam::symbolic::ChordToken::Silence)
            .count();
        if long || silent as f64 > 0.04 * sounding as f64 {
            continue;
        }
        clean += 1;
        assert_eq!(Penalties::of(p.melody(), p.chords()), Penalties::default());
    }
    assert!(clean > 100, "only {clean} clean pieces");
}
