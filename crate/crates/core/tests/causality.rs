use chordjam::corpus::{generate_corpus, CorpusConfig};
use chordjam::seqmodel::{causality_check, OfflineModel, OfflineModelConfig, OnlineModel, OnlineModelConfig};
use chordjam::symbolic::MelodyToken;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn melodies(n: usize) -> Vec<Vec<MelodyToken>> {
    generate_corpus(&CorpusConfig {
        num_pieces: n,
        min_frames: 16,
        max_frames: 64,
        ..CorpusConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(|p| p.into_parts().0)
    .collect()
}

/// Random init scaled up so greedy decoding depends strongly on the input.
fn jittered_online(seed: u64) -> OnlineModel<f64> {
    let cfg = OnlineModelConfig {
        dim: 32,
        heads: 4,
        layers: 2,
        ..OnlineModelConfig::default()
    };
    let mut m = OnlineModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let ids: Vec<_> = m.store().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        m.store_mut().get_mut(id).mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    m
}

#[test]
fn online_chords_never_see_the_current_or_future_melody() {
    let m = jittered_online(7);
    let xs = melodies(100);
    let refs: Vec<&[MelodyToken]> = xs.iter().map(|x| x.as_slice()).collect();
    let r = causality_check(&m, &refs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(r.trials, 100);
    assert_eq!(r.breaks, 0, "{r:?}");
    assert!(r.later_changes > 10, "check is vacuous: {r:?}");
}

#[test]
fn offline_model_is_caught_by_the_same_check() {
    let cfg = OfflineModelConfig {
        dim: 32,
        heads: 4,
        ..OfflineModelConfig::default()
    };
    let fresh = OfflineModel::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let tensors = fresh
        .store()
        .iter()
        .map(|(_, n, v)| (n.to_string(), v.mapv(|w| w + noise.sample(&mut rng))))
        .collect();
    let m = OfflineModel::from_tensors(cfg, tensors).unwrap();
    let xs = melodies(20);
    let refs: Vec<&[MelodyToken]> = xs.iter().map(|x| x.as_slice()).collect();
    let r = causality_check(&m, &refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(r.breaks > 0, "{r:?}");
}

#[test]
fn emitted_distributions_are_normalized() {
    let m = jittered_online(8);
    let xs = melodies(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for x in &xs {
        let y = &chordjam::seqmodel::ChordModel::generate(&m, &[x], &chordjam::seqmodel::GenerateOptions::sampled(1.0), &mut rng).unwrap()[0];
        for t in 0..y.len() {
            let d = m.next_chord_dist(&x[..t], &y[..t]).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}
