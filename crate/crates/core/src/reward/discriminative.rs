use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{train_reward, RewardConfig, RewardKind, RewardModel, RewardTrainable};
use crate::autodiff::{sigmoid, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Stack, INIT_STD};
use crate::scalar::Scalar;
use crate::seqmodel::{Pair, TrainConfig, TrainRecord, CHORD_VOCAB};
use crate::symbolic::{MelodyToken, Piece};

/// Joint encoder over per-frame melody and chord embeddings with a
/// real-vs-shuffled logit head.
#[derive(Clone, Debug)]
pub struct DiscriminativeModel<T: Scalar> {
    pub config: RewardConfig,
    store: ParamStore<T>,
    trained: bool,
    melody_emb: ParamId,
    chord_emb: ParamId,
    pos_emb: ParamId,
    encoder: Stack,
    head: Linear,
}

impl<T: Scalar> DiscriminativeModel<T> {
    pub fn new(config: RewardConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = config.transformer();
        let melody_emb = store.normal("melody_emb", MelodyToken::VOCAB, config.dim, INIT_STD, &mut rng);
        let chord_emb = store.normal("chord_emb", CHORD_VOCAB, config.dim, INIT_STD, &mut rng);
        let pos_emb = store.normal("pos_emb", config.scale, config.dim, INIT_STD, &mut rng);
        let encoder = Stack::new(&mut store, "encoder", &t, false, &mut rng);
        let head = Linear::new(&mut store, "head", config.dim, 1, INIT_STD, &mut rng);
        Ok(DiscriminativeModel {
            config,
            store,
            trained: false,
            melody_emb,
            chord_emb,
            pos_emb,
            encoder,
            head,
        })
    }

    pub fn from_tensors(config: RewardConfig, tensors: Vec<(String, Mat<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_named(tensors).map_err(Error::Checkpoint)?;
        m.trained = true;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// `[n, 1]` logits of each pair being real.
    pub fn logits(&self, g: &mut Graph<T>, pairs: &[Pair<'_>]) -> Result<Var> {
        let len = pairs.first().map_or(0, |p| p.0.len());
        if pairs.iter().any(|(x, y)| x.len() != len || y.len() != len) {
            return Err(Error::Config("discriminative batch needs equal-length aligned pairs".into()));
        }
        if len > self.config.scale {
            return Err(Error::TooLong {
                len,
                max: self.config.scale,
            });
        }
        let mids: Vec<usize> = pairs.iter().flat_map(|(x, _)| x.iter().map(|t| t.id())).collect();
        let cids: Vec<usize> = pairs.iter().flat_map(|(_, y)| y.iter().map(|t| t.id())).collect();
        let pos: Vec<usize> = (0..pairs.len()).flat_map(|_| 0..len).collect();
        let me = g.param(self.melody_emb);
        let ce = g.param(self.chord_emb);
        let pe = g.param(self.pos_emb);
        let a = g.embed(me, &mids);
        let b = g.embed(ce, &cids);
        let p = g.embed(pe, &pos);
        let x = g.add(a, b);
        let x = g.add(x, p);
        let x = g.dropout(x);
        let h = self.encoder.forward(g, x, pairs.len(), len, false, None);
        let h = g.mean_pool(h, len);
        Ok(self.head.forward(g, h))
    }

    pub fn probabilities(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let l = self.logits(&mut g, pairs)?;
        Ok(g.value(l).iter().map(|z| sigmoid(*z).to_f64_lossy()).collect())
    }

    pub fn train(&mut self, train: &[Piece], cfg: &TrainConfig, on_log: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let scale = self.config.scale;
        let records = train_reward(self, scale, train, cfg, on_log)?;
        self.trained = true;
        Ok(records)
    }
}

impl<T: Scalar> RewardTrainable<T> for DiscriminativeModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Each item contributes its real pair and its melody against the
    /// chords of another, randomly chosen item.
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[Piece], rng: &mut ChaCha8Rng) -> Result<Var> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::Config("discriminative training needs at least two items".into()));
        }
        let mut pairs: Vec<Pair<'_>> = batch.iter().map(|p| (p.melody(), p.chords())).collect();
        for (i, p) in batch.iter().enumerate() {
            let j = (i + rng.random_range(1..n)) % n;
            pairs.push((p.melody(), batch[j].chords()));
        }
        let mut targets = vec![T::one(); n];
        targets.extend(std::iter::repeat_n(T::zero(), n));
        let logits = self.logits(g, &pairs)?;
        Ok(g.bce_with_logits(logits, &targets))
    }
}

impl<T: Scalar> RewardModel<T> for DiscriminativeModel<T> {
    fn kind(&self) -> RewardKind {
        RewardKind::Discriminative
    }

    fn scale(&self) -> usize {
        self.config.scale
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn score_windows(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        self.probabilities(pairs)
    }
}

/// Mean of true-positive and true-negative rates at threshold 0.5.
pub fn balanced_accuracy(positive: &[f64], negative: &[f64]) -> f64 {
    let tpr = positive.iter().filter(|p| **p > 0.5).count() as f64 / positive.len().max(1) as f64;
    let tnr = negative.iter().filter(|p| **p <= 0.5).count() as f64 / negative.len().max(1) as f64;
    (tpr + tnr) / 2.0
}
