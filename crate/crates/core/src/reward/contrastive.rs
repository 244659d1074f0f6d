use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{train_reward, RewardConfig, RewardKind, RewardModel, RewardTrainable};
use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Backbone, Linear, INIT_STD};
use crate::scalar::Scalar;
use crate::seqmodel::{Pair, TrainConfig, TrainRecord, CHORD_VOCAB};
use crate::symbolic::{MelodyToken, Piece};

/// Melody and chord encoders trained so that matching pairs have high
/// cosine similarity.
#[derive(Clone, Debug)]
pub struct ContrastiveModel<T: Scalar> {
    pub config: RewardConfig,
    store: ParamStore<T>,
    trained: bool,
    melody_enc: Backbone,
    chord_enc: Backbone,
    melody_proj: Linear,
    chord_proj: Linear,
    /// Log of the inverse temperature.
    logit_scale: ParamId,
}

impl<T: Scalar> ContrastiveModel<T> {
    pub fn new(config: RewardConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = config.transformer();
        let melody_enc = Backbone::new(&mut store, "melody_enc", &t, MelodyToken::VOCAB, config.scale, false, &mut rng);
        let chord_enc = Backbone::new(&mut store, "chord_enc", &t, CHORD_VOCAB, config.scale, false, &mut rng);
        let melody_proj = Linear::new(&mut store, "melody_proj", config.dim, config.embed_dim, INIT_STD, &mut rng);
        let chord_proj = Linear::new(&mut store, "chord_proj", config.dim, config.embed_dim, INIT_STD, &mut rng);
        let logit_scale = store.filled("logit_scale", 1, 1, T::of((1.0 / config.init_temperature).ln()));
        Ok(ContrastiveModel {
            config,
            store,
            trained: false,
            melody_enc,
            chord_enc,
            melody_proj,
            chord_proj,
            logit_scale,
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

    pub fn temperature(&self) -> f64 {
        (-self.store.get(self.logit_scale)[[0, 0]].to_f64_lossy()).exp()
    }

    /// Unit-norm melody and chord embeddings, `[n, embed_dim]` each.
    pub fn embed(&self, g: &mut Graph<T>, pairs: &[Pair<'_>]) -> Result<(Var, Var)> {
        let len = pairs.first().map_or(0, |p| p.0.len());
        if pairs.iter().any(|(x, y)| x.len() != len || y.len() != len) {
            return Err(Error::Config("contrastive batch needs equal-length aligned pairs".into()));
        }
        let mids: Vec<usize> = pairs.iter().flat_map(|(x, _)| x.iter().map(|t| t.id())).collect();
        let cids: Vec<usize> = pairs.iter().flat_map(|(_, y)| y.iter().map(|t| t.id())).collect();
        let hm = self.melody_enc.forward(g, &mids, pairs.len(), false, None)?;
        let hm = g.mean_pool(hm, len);
        let em = self.melody_proj.forward(g, hm);
        let em = g.l2_normalize(em);
        let hc = self.chord_enc.forward(g, &cids, pairs.len(), false, None)?;
        let hc = g.mean_pool(hc, len);
        let ec = self.chord_proj.forward(g, hc);
        let ec = g.l2_normalize(ec);
        Ok((em, ec))
    }

    /// Symmetric InfoNCE over the in-batch similarity matrix.
    pub fn info_nce(&self, g: &mut Graph<T>, pairs: &[Pair<'_>]) -> Result<Var> {
        let n = pairs.len();
        if n < 2 {
            return Err(Error::Config("InfoNCE needs at least two pairs".into()));
        }
        let (em, ec) = self.embed(g, pairs)?;
        let scale = g.param(self.logit_scale);
        let scale = g.exp(scale);
        let diag: Vec<usize> = (0..n).collect();
        let mut total = None;
        for (a, b) in [(em, ec), (ec, em)] {
            let sim = g.matmul_nt(a, b);
            let logits = g.mul_scalar_var(sim, scale);
            let lp = g.log_softmax(logits, 0, n);
            let picked = g.pick(lp, &diag);
            let s = g.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s),
            });
        }
        Ok(g.scale(total.expect("two directions"), T::of(-0.5 / n as f64)))
    }

    /// Cosine similarity matrix between every melody and every chord track.
    pub fn similarity_matrix(&self, pairs: &[Pair<'_>]) -> Result<Mat<f64>> {
        let mut g = Graph::new(&self.store);
        let (em, ec) = self.embed(&mut g, pairs)?;
        let sim = g.matmul_nt(em, ec);
        Ok(g.value(sim).mapv(|v| v.to_f64_lossy()))
    }

    pub fn train(&mut self, train: &[Piece], cfg: &TrainConfig, on_log: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let scale = self.config.scale;
        let records = train_reward(self, scale, train, cfg, on_log)?;
        self.trained = true;
        Ok(records)
    }
}

impl<T: Scalar> RewardTrainable<T> for ContrastiveModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph<T>, batch: &[Piece], _rng: &mut ChaCha8Rng) -> Result<Var> {
        let pairs: Vec<Pair<'_>> = batch.iter().map(|p| (p.melody(), p.chords())).collect();
        self.info_nce(g, &pairs)
    }
}

impl<T: Scalar> RewardModel<T> for ContrastiveModel<T> {
    fn kind(&self) -> RewardKind {
        RewardKind::Contrastive
    }

    fn scale(&self) -> usize {
        self.config.scale
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn score_windows(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let (em, ec) = self.embed(&mut g, pairs)?;
        let (a, b) = (g.value(em), g.value(ec));
        Ok(a.rows()
            .into_iter()
            .zip(b.rows())
            .map(|(u, v)| u.dot(&v).to_f64_lossy().clamp(-1.0, 1.0))
            .collect())
    }
}

/// Number of melodies whose most similar chord track is their own.
pub fn retrieval_hits(sim: &Mat<f64>) -> usize {
    sim.rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if *v > acc.1 { (j, *v) } else { acc });
            best.0 == *i
        })
        .count()
}
