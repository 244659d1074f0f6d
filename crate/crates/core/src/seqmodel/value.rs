use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OnlineBatch, OnlineModel, OnlineModelConfig};
use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Backbone, Linear, INIT_STD};
use crate::scalar::Scalar;

/// Online backbone with a scalar head read at every chord-predicting
/// position, i.e. the state `s_t` before `y_t` is emitted.
#[derive(Clone, Debug)]
pub struct ValueModel<T: Scalar> {
    pub config: OnlineModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    head: Linear,
}

impl<T: Scalar> ValueModel<T> {
    pub fn new(config: OnlineModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = config.transformer();
        let backbone = Backbone::new(&mut store, "backbone", &t, config.vocab, config.max_positions, false, &mut rng);
        let head = Linear::new(&mut store, "head.value", t.dim, 1, INIT_STD, &mut rng);
        Ok(ValueModel {
            config,
            store,
            backbone,
            head,
        })
    }

    /// Copies the backbone of an online model; the head starts near zero.
    pub fn from_online(online: &OnlineModel<T>, seed: u64) -> Result<Self> {
        let mut v = Self::new(online.config.clone(), seed)?;
        let copied = v.store.copy_matching(online.store(), "backbone.", "backbone.");
        if copied + 2 != v.store.len() {
            return Err(Error::Checkpoint(format!("copied {copied} of {} backbone tensors", v.store.len() - 2)));
        }
        Ok(v)
    }

    pub fn from_tensors(config: OnlineModelConfig, tensors: Vec<(String, Mat<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_named(tensors).map_err(Error::Checkpoint)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `[batch × chord_rows_per_seq, 1]` value predictions.
    pub fn forward(&self, g: &mut Graph<T>, batch: &OnlineBatch) -> Result<Var> {
        let h = self.backbone.forward(g, &batch.ids, batch.batch, true, None)?;
        let hc = g.rows(h, &batch.chord_rows());
        Ok(self.head.forward(g, hc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{ChordToken, MelodyToken};

    #[test]
    fn initialized_from_online_backbone() {
        let cfg = OnlineModelConfig {
            dim: 16,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            ..OnlineModelConfig::default()
        };
        let online = OnlineModel::<f32>::new(cfg, 1).unwrap();
        let value = ValueModel::from_online(&online, 2).unwrap();
        let id = value.store().id("backbone.tok_emb").unwrap();
        let oid = online.store().id("backbone.tok_emb").unwrap();
        assert_eq!(value.store().get(id), online.store().get(oid));
        let x = [MelodyToken::Silence; 3];
        let y = [ChordToken::Silence; 3];
        let batch = OnlineBatch::new(&[(&x, &y)], false).unwrap();
        let mut g = Graph::new(value.store());
        let v = value.forward(&mut g, &batch).unwrap();
        assert_eq!(g.value(v).dim(), (3, 1));
    }
}
