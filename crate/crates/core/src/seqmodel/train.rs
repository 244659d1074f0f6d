use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, LrSchedule, ParamStore, Var};
use crate::corpus::augment;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::symbolic::{ChordToken, MelodyToken, Piece};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Random transposition of each training piece.
    pub transpose_augment: bool,
    /// Validation pieces scored at each log point (0 = all).
    pub val_pieces: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 32,
            steps: 2000,
            warmup: 100,
            dropout: 0.1,
            seed: 0,
            log_every: 100,
            grad_clip: 1.0,
            weight_decay: 0.0,
            transpose_augment: true,
            val_pieces: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.log_every == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning rate, batch size, log interval and clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Summed negative log-likelihood of one batch.
pub struct NllParts {
    /// Graph node holding the summed NLL over every target.
    pub loss_sum: Var,
    pub chord_sum: f64,
    pub chord_count: usize,
    pub melody_sum: f64,
    pub melody_count: usize,
}

pub trait MleModel<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Pieces in one call share a length.
    fn nll(&self, g: &mut Graph<T>, pieces: &[Piece]) -> Result<NllParts>;
}

/// Mean per-token NLL over a set of pieces, with the uniform-predictor
/// reference over the same targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub nll: f64,
    pub chord_nll: f64,
    pub melody_nll: Option<f64>,
    pub uniform_nll: f64,
    pub tokens: usize,
}

pub fn evaluate_nll<T: Scalar, M: MleModel<T>>(model: &M, pieces: &[Piece], batch_size: usize) -> Result<NllReport> {
    let (mut cs, mut cc, mut ms, mut mc) = (0.0, 0usize, 0.0, 0usize);
    let lens: Vec<usize> = pieces.iter().map(Piece::len).collect();
    for group in super::group_by_len(&lens) {
        for chunk in group.chunks(batch_size.max(1)) {
            let batch: Vec<Piece> = chunk.iter().map(|&i| pieces[i].clone()).collect();
            let mut g = Graph::new(model.store());
            let parts = model.nll(&mut g, &batch)?;
            cs += parts.chord_sum;
            cc += parts.chord_count;
            ms += parts.melody_sum;
            mc += parts.melody_count;
        }
    }
    let tokens = cc + mc;
    if tokens == 0 {
        return Err(Error::Config("no tokens to evaluate".into()));
    }
    let uniform = (cc as f64 * (ChordToken::VOCAB as f64).ln() + mc as f64 * (MelodyToken::VOCAB as f64).ln()) / tokens as f64;
    Ok(NllReport {
        nll: (cs + ms) / tokens as f64,
        chord_nll: cs / cc.max(1) as f64,
        melody_nll: (mc > 0).then(|| ms / mc as f64),
        uniform_nll: uniform,
        tokens,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub grad_norm: f64,
    pub val: Option<NllReport>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub final_train_nll: f64,
}

impl TrainReport {
    pub fn last_val(&self) -> Option<&NllReport> {
        self.records.iter().rev().find_map(|r| r.val.as_ref())
    }
}

/// Maximum-likelihood training with Adam. Deterministic for a fixed seed.
pub fn train_mle<T: Scalar, M: MleModel<T>>(
    model: &mut M,
    train: &[Piece],
    val: &[Piece],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
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
    let val_set: Vec<Piece> = match cfg.val_pieces {
        0 => val.to_vec(),
        n => val.iter().take(n).cloned().collect(),
    };
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut batch: Vec<Piece> = (0..cfg.batch_size)
            .map(|_| {
                let p = &train[rng.random_range(0..train.len())];
                if cfg.transpose_augment {
                    augment(p, &mut rng)
                } else {
                    p.clone()
                }
            })
            .collect();
        let min_len = batch.iter().map(Piece::len).min().unwrap_or(0);
        for p in batch.iter_mut().filter(|p| p.len() > min_len) {
            *p = p.window(0, min_len);
        }
        let drop_rng = ChaCha8Rng::from_rng(&mut rng);
        let (nll, mut grads) = {
            let mut g = Graph::new(model.store()).with_dropout(cfg.dropout, drop_rng);
            let parts = model.nll(&mut g, &batch)?;
            let count = parts.chord_count + parts.melody_count;
            let loss = g.scale(parts.loss_sum, T::one() / T::of_usize(count.max(1)));
            let nll = g.scalar(loss).to_f64_lossy();
            (nll, g.backward(loss))
        };
        if !nll.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {nll}"),
            });
        }
        let grad_norm = grads.clip_global_norm(T::of(cfg.grad_clip)).to_f64_lossy();
        let lr = schedule.at(step);
        opt.step(model.store_mut(), &grads, lr);
        report.final_train_nll = nll;

        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.log_every == 0 || last {
            let val = if val_set.is_empty() {
                None
            } else {
                Some(evaluate_nll(model, &val_set, cfg.batch_size)?)
            };
            let rec = TrainRecord {
                step: step + 1,
                lr,
                train_nll: nll,
                grad_norm,
                val,
            };
            on_log(&rec);
            report.records.push(rec);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::seqmodel::{OnlineModel, OnlineModelConfig};

    fn tiny_corpus(n: usize, frames: usize) -> Vec<Piece> {
        generate_corpus(&CorpusConfig {
            num_pieces: n,
            min_frames: frames,
            max_frames: frames,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_model() -> OnlineModel<f32> {
        OnlineModel::new(
            OnlineModelConfig {
                dim: 32,
                heads: 2,
                layers: 1,
                ff_mult: 2,
                ..OnlineModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn memorizes_single_piece() {
        let corpus = tiny_corpus(1, 16);
        let mut model = tiny_model();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 2,
            steps: 200,
            warmup: 10,
            dropout: 0.0,
            transpose_augment: false,
            log_every: 200,
            ..TrainConfig::default()
        };
        let before = evaluate_nll(&model, &corpus, 4).unwrap();
        train_mle(&mut model, &corpus, &corpus, &cfg, |_| {}).unwrap();
        let after = evaluate_nll(&model, &corpus, 4).unwrap();
        assert!(after.nll <= 0.5 * before.nll, "{} -> {}", before.nll, after.nll);
        assert!(after.nll < after.uniform_nll);
    }

    #[test]
    fn same_seed_same_loss() {
        let corpus = tiny_corpus(8, 16);
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 5,
            log_every: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model();
            train_mle(&mut m, &corpus, &corpus, &cfg, |_| {}).unwrap().final_train_nll
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut m = tiny_model();
        assert!(train_mle(&mut m, &[], &[], &TrainConfig::default(), |_| {}).is_err());
    }
}
