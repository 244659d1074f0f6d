use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kd::{check_vocab, kd_loss, kl_divergence, teacher_rows};
use super::penalty::{total_reward, Penalties};
use super::{FinetuneConfig, RewardSource};
use crate::autodiff::{Adam, AdamConfig, Graph, Mat, Var};
use crate::corpus::crop;
use crate::error::{Error, Result};
use crate::eval::{auxiliary_counts, system_note_in_chord};
use crate::scalar::Scalar;
use crate::seqmodel::{by_length, evaluate_nll, ChordModel, GenerateOptions, OnlineBatch, OnlineModel, Pair, ValueModel};
use crate::symbolic::{ChordToken, MelodyToken, Piece};

/// Diagnostics of one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean total reward R(x, y).
    pub reward_mean: f64,
    /// Mean ensemble score before the reward coefficient.
    pub score_mean: f64,
    pub penalties: Penalties,
    /// Mean per-sequence KL to the teacher, averaged over KD sources.
    pub kl: Option<f64>,
    pub advantage_abs_mean: f64,
    pub value_loss: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub rollout_note_in_chord: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Validation chord NLL per token.
    pub nll: f64,
    /// Validation KL to the teacher per sequence, on dataset chords.
    pub kl: Option<f64>,
    /// Means over the updates since the previous record.
    pub reward_mean: Option<f64>,
    pub train_kl: Option<f64>,
    pub value_loss: Option<f64>,
    /// Validation accompaniment sampled at the eval temperature.
    pub note_in_chord: Option<f64>,
    pub chord_silence: Option<f64>,
    pub early_stop_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub evals: Vec<EvalRecord>,
    pub steps: Vec<StepStats>,
}

/// Mean over pairs of `Σ_t KL(policy_t ‖ teacher_t)` along each chord track.
pub fn mean_kl<T: Scalar>(policy: &dyn ChordModel<T>, teacher: &dyn ChordModel<T>, pairs: &[Pair<'_>]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let p = by_length(pairs, |g| policy.chord_log_probs(g))?;
    let q = by_length(pairs, |g| teacher.chord_log_probs(g))?;
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(a, b)| a.rows().into_iter().zip(b.rows()).map(|(r, s)| kl_divergence(r, s)).sum::<f64>())
        .sum();
    Ok(total / pairs.len() as f64)
}

fn column<T: Scalar>(v: &[f64]) -> Mat<T> {
    Mat::from_shape_fn((v.len(), 1), |(i, _)| T::of(v[i]))
}

/// Generates for melodies of mixed lengths in equal-length chunks of 32.
fn generate_grouped<T: Scalar, M: ChordModel<T> + ?Sized>(
    model: &M,
    melodies: &[&[MelodyToken]],
    opts: &GenerateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<ChordToken>>> {
    let mut ys: Vec<Vec<ChordToken>> = vec![Vec::new(); melodies.len()];
    let lens: Vec<usize> = melodies.iter().map(|m| m.len()).collect();
    for group in crate::seqmodel::group_by_len(&lens) {
        for chunk in group.chunks(32) {
            let ms: Vec<&[MelodyToken]> = chunk.iter().map(|&i| melodies[i]).collect();
            for (&i, y) in chunk.iter().zip(model.generate(&ms, opts, rng)?) {
                ys[i] = y;
            }
        }
    }
    Ok(ys)
}

/// REINFORCE with a learned value baseline and an exact KL term to a
/// teacher. The policy and value model are owned; teacher and reward are
/// borrowed read-only.
pub struct Finetuner<'a, T: Scalar> {
    pub config: FinetuneConfig,
    policy: OnlineModel<T>,
    value: ValueModel<T>,
    policy_opt: Adam<T>,
    value_opt: Adam<T>,
    teacher: Option<&'a dyn ChordModel<T>>,
    rewarder: Option<&'a dyn RewardSource>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a, T: Scalar> Finetuner<'a, T> {
    pub fn new(
        policy: OnlineModel<T>,
        value: ValueModel<T>,
        teacher: Option<&'a dyn ChordModel<T>>,
        rewarder: Option<&'a dyn RewardSource>,
        config: FinetuneConfig,
    ) -> Result<Self> {
        config.validate()?;
        match teacher {
            Some(t) => check_vocab(policy.chord_vocab(), t)?,
            None if config.beta > 0.0 => return Err(Error::Config("beta > 0 requires a teacher model".into())),
            None => {}
        }
        if config.reward_coef > 0.0 && rewarder.is_none() {
            return Err(Error::Untrained("reward coefficient > 0 requires trained reward models".into()));
        }
        let adam = |lr| AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        Ok(Finetuner {
            policy_opt: Adam::new(policy.store(), adam(config.policy_lr)),
            value_opt: Adam::new(value.store(), adam(config.value_lr)),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            policy,
            value,
            teacher,
            rewarder,
            config,
            step: 0,
        })
    }

    pub fn policy(&self) -> &OnlineModel<T> {
        &self.policy
    }

    pub fn value(&self) -> &ValueModel<T> {
        &self.value
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn into_parts(self) -> (OnlineModel<T>, ValueModel<T>) {
        (self.policy, self.value)
    }

    fn sample_batch(&mut self, train: &[Piece]) -> Result<Vec<Piece>> {
        if train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let n = self.config.batch_size;
        let picks: Vec<usize> = if train.len() >= n {
            index::sample(&mut self.rng, train.len(), n).into_vec()
        } else {
            (0..n).map(|_| self.rng.random_range(0..train.len())).collect()
        };
        let mut batch: Vec<Piece> = picks.iter().map(|&i| crop(&train[i], self.config.max_frames, &mut self.rng)).collect();
        let min_len = batch.iter().map(Piece::len).min().unwrap_or(0);
        for p in batch.iter_mut().filter(|p| p.len() > min_len) {
            *p = p.window(0, min_len);
        }
        Ok(batch)
    }

    /// Sum over `pairs` of the weighted KL, as a graph node on the policy.
    fn kd_term(&self, g: &mut Graph<T>, teacher: &dyn ChordModel<T>, pairs: &[Pair<'_>], reuse: Option<(Var, &OnlineBatch)>) -> Result<Var> {
        let owned;
        let (logp, batch) = match reuse {
            Some(r) => r,
            None => {
                owned = OnlineBatch::new(pairs, false)?;
                let out = self.policy.forward(g, &owned, false)?;
                (out.chord_logp, &owned)
            }
        };
        let q = teacher_rows(teacher, pairs, batch.chord_rows_per_seq())?;
        kd_loss(g, logp, q, &batch.chord_weights)
    }

    /// One rollout and update of both policy and value model.
    pub fn step(&mut self, train: &[Piece]) -> Result<StepStats> {
        let cfg = self.config.clone();
        let pieces = self.sample_batch(train)?;
        let melodies: Vec<&[MelodyToken]> = pieces.iter().map(Piece::melody).collect();
        let ys = self.policy.generate(&melodies, &GenerateOptions::sampled(cfg.temperature), &mut self.rng)?;
        let pairs: Vec<Pair<'_>> = melodies.iter().zip(&ys).map(|(x, y)| (*x, y.as_slice())).collect();
        let n = pairs.len() as f64;

        let scores = match self.rewarder {
            Some(r) if cfg.reward_coef > 0.0 => r.score(&pairs)?,
            _ => vec![0.0; pairs.len()],
        };
        let penalties: Vec<Penalties> = pairs.iter().map(|(x, y)| Penalties::of(x, y)).collect();
        let returns: Vec<f64> = scores
            .iter()
            .zip(&penalties)
            .map(|(s, p)| total_reward(*s, p, cfg.reward_coef, &cfg.penalties))
            .collect();
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                what: format!("non-finite reward in {returns:?}"),
            });
        }

        let batch = OnlineBatch::new(&pairs, false)?;
        let rows = batch.chord_rows_per_seq();
        // Every chord row of a trajectory gets the same return: all reward
        // is credited at the final generated token and there is no discount.
        let row_returns: Vec<f64> = (0..batch.chord_weights.len()).map(|r| returns[r / rows]).collect();
        let real = batch.chord_weights.iter().filter(|w| **w > 0.0).count().max(1) as f64;

        let (values, value_loss, mut vgrads) = {
            let mut g = Graph::new(self.value.store());
            let v = self.value.forward(&mut g, &batch)?;
            let target = g.input(column(&row_returns));
            let d = g.sub(v, target);
            let sq = g.mul(d, d);
            let w = g.input(column(&batch.chord_weights));
            let sq = g.mul(sq, w);
            let s = g.sum(sq);
            let loss = g.scale(s, T::of(1.0 / real));
            let values: Vec<f64> = g.value(v).iter().map(|x| x.to_f64_lossy()).collect();
            (values, g.scalar(loss).to_f64_lossy(), g.backward(loss))
        };
        let advantages: Vec<f64> = row_returns
            .iter()
            .zip(&values)
            .zip(&batch.chord_weights)
            .map(|((g, v), w)| (g - v) * w)
            .collect();

        let (kl, mut pgrads, pg_loss) = {
            let mut g = Graph::new(self.policy.store());
            let out = self.policy.forward(&mut g, &batch, false)?;
            let picked = g.pick(out.chord_logp, &batch.chord_targets);
            let a = g.input(column(&advantages));
            let pg = g.mul(picked, a);
            let pg = g.sum(pg);
            let mut loss = g.scale(pg, T::of(-1.0 / n));
            let mut kl = None;
            if let (Some(teacher), true) = (self.teacher, cfg.beta > 0.0) {
                let mut terms = Vec::new();
                if cfg.kd_source.uses_policy() {
                    terms.push(self.kd_term(&mut g, teacher, &pairs, Some((out.chord_logp, &batch)))?);
                }
                if cfg.kd_source.uses_dataset() {
                    let data: Vec<Pair<'_>> = pieces.iter().map(|p| (p.melody(), p.chords())).collect();
                    terms.push(self.kd_term(&mut g, teacher, &data, None)?);
                }
                if cfg.kd_source.uses_teacher() {
                    let ty = teacher.generate(&melodies, &GenerateOptions::sampled(cfg.temperature), &mut self.rng)?;
                    let tp: Vec<Pair<'_>> = melodies.iter().zip(&ty).map(|(x, y)| (*x, y.as_slice())).collect();
                    terms.push(self.kd_term(&mut g, teacher, &tp, None)?);
                }
                let k = terms.len() as f64;
                let mut sum = terms[0];
                for t in &terms[1..] {
                    sum = g.add(sum, *t);
                }
                let per_seq = g.scale(sum, T::of(1.0 / (k * n)));
                kl = Some(g.scalar(per_seq).to_f64_lossy());
                let weighted = g.scale(per_seq, T::of(cfg.beta));
                loss = g.add(loss, weighted);
            }
            let lv = g.scalar(loss).to_f64_lossy();
            (kl, g.backward(loss), lv)
        };
        if !pg_loss.is_finite() || !pgrads.is_finite() || !value_loss.is_finite() || !vgrads.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: format!("policy loss {pg_loss}, value loss {value_loss}, kl {kl:?}"),
            });
        }
        let policy_grad_norm = pgrads.clip_global_norm(T::of(cfg.grad_clip)).to_f64_lossy();
        let value_grad_norm = vgrads.clip_global_norm(T::of(cfg.grad_clip)).to_f64_lossy();
        self.policy_opt.step(self.policy.store_mut(), &pgrads, cfg.policy_lr);
        self.value_opt.step(self.value.store_mut(), &vgrads, cfg.value_lr);
        self.step += 1;

        let mean = |f: &dyn Fn(&Penalties) -> f64| penalties.iter().map(f).sum::<f64>() / n;
        Ok(StepStats {
            step: self.step,
            reward_mean: returns.iter().sum::<f64>() / n,
            score_mean: scores.iter().sum::<f64>() / n,
            penalties: Penalties {
                repetition: mean(&|p| p.repetition),
                silence: mean(&|p| p.silence),
                early_eos: mean(&|p| p.early_eos),
            },
            kl,
            advantage_abs_mean: advantages.iter().map(|a| a.abs()).sum::<f64>() / real,
            value_loss,
            policy_grad_norm,
            value_grad_norm,
            rollout_note_in_chord: system_note_in_chord(pairs.iter().copied())?,
        })
    }

    /// Validation metrics; decoding uses its own seed so that evaluating
    /// does not perturb the training stream.
    /// KL to the teacher on the same kind of sequences the KD term trains
    /// on, averaged over the configured sources.
    fn validation_kl(&self, teacher: &dyn ChordModel<T>, pieces: &[Piece], sampled: &[Pair<'_>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let src = self.config.kd_source;
        let mut kls = Vec::new();
        if src.uses_policy() {
            kls.push(mean_kl(&self.policy, teacher, sampled)?);
        }
        if src.uses_dataset() {
            let data: Vec<Pair<'_>> = pieces.iter().map(|p| (p.melody(), p.chords())).collect();
            kls.push(mean_kl(&self.policy, teacher, &data)?);
        }
        if src.uses_teacher() {
            let melodies: Vec<&[MelodyToken]> = sampled.iter().map(|p| p.0).collect();
            let opts = GenerateOptions::sampled(self.config.eval_temperature);
            let ty = generate_grouped(teacher, &melodies, &opts, rng)?;
            let tp: Vec<Pair<'_>> = melodies.iter().zip(&ty).map(|(x, y)| (*x, y.as_slice())).collect();
            kls.push(mean_kl(&self.policy, teacher, &tp)?);
        }
        Ok(kls.iter().sum::<f64>() / kls.len() as f64)
    }

    pub fn evaluate(&self, val: &[Piece]) -> Result<EvalRecord> {
        let pieces: Vec<Piece> = val
            .iter()
            .take(self.config.eval_pieces.max(1))
            .map(|p| p.window(0, p.len().min(self.config.max_frames)))
            .collect();
        if pieces.is_empty() {
            return Err(Error::Config("empty validation split".into()));
        }
        let nll = evaluate_nll(&self.policy, &pieces, 16)?.chord_nll;
        let melodies: Vec<&[MelodyToken]> = pieces.iter().map(Piece::melody).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_e7a1);
        let ys = generate_grouped(&self.policy, &melodies, &GenerateOptions::sampled(self.config.eval_temperature), &mut rng)?;
        let pairs: Vec<Pair<'_>> = melodies.iter().zip(&ys).map(|(x, y)| (*x, y.as_slice())).collect();
        let kl = match self.teacher {
            Some(t) => Some(self.validation_kl(t, &pieces, &pairs, &mut rng)?),
            None => None,
        };
        let aux = auxiliary_counts(pairs.iter().copied())?;
        Ok(EvalRecord {
            step: self.step,
            nll,
            kl,
            reward_mean: None,
            train_kl: None,
            value_loss: None,
            note_in_chord: system_note_in_chord(pairs.iter().copied())?,
            chord_silence: aux.chord_silence_ratio(),
            early_stop_ratio: aux.early_stop_ratio(),
        })
    }

    /// Runs the configured number of steps, evaluating at step 0, every
    /// `eval_every` steps and at the end.
    pub fn run(&mut self, train: &[Piece], val: &[Piece], mut on_log: impl FnMut(&EvalRecord)) -> Result<FinetuneReport> {
        let mut report = FinetuneReport::default();
        let first = self.evaluate(val)?;
        on_log(&first);
        report.evals.push(first);
        let mut since: Vec<StepStats> = Vec::new();
        for _ in 0..self.config.steps {
            let s = self.step(train)?;
            since.push(s.clone());
            report.steps.push(s);
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                let mut rec = self.evaluate(val)?;
                let k = since.len() as f64;
                rec.reward_mean = Some(since.iter().map(|s| s.reward_mean).sum::<f64>() / k);
                rec.value_loss = Some(since.iter().map(|s| s.value_loss).sum::<f64>() / k);
                let kls: Vec<f64> = since.iter().filter_map(|s| s.kl).collect();
                rec.train_kl = (!kls.is_empty()).then(|| kls.iter().sum::<f64>() / kls.len() as f64);
                since.clear();
                on_log(&rec);
                report.evals.push(rec);
            }
        }
        Ok(report)
    }
}
