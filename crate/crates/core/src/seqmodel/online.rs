use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{by_length, check_pair, check_temperature, chord_mask, sample_index, ChordModel, GenerateOptions, MleModel, NllParts, Pair, CHORD_VOCAB};
use crate::autodiff::{kernels, Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Backbone, Linear, StackCache, TransformerConfig, INIT_STD};
use crate::scalar::Scalar;
use crate::symbolic::{joint, ChordToken, MelodyToken, Piece, MAX_FRAMES};

/// Start-of-sequence id, placed after the chord and melody ranges.
pub const BOS: usize = joint::SIZE;
pub const JOINT_VOCAB: usize = joint::SIZE + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_mult: usize,
    pub vocab: usize,
    /// BOS plus two tokens per frame: 2 × 256 + 1.
    pub max_positions: usize,
    /// Restrict chord holds to continue the sounding chord.
    pub grammar_mask: bool,
}

impl Default for OnlineModelConfig {
    fn default() -> Self {
        OnlineModelConfig {
            layers: 2,
            heads: 4,
            dim: 128,
            ff_mult: 4,
            vocab: JOINT_VOCAB,
            max_positions: 2 * MAX_FRAMES + 1,
            grammar_mask: true,
        }
    }
}

impl OnlineModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        if self.vocab != JOINT_VOCAB {
            return Err(Error::Config(format!("online vocabulary must be {JOINT_VOCAB}, got {}", self.vocab)));
        }
        if self.max_positions < 2 * MAX_FRAMES {
            return Err(Error::Config(format!(
                "max positions {} is below 2 x {MAX_FRAMES} frames",
                self.max_positions
            )));
        }
        Ok(())
    }

    /// Longest melody the model can decode and be teacher-forced on.
    pub fn max_frames(&self) -> usize {
        (self.max_positions - 1) / 2
    }
}

/// Teacher-forced interleaved batch of equal-length melodies.
///
/// Inputs are `[BOS, y1, x1, ..., yT, xT]`. Row `2t` of each sequence
/// predicts `y_{t+1}` (and EOS after the last frame), row `2t+1` predicts
/// `x_{t+1}`.
#[derive(Clone, Debug)]
pub struct OnlineBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub frames: usize,
    /// Whether a final EOS row follows the last frame.
    pub eos_row: bool,
    pub chord_targets: Vec<usize>,
    pub chord_prev: Vec<Option<ChordToken>>,
    /// 1 where the target is real, 0 for padding after an early EOS.
    pub chord_weights: Vec<f64>,
    pub melody_targets: Vec<usize>,
}

impl OnlineBatch {
    pub fn new(pairs: &[Pair<'_>], eos_row: bool) -> Result<Self> {
        let frames = pairs.first().map_or(0, |p| p.0.len());
        let rows = frames + eos_row as usize;
        let len = 2 * frames + 1;
        let mut b = OnlineBatch {
            ids: Vec::with_capacity(pairs.len() * len),
            batch: pairs.len(),
            frames,
            eos_row,
            chord_targets: Vec::with_capacity(pairs.len() * rows),
            chord_prev: Vec::with_capacity(pairs.len() * rows),
            chord_weights: Vec::with_capacity(pairs.len() * rows),
            melody_targets: Vec::with_capacity(pairs.len() * frames),
        };
        for &(x, y) in pairs {
            if x.len() != frames {
                return Err(Error::Config("online batch melodies must have equal length".into()));
            }
            check_pair(x, y)?;
            b.ids.push(BOS);
            let mut prev = None;
            for t in 0..rows {
                let real = t < y.len() || (t == frames && y.len() == frames && y.last() != Some(&ChordToken::Eos));
                let target = match y.get(t) {
                    Some(tok) => *tok,
                    None if t == frames => ChordToken::Eos,
                    None => ChordToken::Silence,
                };
                b.chord_targets.push(target.id());
                b.chord_prev.push(prev);
                b.chord_weights.push(if real { 1.0 } else { 0.0 });
                if t < frames {
                    // Positions past an early EOS are padding; causality keeps
                    // them from influencing any real row.
                    let fed = if t < y.len() && target != ChordToken::Eos {
                        target
                    } else {
                        ChordToken::Silence
                    };
                    b.ids.push(joint::chord_id(fed));
                    b.ids.push(joint::melody_id(x[t]));
                    b.melody_targets.push(x[t].id());
                    prev = Some(fed);
                }
            }
        }
        Ok(b)
    }

    pub fn seq_len(&self) -> usize {
        2 * self.frames + 1
    }

    pub fn chord_rows_per_seq(&self) -> usize {
        self.frames + self.eos_row as usize
    }

    /// Row indices of the hidden-state matrix that predict chords.
    pub fn chord_rows(&self) -> Vec<usize> {
        let len = self.seq_len();
        (0..self.batch)
            .flat_map(|b| (0..self.chord_rows_per_seq()).map(move |t| b * len + 2 * t))
            .collect()
    }

    pub fn melody_rows(&self) -> Vec<usize> {
        let len = self.seq_len();
        (0..self.batch)
            .flat_map(|b| (0..self.frames).map(move |t| b * len + 2 * t + 1))
            .collect()
    }
}

pub struct OnlineOutputs {
    /// `[batch × chord_rows_per_seq, CHORD_VOCAB]` masked log-probabilities.
    pub chord_logp: Var,
    /// `[batch × frames, MelodyToken::VOCAB]`, when requested.
    pub melody_logp: Option<Var>,
}

/// Decoder-only model over the interleaved chord/melody stream.
#[derive(Clone, Debug)]
pub struct OnlineModel<T: Scalar> {
    pub config: OnlineModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    chord_head: Linear,
    melody_head: Linear,
}

impl<T: Scalar> OnlineModel<T> {
    pub fn new(config: OnlineModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = config.transformer();
        let backbone = Backbone::new(&mut store, "backbone", &t, config.vocab, config.max_positions, false, &mut rng);
        let chord_head = Linear::new(&mut store, "head.chord", t.dim, CHORD_VOCAB, INIT_STD, &mut rng);
        let melody_head = Linear::new(&mut store, "head.melody", t.dim, MelodyToken::VOCAB, INIT_STD, &mut rng);
        Ok(OnlineModel {
            config,
            store,
            backbone,
            chord_head,
            melody_head,
        })
    }

    /// Rebuilds a model from named tensors.
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

    pub fn forward(&self, g: &mut Graph<T>, batch: &OnlineBatch, with_melody: bool) -> Result<OnlineOutputs> {
        let h = self.backbone.forward(g, &batch.ids, batch.batch, true, None)?;
        let hc = g.rows(h, &batch.chord_rows());
        let logits = self.chord_head.forward(g, hc);
        let mask = g.input(chord_mask(&batch.chord_prev, self.config.grammar_mask));
        let logits = g.add(logits, mask);
        let chord_logp = g.log_softmax(logits, 0, CHORD_VOCAB);
        let melody_logp = if with_melody {
            let hm = g.rows(h, &batch.melody_rows());
            let logits = self.melody_head.forward(g, hm);
            Some(g.log_softmax(logits, 0, MelodyToken::VOCAB))
        } else {
            None
        };
        Ok(OnlineOutputs { chord_logp, melody_logp })
    }

    /// Distribution over chord tokens for frame `t = len + 1` given equal
    /// length prefixes.
    pub fn next_chord_dist(&self, x_prefix: &[MelodyToken], y_prefix: &[ChordToken]) -> Result<Vec<f64>> {
        if x_prefix.len() != y_prefix.len() {
            return Err(Error::LengthMismatch {
                melody: x_prefix.len(),
                chords: y_prefix.len(),
            });
        }
        if y_prefix.iter().any(|c| *c == ChordToken::Eos) {
            return Err(Error::InvalidPiece("prefix continues past eos".into()));
        }
        let mut batch = OnlineBatch::new(&[(x_prefix, y_prefix)], true)?;
        batch.chord_weights.fill(1.0);
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &batch, false)?;
        let lp = g.value(out.chord_logp);
        let last = lp.row(lp.nrows() - 1);
        Ok(last.iter().map(|v| v.to_f64_lossy().exp()).collect())
    }

    /// Starts incremental decoding for `batch` streams by feeding BOS.
    pub fn start(&self, batch: usize) -> Result<OnlineState<T>> {
        let mut cache = self.backbone.cache(&self.store, batch, None);
        let hidden = self.backbone.step(&self.store, &vec![BOS; batch], &mut cache)?;
        Ok(OnlineState {
            cache,
            hidden,
            prev: vec![None; batch],
            frame: 0,
            awaiting_chord: true,
        })
    }

    /// Masked chord log-probabilities for the next frame of every stream.
    pub fn state_chord_log_probs(&self, state: &OnlineState<T>) -> Mat<T> {
        let logits = self.chord_head.apply(&self.store, state.hidden.view());
        let mask = chord_mask::<T>(&state.prev, self.config.grammar_mask);
        kernels::log_softmax_rows((logits + mask).view())
    }

    pub fn push_chords(&self, state: &mut OnlineState<T>, chords: &[ChordToken]) -> Result<()> {
        if !state.awaiting_chord {
            return Err(Error::InvalidPiece("chord fed twice for one frame".into()));
        }
        let ids: Vec<usize> = chords.iter().map(|c| joint::chord_id(*c)).collect();
        self.backbone.step(&self.store, &ids, &mut state.cache)?;
        state.prev = chords.iter().map(|c| Some(*c)).collect();
        state.awaiting_chord = false;
        Ok(())
    }

    pub fn push_melody(&self, state: &mut OnlineState<T>, melody: &[MelodyToken]) -> Result<()> {
        if state.awaiting_chord {
            return Err(Error::InvalidPiece("melody fed before its frame's chord".into()));
        }
        let ids: Vec<usize> = melody.iter().map(|m| joint::melody_id(*m)).collect();
        state.hidden = self.backbone.step(&self.store, &ids, &mut state.cache)?;
        state.awaiting_chord = true;
        state.frame += 1;
        Ok(())
    }

    fn teacher_forced(&self, pairs: &[Pair<'_>]) -> Result<Vec<Mat<T>>> {
        let batch = OnlineBatch::new(pairs, false)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &batch, false)?;
        let lp = g.value(out.chord_logp);
        let rows = batch.chord_rows_per_seq();
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(b, (_, y))| lp.slice(s![b * rows..b * rows + y.len(), ..]).to_owned())
            .collect())
    }
}

/// Incremental decoding state: the cache plus the hidden state that
/// predicts the next chord.
#[derive(Clone, Debug)]
pub struct OnlineState<T> {
    cache: StackCache<T>,
    hidden: Mat<T>,
    prev: Vec<Option<ChordToken>>,
    frame: usize,
    awaiting_chord: bool,
}

impl<T> OnlineState<T> {
    /// Frames whose chord and melody have both been fed.
    pub fn frames_done(&self) -> usize {
        self.frame
    }
}

impl<T: Scalar> ChordModel<T> for OnlineModel<T> {
    fn kind(&self) -> &'static str {
        "online"
    }

    fn chord_log_probs(&self, pairs: &[Pair<'_>]) -> Result<Vec<Mat<T>>> {
        by_length(pairs, |group| self.teacher_forced(group))
    }

    fn generate(&self, melodies: &[&[MelodyToken]], opts: &GenerateOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ChordToken>>> {
        check_temperature(opts.temperature)?;
        let max_len = melodies.iter().map(|m| m.len()).max().unwrap_or(0);
        if max_len > self.config.max_frames() {
            return Err(Error::TooLong {
                len: max_len,
                max: self.config.max_frames(),
            });
        }
        let n = melodies.len();
        let mut out: Vec<Vec<ChordToken>> = melodies.iter().map(|m| Vec::with_capacity(m.len())).collect();
        if n == 0 || max_len == 0 {
            return Ok(out);
        }
        let mut done: Vec<bool> = melodies.iter().map(|m| m.is_empty()).collect();
        let mut state = self.start(n)?;
        for t in 0..max_len {
            let lp = self.state_chord_log_probs(&state);
            let mut fed = Vec::with_capacity(n);
            for b in 0..n {
                if done[b] {
                    fed.push(ChordToken::Silence);
                    continue;
                }
                let tok = match opts.forced_at(b, t) {
                    Some(tok) => tok,
                    None => {
                        let id = sample_index(lp.row(b), opts.temperature, rng);
                        ChordToken::from_id(id).expect("chord id in range")
                    }
                };
                out[b].push(tok);
                if tok == ChordToken::Eos || t + 1 == melodies[b].len() {
                    done[b] = true;
                }
                fed.push(if tok == ChordToken::Eos { ChordToken::Silence } else { tok });
            }
            if done.iter().all(|d| *d) {
                break;
            }
            self.push_chords(&mut state, &fed)?;
            let xs: Vec<MelodyToken> = melodies.iter().map(|m| m.get(t).copied().unwrap_or(MelodyToken::Silence)).collect();
            self.push_melody(&mut state, &xs)?;
        }
        Ok(out)
    }
}

impl<T: Scalar> MleModel<T> for OnlineModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn nll(&self, g: &mut Graph<T>, pieces: &[Piece]) -> Result<NllParts> {
        let pairs: Vec<Pair<'_>> = pieces.iter().map(|p| (p.melody(), p.chords())).collect();
        let batch = OnlineBatch::new(&pairs, true)?;
        let out = self.forward(g, &batch, true)?;
        let picked = g.pick(out.chord_logp, &batch.chord_targets);
        let w = g.input(Mat::from_shape_vec((batch.chord_weights.len(), 1), batch.chord_weights.iter().map(|v| T::of(*v)).collect()).expect("column"));
        let picked = g.mul(picked, w);
        let chord_sum = g.sum(picked);
        let melody_logp = out.melody_logp.expect("melody head requested");
        let mpicked = g.pick(melody_logp, &batch.melody_targets);
        let melody_sum = g.sum(mpicked);
        let total = g.add(chord_sum, melody_sum);
        let loss_sum = g.scale(total, -T::one());
        Ok(NllParts {
            chord_sum: -g.scalar(chord_sum).to_f64_lossy(),
            chord_count: batch.chord_weights.iter().filter(|w| **w > 0.0).count(),
            melody_sum: -g.scalar(melody_sum).to_f64_lossy(),
            melody_count: batch.melody_targets.len(),
            loss_sum,
        })
    }
}
