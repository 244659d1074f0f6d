use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{by_length, check_pair, check_temperature, chord_mask, sample_index, ChordModel, GenerateOptions, MleModel, NllParts, Pair, CHORD_VOCAB};
use crate::autodiff::{kernels, Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Backbone, Linear, Memory, StackCache, TransformerConfig, INIT_STD};
use crate::scalar::Scalar;
use crate::symbolic::{ChordToken, MelodyToken, Piece, MAX_FRAMES};

/// Decoder start token, after the chord range.
pub const DECODER_BOS: usize = CHORD_VOCAB;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_mult: usize,
    pub max_frames: usize,
    pub grammar_mask: bool,
}

impl Default for OfflineModelConfig {
    fn default() -> Self {
        OfflineModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            dim: 128,
            ff_mult: 4,
            max_frames: MAX_FRAMES,
            grammar_mask: true,
        }
    }
}

impl OfflineModelConfig {
    fn transformer(&self, layers: usize) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer(self.encoder_layers).validate()?;
        self.transformer(self.decoder_layers).validate()?;
        if self.max_frames < MAX_FRAMES {
            return Err(Error::Config(format!("max frames {} is below {MAX_FRAMES}", self.max_frames)));
        }
        Ok(())
    }
}

/// Teacher-forced batch: melodies for the encoder and `[BOS, y1, ...]` for
/// the decoder.
#[derive(Clone, Debug)]
pub struct OfflineBatch {
    pub melody_ids: Vec<usize>,
    pub decoder_ids: Vec<usize>,
    pub batch: usize,
    pub frames: usize,
    pub eos_row: bool,
    pub targets: Vec<usize>,
    pub prev: Vec<Option<ChordToken>>,
    pub weights: Vec<f64>,
}

impl OfflineBatch {
    pub fn new(pairs: &[Pair<'_>], eos_row: bool) -> Result<Self> {
        let frames = pairs.first().map_or(0, |p| p.0.len());
        let rows = frames + eos_row as usize;
        let mut b = OfflineBatch {
            melody_ids: Vec::with_capacity(pairs.len() * frames),
            decoder_ids: Vec::with_capacity(pairs.len() * rows),
            batch: pairs.len(),
            frames,
            eos_row,
            targets: Vec::with_capacity(pairs.len() * rows),
            prev: Vec::with_capacity(pairs.len() * rows),
            weights: Vec::with_capacity(pairs.len() * rows),
        };
        for &(x, y) in pairs {
            if x.len() != frames {
                return Err(Error::Config("offline batch melodies must have equal length".into()));
            }
            check_pair(x, y)?;
            b.melody_ids.extend(x.iter().map(|m| m.id()));
            let mut prev: Option<ChordToken> = None;
            for t in 0..rows {
                let real = t < y.len() || (t == frames && y.len() == frames && y.last() != Some(&ChordToken::Eos));
                let target = match y.get(t) {
                    Some(tok) => *tok,
                    None if t == frames => ChordToken::Eos,
                    None => ChordToken::Silence,
                };
                b.decoder_ids.push(prev.map_or(DECODER_BOS, |p| p.id()));
                b.targets.push(target.id());
                b.prev.push(prev);
                b.weights.push(if real { 1.0 } else { 0.0 });
                prev = Some(if real && target != ChordToken::Eos { target } else { ChordToken::Silence });
            }
        }
        Ok(b)
    }

    pub fn rows_per_seq(&self) -> usize {
        self.frames + self.eos_row as usize
    }
}

/// Encoder over the full melody, causal chord decoder with cross-attention.
#[derive(Clone, Debug)]
pub struct OfflineModel<T: Scalar> {
    pub config: OfflineModelConfig,
    store: ParamStore<T>,
    encoder: Backbone,
    decoder: Backbone,
    head: Linear,
}

impl<T: Scalar> OfflineModel<T> {
    pub fn new(config: OfflineModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = config.transformer(config.encoder_layers);
        let dec = config.transformer(config.decoder_layers);
        let encoder = Backbone::new(&mut store, "encoder", &enc, MelodyToken::VOCAB, config.max_frames, false, &mut rng);
        let decoder = Backbone::new(&mut store, "decoder", &dec, CHORD_VOCAB + 1, config.max_frames + 1, true, &mut rng);
        let head = Linear::new(&mut store, "head.chord", config.dim, CHORD_VOCAB, INIT_STD, &mut rng);
        Ok(OfflineModel {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn from_tensors(config: OfflineModelConfig, tensors: Vec<(String, Mat<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_named(tensors).map_err(Error::Checkpoint)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Masked chord log-probabilities, `[batch × rows_per_seq, CHORD_VOCAB]`.
    pub fn forward(&self, g: &mut Graph<T>, batch: &OfflineBatch) -> Result<Var> {
        if batch.frames > self.config.max_frames {
            return Err(Error::TooLong {
                len: batch.frames,
                max: self.config.max_frames,
            });
        }
        let mem = self.encoder.forward(g, &batch.melody_ids, batch.batch, false, None)?;
        let h = self.decoder.forward(
            g,
            &batch.decoder_ids,
            batch.batch,
            true,
            Some(Memory {
                var: mem,
                len: batch.frames,
            }),
        )?;
        let logits = self.head.forward(g, h);
        let mask = g.input(chord_mask(&batch.prev, self.config.grammar_mask));
        let logits = g.add(logits, mask);
        Ok(g.log_softmax(logits, 0, CHORD_VOCAB))
    }

    /// Distribution over chord tokens at frame `len(y_prefix) + 1` given the
    /// whole melody.
    pub fn next_chord_dist(&self, x: &[MelodyToken], y_prefix: &[ChordToken]) -> Result<Vec<f64>> {
        if y_prefix.len() >= x.len() + 1 || y_prefix.iter().any(|c| *c == ChordToken::Eos) {
            return Err(Error::LengthMismatch {
                melody: x.len(),
                chords: y_prefix.len(),
            });
        }
        let mut state = self.start(&[x])?;
        for c in y_prefix {
            self.push_chords(&mut state, &[*c])?;
        }
        let lp = self.state_chord_log_probs(&state);
        Ok(lp.row(0).iter().map(|v| v.to_f64_lossy().exp()).collect())
    }

    /// Encodes equal-length melodies and feeds the decoder start token.
    pub fn start(&self, melodies: &[&[MelodyToken]]) -> Result<OfflineState<T>> {
        let frames = melodies.first().map_or(0, |m| m.len());
        if melodies.iter().any(|m| m.len() != frames) {
            return Err(Error::Config("offline decoding needs equal-length melodies".into()));
        }
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::TooLong {
                len: frames,
                max: self.config.max_frames,
            });
        }
        let ids: Vec<usize> = melodies.iter().flat_map(|m| m.iter().map(|t| t.id())).collect();
        let mem = {
            let mut g = Graph::new(&self.store);
            let m = self.encoder.forward(&mut g, &ids, melodies.len(), false, None)?;
            g.value(m).clone()
        };
        let mut cache = self.decoder.cache(&self.store, melodies.len(), Some((&mem, frames)));
        let hidden = self.decoder.step(&self.store, &vec![DECODER_BOS; melodies.len()], &mut cache)?;
        Ok(OfflineState {
            cache,
            hidden,
            prev: vec![None; melodies.len()],
        })
    }

    pub fn state_chord_log_probs(&self, state: &OfflineState<T>) -> Mat<T> {
        let logits = self.head.apply(&self.store, state.hidden.view());
        let mask = chord_mask::<T>(&state.prev, self.config.grammar_mask);
        kernels::log_softmax_rows((logits + mask).view())
    }

    pub fn push_chords(&self, state: &mut OfflineState<T>, chords: &[ChordToken]) -> Result<()> {
        let ids: Vec<usize> = chords.iter().map(|c| c.id()).collect();
        state.hidden = self.decoder.step(&self.store, &ids, &mut state.cache)?;
        state.prev = chords.iter().map(|c| Some(*c)).collect();
        Ok(())
    }

    fn teacher_forced(&self, pairs: &[Pair<'_>]) -> Result<Vec<Mat<T>>> {
        let batch = OfflineBatch::new(pairs, false)?;
        let mut g = Graph::new(&self.store);
        let lp = self.forward(&mut g, &batch)?;
        let lp = g.value(lp);
        let rows = batch.rows_per_seq();
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(b, (_, y))| lp.slice(s![b * rows..b * rows + y.len(), ..]).to_owned())
            .collect())
    }

    fn generate_group(&self, melodies: &[&[MelodyToken]], forced: &[Vec<ChordToken>], temperature: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ChordToken>>> {
        let n = melodies.len();
        let frames = melodies[0].len();
        let mut out: Vec<Vec<ChordToken>> = vec![Vec::with_capacity(frames); n];
        let mut done = vec![false; n];
        let mut state = self.start(melodies)?;
        for t in 0..frames {
            let lp = self.state_chord_log_probs(&state);
            let mut fed = Vec::with_capacity(n);
            for b in 0..n {
                if done[b] {
                    fed.push(ChordToken::Silence);
                    continue;
                }
                let tok = match forced[b].get(t) {
                    Some(tok) => *tok,
                    None => ChordToken::from_id(sample_index(lp.row(b), temperature, rng)).expect("chord id in range"),
                };
                out[b].push(tok);
                done[b] = tok == ChordToken::Eos;
                fed.push(if tok == ChordToken::Eos { ChordToken::Silence } else { tok });
            }
            if t + 1 == frames || done.iter().all(|d| *d) {
                break;
            }
            self.push_chords(&mut state, &fed)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct OfflineState<T> {
    cache: StackCache<T>,
    hidden: Mat<T>,
    prev: Vec<Option<ChordToken>>,
}

impl<T: Scalar> ChordModel<T> for OfflineModel<T> {
    fn kind(&self) -> &'static str {
        "offline"
    }

    fn chord_log_probs(&self, pairs: &[Pair<'_>]) -> Result<Vec<Mat<T>>> {
        by_length(pairs, |group| self.teacher_forced(group))
    }

    fn generate(&self, melodies: &[&[MelodyToken]], opts: &GenerateOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ChordToken>>> {
        check_temperature(opts.temperature)?;
        let mut out: Vec<Vec<ChordToken>> = vec![Vec::new(); melodies.len()];
        let lens: Vec<usize> = melodies.iter().map(|m| m.len()).collect();
        for group in super::group_by_len(&lens) {
            if lens[group[0]] == 0 {
                continue;
            }
            let ms: Vec<&[MelodyToken]> = group.iter().map(|&i| melodies[i]).collect();
            let forced: Vec<Vec<ChordToken>> = group.iter().map(|&i| opts.forced.get(i).cloned().unwrap_or_default()).collect();
            for (i, y) in group.iter().zip(self.generate_group(&ms, &forced, opts.temperature, rng)?) {
                out[*i] = y;
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> MleModel<T> for OfflineModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn nll(&self, g: &mut Graph<T>, pieces: &[Piece]) -> Result<NllParts> {
        let pairs: Vec<Pair<'_>> = pieces.iter().map(|p| (p.melody(), p.chords())).collect();
        let batch = OfflineBatch::new(&pairs, true)?;
        let lp = self.forward(g, &batch)?;
        let picked = g.pick(lp, &batch.targets);
        let w = g.input(Mat::from_shape_vec((batch.weights.len(), 1), batch.weights.iter().map(|v| T::of(*v)).collect()).expect("column"));
        let picked = g.mul(picked, w);
        let sum = g.sum(picked);
        let loss_sum = g.scale(sum, -T::one());
        Ok(NllParts {
            chord_sum: -g.scalar(sum).to_f64_lossy(),
            chord_count: batch.weights.iter().filter(|w| **w > 0.0).count(),
            melody_sum: 0.0,
            melody_count: 0,
            loss_sum,
        })
    }
}
