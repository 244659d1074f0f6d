//! Transformer building blocks with a taped training path and a cached
//! incremental inference path that share parameters.

use ndarray::{s, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, AttnSpec, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            dim: 128,
            layers: 2,
            heads: 4,
            ff_mult: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: store.normal(format!("{name}.w"), din, dout, std, rng),
            b: store.zeros(format!("{name}.b"), 1, dout),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> Mat<T> {
        x.dot(store.get(self.w)) + store.get(self.b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.filled(format!("{name}.gain"), 1, dim, T::one()),
            bias: store.zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> Mat<T> {
        kernels::layer_norm(x, store.get(self.gain).view(), store.get(self.bias).view()).0
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let out_std = INIT_STD / ((2 * cfg.layers) as f64).sqrt();
        Attention {
            norm: Norm::new(store, &format!("{name}.norm"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, INIT_STD, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, INIT_STD, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, INIT_STD, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, out_std, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    cross: Option<Attention>,
    ff_norm: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer stack with an optional cross-attention sublayer
/// per block and a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    final_norm: Norm,
    heads: usize,
    dim: usize,
}

/// Memory for cross-attention: `[batch × len, dim]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub var: Var,
    pub len: usize,
}

impl Stack {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, cross: bool, rng: &mut R) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.ff_mult;
        let out_std = INIT_STD / ((2 * cfg.layers) as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    attn: Attention::new(store, &format!("{p}.attn"), cfg, rng),
                    cross: cross.then(|| Attention::new(store, &format!("{p}.cross"), cfg, rng)),
                    ff_norm: Norm::new(store, &format!("{p}.ff_norm"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, hidden, INIT_STD, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), hidden, d, out_std, rng),
                }
            })
            .collect();
        Stack {
            blocks,
            final_norm: Norm::new(store, &format!("{name}.final_norm"), d),
            heads: cfg.heads,
            dim: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_cross(&self) -> bool {
        self.blocks.first().is_some_and(|b| b.cross.is_some())
    }

    /// `x` holds `batch` sequences of `len` rows each.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var, batch: usize, len: usize, causal: bool, memory: Option<Memory>) -> Var {
        for block in &self.blocks {
            let a = &block.attn;
            let h = a.norm.forward(g, x);
            let q = a.q.forward(g, h);
            let k = a.k.forward(g, h);
            let v = a.v.forward(g, h);
            let spec = AttnSpec {
                batch,
                heads: self.heads,
                q_len: len,
                k_len: len,
                causal,
            };
            let o = g.attention(q, k, v, spec);
            let o = a.o.forward(g, o);
            let o = g.dropout(o);
            x = g.add(x, o);

            if let (Some(c), Some(mem)) = (&block.cross, memory) {
                let h = c.norm.forward(g, x);
                let q = c.q.forward(g, h);
                let k = c.k.forward(g, mem.var);
                let v = c.v.forward(g, mem.var);
                let spec = AttnSpec {
                    batch,
                    heads: self.heads,
                    q_len: len,
                    k_len: mem.len,
                    causal: false,
                };
                let o = g.attention(q, k, v, spec);
                let o = c.o.forward(g, o);
                let o = g.dropout(o);
                x = g.add(x, o);
            }

            let h = block.ff_norm.forward(g, x);
            let f = block.ff1.forward(g, h);
            let f = g.gelu(f);
            let f = block.ff2.forward(g, f);
            let f = g.dropout(f);
            x = g.add(x, f);
        }
        self.final_norm.forward(g, x)
    }

    /// Fresh cache for `batch` sequences of up to `capacity` positions.
    /// `memory` is the encoder output, `[batch × mem_len, dim]`.
    pub fn cache<T: Scalar>(&self, store: &ParamStore<T>, batch: usize, capacity: usize, memory: Option<(&Mat<T>, usize)>) -> StackCache<T> {
        let layers = self
            .blocks
            .iter()
            .map(|block| {
                let (cross_k, cross_v) = match (&block.cross, memory) {
                    (Some(c), Some((mem, mem_len))) => (0..batch)
                        .map(|b| {
                            let rows = mem.slice(s![b * mem_len..(b + 1) * mem_len, ..]);
                            (c.k.apply(store, rows), c.v.apply(store, rows))
                        })
                        .unzip(),
                    _ => (Vec::new(), Vec::new()),
                };
                LayerCache {
                    k: (0..batch).map(|_| Mat::zeros((capacity, self.dim))).collect(),
                    v: (0..batch).map(|_| Mat::zeros((capacity, self.dim))).collect(),
                    cross_k,
                    cross_v,
                }
            })
            .collect();
        StackCache {
            layers,
            len: 0,
            batch,
            capacity,
        }
    }

    /// Appends one position per sequence. `x` is `[batch, dim]`; returns the
    /// final-normed hidden states for the new positions.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, x: Mat<T>, cache: &mut StackCache<T>) -> Result<Mat<T>> {
        let pos = cache.len;
        if pos >= cache.capacity {
            return Err(Error::TooLong {
                len: pos + 1,
                max: cache.capacity,
            });
        }
        let dh = self.dim / self.heads;
        let mut x = x;
        for (block, lc) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let a = &block.attn;
            let h = a.norm.apply(store, x.view());
            let q = a.q.apply(store, h.view());
            let k = a.k.apply(store, h.view());
            let v = a.v.apply(store, h.view());
            let mut o = Mat::zeros(x.dim());
            for b in 0..cache.batch {
                lc.k[b].row_mut(pos).assign(&k.row(b));
                lc.v[b].row_mut(pos).assign(&v.row(b));
                for head in 0..self.heads {
                    let cols = head * dh..(head + 1) * dh;
                    let (_, out) = kernels::attend(
                        q.slice(s![b..b + 1, cols.clone()]),
                        lc.k[b].slice(s![..=pos, cols.clone()]),
                        lc.v[b].slice(s![..=pos, cols.clone()]),
                        false,
                        0,
                    );
                    o.slice_mut(s![b..b + 1, cols]).assign(&out);
                }
            }
            x += &a.o.apply(store, o.view());

            if let Some(c) = &block.cross {
                let h = c.norm.apply(store, x.view());
                let q = c.q.apply(store, h.view());
                let mut o = Mat::zeros(x.dim());
                for b in 0..cache.batch {
                    for head in 0..self.heads {
                        let cols = head * dh..(head + 1) * dh;
                        let (_, out) = kernels::attend(
                            q.slice(s![b..b + 1, cols.clone()]),
                            lc.cross_k[b].slice(s![.., cols.clone()]),
                            lc.cross_v[b].slice(s![.., cols.clone()]),
                            false,
                            0,
                        );
                        o.slice_mut(s![b..b + 1, cols]).assign(&out);
                    }
                }
                x += &c.o.apply(store, o.view());
            }

            let h = block.ff_norm.apply(store, x.view());
            let f = block.ff1.apply(store, h.view()).mapv(kernels::gelu);
            x += &block.ff2.apply(store, f.view());
        }
        cache.len += 1;
        Ok(self.final_norm.apply(store, x.view()))
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    cross_k: Vec<Mat<T>>,
    cross_v: Vec<Mat<T>>,
}

/// Keys and values of every position fed so far.
#[derive(Clone, Debug)]
pub struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
    len: usize,
    batch: usize,
    capacity: usize,
}

impl<T> StackCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Token and position embeddings in front of a [`Stack`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub tok: ParamId,
    pub pos: ParamId,
    pub stack: Stack,
    pub vocab: usize,
    pub max_positions: usize,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        vocab: usize,
        max_positions: usize,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        Backbone {
            tok: store.normal(format!("{name}.tok_emb"), vocab, cfg.dim, INIT_STD, rng),
            pos: store.normal(format!("{name}.pos_emb"), max_positions, cfg.dim, INIT_STD, rng),
            stack: Stack::new(store, name, cfg, cross, rng),
            vocab,
            max_positions,
        }
    }

    fn check(&self, ids: &[usize], len: usize) -> Result<()> {
        if len > self.max_positions {
            return Err(Error::TooLong {
                len,
                max: self.max_positions,
            });
        }
        match ids.iter().find(|&&id| id >= self.vocab) {
            Some(&id) => Err(Error::TokenOutOfVocab { id, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    /// `ids` holds `batch` sequences of equal length, row-major.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, causal: bool, memory: Option<Memory>) -> Result<Var> {
        let len = ids.len() / batch;
        assert_eq!(len * batch, ids.len(), "ragged batch");
        self.check(ids, len)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let te = g.embed(tok, ids);
        let pe = g.embed(pos, &positions);
        let x = g.add(te, pe);
        let x = g.dropout(x);
        Ok(self.stack.forward(g, x, batch, len, causal, memory))
    }

    pub fn cache<T: Scalar>(&self, store: &ParamStore<T>, batch: usize, memory: Option<(&Mat<T>, usize)>) -> StackCache<T> {
        self.stack.cache(store, batch, self.max_positions, memory)
    }

    /// Feeds one token per sequence and returns the new hidden states.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize], cache: &mut StackCache<T>) -> Result<Mat<T>> {
        assert_eq!(ids.len(), cache.batch);
        self.check(ids, cache.len + 1)?;
        let tok = store.get(self.tok);
        let pos = store.get(self.pos).row(cache.len);
        let mut x = Mat::zeros((ids.len(), self.stack.dim));
        for (r, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&tok.row(id));
            row += &pos;
        }
        self.stack.step(store, x, cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ff_mult: 2,
        }
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "dec", &cfg(), 11, 16, false, &mut rng);
        let ids = vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5];
        let full = {
            let mut g = Graph::new(&store);
            let h = bb.forward(&mut g, &ids, 2, true, None).unwrap();
            g.value(h).clone()
        };
        let mut cache = bb.cache(&store, 2, None);
        for t in 0..5 {
            let h = bb.step(&store, &[ids[t], ids[5 + t]], &mut cache).unwrap();
            for b in 0..2 {
                for c in 0..16 {
                    assert!((h[[b, c]] - full[[b * 5 + t, c]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cached_cross_attention_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let enc = Backbone::new(&mut store, "enc", &cfg(), 7, 8, false, &mut rng);
        let dec = Backbone::new(&mut store, "dec", &cfg(), 5, 8, true, &mut rng);
        let src = vec![1, 2, 3, 6, 0, 5];
        let tgt = vec![4, 0, 1, 4, 2, 2, 3, 1];
        let (mem, full) = {
            let mut g = Graph::new(&store);
            let m = enc.forward(&mut g, &src, 2, false, None).unwrap();
            let h = dec.forward(&mut g, &tgt, 2, true, Some(Memory { var: m, len: 3 })).unwrap();
            (g.value(m).clone(), g.value(h).clone())
        };
        let mut cache = dec.cache(&store, 2, Some((&mem, 3)));
        for t in 0..4 {
            let h = dec.step(&store, &[tgt[t], tgt[4 + t]], &mut cache).unwrap();
            for b in 0..2 {
                for c in 0..16 {
                    assert!((h[[b, c]] - full[[b * 4 + t, c]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, "dec", &cfg(), 4, 3, false, &mut rng);
        let mut g = Graph::new(&store);
        assert!(matches!(bb.forward(&mut g, &[0, 1, 2, 3], 1, true, None), Err(Error::TooLong { .. })));
        assert!(matches!(bb.forward(&mut g, &[0, 9], 1, true, None), Err(Error::TokenOutOfVocab { .. })));
        let mut cache = bb.cache(&store, 1, None);
        for _ in 0..3 {
            bb.step(&store, &[1], &mut cache).unwrap();
        }
        assert!(bb.step(&store, &[1], &mut cache).is_err());
    }
}
