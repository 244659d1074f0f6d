//! Finite-difference check of the training gradients on a toy decoder.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::nn::{Backbone, Linear, TransformerConfig};

/// Vocabulary of the toy instance.
pub const TOY_VOCAB: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a| + |n|, floor)` over all parameters.
    pub max_rel_error: f64,
    pub entries: usize,
}

struct Toy {
    store: ParamStore<f64>,
    backbone: Backbone,
    head: Linear,
}

impl Toy {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        };
        let backbone = Backbone::new(&mut store, "toy", &cfg, TOY_VOCAB, 2, false, &mut rng);
        let head = Linear::new(&mut store, "head", cfg.dim, TOY_VOCAB, 0.5, &mut rng);
        // Jitter every entry, gains and biases included, so the check is
        // not dominated by near-zero gradients of the small training init.
        let noise = Normal::new(0.0, 0.3).expect("valid std");
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        Toy { store, backbone, head }
    }

    /// Summed NLL of `targets` given causal `inputs`, two frames.
    fn nll(&self, g: &mut Graph<f64>, inputs: &[usize; 2], targets: &[usize; 2]) -> Result<Var> {
        let h = self.backbone.forward(g, inputs, 1, true, None)?;
        let logits = self.head.forward(g, h);
        let lp = g.log_softmax(logits, 0, TOY_VOCAB);
        let picked = g.pick(lp, targets);
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0))
    }
}

/// Compares analytic NLL gradients of a 2-frame, 8-token causal decoder
/// against central differences for every parameter entry.
pub fn toy_nll_gradcheck(seed: u64) -> Result<GradCheck> {
    let mut toy = Toy::new(seed);
    let (inputs, targets) = ([3, 5], [5, 1]);
    let grads = {
        let mut g = Graph::new(&toy.store);
        let loss = toy.nll(&mut g, &inputs, &targets)?;
        g.backward(loss)
    };
    let h = 1e-5;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        entries: 0,
    };
    let ids: Vec<_> = toy.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let Some(analytic) = grads.get(id).cloned() else {
            continue;
        };
        for ((r, c), a) in analytic.indexed_iter() {
            let orig = toy.store.get(id)[[r, c]];
            let eval = |v: f64, toy: &mut Toy| -> Result<f64> {
                toy.store.get_mut(id)[[r, c]] = v;
                let mut g = Graph::new(&toy.store);
                let l = toy.nll(&mut g, &inputs, &targets)?;
                Ok(g.scalar(l))
            };
            let up = eval(orig + h, &mut toy)?;
            let down = eval(orig - h, &mut toy)?;
            toy.store.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max(err);
            out.entries += 1;
        }
    }
    Ok(out)
}
