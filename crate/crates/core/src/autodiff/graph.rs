use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{Gradients, Mat, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call. Rows of `q` are
/// `batch × q_len`, rows of `k`/`v` are `batch × k_len`; columns are split
/// evenly across heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<Mat<T>>,
    },
    LogSoftmax {
        x: Var,
        start: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Rows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    MeanPool {
        x: Var,
        group: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Mat<T>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A define-by-run computation tape over 2-D tensors. Parameters are read
/// from a [`ParamStore`]; [`Graph::backward`] returns their gradients.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    dropout: Option<(T, ChaCha8Rng)>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Enables dropout with the given rate for this tape.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((T::of(rate), rng));
        }
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), &[]);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1, n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies `x` by a `[1, 1]` node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(x).mapv(|e| e * k);
        self.push(v, Op::MulScalarVar(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x).mapv(|e| e * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, inv_std) = kernels::layer_norm(self.value(x).view(), self.value(gain).view(), self.value(bias).view());
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.push(
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        assert_eq!(d % spec.heads, 0, "dim must divide into heads");
        assert_eq!(qm.nrows(), spec.batch * spec.q_len);
        assert_eq!(km.nrows(), spec.batch * spec.k_len);
        let dh = d / spec.heads;
        let offset = spec.k_len.saturating_sub(spec.q_len);
        let mut out = Mat::zeros((qm.nrows(), d));
        let mut probs = Vec::with_capacity(spec.batch * spec.heads);
        for b in 0..spec.batch {
            let qr = b * spec.q_len..(b + 1) * spec.q_len;
            let kr = b * spec.k_len..(b + 1) * spec.k_len;
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                let (p, o) = kernels::attend(
                    qm.slice(s![qr.clone(), cols.clone()]),
                    km.slice(s![kr.clone(), cols.clone()]),
                    vm.slice(s![kr.clone(), cols.clone()]),
                    spec.causal,
                    offset,
                );
                out.slice_mut(s![qr.clone(), cols]).assign(&o);
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Log-softmax over columns `start..end`; the result has `end - start`
    /// columns.
    pub fn log_softmax(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = kernels::log_softmax_rows(self.value(x).slice(s![.., start..end]));
        self.push(v, Op::LogSoftmax { x, start }, &[x])
    }

    /// `out[i, 0] = x[i, idx[i]]`
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.nrows(), idx.len());
        let v = Mat::from_shape_fn((idx.len(), 1), |(i, _)| xm[[i, idx[i]]]);
        self.push(v, Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(v, Op::Rows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of_usize(n))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.nrows() % group, 0);
        let groups = xm.nrows() / group;
        let inv = T::one() / T::of_usize(group);
        let mut v = Mat::zeros((groups, xm.ncols()));
        for g in 0..groups {
            let block = xm.slice(s![g * group..(g + 1) * group, ..]);
            v.row_mut(g).assign(&block.sum_axis(Axis(0)).mapv(|e| e * inv));
        }
        self.push(v, Op::MeanPool { x, group }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let eps = T::of(1e-12);
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.iter().map(|e| *e * *e).sum::<T>().sqrt().max(eps);
            row.mapv_inplace(|e| e / n);
            norms.push(n);
        }
        self.push(v, Op::L2Normalize { x, norms }, &[x])
    }

    /// Inverted dropout; identity when the tape is not training.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let keep = T::one() - rate;
        let scale = T::one() / keep;
        let shape = self.nodes[x.0].value.dim();
        let r = rate.to_f64_lossy();
        let mask = Mat::from_shape_fn(shape, |_| if rng.random::<f64>() < r { T::zero() } else { scale });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    /// Mean binary cross-entropy of `[n, 1]` logits against targets in [0,1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[T]) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.len(), targets.len());
        let n = T::of_usize(targets.len());
        let loss = xm
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<T>()
            / n;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar node");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), T::one()));
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Mat<T>| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(existing) => *existing += &delta,
                        slot @ None => *slot = Some(delta),
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|e| -e));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::MulScalarVar(x, s) => {
                    let k = self.scalar(*s);
                    let ds = (&g * self.value(*x)).sum();
                    acc(*s, Mat::from_elem((1, 1), ds));
                    acc(*x, g.mapv(|e| e * k));
                }
                Op::Scale(x, k) => acc(*x, g.mapv(|e| e * *k)),
                Op::Gelu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| *d *= kernels::gelu_grad(v));
                    acc(*x, d);
                }
                Op::Exp(x) => acc(*x, &g * &node.value),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gv = self.value(*gain).row(0).to_owned();
                    let n = T::of_usize(g.ncols());
                    let mut dx = &g * &gv;
                    for ((mut row, xh), inv) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let sum_d = row.sum();
                        let sum_dx = row.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
                        Zip::from(&mut row).and(&xh).for_each(|d, &xv| {
                            *d = *inv * (*d * n - sum_d - xv * sum_dx) / n;
                        });
                    }
                    acc(*x, dx);
                }
                Op::Embed { table, ids } => {
                    let mut d = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut target = d.row_mut(id);
                        target += &g.row(r);
                    }
                    acc(*table, d);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, spec, probs);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::LogSoftmax { x, start } => {
                    let mut d = Mat::zeros(self.value(*x).dim());
                    let width = g.ncols();
                    {
                        let mut part = d.slice_mut(s![.., *start..*start + width]);
                        for ((mut drow, grow), yrow) in part.rows_mut().into_iter().zip(g.rows()).zip(node.value.rows()) {
                            let gsum = grow.sum();
                            Zip::from(&mut drow).and(&grow).and(&yrow).for_each(|d, &gv, &y| {
                                *d = gv - y.exp() * gsum;
                            });
                        }
                    }
                    acc(*x, d);
                }
                Op::Pick { x, idx } => {
                    let mut d = Mat::zeros(self.value(*x).dim());
                    for (i, &j) in idx.iter().enumerate() {
                        d[[i, j]] += g[[i, 0]];
                    }
                    acc(*x, d);
                }
                Op::Rows { x, rows } => {
                    let mut d = Mat::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut target = d.row_mut(src);
                        target += &g.row(r);
                    }
                    acc(*x, d);
                }
                Op::Sum(x) => acc(*x, Mat::from_elem(self.value(*x).dim(), g[[0, 0]])),
                Op::MeanPool { x, group } => {
                    let inv = T::one() / T::of_usize(*group);
                    let mut d = Mat::zeros(self.value(*x).dim());
                    for (gi, grow) in g.rows().into_iter().enumerate() {
                        let scaled = grow.mapv(|e| e * inv);
                        for r in gi * group..(gi + 1) * group {
                            d.row_mut(r).assign(&scaled);
                        }
                    }
                    acc(*x, d);
                }
                Op::L2Normalize { x, norms } => {
                    let mut d = g.clone();
                    for ((mut drow, yrow), n) in d.rows_mut().into_iter().zip(node.value.rows()).zip(norms) {
                        let dot = drow.iter().zip(yrow).map(|(a, b)| *a * *b).sum::<T>();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = (*d - y * dot) / *n);
                    }
                    acc(*x, d);
                }
                Op::Dropout { x, mask } => acc(*x, &g * mask),
                Op::BceWithLogits { x, targets } => {
                    let n = T::of_usize(targets.len());
                    let scale = g[[0, 0]] / n;
                    let xm = self.value(*x);
                    let mut d = Mat::zeros(xm.dim());
                    for ((dv, &z), &t) in d.iter_mut().zip(xm.iter()).zip(targets) {
                        *dv = (sigmoid(z) - t) * scale;
                    }
                    acc(*x, d);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        g: &Mat<T>,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Mat<T>],
    ) -> (Mat<T>, Mat<T>, Mat<T>) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        let dh = d / spec.heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut dq = Mat::zeros(qm.dim());
        let mut dk = Mat::zeros(km.dim());
        let mut dv = Mat::zeros(vm.dim());
        for b in 0..spec.batch {
            let qr = b * spec.q_len..(b + 1) * spec.q_len;
            let kr = b * spec.k_len..(b + 1) * spec.k_len;
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[b * spec.heads + h];
                let go = g.slice(s![qr.clone(), cols.clone()]);
                let vb = vm.slice(s![kr.clone(), cols.clone()]);
                dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&go));
                let mut ds: Array2<T> = go.dot(&vb.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum::<T>();
                    Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                }
                let kb = km.slice(s![kr.clone(), cols.clone()]);
                let qb = qm.slice(s![qr.clone(), cols.clone()]);
                dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![kr.clone(), cols]).assign(&ds.t().dot(&qb));
            }
        }
        (dq, dk, dv)
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
