use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

pub type Mat<T> = Array2<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named 2-D parameter tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Mat::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: T) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), value))
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Copies every tensor whose name (after stripping `from_prefix` and
    /// adding `to_prefix`) exists here with the same shape. Returns how many
    /// tensors were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>, from_prefix: &str, to_prefix: &str) -> usize {
        let mut copied = 0;
        for (_, name, value) in other.iter() {
            let Some(rest) = name.strip_prefix(from_prefix) else {
                continue;
            };
            if let Some(id) = self.id(&format!("{to_prefix}{rest}")) {
                if self.values[id.0].dim() == value.dim() {
                    self.values[id.0].assign(value);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces every value by name; shapes must match exactly.
    pub fn load_named(&mut self, tensors: Vec<(String, Mat<T>)>) -> Result<(), String> {
        let mut seen = vec![false; self.len()];
        for (name, value) in tensors {
            let id = self.id(&name).ok_or_else(|| format!("unexpected tensor `{name}`"))?;
            if self.values[id.0].dim() != value.dim() {
                return Err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    self.values[id.0].dim()
                ));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(format!("missing tensor `{}`", self.names[i])),
            None => Ok(()),
        }
    }
}

/// Gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Gradients {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| *v * *v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }
}
