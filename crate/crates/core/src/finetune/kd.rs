//! Exact KL distillation from a teacher's chord distributions.

use std::str::FromStr;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::{by_length, ChordModel, Pair, CHORD_VOCAB};

/// Which chord sequences the KL term is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdSource {
    #[default]
    #[serde(rename = "policy")]
    Policy,
    #[serde(rename = "dataset")]
    Dataset,
    #[serde(rename = "dataset+policy")]
    DatasetPolicy,
    #[serde(rename = "dataset+policy+teacher")]
    DatasetPolicyTeacher,
}

impl KdSource {
    pub const ALL: [KdSource; 4] = [KdSource::Policy, KdSource::Dataset, KdSource::DatasetPolicy, KdSource::DatasetPolicyTeacher];

    pub fn name(self) -> &'static str {
        match self {
            KdSource::Policy => "policy",
            KdSource::Dataset => "dataset",
            KdSource::DatasetPolicy => "dataset+policy",
            KdSource::DatasetPolicyTeacher => "dataset+policy+teacher",
        }
    }

    pub fn uses_policy(self) -> bool {
        self != KdSource::Dataset
    }

    pub fn uses_dataset(self) -> bool {
        self != KdSource::Policy
    }

    pub fn uses_teacher(self) -> bool {
        self == KdSource::DatasetPolicyTeacher
    }
}

impl FromStr for KdSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KdSource::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown KD source `{s}`")))
    }
}

/// `KL(p ‖ q)` from log-probabilities, summed exactly over the support of `p`.
pub fn kl_divergence<T: Scalar>(p_log: ArrayView1<T>, q_log: ArrayView1<T>) -> f64 {
    p_log
        .iter()
        .zip(q_log.iter())
        .map(|(p, q)| {
            let (p, q) = (p.to_f64_lossy(), q.to_f64_lossy());
            let w = p.exp();
            if w == 0.0 {
                0.0
            } else {
                w * (p - q)
            }
        })
        .sum()
}

pub fn check_vocab<T: Scalar>(policy_vocab: usize, teacher: &dyn ChordModel<T>) -> Result<()> {
    if policy_vocab != teacher.chord_vocab() {
        return Err(Error::VocabMismatch {
            policy: policy_vocab,
            teacher: teacher.chord_vocab(),
        });
    }
    Ok(())
}

/// Teacher log-probabilities laid out like a policy batch: `rows` rows per
/// pair, rows past each chord track zero-filled.
pub fn teacher_rows<T: Scalar>(teacher: &dyn ChordModel<T>, pairs: &[Pair<'_>], rows: usize) -> Result<Mat<T>> {
    let per = by_length(pairs, |group| teacher.chord_log_probs(group))?;
    let mut out = Mat::zeros((pairs.len() * rows, CHORD_VOCAB));
    for (b, lp) in per.iter().enumerate() {
        let n = lp.nrows().min(rows);
        out.slice_mut(ndarray::s![b * rows..b * rows + n, ..]).assign(&lp.slice(ndarray::s![..n, ..]));
    }
    Ok(out)
}

/// `Σ_r w_r KL(policy_r ‖ teacher_r)` as a graph node; the teacher is a
/// constant so gradients reach only the policy.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, policy_logp: Var, teacher_logp: Mat<T>, weights: &[f64]) -> Result<Var> {
    let (rows, cols) = g.value(policy_logp).dim();
    if teacher_logp.dim() != (rows, cols) || weights.len() != rows {
        return Err(Error::Config(format!(
            "teacher rows {:?} do not match policy rows {:?}",
            teacher_logp.dim(),
            (rows, cols)
        )));
    }
    let w = Mat::from_shape_fn((rows, cols), |(r, _)| T::of(weights[r]));
    let p = g.exp(policy_logp);
    let q = g.input(teacher_logp);
    let d = g.sub(policy_logp, q);
    let terms = g.mul(p, d);
    let w = g.input(w);
    let terms = g.mul(terms, w);
    Ok(g.sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn two_token_hand_instance() {
        let p = arr1(&[0.8f64.ln(), 0.2f64.ln()]);
        let q = arr1(&[0.5f64.ln(), 0.5f64.ln()]);
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl_divergence(p.view(), q.view()) - expected).abs() < 1e-12);
        assert!((expected - 0.1927).abs() < 1e-4);
        assert_eq!(kl_divergence(p.view(), p.view()), 0.0);
    }

    #[test]
    fn zero_mass_terms_vanish() {
        let p = arr1(&[0.0f64, f64::NEG_INFINITY]);
        let q = arr1(&[0.0f64, -3.0]);
        assert_eq!(kl_divergence(p.view(), q.view()), 0.0);
    }

    #[test]
    fn graph_loss_matches_closed_form_and_gradient() {
        let store = crate::autodiff::ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(ndarray::arr2(&[[0.3, -0.1, 0.7], [1.0, 0.0, -1.0]]));
        let lp = g.log_softmax(logits, 0, 3);
        let q = ndarray::arr2(&[[0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()], [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]]);
        let l = kd_loss(&mut g, lp, q.clone(), &[1.0, 0.5]).unwrap();
        let lpv = g.value(lp).clone();
        let expected = kl_divergence(lpv.row(0), q.row(0)) + 0.5 * kl_divergence(lpv.row(1), q.row(1));
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn source_names_round_trip() {
        for s in KdSource::ALL {
            assert_eq!(s.name().parse::<KdSource>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("teacher".parse::<KdSource>().is_err());
    }
}
