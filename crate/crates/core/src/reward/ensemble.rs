use super::{ContrastiveModel, DiscriminativeModel, RewardKind, RewardModel};
use crate::checkpoint::{Checkpoint, Persist};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::Pair;

/// Either reward kind behind one type, as loaded from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyReward<T: Scalar> {
    Contrastive(ContrastiveModel<T>),
    Discriminative(DiscriminativeModel<T>),
}

impl<T: Scalar> AnyReward<T> {
    fn inner(&self) -> &dyn RewardModel<T> {
        match self {
            AnyReward::Contrastive(m) => m,
            AnyReward::Discriminative(m) => m,
        }
    }
}

impl<T: Scalar> From<ContrastiveModel<T>> for AnyReward<T> {
    fn from(m: ContrastiveModel<T>) -> Self {
        AnyReward::Contrastive(m)
    }
}

impl<T: Scalar> From<DiscriminativeModel<T>> for AnyReward<T> {
    fn from(m: DiscriminativeModel<T>) -> Self {
        AnyReward::Discriminative(m)
    }
}

impl<T: Scalar> RewardModel<T> for AnyReward<T> {
    fn kind(&self) -> RewardKind {
        self.inner().kind()
    }

    fn scale(&self) -> usize {
        self.inner().scale()
    }

    fn is_trained(&self) -> bool {
        self.inner().is_trained()
    }

    fn score_windows(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        self.inner().score_windows(pairs)
    }
}

impl<T: Scalar> Persist for AnyReward<T> {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        match self {
            AnyReward::Contrastive(m) => m.to_checkpoint(),
            AnyReward::Discriminative(m) => m.to_checkpoint(),
        }
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.header.kind.as_str() {
            "contrastive" => Ok(AnyReward::Contrastive(ContrastiveModel::from_checkpoint(ckpt)?)),
            "discriminative" => Ok(AnyReward::Discriminative(DiscriminativeModel::from_checkpoint(ckpt)?)),
            other => Err(Error::Checkpoint(format!("`{other}` is not a reward model"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleMember<T: Scalar> {
    pub model: AnyReward<T>,
    pub weight: f64,
}

impl<T: Scalar> EnsembleMember<T> {
    pub fn new(model: impl Into<AnyReward<T>>) -> Self {
        EnsembleMember {
            model: model.into(),
            weight: 1.0,
        }
    }
}

/// Weighted mean of member scores.
#[derive(Clone, Debug)]
pub struct RewardEnsemble<T: Scalar> {
    members: Vec<EnsembleMember<T>>,
}

impl<T: Scalar> RewardEnsemble<T> {
    pub fn new(members: Vec<EnsembleMember<T>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Untrained("reward ensemble has no members".into()));
        }
        for m in &members {
            if !m.model.is_trained() {
                return Err(Error::Untrained(format!(
                    "{} reward at scale {} has not been trained",
                    m.model.kind().name(),
                    m.model.scale()
                )));
            }
            if !(m.weight.is_finite() && m.weight >= 0.0) {
                return Err(Error::Config(format!("ensemble weight {} must be finite and >= 0", m.weight)));
            }
        }
        if members.iter().map(|m| m.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("ensemble weights sum to zero".into()));
        }
        Ok(RewardEnsemble { members })
    }

    pub fn members(&self) -> &[EnsembleMember<T>] {
        &self.members
    }

    /// One score per pair; chord tracks ending early in EOS are padded with
    /// silence to the melody length.
    pub fn score(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        let total: f64 = self.members.iter().map(|m| m.weight).sum();
        let mut out = vec![0.0; pairs.len()];
        for m in self.members.iter().filter(|m| m.weight > 0.0) {
            for (o, s) in out.iter_mut().zip(m.model.score(pairs)?) {
                *o += m.weight * s;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::reward::RewardConfig;
    use crate::symbolic::{ChordToken, Piece};

    fn cfg(scale: usize) -> RewardConfig {
        RewardConfig {
            dim: 16,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            scale,
            embed_dim: 8,
            ..RewardConfig::default()
        }
    }

    fn trained_c(scale: usize, seed: u64) -> ContrastiveModel<f64> {
        let m = ContrastiveModel::<f64>::new(cfg(scale), seed).unwrap();
        let tensors = m.store().iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect();
        ContrastiveModel::from_tensors(cfg(scale), tensors).unwrap()
    }

    fn trained_d(scale: usize, seed: u64) -> DiscriminativeModel<f64> {
        let m = DiscriminativeModel::<f64>::new(cfg(scale), seed).unwrap();
        let tensors = m.store().iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect();
        DiscriminativeModel::from_tensors(cfg(scale), tensors).unwrap()
    }

    fn pieces() -> Vec<Piece> {
        generate_corpus(&CorpusConfig {
            num_pieces: 3,
            min_frames: 64,
            max_frames: 64,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn rejects_untrained_and_empty() {
        let fresh = ContrastiveModel::<f64>::new(cfg(16), 0).unwrap();
        assert!(matches!(RewardEnsemble::new(vec![EnsembleMember::new(fresh)]), Err(Error::Untrained(_))));
        assert!(RewardEnsemble::<f64>::new(vec![]).is_err());
        let mut m = EnsembleMember::new(trained_c(16, 0));
        m.weight = -1.0;
        assert!(RewardEnsemble::new(vec![m]).is_err());
    }

    #[test]
    fn single_member_equals_member() {
        let c = pieces();
        let pairs: Vec<Pair<'_>> = c.iter().map(|p| (p.melody(), p.chords())).collect();
        let d = trained_d(32, 1);
        let direct = d.score(&pairs).unwrap();
        let e = RewardEnsemble::new(vec![EnsembleMember::new(d)]).unwrap();
        assert_eq!(e.score(&pairs).unwrap(), direct);
    }

    #[test]
    fn weighted_mean_of_members() {
        let c = pieces();
        let pairs: Vec<Pair<'_>> = c.iter().map(|p| (p.melody(), p.chords())).collect();
        let a = trained_c(32, 2);
        let b = trained_d(16, 3);
        let (sa, sb) = (a.score(&pairs).unwrap(), b.score(&pairs).unwrap());
        let mut mb = EnsembleMember::new(b);
        mb.weight = 3.0;
        let e = RewardEnsemble::new(vec![EnsembleMember::new(a), mb]).unwrap();
        for ((s, x), y) in e.score(&pairs).unwrap().iter().zip(&sa).zip(&sb) {
            assert!((s - (x + 3.0 * y) / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_scores_are_local() {
        // At scale 16 over 64 frames the windows are 0-16, 8-24, ..., 48-64;
        // editing frames 0..8 changes only the first window.
        let m = trained_c(16, 4);
        let c = pieces();
        let p = &c[0];
        let mut y = p.chords().to_vec();
        for t in y.iter_mut().take(8) {
            *t = ChordToken::Silence;
        }
        let edited: Vec<Pair<'_>> = vec![(p.melody(), p.chords()), (p.melody(), &y)];
        let s = m.score(&edited).unwrap();
        let windows = crate::reward::windows(64, 16);
        let w = windows.len() as f64;
        let first_a = m.score_windows(&[(&p.melody()[..16], &p.chords()[..16])]).unwrap()[0];
        let first_b = m.score_windows(&[(&p.melody()[..16], &y[..16])]).unwrap()[0];
        assert!(((s[1] - s[0]) - (first_b - first_a) / w).abs() < 1e-9);
    }

    #[test]
    fn any_reward_round_trips() {
        let m: AnyReward<f64> = trained_d(16, 5).into();
        let back = AnyReward::<f64>::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.kind(), RewardKind::Discriminative);
        assert!(back.is_trained());
        let c = pieces();
        let pairs: Vec<Pair<'_>> = c.iter().map(|p| (p.melody(), p.chords())).collect();
        assert_eq!(m.score(&pairs).unwrap(), back.score(&pairs).unwrap());
    }
}
