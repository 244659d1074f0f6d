//! KL-distilled REINFORCE finetuning of the online policy.

mod kd;
mod penalty;
mod reinforce;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{RewardEnsemble, RewardKind, SCALES};
use crate::scalar::Scalar;
use crate::seqmodel::{check_temperature, Pair};
use crate::symbolic::MAX_FRAMES;

pub use kd::{check_vocab, kd_loss, kl_divergence, teacher_rows, KdSource};
pub use penalty::{
    early_eos_penalty, repetition_penalty, silence_penalty, total_reward, Penalties, PenaltyCoefficients, MAX_HELD_FRAMES,
    SILENCE_GRACE_FRAMES, SILENCE_TOLERANCE,
};
pub use reinforce::{mean_kl, EvalRecord, FinetuneReport, Finetuner, StepStats};

/// Anchor model for the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[default]
    Offline,
    OnlineMle,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Offline => "offline",
            TeacherKind::OnlineMle => "online_mle",
        }
    }
}

/// Sequence-level scores in reward-model units, before the reward coefficient.
pub trait RewardSource {
    fn score(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>>;
}

impl<T: Scalar> RewardSource for RewardEnsemble<T> {
    fn score(&self, pairs: &[Pair<'_>]) -> Result<Vec<f64>> {
        RewardEnsemble::score(self, pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// KL coefficient.
    pub beta: f64,
    pub reward_coef: f64,
    pub penalties: PenaltyCoefficients,
    pub kd_source: KdSource,
    pub teacher: TeacherKind,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Rollout melodies are cropped to at most this many frames.
    pub max_frames: usize,
    pub eval_every: usize,
    /// Validation pieces used for periodic evaluation.
    pub eval_pieces: usize,
    pub eval_temperature: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            beta: 0.5,
            reward_coef: 50.0,
            penalties: PenaltyCoefficients::default(),
            kd_source: KdSource::Policy,
            teacher: TeacherKind::Offline,
            temperature: 1.0,
            policy_lr: 1e-4,
            value_lr: 1e-4,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            grad_clip: 1.0,
            max_frames: MAX_FRAMES,
            eval_every: 100,
            eval_pieces: 64,
            eval_temperature: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.penalties;
        let nonneg = [self.beta, self.reward_coef, c.repetition, c.silence, c.early_eos];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("beta and all coefficients must be finite and >= 0".into()));
        }
        if !(self.policy_lr > 0.0 && self.value_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.max_frames == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, max_frames and eval_every must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        check_temperature(self.temperature)?;
        check_temperature(self.eval_temperature)
    }
}

/// The finetuned systems compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "kd")]
    Kd,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "d")]
    D,
    #[serde(rename = "c+d")]
    CPlusD,
    #[serde(rename = "realchords")]
    Realchords,
    #[serde(rename = "realchords-m")]
    RealchordsM,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::Kd, Preset::C, Preset::D, Preset::CPlusD, Preset::Realchords, Preset::RealchordsM];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Kd => "kd",
            Preset::C => "c",
            Preset::D => "d",
            Preset::CPlusD => "c+d",
            Preset::Realchords => "realchords",
            Preset::RealchordsM => "realchords-m",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Kd => "distillation from the offline teacher only",
            Preset::C => "contrastive reward, KL to the online MLE model",
            Preset::D => "discriminative reward, KL to the online MLE model",
            Preset::CPlusD => "contrastive + discriminative rewards, KL to the online MLE model",
            Preset::Realchords => "contrastive + discriminative rewards with offline distillation",
            Preset::RealchordsM => "multi-scale contrastive + discriminative rewards with offline distillation",
        }
    }

    /// Reward models as (kind, scale) pairs.
    pub fn rewards(self) -> Vec<(RewardKind, usize)> {
        let both = |scales: &[usize]| {
            [RewardKind::Contrastive, RewardKind::Discriminative]
                .into_iter()
                .flat_map(|k| scales.iter().map(move |s| (k, *s)))
                .collect()
        };
        match self {
            Preset::Kd => Vec::new(),
            Preset::C => vec![(RewardKind::Contrastive, MAX_FRAMES)],
            Preset::D => vec![(RewardKind::Discriminative, MAX_FRAMES)],
            Preset::CPlusD | Preset::Realchords => both(&[MAX_FRAMES]),
            Preset::RealchordsM => both(&SCALES),
        }
    }

    pub fn teacher(self) -> TeacherKind {
        match self {
            Preset::C | Preset::D | Preset::CPlusD => TeacherKind::OnlineMle,
            Preset::Kd | Preset::Realchords | Preset::RealchordsM => TeacherKind::Offline,
        }
    }

    pub fn penalties(self) -> PenaltyCoefficients {
        match self {
            Preset::Kd => PenaltyCoefficients::ZERO,
            Preset::C | Preset::D => PenaltyCoefficients::new(1.0, 1.0, 20.0),
            Preset::CPlusD | Preset::Realchords => PenaltyCoefficients::new(2.0, 2.0, 20.0),
            Preset::RealchordsM => PenaltyCoefficients::new(10.0, 10.0, 20.0),
        }
    }

    /// Default run configuration for this system.
    pub fn config(self) -> FinetuneConfig {
        FinetuneConfig {
            reward_coef: if self == Preset::Kd { 0.0 } else { 50.0 },
            penalties: self.penalties(),
            teacher: self.teacher(),
            ..FinetuneConfig::default()
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table() {
        let rows: Vec<(&str, usize, TeacherKind, f64, f64)> = Preset::ALL
            .iter()
            .map(|p| {
                let c = p.config();
                (p.name(), p.rewards().len(), c.teacher, c.penalties.repetition, c.reward_coef)
            })
            .collect();
        assert_eq!(
            rows,
            vec![
                ("kd", 0, TeacherKind::Offline, 0.0, 0.0),
                ("c", 1, TeacherKind::OnlineMle, 1.0, 50.0),
                ("d", 1, TeacherKind::OnlineMle, 1.0, 50.0),
                ("c+d", 2, TeacherKind::OnlineMle, 2.0, 50.0),
                ("realchords", 2, TeacherKind::Offline, 2.0, 50.0),
                ("realchords-m", 10, TeacherKind::Offline, 10.0, 50.0),
            ]
        );
        for p in Preset::ALL {
            let c = p.config();
            assert_eq!(c.beta, 0.5);
            assert_eq!(c.penalties.early_eos, if p == Preset::Kd { 0.0 } else { 20.0 });
            assert_eq!(c.kd_source, KdSource::Policy);
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            c.validate().unwrap();
        }
        assert!("realchords-x".parse::<Preset>().is_err());
    }

    #[test]
    fn config_rejects_negative_coefficients() {
        let mut c = FinetuneConfig::default();
        c.beta = -0.1;
        assert!(c.validate().is_err());
        let mut c = FinetuneConfig::default();
        c.penalties.silence = -1.0;
        assert!(c.validate().is_err());
        let mut c = FinetuneConfig::default();
        c.temperature = -1.0;
        assert!(c.validate().is_err());
    }
}
