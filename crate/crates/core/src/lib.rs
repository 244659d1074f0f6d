pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod nn;
pub mod reward;
pub mod scalar;
pub mod seqmodel;
pub mod symbolic;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision the models are trained and served in.
pub type Real = f32;

pub type OnlineModel = seqmodel::OnlineModel<Real>;
pub type OfflineModel = seqmodel::OfflineModel<Real>;
pub type ValueModel = seqmodel::ValueModel<Real>;
pub type ContrastiveModel = reward::ContrastiveModel<Real>;
pub type DiscriminativeModel = reward::DiscriminativeModel<Real>;
pub type AnyReward = reward::AnyReward<Real>;
pub type RewardEnsemble = reward::RewardEnsemble<Real>;
pub type Finetuner<'a> = finetune::Finetuner<'a, Real>;
