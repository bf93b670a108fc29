//! Per-entity learning: feature assembly, fold planning, gradient-boosted
//! trees, Bayesian tuning, evaluation and the binary model format.

pub mod bayes;
pub mod features;
pub mod folds;
pub mod gbdt;
pub mod metrics;
pub mod persist;

pub use bayes::{bayes_opt, tune_hyperparams, BayesOutcome, Dim, Scale, SearchSpace, Trial};
pub use features::{build_features, Dataset, Instance, DOW_FEATURE, HOUR_FEATURE};
pub use folds::{select_k, FoldPlan};
pub use gbdt::{train_gbdt, GbdtModel, Hyperparams, Node, Tree};
pub use metrics::{cross_validate, evaluate, f1_histogram, Averaging, EvalReport, F1_BINS};
pub use persist::{load_model, model_from_bytes, model_to_bytes, persist_model};

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("no joinable instances")]
    NoJoinableInstances,
    #[error("unsatisfiable fold plan: smallest class has {0} instance(s)")]
    UnsatisfiableFolds(usize),
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("feature matrix contains a non-finite value")]
    NonFinite,
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("search budget must be at least 1")]
    EmptyBudget,
    #[error("every search trial failed")]
    AllTrialsFailed,
    #[error("model version error: {0}")]
    Version(String),
    #[error("model file truncated")]
    Truncated,
    #[error("model checksum mismatch")]
    Checksum,
    #[error("malformed model: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
