//! The look-once refinement network.
//!
//! A candidate set of `M` points passes once through
//!
//! 1. a small point network predicting a 2x2 transform `T` (identity at init),
//!    applied as `points . T`;
//! 2. a shared per-point encoder `2 -> 32 -> 64 -> 128` whose max-pooled rows
//!    give a global signature, concatenated back onto every row (`M x 256`);
//! 3. a relation branch `256 -> 64 -> 256` with a sigmoid that gates the
//!    features elementwise;
//! 4. a per-point `256 -> 2` softmax classifier; column 1 is the
//!    keep-probability.
//!
//! Only row-wise layers and max pooling over rows are used, so the
//! probabilities follow the candidates under any reordering.

mod candidates;
mod model;
mod refine;
mod train;

pub use candidates::{
    normalize_points, spread, CandidateSet, GroundTruth, KeptCandidate, NormalizedSet, PointTruth,
    RejectedCandidate, SelectionResult,
};
pub use model::{Architecture, ForwardVars, LookOnceModel, CLASSES};
pub use refine::{refine, KeepRule};
pub use train::{
    class_weights, dataset_loss, train_lookonce, train_lookonce_with, EpochLog, TrainConfig, TrainOutcome,
};
