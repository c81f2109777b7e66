//! Synthetic multimodal benchmark for modality-balancing methods.
//!
//! A late-fusion classifier (one MLP encoder per modality, concatenated into a
//! linear head) is trained on Gaussian-cluster data, and each balancing method
//! is scored by accuracy, Shapley-based modality imbalance, and training FLOPs.

pub mod balance;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod numkit;
pub mod seed;
pub mod trainer;

pub use balance::{Category, MethodSpec};
pub use datagen::{Dataset, Splits, SyntheticSpec};
pub use error::{Error, Result};
pub use fusion::{FusionModel, HeadKind, ModalityMask};
pub use metrics::{FlopsLedger, PerfReport, ShapleyReport};
pub use numkit::Matrix;
pub use trainer::{TrainConfig, TrainLog};
