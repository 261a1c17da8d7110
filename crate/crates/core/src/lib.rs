//! Mirror-neuron-style representation alignment between an
//! action-understanding stream and an embodied-execution stream.
//!
//! The crate covers synthetic paired data ([`datagen`]), the two task
//! models ([`encoders`]), the shared-latent alignment objective
//! ([`alignment`]), positive-pair construction ([`pairing`]), alignment
//! probing on frozen representations ([`probing`]) and the baseline, joint
//! and ablation training loops ([`training`]). File formats live in [`io`].

pub mod alignment;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod io;
pub mod numerics;
pub mod pairing;
pub mod probing;
pub mod training;

pub use alignment::{
    align_loss, align_loss_backward, cosine_similarity, mi_lower_bound, AlignConfig, AlignmentHead,
    Side,
};
pub use datagen::{
    generate_dataset, split_dataset, Dataset, Episode, GenConfig, Instruction, Split,
};
pub use encoders::{AUModel, EEModel, EncoderConfig, SuccessRule, Tap};
pub use error::{Error, Result};
pub use numerics::{Matrix, SeededSampler};
pub use pairing::{build_positive_pairs, PairBatch, PairSampler, PairStrategy};
pub use probing::{
    alignment_curve, recall_at_1, subset_alignment, train_probe, ProbeConfig, ProbeReport,
    Representations,
};
pub use training::{
    run_ablation, train_au, train_ee, train_joint, AblationGrid, AblationTable, RunMetrics,
    TrainConfig, TrainRun,
};
