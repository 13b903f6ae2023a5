//! Self-supervised Barlow Twins pretraining for hyperspectral pixels with
//! inter-date positive pairs, evaluated by LDA across acquisitions.

pub mod augment;
pub mod classify;
pub mod diffcalc;
pub mod harness;
pub mod pairing;
pub mod speccube;
pub mod ssl;
pub mod synthgen;

pub use augment::{Augmentation, AugmentationPipeline, AugmentationSpec};
pub use classify::{lda_fit, lda_predict, mean_class_accuracy, LdaModel};
pub use harness::{run_baseline, run_matrix, run_single, Dataset, ExperimentConfig, MatrixReport};
pub use pairing::PairStrategy;
pub use speccube::{BandLayout, CrownMap, HyperCube, LabeledSpectra, Standardizer};
pub use ssl::{BarlowTwinsModel, Checkpoint, SslConfig};
pub use synthgen::{generate_paired_scene, AbioticModel, PairedScene, SyntheticSceneConfig};
