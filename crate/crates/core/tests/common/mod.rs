//! Small scenes, models and oracles shared by the integration tests.
#![allow(dead_code)]

pub mod fd;
pub mod lda;

use twinspec::harness::{AugmentationSet, Dataset, ExperimentConfig, SceneSource};
use twinspec::speccube::{BandDomain, BandLayout};
use twinspec::ssl::{EncoderConfig, ProjectorConfig, SslConfig};
use twinspec::synthgen::{generate_paired_scene, AbioticModel, CrownProfile, LibraryParams, SyntheticSceneConfig};

pub fn small_layout() -> BandLayout {
    BandLayout::new(vec![
        BandDomain::new("VNIR", 420.0, 980.0, 24),
        BandDomain::new("SWIR", 1000.0, 2400.0, 24),
    ])
    .unwrap()
}

pub fn small_scene() -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        rows: 20,
        cols: 20,
        species: 4,
        profile: CrownProfile::Counts(vec![6, 4, 3, 3]),
        radius_min: 1.0,
        radius_max: 1.8,
        layout: small_layout(),
        library: LibraryParams {
            min_separation: 0.1,
            ..LibraryParams::default()
        },
        seed: 11,
        ..SyntheticSceneConfig::default()
    }
}

pub fn small_abiotic() -> AbioticModel {
    AbioticModel {
        gain_amplitude: vec![0.05, 0.08],
        ..AbioticModel::default()
    }
}

pub fn small_ssl(n_epochs: usize) -> SslConfig {
    let mut ssl = SslConfig {
        encoder: EncoderConfig {
            channels: vec![3, 4, 4, 4, 6],
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        projector: ProjectorConfig { hidden: 8, output: 8 },
        ..SslConfig::default()
    };
    ssl.train.n_epochs = n_epochs;
    ssl.train.batch_size = 32;
    ssl.train.max_pairs_per_epoch = Some(96);
    ssl.loss.mean_center = true;
    ssl
}

pub fn small_experiment(n_epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        scene: SceneSource::Synthetic {
            synthetic: small_scene(),
            abiotic_t1: small_abiotic(),
            abiotic_t2: small_abiotic(),
        },
        augmentation_sets: vec![AugmentationSet::none()],
        ssl: small_ssl(n_epochs),
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    }
}

pub fn dataset(config: &ExperimentConfig) -> Dataset {
    Dataset::load(&config.scene).unwrap()
}

pub fn zero_scene_dataset(scene: &SyntheticSceneConfig) -> Dataset {
    let zero = AbioticModel::zero(scene.layout.domains.len());
    let s = generate_paired_scene(scene, &zero, &zero, scene.seed).unwrap();
    Dataset::from_cubes(s.t1, s.t2, s.crowns).unwrap()
}
