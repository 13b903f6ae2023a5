//! Positive-pair construction and epoch batching.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_pipeline, AugmentError, AugmentationPipeline};
use crate::speccube::HyperCube;
use crate::synthgen::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum PairError {
    #[error("coordinate ({0}, {1}) is not valid for this pairing")]
    InvalidCoord(usize, usize),
    #[error("need at least 2 coordinates to form a batch, got {0}")]
    TooFewCoords(usize),
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("cubes differ in geometry or layout")]
    Geometry,
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T> = std::result::Result<T, PairError>;

/// How the two views of a coordinate are sourced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// First view from date 1, second from date 2 at the same coordinate.
    InterDate,
    /// Both views from date 1; only augmentations make them differ.
    SameView,
}

impl PairStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            PairStrategy::InterDate => "inter_date",
            PairStrategy::SameView => "same_view",
        }
    }
}

/// Stacked views, one row per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub view1: Array2<f64>,
    pub view2: Array2<f64>,
    pub coords: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Augmentation pipelines for the two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPipelines {
    pub first: AugmentationPipeline,
    pub second: AugmentationPipeline,
}

/// Independent random streams for the two branches.
#[derive(Clone, Debug)]
pub struct BranchRngs {
    pub first: ChaCha8Rng,
    pub second: ChaCha8Rng,
}

impl BranchRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            first: stream_rng(seed, 100),
            second: stream_rng(seed, 101),
        }
    }
}

pub struct CubePair<'a> {
    pub t1: &'a HyperCube,
    pub t2: &'a HyperCube,
}

impl<'a> CubePair<'a> {
    pub fn new(t1: &'a HyperCube, t2: &'a HyperCube) -> Result<Self> {
        if !t1.same_geometry(t2) {
            return Err(PairError::Geometry);
        }
        Ok(Self { t1, t2 })
    }
}

pub fn make_pair(
    coord: (usize, usize),
    cubes: &CubePair<'_>,
    strategy: PairStrategy,
    pipelines: &BranchPipelines,
    rngs: &mut BranchRngs,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (i, j) = coord;
    let (first, second) = match strategy {
        PairStrategy::InterDate => {
            if !(cubes.t1.is_valid(i, j) && cubes.t2.is_valid(i, j)) {
                return Err(PairError::InvalidCoord(i, j));
            }
            (cubes.t1.pixel_f64(i, j), cubes.t2.pixel_f64(i, j))
        }
        PairStrategy::SameView => {
            if !cubes.t1.is_valid(i, j) {
                return Err(PairError::InvalidCoord(i, j));
            }
            let x = cubes.t1.pixel_f64(i, j);
            (x.clone(), x)
        }
    };
    Ok((
        apply_pipeline(&first, &pipelines.first, &mut rngs.first)?,
        apply_pipeline(&second, &pipelines.second, &mut rngs.second)?,
    ))
}

/// Shuffles `coords` without replacement, optionally caps the count, and
/// splits into batches. A trailing batch of fewer than 2 is dropped.
pub fn sample_epoch<R: Rng + ?Sized>(
    coords: &[(usize, usize)],
    batch_size: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if batch_size < 2 {
        return Err(PairError::BatchSize(batch_size));
    }
    if coords.len() < 2 {
        return Err(PairError::TooFewCoords(coords.len()));
    }
    let mut order = coords.to_vec();
    order.shuffle(rng);
    if let Some(cap) = cap {
        order.truncate(cap.max(2));
    }
    let mut batches: Vec<Vec<(usize, usize)>> = order.chunks(batch_size).map(<[_]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    Ok(batches)
}

pub fn assemble_batch(
    coords: &[(usize, usize)],
    cubes: &CubePair<'_>,
    strategy: PairStrategy,
    pipelines: &BranchPipelines,
    rngs: &mut BranchRngs,
) -> Result<PairBatch> {
    let c = cubes.t1.channels();
    let mut v1 = Vec::with_capacity(coords.len() * c);
    let mut v2 = Vec::with_capacity(coords.len() * c);
    for &coord in coords {
        let (a, b) = make_pair(coord, cubes, strategy, pipelines, rngs)?;
        v1.extend(a);
        v2.extend(b);
    }
    Ok(PairBatch {
        view1: Array2::from_shape_vec((coords.len(), c), v1).expect("rows of equal width"),
        view2: Array2::from_shape_vec((coords.len(), c), v2).expect("rows of equal width"),
        coords: coords.to_vec(),
    })
}
