//! Encoder, projector, redundancy-reduction objective and pretraining loop.
//!
//! The encoder treats each spectrum as a one-channel 1-D signal and runs five
//! strided convolutions (ReLU after each) followed by a global average pool;
//! its output `H` is the representation used downstream. The projector is a
//! two-layer MLP whose output `Z` only feeds the loss.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcalc::{
    barlow_value, conv_output_len, AdamConfig, AdamState, DiffError, Graph, ParamStore, Tensor, Var,
};
use crate::pairing::{
    assemble_batch, sample_epoch, BranchPipelines, BranchRngs, CubePair, PairError, PairStrategy,
};
use crate::speccube::{valid_pair_coordinates, CubeError, Standardizer};
use crate::synthgen::stream_rng;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"\x89BTW\r\n\x1a\n";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const CONV_LAYERS: usize = 5;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SslError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 256],
            kernel: 7,
            stride: 2,
            padding: 3,
        }
    }
}

impl EncoderConfig {
    pub fn representation_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Signal length after each layer, or an error naming the layer that collapses.
    pub fn layer_lengths(&self, bands: usize) -> Result<Vec<usize>> {
        if self.channels.len() != CONV_LAYERS {
            return Err(SslError::Config(format!(
                "encoder needs exactly {CONV_LAYERS} conv layers, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.kernel == 0 || self.stride == 0 {
            return Err(SslError::Config("encoder widths, kernel and stride must be positive".into()));
        }
        let mut len = bands;
        let mut out = Vec::with_capacity(CONV_LAYERS);
        for layer in 0..CONV_LAYERS {
            len = conv_output_len(len, self.kernel, self.stride, self.padding).ok_or_else(|| {
                SslError::Config(format!(
                    "{bands} bands are too few: conv layer {} gets length {len} < kernel {}",
                    layer + 1,
                    self.kernel
                ))
            })?;
            out.push(len);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: 2056,
            output: 2056,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Subtract the batch mean of every column before correlating.
    pub mean_center: bool,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-3,
            mean_center: false,
            eps: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub batch_size: usize,
    /// Upper bound on pairs drawn per epoch; all valid coordinates when unset.
    pub max_pairs_per_epoch: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epochs: 30,
            batch_size: 256,
            max_pairs_per_epoch: None,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// Plain-value cross-correlation of two `[B, D]` matrices.
pub fn cross_correlation(
    z1: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
    eps: f64,
    mean_center: bool,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let a = g.constant(to_tensor(z1));
    let b = g.constant(to_tensor(z2));
    let c = g.cross_correlation(a, b, eps, mean_center)?;
    let v = g.value(c)?;
    Ok(Array2::from_shape_vec((v.shape()[0], v.shape()[1]), v.data().to_vec()).expect("square"))
}

/// `Σ_k (1 − C_kk)² + λ Σ_{k≠l} C_kl²`.
pub fn barlow_loss(c: ArrayView2<'_, f64>, lambda: f64) -> Result<f64> {
    let (r, k) = c.dim();
    if r != k {
        return Err(SslError::Config(format!("correlation matrix must be square, got {r}×{k}")));
    }
    let data: Vec<f64> = c.iter().copied().collect();
    Ok(barlow_value(&data, r, lambda))
}

fn to_tensor(m: ArrayView2<'_, f64>) -> Tensor {
    let (r, c) = m.dim();
    Tensor::new(vec![r, c], m.iter().copied().collect()).expect("non-empty matrix")
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            std * e
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Encoder and projector weights, plus the input standardizer.
#[derive(Clone, Debug)]
pub struct BarlowTwinsModel {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub bands: usize,
    pub params: ParamStore,
    pub input_norm: Option<Standardizer>,
}

impl BarlowTwinsModel {
    /// He-normal initialization, zero biases.
    pub fn new(
        encoder: EncoderConfig,
        projector: ProjectorConfig,
        bands: usize,
        input_norm: Option<Standardizer>,
        seed: u64,
    ) -> Result<Self> {
        encoder.layer_lengths(bands)?;
        if projector.hidden == 0 || projector.output == 0 {
            return Err(SslError::Config("projector widths must be positive".into()));
        }
        if let Some(s) = &input_norm {
            if s.width() != bands {
                return Err(SslError::Config(format!(
                    "standardizer has {} bands, model has {bands}",
                    s.width()
                )));
            }
        }
        let mut rng = stream_rng(seed, 200);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (l, &cout) in encoder.channels.iter().enumerate() {
            let fan_in = (cin * encoder.kernel) as f64;
            params.push(
                format!("conv{l}.weight"),
                normal_tensor(vec![cout, cin, encoder.kernel], (2.0 / fan_in).sqrt(), &mut rng),
            );
            params.push(format!("conv{l}.bias"), Tensor::zeros(vec![cout]));
            cin = cout;
        }
        let dh = encoder.representation_dim();
        params.push(
            "proj0.weight",
            normal_tensor(vec![projector.hidden, dh], (2.0 / dh as f64).sqrt(), &mut rng),
        );
        params.push("proj0.bias", Tensor::zeros(vec![projector.hidden]));
        params.push(
            "proj1.weight",
            normal_tensor(
                vec![projector.output, projector.hidden],
                (1.0 / projector.hidden as f64).sqrt(),
                &mut rng,
            ),
        );
        params.push("proj1.bias", Tensor::zeros(vec![projector.output]));
        Ok(Self {
            encoder,
            projector,
            bands,
            params,
            input_norm,
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.representation_dim()
    }

    fn input_tensor(&self, batch: ArrayView2<'_, f64>) -> Result<Tensor> {
        let (b, c) = batch.dim();
        if c != self.bands {
            return Err(SslError::Config(format!(
                "spectra have {c} bands, model expects {}",
                self.bands
            )));
        }
        if b == 0 {
            return Err(SslError::Config("empty batch".into()));
        }
        let mut data: Vec<f64> = batch.iter().copied().collect();
        if let Some(norm) = &self.input_norm {
            for row in data.chunks_mut(c) {
                norm.apply_row(row);
            }
        }
        Ok(Tensor::new(vec![b, 1, c], data)?)
    }

    /// Records the encoder on `graph`; `vars` are this model's bound params.
    pub fn encode_graph(&self, graph: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..CONV_LAYERS {
            h = graph.conv1d(h, vars[2 * l], vars[2 * l + 1], self.encoder.stride, self.encoder.padding)?;
            h = graph.relu(h)?;
        }
        Ok(graph.global_avg_pool(h)?)
    }

    pub fn project_graph(&self, graph: &mut Graph, vars: &[Var], h: Var) -> Result<Var> {
        let o = 2 * CONV_LAYERS;
        let hidden = graph.affine(h, vars[o], vars[o + 1])?;
        let hidden = graph.relu(hidden)?;
        Ok(graph.affine(hidden, vars[o + 2], vars[o + 3])?)
    }

    /// Representation `H` for raw spectra `[B, C]`.
    pub fn encode(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(self.input_tensor(batch)?);
        let h = self.encode_graph(&mut g, &vars, x)?;
        Ok(to_array(g.value(h)?))
    }

    /// Projector output `Z` for representations `[B, D_H]`.
    pub fn project(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.representation_dim() {
            return Err(SslError::Config(format!(
                "representation has width {}, projector expects {}",
                h.ncols(),
                self.representation_dim()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(to_tensor(h));
        let z = self.project_graph(&mut g, &vars, x)?;
        Ok(to_array(g.value(z)?))
    }

    /// Loss on one pair batch and the gradient of every parameter, stored in `self.params`.
    pub fn loss_and_grads(
        &mut self,
        view1: ArrayView2<'_, f64>,
        view2: ArrayView2<'_, f64>,
        loss: &LossConfig,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let x1 = g.constant(self.input_tensor(view1)?);
        let x2 = g.constant(self.input_tensor(view2)?);
        let h1 = self.encode_graph(&mut g, &vars, x1)?;
        let h2 = self.encode_graph(&mut g, &vars, x2)?;
        let z1 = self.project_graph(&mut g, &vars, h1)?;
        let z2 = self.project_graph(&mut g, &vars, h2)?;
        let c = g.cross_correlation(z1, z2, loss.eps, loss.mean_center)?;
        let l = g.barlow_loss(c, loss.lambda)?;
        let value = g.value(l)?.data()[0];
        let mut grads = g.backward(l)?;
        self.params.set_grads(&mut grads, &vars);
        Ok(value)
    }

    /// Loss only, without recording gradients.
    pub fn loss(&self, view1: ArrayView2<'_, f64>, view2: ArrayView2<'_, f64>, loss: &LossConfig) -> Result<f64> {
        let z1 = self.project(self.encode(view1)?.view())?;
        let z2 = self.project(self.encode(view2)?.view())?;
        let c = cross_correlation(z1.view(), z2.view(), loss.eps, loss.mean_center)?;
        barlow_loss(c.view(), loss.lambda)
    }
}

fn to_array(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("2-D tensor")
}

/// Frozen model state after an epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub model: BarlowTwinsModel,
}

/// Everything one pretraining run mutates, advanced one epoch at a time.
pub struct Pretrainer<'a> {
    cubes: CubePair<'a>,
    coords: Vec<(usize, usize)>,
    strategy: PairStrategy,
    pipelines: BranchPipelines,
    config: SslConfig,
    model: BarlowTwinsModel,
    adam: AdamState,
    batch_rng: ChaCha8Rng,
    branch_rngs: BranchRngs,
    epoch: usize,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        cubes: CubePair<'a>,
        strategy: PairStrategy,
        pipelines: BranchPipelines,
        input_norm: Option<Standardizer>,
        config: SslConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.train.batch_size < 2 {
            return Err(SslError::Config(format!(
                "batch size must be at least 2, got {}",
                config.train.batch_size
            )));
        }
        let coords = match strategy {
            PairStrategy::InterDate => valid_pair_coordinates(cubes.t1, cubes.t2)?,
            PairStrategy::SameView => (0..cubes.t1.rows())
                .flat_map(|i| (0..cubes.t1.cols()).map(move |j| (i, j)))
                .filter(|&(i, j)| cubes.t1.is_valid(i, j))
                .collect(),
        };
        let model = BarlowTwinsModel::new(
            config.encoder.clone(),
            config.projector.clone(),
            cubes.t1.channels(),
            input_norm,
            seed,
        )?;
        let adam = AdamState::new(config.train.adam, &model.params)?;
        Ok(Self {
            cubes,
            coords,
            strategy,
            pipelines,
            config,
            model,
            adam,
            batch_rng: stream_rng(seed, 300),
            branch_rngs: BranchRngs::from_seed(seed),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &BarlowTwinsModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn coordinates(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// One pass over the epoch's batches; returns the batch-size-weighted mean loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let batches = sample_epoch(
            &self.coords,
            self.config.train.batch_size,
            self.config.train.max_pairs_per_epoch,
            &mut self.batch_rng,
        )?;
        let mut total = 0.0;
        let mut count = 0usize;
        for coords in &batches {
            let batch = assemble_batch(
                coords,
                &self.cubes,
                self.strategy,
                &self.pipelines,
                &mut self.branch_rngs,
            )?;
            let loss = self
                .model
                .loss_and_grads(batch.view1.view(), batch.view2.view(), &self.config.loss)?;
            self.adam.step(&mut self.model.params)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }

    /// Trains one epoch and snapshots the weights.
    pub fn next_checkpoint(&mut self) -> Result<Checkpoint> {
        let train_loss = self.train_epoch()?;
        Ok(Checkpoint {
            epoch: self.epoch,
            train_loss,
            model: self.model.clone(),
        })
    }
}

/// `config.train.n_epochs` epochs, one checkpoint per epoch.
pub fn pretrain(
    cubes: CubePair<'_>,
    strategy: PairStrategy,
    pipelines: BranchPipelines,
    input_norm: Option<Standardizer>,
    config: &SslConfig,
    seed: u64,
) -> Result<Vec<Checkpoint>> {
    let n = config.train.n_epochs;
    let mut trainer = Pretrainer::new(cubes, strategy, pipelines, input_norm, config.clone(), seed)?;
    (0..n).map(|_| trainer.next_checkpoint()).collect()
}

pub const EMBED_CHUNK: usize = 512;

/// Encoder output for every row of `spectra`, with frozen weights.
pub fn embed_dataset(checkpoint: &Checkpoint, spectra: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    embed_with(&checkpoint.model, spectra, EMBED_CHUNK)
}

pub fn embed_with(model: &BarlowTwinsModel, spectra: ArrayView2<'_, f64>, chunk: usize) -> Result<Array2<f64>> {
    let n = spectra.nrows();
    let dh = model.representation_dim();
    let mut out = Array2::zeros((n, dh));
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let h = model.encode(spectra.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&h);
        start = end;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    epoch: usize,
    bands: usize,
    encoder: EncoderConfig,
    projector: ProjectorConfig,
    params: Vec<(String, Vec<usize>)>,
    standardized: bool,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let header = serde_json::to_vec(&CheckpointHeader {
        epoch: ckpt.epoch,
        bands: m.bands,
        encoder: m.encoder.clone(),
        projector: m.projector.clone(),
        params: m.params.iter().map(|p| (p.name.clone(), p.value().shape().to_vec())).collect(),
        standardized: m.input_norm.is_some(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&ckpt.train_loss.to_le_bytes());
    let mut put = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in m.params.iter() {
        put(p.value().data());
    }
    if let Some(s) = &m.input_norm {
        put(&s.mean);
        put(&s.std);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| SslError::Format(m.to_string());
    if bytes.len() < 14 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic; not a checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CHECKPOINT_VERSION {
        return Err(SslError::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let header_end = 14usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| SslError::Format(format!("bad header: {e}")))?;
    let mut cursor = header_end;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let end = n
            .checked_mul(8)
            .and_then(|b| cursor.checked_add(b))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated weights"))?;
        let v = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
        Ok(v)
    };
    let train_loss = take(1)?[0];
    let mut model = BarlowTwinsModel::new(
        header.encoder.clone(),
        header.projector.clone(),
        header.bands,
        None,
        0,
    )?;
    if model.params.len() != header.params.len() {
        return Err(fmt("parameter count does not match configuration"));
    }
    for (idx, (name, shape)) in header.params.iter().enumerate() {
        let expected = model.params.get(idx);
        if &expected.name != name || expected.value().shape() != shape.as_slice() {
            return Err(SslError::Format(format!("unexpected parameter `{name}` {shape:?}")));
        }
        let n = shape.iter().product();
        model.params.set_value(idx, Tensor::new(shape.clone(), take(n)?)?)?;
    }
    if header.standardized {
        let mean = take(header.bands)?;
        let std = take(header.bands)?;
        model.input_norm = Some(Standardizer { mean, std });
    }
    if cursor != bytes.len() {
        return Err(fmt("trailing bytes after weights"));
    }
    Ok(Checkpoint {
        epoch: header.epoch,
        train_loss,
        model,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|source| SslError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| SslError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
