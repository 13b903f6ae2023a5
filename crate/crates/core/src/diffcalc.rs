//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s together with
//! whatever forward context the backward pass needs. Calling
//! [`Graph::backward`] consumes the recording and returns the gradient of a
//! scalar loss with respect to every node that requires one.
//!
//! The primitive set is deliberately narrow: exactly what a 1-D convolutional
//! encoder, an MLP projector and the redundancy-reduction objective need, plus
//! a few scalar helpers used in tests. All arithmetic is `f64`, and matrix
//! products go through `ndarray`'s GEMM so that results are deterministic for a
//! given build.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("variable does not belong to the active recording")]
    ForeignVar,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero-sized dim in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Affine {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu {
        input: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
    CrossCorrelation {
        a: usize,
        b: usize,
        // Centered (or raw) inputs and their column norms.
        ya: Vec<f64>,
        yb: Vec<f64>,
        na: Vec<f64>,
        nb: Vec<f64>,
        eps: f64,
        center: bool,
    },
    BarlowLoss {
        input: usize,
        lambda: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// One forward recording. Build it, compute a scalar, call [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn gemm(
    alpha: f64,
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    beta: f64,
    c: &mut ArrayViewMut2<'_, f64>,
) {
    general_mat_mul(alpha, a, b, beta, c);
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view shape checked by caller")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view shape checked by caller")
}

/// Output length of a strided, zero-padded 1-D convolution, if it is at least 1.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
}

/// im2col over the whole batch: row `ci·K + k`, column `b·L_out + l`.
impl ConvGeom {
    fn width(&self) -> usize {
        self.batch * self.out_len
    }

    /// Output positions `l` whose tap `k` lands inside the signal, and the
    /// input index of the first one.
    fn valid_span(&self, k: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // first l with l·s + k ≥ p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // last l with l·s + k − p ≤ len − 1
        let hi = if self.len + p > k {
            ((self.len + p - k - 1) / s + 1).min(self.out_len)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * s + k).saturating_sub(p))
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = Vec::with_capacity(self.cin * self.kernel * self.width());
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let (lo, hi, start) = self.valid_span(k);
                for b in 0..self.batch {
                    let row_x = &x[(b * self.cin + ci) * self.len..][..self.len];
                    cols.extend(std::iter::repeat(0.0).take(lo));
                    cols.extend(row_x[start..].iter().step_by(self.stride).take(hi - lo));
                    cols.extend(std::iter::repeat(0.0).take(self.out_len - hi));
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let w = self.width();
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let (lo, hi, start) = self.valid_span(k);
                let row = &cols[(ci * self.kernel + k) * w..][..w];
                for b in 0..self.batch {
                    let src = &row[b * self.out_len + lo..b * self.out_len + hi];
                    let dst = &mut dx[(b * self.cin + ci) * self.len..][..self.len];
                    for (d, &g) in dst[start..].iter_mut().step_by(self.stride).zip(src) {
                        *d += g;
                    }
                }
            }
        }
    }

    /// Splits the batch into runs whose im2col buffer stays cache-sized.
    fn chunks(&self) -> impl Iterator<Item = (usize, ConvGeom)> + '_ {
        const TARGET: usize = 1 << 15;
        let per = (self.cin * self.kernel * self.out_len).max(1);
        let step = (TARGET / per).clamp(1, self.batch.max(1));
        (0..self.batch).step_by(step).map(move |b0| {
            (
                b0,
                ConvGeom {
                    batch: step.min(self.batch - b0),
                    ..*self
                },
            )
        })
    }

    fn from_channel_major(&self, cm: &[f64], out: &mut [f64]) {
        let w = self.width();
        for b in 0..self.batch {
            for co in 0..self.cout {
                out[(b * self.cout + co) * self.out_len..][..self.out_len]
                    .copy_from_slice(&cm[co * w + b * self.out_len..][..self.out_len]);
            }
        }
    }

    /// `[B, Cout, L]` to `[Cout, B·L]`.
    fn to_channel_major(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        let w = self.width();
        for b in 0..self.batch {
            for co in 0..self.cout {
                let src = &g[(b * self.cout + co) * self.out_len..][..self.out_len];
                out[co * w + b * self.out_len..][..self.out_len].copy_from_slice(src);
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a shared leaf without copying its buffer.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Strided cross-correlation over `[B, Cin, L]` with weight `[Cout, Cin, K]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let geom = {
            let x = &self.nodes[xi].value;
            let w = &self.nodes[wi].value;
            let b = &self.nodes[bi].value;
            if x.shape.len() != 3 {
                return Err(shape_err("conv1d", format!("input must be [B,Cin,L], got {:?}", x.shape)));
            }
            if w.shape.len() != 3 {
                return Err(shape_err(
                    "conv1d",
                    format!("weight must be [Cout,Cin,K], got {:?}", w.shape),
                ));
            }
            if w.shape[1] != x.shape[1] {
                return Err(shape_err(
                    "conv1d",
                    format!("input has Cin={} but weight expects Cin={}", x.shape[1], w.shape[1]),
                ));
            }
            if b.shape != [w.shape[0]] {
                return Err(shape_err(
                    "conv1d",
                    format!("bias shape {:?} does not match Cout={}", b.shape, w.shape[0]),
                ));
            }
            if stride == 0 {
                return Err(DiffError::Invalid("conv1d stride must be positive".into()));
            }
            let out_len = conv_output_len(x.shape[2], w.shape[2], stride, padding).ok_or_else(|| {
                shape_err(
                    "conv1d",
                    format!(
                        "L={} with padding {} is shorter than kernel K={}",
                        x.shape[2], padding, w.shape[2]
                    ),
                )
            })?;
            ConvGeom {
                batch: x.shape[0],
                cin: x.shape[1],
                len: x.shape[2],
                cout: w.shape[0],
                kernel: w.shape[2],
                out_len,
                stride,
                padding,
            }
        };
        let x = &self.nodes[xi].value.data;
        let w = &self.nodes[wi].value.data;
        let bias_v = &self.nodes[bi].value.data;
        let ck = geom.cin * geom.kernel;
        let plane = geom.cout * geom.out_len;
        let mut out = vec![0.0; geom.batch * plane];
        let wv = view2(w, geom.cout, ck);
        for (b0, sub) in geom.chunks() {
            let width = sub.width();
            let cols = sub.im2col(&x[b0 * geom.cin * geom.len..][..sub.batch * geom.cin * geom.len]);
            let mut cm = vec![0.0; geom.cout * width];
            for (co, row) in cm.chunks_mut(width).enumerate() {
                row.fill(bias_v[co]);
            }
            gemm(1.0, &wv, &view2(&cols, ck, width), 1.0, &mut view2_mut(&mut cm, geom.cout, width));
            sub.from_channel_major(&cm, &mut out[b0 * plane..][..sub.batch * plane]);
        }
        let rg = self.rg(&[xi, wi, bi]);
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.out_len],
            data: out,
        };
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                input: xi,
                weight: wi,
                bias: bi,
                stride,
                padding,
            },
        ))
    }

    /// `input · Wᵀ + b` for input `[B, Din]`, `W` `[Dout, Din]`, `b` `[Dout]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        if x.shape.len() != 2 || w.shape.len() != 2 {
            return Err(shape_err(
                "affine",
                format!("input {:?} and weight {:?} must both be 2-D", x.shape, w.shape),
            ));
        }
        let (batch, din) = (x.shape[0], x.shape[1]);
        let dout = w.shape[0];
        if w.shape[1] != din {
            return Err(shape_err(
                "affine",
                format!("input has Din={din} but weight is {:?}", w.shape),
            ));
        }
        if b.shape != [dout] {
            return Err(shape_err(
                "affine",
                format!("bias shape {:?} does not match Dout={dout}", b.shape),
            ));
        }
        let mut out = Vec::with_capacity(batch * dout);
        for _ in 0..batch {
            out.extend_from_slice(&b.data);
        }
        gemm(
            1.0,
            &view2(&x.data, batch, din),
            &view2(&w.data, dout, din).t(),
            1.0,
            &mut view2_mut(&mut out, batch, dout),
        );
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, dout],
                data: out,
            },
            rg,
            Op::Affine {
                input: xi,
                weight: wi,
                bias: bi,
            },
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(value, rg, Op::Relu { input: xi }))
    }

    /// Mean over the last axis of `[B, C, L]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        if x.shape.len() != 3 {
            return Err(shape_err("global_avg_pool", format!("expected [B,C,L], got {:?}", x.shape)));
        }
        let len = x.shape[2];
        let inv = 1.0 / len as f64;
        let data = x.data.chunks(len).map(|c| c.iter().sum::<f64>() * inv).collect();
        let value = Tensor {
            shape: vec![x.shape[0], x.shape[1]],
            data,
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input: xi }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.check(input)?;
        let value = self.nodes[xi].value.reshaped(shape)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, rg, Op::Reshape { input: xi }))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
        };
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, rg, Op::Add { a: ai, b: bi }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ai, bi)?;
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        };
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, rg, Op::Mul { a: ai, b: bi }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * factor).collect(),
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(value, rg, Op::Scale { input: xi, factor }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let s = self.nodes[xi].value.data.iter().sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input: xi }))
    }

    /// Batch cross-correlation of `a` `[B, Da]` and `b` `[B, Db]`:
    /// `C_kl = Σ_b a_bk b_bl / (‖a_·k‖ ‖b_·l‖ + eps)`, optionally on
    /// batch-mean-centered columns.
    pub fn cross_correlation(&mut self, a: Var, b: Var, eps: f64, center: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (za, zb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if za.shape.len() != 2 || zb.shape.len() != 2 || za.shape[0] != zb.shape[0] {
            return Err(shape_err(
                "cross_correlation",
                format!("expected [B,Da] and [B,Db], got {:?} and {:?}", za.shape, zb.shape),
            ));
        }
        let batch = za.shape[0];
        if batch < 2 {
            return Err(shape_err("cross_correlation", format!("batch size {batch} < 2")));
        }
        let (da, db) = (za.shape[1], zb.shape[1]);
        let prep = |data: &[f64], d: usize| -> (Vec<f64>, Vec<f64>) {
            let mut y = data.to_vec();
            if center {
                let mut mean = vec![0.0; d];
                for row in y.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= batch as f64;
                }
                for row in y.chunks_mut(d) {
                    for (v, m) in row.iter_mut().zip(&mean) {
                        *v -= m;
                    }
                }
            }
            let mut sq = vec![0.0; d];
            for row in y.chunks(d) {
                for (s, v) in sq.iter_mut().zip(row) {
                    *s += v * v;
                }
            }
            (y, sq.into_iter().map(f64::sqrt).collect())
        };
        let (ya, na) = prep(&za.data, da);
        let (yb, nb) = prep(&zb.data, db);
        let mut c = vec![0.0; da * db];
        gemm(
            1.0,
            &view2(&ya, batch, da).t(),
            &view2(&yb, batch, db),
            0.0,
            &mut view2_mut(&mut c, da, db),
        );
        for (k, row) in c.chunks_mut(db).enumerate() {
            for (l, v) in row.iter_mut().enumerate() {
                *v /= na[k] * nb[l] + eps;
            }
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(
            Tensor {
                shape: vec![da, db],
                data: c,
            },
            rg,
            Op::CrossCorrelation {
                a: ai,
                b: bi,
                ya,
                yb,
                na,
                nb,
                eps,
                center,
            },
        ))
    }

    /// `Σ_k (1 − C_kk)² + λ Σ_k Σ_{l≠k} C_kl²` for square `C`.
    pub fn barlow_loss(&mut self, input: Var, lambda: f64) -> Result<Var> {
        let ci = self.check(input)?;
        let c = &self.nodes[ci].value;
        if c.shape.len() != 2 || c.shape[0] != c.shape[1] {
            return Err(shape_err("barlow_loss", format!("C must be square, got {:?}", c.shape)));
        }
        let value = barlow_value(&c.data, c.shape[0], lambda);
        let rg = self.rg(&[ci]);
        Ok(self.push(Tensor::scalar(value), rg, Op::BarlowLoss { input: ci, lambda }))
    }

    /// Consumes the recording and returns `d loss / d node` for every node
    /// that requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(DiffError::NonScalar(lv.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            // interior gradients are not exposed, only leaves keep theirs
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = &self.nodes[input].value;
                let w = &self.nodes[weight].value;
                let geom = ConvGeom {
                    batch: x.shape[0],
                    cin: x.shape[1],
                    len: x.shape[2],
                    cout: w.shape[0],
                    kernel: w.shape[2],
                    out_len: node.value.shape[2],
                    stride,
                    padding,
                };
                let ck = geom.cin * geom.kernel;
                let plane = geom.cout * geom.out_len;
                if needs(bias) {
                    let gb = grad_buf(grads, bias, geom.cout);
                    for gbatch in g.chunks(plane) {
                        for (co, row) in gbatch.chunks(geom.out_len).enumerate() {
                            gb[co] += row.iter().sum::<f64>();
                        }
                    }
                }
                let want_w = needs(weight);
                let want_x = needs(input);
                if !want_w && !want_x {
                    return;
                }
                let mut dw = if want_w { vec![0.0; geom.cout * ck] } else { Vec::new() };
                let mut dx = if want_x { vec![0.0; x.data.len()] } else { Vec::new() };
                let wv = view2(&w.data, geom.cout, ck);
                let xplane = geom.cin * geom.len;
                for (b0, sub) in geom.chunks() {
                    let width = sub.width();
                    let gcm = sub.to_channel_major(&g[b0 * plane..][..sub.batch * plane]);
                    let gv = view2(&gcm, geom.cout, width);
                    if want_w {
                        let cols = sub.im2col(&x.data[b0 * xplane..][..sub.batch * xplane]);
                        gemm(
                            1.0,
                            &gv,
                            &view2(&cols, ck, width).t(),
                            1.0,
                            &mut view2_mut(&mut dw, geom.cout, ck),
                        );
                    }
                    if want_x {
                        let mut cols = vec![0.0; ck * width];
                        gemm(1.0, &wv.t(), &gv, 0.0, &mut view2_mut(&mut cols, ck, width));
                        sub.col2im_add(&cols, &mut dx[b0 * xplane..][..sub.batch * xplane]);
                    }
                }
                if want_w {
                    add_into(grads, weight, &dw);
                }
                if want_x {
                    add_into(grads, input, &dx);
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input].value;
                let w = &self.nodes[weight].value;
                let (batch, din) = (x.shape[0], x.shape[1]);
                let dout = w.shape[0];
                let gv = view2(g, batch, dout);
                if needs(bias) {
                    let gb = grad_buf(grads, bias, dout);
                    for row in g.chunks(dout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if needs(weight) {
                    let gw = grad_buf(grads, weight, dout * din);
                    gemm(
                        1.0,
                        &gv.t(),
                        &view2(&x.data, batch, din),
                        1.0,
                        &mut view2_mut(gw, dout, din),
                    );
                }
                if needs(input) {
                    let gx = grad_buf(grads, input, batch * din);
                    gemm(
                        1.0,
                        &gv,
                        &view2(&w.data, dout, din),
                        1.0,
                        &mut view2_mut(gx, batch, din),
                    );
                }
            }
            Op::Relu { input } => {
                if needs(input) {
                    let x = &self.nodes[input].value.data;
                    let gx = grad_buf(grads, input, x.len());
                    for ((a, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if needs(input) {
                    let x = &self.nodes[input].value;
                    let len = x.shape[2];
                    let inv = 1.0 / len as f64;
                    let gx = grad_buf(grads, input, x.data.len());
                    for (chunk, &gv) in gx.chunks_mut(len).zip(g) {
                        for a in chunk {
                            *a += gv * inv;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if needs(input) {
                    add_into(grads, input, g);
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    add_into(grads, a, g);
                }
                if needs(b) {
                    add_into(grads, b, g);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
                if needs(a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(p, q)| p * q).collect();
                    add_into(grads, a, &d);
                }
                if needs(b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(p, q)| p * q).collect();
                    add_into(grads, b, &d);
                }
            }
            Op::Scale { input, factor } => {
                if needs(input) {
                    let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    add_into(grads, input, &d);
                }
            }
            Op::Sum { input } => {
                if needs(input) {
                    let n = self.nodes[input].value.data.len();
                    let gx = grad_buf(grads, input, n);
                    for a in gx {
                        *a += g[0];
                    }
                }
            }
            Op::CrossCorrelation {
                a,
                b,
                ref ya,
                ref yb,
                ref na,
                ref nb,
                eps,
                center,
            } => {
                let (da, db) = (na.len(), nb.len());
                let batch = ya.len() / da;
                let c = &node.value.data;
                let mut ga = vec![0.0; da * db];
                let mut ra = vec![0.0; da];
                let mut rb = vec![0.0; db];
                for k in 0..da {
                    for l in 0..db {
                        let idx = k * db + l;
                        let den = na[k] * nb[l] + eps;
                        ga[idx] = g[idx] / den;
                        let gd = -g[idx] * c[idx] / den;
                        ra[k] += gd * nb[l];
                        rb[l] += gd * na[k];
                    }
                }
                let gav = view2(&ga, da, db);
                if needs(a) {
                    let mut dy = vec![0.0; batch * da];
                    gemm(
                        1.0,
                        &view2(yb, batch, db),
                        &gav.t(),
                        0.0,
                        &mut view2_mut(&mut dy, batch, da),
                    );
                    norm_term(&mut dy, ya, na, &ra);
                    if center {
                        uncenter(&mut dy, da);
                    }
                    add_into(grads, a, &dy);
                }
                if needs(b) {
                    let mut dy = vec![0.0; batch * db];
                    gemm(
                        1.0,
                        &view2(ya, batch, da),
                        &gav,
                        0.0,
                        &mut view2_mut(&mut dy, batch, db),
                    );
                    norm_term(&mut dy, yb, nb, &rb);
                    if center {
                        uncenter(&mut dy, db);
                    }
                    add_into(grads, b, &dy);
                }
            }
            Op::BarlowLoss { input, lambda } => {
                if needs(input) {
                    let c = &self.nodes[input].value.data;
                    let d = self.nodes[input].value.shape[0];
                    let gc = grad_buf(grads, input, c.len());
                    for k in 0..d {
                        for l in 0..d {
                            let idx = k * d + l;
                            gc[idx] += g[0]
                                * if k == l {
                                    -2.0 * (1.0 - c[idx])
                                } else {
                                    2.0 * lambda * c[idx]
                                };
                        }
                    }
                }
            }
        }
    }
}

/// Plain evaluation of the redundancy-reduction objective on a square matrix.
pub fn barlow_value(c: &[f64], d: usize, lambda: f64) -> f64 {
    let mut on = 0.0;
    let mut off = 0.0;
    for k in 0..d {
        for l in 0..d {
            let v = c[k * d + l];
            if k == l {
                on += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    on + lambda * off
}

// d‖y_·k‖ / dy_bk = y_bk / ‖y_·k‖, zero where the norm vanishes.
fn norm_term(dy: &mut [f64], y: &[f64], norms: &[f64], r: &[f64]) {
    let d = norms.len();
    for (drow, yrow) in dy.chunks_mut(d).zip(y.chunks(d)) {
        for k in 0..d {
            if norms[k] > 0.0 {
                drow[k] += r[k] * yrow[k] / norms[k];
            }
        }
    }
}

fn uncenter(dy: &mut [f64], d: usize) {
    let batch = dy.len() / d;
    let mut mean = vec![0.0; d];
    for row in dy.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= batch as f64;
    }
    for row in dy.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, d: &[f64]) {
    match &mut grads[idx] {
        Some(buf) => {
            for (a, v) in buf.iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not require one or is
    /// unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

/// Named trainable tensor with an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Ordered parameter collection. Order is the declared layer order and is
/// what checkpoints serialize.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_value(&mut self, idx: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape != value.shape {
            return Err(shape_err(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape, value.shape),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Records every parameter as a leaf of `graph`, in order.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf_shared(Arc::clone(&p.value), requires_grad))
            .collect()
    }

    /// Stores the gradients of `vars` (as returned by [`ParamStore::bind`]).
    /// Parameters unreachable from the loss get a zero gradient.
    pub fn set_grads(&mut self, grads: &mut Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape.clone())),
            );
        }
    }

    pub fn set_grad(&mut self, idx: usize, grad: Tensor) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape != grad.shape {
            return Err(shape_err(
                "set_grad",
                format!("`{}` is {:?}, grad is {:?}", p.name, p.value.shape, grad.shape),
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DiffError::Invalid(format!("bad Adam hyperparameters {self:?}")))
        }
    }
}

/// Adam moments for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Every parameter must hold a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(DiffError::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
            return Err(DiffError::MissingGrad(p.name.clone()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            let value = Arc::make_mut(&mut p.value);
            for (((x, &gi), mi), vi) in value.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(DiffError::Invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape.clone());
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}
