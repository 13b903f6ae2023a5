//! Shrinkage linear discriminant analysis and per-class accuracy.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("need more samples than classes (n = {n}, K = {k})")]
    TooFewSamples { n: usize, k: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("shrinkage {0} outside [0, 1]")]
    Shrinkage(f64),
    #[error("shrunk covariance is not positive definite (D = {0}); increase shrinkage")]
    Singular(usize),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub classes: Vec<usize>,
    /// Row `c` is the mean of class `classes[c]`.
    pub means: Vec<Vec<f64>>,
    /// Shrunk pooled covariance, row-major `D × D`.
    pub covariance: Vec<f64>,
    pub log_priors: Vec<f64>,
    /// `Σ⁻¹ μ_c` per class.
    pub coef: Vec<Vec<f64>>,
    /// `−½ μ_cᵀ Σ⁻¹ μ_c + log π_c` per class.
    pub intercept: Vec<f64>,
    pub shrinkage: f64,
}

impl LdaModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

/// Fits on the classes present in `y`.
pub fn lda_fit(x: ArrayView2<'_, f64>, y: &[usize], shrinkage: f64) -> Result<LdaModel> {
    let mut classes = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    lda_fit_classes(x, y, &classes, shrinkage)
}

/// Fits with an explicit class list; every listed class must have a sample.
pub fn lda_fit_classes(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    classes: &[usize],
    shrinkage: f64,
) -> Result<LdaModel> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(ClassifyError::Shape(format!("{n} rows but {} labels", y.len())));
    }
    if d == 0 {
        return Err(ClassifyError::Shape("zero features".into()));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(ClassifyError::Shrinkage(shrinkage));
    }
    let k = classes.len();
    if k < 2 {
        return Err(ClassifyError::TooFewClasses(k));
    }
    if n <= k {
        return Err(ClassifyError::TooFewSamples { n, k });
    }
    let index_of = |label: usize| classes.binary_search(&label).ok();
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    if sorted != classes {
        return Err(ClassifyError::Shape("class list must be sorted and unique".into()));
    }
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = index_of(label)
            .ok_or_else(|| ClassifyError::Shape(format!("label {label} not in class list")))?;
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(ClassifyError::EmptyClass(classes[c]));
    }
    for (m, &cnt) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= cnt as f64;
        }
    }
    // pooled within-class scatter: Σ_rows (x − μ_y)(x − μ_y)ᵀ
    let mut centered = x.to_owned();
    for (mut row, &label) in centered.rows_mut().into_iter().zip(y) {
        let m = &means[index_of(label).unwrap()];
        for (v, mu) in row.iter_mut().zip(m) {
            *v -= mu;
        }
    }
    let mut sigma = centered.t().dot(&centered);
    sigma /= (n - k) as f64;
    let trace = sigma.diag().sum();
    let mut shrunk = sigma.mapv(|v| (1.0 - shrinkage) * v);
    for i in 0..d {
        shrunk[[i, i]] += shrinkage * trace / d as f64;
    }
    // symmetrize against round-off before factoring
    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (shrunk[[i, j]] + shrunk[[j, i]]));
    let chol = sym.clone().cholesky().ok_or(ClassifyError::Singular(d))?;
    // nalgebra accepts zero pivots; reject numerically rank-deficient factors
    let max_diag = (0..d).map(|i| sym[(i, i)]).fold(0.0_f64, f64::max);
    let l = chol.l_dirty();
    if (0..d).any(|i| l[(i, i)] * l[(i, i)] <= 1e-13 * max_diag) {
        return Err(ClassifyError::Singular(d));
    }
    let mut coef = Vec::with_capacity(k);
    let mut intercept = Vec::with_capacity(k);
    let log_priors: Vec<f64> = counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect();
    for (m, lp) in means.iter().zip(&log_priors) {
        let mu = DVector::from_column_slice(m);
        let w = chol.solve(&mu);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::Singular(d));
        }
        intercept.push(-0.5 * mu.dot(&w) + lp);
        coef.push(w.iter().copied().collect());
    }
    Ok(LdaModel {
        classes: classes.to_vec(),
        means,
        covariance: sym.transpose().iter().copied().collect(),
        log_priors,
        coef,
        intercept,
        shrinkage,
    })
}

/// `δ_c(x)` for every row and class, `[m × K]`.
pub fn lda_scores(model: &LdaModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let d = model.dim();
    if x.ncols() != d {
        return Err(ClassifyError::Shape(format!(
            "model has {d} features, input has {}",
            x.ncols()
        )));
    }
    let k = model.classes.len();
    let w = Array2::from_shape_fn((d, k), |(i, c)| model.coef[c][i]);
    let mut scores = x.dot(&w);
    for mut row in scores.axis_iter_mut(Axis(0)) {
        for (s, b) in row.iter_mut().zip(&model.intercept) {
            *s += b;
        }
    }
    Ok(scores)
}

/// Highest-scoring class label per row; ties go to the lowest class index.
pub fn lda_predict(model: &LdaModel, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let scores = lda_scores(model, x)?;
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| model.classes[argmax(row.iter().copied())])
        .collect())
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Unweighted mean over the classes of `y_true` of within-class accuracy.
pub fn mean_class_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let mut classes = y_true.to_vec();
    classes.sort_unstable();
    classes.dedup();
    mean_class_accuracy_over(y_true, y_pred, &classes)
}

/// As [`mean_class_accuracy`] over an explicit class list; a listed class
/// with no true samples is an error.
pub fn mean_class_accuracy_over(y_true: &[usize], y_pred: &[usize], classes: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(ClassifyError::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if classes.is_empty() {
        return Err(ClassifyError::TooFewClasses(0));
    }
    let mut total = 0.0;
    for &c in classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t == c {
                n += 1;
                hit += usize::from(p == c);
            }
        }
        if n == 0 {
            return Err(ClassifyError::EmptyClass(c));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / classes.len() as f64)
}

pub fn overall_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(ClassifyError::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let hit = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hit as f64 / y_true.len() as f64)
}
