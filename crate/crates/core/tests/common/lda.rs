//! Brute-force linear discriminant scores, independent of the library fit.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Discriminant scores computed from scratch: class means, pooled scatter
/// over n − K, shrinkage toward the scaled identity, empirical priors.
pub fn oracle_scores(x: ArrayView2<'_, f64>, y: &[usize], alpha: f64, query: ArrayView2<'_, f64>) -> (Vec<usize>, Vec<Vec<f64>>) {
    let (n, d) = x.dim();
    let mut classes = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &label) in y.iter().enumerate() {
        let c = classes.iter().position(|&q| q == label).unwrap();
        counts[c] += 1;
        for j in 0..d {
            means[c][j] += x[[r, j]];
        }
    }
    for c in 0..k {
        for j in 0..d {
            means[c][j] /= counts[c] as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (r, &label) in y.iter().enumerate() {
        let c = classes.iter().position(|&q| q == label).unwrap();
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[[r, i]] - means[c][i]) * (x[[r, j]] - means[c][j]);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum::<f64>() / (n - k) as f64;
    for i in 0..d {
        for j in 0..d {
            cov[i][j] = (1.0 - alpha) * cov[i][j] / (n - k) as f64;
        }
        cov[i][i] += alpha * trace / d as f64;
    }
    let scores = query
        .rows()
        .into_iter()
        .map(|q| {
            (0..k)
                .map(|c| {
                    let w = solve(cov.clone(), means[c].clone());
                    let lin: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                    let quad: f64 = means[c].iter().zip(&w).map(|(a, b)| a * b).sum();
                    lin - 0.5 * quad + (counts[c] as f64 / n as f64).ln()
                })
                .collect()
        })
        .collect();
    (classes, scores)
}

pub fn margin(row: &[f64]) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted.get(1).copied().unwrap_or(f64::NEG_INFINITY)
}

/// Label of the top-scoring class per query row, or `None` on a near-tie.
pub fn oracle_predict(classes: &[usize], scores: &[Vec<f64>]) -> Vec<Option<usize>> {
    scores
        .iter()
        .map(|row| {
            (margin(row) >= 1e-9).then(|| {
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                classes[best]
            })
        })
        .collect()
}

/// Random instance with `n ≤ 50`, `D ≤ 6`, `K ≤ 4`: training rows, labels
/// covering every class, query rows and a shrinkage value.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, Array2<f64>, f64) {
    let k = rng.gen_range(2..=4);
    let d = rng.gen_range(1..=6);
    let n = rng.gen_range(2 * k..=50);
    let mut y: Vec<usize> = (0..k).collect();
    y.extend((k..n).map(|_| rng.gen_range(0..k)));
    let x = Array2::from_shape_fn((n, d), |(r, j)| rng.gen_range(-3.0..3.0) + if j == 0 { 2.0 * y[r] as f64 } else { 0.0 });
    let q = Array2::from_shape_fn((10, d), |_| rng.gen_range(-4.0..4.0));
    let alpha = [1e-3, 0.05, 0.3, 1.0][rng.gen_range(0..4)];
    (x, y, q, alpha)
}
