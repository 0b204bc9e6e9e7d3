//! Identifiability scores and the exact discrete mutual-information oracle.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    /// Mean over target dimensions, in percent.
    pub r2: f64,
    pub per_dim: Vec<f64>,
    /// The design was rank deficient and a ridge penalty was added.
    pub regularized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    /// Mean matched absolute correlation, in percent.
    pub mcc: f64,
    /// `permutation[j]` is the learned column matched to true column `j`.
    pub permutation: Vec<usize>,
    /// Matched absolute correlations per true column.
    pub matched: Vec<f64>,
    /// Learned columns with zero variance (their correlations are scored 0).
    pub zero_variance: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub r2: f64,
    pub mcc: f64,
    pub per_dimension: Vec<f64>,
    pub permutation: Vec<usize>,
    pub r2_regularized: bool,
    pub zero_variance: Vec<usize>,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Affine least-squares fit from `learned` to `true_latents`; `100 (1 - SSE/SST)`
/// averaged over the target columns.
pub fn r2_report(learned: &Matrix, true_latents: &Matrix) -> Result<R2Report> {
    let (n, dl) = learned.shape();
    let (nt, d) = true_latents.shape();
    if n != nt {
        return dim_err(format!("{n} learned rows vs {nt} true rows"));
    }
    if n <= dl + 1 {
        return Err(Error::InvalidArgument(format!("need n > d + 1, got n = {n}, d = {dl}")));
    }
    learned.ensure_finite("learned representation")?;
    true_latents.ensure_finite("true latents")?;

    let mut x = DMatrix::<f64>::zeros(n, dl + 1);
    for i in 0..n {
        for j in 0..dl {
            x[(i, j)] = learned[(i, j)];
        }
        x[(i, dl)] = 1.0;
    }
    let y = to_dmatrix(true_latents);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank_deficient = !(smin > smax * 1e-10);
    let beta = if rank_deficient {
        let xtx = x.transpose() * &x;
        let lambda = 1e-8 * smax.max(1.0).powi(2);
        let a = xtx + DMatrix::<f64>::identity(dl + 1, dl + 1) * lambda;
        a.cholesky()
            .ok_or_else(|| Error::NonFinite("ridge system is not positive definite".into()))?
            .solve(&(x.transpose() * &y))
    } else {
        svd.solve(&y, 0.0).map_err(|e| Error::NonFinite(e.to_string()))?
    };
    let pred = &x * beta;
    let mut per_dim = Vec::with_capacity(d);
    for j in 0..d {
        let col = y.column(j);
        let mean = col.mean();
        let sst: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sse: f64 = col.iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        per_dim.push(if sst > 0.0 { 100.0 * (1.0 - sse / sst) } else { 0.0 });
    }
    Ok(R2Report {
        r2: per_dim.iter().sum::<f64>() / d as f64,
        per_dim,
        regularized: rank_deficient,
    })
}

pub fn r2_score(learned: &Matrix, true_latents: &Matrix) -> Result<f64> {
    Ok(r2_report(learned, true_latents)?.r2)
}

/// Ranks with ties averaged, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = r;
        }
        i = j + 1;
    }
    out
}

/// Standardized columns; `None` for zero-variance columns.
fn standardized_columns(m: &Matrix, kind: Correlation) -> Vec<Option<Vec<f64>>> {
    (0..m.cols())
        .map(|j| {
            let mut col: Vec<f64> = (0..m.rows()).map(|i| m[(i, j)]).collect();
            if kind == Correlation::Spearman {
                col = ranks(&col);
            }
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var > 0.0 {
                let sd = var.sqrt();
                Some(col.into_iter().map(|v| (v - mean) / sd).collect())
            } else {
                None
            }
        })
        .collect()
}

/// `|corr(learned_i, true_j)|`, with `0` for zero-variance columns.
pub fn abs_correlation_matrix(learned: &Matrix, true_latents: &Matrix, kind: Correlation) -> Result<(Matrix, Vec<usize>)> {
    if learned.rows() != true_latents.rows() {
        return dim_err(format!("{} vs {} rows", learned.rows(), true_latents.rows()));
    }
    let n = learned.rows() as f64;
    let a = standardized_columns(learned, kind);
    let b = standardized_columns(true_latents, kind);
    let zero: Vec<usize> = a.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i).collect();
    let c = Matrix::from_fn(a.len(), b.len(), |i, j| match (&a[i], &b[j]) {
        (Some(x), Some(y)) => (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n).abs().min(1.0),
        _ => 0.0,
    });
    Ok((c, zero))
}

/// Minimum-cost perfect matching on a square cost matrix.
/// Returns `assignment[row] = column`.
pub fn hungarian_min(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return dim_err(format!("assignment needs a square matrix, got {:?}", cost.shape()));
    }
    cost.ensure_finite("assignment cost")?;
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn mcc_report(learned: &Matrix, true_latents: &Matrix, kind: Correlation) -> Result<MccReport> {
    let (n, d) = true_latents.shape();
    if learned.shape() != (n, d) {
        return dim_err(format!("learned {:?} vs true {:?}", learned.shape(), true_latents.shape()));
    }
    if n <= d + 1 {
        return Err(Error::InvalidArgument(format!("need n > d + 1, got n = {n}, d = {d}")));
    }
    learned.ensure_finite("learned representation")?;
    true_latents.ensure_finite("true latents")?;
    let (c, zero_variance) = abs_correlation_matrix(learned, true_latents, kind)?;
    // rows: true columns, columns: learned columns
    let cost = Matrix::from_fn(d, d, |j, i| -c[(i, j)]);
    let permutation = hungarian_min(&cost)?;
    let matched: Vec<f64> = permutation.iter().enumerate().map(|(j, &i)| c[(i, j)]).collect();
    Ok(MccReport {
        mcc: 100.0 * matched.iter().sum::<f64>() / d as f64,
        permutation,
        matched,
        zero_variance,
    })
}

pub fn mcc_score(learned: &Matrix, true_latents: &Matrix) -> Result<f64> {
    Ok(mcc_report(learned, true_latents, Correlation::Pearson)?.mcc)
}

pub fn score_report(learned: &Matrix, true_latents: &Matrix, kind: Correlation) -> Result<ScoreReport> {
    let r2 = r2_report(learned, true_latents)?;
    let mcc = mcc_report(learned, true_latents, kind)?;
    Ok(ScoreReport {
        r2: r2.r2,
        mcc: mcc.mcc,
        per_dimension: mcc.matched,
        permutation: mcc.permutation,
        r2_regularized: r2.regularized,
        zero_variance: mcc.zero_variance,
    })
}

fn check_pmf(joint: &Matrix) -> Result<()> {
    if joint.is_empty() {
        return Err(Error::Empty("joint pmf".into()));
    }
    if joint.as_slice().iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("joint pmf has a negative or non-finite entry".into()));
    }
    let s = joint.sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("joint pmf sums to {s}")));
    }
    Ok(())
}

fn marginals(joint: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let rows = joint.row_iter().map(|r| r.iter().sum()).collect();
    let cols = joint.column_sums().into_vec();
    (rows, cols)
}

/// `sum_ij p(i, j) log(p(i, j) / (p(i) p(j)))` with `0 log 0 = 0`.
pub fn exact_mi_discrete(joint: &Matrix) -> Result<f64> {
    check_pmf(joint)?;
    let (pr, pc) = marginals(joint);
    let mut mi = 0.0;
    for i in 0..joint.rows() {
        for j in 0..joint.cols() {
            let p = joint[(i, j)];
            if p > 0.0 {
                mi += p * (p / (pr[i] * pc[j])).ln();
            }
        }
    }
    Ok(mi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErGap {
    pub mi: f64,
    /// `H(W2) + E[log q(W2 | W1)]`; `-inf` when `q` misses support of `p`.
    pub er: f64,
    pub gap: f64,
    /// `E_{W1}[KL(p(. | W1) || q(. | W1))]`, computed independently of `gap`.
    pub avg_kl: f64,
}

pub fn er_gap_report(joint: &Matrix, recon: &Matrix) -> Result<ErGap> {
    check_pmf(joint)?;
    if recon.shape() != joint.shape() {
        return dim_err(format!("recon {:?} vs joint {:?}", recon.shape(), joint.shape()));
    }
    for (i, r) in recon.row_iter().enumerate() {
        if r.iter().any(|&q| !(q >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("reconstruction row {i} is not a pmf")));
        }
    }
    let mi = exact_mi_discrete(joint)?;
    let (pr, pc) = marginals(joint);
    let h2 = -pc.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    let mut rec = 0.0;
    let mut avg_kl = 0.0;
    for i in 0..joint.rows() {
        for j in 0..joint.cols() {
            let p = joint[(i, j)];
            if p > 0.0 {
                let q = recon[(i, j)];
                if q == 0.0 {
                    rec = f64::NEG_INFINITY;
                    avg_kl = f64::INFINITY;
                } else {
                    rec += p * q.ln();
                    avg_kl += p * (p / pr[i] / q).ln();
                }
            }
        }
    }
    let er = h2 + rec;
    Ok(ErGap { mi, er, gap: mi - er, avg_kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, d: usize, seed: u64) -> Matrix {
        let mut x = seed.wrapping_add(0x9E3779B97F4A7C15);
        Matrix::from_fn(n, d, |_, _| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn r2_identity_and_affine() {
        let z = pseudo(200, 3, 1);
        assert!((r2_score(&z, &z).unwrap() - 100.0).abs() < 1e-9);
        let a = Matrix::from_rows(&[[2.0, 0.5, 0.0], [-1.0, 1.0, 0.3], [0.2, 0.0, 1.5]]).unwrap();
        let learned = Matrix::from_fn(200, 3, |i, j| z.matmul(&a)[(i, j)] + [1.0, -2.0, 0.5][j]);
        assert!((r2_score(&learned, &z).unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn r2_rank_deficient_is_flagged() {
        let z = pseudo(100, 2, 3);
        let learned = Matrix::from_fn(100, 2, |i, _| z[(i, 0)]);
        let r = r2_report(&learned, &z).unwrap();
        assert!(r.regularized);
        assert!(r.per_dim[0] > 99.99);
    }

    #[test]
    fn r2_needs_enough_rows() {
        let z = pseudo(4, 3, 1);
        assert!(r2_score(&z, &z).is_err());
    }

    #[test]
    fn mcc_signed_permutation() {
        let z = pseudo(300, 4, 2);
        let perm = [2, 0, 3, 1];
        let sign = [1.0, -1.0, -1.0, 1.0];
        let learned = Matrix::from_fn(300, 4, |i, j| sign[j] * 3.0 * z[(i, perm[j])]);
        let r = mcc_report(&learned, &z, Correlation::Pearson).unwrap();
        assert!((r.mcc - 100.0).abs() < 1e-9);
        for (j, &i) in r.permutation.iter().enumerate() {
            assert_eq!(perm[i], j);
        }
    }

    #[test]
    fn mcc_zero_variance_column() {
        let z = pseudo(50, 2, 5);
        let learned = Matrix::from_fn(50, 2, |i, j| if j == 0 { z[(i, 0)] } else { 1.0 });
        let r = mcc_report(&learned, &z, Correlation::Pearson).unwrap();
        assert_eq!(r.zero_variance, vec![1]);
        assert!((r.mcc - 50.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_ranks_handle_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn hungarian_small() {
        let c = Matrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]).unwrap();
        let a = hungarian_min(&c).unwrap();
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn mi_examples() {
        let prod = Matrix::from_rows(&[[0.12, 0.28], [0.18, 0.42]]).unwrap();
        assert!(exact_mi_discrete(&prod).unwrap().abs() < 1e-15);
        let diag = Matrix::from_fn(4, 4, |i, j| if i == j { 0.25 } else { 0.0 });
        assert!((exact_mi_discrete(&diag).unwrap() - 4f64.ln()).abs() < 1e-15);
        let j = Matrix::from_rows(&[[0.4, 0.1], [0.1, 0.4]]).unwrap();
        let expect = 2.0 * (0.4 * (0.4f64 / 0.25).ln()) + 2.0 * (0.1 * (0.1f64 / 0.25).ln());
        assert!((exact_mi_discrete(&j).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.1927).abs() < 1e-4);
        assert!(exact_mi_discrete(&Matrix::filled(2, 2, 0.3)).is_err());
    }

    #[test]
    fn er_gap_examples() {
        let j = Matrix::from_rows(&[[0.4, 0.1], [0.1, 0.4]]).unwrap();
        let cond = Matrix::from_rows(&[[0.8, 0.2], [0.2, 0.8]]).unwrap();
        let g = er_gap_report(&j, &cond).unwrap();
        assert!(g.gap.abs() < 1e-15);
        let unif = Matrix::filled(2, 2, 0.5);
        let g = er_gap_report(&j, &unif).unwrap();
        assert!((g.er - (2f64.ln() - 2f64.ln())).abs() < 1e-15);
        assert!((g.gap - g.avg_kl).abs() < 1e-15);
        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = er_gap_report(&j, &zero).unwrap();
        assert_eq!(g.er, f64::NEG_INFINITY);
    }
}
