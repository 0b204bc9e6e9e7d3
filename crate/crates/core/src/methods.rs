//! Losses of distillation and clustering methods and their assignment steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm, Matrix, MlpParams, MlpVars, Tape, Var};
use crate::estimators::{argmax_lowest, entropy_plugin_disc, DiscretePosterior, ProjectionBatch};
use crate::error::{dim_err, Error, Result};

/// Sinkhorn regularization used by default.
pub const SINKHORN_EPS: f64 = 0.05;
/// Sinkhorn iterations during training.
pub const SINKHORN_TRAIN_ITERS: usize = 3;
/// Sinkhorn iterations when checking against exact solutions.
pub const SINKHORN_VERIFY_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `m x d`.
    pub c: Matrix,
    pub trainable: bool,
}

impl PrototypeBank {
    /// Prototypes with unit-norm rows.
    pub fn on_sphere(c: Matrix, trainable: bool) -> Result<Self> {
        Ok(Self { c: c.normalize_rows()?, trainable })
    }

    pub fn m(&self) -> usize {
        self.c.rows()
    }

    fn ensure_unit_rows(&self) -> Result<()> {
        for (i, r) in self.c.row_iter().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-9 {
                return Err(Error::OffSupport(format!("prototype {i} is not unit norm")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    /// `1 x d`.
    pub c: Matrix,
    pub momentum: f64,
}

impl CenterState {
    pub fn zeros(d: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("center momentum {momentum} outside [0, 1]")));
        }
        Ok(Self { c: Matrix::zeros(1, d), momentum })
    }
}

/// A `k x m` nonnegative transport plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub p: Matrix,
}

impl TransportPlan {
    /// Largest absolute deviation of a row sum from `1/k` or a column sum from `1/m`.
    pub fn marginal_violation(&self) -> f64 {
        let (k, m) = self.p.shape();
        let rows = self
            .p
            .row_iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0 / k as f64).abs())
            .fold(0.0, f64::max);
        let cols = self
            .p
            .column_sums()
            .as_slice()
            .iter()
            .map(|s| (s - 1.0 / m as f64).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// Sum of absolute deviations of the column sums from `1/m` (row sums are
    /// exact after every Sinkhorn iteration).
    pub fn column_violation_l1(&self) -> f64 {
        let m = self.p.cols() as f64;
        self.p.column_sums().as_slice().iter().map(|s| (s - 1.0 / m).abs()).sum()
    }

    /// Rows normalized to pmfs, the soft cluster targets.
    pub fn row_pmfs(&self) -> Result<DiscretePosterior> {
        let mut out = self.p.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let s: f64 = r.iter().sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("plan row {i} has sum {s}")));
            }
            r.iter_mut().for_each(|v| *v /= s);
        }
        DiscretePosterior::new(out)
    }

    /// `Tr(S P^T) + eps H(P)` with `H(P) = -sum P log P`.
    pub fn entropic_objective(&self, scores: &Matrix, eps: f64) -> f64 {
        let lin: f64 = self.p.as_slice().iter().zip(scores.as_slice()).map(|(p, s)| p * s).sum();
        let ent: f64 = -self
            .p
            .as_slice()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        lin + eps * ent
    }
}

fn check_rows_nonzero(m: &Matrix, what: &str) -> Result<()> {
    for (i, r) in m.row_iter().enumerate() {
        if norm(r) == 0.0 {
            return Err(Error::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `(1/k) sum_i |pred_i/|pred_i| - target_i/|target_i||^2`.
pub fn byol_loss(predicted: &ProjectionBatch, target: &ProjectionBatch) -> Result<f64> {
    let (p, t) = (predicted.values(), target.values());
    if p.shape() != t.shape() {
        return dim_err(format!("{:?} vs {:?}", p.shape(), t.shape()));
    }
    if p.rows() == 0 {
        return Err(Error::Empty("BYOL batch".into()));
    }
    let (pn, tn) = (p.normalize_rows()?, t.normalize_rows()?);
    let s: f64 = (0..p.rows())
        .map(|i| pn.row(i).iter().zip(tn.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(s / p.rows() as f64)
}

/// BYOL loss on a tape; `target` is wrapped in a stop-gradient.
pub fn byol_loss_var(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var> {
    if tape.shape(predicted) != tape.shape(target) {
        return dim_err(format!("{:?} vs {:?}", tape.shape(predicted), tape.shape(target)));
    }
    check_rows_nonzero(tape.value(predicted), "prediction")?;
    check_rows_nonzero(tape.value(target), "target")?;
    let t = tape.stop_gradient(target);
    let pn = tape.normalize_rows(predicted);
    let tn = tape.normalize_rows(t);
    let d = tape.row_dist_pow(pn, tn, 2.0);
    Ok(tape.mean(d))
}

fn check_temps(tau1: f64, tau2: f64) -> Result<()> {
    if !(tau1 > 0.0 && tau2 > 0.0) {
        return Err(Error::InvalidArgument(format!("temperatures ({tau1}, {tau2}) must be positive")));
    }
    Ok(())
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Teacher targets `softmax((z2_i - c) / tau2)`, `k x m`.
pub fn dino_targets(teacher: &Matrix, center: &CenterState, tau2: f64) -> Result<Matrix> {
    if center.c.shape() != (1, teacher.cols()) {
        return dim_err(format!("center {:?} vs teacher dim {}", center.c.shape(), teacher.cols()));
    }
    let mut out = Matrix::zeros(teacher.rows(), teacher.cols());
    for i in 0..teacher.rows() {
        let shifted: Vec<f64> = teacher
            .row(i)
            .iter()
            .zip(center.c.as_slice())
            .map(|(z, c)| (z - c) / tau2)
            .collect();
        out.row_mut(i).copy_from_slice(&softmax_row(&shifted));
    }
    Ok(out)
}

/// `-(1/k) sum_i softmax((z2_i - c)/tau2)^T log softmax(z1_i / tau1)`.
pub fn dino_loss(student: &ProjectionBatch, teacher: &ProjectionBatch, center: &CenterState, tau1: f64, tau2: f64) -> Result<f64> {
    check_temps(tau1, tau2)?;
    let (s, t) = (student.values(), teacher.values());
    if s.shape() != t.shape() {
        return dim_err(format!("{:?} vs {:?}", s.shape(), t.shape()));
    }
    if s.rows() == 0 {
        return Err(Error::Empty("DINO batch".into()));
    }
    let targets = dino_targets(t, center, tau2)?;
    let mut total = 0.0;
    for i in 0..s.rows() {
        let z: Vec<f64> = s.row(i).iter().map(|v| v / tau1).collect();
        total += dot(targets.row(i), &log_softmax_row(&z));
    }
    Ok(-total / s.rows() as f64)
}

/// DINO loss on a tape; the teacher branch is wrapped in a stop-gradient.
pub fn dino_loss_var(tape: &mut Tape, student: Var, teacher: Var, center: &CenterState, tau1: f64, tau2: f64) -> Result<Var> {
    check_temps(tau1, tau2)?;
    if tape.shape(student) != tape.shape(teacher) {
        return dim_err(format!("{:?} vs {:?}", tape.shape(student), tape.shape(teacher)));
    }
    if center.c.shape() != (1, tape.shape(teacher).1) {
        return dim_err(format!("center {:?} vs teacher {:?}", center.c.shape(), tape.shape(teacher)));
    }
    let t = tape.stop_gradient(teacher);
    let neg_c = tape.constant(center.c.scale(-1.0));
    let centered = tape.add_row(t, neg_c);
    let sharp = tape.scale(centered, 1.0 / tau2);
    let target = tape.softmax_rows(sharp);
    let z = tape.scale(student, 1.0 / tau1);
    let ls = tape.log_softmax_rows(z);
    let prod = tape.mul(target, ls);
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / tape.shape(student).0 as f64))
}

/// `c <- mu c + (1 - mu) mean_i z2_i`.
pub fn center_update(center: &CenterState, teacher_batch: &Matrix) -> Result<CenterState> {
    if center.c.shape() != (1, teacher_batch.cols()) {
        return dim_err(format!("center {:?} vs batch dim {}", center.c.shape(), teacher_batch.cols()));
    }
    if teacher_batch.rows() == 0 {
        return Err(Error::Empty("teacher batch".into()));
    }
    let mean = teacher_batch.column_means();
    let mu = center.momentum;
    Ok(CenterState {
        c: center.c.zip_map(&mean, |c, b| mu * c + (1.0 - mu) * b),
        momentum: mu,
    })
}

/// Log-domain Sinkhorn-Knopp on a `k x m` score matrix. Each iteration first
/// rescales columns to `1/m` then rows to `1/k`, so row sums are exact on return.
pub fn sinkhorn(scores: &Matrix, eps: f64, iters: usize) -> Result<TransportPlan> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} must be positive")));
    }
    let (k, m) = scores.shape();
    if k == 0 || m == 0 {
        return Err(Error::Empty("score matrix".into()));
    }
    scores.ensure_finite("Sinkhorn scores")?;
    let (log_r, log_c) = (-(k as f64).ln(), -(m as f64).ln());
    let mut lp = scores.scale(1.0 / eps);
    // start from the plan with total mass 1
    let total = lse(lp.as_slice());
    lp.as_mut_slice().iter_mut().for_each(|v| *v -= total);
    for _ in 0..iters {
        for j in 0..m {
            let col: Vec<f64> = (0..k).map(|i| lp[(i, j)]).collect();
            let shift = log_c - lse(&col);
            for i in 0..k {
                lp.row_mut(i)[j] += shift;
            }
        }
        for i in 0..k {
            let shift = log_r - lse(lp.row(i));
            lp.row_mut(i).iter_mut().for_each(|v| *v += shift);
        }
    }
    let p = lp.map(f64::exp);
    p.ensure_finite("Sinkhorn plan")?;
    Ok(TransportPlan { p })
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// SwAV assignment: Sinkhorn on `Z C^T` for unit-norm projections and prototypes.
pub fn sinkhorn_assign(scores: &ProjectionBatch, prototypes: &PrototypeBank, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    if scores.dim() != prototypes.c.cols() {
        return dim_err(format!("projection dim {} vs prototype dim {}", scores.dim(), prototypes.c.cols()));
    }
    for (i, r) in scores.values().row_iter().enumerate() {
        if (norm(r) - 1.0).abs() > 1e-9 {
            return Err(Error::OffSupport(format!("projection {i} is not unit norm")));
        }
    }
    prototypes.ensure_unit_rows()?;
    sinkhorn(&scores.values().matmul_t(&prototypes.c), epsilon, iters)
}

/// `-(1/k) sum_i p_i^T log softmax(C z1_i / temperature)` with `p_i` the
/// normalized plan rows. The plain form uses `temperature = 1`.
pub fn swav_loss(plan: &TransportPlan, other_branch: &ProjectionBatch, prototypes: &PrototypeBank, temperature: f64) -> Result<f64> {
    let targets = plan.row_pmfs()?;
    let z = other_branch.values();
    if targets.k() != z.rows() || targets.m() != prototypes.m() || z.cols() != prototypes.c.cols() {
        return dim_err("plan, projections and prototypes do not conform");
    }
    let logits = z.matmul_t(&prototypes.c).scale(1.0 / temperature);
    let mut total = 0.0;
    for i in 0..z.rows() {
        total += dot(targets.values().row(i), &log_softmax_row(logits.row(i)));
    }
    Ok(-total / z.rows() as f64)
}

/// Cross entropy `-(1/k) sum_i targets_i^T log softmax(logits_i)` with the
/// targets held constant, optionally with per-sample weights.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, targets: &Matrix, weights: Option<&[f64]>) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return dim_err(format!("logits {:?} vs targets {:?}", tape.shape(logits), targets.shape()));
    }
    let k = targets.rows();
    let t = match weights {
        Some(w) => {
            if w.len() != k {
                return dim_err(format!("{} weights for {k} rows", w.len()));
            }
            Matrix::from_fn(k, targets.cols(), |i, j| w[i] * targets[(i, j)])
        }
        None => targets.clone(),
    };
    let ls = tape.log_softmax_rows(logits);
    let tv = tape.constant(t);
    let prod = tape.mul(tv, ls);
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / k as f64))
}

/// SwAV loss on a tape with logits `z1 C^T / temperature`; targets carry no gradient.
pub fn swav_loss_var(tape: &mut Tape, targets: &Matrix, z1: Var, prototypes: Var, temperature: f64) -> Result<Var> {
    if tape.shape(z1).1 != tape.shape(prototypes).1 {
        return dim_err("projection and prototype dims differ");
    }
    let logits = tape.matmul_t(z1, prototypes);
    let scaled = tape.scale(logits, 1.0 / temperature);
    cross_entropy_var(tape, scaled, targets, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: PrototypeBank,
    pub posteriors: DiscretePosterior,
    pub labels: Vec<usize>,
    /// Objective `(1/k) sum_i |z_i - c_{label_i}|^2` after each assignment step.
    pub objective_trace: Vec<f64>,
    /// Number of empty clusters re-seeded.
    pub reseeded: usize,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sqdist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by `iters` Lloyd iterations.
pub fn kmeans_assign<R: Rng + ?Sized>(z: &Matrix, m: usize, iters: usize, rng: &mut R) -> Result<KMeansResult> {
    let (k, d) = z.shape();
    if m == 0 || k < m {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= m <= k, got m = {m}, k = {k}")));
    }
    z.ensure_finite("k-means input")?;

    let mut centroids = Matrix::zeros(m, d);
    let first = rng.random_range(0..k);
    centroids.row_mut(0).copy_from_slice(z.row(first));
    let mut d2: Vec<f64> = z.row_iter().map(|r| sqdist(r, z.row(first))).collect();
    for c in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = k - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..k)
        };
        centroids.row_mut(c).copy_from_slice(z.row(pick));
        for (i, r) in z.row_iter().enumerate() {
            d2[i] = d2[i].min(sqdist(r, z.row(pick)));
        }
    }

    kmeans_refine(z, centroids, iters)
}

/// `iters` Lloyd iterations started from the given centroids.
pub fn kmeans_refine(z: &Matrix, mut centroids: Matrix, iters: usize) -> Result<KMeansResult> {
    let (k, d) = z.shape();
    let m = centroids.rows();
    if m == 0 || k < m || centroids.cols() != d {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= m <= k and matching dims, got m = {m}, k = {k}, centroid dim {}",
            centroids.cols()
        )));
    }
    z.ensure_finite("k-means input")?;
    centroids.ensure_finite("k-means centroids")?;
    let assign = |centroids: &Matrix| -> (Vec<usize>, Vec<f64>) {
        z.row_iter().map(|r| nearest(r, centroids)).unzip()
    };
    let (mut labels, mut dists) = assign(&centroids);
    let mut trace = vec![dists.iter().sum::<f64>() / k as f64];
    let mut reseeded = 0;
    for _ in 0..iters {
        let mut sums = Matrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                let row: Vec<f64> = sums.row(c).iter().map(|s| s / n).collect();
                centroids.row_mut(c).copy_from_slice(&row);
            } else {
                // farthest point from its current centroid
                let far = (0..k).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids.row_mut(c).copy_from_slice(z.row(far));
                dists[far] = 0.0;
                reseeded += 1;
            }
        }
        (labels, dists) = assign(&centroids);
        trace.push(dists.iter().sum::<f64>() / k as f64);
    }
    Ok(KMeansResult {
        centroids: PrototypeBank { c: centroids, trainable: false },
        posteriors: DiscretePosterior::one_hot(&labels, m)?,
        labels,
        objective_trace: trace,
        reseeded,
    })
}

/// `-(1/k) sum_i p_i^T log softmax(g(z1_i))`.
pub fn deepcluster_loss(posteriors: &DiscretePosterior, other_branch: &ProjectionBatch, predictor: &MlpParams) -> Result<f64> {
    if predictor.output_dim() != posteriors.m() || posteriors.k() != other_branch.k() {
        return dim_err(format!(
            "predictor output {} / posteriors {}x{} / batch {}",
            predictor.output_dim(),
            posteriors.k(),
            posteriors.m(),
            other_branch.k()
        ));
    }
    let logits = predictor.predict(other_branch.values())?;
    let mut total = 0.0;
    for i in 0..logits.rows() {
        total += dot(posteriors.values().row(i), &log_softmax_row(logits.row(i)));
    }
    Ok(-total / logits.rows() as f64)
}

/// DeepCluster loss on a tape; returns the loss and the predictor's parameter handles.
pub fn deepcluster_loss_var(
    tape: &mut Tape,
    posteriors: &DiscretePosterior,
    z1: Var,
    predictor: &MlpParams,
    weights: Option<&[f64]>,
) -> Result<(Var, MlpVars)> {
    if predictor.output_dim() != posteriors.m() {
        return dim_err(format!("predictor output {} vs m = {}", predictor.output_dim(), posteriors.m()));
    }
    let (logits, vars) = predictor.forward(tape, z1)?;
    Ok((cross_entropy_var(tape, logits, posteriors.values(), weights)?, vars))
}

/// Per-sample weights `∝ 1/count(cluster)` with mean 1, which make the weighted
/// cluster marginal uniform over the non-empty clusters.
pub fn uniform_resample_weights(posteriors: &DiscretePosterior) -> Vec<f64> {
    let labels = posteriors.argmax();
    let k = labels.len();
    let mut counts = vec![0usize; posteriors.m()];
    labels.iter().for_each(|&l| counts[l] += 1);
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    labels
        .iter()
        .map(|&l| k as f64 / (nonempty as f64 * counts[l] as f64))
        .collect()
}

/// Plug-in entropy of the mean posterior divided by `log m`.
pub fn normalized_entropy(posteriors: &DiscretePosterior) -> Result<f64> {
    if posteriors.m() < 2 {
        return Err(Error::InvalidArgument("normalized entropy needs m >= 2".into()));
    }
    Ok(entropy_plugin_disc(posteriors, 1)? / (posteriors.m() as f64).ln())
}

/// Softmax of every row, as a posterior.
pub fn softmax_posterior(logits: &Matrix) -> Result<DiscretePosterior> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i).copy_from_slice(&softmax_row(logits.row(i)));
    }
    DiscretePosterior::new(out)
}

/// Hard assignments of `scores` rows, ties to the lowest index.
pub fn hard_assign(scores: &Matrix) -> Vec<usize> {
    scores.row_iter().map(argmax_lowest).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Head, Layer};
    use crate::densities::Support;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(rows: &[[f64; 2]]) -> ProjectionBatch {
        ProjectionBatch::new(Matrix::from_rows(rows).unwrap(), Support::Sphere).unwrap()
    }

    fn free(m: Matrix) -> ProjectionBatch {
        ProjectionBatch::unbounded(m).unwrap()
    }

    #[test]
    fn byol_examples() {
        let a = sphere(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(byol_loss(&a, &a).unwrap(), 0.0);
        let anti = sphere(&[[-1.0, 0.0], [0.0, -1.0]]);
        assert!((byol_loss(&a, &anti).unwrap() - 4.0).abs() < 1e-15);
        let orth = sphere(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!((byol_loss(&a, &orth).unwrap() - 2.0).abs() < 1e-15);
        assert!(byol_loss(&free(Matrix::zeros(1, 2)), &free(Matrix::filled(1, 2, 1.0))).is_err());
    }

    #[test]
    fn dino_examples() {
        let m = 6;
        let z = free(Matrix::zeros(3, m));
        let c = CenterState::zeros(m, 0.9).unwrap();
        assert!((dino_loss(&z, &z, &c, 0.1, 0.04).unwrap() - (m as f64).ln()).abs() < 1e-12);

        let s = free(Matrix::from_rows(&[[0.3, -0.2, 0.5]]).unwrap());
        let t = free(Matrix::from_rows(&[[0.1, 0.9, 0.2]]).unwrap());
        let c = CenterState::zeros(3, 0.9).unwrap();
        let v = dino_loss(&s, &t, &c, 0.1, 1e-6).unwrap();
        let ls = log_softmax_row(&[3.0, -2.0, 5.0]);
        assert!((v + ls[1]).abs() < 1e-12);
        assert!(dino_loss(&s, &t, &c, 0.0, 0.1).is_err());
    }

    #[test]
    fn center_examples() {
        let batch = Matrix::from_rows(&[[1.0, 2.0], [3.0, -2.0]]).unwrap();
        let c = CenterState { c: Matrix::row_vector(vec![5.0, 5.0]), momentum: 1.0 };
        assert_eq!(center_update(&c, &batch).unwrap().c, c.c);
        let c0 = CenterState { c: Matrix::row_vector(vec![5.0, 5.0]), momentum: 0.0 };
        assert_eq!(center_update(&c0, &batch).unwrap().c.as_slice(), &[2.0, 0.0]);
        let c9 = CenterState::zeros(2, 0.9).unwrap();
        let u = center_update(&c9, &batch).unwrap();
        assert!((u.c.as_slice()[0] - 0.2).abs() < 1e-15 && u.c.as_slice()[1].abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_constant_scores_uniform() {
        let p = sinkhorn(&Matrix::filled(5, 3, 0.7), 0.05, 3).unwrap();
        for &v in p.p.as_slice() {
            assert!((v - 1.0 / 15.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_two_by_two() {
        let s = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = sinkhorn(&s, 0.01, 200).unwrap();
        assert!((p.p[(0, 0)] - 0.5).abs() < 1e-3 && (p.p[(1, 1)] - 0.5).abs() < 1e-3);
        assert!(p.p[(0, 1)] < 1e-3 && p.p[(1, 0)] < 1e-3);
    }

    #[test]
    fn swav_examples() {
        let protos = PrototypeBank::on_sphere(Matrix::identity(2), true).unwrap();
        let z = sphere(&[[1.0, 0.0], [0.0, 1.0]]);
        let one_hot = TransportPlan { p: Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap() };
        let sharp = swav_loss(&one_hot, &z, &protos, 1e-3).unwrap();
        assert!(sharp < 1e-12);
        let uniform = TransportPlan { p: Matrix::filled(2, 2, 0.25) };
        let v = swav_loss(&uniform, &z, &protos, 1.0).unwrap();
        let ls = log_softmax_row(&[1.0, 0.0]);
        assert!((v + 0.5 * (ls[0] + ls[1])).abs() < 1e-12);
        let bad = TransportPlan { p: Matrix::zeros(2, 2) };
        assert!(swav_loss(&bad, &z, &protos, 1.0).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [5.0, 5.0]]).unwrap();
        let r = kmeans_assign(&pts, 4, 10, &mut rng).unwrap();
        assert_eq!(*r.objective_trace.last().unwrap(), 0.0);

        let pts = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap();
        let r = kmeans_assign(&pts, 2, 10, &mut rng).unwrap();
        let mut cs: Vec<Vec<f64>> = r.centroids.c.row_iter().map(|r| r.to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!(kmeans_assign(&pts, 5, 10, &mut rng).is_err());
    }

    #[test]
    fn kmeans_ties_go_to_lowest_index() {
        let c = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        assert_eq!(nearest(&[0.0], &c).0, 0);
    }

    #[test]
    fn deepcluster_examples() {
        let post = DiscretePosterior::one_hot(&[0, 2, 1], 3).unwrap();
        let z = free(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap());
        let zero = MlpParams::from_layers(
            vec![Layer { weight: Matrix::zeros(2, 3), bias: Matrix::zeros(1, 3) }],
            0.2,
            Head::None,
        )
        .unwrap();
        assert!((deepcluster_loss(&post, &z, &zero).unwrap() - 3f64.ln()).abs() < 1e-15);

        // logits = 50 * onehot(label)
        let w = Matrix::from_rows(&[[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]]).unwrap();
        let post = DiscretePosterior::one_hot(&[0, 2], 3).unwrap();
        let z = free(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let sharp = MlpParams::from_layers(vec![Layer { weight: w, bias: Matrix::zeros(1, 3) }], 0.2, Head::None).unwrap();
        assert!(deepcluster_loss(&post, &z, &sharp).unwrap() < 1e-20);
    }

    #[test]
    fn resample_weights_examples() {
        let even = DiscretePosterior::one_hot(&[0, 1, 1, 0], 2).unwrap();
        assert_eq!(uniform_resample_weights(&even), vec![1.0; 4]);
        let skew = DiscretePosterior::one_hot(&[0, 0, 0, 1], 2).unwrap();
        let w = uniform_resample_weights(&skew);
        let expect = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = DiscretePosterior::one_hot(&[1, 1, 1], 3).unwrap();
        assert_eq!(uniform_resample_weights(&single), vec![1.0; 3]);
    }

    #[test]
    fn normalized_entropy_examples() {
        let u = DiscretePosterior::new(Matrix::filled(4, 5, 0.2)).unwrap();
        assert!((normalized_entropy(&u).unwrap() - 1.0).abs() < 1e-15);
        let c = DiscretePosterior::one_hot(&[2, 2, 2], 4).unwrap();
        assert_eq!(normalized_entropy(&c).unwrap(), 0.0);
        let t = DiscretePosterior::one_hot(&[0, 1], 2).unwrap();
        assert!((normalized_entropy(&t).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tape_routes_match_direct() {
        let s = Matrix::from_fn(5, 4, |i, j| ((i * 3 + j * 7) % 5) as f64 * 0.3 - 0.6);
        let t = Matrix::from_fn(5, 4, |i, j| ((i * 5 + j * 2) % 7) as f64 * 0.2 - 0.5);
        let c = CenterState { c: Matrix::row_vector(vec![0.1, -0.2, 0.05, 0.0]), momentum: 0.9 };
        let mut tape = Tape::new();
        let (vs, vt) = (tape.constant(s.clone()), tape.constant(t.clone()));
        let l = dino_loss_var(&mut tape, vs, vt, &c, 0.1, 0.04).unwrap();
        let direct = dino_loss(&free(s.clone()), &free(t.clone()), &c, 0.1, 0.04).unwrap();
        assert!((tape.scalar(l) - direct).abs() < 1e-12);
        let l = byol_loss_var(&mut tape, vs, vt).unwrap();
        assert!((tape.scalar(l) - byol_loss(&free(s.clone()), &free(t.clone())).unwrap()).abs() < 1e-12);
    }
}
