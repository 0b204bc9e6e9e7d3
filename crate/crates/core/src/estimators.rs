//! Entropy, reconstruction and contrastive estimators.
//!
//! Every estimator comes in two forms: a direct evaluation on plain matrices,
//! and a `*_var` builder that records the same quantity on a [`Tape`] so it
//! can be differentiated. The direct forms stream over pairs and never build
//! `k x k` intermediates.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::densities::{KernelSpec, Similarity, Support};
use crate::error::{dim_err, Error, Result};

/// A `k x d` batch of projections together with its geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBatch {
    values: Matrix,
    geometry: Support,
}

impl ProjectionBatch {
    pub fn new(values: Matrix, geometry: Support) -> Result<Self> {
        values.ensure_finite("projection batch")?;
        for (i, r) in values.row_iter().enumerate() {
            if !geometry.contains(r) {
                return Err(Error::OffSupport(format!("row {i} is not on the {geometry:?} support")));
            }
        }
        Ok(Self { values, geometry })
    }

    pub fn unbounded(values: Matrix) -> Result<Self> {
        Self::new(values, Support::Unbounded)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn geometry(&self) -> Support {
        self.geometry
    }

    pub fn k(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// A `k x m` row-stochastic matrix of posteriors over discrete surrogates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePosterior {
    values: Matrix,
}

impl DiscretePosterior {
    pub const TOL: f64 = 1e-9;

    pub fn new(values: Matrix) -> Result<Self> {
        values.ensure_finite("posterior")?;
        for (i, r) in values.row_iter().enumerate() {
            if r.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!("posterior row {i} has a negative entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > Self::TOL {
                return Err(Error::InvalidArgument(format!("posterior row {i} sums to {s}")));
            }
        }
        Ok(Self { values })
    }

    /// One-hot rows for `labels` over `m` classes.
    pub fn one_hot(labels: &[usize], m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for m = {m}")));
        }
        Ok(Self {
            values: Matrix::from_fn(labels.len(), m, |i, j| if labels[i] == j { 1.0 } else { 0.0 }),
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.rows()
    }

    pub fn m(&self) -> usize {
        self.values.cols()
    }

    /// Argmax of every row, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.values.row_iter().map(argmax_lowest).collect()
    }
}

pub(crate) fn argmax_lowest(r: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = j;
        }
    }
    best
}

/// An assembled ER value, `total = entropy + weight * reconstruction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErValue {
    pub entropy_part: f64,
    pub reconstruction_part: f64,
    pub weight: f64,
    pub total: f64,
}

pub fn er_bound(entropy_part: f64, reconstruction_part: f64, weight: f64) -> Result<ErValue> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("reconstruction weight {weight} must be >= 0")));
    }
    Ok(ErValue {
        entropy_part,
        reconstruction_part,
        weight,
        total: entropy_part + weight * reconstruction_part,
    })
}

/// Which projections act as negatives for an anchor in the contrastive loss.
///
/// Described for the second branch (anchor `z2_i`, positive `z1_i`); the first
/// branch swaps the roles of the two views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NegativeMode {
    /// All rows of the other view.
    Cmc,
    /// Other rows of the anchor's view plus all rows of the other view.
    Simclr,
    /// All rows of the anchor's view, the anchor included.
    SelfInclusive,
    /// All other rows of the anchor's view.
    SelfExcluding,
    /// A fixed external bank of projections.
    MemoryBank { bank: Matrix },
}

fn check_pair(z1: &ProjectionBatch, z2: &ProjectionBatch) -> Result<usize> {
    if z1.values.shape() != z2.values.shape() {
        return dim_err(format!("paired batches {:?} vs {:?}", z1.values.shape(), z2.values.shape()));
    }
    if z1.k() == 0 {
        return Err(Error::Empty("batch has no rows".into()));
    }
    Ok(z1.k())
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `(1/k) sum_i f(z2_i, z1_i)`.
pub fn reconstruction_cont(z1: &ProjectionBatch, z2: &ProjectionBatch, f: &Similarity) -> Result<f64> {
    let k = check_pair(z1, z2)?;
    let mut s = 0.0;
    for i in 0..k {
        s += f.eval(z2.row(i), z1.row(i))?;
    }
    Ok(s / k as f64)
}

/// `(1/k) sum_i log q(labels_i | z1_i)` given the rows of `q`.
pub fn reconstruction_disc_from(q: &DiscretePosterior, labels: &[usize]) -> Result<f64> {
    if labels.len() != q.k() {
        return dim_err(format!("{} labels for {} rows", labels.len(), q.k()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no labels".into()));
    }
    let mut s = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= q.m() {
            return Err(Error::InvalidArgument(format!("label {l} out of range for m = {}", q.m())));
        }
        let p = q.values[(i, l)];
        if p <= 0.0 {
            return Err(Error::ZeroProbability(format!("q(w = {l} | z1_{i}) = 0")));
        }
        s += p.ln();
    }
    Ok(s / labels.len() as f64)
}

/// Discrete reconstruction with `q(. | z1)` produced row by row by `q`.
pub fn reconstruction_disc<F>(z1: &ProjectionBatch, labels: &[usize], q: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let rows: Vec<Vec<f64>> = z1.values.row_iter().map(&q).collect::<Result<_>>()?;
    let post = DiscretePosterior::new(Matrix::from_rows(&rows)?)?;
    reconstruction_disc_from(&post, labels)
}

/// `log p_hat(z)` for the kernel density estimate built on `samples`.
pub fn kde_log_density_at(z: &[f64], samples: &ProjectionBatch, spec: &KernelSpec) -> Result<f64> {
    if samples.k() == 0 {
        return Err(Error::Empty("no KDE samples".into()));
    }
    if z.len() != samples.dim() || spec.dim != z.len() {
        return dim_err(format!("point dim {} vs samples {} vs kernel {}", z.len(), samples.dim(), spec.dim));
    }
    let logs: Vec<f64> = samples
        .values
        .row_iter()
        .map(|r| spec.log_pair(z, r))
        .collect::<Result<_>>()?;
    Ok(logsumexp(logs.iter().copied()) - (samples.k() as f64).ln() - spec.log_volume())
}

/// `p_hat(z) = 1/(k h^d) sum_j q((z - z_j)/h)`.
pub fn kde_density_at(z: &[f64], samples: &ProjectionBatch, spec: &KernelSpec) -> Result<f64> {
    Ok(kde_log_density_at(z, samples, spec)?.exp())
}

fn kde_logs(samples: &ProjectionBatch, spec: &KernelSpec) -> Result<Vec<f64>> {
    let logs = samples
        .values
        .row_iter()
        .map(|r| kde_log_density_at(r, samples, spec))
        .collect::<Result<Vec<f64>>>()?;
    if logs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log KDE value (degenerate bandwidth?)".into()));
    }
    Ok(logs)
}

/// Resubstitution entropy estimate `-(1/k) sum_i log p_hat(z_i)`.
pub fn entropy_joe(samples: &ProjectionBatch, spec: &KernelSpec) -> Result<f64> {
    let logs = kde_logs(samples, spec)?;
    Ok(-logs.iter().sum::<f64>() / logs.len() as f64)
}

/// Kernel plug-in entropy `-sum_i p_hat(z_i) log p_hat(z_i)`, or with a `1/k`
/// weight when `normalized_variant` is set.
pub fn entropy_plugin_kde(samples: &ProjectionBatch, spec: &KernelSpec, normalized_variant: bool) -> Result<f64> {
    let logs = kde_logs(samples, spec)?;
    let s: f64 = -logs.iter().map(|&l| l.exp() * l).sum::<f64>();
    Ok(if normalized_variant { s / logs.len() as f64 } else { s })
}

/// `-sum_w p log p` over a pmf, with `0 log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Plug-in entropy of the mean posterior, averaged over `replicas` equal chunks.
pub fn entropy_plugin_disc(posteriors: &DiscretePosterior, replicas: usize) -> Result<f64> {
    let k = posteriors.k();
    if replicas == 0 || k == 0 {
        return Err(Error::InvalidArgument("need k >= 1 and r >= 1".into()));
    }
    if k % replicas != 0 {
        return Err(Error::InvalidArgument(format!("k = {k} is not divisible by r = {replicas}")));
    }
    let c = k / replicas;
    let m = posteriors.m();
    let mut total = 0.0;
    for chunk in 0..replicas {
        let mut p = vec![0.0; m];
        for i in chunk * c..(chunk + 1) * c {
            for (acc, v) in p.iter_mut().zip(posteriors.values.row(i)) {
                *acc += v;
            }
        }
        p.iter_mut().for_each(|v| *v /= c as f64);
        total += shannon_entropy(&p);
    }
    Ok(total / replicas as f64)
}

/// `(1/k) sum_i log[ e^{f(z1_i, z2_i)} / ((1/k) sum_j e^{f(z1_i, z2_j)}) ]`.
pub fn infonce(z1: &ProjectionBatch, z2: &ProjectionBatch, f: &Similarity) -> Result<f64> {
    let k = check_pair(z1, z2)?;
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for i in 0..k {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = f.eval(z1.row(i), z2.row(j))?;
        }
        total += row[i] - logsumexp(row.iter().copied()) + (k as f64).ln();
    }
    Ok(total / k as f64)
}

/// Contrastive loss of one branch: anchor `anchor_i`, positive `positive_i`.
fn contrastive_branch(
    anchor: &ProjectionBatch,
    positive: &ProjectionBatch,
    f: &Similarity,
    mode: &NegativeMode,
) -> Result<f64> {
    let k = check_pair(anchor, positive)?;
    let mut total = 0.0;
    for i in 0..k {
        let a = anchor.row(i);
        let mut negs: Vec<f64> = Vec::new();
        match mode {
            NegativeMode::Cmc => {
                for j in 0..k {
                    negs.push(f.eval(a, positive.row(j))?);
                }
            }
            NegativeMode::SelfInclusive | NegativeMode::SelfExcluding | NegativeMode::Simclr => {
                for j in 0..k {
                    if j != i || matches!(mode, NegativeMode::SelfInclusive) {
                        negs.push(f.eval(a, anchor.row(j))?);
                    }
                }
                if matches!(mode, NegativeMode::Simclr) {
                    for j in 0..k {
                        negs.push(f.eval(a, positive.row(j))?);
                    }
                }
            }
            NegativeMode::MemoryBank { bank } => {
                if bank.cols() != anchor.dim() {
                    return dim_err(format!("memory bank dim {} vs batch dim {}", bank.cols(), anchor.dim()));
                }
                for r in bank.row_iter() {
                    negs.push(f.eval(a, r)?);
                }
            }
        }
        if negs.is_empty() {
            return Err(Error::Empty(format!("negative set of row {i}")));
        }
        total += f.eval(a, positive.row(i))? - logsumexp(negs.iter().copied());
    }
    Ok(-total / k as f64)
}

/// Second-branch contrastive loss: anchors `z2_i`, positives `z1_i`.
pub fn contrastive_loss(z1: &ProjectionBatch, z2: &ProjectionBatch, f: &Similarity, negatives: &NegativeMode) -> Result<f64> {
    contrastive_branch(z2, z1, f, negatives)
}

/// Mean of the two branch losses.
pub fn contrastive_loss_symmetric(
    z1: &ProjectionBatch,
    z2: &ProjectionBatch,
    f: &Similarity,
    negatives: &NegativeMode,
) -> Result<f64> {
    Ok(0.5 * (contrastive_branch(z1, z2, f, negatives)? + contrastive_branch(z2, z1, f, negatives)?))
}

// ---------------------------------------------------------------------------
// Tape builders

fn check_vars(tape: &Tape, a: Var, b: Var) -> Result<usize> {
    if tape.shape(a) != tape.shape(b) {
        return dim_err(format!("paired batches {:?} vs {:?}", tape.shape(a), tape.shape(b)));
    }
    let k = tape.shape(a).0;
    if k == 0 {
        return Err(Error::Empty("batch has no rows".into()));
    }
    Ok(k)
}

/// `k x 1` column of `log p_hat(z_i)` for the KDE built on the rows of `z` itself.
pub fn kde_log_density_var(tape: &mut Tape, z: Var, spec: &KernelSpec) -> Result<Var> {
    let k = tape.shape(z).0;
    if k == 0 {
        return Err(Error::Empty("no KDE samples".into()));
    }
    let pair = spec.log_pair_matrix(tape, z, z)?;
    let lse = tape.logsumexp_rows(pair, None);
    Ok(tape.offset(lse, -(k as f64).ln() - spec.log_volume()))
}

pub fn entropy_joe_var(tape: &mut Tape, z: Var, spec: &KernelSpec) -> Result<Var> {
    let lp = kde_log_density_var(tape, z, spec)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

pub fn entropy_plugin_kde_var(tape: &mut Tape, z: Var, spec: &KernelSpec, normalized_variant: bool) -> Result<Var> {
    let k = tape.shape(z).0 as f64;
    let lp = kde_log_density_var(tape, z, spec)?;
    let p = tape.exp(lp);
    let plp = tape.mul(p, lp);
    let s = tape.sum(plp);
    Ok(tape.scale(s, if normalized_variant { -1.0 / k } else { -1.0 }))
}

pub fn reconstruction_cont_var(tape: &mut Tape, z1: Var, z2: Var, f: &Similarity) -> Result<Var> {
    check_vars(tape, z1, z2)?;
    let s = f.rowwise(tape, z2, z1)?;
    Ok(tape.mean(s))
}

/// `(1/k) sum_i sum_w target_iw log q_iw` for log-probabilities `log_q` and
/// (stop-gradient) soft targets. One-hot targets give the label form.
pub fn reconstruction_disc_var(tape: &mut Tape, log_q: Var, targets: &Matrix) -> Result<Var> {
    if tape.shape(log_q) != targets.shape() {
        return dim_err(format!("log q {:?} vs targets {:?}", tape.shape(log_q), targets.shape()));
    }
    let k = targets.rows() as f64;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(log_q, t);
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / k))
}

/// Replica-averaged plug-in entropy of the rows of a `k x m` posterior node.
pub fn entropy_plugin_disc_var(tape: &mut Tape, posteriors: Var, replicas: usize) -> Result<Var> {
    let (k, _) = tape.shape(posteriors);
    if replicas == 0 || k == 0 || k % replicas != 0 {
        return Err(Error::InvalidArgument(format!("k = {k} is not divisible by r = {replicas}")));
    }
    let c = k / replicas;
    let mut total: Option<Var> = None;
    for chunk in 0..replicas {
        let sel = Matrix::from_fn(1, k, |_, j| if j / c == chunk { 1.0 / c as f64 } else { 0.0 });
        let sel = tape.constant(sel);
        let p = tape.matmul(sel, posteriors);
        let lp = tape.ln(p);
        let plp = tape.mul(p, lp);
        let h = tape.sum(plp);
        total = Some(match total {
            Some(t) => tape.add(t, h),
            None => h,
        });
    }
    Ok(tape.scale(total.expect("replicas >= 1"), -1.0 / replicas as f64))
}

pub fn infonce_var(tape: &mut Tape, z1: Var, z2: Var, f: &Similarity) -> Result<Var> {
    let k = check_vars(tape, z1, z2)?;
    let s = f.pairwise(tape, z1, z2)?;
    let pos = f.rowwise(tape, z1, z2)?;
    let lse = tape.logsumexp_rows(s, None);
    let diff = tape.sub(pos, lse);
    let m = tape.mean(diff);
    Ok(tape.offset(m, (k as f64).ln()))
}

fn diag_mask(k: usize, cols: usize) -> Rc<[bool]> {
    (0..k * cols).map(|idx| idx / cols != idx % cols).collect()
}

fn contrastive_branch_var(tape: &mut Tape, anchor: Var, positive: Var, f: &Similarity, mode: &NegativeMode) -> Result<Var> {
    let k = check_vars(tape, anchor, positive)?;
    let pos = f.rowwise(tape, anchor, positive)?;
    let lse = match mode {
        NegativeMode::Cmc => {
            let s = f.pairwise(tape, anchor, positive)?;
            tape.logsumexp_rows(s, None)
        }
        NegativeMode::SelfInclusive => {
            let s = f.pairwise(tape, anchor, anchor)?;
            tape.logsumexp_rows(s, None)
        }
        NegativeMode::SelfExcluding => {
            if k < 2 {
                return Err(Error::Empty("self-excluding negatives need k >= 2".into()));
            }
            let s = f.pairwise(tape, anchor, anchor)?;
            tape.logsumexp_rows(s, Some(diag_mask(k, k)))
        }
        NegativeMode::Simclr => {
            let same = f.pairwise(tape, anchor, anchor)?;
            let other = f.pairwise(tape, anchor, positive)?;
            let s = tape.hconcat(same, other);
            let mask: Rc<[bool]> = (0..k * 2 * k).map(|idx| idx / (2 * k) != idx % (2 * k)).collect();
            tape.logsumexp_rows(s, Some(mask))
        }
        NegativeMode::MemoryBank { bank } => {
            if bank.rows() == 0 {
                return Err(Error::Empty("memory bank".into()));
            }
            if bank.cols() != tape.shape(anchor).1 {
                return dim_err(format!("memory bank dim {} vs batch dim {}", bank.cols(), tape.shape(anchor).1));
            }
            let b = tape.constant(bank.clone());
            let s = f.pairwise(tape, anchor, b)?;
            tape.logsumexp_rows(s, None)
        }
    };
    let diff = tape.sub(pos, lse);
    let m = tape.mean(diff);
    Ok(tape.neg(m))
}

pub fn contrastive_loss_var(tape: &mut Tape, z1: Var, z2: Var, f: &Similarity, negatives: &NegativeMode) -> Result<Var> {
    contrastive_branch_var(tape, z2, z1, f, negatives)
}

pub fn contrastive_loss_symmetric_var(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    f: &Similarity,
    negatives: &NegativeMode,
) -> Result<Var> {
    let l1 = contrastive_branch_var(tape, z1, z2, f, negatives)?;
    let l2 = contrastive_branch_var(tape, z2, z1, f, negatives)?;
    let s = tape.add(l1, l2);
    Ok(tape.scale(s, 0.5))
}
