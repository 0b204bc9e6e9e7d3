//! Reconstruction densities, KDE kernels, samplers and similarity functions.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{dot, norm, Tape, Var};
use crate::error::{dim_err, Error, Result};

/// Tolerance on the unit norm of sphere points.
pub const SPHERE_TOL: f64 = 1e-9;

/// Retry cap for rejection-based conditionals on the box.
pub const BOX_RETRIES: usize = 100;

const VMF_RETRIES: usize = 100_000;

/// Geometry of a latent or projection space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Unit sphere in the ambient space.
    Sphere,
    /// The box `[-1, 1]^d`.
    Box,
    Unbounded,
}

impl Support {
    pub fn contains(self, v: &[f64]) -> bool {
        if !v.iter().all(|x| x.is_finite()) {
            return false;
        }
        match self {
            Support::Sphere => (norm(v) - 1.0).abs() <= SPHERE_TOL,
            Support::Box => v.iter().all(|x| x.abs() <= 1.0),
            Support::Unbounded => true,
        }
    }

    pub fn check(self, v: &[f64], what: &str) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::OffSupport(format!("{what} is not on the {self:?} support")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityKind {
    Vmf { kappa: f64 },
    Gaussian { sigma: f64 },
    Laplace { scale: f64 },
    GenNorm { beta: f64, scale: f64 },
}

impl DensityKind {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DensityKind::Vmf { kappa } => kappa > 0.0 && kappa.is_finite(),
            DensityKind::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            DensityKind::Laplace { scale } => scale > 0.0 && scale.is_finite(),
            DensityKind::GenNorm { beta, scale } => beta > 0.0 && scale > 0.0 && beta.is_finite() && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("non-positive parameter in {self:?}")))
        }
    }

    /// Per-coordinate variance of the additive noise (not defined for vMF).
    pub fn noise_variance(&self) -> Option<f64> {
        match *self {
            DensityKind::Vmf { .. } => None,
            DensityKind::Gaussian { sigma } => Some(sigma * sigma),
            DensityKind::Laplace { scale } => Some(2.0 * scale * scale),
            DensityKind::GenNorm { beta, scale } => {
                Some(scale * scale * (ln_gamma(3.0 / beta) - ln_gamma(1.0 / beta)).exp())
            }
        }
    }
}

/// A conditional density `q(target | condition)` on a given support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDensity {
    pub kind: DensityKind,
    pub support: Support,
}

impl ReconstructionDensity {
    pub fn new(kind: DensityKind, support: Support) -> Result<Self> {
        kind.validate()?;
        if matches!(kind, DensityKind::Vmf { .. }) && support != Support::Sphere {
            return Err(Error::InvalidArgument("vMF densities live on the sphere".into()));
        }
        Ok(Self { kind, support })
    }
}

/// `log q(target | condition)`. With `normalized = false` the log normalizing
/// constant is dropped.
///
/// The additive families are normalized as densities on the ambient space;
/// truncation to a bounded support is not accounted for.
pub fn log_density(density: &ReconstructionDensity, target: &[f64], condition: &[f64], normalized: bool) -> Result<f64> {
    if target.len() != condition.len() {
        return dim_err(format!("target dim {} vs condition dim {}", target.len(), condition.len()));
    }
    density.support.check(target, "target")?;
    density.support.check(condition, "condition")?;
    let d = target.len() as f64;
    let diff = || target.iter().zip(condition).map(|(t, c)| t - c);
    Ok(match density.kind {
        DensityKind::Vmf { kappa } => {
            let v = kappa * dot(target, condition);
            if normalized {
                v + vmf_log_normalizer(target.len(), kappa)?
            } else {
                v
            }
        }
        DensityKind::Gaussian { sigma } => {
            let v = -diff().map(|u| u * u).sum::<f64>() / (2.0 * sigma * sigma);
            if normalized {
                v - 0.5 * d * (2.0 * PI * sigma * sigma).ln()
            } else {
                v
            }
        }
        DensityKind::Laplace { scale } => {
            let v = -diff().map(f64::abs).sum::<f64>() / scale;
            if normalized {
                v - d * (2.0 * scale).ln()
            } else {
                v
            }
        }
        DensityKind::GenNorm { beta, scale } => {
            let v = -diff().map(|u| (u.abs() / scale).powf(beta)).sum::<f64>();
            if normalized {
                v + d * (beta.ln() - (2.0 * scale).ln() - ln_gamma(1.0 / beta))
            } else {
                v
            }
        }
    })
}

/// `log I_nu(x)` for the modified Bessel function of the first kind, `nu >= 0`, `x >= 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x > 700.0 {
        // Hankel asymptotic expansion
        let mu = 4.0 * nu * nu;
        let (mut term, mut sum) = (1.0, 1.0);
        for j in 1..=8 {
            let jf = j as f64;
            term *= -(mu - (2.0 * jf - 1.0).powi(2)) / (jf * 8.0 * x);
            sum += term;
        }
        return x - 0.5 * (2.0 * PI * x).ln() + sum.ln();
    }
    let lh = (0.5 * x).ln();
    let log_term = |m: f64| (2.0 * m + nu) * lh - ln_gamma(m + 1.0) - ln_gamma(m + nu + 1.0);
    // terms peak near m = x/2
    let peak = (0.5 * x).floor();
    let max = log_term(peak);
    let mut sum = 0.0;
    let mut m = 0.0;
    loop {
        let t = (log_term(m) - max).exp();
        sum += t;
        if m > peak && t < 1e-17 * sum {
            break;
        }
        m += 1.0;
    }
    max + sum.ln()
}

/// Log normalizing constant of the vMF density on the unit sphere in `R^d`.
pub fn vmf_log_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidArgument("vMF needs d >= 2".into()));
    }
    let df = d as f64;
    if kappa == 0.0 {
        // uniform on the sphere: 1 / surface area
        return Ok(ln_gamma(0.5 * df) - (2.0f64).ln() - 0.5 * df * PI.ln());
    }
    let nu = 0.5 * df - 1.0;
    Ok(nu * kappa.ln() - 0.5 * df * (2.0 * PI).ln() - log_bessel_i(nu, kappa))
}

/// Expected cosine between a vMF draw and its mean direction, `I_{d/2}(k) / I_{d/2-1}(k)`.
pub fn vmf_mean_resultant(d: usize, kappa: f64) -> f64 {
    let nu = 0.5 * d as f64 - 1.0;
    (log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa)).exp()
}

/// Kernel families for KDE, each normalized on its support at unit bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Laplace,
    GenNorm { beta: f64 },
    /// vMF on the sphere with concentration `kappa / h`. Not translation
    /// invariant in the ambient space: it depends on `u` through `|u|^2`
    /// and on `h` separately.
    Vmf { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
        }
        match kind {
            KernelKind::GenNorm { beta } if !(beta > 0.0) => {
                return Err(Error::InvalidArgument("GenNorm kernel needs beta > 0".into()))
            }
            KernelKind::Vmf { kappa } if !(kappa > 0.0) => {
                return Err(Error::InvalidArgument("vMF kernel needs kappa > 0".into()))
            }
            KernelKind::Vmf { .. } if dim < 2 => return Err(Error::InvalidArgument("vMF kernel needs d >= 2".into())),
            _ => {}
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("kernel dimension must be positive".into()));
        }
        Ok(Self { kind, bandwidth, dim })
    }

    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelKind::Gaussian, bandwidth, dim)
    }

    /// The kernel matching a reconstruction density, with the density's scale
    /// replaced by the bandwidth.
    pub fn for_density(kind: &DensityKind, bandwidth: f64, dim: usize) -> Result<Self> {
        let k = match *kind {
            DensityKind::Vmf { kappa } => KernelKind::Vmf { kappa },
            DensityKind::Gaussian { .. } => KernelKind::Gaussian,
            DensityKind::Laplace { .. } => KernelKind::Laplace,
            DensityKind::GenNorm { beta, .. } => KernelKind::GenNorm { beta },
        };
        Self::new(k, bandwidth, dim)
    }

    /// `log q(u) = log_norm - divisor^-1 * sum |u_c|^power` at unit bandwidth.
    fn shape(&self) -> (f64, f64, f64) {
        let d = self.dim as f64;
        match self.kind {
            KernelKind::Gaussian => (-0.5 * d * (2.0 * PI).ln(), 2.0, 2.0),
            KernelKind::Laplace => (-d * 2f64.ln(), 1.0, 1.0),
            KernelKind::GenNorm { beta } => (d * (beta.ln() - 2f64.ln() - ln_gamma(1.0 / beta)), beta, 1.0),
            KernelKind::Vmf { .. } => unreachable!("vMF kernel has no translation-invariant shape"),
        }
    }

    /// Concentration of the vMF kernel at this bandwidth.
    fn vmf_concentration(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Vmf { kappa } => Some(kappa / self.bandwidth),
            _ => None,
        }
    }

    /// `log` of the KDE volume factor: `d log h`, or 0 for the vMF kernel whose
    /// bandwidth enters through the concentration.
    pub fn log_volume(&self) -> f64 {
        match self.kind {
            KernelKind::Vmf { .. } => 0.0,
            _ => self.dim as f64 * self.bandwidth.ln(),
        }
    }

    /// `log` of the kernel term contributed by a pair `(a, b)`:
    /// `log q((a - b)/h)` for translation-invariant kernels, the log vMF
    /// density of the direction of `a` around the direction of `b` otherwise.
    pub fn log_pair(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.dim || b.len() != self.dim {
            return dim_err(format!("kernel dim {} vs inputs {} and {}", self.dim, a.len(), b.len()));
        }
        if let Some(c) = self.vmf_concentration() {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::InvalidArgument("vMF kernel at a zero vector".into()));
            }
            return Ok(vmf_log_normalizer(self.dim, c)? + c * dot(a, b) / (na * nb));
        }
        let (log_norm, p, s) = self.shape();
        let h = self.bandwidth;
        Ok(log_norm - a.iter().zip(b).map(|(x, y)| abs_pow((x - y) / h, p)).sum::<f64>() / s)
    }

    /// `log kernel_eval(u)`.
    pub fn log_eval(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim {
            return dim_err(format!("kernel dim {} vs u dim {}", self.dim, u.len()));
        }
        if let Some(c) = self.vmf_concentration() {
            // on the sphere, <a, b> = 1 - |a - b|^2 / 2
            let cos = 1.0 - 0.5 * dot(u, u);
            return Ok(vmf_log_normalizer(self.dim, c)? + c * cos);
        }
        let (log_norm, p, s) = self.shape();
        let h = self.bandwidth;
        Ok(log_norm - u.iter().map(|x| abs_pow(x / h, p)).sum::<f64>() / s)
    }

    /// Pairwise `log_pair(a_i, b_j)` recorded on a tape, `k_a x k_b`.
    pub fn log_pair_matrix(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        self.check_cols(tape, a)?;
        self.check_cols(tape, b)?;
        if let Some(c) = self.vmf_concentration() {
            let na = tape.normalize_rows(a);
            let nb = tape.normalize_rows(b);
            let cos = tape.matmul_t(na, nb);
            let s = tape.scale(cos, c);
            return Ok(tape.offset(s, vmf_log_normalizer(self.dim, c)?));
        }
        let (log_norm, p, s) = self.shape();
        let dist = tape.pairwise_dist_pow(a, b, p);
        let scaled = tape.scale(dist, -1.0 / (s * self.bandwidth.powf(p)));
        Ok(tape.offset(scaled, log_norm))
    }

    /// Row-paired `log_pair(a_i, b_i)` recorded on a tape, `k x 1`.
    pub fn log_pair_rows(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        self.check_cols(tape, a)?;
        if tape.shape(a) != tape.shape(b) {
            return dim_err(format!("paired batches {:?} vs {:?}", tape.shape(a), tape.shape(b)));
        }
        if let Some(c) = self.vmf_concentration() {
            let na = tape.normalize_rows(a);
            let nb = tape.normalize_rows(b);
            let cos = tape.row_dot(na, nb);
            let s = tape.scale(cos, c);
            return Ok(tape.offset(s, vmf_log_normalizer(self.dim, c)?));
        }
        let (log_norm, p, s) = self.shape();
        let dist = tape.row_dist_pow(a, b, p);
        let scaled = tape.scale(dist, -1.0 / (s * self.bandwidth.powf(p)));
        Ok(tape.offset(scaled, log_norm))
    }

    fn check_cols(&self, tape: &Tape, v: Var) -> Result<()> {
        let (_, c) = tape.shape(v);
        if c != self.dim {
            return dim_err(format!("kernel dim {} vs batch dim {c}", self.dim));
        }
        Ok(())
    }
}

fn abs_pow(u: f64, p: f64) -> f64 {
    let a = u.abs();
    if p == 2.0 {
        a * a
    } else if p == 1.0 {
        a
    } else {
        a.powf(p)
    }
}

/// `q(u/h)`, without the `h^-d` factor the KDE applies.
pub fn kernel_eval(spec: &KernelSpec, u: &[f64]) -> Result<f64> {
    Ok(spec.log_eval(u)?.exp())
}

/// Similarity `f(a, b)` between projections. The reconstruction density is
/// `q(a | b) ∝ exp f(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Similarity {
    /// `cos(a, b) / tau`, the unnormalized vMF with concentration `1/tau`.
    Cosine { tau: f64 },
    /// `log q((a - b)/h)` including the kernel's normalizer.
    LogKernel(KernelSpec),
}

impl Similarity {
    pub fn cosine(tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        Ok(Similarity::Cosine { tau })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Similarity::Cosine { tau } => {
                if a.len() != b.len() {
                    return dim_err(format!("{} vs {}", a.len(), b.len()));
                }
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::InvalidArgument("cosine of a zero vector".into()));
                }
                Ok(dot(a, b) / (na * nb * tau))
            }
            Similarity::LogKernel(spec) => spec.log_pair(a, b),
        }
    }

    /// `S[i][j] = f(a_i, b_j)`.
    pub fn pairwise(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Similarity::Cosine { tau } => {
                if tape.shape(a).1 != tape.shape(b).1 {
                    return dim_err(format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)));
                }
                let na = tape.normalize_rows(a);
                let nb = tape.normalize_rows(b);
                let s = tape.matmul_t(na, nb);
                Ok(tape.scale(s, 1.0 / tau))
            }
            Similarity::LogKernel(spec) => spec.log_pair_matrix(tape, a, b),
        }
    }

    /// `s[i] = f(a_i, b_i)`, `k x 1`.
    pub fn rowwise(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Similarity::Cosine { tau } => {
                if tape.shape(a) != tape.shape(b) {
                    return dim_err(format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)));
                }
                let na = tape.normalize_rows(a);
                let nb = tape.normalize_rows(b);
                let s = tape.row_dot(na, nb);
                Ok(tape.scale(s, 1.0 / tau))
            }
            Similarity::LogKernel(spec) => spec.log_pair_rows(tape, a, b),
        }
    }
}

/// One vMF draw around the unit vector `mean` (Wood's rejection scheme).
pub fn sample_vmf<R: Rng + ?Sized>(mean: &[f64], kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    let d = mean.len();
    if d < 2 {
        return Err(Error::InvalidArgument("vMF sampling needs d >= 2".into()));
    }
    Support::Sphere.check(mean, "vMF mean")?;
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(0.5 * dm1, 0.5 * dm1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut w = None;
    for _ in 0..VMF_RETRIES {
        let z: f64 = beta.sample(rng);
        let cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * cand + dm1 * (1.0 - x0 * cand).ln() - c >= u.ln() {
            w = Some(cand);
            break;
        }
    }
    let w = w.ok_or(Error::RejectionExhausted(VMF_RETRIES))?;

    // uniform direction in the tangent space at `mean`
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    loop {
        let proj = dot(&v, mean);
        v.iter_mut().zip(mean).for_each(|(x, m)| *x -= proj * m);
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            break;
        }
        v = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    }
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut out: Vec<f64> = mean.iter().zip(&v).map(|(m, t)| w * m + s * t).collect();
    let n = norm(&out);
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// One scalar draw from the zero-centred additive noise of `kind`.
fn sample_scalar_noise<R: Rng + ?Sized>(kind: &DensityKind, rng: &mut R) -> Result<f64> {
    Ok(match *kind {
        DensityKind::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
        DensityKind::Laplace { scale } => {
            let e: f64 = rng.sample(rand_distr::Exp1);
            if rng.random::<bool>() {
                scale * e
            } else {
                -scale * e
            }
        }
        DensityKind::GenNorm { beta, scale } => {
            let g = Gamma::new(1.0 / beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let y: f64 = g.sample(rng);
            let mag = scale * y.powf(1.0 / beta);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        }
        DensityKind::Vmf { .. } => return Err(Error::InvalidArgument("vMF has no additive noise form".into())),
    })
}

/// `d` independent draws of the additive noise, before any projection to a support.
pub fn sample_noise<R: Rng + ?Sized>(kind: &DensityKind, d: usize, rng: &mut R) -> Result<Vec<f64>> {
    (0..d).map(|_| sample_scalar_noise(kind, rng)).collect()
}

/// One draw from `q(. | condition)` mapped onto the density's support.
///
/// Sphere: additive families are drawn in the ambient space and re-normalized.
/// Box: whole draws are rejected until they land inside, at most [`BOX_RETRIES`] times.
pub fn sample<R: Rng + ?Sized>(density: &ReconstructionDensity, condition: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    density.support.check(condition, "condition")?;
    if let DensityKind::Vmf { kappa } = density.kind {
        return sample_vmf(condition, kappa, rng);
    }
    let d = condition.len();
    match density.support {
        Support::Unbounded => {
            let n = sample_noise(&density.kind, d, rng)?;
            Ok(condition.iter().zip(n).map(|(c, e)| c + e).collect())
        }
        Support::Sphere => {
            for _ in 0..BOX_RETRIES {
                let n = sample_noise(&density.kind, d, rng)?;
                let mut x: Vec<f64> = condition.iter().zip(n).map(|(c, e)| c + e).collect();
                let l = norm(&x);
                if l > 1e-12 {
                    x.iter_mut().for_each(|v| *v /= l);
                    return Ok(x);
                }
            }
            Err(Error::RejectionExhausted(BOX_RETRIES))
        }
        Support::Box => {
            for _ in 0..BOX_RETRIES {
                let n = sample_noise(&density.kind, d, rng)?;
                let x: Vec<f64> = condition.iter().zip(n).map(|(c, e)| c + e).collect();
                if Support::Box.contains(&x) {
                    return Ok(x);
                }
            }
            Err(Error::RejectionExhausted(BOX_RETRIES))
        }
    }
}

/// Uniform draw on the unit sphere in `R^d`.
pub fn sample_sphere_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vmf(kappa: f64) -> ReconstructionDensity {
        ReconstructionDensity::new(DensityKind::Vmf { kappa }, Support::Sphere).unwrap()
    }

    #[test]
    fn vmf_unnormalized_values() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(log_density(&vmf(10.0), &e1, &e1, false).unwrap(), 10.0);
        assert_eq!(log_density(&vmf(10.0), &e1, &e2, false).unwrap(), 0.0);
    }

    #[test]
    fn vmf_rejects_off_sphere() {
        let r = log_density(&vmf(1.0), &[1.0, 1.0], &[1.0, 0.0], false);
        assert!(matches!(r, Err(Error::OffSupport(_))));
        assert!(ReconstructionDensity::new(DensityKind::Vmf { kappa: 1.0 }, Support::Box).is_err());
    }

    #[test]
    fn gaussian_unnormalized() {
        let g = ReconstructionDensity::new(DensityKind::Gaussian { sigma: 1.0 }, Support::Unbounded).unwrap();
        assert_eq!(log_density(&g, &[1.0, 0.0], &[0.0, 0.0], false).unwrap(), -0.5);
    }

    #[test]
    fn vmf_normalizer_closed_form_in_3d() {
        for kappa in [0.5, 1.0, 10.0, 50.0] {
            let expect = (kappa / (4.0 * PI * f64::sinh(kappa))).ln();
            let got = vmf_log_normalizer(3, kappa).unwrap();
            assert!((got - expect).abs() < 1e-10, "{kappa}: {got} vs {expect}");
        }
    }

    #[test]
    fn bessel_half_order() {
        // I_{1/2}(x) = sqrt(2 / (pi x)) sinh x
        for x in [0.1, 1.0, 5.0, 30.0, 300.0] {
            let expect = 0.5 * (2.0 / (PI * x)).ln() + f64::sinh(x).ln();
            assert!((log_bessel_i(0.5, x) - expect).abs() < 1e-10, "x = {x}");
        }
        let x = 900.0;
        let expect = 0.5 * (2.0 / (PI * x)).ln() + x - 2f64.ln();
        assert!((log_bessel_i(0.5, x) - expect).abs() < 1e-10);
    }

    #[test]
    fn kernel_at_origin_and_unit() {
        for d in 1..5 {
            let k = KernelSpec::gaussian(0.7, d).unwrap();
            let v = kernel_eval(&k, &vec![0.0; d]).unwrap();
            assert!((v - (2.0 * PI).powf(-(d as f64) / 2.0)).abs() < 1e-15);
        }
        let k = KernelSpec::gaussian(2.0, 1).unwrap();
        assert!((kernel_eval(&k, &[2.0]).unwrap() - 0.24197072451914337).abs() < 1e-12);
    }

    #[test]
    fn kernel_symmetry() {
        let kinds = [KernelKind::Gaussian, KernelKind::Laplace, KernelKind::GenNorm { beta: 3.0 }];
        for kind in kinds {
            let k = KernelSpec::new(kind, 0.3, 3).unwrap();
            let u = [0.1, -0.4, 0.25];
            let nu: Vec<f64> = u.iter().map(|x| -x).collect();
            assert_eq!(kernel_eval(&k, &u).unwrap(), kernel_eval(&k, &nu).unwrap());
        }
    }

    #[test]
    fn vmf_sampler_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = [0.6, 0.0, -0.8, 0.0];
        let x = sample_vmf(&mu, 1e6, &mut rng).unwrap();
        assert!(dot(&x, &mu) >= 1.0 - 1e-4);
        assert!((norm(&x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_conditional_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dens = ReconstructionDensity::new(DensityKind::Laplace { scale: 0.05 }, Support::Box).unwrap();
        for _ in 0..200 {
            let x = sample(&dens, &[0.99, -0.99, 0.0], &mut rng).unwrap();
            assert!(Support::Box.contains(&x));
        }
    }

    #[test]
    fn box_rejection_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dens = ReconstructionDensity::new(DensityKind::Gaussian { sigma: 100.0 }, Support::Box).unwrap();
        let r = sample(&dens, &[0.0; 8], &mut rng);
        assert!(matches!(r, Err(Error::RejectionExhausted(BOX_RETRIES))));
    }

    #[test]
    fn gennorm_beta_two_variance() {
        let k = DensityKind::GenNorm { beta: 2.0, scale: 0.3 };
        assert!((k.noise_variance().unwrap() - 0.045).abs() < 1e-12);
    }
}
