//! Latent-variable generative processes for identifiability experiments.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::densities::{sample, sample_noise, sample_sphere_uniform, DensityKind, ReconstructionDensity, Support};
use crate::error::{dim_err, Error, Result};
use crate::seeding::{stream, stream_rng};

/// Condition numbers at or above this are re-drawn.
pub const MAX_CONDITION: f64 = 100.0;
const LEAKY_SOFTPLUS_SLOPE: f64 = 0.2;
const LOG_STRETCH: f64 = 0.5;
const SHARPNESS: f64 = 10.0;

/// Marginal distribution of the first latent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    Uniform,
    /// On the sphere: `e_1 + sigma * N(0, I)` projected onto the sphere.
    Normal { sigma: f64 },
    /// On the sphere: `e_1 + Laplace(scale)` projected onto the sphere.
    Laplace { scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub layers: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerativeSpec {
    pub space: Support,
    pub dim: usize,
    pub marginal: Marginal,
    /// Law of the second latent given the first.
    pub conditional: DensityKind,
    pub mixing: MixingSpec,
}

impl Default for GenerativeSpec {
    /// Uniform latents on the 4-sphere with a vMF(1) conditional and a 3-layer mixing.
    fn default() -> Self {
        Self {
            space: Support::Sphere,
            dim: 5,
            marginal: Marginal::Uniform,
            conditional: DensityKind::Vmf { kappa: 1.0 },
            mixing: MixingSpec { layers: 3, seed: 0 },
        }
    }
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        if self.space == Support::Sphere && self.dim < 2 {
            return Err(Error::InvalidArgument("sphere latents need d >= 2".into()));
        }
        match (self.space, self.marginal) {
            (Support::Unbounded, Marginal::Uniform) => {
                return Err(Error::InvalidArgument("a uniform marginal needs a bounded space".into()))
            }
            (Support::Box, Marginal::Normal { .. } | Marginal::Laplace { .. }) => {
                return Err(Error::InvalidArgument("box latents only support a uniform marginal".into()))
            }
            (_, Marginal::Normal { sigma: s } | Marginal::Laplace { scale: s }) if !(s > 0.0) => {
                return Err(Error::InvalidArgument("marginal scale must be positive".into()))
            }
            _ => {}
        }
        self.conditional_density().map(|_| ())
    }

    pub fn conditional_density(&self) -> Result<ReconstructionDensity> {
        ReconstructionDensity::new(self.conditional, self.space)
    }
}

/// Draws the first latent from the marginal.
pub fn sample_marginal<R: Rng + ?Sized>(spec: &GenerativeSpec, rng: &mut R) -> Result<Vec<f64>> {
    let d = spec.dim;
    Ok(match (spec.space, spec.marginal) {
        (Support::Sphere, Marginal::Uniform) => sample_sphere_uniform(d, rng),
        (Support::Box, Marginal::Uniform) => (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        (space, Marginal::Normal { sigma }) => {
            let n = sample_noise(&DensityKind::Gaussian { sigma }, d, rng)?;
            around_pole(space, n)?
        }
        (space, Marginal::Laplace { scale }) => {
            let n = sample_noise(&DensityKind::Laplace { scale }, d, rng)?;
            around_pole(space, n)?
        }
        (Support::Unbounded, Marginal::Uniform) => {
            return Err(Error::InvalidArgument("a uniform marginal needs a bounded space".into()))
        }
    })
}

fn around_pole(space: Support, mut noise: Vec<f64>) -> Result<Vec<f64>> {
    match space {
        Support::Unbounded => Ok(noise),
        Support::Sphere => {
            noise[0] += 1.0;
            let n = crate::autodiff::norm(&noise);
            if n < 1e-12 {
                return Err(Error::NonFinite("degenerate marginal draw".into()));
            }
            Ok(noise.into_iter().map(|v| v / n).collect())
        }
        Support::Box => Err(Error::InvalidArgument("box latents only support a uniform marginal".into())),
    }
}

/// `(z1, z2)` with `z1` from the marginal and `z2 ~ p(. | z1)`.
pub fn sample_latent_pair<R: Rng + ?Sized>(spec: &GenerativeSpec, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let z1 = sample_marginal(spec, rng)?;
    let z2 = sample(&spec.conditional_density()?, &z1, rng)?;
    Ok((z1, z2))
}

/// `k` latent pairs as two `k x d` matrices.
pub fn sample_latent_batch<R: Rng + ?Sized>(spec: &GenerativeSpec, k: usize, rng: &mut R) -> Result<(Matrix, Matrix)> {
    let dens = spec.conditional_density()?;
    let mut a = Vec::with_capacity(k * spec.dim);
    let mut b = Vec::with_capacity(k * spec.dim);
    for _ in 0..k {
        let z1 = sample_marginal(spec, rng)?;
        let z2 = sample(&dens, &z1, rng)?;
        a.extend(z1);
        b.extend(z2);
    }
    Ok((Matrix::from_vec(k, spec.dim, a)?, Matrix::from_vec(k, spec.dim, b)?))
}

/// Smooth, strictly increasing `a x + (1 - a) softplus(x)`.
pub fn leaky_softplus(x: f64) -> f64 {
    let bx = SHARPNESS * x;
    let sp = if bx > 30.0 { bx } else { bx.exp().ln_1p() };
    LEAKY_SOFTPLUS_SLOPE * x + (1.0 - LEAKY_SOFTPLUS_SLOPE) * sp / SHARPNESS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingLayer {
    /// `d x d`, applied as `x W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub condition_number: f64,
}

/// A fixed invertible map `R^d -> R^d` made of square affine layers with a
/// leaky-softplus between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingNet {
    pub dim: usize,
    pub layers: Vec<MixingLayer>,
    /// Draws rejected for a condition number at or above [`MAX_CONDITION`].
    pub redraws: usize,
}

pub fn condition_number(w: &Matrix) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Haar-random orthogonal matrix with its columns stretched by factors in
/// `[exp(-LOG_STRETCH), exp(LOG_STRETCH)]`.
fn orthogonalish<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let g = nalgebra::DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let stretch: Vec<f64> = (0..dim)
        .map(|j| {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            sign * (rng.random_range(-LOG_STRETCH..=LOG_STRETCH)).exp()
        })
        .collect();
    Matrix::from_fn(dim, dim, |i, j| q[(i, j)] * stretch[j])
}

impl MixingNet {
    pub fn new(dim: usize, spec: &MixingSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("mixing dimension must be positive".into()));
        }
        let mut rng = stream_rng(spec.seed, stream::MIXING);
        let mut layers = Vec::with_capacity(spec.layers);
        let mut redraws = 0;
        for _ in 0..spec.layers {
            let (weight, cond) = loop {
                let w = orthogonalish(dim, &mut rng);
                let c = condition_number(&w);
                if c < MAX_CONDITION {
                    break (w, c);
                }
                redraws += 1;
            };
            let bias = (0..dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            layers.push(MixingLayer { weight, bias, condition_number: cond });
        }
        Ok(Self { dim, layers, redraws })
    }

    pub fn mix(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return dim_err(format!("latent dim {} vs mixing dim {}", z.len(), self.dim));
        }
        let mut h = z.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.bias.clone();
            for (i, hi) in h.iter().enumerate() {
                for (o, w) in out.iter_mut().zip(layer.weight.row(i)) {
                    *o += hi * w;
                }
            }
            if l < last {
                out.iter_mut().for_each(|v| *v = leaky_softplus(*v));
            }
            h = out;
        }
        Ok(h)
    }

    pub fn mix_batch(&self, z: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = z.row_iter().map(|r| self.mix(r)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim));
        }
        Matrix::from_rows(&rows)
    }
}

/// Latents and their two mixed views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub z1: Matrix,
    pub z2: Matrix,
    pub x1: Matrix,
    pub x2: Matrix,
}

pub fn sample_views<R: Rng + ?Sized>(spec: &GenerativeSpec, net: &MixingNet, k: usize, rng: &mut R) -> Result<ViewBatch> {
    let (z1, z2) = sample_latent_batch(spec, k, rng)?;
    Ok(ViewBatch {
        x1: net.mix_batch(&z1)?,
        x2: net.mix_batch(&z2)?,
        z1,
        z2,
    })
}
