//! Fully connected networks: encoders, projectors and predictors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{dim_err, Error, Result};

/// Post-processing applied to the last layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    None,
    /// L2-normalize every output row onto the unit sphere.
    Sphere,
    /// Elementwise `tanh`, mapping into the box `(-1, 1)^d`.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in x out`.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
}

/// Parameters of a leaky-ReLU MLP. No activation follows the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub slope: f64,
    pub head: Head,
}

/// Tape handles of the parameters used by one forward pass.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Gradients in the order of [`MlpParams::tensors`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)])
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl MlpParams {
    /// Random initialization, uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], slope: f64, head: Head, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least input and output dims".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)),
                    bias: Matrix::from_fn(1, w[1], |_, _| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        let p = Self { layers, slope, head };
        p.validate()?;
        Ok(p)
    }

    pub fn from_layers(layers: Vec<Layer>, slope: f64, head: Head) -> Result<Self> {
        let p = Self { layers, slope, head };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("MLP has no layers".into()));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return Err(Error::InvalidArgument(format!("leaky-ReLU slope {} not in (0, 1]", self.slope)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return dim_err(format!("layer {i}: bias {:?} vs weight {:?}", l.bias.shape(), l.weight.shape()));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return dim_err(format!("layer {i} input {} does not chain", l.weight.rows()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Registers the parameters on `tape` and records the forward pass.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, MlpVars)> {
        let (_, cols) = tape.shape(input);
        if cols != self.input_dim() {
            return dim_err(format!("input has {cols} columns, network expects {}", self.input_dim()));
        }
        let mut h = input;
        let mut vars = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            vars.push((w, b));
            let lin = tape.matmul(h, w);
            h = tape.add_row(lin, b);
            if i < last {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        h = match self.head {
            Head::None => h,
            Head::Sphere => tape.normalize_rows(h),
            Head::Box => tape.tanh(h),
        };
        tape.value(h).ensure_finite("network activation")?;
        Ok((h, MlpVars { layers: vars }))
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (y, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: Matrix, b: Matrix, slope: f64) -> MlpParams {
        MlpParams::from_layers(vec![Layer { weight: w, bias: b }], slope, Head::None).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = single(Matrix::zeros(3, 2), Matrix::zeros(1, 2), 0.2);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let y = net.predict(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_are_identity() {
        let net = single(Matrix::identity(3), Matrix::zeros(1, 3), 1.0);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn affine_scalar() {
        let net = single(Matrix::scalar(2.0), Matrix::scalar(1.0), 0.2);
        assert_eq!(net.predict(&Matrix::scalar(3.0)).unwrap().item(), 7.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = single(Matrix::zeros(3, 2), Matrix::zeros(1, 2), 0.2);
        assert!(matches!(net.predict(&Matrix::zeros(1, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_activation_is_an_error() {
        let net = single(Matrix::scalar(1e308), Matrix::scalar(0.0), 0.2);
        assert!(matches!(net.predict(&Matrix::scalar(10.0)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sphere_head_rows_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(&[4, 16, 16, 3], 0.2, Head::Sphere, &mut rng).unwrap();
        let x = Matrix::from_fn(32, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let y = net.predict(&x).unwrap();
        for r in y.row_iter() {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(&[3, 8, 2], 0.2, Head::Box, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.3 + j as f64);
        assert!(net.predict(&x).unwrap().bit_eq(&net.predict(&x).unwrap()));
    }

    #[test]
    fn invalid_slope_rejected() {
        assert!(MlpParams::from_layers(
            vec![Layer { weight: Matrix::zeros(1, 1), bias: Matrix::zeros(1, 1) }],
            0.0,
            Head::None
        )
        .is_err());
    }
}
