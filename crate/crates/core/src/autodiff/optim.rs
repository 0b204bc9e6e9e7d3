//! Adam and exponential-moving-average parameter updates.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::mlp::MlpParams;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Fresh state with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return dim_err(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return dim_err(format!("adam: tensor {i} param {:?} grad {:?}", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let (pd, md, vd) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
        for (j, &gj) in g.as_slice().iter().enumerate() {
            md[j] = b1 * md[j] + (1.0 - b1) * gj;
            vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
            let m_hat = md[j] / c1;
            let v_hat = vd[j] / c2;
            pd[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_update(teacher: &mut MlpParams, student: &MlpParams, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("EMA coefficient {lambda} outside [0, 1]")));
    }
    if !teacher.same_shape(student) {
        return dim_err("teacher and student shapes differ");
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}
