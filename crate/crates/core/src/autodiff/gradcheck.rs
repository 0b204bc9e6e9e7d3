//! Central finite-difference checks of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Step used by the verification suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared against finite differences.
    pub checked: usize,
    /// Tape gradients, one per parameter.
    pub analytic: Vec<Matrix>,
}

fn evaluate<F>(loss_fn: &F, params: &[Matrix]) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok((tape, loss, vars))
}

fn loss_value<F>(loss_fn: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, loss, _) = evaluate(loss_fn, params)?;
    let (rows, cols) = tape.shape(loss);
    if (rows, cols) != (1, 1) {
        return Err(Error::NotScalar { rows, cols });
    }
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives the tape and one trainable leaf per entry of `params`.
/// When `max_coords` is set and the parameters have more coordinates than
/// that, an evenly strided subset is checked.
pub fn grad_check<F>(loss_fn: F, params: &[Matrix], step: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    let (tape, loss, vars) = evaluate(&loss_fn, params)?;
    let grads = tape.backward_verified(loss)?;
    let value = tape.scalar(loss);
    let again = loss_value(&loss_fn, params)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(value, again));
    }
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, m)| (0..m.len()).map(move |j| (p, j)))
        .collect();
    let stride = match max_coords {
        Some(n) if n > 0 && coords.len() > n => coords.len().div_ceil(n),
        _ => 1,
    };

    let mut work: Vec<Matrix> = params.to_vec();
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for &(p, j) in coords.iter().step_by(stride) {
        let orig = work[p].as_slice()[j];
        work[p].as_mut_slice()[j] = orig + step;
        let up = loss_value(&loss_fn, &work)?;
        work[p].as_mut_slice()[j] = orig - step;
        let down = loss_value(&loss_fn, &work)?;
        work[p].as_mut_slice()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[p].as_slice()[j];
        max_rel = max_rel.max(relative_error(a, numeric));
        max_abs = max_abs.max((a - numeric).abs());
        checked += 1;
    }
    Ok(GradCheckReport {
        loss: value,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
        analytic,
    })
}
