//! Central-difference gradient verification.
//!
//! This is the independent oracle for every adjoint in the op registry:
//! it never touches the backward pass except to compare against it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::array::NDArray;
use crate::autodiff::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub pass: bool,
}

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare `backward()` against central finite differences, elementwise.
///
/// `build` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar-valued root. It is invoked twice on identical inputs to detect
/// non-determinism, then twice per checked coordinate for the differences.
pub fn grad_check<F>(build: F, x: &NDArray, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    grad_check_subset(build, x, h, tol, None, 0)
}

/// As [`grad_check`], but optionally limited to a seeded random subset of
/// coordinates so large composites stay affordable.
pub fn grad_check_subset<F>(
    build: F,
    x: &NDArray,
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check: h must be positive".to_string()));
    }
    let eval = |values: &NDArray| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(values.clone());
        let root = build(&mut tape, leaf)?;
        let v = tape.forward(root)?;
        if !v.is_scalar() {
            return Err(Error::contract(format!(
                "grad_check: root must be scalar, got {:?}",
                v.shape()
            )));
        }
        Ok(v.scalar_value())
    };

    let v1 = eval(x)?;
    let v2 = eval(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::numerical(
            None,
            format!("tape builder is non-deterministic: {v1:?} vs {v2:?}"),
        ));
    }

    // analytic gradient
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = build(&mut tape, leaf)?;
    let analytic = tape.backward(root, leaf)?;

    let n = x.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => {
            let mut all: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            all.shuffle(&mut rng);
            all.truncate(m);
            all
        }
        _ => (0..n).collect(),
    };

    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for &i in &coords {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(&NDArray::new(x.shape().to_vec(), plus))?;
        let fm = eval(&NDArray::new(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_err(analytic.data()[i], numeric);
        if err > max_err {
            max_err = err;
        }
    }

    Ok(GradCheckReport { max_rel_err: max_err, tol, checked: coords.len(), pass: max_err <= tol })
}
