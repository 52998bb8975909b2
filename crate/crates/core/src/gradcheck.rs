//! Central-difference verification of analytic gradients.
//!
//! The checker perturbs parameter coordinates one at a time and compares
//! `(loss(θ+h) − loss(θ−h)) / 2h` against the analytic gradient supplied
//! by the caller. Everything runs in `f64`; central differences at
//! `h = 1e-3` are not reliable in single precision.

use std::collections::BTreeMap;

use crate::rng::RngStream;
use crate::tensor::{NamedTensors, Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-12;

/// Values below this are numerically zero. A structurally zero gradient
/// (e.g. a bias that softmax shift-invariance cancels) measures as f64
/// cancellation noise around 1e-13 in the central difference; comparing
/// two such zeros against the 1e-12 relative floor would report phantom
/// errors.
const NOISE_ATOL: f64 = 1e-10;

/// Which coordinates of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate — affordable for small parameter sets.
    All,
    /// A deterministic random sample of up to `n` coordinates per
    /// parameter (sampling keyed by the parameter name).
    Sample(usize),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked_coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let a = if a.abs() < NOISE_ATOL { 0.0 } else { a };
    let n = if n.abs() < NOISE_ATOL { 0.0 } else { n };
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare `analytic` gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic (dropout in infer mode or with a fixed
/// mask). A non-finite loss during perturbation is an error naming the
/// parameter being perturbed.
pub fn check_gradient<F>(
    mut loss_fn: F,
    params: &NamedTensors<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    h: f64,
    tol: f64,
    selection: CoordSelection,
    rng: &RngStream,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&NamedTensors<f64>) -> Result<f64, TensorError>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(TensorError::InvalidParam(
            "gradcheck step and tolerance must be positive".into(),
        ));
    }
    let mut work: NamedTensors<f64> = params.clone();
    let mut entries = Vec::with_capacity(params.len());
    let mut global_max = 0.0f64;

    for (name, tensor) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| TensorError::InvalidParam(format!("no analytic gradient for '{name}'")))?;
        if grad.len() != tensor.len() {
            return Err(TensorError::LengthMismatch {
                shape: tensor.shape().to_vec(),
                expected: tensor.len(),
                got: grad.len(),
            });
        }

        let coords: Vec<usize> = match selection {
            CoordSelection::All => (0..tensor.len()).collect(),
            CoordSelection::Sample(n) => {
                if tensor.len() <= n {
                    (0..tensor.len()).collect()
                } else {
                    let mut idx: Vec<usize> = (0..tensor.len()).collect();
                    let mut r = rng.derive_str(name);
                    r.shuffle(&mut idx);
                    idx.truncate(n);
                    idx.sort_unstable();
                    idx
                }
            }
        };

        let mut max_err = 0.0f64;
        for &c in &coords {
            let original = tensor.values()[c];

            set_coord(&mut work, name, c, original + h)?;
            let up = loss_fn(&work)?;
            set_coord(&mut work, name, c, original - h)?;
            let down = loss_fn(&work)?;
            set_coord(&mut work, name, c, original)?;

            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFiniteLoss(name.clone()));
            }
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(rel_err(grad[c], numeric));
        }

        global_max = global_max.max(max_err);
        entries.push(GradCheckEntry {
            name: name.clone(),
            checked_coords: coords.len(),
            max_rel_err: max_err,
            pass: max_err <= tol,
        });
    }

    let pass = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        entries,
        max_rel_err: global_max,
        pass,
    })
}

fn set_coord(
    params: &mut NamedTensors<f64>,
    name: &str,
    coord: usize,
    value: f64,
) -> Result<(), TensorError> {
    let t: &mut Tensor<f64> = params
        .get_mut(name)
        .ok_or_else(|| TensorError::InvalidParam(format!("parameter '{name}' missing")))?;
    t.values_mut()[coord] = value;
    Ok(())
}
