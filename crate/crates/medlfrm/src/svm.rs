//! Linear hinge-loss SVM with per-example margins and per-example box
//! constraints, solved by dual coordinate ascent. Example m contributes
//! box_m * xi_m to the primal and 0 <= omega_m <= box_m to the dual, so the
//! per-example slack cost is carried entirely by the box.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SvmProblem {
    /// M feature vectors of dimension P.
    pub features: Vec<Vec<f64>>,
    /// Labels in {+1, -1}.
    pub labels: Vec<f64>,
    /// Per-example margin targets (may be negative for adaptive costs).
    pub margins: Vec<f64>,
    /// Per-example dual upper bounds (= per-example slack costs).
    pub boxes: Vec<f64>,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl SvmProblem {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        margins: Vec<f64>,
        boxes: Vec<f64>,
    ) -> Result<Self> {
        let m = features.len();
        if m == 0 {
            return Err(Error::InvalidArgument("SVM problem needs at least one example".to_string()));
        }
        let p = features[0].len();
        if p == 0 {
            return Err(Error::InvalidArgument("zero-dimension feature vectors".to_string()));
        }
        if labels.len() != m || margins.len() != m || boxes.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "features/labels/margins/boxes lengths differ: {m}/{}/{}/{}",
                labels.len(),
                margins.len(),
                boxes.len()
            )));
        }
        if features.iter().any(|f| f.len() != p) {
            return Err(Error::DimensionMismatch("ragged feature vectors".to_string()));
        }
        if margins.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("margins must be finite".to_string()));
        }
        if boxes.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::InvalidArgument("boxes must be positive".to_string()));
        }
        Ok(SvmProblem {
            features,
            labels,
            margins,
            boxes,
            tol: 1e-4,
            max_sweeps: 1000,
        })
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceStatus {
    Converged,
    MaxSweepsReached,
}

#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub weights: Vec<f64>,
    pub duals: Vec<f64>,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub iterations: usize,
    pub status: ConvergenceStatus,
}

/// Primal objective: 0.5 ||w||^2 + sum_m box_m * max(0, margin_m - y_m <w, phi_m>).
pub fn primal_objective(prob: &SvmProblem, weights: &[f64]) -> f64 {
    let reg: f64 = 0.5 * weights.iter().map(|w| w * w).sum::<f64>();
    let loss: f64 = (0..prob.len())
        .map(|m| {
            let score: f64 = dot(weights, &prob.features[m]);
            prob.boxes[m] * (prob.margins[m] - prob.labels[m] * score).max(0.0)
        })
        .sum();
    reg + loss
}

/// Dual objective: sum_m margin_m omega_m - 0.5 ||w(omega)||^2.
pub fn dual_objective(prob: &SvmProblem, duals: &[f64], weights: &[f64]) -> f64 {
    let lin: f64 = duals
        .iter()
        .zip(&prob.margins)
        .map(|(o, l)| o * l)
        .sum();
    lin - 0.5 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Dual coordinate ascent with random permutation per sweep and closed-form
/// 1-D updates. Warm duals, when given, seed the solve.
pub fn solve(prob: &SvmProblem, warm: Option<&[f64]>) -> Result<SvmSolution> {
    let m = prob.len();
    let p = prob.dim();

    let mut duals = match warm {
        Some(w) => {
            if w.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "warm start has {} duals, problem has {m} examples",
                    w.len()
                )));
            }
            for (i, &v) in w.iter().enumerate() {
                if v < -1e-12 || v > prob.boxes[i] + 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "warm dual {i} = {v} outside [0, {}]",
                        prob.boxes[i]
                    )));
                }
            }
            w.iter()
                .zip(&prob.boxes)
                .map(|(&v, &b)| v.clamp(0.0, b))
                .collect::<Vec<f64>>()
        }
        None => vec![0.0; m],
    };

    // w = sum_m duals_m y_m phi_m, maintained incrementally.
    let mut weights = vec![0.0; p];
    for (mi, &d) in duals.iter().enumerate() {
        if d != 0.0 {
            axpy(&mut weights, d * prob.labels[mi], &prob.features[mi]);
        }
    }
    let sq_norms: Vec<f64> = prob.features.iter().map(|f| dot(f, f)).collect();

    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5f3c);
    let mut sweeps = 0;
    let mut status = ConvergenceStatus::MaxSweepsReached;

    while sweeps < prob.max_sweeps {
        order.shuffle(&mut rng);
        let mut max_violation: f64 = 0.0;
        for &mi in &order {
            let y = prob.labels[mi];
            let grad = prob.margins[mi] - y * dot(&weights, &prob.features[mi]);
            let old = duals[mi];
            let new = if sq_norms[mi] > 0.0 {
                (old + grad / sq_norms[mi]).clamp(0.0, prob.boxes[mi])
            } else {
                // Zero feature vector: dual objective is linear in omega.
                if grad > 0.0 {
                    prob.boxes[mi]
                } else {
                    0.0
                }
            };
            // Projected gradient for the KKT check.
            let pg = if old <= 0.0 {
                grad.max(0.0)
            } else if old >= prob.boxes[mi] {
                grad.min(0.0)
            } else {
                grad
            };
            max_violation = max_violation.max(pg.abs());
            if new != old {
                axpy(&mut weights, (new - old) * y, &prob.features[mi]);
                duals[mi] = new;
            }
        }
        sweeps += 1;
        if max_violation <= prob.tol {
            status = ConvergenceStatus::Converged;
            break;
        }
    }

    // Recompute w from the duals so the weight-recovery identity holds exactly.
    let mut weights = vec![0.0; p];
    for (mi, &d) in duals.iter().enumerate() {
        if d != 0.0 {
            axpy(&mut weights, d * prob.labels[mi], &prob.features[mi]);
        }
    }
    let primal_obj = primal_objective(prob, &weights);
    let dual_obj = dual_objective(prob, &duals, &weights);
    Ok(SvmSolution {
        weights,
        duals,
        primal_obj,
        dual_obj,
        iterations: sweeps,
        status,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
