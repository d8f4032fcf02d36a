//! Objective and gradient diagnostics, accuracy metrics, convergence
//! reports, and the Wilcoxon signed-rank test.
//!
//! The central objective over the parameter matrix `W` is
//! `G(W) = sum_i F_i(w_i) + lambda * sum_{i<j} A(||w_i - w_j||^2)`.
//! `grad_g` is the exact gradient of that expression (each unordered pair
//! contributes to both of its columns, hence the factor 2 on the pairwise
//! term), which is what the finite-difference checks validate. Note that the
//! message-passing update applies `A'` once per unordered pair, so a run with
//! penalty weight `lambda` descends `G` with coefficient `lambda / 2`; the
//! federation layer records its objectives accordingly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCurve, AttentionFunction, CollabMatrix};
use crate::fmath;
use crate::models::Client;
use crate::optim::StepSchedule;
use crate::params::{frobenius_norm, sq_distance, ParamMatrix, ParamVector};
use crate::{Error, Result};

fn check_clients(w: &ParamMatrix, clients: &[Client]) -> Result<()> {
    if w.clients() != clients.len() {
        return Err(Error::DimensionMismatch {
            context: "objective clients",
            expected: clients.len(),
            actual: w.clients(),
        });
    }
    Ok(())
}

/// `G(W)`: summed client train losses plus `lambda` times the pairwise
/// attention penalty over unordered pairs.
pub fn objective_g(
    w: &ParamMatrix,
    clients: &[Client],
    attention: &AttentionFunction,
    lambda: f64,
) -> Result<f64> {
    check_clients(w, clients)?;
    let mut total = 0.0;
    for (i, client) in clients.iter().enumerate() {
        total += client.model.loss(w.column(i), &client.data.train)?;
    }
    Ok(total + lambda * attention_penalty(w, attention)?)
}

fn attention_penalty(w: &ParamMatrix, attention: &AttentionFunction) -> Result<f64> {
    let m = w.clients();
    let mut penalty = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            penalty += attention.value(sq_distance(w.column(i), w.column(j))?)?;
        }
    }
    Ok(penalty)
}

/// Gradient of `G` as a d-by-m matrix: column `i` is
/// `grad F_i(w_i) + 2 lambda sum_{j != i} A'(||w_i - w_j||^2) (w_i - w_j)`.
pub fn grad_g(
    w: &ParamMatrix,
    clients: &[Client],
    attention: &AttentionFunction,
    lambda: f64,
) -> Result<ParamMatrix> {
    let (loss_part, penalty_part) = grad_g_parts(w, clients, attention, lambda)?;
    let cols = loss_part
        .columns()
        .iter()
        .zip(penalty_part.columns().iter())
        .map(|(f, a)| f.axpy(1.0, a))
        .collect::<Result<Vec<_>>>()?;
    ParamMatrix::from_columns(cols)
}

/// The two gradient components separately: `grad F` and the `lambda`-scaled
/// pairwise penalty gradient.
#[allow(clippy::needless_range_loop)]
pub fn grad_g_parts(
    w: &ParamMatrix,
    clients: &[Client],
    attention: &AttentionFunction,
    lambda: f64,
) -> Result<(ParamMatrix, ParamMatrix)> {
    check_clients(w, clients)?;
    let m = w.clients();
    let d = w.dim();

    let mut loss_cols = Vec::with_capacity(m);
    for (i, client) in clients.iter().enumerate() {
        loss_cols.push(client.model.grad(w.column(i), &client.data.train)?);
    }

    let mut penalty_cols = vec![vec![0.0; d]; m];
    for i in 0..m {
        for j in i + 1..m {
            let t = sq_distance(w.column(i), w.column(j))?;
            let coeff = 2.0 * lambda * attention.deriv(t)?;
            for k in 0..d {
                let delta = coeff * (w.column(i)[k] - w.column(j)[k]);
                penalty_cols[i][k] += delta;
                penalty_cols[j][k] -= delta;
            }
        }
    }
    let penalty = ParamMatrix::from_columns(
        penalty_cols
            .into_iter()
            .map(ParamVector::new)
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok((ParamMatrix::from_columns(loss_cols)?, penalty))
}

/// Frobenius norm of the full gradient of `G`.
pub fn grad_norm_g(
    w: &ParamMatrix,
    clients: &[Client],
    attention: &AttentionFunction,
    lambda: f64,
) -> Result<f64> {
    Ok(frobenius_norm(&grad_g(w, clients, attention, lambda)?))
}

/// Everything the convergence report needs from one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    /// `G(W^k)`.
    pub objective: f64,
    /// `||grad G(W^k)||`.
    pub grad_norm: f64,
    /// `||grad F(W^k)||` (client losses only).
    pub loss_grad_norm: f64,
    /// `lambda * ||grad A(W^k)||` (penalty only, lambda-scaled); the bound
    /// constant estimate takes the max of this and the loss term.
    pub penalty_grad_norm: f64,
}

/// Objective value plus all gradient norms in one pass.
pub fn trajectory_point(
    w: &ParamMatrix,
    clients: &[Client],
    attention: &AttentionFunction,
    lambda: f64,
) -> Result<TrajectoryPoint> {
    let objective = objective_g(w, clients, attention, lambda)?;
    let (loss_part, penalty_part) = grad_g_parts(w, clients, attention, lambda)?;
    let full_cols = loss_part
        .columns()
        .iter()
        .zip(penalty_part.columns().iter())
        .map(|(f, a)| f.axpy(1.0, a))
        .collect::<Result<Vec<_>>>()?;
    let grad_norm = frobenius_norm(&ParamMatrix::from_columns(full_cols)?);
    Ok(TrajectoryPoint {
        objective,
        grad_norm,
        loss_grad_norm: frobenius_norm(&loss_part),
        penalty_grad_norm: frobenius_norm(&penalty_part),
    })
}

/// Mean test accuracy over clients (classification models only).
pub fn mean_test_accuracy(w: &ParamMatrix, clients: &[Client]) -> Result<f64> {
    check_clients(w, clients)?;
    let mut total = 0.0;
    for (i, client) in clients.iter().enumerate() {
        total += client.model.accuracy(w.column(i), &client.data.test)?;
    }
    Ok(total / clients.len() as f64)
}

/// Best mean testing accuracy: the max over a history of per-round means.
pub fn bmta(history: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Domain("empty accuracy history".into()));
    }
    Ok(history.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
}

/// Two-sided Wilcoxon signed-rank test for paired samples. Zero differences
/// are dropped; at least 6 non-zero pairs are required. Exact enumeration of
/// all sign assignments for n <= 12, normal approximation with tie
/// correction beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "wilcoxon pairs",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "signed-rank samples",
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 6 {
        return Err(Error::InsufficientData(format!(
            "{n} non-zero differences; need at least 6"
        )));
    }

    // Average ranks of |d|, ties sharing their mean rank.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean_rank;
        }
        tie_sizes.push(end - start);
        start = end;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w_min = w_plus.min(w_minus);

    if n <= 12 {
        // Exact null distribution: every sign assignment equally likely.
        let count: u64 = (0u64..1 << n)
            .filter(|mask| {
                let w: f64 = (0..n)
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| ranks[k])
                    .sum();
                w <= w_min + 1e-9
            })
            .count() as u64;
        let p = 2.0 * count as f64 / (1u64 << n) as f64;
        Ok(p.min(1.0))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum::<f64>()
            / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Err(Error::InsufficientData(
                "all differences tie; zero variance".into(),
            ));
        }
        let z = (w_plus - mean) / fmath::sqrt(var);
        let p = 2.0 * (1.0 - fmath::normal_cdf(z.abs()));
        Ok(p.clamp(0.0, 1.0))
    }
}

/// Analytic optimum of `G` for quadratic client losses `0.5||w - c_i||^2`
/// with the linear attention kind: stationarity per coordinate is the
/// m-by-m linear system `(1 + 2 lambda (m-1)) w_i - 2 lambda sum_{j!=i} w_j
/// = c_i`, solved here by Gaussian elimination.
pub fn quadratic_linear_optimum(centers: &[ParamVector], lambda: f64) -> Result<OptimumInfo> {
    let m = centers.len();
    if m == 0 {
        return Err(Error::Domain("need at least one center".into()));
    }
    let d = centers[0].len();

    let mut system = vec![vec![0.0; m]; m];
    for (i, row) in system.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if i == j {
                1.0 + 2.0 * lambda * (m as f64 - 1.0)
            } else {
                -2.0 * lambda
            };
        }
    }

    // One solve per coordinate; the matrix is the same each time.
    let mut solution = vec![vec![0.0; d]; m];
    for k in 0..d {
        let rhs: Vec<f64> = centers.iter().map(|c| c[k]).collect();
        let x = solve_dense(system.clone(), rhs)?;
        for (i, v) in x.into_iter().enumerate() {
            solution[i][k] = v;
        }
    }
    let w_star = ParamMatrix::from_columns(
        solution
            .into_iter()
            .map(ParamVector::new)
            .collect::<Result<Vec<_>>>()?,
    )?;

    // G* evaluated directly from the closed forms.
    let mut g_star = 0.0;
    for (i, c) in centers.iter().enumerate() {
        g_star += 0.5 * sq_distance(w_star.column(i), c)?;
    }
    for i in 0..m {
        for j in i + 1..m {
            g_star += lambda * sq_distance(w_star.column(i), w_star.column(j))?;
        }
    }
    Ok(OptimumInfo { w_star, g_star })
}

/// Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular linear system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Known optimum for gap measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimumInfo {
    pub w_star: ParamMatrix,
    pub g_star: f64,
}

/// Convergence diagnostics over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// `G(W^k)` per round.
    pub objective: Vec<f64>,
    pub running_min_objective: Vec<f64>,
    /// `||grad G(W^k)||^2` per round.
    pub grad_sq: Vec<f64>,
    pub running_min_grad_sq: Vec<f64>,
    /// Estimated bound constant: the max observed gradient-component norm.
    pub bound_constant: f64,
    /// `min_{j<=k} G(W^j) - G*`, when the optimum is known.
    pub gap: Option<Vec<f64>>,
    /// `(||W^0 - W*||^2 + 5 B^2) / sqrt(k)` for the constant-for-horizon
    /// schedule, when the optimum is known.
    pub bound_curve: Option<Vec<f64>>,
}

/// Builds the report from per-round diagnostics. `w0` is the initial
/// parameter matrix (the trajectory points start at round 1).
pub fn convergence_report(
    points: &[TrajectoryPoint],
    w0: &ParamMatrix,
    schedule: &StepSchedule,
    optimum: Option<&OptimumInfo>,
) -> Result<ConvergenceReport> {
    let objective: Vec<f64> = points.iter().map(|p| p.objective).collect();
    let grad_sq: Vec<f64> = points.iter().map(|p| p.grad_norm * p.grad_norm).collect();
    let running_min = |xs: &[f64]| -> Vec<f64> {
        xs.iter()
            .scan(f64::INFINITY, |min, &x| {
                *min = min.min(x);
                Some(*min)
            })
            .collect()
    };
    let bound_constant = points
        .iter()
        .map(|p| p.loss_grad_norm.max(p.penalty_grad_norm))
        .fold(0.0, f64::max);

    let gap = optimum.map(|opt| {
        running_min(&objective)
            .into_iter()
            .map(|g| g - opt.g_star)
            .collect::<Vec<f64>>()
    });
    let bound_curve = match (optimum, schedule) {
        (Some(opt), StepSchedule::ConstantTheory { .. }) => {
            let dist0 = frobenius_norm(&w0.sub(&opt.w_star)?);
            let numerator = dist0 * dist0 + 5.0 * bound_constant * bound_constant;
            Some(
                (1..=points.len())
                    .map(|k| numerator / fmath::sqrt(k as f64))
                    .collect(),
            )
        }
        _ => None,
    };

    Ok(ConvergenceReport {
        running_min_objective: running_min(&objective),
        running_min_grad_sq: running_min(&grad_sq),
        objective,
        grad_sq,
        bound_constant,
        gap,
        bound_curve,
    })
}

/// Serialized form of a collaboration matrix for heatmap rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabExport {
    pub m: usize,
    /// Ground-truth group id per client, for block annotations.
    pub groups: Vec<usize>,
    /// Row-major weights.
    pub weights: Vec<Vec<f64>>,
}

/// JSON heatmap export of a collaboration matrix with group labels.
pub fn export_collab_matrix(xi: &CollabMatrix, groups: &[usize]) -> Result<String> {
    if groups.len() != xi.size() {
        return Err(Error::DimensionMismatch {
            context: "collab group labels",
            expected: xi.size(),
            actual: groups.len(),
        });
    }
    let export = CollabExport {
        m: xi.size(),
        groups: groups.to_vec(),
        weights: xi.to_rows(),
    };
    serde_json::to_string(&export).map_err(|e| Error::Format(format!("collab export: {e}")))
}

/// Mean intra-group vs inter-group off-diagonal weight, given ground-truth
/// group labels. Returns `(intra, inter)`.
pub fn block_means(xi: &CollabMatrix, groups: &[usize]) -> Result<(f64, f64)> {
    if groups.len() != xi.size() {
        return Err(Error::DimensionMismatch {
            context: "collab group labels",
            expected: xi.size(),
            actual: groups.len(),
        });
    }
    let m = xi.size();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            if groups[i] == groups[j] {
                intra = (intra.0 + xi.get(i, j), intra.1 + 1);
            } else {
                inter = (inter.0 + xi.get(i, j), inter.1 + 1);
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Degenerate(
            "need both intra- and inter-group pairs".into(),
        ));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}
