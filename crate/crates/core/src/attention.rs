//! Attention-inducing functions and collaboration weights.
//!
//! An attention-inducing function `A` maps squared parameter distance to a
//! penalty; it must be increasing and concave on `[0, inf)` with `A(0) = 0`
//! and a finite right-derivative at zero. Its derivative `A'` then acts as a
//! similarity kernel: the weight of client `j`'s model in client `i`'s
//! personalized cloud model is `alpha * A'(||w_i - w_j||^2)`, and the
//! remaining mass stays on client `i` itself. The heuristic variant replaces
//! the distance kernel with a softmax over cosine similarities, which behaves
//! better for high-dimensional parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::fmath;
use crate::params::{sq_distance, ParamMatrix, ParamVector};
use crate::{Error, Result};

/// A member of the attention-inducing family, with closed-form derivative.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionFunction {
    /// `1 - exp(-t / sigma)`.
    NegExp { sigma: f64 },
    /// `t` itself; the quadratic pairwise penalty (useful for convex theory
    /// experiments since the whole objective stays convex).
    Linear,
    /// `t / (2 sigma)` up to `sigma^2`, then `sqrt(t) - sigma / 2`.
    TamedSqrt { sigma: f64 },
    /// Minimax concave penalty: `sigma t - t^2 / (2 theta)` up to `theta
    /// sigma`, constant after.
    Mcp { sigma: f64, theta: f64 },
    /// Smoothly clipped absolute deviation: linear, then a quadratic blend,
    /// then constant.
    Scad { sigma: f64, theta: f64 },
}

impl AttentionFunction {
    pub fn neg_exp(sigma: f64) -> Result<Self> {
        require_positive(sigma, "sigma")?;
        Ok(Self::NegExp { sigma })
    }

    pub fn linear() -> Self {
        Self::Linear
    }

    pub fn tamed_sqrt(sigma: f64) -> Result<Self> {
        require_positive(sigma, "sigma")?;
        Ok(Self::TamedSqrt { sigma })
    }

    pub fn mcp(sigma: f64, theta: f64) -> Result<Self> {
        require_positive(sigma, "sigma")?;
        require_theta(theta)?;
        Ok(Self::Mcp { sigma, theta })
    }

    pub fn scad(sigma: f64, theta: f64) -> Result<Self> {
        require_positive(sigma, "sigma")?;
        require_theta(theta)?;
        Ok(Self::Scad { sigma, theta })
    }
}

fn require_positive(v: f64, name: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Domain(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn require_theta(theta: f64) -> Result<()> {
    if !(theta.is_finite() && theta > 2.0) {
        return Err(Error::Domain(format!("theta must exceed 2, got {theta}")));
    }
    Ok(())
}

fn require_nonneg(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!(
            "attention argument must be >= 0, got {t}"
        )));
    }
    Ok(())
}

/// Anything exposing an attention curve and its derivative. Implemented by
/// [`AttentionFunction`]; validation also accepts hand-rolled curves so tests
/// can feed it intentionally broken ones.
pub trait AttentionCurve {
    fn value(&self, t: f64) -> Result<f64>;
    /// Derivative; at `t = 0` the right-limit, which admissibility
    /// requires to be finite.
    fn deriv(&self, t: f64) -> Result<f64>;
}

impl AttentionCurve for AttentionFunction {
    fn value(&self, t: f64) -> Result<f64> {
        require_nonneg(t)?;
        Ok(match *self {
            Self::NegExp { sigma } => 1.0 - fmath::exp(-t / sigma),
            Self::Linear => t,
            Self::TamedSqrt { sigma } => {
                if t <= sigma * sigma {
                    t / (2.0 * sigma)
                } else {
                    fmath::sqrt(t) - sigma / 2.0
                }
            }
            Self::Mcp { sigma, theta } => {
                if t <= theta * sigma {
                    sigma * t - t * t / (2.0 * theta)
                } else {
                    theta * sigma * sigma / 2.0
                }
            }
            Self::Scad { sigma, theta } => {
                if t <= sigma {
                    sigma * t
                } else if t <= theta * sigma {
                    (-t * t + 2.0 * theta * sigma * t - sigma * sigma) / (2.0 * (theta - 1.0))
                } else {
                    (theta + 1.0) * sigma * sigma / 2.0
                }
            }
        })
    }

    fn deriv(&self, t: f64) -> Result<f64> {
        require_nonneg(t)?;
        Ok(match *self {
            Self::NegExp { sigma } => fmath::exp(-t / sigma) / sigma,
            Self::Linear => 1.0,
            Self::TamedSqrt { sigma } => {
                if t <= sigma * sigma {
                    1.0 / (2.0 * sigma)
                } else {
                    1.0 / (2.0 * fmath::sqrt(t))
                }
            }
            Self::Mcp { sigma, theta } => {
                if t <= theta * sigma {
                    sigma - t / theta
                } else {
                    0.0
                }
            }
            Self::Scad { sigma, theta } => {
                if t <= sigma {
                    sigma
                } else if t <= theta * sigma {
                    (theta * sigma - t) / (theta - 1.0)
                } else {
                    0.0
                }
            }
        })
    }
}

/// One failed admissibility check.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Grid point (or interval left end) where the check failed.
    pub at: f64,
    pub what: String,
}

/// Outcome of sweeping a curve over a grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, at: f64, what: String) {
        self.violations.push(Violation { at, what });
    }
}

/// Sweeps `curve` over a sorted nonnegative grid, checking the
/// attention-inducing properties numerically: `A(0) = 0`, monotonicity,
/// concavity (second differences), `A' >= 0` and nonincreasing, and agreement
/// of `A'` with a central difference of `A` on interior points.
#[allow(clippy::needless_range_loop)]
pub fn validate_attention_function(
    curve: &dyn AttentionCurve,
    grid: &[f64],
) -> Result<ValidationReport> {
    const CONCAVITY_TOL: f64 = 1e-9;
    const DERIV_MATCH_TOL: f64 = 1e-6;

    let mut report = ValidationReport::default();
    if grid.len() < 3 {
        return Err(Error::Domain("grid needs at least 3 points".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 {
        return Err(Error::Domain("grid must be sorted and nonnegative".into()));
    }

    let at_zero = curve.value(0.0)?;
    if at_zero.abs() > 1e-12 {
        report.push(0.0, format!("value(0) = {at_zero}, expected 0"));
    }

    let values = grid
        .iter()
        .map(|&t| curve.value(t))
        .collect::<Result<Vec<_>>>()?;
    let derivs = grid
        .iter()
        .map(|&t| curve.deriv(t))
        .collect::<Result<Vec<_>>>()?;

    for (w, t) in values.windows(2).zip(grid.windows(2)) {
        if w[1] < w[0] - 1e-12 {
            report.push(t[0], format!("value decreases: {} -> {}", w[0], w[1]));
        }
    }

    // Concavity via slopes of consecutive chords: they must not increase.
    for i in 0..grid.len() - 2 {
        let s01 = (values[i + 1] - values[i]) / (grid[i + 1] - grid[i]);
        let s12 = (values[i + 2] - values[i + 1]) / (grid[i + 2] - grid[i + 1]);
        if s12 > s01 + CONCAVITY_TOL {
            report.push(
                grid[i + 1],
                format!("not concave: chord slope rises {s01} -> {s12}"),
            );
        }
    }

    for (&d, &t) in derivs.iter().zip(grid.iter()) {
        if d < -1e-12 {
            report.push(t, format!("derivative negative: {d}"));
        }
        if !d.is_finite() {
            report.push(t, "derivative not finite".into());
        }
    }
    for (w, t) in derivs.windows(2).zip(grid.windows(2)) {
        if w[1] > w[0] + 1e-9 {
            report.push(t[0], format!("derivative increases: {} -> {}", w[0], w[1]));
        }
    }

    // Central-difference agreement on interior points. The step must stay
    // inside the grid's neighborhood, not reach across kinks.
    for i in 1..grid.len() - 1 {
        let t = grid[i];
        let h = 1e-6 * (1.0 + t);
        if t - h < 0.0 {
            continue;
        }
        let numeric = (curve.value(t + h)? - curve.value(t - h)?) / (2.0 * h);
        let analytic = curve.deriv(t)?;
        let scale = 1.0_f64.max(analytic.abs());
        if (numeric - analytic).abs() > DERIV_MATCH_TOL * scale {
            report.push(
                t,
                format!("derivative mismatch: analytic {analytic}, central diff {numeric}"),
            );
        }
    }

    Ok(report)
}

/// Cosine similarity `(a . b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// How a negative self-attention weight is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Clamp the diagonal at zero and renormalize the row to sum 1. The
    /// default step-decay schedule starts at 1e4, which routinely drives the
    /// raw diagonal negative, so this is the default.
    #[default]
    Clamped,
    /// Error out instead; used for theory experiments where the convex
    /// combination property must hold as derived.
    Strict,
}

/// Row-stochastic m-by-m collaboration weights; row `i` mixes all clients'
/// models into client `i`'s personalized cloud model.
#[derive(Debug, Clone, PartialEq)]
pub struct CollabMatrix {
    m: usize,
    /// Row-major weights.
    weights: Vec<f64>,
    mode: WeightMode,
}

impl CollabMatrix {
    fn from_rows(m: usize, weights: Vec<f64>, mode: WeightMode) -> Self {
        debug_assert_eq!(weights.len(), m * m);
        Self { m, weights, mode }
    }

    /// Identity weights (every client keeps its own model).
    pub fn identity(m: usize) -> Self {
        let mut weights = alloc::vec![0.0; m * m];
        for i in 0..m {
            weights[i * m + i] = 1.0;
        }
        Self::from_rows(m, weights, WeightMode::Strict)
    }

    /// Builds from explicit row-major weights, checking the row-stochastic
    /// invariants: rows sum to 1 within 1e-9, off-diagonals nonnegative, and
    /// in strict mode diagonals nonnegative too.
    pub fn from_row_stochastic(m: usize, weights: Vec<f64>, mode: WeightMode) -> Result<Self> {
        if weights.len() != m * m {
            return Err(Error::DimensionMismatch {
                context: "collab weights",
                expected: m * m,
                actual: weights.len(),
            });
        }
        for i in 0..m {
            let row = &weights[i * m..(i + 1) * m];
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("row {i} sums to {sum}, expected 1")));
            }
            for (j, &v) in row.iter().enumerate() {
                if j != i && v < 0.0 {
                    return Err(Error::Domain(format!("negative weight at ({i}, {j}): {v}")));
                }
            }
            if matches!(mode, WeightMode::Strict) && row[i] < 0.0 {
                return Err(Error::StepSizeTooLarge {
                    row: i,
                    diagonal: row[i],
                });
            }
        }
        Ok(Self::from_rows(m, weights, mode))
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.m..(i + 1) * self.m]
    }

    /// Row-major copy of the weights.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.m)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Message-passing weights from an attention kernel on squared distances:
/// `xi[i][j] = alpha * A'(||w_i - w_j||^2)` off the diagonal, with the
/// self-weight absorbing the rest of the row.
pub fn fedamp_weights(
    w: &ParamMatrix,
    attention: &AttentionFunction,
    alpha: f64,
    mode: WeightMode,
) -> Result<CollabMatrix> {
    require_positive(alpha, "alpha")?;
    let m = w.clients();
    let mut weights = alloc::vec![0.0; m * m];
    for i in 0..m {
        let mut off_sum = 0.0;
        for j in 0..m {
            if i == j {
                continue;
            }
            let t = sq_distance(w.column(i), w.column(j))?;
            let xi = alpha * attention.deriv(t)?;
            weights[i * m + j] = xi;
            off_sum += xi;
        }
        let diag = 1.0 - off_sum;
        if diag < 0.0 {
            match mode {
                WeightMode::Strict => {
                    return Err(Error::StepSizeTooLarge {
                        row: i,
                        diagonal: diag,
                    })
                }
                WeightMode::Clamped => {
                    // off_sum > 1 here, so renormalizing is well-defined.
                    for j in 0..m {
                        weights[i * m + j] /= off_sum;
                    }
                    weights[i * m + i] = 0.0;
                    continue;
                }
            }
        }
        weights[i * m + i] = diag;
    }
    Ok(CollabMatrix::from_rows(m, weights, mode))
}

/// Softmax-of-cosine weights: row `i` distributes `1 - self_weight[i]` over
/// the peers proportionally to `exp(sigma * cos(w_i, w_j))`.
pub fn heur_weights(
    w: &ParamMatrix,
    sigma: f64,
    self_weights: &[f64],
) -> Result<CollabMatrix> {
    let m = w.clients();
    if m < 2 {
        return Err(Error::Unsupported(
            "cosine-softmax weights need at least 2 clients".into(),
        ));
    }
    if self_weights.len() != m {
        return Err(Error::DimensionMismatch {
            context: "self weights",
            expected: m,
            actual: self_weights.len(),
        });
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "softmax scale must be >= 0, got {sigma}"
        )));
    }
    for (i, &s) in self_weights.iter().enumerate() {
        if !(s.is_finite() && (0.0..1.0).contains(&s)) {
            return Err(Error::Domain(format!(
                "self weight for client {i} must lie in [0, 1), got {s}"
            )));
        }
    }

    let mut weights = alloc::vec![0.0; m * m];
    for i in 0..m {
        let mut logits = Vec::with_capacity(m - 1);
        for j in 0..m {
            if j == i {
                continue;
            }
            logits.push((j, sigma * cosine_similarity(w.column(i), w.column(j))?));
        }
        // Max-shifted softmax for numerical stability.
        let max_logit = logits.iter().fold(f64::NEG_INFINITY, |a, (_, l)| a.max(*l));
        let mut denom = 0.0;
        let exps: Vec<(usize, f64)> = logits
            .into_iter()
            .map(|(j, l)| {
                let e = fmath::exp(l - max_logit);
                denom += e;
                (j, e)
            })
            .collect();
        let share = 1.0 - self_weights[i];
        for (j, e) in exps {
            weights[i * m + j] = share * e / denom;
        }
        weights[i * m + i] = self_weights[i];
    }
    Ok(CollabMatrix::from_rows(m, weights, WeightMode::Clamped))
}

/// Personalized cloud models: column `i` of the result is
/// `sum_j xi[i][j] * w_j` (i.e. `U = W * Xi^T`). Accumulation order is
/// canonical (peers in ascending index, the self term last) so clients in
/// symmetric positions produce bitwise-identical columns.
pub fn aggregate(w: &ParamMatrix, xi: &CollabMatrix) -> Result<ParamMatrix> {
    let m = w.clients();
    if xi.size() != m {
        return Err(Error::DimensionMismatch {
            context: "aggregate",
            expected: m,
            actual: xi.size(),
        });
    }
    let d = w.dim();
    let mut cols = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = alloc::vec![0.0; d];
        for j in (0..m).filter(|&j| j != i).chain(core::iter::once(i)) {
            let weight = xi.get(i, j);
            if weight == 0.0 {
                continue;
            }
            for (slot, v) in acc.iter_mut().zip(w.column(j).iter()) {
                *slot += weight * v;
            }
        }
        cols.push(ParamVector::new(acc)?);
    }
    ParamMatrix::from_columns(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec()).unwrap()
    }

    fn matrix(cols: &[&[f64]]) -> ParamMatrix {
        ParamMatrix::from_columns(cols.iter().map(|c| pv(c)).collect()).unwrap()
    }

    #[test]
    fn value_at_zero_is_zero_for_all_kinds() {
        let kinds = [
            AttentionFunction::neg_exp(1.7).unwrap(),
            AttentionFunction::linear(),
            AttentionFunction::tamed_sqrt(0.8).unwrap(),
            AttentionFunction::mcp(1.2, 3.0).unwrap(),
            AttentionFunction::scad(0.9, 3.7).unwrap(),
        ];
        for kind in &kinds {
            assert_eq!(kind.value(0.0).unwrap(), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn neg_exp_values() {
        let a = AttentionFunction::neg_exp(1.0).unwrap();
        assert!((a.value(1.0).unwrap() - (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
        assert_eq!(a.deriv(0.0).unwrap(), 1.0);
        assert!((a.deriv(1.0).unwrap() - (-1.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn linear_is_identity_with_unit_slope() {
        let a = AttentionFunction::linear();
        assert_eq!(a.value(4.2).unwrap(), 4.2);
        assert_eq!(a.deriv(123.0).unwrap(), 1.0);
    }

    #[test]
    fn negative_argument_is_domain_error() {
        let a = AttentionFunction::neg_exp(1.0).unwrap();
        assert!(matches!(a.value(-0.5).unwrap_err(), Error::Domain(_)));
        assert!(matches!(a.deriv(-0.5).unwrap_err(), Error::Domain(_)));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(AttentionFunction::neg_exp(0.0).is_err());
        assert!(AttentionFunction::neg_exp(-1.0).is_err());
        assert!(AttentionFunction::tamed_sqrt(f64::NAN).is_err());
        assert!(AttentionFunction::mcp(1.0, 2.0).is_err());
        assert!(AttentionFunction::scad(1.0, 1.5).is_err());
    }

    #[test]
    fn piecewise_kinds_are_continuous_at_breakpoints() {
        let cases: [(AttentionFunction, Vec<f64>); 3] = [
            (AttentionFunction::tamed_sqrt(1.5).unwrap(), vec![2.25]),
            (AttentionFunction::mcp(1.1, 2.5).unwrap(), vec![2.75]),
            (
                AttentionFunction::scad(1.1, 2.5).unwrap(),
                vec![1.1, 2.75],
            ),
        ];
        for (kind, breaks) in &cases {
            for &b in breaks {
                let eps = 1e-9;
                let below = kind.value(b - eps).unwrap();
                let above = kind.value(b + eps).unwrap();
                assert!((below - above).abs() < 1e-7, "{kind:?} at {b}");
                let d_below = kind.deriv(b - eps).unwrap();
                let d_above = kind.deriv(b + eps).unwrap();
                assert!((d_below - d_above).abs() < 1e-7, "{kind:?} deriv at {b}");
            }
        }
    }

    fn grid_to(hi: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| hi * i as f64 / n as f64).collect()
    }

    #[test]
    fn validation_passes_for_admissible_kinds() {
        let kinds = [
            AttentionFunction::neg_exp(1.0).unwrap(),
            AttentionFunction::linear(),
            AttentionFunction::tamed_sqrt(1.3).unwrap(),
            AttentionFunction::mcp(0.7, 4.0).unwrap(),
            AttentionFunction::scad(0.7, 4.0).unwrap(),
        ];
        let grid = grid_to(10.0, 200);
        for kind in &kinds {
            let report = validate_attention_function(kind, &grid).unwrap();
            assert!(report.is_admissible(), "{kind:?}: {:?}", report.violations);
        }
    }

    struct Quadratic;
    impl AttentionCurve for Quadratic {
        fn value(&self, t: f64) -> Result<f64> {
            Ok(t * t)
        }
        fn deriv(&self, t: f64) -> Result<f64> {
            Ok(2.0 * t)
        }
    }

    #[test]
    fn validation_flags_convex_curve() {
        let report = validate_attention_function(&Quadratic, &grid_to(4.0, 40)).unwrap();
        assert!(!report.is_admissible());
        assert!(report
            .violations
            .iter()
            .any(|v| v.what.contains("not concave")));
    }

    #[test]
    fn cosine_similarity_basics() {
        let a = pv(&[1.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &pv(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &pv(&[-2.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&a, &pv(&[0.0, 0.0])).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn fedamp_weights_identical_columns() {
        let w = matrix(&[&[0.5, -0.5], &[0.5, -0.5], &[0.5, -0.5]]);
        let a = AttentionFunction::neg_exp(1.0).unwrap();
        let xi = fedamp_weights(&w, &a, 0.1, WeightMode::Strict).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.8 } else { 0.1 };
                assert!((xi.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fedamp_weights_line_instance() {
        // m=3, d=1, columns 0, 1, 2; NegExp sigma=1, alpha=0.1.
        // xi_12 = 0.1 e^-1, xi_13 = 0.1 e^-4, diagonal absorbs the rest.
        let w = matrix(&[&[0.0], &[1.0], &[2.0]]);
        let a = AttentionFunction::neg_exp(1.0).unwrap();
        let xi = fedamp_weights(&w, &a, 0.1, WeightMode::Strict).unwrap();
        assert!((xi.get(0, 1) - 0.036787944117144235).abs() < 1e-15);
        assert!((xi.get(0, 2) - 0.0018315638888734182).abs() < 1e-15);
        assert!((xi.get(0, 0) - 0.9613804919939823).abs() < 1e-12);
    }

    #[test]
    fn fedamp_weights_single_client() {
        let w = matrix(&[&[1.0, 2.0]]);
        let a = AttentionFunction::linear();
        let xi = fedamp_weights(&w, &a, 0.5, WeightMode::Strict).unwrap();
        assert_eq!(xi.size(), 1);
        assert_eq!(xi.get(0, 0), 1.0);
    }

    #[test]
    fn fedamp_weights_strict_rejects_large_alpha() {
        let w = matrix(&[&[0.0], &[0.1], &[0.2]]);
        let a = AttentionFunction::linear();
        let err = fedamp_weights(&w, &a, 10.0, WeightMode::Strict).unwrap_err();
        assert!(matches!(err, Error::StepSizeTooLarge { row: 0, .. }));
    }

    #[test]
    fn fedamp_weights_clamped_renormalizes() {
        let w = matrix(&[&[0.0], &[0.1], &[0.2]]);
        let a = AttentionFunction::linear();
        let xi = fedamp_weights(&w, &a, 10.0, WeightMode::Clamped).unwrap();
        assert!(xi.max_row_sum_error() < 1e-12);
        for i in 0..3 {
            assert_eq!(xi.get(i, i), 0.0);
            for j in 0..3 {
                assert!(xi.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn heur_weights_identical_columns_split_evenly() {
        let w = matrix(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let xi = heur_weights(&w, 1.0, &[0.5, 0.5, 0.5]).unwrap();
        for i in 0..3 {
            assert!((xi.get(i, i) - 0.5).abs() < 1e-15);
            for j in 0..3 {
                if j != i {
                    assert!((xi.get(i, j) - 0.25).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn heur_weights_orthogonal_peer() {
        // w1 = w2 = (1,0), w3 = (0,1): from row 1 the logits are sigma*1 and
        // sigma*0, so xi_12 = 0.5 e/(e+1).
        let w = matrix(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let xi = heur_weights(&w, 1.0, &[0.5, 0.5, 0.5]).unwrap();
        let e = core::f64::consts::E;
        assert!((xi.get(0, 1) - 0.5 * e / (e + 1.0)).abs() < 1e-15);
        assert!((xi.get(0, 2) - 0.5 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn heur_weights_zero_scale_is_uniform() {
        let w = matrix(&[&[1.0, 0.0], &[0.5, 0.5], &[0.0, 1.0], &[3.0, -1.0]]);
        let xi = heur_weights(&w, 0.0, &[0.4, 0.4, 0.4, 0.4]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if j != i {
                    assert!((xi.get(i, j) - 0.6 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn heur_weights_rejects_degenerates() {
        let w = matrix(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            heur_weights(&w, 1.0, &[0.5, 0.5]).unwrap_err(),
            Error::Degenerate(_)
        ));
        let single = matrix(&[&[1.0, 0.0]]);
        assert!(matches!(
            heur_weights(&single, 1.0, &[0.5]).unwrap_err(),
            Error::Unsupported(_)
        ));
    }

    #[test]
    fn aggregate_identity_returns_input() {
        let w = matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let u = aggregate(&w, &CollabMatrix::identity(2)).unwrap();
        assert_eq!(u, w);
    }

    #[test]
    fn aggregate_midpoint() {
        let w = matrix(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let xi = CollabMatrix::from_rows(2, vec![0.5, 0.5, 0.5, 0.5], WeightMode::Strict);
        let u = aggregate(&w, &xi).unwrap();
        assert_eq!(u.column(0).as_slice(), &[1.0, 1.0]);
        assert_eq!(u.column(1).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn aggregate_of_equal_columns_is_fixed() {
        let w = matrix(&[&[0.7, -0.2], &[0.7, -0.2], &[0.7, -0.2]]);
        let a = AttentionFunction::neg_exp(2.0).unwrap();
        let xi = fedamp_weights(&w, &a, 0.3, WeightMode::Clamped).unwrap();
        let u = aggregate(&w, &xi).unwrap();
        for i in 0..3 {
            assert!((u.column(i)[0] - 0.7).abs() < 1e-12);
            assert!((u.column(i)[1] + 0.2).abs() < 1e-12);
        }
    }
}
