//! Experiment-level procedures: the one-dimensional difference bound, the
//! near-boundary mass inequality, Poincare constants on rigid-free
//! subspaces, kernel approximation families, and the compactness harnesses
//! that sweep sequences of fields against sequences of kernels.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{SubspaceSpec, VectorField};
use crate::geometry::{Cone, Grid, Point};
use crate::kernels::{
    check_cone_condition, check_mass_ratio_limit, default_delta_sequence, mass_ratio, rho_theta0,
    Kernel, KernelEval, RadialTable, Verdict,
};
use crate::nonlocal::{
    build_plan, cone_matrix, for_row_pairs, pair_coef, seminorm, smoothing_gap, PairPlan,
};
use crate::numerics::{adaptive_quad, pairwise_sum};

// ---------------------------------------------------------------------------
// One-dimensional difference bound
// ---------------------------------------------------------------------------

/// Both sides of the one-dimensional bound, with the constant that was used.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalBoundReport {
    pub lhs: f64,
    pub difference_term: f64,
    pub tail_term: f64,
    pub rhs: f64,
    pub constant: f64,
    pub holds: bool,
}

/// Checks, for a scalar function on `(0, 3 delta)`, the bound
///
/// ```text
/// int_0^delta |g|^p  <=  2^(2p-1) delta^p int_0^(2 delta) |g(x+t) - g(x)|^p / t^p dx
///                        + 2^(p-1) int_delta^(3 delta) |g|^p
/// ```
///
/// for a single shift `t` in `(0, delta)`.  `g` holds midpoint samples on
/// equal cells of `(0, 3 delta)`; the shifted value is read off the
/// piecewise-linear interpolant with constant extension at the ends.  The
/// verdict allows one percent of slack for the quadrature.
pub fn interval_difference_bound(
    g: &[f64],
    delta: f64,
    t: f64,
    p: f64,
) -> Result<IntervalBoundReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    if !(t > 0.0 && t < delta) {
        return Err(Error::InvalidArgument(
            "shift must lie strictly between 0 and delta".into(),
        ));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument("exponent p must be at least 1".into()));
    }
    let m = g.len();
    if m < 192 {
        return Err(Error::InvalidArgument(
            "need at least 64 samples per unit of delta (192 total)".into(),
        ));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let h = 3.0 * delta / m as f64;
    let center = |i: usize| (i as f64 + 0.5) * h;
    let interp = |x: f64| -> f64 {
        let s = x / h - 0.5;
        if s <= 0.0 {
            g[0]
        } else if s >= (m - 1) as f64 {
            g[m - 1]
        } else {
            let i = s.floor() as usize;
            let f = s - i as f64;
            g[i] * (1.0 - f) + g[i + 1] * f
        }
    };
    let pw = |v: f64| {
        let a = v.abs();
        if p == 1.0 {
            a
        } else if p == 2.0 {
            a * a
        } else {
            a.powf(p)
        }
    };
    let mut head = Vec::new();
    let mut diff = Vec::new();
    let mut tail = Vec::new();
    for (i, &gi) in g.iter().enumerate() {
        let x = center(i);
        if x < delta {
            head.push(h * pw(gi));
        } else {
            tail.push(h * pw(gi));
        }
        if x < 2.0 * delta {
            diff.push(h * pw(interp(x + t) - gi));
        }
    }
    let lhs = pairwise_sum(&head);
    let difference_term = pairwise_sum(&diff) / t.powf(p);
    let tail_term = pairwise_sum(&tail);
    let constant = 2.0f64.powf(2.0 * p - 1.0);
    let rhs = constant * delta.powf(p) * difference_term + 2.0f64.powf(p - 1.0) * tail_term;
    Ok(IntervalBoundReport {
        lhs,
        difference_term,
        tail_term,
        rhs,
        constant,
        holds: lhs <= rhs * 1.01,
    })
}

// ---------------------------------------------------------------------------
// Near-boundary mass control
// ---------------------------------------------------------------------------

/// The three terms of the near-boundary bound
/// `int |u|^p <= C1 int_{interior} |u|^p + C2 * (r^p / int_{B_r} rho) * |u|^p_S`
/// together with the implied constants.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryMassReport {
    pub r: f64,
    pub epsilon0: f64,
    /// `int_Omega |u|^p`.
    pub lhs: f64,
    /// `int over the interior at depth epsilon0 * r`.
    pub interior_term: f64,
    /// `r^p / int_{B_r} rho` times the seminorm.
    pub seminorm_term: f64,
    /// The volume ratio that realizes `C1` for constant fields.
    pub c1_volume_ratio: f64,
    /// `(lhs - C1 * interior) / seminorm_term`, when the seminorm term is
    /// positive.
    pub implied_c2: Option<f64>,
    /// Mass in the collar at depth up to `2 epsilon0 r`, the left side of
    /// the sharper collar bound.
    pub collar_term: f64,
    /// Whether the field vanishes at depth greater than `r / 2`, the
    /// hypothesis of the collar bound.
    pub vanishes_on_deep_interior: bool,
}

pub fn boundary_mass_check(
    u: &VectorField,
    k: &dyn KernelEval,
    r: f64,
    epsilon0: f64,
    p: f64,
) -> Result<BoundaryMassReport> {
    if !k.is_radial() {
        return Err(Error::Unsupported(
            "the near-boundary bound needs a radial kernel".into(),
        ));
    }
    if !(epsilon0 > 0.0 && epsilon0 <= 0.125) {
        return Err(Error::InvalidArgument("epsilon0 must lie in (0, 1/8]".into()));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument("radius r must be positive".into()));
    }
    if (p - k.exponent_p()).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "exponent p does not match the kernel".into(),
        ));
    }
    let grid = &u.grid;
    let d = grid.d;
    let lhs = u.lp_norm_pow(p);
    let node_pw = |i: usize| {
        let v = u.node_value(i);
        let n2: f64 = (0..d).map(|a| v[a] * v[a]).sum();
        if p == 2.0 {
            n2
        } else {
            n2.sqrt().powf(p)
        }
    };
    let deep = grid.interior_mask(epsilon0 * r)?;
    let interior_terms: Vec<f64> = (0..grid.len())
        .filter(|&i| deep[i])
        .map(|i| grid.weights[i] * node_pw(i))
        .collect();
    let interior_term = pairwise_sum(&interior_terms);
    let interior_measure: f64 = (0..grid.len()).filter(|&i| deep[i]).map(|i| grid.weights[i]).sum();
    if interior_measure <= 0.0 {
        return Err(Error::Degenerate(
            "no interior remains at depth epsilon0 * r on this grid".into(),
        ));
    }
    let c1_volume_ratio = grid.total_weight() / interior_measure;
    let semi = seminorm(u, k)?.value_p;
    let seminorm_term = mass_ratio(k, r)? * semi;
    let implied_c2 = if seminorm_term > 0.0 {
        Some((lhs - c1_volume_ratio * interior_term) / seminorm_term)
    } else {
        None
    };
    let half = grid.interior_mask(0.5 * r)?;
    let vanishes_on_deep_interior =
        (0..grid.len()).filter(|&i| half[i]).all(|i| node_pw(i) == 0.0);
    let collar_mask = grid.interior_mask(2.0 * epsilon0 * r)?;
    let collar_terms: Vec<f64> = (0..grid.len())
        .filter(|&i| !collar_mask[i])
        .map(|i| grid.weights[i] * node_pw(i))
        .collect();
    Ok(BoundaryMassReport {
        r,
        epsilon0,
        lhs,
        interior_term,
        seminorm_term,
        c1_volume_ratio,
        implied_c2,
        collar_term: pairwise_sum(&collar_terms),
        vanishes_on_deep_interior,
    })
}

// ---------------------------------------------------------------------------
// Poincare constant
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoincareMethod {
    /// Dense symmetric eigensolve of the constrained form (p = 2, small).
    DenseEigen,
    /// Matrix-free smallest-eigenvalue iteration (p = 2, large).
    IterativeEigen,
    /// Projected Rayleigh descent with restarts (general p, lower bound).
    RayleighDescent,
}

/// The estimated best constant in `int |u|^p <= C |u|^p_S` over the
/// constrained subspace, with the minimizing field's hash and a drift
/// figure against one coarsening step.
#[derive(Debug, Clone, Serialize)]
pub struct PoincareEstimate {
    pub constant: f64,
    pub minimizer_hash: String,
    pub grid_h: f64,
    pub method: PoincareMethod,
    /// Relative change of the constant against the next-coarser grid;
    /// absent when that grid cannot resolve the problem.
    pub refinement_drift: Option<f64>,
    /// Number of descent restarts for the general-p path, zero otherwise.
    pub restarts: usize,
}

const DENSE_DOF_LIMIT: usize = 4096;

pub fn poincare_constant(
    spec: &SubspaceSpec,
    k: &dyn KernelEval,
    p: f64,
    grid: &Arc<Grid>,
) -> Result<PoincareEstimate> {
    if (p - k.exponent_p()).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "exponent p does not match the kernel".into(),
        ));
    }
    let (constant, minimizer, method, restarts) = solve_poincare(spec, k, p, grid, DENSE_DOF_LIMIT)?;
    let d = grid.d;
    let coarse_h = 2.0 * grid.max_h();
    let refinement_drift = match Grid::by_h(grid.domain.clone(), coarse_h) {
        Ok(coarse) => {
            let coarse = Arc::new(coarse);
            match solve_poincare(spec, k, p, &coarse, DENSE_DOF_LIMIT) {
                Ok((c_coarse, _, _, _)) => Some((constant - c_coarse).abs() / constant),
                Err(_) => None,
            }
        }
        Err(_) => None,
    };
    let grid_h = grid.h[..d].iter().cloned().fold(0.0f64, f64::max);
    Ok(PoincareEstimate {
        constant,
        minimizer_hash: minimizer.content_hash(),
        grid_h,
        method,
        refinement_drift,
        restarts,
    })
}

fn solve_poincare(
    spec: &SubspaceSpec,
    k: &dyn KernelEval,
    p: f64,
    grid: &Arc<Grid>,
    dense_limit: usize,
) -> Result<(f64, VectorField, PoincareMethod, usize)> {
    if k.dim() != grid.d {
        return Err(Error::InvalidArgument(
            "kernel dimension does not match the grid".into(),
        ));
    }
    if p == 2.0 {
        let dofs = grid.len() * grid.d;
        if dofs <= dense_limit {
            let (c, u) = dense_eigen_path(spec, k, grid)?;
            Ok((c, u, PoincareMethod::DenseEigen, 0))
        } else {
            let (c, u) = iterative_eigen_path(spec, k, grid)?;
            Ok((c, u, PoincareMethod::IterativeEigen, 0))
        }
    } else {
        let restarts = 10;
        let (c, u) = rayleigh_descent_path(spec, k, p, grid, restarts, 0)?;
        Ok((c, u, PoincareMethod::RayleighDescent, restarts))
    }
}

/// Rows of the constraint functional: entry for degree of freedom `(i, a)`
/// is `w_i v[i, a]`, so that a row dotted with the flat field equals the
/// weighted inner product with the constraint field.
fn constraint_rows(grid: &Grid, fields: &[VectorField]) -> Vec<Vec<f64>> {
    let d = grid.d;
    fields
        .iter()
        .map(|v| {
            let mut row = vec![0.0; grid.len() * d];
            for i in 0..grid.len() {
                let val = v.node_value(i);
                for a in 0..d {
                    row[i * d + a] = grid.weights[i] * val[a];
                }
            }
            row
        })
        .collect()
}

struct ConstraintProjector {
    /// Rows in the half-weighted coordinates `y = W^(1/2) u`.
    rows: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
}

impl ConstraintProjector {
    fn new(grid: &Grid, fields: &[VectorField]) -> Result<ConstraintProjector> {
        let d = grid.d;
        let rows: Vec<Vec<f64>> = fields
            .iter()
            .map(|v| {
                let mut row = vec![0.0; grid.len() * d];
                for i in 0..grid.len() {
                    let val = v.node_value(i);
                    let sw = grid.weights[i].sqrt();
                    for a in 0..d {
                        row[i * d + a] = sw * val[a];
                    }
                }
                row
            })
            .collect();
        let kc = rows.len();
        let gram = DMatrix::from_fn(kc, kc, |i, j| {
            rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>()
        });
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::RankDeficient("constraint fields are dependent on this grid".into())
        })?;
        Ok(ConstraintProjector { rows, chol })
    }

    fn project(&self, y: &mut [f64]) {
        let kc = self.rows.len();
        let mut rhs = DVector::zeros(kc);
        for (k, row) in self.rows.iter().enumerate() {
            rhs[k] = row.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        }
        let alpha = self.chol.solve(&rhs);
        for (k, row) in self.rows.iter().enumerate() {
            let c = alpha[k];
            for (yi, ri) in y.iter_mut().zip(row) {
                *yi -= c * ri;
            }
        }
    }
}

/// Applies the seminorm quadratic form in half-weighted coordinates:
/// `y -> W^(-1/2) S W^(-1/2) y`.  Rows are evaluated independently, each
/// accumulating over its partner column in a fixed order.
fn apply_form_halfweighted(
    plan: &PairPlan,
    grid: &Grid,
    k: &dyn KernelEval,
    y: &[f64],
) -> Vec<f64> {
    let d = grid.d;
    let n = grid.len();
    let u: Vec<f64> = (0..n * d)
        .map(|r| y[r] / grid.weights[r / d].sqrt())
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = grid.weights[i];
            let mut out = vec![0.0f64; d];
            for_row_pairs(plan, grid, k, i, &mut |j, coef, dir| {
                let cij = wi * grid.weights[j] * coef;
                let cji = match pair_coef(plan, grid, k, j, i) {
                    Some((c, _)) => wi * grid.weights[j] * c,
                    None => 0.0,
                };
                let mut t = 0.0;
                for a in 0..d {
                    t += (u[j * d + a] - u[i * d + a]) * dir[a];
                }
                let c = cij + cji;
                for (a, o) in out.iter_mut().enumerate() {
                    *o -= c * t * dir[a];
                }
            });
            out
        })
        .collect();
    let mut result = vec![0.0; n * d];
    for (i, row) in rows.iter().enumerate() {
        for a in 0..d {
            result[i * d + a] = row[a] / grid.weights[i].sqrt();
        }
    }
    result
}

fn field_from_halfweighted(grid: &Arc<Grid>, y: &[f64]) -> VectorField {
    let d = grid.d;
    let values: Vec<f64> = (0..grid.len() * d)
        .map(|r| y[r] / grid.weights[r / d].sqrt())
        .collect();
    VectorField { grid: Arc::clone(grid), values }
}

/// Fixes the overall sign and scale of an eigenvector-like field so that
/// hashes are stable: unit weighted norm, largest component positive.
fn canonicalize(u: &mut VectorField) {
    let nrm = u.dot_weighted(u).map(|v| v.sqrt()).unwrap_or(0.0);
    if nrm > 0.0 {
        u.scale(1.0 / nrm);
    }
    let mut lead = 0.0f64;
    for &v in &u.values {
        if v.abs() > lead.abs() {
            lead = v;
        }
    }
    if lead < 0.0 {
        u.scale(-1.0);
    }
}

fn dense_eigen_path(
    spec: &SubspaceSpec,
    k: &dyn KernelEval,
    grid: &Arc<Grid>,
) -> Result<(f64, VectorField)> {
    let d = grid.d;
    let n = grid.len();
    let dofs = n * d;
    let plan = build_plan(grid, k)?;
    // Assemble S: each ordered pair contributes the expansion of
    // c ((u_j - u_i) . z)^2 into its four blocks.
    let mut s = DMatrix::<f64>::zeros(dofs, dofs);
    for i in 0..n {
        let wi = grid.weights[i];
        for_row_pairs(&plan, grid, k, i, &mut |j, coef, dir| {
            let c = wi * grid.weights[j] * coef;
            for a in 0..d {
                for b in 0..d {
                    let v = c * dir[a] * dir[b];
                    s[(i * d + a, i * d + b)] += v;
                    s[(j * d + a, j * d + b)] += v;
                    s[(i * d + a, j * d + b)] -= v;
                    s[(j * d + a, i * d + b)] -= v;
                }
            }
        });
    }
    // Half-weighted coordinates.
    let a_tilde = DMatrix::from_fn(dofs, dofs, |r, c| {
        s[(r, c)] / (grid.weights[r / d] * grid.weights[c / d]).sqrt()
    });
    let fields = spec.weight_fields(grid);
    let projector = ConstraintProjector::new(grid, &fields)?;
    let kc = projector.rows.len();
    let ct = DMatrix::from_fn(kc, dofs, |r, c| projector.rows[r][c]);
    let mt = ct.transpose();
    let gram = &ct * &mt;
    let gram_inv = Cholesky::new(gram)
        .ok_or_else(|| Error::RankDeficient("constraint fields are dependent on this grid".into()))?
        .inverse();
    // P A P + sigma (I - P) expanded through the rank-k constraint block, so
    // every product stays O(k n^2) instead of n^3.
    let w = &gram_inv * &ct;
    let am = &a_tilde * &mt;
    let wam = &w * &am;
    let awg = &am * &gram_inv;
    let sigma = a_tilde.trace();
    let mut b = a_tilde;
    b -= &awg * &ct;
    b -= &mt * awg.transpose();
    b += &mt * (&wam * &w);
    b += (&mt * &w).scale(sigma);
    let b = (&b + b.transpose()).scale(0.5);
    let eig = b.symmetric_eigen();
    let mut best = 0usize;
    for idx in 1..dofs {
        if eig.eigenvalues[idx] < eig.eigenvalues[best] {
            best = idx;
        }
    }
    let lambda = eig.eigenvalues[best];
    if !(lambda > 1e-12 * sigma.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(
            "the constrained form is singular: the subspace still contains a rigid direction"
                .into(),
        ));
    }
    let y: Vec<f64> = eig.eigenvectors.column(best).iter().cloned().collect();
    let mut u = field_from_halfweighted(grid, &y);
    canonicalize(&mut u);
    Ok((1.0 / lambda, u))
}

fn iterative_eigen_path(
    spec: &SubspaceSpec,
    k: &dyn KernelEval,
    grid: &Arc<Grid>,
) -> Result<(f64, VectorField)> {
    let d = grid.d;
    let dofs = grid.len() * d;
    let plan = build_plan(grid, k)?;
    let fields = spec.weight_fields(grid);
    let projector = ConstraintProjector::new(grid, &fields)?;
    // Trace of the half-weighted form, for the penalty shift and the scale
    // of the convergence test: diagonal entries are sums of positive pair
    // coefficients.
    let trace: f64 = {
        let diags: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for_row_pairs(&plan, grid, k, i, &mut |j, coef, dir| {
                    let c = grid.weights[i] * grid.weights[j] * coef;
                    let mut diag = 0.0;
                    for a in 0..d {
                        diag += dir[a] * dir[a];
                    }
                    // The pair adds c zz^T to both diagonal blocks; in the
                    // half-weighted form each block is divided by its own
                    // weight.
                    acc += c * diag * (1.0 / grid.weights[i] + 1.0 / grid.weights[j]);
                });
                acc
            })
            .collect();
        pairwise_sum(&diags)
    };
    let sigma = trace.max(f64::MIN_POSITIVE);
    let apply_b = |y: &[f64]| -> Vec<f64> {
        let mut py = y.to_vec();
        projector.project(&mut py);
        let mut out = apply_form_halfweighted(&plan, grid, k, &py);
        projector.project(&mut out);
        for r in 0..dofs {
            out[r] += sigma * (y[r] - py[r]);
        }
        out
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let norm = |a: &[f64]| -> f64 { dot(a, a).sqrt() };

    // Deterministic start, projected into the constraint subspace.
    let mut rng = ChaCha20Rng::seed_from_u64(0x9e3779b9);
    let mut y: Vec<f64> = (0..dofs).map(|_| StandardNormal.sample(&mut rng)).collect();
    projector.project(&mut y);
    let n0 = norm(&y);
    if !(n0 > 0.0) {
        return Err(Error::Degenerate("constraint projector annihilated the start vector".into()));
    }
    y.iter_mut().for_each(|v| *v /= n0);
    let mut by = apply_b(&y);
    let mut lambda = dot(&y, &by);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut stable = 0;
    for _ in 0..600 {
        let r: Vec<f64> = (0..dofs).map(|i| by[i] - lambda * y[i]).collect();
        if norm(&r) <= 1e-11 * sigma {
            break;
        }
        let mut z = r;
        projector.project(&mut z);
        // Rayleigh-Ritz over {y, residual, previous step}.
        let mut basis: Vec<Vec<f64>> = vec![y.clone()];
        let mut images: Vec<Vec<f64>> = vec![by.clone()];
        for cand in [Some(z), prev.as_ref().map(|(v, _)| v.clone())].into_iter().flatten() {
            let mut v = cand;
            for q in &basis {
                let c = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
            let nv = norm(&v);
            if nv > 1e-10 {
                v.iter_mut().for_each(|x| *x /= nv);
                images.push(apply_b(&v));
                basis.push(v);
            }
        }
        let mdim = basis.len();
        if mdim == 1 {
            break;
        }
        let small = DMatrix::from_fn(mdim, mdim, |i, j| dot(&basis[i], &images[j]));
        let small = (&small + small.transpose()).scale(0.5);
        let eig = small.symmetric_eigen();
        let mut best = 0usize;
        for idx in 1..mdim {
            if eig.eigenvalues[idx] < eig.eigenvalues[best] {
                best = idx;
            }
        }
        let q = eig.eigenvectors.column(best);
        let mut y_new = vec![0.0; dofs];
        let mut by_new = vec![0.0; dofs];
        for (bi, (bv, iv)) in basis.iter().zip(&images).enumerate() {
            let c = q[bi];
            for r in 0..dofs {
                y_new[r] += c * bv[r];
                by_new[r] += c * iv[r];
            }
        }
        let nn = norm(&y_new);
        y_new.iter_mut().for_each(|v| *v /= nn);
        by_new.iter_mut().for_each(|v| *v /= nn);
        let lambda_new = eig.eigenvalues[best];
        prev = Some((y.clone(), by.clone()));
        y = y_new;
        by = by_new;
        if (lambda_new - lambda).abs() <= 1e-13 * lambda.abs().max(1e-300) {
            stable += 1;
            if stable >= 3 {
                lambda = lambda_new;
                break;
            }
        } else {
            stable = 0;
        }
        lambda = lambda_new;
    }
    if !(lambda > 1e-12 * sigma) {
        return Err(Error::Degenerate(
            "the constrained form is singular: the subspace still contains a rigid direction"
                .into(),
        ));
    }
    let mut u = field_from_halfweighted(grid, &y);
    canonicalize(&mut u);
    Ok((1.0 / lambda, u))
}

/// Seminorm energy and its gradient with respect to the node values, for
/// the descent path.
fn energy_and_grad(
    plan: &PairPlan,
    grid: &Grid,
    k: &dyn KernelEval,
    p: f64,
    u: &VectorField,
) -> (f64, Vec<f64>) {
    let d = grid.d;
    let n = grid.len();
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = grid.weights[i];
            let ui = u.node_value(i);
            let mut terms = Vec::new();
            let mut gr = vec![0.0f64; d];
            for_row_pairs(plan, grid, k, i, &mut |j, coef, dir| {
                let uj = u.node_value(j);
                let mut t = 0.0;
                for a in 0..d {
                    t += (uj[a] - ui[a]) * dir[a];
                }
                let cij = wi * grid.weights[j] * coef;
                terms.push(cij * t.abs().powf(p));
                let cji = match pair_coef(plan, grid, k, j, i) {
                    Some((c, _)) => wi * grid.weights[j] * c,
                    None => 0.0,
                };
                let slope = p * t.abs().powf(p - 1.0) * t.signum();
                for (a, g) in gr.iter_mut().enumerate() {
                    *g -= (cij + cji) * slope * dir[a];
                }
            });
            (pairwise_sum(&terms), gr)
        })
        .collect();
    let energy = pairwise_sum(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let mut grad = vec![0.0; n * d];
    for (i, (_, gr)) in rows.iter().enumerate() {
        for a in 0..d {
            grad[i * d + a] = gr[a];
        }
    }
    (energy, grad)
}

fn rayleigh_descent_path(
    spec: &SubspaceSpec,
    k: &dyn KernelEval,
    p: f64,
    grid: &Arc<Grid>,
    restarts: usize,
    seed: u64,
) -> Result<(f64, VectorField)> {
    let d = grid.d;
    let n = grid.len();
    let plan = build_plan(grid, k)?;
    let fields = spec.weight_fields(grid);
    let rows = constraint_rows(grid, &fields);
    let kc = rows.len();
    let gram = DMatrix::from_fn(kc, kc, |i, j| {
        rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::RankDeficient("constraint fields are dependent on this grid".into())
    })?;
    let project = |vals: &mut [f64]| {
        let mut rhs = DVector::zeros(kc);
        for (kk, row) in rows.iter().enumerate() {
            rhs[kk] = row.iter().zip(vals.iter()).map(|(a, b)| a * b).sum();
        }
        let alpha = chol.solve(&rhs);
        for (kk, row) in rows.iter().enumerate() {
            let c = alpha[kk];
            for (v, r) in vals.iter_mut().zip(row) {
                *v -= c * r;
            }
        }
    };
    let lp_pow = |vals: &[f64]| -> f64 {
        let terms: Vec<f64> = (0..n)
            .map(|i| {
                let n2: f64 = (0..d).map(|a| vals[i * d + a] * vals[i * d + a]).sum();
                grid.weights[i] * n2.sqrt().powf(p)
            })
            .collect();
        pairwise_sum(&terms)
    };
    let mut best: Option<(f64, VectorField)> = None;
    for s in 0..restarts {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1000 + s as u64);
        let mut vals: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        project(&mut vals);
        let nm = lp_pow(&vals);
        if !(nm > 0.0) {
            continue;
        }
        let scale = nm.powf(1.0 / p);
        vals.iter_mut().for_each(|v| *v /= scale);
        let mut u = VectorField { grid: Arc::clone(grid), values: vals };
        let (mut energy, mut grad) = energy_and_grad(&plan, grid, k, p, &u);
        let mut iters = 0;
        while iters < 400 {
            iters += 1;
            if !(energy > 0.0) {
                break;
            }
            // Gradient of E/N at unit norm: grad E - E * grad N.
            let mut g = grad.clone();
            for i in 0..n {
                let v = u.node_value(i);
                let n2: f64 = (0..d).map(|a| v[a] * v[a]).sum();
                if n2 > 0.0 {
                    let c = energy * p * grid.weights[i] * n2.sqrt().powf(p - 2.0);
                    for a in 0..d {
                        g[i * d + a] -= c * v[a];
                    }
                }
            }
            project(&mut g);
            let gn: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let un: f64 = u.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gn <= 1e-14 * un.max(1.0) {
                break;
            }
            let mut tau = un / gn;
            let mut improved = false;
            for _ in 0..30 {
                let mut cand: Vec<f64> =
                    u.values.iter().zip(&g).map(|(v, gi)| v - tau * gi).collect();
                project(&mut cand);
                let nm = lp_pow(&cand);
                if nm > 0.0 {
                    let sc = nm.powf(1.0 / p);
                    cand.iter_mut().for_each(|v| *v /= sc);
                    let cand_field = VectorField { grid: Arc::clone(grid), values: cand };
                    let (e2, g2) = energy_and_grad(&plan, grid, k, p, &cand_field);
                    if e2 < energy * (1.0 - 1e-12) {
                        let gain = (energy - e2) / energy;
                        u = cand_field;
                        energy = e2;
                        grad = g2;
                        improved = true;
                        if gain < 1e-9 {
                            iters = 400;
                        }
                        break;
                    }
                }
                tau *= 0.25;
            }
            if !improved {
                break;
            }
        }
        if energy > 0.0 {
            let c = 1.0 / energy;
            if best.as_ref().map_or(true, |(bc, _)| c > *bc) {
                best = Some((c, u));
            }
        }
    }
    let (c, mut u) = best.ok_or_else(|| {
        Error::Degenerate("every descent restart collapsed onto the constraint set".into())
    })?;
    canonicalize(&mut u);
    Ok((c, u))
}

// ---------------------------------------------------------------------------
// Kernel approximation families
// ---------------------------------------------------------------------------

/// The base kernel with everything inside radius `1/n` removed.  As `n`
/// grows the removed mass vanishes, so the family converges weakly to the
/// base kernel with no renormalization.
#[derive(Debug, Clone)]
pub struct InnerTruncatedKernel {
    base: Kernel,
    inner_radius: f64,
    index: usize,
}

impl InnerTruncatedKernel {
    pub fn new(base: Kernel, n: usize) -> Result<InnerTruncatedKernel> {
        if n == 0 {
            return Err(Error::InvalidArgument("family index must be positive".into()));
        }
        Ok(InnerTruncatedKernel { base, inner_radius: 1.0 / n as f64, index: n })
    }
}

impl KernelEval for InnerTruncatedKernel {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn exponent_p(&self) -> f64 {
        self.base.exponent_p()
    }
    fn support_radius(&self) -> Option<f64> {
        self.base.support_radius()
    }
    fn is_radial(&self) -> bool {
        self.base.is_radial()
    }
    fn restriction_cone(&self) -> Option<&Cone> {
        self.base.restriction_cone()
    }
    fn eval_at(&self, off: &Point, r: f64) -> f64 {
        if r <= self.inner_radius {
            0.0
        } else {
            self.base.eval_at(off, r)
        }
    }
    fn value_at_origin(&self) -> Result<f64> {
        Ok(0.0)
    }
    fn describe(&self) -> String {
        format!("inner-truncated[{}]({})", self.index, self.base.describe())
    }
}

/// The base kernel smoothed at scale `1/n`: the radial mass profile
/// `rho(r) r^(d-1)` is convolved with a bump of width `1/n` and divided
/// back, so the total mass is carried over and the result converges weakly
/// to the base kernel.  The profile is cached as a log-log table; a base
/// without compact support is tabulated out to a fixed horizon of four,
/// beyond every desk-scale domain diameter.
#[derive(Debug, Clone)]
pub struct MollifiedKernel {
    d: usize,
    p: f64,
    width: f64,
    index: usize,
    table: RadialTable,
    near_origin: f64,
    base_desc: String,
}

const MOLLIFIED_HORIZON: f64 = 4.0;

impl MollifiedKernel {
    pub fn new(base: &Kernel, n: usize) -> Result<MollifiedKernel> {
        if n == 0 {
            return Err(Error::InvalidArgument("family index must be positive".into()));
        }
        if !base.is_radial() {
            return Err(Error::Unsupported(
                "profile mollification needs a radial kernel".into(),
            ));
        }
        let d = base.dim();
        let p = base.exponent_p();
        let width = 1.0 / n as f64;
        let r_hi = base.support_radius().map_or(MOLLIFIED_HORIZON + width, |r| r + width);
        // Normalization of the 1D bump profile.
        let bump = |t: f64| -> f64 {
            let t2 = t * t;
            if t2 < 1.0 {
                (1.0 - 1.0 / (1.0 - t2)).exp()
            } else {
                0.0
            }
        };
        let bump_mass = adaptive_quad(&mut |t| bump(t), -1.0, 1.0, 0.0, 1e-12).value;
        let g = |x: f64| -> f64 {
            if x <= 0.0 {
                return 0.0;
            }
            match base.eval_at(&[x, 0.0, 0.0], x) {
                v if v.is_finite() => v * x.powi(d as i32 - 1),
                _ => 0.0,
            }
        };
        let smoothed = |r: f64| -> f64 {
            let hi = width.min(r);
            if !(hi > -width) {
                return 0.0;
            }
            adaptive_quad(
                &mut |s| bump(s / width) / (width * bump_mass) * g(r - s),
                -width,
                hi,
                0.0,
                1e-10,
            )
            .value
        };
        let n_knots = 320usize;
        let r_lo = width * 1e-3;
        let ratio = (r_hi / r_lo).powf(1.0 / (n_knots - 1) as f64);
        let mut radii = Vec::new();
        let mut values = Vec::new();
        let mut rk = r_lo;
        for _ in 0..n_knots {
            let v = smoothed(rk) / rk.powi(d as i32 - 1);
            if v.is_finite() && v > 0.0 {
                radii.push(rk);
                values.push(v);
            }
            rk *= ratio;
        }
        if radii.len() < 2 {
            return Err(Error::Degenerate(
                "smoothed profile vanished everywhere on the knot grid".into(),
            ));
        }
        let near_origin = values[0];
        let table = RadialTable::new(radii, values)?;
        Ok(MollifiedKernel {
            d,
            p,
            width,
            index: n,
            table,
            near_origin,
            base_desc: base.describe(),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }
}

impl KernelEval for MollifiedKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn exponent_p(&self) -> f64 {
        self.p
    }
    fn support_radius(&self) -> Option<f64> {
        Some(self.table.r_max())
    }
    fn is_radial(&self) -> bool {
        true
    }
    fn eval_at(&self, _off: &Point, r: f64) -> f64 {
        self.table.eval(r)
    }
    fn value_at_origin(&self) -> Result<f64> {
        if self.d == 1 {
            Ok(self.near_origin)
        } else {
            Err(Error::Singularity)
        }
    }
    fn describe(&self) -> String {
        format!("mollified[{}]({})", self.index, self.base_desc)
    }
}

/// The normalized indicator of the ball of radius `1/n`: unit mass
/// concentrating at the origin as `n` grows.
#[derive(Debug, Clone)]
pub struct RescaledBallKernel {
    d: usize,
    p: f64,
    radius: f64,
    amplitude: f64,
    index: usize,
}

fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI / 3.0,
    }
}

impl RescaledBallKernel {
    pub fn new(d: usize, p: f64, n: usize) -> Result<RescaledBallKernel> {
        if !(1..=3).contains(&d) {
            return Err(Error::Unsupported("dimension must be 1, 2, or 3".into()));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::InvalidArgument("exponent p must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("family index must be positive".into()));
        }
        let radius = 1.0 / n as f64;
        let amplitude = 1.0 / (unit_ball_volume(d) * radius.powi(d as i32));
        Ok(RescaledBallKernel { d, p, radius, amplitude, index: n })
    }
}

impl KernelEval for RescaledBallKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn exponent_p(&self) -> f64 {
        self.p
    }
    fn support_radius(&self) -> Option<f64> {
        Some(self.radius)
    }
    fn is_radial(&self) -> bool {
        true
    }
    fn eval_at(&self, _off: &Point, r: f64) -> f64 {
        if r <= self.radius {
            self.amplitude
        } else {
            0.0
        }
    }
    fn value_at_origin(&self) -> Result<f64> {
        Ok(self.amplitude)
    }
    fn describe(&self) -> String {
        format!("rescaled-ball[{}](d={}, p={})", self.index, self.d, self.p)
    }
}

/// Which approximation family a sequence experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Mollified,
    InnerTruncated,
    RescaledBall,
}

fn family_kernel(family: KernelFamily, base: &Kernel, n: usize) -> Result<Box<dyn KernelEval>> {
    Ok(match family {
        KernelFamily::Mollified => Box::new(MollifiedKernel::new(base, n)?),
        KernelFamily::InnerTruncated => Box::new(InnerTruncatedKernel::new(base.clone(), n)?),
        KernelFamily::RescaledBall => {
            Box::new(RescaledBallKernel::new(base.dim(), base.exponent_p(), n)?)
        }
    })
}

// ---------------------------------------------------------------------------
// Compactness harnesses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompactnessVerdict {
    NoObstruction,
    ConcentrationDetected,
    OscillationDetected,
}

/// Measured diagnostics for one sequence of fields: the two failure modes
/// (mass escaping through the boundary, oscillation surviving every
/// mollification radius) and the verdict from their 5 percent detectors.
#[derive(Debug, Clone, Serialize)]
pub struct CompactnessReport {
    pub sequence_id: String,
    pub sup_seminorm: f64,
    /// `(delta, sup over the sequence of the smoothing gap)`.
    pub gap_curve: Vec<(f64, f64)>,
    /// `(tau, sup over the sequence of the mass within tau of the boundary)`.
    pub boundary_mass_curve: Vec<(f64, f64)>,
    pub verdict: CompactnessVerdict,
    /// For the certified-bound probe: the largest measured ratio of gap to
    /// `(delta^p / cone mass below delta) * seminorm` over the sweep.
    pub envelope_constant: Option<f64>,
}

/// Dyadic radii `2^-j` that the grid can resolve: at most half the
/// narrowest box extent, at least two cells.
fn dyadic_radii(grid: &Grid) -> Result<Vec<f64>> {
    let d = grid.d;
    let mut narrow = f64::INFINITY;
    for a in 0..d {
        narrow = narrow.min(grid.hi[a] - grid.lo[a]);
    }
    let floor = 2.0 * grid.max_h() * (1.0 - 1e-12);
    let mut out = Vec::new();
    let mut delta = 0.5f64;
    while delta > 0.5 * narrow * (1.0 + 1e-12) {
        delta *= 0.5;
    }
    while delta >= floor {
        out.push(delta);
        delta *= 0.5;
    }
    if out.is_empty() {
        return Err(Error::Resolution(
            "no dyadic radius fits between two cells and the domain width".into(),
        ));
    }
    Ok(out)
}

fn boundary_mass(u: &VectorField, tau: f64, p: f64) -> Result<f64> {
    let grid = &u.grid;
    let d = grid.d;
    let mask = grid.interior_mask(tau)?;
    let terms: Vec<f64> = (0..grid.len())
        .filter(|&i| !mask[i])
        .map(|i| {
            let v = u.node_value(i);
            let n2: f64 = (0..d).map(|a| v[a] * v[a]).sum();
            grid.weights[i] * if p == 2.0 { n2 } else { n2.sqrt().powf(p) }
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

fn same_grid(fields: &[VectorField]) -> Result<Arc<Grid>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("sequence must hold at least one field".into()))?;
    for f in fields {
        if !Arc::ptr_eq(&f.grid, &first.grid) && f.grid.dims != first.grid.dims {
            return Err(Error::InvalidArgument("sequence fields live on different grids".into()));
        }
    }
    Ok(Arc::clone(&first.grid))
}

fn verdict_from_curves(
    gap_curve: &[(f64, f64)],
    boundary_curve: &[(f64, f64)],
    reference: f64,
) -> CompactnessVerdict {
    let leak = boundary_curve.last().map_or(0.0, |&(_, m)| m);
    if leak >= 0.05 * reference {
        return CompactnessVerdict::ConcentrationDetected;
    }
    let best_gap = gap_curve.iter().map(|&(_, g)| g).fold(f64::INFINITY, f64::min);
    if best_gap >= 0.05 * reference {
        return CompactnessVerdict::OscillationDetected;
    }
    CompactnessVerdict::NoObstruction
}

/// Runs one sequence of fields against one approximation family of the base
/// kernel: per-term seminorms under the term's own kernel, the smoothing-gap
/// curve under the full-sphere mollifier, and boundary mass curves.  The
/// base kernel stands in for the family's weak limit and must pass the
/// small-ball mass condition.
pub fn kernel_sequence_experiment(
    family: KernelFamily,
    base: &Kernel,
    fields: &[VectorField],
    sequence_id: &str,
) -> Result<CompactnessReport> {
    let grid = same_grid(fields)?;
    let d = grid.d;
    let p = base.exponent_p();
    if family != KernelFamily::RescaledBall {
        let report = check_mass_ratio_limit(base, &default_delta_sequence())?;
        if report.verdict == Verdict::Violated {
            return Err(Error::InvalidArgument(
                "the family's target kernel fails the small-ball mass condition".into(),
            ));
        }
    }
    let seminorms: Vec<f64> = fields
        .iter()
        .enumerate()
        .map(|(idx, u)| {
            let kn = family_kernel(family, base, idx + 1)?;
            Ok(seminorm(u, kn.as_ref())?.value_p)
        })
        .collect::<Result<_>>()?;
    let sup_seminorm = seminorms.iter().cloned().fold(0.0f64, f64::max);
    let first = seminorms[0].max(1e-300);
    if sup_seminorm / first > 1e3 {
        return Err(Error::HypothesisViolated(format!(
            "seminorms grow by {:.3e} along the sequence; the bounded-energy hypothesis fails",
            sup_seminorm / first
        )));
    }
    let mm = cone_matrix(&Cone::full(d)?)?;
    let radii = dyadic_radii(&grid)?;
    let cells: Vec<(usize, usize)> = (0..radii.len())
        .flat_map(|j| (0..fields.len()).map(move |n| (j, n)))
        .collect();
    let gaps: Vec<f64> = cells
        .par_iter()
        .map(|&(j, n)| smoothing_gap(&fields[n], &mm, radii[j], p))
        .collect::<Result<_>>()?;
    let gap_curve: Vec<(f64, f64)> = radii
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let sup = (0..fields.len())
                .map(|n| gaps[j * fields.len() + n])
                .fold(0.0f64, f64::max);
            (delta, sup)
        })
        .collect();
    let boundary_mass_curve: Vec<(f64, f64)> = radii
        .iter()
        .map(|&tau| {
            let sup = fields
                .iter()
                .map(|u| boundary_mass(u, tau, p))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0f64, f64::max);
            Ok((tau, sup))
        })
        .collect::<Result<_>>()?;
    let reference = fields.iter().map(|u| u.lp_norm_pow(p)).fold(0.0f64, f64::max);
    if !(reference > 0.0) {
        return Err(Error::Degenerate("the sequence carries no mass".into()));
    }
    let verdict = verdict_from_curves(&gap_curve, &boundary_mass_curve, reference);
    Ok(CompactnessReport {
        sequence_id: sequence_id.to_string(),
        sup_seminorm,
        gap_curve,
        boundary_mass_curve,
        verdict,
        envelope_constant: None,
    })
}

/// Sweeps a sequence of fields against one fixed kernel and cone: checks
/// the cone mass condition, measures smoothing gaps under the cone's own
/// mollifier, and records the envelope constant of the certified bound
/// `gap <= C * (delta^p / cone mass below delta) * seminorm`.
pub fn compactness_probe(
    fields: &[VectorField],
    k: &dyn KernelEval,
    theta0: f64,
    cone: &Cone,
    sequence_id: &str,
) -> Result<CompactnessReport> {
    let grid = same_grid(fields)?;
    let d = grid.d;
    let p = k.exponent_p();
    let pre = check_cone_condition(k, theta0, cone, &default_delta_sequence())?;
    if pre.verdict != Verdict::Satisfied {
        return Err(Error::Unsupported(
            "the kernel does not satisfy the cone mass condition for this cone".into(),
        ));
    }
    let mm = cone_matrix(cone)?;
    let seminorms: Vec<f64> = fields
        .iter()
        .map(|u| Ok(seminorm(u, k)?.value_p))
        .collect::<Result<_>>()?;
    let sup_seminorm = seminorms.iter().cloned().fold(0.0f64, f64::max);
    let radii = dyadic_radii(&grid)?;
    let v0 = cone.axis;
    let mut bounds = Vec::with_capacity(radii.len());
    for &delta in &radii {
        let mut bad = false;
        let mass = adaptive_quad(
            &mut |s| match rho_theta0(k, theta0, s, &v0) {
                Ok(v) => v * s.powi(d as i32 - 1),
                Err(_) => {
                    bad = true;
                    0.0
                }
            },
            0.0,
            delta,
            0.0,
            1e-8,
        )
        .value;
        if bad || !(mass > 0.0) {
            return Err(Error::DegenerateKernel(
                "cone-infimum kernel carries no mass below delta".into(),
            ));
        }
        bounds.push(delta.powf(p) / mass);
    }
    let cells: Vec<(usize, usize)> = (0..radii.len())
        .flat_map(|j| (0..fields.len()).map(move |n| (j, n)))
        .collect();
    let gaps: Vec<f64> = cells
        .par_iter()
        .map(|&(j, n)| smoothing_gap(&fields[n], &mm, radii[j], p))
        .collect::<Result<_>>()?;
    let gap_curve: Vec<(f64, f64)> = radii
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let sup = (0..fields.len())
                .map(|n| gaps[j * fields.len() + n])
                .fold(0.0f64, f64::max);
            (delta, sup)
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut admissible = false;
    for j in 0..radii.len() {
        for n in 0..fields.len() {
            if seminorms[n] > 1e-14 * sup_seminorm.max(f64::MIN_POSITIVE) {
                admissible = true;
                envelope = envelope.max(gaps[j * fields.len() + n] / (bounds[j] * seminorms[n]));
            }
        }
    }
    let boundary_mass_curve: Vec<(f64, f64)> = radii
        .iter()
        .map(|&tau| {
            let sup = fields
                .iter()
                .map(|u| boundary_mass(u, tau, p))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0f64, f64::max);
            Ok((tau, sup))
        })
        .collect::<Result<_>>()?;
    let reference = fields.iter().map(|u| u.lp_norm_pow(p)).fold(0.0f64, f64::max);
    if !(reference > 0.0) {
        return Err(Error::Degenerate("the sequence carries no mass".into()));
    }
    let verdict = verdict_from_curves(&gap_curve, &boundary_mass_curve, reference);
    Ok(CompactnessReport {
        sequence_id: sequence_id.to_string(),
        sup_seminorm,
        gap_curve,
        boundary_mass_curve,
        verdict,
        envelope_constant: if admissible { Some(envelope) } else { None },
    })
}
