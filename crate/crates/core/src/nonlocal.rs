//! The projected-difference seminorm and the machinery around it.
//!
//! The seminorm weighs, for every ordered pair of grid nodes, the component
//! of the field difference along the line joining the nodes against the
//! interaction kernel.  Cell-centered grids keep every pair at least one
//! cell width apart, so singular kernels are never evaluated at the origin
//! and no regularization parameter exists anywhere in this module.
//!
//! The other half of the module is the direction-set calculus: the second
//! moment matrix of a cone of directions, the matrix-valued mollifier built
//! from its inverse, smoothing gaps, translation moduli, and the ratio
//! behind the shift bound that links the direction functional to the
//! seminorm.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{sample_field, FieldExpr, VectorField};
use crate::geometry::{
    ball_sector, default_quad_n, sector_min_constant, sphere_quadrature, Cone, Domain, Grid, Point,
};
use crate::kernels::KernelEval;
use crate::numerics::{adaptive_quad, pairwise_sum};

// ---------------------------------------------------------------------------
// Projected difference quotient and the seminorm
// ---------------------------------------------------------------------------

/// The scalar projection of the difference quotient between two nodes:
/// `(u(y) - u(x)) . (y - x) / |y - x|^2`.
pub fn projected_quotient(u: &VectorField, x_node: usize, y_node: usize) -> Result<f64> {
    if x_node == y_node {
        return Err(Error::InvalidArgument(
            "projected quotient needs two distinct nodes".into(),
        ));
    }
    let d = u.grid.d;
    let x = &u.grid.nodes[x_node];
    let y = &u.grid.nodes[y_node];
    let ux = u.node_value(x_node);
    let uy = u.node_value(y_node);
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..d {
        let xi = y[a] - x[a];
        num += (uy[a] - ux[a]) * xi;
        den += xi * xi;
    }
    Ok(num / den)
}

/// The seminorm raised to the power `p`, together with bookkeeping about the
/// pair quadrature that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct SeminormResult {
    /// `|u|^p` in the pair quadrature.
    pub value_p: f64,
    /// Ordered node pairs that contributed.
    pub pair_count: u64,
    /// No pair is closer than this; the diagonal is excluded exactly.
    pub diagonal_exclusion_radius: f64,
    /// Absolute error estimate from one grid-halving step when requested;
    /// infinite when the kernel overflowed at some realized pair distance.
    pub estimated_quadrature_error: Option<f64>,
    /// Pairs skipped because the kernel value was not finite there.
    pub nonfinite_pairs: u64,
}

pub(crate) struct OffsetEntry {
    /// `rho(z) / |z|^p`.
    coef: f64,
    dir: Point,
    /// 0 diagonal or unused, 1 finite, 2 overflowed.
    state: u8,
}

pub(crate) enum PairPlan {
    /// Dense table over all lattice cell differences.
    Table { ext: [i64; 3], stride: [usize; 3], entries: Vec<OffsetEntry> },
    /// Offsets restricted to the kernel's support ball.
    Sector(Vec<([i64; 3], OffsetEntry)>),
    /// Kernel evaluated pair by pair (large lattices).
    Direct,
}

fn offset_entry(kernel: &dyn KernelEval, z: &Point, p: f64) -> Result<OffsetEntry> {
    let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    let rho = kernel.eval(z)?;
    let coef = rho / r.powf(p);
    let dir = [z[0] / r, z[1] / r, z[2] / r];
    let state = if coef.is_finite() { 1 } else { 2 };
    Ok(OffsetEntry { coef, dir, state })
}

pub(crate) fn build_plan(grid: &Grid, kernel: &dyn KernelEval) -> Result<PairPlan> {
    let p = kernel.exponent_p();
    let table_len: usize = (0..3).map(|a| 2 * grid.dims[a] - 1).product();
    let sector = match kernel.support_radius() {
        Some(r) => {
            let cells = ball_sector(&Cone::full(grid.d)?, r, &grid.h)?;
            if cells.len() < table_len {
                Some(cells)
            } else {
                None
            }
        }
        None => None,
    };
    if let Some(cells) = sector {
        let mut list = Vec::with_capacity(cells.len());
        for c in cells {
            let z = [c[0] as f64 * grid.h[0], c[1] as f64 * grid.h[1], c[2] as f64 * grid.h[2]];
            list.push((c, offset_entry(kernel, &z, p)?));
        }
        return Ok(PairPlan::Sector(list));
    }
    if table_len > 1 << 22 {
        return Ok(PairPlan::Direct);
    }
    let ext = [
        grid.dims[0] as i64 - 1,
        grid.dims[1] as i64 - 1,
        grid.dims[2] as i64 - 1,
    ];
    let stride = [
        (2 * grid.dims[1] - 1) * (2 * grid.dims[2] - 1),
        2 * grid.dims[2] - 1,
        1,
    ];
    let mut entries = Vec::with_capacity(table_len);
    for i in -ext[0]..=ext[0] {
        for j in -ext[1]..=ext[1] {
            for k in -ext[2]..=ext[2] {
                if i == 0 && j == 0 && k == 0 {
                    entries.push(OffsetEntry { coef: 0.0, dir: [0.0; 3], state: 0 });
                    continue;
                }
                let z = [i as f64 * grid.h[0], j as f64 * grid.h[1], k as f64 * grid.h[2]];
                entries.push(offset_entry(kernel, &z, p)?);
            }
        }
    }
    Ok(PairPlan::Table { ext, stride, entries })
}

/// Visit every usable ordered pair `(i, j)` of one row: `f(j, coef, dir)`
/// with `coef = rho(x_j - x_i)/|x_j - x_i|^p` and `dir` the unit offset.
pub(crate) fn for_row_pairs(
    plan: &PairPlan,
    grid: &Grid,
    kernel: &dyn KernelEval,
    i: usize,
    f: &mut dyn FnMut(usize, f64, &Point),
) {
    let ci = grid.node_cells[i];
    match plan {
        PairPlan::Table { ext, stride, entries } => {
            for j in 0..grid.len() {
                if j == i {
                    continue;
                }
                let cj = grid.node_cells[j];
                let idx = ((cj[0] - ci[0] + ext[0]) as usize) * stride[0]
                    + ((cj[1] - ci[1] + ext[1]) as usize) * stride[1]
                    + ((cj[2] - ci[2] + ext[2]) as usize) * stride[2];
                let e = &entries[idx];
                if e.state == 1 {
                    f(j, e.coef, &e.dir);
                }
            }
        }
        PairPlan::Sector(list) => {
            for (off, e) in list {
                if e.state != 1 {
                    continue;
                }
                let cj = [ci[0] + off[0], ci[1] + off[1], ci[2] + off[2]];
                if let Some(j) = grid.node_at_cell(&cj) {
                    f(j, e.coef, &e.dir);
                }
            }
        }
        PairPlan::Direct => {
            let p = kernel.exponent_p();
            let xi = &grid.nodes[i];
            for j in 0..grid.len() {
                if j == i {
                    continue;
                }
                let xj = &grid.nodes[j];
                let z = [xj[0] - xi[0], xj[1] - xi[1], xj[2] - xi[2]];
                if let Ok(e) = offset_entry(kernel, &z, p) {
                    if e.state == 1 {
                        f(j, e.coef, &e.dir);
                    }
                }
            }
        }
    }
}

/// Coefficient and direction for one ordered pair, `None` when the kernel
/// vanishes there or overflowed.
pub(crate) fn pair_coef(
    plan: &PairPlan,
    grid: &Grid,
    kernel: &dyn KernelEval,
    i: usize,
    j: usize,
) -> Option<(f64, Point)> {
    if i == j {
        return None;
    }
    let ci = grid.node_cells[i];
    let cj = grid.node_cells[j];
    let off = [cj[0] - ci[0], cj[1] - ci[1], cj[2] - ci[2]];
    match plan {
        PairPlan::Table { ext, stride, entries } => {
            let idx = ((off[0] + ext[0]) as usize) * stride[0]
                + ((off[1] + ext[1]) as usize) * stride[1]
                + ((off[2] + ext[2]) as usize) * stride[2];
            let e = &entries[idx];
            (e.state == 1).then_some((e.coef, e.dir))
        }
        PairPlan::Sector(list) => {
            let k = list.binary_search_by(|(o, _)| o.cmp(&off)).ok()?;
            let e = &list[k].1;
            (e.state == 1).then_some((e.coef, e.dir))
        }
        PairPlan::Direct => {
            let p = kernel.exponent_p();
            let z = [
                off[0] as f64 * grid.h[0],
                off[1] as f64 * grid.h[1],
                off[2] as f64 * grid.h[2],
            ];
            let e = offset_entry(kernel, &z, p).ok()?;
            (e.state == 1).then_some((e.coef, e.dir))
        }
    }
}

#[inline]
fn projected_power(du: &[f64; 3], dir: &Point, d: usize, p: f64) -> f64 {
    let mut t = 0.0;
    for a in 0..d {
        t += du[a] * dir[a];
    }
    let t = t.abs();
    if p == 2.0 {
        t * t
    } else {
        t.powf(p)
    }
}

/// The seminorm `|u|^p` for the kernel's own exponent `p`, as a plain
/// Riemann sum over ordered node pairs with the diagonal excluded.  The
/// reduction is a fixed pairwise tree over rows, so the value is bit-stable
/// across thread counts.
pub fn seminorm(u: &VectorField, kernel: &dyn KernelEval) -> Result<SeminormResult> {
    let grid = &u.grid;
    let d = grid.d;
    if kernel.dim() != d {
        return Err(Error::InvalidArgument(
            "kernel dimension does not match the grid".into(),
        ));
    }
    let p = kernel.exponent_p();
    let plan = build_plan(grid, kernel)?;
    let n = grid.len();
    let rows: Vec<(f64, u64, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = grid.weights[i];
            let ui = u.node_value(i);
            let ci = grid.node_cells[i];
            let mut terms: Vec<f64> = Vec::new();
            let mut pairs = 0u64;
            let mut bad = 0u64;
            let mut du = [0.0f64; 3];
            match &plan {
                PairPlan::Table { ext, stride, entries } => {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let cj = grid.node_cells[j];
                        let idx = ((cj[0] - ci[0] + ext[0]) as usize) * stride[0]
                            + ((cj[1] - ci[1] + ext[1]) as usize) * stride[1]
                            + ((cj[2] - ci[2] + ext[2]) as usize) * stride[2];
                        let e = &entries[idx];
                        if e.state != 1 {
                            if e.state == 2 {
                                bad += 1;
                            }
                            continue;
                        }
                        let uj = u.node_value(j);
                        for a in 0..d {
                            du[a] = uj[a] - ui[a];
                        }
                        pairs += 1;
                        terms.push(wi * grid.weights[j] * e.coef * projected_power(&du, &e.dir, d, p));
                    }
                }
                PairPlan::Sector(list) => {
                    for (off, e) in list {
                        let cj = [ci[0] + off[0], ci[1] + off[1], ci[2] + off[2]];
                        let Some(j) = grid.node_at_cell(&cj) else { continue };
                        if e.state != 1 {
                            if e.state == 2 {
                                bad += 1;
                            }
                            continue;
                        }
                        let uj = u.node_value(j);
                        for a in 0..d {
                            du[a] = uj[a] - ui[a];
                        }
                        pairs += 1;
                        terms.push(wi * grid.weights[j] * e.coef * projected_power(&du, &e.dir, d, p));
                    }
                }
                PairPlan::Direct => {
                    let xi = &grid.nodes[i];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let xj = &grid.nodes[j];
                        let z = [xj[0] - xi[0], xj[1] - xi[1], xj[2] - xi[2]];
                        let e = match offset_entry(kernel, &z, p) {
                            Ok(e) => e,
                            Err(_) => continue,
                        };
                        if e.state != 1 {
                            if e.state == 2 {
                                bad += 1;
                            }
                            continue;
                        }
                        let uj = u.node_value(j);
                        for a in 0..d {
                            du[a] = uj[a] - ui[a];
                        }
                        pairs += 1;
                        terms.push(wi * grid.weights[j] * e.coef * projected_power(&du, &e.dir, d, p));
                    }
                }
            }
            (pairwise_sum(&terms), pairs, bad)
        })
        .collect();
    let row_values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let nonfinite: u64 = rows.iter().map(|r| r.2).sum();
    Ok(SeminormResult {
        value_p: pairwise_sum(&row_values),
        pair_count: rows.iter().map(|r| r.1).sum(),
        diagonal_exclusion_radius: grid.h[..d].iter().cloned().fold(f64::INFINITY, f64::min),
        estimated_quadrature_error: if nonfinite > 0 { Some(f64::INFINITY) } else { None },
        nonfinite_pairs: nonfinite,
    })
}

/// Seminorm of a closed-form field on an `n`-cell grid, with the error
/// estimated by one halving step: the result carries the fine-grid value and
/// the absolute difference to the coarse grid.
pub fn seminorm_with_refinement(
    domain: &Domain,
    expr: &FieldExpr,
    kernel: &dyn KernelEval,
    n: usize,
) -> Result<SeminormResult> {
    let coarse_grid = Arc::new(Grid::by_n(domain.clone(), n)?);
    let fine_grid = Arc::new(Grid::by_n(domain.clone(), 2 * n)?);
    let coarse = seminorm(&sample_field(&coarse_grid, expr), kernel)?;
    let mut fine = seminorm(&sample_field(&fine_grid, expr), kernel)?;
    if fine.estimated_quadrature_error.is_none() {
        fine.estimated_quadrature_error = Some((fine.value_p - coarse.value_p).abs());
    }
    Ok(fine)
}

// ---------------------------------------------------------------------------
// Symmetric-gradient upper bound
// ---------------------------------------------------------------------------

/// Both sides of the upper bound of the seminorm by the symmetric gradient:
/// `lhs = |u|^p`, `rhs = ||Sym(grad u)||_p^p * mass(rho)`.
#[derive(Debug, Clone, Serialize)]
pub struct SymgradBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub kernel_mass: f64,
}

/// Compare the seminorm of a sampled smooth field against the symmetric
/// gradient bound.  The gradient is taken by centered differences, one-sided
/// where a neighbor cell leaves the domain.  Needs an integrable kernel.
pub fn symgrad_upper_bound_check(
    grid: &Arc<Grid>,
    expr: &FieldExpr,
    kernel: &dyn KernelEval,
) -> Result<SymgradBoundReport> {
    let support = kernel.support_radius().ok_or_else(|| {
        Error::Unsupported("the symmetric gradient bound needs an integrable kernel".into())
    })?;
    let mass = crate::kernels::ball_mass(kernel, support)?;
    if !mass.is_finite() {
        return Err(Error::Unsupported("kernel mass is not finite".into()));
    }
    let d = grid.d;
    let p = kernel.exponent_p();
    let u = sample_field(grid, expr);
    let mut terms = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let ci = grid.node_cells[i];
        let ui = u.node_value(i);
        let mut jac = [[0.0f64; 3]; 3];
        for a in 0..d {
            let mut plus = ci;
            plus[a] += 1;
            let mut minus = ci;
            minus[a] -= 1;
            let vp = grid.node_at_cell(&plus).map(|j| u.node_value(j));
            let vm = grid.node_at_cell(&minus).map(|j| u.node_value(j));
            let (diff, span) = match (vp, vm) {
                (Some(vp), Some(vm)) => (sub3(&vp, &vm), 2.0 * grid.h[a]),
                (Some(vp), None) => (sub3(&vp, &ui), grid.h[a]),
                (None, Some(vm)) => (sub3(&ui, &vm), grid.h[a]),
                (None, None) => ([0.0; 3], 1.0),
            };
            for b in 0..d {
                jac[b][a] = diff[b] / span;
            }
        }
        let mut fro2 = 0.0;
        for a in 0..d {
            for b in 0..d {
                let s = 0.5 * (jac[a][b] + jac[b][a]);
                fro2 += s * s;
            }
        }
        terms.push(grid.weights[i] * fro2.sqrt().powf(p));
    }
    let rhs = pairwise_sum(&terms) * mass;
    let lhs = seminorm(&u, kernel)?.value_p;
    let ratio = if lhs == 0.0 && rhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(SymgradBoundReport { lhs, rhs, ratio, kernel_mass: mass })
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// Direction functional
// ---------------------------------------------------------------------------

/// `F_p[u](t v) = int |(u(x + t v) - u(x)) . v|^p dx` over the whole space,
/// realized on the lattice extension of the grid: the zero-extended field
/// makes the integrand vanish beyond the bounding box inflated by the shift.
/// Off-lattice shifts evaluate the field by multilinear interpolation.
pub fn direction_functional(u: &VectorField, t: f64, v: &Point, p: f64) -> Result<f64> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument("shift magnitude must be nonnegative".into()));
    }
    let grid = &u.grid;
    let d = grid.d;
    let vn = (v[..d].iter().map(|c| c * c).sum::<f64>()).sqrt();
    if !(vn > 0.0) {
        return Err(Error::InvalidArgument("shift direction must be nonzero".into()));
    }
    let mut dir = [0.0f64; 3];
    for a in 0..d {
        dir[a] = v[a] / vn;
    }
    let shift = [t * dir[0], t * dir[1], t * dir[2]];
    // Cell index range covering supp(u) and supp(u) shifted back by t v.
    let mut lo_cell = [0i64; 3];
    let mut hi_cell = [0i64; 3];
    for a in 0..d {
        let s = shift[a] / grid.h[a];
        lo_cell[a] = (-s).min(0.0).floor() as i64 - 1;
        hi_cell[a] = grid.dims[a] as i64 + (-s).max(0.0).ceil() as i64 + 1;
    }
    let vol = grid.cell_volume();
    let mut rows = Vec::new();
    let mut terms = Vec::new();
    for i0 in lo_cell[0]..=hi_cell[0] {
        terms.clear();
        for i1 in lo_cell[1]..=hi_cell[1] {
            for i2 in lo_cell[2]..=hi_cell[2] {
                let cell = [i0, i1, i2];
                let mut x = [0.0f64; 3];
                for a in 0..d {
                    x[a] = grid.lo[a] + (cell[a] as f64 + 0.5) * grid.h[a];
                }
                let here = match grid.node_at_cell(&cell) {
                    Some(node) => u.node_value(node),
                    None => [0.0; 3],
                };
                let there = u.eval_extended(&[x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]]);
                let mut proj = 0.0;
                for a in 0..d {
                    proj += (there[a] - here[a]) * dir[a];
                }
                let proj = proj.abs();
                let w = if p == 2.0 { proj * proj } else { proj.powf(p) };
                terms.push(vol * w);
            }
        }
        rows.push(pairwise_sum(&terms));
    }
    Ok(pairwise_sum(&rows))
}

// ---------------------------------------------------------------------------
// Cone matrix and the sector mollifier
// ---------------------------------------------------------------------------

/// Second-moment matrix of a direction cone together with its inverse, the
/// data behind the matrix mollifier.
#[derive(Debug, Clone)]
pub struct MollifierMatrix {
    pub cone: Cone,
    pub q: [[f64; 3]; 3],
    pub q_inverse: [[f64; 3]; 3],
    pub lambda_min: f64,
}

/// `q_ab = int_cone s_a s_b` over the cone's trace on the unit sphere, with
/// the inverse and smallest eigenvalue.  The eigenvalue is checked against
/// the sampled direction constant: they measure the same quadratic form, so
/// a large discrepancy means a quadrature bug, not geometry.
pub fn cone_matrix(cone: &Cone) -> Result<MollifierMatrix> {
    cone_matrix_with(cone, default_quad_n(cone.d))
}

pub fn cone_matrix_with(cone: &Cone, n_quad: usize) -> Result<MollifierMatrix> {
    let d = cone.d;
    let quad = sphere_quadrature(cone, n_quad)?;
    let mut q = [[0.0f64; 3]; 3];
    for a in 0..d {
        for b in a..d {
            let terms: Vec<f64> = quad.iter().map(|(s, w)| w * s[a] * s[b]).collect();
            let v = pairwise_sum(&terms);
            q[a][b] = v;
            q[b][a] = v;
        }
    }
    let qm = DMatrix::from_fn(d, d, |i, j| q[i][j]);
    let eig = qm.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(lambda_min > 1e-12 * lambda_max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(
            "cone second-moment matrix is numerically singular".into(),
        ));
    }
    // Both quantities sample min_x <Qx, x> over unit x; the probe grid may
    // sit slightly above the true eigenvalue, never far below.
    let c0 = sector_min_constant(cone, 2.0, 512)?;
    if lambda_min < c0 * (1.0 - 0.05) {
        return Err(Error::Degenerate(
            "cone matrix eigenvalue disagrees with the direction constant".into(),
        ));
    }
    let inv = qm.try_inverse().ok_or_else(|| {
        Error::RankDeficient("cone second-moment matrix is not invertible".into())
    })?;
    let mut q_inverse = [[0.0f64; 3]; 3];
    for (a, row) in q_inverse.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            *entry = if a < d && b < d {
                inv[(a, b)]
            } else if a == b {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(MollifierMatrix { cone: cone.clone(), q, q_inverse, lambda_min })
}

/// Precomputed lattice stencil of the matrix mollifier at one radius: the
/// sector offsets, one matrix weight per offset, and the inverse of the raw
/// discrete mass matrix.  Applying the stencil divides out the raw mass, so
/// constant fields are reproduced exactly wherever the stencil does not
/// reach outside the sampled region; the distance between the raw mass and
/// the identity is kept as `normalization_defect`.
pub struct MollifierStencil {
    pub delta: f64,
    offsets: Vec<[i64; 3]>,
    weights: Vec<[[f64; 3]; 3]>,
    mass_inverse: [[f64; 3]; 3],
    pub normalization_defect: f64,
}

pub fn mollifier_stencil(
    grid: &Grid,
    mm: &MollifierMatrix,
    delta: f64,
) -> Result<MollifierStencil> {
    let d = grid.d;
    if mm.cone.d != d {
        return Err(Error::InvalidArgument("cone dimension does not match the grid".into()));
    }
    if !(delta >= 2.0 * grid.max_h() * (1.0 - 1e-12)) {
        return Err(Error::Resolution(
            "mollifier radius must span at least two cells".into(),
        ));
    }
    let offsets = ball_sector(&mm.cone, delta, &grid.h)?;
    if offsets.is_empty() {
        return Err(Error::Degenerate("mollifier sector holds no lattice cells".into()));
    }
    let scale = d as f64 * grid.cell_volume() / delta.powi(d as i32);
    let mut weights = Vec::with_capacity(offsets.len());
    for c in &offsets {
        let z = [c[0] as f64 * grid.h[0], c[1] as f64 * grid.h[1], c[2] as f64 * grid.h[2]];
        let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
        let zh = [z[0] / r, z[1] / r, z[2] / r];
        // scale * (Q^{-1} zh) zh^T
        let mut w = [[0.0f64; 3]; 3];
        for a in 0..d {
            let mut qa = 0.0;
            for b in 0..d {
                qa += mm.q_inverse[a][b] * zh[b];
            }
            for b in 0..d {
                w[a][b] = scale * qa * zh[b];
            }
        }
        weights.push(w);
    }
    let mut raw = [[0.0f64; 3]; 3];
    for a in 0..d {
        for b in 0..d {
            let terms: Vec<f64> = weights.iter().map(|w| w[a][b]).collect();
            raw[a][b] = pairwise_sum(&terms);
        }
    }
    let mut defect = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let id = if a == b { 1.0 } else { 0.0 };
            defect = defect.max((raw[a][b] - id).abs());
        }
    }
    let rm = DMatrix::from_fn(d, d, |i, j| raw[i][j]);
    let inv = rm.try_inverse().ok_or_else(|| {
        Error::Degenerate("discrete mollifier mass matrix is singular".into())
    })?;
    let mut mass_inverse = [[0.0f64; 3]; 3];
    for (a, row) in mass_inverse.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            *entry = if a < d && b < d {
                inv[(a, b)]
            } else if a == b {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(MollifierStencil { delta, offsets, weights, mass_inverse, normalization_defect: defect })
}

impl MollifierStencil {
    /// Apply the stencil at the center of a lattice cell (which may sit
    /// outside the domain).  Every sampled point is again a lattice center,
    /// so zero extension is exact: missing cells contribute nothing.
    pub fn apply_at_cell(&self, u: &VectorField, cell: &[i64; 3]) -> [f64; 3] {
        let d = u.grid.d;
        let mut terms: [Vec<f64>; 3] = [
            Vec::with_capacity(self.offsets.len()),
            Vec::with_capacity(self.offsets.len()),
            Vec::with_capacity(self.offsets.len()),
        ];
        for (off, w) in self.offsets.iter().zip(&self.weights) {
            let src = [cell[0] - off[0], cell[1] - off[1], cell[2] - off[2]];
            let Some(j) = u.grid.node_at_cell(&src) else { continue };
            let v = u.node_value(j);
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += w[a][b] * v[b];
                }
                terms[a].push(s);
            }
        }
        let mut acc = [0.0f64; 3];
        for a in 0..d {
            acc[a] = pairwise_sum(&terms[a]);
        }
        let mut out = [0.0f64; 3];
        for a in 0..d {
            for b in 0..d {
                out[a] += self.mass_inverse[a][b] * acc[b];
            }
        }
        out
    }
}

/// A mollified field together with the recorded normalization defect of the
/// raw stencil it was produced with.
pub struct MollifyOutput {
    pub field: VectorField,
    pub normalization_defect: f64,
}

/// Convolve the zero-extended field with the matrix mollifier at radius
/// `delta`, sampled back at the grid nodes.
pub fn mollify(u: &VectorField, mm: &MollifierMatrix, delta: f64) -> Result<MollifyOutput> {
    let stencil = mollifier_stencil(&u.grid, mm, delta)?;
    let d = u.grid.d;
    let values: Vec<f64> = (0..u.grid.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let v = stencil.apply_at_cell(u, &u.grid.node_cells[i]);
            (0..d).map(move |a| v[a])
        })
        .collect();
    Ok(MollifyOutput {
        field: VectorField { grid: Arc::clone(&u.grid), values },
        normalization_defect: stencil.normalization_defect,
    })
}

/// `||u - P * u||_p^p` over the lattice inflated far enough to cover both
/// the field and its mollification, with zero extension outside the domain.
pub fn smoothing_gap(u: &VectorField, mm: &MollifierMatrix, delta: f64, p: f64) -> Result<f64> {
    let grid = &u.grid;
    let d = grid.d;
    let stencil = mollifier_stencil(grid, mm, delta)?;
    let mut reach = [0i64; 3];
    for a in 0..d {
        reach[a] = (delta / grid.h[a]).ceil() as i64 + 1;
    }
    let vol = grid.cell_volume();
    let mut rows = Vec::new();
    let mut terms = Vec::new();
    for i0 in -reach[0]..grid.dims[0] as i64 + reach[0] {
        terms.clear();
        for i1 in -reach[1]..grid.dims[1] as i64 + reach[1] {
            for i2 in -reach[2]..grid.dims[2] as i64 + reach[2] {
                let cell = [i0, i1, i2];
                let here = match grid.node_at_cell(&cell) {
                    Some(node) => u.node_value(node),
                    None => [0.0; 3],
                };
                let smooth = stencil.apply_at_cell(u, &cell);
                let mut n2 = 0.0;
                for a in 0..d {
                    let t = here[a] - smooth[a];
                    n2 += t * t;
                }
                let nrm = n2.sqrt();
                let w = if p == 2.0 { n2 } else { nrm.powf(p) };
                terms.push(vol * w);
            }
        }
        rows.push(pairwise_sum(&terms));
    }
    Ok(pairwise_sum(&rows))
}

// ---------------------------------------------------------------------------
// Translation modulus
// ---------------------------------------------------------------------------

/// `||u(. + shift) - u||_p^p` over the interior region at boundary distance
/// greater than `tau`, with the shifted field evaluated by interpolation of
/// the zero extension.
pub fn translation_modulus(u: &VectorField, shift: &Point, p: f64, tau: f64) -> Result<f64> {
    let grid = &u.grid;
    let d = grid.d;
    let mask = grid.interior_mask(tau)?;
    let mut terms = Vec::new();
    for i in 0..grid.len() {
        if !mask[i] {
            continue;
        }
        let x = &grid.nodes[i];
        let moved = u.eval_extended(&[x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]]);
        let here = u.node_value(i);
        let mut n2 = 0.0;
        for a in 0..d {
            let t = moved[a] - here[a];
            n2 += t * t;
        }
        let nrm = n2.sqrt();
        let w = if p == 2.0 { n2 } else { nrm.powf(p) };
        terms.push(grid.weights[i] * w);
    }
    Ok(pairwise_sum(&terms))
}

// ---------------------------------------------------------------------------
// Shift bound ratio
// ---------------------------------------------------------------------------

/// Both sides of the bound of the direction functional at a single shift by
/// the weighted average of the functional over all shifts: `lhs` is
/// `F_p[u](t v0)`, `rhs` is `delta^p / int_0^delta rho_theta0 r^{d-1}`
/// times `int_0^D rho(h v0) h^{d-1-p} F_p[u](h v0) dh`.  The constant
/// relating them is not explicit; experiments record the ratio envelope.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftBoundReport {
    pub t: f64,
    pub delta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

pub fn shift_bound_ratio(
    u: &VectorField,
    kernel: &dyn KernelEval,
    theta0: f64,
    cone: &Cone,
    t: f64,
    delta: f64,
) -> Result<ShiftBoundReport> {
    let grid = &u.grid;
    let d = grid.d;
    if !(t > 0.0 && t <= delta) {
        return Err(Error::InvalidArgument("need 0 < t <= delta".into()));
    }
    let p = kernel.exponent_p();
    let v0 = cone.axis;
    let lhs = direction_functional(u, t, &v0, p)?;
    let mut den_bad = false;
    let den = adaptive_quad(
        &mut |s| match crate::kernels::rho_theta0(kernel, theta0, s, &v0) {
            Ok(v) => v * s.powi(d as i32 - 1),
            Err(_) => {
                den_bad = true;
                0.0
            }
        },
        0.0,
        delta,
        0.0,
        1e-8,
    )
    .value;
    if den_bad || !(den > 0.0) {
        return Err(Error::DegenerateKernel(
            "cone-infimum kernel carries no mass below delta".into(),
        ));
    }
    let mut diam2 = 0.0;
    for a in 0..d {
        let w = grid.hi[a] - grid.lo[a];
        diam2 += w * w;
    }
    let top = diam2.sqrt() + 2.0 * grid.max_h() + t;
    let mut outer_bad = false;
    let outer = adaptive_quad(
        &mut |h| {
            let rho = match kernel.eval(&[h * v0[0], h * v0[1], h * v0[2]]) {
                Ok(v) => v,
                Err(_) => {
                    outer_bad = true;
                    return 0.0;
                }
            };
            if rho == 0.0 {
                return 0.0;
            }
            let f = match direction_functional(u, h, &v0, p) {
                Ok(v) => v,
                Err(_) => {
                    outer_bad = true;
                    return 0.0;
                }
            };
            rho * h.powf(d as f64 - 1.0 - p) * f
        },
        0.0,
        top,
        0.0,
        1e-3,
    )
    .value;
    if outer_bad {
        return Err(Error::Degenerate("direction functional failed inside the shift bound".into()));
    }
    let rhs = delta.powf(p) / den * outer;
    if !(rhs > 0.0) {
        return Err(Error::Degenerate("shift bound right-hand side vanished".into()));
    }
    Ok(ShiftBoundReport { t, delta, lhs, rhs, ratio: lhs / rhs })
}
