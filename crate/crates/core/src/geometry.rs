//! Domains, cones of directions, cell-centered grids, and quadrature on the
//! unit sphere.
//!
//! Points are carried as `[f64; 3]` with unused trailing components pinned to
//! zero; the active dimension (1, 2, or 3) travels with the owning object.

use crate::error::{Error, Result};
use crate::numerics::{golden_min, pairwise_sum};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub type Point = [f64; 3];

pub(crate) fn norm(x: &Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

pub(crate) fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn check_dim(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("dimension {d} (supported: 1, 2, 3)")))
    }
}

/// Surface measure of the unit sphere in dimension `d` (counting measure for
/// `d = 1`).
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::TAU,
        _ => 4.0 * std::f64::consts::PI,
    }
}

// ---------------------------------------------------------------------------
// Cones of directions
// ---------------------------------------------------------------------------

/// A closed cone of directions: either the full sphere or the cap of
/// directions within `aperture` (a half-angle in `(0, π/2]`) of `axis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cone {
    pub d: usize,
    pub axis: Point,
    pub aperture: f64,
    pub full_sphere: bool,
}

impl Cone {
    /// Cap of half-angle `aperture` about `axis`.
    pub fn cap(d: usize, axis: Point, aperture: f64) -> Result<Cone> {
        check_dim(d)?;
        for axis_component in axis.iter().skip(d) {
            if *axis_component != 0.0 {
                return Err(Error::InvalidArgument(
                    "cone axis has components beyond the active dimension".into(),
                ));
            }
        }
        let n = norm(&axis);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidArgument("cone axis must be a nonzero vector".into()));
        }
        if !(aperture > 0.0 && aperture <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "aperture {aperture} outside (0, pi/2]"
            )));
        }
        Ok(Cone {
            d,
            axis: [axis[0] / n, axis[1] / n, axis[2] / n],
            aperture,
            full_sphere: false,
        })
    }

    /// The full sphere of directions.
    pub fn full(d: usize) -> Result<Cone> {
        check_dim(d)?;
        let mut axis = [0.0; 3];
        axis[d - 1] = 1.0;
        Ok(Cone { d, axis, aperture: std::f64::consts::PI, full_sphere: true })
    }

    /// Membership of the direction of `z` in the cone.  The comparison is
    /// inclusive with a 1e-9 angular slack so that lattice offsets lying
    /// exactly on the cap boundary are kept.
    pub fn contains(&self, z: &Point) -> Result<bool> {
        let r = norm(z);
        if r == 0.0 {
            return Err(Error::InvalidArgument(
                "the zero vector has no direction".into(),
            ));
        }
        if self.full_sphere {
            return Ok(true);
        }
        let c = (dot(z, &self.axis) / r).clamp(-1.0, 1.0);
        Ok(c.acos() <= self.aperture + 1e-9)
    }

    /// Surface measure of the cone's trace on the unit sphere.
    pub fn surface_measure(&self) -> f64 {
        if self.full_sphere {
            return sphere_area(self.d);
        }
        match self.d {
            1 => 1.0,
            2 => 2.0 * self.aperture,
            _ => std::f64::consts::TAU * (1.0 - self.aperture.cos()),
        }
    }
}

// ---------------------------------------------------------------------------
// Lipschitz graph patches
// ---------------------------------------------------------------------------

/// The boundary function ζ of a graph patch, tabulated on a uniform
/// `(d-1)`-dimensional lattice over `[-4 r0, 4 r0]^{d-1}` and interpolated
/// multilinearly.  For `d = 1` the table degenerates to the single value 0.
#[derive(Debug, Clone)]
pub struct GraphPatch {
    pub d: usize,
    pub r0: f64,
    dims: [usize; 2],
    lo: [f64; 2],
    h: [f64; 2],
    values: Vec<f64>,
    pub lipschitz_estimate: f64,
}

impl GraphPatch {
    /// Builds a patch by sampling `zeta` on an `n`-per-axis table.
    /// Rejects tables incompatible with `ζ(0) = 0` or with a Lipschitz
    /// constant above 1/2.
    pub fn from_fn(d: usize, r0: f64, n: usize, zeta: impl Fn(&[f64]) -> f64) -> Result<GraphPatch> {
        check_dim(d)?;
        if !(r0 > 0.0) {
            return Err(Error::InvalidArgument("graph patch radius must be positive".into()));
        }
        if d == 1 {
            let z0 = zeta(&[]);
            if z0.abs() > 1e-12 * r0 {
                return Err(Error::InvalidArgument("zeta(0) must vanish".into()));
            }
            return Ok(GraphPatch {
                d,
                r0,
                dims: [1, 1],
                lo: [0.0, 0.0],
                h: [1.0, 1.0],
                values: vec![0.0],
                lipschitz_estimate: 0.0,
            });
        }
        if n < 3 {
            return Err(Error::InvalidArgument("graph table needs at least 3 nodes per axis".into()));
        }
        let m = d - 1;
        let span = 8.0 * r0;
        let h = span / (n - 1) as f64;
        let lo = -4.0 * r0;
        let mut dims = [1usize; 2];
        let mut los = [0.0f64; 2];
        let mut hs = [1.0f64; 2];
        for a in 0..m {
            dims[a] = n;
            los[a] = lo;
            hs[a] = h;
        }
        let count = dims[0] * dims[1];
        let mut values = Vec::with_capacity(count);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let mut xp = [0.0f64; 2];
                xp[0] = los[0] + i as f64 * hs[0];
                if m > 1 {
                    xp[1] = los[1] + j as f64 * hs[1];
                }
                values.push(zeta(&xp[..m]));
            }
        }
        Self::from_table(d, r0, dims, los, hs, values)
    }

    /// Builds a patch from an existing table (lexicographic row order).
    pub fn from_table(
        d: usize,
        r0: f64,
        dims: [usize; 2],
        lo: [f64; 2],
        h: [f64; 2],
        values: Vec<f64>,
    ) -> Result<GraphPatch> {
        check_dim(d)?;
        if d == 1 {
            return Self::from_fn(d, r0, 3, |_| 0.0);
        }
        if values.len() != dims[0] * dims[1] {
            return Err(Error::InvalidArgument(format!(
                "zeta table length {} does not match dims {:?}",
                values.len(),
                dims
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("zeta table contains non-finite entries".into()));
        }
        let mut patch = GraphPatch { d, r0, dims, lo, h, values, lipschitz_estimate: 0.0 };
        let kappa = patch.estimate_lipschitz();
        patch.lipschitz_estimate = kappa;
        if kappa > 0.5 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "zeta table has Lipschitz estimate {kappa:.4}, above the admissible 1/2"
            )));
        }
        let z0 = patch.zeta(&[0.0, 0.0]);
        if z0.abs() > 1e-9 * r0 {
            return Err(Error::InvalidArgument("zeta(0) must vanish".into()));
        }
        Ok(patch)
    }

    fn estimate_lipschitz(&self) -> f64 {
        let m = self.d - 1;
        let mut worst = 0.0f64;
        let (ni, nj) = (self.dims[0], self.dims[1]);
        let at = |i: usize, j: usize| self.values[i * nj + j];
        for i in 0..ni {
            for j in 0..nj {
                let v = at(i, j);
                if i + 1 < ni {
                    worst = worst.max((at(i + 1, j) - v).abs() / self.h[0]);
                }
                if m > 1 && j + 1 < nj {
                    worst = worst.max((at(i, j + 1) - v).abs() / self.h[1]);
                }
                if m > 1 && i + 1 < ni && j + 1 < nj {
                    let diag = (self.h[0] * self.h[0] + self.h[1] * self.h[1]).sqrt();
                    worst = worst.max((at(i + 1, j + 1) - v).abs() / diag);
                    worst = worst.max((at(i + 1, j) - at(i, j + 1)).abs() / diag);
                }
            }
        }
        worst
    }

    /// Multilinear interpolation of ζ, clamped to the table's range.
    pub fn zeta(&self, xp: &[f64]) -> f64 {
        let m = self.d - 1;
        if m == 0 {
            return 0.0;
        }
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..m {
            let t = ((xp[a] - self.lo[a]) / self.h[a]).clamp(0.0, (self.dims[a] - 1) as f64);
            let b = (t.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = t - b as f64;
        }
        let nj = self.dims[1];
        let at = |i: usize, j: usize| self.values[i * nj + j];
        if m == 1 {
            let (i, t) = (base[0], frac[0]);
            (1.0 - t) * at(i, 0) + t * at(i + 1, 0)
        } else {
            let (i, j) = (base[0], base[1]);
            let (s, t) = (frac[0], frac[1]);
            (1.0 - s) * ((1.0 - t) * at(i, j) + t * at(i, j + 1))
                + s * ((1.0 - t) * at(i + 1, j) + t * at(i + 1, j + 1))
        }
    }

    /// Distance from `x` to the graph surface, via the tabulated vertices
    /// followed by a golden-section refinement around the best one.
    pub fn distance_to_graph(&self, x: &Point) -> f64 {
        let m = self.d - 1;
        if m == 0 {
            return x[0].abs();
        }
        let nj = self.dims[1];
        let mut best = f64::INFINITY;
        let mut best_idx = (0usize, 0usize);
        for i in 0..self.dims[0] {
            for j in 0..if m > 1 { nj } else { 1 } {
                let mut p = [0.0f64; 3];
                p[0] = self.lo[0] + i as f64 * self.h[0];
                if m > 1 {
                    p[1] = self.lo[1] + j as f64 * self.h[1];
                }
                p[self.d - 1] = self.values[i * nj + j];
                let dist = norm(&sub(x, &p));
                if dist < best {
                    best = dist;
                    best_idx = (i, j);
                }
            }
        }
        // Refine along each table axis in turn around the best vertex.
        let mut center = [0.0f64; 2];
        center[0] = self.lo[0] + best_idx.0 as f64 * self.h[0];
        if m > 1 {
            center[1] = self.lo[1] + best_idx.1 as f64 * self.h[1];
        }
        for _round in 0..3 {
            for a in 0..m {
                let lo = (center[a] - self.h[a]).max(self.lo[a]);
                let hi = (center[a] + self.h[a]).min(self.lo[a] + (self.dims[a] - 1) as f64 * self.h[a]);
                let mut objective = |t: f64| {
                    let mut xp = center;
                    xp[a] = t;
                    let mut p = [0.0f64; 3];
                    p[0] = xp[0];
                    if m > 1 {
                        p[1] = xp[1];
                    }
                    p[self.d - 1] = self.zeta(&xp[..m]);
                    norm(&sub(x, &p))
                };
                center[a] = golden_min(&mut objective, lo, hi, 1e-10 * self.r0);
            }
        }
        let mut p = [0.0f64; 3];
        p[0] = center[0];
        if m > 1 {
            p[1] = center[1];
        }
        p[self.d - 1] = self.zeta(&center[..m]);
        best.min(norm(&sub(x, &p)))
    }
}

// ---------------------------------------------------------------------------
// Domains
// ---------------------------------------------------------------------------

/// A bounded open domain: an axis-aligned box, a ball, or the region above a
/// Lipschitz graph inside its window `B(0, 4 r0)`.
#[derive(Debug, Clone)]
pub enum Domain {
    Box { d: usize, lo: Point, hi: Point },
    Ball { d: usize, center: Point, radius: f64 },
    GraphPatch(GraphPatch),
}

impl Domain {
    pub fn make_box(d: usize, lo: Point, hi: Point) -> Result<Domain> {
        check_dim(d)?;
        for a in 0..d {
            if !(hi[a] > lo[a]) {
                return Err(Error::InvalidArgument(format!(
                    "box has empty extent on axis {a}"
                )));
            }
        }
        Ok(Domain::Box { d, lo, hi })
    }

    pub fn ball(d: usize, center: Point, radius: f64) -> Result<Domain> {
        check_dim(d)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument("ball radius must be positive".into()));
        }
        Ok(Domain::Ball { d, center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { d, .. } | Domain::Ball { d, .. } => *d,
            Domain::GraphPatch(g) => g.d,
        }
    }

    /// Axis-aligned bounding box of the domain.
    pub fn bounding_box(&self) -> (Point, Point) {
        match self {
            Domain::Box { lo, hi, .. } => (*lo, *hi),
            Domain::Ball { d, center, radius } => {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..*d {
                    lo[a] = center[a] - radius;
                    hi[a] = center[a] + radius;
                }
                (lo, hi)
            }
            Domain::GraphPatch(g) => {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                let w = 4.0 * g.r0;
                for a in 0..g.d - 1 {
                    lo[a] = -w;
                    hi[a] = w;
                }
                let zmin = g.values.iter().cloned().fold(0.0f64, f64::min);
                lo[g.d - 1] = zmin;
                hi[g.d - 1] = w;
                (lo, hi)
            }
        }
    }

    /// Closed-set membership.
    pub fn contains(&self, x: &Point) -> bool {
        match self {
            Domain::Box { d, lo, hi } => (0..*d).all(|a| x[a] >= lo[a] && x[a] <= hi[a]),
            Domain::Ball { center, radius, .. } => norm(&sub(x, center)) <= *radius,
            Domain::GraphPatch(g) => {
                norm(x) <= 4.0 * g.r0 && x[g.d - 1] >= g.zeta(&x[..g.d - 1])
            }
        }
    }

    /// Distance from an interior point to the boundary.  Errors when `x`
    /// lies outside the closed domain, and returns 0 on the boundary, so
    /// positivity of the result characterizes interior points.
    pub fn distance_to_boundary(&self, x: &Point) -> Result<f64> {
        if !self.contains(x) {
            return Err(Error::OutsideDomain(x[..self.dim()].to_vec()));
        }
        Ok(match self {
            Domain::Box { d, lo, hi } => {
                let mut dist = f64::INFINITY;
                for a in 0..*d {
                    dist = dist.min(x[a] - lo[a]).min(hi[a] - x[a]);
                }
                dist
            }
            Domain::Ball { center, radius, .. } => radius - norm(&sub(x, center)),
            Domain::GraphPatch(g) => {
                let window = 4.0 * g.r0 - norm(x);
                window.min(g.distance_to_graph(x))
            }
        })
    }

    /// Exact volume when a closed form exists.
    pub fn volume(&self) -> Option<f64> {
        match self {
            Domain::Box { d, lo, hi } => {
                Some((0..*d).map(|a| hi[a] - lo[a]).product())
            }
            Domain::Ball { d, radius, .. } => Some(match d {
                1 => 2.0 * radius,
                2 => std::f64::consts::PI * radius * radius,
                _ => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            }),
            Domain::GraphPatch(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// Cell-centered Cartesian grid over the bounding box of a domain, keeping
/// the cells whose centers are interior.  Cell widths are snapped so the
/// cells tile the bounding box exactly; in particular all pairwise node
/// distances are at least `min_a h_a`, which is what lets kernel evaluations
/// skip the diagonal without regularization.
#[derive(Debug, Clone)]
pub struct Grid {
    pub d: usize,
    pub domain: Domain,
    pub lo: Point,
    pub hi: Point,
    /// Lattice extents per axis (1 beyond the active dimension).
    pub dims: [usize; 3],
    /// Cell widths per axis (1 beyond the active dimension, so that the
    /// product of entries is always the cell volume).
    pub h: [f64; 3],
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    node_of_cell: Vec<i32>,
    pub node_cells: Vec<[i64; 3]>,
}

impl Grid {
    /// Grid with approximately the given cell width on every axis.
    pub fn by_h(domain: Domain, h: f64) -> Result<Grid> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument("cell width must be positive".into()));
        }
        let (lo, hi) = domain.bounding_box();
        let d = domain.dim();
        let mut n = [1usize; 3];
        for (a, n_axis) in n.iter_mut().enumerate().take(d) {
            let len = hi[a] - lo[a];
            *n_axis = ((len / h).round() as usize).max(1);
        }
        Self::build(domain, n)
    }

    /// Grid with `n` cells on every axis.
    pub fn by_n(domain: Domain, n: usize) -> Result<Grid> {
        if n == 0 {
            return Err(Error::InvalidArgument("cell count must be positive".into()));
        }
        let d = domain.dim();
        let mut dims = [1usize; 3];
        for dim_axis in dims.iter_mut().take(d) {
            *dim_axis = n;
        }
        Self::build(domain, dims)
    }

    /// Grid with a per-axis cell count.
    pub fn by_n_per_axis(domain: Domain, n: &[usize]) -> Result<Grid> {
        let d = domain.dim();
        if n.len() != d || n.iter().any(|&k| k == 0) {
            return Err(Error::InvalidArgument(
                "need one positive cell count per active axis".into(),
            ));
        }
        let mut dims = [1usize; 3];
        dims[..d].copy_from_slice(n);
        Self::build(domain, dims)
    }

    fn build(domain: Domain, dims: [usize; 3]) -> Result<Grid> {
        let d = domain.dim();
        let (lo, hi) = domain.bounding_box();
        let mut h = [1.0f64; 3];
        for a in 0..d {
            h[a] = (hi[a] - lo[a]) / dims[a] as f64;
        }
        let cell_volume: f64 = h[0] * h[1] * h[2];
        let count = dims[0] * dims[1] * dims[2];
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut node_of_cell = vec![-1i32; count];
        let mut node_cells = Vec::new();
        let mut cell = 0usize;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let mut x = [0.0f64; 3];
                    let idx = [i, j, k];
                    for a in 0..d {
                        x[a] = lo[a] + (idx[a] as f64 + 0.5) * h[a];
                    }
                    let interior = domain
                        .distance_to_boundary(&x)
                        .map(|t| t > 0.0)
                        .unwrap_or(false);
                    if interior {
                        node_of_cell[cell] = nodes.len() as i32;
                        nodes.push(x);
                        weights.push(cell_volume);
                        node_cells.push([i as i64, j as i64, k as i64]);
                    }
                    cell += 1;
                }
            }
        }
        if nodes.is_empty() {
            return Err(Error::Resolution(
                "no cell centers fall inside the domain".into(),
            ));
        }
        Ok(Grid { d, domain, lo, hi, dims, h, nodes, weights, node_of_cell, node_cells })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node index stored at a lattice cell, if the cell is inside the domain
    /// and the lattice bounds.
    pub fn node_at_cell(&self, cell: &[i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if cell[a] < 0 || cell[a] >= self.dims[a] as i64 {
                return None;
            }
        }
        let linear =
            (cell[0] as usize * self.dims[1] + cell[1] as usize) * self.dims[2] + cell[2] as usize;
        let id = self.node_of_cell[linear];
        if id < 0 {
            None
        } else {
            Some(id as usize)
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.h[0] * self.h[1] * self.h[2]
    }

    pub fn max_h(&self) -> f64 {
        self.h[..self.d].iter().cloned().fold(0.0, f64::max)
    }

    /// Total weight carried by the grid (its measure of the domain).
    pub fn total_weight(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// Mask of nodes at boundary distance strictly greater than `tau`.
    pub fn interior_mask(&self, tau: f64) -> Result<Vec<bool>> {
        if !(tau >= 0.0) {
            return Err(Error::InvalidArgument("tau must be nonnegative".into()));
        }
        self.nodes
            .iter()
            .map(|x| self.domain.distance_to_boundary(x).map(|t| t > tau))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Sphere quadrature and sector constants
// ---------------------------------------------------------------------------

/// Quadrature nodes and weights for integration over the cone's trace on the
/// unit sphere.  Weights sum to the trace's surface measure exactly.
///
/// * `d = 1`: the one or two atoms of the counting measure;
/// * `d = 2`: midpoint rule in the angle;
/// * `d = 3`: Fibonacci points, uniform in the cap height.
pub fn sphere_quadrature(cone: &Cone, n: usize) -> Result<Vec<(Point, f64)>> {
    if cone.d > 1 && n < 4 {
        return Err(Error::InvalidArgument("need at least 4 quadrature points".into()));
    }
    match cone.d {
        1 => {
            let mut pts = vec![([cone.axis[0].signum(), 0.0, 0.0], 1.0)];
            if cone.full_sphere {
                pts = vec![([1.0, 0.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 1.0)];
            }
            Ok(pts)
        }
        2 => {
            let (start, span) = if cone.full_sphere {
                (0.0, std::f64::consts::TAU)
            } else {
                let phi0 = cone.axis[1].atan2(cone.axis[0]);
                (phi0 - cone.aperture, 2.0 * cone.aperture)
            };
            let w = span / n as f64;
            Ok((0..n)
                .map(|i| {
                    let phi = start + (i as f64 + 0.5) * w;
                    ([phi.cos(), phi.sin(), 0.0], w)
                })
                .collect())
        }
        _ => {
            let zmin = if cone.full_sphere { -1.0 } else { cone.aperture.cos() };
            let w = std::f64::consts::TAU * (1.0 - zmin) / n as f64;
            let rot = rotation_taking_e3_to(&cone.axis);
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            Ok((0..n)
                .map(|i| {
                    let z = 1.0 - (1.0 - zmin) * (i as f64 + 0.5) / n as f64;
                    let rho = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * i as f64;
                    let local = [rho * phi.cos(), rho * phi.sin(), z];
                    (apply3(&rot, &local), w)
                })
                .collect())
        }
    }
}

fn apply3(m: &[[f64; 3]; 3], v: &Point) -> Point {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rotation_taking_e3_to(axis: &Point) -> [[f64; 3]; 3] {
    let c = axis[2];
    if c > 1.0 - 1e-14 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    if c < -1.0 + 1e-14 {
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    // Rodrigues rotation about u = e3 × axis.
    let u = [-axis[1], axis[0], 0.0];
    let s = norm(&u);
    let u = [u[0] / s, u[1] / s, 0.0];
    let k = 1.0 - c;
    [
        [c + u[0] * u[0] * k, u[0] * u[1] * k, s * u[1]],
        [u[0] * u[1] * k, c + u[1] * u[1] * k, -s * u[0]],
        [-s * u[1], s * u[0], c],
    ]
}

pub(crate) fn default_quad_n(d: usize) -> usize {
    match d {
        1 => 2,
        2 => 4096,
        _ => 65536,
    }
}

/// Probe directions used wherever a minimum over unit vectors is sampled.
pub(crate) fn probe_directions(d: usize, n_probe: usize) -> Vec<Point> {
    match d {
        1 => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        2 => (0..n_probe.max(8))
            .map(|i| {
                let phi = (i as f64 + 0.37) * std::f64::consts::TAU / n_probe.max(8) as f64;
                [phi.cos(), phi.sin(), 0.0]
            })
            .collect(),
        _ => {
            let cone = Cone::full(3).expect("dimension 3 is supported");
            sphere_quadrature(&cone, n_probe.max(32))
                .expect("full-sphere quadrature cannot fail")
                .into_iter()
                .map(|(p, _)| p)
                .collect()
        }
    }
}

/// The direction constant `inf_w ∫_Λ |w · s|^p dσ(s)` over unit vectors `w`,
/// estimated by sampling `n_probe` probe directions against a dense sphere
/// quadrature.  Positive whenever the cone has positive surface measure.
pub fn sector_min_constant(cone: &Cone, p: f64, n_probe: usize) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument("exponent p must be at least 1".into()));
    }
    if n_probe == 0 {
        return Err(Error::InvalidArgument("need at least one probe direction".into()));
    }
    let quad = sphere_quadrature(cone, default_quad_n(cone.d))?;
    let mut best = f64::INFINITY;
    for w in probe_directions(cone.d, n_probe) {
        let terms: Vec<f64> = quad
            .iter()
            .map(|(s, wt)| wt * dot(&w, s).abs().powf(p))
            .collect();
        best = best.min(pairwise_sum(&terms));
    }
    Ok(best)
}

/// Lattice offsets `m` with `0 < |m ⊙ h| ≤ delta` whose direction lies in
/// the cone: the discrete ball sector used by mollification.  Offsets come
/// out in lexicographic order.
pub fn ball_sector(cone: &Cone, delta: f64, h: &[f64; 3]) -> Result<Vec<[i64; 3]>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument("sector radius must be positive".into()));
    }
    let d = cone.d;
    let mut reach = [0i64; 3];
    for a in 0..d {
        reach[a] = (delta / h[a]).floor() as i64;
    }
    let mut offsets = Vec::new();
    for i in -reach[0]..=reach[0] {
        for j in -reach[1]..=reach[1] {
            for k in -reach[2]..=reach[2] {
                let m = [i, j, k];
                if m == [0, 0, 0] {
                    continue;
                }
                let z = [m[0] as f64 * h[0], m[1] as f64 * h[1], m[2] as f64 * h[2]];
                let r = norm(&z);
                if r > delta * (1.0 + 1e-12) {
                    continue;
                }
                if cone.contains(&z)? {
                    offsets.push(m);
                }
            }
        }
    }
    Ok(offsets)
}

// ---------------------------------------------------------------------------
// Graph-patch inclusion checks
// ---------------------------------------------------------------------------

/// Outcome of the Monte-Carlo verification of the two collar inclusions for
/// a graph patch: every near-boundary point decomposes as a graph point plus
/// a vector of the vertical cone `Σ = {|x'| ≤ x_d}`, and every such sum stays
/// inside the domain at triple the radius.
#[derive(Debug, Clone, Serialize)]
pub struct InclusionReport {
    pub r: f64,
    pub samples: usize,
    pub first_inclusion_holds: bool,
    pub second_inclusion_holds: bool,
    pub counterexamples_first: Vec<Vec<f64>>,
    pub counterexamples_second: Vec<Vec<f64>>,
}

/// Checks both collar inclusions for the patch at scale `r ≤ r0` on
/// `n_samples` pseudo-random points.
pub fn verify_graph_inclusion(
    patch: &GraphPatch,
    r: f64,
    n_samples: usize,
    seed: u64,
) -> Result<InclusionReport> {
    if !(r > 0.0 && r <= patch.r0) {
        return Err(Error::InvalidArgument(format!(
            "scale r = {r} outside (0, r0 = {}]",
            patch.r0
        )));
    }
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument(
            "inclusion check needs at least 10^4 samples".into(),
        ));
    }
    let d = patch.d;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let slack = 1e-12 * patch.r0;
    let mut bad_first = Vec::new();
    let mut bad_second = Vec::new();

    // First inclusion: x in Ω ∩ B_{r/2} splits as (x', ζ(x')) + vertical rest,
    // and the rest must land in Σ ∩ B_r.
    let mut accepted = 0usize;
    let mut tries = 0usize;
    while accepted < n_samples && tries < 200 * n_samples {
        tries += 1;
        let mut x = [0.0f64; 3];
        for x_axis in x.iter_mut().take(d) {
            *x_axis = rng.gen_range(-0.5 * r..0.5 * r);
        }
        if norm(&x) >= 0.5 * r {
            continue;
        }
        let zeta = patch.zeta(&x[..d - 1]);
        if x[d - 1] <= zeta {
            continue;
        }
        accepted += 1;
        let vertical = x[d - 1] - zeta;
        // The remainder (0, ..., 0, vertical) lies in Σ automatically; only
        // the radius bound can fail.
        let xi_norm = vertical;
        if xi_norm > r + slack && bad_first.len() < 8 {
            bad_first.push(x[..d].to_vec());
        }
    }

    // Second inclusion: graph point + cone vector stays in Ω ∩ B_{3r}.
    let mut accepted2 = 0usize;
    tries = 0;
    while accepted2 < n_samples && tries < 200 * n_samples {
        tries += 1;
        let mut x1p = [0.0f64; 2];
        let mut norm2 = 0.0;
        for x1_axis in x1p.iter_mut().take(d - 1) {
            *x1_axis = rng.gen_range(-r..r);
            norm2 += *x1_axis * *x1_axis;
        }
        if norm2.sqrt() > r {
            continue;
        }
        let mut xi = [0.0f64; 3];
        for xi_axis in xi.iter_mut().take(d) {
            *xi_axis = rng.gen_range(-r..r);
        }
        xi[d - 1] = xi[d - 1].abs();
        let lateral = match d {
            1 => 0.0,
            2 => xi[0].abs(),
            _ => (xi[0] * xi[0] + xi[1] * xi[1]).sqrt(),
        };
        if lateral > xi[d - 1] || norm(&xi) > r {
            continue;
        }
        accepted2 += 1;
        let mut x = [0.0f64; 3];
        for a in 0..d - 1 {
            x[a] = x1p[a] + xi[a];
        }
        x[d - 1] = patch.zeta(&x1p[..d - 1]) + xi[d - 1];
        let inside = x[d - 1] >= patch.zeta(&x[..d - 1]) - slack;
        let in_ball = norm(&x) <= 3.0 * r + slack;
        if !(inside && in_ball) && bad_second.len() < 8 {
            bad_second.push(x[..d].to_vec());
        }
    }

    Ok(InclusionReport {
        r,
        samples: n_samples,
        first_inclusion_holds: bad_first.is_empty(),
        second_inclusion_holds: bad_second.is_empty(),
        counterexamples_first: bad_first,
        counterexamples_second: bad_second,
    })
}
