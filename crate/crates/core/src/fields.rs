//! Vector fields sampled at grid nodes.
//!
//! A field stores one `d`-vector per node of a [`Grid`] and is identified with
//! its zero extension off the domain.  This module provides the sampled-field
//! arithmetic used everywhere else (weighted norms and inner products,
//! multilinear evaluation of the zero extension at arbitrary points), CSV
//! exchange in a fixed row order, rigid motions and the projection that
//! removes them, the constraint functionals cutting out the complement of the
//! rigid motions, and the seeded example sequences driving the experiment
//! commands.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Point};
use crate::numerics::{content_hash, fmt_g17, pairwise_sum};

// ---------------------------------------------------------------------------
// VectorField
// ---------------------------------------------------------------------------

/// A vector field given by one value per grid node, extended by zero off the
/// domain.  Values are stored node-major, `d` components per node, in the
/// grid's lexicographic node order.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> VectorField {
        VectorField { grid: Arc::clone(grid), values: vec![0.0; grid.len() * grid.d] }
    }

    /// Sample a closure at every node.  The closure receives the node
    /// position padded to three entries and returns a padded value; entries
    /// beyond the active dimension are discarded.
    pub fn from_fn(grid: &Arc<Grid>, mut f: impl FnMut(&Point) -> [f64; 3]) -> VectorField {
        let d = grid.d;
        let mut values = Vec::with_capacity(grid.len() * d);
        for x in &grid.nodes {
            let v = f(x);
            values.extend_from_slice(&v[..d]);
        }
        VectorField { grid: Arc::clone(grid), values }
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.grid.d
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at a node, padded to three entries.
    #[inline]
    pub fn node_value(&self, node: usize) -> [f64; 3] {
        let d = self.grid.d;
        let mut v = [0.0f64; 3];
        v[..d].copy_from_slice(&self.values[node * d..node * d + d]);
        v
    }

    pub fn set_node_value(&mut self, node: usize, v: &[f64]) {
        let d = self.grid.d;
        self.values[node * d..node * d + d].copy_from_slice(&v[..d]);
    }

    /// Evaluate the zero extension at an arbitrary point by multilinear
    /// interpolation of the node values.  Nodes outside the lattice, or cells
    /// whose centers fall outside the domain, contribute zero, so the result
    /// decays to zero across a one-cell collar around the sampled region and
    /// vanishes identically beyond it.
    pub fn eval_extended(&self, x: &Point) -> [f64; 3] {
        let g = &self.grid;
        let d = g.d;
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..d {
            let t = (x[a] - g.lo[a]) / g.h[a] - 0.5;
            let b = t.floor();
            base[a] = b as i64;
            frac[a] = t - b;
        }
        let mut out = [0.0f64; 3];
        for corner in 0..(1usize << d) {
            let mut cell = base;
            let mut w = 1.0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    cell[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            if let Some(node) = g.node_at_cell(&cell) {
                let v = self.node_value(node);
                for c in 0..d {
                    out[c] += w * v[c];
                }
            }
        }
        out
    }

    /// The integral of `|u|^p` over the domain in the grid's quadrature.
    pub fn lp_norm_pow(&self, p: f64) -> f64 {
        let d = self.grid.d;
        let terms: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                let mut s = 0.0;
                for c in 0..d {
                    let v = self.values[i * d + c];
                    s += v * v;
                }
                self.grid.weights[i] * s.sqrt().powf(p)
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        self.lp_norm_pow(p).powf(1.0 / p)
    }

    /// Weighted inner product `sum_i w_i u_i . v_i`.
    pub fn dot_weighted(&self, other: &VectorField) -> Result<f64> {
        self.check_same_grid(other)?;
        let d = self.grid.d;
        let terms: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                let mut s = 0.0;
                for c in 0..d {
                    s += self.values[i * d + c] * other.values[i * d + c];
                }
                self.grid.weights[i] * s
            })
            .collect();
        Ok(pairwise_sum(&terms))
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// `self += c * other` over a shared grid.
    pub fn axpy(&mut self, c: f64, other: &VectorField) -> Result<()> {
        self.check_same_grid(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    fn check_same_grid(&self, other: &VectorField) -> Result<()> {
        let same = Arc::ptr_eq(&self.grid, &other.grid)
            || (self.grid.dims == other.grid.dims && self.grid.len() == other.grid.len());
        if same {
            Ok(())
        } else {
            Err(Error::InvalidArgument("fields live on different grids".into()))
        }
    }

    /// Hash of the node values together with the lattice shape, stable across
    /// runs and platforms for bitwise-equal data.
    pub fn content_hash(&self) -> String {
        let g = &self.grid;
        let mut data = Vec::with_capacity(self.values.len() + 10);
        data.push(g.d as f64);
        data.extend(g.dims.iter().map(|&n| n as f64));
        data.extend_from_slice(&g.h);
        data.extend_from_slice(&g.lo);
        data.extend_from_slice(&self.values);
        content_hash("field", &data)
    }

    /// CSV text with one row per node in the grid's node order.
    pub fn to_csv_string(&self) -> String {
        let d = self.grid.d;
        let mut out = String::new();
        for c in 0..d {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "x_{}", c + 1);
        }
        for c in 0..d {
            let _ = write!(out, ",u_{}", c + 1);
        }
        out.push('\n');
        for (i, x) in self.grid.nodes.iter().enumerate() {
            for (a, coord) in x.iter().enumerate().take(d) {
                if a > 0 {
                    out.push(',');
                }
                out.push_str(&fmt_g17(*coord));
            }
            for c in 0..d {
                out.push(',');
                out.push_str(&fmt_g17(self.values[i * d + c]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Parse a CSV produced by [`VectorField::to_csv_string`], or any file
    /// with the same header whose coordinates coincide with this grid's
    /// nodes.  Every node must appear exactly once; row order is free.
    pub fn from_csv_str(grid: &Arc<Grid>, text: &str) -> Result<VectorField> {
        let d = grid.d;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("field file is empty".into()))?;
        let mut expected = String::new();
        for c in 0..d {
            if c > 0 {
                expected.push(',');
            }
            let _ = write!(expected, "x_{}", c + 1);
        }
        for c in 0..d {
            let _ = write!(expected, ",u_{}", c + 1);
        }
        if header.trim() != expected {
            return Err(Error::InvalidArgument(format!(
                "field file header {:?} does not match the expected {:?}",
                header.trim(),
                expected
            )));
        }
        let mut field = VectorField::zeros(grid);
        let mut seen = vec![false; grid.len()];
        for (row, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 2 * d {
                return Err(Error::InvalidArgument(format!(
                    "row {}: expected {} columns, found {}",
                    row + 2,
                    2 * d,
                    cols.len()
                )));
            }
            let mut nums = [0.0f64; 6];
            for (k, col) in cols.iter().enumerate() {
                nums[k] = col.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("row {}: bad number {:?}", row + 2, col))
                })?;
            }
            let mut cell = [0i64; 3];
            for a in 0..d {
                cell[a] = ((nums[a] - grid.lo[a]) / grid.h[a] - 0.5).round() as i64;
            }
            let node = grid.node_at_cell(&cell).ok_or_else(|| {
                Error::InvalidArgument(format!("row {}: coordinates are not a grid node", row + 2))
            })?;
            for a in 0..d {
                if (nums[a] - grid.nodes[node][a]).abs() > 1e-8 * grid.h[a] {
                    return Err(Error::InvalidArgument(format!(
                        "row {}: coordinates are off the node by more than 1e-8 cells",
                        row + 2
                    )));
                }
            }
            if seen[node] {
                return Err(Error::InvalidArgument(format!(
                    "row {}: node listed twice",
                    row + 2
                )));
            }
            seen[node] = true;
            field.set_node_value(node, &nums[d..2 * d]);
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidArgument(format!(
                "field file misses node {} of {}",
                missing,
                grid.len()
            )));
        }
        Ok(field)
    }

    pub fn read_csv(grid: &Arc<Grid>, path: impl AsRef<Path>) -> Result<VectorField> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(grid, &text)
    }
}

// ---------------------------------------------------------------------------
// Closed-form field expressions
// ---------------------------------------------------------------------------

/// The closed-form fields the command line can sample directly.  Anything
/// richer is built through [`VectorField::from_fn`].
#[derive(Debug, Clone)]
pub enum FieldExpr {
    Zero,
    Constant(Point),
    /// `u(x) = x`.
    Identity,
    /// `u(x) = A x + b`.
    Linear { matrix: [[f64; 3]; 3], offset: Point },
    Rigid(RigidMotion),
    /// Smooth compactly supported bump `a * exp(1 - 1/(1 - |x-c|^2/r^2))`,
    /// equal to `a` at the center and vanishing outside the ball of radius
    /// `r`.
    Bump { center: Point, radius: f64, amplitude: Point },
    /// The same bump modulated by `sin(2 pi f . (x - c))`.
    Oscillation { center: Point, radius: f64, amplitude: Point, frequency: Point },
}

fn bump_profile(t2: f64) -> f64 {
    if t2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t2)).exp()
    }
}

impl FieldExpr {
    pub fn eval(&self, d: usize, x: &Point) -> [f64; 3] {
        match self {
            FieldExpr::Zero => [0.0; 3],
            FieldExpr::Constant(a) => *a,
            FieldExpr::Identity => *x,
            FieldExpr::Linear { matrix, offset } => {
                let mut out = *offset;
                for (i, row) in matrix.iter().enumerate().take(d) {
                    for (j, m) in row.iter().enumerate().take(d) {
                        out[i] += m * x[j];
                    }
                }
                out
            }
            FieldExpr::Rigid(r) => r.eval(x),
            FieldExpr::Bump { center, radius, amplitude } => {
                let mut t2 = 0.0;
                for a in 0..d {
                    let z = (x[a] - center[a]) / radius;
                    t2 += z * z;
                }
                let b = bump_profile(t2);
                [amplitude[0] * b, amplitude[1] * b, amplitude[2] * b]
            }
            FieldExpr::Oscillation { center, radius, amplitude, frequency } => {
                let mut t2 = 0.0;
                let mut phase = 0.0;
                for a in 0..d {
                    let z = (x[a] - center[a]) / radius;
                    t2 += z * z;
                    phase += frequency[a] * (x[a] - center[a]);
                }
                let b = bump_profile(t2) * (2.0 * std::f64::consts::PI * phase).sin();
                [amplitude[0] * b, amplitude[1] * b, amplitude[2] * b]
            }
        }
    }
}

pub fn sample_field(grid: &Arc<Grid>, expr: &FieldExpr) -> VectorField {
    let d = grid.d;
    VectorField::from_fn(grid, |x| expr.eval(d, x))
}

// ---------------------------------------------------------------------------
// Rigid motions
// ---------------------------------------------------------------------------

/// An affine map `x -> a + S x` with `S` exactly antisymmetric.  Exactness is
/// enforced at construction so the fields these produce lie in the kernel of
/// the projected difference quotient to rounding accuracy.
#[derive(Debug, Clone)]
pub struct RigidMotion {
    pub d: usize,
    pub translation: Point,
    pub spin: [[f64; 3]; 3],
}

impl RigidMotion {
    pub fn new(d: usize, translation: Point, spin: [[f64; 3]; 3]) -> Result<RigidMotion> {
        if d == 0 || d > 3 {
            return Err(Error::InvalidArgument("dimension must be 1, 2, or 3".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                if spin[i][j] != -spin[j][i] {
                    return Err(Error::InvalidArgument(
                        "spin matrix must be exactly antisymmetric".into(),
                    ));
                }
                if (i >= d || j >= d) && spin[i][j] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "spin matrix must vanish beyond the active dimension".into(),
                    ));
                }
            }
        }
        for (a, t) in translation.iter().enumerate() {
            if a >= d && *t != 0.0 {
                return Err(Error::InvalidArgument(
                    "translation must vanish beyond the active dimension".into(),
                ));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument("translation must be finite".into()));
            }
        }
        Ok(RigidMotion { d, translation, spin })
    }

    /// Build the spin matrix from angular rates: none in dimension one, the
    /// scalar rate `omega[0]` in dimension two, the full vector (acting by
    /// cross product) in dimension three.
    pub fn from_angular(d: usize, translation: Point, omega: Point) -> Result<RigidMotion> {
        let mut spin = [[0.0f64; 3]; 3];
        match d {
            1 => {
                if omega != [0.0; 3] {
                    return Err(Error::InvalidArgument(
                        "no angular rate exists in dimension one".into(),
                    ));
                }
            }
            2 => {
                if omega[1] != 0.0 || omega[2] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "dimension two has a single angular rate, omega[0]".into(),
                    ));
                }
                let w = omega[0];
                spin[0][1] = -w;
                spin[1][0] = w;
            }
            3 => {
                let [a, b, c] = omega;
                spin[0][1] = -c;
                spin[1][0] = c;
                spin[0][2] = b;
                spin[2][0] = -b;
                spin[1][2] = -a;
                spin[2][1] = a;
            }
            _ => return Err(Error::InvalidArgument("dimension must be 1, 2, or 3".into())),
        }
        RigidMotion::new(d, translation, spin)
    }

    /// Recover the angular rates from the spin matrix.
    pub fn angular(&self) -> Point {
        [self.spin[2][1], self.spin[0][2], self.spin[1][0]]
    }

    pub fn eval(&self, x: &Point) -> [f64; 3] {
        let mut out = self.translation;
        for i in 0..self.d {
            for j in 0..self.d {
                out[i] += self.spin[i][j] * x[j];
            }
        }
        out
    }

    /// Rigid motion with standard normal translation and angular rates.
    pub fn random(d: usize, rng: &mut impl Rng) -> Result<RigidMotion> {
        let mut translation = [0.0f64; 3];
        for t in translation.iter_mut().take(d) {
            *t = rng.sample(StandardNormal);
        }
        let mut omega = [0.0f64; 3];
        let n_rot = rotation_count(d);
        for w in omega.iter_mut().take(n_rot) {
            *w = rng.sample(StandardNormal);
        }
        RigidMotion::from_angular(d, translation, omega)
    }
}

fn rotation_count(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Dimension of the space of rigid motions.
pub fn rigid_dim(d: usize) -> usize {
    d + rotation_count(d)
}

/// A basis of the rigid motions: the coordinate translations followed by the
/// elementary rotations `x_i e_j - x_j e_i` for `i < j`.
pub fn rigid_generators(d: usize) -> Result<Vec<RigidMotion>> {
    let mut out = Vec::with_capacity(rigid_dim(d));
    for a in 0..d {
        let mut t = [0.0f64; 3];
        t[a] = 1.0;
        out.push(RigidMotion::new(d, t, [[0.0; 3]; 3])?);
    }
    for i in 0..d {
        for j in i + 1..d {
            let mut spin = [[0.0f64; 3]; 3];
            spin[j][i] = 1.0;
            spin[i][j] = -1.0;
            out.push(RigidMotion::new(d, [0.0; 3], spin)?);
        }
    }
    Ok(out)
}

pub fn rigid_motion_field(grid: &Arc<Grid>, motion: &RigidMotion) -> VectorField {
    VectorField::from_fn(grid, |x| motion.eval(x))
}

// ---------------------------------------------------------------------------
// Constraint subspaces
// ---------------------------------------------------------------------------

/// A linear constraint on a field, realized as vanishing of the weighted
/// inner product against a fixed closed-form weight field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// `int u_c dx = 0`.
    MeanZero { component: usize },
    /// `int (x_i u_j - x_j u_i) dx = 0` for a coordinate plane `i < j`.
    SkewMomentZero { i: usize, j: usize },
}

impl Constraint {
    /// The weight field `g` with `ell(u) = <g, u>` in the weighted inner
    /// product.  These are exactly the rigid generator fields, so the cut-out
    /// subspace is the weighted orthogonal complement of the rigid motions.
    pub fn weight_field(&self, grid: &Arc<Grid>) -> VectorField {
        match *self {
            Constraint::MeanZero { component } => VectorField::from_fn(grid, |_| {
                let mut v = [0.0; 3];
                v[component] = 1.0;
                v
            }),
            Constraint::SkewMomentZero { i, j } => VectorField::from_fn(grid, |x| {
                let mut v = [0.0; 3];
                v[j] = x[i];
                v[i] = -x[j];
                v
            }),
        }
    }
}

/// A list of constraints describing the subspace on which a lower bound for
/// the seminorm is sought.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceSpec {
    pub constraints: Vec<Constraint>,
}

impl SubspaceSpec {
    /// The default subspace: mean zero and skew moments zero, the weighted
    /// orthogonal complement of the rigid motions.
    pub fn rigid_complement(d: usize) -> SubspaceSpec {
        let mut constraints = Vec::with_capacity(rigid_dim(d));
        for component in 0..d {
            constraints.push(Constraint::MeanZero { component });
        }
        for i in 0..d {
            for j in i + 1..d {
                constraints.push(Constraint::SkewMomentZero { i, j });
            }
        }
        SubspaceSpec { constraints }
    }

    pub fn weight_fields(&self, grid: &Arc<Grid>) -> Vec<VectorField> {
        self.constraints.iter().map(|c| c.weight_field(grid)).collect()
    }

    /// Constraint values `ell_m(u)`.
    pub fn residuals(&self, u: &VectorField) -> Result<Vec<f64>> {
        self.constraints
            .iter()
            .map(|c| c.weight_field(&u.grid).dot_weighted(u))
            .collect()
    }

    /// Largest constraint residual, normalized by the field and weight sizes.
    pub fn max_relative_residual(&self, u: &VectorField) -> Result<f64> {
        let u_norm = u.lp_norm(2.0);
        let mut worst = 0.0f64;
        for c in &self.constraints {
            let g = c.weight_field(&u.grid);
            let ell = g.dot_weighted(u)?;
            let scale = (g.lp_norm(2.0) * u_norm).max(f64::MIN_POSITIVE);
            worst = worst.max(ell.abs() / scale);
        }
        Ok(worst)
    }
}

/// Split `u` into its best weighted least squares rigid approximation and the
/// remainder.  The remainder is the projection of `u` onto the default
/// constraint subspace; applying the map twice changes nothing beyond
/// rounding.
pub fn project_out_rigid(u: &VectorField) -> Result<(VectorField, RigidMotion)> {
    let grid = &u.grid;
    let d = grid.d;
    let gens = rigid_generators(d)?;
    let gen_fields: Vec<VectorField> =
        gens.iter().map(|g| rigid_motion_field(grid, g)).collect();
    let m = gen_fields.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for a in 0..m {
        for b in a..m {
            let v = gen_fields[a].dot_weighted(&gen_fields[b])?;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        rhs[a] = gen_fields[a].dot_weighted(u)?;
    }
    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient(
            "rigid generators are dependent on this grid; refine it before projecting".into(),
        )
    })?;
    let coef = chol.solve(&rhs);
    let mut residual = u.clone();
    for (a, g) in gen_fields.iter().enumerate() {
        residual.axpy(-coef[a], g)?;
    }
    let mut translation = [0.0f64; 3];
    translation[..d].copy_from_slice(&coef.as_slice()[..d]);
    let mut spin = [[0.0f64; 3]; 3];
    let mut k = d;
    for i in 0..d {
        for j in i + 1..d {
            let c = coef[k];
            spin[j][i] = c;
            spin[i][j] = -c;
            k += 1;
        }
    }
    let motion = RigidMotion::new(d, translation, spin)?;
    Ok((residual, motion))
}

// ---------------------------------------------------------------------------
// Example sequences
// ---------------------------------------------------------------------------

/// The canned families of fields used to exercise the compactness and kernel
/// sequence experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    /// A fixed interior bump modulated at wavenumber growing with the index.
    Oscillatory,
    /// Bumps shrinking toward an interior point.
    Concentrating,
    /// A fixed bump whose center drifts toward the boundary.
    Translating,
    /// Independent standard normal node values, one stream per term.
    Random,
}

/// Produce `count` fields of the requested family, each normalized to unit
/// `L^p` norm in the grid's quadrature.  The construction is deterministic in
/// `seed`; only the random family consumes it, drawing term `n` from stream
/// `n` of a counter RNG so the terms are independent of `count`.
pub fn make_sequence(
    grid: &Arc<Grid>,
    kind: SequenceKind,
    count: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<VectorField>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sequence needs at least one term".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument("exponent p must be at least 1".into()));
    }
    let d = grid.d;
    let (lo, hi) = grid.domain.bounding_box();
    let mut center = [0.0f64; 3];
    let mut half_min = f64::INFINITY;
    for a in 0..d {
        center[a] = 0.5 * (lo[a] + hi[a]);
        half_min = half_min.min(0.5 * (hi[a] - lo[a]));
    }
    if !grid.domain.contains(&center) {
        return Err(Error::Unsupported(
            "sequence construction needs the box center inside the domain".into(),
        ));
    }
    let r_env = 0.4 * half_min;
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let expr = match kind {
            SequenceKind::Oscillatory => {
                let wavelength = r_env / n as f64;
                if wavelength < 2.0 * grid.max_h() {
                    return Err(Error::Resolution(format!(
                        "term {}: oscillation wavelength {:.3e} is under two cells",
                        n, wavelength
                    )));
                }
                let mut amplitude = [0.0; 3];
                amplitude[0] = 1.0;
                let mut frequency = [0.0; 3];
                frequency[0] = 1.0 / wavelength;
                Some(FieldExpr::Oscillation { center, radius: 2.0 * r_env, amplitude, frequency })
            }
            SequenceKind::Concentrating => {
                let radius = r_env * 0.5f64.powi(n as i32 - 1);
                if radius < 2.0 * grid.max_h() {
                    return Err(Error::Resolution(format!(
                        "term {}: bump radius {:.3e} is under two cells",
                        n, radius
                    )));
                }
                let mut amplitude = [0.0; 3];
                amplitude[0] = 1.0;
                Some(FieldExpr::Bump { center, radius, amplitude })
            }
            SequenceKind::Translating => {
                let reach = boundary_reach(grid, &center);
                let shift = (1.0 - 0.5f64.powi(n as i32 - 1)) * reach;
                let mut c = center;
                c[0] += shift;
                let mut amplitude = [0.0; 3];
                amplitude[0] = 1.0;
                Some(FieldExpr::Bump { center: c, radius: r_env, amplitude })
            }
            SequenceKind::Random => None,
        };
        let mut field = match expr {
            Some(e) => sample_field(grid, &e),
            None => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(n as u64);
                let mut f = VectorField::zeros(grid);
                for v in &mut f.values {
                    *v = rng.sample(StandardNormal);
                }
                f
            }
        };
        let norm = field.lp_norm(p);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "term {}: the sampled field has no mass on this grid",
                n
            )));
        }
        field.scale(1.0 / norm);
        out.push(field);
    }
    Ok(out)
}

/// Distance from `x` along `+e_1` to the domain boundary, by bisection.
fn boundary_reach(grid: &Grid, x: &Point) -> f64 {
    let (lo, hi) = grid.domain.bounding_box();
    let mut t_lo = 0.0f64;
    let mut t_hi = (hi[0] - lo[0]).max(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        let mut y = *x;
        y[0] += mid;
        if grid.domain.contains(&y) {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    t_lo
}
