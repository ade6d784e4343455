//! Interaction kernels and numerical checkers for their admissibility.
//!
//! A kernel here is a nonnegative locally integrable weight ρ on offsets
//! `ξ = y - x`.  Two one-dimensional quantities decide whether a kernel is
//! strong enough near the origin for the estimates downstream:
//!
//! * the small-ball mass ratio `δ^p / ∫_{B_δ} ρ`, which must vanish as
//!   `δ → 0`;
//! * its cone-restricted variant built from the infimum kernel
//!   `ρ_{θ0}(r v) = inf_{θ ∈ [θ0, 1]} ρ(θ r v) θ^{-p}`, where only the mass
//!   along a fixed direction cone counts.
//!
//! The checkers fit the decay rate of those ratios on a geometric sequence
//! of radii and classify the kernel as `satisfied`, `violated`, or
//! `inconclusive`.  Ratios that decay only logarithmically (the `log` kind)
//! land in `inconclusive` at desk scale; so does the borderline kernel,
//! whose ratio freezes at a positive constant.

use crate::error::{Error, Result};
use crate::geometry::{norm, probe_directions, sphere_area, sphere_quadrature, Cone, Point};
use crate::numerics::{adaptive_quad, fmt_g17, log_log_slope};
use serde::Serialize;
use std::io::Write;

/// Decay-rate threshold for the fitted log-log slope of a ratio sequence.
pub const SLOPE_TOL: f64 = 0.05;
/// A ratio sequence must dip below this at its smallest radius to count as
/// vanishing.
pub const RATIO_TOL: f64 = 1e-3;
/// Relative tolerance for radiality / direction-independence spreads.
pub const REL_TOL: f64 = 1e-6;
/// Points in the geometric θ-grid used for the infimum kernel.
pub const THETA_GRID: usize = 64;

// Radial mass integrals must stay accurate relative to their value even at
// radii around 1e-12, so the refinement is driven by the relative target.
const QUAD_ATOL: f64 = 0.0;
const QUAD_RTOL: f64 = 1e-10;

/// Evaluation interface shared by the catalog kernels and the derived
/// families (truncations, mollifications) built in the analysis layer.
pub trait KernelEval: Sync {
    fn dim(&self) -> usize;
    /// The integrability exponent the kernel is paired with.
    fn exponent_p(&self) -> f64;
    /// Radius beyond which the kernel vanishes, if bounded.
    fn support_radius(&self) -> Option<f64>;
    fn is_radial(&self) -> bool;
    /// The direction cone when the kernel is a radial profile cut to a cone
    /// and the unit ball.
    fn restriction_cone(&self) -> Option<&Cone> {
        None
    }
    /// Value at a nonzero offset whose norm `r` the caller has already
    /// computed.
    fn eval_at(&self, off: &Point, r: f64) -> f64;
    /// Limit value at the origin, or the singularity error.
    fn value_at_origin(&self) -> Result<f64>;
    /// Short stable description used in report hashes.
    fn describe(&self) -> String;

    /// Checked evaluation at an arbitrary offset.
    fn eval(&self, off: &Point) -> Result<f64> {
        let r = norm(off);
        if r == 0.0 {
            self.value_at_origin()
        } else {
            Ok(self.eval_at(off, r))
        }
    }
}

// ---------------------------------------------------------------------------
// Radial tables
// ---------------------------------------------------------------------------

/// A radial profile tabulated at increasing radii and interpolated linearly
/// in log-log coordinates, which reproduces power laws exactly on each
/// segment.  Below the first knot the first segment's power law is
/// extrapolated; beyond the last knot the profile is zero.
#[derive(Debug, Clone)]
pub struct RadialTable {
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl RadialTable {
    pub fn new(radii: Vec<f64>, values: Vec<f64>) -> Result<RadialTable> {
        if radii.len() < 2 || radii.len() != values.len() {
            return Err(Error::InvalidArgument(
                "radial table needs matching radii/values with at least 2 knots".into(),
            ));
        }
        for w in radii.windows(2) {
            if !(w[0] > 0.0 && w[1] > w[0]) {
                return Err(Error::InvalidArgument(
                    "table radii must be positive and strictly increasing".into(),
                ));
            }
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "table values must be finite and nonnegative".into(),
            ));
        }
        Ok(RadialTable { radii, values })
    }

    pub fn r_max(&self) -> f64 {
        *self.radii.last().expect("table has at least 2 knots")
    }

    fn segment(&self, lo: usize, r: f64) -> f64 {
        let (r0, r1) = (self.radii[lo], self.radii[lo + 1]);
        let (v0, v1) = (self.values[lo], self.values[lo + 1]);
        if v0 > 0.0 && v1 > 0.0 {
            let m = (v1 / v0).ln() / (r1 / r0).ln();
            v0 * (r / r0).powf(m)
        } else {
            // A zero endpoint breaks the log-log form; fall back to linear.
            let t = ((r - r0) / (r1 - r0)).clamp(0.0, 1.0);
            (1.0 - t) * v0 + t * v1
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let n = self.radii.len();
        if r < self.radii[0] {
            if self.values[0] == 0.0 {
                return 0.0;
            }
            return self.segment(0, r);
        }
        if r > self.radii[n - 1] {
            return 0.0;
        }
        let idx = match self.radii.binary_search_by(|x| x.partial_cmp(&r).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => (i - 1).min(n - 2),
        };
        self.segment(idx, r)
    }

    fn first_segment_slope(&self) -> f64 {
        let (r0, r1) = (self.radii[0], self.radii[1]);
        let (v0, v1) = (self.values[0], self.values[1]);
        if v0 > 0.0 && v1 > 0.0 {
            (v1 / v0).ln() / (r1 / r0).ln()
        } else {
            0.0
        }
    }

    fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

// ---------------------------------------------------------------------------
// The kernel catalog
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum KernelKind {
    /// `|ξ|^{-(d + p(s-1))}` with `s ∈ (0, 1)`.
    Fractional { s: f64 },
    /// `-|ξ|^{p-d} ln|ξ|` inside the unit ball, zero outside.
    Log,
    /// `|ξ|^{p-d}` on its support.
    Borderline,
    /// The characteristic function of the support ball.
    Indicator,
    /// A radial base kernel cut to the unit-ball sector of a cone.
    ConeRestricted { base: Box<Kernel>, cone: Cone },
    /// A tabulated radial profile.
    CustomRadial { table: RadialTable },
}

/// A kernel from the catalog, together with the dimension and exponent it is
/// used with and an optional support radius.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub d: usize,
    pub p: f64,
    pub kind: KernelKind,
    support: Option<f64>,
}

fn check_d_p(d: usize, p: f64) -> Result<()> {
    if !(1..=3).contains(&d) {
        return Err(Error::Unsupported(format!("dimension {d} (supported: 1, 2, 3)")));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent p = {p} must be >= 1")));
    }
    Ok(())
}

impl Kernel {
    pub fn fractional(d: usize, p: f64, s: f64) -> Result<Kernel> {
        check_d_p(d, p)?;
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidArgument(format!("order s = {s} outside (0, 1)")));
        }
        Ok(Kernel { d, p, kind: KernelKind::Fractional { s }, support: None })
    }

    pub fn log(d: usize, p: f64) -> Result<Kernel> {
        check_d_p(d, p)?;
        Ok(Kernel { d, p, kind: KernelKind::Log, support: Some(1.0) })
    }

    pub fn borderline(d: usize, p: f64) -> Result<Kernel> {
        check_d_p(d, p)?;
        Ok(Kernel { d, p, kind: KernelKind::Borderline, support: Some(1.0) })
    }

    pub fn indicator(d: usize, p: f64) -> Result<Kernel> {
        check_d_p(d, p)?;
        Ok(Kernel { d, p, kind: KernelKind::Indicator, support: Some(1.0) })
    }

    /// Restricts a radial kernel to the unit-ball sector of `cone`.
    pub fn cone_restricted(base: Kernel, cone: Cone) -> Result<Kernel> {
        if base.d != cone.d {
            return Err(Error::InvalidArgument(
                "cone and base kernel live in different dimensions".into(),
            ));
        }
        if !base.is_radial() {
            return Err(Error::InvalidArgument(
                "cone restriction expects a radial base kernel".into(),
            ));
        }
        let support = Some(base.support.map_or(1.0, |s| s.min(1.0)));
        let (d, p) = (base.d, base.p);
        Ok(Kernel { d, p, kind: KernelKind::ConeRestricted { base: Box::new(base), cone }, support })
    }

    pub fn custom_radial(d: usize, p: f64, radii: Vec<f64>, values: Vec<f64>) -> Result<Kernel> {
        check_d_p(d, p)?;
        let table = RadialTable::new(radii, values)?;
        let support = Some(table.r_max());
        Ok(Kernel { d, p, kind: KernelKind::CustomRadial { table }, support })
    }

    /// Pure power profile `|ξ|^e` on the unit ball, realized as a two-knot
    /// table (log-log interpolation makes it exact at every radius).
    pub fn power(d: usize, p: f64, e: f64) -> Result<Kernel> {
        Self::custom_radial(d, p, vec![1e-6, 1.0], vec![1e-6f64.powf(e), 1.0])
    }

    /// Overrides the support radius.
    pub fn with_support(mut self, radius: f64) -> Result<Kernel> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("support radius must be positive".into()));
        }
        self.support = Some(radius);
        Ok(self)
    }

    fn in_support(&self, r: f64) -> bool {
        self.support.map_or(true, |s| r <= s * (1.0 + 1e-12))
    }
}

impl KernelEval for Kernel {
    fn dim(&self) -> usize {
        self.d
    }

    fn exponent_p(&self) -> f64 {
        self.p
    }

    fn support_radius(&self) -> Option<f64> {
        self.support
    }

    fn is_radial(&self) -> bool {
        !matches!(self.kind, KernelKind::ConeRestricted { .. })
    }

    fn restriction_cone(&self) -> Option<&Cone> {
        match &self.kind {
            KernelKind::ConeRestricted { cone, .. } => Some(cone),
            _ => None,
        }
    }

    fn eval_at(&self, off: &Point, r: f64) -> f64 {
        if !self.in_support(r) {
            return 0.0;
        }
        match &self.kind {
            KernelKind::Fractional { s } => {
                let a = self.d as f64 + self.p * (s - 1.0);
                r.powf(-a)
            }
            KernelKind::Log => {
                if r >= 1.0 {
                    0.0
                } else {
                    -r.powf(self.p - self.d as f64) * r.ln()
                }
            }
            KernelKind::Borderline => r.powf(self.p - self.d as f64),
            KernelKind::Indicator => 1.0,
            KernelKind::ConeRestricted { base, cone } => {
                if cone.contains(off).unwrap_or(false) {
                    base.eval_at(off, r)
                } else {
                    0.0
                }
            }
            KernelKind::CustomRadial { table } => table.eval(r),
        }
    }

    fn value_at_origin(&self) -> Result<f64> {
        let (d, p) = (self.d as f64, self.p);
        match &self.kind {
            KernelKind::Fractional { s } => {
                let a = d + p * (s - 1.0);
                if a > 0.0 {
                    Err(Error::Singularity)
                } else if a == 0.0 {
                    Ok(1.0)
                } else {
                    Ok(0.0)
                }
            }
            KernelKind::Log => {
                if p > d {
                    Ok(0.0)
                } else {
                    Err(Error::Singularity)
                }
            }
            KernelKind::Borderline => {
                if p > d {
                    Ok(0.0)
                } else if p == d {
                    Ok(1.0)
                } else {
                    Err(Error::Singularity)
                }
            }
            KernelKind::Indicator => Ok(1.0),
            KernelKind::ConeRestricted { base, .. } => base.value_at_origin(),
            KernelKind::CustomRadial { table } => {
                if table.is_zero() {
                    return Ok(0.0);
                }
                let slope = table.first_segment_slope();
                if slope < -1e-12 {
                    Err(Error::Singularity)
                } else if slope > 1e-12 {
                    Ok(0.0)
                } else {
                    Ok(table.values[0])
                }
            }
        }
    }

    fn describe(&self) -> String {
        let support = match self.support {
            Some(s) => format!("{s}"),
            None => "inf".into(),
        };
        let kind = match &self.kind {
            KernelKind::Fractional { s } => format!("fractional(s={s})"),
            KernelKind::Log => "log".into(),
            KernelKind::Borderline => "borderline".into(),
            KernelKind::Indicator => "indicator".into(),
            KernelKind::ConeRestricted { base, cone } => format!(
                "cone_restricted({}, aperture={}, full={})",
                base.describe(),
                cone.aperture,
                cone.full_sphere
            ),
            KernelKind::CustomRadial { table } => {
                format!("custom_radial({} knots, rmax={})", table.radii.len(), table.r_max())
            }
        };
        format!("{kind}[d={},p={},support={support}]", self.d, self.p)
    }
}

/// Checked kernel evaluation at an offset; the origin errors for singular
/// kinds and returns the limit value otherwise.
pub fn eval_kernel(k: &dyn KernelEval, off: &Point) -> Result<f64> {
    k.eval(off)
}

// ---------------------------------------------------------------------------
// The cone-infimum kernel
// ---------------------------------------------------------------------------

/// `ρ_{θ0}(r v) = inf_{θ ∈ [θ0, 1]} ρ(θ r v) θ^{-p}`, the largest radial
/// minorant compatible with scaling along the ray `v`.  The infimum is taken
/// over a geometric grid of `n_theta` points with both endpoints included,
/// so the result never exceeds `ρ(r v)` itself.
pub fn rho_theta0_with(
    k: &dyn KernelEval,
    theta0: f64,
    r: f64,
    v: &Point,
    n_theta: usize,
) -> Result<f64> {
    if !(theta0 > 0.0 && theta0 < 1.0) {
        return Err(Error::InvalidArgument(format!("theta0 = {theta0} outside (0, 1)")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    if n_theta < 2 {
        return Err(Error::InvalidArgument("theta grid needs at least 2 points".into()));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Err(Error::InvalidArgument("direction must be nonzero".into()));
    }
    let p = k.exponent_p();
    let mut best = f64::INFINITY;
    for j in 0..n_theta {
        let theta = theta0.powf(1.0 - j as f64 / (n_theta - 1) as f64);
        let scaled = [
            theta * r * v[0] / vn,
            theta * r * v[1] / vn,
            theta * r * v[2] / vn,
        ];
        let value = k.eval_at(&scaled, theta * r) * theta.powf(-p);
        best = best.min(value);
    }
    Ok(best)
}

/// [`rho_theta0_with`] at the default θ-grid resolution.
pub fn rho_theta0(k: &dyn KernelEval, theta0: f64, r: f64, v: &Point) -> Result<f64> {
    rho_theta0_with(k, theta0, r, v, THETA_GRID)
}

// ---------------------------------------------------------------------------
// Mass ratios
// ---------------------------------------------------------------------------

fn radial_line_mass(k: &dyn KernelEval, dir: &Point, delta: f64) -> f64 {
    let d = k.dim() as f64;
    let upper = match k.support_radius() {
        Some(s) => delta.min(s * (1.0 + 1e-12)),
        None => delta,
    };
    if upper <= 0.0 {
        return 0.0;
    }
    let mut f = |r: f64| k.eval_at(&[r * dir[0], r * dir[1], r * dir[2]], r) * r.powf(d - 1.0);
    adaptive_quad(&mut f, 0.0, upper, QUAD_ATOL, QUAD_RTOL).value
}

/// Mass of the kernel on the ball `B_δ`.
pub fn ball_mass(k: &dyn KernelEval, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument("ball radius must be positive".into()));
    }
    let d = k.dim();
    if k.is_radial() {
        let e1 = [1.0, 0.0, 0.0];
        return Ok(sphere_area(d) * radial_line_mass(k, &e1, delta));
    }
    if let Some(cone) = k.restriction_cone() {
        // Radial profile cut to a cone: the angular factor is the cap measure
        // and the axis carries the profile.
        let axis = cone.axis;
        return Ok(cone.surface_measure() * radial_line_mass(k, &axis, delta));
    }
    let n = match d {
        1 => 2,
        2 => 512,
        _ => 2048,
    };
    let full = Cone::full(d)?;
    let quad = sphere_quadrature(&full, n)?;
    let terms: Vec<f64> = quad
        .iter()
        .map(|(v, w)| w * radial_line_mass(k, v, delta))
        .collect();
    Ok(crate::numerics::pairwise_sum(&terms))
}

/// The small-ball mass ratio `δ^p / ∫_{B_δ} ρ`.
pub fn mass_ratio(k: &dyn KernelEval, delta: f64) -> Result<f64> {
    let mass = ball_mass(k, delta)?;
    if !(mass > 1e-300) {
        return Err(Error::DegenerateKernel(format!(
            "no mass on the ball of radius {delta}"
        )));
    }
    Ok(delta.powf(k.exponent_p()) / mass)
}

// ---------------------------------------------------------------------------
// Condition reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

/// Outcome of one admissibility check: the sampled `(radius, value)` pairs
/// (largest radius first), the fitted log-log slope, and the classification.
#[derive(Debug, Clone, Serialize)]
pub struct KernelConditionReport {
    pub condition_id: String,
    pub kernel: String,
    pub samples: Vec<(f64, f64)>,
    pub fitted_log_slope: Option<f64>,
    pub verdict: Verdict,
    pub notes: String,
}

impl KernelConditionReport {
    /// Writes the samples as a two-column CSV (header row, LF endings,
    /// 17 significant digits).
    pub fn write_samples_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"radius,value\n")?;
        for (r, v) in &self.samples {
            writeln!(w, "{},{}", fmt_g17(*r), fmt_g17(*v))?;
        }
        Ok(())
    }
}

/// Validates a strictly decreasing geometric sequence of radii.
fn check_geometric(deltas: &[f64]) -> Result<f64> {
    if deltas.len() < 4 {
        return Err(Error::InvalidArgument(
            "need at least 4 radii to fit a decay rate".into(),
        ));
    }
    let q = deltas[1] / deltas[0];
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(
            "radii must decrease geometrically".into(),
        ));
    }
    for w in deltas.windows(2) {
        if !(w[0] > 0.0 && w[1] > 0.0) {
            return Err(Error::InvalidArgument("radii must be positive".into()));
        }
        let qi = w[1] / w[0];
        if (qi / q - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(
                "radii must form a geometric sequence".into(),
            ));
        }
    }
    Ok(q)
}

/// Standard radius sequence for the limit checkers: `2^{-2}, ..., 2^{-41}`,
/// deep enough that even a decay rate of `δ^{1/4}` crosses [`RATIO_TOL`].
pub fn default_delta_sequence() -> Vec<f64> {
    (2..=41).map(|j| 0.5f64.powi(j)).collect()
}

fn classify_ratio_sequence(samples: &[(f64, f64)]) -> (Option<f64>, Verdict) {
    let slope = log_log_slope(samples);
    let last_ratio = samples.last().map(|s| s.1).unwrap_or(f64::NAN);
    let verdict = match slope {
        Some(m) if m >= SLOPE_TOL && last_ratio < RATIO_TOL => Verdict::Satisfied,
        Some(m) if m <= -SLOPE_TOL => Verdict::Violated,
        Some(_) => Verdict::Inconclusive,
        None => Verdict::Inconclusive,
    };
    (slope, verdict)
}

/// Checks that the kernel is radial with `r^{-p} ρ(r)` nonincreasing, by
/// sampling the given increasing radii along several directions.
pub fn check_radial_monotone(k: &dyn KernelEval, radii: &[f64]) -> Result<KernelConditionReport> {
    if radii.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 probe radii".into()));
    }
    for w in radii.windows(2) {
        if !(w[0] > 0.0 && w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "probe radii must be positive and strictly increasing".into(),
            ));
        }
    }
    let p = k.exponent_p();
    let dirs = probe_directions(k.dim(), 16);
    let mut radial = true;
    let mut notes = String::new();
    let mut quotient = Vec::with_capacity(radii.len());
    for &r in radii {
        let values: Vec<f64> = dirs
            .iter()
            .map(|v| k.eval_at(&[r * v[0], r * v[1], r * v[2]], r))
            .collect();
        let vmax = values.iter().cloned().fold(f64::MIN, f64::max);
        let vmin = values.iter().cloned().fold(f64::MAX, f64::min);
        if vmax - vmin > REL_TOL * vmax.abs().max(1e-300) {
            radial = false;
            if notes.is_empty() {
                notes = format!("direction spread {:.2e} at r = {r}", vmax - vmin);
            }
        }
        quotient.push((r, r.powf(-p) * values[0].max(0.0)));
    }
    let mut monotone = true;
    for w in quotient.windows(2) {
        if w[1].1 > w[0].1 * (1.0 + 1e-9) + 1e-300 {
            monotone = false;
            if notes.is_empty() {
                notes = format!("r^-p rho increases between r = {} and r = {}", w[0].0, w[1].0);
            }
        }
    }
    let mut samples = quotient;
    samples.reverse();
    let slope = log_log_slope(&samples);
    Ok(KernelConditionReport {
        condition_id: "radial-monotone".into(),
        kernel: k.describe(),
        samples,
        fitted_log_slope: slope,
        verdict: if radial && monotone { Verdict::Satisfied } else { Verdict::Violated },
        notes,
    })
}

/// Checks the vanishing of the small-ball mass ratio along a geometric
/// radius sequence (largest first).
pub fn check_mass_ratio_limit(
    k: &dyn KernelEval,
    deltas: &[f64],
) -> Result<KernelConditionReport> {
    check_geometric(deltas)?;
    let mut samples = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        samples.push((delta, mass_ratio(k, delta)?));
    }
    let (slope, verdict) = classify_ratio_sequence(&samples);
    Ok(KernelConditionReport {
        condition_id: "mass-ratio-limit".into(),
        kernel: k.describe(),
        samples,
        fitted_log_slope: slope,
        verdict,
        notes: String::new(),
    })
}

/// Checks the cone variant of the mass-ratio limit: the infimum kernel must
/// be direction-independent on the cone, and the ratio
/// `δ^p / ∫_0^δ ρ_{θ0}(r v0) r^{d-1} dr` along the cone axis must vanish.
pub fn check_cone_condition(
    k: &dyn KernelEval,
    theta0: f64,
    cone: &Cone,
    deltas: &[f64],
) -> Result<KernelConditionReport> {
    check_cone_condition_with(k, theta0, cone, deltas, THETA_GRID)
}

/// [`check_cone_condition`] with an explicit θ-grid resolution.
pub fn check_cone_condition_with(
    k: &dyn KernelEval,
    theta0: f64,
    cone: &Cone,
    deltas: &[f64],
    n_theta: usize,
) -> Result<KernelConditionReport> {
    if k.dim() != cone.d {
        return Err(Error::InvalidArgument(
            "cone and kernel live in different dimensions".into(),
        ));
    }
    check_geometric(deltas)?;
    let d = k.dim() as f64;
    let p = k.exponent_p();
    let v0 = cone.axis;

    // Direction independence of the infimum kernel on the cone.
    let cap_dirs: Vec<Point> = sphere_quadrature(cone, 16.max(cone.d * 8))?
        .into_iter()
        .map(|(v, _)| v)
        .collect();
    let mut independent = true;
    let mut notes = String::new();
    for &r in deltas.iter().take(8) {
        let reference = rho_theta0_with(k, theta0, r, &v0, n_theta)?;
        for v in &cap_dirs {
            let value = rho_theta0_with(k, theta0, r, v, n_theta)?;
            if (value - reference).abs() > REL_TOL * reference.abs().max(1e-300) {
                independent = false;
                if notes.is_empty() {
                    notes = format!(
                        "rho_theta0 varies over the cone at r = {r}: {value:.6e} vs {reference:.6e}"
                    );
                }
            }
        }
    }

    let mut samples = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut f = |r: f64| {
            rho_theta0_with(k, theta0, r, &v0, n_theta).unwrap_or(0.0) * r.powf(d - 1.0)
        };
        let mass = adaptive_quad(&mut f, 0.0, delta, QUAD_ATOL, QUAD_RTOL).value;
        if !(mass > 1e-300) {
            return Err(Error::DegenerateKernel(format!(
                "infimum kernel carries no mass along the cone axis up to radius {delta}"
            )));
        }
        samples.push((delta, delta.powf(p) / mass));
    }
    let (slope, mut verdict) = classify_ratio_sequence(&samples);
    if !independent {
        verdict = Verdict::Violated;
    }
    Ok(KernelConditionReport {
        condition_id: "cone-mass-ratio-limit".into(),
        kernel: k.describe(),
        samples,
        fitted_log_slope: slope,
        verdict,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Cone;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::{FRAC_PI_4, PI};

    #[test]
    fn fractional_half_order_is_flat_in_1d() {
        // d = 1, p = 2, s = 1/2 makes the exponent vanish.
        let k = Kernel::fractional(1, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(k.eval(&[0.3, 0.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(k.eval(&[2.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(k.eval(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn fractional_values_and_singularity_in_2d() {
        let k = Kernel::fractional(2, 2.0, 0.5).unwrap();
        // exponent is d + p(s-1) = 1, so rho = 1/|xi|.
        assert_relative_eq!(k.eval(&[0.5, 0.0, 0.0]).unwrap(), 2.0, max_relative = 1e-14);
        assert_relative_eq!(k.eval(&[0.3, 0.4, 0.0]).unwrap(), 2.0, max_relative = 1e-14);
        assert!(matches!(k.eval(&[0.0; 3]), Err(Error::Singularity)));
    }

    #[test]
    fn indicator_is_the_unit_ball_characteristic() {
        let k = Kernel::indicator(2, 2.0).unwrap();
        assert_abs_diff_eq!(k.eval(&[0.5, 0.5, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(k.eval(&[2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(k.eval(&[0.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn log_kernel_values() {
        let k = Kernel::log(2, 2.0).unwrap();
        assert_relative_eq!(
            k.eval(&[0.5, 0.0, 0.0]).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-14
        );
        assert_abs_diff_eq!(k.eval(&[1.5, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(k.eval(&[0.0; 3]), Err(Error::Singularity)));
    }

    #[test]
    fn power_table_reproduces_the_power_law_everywhere() {
        let k = Kernel::power(2, 2.0, 2.0).unwrap();
        for r in [1e-9, 1e-4, 0.25, 0.5, 0.99] {
            assert_relative_eq!(
                k.eval(&[r, 0.0, 0.0]).unwrap(),
                r * r,
                max_relative = 1e-12
            );
        }
        assert_abs_diff_eq!(k.eval(&[1.5, 0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(k.eval(&[0.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn cone_restriction_cuts_directions_and_radius() {
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let cone = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let k = Kernel::cone_restricted(base, cone).unwrap();
        assert_relative_eq!(k.eval(&[0.0, 0.5, 0.0]).unwrap(), 2.0, max_relative = 1e-14);
        assert_abs_diff_eq!(k.eval(&[0.5, 0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(k.eval(&[0.0, 2.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn infimum_kernel_equals_the_kernel_for_monotone_profiles() {
        let k = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let v = [0.6, 0.8, 0.0];
        for r in [0.05, 0.3, 0.9] {
            let inf = rho_theta0(&k, 0.5, r, &v).unwrap();
            let direct = k.eval(&[r * v[0], r * v[1], 0.0]).unwrap();
            assert_relative_eq!(inf, direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn infimum_kernel_on_flat_profile_sits_at_theta_one() {
        let k = Kernel::indicator(2, 2.0).unwrap();
        let v = [1.0, 0.0, 0.0];
        assert_abs_diff_eq!(rho_theta0(&k, 0.5, 0.5, &v).unwrap(), 1.0);
        // Entire theta-range lands outside the support.
        assert_abs_diff_eq!(rho_theta0(&k, 0.9, 3.0, &v).unwrap(), 0.0);
    }

    #[test]
    fn infimum_never_exceeds_the_kernel() {
        let kernels: Vec<Kernel> = vec![
            Kernel::fractional(2, 1.0, 0.25).unwrap(),
            Kernel::log(2, 2.0).unwrap(),
            Kernel::borderline(2, 2.0).unwrap(),
            Kernel::power(2, 2.0, 2.0).unwrap(),
        ];
        let v = [0.6, -0.8, 0.0];
        for k in &kernels {
            for j in 1..40 {
                let r = 0.05 * j as f64;
                let inf = rho_theta0(k, 0.3, r, &v).unwrap();
                let direct = k.eval(&[r * v[0], r * v[1], 0.0]).unwrap();
                assert!(inf <= direct * (1.0 + 1e-12), "{} at r={r}", k.describe());
            }
        }
    }

    #[test]
    fn mass_ratio_closed_forms() {
        // Fractional, d=2, p=2, s=1/2: ratio = delta / (2 pi).
        let k = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let got = mass_ratio(&k, 0.1).unwrap();
        assert_relative_eq!(got, 0.1 / (2.0 * PI), max_relative = 1e-6);
        assert_relative_eq!(got, 0.015915494309189534, max_relative = 1e-6);

        // Fractional, d=1, p=2, s=1/2: rho = 1, ratio = delta / 2.
        let k = Kernel::fractional(1, 2.0, 0.5).unwrap();
        assert_relative_eq!(mass_ratio(&k, 0.1).unwrap(), 0.05, max_relative = 1e-6);

        // Borderline, d=p=2: rho = 1 on the support, ratio = 1/pi.
        let k = Kernel::borderline(2, 2.0).unwrap();
        for delta in [0.5, 0.1, 0.01] {
            assert_relative_eq!(mass_ratio(&k, delta).unwrap(), 1.0 / PI, max_relative = 1e-6);
        }
    }

    #[test]
    fn mass_ratio_matches_the_fractional_closed_form_across_parameters() {
        for d in 1..=3usize {
            for &p in &[1.0, 2.0, 3.0] {
                for &s in &[0.25, 0.5, 0.75] {
                    let k = Kernel::fractional(d, p, s).unwrap();
                    for &delta in &[0.5f64, 0.05] {
                        let expect = p * (1.0 - s) * delta.powf(p * s) / sphere_area(d);
                        assert_relative_eq!(
                            mass_ratio(&k, delta).unwrap(),
                            expect,
                            max_relative = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mass_ratio_of_cone_restricted_kernel_scales_with_cap_measure() {
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let cone = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let k = Kernel::cone_restricted(base, cone).unwrap();
        // Cap measure is pi/2 instead of 2 pi: ratio is 4x the radial one.
        assert_relative_eq!(
            mass_ratio(&k, 0.1).unwrap(),
            0.1 / (0.5 * PI),
            max_relative = 1e-6
        );
    }

    #[test]
    fn zero_kernel_mass_is_degenerate() {
        let k = Kernel::custom_radial(2, 2.0, vec![0.5, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(mass_ratio(&k, 0.1), Err(Error::DegenerateKernel(_))));
    }

    #[test]
    fn trichotomy_fractional_satisfied_with_the_expected_rate() {
        let deltas = default_delta_sequence();
        for (d, p, s) in [(1, 2.0, 0.5), (2, 1.0, 0.25), (2, 2.0, 0.75)] {
            let k = Kernel::fractional(d, p, s).unwrap();
            let report = check_mass_ratio_limit(&k, &deltas).unwrap();
            assert_eq!(report.verdict, Verdict::Satisfied, "{}", k.describe());
            assert_relative_eq!(
                report.fitted_log_slope.unwrap(),
                p * s,
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn trichotomy_borderline_is_inconclusive_at_one_over_pi() {
        let k = Kernel::borderline(2, 2.0).unwrap();
        let deltas: Vec<f64> = (1..=12).map(|j| 0.5f64.powi(j)).collect();
        let report = check_mass_ratio_limit(&k, &deltas).unwrap();
        assert_eq!(report.verdict, Verdict::Inconclusive);
        assert!(report.fitted_log_slope.unwrap().abs() < SLOPE_TOL);
        for (_, ratio) in &report.samples {
            assert_relative_eq!(*ratio, 1.0 / PI, max_relative = 1e-4);
        }
    }

    #[test]
    fn trichotomy_integrable_quotient_is_violated() {
        let k = Kernel::power(2, 2.0, 2.0).unwrap();
        let deltas: Vec<f64> = (1..=12).map(|j| 0.5f64.powi(j)).collect();
        let report = check_mass_ratio_limit(&k, &deltas).unwrap();
        assert_eq!(report.verdict, Verdict::Violated);
        // ratio ~ delta^{-d}: slope -2.
        assert_relative_eq!(report.fitted_log_slope.unwrap(), -2.0, max_relative = 1e-3);
    }

    #[test]
    fn radial_monotone_report_on_catalog_kernels() {
        let radii: Vec<f64> = (1..=24).map(|j| 0.05 * j as f64).collect();
        let good = Kernel::fractional(2, 2.0, 0.5).unwrap();
        assert_eq!(
            check_radial_monotone(&good, &radii).unwrap().verdict,
            Verdict::Satisfied
        );
        let flat = Kernel::indicator(1, 1.0).unwrap();
        assert_eq!(
            check_radial_monotone(&flat, &radii).unwrap().verdict,
            Verdict::Satisfied
        );
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let cone = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let nonradial = Kernel::cone_restricted(base, cone).unwrap();
        assert_eq!(
            check_radial_monotone(&nonradial, &radii).unwrap().verdict,
            Verdict::Violated
        );
    }

    #[test]
    fn growing_quotient_fails_monotonicity() {
        // rho = |xi|^p with p' = p: r^-p rho = const... use e > p so it grows.
        let k = Kernel::power(1, 1.0, 2.0).unwrap();
        let radii: Vec<f64> = (1..=10).map(|j| 0.08 * j as f64).collect();
        let report = check_radial_monotone(&k, &radii).unwrap();
        assert_eq!(report.verdict, Verdict::Violated);
    }

    #[test]
    fn cone_condition_for_radial_kernels_matches_the_radial_rate() {
        let k = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let cone = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let deltas: Vec<f64> = (2..=30).map(|j| 0.5f64.powi(j)).collect();
        let report = check_cone_condition(&k, 0.5, &cone, &deltas).unwrap();
        assert_eq!(report.verdict, Verdict::Satisfied, "{}", report.notes);
        assert_relative_eq!(report.fitted_log_slope.unwrap(), 1.0, max_relative = 1e-6);
    }

    #[test]
    fn cone_condition_for_a_cone_restricted_kernel_on_its_own_cone() {
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let cone = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let k = Kernel::cone_restricted(base, cone.clone()).unwrap();
        let deltas: Vec<f64> = (2..=30).map(|j| 0.5f64.powi(j)).collect();
        let report = check_cone_condition(&k, 0.5, &cone, &deltas).unwrap();
        assert_eq!(report.verdict, Verdict::Satisfied, "{}", report.notes);
    }

    #[test]
    fn cone_condition_detects_direction_dependence() {
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let narrow = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let k = Kernel::cone_restricted(base, narrow).unwrap();
        // Probing with a wider cone sees the kernel vanish off the cap.
        let wide = Cone::cap(2, [0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap();
        let deltas: Vec<f64> = (2..=12).map(|j| 0.5f64.powi(j)).collect();
        let report = check_cone_condition(&k, 0.5, &wide, &deltas).unwrap();
        assert_eq!(report.verdict, Verdict::Violated);
    }

    #[test]
    fn cone_condition_off_the_kernel_cone_is_degenerate() {
        let base = Kernel::fractional(2, 2.0, 0.5).unwrap();
        let up = Cone::cap(2, [0.0, 1.0, 0.0], FRAC_PI_4).unwrap();
        let k = Kernel::cone_restricted(base, up).unwrap();
        let down = Cone::cap(2, [0.0, -1.0, 0.0], FRAC_PI_4).unwrap();
        let deltas: Vec<f64> = (2..=12).map(|j| 0.5f64.powi(j)).collect();
        assert!(matches!(
            check_cone_condition(&k, 0.5, &down, &deltas),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn delta_sequences_must_be_geometric() {
        let k = Kernel::indicator(1, 1.0).unwrap();
        assert!(check_mass_ratio_limit(&k, &[0.5, 0.25]).is_err());
        assert!(check_mass_ratio_limit(&k, &[0.5, 0.25, 0.2, 0.1]).is_err());
        assert!(check_mass_ratio_limit(&k, &[0.1, 0.2, 0.4, 0.8]).is_err());
    }

    #[test]
    fn constructor_validation() {
        assert!(Kernel::fractional(2, 2.0, 1.5).is_err());
        assert!(Kernel::fractional(2, 0.5, 0.5).is_err());
        assert!(Kernel::fractional(4, 2.0, 0.5).is_err());
        assert!(Kernel::custom_radial(2, 2.0, vec![1.0, 0.5], vec![1.0, 1.0]).is_err());
        assert!(Kernel::custom_radial(2, 2.0, vec![0.5, 1.0], vec![1.0, -1.0]).is_err());
    }
}
