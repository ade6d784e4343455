//! The TOML experiment description.
//!
//! A config file is a bag of sections; which ones a run needs depends on the
//! subcommand, and [`validate`] checks that before anything is built.  Every
//! struct here rejects unknown keys so a typo fails loudly with the key named
//! instead of silently falling back to a default.  Parsing then serializing
//! then parsing again gives back the same config, which keeps saved configs
//! honest as reproduction recipes.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use nonlocal_lab::analysis::KernelFamily;
use nonlocal_lab::fields::{
    rigid_motion_field, sample_field, FieldExpr, RigidMotion, SequenceKind, VectorField,
};
use nonlocal_lab::geometry::{Cone, Domain, Grid, Point};
use nonlocal_lab::kernels::Kernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional self-description; when present it must match the subcommand
    /// the config is run under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceConfig>,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    KernelCheck,
    Seminorm,
    Mollify,
    Poincare,
    Boundary,
    Compactness,
    Sequence,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::KernelCheck => "kernel-check",
            CommandKind::Seminorm => "seminorm",
            CommandKind::Mollify => "mollify",
            CommandKind::Poincare => "poincare",
            CommandKind::Boundary => "boundary",
            CommandKind::Compactness => "compactness",
            CommandKind::Sequence => "sequence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub d: usize,
    pub p: f64,
    /// Order of the fractional kernel, in (0, 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    /// Exponent of the plain power kernel `|z|^e` on the unit ball.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    /// Truncation radius; the kernel vanishes beyond it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<f64>,
    /// Interpolation knots for the custom radial profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Restrict the kernel to a cone of directions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone: Option<ConeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Fractional,
    Indicator,
    Borderline,
    Log,
    Power,
    Custom,
}

/// A cone of directions.  Leave both keys out for the full sphere; give
/// `axis` and `aperture` together for a cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub kind: DomainKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Box,
    Ball,
}

/// Exactly one of `n` (nodes per axis) or `h` (target spacing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<Vec<f64>>,
    /// Per-field seed for the random kinds; falls back to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Node values read from a CSV written by an earlier run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Zero,
    Constant,
    Identity,
    Linear,
    Rigid,
    Bump,
    Oscillation,
    Noise,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub kind: SequenceKindConfig,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKindConfig {
    Oscillatory,
    Concentrating,
    Translating,
    Random,
}

impl SequenceKindConfig {
    pub fn to_lib(self) -> SequenceKind {
        match self {
            SequenceKindConfig::Oscillatory => SequenceKind::Oscillatory,
            SequenceKindConfig::Concentrating => SequenceKind::Concentrating,
            SequenceKindConfig::Translating => SequenceKind::Translating,
            SequenceKindConfig::Random => SequenceKind::Random,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SequenceKindConfig::Oscillatory => "oscillatory",
            SequenceKindConfig::Concentrating => "concentrating",
            SequenceKindConfig::Translating => "translating",
            SequenceKindConfig::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyConfig {
    Mollified,
    InnerTruncated,
    RescaledBall,
}

impl FamilyConfig {
    pub fn to_lib(self) -> KernelFamily {
        match self {
            FamilyConfig::Mollified => KernelFamily::Mollified,
            FamilyConfig::InnerTruncated => KernelFamily::InnerTruncated,
            FamilyConfig::RescaledBall => KernelFamily::RescaledBall,
        }
    }
}

/// Scalar knobs shared across commands.  Everything has a default so the
/// whole section can be left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Integrability exponent for commands that run without a kernel.
    pub p: Option<f64>,
    /// Radii for the kernel conditions and the mollifier sweep.
    pub deltas: Option<Vec<f64>>,
    /// Radii for the near-boundary mass bound.
    pub radii: Option<Vec<f64>>,
    /// Angular shrink factor of the cone infimum kernel.
    pub theta0: f64,
    /// Depth fraction of the interior term in the boundary bound.
    pub epsilon0: f64,
    /// Resolution of the theta grid behind the cone infimum.
    pub theta_grid: usize,
    /// Run seed; the `--seed` flag overrides it.
    pub seed: u64,
    /// Approximation family for the sequence command.
    pub family: Option<FamilyConfig>,
    /// Cone for the compactness probe and the cone mass condition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cone: Option<ConeConfig>,
}

impl Default for Params {
    fn default() -> Params {
        Params {
            p: None,
            deltas: None,
            radii: None,
            theta0: 0.5,
            epsilon0: 1.0 / 16.0,
            theta_grid: 64,
            seed: 0,
            family: None,
            cone: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| format!("config error: {e}"))
}

pub fn to_toml_string(cfg: &ExperimentConfig) -> Result<String, String> {
    toml::to_string_pretty(cfg).map_err(|e| format!("config serialization error: {e}"))
}

/// Structural checks that need no building: the right sections are present
/// for the subcommand, exponents are in range, radius lists are sane, and
/// any referenced file exists.  Numerical admissibility (kernel positivity,
/// grid resolution and the like) is left to the library constructors.
pub fn validate(cfg: &ExperimentConfig, cmd: CommandKind) -> Result<(), String> {
    if let Some(declared) = cfg.command {
        if declared != cmd {
            return Err(format!(
                "config declares command \"{}\" but was run under \"{}\"",
                declared.name(),
                cmd.name()
            ));
        }
    }

    if let Some(k) = &cfg.kernel {
        if !(k.p >= 1.0) {
            return Err(format!("kernel.p = {}: p >= 1 required", k.p));
        }
    }
    if let Some(p) = cfg.params.p {
        if !(p >= 1.0) {
            return Err(format!("params.p = {p}: p >= 1 required"));
        }
    }
    if let Some(deltas) = &cfg.params.deltas {
        check_decreasing("params.deltas", deltas)?;
    }
    if let Some(radii) = &cfg.params.radii {
        if radii.is_empty() {
            return Err("params.radii must not be empty".into());
        }
        for &r in radii {
            if !(r > 0.0 && r.is_finite()) {
                return Err(format!("params.radii entry {r} is not a positive number"));
            }
        }
    }
    if !(cfg.params.theta0 > 0.0 && cfg.params.theta0 < 1.0) {
        return Err(format!(
            "params.theta0 = {} must lie strictly between 0 and 1",
            cfg.params.theta0
        ));
    }
    if cfg.params.theta_grid < 2 {
        return Err("params.theta_grid must be at least 2".into());
    }
    if let Some(g) = &cfg.grid {
        match (&g.n, g.h) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err("grid needs exactly one of n or h".into()),
        }
    }
    if let Some(f) = &cfg.field {
        if f.kind == FieldKind::Csv {
            let path = f
                .path
                .as_ref()
                .ok_or("field.kind = \"csv\" needs field.path")?;
            if !path.is_file() {
                return Err(format!("field.path {:?} does not exist", path));
            }
        }
    }
    if let Some(s) = &cfg.sequence {
        if s.count == 0 {
            return Err("sequence.count must be at least 1".into());
        }
    }

    let need = |ok: bool, what: &str| -> Result<(), String> {
        if ok {
            Ok(())
        } else {
            Err(format!("the {} command needs {}", cmd.name(), what))
        }
    };
    match cmd {
        CommandKind::KernelCheck => need(cfg.kernel.is_some(), "a [kernel] section")?,
        CommandKind::Seminorm => {
            need(cfg.kernel.is_some(), "a [kernel] section")?;
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
            need(cfg.field.is_some(), "a [field] section")?;
        }
        CommandKind::Mollify => {
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
            need(cfg.field.is_some(), "a [field] section")?;
            need(cfg.params.deltas.is_some(), "params.deltas")?;
            need(
                cfg.params.p.is_some() || cfg.kernel.is_some(),
                "params.p or a [kernel] section to fix the exponent",
            )?;
        }
        CommandKind::Poincare => {
            need(cfg.kernel.is_some(), "a [kernel] section")?;
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
        }
        CommandKind::Boundary => {
            need(cfg.kernel.is_some(), "a [kernel] section")?;
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
            need(cfg.field.is_some(), "a [field] section")?;
            need(cfg.params.radii.is_some(), "params.radii")?;
        }
        CommandKind::Compactness => {
            need(cfg.kernel.is_some(), "a [kernel] section")?;
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
            need(cfg.sequence.is_some(), "a [sequence] section")?;
        }
        CommandKind::Sequence => {
            need(cfg.kernel.is_some(), "a [kernel] section")?;
            need(cfg.domain.is_some(), "a [domain] section")?;
            need(cfg.grid.is_some(), "a [grid] section")?;
            need(cfg.sequence.is_some(), "a [sequence] section")?;
            need(cfg.params.family.is_some(), "params.family")?;
        }
    }
    Ok(())
}

fn check_decreasing(what: &str, xs: &[f64]) -> Result<(), String> {
    if xs.is_empty() {
        return Err(format!("{what} must not be empty"));
    }
    for &x in xs {
        if !(x > 0.0 && x.is_finite()) {
            return Err(format!("{what} entry {x} is not a positive number"));
        }
    }
    for w in xs.windows(2) {
        if !(w[1] < w[0]) {
            return Err(format!("{what} must be strictly decreasing"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Builders from config sections to library objects
// ---------------------------------------------------------------------------

fn to_point(what: &str, v: &[f64], d: usize) -> Result<Point, String> {
    if v.len() != d {
        return Err(format!("{what} has {} entries, expected {d}", v.len()));
    }
    let mut p = [0.0f64; 3];
    p[..d].copy_from_slice(v);
    Ok(p)
}

pub fn build_cone(cc: &ConeConfig, d: usize) -> Result<Cone, nonlocal_lab::Error> {
    match (&cc.axis, cc.aperture) {
        (None, None) => Cone::full(d),
        (Some(axis), Some(aperture)) => {
            let axis = to_point("cone.axis", axis, d)
                .map_err(nonlocal_lab::Error::InvalidArgument)?;
            Cone::cap(d, axis, aperture)
        }
        _ => Err(nonlocal_lab::Error::InvalidArgument(
            "cone needs axis and aperture together, or neither for the full sphere".into(),
        )),
    }
}

pub fn build_kernel(kc: &KernelConfig) -> Result<Kernel, nonlocal_lab::Error> {
    use nonlocal_lab::Error::InvalidArgument;
    let missing = |key: &str| InvalidArgument(format!("kernel.kind needs kernel.{key}"));
    let mut k = match kc.kind {
        KernelKind::Fractional => {
            let s = kc.s.ok_or_else(|| missing("s"))?;
            Kernel::fractional(kc.d, kc.p, s)?
        }
        KernelKind::Indicator => Kernel::indicator(kc.d, kc.p)?,
        KernelKind::Borderline => Kernel::borderline(kc.d, kc.p)?,
        KernelKind::Log => Kernel::log(kc.d, kc.p)?,
        KernelKind::Power => {
            let e = kc.exponent.ok_or_else(|| missing("exponent"))?;
            Kernel::power(kc.d, kc.p, e)?
        }
        KernelKind::Custom => {
            let radii = kc.radii.clone().ok_or_else(|| missing("radii"))?;
            let values = kc.values.clone().ok_or_else(|| missing("values"))?;
            Kernel::custom_radial(kc.d, kc.p, radii, values)?
        }
    };
    if let Some(r) = kc.support {
        k = k.with_support(r)?;
    }
    if let Some(cc) = &kc.cone {
        k = Kernel::cone_restricted(k, build_cone(cc, kc.d)?)?;
    }
    Ok(k)
}

pub fn build_domain(dc: &DomainConfig) -> Result<Domain, nonlocal_lab::Error> {
    use nonlocal_lab::Error::InvalidArgument;
    match dc.kind {
        DomainKind::Box => {
            let lo = dc
                .lo
                .as_ref()
                .ok_or_else(|| InvalidArgument("a box domain needs domain.lo".into()))?;
            let hi = dc
                .hi
                .as_ref()
                .ok_or_else(|| InvalidArgument("a box domain needs domain.hi".into()))?;
            let lo = to_point("domain.lo", lo, dc.d).map_err(InvalidArgument)?;
            let hi = to_point("domain.hi", hi, dc.d).map_err(InvalidArgument)?;
            Domain::make_box(dc.d, lo, hi)
        }
        DomainKind::Ball => {
            let center = dc
                .center
                .as_ref()
                .ok_or_else(|| InvalidArgument("a ball domain needs domain.center".into()))?;
            let radius = dc
                .radius
                .ok_or_else(|| InvalidArgument("a ball domain needs domain.radius".into()))?;
            let center = to_point("domain.center", center, dc.d).map_err(InvalidArgument)?;
            Domain::ball(dc.d, center, radius)
        }
    }
}

pub fn build_grid(domain: Domain, gc: &GridConfig) -> Result<Arc<Grid>, nonlocal_lab::Error> {
    let grid = match (&gc.n, gc.h) {
        (Some(n), None) => Grid::by_n_per_axis(domain, n)?,
        (None, Some(h)) => Grid::by_h(domain, h)?,
        _ => {
            return Err(nonlocal_lab::Error::InvalidArgument(
                "grid needs exactly one of n or h".into(),
            ))
        }
    };
    Ok(Arc::new(grid))
}

/// Build the field a config describes on the given grid.  The random kinds
/// draw from a counter RNG seeded by `field.seed` when set and by the run
/// seed otherwise, so reruns reproduce bit for bit.
pub fn build_field(
    fc: &FieldConfig,
    grid: &Arc<Grid>,
    run_seed: u64,
) -> Result<VectorField, nonlocal_lab::Error> {
    use nonlocal_lab::Error::InvalidArgument;
    let d = grid.d;
    let pt = |what: &str, v: &Option<Vec<f64>>| -> Result<Point, nonlocal_lab::Error> {
        let v = v
            .as_ref()
            .ok_or_else(|| InvalidArgument(format!("field.kind needs field.{what}")))?;
        to_point(&format!("field.{what}"), v, d).map_err(InvalidArgument)
    };
    let seed = fc.seed.unwrap_or(run_seed);
    let expr = match fc.kind {
        FieldKind::Zero => FieldExpr::Zero,
        FieldKind::Constant => FieldExpr::Constant(pt("value", &fc.value)?),
        FieldKind::Identity => FieldExpr::Identity,
        FieldKind::Linear => {
            let rows = fc
                .matrix
                .as_ref()
                .ok_or_else(|| InvalidArgument("field.kind needs field.matrix".into()))?;
            if rows.len() != d {
                return Err(InvalidArgument(format!(
                    "field.matrix has {} rows, expected {d}",
                    rows.len()
                )));
            }
            let mut matrix = [[0.0f64; 3]; 3];
            for (i, row) in rows.iter().enumerate() {
                matrix[i] = to_point(&format!("field.matrix row {i}"), row, d)
                    .map_err(InvalidArgument)?;
            }
            let offset = match &fc.offset {
                Some(_) => pt("offset", &fc.offset)?,
                None => [0.0; 3],
            };
            FieldExpr::Linear { matrix, offset }
        }
        FieldKind::Rigid => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let motion = RigidMotion::random(d, &mut rng)?;
            return Ok(rigid_motion_field(grid, &motion));
        }
        FieldKind::Bump => FieldExpr::Bump {
            center: pt("center", &fc.center)?,
            radius: fc
                .radius
                .ok_or_else(|| InvalidArgument("field.kind needs field.radius".into()))?,
            amplitude: pt("amplitude", &fc.amplitude)?,
        },
        FieldKind::Oscillation => FieldExpr::Oscillation {
            center: pt("center", &fc.center)?,
            radius: fc
                .radius
                .ok_or_else(|| InvalidArgument("field.kind needs field.radius".into()))?,
            amplitude: pt("amplitude", &fc.amplitude)?,
            frequency: pt("frequency", &fc.frequency)?,
        },
        FieldKind::Noise => {
            use rand::Rng;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut values = Vec::with_capacity(grid.len() * d);
            for _ in 0..grid.len() {
                for _ in 0..d {
                    values.push(rng.gen_range(-1.0..1.0));
                }
            }
            return Ok(VectorField { grid: Arc::clone(grid), values });
        }
        FieldKind::Csv => {
            let path = fc
                .path
                .as_ref()
                .ok_or_else(|| InvalidArgument("field.kind = \"csv\" needs field.path".into()))?;
            return VectorField::read_csv(grid, path);
        }
    };
    Ok(sample_field(grid, &expr))
}
