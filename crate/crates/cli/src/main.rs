//! `nlab`: run one experiment described by a TOML config and leave a
//! machine-readable trace behind.
//!
//! Every subcommand reads `--config`, builds the objects it needs through
//! the library, and writes `report.json` plus CSV tables into the output
//! directory.  The report splits into `meta` (timestamps, versions, paths)
//! and `payload` (the measured numbers), so hashing the payload of two runs
//! of the same config gives the same answer regardless of wall clock or
//! thread count.  Orchestration here is single threaded on purpose; the
//! parallelism lives inside the library kernels.
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 a run whose
//! measured data violated a modeling hypothesis, 3 numerical degeneracy
//! (rank-deficient systems, grids too coarse for the requested scale).

mod config;

use std::fs;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use nonlocal_lab::analysis::{boundary_mass_check, compactness_probe, kernel_sequence_experiment, poincare_constant, CompactnessReport};
use nonlocal_lab::fields::{make_sequence, SubspaceSpec, VectorField};
use nonlocal_lab::geometry::{Cone, Grid};
use nonlocal_lab::kernels::{
    check_cone_condition_with, check_mass_ratio_limit, default_delta_sequence, KernelEval,
};
use nonlocal_lab::nonlocal::{cone_matrix, mollify, seminorm, smoothing_gap};
use nonlocal_lab::numerics::fmt_g17;
use nonlocal_lab::Error;

use config::{CommandKind, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nlab", version, about = "Experiment driver for the nonlocal seminorm laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment description in TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to output.dir in the config, then "out".
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the library; defaults to the machine.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides params.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a kernel against the small-ball mass condition.
    KernelCheck(Common),
    /// Evaluate the projected-difference seminorm of one field.
    Seminorm(Common),
    /// Apply the cone matrix mollifier and measure smoothing gaps.
    Mollify(Common),
    /// Estimate the constant of the seminorm lower bound on the rigid
    /// complement.
    Poincare(Common),
    /// Check the near-boundary mass bound at the requested radii.
    Boundary(Common),
    /// Probe a sequence of fields for concentration and oscillation.
    Compactness(Common),
    /// Sweep a kernel approximation family along a sequence of fields.
    Sequence(Common),
}

impl Command {
    fn parts(&self) -> (CommandKind, &Common) {
        match self {
            Command::KernelCheck(c) => (CommandKind::KernelCheck, c),
            Command::Seminorm(c) => (CommandKind::Seminorm, c),
            Command::Mollify(c) => (CommandKind::Mollify, c),
            Command::Poincare(c) => (CommandKind::Poincare, c),
            Command::Boundary(c) => (CommandKind::Boundary, c),
            Command::Compactness(c) => (CommandKind::Compactness, c),
            Command::Sequence(c) => (CommandKind::Sequence, c),
        }
    }
}

enum RunError {
    /// Bad invocation or config; the user fixes it and reruns.
    Usage(String),
    /// The library refused or failed mid-run.
    Lib(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> RunError {
        RunError::Lib(e)
    }
}

fn exit_code(e: &RunError) -> i32 {
    match e {
        RunError::Usage(_) => 1,
        RunError::Lib(err) => match err {
            Error::HypothesisViolated(_) => 2,
            Error::Singularity
            | Error::DegenerateKernel(_)
            | Error::RankDeficient(_)
            | Error::Resolution(_)
            | Error::Degenerate(_) => 3,
            _ => 1,
        },
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let (kind, common) = cli.cmd.parts();
    match execute(kind, common) {
        Ok(()) => {}
        Err(e) => {
            match &e {
                RunError::Usage(msg) => eprintln!("nlab: {msg}"),
                RunError::Lib(err) => eprintln!("nlab: {err}"),
            }
            std::process::exit(exit_code(&e));
        }
    }
}

fn execute(kind: CommandKind, common: &Common) -> Result<(), RunError> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let text = fs::read_to_string(&common.config)
        .map_err(|e| RunError::Usage(format!("cannot read config {:?}: {e}", common.config)))?;
    let cfg = config::parse(&text).map_err(RunError::Usage)?;
    config::validate(&cfg, kind).map_err(RunError::Usage)?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| RunError::Usage(format!("cannot create output directory {out_dir:?}: {e}")))?;
    let seed = common.seed.unwrap_or(cfg.params.seed);

    let started = unix_seconds();
    let t0 = Instant::now();
    let (payload, mut summary) = run_command(kind, &cfg, &out_dir, seed)?;
    let report = json!({
        "meta": {
            "command": kind.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config": common.config.display().to_string(),
            "out_dir": out_dir.display().to_string(),
            "seed": seed,
            "threads": rayon::current_num_threads(),
            "started_unix_s": started,
            "duration_s": t0.elapsed().as_secs_f64(),
        },
        "payload": payload,
    });
    let report_path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| RunError::Usage(format!("cannot serialize the report: {e}")))?;
    text.push('\n');
    fs::write(&report_path, text).map_err(|e| RunError::Lib(e.into()))?;
    // Echo the parsed config next to the report; rerunning it reproduces the
    // payload bit for bit (parsing and serializing are inverse on configs).
    let recipe = config::to_toml_string(&cfg).map_err(RunError::Usage)?;
    fs::write(out_dir.join("config.toml"), recipe).map_err(|e| RunError::Lib(e.into()))?;

    println!("nlab {}", kind.name());
    summary.push(("report", report_path.display().to_string()));
    for (key, value) in summary {
        println!("  {key:<10} {value}");
    }
    Ok(())
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

type Summary = Vec<(&'static str, String)>;

fn run_command(
    kind: CommandKind,
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
) -> Result<(Value, Summary), RunError> {
    match kind {
        CommandKind::KernelCheck => run_kernel_check(cfg, out),
        CommandKind::Seminorm => run_seminorm(cfg, seed),
        CommandKind::Mollify => run_mollify(cfg, out, seed),
        CommandKind::Poincare => run_poincare(cfg),
        CommandKind::Boundary => run_boundary(cfg, out, seed),
        CommandKind::Compactness => run_compactness(cfg, out, seed),
        CommandKind::Sequence => run_sequence(cfg, out, seed),
    }
}

/// The section is known to be present; `validate` ran before any runner.
fn need<T>(section: &Option<T>) -> &T {
    section.as_ref().expect("section presence checked in validate")
}

fn grid_of(cfg: &ExperimentConfig) -> Result<Arc<Grid>, RunError> {
    let domain = config::build_domain(need(&cfg.domain))?;
    Ok(config::build_grid(domain, need(&cfg.grid))?)
}

fn probe_cone(cfg: &ExperimentConfig, d: usize) -> Result<Cone, RunError> {
    Ok(match &cfg.params.cone {
        Some(cc) => config::build_cone(cc, d)?,
        None => Cone::full(d)?,
    })
}

/// The serde tag of a unit enum variant, for summaries and payloads.
fn tag<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|x| x.as_str().map(str::to_owned))
        .unwrap_or_else(|| "unknown".into())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Value, RunError> {
    serde_json::to_value(v).map_err(|e| RunError::Usage(format!("cannot serialize results: {e}")))
}

fn write_rows_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| RunError::Lib(e.into()))
}

fn write_curve_csv(path: &Path, header: &str, curve: &[(f64, f64)]) -> Result<(), RunError> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|&(x, y)| vec![fmt_g17(x), fmt_g17(y)])
        .collect();
    write_rows_csv(path, header, &rows)
}

fn cone_json(cone: &Cone) -> Value {
    json!({
        "axis": cone.axis[..cone.d].to_vec(),
        "aperture": cone.aperture,
        "full_sphere": cone.full_sphere,
    })
}

// ---------------------------------------------------------------------------
// Runners, one per subcommand
// ---------------------------------------------------------------------------

fn run_kernel_check(cfg: &ExperimentConfig, out: &Path) -> Result<(Value, Summary), RunError> {
    let kc = need(&cfg.kernel);
    let k = config::build_kernel(kc)?;
    let deltas = cfg
        .params
        .deltas
        .clone()
        .unwrap_or_else(default_delta_sequence);
    let rep = check_mass_ratio_limit(&k, &deltas)?;
    let csv = File::create(out.join("mass_ratio.csv")).map_err(Error::from)?;
    rep.write_samples_csv(csv).map_err(Error::from)?;

    let mut payload = json!({ "condition": to_json(&rep)? });
    let mut summary: Summary = vec![
        ("kernel", rep.kernel.clone()),
        ("verdict", tag(&rep.verdict)),
        (
            "slope",
            rep.fitted_log_slope.map_or("none".into(), fmt_g17),
        ),
        ("samples", rep.samples.len().to_string()),
    ];
    if let Some(cc) = &cfg.params.cone {
        let cone = config::build_cone(cc, kc.d)?;
        let cone_rep = check_cone_condition_with(
            &k,
            cfg.params.theta0,
            &cone,
            &deltas,
            cfg.params.theta_grid,
        )?;
        let csv = File::create(out.join("cone_mass_ratio.csv")).map_err(Error::from)?;
        cone_rep.write_samples_csv(csv).map_err(Error::from)?;
        summary.push(("cone", tag(&cone_rep.verdict)));
        payload["cone_condition"] = to_json(&cone_rep)?;
        payload["cone"] = cone_json(&cone);
    }
    Ok((payload, summary))
}

fn run_seminorm(cfg: &ExperimentConfig, seed: u64) -> Result<(Value, Summary), RunError> {
    let k = config::build_kernel(need(&cfg.kernel))?;
    let grid = grid_of(cfg)?;
    let u = config::build_field(need(&cfg.field), &grid, seed)?;
    let res = seminorm(&u, &k)?;
    let payload = json!({
        "seminorm": to_json(&res)?,
        "field_hash": u.content_hash(),
        "nodes": grid.len(),
    });
    let summary = vec![
        ("kernel", k.describe()),
        ("value_p", fmt_g17(res.value_p)),
        ("pairs", res.pair_count.to_string()),
        ("nonfinite", res.nonfinite_pairs.to_string()),
    ];
    Ok((payload, summary))
}

fn run_mollify(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(Value, Summary), RunError> {
    let grid = grid_of(cfg)?;
    let u = config::build_field(need(&cfg.field), &grid, seed)?;
    let p = cfg
        .params
        .p
        .or(cfg.kernel.as_ref().map(|k| k.p))
        .expect("exponent presence checked in validate");
    let cone = probe_cone(cfg, grid.d)?;
    let mm = cone_matrix(&cone)?;
    let deltas = need(&cfg.params.deltas);

    let mut csv_rows = Vec::with_capacity(deltas.len());
    let mut json_rows = Vec::with_capacity(deltas.len());
    for (i, &delta) in deltas.iter().enumerate() {
        let mollified = mollify(&u, &mm, delta)?;
        let gap = smoothing_gap(&u, &mm, delta, p)?;
        let name = format!("mollified_{i:03}.csv");
        mollified.field.write_csv(out.join(&name))?;
        csv_rows.push(vec![
            fmt_g17(delta),
            fmt_g17(gap),
            fmt_g17(mollified.normalization_defect),
        ]);
        json_rows.push(json!({
            "delta": delta,
            "gap": gap,
            "normalization_defect": mollified.normalization_defect,
            "csv": name,
            "field_hash": mollified.field.content_hash(),
        }));
    }
    write_rows_csv(
        &out.join("gaps.csv"),
        "delta,gap,normalization_defect",
        &csv_rows,
    )?;

    let d = grid.d;
    let q: Vec<Vec<f64>> = (0..d).map(|a| mm.q[a][..d].to_vec()).collect();
    let payload = json!({
        "p": p,
        "cone": cone_json(&cone),
        "q": q,
        "lambda_min": mm.lambda_min,
        "rows": json_rows,
    });
    let gap_span = format!(
        "{} .. {}",
        csv_rows.first().map_or("-".into(), |r| r[1].clone()),
        csv_rows.last().map_or("-".into(), |r| r[1].clone()),
    );
    let summary = vec![
        ("field_hash", u.content_hash()),
        ("deltas", deltas.len().to_string()),
        ("gaps", gap_span),
    ];
    Ok((payload, summary))
}

fn run_poincare(cfg: &ExperimentConfig) -> Result<(Value, Summary), RunError> {
    let kc = need(&cfg.kernel);
    let k = config::build_kernel(kc)?;
    let grid = grid_of(cfg)?;
    let spec = SubspaceSpec::rigid_complement(grid.d);
    let est = poincare_constant(&spec, &k, kc.p, &grid)?;
    let payload = json!({
        "estimate": to_json(&est)?,
        "subspace": "rigid_complement",
        "dofs": grid.len() * grid.d,
    });
    let summary = vec![
        ("kernel", k.describe()),
        ("constant", fmt_g17(est.constant)),
        ("method", tag(&est.method)),
        (
            "drift",
            est.refinement_drift.map_or("none".into(), fmt_g17),
        ),
    ];
    Ok((payload, summary))
}

fn run_boundary(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(Value, Summary), RunError> {
    let kc = need(&cfg.kernel);
    let k = config::build_kernel(kc)?;
    let grid = grid_of(cfg)?;
    let u = config::build_field(need(&cfg.field), &grid, seed)?;
    let radii = need(&cfg.params.radii);
    let epsilon0 = cfg.params.epsilon0;

    let mut reports = Vec::with_capacity(radii.len());
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let rep = boundary_mass_check(&u, &k, r, epsilon0, kc.p)?;
        rows.push(vec![
            fmt_g17(rep.r),
            fmt_g17(rep.lhs),
            fmt_g17(rep.interior_term),
            fmt_g17(rep.seminorm_term),
            fmt_g17(rep.collar_term),
            rep.implied_c2.map_or("nan".into(), fmt_g17),
            rep.vanishes_on_deep_interior.to_string(),
        ]);
        reports.push(rep);
    }
    write_rows_csv(
        &out.join("boundary_mass.csv"),
        "r,lhs,interior_term,seminorm_term,collar_term,implied_c2,vanishes_on_deep_interior",
        &rows,
    )?;

    let c2_max = reports
        .iter()
        .filter_map(|r| r.implied_c2)
        .fold(f64::NAN, f64::max);
    let payload = json!({
        "p": kc.p,
        "epsilon0": epsilon0,
        "reports": to_json(&reports)?,
    });
    let summary = vec![
        ("field_hash", u.content_hash()),
        ("radii", radii.len().to_string()),
        (
            "c2_max",
            if c2_max.is_nan() { "none".into() } else { fmt_g17(c2_max) },
        ),
    ];
    Ok((payload, summary))
}

fn sequence_fields(
    cfg: &ExperimentConfig,
    grid: &Arc<Grid>,
    p: f64,
    seed: u64,
) -> Result<(Vec<VectorField>, String), RunError> {
    let sc = need(&cfg.sequence);
    let fields = make_sequence(grid, sc.kind.to_lib(), sc.count, p, seed)?;
    Ok((fields, format!("{}-{}", sc.kind.name(), sc.count)))
}

fn compactness_payload(rep: &CompactnessReport, out: &Path) -> Result<Value, RunError> {
    write_curve_csv(&out.join("gap_curve.csv"), "delta,sup_gap", &rep.gap_curve)?;
    write_curve_csv(
        &out.join("boundary_mass_curve.csv"),
        "tau,sup_mass",
        &rep.boundary_mass_curve,
    )?;
    to_json(rep)
}

fn run_compactness(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
) -> Result<(Value, Summary), RunError> {
    let kc = need(&cfg.kernel);
    let k = config::build_kernel(kc)?;
    let grid = grid_of(cfg)?;
    let (fields, id) = sequence_fields(cfg, &grid, kc.p, seed)?;
    let cone = probe_cone(cfg, grid.d)?;
    let rep = compactness_probe(&fields, &k, cfg.params.theta0, &cone, &id)?;
    let payload = json!({
        "cone": cone_json(&cone),
        "theta0": cfg.params.theta0,
        "report": compactness_payload(&rep, out)?,
    });
    let summary = vec![
        ("sequence", id),
        ("verdict", tag(&rep.verdict)),
        ("sup_norm_p", fmt_g17(rep.sup_seminorm)),
        (
            "envelope",
            rep.envelope_constant.map_or("none".into(), fmt_g17),
        ),
    ];
    Ok((payload, summary))
}

fn run_sequence(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(Value, Summary), RunError> {
    let kc = need(&cfg.kernel);
    let base = config::build_kernel(kc)?;
    let grid = grid_of(cfg)?;
    let (fields, id) = sequence_fields(cfg, &grid, kc.p, seed)?;
    let family = need(&cfg.params.family).to_lib();
    let rep = kernel_sequence_experiment(family, &base, &fields, &id)?;
    let payload = json!({
        "family": tag(&family),
        "report": compactness_payload(&rep, out)?,
    });
    let summary = vec![
        ("sequence", id),
        ("family", tag(&family)),
        ("verdict", tag(&rep.verdict)),
        ("sup_norm_p", fmt_g17(rep.sup_seminorm)),
    ];
    Ok((payload, summary))
}
