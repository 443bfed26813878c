//! Batch command-line entry point: problem files in, report directories out.
//!
//! Every run writes into the `--out` directory a machine-readable
//! `report.json` (with `schema_version` as its first field), one or more CSV
//! side files for the tables, and a `summary.txt` mirroring the stdout
//! summary.  For a fixed configuration, seed, and thread chunking the report
//! bytes are reproducible apart from the `elapsed_ms` timing field.
//!
//! Exit status: 0 when every assertion in the run passed, 1 on assertion
//! failures (witnesses are listed in the report and summary), 2 on malformed
//! input or unrecognized commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    alpha_beta_case, degenerate_direction_probe, derivative_check_sweep, exponent_schedule,
    kernel_bound_sweep, lemma_z_samples, norm_ratio_experiment, schedule_eps_endpoint,
    schedule_eps_midpoint, schur_check, standard_form_family, tree_label, weighted_integral_scan,
    ExponentSchedule, NormRatioRow, SweepReport, WeightedIntegralRow,
};
use crate::error::{Error, Result};
use crate::expr::parse_expr;
use crate::geometry::{build_rule, shrink, PlanarDomain};
use crate::kernels::{enumerate_shapes, operator_terms};
use crate::solver::{
    mollify_form, solve_report_with_resolutions, Form, Mollifier, SolveMode, SolveOptions,
    SolveReport,
};
use crate::transforms::{transform_trace, TransformContext};

/// Version of the report.json layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable supplying the default worker thread count; the
/// `--threads` flag overrides it.
pub const THREADS_ENV: &str = "POMPEIU_THREADS";

#[derive(Parser)]
#[command(
    name = "pompeiu",
    version,
    about = "Integral solution operators for the dbar-equation on products of planar domains"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve dbar u = f from a problem file and report residual statistics.
    Solve(SolveArgs),
    /// Sample kernel value/derivative envelopes for bound violations.
    VerifyKernels(VerifyKernelsArgs),
    /// Scan the weighted boundary-distance integral against its constant.
    CheckLemma(CheckLemmaArgs),
    /// Check the Schur weight inequalities and estimate the operator norm.
    Schur(SchurArgs),
    /// Build and validate an exponent schedule for grouped compositions.
    Schedule(ScheduleArgs),
    /// Solution-to-data norm ratios over the standard manufactured family.
    NormSweep(NormSweepArgs),
    /// Mollifier mass, moments, and convergence demonstration.
    MollifyDemo(MollifyDemoArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Problem description (JSON): domains, data, optional points.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for report.json, points.csv, summary.txt.
    #[arg(long)]
    out: PathBuf,
    /// Override every quadrature resolution in the problem file.
    #[arg(long)]
    resolution: Option<usize>,
    /// tensor: product quadrature; mc: stratified Monte Carlo.
    #[arg(long, default_value = "tensor", value_parser = ["tensor", "mc"])]
    mode: String,
    /// Monte Carlo samples per kernel term.
    #[arg(long, default_value_t = 200_000)]
    samples: u64,
    /// RNG seed (Monte Carlo mode).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Residual acceptance threshold; defaults to 0.05 in tensor mode and
    /// to a 0.1 floor plus three standard errors per point in mc mode.
    #[arg(long)]
    tol: Option<f64>,
    /// Also write trace.csv enumerating every quadrature tuple behind the
    /// first evaluation point (tensor mode; keep resolutions small).
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct VerifyKernelsArgs {
    /// Domain description (JSON); unit disk when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of product factors; every tree shape on up to this many
    /// variables is swept.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Envelope samples per tree shape.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CheckLemmaArgs {
    /// Domain description (JSON); unit disk when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Quadrature resolution for the weighted integrals.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Number of evaluation points z (interior spread plus near-boundary).
    #[arg(long, default_value_t = 20)]
    z_count: usize,
    /// Sanity cap on numeric/constant ratios (a domain-size scale, not a
    /// sharp constant).
    #[arg(long, default_value_t = 50.0)]
    max_ratio: f64,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SchurArgs {
    /// Domain description (JSON); unit disk when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Kernel exponent on |lambda - zeta|.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Kernel exponent on the boundary distance.
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Lebesgue exponent (1 < p <= 2, with p*beta < 1 and alpha + p*beta < 2).
    #[arg(long, default_value_t = 1.5)]
    p: f64,
    /// Mesh resolution.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of product factors.
    #[arg(long)]
    n: usize,
    /// Comma-separated group sizes, e.g. 1,2 (their sum must stay below n).
    #[arg(long)]
    groups: String,
    /// Base exponent; defaults to the admissible right endpoint, and the
    /// interval midpoint is validated alongside whenever this is omitted.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct NormSweepArgs {
    /// Domain description (JSON) for every factor; unit disk when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Quadrature resolution for the solves.
    #[arg(long, default_value_t = 48)]
    resolution: usize,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MollifyDemoArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Quadrature resolution for the residual comparison solves.
    #[arg(long, default_value_t = 24)]
    resolution: usize,
    /// Worker threads (default: POMPEIU_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Input files.

/// One factor domain.  `shape` is "disk" (with optional `center`, `radius`),
/// "rectangle" (`vertices` = two opposite corners), "polygon" (`vertices` in
/// order), or "l_shape".  A per-factor `resolution` overrides the problem
/// default.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSpec {
    shape: String,
    #[serde(default)]
    vertices: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    center: Option<[f64; 2]>,
    #[serde(default)]
    radius: Option<f64>,
    #[serde(default)]
    resolution: Option<usize>,
}

impl DomainSpec {
    fn build(&self) -> Result<PlanarDomain> {
        let domain = match self.shape.as_str() {
            "disk" => {
                let c = self.center.unwrap_or([0.0, 0.0]);
                PlanarDomain::disk(Complex64::new(c[0], c[1]), self.radius.unwrap_or(1.0))
            }
            "rectangle" => {
                let v = self.vertices.as_deref().unwrap_or_default();
                if v.len() != 2 {
                    return Err(Error::Config(
                        "rectangle needs `vertices` = two opposite corners [[x0,y0],[x1,y1]]"
                            .into(),
                    ));
                }
                PlanarDomain::rectangle(
                    v[0][0].min(v[1][0]),
                    v[0][1].min(v[1][1]),
                    v[0][0].max(v[1][0]),
                    v[0][1].max(v[1][1]),
                )
            }
            "polygon" => {
                let v = self.vertices.as_deref().unwrap_or_default();
                if v.len() < 3 {
                    return Err(Error::Config(
                        "polygon needs `vertices` = at least three [re, im] pairs".into(),
                    ));
                }
                PlanarDomain::polygon(v.iter().map(|p| Complex64::new(p[0], p[1])).collect())
            }
            "l_shape" => PlanarDomain::l_shape(),
            other => {
                return Err(Error::Config(format!(
                    "unknown shape `{other}` (expected disk, rectangle, polygon, or l_shape)"
                )));
            }
        };
        domain.validate()?;
        Ok(domain)
    }

    fn label(&self) -> String {
        match self.shape.as_str() {
            "polygon" => format!(
                "polygon({})",
                self.vertices.as_deref().map_or(0, <[_]>::len)
            ),
            s => s.to_string(),
        }
    }
}

/// A solve problem: the factor domains, the data (either a scalar
/// `potential` whose derivative family is taken, or explicit `components`,
/// one expression per variable), and optional evaluation `points`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSpec {
    domains: Vec<DomainSpec>,
    #[serde(default)]
    resolution: Option<usize>,
    #[serde(default)]
    potential: Option<String>,
    #[serde(default)]
    components: Option<Vec<String>>,
    #[serde(default)]
    points: Option<Vec<Vec<[f64; 2]>>>,
    /// Boundary clearance used when generating default evaluation points.
    #[serde(default)]
    min_clearance: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Domain for the analysis commands: a `DomainSpec` file, or the unit disk
/// when no input is given.
fn load_domain(input: &Option<PathBuf>) -> Result<(PlanarDomain, String)> {
    match input {
        Some(path) => {
            let spec: DomainSpec = read_json(path)?;
            Ok((spec.build()?, spec.label()))
        }
        None => Ok((PlanarDomain::unit_disk(), "disk".into())),
    }
}

// ---------------------------------------------------------------------------
// Entry points.

/// Parse the process arguments and run; returns the exit status.  Flag and
/// subcommand errors print usage and exit with status 2 (clap's default).
pub fn run_cli() -> i32 {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli.command) {
        Ok(outcome) if outcome.failures.is_empty() => 0,
        Ok(_) => 1,
        Err(e) => {
            eprintln!("pompeiu: {e}");
            2
        }
    }
}

struct Outcome {
    failures: Vec<String>,
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Solve(a) => cmd_solve(a),
        Command::VerifyKernels(a) => cmd_verify_kernels(a),
        Command::CheckLemma(a) => cmd_check_lemma(a),
        Command::Schur(a) => cmd_schur(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::NormSweep(a) => cmd_norm_sweep(a),
        Command::MollifyDemo(a) => cmd_mollify_demo(a),
    }
}

/// Install the global worker pool: `--threads`, else POMPEIU_THREADS, else
/// one thread per core.  A second installation attempt (tests, repeated
/// in-process runs) keeps the existing pool.
fn init_threads(flag: Option<usize>) -> Result<usize> {
    let from_env = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))
        })
        .transpose()?;
    let chosen = flag.or(from_env);
    if let Some(t) = chosen {
        if t == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    Ok(chosen.unwrap_or_else(rayon::current_num_threads))
}

// ---------------------------------------------------------------------------
// Report plumbing.

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: serde_json::Value,
    results: &'a T,
    failures: &'a [String],
    status: &'a str,
}

fn write_outputs<T: Serialize>(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    results: &T,
    failures: &[String],
    csvs: &[(&str, String)],
    summary: &str,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let report = Report {
        schema_version: SCHEMA_VERSION,
        command,
        config,
        results,
        failures,
        status: if failures.is_empty() { "pass" } else { "fail" },
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;
    for (name, body) in csvs {
        fs::write(out.join(name), body)?;
    }
    fs::write(out.join("summary.txt"), summary)?;
    print!("{summary}");
    Ok(())
}

fn status_line(failures: &[String]) -> String {
    if failures.is_empty() {
        "status: PASS\n".into()
    } else {
        let mut s = format!("status: FAIL ({} finding(s))\n", failures.len());
        for f in failures {
            let _ = writeln!(s, "  - {f}");
        }
        s
    }
}

/// The shared CSV table shape: alpha, beta, p, case, numeric, bound, ratio
/// (blank where a column does not apply; ratio = numeric / bound).
const TABLE_HEADER: &str = "alpha,beta,p,case,numeric,bound,ratio\n";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// solve.

#[derive(Serialize)]
struct SolveResults {
    domains: Vec<String>,
    resolutions: Vec<usize>,
    tolerance: f64,
    report: SolveReport,
}

fn cmd_solve(a: &SolveArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let spec: ProblemSpec = read_json(&a.input)?;
    if spec.domains.is_empty() {
        return Err(Error::Config("problem has no domains".into()));
    }
    let domains: Vec<PlanarDomain> = spec
        .domains
        .iter()
        .map(DomainSpec::build)
        .collect::<Result<_>>()?;
    let labels: Vec<String> = spec.domains.iter().map(DomainSpec::label).collect();
    let n = domains.len();

    let base_res = a.resolution.or(spec.resolution).unwrap_or(64);
    let resolutions: Vec<usize> = spec
        .domains
        .iter()
        .map(|d| match a.resolution {
            Some(r) => r,
            None => d.resolution.unwrap_or(base_res),
        })
        .collect();

    let form = match (&spec.potential, &spec.components) {
        (Some(u), None) => Form::from_potential(&parse_expr(u)?, n)?,
        (None, Some(cs)) => {
            if cs.len() != n {
                return Err(Error::Config(format!(
                    "{} components for {n} domains",
                    cs.len()
                )));
            }
            Form::new(cs.iter().map(|s| parse_expr(s)).collect::<Result<_>>()?)?
        }
        _ => {
            return Err(Error::Config(
                "provide exactly one of `potential` or `components`".into(),
            ));
        }
    };

    let points: Vec<Vec<Complex64>> = match &spec.points {
        Some(ps) => ps
            .iter()
            .map(|p| p.iter().map(|c| Complex64::new(c[0], c[1])).collect())
            .collect(),
        None => {
            let per_axis = if n == 1 { 5 } else { 3 };
            let per_factor: Vec<Vec<Complex64>> = domains
                .iter()
                .map(|d| {
                    let clearance = spec.min_clearance.unwrap_or(0.125 * d.diameter());
                    d.interior_samples(per_axis, clearance)
                })
                .collect();
            if per_factor.iter().any(Vec::is_empty) {
                return Err(Error::Config(
                    "no default evaluation points clear the boundary margin; give `points`"
                        .into(),
                ));
            }
            crate::geometry::product_samples(&per_factor)
        }
    };

    let mode = if a.mode == "mc" {
        SolveMode::MonteCarlo
    } else {
        SolveMode::Tensor
    };
    let opts = SolveOptions {
        resolution: base_res,
        mode,
        samples: a.samples,
        seed: a.seed,
    };
    let report = solve_report_with_resolutions(
        &domains,
        &form,
        &points,
        &opts,
        &[2.0, f64::INFINITY],
        Some(&resolutions),
    )?;

    let tol = a.tol.unwrap_or(match mode {
        SolveMode::Tensor => 0.05,
        SolveMode::MonteCarlo => 0.1,
    });
    let mut failures = Vec::new();
    for pt in &report.points {
        if pt.flagged {
            continue;
        }
        for (j, &r) in pt.residuals.iter().enumerate() {
            let allowed = match mode {
                SolveMode::Tensor => tol,
                SolveMode::MonteCarlo => tol + 3.0 * pt.residual_std_errors[j],
            };
            if !(r <= allowed) {
                failures.push(format!(
                    "residual component {} = {r:.3e} exceeds {allowed:.3e} at z = {:?}",
                    j + 1,
                    pt.z
                ));
            }
        }
    }
    if report.residual_sup.is_none() {
        failures.push("every evaluation point was flagged as too close to the boundary".into());
    }

    // points.csv: coordinates, solution, residual per component.
    let mut csv = String::new();
    for j in 1..=n {
        let _ = write!(csv, "z{j}_re,z{j}_im,");
    }
    csv.push_str("u_re,u_im,u_std_error");
    for j in 1..=n {
        let _ = write!(csv, ",res_{j},res_{j}_std_error");
    }
    csv.push_str(",flagged\n");
    for pt in &report.points {
        for zc in &pt.z {
            let _ = write!(csv, "{},{},", zc[0], zc[1]);
        }
        let _ = write!(csv, "{},{},{}", pt.u[0], pt.u[1], fmt_opt(pt.u_std_error));
        for j in 0..n {
            let _ = write!(
                csv,
                ",{},{}",
                pt.residuals.get(j).map(|v| v.to_string()).unwrap_or_default(),
                pt.residual_std_errors
                    .get(j)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            );
        }
        let _ = writeln!(csv, ",{}", pt.flagged);
    }
    let mut csvs: Vec<(&str, String)> = vec![("points.csv", csv)];
    if a.trace {
        if mode != SolveMode::Tensor {
            return Err(Error::Config("--trace requires tensor mode".into()));
        }
        csvs.push((
            "trace.csv",
            build_trace_csv(&domains, &resolutions, &form, &points[0])?,
        ));
    }

    let mut summary = format!(
        "pompeiu solve\n  domains: {} (n = {n})\n  mode: {}, resolutions {:?}, threads {threads}\n",
        labels.join(" x "),
        a.mode,
        resolutions
    );
    if mode == SolveMode::MonteCarlo {
        let _ = writeln!(summary, "  samples: {} per term, seed {}", a.samples, a.seed);
    }
    let _ = writeln!(
        summary,
        "  points: {} evaluated, {} flagged near the boundary",
        report.points.len(),
        report.flagged_points
    );
    let _ = writeln!(
        summary,
        "  residual sup: {} (tolerance {tol:.3e})",
        report
            .residual_sup
            .map(|v| format!("{v:.3e}"))
            .unwrap_or_else(|| "n/a".into())
    );
    for ((label, un), (_, fn_)) in report.u_norms.iter().zip(&report.f_norms) {
        let _ = writeln!(summary, "  |u|_{label} = {un:.6e}, |f|_{label} = {fn_:.6e}");
    }
    if let Some(d) = report.closedness_defect {
        let _ = writeln!(
            summary,
            "  closedness defect: {d:.3e}{}",
            if report.closedness_warning {
                "  ** warning: data is not dbar-closed **"
            } else {
                ""
            }
        );
    }
    summary.push_str(&status_line(&failures));

    let results = SolveResults {
        domains: labels,
        resolutions: resolutions.clone(),
        tolerance: tol,
        report,
    };
    let config = serde_json::json!({
        "input": a.input.display().to_string(),
        "mode": a.mode,
        "resolution": base_res,
        "samples": a.samples,
        "seed": a.seed,
        "threads": threads,
        "tol": tol,
        "trace": a.trace,
    });
    write_outputs(&a.out, "solve", config, &results, &failures, &csvs, &summary)?;
    Ok(Outcome { failures })
}

/// Enumerate every (tree, quadrature tuple) contribution at one point.  The
/// per-term sum of `contrib` columns reproduces the solver value exactly.
fn build_trace_csv(
    domains: &[PlanarDomain],
    resolutions: &[usize],
    form: &Form,
    z: &[Complex64],
) -> Result<String> {
    let n = domains.len();
    let ctx = TransformContext::with_resolutions(domains.to_vec(), resolutions.to_vec())?;
    let mut csv = String::from("term,shape");
    for j in 1..=n {
        let _ = write!(csv, ",w{j}_re,w{j}_im");
    }
    csv.push_str(",kernel_re,kernel_im,data_re,data_im,weight,contrib_re,contrib_im\n");
    for (ti, tree) in operator_terms(n).iter().enumerate() {
        let vars = tree.vars();
        let scale = std::f64::consts::PI.powi(vars.len() as i32);
        let rows = transform_trace(&ctx, tree, form.tensor(tree.root)?, z, 200_000)?;
        let label = tree_label(tree);
        for row in rows {
            let _ = write!(csv, "{ti},{label}");
            let mut slot = 0;
            for j in 0..n {
                if slot < vars.len() && vars[slot] == j {
                    let _ = write!(csv, ",{},{}", row.nodes[slot].re, row.nodes[slot].im);
                    slot += 1;
                } else {
                    csv.push_str(",,");
                }
            }
            let contrib = row.kernel * row.data * row.weight / scale;
            let _ = writeln!(
                csv,
                ",{},{},{},{},{},{},{}",
                row.kernel.re,
                row.kernel.im,
                row.data.re,
                row.data.im,
                row.weight,
                contrib.re,
                contrib.im
            );
        }
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// verify-kernels.

#[derive(Serialize)]
struct ShapeResult {
    sweep: SweepReport,
    /// Max relative disagreement of the closed-form derivative channel
    /// against central finite differences.
    derivative_fd_max: f64,
    /// Min envelope margin along a degenerate approach ray.
    probe_min_margin: f64,
}

fn cmd_verify_kernels(a: &VerifyKernelsArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let (domain, label) = load_domain(&a.input)?;
    if a.n < 2 {
        return Err(Error::Config("need at least two factors (n >= 2)".into()));
    }
    let sweeps = kernel_bound_sweep(&domain, a.n, a.samples, a.seed)?;

    let mut shapes = Vec::new();
    let mut sweep_iter = sweeps.into_iter();
    for k in 1..a.n {
        let factors = vec![domain.clone(); k + 1];
        for tree in enumerate_shapes(k) {
            let sweep = sweep_iter
                .next()
                .ok_or_else(|| Error::Config("sweep/shape count mismatch".into()))?;
            let derivative_fd_max = derivative_check_sweep(&factors, &tree, 2000, a.seed)?;
            let probe_min_margin = degenerate_direction_probe(&factors, &tree, a.seed)?;
            shapes.push(ShapeResult {
                sweep,
                derivative_fd_max,
                probe_min_margin,
            });
        }
    }

    let mut failures = Vec::new();
    for s in &shapes {
        if s.sweep.violations > 0 {
            failures.push(format!(
                "{}: {} envelope violation(s), worst margin {:.3e}, witness {:?}",
                s.sweep.shape,
                s.sweep.violations,
                s.sweep.min_value_margin.min(s.sweep.min_deriv_margin),
                s.sweep.worst_witness
            ));
        }
        if !(s.derivative_fd_max <= 1e-5) {
            failures.push(format!(
                "{}: derivative channel disagrees with finite differences by {:.3e}",
                s.sweep.shape, s.derivative_fd_max
            ));
        }
        if s.probe_min_margin < -1e-12 {
            failures.push(format!(
                "{}: degenerate-ray envelope margin {:.3e}",
                s.sweep.shape, s.probe_min_margin
            ));
        }
    }

    let mut csv = String::from(
        "shape,order,samples,violations,min_value_margin,min_deriv_margin,derivative_fd_max,probe_min_margin\n",
    );
    for s in &shapes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.sweep.shape,
            s.sweep.order,
            s.sweep.samples,
            s.sweep.violations,
            s.sweep.min_value_margin,
            s.sweep.min_deriv_margin,
            s.derivative_fd_max,
            s.probe_min_margin
        );
    }

    let mut summary = format!(
        "pompeiu verify-kernels\n  domain: {label}, factors up to n = {}, {} samples/shape, seed {}, threads {threads}\n  shapes: {}\n",
        a.n,
        a.samples,
        a.seed,
        shapes.len()
    );
    let worst_margin = shapes
        .iter()
        .map(|s| s.sweep.min_value_margin.min(s.sweep.min_deriv_margin))
        .fold(f64::INFINITY, f64::min);
    let worst_fd = shapes
        .iter()
        .map(|s| s.derivative_fd_max)
        .fold(0.0f64, f64::max);
    let _ = writeln!(
        summary,
        "  envelope margin min: {worst_margin:.3e} (violations fail below -1e-12)"
    );
    let _ = writeln!(summary, "  derivative-vs-FD max: {worst_fd:.3e}");
    summary.push_str(&status_line(&failures));

    let config = serde_json::json!({
        "input": a.input.as_ref().map(|p| p.display().to_string()),
        "n": a.n,
        "samples": a.samples,
        "seed": a.seed,
        "threads": threads,
    });
    write_outputs(
        &a.out,
        "verify-kernels",
        config,
        &shapes,
        &failures,
        &[("sweeps.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

// ---------------------------------------------------------------------------
// check-lemma.

#[derive(Serialize)]
struct LemmaResults {
    z_samples: Vec<(f64, f64)>,
    rows: Vec<WeightedIntegralRow>,
    sup_ratio: f64,
}

fn cmd_check_lemma(a: &CheckLemmaArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let (domain, label) = load_domain(&a.input)?;
    // 5 x 5 exponent grid covering all three case formulas while staying
    // inside the regime alpha + beta < 2.
    let alphas = [0.3, 0.7, 1.0, 1.3, 1.55];
    let betas = [0.05, 0.15, 0.25, 0.35, 0.44];
    let z_samples = lemma_z_samples(&domain, a.z_count);
    let (rows, sup_ratio) =
        weighted_integral_scan(&domain, &alphas, &betas, &z_samples, a.resolution)?;

    let mut failures = Vec::new();
    for r in &rows {
        if !r.numeric.is_finite() {
            failures.push(format!(
                "integral diverged numerically at alpha={}, beta={}, z=({}, {})",
                r.alpha, r.beta, r.z.0, r.z.1
            ));
        }
    }
    if !(sup_ratio <= a.max_ratio) {
        let worst = rows
            .iter()
            .max_by(|x, y| x.ratio.total_cmp(&y.ratio))
            .expect("nonempty scan");
        failures.push(format!(
            "sup ratio {sup_ratio:.4} exceeds the cap {}; worst at alpha={}, beta={}, z=({}, {})",
            a.max_ratio, worst.alpha, worst.beta, worst.z.0, worst.z.1
        ));
    }

    let mut csv = String::from(TABLE_HEADER);
    for r in &rows {
        let case = alpha_beta_case(r.alpha, r.beta)?.case_tag;
        let _ = writeln!(
            csv,
            "{},{},,{case},{},{},{}",
            r.alpha, r.beta, r.numeric, r.bound_constant, r.ratio
        );
    }

    let mut summary = format!(
        "pompeiu check-lemma\n  domain: {label}, resolution {}, threads {threads}\n  grid: {} exponent pairs x {} points = {} rows\n",
        a.resolution,
        alphas.len() * betas.len(),
        z_samples.len(),
        rows.len()
    );
    let _ = writeln!(
        summary,
        "  sup numeric/constant ratio: {sup_ratio:.4} (cap {})",
        a.max_ratio
    );
    summary.push_str(&status_line(&failures));

    let results = LemmaResults {
        z_samples: z_samples.iter().map(|z| (z.re, z.im)).collect(),
        rows,
        sup_ratio,
    };
    let config = serde_json::json!({
        "input": a.input.as_ref().map(|p| p.display().to_string()),
        "resolution": a.resolution,
        "z_count": a.z_count,
        "max_ratio": a.max_ratio,
        "threads": threads,
    });
    write_outputs(
        &a.out,
        "check-lemma",
        config,
        &results,
        &failures,
        &[("lemma.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

// ---------------------------------------------------------------------------
// schur.

fn cmd_schur(a: &SchurArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let (domain, label) = load_domain(&a.input)?;
    let rep = schur_check(&domain, a.alpha, a.beta, a.p, a.resolution)?;

    let mut failures = Vec::new();
    if rep.weight1_min_margin < -1e-12 {
        failures.push(format!(
            "first weight inequality violated: min margin {:.3e}",
            rep.weight1_min_margin
        ));
    }
    if rep.weight2_min_margin < -1e-12 {
        failures.push(format!(
            "second weight inequality violated: min margin {:.3e}",
            rep.weight2_min_margin
        ));
    }
    if !(rep.norm_estimate <= rep.norm_bound) {
        failures.push(format!(
            "power-iteration norm {:.6} exceeds the Schur bound {:.6}",
            rep.norm_estimate, rep.norm_bound
        ));
    }

    let c1 = alpha_beta_case(a.alpha, a.beta)?.constant;
    let c2 = alpha_beta_case(a.alpha, a.p * a.beta)?.constant;
    let mut csv = String::from(TABLE_HEADER);
    // Worst-node integral values, reconstructed from the relative margins.
    let w1 = (1.0 - rep.weight1_min_margin) * rep.c_omega * c1;
    let w2 = (1.0 - rep.weight2_min_margin) * rep.c_omega * c2;
    let _ = writeln!(
        csv,
        "{},{},{},weight1,{},{},{}",
        a.alpha,
        a.beta,
        a.p,
        w1,
        rep.c_omega * c1,
        1.0 - rep.weight1_min_margin
    );
    let _ = writeln!(
        csv,
        "{},{},{},weight2,{},{},{}",
        a.alpha,
        a.beta,
        a.p,
        w2,
        rep.c_omega * c2,
        1.0 - rep.weight2_min_margin
    );
    let _ = writeln!(
        csv,
        "{},{},{},norm,{},{},{}",
        a.alpha,
        a.beta,
        a.p,
        rep.norm_estimate,
        rep.norm_bound,
        rep.norm_estimate / rep.norm_bound
    );

    let mut summary = format!(
        "pompeiu schur\n  domain: {label}, alpha = {}, beta = {}, p = {}, resolution {}, threads {threads}\n",
        a.alpha, a.beta, a.p, a.resolution
    );
    let _ = writeln!(
        summary,
        "  mesh: {} nodes (inequalities), {} nodes (power iteration)",
        rep.nodes, rep.iteration_nodes
    );
    let _ = writeln!(summary, "  calibrated domain constant: {:.6}", rep.c_omega);
    let _ = writeln!(
        summary,
        "  weight margins: {:.3e} (first), {:.3e} (second)",
        rep.weight1_min_margin, rep.weight2_min_margin
    );
    let _ = writeln!(
        summary,
        "  operator norm: {:.6} <= bound {:.6}",
        rep.norm_estimate, rep.norm_bound
    );
    summary.push_str(&status_line(&failures));

    let config = serde_json::json!({
        "input": a.input.as_ref().map(|p| p.display().to_string()),
        "alpha": a.alpha,
        "beta": a.beta,
        "p": a.p,
        "resolution": a.resolution,
        "threads": threads,
    });
    write_outputs(
        &a.out,
        "schur",
        config,
        &rep,
        &failures,
        &[("schur.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

// ---------------------------------------------------------------------------
// schedule.

#[derive(Serialize)]
struct ScheduleResults {
    schedule: ExponentSchedule,
    /// Also validated at the interval midpoint when --eps is omitted.
    midpoint: Option<ExponentSchedule>,
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<Outcome> {
    let groups: Vec<usize> = a
        .groups
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad group size `{s}` in --groups")))
        })
        .collect::<Result<_>>()?;
    let eps = a.eps.unwrap_or_else(|| schedule_eps_endpoint(a.n));

    let mut failures = Vec::new();
    let schedule = exponent_schedule(&groups, a.n, eps)?;
    if let Err(e) = schedule.validate() {
        failures.push(format!("eps = {eps}: {e}"));
    }
    let midpoint = if a.eps.is_none() {
        let m = exponent_schedule(&groups, a.n, schedule_eps_midpoint(a.n))?;
        if let Err(e) = m.validate() {
            failures.push(format!("eps = {}: {e}", m.eps));
        }
        Some(m)
    } else {
        None
    };

    let mut csv = String::from("s,k_s,m_s,eps_s,sum_one,sum_two,sum_three\n");
    for r in &schedule.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.s,
            r.k_s,
            r.m_s,
            r.eps_s,
            fmt_opt(r.sum_one),
            fmt_opt(r.sum_two),
            fmt_opt(r.sum_three)
        );
    }

    let mut summary = format!(
        "pompeiu schedule\n  n = {}, groups {:?}, eps = {eps:.6e}\n",
        a.n, groups
    );
    let _ = writeln!(
        summary,
        "  {:>2} {:>4} {:>14} {:>12} {:>10} {:>10} {:>10}",
        "s", "k_s", "m_s", "eps_s", "sum1", "sum2", "sum3"
    );
    for r in &schedule.rows {
        let _ = writeln!(
            summary,
            "  {:>2} {:>4} {:>14.4} {:>12.6} {:>10} {:>10} {:>10}",
            r.s,
            r.k_s,
            r.m_s,
            r.eps_s,
            r.sum_one.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.sum_two.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.sum_three.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    if midpoint.is_some() {
        let _ = writeln!(
            summary,
            "  midpoint eps = {:.6e} validated alongside",
            schedule_eps_midpoint(a.n)
        );
    }
    summary.push_str(&status_line(&failures));

    let results = ScheduleResults { schedule, midpoint };
    let config = serde_json::json!({
        "n": a.n,
        "groups": a.groups,
        "eps": a.eps,
    });
    write_outputs(
        &a.out,
        "schedule",
        config,
        &results,
        &failures,
        &[("schedule.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

// ---------------------------------------------------------------------------
// norm-sweep.

fn cmd_norm_sweep(a: &NormSweepArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let (domain, label) = load_domain(&a.input)?;
    let family = standard_form_family(2)?;
    let ps = [2.0, 4.0, f64::INFINITY];
    let rows: Vec<NormRatioRow> =
        norm_ratio_experiment(&domain, 2, &ps, &family, a.resolution)?;

    let mut failures = Vec::new();
    let mut max_ratio = 0.0f64;
    for r in &rows {
        if r.skipped {
            continue;
        }
        match r.ratio {
            Some(v) if v.is_finite() => max_ratio = max_ratio.max(v),
            _ => failures.push(format!(
                "member `{}` at p = {} produced a non-finite ratio",
                r.label, r.p
            )),
        }
    }

    let mut csv = String::from(TABLE_HEADER);
    for r in &rows {
        let _ = writeln!(
            csv,
            ",,{},{},{},{},{}",
            r.p,
            r.label,
            r.u_norm,
            r.f_norm,
            fmt_opt(r.ratio)
        );
    }

    let skipped = rows.iter().filter(|r| r.skipped).count();
    let mut summary = format!(
        "pompeiu norm-sweep\n  domain: {label} x {label}, resolution {}, threads {threads}\n  family: {} members, p in {{2, 4, inf-proxy}}, {} zero member(s) skipped\n",
        a.resolution,
        family.len(),
        skipped / ps.len().max(1)
    );
    let _ = writeln!(summary, "  max |u|_p / |f|_p ratio: {max_ratio:.6}");
    summary.push_str(&status_line(&failures));

    let config = serde_json::json!({
        "input": a.input.as_ref().map(|p| p.display().to_string()),
        "resolution": a.resolution,
        "threads": threads,
    });
    write_outputs(
        &a.out,
        "norm-sweep",
        config,
        &rows,
        &failures,
        &[("norms.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

// ---------------------------------------------------------------------------
// mollify-demo.

#[derive(Serialize)]
struct MollifyStep {
    eps: f64,
    l2_error: f64,
    l2_predicted: f64,
    residual_sup: Option<f64>,
}

#[derive(Serialize)]
struct MollifyResults {
    mass: f64,
    first_moment: (f64, f64),
    inner_radius: f64,
    steps: Vec<MollifyStep>,
    smooth_residual_sup: Option<f64>,
}

fn cmd_mollify_demo(a: &MollifyDemoArgs) -> Result<Outcome> {
    let threads = init_threads(a.threads)?;
    let moll = Mollifier::offset();
    let mut failures = Vec::new();

    let mass = moll.mass();
    if !((mass - 1.0).abs() <= 1e-8) {
        failures.push(format!("cutoff mass {mass} deviates from 1 beyond 1e-8"));
    }

    // Inner region at clearance 1/4 of the unit disk: an exact disk.
    let inner = shrink(&PlanarDomain::unit_disk(), 4.0)?
        .exact
        .ok_or_else(|| Error::Config("inner region of a disk should be exact".into()))?;
    let rule = build_rule(&inner, 64, None)?;
    // Analytic area of the 3/4 disk; the quadrature area must agree, so the
    // L2 prediction below genuinely cross-checks the rule.
    let area = 0.5625 * std::f64::consts::PI;

    // Data with potential conj(z1)^2/2: one anti-linear component.
    let form = Form::new(vec![parse_expr("conj(z1)")?, parse_expr("0")?])?;
    let domains = vec![inner.clone(), inner.clone()];
    let opts = SolveOptions {
        resolution: a.resolution,
        ..SolveOptions::default()
    };
    let points: Vec<Vec<Complex64>> = {
        let per = inner.interior_samples(2, 0.125 * inner.diameter());
        crate::geometry::product_samples(&[per.clone(), per])
    };
    let smooth = solve_report_with_resolutions(&domains, &form, &points, &opts, &[2.0], None)?;

    let mut steps = Vec::new();
    let mut prev = f64::INFINITY;
    for &eps in &[0.1, 0.05, 0.025] {
        let fe = mollify_form(&form, eps, 4.0, &moll)?;
        // L2 distance of the first component over the inner region.
        let d = |w: Complex64| {
            let x = [w, Complex64::new(0.0, 0.0)];
            (fe.eval(0, &x) - w.conj()).norm_sqr()
        };
        let l2 = rule.integrate_real(d).sqrt();
        let l2_predicted = eps * moll.first_moment().norm() * area.sqrt();
        if !(l2 < prev) {
            failures.push(format!(
                "mollification error did not decrease: {l2:.6e} at eps = {eps} (previous {prev:.6e})"
            ));
        }
        if (l2 - l2_predicted).abs() > 1e-4 * l2_predicted {
            failures.push(format!(
                "L2 error {l2:.8e} disagrees with the first-moment prediction {l2_predicted:.8e} at eps = {eps}"
            ));
        }
        prev = l2;
        let rep = solve_report_with_resolutions(&domains, &fe, &points, &opts, &[2.0], None)?;
        steps.push(MollifyStep {
            eps,
            l2_error: l2,
            l2_predicted,
            residual_sup: rep.residual_sup,
        });
    }
    // Mollified residuals should sit at the smooth-data level: same solver,
    // same grid, data differing by O(eps).
    if let (Some(floor), Some(last)) = (
        smooth.residual_sup,
        steps.last().and_then(|s| s.residual_sup),
    ) {
        if !(last <= 10.0 * floor + 0.05) {
            failures.push(format!(
                "mollified residual {last:.3e} is far above the smooth-data level {floor:.3e}"
            ));
        }
    }

    let mut csv = String::from("eps,l2_error,l2_predicted,residual_sup\n");
    for s in &steps {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            s.eps,
            s.l2_error,
            s.l2_predicted,
            fmt_opt(s.residual_sup)
        );
    }
    let _ = writeln!(csv, "smooth,,,{}", fmt_opt(smooth.residual_sup));

    let mut summary = format!(
        "pompeiu mollify-demo\n  cutoff: offset bump, center ({}, {}), radius {}, threads {threads}\n",
        moll.center.re, moll.center.im, moll.radius
    );
    let _ = writeln!(summary, "  mass: {mass:.12} (must be 1 within 1e-8)");
    let _ = writeln!(
        summary,
        "  inner region: disk of radius {:.2}, area {area:.6}",
        0.75
    );
    for s in &steps {
        let _ = writeln!(
            summary,
            "  eps = {:<6} |f_eps - f|_L2 = {:.6e} (predicted {:.6e}), residual sup {}",
            s.eps,
            s.l2_error,
            s.l2_predicted,
            s.residual_sup
                .map(|v| format!("{v:.3e}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    let _ = writeln!(
        summary,
        "  smooth-data residual sup: {}",
        smooth
            .residual_sup
            .map(|v| format!("{v:.3e}"))
            .unwrap_or_else(|| "n/a".into())
    );
    summary.push_str(&status_line(&failures));

    let results = MollifyResults {
        mass,
        first_moment: (moll.first_moment().re, moll.first_moment().im),
        inner_radius: 0.75,
        steps,
        smooth_residual_sup: smooth.residual_sup,
    };
    let config = serde_json::json!({
        "resolution": a.resolution,
        "threads": threads,
    });
    write_outputs(
        &a.out,
        "mollify-demo",
        config,
        &results,
        &failures,
        &[("mollify.csv", csv)],
        &summary,
    )?;
    Ok(Outcome { failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_specs_build_and_reject() {
        let disk: DomainSpec = serde_json::from_str(r#"{"shape": "disk", "radius": 2.0}"#).unwrap();
        assert!(disk.build().is_ok());
        let poly: DomainSpec = serde_json::from_str(
            r#"{"shape": "polygon", "vertices": [[0,0],[1,0],[0,1]], "resolution": 32}"#,
        )
        .unwrap();
        assert!(poly.build().is_ok());
        assert_eq!(poly.label(), "polygon(3)");
        let bad: DomainSpec = serde_json::from_str(r#"{"shape": "pentagon"}"#).unwrap();
        assert!(bad.build().is_err());
        let two: DomainSpec =
            serde_json::from_str(r#"{"shape": "polygon", "vertices": [[0,0],[1,0]]}"#).unwrap();
        assert!(two.build().is_err());
        // Unknown fields are parse errors, not silently dropped.
        assert!(serde_json::from_str::<DomainSpec>(r#"{"shape": "disk", "radii": 2}"#).is_err());
    }

    #[test]
    fn problem_requires_exactly_one_data_source() {
        let spec: ProblemSpec = serde_json::from_str(
            r#"{"domains": [{"shape": "disk"}], "potential": "conj(z1)", "components": ["1"]}"#,
        )
        .unwrap();
        assert!(spec.potential.is_some() && spec.components.is_some());
        // Both present is rejected at dispatch; checked via cmd_solve's guard
        // in the integration tests (needs files on disk).
    }

    #[test]
    fn parses_the_documented_command_lines() {
        assert!(Cli::try_parse_from([
            "pompeiu", "schedule", "--n", "4", "--groups", "1,2", "--out", "/tmp/x"
        ])
        .is_ok());
        assert!(Cli::try_parse_from([
            "pompeiu", "solve", "--input", "p.json", "--out", "d", "--mode", "mc", "--samples",
            "1000", "--seed", "7", "--threads", "2", "--resolution", "32"
        ])
        .is_ok());
        // Unknown subcommands and modes are usage errors.
        assert!(Cli::try_parse_from(["pompeiu", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from([
            "pompeiu", "solve", "--input", "p.json", "--out", "d", "--mode", "exact"
        ])
        .is_err());
    }
}
