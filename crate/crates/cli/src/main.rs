use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use backfrac::constants::DerivedConstants;
use backfrac::experiment::{
    emit_outputs, fit_slopes, rate_checks, run_experiment, ExperimentSpec, OutputPaths,
};
use backfrac::forward::{effective_data, forward_solve, Provenance};
use backfrac::inverse::BackwardOperator;
use backfrac::mittag_leffler::{ml_eval_traced, CalibrationTable, GridSpec, MLOrder};
use backfrac::regularization::{
    solve_with_rule, ChoiceRule, DiscrepancyConfig, Method, RuleInputs,
};
use backfrac::spectral::{
    inject_noise, synthesize_source_member, write_coefficient_csv, write_coefficient_table,
    DecayProfile, DomainSpec, SourceSet, SpectralDomain, SpectralField, TimeSource,
};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "backfrac",
    version,
    about = "Backward problems for time-fractional diffusion"
)]
struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "BACKFRAC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate E_{γ,β}(x) at points x ≤ 0
    MlEval {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = backfrac::mittag_leffler::DEFAULT_REL_TOL)]
        tol: f64,
        #[arg(required = true, allow_negative_numbers = true)]
        points: Vec<f64>,
    },
    /// Solve the forward problem and dump spectral coefficients
    Forward {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Extra times at which to dump u(t)
        #[arg(long = "t", value_delimiter = ',')]
        times: Vec<f64>,
        /// CSV destination (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One backward solve on synthetic noisy data
    Invert(InvertArgs),
    /// Full δ-sweep with slope fits
    Rates {
        /// Experiment spec (JSON); defaults apply to missing fields
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Write records.csv, fits.csv and plots/ here
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Run the rate-table checks; exit code 2 if any fails
        #[arg(long)]
        check: bool,
    },
    /// Calibrate the two-sided Mittag-Leffler bound constants
    Calibrate {
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.8")]
        alpha: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct ProblemArgs {
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Side length of the box (all sides)
    #[arg(long, default_value_t = std::f64::consts::PI)]
    length: f64,
    #[arg(long, default_value_t = 256)]
    n_modes: usize,
    /// Smoothness of the synthesized initial value
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// ‖f‖ as a fraction of ρ (0 for no source)
    #[arg(long, default_value_t = 0.1)]
    source_fraction: f64,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// qbvm, mqbvm (with --q) or ftm; mqbvm:<q> also accepted
    #[arg(long, default_value = "qbvm")]
    method: String,
    /// manual, apriori or aposteriori; manual when --beta/--n-cut is given, apriori otherwise
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    q: Option<u32>,
    /// Regularization parameter for the manual rule
    #[arg(long, conflicts_with = "n_cut")]
    beta: Option<f64>,
    /// Truncation level for the manual rule
    #[arg(long)]
    n_cut: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    split: f64,
    #[arg(long, default_value_t = 1.5)]
    xi: f64,
    #[arg(long, default_value_t = 1.5)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    nu: f64,
    /// CSV of true and reconstructed coefficients
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Problem {
    domain: Arc<SpectralDomain>,
    g: SpectralField,
    source: TimeSource,
}

fn build_problem(a: &ProblemArgs) -> Result<Problem> {
    let domain = Arc::new(SpectralDomain::new(DomainSpec {
        dim: a.dim,
        side_lengths: vec![a.length; a.dim],
        n_modes: a.n_modes,
    })?);
    let set = SourceSet::new(a.rho, a.p)?;
    let g = synthesize_source_member(&domain, set, DecayProfile::default(), a.seed)?;
    let source = if a.source_fraction > 0.0 {
        let raw: Vec<f64> = (1..=a.n_modes).map(|n| 1.0 / n as f64).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = a.rho * a.source_fraction / norm;
        TimeSource::constant(raw.iter().map(|v| v * scale).collect(), a.tau)?
    } else {
        TimeSource::zero(a.n_modes, a.tau)?
    };
    Ok(Problem { domain, g, source })
}

fn parse_method(name: &str, q: Option<u32>) -> Result<Method> {
    Ok(match (name, q) {
        ("qbvm" | "mqbvm", Some(q)) => Method::quasi_boundary(q),
        ("mqbvm", None) => Method::Mqbvm(2),
        (_, Some(_)) => bail!("--q only applies to qbvm/mqbvm"),
        (other, None) => other.parse()?,
    })
}

fn ml_eval_cmd(gamma: f64, beta: f64, tol: f64, points: &[f64]) -> Result<()> {
    let order = MLOrder::new(gamma, beta)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "x,value,route")?;
    for &x in points {
        let (v, route) = ml_eval_traced(order, x, tol).with_context(|| format!("at x = {x}"))?;
        writeln!(out, "{x},{v:.17e},{route:?}")?;
    }
    Ok(())
}

fn forward_cmd(a: &ProblemArgs, times: &[f64], out: Option<PathBuf>) -> Result<()> {
    let pb = build_problem(a)?;
    let sol = forward_solve(pb.domain.clone(), a.alpha, pb.g.clone(), pb.source, a.tau)?;
    let mut fields = vec![("g".to_string(), pb.g.clone())];
    for &t in times {
        fields.push((format!("u(t={t})"), sol.at(t)?));
    }
    fields.push(("h".to_string(), sol.final_value()?));
    let cols: Vec<(&str, &SpectralField)> = fields.iter().map(|(n, f)| (n.as_str(), f)).collect();
    match out {
        Some(path) => {
            write_coefficient_csv(&path, &pb.domain, &cols)?;
            log::info!("wrote {}", path.display());
        }
        None => write_coefficient_table(std::io::stdout().lock(), &pb.domain, &cols)?,
    }
    Ok(())
}

fn invert_cmd(a: &InvertArgs) -> Result<()> {
    let method = parse_method(&a.method, a.q)?;
    let manual = match (method, a.beta, a.n_cut) {
        (Method::Ftm, Some(_), _) => bail!("ftm takes --n-cut, not --beta"),
        (Method::Ftm, None, n) => n.map(|n| n as f64),
        (_, _, Some(_)) => bail!("{method} takes --beta, not --n-cut"),
        (_, b, None) => b,
    };
    let rule = match &a.rule {
        Some(r) => r.parse()?,
        None if manual.is_some() => ChoiceRule::Manual,
        None => ChoiceRule::Apriori,
    };
    if rule != ChoiceRule::Manual && manual.is_some() {
        bail!("--beta/--n-cut are only used with --rule manual");
    }
    let p = &a.problem;
    let pb = build_problem(p)?;
    let discrepancy =
        DiscrepancyConfig::new(a.xi, a.mu, a.nu, DiscrepancyConfig::default().root_tol)?;
    let h = forward_solve(
        pb.domain.clone(),
        p.alpha,
        pb.g.clone(),
        pb.source.clone(),
        p.tau,
    )?
    .final_value()?;
    let noisy = inject_noise(
        &pb.domain,
        &h,
        &pb.source,
        a.delta,
        a.split,
        p.seed.wrapping_add(1),
    )?;
    let ups = effective_data(
        &pb.domain,
        &noisy.h_noisy,
        &noisy.f_noisy,
        p.alpha,
        p.tau,
        Provenance::Noisy,
    )?;
    let op = BackwardOperator::new(pb.domain.clone(), p.alpha, p.tau)?;
    let constants = DerivedConstants::calibrate(&pb.domain, p.alpha, p.tau)?;
    let inputs = RuleInputs {
        delta: a.delta,
        rho: p.rho,
        p: p.p,
        constants: &constants,
        discrepancy,
        manual,
    };
    let sol = solve_with_rule(&op, &ups, method, rule, &inputs)?;
    let error = sol.g_rec.distance(&pb.g)?;
    let summary = json!({
        "method": method.to_string(),
        "rule": rule.to_string(),
        "parameter": sol.parameter.as_f64(),
        "delta": a.delta,
        "budget_used": noisy.budget_used(&pb.domain, &h, &pb.source)?.sqrt(),
        "error": error,
        "relative_error": error / pb.g.norm(),
        "residual": sol.diagnostics.residual,
        "notes": sol.diagnostics.notes,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(path) = &a.out {
        write_coefficient_csv(path, &pb.domain, &[("g", &pb.g), ("g_rec", &sol.g_rec)])?;
    }
    Ok(())
}

fn rates_cmd(spec: Option<PathBuf>, out_dir: Option<PathBuf>, check: bool) -> Result<bool> {
    let mut spec = match spec {
        Some(path) => ExperimentSpec::load(&path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        spec.outputs = OutputPaths {
            records: Some(dir.join("records.csv")),
            fits: Some(dir.join("fits.csv")),
            plots: Some(dir.join("plots")),
        };
    }
    let run = run_experiment(&spec)?;
    let report = fit_slopes(&run.records, spec.discard, spec.discrepancy.nu);
    for path in emit_outputs(&run.records, &report.fits, &spec.outputs)? {
        log::info!("wrote {}", path.display());
    }
    println!(
        "{:<10} {:<12} {:>4} {:>8} {:>8} {:>8} {:>6}",
        "method", "rule", "p", "slope", "theory", "max", "R2"
    );
    for f in &report.fits {
        println!(
            "{:<10} {:<12} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>6.3}",
            f.method.to_string(),
            f.rule.to_string(),
            f.p,
            f.slope,
            f.theoretical,
            f.slope_max,
            f.r_squared
        );
    }
    for (key, why) in &report.skipped {
        println!("skipped {key}: {why}");
    }
    if run.checks.failed_cells > 0 {
        println!(
            "{} cells failed their parameter choice",
            run.checks.failed_cells
        );
    }
    if !check {
        return Ok(true);
    }
    let mut ok = true;
    for c in rate_checks(&run, &report, spec.discard) {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn calibrate_cmd(alphas: &[f64], out: Option<PathBuf>) -> Result<()> {
    let grid = GridSpec::calibration_default();
    let table = CalibrationTable::calibrate(alphas, &grid)?;
    println!(
        "{:>6} {:>20} {:>20} {:>18}",
        "alpha", "c_lower", "c_upper", "grid"
    );
    for e in &table.entries {
        println!(
            "{:>6} {:>20.15} {:>20.15} {:>18}",
            e.alpha, e.c1_lower, e.c1_upper, e.grid_hash
        );
    }
    if let Some(path) = out {
        table.save(&path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::MlEval {
            gamma,
            beta,
            tol,
            points,
        } => ml_eval_cmd(gamma, beta, tol, &points)?,
        Command::Forward {
            problem,
            times,
            out,
        } => forward_cmd(&problem, &times, out)?,
        Command::Invert(args) => invert_cmd(&args)?,
        Command::Rates {
            spec,
            out_dir,
            check,
        } => return rates_cmd(spec, out_dir, check),
        Command::Calibrate { alpha, out } => calibrate_cmd(&alpha, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
