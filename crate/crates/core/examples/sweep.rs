use backfrac::experiment::{fit_slopes, rate_checks, run_experiment, ExperimentSpec};

fn main() -> backfrac::Result<()> {
    let spec = ExperimentSpec::default();
    let run = run_experiment(&spec)?;
    let report = fit_slopes(&run.records, spec.discard, spec.discrepancy.nu);
    for f in &report.fits {
        println!(
            "{:>8} {:>12} p={} slope={:.4} max={:.4} theory={:.4} r2={:.3}",
            f.method.to_string(),
            f.rule.to_string(),
            f.p,
            f.slope,
            f.slope_max,
            f.theoretical,
            f.r_squared
        );
    }
    for c in rate_checks(&run, &report, spec.discard) {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!("{:?}", run.checks.truncation);
    println!("failed cells {}", run.checks.failed_cells);
    Ok(())
}
