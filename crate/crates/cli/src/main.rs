use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use maas_equilibrium::metrics;
use maas_equilibrium::par;
use maas_equilibrium::scenarios::{self, BuiltScenario, SweepParameter, SweepSpec};
use maas_equilibrium::solver::{self, ProbeSpec};
use maas_equilibrium::Error;

/// Equilibrium solver for coopetitive multi-modal mobility markets.
#[derive(Parser)]
#[command(name = "maas-eq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// Scenario: a built-in name or a path to a scenario TOML.
    #[arg(long, short = 's')]
    scenario: String,
    /// Worker threads for the follower layer (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the extragradient step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Override the convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the iteration budget.
    #[arg(long)]
    max_iter: Option<usize>,
}

impl Common {
    fn load(&self) -> anyhow::Result<BuiltScenario> {
        if let Some(n) = self.threads {
            par::configure_threads(n);
        }
        let mut sc = scenarios::load(&self.scenario)
            .with_context(|| format!("loading scenario '{}'", self.scenario))?;
        if let Some(v) = self.step_size {
            sc.solver.step_size = v;
        }
        if let Some(v) = self.tol {
            sc.solver.tolerance = v;
        }
        if let Some(v) = self.max_iter {
            sc.solver.max_iterations = v;
        }
        Ok(sc)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Expand a scenario into its game form and print the dimensions.
    Build {
        #[command(flatten)]
        common: Common,
        /// Also dump every state, action and time link.
        #[arg(long)]
        verbose: bool,
    },
    /// Compute the pricing equilibrium of one scenario.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Directory for report.json, report.txt, trace.csv and duals.csv.
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Solve two scenarios and print metric-by-metric changes.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second scenario to compare against.
        #[arg(long)]
        against: String,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Re-solve along a one-dimensional parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// What to vary: wholesale[:<operator>], vot:<o>-<d>, or
        /// capacity:<tail>-<head>.
        #[arg(long)]
        parameter: String,
        /// Explicit comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Grid start (with --to and --step).
        #[arg(long)]
        from: Option<f64>,
        /// Grid end, inclusive.
        #[arg(long)]
        to: Option<f64>,
        /// Grid spacing.
        #[arg(long)]
        step: Option<f64>,
        /// Start each point from the previous solution instead of cold.
        #[arg(long)]
        warm_start: bool,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Re-solve from perturbed starting points and measure the spread of
    /// the recovered equilibria.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        /// Relative perturbation sizes.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.10])]
        thetas: Vec<f64>,
        /// Fractions of coordinates perturbed.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
        ratios: Vec<f64>,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Scenario(_)) | Some(Error::Network(_)) | Some(Error::Demand(_)) => 2,
                Some(Error::NotConverged { .. }) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn ensure_dir(out: &Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Build { common, verbose } => build(common, verbose),
        Command::Solve {
            common,
            out,
            format,
        } => solve(common, out, format),
        Command::Compare {
            common,
            against,
            out,
        } => compare(common, against, out),
        Command::Sweep {
            common,
            parameter,
            values,
            from,
            to,
            step,
            warm_start,
            out,
        } => sweep(common, parameter, values, from, to, step, warm_start, out),
        Command::Probe {
            common,
            seed,
            replicates,
            thetas,
            ratios,
            out,
        } => probe(common, seed, replicates, thetas, ratios, out),
    }
}

fn build(common: Common, verbose: bool) -> anyhow::Result<ExitCode> {
    let sc = common.load()?;
    let net = sc.network()?;
    println!("scenario: {}", sc.name);
    println!(
        "physical: {} nodes, {} road links, {} transit lines",
        net.phys.nodes.len(),
        net.phys.roads.len(),
        net.phys.pt_lines.len()
    );
    println!(
        "demand: {} OD pairs, {} travelers",
        net.ods.len(),
        net.ods.iter().map(|od| od.demand).sum::<f64>()
    );
    println!(
        "expanded: {} states, {} actions, {} priced time links",
        net.states.len(),
        net.actions.len(),
        net.tlinks.len()
    );

    let mut ev = sc.evaluator()?;
    println!(
        "decision vector: {} = {} times + {} fares + {} operator rates",
        ev.layout.dim,
        ev.layout.n_t,
        ev.layout.p_ods.len(),
        ev.layout.rate_len.iter().sum::<usize>()
    );
    println!("segments ({}):", ev.segment_count());
    for (dest, vot, states, actions) in ev.segment_sizes() {
        println!("  dest {dest:>3} vot {vot:<6} {states:>6} states {actions:>7} actions");
    }

    let audit = ev.fare_cap_elasticities()?;
    if let Some((od, worst)) = audit
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .copied()
    {
        let od = &ev.net.ods[od];
        println!(
            "fare cap audit: max residual demand sensitivity at the cap is \
             {worst:.3e} per unit fare (od {}->{})",
            od.origin, od.dest
        );
        for (oi, e) in &audit {
            if *e > 1e-3 {
                let od = &ev.net.ods[*oi];
                eprintln!(
                    "warning: fare cap may bind for od {}->{}: demand sensitivity \
                     {e:.3e} at the cap",
                    od.origin, od.dest
                );
            }
        }
    } else {
        println!("fare cap audit: no platform fares in this scenario");
    }

    if verbose {
        print!("{}", net.canonical_summary());
    }
    Ok(ExitCode::SUCCESS)
}

fn solve(common: Common, out: Option<PathBuf>, format: Format) -> anyhow::Result<ExitCode> {
    let sc = common.load()?;
    ensure_dir(&out)?;
    let mut ev = sc.evaluator()?;
    let eq = solver::solve(&mut ev, None, &sc.solver)?;
    let report = metrics::build_report(&sc.name, &ev, &eq);

    match format {
        Format::Table => print!("{}", metrics::render_table(&report)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => print!("{}", metrics::render_csv(&report)),
    }

    if let Some(dir) = &out {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        std::fs::write(dir.join("report.txt"), metrics::render_table(&report))?;
        std::fs::write(dir.join("report.csv"), metrics::render_csv(&report))?;
        let names = sc.operator_names();
        metrics::write_trace_csv(File::create(dir.join("trace.csv"))?, &eq.trace, &names)?;
        metrics::write_duals_csv(File::create(dir.join("duals.csv"))?, &report.links)?;
    }

    if eq.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "did not reach tolerance {:.1e} within {} iterations (residual {:.3e})",
            sc.solver.tolerance, eq.iterations, eq.natural_residual
        );
        Ok(ExitCode::from(3))
    }
}

fn compare(common: Common, against: String, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let sc_a = common.load()?;
    let common_b = Common {
        scenario: against,
        threads: None,
        ..common
    };
    let sc_b = common_b.load()?;
    ensure_dir(&out)?;

    let solve_one = |sc: &BuiltScenario| -> anyhow::Result<(metrics::EquilibriumReport, bool)> {
        let mut ev = sc.evaluator()?;
        let eq = solver::solve(&mut ev, None, &sc.solver)?;
        Ok((metrics::build_report(&sc.name, &ev, &eq), eq.converged))
    };
    let (ra, ok_a) = solve_one(&sc_a)?;
    let (rb, ok_b) = solve_one(&sc_b)?;

    let rows = metrics::compare(&ra, &rb);
    let text = metrics::render_compare(&rows, &sc_a.name, &sc_b.name);
    print!("{text}");

    if let Some(dir) = &out {
        std::fs::write(dir.join("compare.txt"), &text)?;
        std::fs::write(dir.join("report_a.json"), serde_json::to_string_pretty(&ra)?)?;
        std::fs::write(dir.join("report_b.json"), serde_json::to_string_pretty(&rb)?)?;
    }

    if ok_a && ok_b {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("at least one scenario did not converge");
        Ok(ExitCode::from(3))
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: Common,
    parameter: String,
    values: Vec<f64>,
    from: Option<f64>,
    to: Option<f64>,
    step: Option<f64>,
    warm_start: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let sc = common.load()?;
    let parameter = SweepParameter::parse(&parameter)?;
    let values = if !values.is_empty() {
        if from.is_some() || to.is_some() || step.is_some() {
            anyhow::bail!(Error::Scenario(
                "sweep: give either --values or --from/--to/--step, not both".into()
            ));
        }
        values
    } else {
        let (from, to, step) = match (from, to, step) {
            (Some(f), Some(t), Some(s)) if s > 0.0 && t >= f => (f, t, s),
            _ => anyhow::bail!(Error::Scenario(
                "sweep: need --values or a valid --from/--to/--step grid".into()
            )),
        };
        let n = ((to - from) / step).round() as usize;
        (0..=n).map(|i| from + i as f64 * step).collect()
    };
    let spec = SweepSpec {
        parameter,
        values,
        warm_start,
    };
    ensure_dir(&out)?;

    let outcome = scenarios::run_sweep(&sc, &spec)?;
    let names = sc.operator_names();

    let failed = outcome.rows.iter().filter(|r| !r.converged).count();
    println!(
        "{} points solved ({} not converged)",
        outcome.rows.len(),
        failed
    );
    for r in &outcome.rows {
        println!(
            "  value {:<8} maas {:>5.1}% driving {:>5.1}% platform {:>10.1} total {:>10.1}{}",
            r.value,
            r.share_maas,
            r.share_driving,
            r.platform_profit,
            r.total_profit,
            if r.converged { "" } else { "  [not converged]" }
        );
    }
    if let Some(a) = &outcome.analysis {
        if let Some(v) = a.total_profit_argmax {
            println!("total profit peaks at {v}");
        }
        for (name, arg) in &a.operator_argmax {
            if let Some(v) = arg {
                println!("{name} profit peaks at {v}");
            }
        }
        for (name, b) in &a.baseline_profit {
            println!("{name} profit without the platform: {b:.1}");
        }
        match a.pareto_lower_edge {
            Some(v) => println!(
                "win-win regime: every operator beats its no-platform profit and \
                 the platform stays profitable from {v} up"
            ),
            None => println!("no win-win regime on this grid"),
        }
    }

    if let Some(dir) = &out {
        scenarios::write_sweep_csv(File::create(dir.join("sweep.csv"))?, &outcome, &names)?;
        scenarios::write_xy_files(dir, &outcome, &names)?;
        println!("wrote {}", dir.join("sweep.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(
    common: Common,
    seed: u64,
    replicates: usize,
    thetas: Vec<f64>,
    ratios: Vec<f64>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let sc = common.load()?;
    let spec = ProbeSpec {
        thetas,
        ratios,
        replicates,
        seed,
    };
    ensure_dir(&out)?;
    let net = sc.network()?;
    let report = solver::robustness_probe(&net, &sc.params, &sc.solver, &spec)?;

    println!(
        "baseline: {} iterations, residual {:.3e}",
        report.baseline_iterations, report.baseline_residual
    );
    for &theta in &spec.thetas {
        let gaps: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.theta == theta)
            .map(|r| r.gap)
            .collect();
        let max = gaps.iter().copied().fold(0.0f64, f64::max);
        println!(
            "theta {:>5.2}%: {} replicates, max equilibrium gap {max:.3e}",
            100.0 * theta,
            gaps.len()
        );
    }
    let worst = report.rows.iter().map(|r| r.gap).fold(0.0f64, f64::max);
    let all_converged = report.rows.iter().all(|r| r.converged);
    println!(
        "all {} perturbed runs converged: {all_converged}; worst gap {worst:.3e}",
        report.rows.len()
    );

    if let Some(dir) = &out {
        metrics::write_probe_csv(File::create(dir.join("probe.csv"))?, &report)?;
        println!("wrote {}", dir.join("probe.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}
