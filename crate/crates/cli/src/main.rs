use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abandonq::config::{Budget, ConfigFile};
use abandonq::ctmc::{self, CtmcModel};
use abandonq::des::{self, Measure, StateHistogram};
use abandonq::experiments::{self, to_csv, ExperimentKind, ExperimentPlan, PlanOutput, RunOptions};
use abandonq::ou::{self, InitialValue, OuParams};
use abandonq::rng::{StreamFactory, Substream};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "abandonq", version, about = "Overloaded many-server queues with abandonment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulation budget preset.
    #[arg(long, global = true, value_enum)]
    budget: Option<BudgetArg>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Desk,
    Paper,
}

impl From<BudgetArg> for Budget {
    fn from(b: BudgetArg) -> Budget {
        match b {
            BudgetArg::Desk => Budget::Desk,
            BudgetArg::Paper => Budget::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Gaussian approximation of every standard measure.
    Approx { config: PathBuf },
    /// Discrete-event simulation.
    Sim { config: PathBuf },
    /// Exact stationary distribution of the truncated CTMC.
    Exact { config: PathBuf },
    /// Sample path of the limiting OU process.
    Ou { config: PathBuf },
    /// Variance of the stopped-arrival process.
    #[command(name = "ys-law")]
    YsLaw { config: PathBuf },
    /// Superposition of stationary renewal processes.
    Fclt { config: PathBuf },
    /// Run an experiment plan.
    Reproduce { config: PathBuf },
}

/// Files to write and whether all validations passed.
struct Outcome {
    files: BTreeMap<String, String>,
    passed: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let opts = RunOptions { budget: cli.budget.map(Budget::from), seed: cli.seed };
    let outcome = match &cli.command {
        Command::Approx { config } => approx(&load(config)?)?,
        Command::Sim { config } => sim(&load(config)?, &opts)?,
        Command::Exact { config } => exact(&load(config)?)?,
        Command::Ou { config } => ou_path(&load(config)?, &opts)?,
        Command::YsLaw { config } => ys(&load(config)?)?,
        Command::Fclt { config } => fclt(&load(config)?, &opts)?,
        Command::Reproduce { config } => reproduce(&load(config)?, &opts)?,
    };
    write_files(&cli.out, &outcome.files)?;
    Ok(outcome.passed)
}

fn load(path: &Path) -> Result<ConfigFile> {
    ConfigFile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_files(dir: &Path, files: &BTreeMap<String, String>) -> Result<()> {
    if files.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn approx(cfg: &ConfigFile) -> Result<Outcome> {
    let model = cfg.model()?;
    let a = model.approx()?;
    let measures = Measure::standard_set();
    let header: Vec<String> = measures.iter().map(|m| m.to_string()).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let row: Vec<String> = measures.iter().map(|m| m.approximation(&a).to_string()).collect();
    let text = to_csv(&header, [row]);
    print!("{}: {text}", model.label());
    Ok(Outcome { files: BTreeMap::from([("approx.csv".into(), text)]), passed: true })
}

fn sim(cfg: &ConfigFile, opts: &RunOptions) -> Result<Outcome> {
    let model = cfg.model()?;
    let sim = cfg.sim_config(&model, opts.budget, opts.seed)?;
    log::info!("{}: {} replications x {} time units, seed {}", model.label(), sim.replications, sim.horizon, sim.seed);
    let stats = des::run_replications(&model, &sim)?;
    let unbalanced: Vec<u64> = stats.iter().filter(|s| !s.flow.balanced()).map(|s| s.replication).collect();
    if !unbalanced.is_empty() {
        log::error!("flow conservation violated in replications {unbalanced:?}");
    }
    let estimates = des::aggregate(&model, &stats, &Measure::standard_set())?;
    let records = estimates.iter().map(|e| {
        vec![e.measure.to_string(), e.value.to_string(), e.half_width_95.to_string(), e.replications.to_string()]
    });
    let results = to_csv(&["measure", "value", "half_width_95", "replications"], records);
    print!("{results}");
    let hist = StateHistogram::from_stats(&stats)?;
    let records = hist.probabilities.iter().enumerate().map(|(x, p)| vec![x.to_string(), p.to_string()]);
    let histogram = to_csv(&["state", "probability"], records);
    let files = BTreeMap::from([("results.csv".into(), results), ("histogram.csv".into(), histogram)]);
    Ok(Outcome { files, passed: unbalanced.is_empty() })
}

fn exact(cfg: &ConfigFile) -> Result<Outcome> {
    let model = cfg.model()?;
    let mut chain = CtmcModel::from_queue(&model)?;
    if let Some(level) = cfg.exact.as_ref().and_then(|e| e.truncation) {
        chain = chain.with_truncation(level);
    }
    let generator = chain.build_generator()?;
    let dist = ctmc::solve_stationary(&chain, &generator)?;
    let approx = model.approx()?;
    let cmp = ctmc::compare_to_gaussian(&dist, &approx);
    let records = dist.marginal.iter().enumerate().map(|(x, p)| vec![x.to_string(), p.to_string()]);
    let pmf = to_csv(&["state", "probability"], records);
    let report = format!(
        "model {}\nstates {} (truncation {})\nresidual {:e}\ntruncated mass bound {:e}\n\
         mean exact {} gaussian {}\nvariance exact {} gaussian {}\nabandonment fraction exact {} gaussian {}\n\
         tv distance {}\n",
        model.label(),
        generator.dim(),
        chain.truncation,
        dist.residual,
        dist.truncation_mass_bound,
        cmp.exact_mean,
        cmp.approx_mean,
        cmp.exact_variance,
        cmp.approx_variance,
        dist.abandonment_fraction(&chain),
        approx.alpha,
        cmp.tv_distance,
    );
    print!("{report}");
    let files = BTreeMap::from([("exact.csv".into(), pmf), ("exact_report.txt".into(), report)]);
    Ok(Outcome { files, passed: dist.residual <= ctmc::RESIDUAL_TOLERANCE })
}

fn ou_path(cfg: &ConfigFile, opts: &RunOptions) -> Result<Outcome> {
    let model = cfg.model()?;
    let Some(section) = &cfg.ou else { bail!("missing [ou] table") };
    if section.points < 2 || !section.t_max.is_finite() || section.t_max <= 0.0 {
        bail!("[ou] needs t_max > 0 and at least 2 points");
    }
    let x0 = section.x0.map_or(InitialValue::Stationary, InitialValue::Fixed);
    let params = OuParams::for_queue(model.mu(), model.rho(), model.ca2(), model.cs2(), x0);
    let grid: Vec<f64> = (0..section.points).map(|k| section.t_max * k as f64 / (section.points - 1) as f64).collect();
    let seed = opts.seed.or(section.seed).unwrap_or(0);
    let mut rng = StreamFactory::new(seed).stream(0, Substream::Auxiliary);
    let path = ou::simulate_ou(&params, &grid, &mut rng);
    let records = grid.iter().zip(&path).map(|(t, x)| vec![t.to_string(), x.to_string()]);
    let text = to_csv(&["t", "x"], records);
    println!("{}: {} points, stationary variance {}", model.label(), grid.len(), params.stationary_variance());
    Ok(Outcome { files: BTreeMap::from([("ou_path.csv".into(), text)]), passed: true })
}

fn ys(cfg: &ConfigFile) -> Result<Outcome> {
    let model = cfg.model()?;
    let Some(section) = &cfg.ys else { bail!("missing [ys] table") };
    let (mu, rho, ca2, cs2) = (model.mu(), model.rho(), model.ca2(), model.cs2());
    let var_x0 = section.var_x0.unwrap_or_else(|| abandonq::diffusion::ou_stationary_variance(mu, rho, ca2, cs2));
    let records = section.s.iter().map(|&s| {
        let law = ou::ys_law(s, mu, rho, ca2, cs2, var_x0);
        let c = law.components;
        [s, law.variance, c.initial, c.arrival, c.service, c.abandonment].map(|v| v.to_string()).to_vec()
    });
    let text = to_csv(&["s", "variance", "initial", "arrival", "service", "abandonment"], records);
    print!("{text}");
    println!("limit {}", experiments::ys_limit(mu, rho, ca2, cs2));
    Ok(Outcome { files: BTreeMap::from([("ys_law.csv".into(), text)]), passed: true })
}

fn fclt(cfg: &ConfigFile, opts: &RunOptions) -> Result<Outcome> {
    let Some(section) = &cfg.fclt else { bail!("missing [fclt] table") };
    let mut plan = ExperimentPlan::table(ExperimentKind::FcltReport, "fclt", vec![], vec![], vec![]);
    plan.fclt = Some(section.clone());
    let out = experiments::run_plan(&plan, opts)?;
    if let Some(report) = out.artifacts.get("fclt_report.txt") {
        print!("{report}");
    }
    Ok(finish(out))
}

fn reproduce(cfg: &ConfigFile, opts: &RunOptions) -> Result<Outcome> {
    let Some(plan) = &cfg.plan else { bail!("missing [plan] table") };
    log::info!("running plan `{}` ({:?})", plan.name, plan.kind);
    let out = experiments::run_plan(plan, opts)?;
    if let Some(md) = out.artifacts.get(&format!("{}.md", plan.name)) {
        print!("{md}");
    }
    Ok(finish(out))
}

fn finish(out: PlanOutput) -> Outcome {
    for w in &out.warnings {
        log::warn!("{w}");
    }
    for c in &out.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &out.failures {
        println!("FAILED {f}");
    }
    Outcome { passed: out.passed(), files: out.artifacts }
}
