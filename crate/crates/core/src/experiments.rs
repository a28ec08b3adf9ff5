//! End-to-end experiment plans: simulation-vs-approximation tables,
//! exact-vs-Gaussian state distributions, convergence sweeps, and the
//! superposition and stopped-arrival reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Budget, FcltSection, SimBudget, YsSection};
use crate::ctmc::{self, CtmcError, CtmcModel};
use crate::des::{self, Measure, QueueModel, Scaling, SimConfig, SimError, SimEstimate, StateHistogram};
use crate::diffusion::{self, ApproxError};
use crate::distributions::{DistSpec, Family};
use crate::fclt::{self, FcltError, SuperpositionConfig};
use crate::ou;

/// Shipped reference values: simulation estimates with half-widths and
/// approximation values for the four standard tables.
pub const REFERENCE_CSV: &str = include_str!("../data/reference_tables.csv");

/// Floor in the denominator of the relative gap.
pub const GAP_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{} cell(s) outside tolerance: {}", .0.len(), .0.join("; "))]
    ReferenceMismatch(Vec<String>),
    #[error("malformed reference table: {0}")]
    Reference(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Fclt(#[from] FcltError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TableMeasures,
    TableTails,
    Figure1,
    ConvergenceSweep,
    FcltReport,
    YsLawReport,
}

fn default_rho() -> f64 {
    1.2
}

fn yes() -> bool {
    true
}

/// One experiment. Grid points are every combination of `services`,
/// `servers` and `gammas` (or `gamma = gamma_sqrt_n * sqrt(n)`), with
/// Poisson arrivals at traffic intensity `rho` and exponential patience of
/// mean `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    /// Stem of every artifact file name.
    pub name: String,
    #[serde(default)]
    pub servers: Vec<u32>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    pub gamma_sqrt_n: Option<f64>,
    /// Default 1.2.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub services: Vec<DistSpec>,
    /// Replications and horizon; the `--budget` preset when absent.
    pub budget: Option<SimBudget>,
    /// Multiply the horizon by `gamma` (equal relaxation budgets).
    #[serde(default)]
    pub horizon_per_gamma: bool,
    /// Warmup in units of `gamma`; 10% of the horizon when absent.
    pub warmup_gammas: Option<f64>,
    #[serde(default = "yes")]
    pub probes: bool,
    pub seed: Option<u64>,
    /// Check table cells against the shipped reference values.
    #[serde(default)]
    pub validate: bool,
    pub fclt: Option<FcltSection>,
    /// Superposition report: `false` expects dependent increments (a
    /// negative control) instead of Brownian ones.
    #[serde(default = "yes")]
    pub expect_brownian: bool,
    pub ys: Option<YsSection>,
}

impl ExperimentPlan {
    /// Table-style plan on the default `rho = 1.2`.
    pub fn table(kind: ExperimentKind, name: &str, servers: Vec<u32>, gammas: Vec<f64>, services: Vec<DistSpec>) -> Self {
        ExperimentPlan {
            kind,
            name: name.into(),
            servers,
            gammas,
            gamma_sqrt_n: None,
            rho: default_rho(),
            services,
            budget: None,
            horizon_per_gamma: false,
            warmup_gammas: None,
            probes: true,
            seed: None,
            validate: false,
            fclt: None,
            expect_brownian: true,
            ys: None,
        }
    }

    /// `(service, n, gamma)` in output order.
    pub fn grid(&self) -> Vec<(DistSpec, u32, f64)> {
        let mut points = Vec::new();
        for &service in &self.services {
            for &n in &self.servers {
                match self.gamma_sqrt_n {
                    Some(c) => points.push((service, n, c * (n as f64).sqrt())),
                    None => points.extend(self.gammas.iter().map(|&g| (service, n, g))),
                }
            }
        }
        points
    }

    pub fn model_at(&self, service: DistSpec, n: u32, gamma: f64) -> Result<QueueModel, ExperimentError> {
        Ok(QueueModel::markovian_abandonment(n, self.rho, service, gamma)?)
    }

    fn sim_config(&self, model: &QueueModel, opts: &RunOptions) -> Result<SimConfig, ExperimentError> {
        let b = Budget::resolve(opts.budget, self.budget);
        let gamma = model.gamma();
        let horizon = if self.horizon_per_gamma { b.horizon * gamma } else { b.horizon };
        let mut cfg = SimConfig::for_model(model, horizon, b.replications, self.seed_with(opts));
        if let Some(k) = self.warmup_gammas {
            cfg.warmup = k * gamma;
        }
        if !self.probes {
            cfg.probe_interval = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed_with(&self, opts: &RunOptions) -> u64 {
        opts.seed.or(self.seed).unwrap_or(0)
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub budget: Option<Budget>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCell {
    pub measure: Measure,
    pub sim: Option<SimEstimate>,
    pub approx: f64,
    pub gap: Option<f64>,
}

/// Simulation and approximation of every measure at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub service: Family,
    pub servers: u32,
    pub gamma: f64,
    pub cells: Vec<TableCell>,
}

/// `|sim - approx| / max(|sim|, 1e-12)`.
pub fn relative_gap(sim: f64, approx: f64) -> f64 {
    (sim - approx).abs() / sim.abs().max(GAP_EPSILON)
}

impl TableRow {
    pub fn build(model: &QueueModel, measures: &[Measure], estimates: &[SimEstimate]) -> Result<TableRow, ExperimentError> {
        let approx = model.approx()?;
        let cells = measures
            .iter()
            .map(|&m| {
                let sim = estimates.iter().find(|e| e.measure == m).cloned();
                let a = m.approximation(&approx);
                TableCell { measure: m, gap: sim.as_ref().map(|s| relative_gap(s.value, a)), sim, approx: a }
            })
            .collect();
        Ok(TableRow {
            label: model.label(),
            service: model.service.family(),
            servers: model.servers,
            gamma: model.gamma(),
            cells,
        })
    }

    pub fn cell(&self, measure: Measure) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.measure == measure)
    }
}

/// Checks that ran as part of a plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Files keyed by name, plus checks, warnings and grid points that failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanOutput {
    pub artifacts: BTreeMap<String, String>,
    pub rows: Vec<TableRow>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
}

impl PlanOutput {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    fn fail(&mut self, what: String) {
        log::error!("{what}");
        self.failures.push(what);
    }

    /// Adds a manifest listing failed grid points, if any.
    fn flush_failures(&mut self, name: &str) {
        if !self.failures.is_empty() {
            let text = self.failures.iter().map(|f| format!("{f}\n")).collect();
            self.artifacts.insert(format!("{name}_failures.txt"), text);
        }
    }
}

/// Runs a plan. Errors at individual grid points are recorded in
/// `failures` and in a manifest artifact; the remaining points still run.
pub fn run_plan(plan: &ExperimentPlan, opts: &RunOptions) -> Result<PlanOutput, ExperimentError> {
    let mut out = PlanOutput::default();
    let empty = match plan.kind {
        ExperimentKind::FcltReport => false,
        ExperimentKind::YsLawReport => {
            plan.services.is_empty() && plan.ys.as_ref().is_none_or(|y| y.variability_grid.is_empty())
        }
        _ => plan.grid().is_empty(),
    };
    if empty {
        out.warnings.push(format!("plan `{}` has an empty model grid; nothing to do", plan.name));
        return Ok(out);
    }
    match plan.kind {
        ExperimentKind::TableMeasures | ExperimentKind::TableTails => run_table(plan, opts, &mut out)?,
        ExperimentKind::Figure1 => run_figure1(plan, &mut out)?,
        ExperimentKind::ConvergenceSweep => run_sweep(plan, opts, &mut out)?,
        ExperimentKind::FcltReport => run_fclt(plan, opts, &mut out)?,
        ExperimentKind::YsLawReport => run_ys(plan, &mut out)?,
    }
    out.flush_failures(&plan.name);
    Ok(out)
}

pub fn table_measures(kind: ExperimentKind) -> Vec<Measure> {
    let all = Measure::standard_set();
    match kind {
        ExperimentKind::TableTails => all.into_iter().filter(|m| matches!(m, Measure::QueueTail(_) | Measure::WaitTail(_))).collect(),
        _ => all.into_iter().take(5).collect(),
    }
}

fn run_table(plan: &ExperimentPlan, opts: &RunOptions, out: &mut PlanOutput) -> Result<(), ExperimentError> {
    let measures = table_measures(plan.kind);
    let results: Vec<Result<TableRow, String>> = plan
        .grid()
        .into_par_iter()
        .map(|(service, n, gamma)| {
            let run = || -> Result<TableRow, ExperimentError> {
                let model = plan.model_at(service, n, gamma)?;
                let cfg = plan.sim_config(&model, opts)?;
                let est = des::simulate(&model, &cfg, &measures)?;
                TableRow::build(&model, &measures, &est)
            };
            run().map_err(|e| format!("{} n={n} gamma={gamma}: {e}", service.family().label()))
        })
        .collect();
    for r in results {
        match r {
            Ok(row) => out.rows.push(row),
            Err(e) => out.fail(e),
        }
    }
    out.artifacts.insert(format!("{}.csv", plan.name), table_csv(&out.rows));
    out.artifacts.insert(format!("{}.md", plan.name), table_markdown(&out.rows, &measures));
    if plan.validate {
        let report = compare_to_reference(&out.rows, &ReferenceTable::shipped()?);
        out.artifacts.insert(format!("{}_validation.csv", plan.name), report.to_csv());
        if report.checks.is_empty() {
            out.warnings.push("no grid point has a reference entry; nothing validated".into());
        }
        let bad = report.mismatches();
        out.check("reference", bad.is_empty(), format!("{} cells checked, {} outside tolerance", report.checks.len(), bad.len()));
    }
    Ok(())
}

/// Writes records to an in-memory CSV.
pub fn to_csv<I, R>(header: &[&str], records: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(r.into_iter().collect::<Vec<_>>()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 CSV")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let header = ["model", "servers", "gamma", "measure", "sim_value", "half_width_95", "replications", "approx_value", "relative_gap"];
    let records = rows.iter().flat_map(|row| {
        row.cells.iter().map(move |c| {
            vec![
                row.label.clone(),
                row.servers.to_string(),
                row.gamma.to_string(),
                c.measure.to_string(),
                opt(c.sim.as_ref().map(|s| s.value)),
                opt(c.sim.as_ref().map(|s| s.half_width_95)),
                c.sim.as_ref().map(|s| s.replications.to_string()).unwrap_or_default(),
                c.approx.to_string(),
                opt(c.gap),
            ]
        })
    });
    to_csv(&header, records)
}

/// `v` rounded to `digits` significant digits, keeping trailing zeros.
pub fn sig(v: f64, digits: i32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let e = v.abs().log10().floor() as i32;
    let decimals = (digits - 1 - e).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Blocks per model with a simulation row, a half-width row, an italic
/// approximation row and a relative-gap row for each `gamma`.
pub fn table_markdown(rows: &[TableRow], measures: &[Measure]) -> String {
    let mut md = String::new();
    let mut current = String::new();
    for row in rows {
        if row.label != current {
            current = row.label.clone();
            let _ = writeln!(md, "\n### {current}\n");
            let names: Vec<String> = measures.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(md, "| | {} |", names.join(" | "));
            let _ = writeln!(md, "|---|{}", "---|".repeat(measures.len()));
        }
        let cells = |f: &dyn Fn(&TableCell) -> String| row.cells.iter().map(f).collect::<Vec<_>>().join(" | ");
        let sim = |c: &TableCell| c.sim.as_ref().map(|s| sig(s.value, 4)).unwrap_or_else(|| "-".into());
        let hw = |c: &TableCell| c.sim.as_ref().map(|s| format!("±{}", sig(s.half_width_95, 2))).unwrap_or_default();
        let _ = writeln!(md, "| gamma={} | {} |", row.gamma, cells(&sim));
        let _ = writeln!(md, "| | {} |", cells(&hw));
        let _ = writeln!(md, "| | {} |", cells(&|c| format!("*{}*", sig(c.approx, 4))));
        let _ = writeln!(md, "| gap | {} |", cells(&|c| c.gap.map(|g| format!("{:.2}%", 100.0 * g)).unwrap_or_default()));
    }
    if !rows.is_empty() {
        md.push_str("\nHalf-widths: 95% Student-t intervals over independent replications.\n");
    }
    md
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCell {
    pub table: String,
    pub service: Family,
    pub servers: u32,
    pub gamma: f64,
    pub measure: String,
    pub sim_value: Option<f64>,
    pub sim_half_width: Option<f64>,
    pub approx_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub cells: Vec<ReferenceCell>,
}

impl ReferenceTable {
    pub fn parse(text: &str) -> Result<ReferenceTable, ExperimentError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let cells = reader
            .deserialize()
            .collect::<Result<Vec<ReferenceCell>, _>>()
            .map_err(|e| ExperimentError::Reference(e.to_string()))?;
        Ok(ReferenceTable { cells })
    }

    pub fn shipped() -> Result<ReferenceTable, ExperimentError> {
        ReferenceTable::parse(REFERENCE_CSV)
    }

    /// Reference built from our own rows (used for self-consistency).
    pub fn from_rows(rows: &[TableRow]) -> ReferenceTable {
        let cells = rows
            .iter()
            .flat_map(|r| {
                r.cells.iter().map(move |c| ReferenceCell {
                    table: String::new(),
                    service: r.service,
                    servers: r.servers,
                    gamma: r.gamma,
                    measure: c.measure.to_string(),
                    sim_value: c.sim.as_ref().map(|s| s.value),
                    sim_half_width: c.sim.as_ref().map(|s| s.half_width_95),
                    approx_value: c.approx,
                })
            })
            .collect();
        ReferenceTable { cells }
    }

    pub fn lookup(&self, service: Family, servers: u32, gamma: f64, measure: Measure) -> Option<&ReferenceCell> {
        let name = measure.to_string();
        self.cells.iter().find(|c| {
            c.service == service && c.servers == servers && (c.gamma - gamma).abs() <= 1e-9 * gamma.abs() && c.measure == name
        })
    }
}

/// Tolerance for matching a reference value to 4 significant digits.
pub fn four_digit_tolerance(reference: f64) -> f64 {
    if reference == 0.0 {
        return 1e-12;
    }
    0.5 * 10f64.powi(reference.abs().log10().floor() as i32 - 3) * (1.0 + 1e-9)
}

/// Desk-scale band for a simulated cell before adding our own half-width:
/// abandonment fraction +-0.003, means +-1%, variances +-10%, tail
/// probabilities +-0.02.
pub fn sim_band(measure: Measure, reference: f64) -> f64 {
    match measure {
        Measure::AbdFraction => 0.003,
        Measure::QueueMean | Measure::WaitMean => 0.01 * reference.abs(),
        Measure::QueueVar | Measure::WaitVar => 0.10 * reference.abs(),
        Measure::QueueTail(_) | Measure::WaitTail(_) | Measure::StateHistogram(_) => 0.02,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCheck {
    pub cell: String,
    pub column: &'static str,
    pub ours: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<CellCheck>,
}

impl ValidationReport {
    pub fn mismatches(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} {}: {} vs {} (tol {})", c.cell, c.column, c.ours, c.reference, sig(c.tolerance, 2)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let records = self.checks.iter().map(|c| {
            vec![
                c.cell.clone(),
                c.column.to_string(),
                c.ours.to_string(),
                c.reference.to_string(),
                c.tolerance.to_string(),
                c.passed.to_string(),
            ]
        });
        to_csv(&["cell", "column", "ours", "reference", "tolerance", "passed"], records)
    }
}

/// Cell-by-cell comparison. Approximation cells must agree to 4
/// significant digits; simulated cells within [`sim_band`] widened by our
/// own 95% half-width. Cells without a reference entry are skipped.
pub fn compare_to_reference(rows: &[TableRow], reference: &ReferenceTable) -> ValidationReport {
    let mut checks = Vec::new();
    for row in rows {
        for c in &row.cells {
            let Some(r) = reference.lookup(row.service, row.servers, row.gamma, c.measure) else { continue };
            let cell = format!("{} gamma={} {}", row.label, row.gamma, c.measure);
            let tol = four_digit_tolerance(r.approx_value);
            checks.push(CellCheck {
                cell: cell.clone(),
                column: "approx",
                ours: c.approx,
                reference: r.approx_value,
                tolerance: tol,
                passed: (c.approx - r.approx_value).abs() <= tol,
            });
            if let (Some(sim), Some(rv)) = (&c.sim, r.sim_value) {
                let tol = sim_band(c.measure, rv) + sim.half_width_95;
                checks.push(CellCheck {
                    cell,
                    column: "sim",
                    ours: sim.value,
                    reference: rv,
                    tolerance: tol,
                    passed: (sim.value - rv).abs() <= tol,
                });
            }
        }
    }
    ValidationReport { checks }
}

/// [`compare_to_reference`], failing with the offending cells.
pub fn validate_against_reference(rows: &[TableRow], reference: &ReferenceTable) -> Result<ValidationReport, ExperimentError> {
    let report = compare_to_reference(rows, reference);
    let bad = report.mismatches();
    if bad.is_empty() {
        Ok(report)
    } else {
        Err(ExperimentError::ReferenceMismatch(bad))
    }
}

/// Exact CTMC pmf next to the Gaussian approximation for one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactVsGaussian {
    pub label: String,
    pub gamma: f64,
    pub exact: Vec<f64>,
    pub gaussian: Vec<f64>,
    pub comparison: ctmc::GaussianComparison,
}

pub fn exact_vs_gaussian(model: &QueueModel) -> Result<ExactVsGaussian, ExperimentError> {
    let chain = CtmcModel::from_queue(model)?;
    let generator = chain.build_generator()?;
    let dist = ctmc::solve_stationary(&chain, &generator)?;
    let approx = model.approx()?;
    let comparison = ctmc::compare_to_gaussian(&dist, &approx);
    let gaussian = ctmc::gaussian_pmf(&approx, dist.marginal.len() - 1);
    Ok(ExactVsGaussian { label: model.label(), gamma: model.gamma(), exact: dist.marginal, gaussian, comparison })
}

fn run_figure1(plan: &ExperimentPlan, out: &mut PlanOutput) -> Result<(), ExperimentError> {
    let results: Vec<_> = plan
        .grid()
        .into_par_iter()
        .map(|(s, n, g)| plan.model_at(s, n, g).and_then(|m| exact_vs_gaussian(&m)).map_err(|e| format!("n={n} gamma={g}: {e}")))
        .collect();
    let mut pmf = Vec::new();
    let mut summary = Vec::new();
    for r in results {
        match r {
            Ok(f) => {
                for (x, (e, g)) in f.exact.iter().zip(&f.gaussian).enumerate() {
                    pmf.push(vec![f.label.clone(), f.gamma.to_string(), x.to_string(), e.to_string(), g.to_string()]);
                }
                let c = &f.comparison;
                summary.push(vec![
                    f.label.clone(),
                    f.gamma.to_string(),
                    c.tv_distance.to_string(),
                    c.exact_mean.to_string(),
                    c.approx_mean.to_string(),
                    c.exact_variance.to_string(),
                    c.approx_variance.to_string(),
                ]);
            }
            Err(e) => out.fail(e),
        }
    }
    out.artifacts.insert(format!("{}.csv", plan.name), to_csv(&["model", "gamma", "state", "exact", "gaussian"], pmf));
    let header = ["model", "gamma", "tv_distance", "exact_mean", "approx_mean", "exact_var", "approx_var"];
    out.artifacts.insert(format!("{}_summary.csv", plan.name), to_csv(&header, summary));
    Ok(())
}

/// KS distance of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub servers: u32,
    pub gamma: f64,
    pub ks: f64,
    pub replications: usize,
    pub horizon: f64,
}

/// Number of consecutive increases.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

pub fn sweep_point(plan: &ExperimentPlan, opts: &RunOptions, service: DistSpec, n: u32, gamma: f64) -> Result<SweepPoint, ExperimentError> {
    let model = plan.model_at(service, n, gamma)?;
    let cfg = plan.sim_config(&model, opts)?;
    let stats = des::run_replications(&model, &cfg)?;
    let hist = StateHistogram::from_stats(&stats)?;
    let approx = model.approx()?;
    let ks = hist.ks_to_gaussian(&Scaling::from_approx(&approx), approx.ou_var);
    Ok(SweepPoint { label: model.label(), servers: n, gamma, ks, replications: cfg.replications, horizon: cfg.horizon })
}

fn run_sweep(plan: &ExperimentPlan, opts: &RunOptions, out: &mut PlanOutput) -> Result<(), ExperimentError> {
    let grid = plan.grid();
    let results: Vec<_> = grid
        .par_iter()
        .map(|&(s, n, g)| sweep_point(plan, opts, s, n, g).map_err(|e| format!("n={n} gamma={g}: {e}")))
        .collect();
    let mut points = Vec::new();
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(e) => out.fail(e),
        }
    }
    let records = points.iter().map(|p| {
        vec![p.label.clone(), p.servers.to_string(), p.gamma.to_string(), p.ks.to_string(), p.replications.to_string(), p.horizon.to_string()]
    });
    out.artifacts
        .insert(format!("{}.csv", plan.name), to_csv(&["model", "servers", "gamma", "ks", "replications", "horizon"], records));
    for service in &plan.services {
        let family = service.family().label();
        let ks: Vec<f64> = points.iter().filter(|p| p.label.contains(&format!("/{family}/"))).map(|p| p.ks).collect();
        if ks.len() < 2 {
            continue;
        }
        let inv = count_inversions(&ks);
        let detail = format!("ks = {:?}, {inv} inversion(s)", ks.iter().map(|k| sig(*k, 3)).collect::<Vec<_>>());
        out.check(format!("ks decreasing ({family})"), inv <= 1 && ks[ks.len() - 1] < ks[0], detail);
    }
    Ok(())
}

/// Superposition report: FSLLN, Brownian-limit tests, and text summary.
pub fn fclt_report(section: &FcltSection, seed: u64) -> Result<(fclt::BrownianReport, fclt::FsllnReport), ExperimentError> {
    let grid = SuperpositionConfig::uniform_grid(section.t_max, section.points);
    let mut cfg = SuperpositionConfig::new(section.n, section.gamma, section.interrenewal, grid, section.replications, seed);
    cfg.stationary = section.stationary;
    let sample = fclt::simulate_superposition(&cfg)?;
    let t1 = section.t1.unwrap_or(section.t_max / 2.0);
    let t2 = section.t2.unwrap_or(section.t_max);
    let brownian = fclt::brownian_tests(&sample, t1, t2, section.permutations, seed)?;
    Ok((brownian, fclt::fslln_from_sample(&sample)))
}

fn run_fclt(plan: &ExperimentPlan, opts: &RunOptions, out: &mut PlanOutput) -> Result<(), ExperimentError> {
    let section = plan.fclt.as_ref().ok_or_else(|| ExperimentError::InvalidPlan("fclt_report needs a [plan.fclt] table".into()))?;
    let seed = opts.seed.or(section.seed).or(plan.seed).unwrap_or(0);
    let (b, lln) = fclt_report(section, seed)?;
    let records = b.summary.iter().map(|s| {
        vec![s.t.to_string(), s.mean.to_string(), s.var.to_string(), s.se_mean.to_string(), s.se_var.to_string()]
    });
    out.artifacts.insert(format!("{}.csv", plan.name), to_csv(&["t", "mean", "var", "se_mean", "se_var"], records));
    out.artifacts.insert(format!("{}_report.txt", plan.name), fclt_text(section, &b, &lln));
    let slope = &b.variance_slope;
    let last = b.summary.last().expect("non-empty grid");
    let target = slope.expected * last.t;
    out.check(
        format!("var at t={}", last.t),
        (last.var - target).abs() <= 4.0 * last.se_var,
        format!("{} vs {} (4 se = {})", sig(last.var, 4), sig(target, 4), sig(4.0 * last.se_var, 2)),
    );
    let r = b.increments.r;
    if plan.expect_brownian {
        out.check("independent increments", r.abs() < 0.05, format!("r = {}", sig(r, 3)));
    } else {
        out.check("dependent increments (control)", r.abs() > 0.1, format!("r = {}", sig(r, 3)));
    }
    Ok(())
}

pub fn fclt_text(section: &FcltSection, b: &fclt::BrownianReport, lln: &fclt::FsllnReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "superposition n = {} gamma = {} interrenewal = {:?}", section.n, section.gamma, section.interrenewal.family());
    let _ = writeln!(s, "replications = {} stationary = {}", b.replications, section.stationary);
    let _ = writeln!(s, "fslln sup deviation: median = {} max = {}", lln.median, lln.max);
    let v = &b.variance_slope;
    let _ = writeln!(s, "variance slope = {} (expected {}, rel. error {})", v.slope, v.expected, v.relative_error());
    let i = &b.increments;
    let _ = writeln!(
        s,
        "increment correlation r(t1 = {}, t2 = {}) = {} (permutation p = {}, {} permutations)",
        i.t1, i.t2, i.r, i.permutation_p_value, i.permutations
    );
    for n in &b.normality {
        let _ = writeln!(s, "anderson-darling t = {}: A2 = {} p = {}", n.t, n.a2, n.p_value);
    }
    s
}

/// Limit of the stopped-arrival variance, `mu (cA2 + rho cS2 + rho - 1) / (2 rho)`.
pub fn ys_limit(mu: f64, rho: f64, ca2: f64, cs2: f64) -> f64 {
    mu * (ca2 + rho * cs2 + rho - 1.0) / (2.0 * rho)
}

fn run_ys(plan: &ExperimentPlan, out: &mut PlanOutput) -> Result<(), ExperimentError> {
    let section = plan.ys.as_ref().ok_or_else(|| ExperimentError::InvalidPlan("ys_law_report needs a [plan.ys] table".into()))?;
    let mut pairs: Vec<(f64, f64, f64)> = plan.services.iter().map(|s| (1.0 / s.mean(), 1.0, s.scv())).collect();
    let mu0 = pairs.first().map(|p| p.0).unwrap_or(1.0);
    pairs.extend(section.variability_grid.iter().map(|&[ca2, cs2]| (mu0, ca2, cs2)));
    let mut records = Vec::new();
    let mut worst: f64 = 0.0;
    for &(mu, ca2, cs2) in &pairs {
        let var_x0 = section.var_x0.unwrap_or_else(|| diffusion::ou_stationary_variance(mu, plan.rho, ca2, cs2));
        let limit = ys_limit(mu, plan.rho, ca2, cs2);
        for &s in &section.s {
            let law = ou::ys_law(s, mu, plan.rho, ca2, cs2, var_x0);
            let err = (law.variance - limit).abs() / limit;
            if s >= 20.0 {
                worst = worst.max(err);
            }
            let c = law.components;
            records.push(
                [ca2, cs2, s, law.variance, c.initial, c.arrival, c.service, c.abandonment, limit, err].map(|v| v.to_string()).to_vec(),
            );
        }
    }
    let header = ["ca2", "cs2", "s", "variance", "initial", "arrival", "service", "abandonment", "limit", "relative_error"];
    out.artifacts.insert(format!("{}.csv", plan.name), to_csv(&header, records));
    if section.s.iter().any(|&s| s >= 20.0) {
        out.check("ys variance limit", worst <= 1e-6, format!("max relative error for s >= 20: {worst:e}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn services() -> Vec<DistSpec> {
        vec![DistSpec::deterministic(1.0).unwrap(), DistSpec::erlang2(1.0).unwrap(), DistSpec::lognormal(1.0, 1.52).unwrap()]
    }

    fn approx_rows(servers: u32, gammas: &[f64], kind: ExperimentKind) -> Vec<TableRow> {
        let measures = table_measures(kind);
        let mut rows = Vec::new();
        for s in services() {
            for &g in gammas {
                let model = QueueModel::markovian_abandonment(servers, 1.2, s, g).unwrap();
                rows.push(TableRow::build(&model, &measures, &[]).unwrap());
            }
        }
        rows
    }

    #[test]
    fn shipped_reference_parses() {
        let r = ReferenceTable::shipped().unwrap();
        assert_eq!(r.cells.len(), 198);
        let c = r.lookup(Family::Erlang2, 5, 50.0, Measure::WaitVar).unwrap();
        assert_eq!(c.approx_value, 7.5);
        let c = r.lookup(Family::Lognormal, 100, 10.0, Measure::WaitTail(2.0)).unwrap();
        assert_eq!(c.approx_value, 0.0374);
    }

    #[test]
    fn every_reference_approximation_reproduced() {
        let reference = ReferenceTable::shipped().unwrap();
        let mut rows = approx_rows(100, &[1.0, 5.0, 10.0], ExperimentKind::TableMeasures);
        rows.extend(approx_rows(100, &[1.0, 5.0, 10.0], ExperimentKind::TableTails));
        rows.extend(approx_rows(5, &[5.0, 20.0, 50.0], ExperimentKind::TableMeasures));
        rows.extend(approx_rows(5, &[5.0, 20.0, 50.0], ExperimentKind::TableTails));
        let report = validate_against_reference(&rows, &reference).unwrap();
        assert_eq!(report.checks.len(), 198);
    }

    #[test]
    fn mismatch_lists_cells() {
        let mut rows = approx_rows(100, &[1.0], ExperimentKind::TableMeasures);
        rows[0].cells[2].approx += 0.1;
        match validate_against_reference(&rows, &ReferenceTable::shipped().unwrap()) {
            Err(ExperimentError::ReferenceMismatch(cells)) => {
                assert_eq!(cells.len(), 1);
                assert!(cells[0].contains("M/D/100+M") && cells[0].contains("queue_var"), "{cells:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rows_validate_against_themselves() {
        let rows = approx_rows(20, &[2.0, 7.0], ExperimentKind::TableTails);
        let report = validate_against_reference(&rows, &ReferenceTable::from_rows(&rows)).unwrap();
        assert_eq!(report.checks.len(), 36);
    }

    #[test]
    fn gap_and_formatting() {
        assert_eq!(relative_gap(2.0, 1.5), 0.25);
        assert_eq!(relative_gap(0.0, 1e-13), 0.1);
        assert_eq!(sig(0.005, 4), "0.005000");
        assert_eq!(sig(70.0, 4), "70.00");
        assert_eq!(sig(1385.2, 4), "1385");
        assert_eq!(sig(0.16666, 4), "0.1667");
        assert!((four_digit_tolerance(0.005) - 5e-7).abs() < 1e-15);
        assert_eq!(count_inversions(&[3.0, 2.0, 2.5, 1.0]), 1);
    }

    #[test]
    fn empty_grid_is_a_warning() {
        let plan = ExperimentPlan::table(ExperimentKind::TableMeasures, "empty", vec![100], vec![1.0], vec![]);
        let out = run_plan(&plan, &RunOptions::default()).unwrap();
        assert!(out.artifacts.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(out.passed());
    }

    #[test]
    fn table_plan_is_reproducible() {
        let mut plan = ExperimentPlan::table(ExperimentKind::TableMeasures, "t", vec![10], vec![1.0, 2.0], services());
        plan.budget = Some(SimBudget { replications: 3, horizon: 300.0 });
        plan.seed = Some(4);
        let a = run_plan(&plan, &RunOptions::default()).unwrap();
        let b = run_plan(&plan, &RunOptions::default()).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        assert_eq!(a.rows.len(), 6);
        let md = &a.artifacts["t.md"];
        assert!(md.contains("### M/D/10+M") && md.contains("*0.1667*"), "{md}");
        let c = run_plan(&plan, &RunOptions { seed: Some(5), ..Default::default() }).unwrap();
        assert_ne!(a.artifacts["t.csv"], c.artifacts["t.csv"]);
    }

    #[test]
    fn failing_point_goes_to_manifest() {
        let mut plan = ExperimentPlan::table(ExperimentKind::TableMeasures, "f", vec![10], vec![1.0], services());
        plan.budget = Some(SimBudget { replications: 1, horizon: 100.0 });
        let out = run_plan(&plan, &RunOptions::default()).unwrap();
        assert_eq!(out.failures.len(), 3);
        assert!(!out.passed());
        assert!(out.artifacts.contains_key("f_failures.txt"));
    }

    #[test]
    fn figure_plan_on_erlang_a() {
        let mut plan = ExperimentPlan::table(ExperimentKind::Figure1, "fig", vec![20], vec![2.0], vec![DistSpec::exponential(1.0).unwrap()]);
        plan.probes = false;
        let out = run_plan(&plan, &RunOptions::default()).unwrap();
        assert!(out.passed());
        let summary = &out.artifacts["fig_summary.csv"];
        assert_eq!(summary.lines().count(), 2);
        assert!(out.artifacts["fig.csv"].starts_with("model,gamma,state,exact,gaussian\n"));
    }

    #[test]
    fn ys_report_checks_the_limit() {
        let mut plan = ExperimentPlan::table(ExperimentKind::YsLawReport, "ys", vec![], vec![], vec![DistSpec::erlang2(1.0).unwrap()]);
        plan.ys = Some(YsSection { s: vec![1.0, 5.0, 20.0], var_x0: None, variability_grid: vec![[0.5, 2.0]] });
        let out = run_plan(&plan, &RunOptions::default()).unwrap();
        assert!(out.passed(), "{:?}", out.checks);
        assert_eq!(out.artifacts["ys.csv"].lines().count(), 7);
    }
}
