//! Run artifacts and their CSV, JSON and SVG renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sponsored_market::market_model::{csp_payoff, mno_payoff, MarketParams, PopulationState, ProviderStrategy};
use sponsored_market::ne_search::{max_budget_violation, EquilibriumReport};
use sponsored_market::replicator::{ne_residual, Trajectory};
use sponsored_market::se_search::{average_mu_payoff, MyopicReport, SeReport};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Named table written as one CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<String>) -> Self {
        Self { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Residual triple of a run; entries not defined for the run are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub ne_gap: Option<f64>,
    pub gqvi: Option<f64>,
    pub kkt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: u32,
    pub tool_version: String,
    pub scenario: String,
    pub command: String,
    pub converged: bool,
    pub residuals: ResidualSummary,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<Trajectory<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<EquilibriumReport<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stackelberg: Option<SeReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub myopic: Option<MyopicReport>,
    pub tables: Vec<Table>,
}

impl RunArtifact {
    pub fn new(scenario: &str, command: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            scenario: scenario.into(),
            command: command.into(),
            converged: true,
            residuals: ResidualSummary::default(),
            wall_clock_s: 0.0,
            trajectories: Vec::new(),
            equilibrium: None,
            stackelberg: None,
            myopic: None,
            tables: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Column names of the state/strategy/payoff block shared by all traces:
/// shares, strategies, then average user payoff, CSP payoffs and operator
/// payoff.
pub fn state_columns(m: usize) -> Vec<String> {
    let mut c: Vec<String> = (0..=m).map(|i| format!("x{i}")).collect();
    c.extend(["pu".to_string(), "pc".to_string()]);
    for j in 1..=m {
        c.push(format!("theta{j}"));
        c.push(format!("b{j}"));
    }
    c.push("mu_avg".into());
    c.extend((1..=m).map(|j| format!("csp{j}")));
    c.push("mno".into());
    c
}

pub fn state_row(x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Vec<f64> {
    let mut r = x.shares.clone();
    r.extend(a.to_vec());
    r.push(average_mu_payoff(x, a, p).unwrap_or(f64::NAN));
    r.extend((1..=p.n_csp()).map(|j| csp_payoff(j, x, a, p)));
    r.push(mno_payoff(x, a, p));
    r
}

/// `time, <state block>, potential, ne_residual, rate_sum`.
pub fn trajectory_table(name: &str, traj: &Trajectory<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Table {
    let mut cols = vec!["time".to_string()];
    cols.extend(state_columns(p.n_csp()));
    cols.extend(["potential", "ne_residual", "rate_sum"].map(String::from));
    let mut t = Table::new(name, cols);
    for ((time, x), d) in traj.times.iter().zip(&traj.states).zip(&traj.diagnostics) {
        let mut r = vec![*time];
        r.extend(state_row(x, a, p));
        r.extend([d.potential, d.ne_residual, d.rate_sum]);
        t.rows.push(r);
    }
    t
}

fn trace_columns(first: &str, m: usize) -> Vec<String> {
    let mut cols = vec![first.to_string()];
    cols.extend(state_columns(m));
    cols.extend(["step", "ne_gap", "budget_violation"].map(String::from));
    cols
}

fn trace_row(k: usize, x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>, step: f64) -> Vec<f64> {
    let mut r = vec![k as f64];
    r.extend(state_row(x, a, p));
    r.extend([step, ne_residual(x, a, p).unwrap_or(f64::NAN), max_budget_violation(x, a, p)]);
    r
}

/// `iteration, <state block>, step, ne_gap, budget_violation`.
pub fn iteration_table(name: &str, rep: &EquilibriumReport<f64>, p: &MarketParams<f64>) -> Table {
    let mut t = Table::new(name, trace_columns("iteration", p.n_csp()));
    for h in &rep.history {
        t.rows.push(trace_row(h.iteration, &h.x, &h.a, p, h.step));
    }
    t
}

pub fn cycle_table(name: &str, rep: &SeReport, p: &MarketParams<f64>) -> Table {
    let mut t = Table::new(name, trace_columns("cycle", p.n_csp()));
    for h in &rep.history {
        t.rows.push(trace_row(h.cycle, &h.x, &h.a, p, h.step));
    }
    t
}

pub fn myopic_table(name: &str, rep: &MyopicReport, p: &MarketParams<f64>) -> Table {
    let mut t = Table::new(name, trace_columns("round", p.n_csp()));
    let mut prev: Option<&ProviderStrategy<f64>> = None;
    for r in &rep.rounds {
        let step = prev.map_or(0.0, |a| {
            a.to_vec().iter().zip(r.a.to_vec()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
        });
        t.rows.push(trace_row(r.round, &r.x, &r.a, p, step));
        prev = Some(&r.a);
    }
    t
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io { path: path.into(), source }
}

pub fn write_csv(table: &Table, path: &Path) -> Result<(), EmitError> {
    let err = |source| EmitError::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(&table.columns).map_err(err)?;
    for r in &table.rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(io(path))
}

pub fn read_json(path: &Path) -> Result<RunArtifact, EmitError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|source| EmitError::Json { path: path.into(), source })
}

/// Writes the artifact into `out_dir`: every table as `<name>.csv`, or the
/// whole artifact as `<scenario>_<command>.json`.
pub fn emit_outputs(artifact: &RunArtifact, out_dir: &Path, format: Format) -> Result<Vec<PathBuf>, EmitError> {
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    match format {
        Format::Csv => artifact
            .tables
            .iter()
            .map(|t| {
                let path = out_dir.join(format!("{}.csv", t.name));
                write_csv(t, &path).map(|_| path)
            })
            .collect(),
        Format::Json => {
            let path = out_dir.join(format!("{}_{}.json", artifact.scenario, artifact.command));
            let text = serde_json::to_string_pretty(artifact).map_err(|source| EmitError::Json { path: path.clone(), source })?;
            fs::write(&path, text).map_err(io(&path))?;
            Ok(vec![path])
        }
    }
}

/// Line chart of `series` against `xs`, without styling guarantees.
pub fn svg_lines(title: &str, x_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = xs.iter().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (y0, y1) = series
        .iter()
        .flat_map(|(_, ys)| ys.iter())
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |v: f64| PAD + (v - x0) / span(x0, x1) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / span(y0, y1) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="5" y="{}">{y1:.3e}</text><text x="5" y="{}">{y0:.3e}</text>"#, PAD, H - PAD);
    for (k, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - PAD + 5.0 - 120.0, PAD + 15.0 * (k as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, svg: &str) -> Result<(), EmitError> {
    fs::write(path, svg).map_err(io(path))
}
