//! Batch campaigns reproducing the market study at desk scale.
//!
//! Each campaign runs its jobs on the rayon pool, collects one
//! [`RunArtifact`] per job and writes every table as CSV together with a
//! `<campaign>_summary.json`. A failing job is recorded and the campaign
//! continues.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sponsored_market::market_model::{csp_payoff, mu_payoff_vector, ProviderStrategy};
use sponsored_market::se_search::{average_mu_payoff, follower_ess_oracle, symmetric_subgame_equilibrium};

use crate::commands::{self, linspace, RunError, RunResult};
use crate::emit::{svg_lines, write_csv, write_svg, EmitError, ResidualSummary, RunArtifact, Table, SCHEMA_VERSION};
use crate::scenario::{bundled, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignName {
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
    Fig8,
}

impl fmt::Display for CampaignName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CampaignName::Fig3 => "fig3",
            CampaignName::Fig4 => "fig4",
            CampaignName::Fig5 => "fig5",
            CampaignName::Fig6 => "fig6",
            CampaignName::Fig7 => "fig7",
            CampaignName::Fig8 => "fig8",
        };
        f.write_str(s)
    }
}

/// Delays of the delayed-dynamics campaign.
pub const FIG4_TAUS: [f64; 4] = [0.1, 1.0, 10.0, 50.0];
/// Subscription prices of the sponsorship sweep.
pub const FIG6_PRICES: [f64; 20] =
    [0.3, 1.0, 2.0, 3.0, 3.5, 3.9, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0, 10.0, 15.0, 20.0, 30.0, 40.0, 60.0, 80.0, 100.0];
/// Population sizes of the SE/NE/myopic comparison.
pub const FIG7_POPULATIONS: [usize; 3] = [1000, 5000, 10000];
/// Fixed second-CSP sponsorship levels at the bundled price.
pub const FIG5_THETA2: [f64; 3] = [0.25, 0.5, 0.75];
/// Higher-price panel: price, fixed second-CSP level and the first CSP's
/// sweep window around it.
pub const FIG5_HIGH_PRICE: (f64, f64, f64, f64) = (5.0, 0.78, 0.70, 0.86);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub command: String,
    pub converged: bool,
    pub residuals: ResidualSummary,
    pub wall_clock_s: f64,
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub schema_version: u32,
    pub campaign: CampaignName,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<String>,
}

#[derive(Debug)]
pub struct CampaignOutcome {
    pub name: CampaignName,
    pub artifacts: Vec<RunArtifact>,
    pub failures: Vec<String>,
}

impl CampaignOutcome {
    pub fn summary(&self) -> CampaignSummary {
        CampaignSummary {
            schema_version: SCHEMA_VERSION,
            campaign: self.name,
            runs: self
                .artifacts
                .iter()
                .map(|a| RunSummary {
                    scenario: a.scenario.clone(),
                    command: a.command.clone(),
                    converged: a.converged,
                    residuals: a.residuals,
                    wall_clock_s: a.wall_clock_s,
                    tables: a.tables.iter().map(|t| t.name.clone()).collect(),
                })
                .collect(),
            failures: self.failures.clone(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.artifacts.iter().find_map(|a| a.table(name))
    }

    pub fn artifact(&self, command: &str) -> Option<&RunArtifact> {
        self.artifacts.iter().find(|a| a.command == command)
    }
}

fn collect(name: CampaignName, jobs: Vec<(String, RunResult<RunArtifact>)>) -> CampaignOutcome {
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();
    for (label, r) in jobs {
        match r {
            Ok(a) => artifacts.push(a),
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    CampaignOutcome { name, artifacts, failures }
}

fn renamed(mut art: RunArtifact, names: &[&str]) -> RunArtifact {
    for (t, n) in art.tables.iter_mut().zip(names) {
        t.name = (*n).to_string();
    }
    art
}

fn fig3() -> CampaignOutcome {
    let job = bundled("via_fig3").map_err(RunError::from).and_then(|sc| commands::ne(&sc));
    collect(CampaignName::Fig3, vec![("ne".into(), job.map(|a| renamed(a, &["fig3_ne_trace"])))])
}

fn fig4() -> CampaignOutcome {
    let sc = match bundled("via_fig3") {
        Ok(sc) => sc,
        Err(e) => return collect(CampaignName::Fig4, vec![("scenario".into(), Err(e.into()))]),
    };
    let mut jobs: Vec<(String, RunResult<RunArtifact>)> = vec![("undelayed".into(), commands::evolve(&sc).map(|a| renamed(a, &["fig4_undelayed"])))];
    let delayed: Vec<_> = FIG4_TAUS
        .par_iter()
        .map(|tau| {
            let r = commands::evolve_delayed(&sc, &[*tau]).map(|a| renamed(a, &[&format!("fig4_tau_{tau}")]));
            (format!("tau = {tau}"), r)
        })
        .collect();
    jobs.extend(delayed);
    let mut out = collect(CampaignName::Fig4, jobs);
    if let Some(base) = out.artifact("evolve").and_then(|a| a.trajectories.first()).map(|t| t.terminal().clone()) {
        let mut gaps = Table::new("fig4_terminal_gap", vec!["tau".into(), "sup_distance".into(), "converged".into()]);
        for (tau, a) in FIG4_TAUS.iter().zip(out.artifacts.iter().filter(|a| a.command == "evolve-delayed")) {
            if let Some(t) = a.trajectories.first() {
                gaps.rows.push(vec![*tau, t.terminal().dist_inf(&base), f64::from(u8::from(t.converged))]);
            }
        }
        let mut art = RunArtifact::new("via_fig3", "terminal-gap");
        art.tables.push(gaps);
        out.artifacts.push(art);
    }
    out
}

/// Follower response of the two-CSP market to the first CSP's sponsorship.
fn theta_sweep(sc: &Scenario, name: String, pu: f64, theta2: f64, theta1: &[f64]) -> (RunArtifact, Vec<String>) {
    let p = &sc.params;
    let rows: Vec<RunResult<Vec<f64>>> = theta1
        .par_iter()
        .map(|t1| {
            let mut a: ProviderStrategy<f64> = sc.initial_strategy.clone();
            a.mno.pu = pu;
            a.csps[0].theta = *t1;
            a.csps[1].theta = theta2;
            let x = follower_ess_oracle(&a, p, &sc.mpec, None, None)?;
            let pi = mu_payoff_vector(&x, &a, p)?;
            let mut row = vec![*t1];
            row.extend(&x.shares);
            row.extend(&pi[1..]);
            row.push(average_mu_payoff(&x, &a, p)?);
            row.extend((1..=p.n_csp()).map(|j| csp_payoff(j, &x, &a, p)));
            Ok(row)
        })
        .collect();
    let m = p.n_csp();
    let mut cols = vec!["theta1".to_string()];
    cols.extend((0..=m).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|j| format!("mu{j}")));
    cols.push("mu_avg".into());
    cols.extend((1..=m).map(|j| format!("csp{j}")));
    let mut table = Table::new(name, cols);
    let mut failures = Vec::new();
    for (t1, r) in theta1.iter().zip(rows) {
        match r {
            Ok(row) => table.rows.push(row),
            Err(e) => failures.push(format!("{} theta1 = {t1}: {e}", table.name)),
        }
    }
    let mut art = RunArtifact::new(&sc.meta.name, "theta-sweep");
    art.converged = failures.is_empty();
    art.tables.push(table);
    (art, failures)
}

fn fig5() -> CampaignOutcome {
    let sc = match bundled("sponsorship_2csp") {
        Ok(sc) => sc,
        Err(e) => return collect(CampaignName::Fig5, vec![("scenario".into(), Err(e.into()))]),
    };
    let pu0 = sc.initial_strategy.mno.pu;
    let (hp, ht2, lo, hi) = FIG5_HIGH_PRICE;
    let mut panels: Vec<(String, f64, f64, Vec<f64>)> =
        FIG5_THETA2.iter().map(|t2| (format!("fig5_theta2_{t2}"), pu0, *t2, linspace(0.0, 1.0, 21))).collect();
    panels.push((format!("fig5_pu_{hp}_theta2_{ht2}"), hp, ht2, linspace(lo, hi, 33)));
    let results: Vec<_> = panels.into_par_iter().map(|(n, pu, t2, grid)| theta_sweep(&sc, n, pu, t2, &grid)).collect();
    let mut out = CampaignOutcome { name: CampaignName::Fig5, artifacts: Vec::new(), failures: Vec::new() };
    for (a, f) in results {
        out.artifacts.push(a);
        out.failures.extend(f);
    }
    out
}

fn fig6() -> CampaignOutcome {
    let sc = match bundled("sponsorship_2csp") {
        Ok(sc) => sc,
        Err(e) => return collect(CampaignName::Fig6, vec![("scenario".into(), Err(e.into()))]),
    };
    let start = std::time::Instant::now();
    let p = &sc.params;
    let rows: Vec<RunResult<Vec<f64>>> = FIG6_PRICES
        .par_iter()
        .map(|pu| {
            let mut a = sc.initial_strategy.clone();
            a.mno.pu = *pu;
            let rep = symmetric_subgame_equilibrium(&a, p, &sc.mpec, 1e-6)?;
            let (x, sa) = (&rep.final_point.x, &rep.final_point.a);
            let mut row = vec![*pu, sa.csps[0].theta];
            row.extend(&x.shares);
            row.push(average_mu_payoff(x, sa, p)?);
            row.extend((1..=p.n_csp()).map(|j| csp_payoff(j, x, sa, p)));
            row.extend([rep.kkt_residual, f64::from(u8::from(rep.ssoc.pass)), f64::from(u8::from(rep.converged))]);
            Ok(row)
        })
        .collect();
    let m = p.n_csp();
    let mut cols = vec!["pu".to_string(), "theta".to_string()];
    cols.extend((0..=m).map(|i| format!("x{i}")));
    cols.push("mu_avg".into());
    cols.extend((1..=m).map(|j| format!("csp{j}")));
    cols.extend(["kkt", "ssoc_pass", "converged"].map(String::from));
    let mut table = Table::new("fig6_theta_vs_pu", cols);
    let mut failures = Vec::new();
    for (pu, r) in FIG6_PRICES.iter().zip(rows) {
        match r {
            Ok(row) => table.rows.push(row),
            Err(e) => failures.push(format!("pu = {pu}: {e}")),
        }
    }
    let mut art = RunArtifact::new(&sc.meta.name, "symmetric-se-sweep");
    let kkt = table.column("kkt").unwrap_or_default();
    art.residuals.kkt = kkt.iter().copied().reduce(f64::max);
    art.converged = failures.is_empty() && table.column("converged").unwrap_or_default().iter().all(|c| *c == 1.0);
    art.tables.push(table);
    art.wall_clock_s = start.elapsed().as_secs_f64();
    CampaignOutcome { name: CampaignName::Fig6, artifacts: vec![art], failures }
}

/// Average user payoff and mean CSP payoff at the end of a run.
fn end_payoffs(a: &RunArtifact) -> Option<(f64, f64)> {
    let t = a.tables.first()?;
    let row = t.rows.last()?;
    let col = |n: &str| t.columns.iter().position(|c| c == n).map(|k| row[k]);
    let csp: Vec<f64> = t.columns.iter().enumerate().filter(|(_, c)| c.starts_with("csp")).map(|(k, _)| row[k]).collect();
    Some((col("mu_avg")?, csp.iter().sum::<f64>() / csp.len().max(1) as f64))
}

fn se_ne_myopic(name: CampaignName) -> CampaignOutcome {
    let sc = match bundled("network_effect_3csp") {
        Ok(sc) => sc,
        Err(e) => return collect(name, vec![("scenario".into(), Err(e.into()))]),
    };
    let jobs: Vec<(usize, &str)> = FIG7_POPULATIONS.iter().flat_map(|n| ["se", "ne", "myopic"].map(|c| (*n, c))).collect();
    let results: Vec<(String, RunResult<RunArtifact>)> = jobs
        .par_iter()
        .map(|(n, cmd)| {
            let mut s = sc.clone();
            s.params.population = *n;
            s.meta.name = format!("{}_n{n}", sc.meta.name);
            let r = match *cmd {
                "se" => commands::se(&s),
                "ne" => commands::ne(&s),
                _ => commands::myopic(&s, 50),
            };
            (format!("{cmd} N = {n}"), r)
        })
        .collect();
    let mut out = collect(name, results);
    let (title, csp_side) = match name {
        CampaignName::Fig7 => ("fig7_mu_vs_n", false),
        _ => ("fig8_csp_vs_n", true),
    };
    let pick = |v: (f64, f64)| if csp_side { v.1 } else { v.0 };
    let mut table = Table::new(title, ["n", "se", "ne", "myopic"].map(String::from).to_vec());
    for n in FIG7_POPULATIONS {
        let mut row = vec![n as f64];
        for cmd in ["se", "ne", "myopic"] {
            let label = format!("{}_n{n}", sc.meta.name);
            let v = out.artifacts.iter().find(|a| a.scenario == label && a.command == cmd).and_then(end_payoffs).map_or(f64::NAN, pick);
            row.push(v);
        }
        if row.iter().all(|v| v.is_finite()) {
            table.rows.push(row);
        } else {
            out.failures.push(format!("{title}: incomplete row for N = {n}"));
        }
    }
    let mut art = RunArtifact::new(&sc.meta.name, "comparison");
    art.tables.push(table);
    out.artifacts.push(art);
    out
}

/// Runs a campaign without writing anything.
pub fn build_campaign(name: CampaignName) -> CampaignOutcome {
    match name {
        CampaignName::Fig3 => fig3(),
        CampaignName::Fig4 => fig4(),
        CampaignName::Fig5 => fig5(),
        CampaignName::Fig6 => fig6(),
        CampaignName::Fig7 | CampaignName::Fig8 => se_ne_myopic(name),
    }
}

fn svg_for(table: &Table) -> Option<String> {
    let x_name = table.columns.first()?;
    let xs = table.column(x_name)?;
    let wanted: &[&str] = match table.name.as_str() {
        n if n.starts_with("fig3") => &["pu", "theta1", "theta2", "theta3"],
        n if n.starts_with("fig4_tau") || n == "fig4_undelayed" => &["x0", "x1", "x2", "x3"],
        n if n.starts_with("fig5") => &["x1", "x2"],
        "fig6_theta_vs_pu" => &["theta", "mu_avg"],
        n if n.starts_with("fig7") || n.starts_with("fig8") => &["se", "ne", "myopic"],
        _ => return None,
    };
    let series: Vec<(String, Vec<f64>)> = wanted.iter().filter_map(|c| table.column(c).map(|v| ((*c).to_string(), v))).collect();
    Some(svg_lines(&table.name, x_name, &xs, &series))
}

/// Writes every table of the outcome as CSV (plus an SVG chart for the
/// plotted tables) and the JSON summary; returns the written paths.
pub fn write_campaign(outcome: &CampaignOutcome, out_dir: &Path, svg: bool) -> Result<Vec<PathBuf>, EmitError> {
    std::fs::create_dir_all(out_dir).map_err(|source| EmitError::Io { path: out_dir.into(), source })?;
    let mut written = Vec::new();
    for t in outcome.artifacts.iter().flat_map(|a| &a.tables) {
        let path = out_dir.join(format!("{}.csv", t.name));
        write_csv(t, &path)?;
        written.push(path);
        if svg {
            if let Some(s) = svg_for(t) {
                let path = out_dir.join(format!("{}.svg", t.name));
                write_svg(&path, &s)?;
                written.push(path);
            }
        }
    }
    let path = out_dir.join(format!("{}_summary.json", outcome.name));
    let text = serde_json::to_string_pretty(&outcome.summary()).map_err(|source| EmitError::Json { path: path.clone(), source })?;
    std::fs::write(&path, text).map_err(|source| EmitError::Io { path: path.clone(), source })?;
    written.push(path);
    Ok(written)
}

/// Runs and writes a campaign.
pub fn run_campaign(name: CampaignName, out_dir: &Path, svg: bool) -> Result<CampaignOutcome, EmitError> {
    let outcome = build_campaign(name);
    write_campaign(&outcome, out_dir, svg)?;
    Ok(outcome)
}
