//! One function per CLI subcommand, each producing a [`RunArtifact`].

use std::time::Instant;

use rayon::prelude::*;
use sponsored_market::delay_stability::{integrate_delayed, DelaySpec, InitialHistory};
use sponsored_market::ne_search::{run_distributed_search, JointStrategy};
use sponsored_market::replicator::{integrate_replicator, ne_residual};
use sponsored_market::se_search::{follower_ess_oracle, run_diagonalization, run_myopic};
use sponsored_market::MarketError;
use thiserror::Error;

use crate::emit::{cycle_table, iteration_table, myopic_table, state_columns, state_row, trajectory_table, EmitError, RunArtifact, Table};
use crate::scenario::{Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error("{0}")]
    Usage(String),
}

pub type RunResult<T> = std::result::Result<T, RunError>;

fn finish(mut art: RunArtifact, start: Instant) -> RunArtifact {
    art.wall_clock_s = start.elapsed().as_secs_f64();
    art
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Undelayed replicator trajectory from the initial state.
pub fn evolve(sc: &Scenario) -> RunResult<RunArtifact> {
    let start = Instant::now();
    let (p, a) = (&sc.params, &sc.initial_strategy);
    let traj = integrate_replicator(&sc.initial_state(), a, p, &sc.ode)?;
    let mut art = RunArtifact::new(&sc.meta.name, "evolve");
    art.converged = traj.converged;
    art.residuals.ne_gap = Some(ne_residual(traj.terminal(), a, p)?);
    art.tables.push(trajectory_table(&format!("{}_evolve", sc.meta.name), &traj, a, p));
    art.trajectories.push(traj);
    Ok(finish(art, start))
}

/// Delayed trajectories, one per entry of `taus` (uniform delays), or the
/// scenario's own delay block when `taus` is empty.
pub fn evolve_delayed(sc: &Scenario, taus: &[f64]) -> RunResult<RunArtifact> {
    let start = Instant::now();
    let (p, a) = (&sc.params, &sc.initial_strategy);
    let m = p.n_csp();
    let specs: Vec<DelaySpec<f64>> = if taus.is_empty() {
        vec![sc.delay.clone().ok_or_else(|| RunError::Usage("no --tau given and the scenario has no [delay] block".into()))?]
    } else {
        taus.iter().map(|t| DelaySpec::uniform(m, *t)).collect()
    };
    let history = InitialHistory::Constant(sc.initial_state());
    let runs: Vec<_> = specs
        .par_iter()
        .map(|d| integrate_delayed(&history, d, a, p, &sc.ode))
        .collect::<Result<_, _>>()?;
    let mut art = RunArtifact::new(&sc.meta.name, "evolve-delayed");
    let mut gap: f64 = 0.0;
    for (d, traj) in specs.iter().zip(runs) {
        art.converged &= traj.converged;
        gap = gap.max(ne_residual(traj.terminal(), a, p)?);
        let label = if d.uniform { fmt_value(d.max_delay()) } else { d.taus.iter().map(|t| fmt_value(*t)).collect::<Vec<_>>().join("-") };
        art.tables.push(trajectory_table(&format!("{}_tau_{label}", sc.meta.name), &traj, a, p));
        art.trajectories.push(traj);
    }
    art.residuals.ne_gap = Some(gap);
    Ok(finish(art, start))
}

/// Distributed projected-gradient search for the provider equilibrium.
pub fn ne(sc: &Scenario) -> RunResult<RunArtifact> {
    let start = Instant::now();
    let p = &sc.params;
    let init = JointStrategy { x: sc.initial_state(), a: sc.initial_strategy.clone() };
    let rep = run_distributed_search(&init, p, &sc.ne)?;
    let mut art = RunArtifact::new(&sc.meta.name, "ne");
    art.converged = rep.converged;
    art.residuals.ne_gap = Some(rep.residuals.ne_gap);
    art.residuals.gqvi = Some(rep.residuals.gqvi);
    art.tables.push(iteration_table(&format!("{}_ne", sc.meta.name), &rep, p));
    art.equilibrium = Some(rep);
    Ok(finish(art, start))
}

/// Diagonalization over the leaders' best responses.
pub fn se(sc: &Scenario) -> RunResult<RunArtifact> {
    let start = Instant::now();
    let p = &sc.params;
    let rep = run_diagonalization(&sc.initial_strategy, p, &sc.mpec)?;
    let mut art = RunArtifact::new(&sc.meta.name, "se");
    art.converged = rep.converged;
    art.residuals.ne_gap = Some(ne_residual(&rep.final_point.x, &rep.final_point.a, p)?);
    art.residuals.kkt = Some(rep.kkt_residual);
    art.tables.push(cycle_table(&format!("{}_se", sc.meta.name), &rep, p));
    art.stackelberg = Some(rep);
    Ok(finish(art, start))
}

pub fn myopic(sc: &Scenario, rounds: usize) -> RunResult<RunArtifact> {
    let start = Instant::now();
    let p = &sc.params;
    let init = JointStrategy { x: sc.initial_state(), a: sc.initial_strategy.clone() };
    let rep = run_myopic(&init, p, &sc.mpec, rounds)?;
    let mut art = RunArtifact::new(&sc.meta.name, "myopic");
    art.converged = rep.fixed_point;
    if let Some(last) = rep.rounds.last() {
        art.residuals.ne_gap = Some(ne_residual(&last.x, &last.a, p)?);
    }
    art.tables.push(myopic_table(&format!("{}_myopic", sc.meta.name), &rep, p));
    art.myopic = Some(rep);
    Ok(finish(art, start))
}

/// Sets a sweepable quantity: `pu`, `pc`, `theta<j>`, `b<j>` or `population`.
pub fn set_variable(sc: &mut Scenario, var: &str, value: f64) -> RunResult<()> {
    let m = sc.params.n_csp();
    let csp_index = |prefix: &str| -> RunResult<Option<usize>> {
        match var.strip_prefix(prefix) {
            None => Ok(None),
            Some(k) => match k.parse::<usize>() {
                Ok(j) if (1..=m).contains(&j) => Ok(Some(j)),
                _ => Err(RunError::Usage(format!("`{var}`: CSP index must be in 1..={m}"))),
            },
        }
    };
    let a = &mut sc.initial_strategy;
    match var {
        "pu" => a.mno.pu = value,
        "pc" => a.mno.pc = value,
        "population" => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(RunError::Usage(format!("population must be a positive integer, got {value}")));
            }
            sc.params.population = value as usize;
        }
        _ => {
            if let Some(j) = csp_index("theta")? {
                a.csps[j - 1].theta = value;
            } else if let Some(j) = csp_index("b")? {
                a.csps[j - 1].bandwidth = value;
            } else {
                return Err(RunError::Usage(format!("unknown sweep variable `{var}`")));
            }
        }
    }
    Ok(())
}

/// Evenly spaced values `lo..=hi`; `n = 1` gives `lo`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Follower equilibrium at every value of `var`, holding everything else at
/// the scenario's initial point. Values where the follower solve fails are
/// skipped and counted in `failures`.
pub fn sweep(sc: &Scenario, var: &str, values: &[f64]) -> RunResult<(RunArtifact, Vec<String>)> {
    let start = Instant::now();
    let mut probe = sc.clone();
    set_variable(&mut probe, var, values.first().copied().unwrap_or(0.0))?;
    let results: Vec<RunResult<Vec<f64>>> = values
        .par_iter()
        .map(|v| {
            let mut s = sc.clone();
            set_variable(&mut s, var, *v)?;
            let (p, a) = (&s.params, &s.initial_strategy);
            a.validate_box(p)?;
            let x = follower_ess_oracle(a, p, &s.mpec, None, None)?;
            let mut row = vec![*v];
            row.extend(state_row(&x, a, p));
            row.push(ne_residual(&x, a, p)?);
            Ok(row)
        })
        .collect();
    let mut cols = vec![var.to_string()];
    cols.extend(state_columns(sc.params.n_csp()));
    cols.push("ne_gap".into());
    let mut table = Table::new(format!("{}_sweep_{var}", sc.meta.name), cols);
    let mut failures = Vec::new();
    let mut gap: f64 = 0.0;
    for (v, r) in values.iter().zip(results) {
        match r {
            Ok(row) => {
                gap = gap.max(*row.last().unwrap());
                table.rows.push(row);
            }
            Err(e) => failures.push(format!("{var} = {v}: {e}")),
        }
    }
    let mut art = RunArtifact::new(&sc.meta.name, "sweep");
    art.converged = failures.is_empty();
    art.residuals.ne_gap = Some(gap);
    art.tables.push(table);
    Ok((finish(art, start), failures))
}
