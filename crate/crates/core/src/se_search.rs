//! Stackelberg layer: leaders that anticipate the follower equilibrium.
//!
//! Each leader's problem maximizes its payoff over its own strategy subject to
//! the follower equilibrium written through its optimality system
//! `pi_i(x_i) - mu + lambda_i = 0`, `x_i lambda_i = 0`, `x, lambda >= 0`,
//! `sum x = 1`. Best responses are found by a two-level grid over the
//! leader's strategy box (the follower solved exactly per cell) and refined by
//! a relaxed-complementarity augmented-Lagrangian solve. Leaders are cycled in
//! a diagonalization loop; converged points are checked with a fitted
//! multiplier system and a reduced-Hessian second-order test.
//!
//! Everything here runs in `f64`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::market_model::{
    budget_slack, csp_payoff, mno_payoff, mu_payoff_vector, CspStrategy, MarketParams, MnoStrategy, PopulationState,
    ProviderStrategy,
};
use crate::ne_search::JointStrategy;
use crate::replicator::{follower_equilibrium, ne_residual, uniqueness_threshold, FollowerConfig};

/// Solver used for each leader's problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpecMethod {
    GridOracle,
    /// Grid warm start refined by the relaxed-complementarity solve.
    #[default]
    ScholtesRelaxation,
}

/// Order in which leaders see each other's updates within a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Every leader responds to the strategies at the start of the cycle.
    Jacobi,
    /// Leaders respond to the latest strategies, in index order.
    #[default]
    GaussSeidel,
}

/// Settings of the Stackelberg layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpecConfig {
    /// Complementarity relaxation levels, strictly decreasing.
    pub relax_schedule: Vec<f64>,
    /// Projected-gradient stationarity required of each relaxed solve.
    pub inner_tol: f64,
    /// Points per dimension of the coarse grid.
    pub grid: usize,
    /// Points per dimension of the refinement grid spanning one coarse cell
    /// on each side of the coarse optimum.
    pub refine: usize,
    pub method: MpecMethod,
    pub follower: FollowerConfig<f64>,
    /// Restart the follower from every vertex-biased start when uniqueness of
    /// the follower equilibrium is not guaranteed.
    pub multi_start: bool,
    /// Upper end of the bandwidth search (further capped by `budget / pc`);
    /// `None` leaves only the budget bound.
    pub bandwidth_cap: Option<f64>,
    pub fixed_bandwidth: bool,
    /// Hold the operator's prices at their initial values.
    pub fixed_mno: bool,
    /// Threshold on the scaled strategy change per cycle.
    pub eps: f64,
    pub max_cycles: usize,
    pub update: UpdateOrder,
    /// Re-solve the follower at the new strategies after each cycle instead
    /// of adopting the last leader's intermediate follower state.
    pub shared_solve: bool,
    pub max_inner: usize,
}

impl Default for MpecConfig {
    fn default() -> Self {
        Self {
            relax_schedule: (0..8).map(|k| 10f64.powi(-1 - k)).collect(),
            inner_tol: 1e-6,
            grid: 33,
            refine: 9,
            method: MpecMethod::ScholtesRelaxation,
            follower: FollowerConfig::default(),
            multi_start: true,
            bandwidth_cap: None,
            fixed_bandwidth: false,
            fixed_mno: false,
            eps: 1e-6,
            max_cycles: 60,
            update: UpdateOrder::GaussSeidel,
            shared_solve: false,
            max_inner: 20_000,
        }
    }
}

impl MpecConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.relax_schedule;
        if s.is_empty() || s.iter().any(|t| !(*t > 0.0)) || s.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(MarketError::InvalidParams("relax_schedule must be positive and strictly decreasing".into()));
        }
        if *s.last().unwrap() > 1e-8 {
            return Err(MarketError::InvalidParams("relax_schedule must end at or below 1e-8".into()));
        }
        if self.grid < 8 || self.refine < 3 {
            return Err(MarketError::InvalidParams("grid needs at least 8 points and refine at least 3".into()));
        }
        if !(self.inner_tol > 0.0 && self.eps > 0.0 && self.bandwidth_cap.is_none_or(|b| b > 0.0)) {
            return Err(MarketError::InvalidParams("inner_tol, eps and bandwidth_cap must be positive".into()));
        }
        self.follower.ode.validate()
    }
}

/// Follower multipliers: common payoff `mu_u` and the per-strategy
/// nonnegativity multipliers `lambda_u` (entry 0 is the opt-out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerKkt {
    pub mu_u: f64,
    pub lambda_u: Vec<f64>,
}

impl FollowerKkt {
    /// Multipliers implied by a follower equilibrium: `mu_u` is the common
    /// payoff on the support (0 when the opt-out is used) and
    /// `lambda_u_i = mu_u - pi_i(x_i)`, with the congestion term continued to
    /// `x_i = 0`.
    pub fn from_state(x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>, tol: f64) -> Self {
        let d = x.shares.len();
        let pi: Vec<f64> = (0..d).map(|i| follower_payoff(i, x.shares[i], a, p)).collect();
        let support: Vec<usize> = (0..d).filter(|i| x.shares[*i] > tol && strategy_in_play(*i, a, p)).collect();
        let mu_u = if support.contains(&0) || support.is_empty() {
            0.0
        } else {
            let w: f64 = support.iter().map(|i| x.shares[*i]).sum();
            support.iter().map(|i| x.shares[*i] * pi[*i]).sum::<f64>() / w
        };
        let lambda_u = (0..d)
            .map(|i| if !strategy_in_play(i, a, p) || support.contains(&i) { 0.0 } else { (mu_u - pi[i]).max(0.0) })
            .collect();
        Self { mu_u, lambda_u }
    }
}

/// Multipliers of one leader's problem, in scaled units (strategies relative
/// to their box ranges, payoffs relative to their magnitude).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeaderMultipliers {
    /// Budget rows, per CSP (a CSP only carries its own entry).
    pub lambda1: Vec<f64>,
    /// Share nonnegativity rows, per strategy.
    pub lambda2: Vec<f64>,
    /// Follower stationarity rows `h_i`, per strategy.
    pub mu1: Vec<f64>,
    /// Simplex row.
    pub mu2: f64,
    /// Follower multiplier nonnegativity rows, per strategy.
    pub nu: Vec<f64>,
    /// Lower and upper box bounds of the leader's own coordinates.
    pub kappa_lo: Vec<f64>,
    pub kappa_hi: Vec<f64>,
}

/// Multipliers of every leader; index 0 is the network operator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeaderKkt {
    pub leaders: Vec<LeaderMultipliers>,
}

/// Candidate equilibrium of the leader game together with the follower
/// multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpecPoint {
    pub a: ProviderStrategy<f64>,
    pub x: PopulationState<f64>,
    pub follower: FollowerKkt,
}

// ---------------------------------------------------------------------------
// Model pieces in the full variable vector w = (a, x, lambda_u, mu_u).

#[derive(Debug, Clone, Copy)]
struct Layout {
    m: usize,
}

impl Layout {
    fn n_a(&self) -> usize {
        2 + 2 * self.m
    }
    fn x(&self, i: usize) -> usize {
        self.n_a() + i
    }
    fn lam(&self, i: usize) -> usize {
        self.n_a() + self.m + 1 + i
    }
    fn mu(&self) -> usize {
        self.n_a() + 2 * (self.m + 1)
    }
    fn len(&self) -> usize {
        self.mu() + 1
    }
    fn theta(&self, j: usize) -> usize {
        2 * j
    }
    fn bw(&self, j: usize) -> usize {
        2 * j + 1
    }
}

fn strategy_in_play(i: usize, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> bool {
    if i == 0 {
        p.opt_out_allowed
    } else {
        a.csp(i).bandwidth > 0.0
    }
}

/// User payoff of strategy `i` with the congestion term continued to `x_i = 0`.
fn follower_payoff(i: usize, xi: f64, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let c = p.csp(i);
    let s = a.csp(i);
    let n = xi * p.n_users();
    c.gamma1 * (s.bandwidth / (c.overhead + n)).ln() + c.gamma2 * n.ln_1p() - (1.0 - s.theta) * a.mno.pu
}

fn unpack(w: &[f64], lay: Layout) -> (ProviderStrategy<f64>, Vec<f64>, Vec<f64>, f64) {
    let a = ProviderStrategy::from_slice(&w[..lay.n_a()]).expect("layout");
    let x = w[lay.x(0)..lay.x(0) + lay.m + 1].to_vec();
    let l = w[lay.lam(0)..lay.lam(0) + lay.m + 1].to_vec();
    (a, x, l, w[lay.mu()])
}

fn pack(a: &ProviderStrategy<f64>, x: &[f64], l: &[f64], mu: f64) -> Vec<f64> {
    let mut w = a.to_vec();
    w.extend_from_slice(x);
    w.extend_from_slice(l);
    w.push(mu);
    w
}

/// Leader payoff and its gradient in `w`; leader 0 is the operator.
fn objective(j: usize, w: &[f64], lay: Layout, p: &MarketParams<f64>) -> (f64, Vec<f64>) {
    let (a, x, _, _) = unpack(w, lay);
    let nu = p.n_users();
    let mut g = vec![0.0; lay.len()];
    if j == 0 {
        let bw: f64 = a.csps.iter().map(|c| c.bandwidth).sum();
        let sub: f64 = x[1..].iter().sum();
        g[0] = nu * sub;
        g[1] = bw;
        for i in 1..=lay.m {
            g[lay.bw(i)] = a.mno.pc;
            g[lay.x(i)] = a.mno.pu * nu;
        }
        (a.mno.pc * bw + a.mno.pu * nu * sub, g)
    } else {
        let c = p.csp(j);
        let s = a.csp(j);
        let n = x[j] * nu;
        g[0] = -s.theta * n;
        g[1] = -s.bandwidth;
        g[lay.theta(j)] = -a.mno.pu * n;
        g[lay.bw(j)] = -a.mno.pc;
        g[lay.x(j)] = nu * (c.sigma / (1.0 + n) - a.mno.pu * s.theta);
        (c.sigma * n.ln_1p() - a.mno.pu * s.theta * n - a.mno.pc * s.bandwidth, g)
    }
}

/// Follower stationarity row `h_i = pi_i - mu + lambda_i`.
fn follower_row(i: usize, w: &[f64], lay: Layout, p: &MarketParams<f64>) -> (f64, Vec<f64>) {
    let (a, x, l, mu) = unpack(w, lay);
    let mut g = vec![0.0; lay.len()];
    g[lay.lam(i)] = 1.0;
    g[lay.mu()] = -1.0;
    if i == 0 {
        return (l[0] - mu, g);
    }
    let c = p.csp(i);
    let s = a.csp(i);
    let nu = p.n_users();
    let n = x[i] * nu;
    g[0] = -(1.0 - s.theta);
    g[lay.theta(i)] = a.mno.pu;
    g[lay.bw(i)] = c.gamma1 / s.bandwidth;
    g[lay.x(i)] = nu * (c.gamma2 / (1.0 + n) - c.gamma1 / (c.overhead + n));
    (follower_payoff(i, x[i], &a, p) - mu + l[i], g)
}

/// Budget row `g_i` of CSP `i`.
fn budget_row(i: usize, w: &[f64], lay: Layout, p: &MarketParams<f64>) -> (f64, Vec<f64>) {
    let (a, x, _, _) = unpack(w, lay);
    let nu = p.n_users();
    let s = a.csp(i);
    let n = x[i] * nu;
    let mut g = vec![0.0; lay.len()];
    g[0] = s.theta * n;
    g[1] = s.bandwidth;
    g[lay.theta(i)] = a.mno.pu * n;
    g[lay.bw(i)] = a.mno.pc;
    g[lay.x(i)] = a.mno.pu * s.theta * nu;
    (a.mno.pu * s.theta * n + a.mno.pc * s.bandwidth - p.csp(i).budget_cap, g)
}

/// Strategy box of leader `j` in its own coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl LeaderBox {
    fn range(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }
    fn free(&self, k: usize) -> bool {
        self.range(k) > 0.0
    }
}

/// Box searched for leader `j`: price caps for the operator; `[0, 1]` for
/// sponsorship and `[0, min(bandwidth_cap, budget / pc)]` for bandwidth.
pub fn leader_box(j: usize, a: &ProviderStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<LeaderBox> {
    if j == 0 && cfg.fixed_mno {
        let u = [a.mno.pu, a.mno.pc];
        return Ok(LeaderBox { lo: u, hi: u });
    }
    if j == 0 {
        // Above the largest c_j / b_j every budget row fails.
        let pc_hi = (1..=p.n_csp())
            .filter(|i| a.csp(*i).bandwidth > 0.0)
            .map(|i| p.csp(i).budget_cap / a.csp(i).bandwidth)
            .fold(0.0, f64::max);
        let pc_hi = if pc_hi > 0.0 { pc_hi.min(p.pc_cap) } else { p.pc_cap };
        return Ok(LeaderBox { lo: [0.0, 0.0], hi: [p.pu_cap, pc_hi] });
    }
    if cfg.fixed_bandwidth {
        let b = a.csp(j).bandwidth;
        return Ok(LeaderBox { lo: [0.0, b], hi: [1.0, b] });
    }
    let budget_bound = if a.mno.pc > 0.0 { p.csp(j).budget_cap / a.mno.pc } else { f64::INFINITY };
    let hi = cfg.bandwidth_cap.unwrap_or(f64::INFINITY).min(budget_bound);
    if !hi.is_finite() {
        return Err(MarketError::InvalidParams("bandwidth search needs a finite bandwidth_cap when pc = 0".into()));
    }
    Ok(LeaderBox { lo: [0.0, 0.0], hi: [1.0, hi] })
}

/// Leaders that optimize: the operator is skipped under `fixed_mno`.
pub fn active_leaders(p: &MarketParams<f64>, cfg: &MpecConfig) -> Vec<usize> {
    let first = usize::from(cfg.fixed_mno);
    (first..=p.n_csp()).collect()
}

fn own_coords(j: usize, lay: Layout) -> [usize; 2] {
    if j == 0 {
        [0, 1]
    } else {
        [lay.theta(j), lay.bw(j)]
    }
}

fn with_leader(a: &ProviderStrategy<f64>, j: usize, u: [f64; 2]) -> ProviderStrategy<f64> {
    let mut out = a.clone();
    if j == 0 {
        out.mno = MnoStrategy { pu: u[0], pc: u[1] };
    } else {
        out.csps[j - 1] = CspStrategy { theta: u[0], bandwidth: u[1] };
    }
    out
}

fn leader_coords(a: &ProviderStrategy<f64>, j: usize) -> [f64; 2] {
    if j == 0 {
        [a.mno.pu, a.mno.pc]
    } else {
        [a.csp(j).theta, a.csp(j).bandwidth]
    }
}

/// Payoff of leader `j` (0 = operator) at `(x, a)`.
pub fn leader_payoff(j: usize, x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> f64 {
    if j == 0 {
        mno_payoff(x, a, p)
    } else {
        csp_payoff(j, x, a, p)
    }
}

fn budgets_ok(j: usize, x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> bool {
    let rows: Vec<usize> = if j == 0 { (1..=p.n_csp()).collect() } else { vec![j] };
    rows.iter().all(|i| budget_slack(*i, x, a, p) <= 1e-9 * p.csp(*i).budget_cap)
}

// ---------------------------------------------------------------------------
// Follower oracle and grid best responses.

/// Follower equilibrium at `a` from the barycenter (and `warm`, when given).
///
/// When uniqueness is not guaranteed and `multi_start` is set, vertex-biased
/// starts are added; among distinct equilibria the one maximizing `leader`'s
/// payoff is returned (the first found when `leader` is `None`).
pub fn follower_ess_oracle(
    a: &ProviderStrategy<f64>,
    p: &MarketParams<f64>,
    cfg: &MpecConfig,
    leader: Option<usize>,
    warm: Option<&PopulationState<f64>>,
) -> Result<PopulationState<f64>> {
    let m = p.n_csp();
    let bary = PopulationState::barycenter(m, p.opt_out_allowed);
    let mut starts = vec![bary.clone()];
    if let Some(w) = warm {
        let mix = 1e-6;
        starts.push(PopulationState::new_unchecked(
            w.shares.iter().zip(&bary.shares).map(|(s, b)| (1.0 - mix) * s + mix * b).collect(),
        ));
    }
    let unique = uniqueness_threshold(p).map(|r| r.holds_everywhere).unwrap_or(false);
    if cfg.multi_start && !unique {
        for k in 0..=m {
            if bary.shares[k] > 0.0 {
                starts.push(PopulationState::new_unchecked(
                    bary.shares.iter().enumerate().map(|(i, b)| 0.2 * b + if i == k { 0.8 } else { 0.0 }).collect(),
                ));
            }
        }
    }
    let mut found: Vec<PopulationState<f64>> = Vec::new();
    for s in &starts {
        let Ok(x) = follower_equilibrium(s, a, p, &cfg.follower) else { continue };
        if ne_residual(&x, a, p)? > 1e-8 {
            continue;
        }
        if found.iter().all(|y| y.dist_inf(&x) > 1e-6) {
            found.push(x);
        }
        if leader.is_none() {
            break;
        }
    }
    if found.is_empty() {
        // Retry with a longer horizon before giving up.
        let mut long = cfg.follower;
        long.ode.t_max *= 4.0;
        let x = follower_equilibrium(&bary, a, p, &long)?;
        if ne_residual(&x, a, p)? <= 1e-8 {
            return Ok(x);
        }
        return Err(MarketError::NotConverged("follower equilibrium residual above 1e-8".into()));
    }
    Ok(match leader {
        Some(j) => found
            .into_iter()
            .map(|x| (leader_payoff(j, &x, a, p), x))
            .max_by(|u, v| u.0.total_cmp(&v.0))
            .map(|(_, x)| x)
            .unwrap(),
        None => found.swap_remove(0),
    })
}

/// Result of a grid search over one leader's box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResponse {
    pub strategy: ProviderStrategy<f64>,
    pub x: PopulationState<f64>,
    pub payoff: f64,
    /// Spacing of the refinement grid in each coordinate.
    pub cell: [f64; 2],
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Two-level grid maximization; `eval` returns `None` for infeasible cells.
/// The incumbent is kept on ties.
type GridBest = ([f64; 2], f64, PopulationState<f64>, [f64; 2]);

fn grid_maximize<F>(bx: LeaderBox, incumbent: [f64; 2], grid: usize, refine: usize, eval: F) -> Option<GridBest>
where
    F: Fn([f64; 2]) -> Option<(f64, PopulationState<f64>)> + Sync,
{
    let run = |pts: Vec<[f64; 2]>| -> Option<([f64; 2], f64, PopulationState<f64>)> {
        pts.par_iter()
            .filter_map(|u| eval(*u).map(|(v, x)| (*u, v, x)))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(None, |best: Option<([f64; 2], f64, PopulationState<f64>)>, c| match &best {
                Some(b) if b.1 >= c.1 => best,
                _ => Some(c),
            })
    };
    let ax0 = axis(bx.lo[0], bx.hi[0], grid);
    let ax1 = axis(bx.lo[1], bx.hi[1], grid);
    let h = [
        if ax0.len() > 1 { ax0[1] - ax0[0] } else { 0.0 },
        if ax1.len() > 1 { ax1[1] - ax1[0] } else { 0.0 },
    ];
    let coarse: Vec<[f64; 2]> = ax0.iter().flat_map(|u| ax1.iter().map(move |v| [*u, *v])).collect();
    let (c, _, _) = run(coarse)?;
    let lo = [(c[0] - h[0]).max(bx.lo[0]), (c[1] - h[1]).max(bx.lo[1])];
    let hi = [(c[0] + h[0]).min(bx.hi[0]), (c[1] + h[1]).min(bx.hi[1])];
    let r0 = axis(lo[0], hi[0], refine);
    let r1 = axis(lo[1], hi[1], refine);
    let cell = [
        if r0.len() > 1 { r0[1] - r0[0] } else { 0.0 },
        if r1.len() > 1 { r1[1] - r1[0] } else { 0.0 },
    ];
    let mut fine: Vec<[f64; 2]> = r0.iter().flat_map(|u| r1.iter().map(move |v| [*u, *v])).collect();
    fine.push(c);
    let (u, v, x) = run(fine)?;
    if let Some((vi, xi)) = eval(incumbent) {
        if vi >= v - 1e-12 * v.abs().max(1.0) {
            return Some((incumbent, vi, xi, cell));
        }
    }
    Some((u, v, x, cell))
}

/// Leader `j`'s best response to the other leaders' strategies in `a`,
/// anticipating the follower equilibrium, by a coarse grid over its box
/// followed by one refinement around the best coarse cell. Cells whose
/// induced follower state violates a budget row the leader is subject to are
/// skipped.
pub fn best_response_grid(
    j: usize,
    a: &ProviderStrategy<f64>,
    p: &MarketParams<f64>,
    cfg: &MpecConfig,
    warm: Option<&PopulationState<f64>>,
) -> Result<GridResponse> {
    let bx = leader_box(j, a, p, cfg)?;
    let eval = |u: [f64; 2]| -> Option<(f64, PopulationState<f64>)> {
        let a2 = with_leader(a, j, u);
        let x = follower_ess_oracle(&a2, p, cfg, Some(j), warm).ok()?;
        budgets_ok(j, &x, &a2, p).then(|| (leader_payoff(j, &x, &a2, p), x))
    };
    let incumbent = clamp_to_box(leader_coords(a, j), bx);
    let (u, payoff, x, cell) = grid_maximize(bx, incumbent, cfg.grid, cfg.refine, eval)
        .ok_or_else(|| MarketError::Infeasible(format!("no feasible grid cell for leader {j}")))?;
    Ok(GridResponse { strategy: with_leader(a, j, u), x, payoff, cell })
}

fn clamp_to_box(u: [f64; 2], bx: LeaderBox) -> [f64; 2] {
    [u[0].clamp(bx.lo[0], bx.hi[0]), u[1].clamp(bx.lo[1], bx.hi[1])]
}

/// Best response of leader `j` to a fixed follower state (no anticipation).
pub fn best_response_fixed_state(
    j: usize,
    a: &ProviderStrategy<f64>,
    x: &PopulationState<f64>,
    p: &MarketParams<f64>,
    cfg: &MpecConfig,
) -> Result<GridResponse> {
    let bx = leader_box(j, a, p, cfg)?;
    let eval = |u: [f64; 2]| -> Option<(f64, PopulationState<f64>)> {
        let a2 = with_leader(a, j, u);
        budgets_ok(j, x, &a2, p).then(|| (leader_payoff(j, x, &a2, p), x.clone()))
    };
    let incumbent = clamp_to_box(leader_coords(a, j), bx);
    let (u, payoff, x, cell) = grid_maximize(bx, incumbent, cfg.grid, cfg.refine, eval)
        .ok_or_else(|| MarketError::Infeasible(format!("no feasible grid cell for leader {j}")))?;
    Ok(GridResponse { strategy: with_leader(a, j, u), x, payoff, cell })
}

// ---------------------------------------------------------------------------
// Scaled coordinates shared by the relaxed solve, the multiplier fit and the
// second-order check.

#[derive(Debug, Clone)]
struct Scaling {
    lay: Layout,
    /// Scale of every entry of `w`.
    w: Vec<f64>,
    /// Payoff unit for follower rows and multipliers.
    pay: f64,
    /// Unit of each leader objective.
    obj: Vec<f64>,
}

impl Scaling {
    fn at(point: &EpecPoint, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<Self> {
        let m = p.n_csp();
        let lay = Layout { m };
        let mut w = vec![1.0; lay.len()];
        for j in 0..=m {
            let bx = leader_box(j, &point.a, p, cfg)?;
            let c = own_coords(j, lay);
            for k in 0..2 {
                w[c[k]] = if bx.free(k) { bx.range(k) } else { leader_coords(&point.a, j)[k].abs().max(1.0) };
            }
        }
        let pi = (0..=m).map(|i| follower_payoff(i, point.x.shares[i], &point.a, p).abs());
        let pay = pi.filter(|v| v.is_finite()).fold(1.0, f64::max).max(point.follower.mu_u.abs());
        for i in 0..=m {
            w[lay.lam(i)] = pay;
        }
        w[lay.mu()] = pay;
        let obj = (0..=m).map(|j| leader_payoff(j, &point.x, &point.a, p).abs().max(1.0)).collect();
        Ok(Self { lay, w, pay, obj })
    }
}

/// Strategies present in the follower problem.
fn in_play(a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Vec<usize> {
    (0..=p.n_csp()).filter(|i| strategy_in_play(*i, a, p)).collect()
}

/// Decision coordinates of leader `j`: its free own coordinates, then shares,
/// follower multipliers of the strategies in play, and `mu_u`.
fn decision_coords(j: usize, a: &ProviderStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig, lay: Layout) -> Result<Vec<usize>> {
    let bx = leader_box(j, a, p, cfg)?;
    let own = own_coords(j, lay);
    let mut v: Vec<usize> = (0..2).filter(|k| bx.free(*k)).map(|k| own[k]).collect();
    let play = in_play(a, p);
    v.extend(play.iter().map(|i| lay.x(*i)));
    v.extend(play.iter().map(|i| lay.lam(*i)));
    v.push(lay.mu());
    Ok(v)
}

// ---------------------------------------------------------------------------
// Relaxed-complementarity solve.

/// One stage of the relaxation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub t: f64,
    /// Largest `x_i lambda_i` in scaled units.
    pub complementarity: f64,
    /// Projected-gradient norm of the Lagrangian in scaled units.
    pub stationarity: f64,
    pub infeasibility: f64,
    pub inner_iterations: usize,
}

/// Outcome of [`solve_local_mpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpecSolution {
    pub strategy: ProviderStrategy<f64>,
    pub x: PopulationState<f64>,
    pub follower: FollowerKkt,
    pub payoff: f64,
    pub stages: Vec<StageReport>,
    /// Grid response used as the warm start.
    pub grid: GridResponse,
}

struct Relaxed<'a> {
    j: usize,
    p: &'a MarketParams<f64>,
    lay: Layout,
    sc: &'a Scaling,
    coords: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    base: Vec<f64>,
    play: Vec<usize>,
    budgets: Vec<usize>,
}

impl Relaxed<'_> {
    fn full(&self, z: &[f64]) -> Vec<f64> {
        let mut w = self.base.clone();
        for (k, c) in self.coords.iter().enumerate() {
            w[*c] = z[k] * self.sc.w[*c];
        }
        w
    }

    fn restrict(&self, g: &[f64], unit: f64) -> Vec<f64> {
        self.coords.iter().map(|c| g[*c] * self.sc.w[*c] / unit).collect()
    }

    /// Objective (minimized), equality rows and inequality rows with
    /// gradients in `z`.
    #[allow(clippy::type_complexity)]
    fn eval(&self, z: &[f64], t: f64) -> (f64, Vec<f64>, Vec<(f64, Vec<f64>)>, Vec<(f64, Vec<f64>)>) {
        let w = self.full(z);
        let (f, gf) = objective(self.j, &w, self.lay, self.p);
        let unit = self.sc.obj[self.j];
        let mut eq = Vec::new();
        for i in &self.play {
            let (v, g) = follower_row(*i, &w, self.lay, self.p);
            eq.push((v / self.sc.pay, self.restrict(&g, self.sc.pay)));
        }
        let mut gs = vec![0.0; self.coords.len()];
        let mut sum = -1.0;
        for i in &self.play {
            sum += w[self.lay.x(*i)];
            let k = self.coords.iter().position(|c| *c == self.lay.x(*i)).unwrap();
            gs[k] = 1.0;
        }
        eq.push((sum, gs));
        let mut ineq = Vec::new();
        for i in &self.play {
            let kx = self.coords.iter().position(|c| *c == self.lay.x(*i)).unwrap();
            let kl = self.coords.iter().position(|c| *c == self.lay.lam(*i)).unwrap();
            let mut g = vec![0.0; self.coords.len()];
            g[kx] = z[kl];
            g[kl] = z[kx];
            ineq.push((z[kx] * z[kl] - t, g));
        }
        for i in &self.budgets {
            let (v, g) = budget_row(*i, &w, self.lay, self.p);
            let cap = self.p.csp(*i).budget_cap;
            ineq.push((v / cap, self.restrict(&g, cap)));
        }
        (-f / unit, self.restrict(&gf, unit).iter().map(|v| -v).collect(), eq, ineq)
    }

    fn project(&self, z: &mut [f64]) {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = zk.clamp(self.lo[k], self.hi[k]);
        }
    }
}

struct AlState {
    y_eq: Vec<f64>,
    y_in: Vec<f64>,
    rho: f64,
}

fn al_value_grad(r: &Relaxed, z: &[f64], t: f64, st: &AlState) -> (f64, Vec<f64>) {
    let (f, mut g, eq, ineq) = r.eval(z, t);
    let mut v = f;
    for (k, (c, gc)) in eq.iter().enumerate() {
        v += st.y_eq[k] * c + 0.5 * st.rho * c * c;
        let s = st.y_eq[k] + st.rho * c;
        for (gi, ci) in g.iter_mut().zip(gc) {
            *gi += s * ci;
        }
    }
    for (k, (c, gc)) in ineq.iter().enumerate() {
        let s = (st.y_in[k] + st.rho * c).max(0.0);
        v += (s * s - st.y_in[k] * st.y_in[k]) / (2.0 * st.rho);
        for (gi, ci) in g.iter_mut().zip(gc) {
            *gi += s * ci;
        }
    }
    (v, g)
}

fn projected_gradient_norm(r: &Relaxed, z: &[f64], g: &[f64]) -> f64 {
    let mut y: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - b).collect();
    r.project(&mut y);
    y.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Two-metric projected steps: coordinates held at a bound by the gradient
/// move along the negative gradient, the rest along a Newton direction of the
/// free block (finite-difference Hessian, eigenvalues floored). Falls back to
/// a Barzilai-Borwein gradient step when the Newton step gives no decrease.
fn minimize_al(r: &Relaxed, z: &mut Vec<f64>, t: f64, st: &AlState, tol: f64, max_iter: usize) -> (usize, f64) {
    let n = z.len();
    let (mut v, mut g) = al_value_grad(r, z, t, st);
    let mut bb = 1.0 / (1.0 + st.rho);
    for it in 0..max_iter {
        let pg = projected_gradient_norm(r, z, &g);
        if pg <= tol {
            return (it, pg);
        }
        let eps = pg.min(1e-8);
        let held: Vec<bool> = (0..n)
            .map(|k| (z[k] <= r.lo[k] + eps && g[k] > 0.0) || (z[k] >= r.hi[k] - eps && g[k] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|k| !held[*k]).collect();
        let mut dir: Vec<f64> = g.iter().map(|x| -x).collect();
        if !free.is_empty() {
            let mut h = DMatrix::zeros(free.len(), free.len());
            for (c, k) in free.iter().enumerate() {
                let step = 1e-7 * z[*k].abs().max(1.0);
                let mut zp = z.clone();
                zp[*k] += step;
                let (_, gp) = al_value_grad(r, &zp, t, st);
                for (rr, kk) in free.iter().enumerate() {
                    h[(rr, c)] = (gp[*kk] - g[*kk]) / step;
                }
            }
            let h = (&h + h.transpose()) * 0.5;
            let eig = SymmetricEigen::new(h);
            let top = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let floor = (1e-10 * top).max(1e-12);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|k| g[*k]));
            let coef = eig.eigenvectors.transpose() * gf;
            let scaled = DVector::from_iterator(free.len(), (0..free.len()).map(|i| coef[i] / eig.eigenvalues[i].max(floor)));
            let d = eig.eigenvectors * scaled;
            for (c, k) in free.iter().enumerate() {
                dir[*k] = -d[c];
            }
        }
        let mut accepted = false;
        let mut s = 1.0;
        for _ in 0..40 {
            let mut zn: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            r.project(&mut zn);
            let decrease: f64 = g.iter().zip(zn.iter().zip(z.iter())).map(|(a, (b, c))| a * (b - c)).sum();
            let (vn, gn) = al_value_grad(r, &zn, t, st);
            if decrease < 0.0 && vn <= v + 1e-4 * decrease {
                *z = zn;
                v = vn;
                g = gn;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if accepted {
            continue;
        }
        let mut s = bb;
        loop {
            let mut zn: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            r.project(&mut zn);
            let d: Vec<f64> = zn.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
            let (vn, gn) = al_value_grad(r, &zn, t, st);
            let decrease: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            if vn <= v + 1e-4 * decrease || s < 1e-20 {
                let dg: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy: f64 = d.iter().zip(&dg).map(|(a, b)| a * b).sum();
                let ss: f64 = d.iter().map(|a| a * a).sum();
                bb = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e6) } else { (2.0 * s).min(1e6) };
                *z = zn;
                v = vn;
                g = gn;
                break;
            }
            s *= 0.5;
        }
    }
    let pg = projected_gradient_norm(r, z, &g);
    (max_iter, pg)
}

/// Augmented-Lagrangian loop for one relaxation level. Returns the final
/// projected-gradient norm, constraint violation and inner iteration count.
fn al_stage(r: &Relaxed, z: &mut Vec<f64>, t: f64, st: &mut AlState, cfg: &MpecConfig) -> (f64, f64, usize) {
    let mut prev_viol = f64::INFINITY;
    let mut inner_total = 0;
    let mut pg = f64::INFINITY;
    let mut viol = f64::INFINITY;
    for _outer in 0..60 {
        let (it, g) = minimize_al(r, z, t, st, cfg.inner_tol, cfg.max_inner);
        inner_total += it;
        pg = g;
        let (_, _, eq, ineq) = r.eval(z, t);
        viol = eq.iter().map(|(c, _)| c.abs()).chain(ineq.iter().map(|(c, _)| c.max(0.0))).fold(0.0, f64::max);
        for (y, (c, _)) in st.y_eq.iter_mut().zip(&eq) {
            *y += st.rho * c;
        }
        for (y, (c, _)) in st.y_in.iter_mut().zip(&ineq) {
            *y = (*y + st.rho * c).max(0.0);
        }
        if viol <= 1e-10 && pg <= cfg.inner_tol {
            break;
        }
        if viol > 1e-10 && viol > 0.25 * prev_viol {
            st.rho = (st.rho * 10.0).min(1e6);
        }
        prev_viol = viol;
    }
    (pg, viol, inner_total)
}

/// Leader `j`'s problem with the follower optimality system as constraints,
/// solved along the relaxation path `x_i lambda_i <= t_k`.
///
/// Each stage runs an augmented-Lagrangian loop whose subproblems are solved
/// by projected gradient in scaled coordinates, warm-started from the
/// previous stage; the first stage starts from the grid best response and its
/// exact follower state. A stage that ends infeasible is rerun with a stiff
/// penalty from the previous stage's point and then from the grid point.
pub fn solve_local_mpec(
    j: usize,
    a: &ProviderStrategy<f64>,
    p: &MarketParams<f64>,
    cfg: &MpecConfig,
    warm: Option<&PopulationState<f64>>,
) -> Result<MpecSolution> {
    cfg.validate()?;
    let grid = best_response_grid(j, a, p, cfg, warm)?;
    solve_from_grid(j, grid, p, cfg)
}

fn solve_from_grid(j: usize, grid: GridResponse, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<MpecSolution> {
    let m = p.n_csp();
    let lay = Layout { m };
    let a0 = grid.strategy.clone();
    let fk = FollowerKkt::from_state(&grid.x, &a0, p, cfg.follower.support_tol);
    let start = EpecPoint { a: a0.clone(), x: grid.x.clone(), follower: fk };
    let sc = Scaling::at(&start, p, cfg)?;
    let coords = decision_coords(j, &a0, p, cfg, lay)?;
    let bx = leader_box(j, &a0, p, cfg)?;
    let own = own_coords(j, lay);
    let mut lo = Vec::with_capacity(coords.len());
    let mut hi = Vec::with_capacity(coords.len());
    for c in &coords {
        if let Some(k) = own.iter().position(|o| o == c) {
            let floor = if j > 0 && k == 1 { bx.hi[1] * 1e-9 } else { bx.lo[k] };
            lo.push(floor / sc.w[*c]);
            hi.push(bx.hi[k] / sc.w[*c]);
        } else if *c == lay.mu() {
            lo.push(-1e3);
            hi.push(1e3);
        } else if *c >= lay.lam(0) {
            lo.push(0.0);
            hi.push(1e3);
        } else {
            lo.push(0.0);
            hi.push(1.0);
        }
    }
    let base = pack(&a0, &start.x.shares, &start.follower.lambda_u, start.follower.mu_u);
    let play = in_play(&a0, p);
    let budgets: Vec<usize> = if j == 0 { (1..=m).collect() } else { vec![j] };
    let r = Relaxed { j, p, lay, sc: &sc, coords: coords.clone(), lo, hi, base: base.clone(), play, budgets };
    let mut z: Vec<f64> = coords.iter().map(|c| base[*c] / sc.w[*c]).collect();
    r.project(&mut z);
    let mut stages = Vec::new();
    let (_, _, eq0, in0) = r.eval(&z, cfg.relax_schedule[0]);
    let fresh = |rho: f64| AlState { y_eq: vec![0.0; eq0.len()], y_in: vec![0.0; in0.len()], rho };
    let mut st = fresh(10.0);
    let z0 = z.clone();
    for (k, t) in cfg.relax_schedule.iter().enumerate() {
        let feasible = z.clone();
        let (mut pg, mut viol, mut inner_total) = al_stage(&r, &mut z, *t, &mut st, cfg);
        // Restart with a stiff penalty, first from the previous stage, then
        // from the grid point, which is complementary and so feasible for
        // every t.
        for restart in [feasible, z0.clone()] {
            if viol <= 1e-6 {
                break;
            }
            z = restart;
            st = fresh(1e4);
            let (g, v, it) = al_stage(&r, &mut z, *t, &mut st, cfg);
            (pg, viol, inner_total) = (g, v, inner_total + it);
        }
        let w = r.full(&z);
        let comp = r
            .play
            .iter()
            .map(|i| w[lay.x(*i)] * w[lay.lam(*i)] / sc.pay)
            .fold(0.0, f64::max);
        stages.push(StageReport { t: *t, complementarity: comp, stationarity: pg, infeasibility: viol, inner_iterations: inner_total });
        if !(viol <= 1e-6) {
            return Err(MarketError::MpecStage { stage: k, reason: format!("infeasibility {viol:e}"), iterate: w });
        }
    }
    let last = stages.last().unwrap();
    let t_last = *cfg.relax_schedule.last().unwrap();
    let w = r.full(&z);
    if !(last.stationarity <= cfg.inner_tol && last.complementarity <= 10.0 * t_last) {
        return Err(MarketError::MpecStage {
            stage: stages.len() - 1,
            reason: format!("stationarity {:e}, complementarity {:e}", last.stationarity, last.complementarity),
            iterate: w,
        });
    }
    let (a, x, l, mu) = unpack(&w, lay);
    let x = PopulationState::new_unchecked(x.iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
    let payoff = leader_payoff(j, &x, &a, p);
    Ok(MpecSolution { strategy: a, x, follower: FollowerKkt { mu_u: mu, lambda_u: l }, payoff, stages, grid })
}

// ---------------------------------------------------------------------------
// Multiplier fit, KKT residual and second-order check.

/// Constraint row of leader `j` in scaled coordinates, restricted to its
/// decision coordinates.
struct Row {
    grad: Vec<f64>,
    /// Inequality row: enters the Lagrangian as `+m * grad` with `m >= 0`.
    signed: bool,
    kind: RowKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Follower(usize),
    Simplex,
    Share(usize),
    FollowerMult(usize),
    Budget(usize),
    BoxLo(usize),
    BoxHi(usize),
}

/// Rows active at `point` for leader `j`, the scaled objective gradient and
/// the decision coordinates.
fn active_rows(j: usize, point: &EpecPoint, p: &MarketParams<f64>, cfg: &MpecConfig, sc: &Scaling) -> Result<(Vec<Row>, Vec<f64>, Vec<usize>)> {
    let lay = sc.lay;
    let m = p.n_csp();
    let w = pack(&point.a, &point.x.shares, &point.follower.lambda_u, point.follower.mu_u);
    let coords = decision_coords(j, &point.a, p, cfg, lay)?;
    let restrict = |g: &[f64], unit: f64| -> Vec<f64> { coords.iter().map(|c| g[*c] * sc.w[*c] / unit).collect() };
    let unit_vec = |c: usize| -> Vec<f64> { coords.iter().map(|k| if *k == c { 1.0 } else { 0.0 }).collect() };
    let play = in_play(&point.a, p);
    let tol = cfg.follower.support_tol;
    let mut rows = Vec::new();
    for i in &play {
        let (_, g) = follower_row(*i, &w, lay, p);
        rows.push(Row { grad: restrict(&g, sc.pay), signed: false, kind: RowKind::Follower(*i) });
    }
    let mut gs = vec![0.0; lay.len()];
    for i in &play {
        gs[lay.x(*i)] = 1.0;
    }
    rows.push(Row { grad: restrict(&gs, 1.0), signed: false, kind: RowKind::Simplex });
    for i in &play {
        if point.x.shares[*i] <= tol {
            rows.push(Row { grad: unit_vec(lay.x(*i)), signed: false, kind: RowKind::Share(*i) });
        } else {
            rows.push(Row { grad: unit_vec(lay.lam(*i)), signed: false, kind: RowKind::FollowerMult(*i) });
        }
    }
    let budgets: Vec<usize> = if j == 0 { (1..=m).collect() } else { vec![j] };
    for i in budgets {
        let (v, g) = budget_row(i, &w, lay, p);
        let cap = p.csp(i).budget_cap;
        if v >= -1e-7 * cap {
            // Enters as -lambda g.
            rows.push(Row { grad: restrict(&g, cap).iter().map(|x| -x).collect(), signed: true, kind: RowKind::Budget(i) });
        }
    }
    let bx = leader_box(j, &point.a, p, cfg)?;
    let own = own_coords(j, lay);
    let u = leader_coords(&point.a, j);
    for k in 0..2 {
        if !bx.free(k) {
            continue;
        }
        let gap = 1e-7 * bx.range(k);
        if u[k] - bx.lo[k] <= gap {
            rows.push(Row { grad: unit_vec(own[k]), signed: true, kind: RowKind::BoxLo(k) });
        }
        if bx.hi[k] - u[k] <= gap {
            rows.push(Row { grad: unit_vec(own[k]).iter().map(|x| -x).collect(), signed: true, kind: RowKind::BoxHi(k) });
        }
    }
    let (_, gf) = objective(j, &w, lay, p);
    Ok((rows, restrict(&gf, sc.obj[j]), coords))
}

/// Least squares `min |grad_f + sum m_r row_r|` with nonnegative signed
/// multipliers, by enumerating which signed multipliers are zero.
fn fit_rows(rows: &[Row], gf: &[f64]) -> (Vec<f64>, f64) {
    let n = gf.len();
    let signed: Vec<usize> = (0..rows.len()).filter(|k| rows[*k].signed).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let subsets = 1usize << signed.len().min(16);
    for mask in 0..subsets {
        let dropped: Vec<usize> = signed.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, k)| *k).collect();
        let keep: Vec<usize> = (0..rows.len()).filter(|k| !dropped.contains(k)).collect();
        let mut mult = vec![0.0; rows.len()];
        if !keep.is_empty() {
            let a = DMatrix::from_fn(n, keep.len(), |r, c| rows[keep[c]].grad[r]);
            let b = DVector::from_iterator(n, gf.iter().map(|v| -v));
            let svd = a.svd(true, true);
            let Ok(sol) = svd.solve(&b, 1e-12) else { continue };
            for (c, k) in keep.iter().enumerate() {
                mult[*k] = sol[c];
            }
        }
        if signed.iter().any(|k| mult[*k] < -1e-12) {
            continue;
        }
        let res = stationarity(rows, gf, &mult);
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((mult, res));
        }
    }
    best.unwrap_or_else(|| (vec![0.0; rows.len()], stationarity(rows, gf, &vec![0.0; rows.len()])))
}

fn stationarity(rows: &[Row], gf: &[f64], mult: &[f64]) -> f64 {
    let mut r = gf.to_vec();
    for (row, m) in rows.iter().zip(mult) {
        for (ri, gi) in r.iter_mut().zip(&row.grad) {
            *ri += m * gi;
        }
    }
    r.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

fn to_multipliers(rows: &[Row], mult: &[f64], m: usize) -> LeaderMultipliers {
    let mut out = LeaderMultipliers {
        lambda1: vec![0.0; m],
        lambda2: vec![0.0; m + 1],
        mu1: vec![0.0; m + 1],
        mu2: 0.0,
        nu: vec![0.0; m + 1],
        kappa_lo: vec![0.0; 2],
        kappa_hi: vec![0.0; 2],
    };
    for (row, v) in rows.iter().zip(mult) {
        match row.kind {
            RowKind::Follower(i) => out.mu1[i] = *v,
            RowKind::Simplex => out.mu2 = *v,
            RowKind::Share(i) => out.lambda2[i] = *v,
            RowKind::FollowerMult(i) => out.nu[i] = *v,
            RowKind::Budget(i) => out.lambda1[i - 1] = *v,
            RowKind::BoxLo(k) => out.kappa_lo[k] = *v,
            RowKind::BoxHi(k) => out.kappa_hi[k] = *v,
        }
    }
    out
}

fn from_multipliers(rows: &[Row], lm: &LeaderMultipliers) -> Vec<f64> {
    rows.iter()
        .map(|row| match row.kind {
            RowKind::Follower(i) => lm.mu1.get(i).copied().unwrap_or(0.0),
            RowKind::Simplex => lm.mu2,
            RowKind::Share(i) => lm.lambda2.get(i).copied().unwrap_or(0.0),
            RowKind::FollowerMult(i) => lm.nu.get(i).copied().unwrap_or(0.0),
            RowKind::Budget(i) => lm.lambda1.get(i - 1).copied().unwrap_or(0.0),
            RowKind::BoxLo(k) => lm.kappa_lo.get(k).copied().unwrap_or(0.0),
            RowKind::BoxHi(k) => lm.kappa_hi.get(k).copied().unwrap_or(0.0),
        })
        .collect()
}

/// Multipliers of every leader fitted by sign-constrained least squares on
/// its stationarity rows.
pub fn fit_multipliers(point: &EpecPoint, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<LeaderKkt> {
    let sc = Scaling::at(point, p, cfg)?;
    let mut leaders = Vec::with_capacity(p.n_csp() + 1);
    for j in 0..=p.n_csp() {
        if !active_leaders(p, cfg).contains(&j) {
            leaders.push(LeaderMultipliers::default());
            continue;
        }
        let (rows, gf, _) = active_rows(j, point, p, cfg, &sc)?;
        let (mult, _) = fit_rows(&rows, &gf);
        leaders.push(to_multipliers(&rows, &mult, p.n_csp()));
    }
    Ok(LeaderKkt { leaders })
}

/// Largest violation of the concatenated optimality system at `point` with
/// the given multipliers, in scaled units: leader stationarity, follower rows
/// `h_i`, the simplex row, budget feasibility and complementarity (both the
/// `min` and product forms), follower complementarity and sign conditions.
pub fn kkt_residual(point: &EpecPoint, mult: &LeaderKkt, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<f64> {
    let m = p.n_csp();
    if mult.leaders.len() != m + 1 {
        return Err(MarketError::Dimension { expected: m + 1, got: mult.leaders.len() });
    }
    let sc = Scaling::at(point, p, cfg)?;
    let lay = sc.lay;
    let w = pack(&point.a, &point.x.shares, &point.follower.lambda_u, point.follower.mu_u);
    let mut worst: f64 = 0.0;
    for j in active_leaders(p, cfg) {
        let (rows, gf, _) = active_rows(j, point, p, cfg, &sc)?;
        let v = from_multipliers(&rows, &mult.leaders[j]);
        worst = worst.max(stationarity(&rows, &gf, &v));
        for (row, mv) in rows.iter().zip(&v) {
            if row.signed {
                worst = worst.max(-mv);
            }
        }
        for (i, l1) in mult.leaders[j].lambda1.iter().enumerate() {
            let (g, _) = budget_row(i + 1, &w, lay, p);
            let g = g / p.csp(i + 1).budget_cap;
            worst = worst.max((-g).min(*l1).abs()).max((g * l1).abs()).max(-l1);
        }
    }
    let play = in_play(&point.a, p);
    let mut sum = -1.0;
    for i in &play {
        let (h, _) = follower_row(*i, &w, lay, p);
        worst = worst.max(h.abs() / sc.pay);
        let (xi, li) = (point.x.shares[*i], point.follower.lambda_u[*i] / sc.pay);
        worst = worst.max((xi * li).abs()).max(-xi).max(-li);
        sum += xi;
    }
    worst = worst.max(sum.abs());
    for i in 1..=m {
        worst = worst.max((budget_slack(i, &point.x, &point.a, p) / p.csp(i).budget_cap).max(0.0));
    }
    Ok(worst)
}

/// Second-order report of one leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsocLeader {
    /// Leader index, 0 for the operator.
    pub leader: usize,
    /// Eigenvalues of the reduced Hessian of the minimization-form Lagrangian.
    pub spectrum: Vec<f64>,
    pub null_space_dim: usize,
    /// Whether the active-constraint matrix has full row rank.
    pub full_row_rank: bool,
    pub pass: bool,
}

/// Outcome of [`ssoc_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsocReport {
    pub pass: bool,
    pub leaders: Vec<SsocLeader>,
}

type RowsAt<'a> = dyn Fn(&[f64]) -> Result<(Vec<Row>, Vec<f64>)> + 'a;

fn lagrangian_gradient(w: &[f64], rows_of: &RowsAt, mult: &LeaderMultipliers) -> Result<Vec<f64>> {
    let (rows, gf) = rows_of(w)?;
    let v = from_multipliers(&rows, mult);
    let mut g = gf;
    for (row, m) in rows.iter().zip(&v) {
        for (gi, ri) in g.iter_mut().zip(&row.grad) {
            *gi += m * ri;
        }
    }
    Ok(g)
}

/// Reduced-Hessian test per leader: the Hessian of the minimization-form
/// Lagrangian projected onto the null space of the equality rows and of the
/// active rows with nonzero multipliers must be positive definite (smallest
/// eigenvalue above `1e-8`). An empty null space passes.
pub fn ssoc_check(point: &EpecPoint, mult: &LeaderKkt, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<SsocReport> {
    let sc = Scaling::at(point, p, cfg)?;
    let lay = sc.lay;
    let mut leaders = Vec::with_capacity(p.n_csp() + 1);
    for j in active_leaders(p, cfg) {
        let (rows, _, coords) = active_rows(j, point, p, cfg, &sc)?;
        let lm = &mult.leaders[j];
        let v = from_multipliers(&rows, lm);
        let used: Vec<&Row> = rows.iter().zip(&v).filter(|(r, m)| !r.signed || m.abs() > 1e-10).map(|(r, _)| r).collect();
        let n = coords.len();
        let jac = DMatrix::from_fn(used.len(), n, |r, c| used[r].grad[c]);
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * smax.max(1.0)).count();
        let full_row_rank = rank == used.len();
        // Null space from the eigenvectors of J^T J with vanishing eigenvalues.
        let gram = jac.transpose() * &jac;
        let eig = SymmetricEigen::new(gram);
        let thresh = 1e-10 * smax.max(1.0).powi(2);
        let basis: Vec<DVector<f64>> =
            (0..n).filter(|k| eig.eigenvalues[*k] <= thresh).map(|k| eig.eigenvectors.column(k).into_owned()).collect();
        if basis.is_empty() {
            leaders.push(SsocLeader { leader: j, spectrum: vec![], null_space_dim: 0, full_row_rank, pass: true });
            continue;
        }
        let z = DMatrix::from_columns(&basis);
        // Hessian by central differences of the scaled Lagrangian gradient.
        let base_w = pack(&point.a, &point.x.shares, &point.follower.lambda_u, point.follower.mu_u);
        let rows_of = |w: &[f64]| -> Result<(Vec<Row>, Vec<f64>)> {
            let (a, x, l, mu) = unpack(w, lay);
            let pt = EpecPoint { a, x: PopulationState::new_unchecked(x), follower: FollowerKkt { mu_u: mu, lambda_u: l } };
            let (r, gf, _) = active_rows_with(j, &pt, p, cfg, &sc, &rows)?;
            Ok((r, gf))
        };
        let mut hess = DMatrix::zeros(n, n);
        for (k, c) in coords.iter().enumerate() {
            let h = 1e-6;
            let mut wp = base_w.clone();
            let mut wm = base_w.clone();
            wp[*c] += h * sc.w[*c];
            wm[*c] -= h * sc.w[*c];
            let gp = lagrangian_gradient(&wp, &rows_of, lm)?;
            let gm = lagrangian_gradient(&wm, &rows_of, lm)?;
            for r in 0..n {
                hess[(r, k)] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        // Minimization form: L_min = -L.
        let reduced = z.transpose() * (-hess) * &z;
        let spectrum: Vec<f64> = SymmetricEigen::new(reduced).eigenvalues.iter().copied().collect();
        let pass = spectrum.iter().all(|v| *v > 1e-8);
        leaders.push(SsocLeader { leader: j, spectrum, null_space_dim: basis.len(), full_row_rank, pass });
    }
    Ok(SsocReport { pass: leaders.iter().all(|l| l.pass), leaders })
}

/// Same rows as at the base point (the active set is frozen), re-evaluated at
/// a perturbed point.
fn active_rows_with(j: usize, point: &EpecPoint, p: &MarketParams<f64>, cfg: &MpecConfig, sc: &Scaling, template: &[Row]) -> Result<(Vec<Row>, Vec<f64>, Vec<usize>)> {
    let lay = sc.lay;
    let w = pack(&point.a, &point.x.shares, &point.follower.lambda_u, point.follower.mu_u);
    let coords = decision_coords(j, &point.a, p, cfg, lay)?;
    let restrict = |g: &[f64], unit: f64| -> Vec<f64> { coords.iter().map(|c| g[*c] * sc.w[*c] / unit).collect() };
    let rows = template
        .iter()
        .map(|row| {
            let grad = match row.kind {
                RowKind::Follower(i) => restrict(&follower_row(i, &w, lay, p).1, sc.pay),
                RowKind::Budget(i) => {
                    restrict(&budget_row(i, &w, lay, p).1, p.csp(i).budget_cap).iter().map(|x| -x).collect()
                }
                _ => row.grad.clone(),
            };
            Row { grad, signed: row.signed, kind: row.kind }
        })
        .collect();
    let (_, gf) = objective(j, &w, lay, p);
    Ok((rows, restrict(&gf, sc.obj[j]), coords))
}

// ---------------------------------------------------------------------------
// Diagonalization and myopic play.

/// One cycle of [`run_diagonalization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub a: ProviderStrategy<f64>,
    pub x: PopulationState<f64>,
    /// Leader payoffs, operator first.
    pub payoffs: Vec<f64>,
    /// Scaled strategy change produced by the cycle.
    pub step: f64,
}

/// Outcome of [`run_diagonalization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    pub final_point: JointStrategy<f64>,
    pub follower: FollowerKkt,
    pub multipliers: LeaderKkt,
    pub kkt_residual: f64,
    pub ssoc: SsocReport,
    pub cycles: usize,
    pub converged: bool,
    pub history: Vec<CycleRecord>,
}

fn scaled_step(a: &ProviderStrategy<f64>, b: &ProviderStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<f64> {
    let mut s = 0.0;
    for j in 0..=p.n_csp() {
        let bx = leader_box(j, a, p, cfg)?;
        let (u, v) = (leader_coords(a, j), leader_coords(b, j));
        for k in 0..2 {
            let r = if bx.free(k) { bx.range(k) } else { u[k].abs().max(1.0) };
            s += ((u[k] - v[k]) / r).powi(2);
        }
    }
    Ok(s.sqrt())
}

/// Best response of leader `j` with the configured method.
pub fn leader_response(
    j: usize,
    a: &ProviderStrategy<f64>,
    p: &MarketParams<f64>,
    cfg: &MpecConfig,
    warm: Option<&PopulationState<f64>>,
) -> Result<(ProviderStrategy<f64>, PopulationState<f64>)> {
    let grid = best_response_grid(j, a, p, cfg, warm)?;
    if cfg.method == MpecMethod::GridOracle {
        return Ok((grid.strategy, grid.x));
    }
    let fallback = (grid.strategy.clone(), grid.x.clone());
    match solve_from_grid(j, grid, p, cfg) {
        Ok(sol) => {
            // Accept the refined strategy only if its actual follower response
            // does at least as well as the grid point.
            let x = follower_ess_oracle(&sol.strategy, p, cfg, Some(j), Some(&sol.x))?;
            let better = leader_payoff(j, &x, &sol.strategy, p) >= leader_payoff(j, &fallback.1, &fallback.0, p) - 1e-9;
            if budgets_ok(j, &x, &sol.strategy, p) && better {
                Ok((sol.strategy, x))
            } else {
                Ok(fallback)
            }
        }
        Err(_) => Ok(fallback),
    }
}

/// Cyclic best responses of the operator and the CSPs, each anticipating the
/// follower equilibrium, until the scaled strategy change per cycle drops
/// below `eps`. The follower state carried to the next cycle is the last
/// leader's intermediate state, or a fresh solve with `shared_solve`.
///
/// The final point is paired with fitted multipliers, its KKT residual and
/// the second-order report. Hitting the cycle limit is reported through
/// `converged = false`.
pub fn run_diagonalization(init: &ProviderStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig) -> Result<SeReport> {
    cfg.validate()?;
    p.validate()?;
    init.validate_box(p)?;
    let m = p.n_csp();
    let mut a = init.clone();
    let mut x = follower_ess_oracle(&a, p, cfg, None, None)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut cycles = 0;
    for cycle in 1..=cfg.max_cycles {
        cycles = cycle;
        let start = a.clone();
        let mut x_last = x.clone();
        let mut next = a.clone();
        for j in active_leaders(p, cfg) {
            let basis = if cfg.update == UpdateOrder::GaussSeidel { &next } else { &start };
            let (resp, xj) = leader_response(j, basis, p, cfg, Some(&x))?;
            let u = leader_coords(&resp, j);
            next = with_leader(&next, j, u);
            x_last = xj;
        }
        x = if cfg.shared_solve { follower_ess_oracle(&next, p, cfg, None, Some(&x_last))? } else { x_last };
        let step = scaled_step(&start, &next, p, cfg)?;
        a = next;
        history.push(CycleRecord {
            cycle,
            a: a.clone(),
            x: x.clone(),
            payoffs: (0..=m).map(|j| leader_payoff(j, &x, &a, p)).collect(),
            step,
        });
        if step < cfg.eps {
            converged = true;
            break;
        }
    }
    let x = follower_ess_oracle(&a, p, cfg, None, Some(&x))?;
    let follower = FollowerKkt::from_state(&x, &a, p, cfg.follower.support_tol);
    let point = EpecPoint { a: a.clone(), x: x.clone(), follower: follower.clone() };
    let multipliers = fit_multipliers(&point, p, cfg)?;
    let kkt = kkt_residual(&point, &multipliers, p, cfg)?;
    let ssoc = ssoc_check(&point, &multipliers, p, cfg)?;
    Ok(SeReport {
        final_point: JointStrategy { x, a },
        follower,
        multipliers,
        kkt_residual: kkt,
        ssoc,
        cycles,
        converged,
        history,
    })
}

/// Symmetric equilibrium of the CSP sub-game for identical CSPs with the
/// operator held fixed: bisection on `theta -> BR(theta) - theta`, where
/// `BR(theta)` is CSP 1's best response when every CSP sponsors at `theta`.
///
/// Returns the corner when the best response at that corner points outward.
/// `cycles` counts best-response evaluations and `converged` reports whether
/// the bracket shrank below `tol`.
pub fn symmetric_subgame_equilibrium(init: &ProviderStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig, tol: f64) -> Result<SeReport> {
    cfg.validate()?;
    p.validate()?;
    init.validate_box(p)?;
    if !(cfg.fixed_mno && cfg.fixed_bandwidth) {
        return Err(MarketError::InvalidParams("symmetric sub-game needs fixed_mno and fixed_bandwidth".into()));
    }
    let m = p.n_csp();
    let same = (2..=m).all(|j| p.csp(j) == p.csp(1) && init.csp(j).bandwidth == init.csp(1).bandwidth);
    if !same {
        return Err(MarketError::InvalidParams("symmetric sub-game needs identical CSPs and bandwidths".into()));
    }
    let at = |theta: f64| -> ProviderStrategy<f64> {
        let mut a = init.clone();
        for c in &mut a.csps {
            c.theta = theta;
        }
        a
    };
    let mut evals = 0;
    let mut gap = |theta: f64| -> Result<f64> {
        evals += 1;
        let (resp, _) = leader_response(1, &at(theta), p, cfg, None)?;
        Ok(resp.csp(1).theta - theta)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let theta = if gap(hi)? >= 0.0 {
        hi
    } else if gap(lo)? <= 0.0 {
        lo
    } else {
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if gap(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let converged = hi - lo <= tol || theta == 0.0 || theta == 1.0;
    let a = at(theta);
    let x = follower_ess_oracle(&a, p, cfg, None, None)?;
    let follower = FollowerKkt::from_state(&x, &a, p, cfg.follower.support_tol);
    let point = EpecPoint { a: a.clone(), x: x.clone(), follower: follower.clone() };
    let multipliers = fit_multipliers(&point, p, cfg)?;
    let kkt = kkt_residual(&point, &multipliers, p, cfg)?;
    let ssoc = ssoc_check(&point, &multipliers, p, cfg)?;
    Ok(SeReport {
        final_point: JointStrategy { x, a },
        follower,
        multipliers,
        kkt_residual: kkt,
        ssoc,
        cycles: evals,
        converged,
        history: Vec::new(),
    })
}

/// One round of myopic play.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyopicRound {
    pub round: usize,
    pub a: ProviderStrategy<f64>,
    pub x: PopulationState<f64>,
    /// Population-average user payoff `sum_i x_i pi_i`.
    pub mu_payoff: f64,
    pub csp_payoffs: Vec<f64>,
    pub mno_payoff: f64,
}

/// Outcome of [`run_myopic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyopicReport {
    pub rounds: Vec<MyopicRound>,
    pub fixed_point: bool,
}

/// Population-average user payoff.
pub fn average_mu_payoff(x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Result<f64> {
    let pi = mu_payoff_vector(x, a, p)?;
    Ok(x.shares.iter().zip(&pi).map(|(s, v)| s * v).sum())
}

fn myopic_record(round: usize, x: &PopulationState<f64>, a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Result<MyopicRound> {
    Ok(MyopicRound {
        round,
        a: a.clone(),
        x: x.clone(),
        mu_payoff: average_mu_payoff(x, a, p)?,
        csp_payoffs: (1..=p.n_csp()).map(|j| csp_payoff(j, x, a, p)).collect(),
        mno_payoff: mno_payoff(x, a, p),
    })
}

/// Myopic play: every round each leader best-responds on the grid to the
/// current follower state, simultaneously, and the follower then
/// re-equilibrates from where it is. Stops at a fixed point or after
/// `rounds_max` rounds.
pub fn run_myopic(init: &JointStrategy<f64>, p: &MarketParams<f64>, cfg: &MpecConfig, rounds_max: usize) -> Result<MyopicReport> {
    cfg.validate()?;
    p.validate()?;
    init.a.validate_box(p)?;
    let mut a = init.a.clone();
    let mut x = follower_equilibrium(&init.x, &a, p, &cfg.follower)?;
    let mut rounds = vec![myopic_record(0, &x, &a, p)?];
    for round in 1..=rounds_max {
        let mut next = a.clone();
        for j in active_leaders(p, cfg) {
            let r = best_response_fixed_state(j, &a, &x, p, cfg)?;
            next = with_leader(&next, j, leader_coords(&r.strategy, j));
        }
        let x_next = follower_equilibrium(&x, &next, p, &cfg.follower)?;
        let still = scaled_step(&a, &next, p, cfg)? <= 1e-12 && x_next.dist_inf(&x) <= 1e-10;
        a = next;
        x = x_next;
        rounds.push(myopic_record(round, &x, &a, p)?);
        if still {
            return Ok(MyopicReport { rounds, fixed_point: true });
        }
    }
    Ok(MyopicReport { rounds, fixed_point: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::CspParams;

    fn symmetric(n: usize, b: f64) -> (MarketParams<f64>, ProviderStrategy<f64>) {
        let c = CspParams { gamma1: 2.5, gamma2: 1.25, overhead: 1.0, sigma: 20.0, budget_cap: 1e4 };
        let p = MarketParams { population: n, csps: vec![c; 2], pu_cap: 20.0, pc_cap: 200.0, opt_out_allowed: true };
        let a = ProviderStrategy { mno: MnoStrategy { pu: 5.0, pc: 0.0 }, csps: vec![CspStrategy { theta: 0.0, bandwidth: b }; 2] };
        (p, a)
    }

    #[test]
    fn oracle_is_symmetric_and_monotone_in_theta() {
        let (p, a) = symmetric(1000, 2e6);
        let cfg = MpecConfig::default();
        let x = follower_ess_oracle(&a, &p, &cfg, None, None).unwrap();
        assert!((x.shares[1] - x.shares[2]).abs() < 1e-6);
        let mut a2 = a.clone();
        a2.csps[0].theta = 0.5;
        let y = follower_ess_oracle(&a2, &p, &cfg, None, None).unwrap();
        assert!(y.shares[1] >= x.shares[1]);
    }

    #[test]
    fn follower_kkt_of_equilibrium() {
        let (p, a) = symmetric(1000, 2e6);
        let cfg = MpecConfig::default();
        let x = follower_ess_oracle(&a, &p, &cfg, None, None).unwrap();
        let k = FollowerKkt::from_state(&x, &a, &p, 1e-7);
        for i in 0..=2 {
            assert!(k.lambda_u[i] >= 0.0);
            assert!(k.lambda_u[i] * x.shares[i] < 1e-9);
        }
    }

    #[test]
    fn fixed_state_response_cuts_costs() {
        let (p, mut a) = symmetric(1000, 2e6);
        a.mno.pc = 1e-3;
        let cfg = MpecConfig { bandwidth_cap: Some(4e6), ..MpecConfig::default() };
        let x = follower_ess_oracle(&a, &p, &cfg, None, None).unwrap();
        let r = best_response_fixed_state(1, &a, &x, &p, &cfg).unwrap();
        assert_eq!(leader_coords(&r.strategy, 1), [0.0, 0.0]);
        let r0 = best_response_fixed_state(0, &a, &x, &p, &cfg).unwrap();
        assert_eq!(r0.strategy.mno.pu, p.pu_cap);
    }

    fn two_csp(pu: f64, theta2: f64) -> (MarketParams<f64>, ProviderStrategy<f64>) {
        let c = CspParams { gamma1: 0.1, gamma2: 0.05, overhead: 1.0, sigma: 1e5, budget_cap: 1e9 };
        let p = MarketParams { population: 50000, csps: vec![c; 2], pu_cap: 1e4, pc_cap: 1e-3, opt_out_allowed: false };
        let a = ProviderStrategy {
            mno: MnoStrategy { pu, pc: 0.0 },
            csps: vec![CspStrategy { theta: 0.3, bandwidth: 1e7 }, CspStrategy { theta: theta2, bandwidth: 1e7 }],
        };
        (p, a)
    }

    fn fixed() -> MpecConfig {
        MpecConfig { fixed_bandwidth: true, fixed_mno: true, ..MpecConfig::default() }
    }

    #[test]
    fn sponsorship_corners() {
        let (p, a) = two_csp(1e4, 0.0);
        let r = best_response_grid(1, &a, &p, &fixed(), None).unwrap();
        assert!(r.strategy.csp(1).theta <= r.cell[0]);
        let (p, a) = two_csp(0.3, 0.3);
        let c = CspParams { sigma: 1e7, ..p.csps[0] };
        let p = MarketParams { csps: vec![c; 2], ..p };
        let r = best_response_grid(1, &a, &p, &fixed(), None).unwrap();
        assert_eq!(r.strategy.csp(1).theta, 1.0);
    }

    #[test]
    fn relaxed_solve_agrees_with_grid() {
        let (p, a) = two_csp(0.3, 0.3);
        let cfg = fixed();
        let g = best_response_grid(1, &a, &p, &cfg, None).unwrap();
        let s = solve_local_mpec(1, &a, &p, &cfg, None).unwrap();
        assert!((s.strategy.csp(1).theta - g.strategy.csp(1).theta).abs() <= g.cell[0]);
        assert!(s.payoff >= g.payoff - 1e-6 * g.payoff.abs());
        let comp: Vec<f64> = s.stages.iter().map(|st| st.complementarity).collect();
        assert!(comp.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(*comp.last().unwrap() <= 10.0 * 1e-8);
    }

    #[test]
    fn operator_box_stops_at_budget_capacity() {
        let (p, a) = symmetric(1000, 2e6);
        let bx = leader_box(0, &a, &p, &MpecConfig::default()).unwrap();
        assert_eq!(bx.hi, [20.0, 1e4 / 2e6]);
        let bx = leader_box(0, &a, &p, &MpecConfig { fixed_mno: true, ..MpecConfig::default() }).unwrap();
        assert_eq!(bx.lo, bx.hi);
        assert!(leader_box(1, &a, &p, &MpecConfig::default()).is_err());
    }

    #[test]
    fn schedule_validation() {
        let bad = MpecConfig { relax_schedule: vec![1e-2, 1e-1, 1e-9], ..MpecConfig::default() };
        assert!(bad.validate().is_err());
        let short = MpecConfig { relax_schedule: vec![1e-1, 1e-3], ..MpecConfig::default() };
        assert!(short.validate().is_err());
        assert!(MpecConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_null_space_and_negative_curvature() {
        let rows = vec![Row { grad: vec![1.0], signed: false, kind: RowKind::Simplex }];
        let (mult, res) = fit_rows(&rows, &[2.0]);
        assert!((mult[0] + 2.0).abs() < 1e-12 && res < 1e-12);
        let signed = vec![Row { grad: vec![1.0], signed: true, kind: RowKind::BoxLo(0) }];
        let (mult, res) = fit_rows(&signed, &[2.0]);
        assert_eq!(mult[0], 0.0);
        assert!((res - 2.0).abs() < 1e-12);
    }
}
