//! User-level evolutionary dynamics: replicator ODE, pairwise imitation,
//! potential function, equilibrium residuals and stability checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::market_model::{mu_payoff, mu_payoff_slope, mu_payoff_vector, MarketParams, PopulationState, ProviderStrategy};
use crate::scalar::Scalar;

/// Drift beyond which a step is rejected rather than renormalized.
pub const SIMPLEX_GUARD: f64 = 1e-6;

/// Fixed-step integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

/// Settings of the replicator ODE integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct OdeConfig<T> {
    pub dt: T,
    pub t_max: T,
    pub method: Integrator,
    /// Integration stops once `max |dx/dt|` falls to this value.
    pub convergence_tol: T,
    /// Record every `record_stride`-th step (the terminal state is always kept).
    pub record_stride: usize,
}

impl<T: Scalar> Default for OdeConfig<T> {
    fn default() -> Self {
        Self {
            dt: T::lit(0.01),
            t_max: T::lit(200.0),
            method: Integrator::Rk4,
            convergence_tol: T::lit(1e-10),
            record_stride: 1,
        }
    }
}

impl<T: Scalar> OdeConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero() && self.t_max >= self.dt && self.convergence_tol >= T::zero()) {
            return Err(MarketError::InvalidParams(format!(
                "ode config needs dt > 0, t_max >= dt, tol >= 0 (dt {}, t_max {})",
                self.dt, self.t_max
            )));
        }
        if self.record_stride == 0 {
            return Err(MarketError::InvalidParams("record_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Per-state diagnostics recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics<T> {
    pub potential: T,
    pub ne_residual: T,
    /// Sum of the replicator rates at this state.
    pub rate_sum: T,
}

/// Time-indexed states with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<PopulationState<T>>,
    pub diagnostics: Vec<StepDiagnostics<T>>,
    /// Whether the run ended on its convergence test rather than the horizon.
    pub converged: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Self { times: Vec::with_capacity(n), states: Vec::with_capacity(n), diagnostics: Vec::with_capacity(n), converged: false }
    }

    pub fn terminal(&self) -> &PopulationState<T> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// State at time `t` by linear interpolation (clamped to the recorded range).
    pub fn state_at(&self, t: T) -> PopulationState<T> {
        let k = self.times.partition_point(|s| *s <= t);
        if k == 0 {
            return self.states[0].clone();
        }
        if k >= self.times.len() {
            return self.terminal().clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        let shares = self.states[k - 1]
            .shares
            .iter()
            .zip(&self.states[k].shares)
            .map(|(a, b)| *a + w * (*b - *a))
            .collect();
        PopulationState::new_unchecked(shares)
    }

    pub(crate) fn push(&mut self, t: T, x: &[T], a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Result<()> {
        let state = PopulationState::new_unchecked(x.to_vec());
        let pi = mu_payoff_vector(&state, a, p)?;
        let rates = replicator_rhs(&state, &pi);
        self.diagnostics.push(StepDiagnostics {
            potential: potential_value(&state, a, p)?,
            ne_residual: residual_from_payoffs(&state, &pi, p.opt_out_allowed),
            rate_sum: rates.iter().copied().sum(),
        });
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }
}

/// Replicator rates `x_j (pi_j - sum_i x_i pi_i)`.
pub fn replicator_rhs<T: Scalar>(x: &PopulationState<T>, payoffs: &[T]) -> Vec<T> {
    let avg: T = x.shares.iter().zip(payoffs).map(|(s, p)| *s * *p).sum();
    x.shares.iter().zip(payoffs).map(|(s, p)| *s * (*p - avg)).collect()
}

/// Strategies users can actually hold: CSPs with zero bandwidth are excluded
/// and the opt-out only when allowed.
pub fn available_strategies<T: Scalar>(a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Vec<bool> {
    let mut v = Vec::with_capacity(p.n_csp() + 1);
    v.push(p.opt_out_allowed);
    v.extend(a.csps.iter().map(|c| c.bandwidth > T::zero()));
    v
}

/// Zeroes unavailable strategies and renormalizes; falls back to the uniform
/// state over available strategies if nothing is left.
pub fn restrict_to_available<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
) -> PopulationState<T> {
    let avail = available_strategies(a, p);
    let mut shares: Vec<T> = x.shares.iter().zip(&avail).map(|(s, ok)| if *ok { s.max(T::zero()) } else { T::zero() }).collect();
    let mut sum: T = shares.iter().copied().sum();
    if !(sum > T::zero()) {
        shares = avail.iter().map(|ok| if *ok { T::one() } else { T::zero() }).collect();
        sum = shares.iter().copied().sum();
    }
    if sum == T::zero() {
        // Nothing available at all: every user is stuck on the opt-out coordinate.
        shares[0] = T::one();
        sum = T::one();
    }
    PopulationState::new_unchecked(shares.into_iter().map(|s| s / sum).collect())
}

fn payoffs_of<T: Scalar>(x: &[T], a: &ProviderStrategy<T>, p: &MarketParams<T>, out: &mut [T]) -> Result<()> {
    out[0] = T::zero();
    for j in 1..x.len() {
        out[j] = mu_payoff(j, x[j], a, p)?;
    }
    Ok(())
}

fn rates_of<T: Scalar>(x: &[T], a: &ProviderStrategy<T>, p: &MarketParams<T>, pi: &mut [T], out: &mut [T]) -> Result<()> {
    payoffs_of(x, a, p, pi)?;
    let avg: T = x.iter().zip(pi.iter()).map(|(s, q)| *s * *q).sum();
    for j in 0..x.len() {
        out[j] = x[j] * (pi[j] - avg);
    }
    Ok(())
}

/// Clamps small negative entries and renormalizes; rejects larger drift.
pub(crate) fn guard_simplex<T: Scalar>(x: &mut [T]) -> Result<()> {
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    let sum: T = x.iter().copied().sum();
    let drift = (-lo).max((sum - T::one()).abs());
    if !(drift <= T::lit(SIMPLEX_GUARD)) {
        return Err(MarketError::StepSize(drift.as_f64()));
    }
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let sum: T = x.iter().copied().sum();
    for v in x.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Integrates the replicator dynamics, calling `visit(step, t, x)` for the
/// initial state and after every step. Returns `(t_end, x_end, converged)`.
fn integrate_core<T: Scalar>(
    x0: &[T],
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &OdeConfig<T>,
    mut visit: impl FnMut(usize, T, &[T]) -> Result<()>,
) -> Result<(T, Vec<T>, bool)> {
    cfg.validate()?;
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut pi = vec![T::zero(); d];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    let mut tmp = vec![T::zero(); d];
    let dt = cfg.dt;
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let n_steps = (cfg.t_max / dt).round().to_usize().unwrap_or(usize::MAX).max(1);
    visit(0, T::zero(), &x)?;
    for step in 1..=n_steps {
        rates_of(&x, a, p, &mut pi, &mut k1)?;
        let sup = k1.iter().map(|v| v.abs()).fold(T::zero(), T::max);
        if sup <= cfg.convergence_tol {
            return Ok((T::from_count(step - 1) * dt, x, true));
        }
        match cfg.method {
            Integrator::Euler => {
                for j in 0..d {
                    x[j] += dt * k1[j];
                }
            }
            Integrator::Rk4 => {
                for j in 0..d {
                    tmp[j] = x[j] + half * dt * k1[j];
                }
                rates_of(&tmp, a, p, &mut pi, &mut k2)?;
                for j in 0..d {
                    tmp[j] = x[j] + half * dt * k2[j];
                }
                rates_of(&tmp, a, p, &mut pi, &mut k3)?;
                for j in 0..d {
                    tmp[j] = x[j] + dt * k3[j];
                }
                rates_of(&tmp, a, p, &mut pi, &mut k4)?;
                for j in 0..d {
                    x[j] += dt * sixth * (k1[j] + T::lit(2.0) * (k2[j] + k3[j]) + k4[j]);
                }
            }
        }
        guard_simplex(&mut x)?;
        visit(step, T::from_count(step) * dt, &x)?;
    }
    rates_of(&x, a, p, &mut pi, &mut k1)?;
    let sup = k1.iter().map(|v| v.abs()).fold(T::zero(), T::max);
    Ok((T::from_count(n_steps) * dt, x, sup <= cfg.convergence_tol))
}

/// Integrates the replicator ODE from `x0` under fixed leader strategies.
pub fn integrate_replicator<T: Scalar>(
    x0: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &OdeConfig<T>,
) -> Result<Trajectory<T>> {
    x0.check(p.opt_out_allowed, T::lit(1e-9))?;
    let stride = cfg.record_stride;
    let mut traj = Trajectory::with_capacity(1024);
    let (t_end, x_end, converged) = integrate_core(&x0.shares, a, p, cfg, |step, t, x| {
        if step % stride == 0 {
            traj.push(t, x, a, p)?;
        }
        Ok(())
    })?;
    if traj.times.last().is_none_or(|t| *t < t_end) {
        traj.push(t_end, &x_end, a, p)?;
    }
    traj.converged = converged;
    Ok(traj)
}

/// Settings of the follower equilibrium solve used by the leader-level layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct FollowerConfig<T> {
    pub ode: OdeConfig<T>,
    /// Whether to finish with a Newton solve on the support.
    pub polish: bool,
    /// Shares below this value after integration are treated as extinct.
    pub support_tol: T,
}

impl<T: Scalar> Default for FollowerConfig<T> {
    fn default() -> Self {
        Self {
            ode: OdeConfig {
                dt: T::lit(0.02),
                t_max: T::lit(400.0),
                method: Integrator::Rk4,
                convergence_tol: T::lit(1e-7),
                record_stride: 1,
            },
            polish: true,
            support_tol: T::lit(1e-7),
        }
    }
}

/// Rest point reached from `x0`: replicator integration followed by an
/// optional Newton solve of the equal-payoff conditions on the support.
///
/// Unavailable strategies (zero bandwidth) are removed from `x0` first.
pub fn follower_equilibrium<T: Scalar>(
    x0: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &FollowerConfig<T>,
) -> Result<PopulationState<T>> {
    let start = restrict_to_available(x0, a, p);
    let (_, x, _) = integrate_core(&start.shares, a, p, &cfg.ode, |_, _, _| Ok(()))?;
    let x = PopulationState::new_unchecked(x);
    if !cfg.polish {
        return Ok(x);
    }
    Ok(polish_equilibrium(&x, a, p, cfg.support_tol).unwrap_or(x))
}

/// Newton solve of `pi_j(x_j) = mu` on the support of `x` together with the
/// simplex equation; `mu = 0` when the opt-out is in the support.
///
/// Strategies with zero share stay extinct. Returns `None` when no support
/// adjustment yields a nonnegative solution satisfying the equilibrium test.
pub fn polish_equilibrium<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    support_tol: T,
) -> Option<PopulationState<T>> {
    let d = x.shares.len();
    let mut support: Vec<bool> = x.shares.iter().map(|s| *s > support_tol).collect();
    let alive: Vec<bool> = x.shares.iter().map(|s| *s > T::zero()).collect();
    for _ in 0..2 * d {
        if !support.iter().any(|s| *s) {
            return None;
        }
        let sol = solve_support(&support, x, a, p)?;
        // Drop strategies that went nonpositive.
        let mut changed = false;
        for (j, s) in support.iter_mut().enumerate() {
            if *s && sol.0[j] <= T::zero() {
                *s = false;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        // Add alive strategies whose entry payoff beats the common payoff.
        let mu = sol.1;
        let scale = T::one().max(mu.abs());
        let mut best: Option<(usize, T)> = None;
        for j in 0..d {
            if support[j] || !alive[j] {
                continue;
            }
            let entry = if j == 0 {
                T::zero()
            } else {
                let c = p.csp(j);
                let s = a.csp(j);
                c.gamma1 * (s.bandwidth / c.overhead).ln() - (T::one() - s.theta) * a.mno.pu
            };
            let gain = entry - mu;
            if gain > T::lit(1e-12) * scale && best.is_none_or(|(_, g)| gain > g) {
                best = Some((j, gain));
            }
        }
        match best {
            Some((j, _)) => support[j] = true,
            None => return Some(PopulationState::new_unchecked(sol.0)),
        }
    }
    None
}

fn solve_support<T: Scalar>(
    support: &[bool],
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
) -> Option<(Vec<T>, T)> {
    let d = support.len();
    let members: Vec<usize> = (1..d).filter(|j| support[*j]).collect();
    let opt_in = support[0];
    let mut y: Vec<T> = vec![T::zero(); d];
    if members.is_empty() {
        if !opt_in {
            return None;
        }
        y[0] = T::one();
        return Some((y, T::zero()));
    }
    // Start from the integrated state restricted to the support.
    let total: T = (0..d).filter(|j| support[*j]).map(|j| x.shares[j].max(T::zero())).sum();
    for j in 0..d {
        if support[j] {
            y[j] = if total > T::zero() { x.shares[j].max(T::zero()) / total } else { T::one() / T::from_count(members.len() + usize::from(opt_in)) };
        }
    }
    if !opt_in && members.len() == 1 {
        let j = members[0];
        y[j] = T::one();
        let mu = mu_payoff(j, T::one(), a, p).ok()?;
        return Some((y, mu));
    }
    let mut mu = if opt_in {
        T::zero()
    } else {
        members.iter().map(|j| y[*j] * mu_payoff(*j, y[*j], a, p).unwrap_or(T::zero())).sum::<T>()
    };
    let eps = T::epsilon();
    for _ in 0..100 {
        let mut r = Vec::with_capacity(members.len());
        let mut slope = Vec::with_capacity(members.len());
        for j in &members {
            if !(y[*j] > T::zero()) {
                return None;
            }
            r.push(mu_payoff(*j, y[*j], a, p).ok()? - mu);
            let s = mu_payoff_slope(*j, y[*j], p);
            if s == T::zero() || !s.is_finite() {
                return None;
            }
            slope.push(s);
        }
        let sum_x: T = members.iter().map(|j| y[*j]).sum();
        let (dmu, dx): (T, Vec<T>) = if opt_in {
            (T::zero(), r.iter().zip(&slope).map(|(ri, si)| -*ri / *si).collect())
        } else {
            let s_inv: T = slope.iter().map(|s| T::one() / *s).sum();
            let rs: T = r.iter().zip(&slope).map(|(ri, si)| *ri / *si).sum();
            let dmu = (-(sum_x - T::one()) + rs) / s_inv;
            (dmu, r.iter().zip(&slope).map(|(ri, si)| (dmu - *ri) / *si).collect())
        };
        // Damp so that shares stay positive.
        let mut step = T::one();
        for (k, j) in members.iter().enumerate() {
            if dx[k] < T::zero() {
                let lim = T::lit(0.9) * y[*j] / (-dx[k]);
                if lim < step {
                    step = lim;
                }
            }
        }
        for (k, j) in members.iter().enumerate() {
            y[*j] += step * dx[k];
        }
        mu += step * dmu;
        if opt_in {
            let rest: T = members.iter().map(|j| y[*j]).sum();
            y[0] = T::one() - rest;
            if y[0] <= T::zero() {
                return Some((y, mu));
            }
        }
        let max_r = r.iter().map(|v| v.abs()).fold(T::zero(), T::max);
        let max_dx = dx.iter().map(|v| v.abs()).fold(T::zero(), T::max) * step;
        if step == T::one() && max_dx <= T::lit(64.0) * eps && max_r <= T::lit(1e-11) * T::one().max(mu.abs()) {
            let sum: T = y.iter().copied().sum();
            for v in y.iter_mut() {
                *v /= sum;
            }
            return Some((y, mu));
        }
    }
    None
}

/// Settings of the pairwise imitation simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct AgentConfig<T> {
    pub seed: u64,
    /// Payoff difference that maps to switching probability 1.
    pub payoff_scale: T,
    pub rounds_max: usize,
    /// Record every `record_stride`-th round (the terminal state is always kept).
    pub record_stride: usize,
}

impl<T: Scalar> Default for AgentConfig<T> {
    fn default() -> Self {
        Self { seed: 0, payoff_scale: T::lit(100.0), rounds_max: 4000, record_stride: 1 }
    }
}

/// Share vector from integer strategy counts.
pub fn shares_from_assignments<T: Scalar>(assignments: &[usize], n_strategies: usize) -> PopulationState<T> {
    let mut counts = vec![0usize; n_strategies];
    for s in assignments {
        counts[*s] += 1;
    }
    let n = T::from_count(assignments.len().max(1));
    PopulationState::new_unchecked(counts.into_iter().map(|c| T::from_count(c) / n).collect())
}

/// One imitation round. Each user, in index order, samples a peer uniformly
/// and copies the peer's strategy with probability
/// `min(1, max(pi_peer - pi_own, 0) / payoff_scale)`, payoffs being those of
/// the shares at the start of the round. Returns the number of switches.
pub fn agent_imitation_step<T: Scalar, R: Rng>(
    assignments: &mut [usize],
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &AgentConfig<T>,
    rng: &mut R,
) -> Result<usize> {
    let n = assignments.len();
    if n == 0 {
        return Ok(0);
    }
    let x = shares_from_assignments::<T>(assignments, p.n_csp() + 1);
    let pi: Vec<f64> = mu_payoff_vector(&x, a, p)?.into_iter().map(Scalar::as_f64).collect();
    let scale = cfg.payoff_scale.as_f64();
    let mut switches = 0;
    for k in 0..n {
        let peer = assignments[rng.random_range(0..n)];
        let own = assignments[k];
        let gain = pi[peer] - pi[own];
        if gain > 0.0 {
            let prob = (gain / scale).min(1.0);
            if rng.random::<f64>() < prob {
                assignments[k] = peer;
                switches += 1;
            }
        }
    }
    Ok(switches)
}

/// Integer assignment closest to `x N` (largest remainder), shuffled.
pub fn initial_assignments<T: Scalar, R: Rng>(x0: &PopulationState<T>, population: usize, rng: &mut R) -> Vec<usize> {
    let n = population as f64;
    let raw: Vec<f64> = x0.shares.iter().map(|s| s.as_f64() * n).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor().max(0.0) as usize).collect();
    let mut left = population.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|i, j| (raw[*j] - raw[*j].floor()).total_cmp(&(raw[*i] - raw[*i].floor())).then(i.cmp(j)));
    for j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if raw[*j] > 0.0 {
            counts[*j] += 1;
            left -= 1;
        }
    }
    let mut assignments: Vec<usize> = counts.iter().enumerate().flat_map(|(j, c)| std::iter::repeat_n(j, *c)).collect();
    assignments.truncate(population);
    assignments.shuffle(rng);
    assignments
}

/// Runs imitation rounds until a round without switches or `rounds_max`.
///
/// Round `k` is stamped with time `k / payoff_scale`, the time scale on which
/// the mean dynamic of the protocol matches the replicator ODE.
pub fn run_agent_simulation<T: Scalar>(
    x0: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &AgentConfig<T>,
) -> Result<Trajectory<T>> {
    if !(cfg.payoff_scale > T::zero()) || cfg.record_stride == 0 {
        return Err(MarketError::InvalidParams("payoff_scale and record_stride must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut assignments = initial_assignments(x0, p.population, &mut rng);
    let d = p.n_csp() + 1;
    let mut traj = Trajectory::with_capacity(cfg.rounds_max / cfg.record_stride + 2);
    let time = |k: usize| T::from_count(k) / cfg.payoff_scale;
    traj.push(T::zero(), &shares_from_assignments::<T>(&assignments, d).shares, a, p)?;
    let mut round = 0;
    while round < cfg.rounds_max {
        round += 1;
        let switches = agent_imitation_step(&mut assignments, a, p, cfg, &mut rng)?;
        let quiet = switches == 0;
        if round % cfg.record_stride == 0 || quiet || round == cfg.rounds_max {
            traj.push(time(round), &shares_from_assignments::<T>(&assignments, d).shares, a, p)?;
        }
        if quiet {
            traj.converged = true;
            break;
        }
    }
    Ok(traj)
}

/// `f(x) = sum_j int_0^{x_j} pi_j(z) dz` in closed form.
pub fn potential_value<T: Scalar>(x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Result<T> {
    let nu = p.n_users();
    let mut f = T::zero();
    for j in 1..x.shares.len() {
        let xj = x.shares[j];
        if xj == T::zero() {
            continue;
        }
        let c = p.csp(j);
        let s = a.csp(j);
        if !(s.bandwidth > T::zero()) {
            return Err(MarketError::Domain(format!("potential with share {xj} on zero bandwidth CSP {j}")));
        }
        let n = xj * nu;
        let o = c.overhead;
        let on = o + n;
        // int_0^x log(b/(o+zN)) dz = x log b - ((o+n) log(o+n) - o log o - n) / N
        let qoe = xj * s.bandwidth.ln() - (on * on.ln() - o * o.ln() - n) / nu;
        // int_0^x log(1+zN) dz = ((1+n) log(1+n) - n) / N
        let net = ((T::one() + n) * n.ln_1p() - n) / nu;
        f += c.gamma1 * qoe + c.gamma2 * net - (T::one() - s.theta) * a.mno.pu * xj;
    }
    Ok(f)
}

/// Threshold below which the uniqueness condition can fail for one CSP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold<T> {
    /// Condition holds for every subscriber count `n >= n_min`.
    From { n_min: u64, real_bound: T },
    /// Condition does not hold for all large `n`.
    Never,
}

/// Per-CSP thresholds of the strict concavity condition
/// `gamma2 (o + n) < gamma1 (1 + n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport<T> {
    pub per_csp: Vec<Threshold<T>>,
    /// True when every CSP satisfies the condition for all `n >= 0`.
    pub holds_everywhere: bool,
}

pub fn uniqueness_threshold<T: Scalar>(p: &MarketParams<T>) -> Result<UniquenessReport<T>> {
    let mut per_csp = Vec::with_capacity(p.n_csp());
    for c in &p.csps {
        let (g1, g2, o) = (c.gamma1, c.gamma2, c.overhead);
        if g1 == g2 && o == T::one() {
            return Err(MarketError::Degenerate(format!("gamma1 = gamma2 = {g1} with overhead 1")));
        }
        if g1 > g2 {
            let bound = (g2 * o - g1) / (g1 - g2);
            let n_min = if bound < T::zero() {
                0
            } else {
                // Strict inequality: the smallest integer strictly above the bound.
                (bound.floor() + T::one()).to_u64().unwrap_or(u64::MAX)
            };
            per_csp.push(Threshold::From { n_min, real_bound: bound.max(T::zero()) });
        } else {
            per_csp.push(Threshold::Never);
        }
    }
    let holds_everywhere = per_csp.iter().all(|t| matches!(t, Threshold::From { n_min: 0, .. }));
    Ok(UniquenessReport { per_csp, holds_everywhere })
}

fn residual_from_payoffs<T: Scalar>(x: &PopulationState<T>, pi: &[T], opt_out_allowed: bool) -> T {
    let avg: T = x.shares.iter().zip(pi).map(|(s, q)| *s * *q).sum();
    let start = usize::from(!opt_out_allowed);
    let best = pi[start..].iter().copied().fold(T::neg_infinity(), T::max);
    (best - avg).max(T::zero())
}

/// `max(0, max_j pi_j - sum_j x_j pi_j)` over the available strategies.
pub fn ne_residual<T: Scalar>(x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Result<T> {
    let pi = mu_payoff_vector(x, a, p)?;
    Ok(residual_from_payoffs(x, &pi, p.opt_out_allowed))
}

/// Outcome of [`ess_verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssReport<T> {
    pub pass: bool,
    /// Smallest `(x* - x) . pi(w)` over all invaders and mixing weights.
    pub worst_margin: T,
    pub checks: usize,
}

/// Mixing weights tried for each invader, as fractions of `eps_bar`.
pub const ESS_EPS_FRACTIONS: [f64; 3] = [0.1, 0.05, 0.01];

/// Tests the invasion inequality `x* . pi(w) >= x . pi(w)` at
/// `w = (1 - eps) x* + eps x` for random invaders `x`.
pub fn ess_verify<T: Scalar, R: Rng>(
    x_star: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    eps_bar: T,
    n_invaders: usize,
    rng: &mut R,
) -> Result<EssReport<T>> {
    if !(eps_bar > T::zero() && eps_bar < T::one()) {
        return Err(MarketError::InvalidParams(format!("eps_bar {eps_bar} outside (0, 1)")));
    }
    let avail = available_strategies(a, p);
    let d = x_star.shares.len();
    let pi_star = mu_payoff_vector(x_star, a, p)?;
    let scale = pi_star.iter().map(|v| v.abs()).fold(T::one(), T::max);
    let tol = T::lit(1e-9) * scale;
    let mut worst = T::infinity();
    let mut checks = 0;
    let mut inv = vec![T::zero(); d];
    for _ in 0..n_invaders {
        let mut sum = T::zero();
        for j in 0..d {
            inv[j] = if avail[j] { T::lit(-rng.random::<f64>().max(f64::MIN_POSITIVE).ln()) } else { T::zero() };
            sum += inv[j];
        }
        for v in inv.iter_mut() {
            *v /= sum;
        }
        for frac in ESS_EPS_FRACTIONS {
            let eps = eps_bar * T::lit(frac);
            let w: Vec<T> = x_star.shares.iter().zip(&inv).map(|(s, v)| (T::one() - eps) * *s + eps * *v).collect();
            let pi = mu_payoff_vector(&PopulationState::new_unchecked(w), a, p)?;
            let margin: T = x_star.shares.iter().zip(&inv).zip(&pi).map(|((s, v), q)| (*s - *v) * *q).sum();
            worst = worst.min(margin);
            checks += 1;
        }
    }
    Ok(EssReport { pass: worst >= -tol, worst_margin: worst, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{CspParams, CspStrategy, MnoStrategy};
    use approx::assert_relative_eq;

    fn fig3_params() -> MarketParams<f64> {
        let csp = |o| CspParams { gamma1: 1.7, gamma2: 1.1, overhead: o, sigma: 3000.0, budget_cap: 1e4 };
        MarketParams { population: 8000, csps: vec![csp(2.0), csp(5.0), csp(4.0)], pu_cap: 10.0, pc_cap: 1e-3, opt_out_allowed: true }
    }

    fn fig3_strategy() -> ProviderStrategy<f64> {
        ProviderStrategy {
            mno: MnoStrategy { pu: 10.0, pc: 1e-3 },
            csps: [1.4e6, 2e6, 1.5e6].iter().map(|b| CspStrategy { theta: 0.0, bandwidth: *b }).collect(),
        }
    }

    #[test]
    fn rhs_examples() {
        let x = PopulationState::new(vec![0.0, 0.5, 0.5], true).unwrap();
        assert_eq!(replicator_rhs(&x, &[0.0, 2.0, 0.0]), vec![0.0, 0.5, -0.5]);
        assert!(replicator_rhs(&x, &[3.0, 3.0, 3.0]).iter().all(|v| *v == 0.0));
        let v = PopulationState::new(vec![0.0, 1.0, 0.0], true).unwrap();
        assert!(replicator_rhs(&v, &[0.0, 5.0, 9.0]).iter().all(|r| *r == 0.0));
    }

    #[test]
    fn logistic_convergence() {
        let p: MarketParams<f64> = MarketParams {
            population: 1,
            csps: vec![CspParams { gamma1: 1.0, gamma2: 1.0, overhead: 1.0, sigma: 1.0, budget_cap: 1.0 }],
            pu_cap: 1.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        };
        let a = ProviderStrategy { mno: MnoStrategy { pu: 0.0, pc: 0.0 }, csps: vec![CspStrategy { theta: 0.0, bandwidth: 10.0 }] };
        let x0 = PopulationState::new(vec![0.9, 0.1], true).unwrap();
        let tr = integrate_replicator(&x0, &a, &p, &OdeConfig::default()).unwrap();
        assert!((tr.terminal().shares[1] - 1.0).abs() < 1e-9);
        assert!(tr.converged);
    }

    #[test]
    fn identical_csps_split_evenly() {
        let mut p = fig3_params();
        p.csps = vec![p.csps[0]; 2];
        let a = ProviderStrategy { mno: MnoStrategy { pu: 2.0, pc: 0.0 }, csps: vec![CspStrategy { theta: 0.2, bandwidth: 1e6 }; 2] };
        let x0 = PopulationState::new(vec![0.1, 0.7, 0.2], true).unwrap();
        let tr = integrate_replicator(&x0, &a, &p, &OdeConfig::default()).unwrap();
        let xs = &tr.terminal().shares;
        assert!((xs[1] - xs[2]).abs() < 1e-6, "{xs:?}");
    }

    #[test]
    fn fig3_rest_point_is_interior_and_polish_agrees() {
        let p = fig3_params();
        let a = fig3_strategy();
        let x0 = PopulationState::barycenter(3, true);
        let tr = integrate_replicator(&x0, &a, &p, &OdeConfig::default()).unwrap();
        let x = tr.terminal();
        assert!(ne_residual(x, &a, &p).unwrap() <= 1e-6);
        assert!(x.shares[1..].iter().all(|s| *s > 0.05));
        let polished = follower_equilibrium(&x0, &a, &p, &FollowerConfig::default()).unwrap();
        assert!(polished.dist_inf(x) < 1e-8);
        assert!(ne_residual(&polished, &a, &p).unwrap() <= 1e-12);
        let pi = mu_payoff_vector(&polished, &a, &p).unwrap();
        assert_relative_eq!(pi[1], pi[2], epsilon = 1e-10);
        assert_relative_eq!(pi[1], pi[3], epsilon = 1e-10);
    }

    #[test]
    fn agent_rules() {
        let p = fig3_params();
        let a = fig3_strategy();
        let cfg = AgentConfig { seed: 7, payoff_scale: 1.0, rounds_max: 10, record_stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all_one = vec![1usize; 50];
        assert_eq!(agent_imitation_step(&mut all_one, &a, &p, &cfg, &mut rng).unwrap(), 0);
        let mut single = vec![2usize];
        let mut small = p.clone();
        small.population = 1;
        let tr = run_agent_simulation(&PopulationState::new(vec![0.0, 0.0, 1.0, 0.0], true).unwrap(), &a, &small, &cfg).unwrap();
        assert!(tr.converged);
        assert_eq!(tr.len(), 2);
        assert_eq!(agent_imitation_step(&mut single, &a, &small, &cfg, &mut rng).unwrap(), 0);
    }

    #[test]
    fn switch_probability_at_normalizer_boundary() {
        // Strategy 1 pays exactly payoff_scale more than the opt-out; every
        // opt-out user that samples a CSP-1 peer must switch.
        let p = MarketParams {
            population: 1,
            csps: vec![CspParams { gamma1: 1.0, gamma2: 1.0, overhead: 1.0, sigma: 1.0, budget_cap: 1.0 }],
            pu_cap: 1.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        };
        // One subscriber: pi_1 = log(b/2) + log 2 = log b; choose b = e^2.
        let a = ProviderStrategy { mno: MnoStrategy { pu: 0.0, pc: 0.0 }, csps: vec![CspStrategy { theta: 0.0, bandwidth: 2f64.exp() }] };
        let mut big = p.clone();
        big.population = 2000;
        let x = PopulationState::new(vec![0.5, 0.5], true).unwrap();
        let pi = mu_payoff_vector(&x, &a, &big).unwrap();
        let cfg = AgentConfig { seed: 0, payoff_scale: pi[1], rounds_max: 1, record_stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // The first user in index order sees the untouched initial shares.
        let mut switched = 0;
        let trials = 20_000;
        for _ in 0..trials {
            let mut asg: Vec<usize> = (0..2000).map(|k| usize::from(k % 2 == 1)).collect();
            agent_imitation_step(&mut asg, &a, &big, &cfg, &mut rng).unwrap();
            switched += usize::from(asg[0] == 1);
        }
        let rate = switched as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn potential_examples() {
        let p = fig3_params();
        let a = fig3_strategy();
        let x = PopulationState::new(vec![1.0, 0.0, 0.0, 0.0], true).unwrap();
        assert_eq!(potential_value(&x, &a, &p).unwrap(), 0.0);
    }

    #[test]
    fn uniqueness_examples() {
        let mk = |g1: f64, g2: f64, o: f64| MarketParams {
            population: 10,
            csps: vec![CspParams { gamma1: g1, gamma2: g2, overhead: o, sigma: 1.0, budget_cap: 1.0 }],
            pu_cap: 1.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        };
        let r = uniqueness_threshold(&mk(2.0, 1.0, 1.0)).unwrap();
        assert!(r.holds_everywhere);
        assert!(matches!(r.per_csp[0], Threshold::From { n_min: 0, .. }));
        let r = uniqueness_threshold(&mk(1.7, 1.1, 5.0)).unwrap();
        match r.per_csp[0] {
            Threshold::From { n_min, real_bound } => {
                assert_eq!(n_min, 7);
                assert_relative_eq!(real_bound, 3.8 / 0.6, epsilon = 1e-12);
            }
            Threshold::Never => panic!(),
        }
        assert!(!r.holds_everywhere);
        assert_eq!(uniqueness_threshold(&mk(1.0, 2.0, 1.0)).unwrap().per_csp[0], Threshold::Never);
        assert!(matches!(uniqueness_threshold(&mk(1.0, 1.0, 1.0)), Err(MarketError::Degenerate(_))));
    }

    #[test]
    fn residual_examples() {
        let p = MarketParams {
            population: 10,
            csps: vec![CspParams { gamma1: 1.0, gamma2: 1.0, overhead: 1.0, sigma: 1.0, budget_cap: 1.0 }; 2],
            pu_cap: 1.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        };
        let x = PopulationState::new(vec![0.0, 0.5, 0.5], true).unwrap();
        assert_eq!(residual_from_payoffs(&x, &[0.0, 1.0, 1.0], true), 0.0);
        assert_eq!(residual_from_payoffs(&x, &[0.0, 2.0, 1.0], true), 0.5);
        let v = PopulationState::new(vec![0.0, 1.0, 0.0], true).unwrap();
        assert_eq!(residual_from_payoffs(&v, &[0.0, 3.0, 1.0], p.opt_out_allowed), 0.0);
    }

    #[test]
    fn ess_examples() {
        let p = MarketParams {
            population: 1,
            csps: vec![CspParams { gamma1: 1.0, gamma2: 1.0, overhead: 1.0, sigma: 1.0, budget_cap: 1.0 }],
            pu_cap: 1.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        };
        let a = ProviderStrategy { mno: MnoStrategy { pu: 0.0, pc: 0.0 }, csps: vec![CspStrategy { theta: 0.0, bandwidth: 100.0 }] };
        let x = PopulationState::new(vec![0.0, 1.0], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(ess_verify(&x, &a, &p, 0.1, 200, &mut rng).unwrap().pass);

        // Everyone on a poor CSP while a far better one sits empty.
        let mut p2 = fig3_params();
        p2.csps.truncate(2);
        let a2 = ProviderStrategy {
            mno: MnoStrategy { pu: 1.0, pc: 0.0 },
            csps: vec![CspStrategy { theta: 0.0, bandwidth: 1e3 }, CspStrategy { theta: 0.0, bandwidth: 1e7 }],
        };
        let v = PopulationState::new(vec![0.0, 1.0, 0.0], true).unwrap();
        assert_eq!(ne_residual(&v, &a2, &p2).unwrap(), 0.0);
        let r = ess_verify(&v, &a2, &p2, 0.1, 200, &mut rng).unwrap();
        assert!(!r.pass && r.worst_margin < 0.0);

        let a3 = fig3_strategy();
        let p3 = fig3_params();
        let xs = follower_equilibrium(&PopulationState::barycenter(3, true), &a3, &p3, &FollowerConfig::default()).unwrap();
        assert!(ess_verify(&xs, &a3, &p3, 0.1, 200, &mut rng).unwrap().pass);
    }
}
