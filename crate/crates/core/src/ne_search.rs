//! Provider-level Nash equilibrium: leader gradients, feasible-set
//! projections, co-coercivity step sizing, the distributed projected-gradient
//! loop and the quasi-variational residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::geometry::{box_planes, maximize_polygon, project_polygon, HalfPlane, LpOutcome};
use crate::market_model::{
    budget_slack, csp_payoff, mno_payoff, mu_payoff_vector, CspStrategy, MarketParams, MnoStrategy, PopulationState,
    ProviderStrategy,
};
use crate::replicator::{
    follower_equilibrium, ne_residual, restrict_to_available, run_agent_simulation, AgentConfig, FollowerConfig,
};
use crate::scalar::Scalar;

/// How leaders differentiate their payoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Shares held fixed.
    #[default]
    Partial,
    /// Adds the follower response, estimated by re-solving the follower
    /// equilibrium at perturbed strategies.
    Sensitivity,
}

/// How the inner follower state is produced each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FollowerMethod {
    #[default]
    Ode,
    /// Pairwise imitation among `population` agents; stochastic.
    Agent,
}

/// Follower state and leader strategies together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointStrategy<T> {
    pub x: PopulationState<T>,
    pub a: ProviderStrategy<T>,
}

/// Inputs shared by gradient and residual evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GradientOptions<T> {
    pub mode: GradientMode,
    /// Relative finite-difference step for the follower response.
    pub fd_step: T,
    pub follower: FollowerConfig<T>,
    /// Bandwidths are parameters rather than decisions.
    pub fixed_bandwidth: bool,
}

impl<T: Scalar> Default for GradientOptions<T> {
    fn default() -> Self {
        Self { mode: GradientMode::Partial, fd_step: T::lit(1e-6), follower: FollowerConfig::default(), fixed_bandwidth: false }
    }
}

/// Settings of [`run_distributed_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct NeSolverConfig<T> {
    /// Requested gradient step; capped by the co-coercivity estimate when
    /// `cocoercivity_samples > 0`.
    pub alpha: T,
    /// Averaging factor of the projected update.
    pub xi_avg: T,
    /// Threshold on the per-iteration strategy change.
    pub eps: T,
    pub max_outer: usize,
    pub gradient_mode: GradientMode,
    pub sensitivity_fd_step: T,
    /// Sample points for the co-coercivity estimate; 0 keeps `alpha` as is.
    pub cocoercivity_samples: usize,
    pub follower: FollowerConfig<T>,
    pub follower_method: FollowerMethod,
    pub agent: AgentConfig<T>,
    /// Follower solves restart from the barycenter every this many iterations.
    pub cold_start_every: usize,
    pub fixed_bandwidth: bool,
    /// Bandwidth unit of the update metric: steps in `b` are taken in units
    /// of `bandwidth_scale` (1 keeps the plain Euclidean metric).
    pub bandwidth_scale: T,
    pub gqvi_tol: T,
    pub ne_tol: T,
    pub seed: u64,
}

impl<T: Scalar> Default for NeSolverConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            xi_avg: T::lit(0.5),
            eps: T::lit(1e-5),
            max_outer: 500,
            gradient_mode: GradientMode::Partial,
            sensitivity_fd_step: T::lit(1e-6),
            cocoercivity_samples: 8,
            follower: FollowerConfig::default(),
            follower_method: FollowerMethod::Ode,
            agent: AgentConfig::default(),
            cold_start_every: 25,
            fixed_bandwidth: false,
            bandwidth_scale: T::one(),
            gqvi_tol: T::lit(1e-4),
            ne_tol: T::lit(1e-6),
            seed: 0,
        }
    }
}

impl<T: Scalar> NeSolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > T::zero()
            && self.xi_avg > T::zero()
            && self.xi_avg < T::one()
            && self.eps > T::zero()
            && self.bandwidth_scale > T::zero()
            && self.sensitivity_fd_step > T::zero()
            && self.cold_start_every > 0;
        if ok {
            self.follower.ode.validate()
        } else {
            Err(MarketError::InvalidParams(
                "solver needs alpha > 0, 0 < xi_avg < 1, eps > 0, positive scales and cold_start_every".into(),
            ))
        }
    }

    pub fn gradient_options(&self) -> GradientOptions<T> {
        GradientOptions {
            mode: self.gradient_mode,
            fd_step: self.sensitivity_fd_step,
            follower: self.follower,
            fixed_bandwidth: self.fixed_bandwidth,
        }
    }

    fn weights(&self, n_csp: usize) -> Vec<T> {
        let wb = T::one() / (self.bandwidth_scale * self.bandwidth_scale);
        let mut w = vec![T::one(), T::one()];
        for _ in 0..n_csp {
            w.push(T::one());
            w.push(wb);
        }
        w
    }
}

/// Residuals reported at the final point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals<T> {
    pub ne_gap: T,
    pub gqvi: T,
    pub max_budget_violation: T,
}

/// Snapshot of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// Leader strategies at the start of the iteration.
    pub a: ProviderStrategy<T>,
    /// Follower state induced by `a`.
    pub x: PopulationState<T>,
    pub mu_payoffs: Vec<T>,
    pub csp_payoffs: Vec<T>,
    pub mno_payoff: T,
    /// Metric norm of the strategy change produced by this iteration.
    pub step: T,
}

/// Outcome of [`run_distributed_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport<T> {
    pub final_point: JointStrategy<T>,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Residuals<T>,
    pub alpha_used: T,
    pub history: Vec<IterationRecord<T>>,
}

impl<T: Scalar> EquilibriumReport<T> {
    /// First iteration whose strategy change fell below `threshold`.
    pub fn first_step_below(&self, threshold: T) -> Option<usize> {
        self.history.iter().find(|r| r.step < threshold).map(|r| r.iteration)
    }
}

/// Payoff derivatives of every leader with respect to its own strategy, in
/// the flat layout `(pu, pc, theta_1, b_1, ...)`.
pub fn partial_gradients<T: Scalar>(x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Vec<T> {
    let nu = p.n_users();
    let subscribed: T = x.shares[1..].iter().copied().sum();
    let mut g = vec![nu * subscribed, a.csps.iter().map(|c| c.bandwidth).sum()];
    for j in 1..=p.n_csp() {
        g.push(-a.mno.pu * x.subscribers(j, nu));
        g.push(-a.mno.pc);
    }
    g
}

/// Leader gradients in the requested mode.
///
/// In sensitivity mode `x` should be the follower equilibrium at `a`; it is
/// used as the warm start of the perturbed solves.
pub fn leader_gradients<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    opts: &GradientOptions<T>,
) -> Result<Vec<T>> {
    let mut g = partial_gradients(x, a, p);
    if opts.mode == GradientMode::Partial {
        return Ok(g);
    }
    let coords: Vec<usize> = (0..g.len()).filter(|k| !(opts.fixed_bandwidth && *k >= 2 && *k % 2 == 1)).collect();
    let responses: Vec<Result<(usize, Vec<T>)>> =
        coords.par_iter().map(|k| share_response(*k, x, a, p, opts).map(|d| (*k, d))).collect();
    let nu = p.n_users();
    for r in responses {
        let (k, dx) = r?;
        if k < 2 {
            // MNO revenue from subscriptions: pu N sum_{j>=1} x_j.
            let d_sub: T = dx[1..].iter().copied().sum();
            g[k] += a.mno.pu * nu * d_sub;
        } else {
            let j = (k - 2) / 2 + 1;
            let n = x.subscribers(j, nu);
            let dpi_dx = p.csp(j).sigma * nu / (T::one() + n) - a.mno.pu * a.csp(j).theta * nu;
            g[k] += dpi_dx * dx[j];
        }
    }
    Ok(g)
}

/// Finite-difference derivative of the follower equilibrium with respect to
/// flat coordinate `k`.
pub fn share_response<T: Scalar>(
    k: usize,
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    opts: &GradientOptions<T>,
) -> Result<Vec<T>> {
    let base = a.to_vec();
    let h = opts.fd_step * T::one().max(base[k].abs());
    let solve = |v: T| -> Result<Vec<T>> {
        let mut av = base.clone();
        av[k] = v;
        let a2 = ProviderStrategy::from_slice(&av)?;
        Ok(follower_equilibrium(x, &a2, p, &opts.follower)?.shares)
    };
    let is_bandwidth = k >= 2 && k % 2 == 1;
    if is_bandwidth && base[k] - h <= T::zero() {
        let up = solve(base[k] + h)?;
        let mid = solve(base[k])?;
        return Ok(up.iter().zip(&mid).map(|(u, m)| (*u - *m) / h).collect());
    }
    let up = solve(base[k] + h)?;
    let dn = solve(base[k] - h)?;
    let two_h = h + h;
    Ok(up.iter().zip(&dn).map(|(u, d)| (*u - *d) / two_h).collect())
}

/// Euclidean projection onto the simplex (sort and threshold); the opt-out
/// coordinate is pinned to 0 when not allowed.
pub fn project_simplex<T: Scalar>(v: &[T], opt_out_allowed: bool) -> PopulationState<T> {
    let start = usize::from(!opt_out_allowed);
    let mut u: Vec<T> = v[start..].to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = T::zero();
    let mut tau = T::zero();
    for (i, ui) in u.iter().enumerate() {
        cum += *ui;
        let t = (cum - T::one()) / T::from_count(i + 1);
        if *ui - t > T::zero() {
            tau = t;
        }
    }
    let mut shares: Vec<T> = v.iter().map(|vi| (*vi - tau).max(T::zero())).collect();
    if !opt_out_allowed {
        shares[0] = T::zero();
    }
    PopulationState::new_unchecked(shares)
}

/// Feasible set of CSP `j` in `(theta, b)` given prices and shares; with
/// `frozen_bandwidth` the bandwidth is pinned to its current value.
pub fn csp_polygon<T: Scalar>(
    j: usize,
    a: &ProviderStrategy<T>,
    x: &PopulationState<T>,
    p: &MarketParams<T>,
    frozen_bandwidth: Option<T>,
) -> Vec<HalfPlane<T>> {
    let n = x.subscribers(j, p.n_users());
    let mut planes = vec![
        HalfPlane::new(-T::one(), T::zero(), T::zero()),
        HalfPlane::new(T::one(), T::zero(), T::one()),
        HalfPlane::new(T::zero(), -T::one(), T::zero()),
        HalfPlane::new(a.mno.pu * n, a.mno.pc, p.csp(j).budget_cap),
    ];
    if let Some(b) = frozen_bandwidth {
        planes.push(HalfPlane::new(T::zero(), T::one(), b));
        planes.push(HalfPlane::new(T::zero(), -T::one(), -b));
    }
    planes
}

/// Feasible prices: the price box intersected with every CSP budget at the
/// given sponsorship levels, bandwidths and shares.
pub fn mno_polygon<T: Scalar>(a: &ProviderStrategy<T>, x: &PopulationState<T>, p: &MarketParams<T>) -> Vec<HalfPlane<T>> {
    let mut planes = box_planes([T::zero(), T::zero()], [p.pu_cap, p.pc_cap]);
    let nu = p.n_users();
    for j in 1..=p.n_csp() {
        let s = a.csp(j);
        planes.push(HalfPlane::new(s.theta * x.subscribers(j, nu), s.bandwidth, p.csp(j).budget_cap));
    }
    planes
}

/// Clamps prices to their box, then projects each CSP's `(theta, b)` onto its
/// budget polygon under the clamped prices.
pub fn project_leader_strategies<T: Scalar>(
    a_raw: &[T],
    x: &PopulationState<T>,
    p: &MarketParams<T>,
) -> Result<ProviderStrategy<T>> {
    let m = p.n_csp();
    if a_raw.len() != 2 + 2 * m {
        return Err(MarketError::Dimension { expected: 2 + 2 * m, got: a_raw.len() });
    }
    let mno = MnoStrategy { pu: a_raw[0].max(T::zero()).min(p.pu_cap), pc: a_raw[1].max(T::zero()).min(p.pc_cap) };
    let mut a = ProviderStrategy { mno, csps: vec![CspStrategy::default(); m] };
    for j in 1..=m {
        let poly = csp_polygon(j, &a, x, p, None);
        let z = project_polygon([a_raw[2 * j], a_raw[2 * j + 1]], &poly, [T::one(), T::one()])?;
        a.csps[j - 1] = CspStrategy { theta: z[0], bandwidth: z[1] };
    }
    Ok(a)
}

/// Projection used by the distributed search: prices onto the box intersected
/// with the budgets at the incumbent CSP strategies, then each CSP onto its
/// polygon under the new prices, in the metric with bandwidth weight
/// `1 / bandwidth_scale^2`.
pub fn project_coupled<T: Scalar>(
    a_raw: &[T],
    incumbent: &ProviderStrategy<T>,
    x: &PopulationState<T>,
    p: &MarketParams<T>,
    fixed_bandwidth: bool,
    bandwidth_scale: T,
) -> Result<ProviderStrategy<T>> {
    let m = p.n_csp();
    if a_raw.len() != 2 + 2 * m {
        return Err(MarketError::Dimension { expected: 2 + 2 * m, got: a_raw.len() });
    }
    let prices = project_polygon([a_raw[0], a_raw[1]], &mno_polygon(incumbent, x, p), [T::one(), T::one()])?;
    let mut a = ProviderStrategy { mno: MnoStrategy { pu: prices[0], pc: prices[1] }, csps: incumbent.csps.clone() };
    let wb = T::one() / (bandwidth_scale * bandwidth_scale);
    for j in 1..=m {
        let frozen = fixed_bandwidth.then(|| incumbent.csp(j).bandwidth);
        let poly = csp_polygon(j, &a, x, p, frozen);
        let raw_b = if fixed_bandwidth { incumbent.csp(j).bandwidth } else { a_raw[2 * j + 1] };
        let z = project_polygon([a_raw[2 * j], raw_b], &poly, [T::one(), wb])?;
        a.csps[j - 1] = CspStrategy { theta: z[0], bandwidth: z[1] };
    }
    Ok(a)
}

/// Smallest positive ratio `(y - y')^T (H(y) - H(y')) / |H(y) - H(y')|^2` over
/// all pairs of `n_samples` sampled points.
pub fn estimate_cocoercivity<T, R, F, S>(map: F, mut sample: S, n_samples: usize, rng: &mut R) -> Result<T>
where
    T: Scalar,
    R: Rng,
    F: Fn(&[T]) -> Result<Vec<T>> + Sync,
    S: FnMut(&mut R) -> Vec<T>,
{
    if n_samples < 2 {
        return Err(MarketError::Cocoercivity("need at least two samples".into()));
    }
    let ys: Vec<Vec<T>> = (0..n_samples).map(|_| sample(rng)).collect();
    let hs: Vec<Vec<T>> = ys.par_iter().map(|y| map(y)).collect::<Result<_>>()?;
    min_cocoercivity_ratio(&ys, &hs)
}

fn min_cocoercivity_ratio<T: Scalar>(ys: &[Vec<T>], hs: &[Vec<T>]) -> Result<T> {
    let mut best: Option<T> = None;
    for i in 0..ys.len() {
        for k in i + 1..ys.len() {
            let mut num = T::zero();
            let mut den = T::zero();
            for ((yi, yk), (hi, hk)) in ys[i].iter().zip(&ys[k]).zip(hs[i].iter().zip(&hs[k])) {
                let dh = *hi - *hk;
                num += (*yi - *yk) * dh;
                den += dh * dh;
            }
            if den > T::lit(1e-12) {
                let r = num / den;
                if r > T::zero() && best.is_none_or(|b| r < b) {
                    best = Some(r);
                }
            }
        }
    }
    best.ok_or_else(|| MarketError::Cocoercivity("every sampled pair was degenerate or non-monotone".into()))
}

/// Co-coercivity of the market mapping `H(y) = -[pi(x); grad(a)]` sampled on
/// follower equilibria: leader strategies are drawn uniformly from their
/// boxes (bandwidth in `[0, 2 b]` around `base`, or pinned when fixed), made
/// feasible, and paired with the induced follower state.
pub fn estimate_market_cocoercivity<T: Scalar>(
    base: &JointStrategy<T>,
    p: &MarketParams<T>,
    cfg: &NeSolverConfig<T>,
) -> Result<T> {
    let m = p.n_csp();
    let opts = cfg.gradient_options();
    let scale = cfg.bandwidth_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0c0);
    let base_b: Vec<T> = base.a.csps.iter().map(|c| c.bandwidth).collect();
    let sample = |rng: &mut ChaCha8Rng| -> Vec<T> {
        let mut v = vec![T::lit(rng.random::<f64>()) * p.pu_cap, T::lit(rng.random::<f64>()) * p.pc_cap];
        for b in &base_b {
            v.push(T::lit(rng.random::<f64>()));
            v.push(if cfg.fixed_bandwidth { *b } else { T::lit(2.0 * rng.random::<f64>()) * *b });
        }
        v
    };
    // Each sample is made feasible first, so ratios are taken between feasible points.
    let eval = |raw: &[T]| -> Result<(Vec<T>, Vec<T>)> {
        let incumbent = ProviderStrategy::from_slice(raw)?;
        let a = project_coupled(raw, &incumbent, &base.x, p, cfg.fixed_bandwidth, scale)?;
        let x = follower_equilibrium(&PopulationState::barycenter(m, p.opt_out_allowed), &a, p, &cfg.follower)?;
        let pi = mu_payoff_vector(&x, &a, p)?;
        let g = leader_gradients(&x, &a, p, &opts)?;
        let mut y: Vec<T> = x.shares.clone();
        let mut h: Vec<T> = pi.iter().map(|v| -*v).collect();
        for (k, (ak, gk)) in a.to_vec().into_iter().zip(g).enumerate() {
            let bw = k >= 2 && k % 2 == 1;
            if bw && cfg.fixed_bandwidth {
                continue;
            }
            let s = if bw { scale } else { T::one() };
            y.push(ak / s);
            h.push(-gk * s);
        }
        Ok((y, h))
    };
    if cfg.cocoercivity_samples < 2 {
        return Err(MarketError::Cocoercivity("need at least two samples".into()));
    }
    let raws: Vec<Vec<T>> = (0..cfg.cocoercivity_samples).map(|_| sample(&mut rng)).collect();
    let (ys, hs): (Vec<Vec<T>>, Vec<Vec<T>>) =
        raws.par_iter().map(|r| eval(r)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    min_cocoercivity_ratio(&ys, &hs)
}

fn follower_step<T: Scalar>(
    x_prev: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &NeSolverConfig<T>,
    cold: bool,
    iteration: usize,
) -> Result<PopulationState<T>> {
    let m = p.n_csp();
    let bary = PopulationState::barycenter(m, p.opt_out_allowed);
    let start = if cold {
        bary
    } else {
        // A small interior mix keeps extinct strategies revivable.
        let w = T::lit(1e-6);
        PopulationState::new_unchecked(
            x_prev.shares.iter().zip(&bary.shares).map(|(s, b)| (T::one() - w) * *s + w * *b).collect(),
        )
    };
    match cfg.follower_method {
        FollowerMethod::Ode => follower_equilibrium(&start, a, p, &cfg.follower),
        FollowerMethod::Agent => {
            let agent = AgentConfig { seed: cfg.agent.seed.wrapping_add(iteration as u64), ..cfg.agent };
            let start = restrict_to_available(&start, a, p);
            Ok(run_agent_simulation(&start, a, p, &agent)?.terminal().clone())
        }
    }
}

fn record<T: Scalar>(
    iteration: usize,
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    step: T,
) -> Result<IterationRecord<T>> {
    Ok(IterationRecord {
        iteration,
        a: a.clone(),
        x: x.clone(),
        mu_payoffs: mu_payoff_vector(x, a, p)?,
        csp_payoffs: (1..=p.n_csp()).map(|j| csp_payoff(j, x, a, p)).collect(),
        mno_payoff: mno_payoff(x, a, p),
        step,
    })
}

/// Largest budget excess over all CSPs, clamped at 0.
pub fn max_budget_violation<T: Scalar>(x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> T {
    (1..=p.n_csp()).map(|j| budget_slack(j, x, a, p)).fold(T::zero(), T::max)
}

/// Distributed projected-gradient search for the provider equilibrium.
///
/// Each outer iteration solves the follower equilibrium at the current
/// strategies, takes a gradient step of length `xi_avg * alpha` for every
/// leader and projects the averaged point back onto the feasible set.
/// Non-convergence is reported, not raised.
pub fn run_distributed_search<T: Scalar>(
    init: &JointStrategy<T>,
    p: &MarketParams<T>,
    cfg: &NeSolverConfig<T>,
) -> Result<EquilibriumReport<T>> {
    cfg.validate()?;
    p.validate()?;
    init.a.validate_box(p)?;
    let m = p.n_csp();
    let alpha = if cfg.cocoercivity_samples >= 2 {
        let xi = estimate_market_cocoercivity(init, p, cfg)?;
        cfg.alpha.min(T::lit(1.8) * xi)
    } else {
        cfg.alpha
    };
    let w = cfg.weights(m);
    let opts = cfg.gradient_options();
    let mut a = init.a.clone();
    let mut x = init.x.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut done = false;
    for t in 1..=cfg.max_outer {
        iterations = t;
        let cold = t % cfg.cold_start_every == 0;
        x = follower_step(&x, &a, p, cfg, cold, t)?;
        let g = leader_gradients(&x, &a, p, &opts)?;
        let cur = a.to_vec();
        let mut raw: Vec<T> = cur.iter().zip(&g).zip(&w).map(|((ak, gk), wk)| *ak + cfg.xi_avg * alpha * *gk / *wk).collect();
        if cfg.fixed_bandwidth {
            for j in 1..=m {
                raw[2 * j + 1] = cur[2 * j + 1];
            }
        }
        let next = project_coupled(&raw, &a, &x, p, cfg.fixed_bandwidth, cfg.bandwidth_scale)?;
        let step = next
            .to_vec()
            .iter()
            .zip(&cur)
            .zip(&w)
            .map(|((n, c), wk)| *wk * (*n - *c) * (*n - *c))
            .sum::<T>()
            .sqrt();
        history.push(record(t, &x, &a, p, step)?);
        a = next;
        if step < cfg.eps {
            done = true;
            break;
        }
    }
    x = follower_step(&x, &a, p, cfg, false, iterations + 1)?;
    let ne_gap = ne_residual(&x, &a, p)?;
    let gqvi = gqvi_residual(&x, &a, p, &opts)?;
    let max_budget_violation = max_budget_violation(&x, &a, p);
    let converged = done && ne_gap <= cfg.ne_tol && gqvi <= cfg.gqvi_tol;
    Ok(EquilibriumReport {
        final_point: JointStrategy { x, a },
        iterations,
        converged,
        residuals: Residuals { ne_gap, gqvi, max_budget_violation },
        alpha_used: alpha,
        history,
    })
}

/// Best linear improvement available to every player at `(x, a)`, summed over
/// players: `max pi - x . pi` for the users plus, for each leader, the largest
/// gain of its payoff gradient over its feasible polygon. Zero exactly at
/// solutions of the quasi-variational inequality.
pub fn gqvi_residual<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    opts: &GradientOptions<T>,
) -> Result<T> {
    let g = leader_gradients(x, a, p, opts)?;
    let mut total = ne_residual(x, a, p)?;
    let lp_gain = |grad: [T; 2], at: [T; 2], planes: &[HalfPlane<T>]| -> T {
        match maximize_polygon(grad, planes) {
            LpOutcome::Optimal { value, .. } => (value - (grad[0] * at[0] + grad[1] * at[1])).max(T::zero()),
            LpOutcome::Unbounded => T::infinity(),
            LpOutcome::Infeasible => T::zero(),
        }
    };
    total += lp_gain([g[0], g[1]], [a.mno.pu, a.mno.pc], &mno_polygon(a, x, p));
    for j in 1..=p.n_csp() {
        let s = a.csp(j);
        let frozen = opts.fixed_bandwidth.then_some(s.bandwidth);
        total += lp_gain([g[2 * j], g[2 * j + 1]], [s.theta, s.bandwidth], &csp_polygon(j, a, x, p, frozen));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::CspParams;
    use approx::assert_relative_eq;

    fn two_csp() -> MarketParams<f64> {
        let c = CspParams { gamma1: 1.7, gamma2: 1.1, overhead: 2.0, sigma: 20.0, budget_cap: 1e4 };
        MarketParams { population: 1000, csps: vec![c, c], pu_cap: 10.0, pc_cap: 1.0, opt_out_allowed: true }
    }

    #[test]
    fn partial_gradient_example() {
        let p = two_csp();
        let x = PopulationState::new(vec![0.0, 0.5, 0.5], true).unwrap();
        let a = ProviderStrategy {
            mno: MnoStrategy { pu: 2.0, pc: 0.001 },
            csps: vec![CspStrategy { theta: 0.3, bandwidth: 1e6 }; 2],
        };
        let g = leader_gradients(&x, &a, &p, &GradientOptions::default()).unwrap();
        assert_eq!(g, vec![1000.0, 2e6, -1000.0, -0.001, -1000.0, -0.001]);
        let a0 = ProviderStrategy { mno: MnoStrategy { pu: 0.0, pc: 0.0 }, ..a };
        assert!(leader_gradients(&x, &a0, &p, &GradientOptions::default()).unwrap()[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn simplex_projection_examples() {
        let third: f64 = 1.0 / 3.0;
        let s = project_simplex(&[third, third, third], true);
        assert!(s.shares.iter().all(|v| (v - third).abs() < 1e-15));
        let s = project_simplex(&[0.6f64, 0.6, 0.6], true);
        assert!(s.shares.iter().all(|v| (v - third).abs() < 1e-15));
        assert_eq!(project_simplex(&[1.2, 0.1, -0.3], true).shares, vec![1.0, 0.0, 0.0]);
        let pinned = project_simplex(&[1.2, 0.1, -0.3], false);
        assert_eq!(pinned.shares[0], 0.0);
        assert_relative_eq!(pinned.shares.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn leader_projection_examples() {
        let mut p = two_csp();
        p.population = 10;
        p.csps.truncate(1);
        p.csps[0].budget_cap = 5.0;
        let x = PopulationState::new(vec![0.0, 1.0], true).unwrap();
        let a = project_leader_strategies(&[1.0, 1.0, 1.0, 10.0], &x, &p).unwrap();
        assert_eq!((a.csps[0].theta, a.csps[0].bandwidth), (0.0, 5.0));
        let a = project_leader_strategies(&[0.0, 0.0, 1.5, -2.0], &x, &p).unwrap();
        assert_eq!((a.csps[0].theta, a.csps[0].bandwidth), (1.0, 0.0));
        let feas = [1.0, 0.1, 0.2, 3.0];
        assert_eq!(project_leader_strategies(&feas, &x, &p).unwrap().to_vec(), feas.to_vec());
    }

    #[test]
    fn cocoercivity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Result<f64> = estimate_cocoercivity(|_| Ok(vec![1.0, 2.0]), |r: &mut ChaCha8Rng| vec![r.random(), r.random()], 10, &mut rng);
        assert!(matches!(r, Err(MarketError::Cocoercivity(_))));
        let xi: f64 = estimate_cocoercivity(|y| Ok(y.to_vec()), |r: &mut ChaCha8Rng| vec![r.random::<f64>()], 10, &mut rng).unwrap();
        assert_relative_eq!(xi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gqvi_examples() {
        let p = two_csp();
        let x = PopulationState::new(vec![0.0, 0.5, 0.5], true).unwrap();
        let a = ProviderStrategy {
            mno: MnoStrategy { pu: 0.0, pc: 0.0 },
            csps: vec![CspStrategy { theta: 0.0, bandwidth: 1e6 }; 2],
        };
        // Symmetric split at zero prices; CSP gradients vanish, MNO gains from raising prices.
        let r = gqvi_residual(&x, &a, &p, &GradientOptions::default()).unwrap();
        let g = partial_gradients(&x, &a, &p);
        let expected_mno = g[0] * p.pu_cap + g[1] * (1e4 / 1e6);
        assert_relative_eq!(r, expected_mno, max_relative = 1e-12);

        // A CSP sponsoring under a positive price can improve by lowering theta.
        let a2 = ProviderStrategy {
            mno: MnoStrategy { pu: 2.0, pc: 0.0 },
            csps: vec![CspStrategy { theta: 0.4, bandwidth: 1e6 }, CspStrategy { theta: 0.0, bandwidth: 1e6 }],
        };
        let opts = GradientOptions { fixed_bandwidth: true, ..Default::default() };
        let r2 = gqvi_residual(&x, &a2, &p, &opts).unwrap();
        let mu_gap = ne_residual(&x, &a2, &p).unwrap();
        let mno_gap = {
            let g = partial_gradients(&x, &a2, &p);
            match maximize_polygon([g[0], g[1]], &mno_polygon(&a2, &x, &p)) {
                LpOutcome::Optimal { value, .. } => value - g[0] * 2.0,
                _ => unreachable!(),
            }
        };
        assert_relative_eq!(r2 - mu_gap - mno_gap, 2.0 * 500.0 * 0.4, max_relative = 1e-12);
    }
}
