//! Market parameters, strategies, population states and payoff formulas.
//!
//! Index convention: population shares are indexed `0..=M` with `0` the
//! opt-out strategy; CSP `j` (1-based, `1..=M`) owns `shares[j]` and
//! `csps[j - 1]` in both [`MarketParams`] and [`ProviderStrategy`].

use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::scalar::Scalar;

/// Tolerance applied to equality rows and budgets in [`validate_feasible`].
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Exogenous constants of one content/service provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CspParams<T> {
    /// QoE sensitivity.
    pub gamma1: T,
    /// Network-effect sensitivity.
    pub gamma2: T,
    /// Maintenance overhead, at least 1.
    pub overhead: T,
    /// Monetary worth per log-subscriber.
    pub sigma: T,
    /// Spending cap.
    pub budget_cap: T,
}

impl<T: Scalar> CspParams<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma1 > T::zero()
            && self.gamma2 > T::zero()
            && self.overhead >= T::one()
            && self.sigma > T::zero()
            && self.budget_cap > T::zero();
        if ok {
            Ok(())
        } else {
            Err(MarketError::InvalidParams(format!(
                "csp requires gamma1, gamma2, sigma, budget_cap > 0 and overhead >= 1, got {self:?}"
            )))
        }
    }
}

/// All exogenous constants of the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams<T> {
    /// Number of mobile users.
    pub population: usize,
    pub csps: Vec<CspParams<T>>,
    /// Cap on the subscription price.
    pub pu_cap: T,
    /// Cap on the bandwidth price.
    pub pc_cap: T,
    /// Whether users may refrain from subscribing.
    #[serde(default = "enabled")]
    pub opt_out_allowed: bool,
}

fn enabled() -> bool {
    true
}

impl<T: Scalar> MarketParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(MarketError::InvalidParams("population must be positive".into()));
        }
        if self.csps.is_empty() {
            return Err(MarketError::InvalidParams("at least one CSP required".into()));
        }
        if !(self.pu_cap > T::zero() && self.pc_cap > T::zero()) {
            return Err(MarketError::InvalidParams("price caps must be positive".into()));
        }
        self.csps.iter().try_for_each(CspParams::validate)
    }

    /// Number of CSPs `M`.
    #[inline]
    pub fn n_csp(&self) -> usize {
        self.csps.len()
    }

    /// Population size as a real.
    #[inline]
    pub fn n_users(&self) -> T {
        T::from_count(self.population)
    }

    /// Parameters of CSP `j` (1-based).
    #[inline]
    pub fn csp(&self, j: usize) -> &CspParams<T> {
        &self.csps[j - 1]
    }
}

/// Prices set by the network operator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnoStrategy<T> {
    pub pu: T,
    pub pc: T,
}

/// Sponsorship level and purchased bandwidth of one CSP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CspStrategy<T> {
    pub theta: T,
    pub bandwidth: T,
}

/// Joint leader action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderStrategy<T> {
    pub mno: MnoStrategy<T>,
    pub csps: Vec<CspStrategy<T>>,
}

impl<T: Scalar> ProviderStrategy<T> {
    /// Flat layout `(pu, pc, theta_1, b_1, ..., theta_M, b_M)`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(2 + 2 * self.csps.len());
        v.push(self.mno.pu);
        v.push(self.mno.pc);
        for c in &self.csps {
            v.push(c.theta);
            v.push(c.bandwidth);
        }
        v
    }

    /// Inverse of [`ProviderStrategy::to_vec`].
    pub fn from_slice(v: &[T]) -> Result<Self> {
        if v.len() < 4 || !v.len().is_multiple_of(2) {
            return Err(MarketError::Dimension { expected: 4, got: v.len() });
        }
        Ok(Self {
            mno: MnoStrategy { pu: v[0], pc: v[1] },
            csps: v[2..]
                .chunks_exact(2)
                .map(|c| CspStrategy { theta: c[0], bandwidth: c[1] })
                .collect(),
        })
    }

    /// Strategy of CSP `j` (1-based).
    #[inline]
    pub fn csp(&self, j: usize) -> &CspStrategy<T> {
        &self.csps[j - 1]
    }

    /// Checks the box rows only.
    pub fn validate_box(&self, p: &MarketParams<T>) -> Result<()> {
        if self.csps.len() != p.n_csp() {
            return Err(MarketError::Dimension { expected: p.n_csp(), got: self.csps.len() });
        }
        let MnoStrategy { pu, pc } = self.mno;
        if !(pu >= T::zero() && pu <= p.pu_cap && pc >= T::zero() && pc <= p.pc_cap) {
            return Err(MarketError::InvalidStrategy(format!("prices ({pu}, {pc}) outside their caps")));
        }
        for (k, c) in self.csps.iter().enumerate() {
            if !(c.theta >= T::zero() && c.theta <= T::one() && c.bandwidth >= T::zero()) {
                return Err(MarketError::InvalidStrategy(format!(
                    "csp {}: theta {} or bandwidth {} out of range",
                    k + 1,
                    c.theta,
                    c.bandwidth
                )));
            }
        }
        Ok(())
    }
}

/// Share vector over `{opt-out, CSP 1, ..., CSP M}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationState<T> {
    pub shares: Vec<T>,
}

impl<T: Scalar> PopulationState<T> {
    /// Validates and wraps a share vector.
    pub fn new(shares: Vec<T>, opt_out_allowed: bool) -> Result<Self> {
        let s = Self { shares };
        s.check(opt_out_allowed, T::lit(1e-12))?;
        Ok(s)
    }

    /// Wraps without validation.
    pub fn new_unchecked(shares: Vec<T>) -> Self {
        Self { shares }
    }

    /// Uniform shares over the available strategies.
    pub fn barycenter(n_csp: usize, opt_out_allowed: bool) -> Self {
        let k = if opt_out_allowed { n_csp + 1 } else { n_csp };
        let w = T::one() / T::from_count(k);
        let mut shares = vec![w; n_csp + 1];
        if !opt_out_allowed {
            shares[0] = T::zero();
        }
        Self { shares }
    }

    /// Checks nonnegativity, the simplex sum and the opt-out pin.
    pub fn check(&self, opt_out_allowed: bool, tol: T) -> Result<()> {
        if self.shares.len() < 2 {
            return Err(MarketError::InvalidState("need at least one CSP share".into()));
        }
        if let Some(v) = self.shares.iter().find(|v| !(**v >= -tol)) {
            return Err(MarketError::InvalidState(format!("negative or non-finite share {v}")));
        }
        let sum: T = self.shares.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(MarketError::InvalidState(format!("shares sum to {sum}")));
        }
        if !opt_out_allowed && self.shares[0] != T::zero() {
            return Err(MarketError::InvalidState("opt-out share must be 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn n_csp(&self) -> usize {
        self.shares.len() - 1
    }

    /// Subscriber count `x_j N` of strategy `j`.
    #[inline]
    pub fn subscribers(&self, j: usize, n_users: T) -> T {
        self.shares[j] * n_users
    }

    /// Sup-norm distance to another state.
    pub fn dist_inf(&self, other: &Self) -> T {
        self.shares
            .iter()
            .zip(&other.shares)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// `log(b / (o + n))` for `n > 0` and exactly `0` for `n = 0`.
pub fn qoe_congestion<T: Scalar>(n: T, b: T, o: T) -> Result<T> {
    if n == T::zero() {
        return Ok(T::zero());
    }
    if !(b > T::zero()) || !(n > T::zero()) {
        return Err(MarketError::Domain(format!("qoe with n = {n}, b = {b}")));
    }
    Ok((b / (o + n)).ln())
}

/// `log(1 + n)`.
pub fn network_effect<T: Scalar>(n: T) -> Result<T> {
    if !(n >= T::zero()) {
        return Err(MarketError::Domain(format!("network effect with n = {n}")));
    }
    Ok(n.ln_1p())
}

/// Payoff of one user choosing CSP `j` when it holds share `xj`.
pub fn mu_payoff<T: Scalar>(j: usize, xj: T, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> Result<T> {
    let c = p.csp(j);
    let s = a.csp(j);
    let n = xj * p.n_users();
    let q = qoe_congestion(n, s.bandwidth, c.overhead)?;
    let e = network_effect(n)?;
    Ok(c.gamma1 * q + c.gamma2 * e - (T::one() - s.theta) * a.mno.pu)
}

/// Derivative of [`mu_payoff`] in `xj` on the branch `xj > 0`.
pub fn mu_payoff_slope<T: Scalar>(j: usize, xj: T, p: &MarketParams<T>) -> T {
    let c = p.csp(j);
    let nu = p.n_users();
    let n = xj * nu;
    nu * (c.gamma2 / (T::one() + n) - c.gamma1 / (c.overhead + n))
}

/// Payoff of every strategy; entry 0 is the opt-out payoff `0`.
pub fn mu_payoff_vector<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
) -> Result<Vec<T>> {
    let m = p.n_csp();
    if x.shares.len() != m + 1 {
        return Err(MarketError::Dimension { expected: m + 1, got: x.shares.len() });
    }
    let mut out = Vec::with_capacity(m + 1);
    out.push(T::zero());
    for j in 1..=m {
        out.push(mu_payoff(j, x.shares[j], a, p)?);
    }
    Ok(out)
}

/// Utility of CSP `j`: `sigma log(1 + n) - pu theta n - pc b`.
pub fn csp_payoff<T: Scalar>(j: usize, x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> T {
    let c = p.csp(j);
    let s = a.csp(j);
    let n = x.subscribers(j, p.n_users());
    c.sigma * n.ln_1p() - a.mno.pu * s.theta * n - a.mno.pc * s.bandwidth
}

/// Revenue of the network operator.
pub fn mno_payoff<T: Scalar>(x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> T {
    let bw: T = a.csps.iter().map(|c| c.bandwidth).sum();
    let subscribed: T = x.shares[1..].iter().copied().sum();
    a.mno.pc * bw + a.mno.pu * p.n_users() * subscribed
}

/// Budget row `g_j = pu theta n + pc b - cap`; feasible iff `<= 0`.
pub fn budget_slack<T: Scalar>(j: usize, x: &PopulationState<T>, a: &ProviderStrategy<T>, p: &MarketParams<T>) -> T {
    let s = a.csp(j);
    let n = x.subscribers(j, p.n_users());
    a.mno.pu * s.theta * n + a.mno.pc * s.bandwidth - p.csp(j).budget_cap
}

/// Constraint row of the joint feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintRow {
    SimplexSum,
    ShareNonnegative(usize),
    OptOutPinned,
    SubscriptionPriceBox,
    BandwidthPriceBox,
    ThetaBox(usize),
    BandwidthNonnegative(usize),
    Budget(usize),
}

/// One violated row with its signed excess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation<T> {
    pub row: ConstraintRow,
    pub magnitude: T,
}

/// Result of [`validate_feasible`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport<T> {
    pub feasible: bool,
    pub violations: Vec<Violation<T>>,
    /// Degeneracy flags that do not make the point infeasible.
    pub notes: Vec<String>,
}

impl<T: Scalar> FeasibilityReport<T> {
    /// Largest violation magnitude, 0 if feasible.
    pub fn worst(&self) -> T {
        self.violations.iter().map(|v| v.magnitude.abs()).fold(T::zero(), T::max)
    }
}

/// Checks every row of the joint constraint system.
pub fn validate_feasible<T: Scalar>(
    x: &PopulationState<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
) -> FeasibilityReport<T> {
    let tol = T::lit(FEASIBILITY_TOL);
    let mut v = Vec::new();
    let mut push = |row, magnitude| v.push(Violation { row, magnitude });

    let sum: T = x.shares.iter().copied().sum();
    if (sum - T::one()).abs() > tol {
        push(ConstraintRow::SimplexSum, sum - T::one());
    }
    for (j, s) in x.shares.iter().enumerate() {
        if *s < T::zero() {
            push(ConstraintRow::ShareNonnegative(j), *s);
        }
    }
    if !p.opt_out_allowed && x.shares.first().is_some_and(|s| *s != T::zero()) {
        push(ConstraintRow::OptOutPinned, x.shares[0]);
    }
    let box_excess = |val: T, hi: T| {
        if val < T::zero() {
            val
        } else if val > hi {
            val - hi
        } else {
            T::zero()
        }
    };
    let e = box_excess(a.mno.pu, p.pu_cap);
    if e != T::zero() {
        push(ConstraintRow::SubscriptionPriceBox, e);
    }
    let e = box_excess(a.mno.pc, p.pc_cap);
    if e != T::zero() {
        push(ConstraintRow::BandwidthPriceBox, e);
    }
    let m = p.n_csp().min(a.csps.len()).min(x.shares.len().saturating_sub(1));
    for j in 1..=m {
        let s = a.csp(j);
        let e = box_excess(s.theta, T::one());
        if e != T::zero() {
            push(ConstraintRow::ThetaBox(j), e);
        }
        if s.bandwidth < T::zero() {
            push(ConstraintRow::BandwidthNonnegative(j), s.bandwidth);
        }
        let g = budget_slack(j, x, a, p);
        if g > tol {
            push(ConstraintRow::Budget(j), g);
        }
    }
    let mut notes = Vec::new();
    if a.mno.pc == T::zero() {
        notes.push("bandwidth price is zero: CSP utilities are flat in bandwidth".to_string());
    }
    if a.csps.len() != p.n_csp() || x.shares.len() != p.n_csp() + 1 {
        notes.push("dimension mismatch between state, strategy and parameters".to_string());
    }
    FeasibilityReport { feasible: v.is_empty() && notes.iter().all(|n| !n.starts_with("dimension")), violations: v, notes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_csp(gamma1: f64, gamma2: f64, overhead: f64) -> MarketParams<f64> {
        MarketParams {
            population: 1000,
            csps: vec![CspParams { gamma1, gamma2, overhead, sigma: 20.0, budget_cap: 5.0 }],
            pu_cap: 10.0,
            pc_cap: 1.0,
            opt_out_allowed: true,
        }
    }

    fn strat(pu: f64, pc: f64, theta: f64, b: f64) -> ProviderStrategy<f64> {
        ProviderStrategy { mno: MnoStrategy { pu, pc }, csps: vec![CspStrategy { theta, bandwidth: b }] }
    }

    #[test]
    fn qoe_examples() {
        assert_eq!(qoe_congestion(0.0, 1.4e6, 2.0).unwrap(), 0.0);
        assert_relative_eq!(qoe_congestion(1000.0, 1.4e6, 2.0).unwrap(), 7.242_229_5, epsilon = 1e-6);
        assert_eq!(qoe_congestion(1.0, 4.0, 3.0).unwrap(), 0.0);
        assert!(matches!(qoe_congestion(1.0, 0.0, 2.0), Err(MarketError::Domain(_))));
    }

    #[test]
    fn network_effect_examples() {
        assert_eq!(network_effect(0.0).unwrap(), 0.0);
        assert_relative_eq!(network_effect(1000.0).unwrap(), 6.908_754_8, epsilon = 1e-6);
        assert_relative_eq!(network_effect(std::f64::consts::E - 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert!(network_effect(-1.0).is_err());
    }

    #[test]
    fn mu_payoff_examples() {
        let p = one_csp(1.7, 1.1, 2.0);
        let x = PopulationState::new(vec![0.0, 1.0], true).unwrap();
        let a = strat(2.0, 0.0, 0.5, 1.4e6);
        let pi = mu_payoff_vector(&x, &a, &p).unwrap();
        assert_eq!(pi[0], 0.0);
        assert_relative_eq!(pi[1], 1.7 * (1.4e6f64 / 1002.0).ln() + 1.1 * 1001f64.ln() - 1.0, epsilon = 1e-12);
        assert_relative_eq!(pi[1], 18.9113, epsilon = 1e-3);

        let a_full = strat(7.0, 0.0, 1.0, 1.4e6);
        assert_eq!(mu_payoff_vector(&x, &a_full, &p).unwrap()[1], mu_payoff_vector(&x, &strat(0.0, 0.0, 1.0, 1.4e6), &p).unwrap()[1]);

        let x0 = PopulationState::new(vec![1.0, 0.0], true).unwrap();
        assert_eq!(mu_payoff_vector(&x0, &a, &p).unwrap()[1], -1.0);
    }

    #[test]
    fn csp_and_mno_examples() {
        let mut p = one_csp(1.7, 1.1, 2.0);
        let x = PopulationState::new(vec![0.0, 1.0], true).unwrap();
        let a = strat(1.0, 0.001, 0.5, 2e6);
        assert_relative_eq!(csp_payoff(1, &x, &a, &p), 20.0 * 1001f64.ln() - 500.0 - 2000.0, epsilon = 1e-9);
        assert_relative_eq!(csp_payoff(1, &x, &a, &p), -2361.82, epsilon = 1e-2);
        let x0 = PopulationState::new(vec![1.0, 0.0], true).unwrap();
        assert_eq!(csp_payoff(1, &x0, &strat(1.0, 0.001, 0.5, 0.0), &p), 0.0);

        p.csps.push(p.csps[0]);
        let a2 = ProviderStrategy {
            mno: MnoStrategy { pu: 2.0, pc: 0.001 },
            csps: vec![CspStrategy { theta: 0.0, bandwidth: 1e6 }; 2],
        };
        let x2 = PopulationState::new(vec![0.0, 0.5, 0.5], true).unwrap();
        assert_relative_eq!(mno_payoff(&x2, &a2, &p), 4000.0, epsilon = 1e-9);
    }

    #[test]
    fn budget_examples() {
        let mut p = one_csp(1.7, 1.1, 2.0);
        p.population = 10;
        let x = PopulationState::new(vec![0.0, 1.0], true).unwrap();
        assert_eq!(budget_slack(1, &x, &strat(1.0, 1.0, 1.0, 10.0), &p), 15.0);
        assert_eq!(budget_slack(1, &x, &strat(1.0, 1.0, 0.0, 0.0), &p), -5.0);
    }

    #[test]
    fn feasibility_rows() {
        let p = one_csp(1.7, 1.1, 2.0);
        let bad_sum = PopulationState::new_unchecked(vec![0.5, 1.0]);
        let r = validate_feasible(&bad_sum, &strat(1.0, 0.0, 0.0, 1.0), &p);
        assert!(!r.feasible);
        assert_eq!(r.violations[0].row, ConstraintRow::SimplexSum);
        assert_relative_eq!(r.violations[0].magnitude, 0.5);
        assert!(r.notes.iter().any(|n| n.contains("bandwidth price is zero")));

        let x = PopulationState::new(vec![0.5, 0.5], true).unwrap();
        let r = validate_feasible(&x, &strat(0.0, 0.0, 1.2, 1.0), &p);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].row, ConstraintRow::ThetaBox(1));
        assert_relative_eq!(r.violations[0].magnitude, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn flat_layout_round_trip() {
        let a = strat(1.0, 2.0, 0.3, 4.0);
        assert_eq!(ProviderStrategy::from_slice(&a.to_vec()).unwrap(), a);
    }
}
