//! Replicator dynamics with information delays, their linearization around a
//! rest point, and Lyapunov-Krasovskii stability certificates.
//!
//! Lagged payoff information enters the pairwise imitation form
//! `dx_j/dt = x_j(t) sum_{i != j} x_i(t - tau_i) (pi_j(x_j(t)) - pi_i(x_i(t - tau_i)))`.
//! When opting out is allowed, the opt-out strategy takes part in the sum with
//! payoff `0` and no delay.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};
use crate::market_model::{mu_payoff, mu_payoff_slope, MarketParams, PopulationState, ProviderStrategy};
use crate::replicator::{OdeConfig, Trajectory, SIMPLEX_GUARD};
use crate::scalar::Scalar;

/// Per-CSP information delays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec<T> {
    /// `taus[j - 1]` is the delay of CSP `j`.
    pub taus: Vec<T>,
    pub uniform: bool,
}

impl<T: Scalar> DelaySpec<T> {
    pub fn uniform(n_csp: usize, tau: T) -> Self {
        Self { taus: vec![tau; n_csp], uniform: true }
    }

    pub fn validate(&self, n_csp: usize) -> Result<()> {
        if self.taus.len() != n_csp {
            return Err(MarketError::Dimension { expected: n_csp, got: self.taus.len() });
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t >= T::zero()) || !t.is_finite()) {
            return Err(MarketError::InvalidParams(format!("delay {t} must be finite and nonnegative")));
        }
        if self.uniform && self.taus.iter().any(|t| *t != self.taus[0]) {
            return Err(MarketError::InvalidParams("uniform delay spec has unequal entries".into()));
        }
        Ok(())
    }

    pub fn max_delay(&self) -> T {
        self.taus.iter().copied().fold(T::zero(), T::max)
    }

    /// Smallest strictly positive delay.
    pub fn min_positive(&self) -> Option<T> {
        self.taus.iter().copied().filter(|t| *t > T::zero()).reduce(T::min)
    }
}

/// State on `[-tau_max, 0]` before the delayed integration starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialHistory<T> {
    Constant(PopulationState<T>),
    /// Samples at ascending times `<= 0`; linear interpolation in between,
    /// clamped outside.
    Sampled { times: Vec<T>, states: Vec<PopulationState<T>> },
}

impl<T: Scalar> InitialHistory<T> {
    fn current(&self) -> &PopulationState<T> {
        match self {
            InitialHistory::Constant(x) => x,
            InitialHistory::Sampled { states, .. } => states.last().expect("nonempty history"),
        }
    }

    fn share_at(&self, i: usize, s: T) -> T {
        match self {
            InitialHistory::Constant(x) => x.shares[i],
            InitialHistory::Sampled { times, states } => {
                let k = times.partition_point(|t| *t <= s);
                if k == 0 {
                    return states[0].shares[i];
                }
                if k >= times.len() {
                    return states[times.len() - 1].shares[i];
                }
                let w = (s - times[k - 1]) / (times[k] - times[k - 1]);
                states[k - 1].shares[i] + w * (states[k].shares[i] - states[k - 1].shares[i])
            }
        }
    }

    fn validate(&self, n_csp: usize) -> Result<()> {
        if let InitialHistory::Sampled { times, states } = self {
            if times.is_empty() || times.len() != states.len() {
                return Err(MarketError::HistoryBuffer("history needs one state per sample time".into()));
            }
            if times.windows(2).any(|w| !(w[0] < w[1])) || *times.last().unwrap() != T::zero() {
                return Err(MarketError::InvalidState("history times must ascend and end at 0".into()));
            }
            if states.iter().any(|s| s.shares.len() != n_csp + 1) {
                return Err(MarketError::Dimension { expected: n_csp + 1, got: states[0].shares.len() });
            }
        }
        Ok(())
    }
}

/// Delayed rates. `x_lagged[i]` is `x_i(t - tau_i)` for `i >= 1`; entry 0 is
/// ignored because the opt-out is undelayed.
pub fn delayed_rhs<T: Scalar>(
    x_now: &PopulationState<T>,
    x_lagged: &[T],
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
) -> Result<Vec<T>> {
    let d = x_now.shares.len();
    if x_lagged.len() != d {
        return Err(MarketError::Dimension { expected: d, got: x_lagged.len() });
    }
    if let Some(v) = x_lagged.iter().find(|v| !(**v >= -T::lit(SIMPLEX_GUARD))) {
        return Err(MarketError::InvalidState(format!("lagged share {v} is negative")));
    }
    let mut now = vec![T::zero(); d];
    let mut lag = vec![T::zero(); d];
    for j in 1..d {
        now[j] = mu_payoff(j, x_now.shares[j], a, p)?;
        lag[j] = mu_payoff(j, x_lagged[j].max(T::zero()), a, p)?;
    }
    Ok(pairwise_rates(&x_now.shares, x_lagged, &now, &lag, p.opt_out_allowed))
}

fn pairwise_rates<T: Scalar>(x: &[T], xl: &[T], now: &[T], lag: &[T], opt_out: bool) -> Vec<T> {
    let d = x.len();
    let mut out = vec![T::zero(); d];
    for j in 0..d {
        if j == 0 && !opt_out {
            continue;
        }
        let mut acc = T::zero();
        if opt_out && j != 0 {
            acc += x[0] * now[j];
        }
        for i in 1..d {
            if i != j {
                acc += xl[i] * (now[j] - lag[i]);
            }
        }
        out[j] = x[j] * acc;
    }
    out
}

/// Ring of past states on the integration grid.
struct HistoryBuffer<'h, T> {
    initial: &'h InitialHistory<T>,
    dt: T,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> HistoryBuffer<'_, T> {
    fn share_at(&self, i: usize, s: T) -> T {
        if s <= T::zero() {
            return self.initial.share_at(i, s);
        }
        let steps = self.data.len() / self.dim;
        let pos = s / self.dt;
        let k = pos.floor().to_usize().unwrap_or(usize::MAX).min(steps - 1);
        if k + 1 >= steps {
            return self.data[(steps - 1) * self.dim + i];
        }
        let w = pos - T::from_count(k);
        let lo = self.data[k * self.dim + i];
        let hi = self.data[(k + 1) * self.dim + i];
        lo + w * (hi - lo)
    }
}

/// Fixed-step RK4 integration of the delayed dynamics.
///
/// Lagged values come from linear interpolation on the stored grid. Zero
/// delays read the current stage state. Negative drift is clamped and the
/// state renormalized after every step.
pub fn integrate_delayed<T: Scalar>(
    history: &InitialHistory<T>,
    taus: &DelaySpec<T>,
    a: &ProviderStrategy<T>,
    p: &MarketParams<T>,
    cfg: &OdeConfig<T>,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    let m = p.n_csp();
    taus.validate(m)?;
    history.validate(m)?;
    if let Some(tmin) = taus.min_positive() {
        if cfg.dt > tmin / T::lit(10.0) * (T::one() + T::lit(1e-12)) {
            return Err(MarketError::HistoryBuffer(format!("dt {} exceeds a tenth of the smallest delay {}", cfg.dt, tmin)));
        }
    }
    let x0 = history.current();
    x0.check(p.opt_out_allowed, T::lit(1e-9))?;
    let d = m + 1;
    let dt = cfg.dt;
    let n_steps = (cfg.t_max / dt).round().to_usize().unwrap_or(usize::MAX).max(1);
    let tau_max = taus.max_delay();
    let mut buf = HistoryBuffer { initial: history, dt, dim: d, data: Vec::with_capacity((n_steps + 1) * d) };
    buf.data.extend_from_slice(&x0.shares);
    let mut traj = Trajectory::with_capacity(n_steps / cfg.record_stride + 2);
    traj.push(T::zero(), &x0.shares, a, p)?;

    let lagged = |buf: &HistoryBuffer<T>, stage: &[T], s: T| -> Vec<T> {
        let mut v = stage.to_vec();
        for (i, vi) in v.iter_mut().enumerate().skip(1) {
            let tau = taus.taus[i - 1];
            if tau > T::zero() {
                *vi = buf.share_at(i, s - tau);
            }
        }
        v
    };
    let rates = |stage: &[T], lag: &[T]| -> Result<Vec<T>> {
        delayed_rhs(&PopulationState::new_unchecked(stage.to_vec()), lag, a, p)
    };

    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let mut x = x0.shares.clone();
    let mut calm_since: Option<T> = None;
    let mut converged = false;
    let mut t_end = T::zero();
    for step in 1..=n_steps {
        let t = T::from_count(step - 1) * dt;
        let k1 = rates(&x, &lagged(&buf, &x, t))?;
        let sup = k1.iter().map(|v| v.abs()).fold(T::zero(), T::max);
        if sup <= cfg.convergence_tol {
            let since = *calm_since.get_or_insert(t);
            if t - since >= tau_max {
                converged = true;
                t_end = t;
                break;
            }
        } else {
            calm_since = None;
        }
        let stage = |k: &[T], c: T| -> Vec<T> { x.iter().zip(k).map(|(xi, ki)| *xi + c * dt * *ki).collect() };
        let y2 = stage(&k1, half);
        let k2 = rates(&y2, &lagged(&buf, &y2, t + half * dt))?;
        let y3 = stage(&k2, half);
        let k3 = rates(&y3, &lagged(&buf, &y3, t + half * dt))?;
        let y4 = stage(&k3, T::one());
        let k4 = rates(&y4, &lagged(&buf, &y4, t + dt))?;
        for j in 0..d {
            x[j] += dt * sixth * (k1[j] + T::lit(2.0) * (k2[j] + k3[j]) + k4[j]);
        }
        renormalize(&mut x)?;
        buf.data.extend_from_slice(&x);
        t_end = t + dt;
        if step % cfg.record_stride == 0 {
            traj.push(t_end, &x, a, p)?;
        }
    }
    if traj.times.last().is_none_or(|t| *t < t_end) {
        traj.push(t_end, &x, a, p)?;
    }
    traj.converged = converged;
    Ok(traj)
}

/// The delayed field does not conserve the total share, so only negativity is
/// guarded before renormalizing.
fn renormalize<T: Scalar>(x: &mut [T]) -> Result<()> {
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    if !(lo >= -T::lit(SIMPLEX_GUARD)) {
        return Err(MarketError::StepSize((-lo).as_f64()));
    }
    for v in x.iter_mut() {
        *v = v.max(T::zero());
    }
    let sum: T = x.iter().copied().sum();
    if !(sum > T::zero()) || !sum.is_finite() {
        return Err(MarketError::StepSize(f64::INFINITY));
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Linear variational system around a rest point, in the coordinates
/// `x_1..x_M` (the opt-out share is eliminated through the simplex).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub rest_point: PopulationState<f64>,
    /// Undelayed diagonal part.
    pub a0: DMatrix<f64>,
    /// `a_delay[j]` carries column `j` of the off-diagonal part.
    pub a_delay: Vec<DMatrix<f64>>,
    pub combined: DMatrix<f64>,
    /// Largest entrywise gap between the analytic and finite-difference
    /// Jacobians, relative to `max(1, max |J|)`.
    pub fd_discrepancy: f64,
}

impl LinearizedSystem {
    /// Builds the split from a Jacobian.
    pub fn from_jacobian(rest_point: PopulationState<f64>, jac: DMatrix<f64>) -> Result<Self> {
        let m = jac.nrows();
        if jac.ncols() != m {
            return Err(MarketError::Dimension { expected: m, got: jac.ncols() });
        }
        let a0 = DMatrix::from_diagonal(&jac.diagonal());
        let a_delay = (0..m)
            .map(|j| {
                let mut aj = DMatrix::zeros(m, m);
                for i in 0..m {
                    if i != j {
                        aj[(i, j)] = jac[(i, j)];
                    }
                }
                aj
            })
            .collect();
        Ok(Self { rest_point, a0, a_delay, combined: jac, fd_discrepancy: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    /// Uniform-delay matrix `sum_j A_j`.
    pub fn a1(&self) -> DMatrix<f64> {
        self.a_delay.iter().fold(DMatrix::zeros(self.dim(), self.dim()), |acc, aj| acc + aj)
    }

    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.combined.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
    }

    /// `1 / min |Re lambda|` over the spectrum of the undelayed Jacobian.
    pub fn time_constant(&self) -> f64 {
        let slowest = self.eigenvalues().iter().map(|(re, _)| re.abs()).fold(f64::INFINITY, f64::min);
        1.0 / slowest
    }
}

fn reduced_field(y: &[f64], a: &ProviderStrategy<f64>, p: &MarketParams<f64>) -> Result<Vec<f64>> {
    let pi: Vec<f64> = (0..y.len()).map(|k| mu_payoff(k + 1, y[k], a, p)).collect::<Result<_>>()?;
    let avg: f64 = y.iter().zip(&pi).map(|(s, q)| s * q).sum();
    Ok(y.iter().zip(&pi).map(|(s, q)| s * (q - avg)).collect())
}

/// Analytic Jacobian of the undelayed dynamics at `x_star`, split into the
/// undelayed diagonal and the per-CSP delayed columns.
pub fn linearize_at(
    x_star: &PopulationState<f64>,
    a: &ProviderStrategy<f64>,
    p: &MarketParams<f64>,
    fd_step: f64,
) -> Result<LinearizedSystem> {
    let m = p.n_csp();
    if x_star.shares.len() != m + 1 {
        return Err(MarketError::Dimension { expected: m + 1, got: x_star.shares.len() });
    }
    let y: Vec<f64> = x_star.shares[1..].to_vec();
    let rhs = reduced_field(&y, a, p)?;
    let res = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if res > 1e-8 {
        return Err(MarketError::InvalidState(format!("not a rest point: max rate {res:e}")));
    }
    let pi: Vec<f64> = (0..m).map(|k| mu_payoff(k + 1, y[k], a, p)).collect::<Result<_>>()?;
    let slope: Vec<f64> = (0..m).map(|k| mu_payoff_slope(k + 1, y[k], p)).collect();
    let avg: f64 = y.iter().zip(&pi).map(|(s, q)| s * q).sum();
    let mut jac = DMatrix::zeros(m, m);
    for j in 0..m {
        for k in 0..m {
            let own = if j == k { pi[j] - avg + y[j] * slope[j] } else { 0.0 };
            jac[(j, k)] = own - y[j] * (pi[k] + y[k] * slope[k]);
        }
    }
    let fd = fd_jacobian(&y, a, p, fd_step)?;
    let scale = jac.amax().max(1.0);
    let gap = (&jac - &fd).amax() / scale;
    let mut lin = LinearizedSystem::from_jacobian(x_star.clone(), jac)?;
    lin.fd_discrepancy = gap;
    Ok(lin)
}

/// Central differences in the interior, second-order one-sided differences
/// with step `h / 100` within `h` of the boundary.
fn fd_jacobian(y: &[f64], a: &ProviderStrategy<f64>, p: &MarketParams<f64>, h: f64) -> Result<DMatrix<f64>> {
    let m = y.len();
    let mut jac = DMatrix::zeros(m, m);
    for k in 0..m {
        let at = |dk: f64| -> Result<Vec<f64>> {
            let mut z = y.to_vec();
            z[k] += dk;
            reduced_field(&z, a, p)
        };
        let col: Vec<f64> = if y[k] > h {
            let (fp, fm) = (at(h)?, at(-h)?);
            fp.iter().zip(&fm).map(|(u, v)| (u - v) / (2.0 * h)).collect()
        } else {
            let hb = 0.01 * h;
            let (f0, f1, f2) = (at(0.0)?, at(hb)?, at(2.0 * hb)?);
            (0..m).map(|i| (-3.0 * f0[i] + 4.0 * f1[i] - f2[i]) / (2.0 * hb)).collect()
        };
        for i in 0..m {
            jac[(i, k)] = col[i];
        }
    }
    Ok(jac)
}

/// Every eigenvalue of the undelayed Jacobian has real part below `-1e-10`.
pub fn small_delay_stability(lin: &LinearizedSystem) -> bool {
    lin.eigenvalues().iter().all(|(re, _)| *re < -1e-10)
}

/// Lyapunov-Krasovskii matrices. `omega` is set when `P = I`, `R = omega I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiCertificate {
    pub p_matrix: DMatrix<f64>,
    /// One matrix per delay channel, or a single matrix for uniform delay.
    pub r_matrices: Vec<DMatrix<f64>>,
    pub omega: Option<f64>,
}

impl LmiCertificate {
    /// `P = I`, `R = omega I` with one block per channel.
    pub fn scaled_identity(dim: usize, channels: usize, omega: f64) -> Self {
        Self {
            p_matrix: DMatrix::identity(dim, dim),
            r_matrices: vec![DMatrix::identity(dim, dim) * omega; channels],
            omega: Some(omega),
        }
    }

    /// Symmetry to `1e-12` and nonnegative spectra.
    pub fn validate(&self) -> Result<()> {
        for m in std::iter::once(&self.p_matrix).chain(&self.r_matrices) {
            if !m.is_square() || (m - m.transpose()).amax() > 1e-12 {
                return Err(MarketError::InvalidParams("certificate matrix is not symmetric".into()));
            }
            let lo = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if lo < -1e-12 {
                return Err(MarketError::InvalidParams(format!("certificate matrix has eigenvalue {lo:e}")));
            }
        }
        Ok(())
    }
}

/// Largest eigenvalue of the block matrix `Phi`. A single `R` selects the
/// uniform-delay form with `A_1 = sum_j A_j`; `M` blocks select the
/// per-channel form.
pub fn lmi_max_eigenvalue(lin: &LinearizedSystem, cert: &LmiCertificate) -> Result<f64> {
    let n = lin.dim();
    let blocks: Vec<DMatrix<f64>> = match cert.r_matrices.len() {
        1 => vec![lin.a1()],
        k if k == lin.a_delay.len() => lin.a_delay.clone(),
        k => return Err(MarketError::Dimension { expected: lin.a_delay.len(), got: k }),
    };
    let pm = &cert.p_matrix;
    if pm.nrows() != n || cert.r_matrices.iter().any(|r| r.nrows() != n || r.ncols() != n) {
        return Err(MarketError::Dimension { expected: n, got: pm.nrows() });
    }
    let size = n * (blocks.len() + 1);
    let mut phi = DMatrix::zeros(size, size);
    let mut top = lin.a0.transpose() * pm + pm * &lin.a0;
    for r in &cert.r_matrices {
        top += r;
    }
    phi.view_mut((0, 0), (n, n)).copy_from(&top);
    for (k, (aj, r)) in blocks.iter().zip(&cert.r_matrices).enumerate() {
        let off = n * (k + 1);
        let pa = pm * aj;
        phi.view_mut((0, off), (n, n)).copy_from(&pa);
        phi.view_mut((off, 0), (n, n)).copy_from(&pa.transpose());
        phi.view_mut((off, off), (n, n)).copy_from(&(-r));
    }
    let sym = (&phi + phi.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.max())
}

/// Whether `Phi` is negative definite (largest eigenvalue below `-1e-10`).
pub fn lmi_negative_definite(lin: &LinearizedSystem, cert: &LmiCertificate) -> Result<bool> {
    cert.validate()?;
    Ok(lmi_max_eigenvalue(lin, cert)? < -1e-10)
}

/// Default scan grid: 121 points, log-spaced over `[1e-3, 1e3]`.
pub fn default_omega_grid() -> Vec<f64> {
    (0..121).map(|k| 10f64.powf(-3.0 + 0.05 * k as f64)).collect()
}

/// The scalar eigenvalue test `a0_ii + omega + |lambda_i - a0_ii|^2 / omega < 0`.
///
/// Eigenvalues and diagonal entries are paired after sorting both by real
/// part (eigenvalues by imaginary part second).
pub fn eigen_condition_holds(lin: &LinearizedSystem, omega: f64) -> bool {
    if !(omega > 0.0) {
        return false;
    }
    let mut eig = lin.eigenvalues();
    eig.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.1.total_cmp(&v.1)));
    let mut diag: Vec<f64> = lin.a0.diagonal().iter().copied().collect();
    diag.sort_by(f64::total_cmp);
    diag.iter().zip(&eig).all(|(d, (re, im))| {
        let gap = (re - d).powi(2) + im.powi(2);
        d + omega + gap / omega < 0.0
    })
}

/// First grid value of `omega` that passes [`eigen_condition_holds`] and whose
/// `P = I`, `R = omega I` certificate makes the uniform-delay `Phi` negative
/// definite.
pub fn delay_independent_certificate(lin: &LinearizedSystem, omega_grid: &[f64]) -> Option<f64> {
    if (0..lin.dim()).any(|i| lin.a0[(i, i)] >= 0.0) {
        return None;
    }
    omega_grid.iter().copied().find(|w| {
        eigen_condition_holds(lin, *w)
            && lmi_negative_definite(lin, &LmiCertificate::scaled_identity(lin.dim(), 1, *w)).unwrap_or(false)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{CspParams, CspStrategy, MnoStrategy};
    use crate::replicator::integrate_replicator;

    fn scalar(a0: f64, a1: f64) -> LinearizedSystem {
        let rest = PopulationState::new_unchecked(vec![0.0f64, 1.0]);
        let mut lin = LinearizedSystem::from_jacobian(rest, DMatrix::from_element(1, 1, a0 + a1)).unwrap();
        lin.a0 = DMatrix::from_element(1, 1, a0);
        lin.a_delay = vec![DMatrix::from_element(1, 1, a1)];
        lin
    }

    fn two_csp() -> (MarketParams<f64>, ProviderStrategy<f64>) {
        let c = |o: f64| CspParams { overhead: o, gamma1: 1.7, gamma2: 1.1, sigma: 3000.0, budget_cap: 1e4 };
        let p = MarketParams { csps: vec![c(2.0), c(5.0)], population: 100, pu_cap: 5.0, pc_cap: 1.0, opt_out_allowed: true };
        let a = ProviderStrategy {
            mno: MnoStrategy { pu: 1.0, pc: 0.0 },
            csps: vec![CspStrategy { theta: 0.2, bandwidth: 300.0 }, CspStrategy { theta: 0.0, bandwidth: 500.0 }],
        };
        (p, a)
    }

    #[test]
    fn scalar_stability_examples() {
        assert!(small_delay_stability(&scalar(-2.0, 1.0)));
        assert!(!small_delay_stability(&scalar(-1.0, 2.0)));
        let lin = scalar(-3.0, 1.0);
        let cert = LmiCertificate::scaled_identity(1, 1, 1.0);
        let top = lmi_max_eigenvalue(&lin, &cert).unwrap();
        assert!((top - (-3.0 + 5f64.sqrt())).abs() < 1e-12);
        assert!(lmi_negative_definite(&lin, &cert).unwrap());
        assert!(eigen_condition_holds(&lin, 1.0));
        assert!(delay_independent_certificate(&lin, &default_omega_grid()).is_some());
        assert_eq!(delay_independent_certificate(&scalar(-2.0, 1.0), &default_omega_grid()), None);
        assert_eq!(delay_independent_certificate(&scalar(0.5, -3.0), &default_omega_grid()), None);
        assert!(!lmi_negative_definite(&scalar(0.0, -1.0), &cert).unwrap());
    }

    #[test]
    fn eigen_condition_alone_is_not_sufficient() {
        let rest = PopulationState::new_unchecked(vec![0.0, 0.5, 0.5]);
        let jac = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -1.0]);
        let lin = LinearizedSystem::from_jacobian(rest, jac).unwrap();
        assert!(eigen_condition_holds(&lin, 0.01));
        assert!(!lmi_negative_definite(&lin, &LmiCertificate::scaled_identity(2, 1, 0.01)).unwrap());
        assert_eq!(delay_independent_certificate(&lin, &default_omega_grid()), None);
    }

    #[test]
    fn hand_expanded_two_csp_rates() {
        // M = 2 without opt-out: dx1 = x1 * x2(t - tau) (pi1 - pi2(lag)).
        let x = [0.0f64, 0.5, 0.5];
        let xl = [0.0, 0.25, 0.3];
        let now = [0.0, 2.0, 1.0];
        let lag = [0.0, 3.0, 1.5];
        let r = pairwise_rates(&x, &xl, &now, &lag, false);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.5 * 0.3 * (2.0 - 1.5)).abs() < 1e-15);
        assert!((r[2] - 0.5 * 0.25 * (1.0 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_delay_matches_undelayed() {
        let (p, a) = two_csp();
        let x0 = PopulationState::new(vec![0.2, 0.3, 0.5], true).unwrap();
        let cfg = OdeConfig { t_max: 20.0, ..OdeConfig::default() };
        let plain = integrate_replicator(&x0, &a, &p, &cfg).unwrap();
        let delayed = integrate_delayed(&InitialHistory::Constant(x0), &DelaySpec::uniform(2, 0.0), &a, &p, &cfg).unwrap();
        assert_eq!(plain.len(), delayed.len());
        for (u, v) in plain.states.iter().zip(&delayed.states) {
            assert!(u.dist_inf(v) < 1e-8);
        }
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let (p, a) = two_csp();
        let x0 = PopulationState::barycenter(2, true);
        let cfg = OdeConfig { t_max: 400.0, convergence_tol: 1e-13, ..OdeConfig::default() };
        let xs = integrate_replicator(&x0, &a, &p, &cfg).unwrap().terminal().clone();
        let lin = linearize_at(&xs, &a, &p, 1e-6).unwrap();
        assert!(lin.fd_discrepancy < 1e-5, "{}", lin.fd_discrepancy);
        assert!(((&lin.a0 + lin.a1()) - &lin.combined).amax() < 1e-12);
        assert!(small_delay_stability(&lin));
        assert!(linearize_at(&x0, &a, &p, 1e-6).is_err());
    }

    #[test]
    fn buffer_resolution_is_checked() {
        let (p, a) = two_csp();
        let x0 = PopulationState::barycenter(2, true);
        let cfg = OdeConfig::default();
        let r = integrate_delayed(&InitialHistory::Constant(x0), &DelaySpec::uniform(2, 0.05), &a, &p, &cfg);
        assert!(matches!(r, Err(MarketError::HistoryBuffer(_))));
    }
}
