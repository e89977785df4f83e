//! Planar convex polygons given as half-plane systems `a . z <= c`.
//!
//! Leader strategy sets are at most two-dimensional (two prices, or a
//! sponsorship level and a bandwidth), so projections and linear programs
//! over them are solved exactly by enumerating active sets and vertices.

use crate::error::{MarketError, Result};
use crate::scalar::Scalar;

/// Half-plane `a . z <= c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane<T> {
    pub a: [T; 2],
    pub c: T,
}

impl<T: Scalar> HalfPlane<T> {
    pub fn new(a0: T, a1: T, c: T) -> Self {
        Self { a: [a0, a1], c }
    }

    #[inline]
    pub fn eval(&self, z: [T; 2]) -> T {
        self.a[0] * z[0] + self.a[1] * z[1] - self.c
    }

    fn scale(&self, z: [T; 2]) -> T {
        self.c.abs() + (self.a[0] * z[0]).abs() + (self.a[1] * z[1]).abs()
    }

    fn is_trivial(&self) -> bool {
        self.a[0] == T::zero() && self.a[1] == T::zero()
    }
}

/// Axis-aligned box `lo <= z <= hi` as four half-planes.
pub fn box_planes<T: Scalar>(lo: [T; 2], hi: [T; 2]) -> Vec<HalfPlane<T>> {
    vec![
        HalfPlane::new(-T::one(), T::zero(), -lo[0]),
        HalfPlane::new(T::one(), T::zero(), hi[0]),
        HalfPlane::new(T::zero(), -T::one(), -lo[1]),
        HalfPlane::new(T::zero(), T::one(), hi[1]),
    ]
}

/// Largest violation `max_i (a_i . z - c_i)`, clamped at 0.
pub fn max_violation<T: Scalar>(z: [T; 2], planes: &[HalfPlane<T>]) -> T {
    planes.iter().map(|h| h.eval(z)).fold(T::zero(), T::max)
}

fn feasible<T: Scalar>(z: [T; 2], planes: &[HalfPlane<T>], rel: T) -> bool {
    z[0].is_finite() && z[1].is_finite() && planes.iter().all(|h| h.eval(z) <= rel * h.scale(z))
}

fn intersect<T: Scalar>(h: &HalfPlane<T>, k: &HalfPlane<T>) -> Option<[T; 2]> {
    let det = h.a[0] * k.a[1] - h.a[1] * k.a[0];
    let norm = (h.a[0].abs() + h.a[1].abs()) * (k.a[0].abs() + k.a[1].abs());
    if det.abs() <= T::lit(1e-14) * norm {
        return None;
    }
    Some([(h.c * k.a[1] - h.a[1] * k.c) / det, (h.a[0] * k.c - h.c * k.a[0]) / det])
}

fn project_line<T: Scalar>(z: [T; 2], h: &HalfPlane<T>, w: [T; 2]) -> [T; 2] {
    let m = [h.a[0] / w[0], h.a[1] / w[1]];
    let denom = h.a[0] * m[0] + h.a[1] * m[1];
    let r = h.eval(z) / denom;
    let y = [z[0] - m[0] * r, z[1] - m[1] * r];
    // Snap exactly onto the line in the dominant coordinate.
    if h.a[1] == T::zero() {
        [h.c / h.a[0] + T::zero(), y[1]]
    } else if h.a[0] == T::zero() {
        [y[0], h.c / h.a[1] + T::zero()]
    } else {
        y
    }
}

fn dist2<T: Scalar>(z: [T; 2], y: [T; 2], w: [T; 2]) -> T {
    let d0 = z[0] - y[0];
    let d1 = z[1] - y[1];
    w[0] * d0 * d0 + w[1] * d1 * d1
}

/// Projection of `z` onto the polygon in the metric `sum_i w_i d_i^2`.
///
/// Candidates are the point itself, its projection onto each boundary line
/// and every pairwise vertex; the closest feasible candidate is the exact
/// projection because some active set of size at most two generates it.
pub fn project_polygon<T: Scalar>(z: [T; 2], planes: &[HalfPlane<T>], w: [T; 2]) -> Result<[T; 2]> {
    let mut active: Vec<HalfPlane<T>> = Vec::with_capacity(planes.len());
    for h in planes {
        if h.is_trivial() {
            if h.c < T::zero() {
                return Err(MarketError::Infeasible(format!("constant row 0 <= {}", h.c)));
            }
        } else {
            active.push(*h);
        }
    }
    for rel in [T::lit(64.0) * T::epsilon(), T::lit(1e-9)] {
        if feasible(z, &active, rel) {
            return Ok(z);
        }
        let mut best: Option<([T; 2], T)> = None;
        let mut offer = |y: [T; 2]| {
            if feasible(y, &active, rel) {
                let d = dist2(z, y, w);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((y, d));
                }
            }
        };
        for h in &active {
            offer(project_line(z, h, w));
        }
        for i in 0..active.len() {
            for k in i + 1..active.len() {
                if let Some(y) = intersect(&active[i], &active[k]) {
                    offer(y);
                }
            }
        }
        if let Some((y, _)) = best {
            return Ok(y);
        }
    }
    Err(MarketError::Infeasible("empty polygon".into()))
}

/// Outcome of [`maximize_polygon`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { point: [T; 2], value: T },
    Unbounded,
    Infeasible,
}

/// Maximizes `g . z` over a pointed polygon by vertex enumeration, detecting
/// unbounded improving rays.
pub fn maximize_polygon<T: Scalar>(g: [T; 2], planes: &[HalfPlane<T>]) -> LpOutcome<T> {
    let active: Vec<HalfPlane<T>> = planes.iter().copied().filter(|h| !h.is_trivial()).collect();
    if planes.iter().any(|h| h.is_trivial() && h.c < T::zero()) {
        return LpOutcome::Infeasible;
    }
    let rel = T::lit(1e-12);
    let mut best: Option<([T; 2], T)> = None;
    for i in 0..active.len() {
        for k in i + 1..active.len() {
            if let Some(y) = intersect(&active[i], &active[k]) {
                if feasible(y, &active, rel) {
                    let v = g[0] * y[0] + g[1] * y[1];
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((y, v));
                    }
                }
            }
        }
    }
    let Some((point, value)) = best else {
        return LpOutcome::Infeasible;
    };
    // Extreme rays of the recession cone lie along the boundary lines.
    let gn = g[0].abs() + g[1].abs();
    for h in &active {
        for sign in [T::one(), -T::one()] {
            let d = [-h.a[1] * sign, h.a[0] * sign];
            let dn = d[0].abs() + d[1].abs();
            let in_cone = active.iter().all(|k| k.a[0] * d[0] + k.a[1] * d[1] <= T::lit(1e-14) * dn * (k.a[0].abs() + k.a[1].abs()));
            if in_cone && g[0] * d[0] + g[1] * d[1] > T::lit(1e-14) * gn * dn {
                return LpOutcome::Unbounded;
            }
        }
    }
    LpOutcome::Optimal { point, value }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csp_polygon(alpha: f64, beta: f64, cap: f64) -> Vec<HalfPlane<f64>> {
        let mut v = box_planes([0.0, 0.0], [1.0, f64::INFINITY]);
        v.pop();
        v.push(HalfPlane::new(alpha, beta, cap));
        v
    }

    #[test]
    fn projection_examples() {
        let poly = csp_polygon(10.0, 1.0, 5.0);
        assert_eq!(project_polygon([1.0, 10.0], &poly, [1.0, 1.0]).unwrap(), [0.0, 5.0]);
        assert_eq!(project_polygon([0.2, 1.0], &poly, [1.0, 1.0]).unwrap(), [0.2, 1.0]);
        let free = csp_polygon(0.0, 0.0, 5.0);
        assert_eq!(project_polygon([1.5, -2.0], &free, [1.0, 1.0]).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn lp_examples() {
        let sq = box_planes([0.0, 0.0], [1.0, 2.0]);
        match maximize_polygon([1.0, 1.0], &sq) {
            LpOutcome::Optimal { point, value } => {
                assert_eq!(point, [1.0, 2.0]);
                assert_eq!(value, 3.0);
            }
            other => panic!("{other:?}"),
        }
        let open = csp_polygon(1.0, 0.0, 0.5);
        assert_eq!(maximize_polygon([0.0, 1.0], &open), LpOutcome::Unbounded);
        match maximize_polygon([1.0, -1.0], &open) {
            LpOutcome::Optimal { point, .. } => assert_eq!(point, [0.5, 0.0]),
            other => panic!("{other:?}"),
        }
    }
}
