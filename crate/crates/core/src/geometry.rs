//! Convex domains given by quadric level sets, boundary classification and
//! backward billiard characteristics.
//!
//! All tracing is done backward in time: a phase point `(x, v)` at time `t`
//! is followed along `x - s v` until the accumulated backward time reaches `t`.
//! At each wall hit the velocity recorded in the chain is the pre-collision
//! velocity, which always points out of the domain (`v . n > 0`).

use serde::{Deserialize, Serialize};

use crate::error::{KineticError, Result};
use crate::vec3::Vec3;

pub const DEFAULT_TOL_BOUNDARY: f64 = 1e-10;
pub const DEFAULT_TOL_GRAZE: f64 = 1e-9;
pub const DEFAULT_MAX_REBOUNDS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainKind {
    Ball { center: Vec3, radius: f64 },
    Ellipsoid { center: Vec3, semi_axes: Vec3 },
    /// `0 < x_1 < 1`, periodic with unit period in `x_2` and `x_3`.
    Slab,
}

#[derive(Clone, Debug)]
pub struct Domain {
    kind: DomainKind,
    /// Inverse squared semi-axes for the quadric kinds.
    inv_sq: Vec3,
    center: Vec3,
    pub tol_boundary: f64,
    pub tol_graze: f64,
    pub max_rebounds: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseClass {
    /// Λ⁻: `v . n < 0`.
    Incoming,
    /// Λ⁺: `v . n > 0`.
    Outgoing,
    /// Λ₀: `|v . n|` inside the grazing collar.
    Grazing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPhasePoint {
    pub x: Vec3,
    pub v: Vec3,
    pub dot: f64,
    pub class: PhaseClass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Classification {
    Interior,
    Boundary(BoundaryPhasePoint),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitPoint {
    /// Backward exit time; infinite when the backward ray never meets the wall.
    pub t: f64,
    pub x: Vec3,
    /// Set when the exit is immediate because the phase point sits in the grazing collar.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Specular,
    Diffusive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Terminal {
    /// Phase point `(X, V)` reached on the plane `t = 0`.
    ReachedInitialPlane { x: Vec3, v: Vec3 },
    /// The chain stopped at its rebound budget with time `t_p > 0` left.
    Active(PhasePoint),
}

#[derive(Clone, Debug)]
pub struct ReboundChain {
    pub origin: PhasePoint,
    /// Rebounds `(t_i, x_i, v_i)` with strictly decreasing remaining times.
    pub hits: Vec<PhasePoint>,
    pub terminal: Terminal,
    pub kind: ChainKind,
    /// Number of rebounds whose footprint fell inside the grazing collar.
    pub grazing_hits: usize,
}

impl ReboundChain {
    pub fn rebounds(&self) -> usize {
        self.hits.len()
    }

    pub fn reached_initial_plane(&self) -> Option<(Vec3, Vec3)> {
        match self.terminal {
            Terminal::ReachedInitialPlane { x, v } => Some((x, v)),
            Terminal::Active(_) => None,
        }
    }
}

impl Domain {
    pub fn new(kind: DomainKind) -> Result<Self> {
        let (center, inv_sq) = match &kind {
            DomainKind::Ball { center, radius } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(KineticError::invalid("radius", "must be positive"));
                }
                let r = 1.0 / (radius * radius);
                (*center, Vec3::new(r, r, r))
            }
            DomainKind::Ellipsoid { center, semi_axes } => {
                if semi_axes.0.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return Err(KineticError::invalid("semi_axes", "must be positive"));
                }
                let a = semi_axes.0;
                (
                    *center,
                    Vec3::new(1.0 / (a[0] * a[0]), 1.0 / (a[1] * a[1]), 1.0 / (a[2] * a[2])),
                )
            }
            DomainKind::Slab => (Vec3::ZERO, Vec3::ZERO),
        };
        Ok(Domain {
            kind,
            inv_sq,
            center,
            tol_boundary: DEFAULT_TOL_BOUNDARY,
            tol_graze: DEFAULT_TOL_GRAZE,
            max_rebounds: DEFAULT_MAX_REBOUNDS,
        })
    }

    pub fn unit_ball() -> Self {
        Domain::new(DomainKind::Ball {
            center: Vec3::ZERO,
            radius: 1.0,
        })
        .unwrap()
    }

    pub fn slab() -> Self {
        Domain::new(DomainKind::Slab).unwrap()
    }

    pub fn with_max_rebounds(mut self, n: usize) -> Self {
        self.max_rebounds = n;
        self
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn is_slab(&self) -> bool {
        matches!(self.kind, DomainKind::Slab)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    /// Lower bound `c_xi` for the Hessian quadratic form of `xi`.
    pub fn convexity_constant(&self) -> f64 {
        match self.kind {
            DomainKind::Slab => 0.0,
            _ => 2.0 * self.inv_sq.0.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }

    /// Volume of one periodic cell for the slab, of the body otherwise.
    pub fn volume(&self) -> f64 {
        match self.kind {
            DomainKind::Slab => 1.0,
            _ => {
                4.0 / 3.0
                    * std::f64::consts::PI
                    / (self.inv_sq.0[0] * self.inv_sq.0[1] * self.inv_sq.0[2]).sqrt()
            }
        }
    }

    /// Axis-aligned bounding box `(lo, hi)` of one periodic cell / the body.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match self.kind {
            DomainKind::Slab => (Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)),
            _ => {
                let a = Vec3::new(
                    1.0 / self.inv_sq.0[0].sqrt(),
                    1.0 / self.inv_sq.0[1].sqrt(),
                    1.0 / self.inv_sq.0[2].sqrt(),
                );
                (self.center - a, self.center + a)
            }
        }
    }

    /// Level-set value and gradient `(xi(x), grad xi(x))`.
    pub fn xi(&self, x: Vec3) -> (f64, Vec3) {
        match self.kind {
            DomainKind::Slab => {
                let s = x.x();
                (s * (s - 1.0), Vec3::new(2.0 * s - 1.0, 0.0, 0.0))
            }
            _ => {
                let y = x - self.center;
                let d = self.inv_sq.0;
                let val = d[0] * y.x() * y.x() + d[1] * y.y() * y.y() + d[2] * y.z() * y.z() - 1.0;
                let grad = Vec3::new(2.0 * d[0] * y.x(), 2.0 * d[1] * y.y(), 2.0 * d[2] * y.z());
                (val, grad)
            }
        }
    }

    /// Hessian quadratic form `y^T D^2 xi y`.
    pub fn hessian_form(&self, y: Vec3) -> f64 {
        match self.kind {
            DomainKind::Slab => 2.0 * y.x() * y.x(),
            _ => {
                let d = self.inv_sq.0;
                2.0 * (d[0] * y.x() * y.x() + d[1] * y.y() * y.y() + d[2] * y.z() * y.z())
            }
        }
    }

    pub fn contains(&self, x: Vec3) -> bool {
        self.xi(x).0 < -self.tol_boundary
    }

    pub fn in_closure(&self, x: Vec3) -> bool {
        self.xi(x).0 <= self.tol_boundary
    }

    pub fn outward_normal(&self, x: Vec3) -> Result<Vec3> {
        let (val, grad) = self.xi(x);
        if val.abs() > self.tol_boundary {
            return Err(KineticError::NotOnBoundary(val.abs()));
        }
        grad.normalized()
            .ok_or_else(|| KineticError::Domain("vanishing level-set gradient".into()))
    }

    /// Normal of the level set through `x`, without the on-boundary check.
    pub fn level_set_normal(&self, x: Vec3) -> Vec3 {
        self.xi(x).1.normalized().unwrap_or(Vec3::e(0))
    }

    /// One Newton step on `xi` along its gradient.
    pub fn project_to_boundary(&self, x: Vec3) -> Vec3 {
        let (val, grad) = self.xi(x);
        let g2 = grad.norm_sq();
        if g2 == 0.0 {
            return x;
        }
        let mut y = x - grad * (val / g2);
        if self.is_slab() {
            // the slab faces are planes; snap exactly
            y.0[0] = if y.0[0] < 0.5 { 0.0 } else { 1.0 };
        }
        y
    }

    pub fn wrap_periodic(&self, mut x: Vec3) -> Vec3 {
        if self.is_slab() {
            x.0[1] = x.0[1].rem_euclid(1.0);
            x.0[2] = x.0[2].rem_euclid(1.0);
        }
        x
    }

    pub fn classify_phase_point(&self, x: Vec3, v: Vec3) -> Result<Classification> {
        let (val, grad) = self.xi(x);
        if val < -self.tol_boundary {
            return Ok(Classification::Interior);
        }
        if val > self.tol_boundary {
            return Err(KineticError::OutsideDomain(val));
        }
        let n = grad
            .normalized()
            .ok_or_else(|| KineticError::Domain("vanishing level-set gradient".into()))?;
        let dot = v.dot(&n);
        let class = if dot > self.tol_graze {
            PhaseClass::Outgoing
        } else if dot < -self.tol_graze {
            PhaseClass::Incoming
        } else {
            PhaseClass::Grazing
        };
        Ok(Classification::Boundary(BoundaryPhasePoint { x, v, dot, class }))
    }

    /// `t_b(x, v) = inf { t > 0 : x - t v not in the domain }` and the footprint `x - t_b v`.
    pub fn backward_exit_time(&self, x: Vec3, v: Vec3) -> Result<ExitPoint> {
        if v.norm_sq() == 0.0 {
            return Err(KineticError::StationaryVelocity);
        }
        let (val, grad) = self.xi(x);
        if val > self.tol_boundary {
            return Err(KineticError::OutsideDomain(val));
        }
        let on_boundary = val.abs() <= self.tol_boundary;
        if on_boundary {
            let n = grad.normalized().unwrap_or(Vec3::e(0));
            let dot = v.dot(&n);
            if dot <= self.tol_graze {
                // incoming or grazing: the backward ray leaves at once
                return Ok(ExitPoint {
                    t: 0.0,
                    x,
                    degenerate: dot.abs() <= self.tol_graze,
                });
            }
        }
        let t = match self.kind {
            DomainKind::Slab => {
                let (s, w) = (x.x(), v.x());
                if w > 0.0 {
                    s / w
                } else if w < 0.0 {
                    (1.0 - s) / (-w)
                } else {
                    f64::INFINITY
                }
            }
            _ => {
                let y = x - self.center;
                let d = self.inv_sq.0;
                let a = d[0] * v.x() * v.x() + d[1] * v.y() * v.y() + d[2] * v.z() * v.z();
                let b = d[0] * y.x() * v.x() + d[1] * y.y() * v.y() + d[2] * y.z() * v.z();
                let c = val.min(0.0);
                let disc = (b * b - a * c).max(0.0).sqrt();
                if on_boundary {
                    // chord from a boundary point: the other root of the quadratic
                    2.0 * b / a
                } else if b >= 0.0 {
                    (b + disc) / a
                } else {
                    -c / (disc - b)
                }
            }
        };
        if !t.is_finite() {
            return Ok(ExitPoint {
                t,
                x,
                degenerate: false,
            });
        }
        let xb = self.project_to_boundary(x - v * t);
        Ok(ExitPoint {
            t: t.max(0.0),
            x: xb,
            degenerate: false,
        })
    }

    /// Backward specular characteristic from `(x, v)` over a time `t`.
    pub fn trace_specular(&self, t: f64, x: Vec3, v: Vec3) -> Result<ReboundChain> {
        if t < 0.0 {
            return Err(KineticError::invalid("t", "must be nonnegative"));
        }
        let origin = PhasePoint { t, x, v };
        let mut hits = Vec::new();
        let mut grazing_hits = 0;
        let (mut cx, mut cv, mut remaining) = (x, v, t);
        loop {
            let exit = self.backward_exit_time(cx, cv)?;
            if exit.t >= remaining {
                let terminal = Terminal::ReachedInitialPlane {
                    x: self.wrap_periodic(cx - cv * remaining),
                    v: cv,
                };
                return Ok(ReboundChain {
                    origin,
                    hits,
                    terminal,
                    kind: ChainKind::Specular,
                    grazing_hits,
                });
            }
            if hits.len() >= self.max_rebounds {
                return Err(KineticError::ReboundBudgetExhausted(hits.len()));
            }
            remaining -= exit.t;
            let n = self.level_set_normal(exit.x);
            if cv.dot(&n).abs() <= self.tol_graze {
                grazing_hits += 1;
            }
            cv = specular_reflect(n, cv);
            cx = self.wrap_periodic(exit.x);
            hits.push(PhasePoint {
                t: remaining,
                x: cx,
                v: cv,
            });
        }
    }
}

/// `v - 2 (v . n) n`.
#[inline]
pub fn specular_reflect(n: Vec3, v: Vec3) -> Vec3 {
    v - n * (2.0 * v.dot(&n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ellipsoid_211() -> Domain {
        Domain::new(DomainKind::Ellipsoid {
            center: Vec3::ZERO,
            semi_axes: Vec3::new(2.0, 1.0, 1.0),
        })
        .unwrap()
    }

    /// Bisection on s -> xi(x - s v) for the first sign change.
    fn bisection_exit(d: &Domain, x: Vec3, v: Vec3) -> f64 {
        let mut hi = 1e-3;
        while d.xi(x - v * hi).0 < 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d.xi(x - v * mid).0 < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn normals() {
        let n = Domain::unit_ball().outward_normal(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(n.max_abs_diff(&Vec3::e(0)), 0.0, epsilon = 1e-12);
        let n = Domain::slab().outward_normal(Vec3::new(0.0, 0.3, 0.7)).unwrap();
        assert_abs_diff_eq!(n.max_abs_diff(&Vec3::new(-1.0, 0.0, 0.0)), 0.0, epsilon = 1e-12);
        // xi = x1^2/4 + x2^2 + x3^2 - 1 has gradient (1, 0, 0) at (2, 0, 0)
        let n = ellipsoid_211().outward_normal(Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(n.max_abs_diff(&Vec3::e(0)), 0.0, epsilon = 1e-12);
        assert!(matches!(
            Domain::unit_ball().outward_normal(Vec3::new(0.5, 0.0, 0.0)),
            Err(KineticError::NotOnBoundary(_))
        ));
    }

    #[test]
    fn reflection_examples() {
        let r = specular_reflect(Vec3::e(0), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(r, Vec3::new(-1.0, 2.0, 3.0));
        let r = specular_reflect(Vec3::e(2), Vec3::new(0.0, 0.0, -5.0));
        assert_eq!(r, Vec3::new(0.0, 0.0, 5.0));
        let s = 0.5f64.sqrt();
        let r = specular_reflect(Vec3::new(s, s, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(r.max_abs_diff(&Vec3::new(0.0, -1.0, 0.0)), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exit_time_examples() {
        let ball = Domain::unit_ball();
        let e = ball.backward_exit_time(Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(e.t, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(e.x.max_abs_diff(&Vec3::new(-1.0, 0.0, 0.0)), 0.0, epsilon = 1e-14);

        let slab = Domain::slab();
        let e = slab
            .backward_exit_time(Vec3::new(0.3, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0))
            .unwrap();
        assert_abs_diff_eq!(e.t, 0.7, epsilon = 1e-14);
        assert_eq!(e.x, Vec3::new(1.0, 0.0, 0.0));

        // |x - t v|^2 = 1 with x = (0.5,0,0), v = (1,1,0): 2t^2 - t - 0.75 = 0
        let x = Vec3::new(0.5, 0.0, 0.0);
        let v = Vec3::new(1.0, 1.0, 0.0);
        let e = ball.backward_exit_time(x, v).unwrap();
        let quadratic_root = (1.0 + (1.0f64 + 6.0).sqrt()) / 4.0;
        assert_abs_diff_eq!(e.t, quadratic_root, epsilon = 1e-12);
        assert_abs_diff_eq!(e.t, bisection_exit(&ball, x, v), epsilon = 1e-10);

        assert_eq!(
            ball.backward_exit_time(Vec3::ZERO, Vec3::ZERO),
            Err(KineticError::StationaryVelocity)
        );
        let g = ball
            .backward_exit_time(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0))
            .unwrap();
        assert!(g.degenerate && g.t == 0.0);
    }

    #[test]
    fn classification() {
        let ball = Domain::unit_ball();
        let c = |x: Vec3, v: Vec3| ball.classify_phase_point(x, v).unwrap();
        match c(Vec3::e(0), Vec3::e(0)) {
            Classification::Boundary(b) => assert_eq!(b.class, PhaseClass::Outgoing),
            _ => panic!(),
        }
        match c(Vec3::e(0), Vec3::e(1)) {
            Classification::Boundary(b) => assert_eq!(b.class, PhaseClass::Grazing),
            _ => panic!(),
        }
        match c(Vec3::e(0), -Vec3::e(0)) {
            Classification::Boundary(b) => assert_eq!(b.class, PhaseClass::Incoming),
            _ => panic!(),
        }
        assert_eq!(c(Vec3::ZERO, Vec3::e(2)), Classification::Interior);
        assert!(matches!(
            ball.classify_phase_point(Vec3::new(2.0, 0.0, 0.0), Vec3::e(0)),
            Err(KineticError::OutsideDomain(_))
        ));
    }

    #[test]
    fn no_rebound_trace() {
        let ball = Domain::unit_ball();
        let (x, v) = (Vec3::new(0.1, 0.2, 0.0), Vec3::new(0.3, -0.1, 0.2));
        let chain = ball.trace_specular(0.5, x, v).unwrap();
        assert_eq!(chain.rebounds(), 0);
        let (xx, vv) = chain.reached_initial_plane().unwrap();
        assert_abs_diff_eq!(xx.max_abs_diff(&(x - v * 0.5)), 0.0, epsilon = 1e-15);
        assert_eq!(vv, v);
    }

    /// 1D unfolding: the normal coordinate follows a triangle wave of period 2.
    fn fold(y: f64) -> (f64, bool) {
        let r = y.rem_euclid(2.0);
        if r <= 1.0 {
            (r, false)
        } else {
            (2.0 - r, true)
        }
    }

    #[test]
    fn slab_unfolding() {
        let slab = Domain::slab();
        let chain = slab
            .trace_specular(2.0, Vec3::new(0.5, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert_eq!(chain.rebounds(), 2);
        assert_abs_diff_eq!(chain.hits[0].x.x(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(chain.hits[1].x.x(), 1.0, epsilon = 1e-15);
        let (xx, vv) = chain.reached_initial_plane().unwrap();
        let (y, flipped) = fold(0.5 - 2.0);
        assert_abs_diff_eq!(xx.x(), y, epsilon = 1e-14);
        assert_eq!(vv.x(), if flipped { -1.0 } else { 1.0 });
    }

    #[test]
    fn diameter_bounce() {
        let ball = Domain::unit_ball();
        let v = Vec3::new(1.0, 0.0, 0.0);
        let chain = ball.trace_specular(5.5, Vec3::ZERO, v).unwrap();
        // exits at t = 1, then every 2
        assert_eq!(chain.rebounds(), 3);
        for h in &chain.hits {
            assert_abs_diff_eq!(h.x.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(h.v.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(h.v.y(), 0.0, epsilon = 1e-12);
        }
        let (_, vv) = chain.reached_initial_plane().unwrap();
        assert_abs_diff_eq!(vv.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rebound_budget() {
        let ball = Domain::unit_ball().with_max_rebounds(3);
        let r = ball.trace_specular(100.0, Vec3::ZERO, Vec3::e(0));
        assert_eq!(r.unwrap_err(), KineticError::ReboundBudgetExhausted(3));
    }

    #[test]
    fn convexity_constant_dominated_by_hessian() {
        for d in [Domain::unit_ball(), ellipsoid_211()] {
            let c = d.convexity_constant();
            assert!(c > 0.0);
            for k in 0..200 {
                let a = k as f64 * 0.37;
                let y = Vec3::new(a.cos() * (2.0 * a).sin(), a.sin(), (3.0 * a).cos());
                assert!(d.hessian_form(y) >= c * y.norm_sq() - 1e-14);
            }
        }
        assert_eq!(Domain::slab().convexity_constant(), 0.0);
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vec3> {
        (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn reflection_is_an_isometric_involution(n in arb_vec(1.0), v in arb_vec(10.0)) {
            prop_assume!(n.norm() > 1e-3);
            let n = n.normalized().unwrap();
            let r = specular_reflect(n, v);
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-12 * (1.0 + v.norm()));
            prop_assert!(specular_reflect(n, r).max_abs_diff(&v) <= 1e-12 * (1.0 + v.norm()));
        }

        #[test]
        fn specular_chains_keep_speed_and_footprints(x in arb_vec(0.5), v in arb_vec(3.0), t in 0.0f64..10.0) {
            prop_assume!(v.norm() > 0.1);
            for d in [Domain::unit_ball(), ellipsoid_211()] {
                let chain = d.trace_specular(t, x, v).unwrap();
                let mut prev = t;
                for h in &chain.hits {
                    prop_assert!((h.v.norm() - v.norm()).abs() <= 1e-10);
                    prop_assert!(d.xi(h.x).0.abs() <= d.tol_boundary);
                    prop_assert!(h.t < prev);
                    prev = h.t;
                }
            }
        }

        #[test]
        fn time_additivity(x in arb_vec(0.5), v in arb_vec(2.0), t in 0.0f64..3.0, s in 0.0f64..3.0) {
            prop_assume!(v.norm() > 0.1);
            let d = ellipsoid_211();
            let c1 = d.trace_specular(t, x, v).unwrap();
            let (x1, v1) = c1.reached_initial_plane().unwrap();
            let c2 = d.trace_specular(s, x1, v1).unwrap();
            let (x2, v2) = c2.reached_initial_plane().unwrap();
            let (x3, v3) = d.trace_specular(t + s, x, v).unwrap().reached_initial_plane().unwrap();
            prop_assert!(x2.max_abs_diff(&x3) <= 1e-8);
            prop_assert!(v2.max_abs_diff(&v3) <= 1e-8);
        }
    }
}
