//! Conserved functionals of the kinetic flow under each wall condition and the
//! projection `Pi_G` onto their span.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::field::{Field, PhaseGrid};
use crate::geometry::DomainKind;
use crate::transport::BoundaryCondition;
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Invariant {
    Mass,
    Energy,
    /// Linear momentum along a periodic direction of the slab.
    Momentum(usize),
    /// Angular momentum `((x - c) x v) . e_axis` about an axis of rotational symmetry.
    AngularMomentum(usize),
}

impl Invariant {
    pub fn name(&self) -> String {
        match self {
            Invariant::Mass => "mass".into(),
            Invariant::Energy => "energy".into(),
            Invariant::Momentum(k) => format!("momentum_{}", k + 1),
            Invariant::AngularMomentum(k) => format!("angular_momentum_{}", k + 1),
        }
    }

    pub fn eval(&self, center: Vec3, x: Vec3, v: Vec3) -> f64 {
        match *self {
            Invariant::Mass => 1.0,
            Invariant::Energy => v.norm_sq(),
            Invariant::Momentum(k) => v[k],
            Invariant::AngularMomentum(k) => (x - center).cross(&v)[k],
        }
    }
}

/// Invariants of free transport with the given wall condition, all of which the
/// collision operator also preserves.
pub fn invariants(kind: &DomainKind, bc: BoundaryCondition) -> Vec<Invariant> {
    let mut out = vec![Invariant::Mass];
    if bc == BoundaryCondition::Diffusive {
        return out;
    }
    out.push(Invariant::Energy);
    match kind {
        DomainKind::Slab => {
            out.push(Invariant::Momentum(1));
            out.push(Invariant::Momentum(2));
        }
        DomainKind::Ball { .. } => {
            out.extend((0..3).map(Invariant::AngularMomentum));
        }
        DomainKind::Ellipsoid { semi_axes, .. } => {
            // rotation about axis k is a symmetry when the other two semi-axes agree
            for k in 0..3 {
                let (a, b) = (semi_axes[(k + 1) % 3], semi_axes[(k + 2) % 3]);
                if (a - b).abs() <= 1e-12 * a.max(b) {
                    out.push(Invariant::AngularMomentum(k));
                }
            }
        }
    }
    out
}

/// The fields `psi_k mu` for the conserved `psi_k`, with their Gram matrix in `L^2(mu^{-1})`.
#[derive(Clone, Debug)]
pub struct ConservedBasis {
    pub invariants: Vec<Invariant>,
    shapes: Vec<Field>,
    gram: DMatrix<f64>,
}

impl ConservedBasis {
    pub fn new(grid: Arc<PhaseGrid>, bc: BoundaryCondition) -> Self {
        let kind = grid.space.domain.kind().clone();
        let center = grid.space.domain.center();
        let invariants = invariants(&kind, bc);
        let vg = grid.velocity.clone();
        let shapes: Vec<Field> = invariants
            .iter()
            .map(|inv| {
                let mut f = Field::zeros(grid.clone());
                for c in 0..grid.ncell() {
                    let x = grid.space.centers[c];
                    for (j, o) in f.cell_mut(c).iter_mut().enumerate() {
                        *o = inv.eval(center, x, vg.nodes[j]) * vg.mu[j];
                    }
                }
                f
            })
            .collect();
        let n = invariants.len();
        let mut gram = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..=a {
                let g = inner_mu(&shapes[a], &shapes[b]);
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
        }
        ConservedBasis {
            invariants,
            shapes,
            gram,
        }
    }

    /// `int int f psi_k dx dv` for every conserved `psi_k`.
    pub fn moments(&self, f: &Field) -> Vec<f64> {
        let center = f.grid.space.domain.center();
        self.invariants
            .iter()
            .map(|inv| f.global_moment_at(|x, v| inv.eval(center, x, v)))
            .collect()
    }

    fn combination(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        let sol = self
            .gram
            .clone()
            .lu()
            .solve(&b)
            .expect("conserved shapes are linearly independent");
        sol.iter().cloned().collect()
    }

    /// `Pi_G f`: the element of `span{psi_k mu}` with the same conserved moments as `f`.
    pub fn project(&self, f: &Field) -> Field {
        let beta = self.combination(&self.moments(f));
        let mut out = Field::zeros(f.grid.clone());
        for (b, s) in beta.iter().zip(&self.shapes) {
            out.axpy(*b, s);
        }
        out
    }

    /// Adds the element of `span{psi_k mu}` that moves the conserved moments of `f` to `target`.
    /// Returns the largest moment defect that was removed.
    pub fn restore(&self, f: &mut Field, target: &[f64]) -> f64 {
        let current = self.moments(f);
        let defect: Vec<f64> = target.iter().zip(&current).map(|(t, c)| t - c).collect();
        let beta = self.combination(&defect);
        for (b, s) in beta.iter().zip(&self.shapes) {
            f.axpy(*b, s);
        }
        defect.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

fn inner_mu(f: &Field, g: &Field) -> f64 {
    let vg = &f.grid.velocity;
    let nv = f.nv();
    let mut total = 0.0;
    for c in 0..f.ncell() {
        let t: Vec<f64> = (0..nv).map(|j| f.get(c, j) * g.get(c, j) / vg.mu[j]).collect();
        total += f.grid.space.volumes[c] * vg.integrate(&t);
    }
    total
}

/// `Pi_G f` for the invariants of the given wall condition.
pub fn project_pi_g(f: &Field, bc: BoundaryCondition) -> Field {
    ConservedBasis::new(f.grid.clone(), bc).project(f)
}
