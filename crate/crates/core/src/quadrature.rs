//! Quadrature rules: Gauss–Legendre on intervals and a product rule on the unit sphere.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::vec3::Vec3;

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
#[derive(Clone, Debug)]
pub struct IntervalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl IntervalRule {
    pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Self {
        let n = NonZeroUsize::new(n.max(1)).unwrap();
        let rule = GaussLegendre::new(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        let (nodes, weights) = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (mid + half * x, half * w))
            .unzip();
        IntervalRule { nodes, weights }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Composite rule: `panels` copies of an `n`-point rule on equal subintervals.
    pub fn composite(n: usize, panels: usize, a: f64, b: f64) -> Self {
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(n * panels);
        let mut weights = Vec::with_capacity(n * panels);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            let r = IntervalRule::gauss_legendre(n, lo, lo + h);
            nodes.extend(r.nodes);
            weights.extend(r.weights);
        }
        IntervalRule { nodes, weights }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereRuleSpec {
    /// Gauss–Legendre points in the polar cosine.
    pub n_polar: usize,
    /// Uniform trapezoid points in the azimuth.
    pub n_azimuth: usize,
}

impl Default for SphereRuleSpec {
    fn default() -> Self {
        SphereRuleSpec {
            n_polar: 16,
            n_azimuth: 16,
        }
    }
}

/// Product rule on S²: Gauss–Legendre in cos θ times the periodic trapezoid in φ.
///
/// The polar cosines are stored separately so that integrands depending only on
/// the angle to the polar axis can be evaluated once per polar node.
#[derive(Clone, Debug)]
pub struct SphereQuadrature {
    pub spec: SphereRuleSpec,
    pub cosines: Vec<f64>,
    pub cosine_weights: Vec<f64>,
    pub directions: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn new(spec: SphereRuleSpec) -> Self {
        let polar = IntervalRule::gauss_legendre(spec.n_polar, -1.0, 1.0);
        let dphi = 2.0 * PI / spec.n_azimuth as f64;
        let mut directions = Vec::with_capacity(spec.n_polar * spec.n_azimuth);
        let mut weights = Vec::with_capacity(spec.n_polar * spec.n_azimuth);
        for (&c, &wc) in polar.nodes.iter().zip(&polar.weights) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for k in 0..spec.n_azimuth {
                let phi = (k as f64 + 0.5) * dphi;
                directions.push(Vec3::new(s * phi.cos(), s * phi.sin(), c));
                weights.push(wc * dphi);
            }
        }
        SphereQuadrature {
            spec,
            cosines: polar.nodes,
            cosine_weights: polar.weights,
            directions,
            weights,
        }
    }

    pub fn integrate(&self, mut f: impl FnMut(Vec3) -> f64) -> f64 {
        self.directions
            .iter()
            .zip(&self.weights)
            .map(|(&d, &w)| w * f(d))
            .sum()
    }

    /// Integral of a zonal function g(cos θ) against the full sphere measure.
    pub fn integrate_zonal(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        2.0 * PI
            * self
                .cosines
                .iter()
                .zip(&self.cosine_weights)
                .map(|(&c, &w)| w * g(c))
                .sum::<f64>()
    }
}

/// Pairwise summation, used wherever reductions must be reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let r = IntervalRule::gauss_legendre(5, 0.0, 2.0);
        assert_relative_eq!(r.integrate(|x| x.powi(9)), 2f64.powi(10) / 10.0, epsilon = 1e-10);
    }

    #[test]
    fn sphere_area_and_moments() {
        let q = SphereQuadrature::new(SphereRuleSpec::default());
        assert_relative_eq!(q.integrate(|_| 1.0), 4.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(q.integrate(|d| d.x() * d.x()), 4.0 * PI / 3.0, epsilon = 1e-12);
        assert!(q.integrate(|d| d.y() * d.z()).abs() < 1e-12);
        assert_relative_eq!(q.integrate_zonal(|c| c * c), 4.0 * PI / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert_relative_eq!(pairwise_sum(&v), v.iter().sum::<f64>(), epsilon = 1e-12);
    }
}
