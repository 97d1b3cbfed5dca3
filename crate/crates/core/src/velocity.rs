//! Cell-centred velocity lattice truncated to a ball, and the discrete Maxwellian on it.

use serde::{Deserialize, Serialize};

use crate::error::{KineticError, Result};
use crate::quadrature::pairwise_sum;
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityGridSpec {
    /// Cells per dimension of the bounding cube; must be even.
    pub n_per_dim: usize,
    pub v_max: f64,
}

impl Default for VelocityGridSpec {
    fn default() -> Self {
        VelocityGridSpec {
            n_per_dim: 12,
            v_max: 6.0,
        }
    }
}

/// Continuous global Maxwellian `(2 pi)^{-3/2} exp(-|v|^2 / 2)`.
pub fn maxwellian(v: Vec3) -> f64 {
    (2.0 * std::f64::consts::PI).powf(-1.5) * (-0.5 * v.norm_sq()).exp()
}

/// Velocity nodes `v = h a / 2` with odd integer coordinates `a`, kept when `|v| <= v_max`.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub spec: VelocityGridSpec,
    pub h: f64,
    pub nodes: Vec<Vec3>,
    /// Odd half-integer lattice coordinates of each node.
    pub coords: Vec<[i32; 3]>,
    /// Cell volume `h^3`, identical for every node.
    pub weight: f64,
    /// Moment-matched Maxwellian: unit mass, zero momentum, energy 3.
    pub mu: Vec<f64>,
    /// Exponent of the moment-matched Maxwellian `c exp(-beta |v|^2 / 2)`.
    pub mu_beta: f64,
    /// Continuous Maxwellian mass lost outside the truncation ball.
    pub truncation_mass: f64,
    lookup: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl VelocityGrid {
    pub fn new(spec: VelocityGridSpec) -> Result<Self> {
        if spec.n_per_dim < 2 || spec.n_per_dim % 2 != 0 {
            return Err(KineticError::invalid("n_per_dim", "must be even and at least 2"));
        }
        if !(spec.v_max > 0.0) {
            return Err(KineticError::invalid("v_max", "must be positive"));
        }
        let n = spec.n_per_dim as i32;
        let h = 2.0 * spec.v_max / n as f64;
        let side = n as usize;
        let mut lookup = vec![NONE; side * side * side];
        let mut nodes = Vec::new();
        let mut coords = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let a = [2 * i - n + 1, 2 * j - n + 1, 2 * k - n + 1];
                    let v = Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64) * (0.5 * h);
                    if v.norm() <= spec.v_max + 1e-12 {
                        lookup[(i as usize * side + j as usize) * side + k as usize] =
                            nodes.len() as u32;
                        nodes.push(v);
                        coords.push(a);
                    }
                }
            }
        }
        let weight = h * h * h;
        let (mu, mu_beta) = moment_matched_maxwellian(&nodes, weight)?;
        let r = spec.v_max;
        let truncation_mass = erfc_approx(r / 2f64.sqrt())
            + (2.0 / std::f64::consts::PI).sqrt() * r * (-0.5 * r * r).exp();
        Ok(VelocityGrid {
            spec,
            h,
            nodes,
            coords,
            weight,
            mu,
            mu_beta,
            truncation_mass,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node index for odd lattice coordinates, if the node exists.
    #[inline]
    pub fn index_of(&self, a: [i32; 3]) -> Option<usize> {
        let n = self.spec.n_per_dim as i32;
        let mut flat = 0usize;
        for &c in &a {
            let i = (c + n - 1) / 2;
            if c.rem_euclid(2) != 1 || i < 0 || i >= n {
                return None;
            }
            flat = flat * n as usize + i as usize;
        }
        match self.lookup[flat] {
            NONE => None,
            idx => Some(idx as usize),
        }
    }

    /// Index of `-v`; the node set is closed under negation.
    pub fn negated(&self, i: usize) -> usize {
        let a = self.coords[i];
        self.index_of([-a[0], -a[1], -a[2]]).unwrap()
    }

    /// Index of the node with one velocity component sign-flipped.
    pub fn reflected_axis(&self, i: usize, axis: usize) -> usize {
        let mut a = self.coords[i];
        a[axis] = -a[axis];
        self.index_of(a).unwrap()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weight * pairwise_sum(values)
    }

    /// `(mass, momentum, energy)` of a velocity function, energy being `int |v|^2 f`.
    pub fn moments(&self, f: &[f64]) -> (f64, Vec3, f64) {
        let mass = self.integrate(f);
        let p = |k: usize| {
            let t: Vec<f64> = f.iter().zip(&self.nodes).map(|(a, v)| a * v[k]).collect();
            self.integrate(&t)
        };
        let e: Vec<f64> = f.iter().zip(&self.nodes).map(|(a, v)| a * v.norm_sq()).collect();
        (mass, Vec3::new(p(0), p(1), p(2)), self.integrate(&e))
    }

    /// Trilinear interpolation of nodal values at an arbitrary velocity.
    ///
    /// Corners missing from the truncated lattice are dropped and the remaining
    /// weights renormalized; `None` outside the lattice hull.
    pub fn interpolate(&self, values: &[f64], v: Vec3) -> Option<f64> {
        let n = self.spec.n_per_dim as i32;
        let mut base = [0i32; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            // node index i sits at v = h (i + 1/2) - v_max
            let s = (v[k] + self.spec.v_max) / self.h - 0.5;
            if s < -1e-12 || s > (n - 1) as f64 + 1e-12 {
                return None;
            }
            let i0 = (s.floor() as i32).clamp(0, n - 2);
            base[k] = i0;
            frac[k] = (s - i0 as f64).clamp(0.0, 1.0);
        }
        let (mut acc, mut wsum) = (0.0, 0.0);
        for corner in 0..8 {
            let mut a = [0i32; 3];
            let mut w = 1.0;
            for k in 0..3 {
                let bit = (corner >> k) & 1;
                a[k] = 2 * (base[k] + bit) - n + 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(idx) = self.index_of(a) {
                acc += w * values[idx];
                wsum += w;
            }
        }
        if wsum > 1e-12 {
            Some(acc / wsum)
        } else {
            None
        }
    }

    /// Discrete Maxwellian evaluated at an arbitrary velocity.
    pub fn mu_at(&self, v: Vec3) -> f64 {
        let c = self.mu[0] * (0.5 * self.mu_beta * self.nodes[0].norm_sq()).exp();
        c * (-0.5 * self.mu_beta * v.norm_sq()).exp()
    }
}

/// `c exp(-beta |v|^2/2)` with `c`, `beta` fixed by unit mass and energy 3.
fn moment_matched_maxwellian(nodes: &[Vec3], w: f64) -> Result<(Vec<f64>, f64)> {
    let r2: Vec<f64> = nodes.iter().map(|v| v.norm_sq()).collect();
    let energy_ratio = |beta: f64| {
        let e: Vec<f64> = r2.iter().map(|&s| (-0.5 * beta * s).exp()).collect();
        let m = pairwise_sum(&e);
        let t: Vec<f64> = e.iter().zip(&r2).map(|(a, s)| a * s).collect();
        pairwise_sum(&t) / m
    };
    // energy_ratio is decreasing in beta
    let (mut lo, mut hi) = (0.2, 5.0);
    if !(energy_ratio(lo) > 3.0 && energy_ratio(hi) < 3.0) {
        return Err(KineticError::invalid(
            "velocity grid",
            "too coarse to carry a Maxwellian with unit temperature",
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if energy_ratio(mid) > 3.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let beta = 0.5 * (lo + hi);
    let e: Vec<f64> = r2.iter().map(|&s| (-0.5 * beta * s).exp()).collect();
    let c = 1.0 / (w * pairwise_sum(&e));
    Ok((e.into_iter().map(|a| c * a).collect(), beta))
}

/// Complementary error function, Numerical Recipes `erfcc` (relative error below 1.2e-7).
fn erfc_approx(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_grid_shape() {
        let g = VelocityGrid::new(VelocityGridSpec::default()).unwrap();
        assert_eq!(g.h, 1.0);
        // every node has its negation
        for i in 0..g.len() {
            let j = g.negated(i);
            assert_eq!(g.nodes[j], -g.nodes[i]);
        }
        assert!(g.len() > 800 && g.len() < 1000);
    }

    #[test]
    fn maxwellian_moments() {
        for n in [8, 12, 16] {
            let g = VelocityGrid::new(VelocityGridSpec { n_per_dim: n, v_max: 6.0 }).unwrap();
            let (m, p, e) = g.moments(&g.mu);
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
            assert!(p.norm() < 1e-14);
            assert_abs_diff_eq!(e, 3.0, epsilon = 1e-11);
        }
        let g = VelocityGrid::new(VelocityGridSpec::default()).unwrap();
        assert_abs_diff_eq!(g.mu_beta, 1.0, epsilon = 1e-6);
        assert!(g.truncation_mass < 1e-6);
    }

    #[test]
    fn interpolation_reproduces_linear_functions() {
        let g = VelocityGrid::new(VelocityGridSpec::default()).unwrap();
        let vals: Vec<f64> = g.nodes.iter().map(|v| 1.0 + 2.0 * v.x() - v.z()).collect();
        let v = Vec3::new(0.3, -1.2, 2.1);
        assert_abs_diff_eq!(g.interpolate(&vals, v).unwrap(), 1.0 + 0.6 - 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(g.interpolate(&vals, g.nodes[17]).unwrap(), vals[17], epsilon = 1e-12);
        assert!(g.interpolate(&vals, Vec3::new(9.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn tail_mass_matches_chi_distribution() {
        // P(|Z| > 6) for a 3D standard Gaussian
        let g = VelocityGrid::new(VelocityGridSpec::default()).unwrap();
        assert!((g.truncation_mass - 7.488_376_948_795_475e-8).abs() < 1e-13);
    }
}
