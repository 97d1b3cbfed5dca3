//! Velocity weights and the weighted norms used by the solvers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{KineticError, Result};
use crate::field::Field;
use crate::kernels::{kq_star, Exponent};
use crate::quadrature::pairwise_sum;
use crate::vec3::Vec3;
use crate::velocity::VelocityGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Weight {
    /// `exp(kappa |v|^alpha)`, `kappa > 0`, `0 < alpha < 2`.
    StretchExp { kappa: f64, alpha: f64 },
    /// `<v>^k = (1 + |v|^2)^{k/2}`.
    Polynomial { k: f64 },
    /// `<v>^beta mu^{-1/2}`.
    Guo { beta: f64 },
    /// `exp(kappa |v|^2)`; only used to probe the Gaussian embedding threshold.
    Gaussian { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admissibility {
    pub above_k_star_one: bool,
    pub above_k_star_infinity: bool,
    /// `k > 5 + gamma`, needed by the mixed `L^1_v L^infinity_x` estimate.
    pub above_mixed_threshold: bool,
}

impl Weight {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Weight::StretchExp { kappa, alpha } => {
                if !(kappa > 0.0) {
                    return Err(KineticError::invalid("kappa", "must be positive"));
                }
                if !(alpha > 0.0 && alpha < 2.0) {
                    return Err(KineticError::invalid("alpha", "must lie in (0, 2)"));
                }
            }
            Weight::Polynomial { k } => {
                if !(k >= 0.0) {
                    return Err(KineticError::invalid("k", "must be nonnegative"));
                }
            }
            Weight::Guo { beta } => {
                if !(beta >= 0.0) {
                    return Err(KineticError::invalid("beta", "must be nonnegative"));
                }
            }
            Weight::Gaussian { kappa } => {
                if !(kappa > 0.0) {
                    return Err(KineticError::invalid("kappa", "must be positive"));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, v: Vec3) -> f64 {
        let r2 = v.norm_sq();
        match *self {
            Weight::StretchExp { kappa, alpha } => (kappa * r2.sqrt().powf(alpha)).exp(),
            Weight::Polynomial { k } => (1.0 + r2).powf(0.5 * k),
            Weight::Guo { beta } => (1.0 + r2).powf(0.5 * beta) * (2.0 * PI).powf(0.75) * (0.25 * r2).exp(),
            Weight::Gaussian { kappa } => (kappa * r2).exp(),
        }
    }

    pub fn on_grid(&self, grid: &VelocityGrid) -> Vec<f64> {
        grid.nodes.iter().map(|v| self.eval(*v)).collect()
    }

    /// Threshold flags for polynomial weights; `None` for the other kinds.
    pub fn admissibility(&self, gamma: f64, b_inf: f64, l_b: f64) -> Option<Admissibility> {
        match *self {
            Weight::Polynomial { k } => Some(Admissibility {
                above_k_star_one: kq_star(Exponent::One, gamma, b_inf, l_b).map_or(false, |s| k > s),
                above_k_star_infinity: kq_star(Exponent::Infinity, gamma, b_inf, l_b)
                    .map_or(false, |s| k > s),
                above_mixed_threshold: k > 5.0 + gamma,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    LinfXvM,
    L1vLinfxM,
    L2Mu,
    LinfBoundaryM,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub value: f64,
    pub norm_tag: NormTag,
    /// Maxwellian mass outside the velocity truncation ball.
    pub truncation_mass: f64,
    /// The weighted supremum sits on the outermost velocity shell.
    pub overflow: bool,
}

/// Weighted norm of a phase-space field. `L2Mu` ignores `m`.
pub fn norm(f: &Field, m: &Weight, tag: NormTag) -> NormReport {
    let vg = &f.grid.velocity;
    let space = &f.grid.space;
    let mw = m.on_grid(vg);
    let nv = f.nv();
    let sup_over = |cells: &mut dyn Iterator<Item = usize>| {
        let mut best = (0.0f64, 0usize);
        for c in cells {
            for j in 0..nv {
                let x = f.get(c, j).abs() * mw[j];
                if x > best.0 || x.is_nan() {
                    best = (x, j);
                }
            }
        }
        best
    };
    let edge = vg.spec.v_max - vg.h;
    let (value, argmax) = match tag {
        NormTag::LinfXvM => sup_over(&mut (0..f.ncell())),
        NormTag::LinfBoundaryM => sup_over(&mut space.boundary_cells.iter().cloned()),
        NormTag::L1vLinfxM => {
            let t: Vec<f64> = (0..nv)
                .map(|j| (0..f.ncell()).map(|c| f.get(c, j).abs()).fold(0.0, f64::max) * mw[j])
                .collect();
            (vg.integrate(&t), 0)
        }
        NormTag::L2Mu => {
            let per_cell: Vec<f64> = (0..f.ncell())
                .map(|c| {
                    let t: Vec<f64> = f.cell(c).iter().zip(&vg.mu).map(|(a, m)| a * a / m).collect();
                    space.volumes[c] * vg.integrate(&t)
                })
                .collect();
            (pairwise_sum(&per_cell).sqrt(), 0)
        }
    };
    let overflow = !value.is_finite()
        || (matches!(m, Weight::Guo { .. })
            && matches!(tag, NormTag::LinfXvM | NormTag::LinfBoundaryM)
            && value > 0.0
            && vg.nodes[argmax].norm() > edge);
    NormReport {
        value,
        norm_tag: tag,
        truncation_mass: vg.truncation_mass,
        overflow,
    }
}

/// `sup_v m(v) / (<v>^beta mu^{-1/2}) < infinity`, decided from the tail exponents and
/// confirmed finite on the grid.
pub fn embed_check(grid: &VelocityGrid, m: &Weight, guo: &Weight) -> bool {
    let Weight::Guo { beta } = *guo else {
        return false;
    };
    let tail_ok = match *m {
        Weight::StretchExp { alpha, .. } => alpha < 2.0,
        Weight::Polynomial { .. } => true,
        Weight::Guo { beta: b2 } => b2 <= beta,
        // mu^{-1/2} grows like exp(|v|^2 / 4)
        Weight::Gaussian { kappa } => kappa <= 0.25,
    };
    tail_ok && grid.nodes.iter().all(|v| (m.eval(*v) / guo.eval(*v)).is_finite())
}

/// `C = sum_v w_v <v>^{2-k}`, so that `||f||_{L^1_v L^inf_x(<v>^2)} <= C ||f||_{L^inf(<v>^k)}`.
pub fn mixing_constant(grid: &VelocityGrid, k: f64) -> f64 {
    let t: Vec<f64> = grid.nodes.iter().map(|v| (1.0 + v.norm_sq()).powf(0.5 * (2.0 - k))).collect();
    grid.integrate(&t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::PhaseGrid;
    use crate::geometry::DomainKind;
    use crate::velocity::VelocityGridSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid() -> Arc<PhaseGrid> {
        let vg = Arc::new(VelocityGrid::new(VelocityGridSpec { n_per_dim: 8, v_max: 6.0 }).unwrap());
        PhaseGrid::from_kind(DomainKind::Slab, 6, vg).unwrap()
    }

    #[test]
    fn inverse_weight_has_unit_norm() {
        let g = grid();
        for m in [Weight::Polynomial { k: 10.0 }, Weight::StretchExp { kappa: 0.5, alpha: 1.0 }] {
            let f = Field::from_fn(g.clone(), |_, v| 1.0 / m.eval(v));
            assert_abs_diff_eq!(norm(&f, &m, NormTag::LinfXvM).value, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn l2_norm_of_maxwellian() {
        let g = grid();
        let f = Field::maxwellian(g.clone());
        let r = norm(&f, &Weight::Polynomial { k: 0.0 }, NormTag::L2Mu);
        assert_abs_diff_eq!(r.value, g.space.total_volume().sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn embedding_examples() {
        let g = grid();
        let vg = &g.velocity;
        let guo = Weight::Guo { beta: 5.0 };
        assert!(embed_check(vg, &Weight::Polynomial { k: 10.0 }, &guo));
        assert!(embed_check(vg, &Weight::StretchExp { kappa: 0.1, alpha: 1.0 }, &guo));
        assert!(!embed_check(vg, &Weight::Gaussian { kappa: 0.6 }, &guo));
        assert!(!embed_check(vg, &Weight::Gaussian { kappa: 0.3 }, &guo));
        assert!(embed_check(vg, &Weight::Gaussian { kappa: 0.2 }, &guo));
    }

    #[test]
    fn guo_overflow_flag() {
        let g = grid();
        let f = Field::from_fn(g.clone(), |_, v| (-0.1 * v.norm_sq()).exp());
        assert!(norm(&f, &Weight::Guo { beta: 5.0 }, NormTag::LinfXvM).overflow);
        let f = Field::maxwellian(g);
        assert!(!norm(&f, &Weight::Guo { beta: 0.0 }, NormTag::LinfXvM).overflow);
    }

    #[test]
    fn admissibility_flags() {
        let a = Weight::Polynomial { k: 5.5 }.admissibility(1.0, 1.0, 4.0 * PI).unwrap();
        assert!(a.above_k_star_one && !a.above_k_star_infinity && !a.above_mixed_threshold);
        let a = Weight::Polynomial { k: 10.0 }.admissibility(1.0, 1.0, 4.0 * PI).unwrap();
        assert!(a.above_k_star_one && a.above_k_star_infinity && a.above_mixed_threshold);
    }

    #[test]
    fn mixed_norm_ordering() {
        let g = grid();
        let k = 8.0;
        let c = mixing_constant(&g.velocity, k);
        let f = Field::from_fn(g.clone(), |x, v| (x.x() * 7.0 + v.y()).sin() / (1.0 + v.norm_sq()).powf(0.5 * k));
        let lhs = norm(&f, &Weight::Polynomial { k: 2.0 }, NormTag::L1vLinfxM).value;
        let rhs = norm(&f, &Weight::Polynomial { k }, NormTag::LinfXvM).value;
        assert!(lhs <= c * rhs * (1.0 + 1e-12));
    }

    fn tags() -> impl Strategy<Value = NormTag> {
        prop_oneof![
            Just(NormTag::LinfXvM),
            Just(NormTag::L1vLinfxM),
            Just(NormTag::L2Mu),
            Just(NormTag::LinfBoundaryM)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn norms_are_homogeneous_monotone_and_subadditive(a in -3.0f64..3.0, s1 in 0.0f64..10.0, s2 in 0.0f64..10.0, tag in tags()) {
            let g = grid();
            let m = Weight::Polynomial { k: 4.0 };
            let f = Field::from_fn(g.clone(), |x, v| ((s1 * x.x() + v.x()).sin()) * (-0.5 * v.norm_sq()).exp());
            let h = Field::from_fn(g.clone(), |x, v| ((s2 * x.x() - v.z()).cos()) * (-0.4 * v.norm_sq()).exp());
            let nf = norm(&f, &m, tag).value;
            let nh = norm(&h, &m, tag).value;
            prop_assert!((norm(&f.scaled(a), &m, tag).value - a.abs() * nf).abs() <= 1e-12 * (1.0 + nf));
            prop_assert!(norm(&f.add(&h), &m, tag).value <= nf + nh + 1e-12);
            let big = Field { grid: g.clone(), data: f.data.iter().map(|x| 2.0 * x.abs()).collect() };
            prop_assert!(nf <= norm(&big, &m, tag).value + 1e-15);
        }
    }
}
