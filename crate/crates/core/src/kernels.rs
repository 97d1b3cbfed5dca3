//! Collision kernel, collision frequency, the bilinear collision operator on the
//! velocity lattice, its linearization, the smooth cutoff splitting `A + B2`, and
//! the quantitative splitting constants.
//!
//! The collision integral is discretized as a conservative lattice model. For a
//! pair of nodes `(v_i, v_j)` with half-difference `d = (a_i - a_j)/2` in lattice
//! units, the admissible post-collision pairs are `s + d'`, `s - d'` where
//! `s = (a_i + a_j)/2` and `d'` ranges over the lattice shell of `d` (same length,
//! same parity). Each shell is an equal-weight rule on the sphere of collision
//! directions, so momentum and energy are conserved exactly by every collision,
//! and the discrete Maxwellian annihilates `Q`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{KineticError, Result};
use crate::quadrature::{pairwise_sum, IntervalRule, SphereQuadrature, SphereRuleSpec};
use crate::vec3::Vec3;
use crate::velocity::VelocityGrid;
use crate::weights::Weight;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AngularKernel {
    /// `b = 1`.
    HardSpheres,
    Constant { value: f64 },
    /// `b = a0 + a2 cos^2`.
    EvenQuadratic { a0: f64, a2: f64 },
}

impl AngularKernel {
    #[inline]
    pub fn eval(&self, c: f64) -> f64 {
        match *self {
            AngularKernel::HardSpheres => 1.0,
            AngularKernel::Constant { value } => value,
            AngularKernel::EvenQuadratic { a0, a2 } => a0 + a2 * c * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionSpec {
    pub gamma: f64,
    pub c_phi: f64,
    pub angular: AngularKernel,
    #[serde(default)]
    pub sphere: SphereRuleSpec,
    /// Gauss-Legendre points per unit-length panel of the radial rule.
    #[serde(default = "default_radial_nodes")]
    pub radial_nodes: usize,
}

fn default_radial_nodes() -> usize {
    12
}

impl Default for CollisionSpec {
    fn default() -> Self {
        CollisionSpec {
            gamma: 1.0,
            c_phi: 1.0,
            angular: AngularKernel::HardSpheres,
            sphere: SphereRuleSpec::default(),
            radial_nodes: default_radial_nodes(),
        }
    }
}

/// `B(v, v_*, sigma) = C_phi |v - v_*|^gamma b(cos theta)`.
#[derive(Clone, Debug)]
pub struct CollisionModel {
    pub spec: CollisionSpec,
    pub gamma: f64,
    pub c_phi: f64,
    pub b: AngularKernel,
    pub b_inf: f64,
    pub l_b: f64,
    pub sphere: SphereQuadrature,
    nu_cosines: IntervalRule,
    nu_table: NuTable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuEvaluation {
    pub value: f64,
    /// Set when halving the radial resolution changes the value by more than `1e-8` relative.
    pub underresolved: bool,
}

#[derive(Clone, Debug)]
struct NuTable {
    dr: f64,
    values: Vec<f64>,
}

const NU_TABLE_RADIUS: f64 = 16.0;
const NU_TABLE_STEP: f64 = 1.0 / 128.0;
/// Gauss-Legendre points in the cosine for the frequency integral, whose integrand
/// `exp(r |v| cos)` concentrates near `cos = 1` at large speeds.
const NU_COSINE_NODES: usize = 128;

impl CollisionModel {
    pub fn new(spec: CollisionSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.gamma) {
            return Err(KineticError::invalid("gamma", "must lie in [0, 1]"));
        }
        if !(spec.c_phi > 0.0) {
            return Err(KineticError::invalid("c_phi", "must be positive"));
        }
        if spec.radial_nodes < 4 {
            return Err(KineticError::invalid("radial_nodes", "must be at least 4 per unit panel"));
        }
        let sphere = SphereQuadrature::new(spec.sphere);
        let b = spec.angular;
        let b_inf = sphere.cosines.iter().map(|&c| b.eval(c)).fold(f64::MIN, f64::max);
        if sphere.cosines.iter().any(|&c| b.eval(c) < 0.0) {
            return Err(KineticError::invalid("angular", "b must be nonnegative"));
        }
        let l_b = sphere.integrate_zonal(|c| b.eval(c));
        if !(l_b > 0.0) {
            return Err(KineticError::invalid("angular", "b must not vanish identically"));
        }
        let mut model = CollisionModel {
            spec,
            gamma: spec.gamma,
            c_phi: spec.c_phi,
            b,
            b_inf,
            l_b,
            sphere,
            nu_cosines: IntervalRule::gauss_legendre(NU_COSINE_NODES, -1.0, 1.0),
            nu_table: NuTable {
                dr: NU_TABLE_STEP,
                values: Vec::new(),
            },
        };
        let n = (NU_TABLE_RADIUS / NU_TABLE_STEP).round() as usize + 1;
        model.nu_table.values = (0..n)
            .map(|k| model.nu_quadrature(k as f64 * NU_TABLE_STEP, spec.radial_nodes))
            .collect();
        Ok(model)
    }

    pub fn hard_spheres() -> Self {
        CollisionModel::new(CollisionSpec::default()).unwrap()
    }

    /// `C_phi l_b int |v - v_*|^gamma mu_* dv_*` by Gauss-Legendre in `r = |v - v_*|`
    /// and in the cosine of the angle between `v - v_*` and `v`.
    fn nu_quadrature(&self, speed: f64, radial_nodes: usize) -> f64 {
        let r_max = speed + 12.0;
        let panels = (r_max.ceil() as usize).max(1);
        let rule = IntervalRule::composite(radial_nodes, panels, 0.0, r_max);
        let norm = (2.0 * PI).powf(-1.5);
        let integral = rule.integrate(|r| {
            let shell = 2.0
                * PI
                * self
                    .nu_cosines
                    .integrate(|c| (-0.5 * (speed * speed - 2.0 * r * speed * c + r * r)).exp());
            r.powf(self.gamma + 2.0) * norm * shell
        });
        self.c_phi * self.l_b * integral
    }

    /// Collision frequency `nu(v)` of the continuous model.
    pub fn collision_frequency(&self, v: Vec3) -> f64 {
        self.nu_of_speed(v.norm())
    }

    pub fn nu_of_speed(&self, s: f64) -> f64 {
        let t = &self.nu_table;
        let x = s / t.dr;
        let k = x.floor() as usize;
        if k + 2 >= t.values.len() {
            return self.nu_quadrature(s, self.spec.radial_nodes);
        }
        // cubic Lagrange on four table points; nu is even in the speed
        let at = |i: isize| t.values[i.unsigned_abs()];
        let k = k as isize;
        let u = x - k as f64;
        let (p0, p1, p2, p3) = (at(k - 1), at(k), at(k + 1), at(k + 2));
        -u * (u - 1.0) * (u - 2.0) / 6.0 * p0 + (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0 * p1
            - (u + 1.0) * u * (u - 2.0) / 2.0 * p2
            + (u + 1.0) * u * (u - 1.0) / 6.0 * p3
    }

    /// Direct quadrature with a resolution check against half the radial nodes.
    pub fn collision_frequency_checked(&self, v: Vec3) -> NuEvaluation {
        let s = v.norm();
        let fine = self.nu_quadrature(s, self.spec.radial_nodes);
        let coarse = self.nu_quadrature(s, self.spec.radial_nodes / 2);
        NuEvaluation {
            value: fine,
            underresolved: (fine - coarse).abs() > 1e-8 * fine.abs(),
        }
    }
}

/// Post-collision velocities `v' = (v + v_*)/2 + |v - v_*| sigma / 2`, `v'_* = (v + v_*)/2 - |v - v_*| sigma / 2`.
pub fn post_collision(v: Vec3, v_star: Vec3, sigma: Vec3) -> (Vec3, Vec3) {
    let c = (v + v_star) * 0.5;
    let r = 0.5 * (v - v_star).norm();
    (c + sigma * r, c - sigma * r)
}

/// One collision tuple `(i, j) -> (k, l)` with its kernel weight and the cosine of the deviation angle.
#[derive(Clone, Copy, Debug)]
pub struct CollisionTuple {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub weight: f64,
    pub cos: f64,
}

/// Conservative lattice discretization of `Q` and `L` on a velocity grid.
#[derive(Clone, Debug)]
pub struct LatticeCollision {
    pub grid: Arc<VelocityGrid>,
    pub gamma: f64,
    pub c_phi: f64,
    pub b: AngularKernel,
    shells: HashMap<(i32, u8), Vec<[i32; 3]>>,
    /// Unordered classes `{{i, j}, {k, l}}` and their summed weights.
    classes: Vec<[u32; 4]>,
    class_weights: Vec<f64>,
    /// Lattice loss rate `sum_j sum_d' K mu_j` at each node.
    pub nu: Vec<f64>,
    /// Loss rate of collisions dropped because a post-collision node left the lattice,
    /// relative to the full loss rate, maximized over nodes.
    pub truncation_fraction: f64,
}

#[inline]
fn parity_key(d: [i32; 3]) -> (i32, u8) {
    let n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let p = (d[0].rem_euclid(2) as u8) | ((d[1].rem_euclid(2) as u8) << 1) | ((d[2].rem_euclid(2) as u8) << 2);
    (n2, p)
}

impl LatticeCollision {
    pub fn new(model: &CollisionModel, grid: Arc<VelocityGrid>) -> Self {
        let n = grid.spec.n_per_dim as i32;
        let mut shells: HashMap<(i32, u8), Vec<[i32; 3]>> = HashMap::new();
        for x in -n..=n {
            for y in -n..=n {
                for z in -n..=n {
                    let d = [x, y, z];
                    shells.entry(parity_key(d)).or_default().push(d);
                }
            }
        }
        let mut op = LatticeCollision {
            grid,
            gamma: model.gamma,
            c_phi: model.c_phi,
            b: model.b,
            shells,
            classes: Vec::new(),
            class_weights: Vec::new(),
            nu: Vec::new(),
            truncation_fraction: 0.0,
        };
        let nv = op.grid.len();
        let mu = op.grid.mu.clone();
        let mut nu = vec![0.0; nv];
        let mut full = vec![0.0; nv];
        let mut classes = Vec::new();
        let mut weights = Vec::new();
        op.for_each_pair(|i, j, s, d, shell| {
            let pre = op.pair_prefactor(d, shell.len());
            if pre == 0.0 {
                return;
            }
            let dn2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
            for dp in shell {
                if *dp == d || *dp == [-d[0], -d[1], -d[2]] {
                    continue;
                }
                let cos = (d[0] * dp[0] + d[1] * dp[1] + d[2] * dp[2]) as f64 / dn2;
                let kw = pre * op.b.eval(cos);
                full[i] += kw * mu[j];
                let (Some(k), Some(l)) = (
                    op.grid.index_of([s[0] + dp[0], s[1] + dp[1], s[2] + dp[2]]),
                    op.grid.index_of([s[0] - dp[0], s[1] - dp[1], s[2] - dp[2]]),
                ) else {
                    continue;
                };
                nu[i] += kw * mu[j];
                if i < j && k < l && i < k {
                    let kw_rev = pre * op.b.eval(-cos);
                    classes.push([i as u32, j as u32, k as u32, l as u32]);
                    weights.push(kw + kw_rev);
                }
            }
        });
        op.truncation_fraction = nu
            .iter()
            .zip(&full)
            .map(|(a, b)| if *b > 0.0 { 1.0 - a / b } else { 0.0 })
            .fold(0.0, f64::max);
        op.nu = nu;
        op.classes = classes;
        op.class_weights = weights;
        op
    }

    /// Kernel weight without the angular factor: `h^3 C_phi |h d|^gamma 4 pi / (n(d) - 2)`.
    #[inline]
    fn pair_prefactor(&self, d: [i32; 3], shell_len: usize) -> f64 {
        if shell_len <= 2 {
            return 0.0;
        }
        let h = self.grid.h;
        let dn = ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt() * h;
        if dn == 0.0 {
            return 0.0;
        }
        self.grid.weight * self.c_phi * dn.powf(self.gamma) * 4.0 * PI / (shell_len - 2) as f64
    }

    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, [i32; 3], [i32; 3], &Vec<[i32; 3]>)) {
        let coords = &self.grid.coords;
        for (i, ai) in coords.iter().enumerate() {
            for (j, aj) in coords.iter().enumerate() {
                let d = [(ai[0] - aj[0]) / 2, (ai[1] - aj[1]) / 2, (ai[2] - aj[2]) / 2];
                let s = [(ai[0] + aj[0]) / 2, (ai[1] + aj[1]) / 2, (ai[2] + aj[2]) / 2];
                if let Some(shell) = self.shells.get(&parity_key(d)) {
                    f(i, j, s, d, shell);
                }
            }
        }
    }

    /// Visits every ordered nontrivial on-lattice collision `(i, j, d')`.
    pub fn for_each_collision(&self, mut f: impl FnMut(CollisionTuple)) {
        self.for_each_pair(|i, j, s, d, shell| {
            let pre = self.pair_prefactor(d, shell.len());
            if pre == 0.0 {
                return;
            }
            let dn2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
            for dp in shell {
                if *dp == d || *dp == [-d[0], -d[1], -d[2]] {
                    continue;
                }
                let (Some(k), Some(l)) = (
                    self.grid.index_of([s[0] + dp[0], s[1] + dp[1], s[2] + dp[2]]),
                    self.grid.index_of([s[0] - dp[0], s[1] - dp[1], s[2] - dp[2]]),
                ) else {
                    continue;
                };
                let cos = (d[0] * dp[0] + d[1] * dp[1] + d[2] * dp[2]) as f64 / dn2;
                f(CollisionTuple {
                    i,
                    j,
                    k,
                    l,
                    weight: pre * self.b.eval(cos),
                    cos,
                });
            }
        });
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// `Q(f, g)` accumulated into `out` (which is overwritten).
    pub fn q_bilinear_into(&self, f: &[f64], g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &w) in self.classes.iter().zip(&self.class_weights) {
            let [i, j, k, l] = [c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize];
            // grouped so that swapping f and g gives bit-identical results
            let p = 0.5 * w * ((f[k] * g[l] + g[k] * f[l]) - (f[i] * g[j] + g[i] * f[j]));
            out[i] += p;
            out[j] += p;
            out[k] -= p;
            out[l] -= p;
        }
    }

    pub fn q_bilinear(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.q_bilinear_into(f, g, &mut out);
        out
    }

    /// `Q(f, f)` split into gain and loss rate: `Q(f, f) = gain - loss_rate * f`.
    pub fn gain_loss(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = f.len();
        let mut gain = vec![0.0; n];
        let mut rate = vec![0.0; n];
        for (c, &w) in self.classes.iter().zip(&self.class_weights) {
            let [i, j, k, l] = [c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize];
            let g_ij = w * f[k] * f[l];
            let g_kl = w * f[i] * f[j];
            gain[i] += g_ij;
            gain[j] += g_ij;
            gain[k] += g_kl;
            gain[l] += g_kl;
            rate[i] += w * f[j];
            rate[j] += w * f[i];
            rate[k] += w * f[l];
            rate[l] += w * f[k];
        }
        (gain, rate)
    }

    /// `L f = 2 Q(mu, f)`.
    pub fn linear_l(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.q_bilinear(&self.grid.mu, f);
        out.iter_mut().for_each(|o| *o *= 2.0);
        out
    }

    /// `K f = L f + nu f`.
    pub fn apply_k(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.linear_l(f);
        for ((o, n), x) in out.iter_mut().zip(&self.nu).zip(f) {
            *o += n * x;
        }
        out
    }

    /// Dense matrix of `L` on the grid.
    pub fn l_matrix(&self) -> DMatrix<f64> {
        let split = SplitOperator::new(self, 0.5).expect("delta in range");
        let mut m = &split.a + &split.b2;
        for i in 0..self.len() {
            m[(i, i)] -= self.nu[i];
        }
        m
    }

    /// `<f, g>_{L^2(mu^{-1/2})}` on the grid.
    pub fn mu_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let t: Vec<f64> = f
            .iter()
            .zip(g)
            .zip(&self.grid.mu)
            .map(|((a, b), m)| a * b / m)
            .collect();
        self.grid.integrate(&t)
    }

    /// Eigenvalues of `L` in `L^2(mu^{-1/2})`, sorted decreasingly.
    pub fn spectrum(&self) -> Vec<f64> {
        let l = self.l_matrix();
        let n = self.len();
        let s: Vec<f64> = self.grid.mu.iter().map(|m| m.sqrt()).collect();
        let sym = DMatrix::from_fn(n, n, |i, j| {
            let a = l[(i, j)] * s[j] / s[i];
            let b = l[(j, i)] * s[i] / s[j];
            0.5 * (a + b)
        });
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }

    /// Smallest nonzero decay rate of `L`, skipping the five collision invariants.
    pub fn spectral_gap(&self) -> f64 {
        let ev = self.spectrum();
        -ev[5]
    }

    /// Fitted `(nu_0, nu_1)` with `nu_0 (1 + |v|^gamma) <= nu(v) <= nu_1 (1 + |v|^gamma)` on the grid.
    pub fn nu_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for (v, n) in self.grid.nodes.iter().zip(&self.nu) {
            let r = n / (1.0 + v.norm().powf(self.gamma));
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    pub fn nu_min(&self) -> f64 {
        self.nu.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// `C^infinity` step: 0 for `s <= 0`, 1 for `s >= 1`.
#[inline]
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / s).exp();
        let b = (-1.0 / (1.0 - s)).exp();
        a / (a + b)
    }
}

/// Smooth cutoff `Theta_delta` as a function of `|v|`, `|v - v_*|` and `|cos theta|`.
pub fn theta_cutoff(delta: f64, speed: f64, relative_speed: f64, abs_cos: f64) -> f64 {
    let inv = 1.0 / delta;
    let t_speed = smooth_step((2.0 * inv - speed) / inv);
    let t_low = smooth_step((relative_speed - delta) / delta);
    let t_high = smooth_step((2.0 * inv - relative_speed) / inv);
    let t_cos = smooth_step((1.0 - delta - abs_cos) / delta);
    t_speed * t_low * t_high * t_cos
}

/// `A^(delta)` and `B2^(delta)` as dense matrices on the velocity grid.
#[derive(Clone, Debug)]
pub struct SplitOperator {
    pub delta: f64,
    /// Support radius `2 / delta` of the rows of `A`.
    pub r_delta: f64,
    pub a: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub nu: Vec<f64>,
}

impl SplitOperator {
    pub fn new(lattice: &LatticeCollision, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(KineticError::invalid("delta", "must lie in (0, 1)"));
        }
        let n = lattice.len();
        let grid = &lattice.grid;
        let mu = &grid.mu;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b2 = DMatrix::<f64>::zeros(n, n);
        lattice.for_each_collision(|t| {
            let th = theta_cutoff(
                delta,
                grid.nodes[t.i].norm(),
                (grid.nodes[t.i] - grid.nodes[t.j]).norm(),
                t.cos.abs(),
            );
            for (m, w) in [(&mut a, th * t.weight), (&mut b2, (1.0 - th) * t.weight)] {
                if w == 0.0 {
                    continue;
                }
                m[(t.i, t.k)] += w * mu[t.l];
                m[(t.i, t.l)] += w * mu[t.k];
                m[(t.i, t.j)] -= w * mu[t.i];
            }
        });
        Ok(SplitOperator {
            delta,
            r_delta: 2.0 / delta,
            a,
            b2,
            nu: lattice.nu.clone(),
        })
    }

    pub fn apply_a(&self, h: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(h)).data.into()
    }

    pub fn apply_b2(&self, h: &[f64]) -> Vec<f64> {
        (&self.b2 * DVector::from_column_slice(h)).data.into()
    }

    /// `A h + B2 h - nu h`, which equals `L h`.
    pub fn apply_l(&self, h: &[f64]) -> Vec<f64> {
        let a = self.apply_a(h);
        let b = self.apply_b2(h);
        a.iter()
            .zip(&b)
            .zip(h.iter().zip(&self.nu))
            .map(|((x, y), (z, n))| x + y - n * z)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exponent {
    One,
    Infinity,
}

impl Exponent {
    pub fn inverse(self) -> f64 {
        match self {
            Exponent::One => 1.0,
            Exponent::Infinity => 0.0,
        }
    }
}

/// `k_q^* = (16 pi b_inf / l_b - 2)^{1/q} (1 + gamma + 16 pi b_inf / l_b)^{1 - 1/q}`.
pub fn kq_star(q: Exponent, gamma: f64, b_inf: f64, l_b: f64) -> Result<f64> {
    let r = 16.0 * PI * b_inf / l_b;
    if r <= 2.0 {
        return Err(KineticError::Domain(format!("16 pi b_inf / l_b = {r} must exceed 2")));
    }
    let s = q.inverse();
    Ok((r - 2.0).powf(s) * (1.0 + gamma + r).powf(1.0 - s))
}

/// `phi_q(k) = (16 pi b_inf / l_b) (1/(k+2))^{1/q} (1/(k-1-gamma))^{1-1/q}`.
pub fn phi_q(q: Exponent, k: f64, gamma: f64, b_inf: f64, l_b: f64) -> Result<f64> {
    if k <= 1.0 + gamma {
        return Err(KineticError::Domain(format!("k = {k} must exceed 1 + gamma")));
    }
    let r = 16.0 * PI * b_inf / l_b;
    let s = q.inverse();
    Ok(r * (1.0 / (k + 2.0)).powf(s) * (1.0 / (k - 1.0 - gamma)).powf(1.0 - s))
}

/// A velocity probe for norm estimation.
pub type Probe = Vec<f64>;

/// Default probe family: sign patterns of every row of `b2` (tight for `q = infinity`),
/// unit masses at every node (tight for `q = 1`), the weight tail `m^{-1}`, and a few
/// deterministic pseudo-random fields.
pub fn default_probes(split: &SplitOperator, weight: &Weight, grid: &VelocityGrid, q: Exponent) -> Vec<Probe> {
    let n = grid.len();
    let minv: Vec<f64> = grid.nodes.iter().map(|v| 1.0 / weight.eval(*v)).collect();
    let mut probes = vec![minv.clone()];
    match q {
        Exponent::Infinity => {
            for i in 0..n {
                probes.push((0..n).map(|j| split.b2[(i, j)].signum() * minv[j]).collect());
            }
        }
        Exponent::One => {
            for i in 0..n {
                let mut p = vec![0.0; n];
                p[i] = minv[i];
                probes.push(p);
            }
        }
    }
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for _ in 0..8 {
        probes.push(
            (0..n)
                .map(|j| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * minv[j]
                })
                .collect(),
        );
    }
    probes
}

fn weighted_lq(values: &[f64], scale: impl Fn(usize) -> f64, q: Exponent, cell: f64) -> f64 {
    match q {
        Exponent::Infinity => values
            .iter()
            .enumerate()
            .map(|(i, x)| x.abs() * scale(i))
            .fold(0.0, f64::max),
        Exponent::One => {
            let t: Vec<f64> = values.iter().enumerate().map(|(i, x)| x.abs() * scale(i)).collect();
            cell * pairwise_sum(&t)
        }
    }
}

/// `max_h ||B2 h||_{L^q(nu^{-1} m)} / ||h||_{L^q(m)}` over a probe family.
pub fn estimate_delta(
    split: &SplitOperator,
    grid: &VelocityGrid,
    weight: &Weight,
    q: Exponent,
    probes: &[Probe],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(KineticError::EmptyProbeFamily);
    }
    let m: Vec<f64> = grid.nodes.iter().map(|v| weight.eval(*v)).collect();
    let mut best: f64 = 0.0;
    for h in probes {
        let den = weighted_lq(h, |i| m[i], q, grid.weight);
        if den == 0.0 {
            continue;
        }
        let out = split.apply_b2(h);
        let num = weighted_lq(&out, |i| m[i] / split.nu[i], q, grid.weight);
        best = best.max(num / den);
    }
    Ok(best)
}

/// `max_h ||B2 h||_{L^1(<v>^2)} / ||h||_{L^infinity(<v>^k)}` over sign patterns of
/// `<v>^{-k}`, refined by sign iteration.
pub fn estimate_delta_tilde(split: &SplitOperator, grid: &VelocityGrid, k: f64) -> f64 {
    let n = grid.len();
    let tail: Vec<f64> = grid.nodes.iter().map(|v| (1.0 + v.norm_sq()).powf(-0.5 * k)).collect();
    let out_w: Vec<f64> = grid.nodes.iter().map(|v| grid.weight * (1.0 + v.norm_sq())).collect();
    let value = |signs: &[f64]| {
        let h: Vec<f64> = signs.iter().zip(&tail).map(|(s, t)| s * t).collect();
        let out = split.apply_b2(&h);
        let t: Vec<f64> = out.iter().zip(&out_w).map(|(o, w)| o.abs() * w).collect();
        (pairwise_sum(&t), out)
    };
    let mut starts: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| out_w[b].partial_cmp(&out_w[a]).unwrap());
    for &i in ranked.iter().take(8) {
        starts.push((0..n).map(|j| if split.b2[(i, j)] < 0.0 { -1.0 } else { 1.0 }).collect());
    }
    let mut best: f64 = 0.0;
    for mut s in starts {
        for _ in 0..20 {
            let (v, out) = value(&s);
            best = best.max(v);
            // s <- sign(B2^T diag(w) sign(B2 h))
            let y: Vec<f64> = out.iter().zip(&out_w).map(|(o, w)| o.signum() * w).collect();
            let z = split.b2.transpose() * DVector::from_vec(y);
            let next: Vec<f64> = z.iter().map(|x| if *x < 0.0 { -1.0 } else { 1.0 }).collect();
            if next == s {
                break;
            }
            s = next;
        }
    }
    best
}

/// Measured `||A h||_{L^infinity(m)} <= C_A ||h||_{L^infinity(m)}` constant (exact row-sum norm).
pub fn a_operator_norm(split: &SplitOperator, grid: &VelocityGrid, weight: &Weight) -> f64 {
    let m: Vec<f64> = grid.nodes.iter().map(|v| weight.eval(*v)).collect();
    (0..grid.len())
        .map(|i| (0..grid.len()).map(|j| split.a[(i, j)].abs() * m[i] / m[j]).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest observed `||Q(h, g)||_{L^q(m nu^{-1})} / (||h|| ||g||)` over the given probe pairs.
pub fn estimate_q_bound(
    lattice: &LatticeCollision,
    weight: &Weight,
    q: Exponent,
    pairs: &[(Probe, Probe)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(KineticError::EmptyProbeFamily);
    }
    let grid = &lattice.grid;
    let m: Vec<f64> = grid.nodes.iter().map(|v| weight.eval(*v)).collect();
    let mut best: f64 = 0.0;
    for (h, g) in pairs {
        let nh = weighted_lq(h, |i| m[i], q, grid.weight);
        let ng = weighted_lq(g, |i| m[i], q, grid.weight);
        if nh == 0.0 || ng == 0.0 {
            continue;
        }
        let out = lattice.q_bilinear(h, g);
        let num = weighted_lq(&out, |i| m[i] / lattice.nu[i], q, grid.weight);
        best = best.max(num / (nh * ng));
    }
    Ok(best)
}

/// Orthonormal basis of `Ker L` in `L^2(mu)` on the grid: `1, v_1, v_2, v_3, (|v|^2 - 3)/c`.
pub fn collision_invariants(grid: &VelocityGrid) -> [Vec<f64>; 5] {
    let mut basis: [Vec<f64>; 5] = [
        grid.nodes.iter().map(|_| 1.0).collect(),
        grid.nodes.iter().map(|v| v.x()).collect(),
        grid.nodes.iter().map(|v| v.y()).collect(),
        grid.nodes.iter().map(|v| v.z()).collect(),
        grid.nodes.iter().map(|v| v.norm_sq() - 3.0).collect(),
    ];
    let dot = |a: &[f64], b: &[f64]| {
        let t: Vec<f64> = a.iter().zip(b).zip(&grid.mu).map(|((x, y), m)| x * y * m).collect();
        grid.integrate(&t)
    };
    for a in 0..5 {
        for b in 0..a {
            let c = dot(&basis[a], &basis[b]);
            let (head, tail) = basis.split_at_mut(a);
            for (x, y) in tail[0].iter_mut().zip(&head[b]) {
                *x -= c * y;
            }
        }
        let nrm = dot(&basis[a], &basis[a]).sqrt();
        basis[a].iter_mut().for_each(|x| *x /= nrm);
    }
    basis
}

/// `pi_L f = sum_i (int f phi_i) phi_i mu`; returns `(fluid, microscopic)`.
pub fn project_pi_l(grid: &VelocityGrid, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let basis = collision_invariants(grid);
    let mut fluid = vec![0.0; f.len()];
    for phi in &basis {
        let t: Vec<f64> = f.iter().zip(phi).map(|(a, b)| a * b).collect();
        let c = grid.integrate(&t);
        for ((o, p), m) in fluid.iter_mut().zip(phi).zip(&grid.mu) {
            *o += c * p * m;
        }
    }
    let micro = f.iter().zip(&fluid).map(|(a, b)| a - b).collect();
    (fluid, micro)
}
