//! Perturbative solvers around the global Maxwellian: the `f1` Duhamel iteration,
//! the `f2` equation driven by `A f1`, their coupled outer iteration, and a direct
//! reference solver for the full and perturbed Boltzmann equations.
//!
//! All time stepping shares one first-order scheme (the direct solver may use Strang
//! splitting instead). Over a step of length `dt` the
//! collision part is integrated with the exponential rule
//! `u + Delta = e^{-nu dt} u + dt phi(nu dt) S`, `phi(z) = (1 - e^{-z}) / z`, the
//! increment `Delta` has its local hydrodynamic part removed where the exact flow
//! would conserve it, and the result is transported exactly along characteristics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conservation::ConservedBasis;
use crate::error::{KineticError, Result};
use crate::field::{Field, PhaseGrid};
use crate::kernels::{collision_invariants, project_pi_l, LatticeCollision, SplitOperator};
use crate::transport::{chain_rng, BoundaryCondition, TransportStepper};
use crate::weights::Weight;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStart {
    /// Every Duhamel iteration starts from `h_0 = 0`.
    Zero,
    /// Outer iterations after the first start from the previous `f1`.
    Previous,
}

/// Operator splitting of the direct solvers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// Collision over `dt`, then transport.
    #[default]
    Lie,
    /// Collision over `dt / 2`, transport, collision over `dt / 2`.
    Strang,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub delta: f64,
    pub dt: f64,
    pub t_final: f64,
    /// Relative time-sup weighted distance between successive iterates.
    pub tol_fixed_point: f64,
    pub tol_residual: f64,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    pub bc: BoundaryCondition,
    pub weight: Weight,
    /// Smallness threshold on `||f0||_{L^infinity(m)}`.
    pub eta: f64,
    pub inner_start: InnerStart,
    /// Tolerated negativity of the full solution.
    pub tol_pos: f64,
    /// Splitting of `solve_full`; the coupled solver is always first order.
    pub splitting: Splitting,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            delta: 0.1,
            dt: 0.02,
            t_final: 1.0,
            tol_fixed_point: 1e-6,
            tol_residual: 1e-5,
            max_inner_iters: 60,
            max_outer_iters: 10,
            bc: BoundaryCondition::Specular,
            weight: Weight::Polynomial { k: 10.0 },
            eta: 1e-2,
            inner_start: InnerStart::Previous,
            tol_pos: 1e-8,
            splitting: Splitting::Lie,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(KineticError::invalid("delta", "must lie in (0, 1)"));
        }
        if !(self.dt > 0.0) {
            return Err(KineticError::invalid("dt", "must be positive"));
        }
        if !(self.t_final >= self.dt) {
            return Err(KineticError::invalid("t_final", "must be at least dt"));
        }
        for (name, v) in [
            ("tol_fixed_point", self.tol_fixed_point),
            ("tol_residual", self.tol_residual),
            ("eta", self.eta),
            ("tol_pos", self.tol_pos),
        ] {
            if !(v > 0.0) {
                return Err(KineticError::invalid(name, "must be positive"));
            }
        }
        if self.max_inner_iters == 0 || self.max_outer_iters == 0 {
            return Err(KineticError::invalid("max_inner_iters", "budgets must be at least 1"));
        }
        self.weight.validate()
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Fields at `t_n = n dt`, `n = 0..=steps`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub fields: Vec<Field>,
}

impl Trajectory {
    pub fn zeros(grid: Arc<PhaseGrid>, dt: f64, steps: usize) -> Self {
        Trajectory {
            dt,
            fields: vec![Field::zeros(grid); steps + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.fields.len()).map(|n| n as f64 * self.dt).collect()
    }

    pub fn add(&self, other: &Trajectory) -> Trajectory {
        Trajectory {
            dt: self.dt,
            fields: self.fields.iter().zip(&other.fields).map(|(a, b)| a.add(b)).collect(),
        }
    }

    /// `(t, ||f(t)||_{L^infinity(m)})`.
    pub fn norm_series(&self, m: &Weight) -> Vec<(f64, f64)> {
        let mw = m.on_grid(&self.fields[0].grid.velocity);
        self.times()
            .into_iter()
            .zip(&self.fields)
            .map(|(t, f)| (t, sup_weighted(f, &mw)))
            .collect()
    }

    pub fn sup_norm(&self, m: &Weight) -> f64 {
        self.norm_series(m).iter().fold(0.0, |a, (_, v)| a.max(*v))
    }

    /// `sup_t ||self(t) - other(t)||_{L^infinity(m)}`.
    pub fn sup_distance(&self, other: &Trajectory, m: &Weight) -> f64 {
        let mw = m.on_grid(&self.fields[0].grid.velocity);
        self.fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| sup_weighted(&a.sub(b), &mw))
            .fold(0.0, f64::max)
    }
}

/// `||f||_{L^infinity(m)}` with `m` tabulated on the velocity nodes.
pub fn sup_weighted(f: &Field, mw: &[f64]) -> f64 {
    let nv = mw.len();
    f.data
        .iter()
        .enumerate()
        .fold(0.0, |a: f64, (k, x)| if x.is_nan() { f64::NAN } else { a.max(x.abs() * mw[k % nv]) })
}

#[derive(Clone, Debug)]
pub struct F1Solution {
    pub traj: Trajectory,
    /// Hydrodynamic moments of the collisional increment of each step, per cell.
    pub fluid_increments: Vec<Vec<[f64; 5]>>,
    pub iterations: usize,
    /// Last observed ratio of successive iterate distances.
    pub contraction: f64,
}

#[derive(Clone, Debug)]
pub struct F2Solution {
    pub traj: Trajectory,
    /// Largest conserved-moment defect of `f1 + f2` removed during the run.
    pub projection_defect: f64,
}

#[derive(Clone, Debug)]
pub struct CoupledSolution {
    pub f1: Trajectory,
    pub f2: Trajectory,
    pub f: Trajectory,
    pub outer_iterations: usize,
    pub inner_iterations: Vec<usize>,
    pub contraction: Vec<f64>,
    pub outer_differences: Vec<f64>,
    pub projection_defect: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullForm {
    /// `F` itself, collisions through gain and loss.
    Full,
    /// `f = F - mu`, collisions through `L f + Q(f, f)`.
    Perturbation,
}

#[derive(Clone, Debug)]
pub struct FullSolution {
    pub traj: Trajectory,
    pub form: FullForm,
    /// Most negative nodal value and where it occurred `(value, step, cell, node)`.
    pub min_value: (f64, usize, usize, usize),
}

/// Heavy operators shared by all solves on one phase grid.
#[derive(Clone, Debug)]
pub struct Solver {
    pub grid: Arc<PhaseGrid>,
    pub lattice: Arc<LatticeCollision>,
    pub split: Arc<SplitOperator>,
    pub cfg: SolverConfig,
    pub stepper: TransportStepper,
    pub conserved: ConservedBasis,
    /// Switches off `B2` and `Q` in the `f1` equation.
    pub collisions_off: bool,
    /// Drops `Q` from every equation, leaving the linear problem `d_t f = G f`.
    pub quadratic_off: bool,
    k_matrix: DMatrix<f64>,
    decay: Vec<f64>,
    dt_phi: Vec<f64>,
    /// `decay` and `dt_phi` over half a step.
    half: (Vec<f64>, Vec<f64>),
    hydro: [Vec<f64>; 5],
}

fn exp_rule(nu: f64, dt: f64) -> (f64, f64) {
    let z = nu * dt;
    let e = (-z).exp();
    let dphi = if z.abs() < 1e-8 { dt * (1.0 - 0.5 * z) } else { (1.0 - e) / nu };
    (e, dphi)
}

impl Solver {
    pub fn new(grid: Arc<PhaseGrid>, lattice: Arc<LatticeCollision>, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if !Arc::ptr_eq(&grid.velocity, &lattice.grid) && grid.velocity.nodes != lattice.grid.nodes {
            return Err(KineticError::invalid("lattice", "velocity grid differs from the phase grid"));
        }
        let split = Arc::new(SplitOperator::new(&lattice, cfg.delta)?);
        Self::with_split(grid, lattice, split, cfg)
    }

    pub fn with_split(
        grid: Arc<PhaseGrid>,
        lattice: Arc<LatticeCollision>,
        split: Arc<SplitOperator>,
        cfg: SolverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stepper = TransportStepper::new(grid.clone(), cfg.bc, cfg.dt)?;
        stepper.conservative = true;
        let (decay, dt_phi) = lattice.nu.iter().map(|&n| exp_rule(n, cfg.dt)).unzip();
        let half = lattice.nu.iter().map(|&n| exp_rule(n, 0.5 * cfg.dt)).unzip();
        let k_matrix = &split.a + &split.b2;
        Ok(Solver {
            conserved: ConservedBasis::new(grid.clone(), cfg.bc),
            hydro: collision_invariants(&grid.velocity),
            grid,
            lattice,
            split,
            cfg,
            stepper,
            collisions_off: false,
            quadratic_off: false,
            k_matrix,
            decay,
            dt_phi,
            half,
        })
    }

    pub fn with_config(&self, cfg: SolverConfig) -> Result<Self> {
        if cfg.delta == self.cfg.delta {
            Self::with_split(self.grid.clone(), self.lattice.clone(), self.split.clone(), cfg)
        } else {
            Self::new(self.grid.clone(), self.lattice.clone(), cfg)
        }
    }

    pub fn weight_norm(&self, f: &Field) -> f64 {
        sup_weighted(f, &self.cfg.weight.on_grid(&self.grid.velocity))
    }

    fn fluid_coefficients(&self, delta: &[f64]) -> [f64; 5] {
        let vg = &self.grid.velocity;
        let mut c = [0.0; 5];
        for (ci, phi) in c.iter_mut().zip(&self.hydro) {
            let t: Vec<f64> = delta.iter().zip(phi).map(|(a, b)| a * b).collect();
            *ci = vg.integrate(&t);
        }
        c
    }

    fn remove_fluid(&self, delta: &mut [f64], c: &[f64; 5]) {
        let mu = &self.grid.velocity.mu;
        for (ci, phi) in c.iter().zip(&self.hydro) {
            for ((d, p), m) in delta.iter_mut().zip(phi).zip(mu) {
                *d -= ci * p * m;
            }
        }
    }

    fn quadratic(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        if self.quadratic_off {
            vec![0.0; f.len()]
        } else {
            self.lattice.q_bilinear(f, g)
        }
    }

    fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        (m * DVector::from_column_slice(x)).data.into()
    }

    /// One step of the `f1` map: `u -> T(u + Delta)` with source `B2 h + Q(h, h + 2 g)`.
    fn f1_step(&self, u: &Field, h: &Field, g: Option<&Field>) -> (Field, Vec<[f64; 5]>) {
        let nv = u.nv();
        let results: Vec<(Vec<f64>, [f64; 5])> = (0..u.ncell())
            .into_par_iter()
            .map(|c| {
                let uc = u.cell(c);
                let mut delta: Vec<f64> = uc.iter().zip(&self.decay).map(|(x, e)| (e - 1.0) * x).collect();
                if !self.collisions_off {
                    let hc = h.cell(c);
                    let src = Self::matvec(&self.split.b2, hc);
                    let partner: Vec<f64> = match g {
                        Some(g) => hc.iter().zip(g.cell(c)).map(|(a, b)| a + 2.0 * b).collect(),
                        None => hc.to_vec(),
                    };
                    let q = self.quadratic(hc, &partner);
                    for j in 0..nv {
                        delta[j] += self.dt_phi[j] * (src[j] + q[j]);
                    }
                }
                let fluid = self.fluid_coefficients(&delta);
                (delta, fluid)
            })
            .collect();
        let mut pre = u.clone();
        let mut fluids = Vec::with_capacity(results.len());
        for (c, (delta, fluid)) in results.into_iter().enumerate() {
            for (x, d) in pre.cell_mut(c).iter_mut().zip(&delta) {
                *x += d;
            }
            fluids.push(fluid);
        }
        (self.stepper.transport(&pre), fluids)
    }

    fn check_finite(&self, f: &Field, n: usize) -> Result<()> {
        if f.is_finite() {
            Ok(())
        } else {
            Err(KineticError::BlowUp(n as f64 * self.cfg.dt))
        }
    }

    /// Fixed point of `h -> S(t) f0 + int_0^t S(t - s) [B2 h + Q(h, h + 2 g)] ds` by
    /// Picard iteration over whole trajectories.
    pub fn solve_f1(&self, f0: &Field, g: Option<&Trajectory>, start: Option<&Trajectory>) -> Result<F1Solution> {
        self.solve_f1_tol(f0, g, start, self.cfg.tol_fixed_point)
    }

    fn solve_f1_tol(&self, f0: &Field, g: Option<&Trajectory>, start: Option<&Trajectory>, tol: f64) -> Result<F1Solution> {
        let steps = self.cfg.steps();
        let mw = self.cfg.weight.on_grid(&self.grid.velocity);
        let mut h = match start {
            Some(s) => s.clone(),
            None => Trajectory::zeros(self.grid.clone(), self.cfg.dt, steps),
        };
        let mut prev_dist = f64::NAN;
        let mut ratio = 0.0;
        for it in 1..=self.cfg.max_inner_iters {
            let mut fields = Vec::with_capacity(steps + 1);
            let mut fluids = Vec::with_capacity(steps);
            fields.push(f0.clone());
            for n in 0..steps {
                let (next, fl) = self.f1_step(&fields[n], &h.fields[n], g.map(|g| &g.fields[n]));
                self.check_finite(&next, n + 1)?;
                fields.push(next);
                fluids.push(fl);
            }
            let new = Trajectory { dt: self.cfg.dt, fields };
            let dist = new
                .fields
                .iter()
                .zip(&h.fields)
                .map(|(a, b)| sup_weighted(&a.sub(b), &mw))
                .fold(0.0, f64::max);
            let scale = new.fields.iter().map(|f| sup_weighted(f, &mw)).fold(0.0, f64::max);
            if prev_dist.is_finite() && prev_dist > 0.0 {
                ratio = dist / prev_dist;
            }
            prev_dist = dist;
            if dist <= tol * scale {
                return Ok(F1Solution {
                    traj: new,
                    fluid_increments: fluids,
                    iterations: it,
                    contraction: ratio,
                });
            }
            h = new;
        }
        Err(KineticError::SmallnessViolated {
            ratio,
            iterations: self.cfg.max_inner_iters,
        })
    }

    /// Direct stepping of `d_t f2 = G f2 + Q(f2, f2) + A f1`, `f2(0) = 0`, with the
    /// conserved moments of `f1 + f2` held at those of `f1(0)`.
    pub fn solve_f2(&self, f1: &F1Solution) -> Result<F2Solution> {
        let steps = f1.traj.len() - 1;
        let target = self.conserved.moments(&f1.traj.fields[0]);
        let mut fields = Vec::with_capacity(steps + 1);
        fields.push(Field::zeros(self.grid.clone()));
        let mut defect: f64 = 0.0;
        for n in 0..steps {
            let u = &fields[n];
            let g = &f1.traj.fields[n];
            let deltas: Vec<Vec<f64>> = (0..u.ncell())
                .into_par_iter()
                .map(|c| {
                    let uc = u.cell(c);
                    let ku = Self::matvec(&self.k_matrix, uc);
                    let ag = Self::matvec(&self.split.a, g.cell(c));
                    let q = self.quadratic(uc, uc);
                    let mut delta: Vec<f64> = (0..uc.len())
                        .map(|j| (self.decay[j] - 1.0) * uc[j] + self.dt_phi[j] * (ku[j] + q[j] + ag[j]))
                        .collect();
                    let own = self.fluid_coefficients(&delta);
                    let other = &f1.fluid_increments[n][c];
                    let total: [f64; 5] = std::array::from_fn(|i| own[i] + other[i]);
                    self.remove_fluid(&mut delta, &total);
                    delta
                })
                .collect();
            let mut pre = u.clone();
            for (c, d) in deltas.iter().enumerate() {
                for (x, y) in pre.cell_mut(c).iter_mut().zip(d) {
                    *x += y;
                }
            }
            let mut next = self.stepper.transport(&pre);
            let f1m = self.conserved.moments(&f1.traj.fields[n + 1]);
            let t: Vec<f64> = target.iter().zip(&f1m).map(|(a, b)| a - b).collect();
            defect = defect.max(self.conserved.restore(&mut next, &t));
            self.check_finite(&next, n + 1)?;
            fields.push(next);
        }
        Ok(F2Solution {
            traj: Trajectory { dt: self.cfg.dt, fields },
            projection_defect: defect,
        })
    }

    fn check_small(&self, f0: &Field) -> Result<f64> {
        let n = self.weight_norm(f0);
        if n > self.cfg.eta * (1.0 + 1e-12) {
            return Err(KineticError::Precondition(format!(
                "||f0|| = {n:e} exceeds the smallness threshold {:e}",
                self.cfg.eta
            )));
        }
        Ok(n)
    }

    /// Alternates `solve_f1(f0, f2)` and `solve_f2(f1)` from `f1 = f2 = 0`.
    pub fn solve_coupled(&self, f0: &Field) -> Result<CoupledSolution> {
        self.outer_loop(f0, None)
    }

    /// `solve_coupled` that saves the outer iteration state to `path` after every outer
    /// iteration and resumes from it when the file matches this grid, configuration
    /// (up to `max_outer_iters`) and `f0`.
    pub fn solve_coupled_checkpointed(&self, f0: &Field, path: &Path) -> Result<CoupledSolution> {
        self.outer_loop(f0, Some(path))
    }

    fn outer_loop(&self, f0: &Field, checkpoint: Option<&Path>) -> Result<CoupledSolution> {
        self.check_small(f0)?;
        let m = self.cfg.weight;
        let tol = self.cfg.tol_fixed_point;
        let steps = self.cfg.steps();
        let cfg_json = |cfg: &SolverConfig| serde_json::to_string(cfg).expect("configurations serialize");
        let mut st = OuterState {
            cfg: cfg_json(&self.cfg),
            ncell: self.grid.ncell(),
            nv: self.grid.nv(),
            f0: f0.data.clone(),
            done: 0,
            f1: None,
            f2: vec![vec![0.0; f0.data.len()]; steps + 1],
            f: vec![vec![0.0; f0.data.len()]; steps + 1],
            inner: Vec::new(),
            contraction: Vec::new(),
            diffs: Vec::new(),
            defect: 0.0,
        };
        if let Some(path) = checkpoint {
            if path.exists() {
                let saved = OuterState::load(path)?;
                // the outer budget may change between runs
                let same_cfg = serde_json::from_str::<SolverConfig>(&saved.cfg).is_ok_and(|c| {
                    SolverConfig {
                        max_outer_iters: self.cfg.max_outer_iters,
                        ..c
                    } == self.cfg
                });
                if !same_cfg || saved.ncell != st.ncell || saved.nv != st.nv || saved.f0 != st.f0 {
                    return Err(checkpoint_error(path, "does not match this grid, configuration and f0"));
                }
                st = saved;
            }
        }
        let traj = |data: &[Vec<f64>]| Trajectory {
            dt: self.cfg.dt,
            fields: data
                .iter()
                .map(|d| Field {
                    grid: self.grid.clone(),
                    data: d.clone(),
                })
                .collect(),
        };
        let mut f2 = traj(&st.f2);
        let mut f_prev = traj(&st.f);
        let mut f1_prev = st.f1.as_deref().map(traj);
        for l in st.done + 1..=self.cfg.max_outer_iters {
            let start = match self.cfg.inner_start {
                InnerStart::Zero => None,
                InnerStart::Previous => f1_prev.as_ref(),
            };
            let g = if l == 1 { None } else { Some(&f2) };
            let s1 = self.solve_f1_tol(f0, g, start, 0.1 * tol)?;
            let s2 = self.solve_f2(&s1)?;
            st.inner.push(s1.iterations);
            st.contraction.push(s1.contraction);
            st.defect = st.defect.max(s2.projection_defect);
            let f = s1.traj.add(&s2.traj);
            let d = f.sup_distance(&f_prev, &m);
            let scale = f.sup_norm(&m);
            st.diffs.push(d);
            f2 = s2.traj;
            if d <= tol * scale {
                return Ok(CoupledSolution {
                    f1: s1.traj,
                    f2,
                    f,
                    outer_iterations: l,
                    inner_iterations: st.inner,
                    contraction: st.contraction,
                    outer_differences: st.diffs,
                    projection_defect: st.defect,
                });
            }
            if let Some(path) = checkpoint {
                let data = |t: &Trajectory| t.fields.iter().map(|x| x.data.clone()).collect::<Vec<_>>();
                st.done = l;
                st.f1 = Some(data(&s1.traj));
                st.f2 = data(&f2);
                st.f = data(&f);
                st.save(path)?;
            }
            f1_prev = Some(s1.traj);
            f_prev = f;
        }
        Err(KineticError::CouplingFailed {
            iterations: self.cfg.max_outer_iters,
            difference: st.diffs.last().cloned().unwrap_or(f64::NAN),
        })
    }

    /// Collisional update over `tau` (`dt` or `dt / 2`) with the hydrodynamic part of
    /// every cell's increment removed.
    fn collide(&self, f: &Field, form: FullForm, tau: f64) -> Field {
        let (decay, dt_phi) = if tau == self.cfg.dt {
            (&self.decay, &self.dt_phi)
        } else {
            (&self.half.0, &self.half.1)
        };
        let deltas: Vec<Vec<f64>> = (0..f.ncell())
            .into_par_iter()
            .map(|c| {
                let fc = f.cell(c);
                let mut delta: Vec<f64> = match form {
                    FullForm::Perturbation => {
                        let kf = Self::matvec(&self.k_matrix, fc);
                        let q = self.quadratic(fc, fc);
                        (0..fc.len())
                            .map(|j| (decay[j] - 1.0) * fc[j] + dt_phi[j] * (kf[j] + q[j]))
                            .collect()
                    }
                    FullForm::Full => {
                        let (gain, rate) = self.lattice.gain_loss(fc);
                        (0..fc.len())
                            .map(|j| {
                                let (e, dphi) = exp_rule(rate[j], tau);
                                (e - 1.0) * fc[j] + dphi * gain[j]
                            })
                            .collect()
                    }
                };
                let fl = self.fluid_coefficients(&delta);
                self.remove_fluid(&mut delta, &fl);
                delta
            })
            .collect();
        let mut out = f.clone();
        for (c, d) in deltas.iter().enumerate() {
            for (x, y) in out.cell_mut(c).iter_mut().zip(d) {
                *x += y;
            }
        }
        out
    }

    fn split_step(&self, f: &Field, form: FullForm) -> Field {
        let dt = self.cfg.dt;
        match self.cfg.splitting {
            Splitting::Lie => self.stepper.transport(&self.collide(f, form, dt)),
            Splitting::Strang => {
                let moved = self.stepper.transport(&self.collide(f, form, 0.5 * dt));
                self.collide(&moved, form, 0.5 * dt)
            }
        }
    }

    /// One step of the perturbed equation `d_t f + v . grad f = L f + Q(f, f)`.
    pub fn perturbation_step(&self, f: &Field) -> Field {
        self.split_step(f, FullForm::Perturbation)
    }

    /// One step of `d_t F + v . grad F = Q(F, F)` with the loss rate of `F` itself.
    pub fn full_step(&self, big_f: &Field) -> Field {
        self.split_step(big_f, FullForm::Full)
    }

    /// Direct reference solver over `[0, t_final]`.
    pub fn solve_full(&self, initial: &Field, form: FullForm) -> Result<FullSolution> {
        let steps = self.cfg.steps();
        let mut fields = Vec::with_capacity(steps + 1);
        fields.push(initial.clone());
        for n in 0..steps {
            let next = match form {
                FullForm::Full => self.full_step(&fields[n]),
                FullForm::Perturbation => self.perturbation_step(&fields[n]),
            };
            self.check_finite(&next, n + 1)?;
            fields.push(next);
        }
        let nv = self.grid.nv();
        let mut min_value = (f64::INFINITY, 0, 0, 0);
        if form == FullForm::Full {
            for (n, f) in fields.iter().enumerate() {
                for (k, &x) in f.data.iter().enumerate() {
                    if x < min_value.0 {
                        min_value = (x, n, k / nv, k % nv);
                    }
                }
            }
        }
        Ok(FullSolution {
            traj: Trajectory { dt: self.cfg.dt, fields },
            form,
            min_value,
        })
    }

    /// `max_n ||f^{n+1} - step(f^n)||_{L^infinity(m)} / sup_n ||f^n||`, the defect of a
    /// trajectory in the discrete perturbed equation.
    pub fn residual(&self, f: &Trajectory) -> f64 {
        let mw = self.cfg.weight.on_grid(&self.grid.velocity);
        let scale = f.fields.iter().map(|x| sup_weighted(x, &mw)).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let worst = f
            .fields
            .windows(2)
            .map(|w| sup_weighted(&w[1].sub(&self.perturbation_step(&w[0])), &mw))
            .fold(0.0, f64::max);
        worst / scale
    }

    /// Runs `solve_coupled` from `f0` with both inner starting rules and once from a
    /// perturbed `f0`, reporting the time-sup weighted distances relative to `sup ||f||`.
    pub fn uniqueness_probe(&self, f0: &Field, perturbation_scale: f64, seed: u64) -> Result<UniquenessReport> {
        self.check_small(f0)?;
        let m = self.cfg.weight;
        let tol = self.cfg.tol_fixed_point;
        let zero = self.with_config(SolverConfig {
            inner_start: InnerStart::Zero,
            ..self.cfg
        })?;
        let warm = self.with_config(SolverConfig {
            inner_start: InnerStart::Previous,
            ..self.cfg
        })?;
        let a = zero.solve_coupled(f0)?;
        let b = warm.solve_coupled(f0)?;
        let noise = microscopic_noise(&self.grid, &m, perturbation_scale * tol * self.weight_norm(f0), seed);
        let perturbed = f0.add(&noise);
        let c = zero.solve_coupled(&perturbed)?;
        let scale = a.f.sup_norm(&m).max(f64::MIN_POSITIVE);
        let order_distance = a.f.sup_distance(&b.f, &m) / scale;
        let perturbation_distance = a.f.sup_distance(&c.f, &m) / scale;
        let bound = 10.0 * perturbation_scale * tol;
        Ok(UniquenessReport {
            order_distance,
            perturbation_distance,
            divergence: order_distance.max(perturbation_distance),
            bound,
            pass: order_distance <= tol && perturbation_distance <= bound.max(tol),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// Distance between the two unperturbed runs with different inner starting rules.
    pub order_distance: f64,
    /// Distance between the unperturbed and the perturbed run.
    pub perturbation_distance: f64,
    pub divergence: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Outer iteration state of `solve_coupled` after `done` completed iterations.
#[derive(Serialize, Deserialize)]
struct OuterState {
    /// The solver configuration as JSON; tagged enums do not round-trip through bincode.
    cfg: String,
    ncell: usize,
    nv: usize,
    f0: Vec<f64>,
    done: usize,
    f1: Option<Vec<Vec<f64>>>,
    f2: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    inner: Vec<usize>,
    contraction: Vec<f64>,
    diffs: Vec<f64>,
    defect: f64,
}

fn checkpoint_error(path: &Path, reason: impl std::fmt::Display) -> KineticError {
    KineticError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

impl OuterState {
    fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| checkpoint_error(path, e))?;
        bincode::deserialize_from(BufReader::new(file)).map_err(|e| checkpoint_error(path, e))
    }

    /// Writes next to `path` and renames, so an interrupted save keeps the old state.
    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let file = File::create(&tmp).map_err(|e| checkpoint_error(&tmp, e))?;
        let mut w = BufWriter::new(file);
        bincode::serialize_into(&mut w, self).map_err(|e| checkpoint_error(&tmp, e))?;
        w.flush().map_err(|e| checkpoint_error(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| checkpoint_error(path, e))
    }
}

/// Seeded random field with zero hydrodynamic moments in every cell, scaled to
/// `||noise||_{L^infinity(m)} = size`.
pub fn microscopic_noise(grid: &Arc<PhaseGrid>, m: &Weight, size: f64, seed: u64) -> Field {
    let vg = &grid.velocity;
    let mw = m.on_grid(vg);
    let mut out = Field::zeros(grid.clone());
    if size == 0.0 {
        return out;
    }
    for c in 0..grid.ncell() {
        let mut rng = chain_rng(seed, c as u64);
        let raw: Vec<f64> = mw.iter().map(|w| (rng.gen::<f64>() - 0.5) / w).collect();
        let (_, micro) = project_pi_l(vg, &raw);
        out.cell_mut(c).copy_from_slice(&micro);
    }
    let n = sup_weighted(&out, &mw);
    out.scaled(size / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub c_hat: f64,
    pub lambda_hat: f64,
    /// `max |C e^{-lambda t} / value - 1|` over the fitted points.
    pub residual: f64,
    pub points: usize,
    pub warning: Option<String>,
}

/// Least-squares line through `(t, ln value)` for `t >= burn_in`.
pub fn decay_fit(series: &[(f64, f64)], burn_in: f64) -> Result<DecayFit> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut warning = None;
    for &(t, v) in series.iter().filter(|(t, _)| *t >= burn_in) {
        if !(v > 0.0) {
            warning = Some(format!("non-positive value at t = {t}; fitted the positive prefix"));
            break;
        }
        pts.push((t, v.ln()));
    }
    if pts.len() < 2 {
        return Err(KineticError::Precondition("decay fit needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm) * (p.0 - tm)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let residual = pts
        .iter()
        .map(|p| ((intercept + slope * p.0 - p.1).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(DecayFit {
        c_hat: intercept.exp(),
        lambda_hat: (-slope).max(0.0),
        residual,
        points: pts.len(),
        warning,
    })
}
