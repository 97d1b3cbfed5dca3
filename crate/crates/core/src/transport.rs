//! Semigroup of `G_nu = -v . grad_x - nu(v)` under specular reflection and
//! Maxwellian diffusion: pointwise characteristic evaluation, Monte-Carlo
//! rebound chains, and a semi-Lagrangian stepper on the phase grid.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conservation::ConservedBasis;
use crate::error::{KineticError, Result};
use crate::field::{Field, PhaseGrid};
use crate::geometry::{ChainKind, Domain, PhasePoint, ReboundChain, Terminal};
use crate::quadrature::{pairwise_sum, IntervalRule};
use crate::vec3::Vec3;
use crate::velocity::maxwellian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Specular,
    Diffusive,
}

/// `d sigma_x(v) = c_mu mu(v) |v . n(x)| dv` on the outgoing half-space of a wall normal.
#[derive(Clone, Debug)]
pub struct WallMeasure {
    pub normal: Vec3,
    pub c_mu: f64,
    t1: Vec3,
    t2: Vec3,
}

impl WallMeasure {
    pub fn new(normal: Vec3) -> Result<Self> {
        let n = normal
            .normalized()
            .ok_or_else(|| KineticError::invalid("normal", "must be nonzero"))?;
        let (t1, t2) = n.orthonormal_frame();
        Ok(WallMeasure {
            normal: n,
            c_mu: (2.0 * PI).sqrt(),
            t1,
            t2,
        })
    }

    /// Tangential components standard normal, normal component Rayleigh `sqrt(2 E)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let g1: f64 = StandardNormal.sample(rng);
        let g2: f64 = StandardNormal.sample(rng);
        let e: f64 = Exp1.sample(rng);
        let s = (2.0 * e).sqrt().max(f64::MIN_POSITIVE);
        self.normal * s + self.t1 * g1 + self.t2 * g2
    }

    /// Deterministic product rule for the half-space measure: Gauss-Legendre panels in
    /// the normal speed on `[0, 12]` and in each tangential component on `[-10, 10]`.
    pub fn quadrature(&self, per_axis_panels: usize) -> (Vec<Vec3>, Vec<f64>) {
        let normal = IntervalRule::composite(8, per_axis_panels, 0.0, 12.0);
        let tang = IntervalRule::composite(8, per_axis_panels, -10.0, 10.0);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (&s, &ws) in normal.nodes.iter().zip(&normal.weights) {
            for (&a, &wa) in tang.nodes.iter().zip(&tang.weights) {
                for (&b, &wb) in tang.nodes.iter().zip(&tang.weights) {
                    let v = self.normal * s + self.t1 * a + self.t2 * b;
                    nodes.push(v);
                    weights.push(ws * wa * wb * self.c_mu * maxwellian(v) * s);
                }
            }
        }
        (nodes, weights)
    }

    /// `1 / int_{v . n > 0} mu (v . n) dv` by the product rule.
    pub fn c_mu_by_quadrature(&self) -> f64 {
        let (nodes, w) = self.quadrature(12);
        let t: Vec<f64> = nodes.iter().zip(&w).map(|(_, w)| w / self.c_mu).collect();
        1.0 / pairwise_sum(&t)
    }
}

/// `e^{-nu(v) t} f0(X, V)` with `(X, V)` the backward specular characteristic.
pub fn semigroup_specular<N, F>(domain: &Domain, nu: &N, f0: &F, t: f64, x: Vec3, v: Vec3) -> Result<f64>
where
    N: Fn(Vec3) -> f64,
    F: Fn(Vec3, Vec3) -> f64,
{
    if t == 0.0 {
        return Ok(f0(x, v));
    }
    let chain = domain.trace_specular(t, x, v)?;
    let (xx, vv) = chain.reached_initial_plane().expect("specular chains always reach t = 0");
    Ok((-nu(v) * t).exp() * f0(xx, vv))
}

/// Backward diffusive chain: free flights, velocity redrawn from the wall measure at every hit.
pub fn sample_diffusive_chain<R: Rng + ?Sized>(
    domain: &Domain,
    t: f64,
    x: Vec3,
    v: Vec3,
    p_max: usize,
    rng: &mut R,
) -> Result<ReboundChain> {
    let origin = PhasePoint { t, x, v };
    let mut hits = Vec::new();
    let mut grazing_hits = 0;
    let (mut cx, mut cv, mut remaining) = (x, v, t);
    loop {
        let exit = domain.backward_exit_time(cx, cv)?;
        if exit.t >= remaining {
            return Ok(ReboundChain {
                origin,
                hits,
                terminal: Terminal::ReachedInitialPlane {
                    x: domain.wrap_periodic(cx - cv * remaining),
                    v: cv,
                },
                kind: ChainKind::Diffusive,
                grazing_hits,
            });
        }
        if exit.degenerate {
            grazing_hits += 1;
        }
        if hits.len() >= p_max {
            return Ok(ReboundChain {
                origin,
                hits,
                terminal: Terminal::Active(PhasePoint {
                    t: remaining,
                    x: cx,
                    v: cv,
                }),
                kind: ChainKind::Diffusive,
                grazing_hits,
            });
        }
        remaining -= exit.t;
        let xb = domain.wrap_periodic(exit.x);
        let wall = WallMeasure::new(domain.level_set_normal(xb))?;
        cv = wall.sample(rng);
        cx = xb;
        hits.push(PhasePoint {
            t: remaining,
            x: cx,
            v: cv,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    pub n_chains: usize,
    pub p_max: usize,
    pub seed: u64,
    /// Score only chains with at least one rebound.
    pub require_rebound: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            n_chains: 10_000,
            p_max: 64,
            seed: 0,
            require_rebound: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub active_fraction: f64,
}

impl DiffusiveEstimate {
    /// Bound on the discarded tail given `sup |f0| m^{-1}`.
    pub fn truncation_bound(&self, sup_f0_over_m: f64) -> f64 {
        sup_f0_over_m * self.active_fraction
    }
}

pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

fn chain_payload<N, F>(chain: &ReboundChain, nu: &N, f0: &F) -> Option<f64>
where
    N: Fn(Vec3) -> f64,
    F: Fn(Vec3, Vec3) -> f64,
{
    let (xx, vv) = chain.reached_initial_plane()?;
    // exponent sum over flights: (t_0 - t_1) with v, (t_1 - t_2) with v_1, ..., t_p with v_p
    let mut times = vec![chain.origin.t];
    let mut vels = vec![chain.origin.v];
    for h in &chain.hits {
        times.push(h.t);
        vels.push(h.v);
    }
    times.push(0.0);
    let mut expo = 0.0;
    for k in 0..vels.len() {
        expo += nu(vels[k]) * (times[k] - times[k + 1]);
    }
    let ratio = maxwellian(chain.origin.v) / maxwellian(vv);
    Some((-expo).exp() * ratio * f0(xx, vv))
}

/// Monte-Carlo estimate of `S_{G_nu}(t) f0 (x, v)` under Maxwellian diffusion.
pub fn semigroup_diffusive<N, F>(
    domain: &Domain,
    nu: &N,
    f0: &F,
    t: f64,
    x: Vec3,
    v: Vec3,
    opts: &ChainOptions,
) -> Result<DiffusiveEstimate>
where
    N: Fn(Vec3) -> f64 + Sync,
    F: Fn(Vec3, Vec3) -> f64 + Sync,
{
    if opts.n_chains == 0 {
        return Err(KineticError::invalid("n_chains", "must be at least 1"));
    }
    let exit = domain.backward_exit_time(x, v)?;
    if exit.t >= t {
        let value = if opts.require_rebound {
            0.0
        } else {
            (-nu(v) * t).exp() * f0(domain.wrap_periodic(x - v * t), v)
        };
        return Ok(DiffusiveEstimate {
            estimate: value,
            stderr: 0.0,
            active_fraction: 0.0,
        });
    }
    let results: Vec<Result<(f64, bool)>> = (0..opts.n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(opts.seed, k);
            let chain = sample_diffusive_chain(domain, t, x, v, opts.p_max, &mut rng)?;
            Ok(match chain_payload(&chain, nu, f0) {
                Some(p) => (p, false),
                None => (0.0, true),
            })
        })
        .collect();
    let mut payloads = Vec::with_capacity(opts.n_chains);
    let mut active = 0usize;
    for r in results {
        let (p, a) = r?;
        payloads.push(p);
        active += a as usize;
    }
    let n = payloads.len() as f64;
    let mean = pairwise_sum(&payloads) / n;
    let dev: Vec<f64> = payloads.iter().map(|p| (p - mean) * (p - mean)).collect();
    let var = if n > 1.0 { pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
    Ok(DiffusiveEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
        active_fraction: active as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub probability: f64,
    pub stderr: f64,
}

/// Fraction of diffusive chains still active after `p` rebounds within the window `t`.
pub fn escape_probability(
    domain: &Domain,
    t: f64,
    x: Vec3,
    v: Vec3,
    p: usize,
    n_chains: usize,
    seed: u64,
) -> Result<EscapeEstimate> {
    if p == 0 {
        return Err(KineticError::invalid("p", "must be at least 1"));
    }
    if n_chains == 0 {
        return Err(KineticError::invalid("n_chains", "must be at least 1"));
    }
    let flags: Vec<Result<bool>> = (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(seed, k);
            let chain = sample_diffusive_chain(domain, t, x, v, p, &mut rng)?;
            Ok(matches!(chain.terminal, Terminal::Active(_)))
        })
        .collect();
    let mut active = 0usize;
    for f in flags {
        active += f? as usize;
    }
    let pr = active as f64 / n_chains as f64;
    Ok(EscapeEstimate {
        probability: pr,
        stderr: (pr * (1.0 - pr) / n_chains as f64).sqrt(),
    })
}

/// Number of untilted draws behind each estimate of the tilt normalization.
const TILT_NORMALIZATION_DRAWS: usize = 32;

/// Exit time of the backward flight from wall point `xb` with a velocity drawn from the wall measure.
fn wall_flight<R: Rng + ?Sized>(domain: &Domain, wall: &WallMeasure, xb: Vec3, rng: &mut R) -> Result<(Vec3, f64)> {
    let u = wall.sample(rng);
    Ok((u, domain.backward_exit_time(xb, u)?.t))
}

/// Escape probability (as `escape_probability`) under exponential tilting of the flight
/// times: at every wall hit the velocity is drawn from the wall measure reweighted by
/// `e^{-theta tau}`, `tau` the flight time it produces, and the likelihood ratio
/// `M e^{theta tau}` is carried along, with `M = E[e^{-theta tau}]` estimated from
/// independent draws at the same wall point. Weights are bounded by `e^{theta t}` times
/// the product of the `M`, so small probabilities are resolved with few chains.
pub fn escape_probability_tilted(
    domain: &Domain,
    t: f64,
    x: Vec3,
    v: Vec3,
    p: usize,
    n_chains: usize,
    seed: u64,
    theta: f64,
) -> Result<EscapeEstimate> {
    if p == 0 {
        return Err(KineticError::invalid("p", "must be at least 1"));
    }
    if n_chains < 2 {
        return Err(KineticError::invalid("n_chains", "must be at least 2"));
    }
    if !(theta >= 0.0) {
        return Err(KineticError::invalid("theta", "must be non-negative"));
    }
    let first = domain.backward_exit_time(x, v)?;
    let values: Vec<Result<f64>> = (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(seed, k);
            let mut remaining = t - first.t;
            let mut xb = domain.wrap_periodic(first.x);
            let mut log_w = 0.0;
            for _ in 0..p {
                if remaining <= 0.0 {
                    return Ok(0.0);
                }
                let wall = WallMeasure::new(domain.level_set_normal(xb))?;
                let (u, tau) = if theta == 0.0 {
                    wall_flight(domain, &wall, xb, &mut rng)?
                } else {
                    let mut m = 0.0;
                    for _ in 0..TILT_NORMALIZATION_DRAWS {
                        m += (-theta * wall_flight(domain, &wall, xb, &mut rng)?.1).exp();
                    }
                    log_w += (m / TILT_NORMALIZATION_DRAWS as f64).ln();
                    loop {
                        let (u, tau) = wall_flight(domain, &wall, xb, &mut rng)?;
                        if rng.gen::<f64>() < (-theta * tau).exp() {
                            log_w += theta * tau;
                            break (u, tau);
                        }
                    }
                };
                remaining -= tau;
                xb = domain.wrap_periodic(xb - u * tau);
            }
            Ok(if remaining > 0.0 { log_w.exp() } else { 0.0 })
        })
        .collect();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for v in values {
        let v = v?;
        sum += v;
        sum2 += v * v;
    }
    let n = n_chains as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(EscapeEstimate {
        probability: mean,
        stderr: (var / n).sqrt(),
    })
}

/// Tilt for `escape_probability_tilted` that makes `p` flights fill the time left after
/// the first one on average, from a pilot sample of flight times at the wall points
/// visited by untilted chains. Zero when untilted chains already get there.
pub fn escape_tilt(domain: &Domain, t: f64, x: Vec3, v: Vec3, p: usize, seed: u64) -> Result<f64> {
    let first = domain.backward_exit_time(x, v)?;
    let budget = t - first.t;
    if budget <= 0.0 {
        return Ok(0.0);
    }
    let mut rng = chain_rng(seed, u64::MAX);
    let mut taus = Vec::new();
    let mut xb = domain.wrap_periodic(first.x);
    for _ in 0..4000 {
        let wall = WallMeasure::new(domain.level_set_normal(xb))?;
        let (u, tau) = wall_flight(domain, &wall, xb, &mut rng)?;
        taus.push(tau);
        xb = domain.wrap_periodic(xb - u * tau);
    }
    let tilted_mean = |theta: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for &tau in &taus {
            let w = (-theta * tau).exp();
            num += tau * w;
            den += w;
        }
        num / den
    };
    let target = budget / p as f64;
    if tilted_mean(0.0) <= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while tilted_mean(hi) > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(hi);
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tilted_mean(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Order of the spatial interpolation at slab footpoints; bodies always use trilinear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialInterpolation {
    Linear,
    Cubic,
}

/// One contribution to a stepped value: either an old field value or a wall flux.
#[derive(Clone, Copy, Debug)]
enum Source {
    Node(u32),
    /// Re-emitted value of a wall at the start of the step.
    Wall(u32),
    /// Re-emitted value of a wall at the end of the step.
    WallNext(u32),
}

/// Re-emission rule of one diffusive wall: `Phi = sum_u e(u) f(x_wall, u)` over outgoing
/// `u`, with `e(u) = |u . n| h^3 / sum(mu |u . n|_+ h^3)`.
#[derive(Clone, Debug)]
struct WallRule {
    cell: usize,
    /// `(phase node, weight)` giving `Phi` at the start of the step.
    now: Vec<(u32, f64)>,
    /// `(phase node, velocity node, weight)` giving `Phi` at the end of the step from
    /// the outgoing characteristics; `None` holds `Phi` fixed over the step.
    next: Option<Vec<(u32, u32, f64)>>,
}

/// Semi-Lagrangian stepper for `partial_t f + v . grad_x f = 0` with wall conditions,
/// followed by the absorption factor `e^{-nu dt}`.
///
/// The backward characteristic of every phase node is traced once over `dt`; the
/// foot value is interpolated in space (Lagrange in the slab, unfolded by mirror
/// images for specular walls; trilinear in bodies). Footpoints
/// reached after a specular reflection carry an off-lattice velocity, where `f / mu`
/// is interpolated trilinearly. Characteristics that meet a diffusive wall take the
/// re-emitted value `c_mu mu(v) Phi` at the time they leave the wall. In the slab
/// `Phi` is the flux of the outgoing traces extrapolated to the wall, linear in time
/// over the step; in bodies it is the outgoing flux of the nearest wall cell. A global correction shaped like the conserved part of the field
/// restores the moments the interpolation loses (mass, and energy for specular walls).
#[derive(Clone, Debug)]
pub struct TransportStepper {
    pub grid: Arc<PhaseGrid>,
    pub bc: BoundaryCondition,
    pub dt: f64,
    pub conservative: bool,
    /// `dt * v_max` exceeds the domain diameter.
    pub cfl_warning: bool,
    offsets: Vec<u32>,
    sources: Vec<(Source, f64)>,
    /// Per phase node: the absorption time, shorter than `dt` when the
    /// characteristic starts on a diffusive wall inside the step.
    flight: Vec<f64>,
    walls: Vec<WallRule>,
    invariants: ConservedBasis,
}

impl TransportStepper {
    pub fn new(grid: Arc<PhaseGrid>, bc: BoundaryCondition, dt: f64) -> Result<Self> {
        Self::with_interpolation(grid, bc, dt, SpatialInterpolation::Cubic)
    }

    pub fn with_interpolation(
        grid: Arc<PhaseGrid>,
        bc: BoundaryCondition,
        dt: f64,
        interpolation: SpatialInterpolation,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(KineticError::invalid("dt", "must be positive"));
        }
        let space = &grid.space;
        let vg = &grid.velocity;
        let domain = &space.domain;
        let (lo, hi) = domain.bounding_box();
        let diameter = if domain.is_slab() { 1.0 } else { (hi - lo).norm() };
        let cfl_warning = dt * vg.spec.v_max > diameter;
        let nv = vg.len();

        // wall cells and their discrete re-emission weights
        let mut walls = Vec::new();
        if bc == BoundaryCondition::Diffusive {
            let wall_cells: Vec<(usize, Vec3)> = if domain.is_slab() {
                vec![(0, -Vec3::e(0)), (space.len() - 1, Vec3::e(0))]
            } else {
                space
                    .boundary_cells
                    .iter()
                    .map(|&c| (c, domain.level_set_normal(space.centers[c])))
                    .collect()
            };
            let width = match interpolation {
                SpatialInterpolation::Linear => 2,
                SpatialInterpolation::Cubic => 4,
            };
            for (c, n) in wall_cells {
                let flux: Vec<f64> = vg
                    .nodes
                    .iter()
                    .map(|u| vg.weight * u.dot(&n).max(0.0))
                    .collect();
                let norm: f64 = flux.iter().zip(&vg.mu).map(|(a, b)| a * b).sum();
                let emit: Vec<f64> = flux.iter().map(|a| a / norm).collect();
                let mut rule = WallRule {
                    cell: c,
                    now: Vec::new(),
                    next: None,
                };
                if domain.is_slab() {
                    // outgoing traces extrapolated to the wall, and traced back over dt
                    let xw = if n.x() > 0.0 { 1.0 } else { 0.0 };
                    let trace = cell_window(space.len(), xw, width);
                    let mut next = Vec::new();
                    for (j, e) in emit.iter().enumerate().filter(|(_, e)| **e > 0.0) {
                        for &(m, w) in &trace {
                            rule.now.push(((m * nv + j) as u32, e * w));
                        }
                        let y = (xw - vg.nodes[j].x() * dt).clamp(0.0, 1.0);
                        for (m, w) in cell_window(space.len(), y, width) {
                            next.push(((m * nv + j) as u32, j as u32, e * w));
                        }
                    }
                    rule.next = Some(next);
                } else {
                    for (j, e) in emit.iter().enumerate().filter(|(_, e)| **e > 0.0) {
                        rule.now.push(((c * nv + j) as u32, *e));
                    }
                }
                walls.push(rule);
            }
        }
        let nearest_wall = |x: Vec3| -> u32 {
            if domain.is_slab() {
                return if x.x() < 0.5 { 0 } else { 1 };
            }
            let mut best = (f64::INFINITY, 0u32);
            for (w, rule) in walls.iter().enumerate() {
                let d = (space.centers[rule.cell] - x).norm_sq();
                if d < best.0 {
                    best = (d, w as u32);
                }
            }
            best.1
        };

        let mut offsets = vec![0u32];
        let mut sources: Vec<(Source, f64)> = Vec::new();
        let mut flight = Vec::with_capacity(space.len() * nv);
        for c in 0..space.len() {
            let x = space.centers[c];
            for j in 0..nv {
                let v = vg.nodes[j];
                let mut tau = dt;
                if domain.is_slab() {
                    tau = slab_sources(&grid, bc, interpolation, dt, c, j, &mut sources);
                } else {
                    match bc {
                        BoundaryCondition::Specular => {
                            let chain = domain.trace_specular(dt, x, v)?;
                            let (xx, vv) = chain.reached_initial_plane().unwrap();
                            let st = space.stencil(xx);
                            if chain.rebounds() == 0 {
                                for (sc, w) in st {
                                    sources.push((Source::Node((sc * nv + j) as u32), w));
                                }
                            } else {
                                let vst = velocity_stencil(&grid, vv);
                                for &(sc, w) in &st {
                                    for &(sj, wv) in &vst {
                                        sources.push((Source::Node((sc * nv + sj) as u32), w * wv));
                                    }
                                }
                            }
                        }
                        BoundaryCondition::Diffusive => {
                            let exit = domain.backward_exit_time(x, v)?;
                            if exit.t >= dt {
                                for (sc, w) in space.stencil(x - v * dt) {
                                    sources.push((Source::Node((sc * nv + j) as u32), w));
                                }
                            } else {
                                let w = nearest_wall(exit.x);
                                sources.push((Source::Wall(w), vg.mu[j]));
                                tau = exit.t;
                            }
                        }
                    }
                }
                offsets.push(sources.len() as u32);
                flight.push(tau);
            }
        }
        Ok(TransportStepper {
            grid: grid.clone(),
            bc,
            dt,
            conservative: false,
            cfl_warning,
            offsets,
            sources,
            flight,
            walls,
            invariants: ConservedBasis::new(grid.clone(), bc),
        })
    }

    /// Pure transport over `dt` (no absorption).
    pub fn transport(&self, f: &Field) -> Field {
        self.advance(f, None)
    }

    /// Transport; with `nu`, the outgoing wall traces at the end of the step carry
    /// their own absorption.
    fn advance(&self, f: &Field, nu: Option<&[f64]>) -> Field {
        let nv = self.grid.nv();
        let wall_flux: Vec<f64> = self
            .walls
            .iter()
            .map(|r| r.now.iter().map(|&(i, w)| w * f.data[i as usize]).sum())
            .collect();
        let wall_next: Vec<f64> = self
            .walls
            .iter()
            .zip(&wall_flux)
            .map(|(r, now)| match &r.next {
                None => *now,
                Some(next) => next
                    .iter()
                    .map(|&(i, j, w)| {
                        let decay = nu.map_or(1.0, |nu| (-nu[j as usize] * self.dt).exp());
                        w * decay * f.data[i as usize]
                    })
                    .sum(),
            })
            .collect();
        let data: Vec<f64> = (0..self.offsets.len() - 1)
            .into_par_iter()
            .map(|k| {
                let (a, b) = (self.offsets[k] as usize, self.offsets[k + 1] as usize);
                self.sources[a..b]
                    .iter()
                    .map(|&(s, w)| match s {
                        Source::Node(i) => w * f.data[i as usize],
                        Source::Wall(i) => w * wall_flux[i as usize],
                        Source::WallNext(i) => w * wall_next[i as usize],
                    })
                    .sum()
            })
            .collect();
        debug_assert_eq!(data.len(), f.ncell() * nv);
        let mut out = Field {
            grid: f.grid.clone(),
            data,
        };
        if self.conservative {
            let target = self.invariants.moments(f);
            self.invariants.restore(&mut out, &target);
        }
        out
    }

    /// Transport over `dt` followed by `e^{-nu dt}` with `nu` given per velocity node.
    pub fn step(&self, f: &Field, nu: &[f64]) -> Field {
        let mut out = self.advance(f, Some(nu));
        let decay: Vec<f64> = nu.iter().map(|n| (-n * self.dt).exp()).collect();
        let nv = decay.len();
        for (k, x) in out.data.iter_mut().enumerate() {
            let tau = self.flight[k];
            *x *= if tau < self.dt { (-nu[k % nv] * tau).exp() } else { decay[k % nv] };
        }
        out
    }
}

fn velocity_stencil(grid: &PhaseGrid, v: Vec3) -> Vec<(usize, f64)> {
    // weights of the trilinear rule for f / mu at v, rescaled by mu(v) / mu_node
    let vg = &grid.velocity;
    let mut st = Vec::with_capacity(8);
    let mut total = 0.0;
    let n = vg.spec.n_per_dim as i32;
    let mut base = [0i32; 3];
    let mut frac = [0.0; 3];
    for k in 0..3 {
        let s = ((v[k] + vg.spec.v_max) / vg.h - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (s.floor() as i32).min(n - 2);
        base[k] = i0;
        frac[k] = s - i0 as f64;
    }
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
        if let Some(idx) = vg.index_of(a) {
            st.push((idx, w));
            total += w;
        }
    }
    if total < 1e-12 {
        return Vec::new();
    }
    let mv = vg.mu_at(v);
    st.into_iter().map(|(i, w)| (i, w / total * mv / vg.mu[i])).collect()
}

/// Lagrange weights at `y` on the `width` slab cell centres nearest to it.
fn cell_window(n: usize, y: f64, width: usize) -> Vec<(usize, f64)> {
    let width = width.min(n);
    let dx = 1.0 / n as f64;
    let k = ((y / dx - 0.5).floor().max(0.0) as usize).min(n - 1);
    let first = k.saturating_sub(width / 2 - 1).min(n - width);
    let p: Vec<f64> = (first..first + width).map(|m| (m as f64 + 0.5) * dx).collect();
    (first..first + width).zip(lagrange_weights(&p, y)).collect()
}

/// Lagrange weights at `y` for the nodes `p`.
fn lagrange_weights(p: &[f64], y: f64) -> Vec<f64> {
    (0..p.len())
        .map(|a| {
            (0..p.len())
                .filter(|&b| b != a)
                .map(|b| (y - p[b]) / (p[a] - p[b]))
                .product()
        })
        .collect()
}

/// Slab sources, returning the absorption time: Lagrange interpolation in the normal coordinate, unfolded by mirror
/// images for specular walls. For diffusive walls the re-emitted wall value enters
/// as an extra node at the wall for incoming velocities.
fn slab_sources(
    grid: &PhaseGrid,
    bc: BoundaryCondition,
    interp: SpatialInterpolation,
    dt: f64,
    c: usize,
    j: usize,
    out: &mut Vec<(Source, f64)>,
) -> f64 {
    let vg = &grid.velocity;
    let nv = vg.len();
    let n = grid.space.len();
    let dx = 1.0 / n as f64;
    let v1 = vg.nodes[j].x();
    let y = (c as f64 + 0.5) * dx - v1 * dt;
    let width = match interp {
        SpatialInterpolation::Linear => 2,
        SpatialInterpolation::Cubic => 4,
    };
    match bc {
        BoundaryCondition::Specular => {
            // unfolded sample m sits at (m + 1/2) dx; m in [0, n) maps to itself,
            // the mirror images alternate orientation with period 2n
            let s = y / dx - 0.5;
            let m0 = s.floor() as i64;
            let first = m0 - (width as i64 / 2 - 1);
            let nodes: Vec<f64> = (0..width).map(|k| (first + k as i64) as f64).collect();
            let jr = vg.reflected_axis(j, 0);
            for (k, w) in lagrange_weights(&nodes, s).into_iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let r = (first + k as i64).rem_euclid(2 * n as i64) as usize;
                let (cell, node) = if r < n { (r, j) } else { (2 * n - 1 - r, jr) };
                out.push((Source::Node((cell * nv + node) as u32), w));
            }
        }
        BoundaryCondition::Diffusive => {
            let mu = vg.mu[j];
            let x = (c as f64 + 0.5) * dx;
            // the characteristic leaves the wall at t_n + dt - s; Phi is linear in time over the step
            let wall = |w: u32, s: f64, out: &mut Vec<(Source, f64)>| {
                out.push((Source::Wall(w), mu * s / dt));
                out.push((Source::WallNext(w), mu * (1.0 - s / dt)));
                s
            };
            if y <= 0.0 {
                return wall(0, x / v1, out);
            }
            if y >= 1.0 {
                return wall(1, (1.0 - x) / -v1, out);
            }
            // support points: the wall a particle with this velocity leaves from, then cell centres
            let mut pts: Vec<(f64, Source, f64)> = Vec::with_capacity(n + 1);
            if v1 > 0.0 {
                pts.push((0.0, Source::Wall(0), mu));
            }
            for m in 0..n {
                pts.push(((m as f64 + 0.5) * dx, Source::Node((m * nv + j) as u32), 1.0));
            }
            if v1 < 0.0 {
                pts.push((1.0, Source::Wall(1), mu));
            }
            let k = pts.partition_point(|p| p.0 <= y).saturating_sub(1);
            let first = k.saturating_sub(width / 2 - 1).min(pts.len() - width);
            let window = &pts[first..first + width];
            let p: Vec<f64> = window.iter().map(|q| q.0).collect();
            for (w, q) in lagrange_weights(&p, y).into_iter().zip(window) {
                if w != 0.0 {
                    out.push((q.1, w * q.2));
                }
            }
        }
    }
    dt
}
