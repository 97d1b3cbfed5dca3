//! End-to-end acceptance suite. Every check prints one line with its value and bound.

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use kinetic::field::{Field, PhaseGrid};
use kinetic::geometry::{specular_reflect, Domain, DomainKind};
use kinetic::harness::{
    check_conservation, check_lower_bound, delta_ladder, diffusive_comparison, diffusive_decay_series, escape_sweep,
    initial_perturbation, max_increase, nu_zero, specular_semigroup_summary, tail_shape, with_maxwellian, CheckRecord,
    ComparisonSetup, InitialProfile,
};
use kinetic::kernels::{collision_invariants, kq_star, phi_q, CollisionModel, Exponent, LatticeCollision, SplitOperator};
use kinetic::solver::{decay_fit, CoupledSolution, FullForm, Solver, SolverConfig};
use kinetic::transport::{BoundaryCondition, WallMeasure};
use kinetic::velocity::{VelocityGrid, VelocityGridSpec};
use kinetic::weights::Weight;
use kinetic::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: u32, checks: &[CheckRecord]) {
    for c in checks {
        println!("criterion {criterion:>2} {c}");
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.to_string()).collect();
    assert!(failed.is_empty(), "criterion {criterion} failed: {failed:?}");
}

fn runtime(name: &str, elapsed: Duration, budget_s: f64) -> CheckRecord {
    CheckRecord::at_most(&format!("{name}_seconds"), elapsed.as_secs_f64(), budget_s)
}

fn velocity(n: usize) -> Arc<VelocityGrid> {
    Arc::new(VelocityGrid::new(VelocityGridSpec { n_per_dim: n, v_max: 6.0 }).unwrap())
}

fn lattice(n: usize) -> Arc<LatticeCollision> {
    Arc::new(LatticeCollision::new(&CollisionModel::hard_spheres(), velocity(n)))
}

fn solver(kind: DomainKind, cells: usize, lat: &Arc<LatticeCollision>, cfg: SolverConfig) -> Solver {
    let grid = PhaseGrid::from_kind(kind, cells, lat.grid.clone()).unwrap();
    Solver::new(grid, lat.clone(), cfg).unwrap()
}

fn unit_ball() -> DomainKind {
    DomainKind::Ball { center: Vec3::ZERO, radius: 1.0 }
}

// ---------------------------------------------------------------------------

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
fn criterion_01_geometry_oracles() {
    let start = Instant::now();
    let mut involution: f64 = 0.0;
    let mut speed: f64 = 0.0;
    let mut exit: f64 = 0.0;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = match seed % 3 {
            0 => unit_ball(),
            1 => DomainKind::Ellipsoid {
                center: Vec3::new(rng.gen_range(-1.0..1.0), 0.0, 0.5),
                semi_axes: Vec3::new(rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)),
            },
            _ => DomainKind::Slab,
        };
        let d = Domain::new(kind).unwrap();
        let (lo, hi) = d.bounding_box();
        let x = loop {
            let x = Vec3::new(rng.gen_range(lo.x()..hi.x()), rng.gen_range(lo.y()..hi.y()), rng.gen_range(lo.z()..hi.z()));
            if d.xi(x).0 < -1e-3 {
                break x;
            }
        };
        let v = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        if d.is_slab() && v.x().abs() < 1e-3 {
            continue;
        }
        let e = d.backward_exit_time(x, v).unwrap();
        exit = exit.max((e.t - bisection_exit(&d, x, v)).abs() / e.t.max(1.0));
        let n = d.outward_normal(e.x).unwrap();
        let r = specular_reflect(n, v);
        involution = involution.max((specular_reflect(n, r) - v).norm());
        speed = speed.max((r.norm() - v.norm()).abs());
    }
    verdict(
        1,
        &[
            CheckRecord::at_most("reflection_involution", involution, 1e-10),
            CheckRecord::at_most("speed_preservation", speed, 1e-10),
            CheckRecord::at_most("exit_time_vs_bisection", exit, 1e-10),
            runtime("geometry", start.elapsed(), 10.0),
        ],
    );
}

#[test]
fn criterion_02_collision_invariants() {
    let start = Instant::now();
    let lat = lattice(12);
    let g = &lat.grid;
    let l2 = |f: &[f64]| g.integrate(&f.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
    let mut moments: f64 = 0.0;
    let mut dissipation = f64::NEG_INFINITY;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = g.mu.iter().map(|m| m * rng.gen_range(-1.0..1.0) + 0.1 * m.sqrt() * rng.gen_range(-1.0..1.0)).collect();
        let q = lat.q_bilinear(&f, &f);
        let (m, p, e) = g.moments(&q);
        let scale = l2(&f).powi(2);
        moments = moments.max(m.abs().max(p.x().abs()).max(p.y().abs()).max(p.z().abs()).max(e.abs()) / scale);
        let lf = lat.linear_l(&f);
        dissipation = dissipation.max(lat.mu_inner(&lf, &f));
    }
    let mut kernel: f64 = 0.0;
    let mu = g.mu.clone();
    kernel = kernel.max(lat.linear_l(&mu).iter().fold(0.0f64, |a, x| a.max(x.abs())) / l2(&mu));
    for phi in collision_invariants(g) {
        let f: Vec<f64> = phi.iter().zip(&g.mu).map(|(a, b)| a * b).collect();
        kernel = kernel.max(lat.linear_l(&f).iter().fold(0.0f64, |a, x| a.max(x.abs())) / l2(&f));
    }
    verdict(
        2,
        &[
            CheckRecord::at_most("q_moments_over_l2_squared", moments, 1e-5),
            CheckRecord::at_most("l_annihilates_mu_and_invariants", kernel, 1e-5),
            CheckRecord::at_most("dissipation", dissipation, 1e-8),
            runtime("collision", start.elapsed(), 300.0),
        ],
    );
}

#[test]
fn criterion_03_formula_oracles() {
    let hs = CollisionModel::hard_spheres();
    let c_mu = WallMeasure::new(Vec3::new(0.3, -1.0, 0.2)).unwrap().c_mu_by_quadrature();
    let k_inf = kq_star(Exponent::Infinity, hs.gamma, hs.b_inf, hs.l_b).unwrap();
    let k_one = kq_star(Exponent::One, hs.gamma, hs.b_inf, hs.l_b).unwrap();
    let phi_inf = phi_q(Exponent::Infinity, 10.0, hs.gamma, hs.b_inf, hs.l_b).unwrap();
    let phi_one = phi_q(Exponent::One, 10.0, hs.gamma, hs.b_inf, hs.l_b).unwrap();
    verdict(
        3,
        &[
            CheckRecord::at_most("c_mu_quadrature_error", (c_mu - (2.0 * std::f64::consts::PI).sqrt()).abs(), 1e-8),
            CheckRecord::at_most("k_star_infinity_error", (k_inf - 6.0).abs(), 1e-12),
            CheckRecord::at_most("k_star_one_error", (k_one - 2.0).abs(), 1e-12),
            CheckRecord::at_most("phi_infinity_10_error", (phi_inf - 0.5).abs(), 1e-12),
            CheckRecord::at_most("phi_one_10_error", (phi_one - 1.0 / 3.0).abs(), 1e-12),
        ],
    );
}

#[test]
fn criterion_04_splitting_exactness() {
    let lat = lattice(12);
    let g = &lat.grid;
    let mut worst: f64 = 0.0;
    let mut outside: f64 = 0.0;
    let mut radius: f64 = 0.0;
    let mut max_supported: f64 = 0.0;
    for (k, delta) in [0.4, 0.2].into_iter().enumerate() {
        let s = SplitOperator::new(&lat, delta).unwrap();
        radius = radius.max((s.r_delta - 2.0 / delta).abs());
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * k as u64 + seed);
            let h: Vec<f64> = g.mu.iter().map(|m| m.sqrt() * rng.gen_range(-1.0..1.0)).collect();
            let lhs = s.apply_l(&h);
            let rhs: Vec<f64> = lat.q_bilinear(&g.mu, &h).iter().map(|x| 2.0 * x).collect();
            let scale = rhs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            worst = worst.max(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
            for (v, a) in g.nodes.iter().zip(s.apply_a(&h)) {
                if v.norm() > 2.0 / delta {
                    outside = outside.max(a.abs());
                } else if a != 0.0 {
                    max_supported = max_supported.max(v.norm());
                }
            }
        }
    }
    verdict(
        4,
        &[
            CheckRecord::at_most("a_plus_b2_minus_nu_vs_2q_mu", worst, 1e-9),
            CheckRecord::at_most("a_outside_radius", outside, 0.0),
            CheckRecord::at_most("radius_minus_two_over_delta", radius, 0.0),
            CheckRecord::above("largest_supported_speed", max_supported, 0.0),
        ],
    );
}

#[test]
fn criterion_05_delta_trend() {
    let model = CollisionModel::hard_spheres();
    let lat = LatticeCollision::new(&model, velocity(12));
    let rows = delta_ladder(
        &model,
        &lat,
        &[0.4, 0.2, 0.1, 0.05],
        &Weight::Polynomial { k: 10.0 },
        &Weight::StretchExp { kappa: 0.5, alpha: 1.0 },
        8.0,
    )
    .unwrap();
    for r in &rows {
        println!(
            "criterion  5 delta {:<5} polynomial {:.4e} stretch {:.4e} tilde {:.4e} phi {:.4}",
            r.delta, r.polynomial, r.stretch, r.tilde, r.phi
        );
    }
    let (first, last) = (rows[0], rows[3]);
    verdict(
        5,
        &[
            CheckRecord::at_most("polynomial_max_increase", max_increase(rows.iter().map(|r| r.polynomial)), 0.0),
            CheckRecord::at_most("stretch_max_increase", max_increase(rows.iter().map(|r| r.stretch)), 0.0),
            CheckRecord::at_most("stretch_at_0.05", last.stretch, 0.5 * first.stretch),
            CheckRecord::at_most("polynomial_at_0.05", last.polynomial, 0.6),
            CheckRecord::at_most("tilde_at_0.05", last.tilde, 0.5 * first.tilde),
        ],
    );
}

#[test]
fn criterion_06_specular_semigroup() {
    let model = CollisionModel::hard_spheres();
    let times = [0.5, 1.0, 2.0, 4.0];
    let mut checks = Vec::new();
    for (name, domain) in [("ball", Domain::unit_ball()), ("slab", Domain::slab())] {
        let s = specular_semigroup_summary(&domain, &model, &times, 1000, 6);
        for (t, r) in &s.decay_ratio {
            checks.push(CheckRecord::at_most(&format!("{name}_decay_ratio_t{t}"), *r, 1.0));
        }
        checks.push(CheckRecord::at_most(&format!("{name}_semigroup_law"), s.semigroup_defect, 1e-8));
        if let Some(o) = s.oracle_defect {
            checks.push(CheckRecord::at_most(&format!("{name}_closed_form"), o, 1e-10));
        }
        println!("criterion  6 {name}: {} probes, {} grazing evaluations skipped", s.probed, s.skipped);
    }
    verdict(6, &checks);
}

#[test]
fn criterion_07_diffusive_semigroup() {
    let model = CollisionModel::hard_spheres();
    let nu0 = nu_zero(&model);
    let rows = diffusive_comparison(&model, &ComparisonSetup { seed: 7, ..ComparisonSetup::default() }).unwrap();
    let worst = rows.iter().max_by(|a, b| a.ratio().total_cmp(&b.ratio())).unwrap();
    println!(
        "criterion  7 worst probe: x1 = {:.4}, v = {:?}, mc = {:.6e} +- {:.1e}, stepped = {:.6e}, corrected = {:.6e}",
        worst.x1, worst.v, worst.monte_carlo, worst.stderr, worst.coarse, worst.corrected
    );
    let series = diffusive_decay_series(&model, VelocityGridSpec::default(), 32, 0.01, 6.0, &Weight::Polynomial { k: 10.0 }).unwrap();
    let fit = decay_fit(&series, 1.0).unwrap();
    let sweep = escape_sweep(&Domain::unit_ball(), 10.0, Vec3::ZERO, Vec3::new(1.0, 0.3, -0.2), &[4, 8, 16, 32], 20_000, 7).unwrap();
    for (p, theta, e) in &sweep {
        println!("criterion  7 escape p = {p:>2} (tilt {theta:.3}): {:.4e} +- {:.1e}", e.probability, e.stderr);
    }
    let est: Vec<_> = sweep.iter().map(|(p, _, e)| (*p, *e)).collect();
    let shape = tail_shape(&est);
    verdict(
        7,
        &[
            CheckRecord::at_most("mc_vs_stepped_over_tolerance", worst.ratio(), 1.0),
            CheckRecord::at_least("weighted_decay_rate", fit.lambda_hat, 0.8 * nu0),
            CheckRecord::at_most("escape_increase_beyond_3_stderr", shape.max_increase, 0.0),
            CheckRecord::above("escape_at_32", est[3].1.probability, 0.0),
            CheckRecord::at_most("log_tail_slope_increase", shape.max_slope_increase, shape.slope_tolerance),
            CheckRecord::at_most("log_tail_last_slope", *shape.slopes.last().unwrap(), 0.0),
        ],
    );
}

#[test]
fn criterion_08_conservation() {
    let lat = lattice(8);
    let mut checks = Vec::new();
    let cfg = SolverConfig { t_final: 1.0, ..SolverConfig::default() };
    for (name, kind, cells, bc) in [
        ("slab_specular", DomainKind::Slab, 8, BoundaryCondition::Specular),
        ("slab_diffusive", DomainKind::Slab, 8, BoundaryCondition::Diffusive),
        ("ball_specular", unit_ball(), 6, BoundaryCondition::Specular),
        ("ball_diffusive", unit_ball(), 6, BoundaryCondition::Diffusive),
    ] {
        let s = solver(kind, cells, &lat, SolverConfig { bc, ..cfg });
        let mu = Field::maxwellian(s.grid.clone());
        let f0 = initial_perturbation(&s.grid, &s.cfg.weight, 1e-2, InitialProfile::Modulated);
        let sol = s.solve_full(&mu.add(&f0), FullForm::Full).unwrap();
        let d = check_conservation(&sol.traj, bc);
        checks.push(CheckRecord::at_most(&format!("{name}_mass_drift_per_time"), d.mass / cfg.t_final, 1e-5));
        if bc == BoundaryCondition::Specular {
            checks.push(CheckRecord::at_most(&format!("{name}_energy_drift"), d.energy.unwrap(), 1e-4));
            for (inv, v) in &d.angular_momentum {
                checks.push(CheckRecord::at_most(&format!("{name}_{inv}_drift"), *v, 1e-4));
            }
        }
    }
    for (name, kind, cells, bc) in [
        ("slab_specular", DomainKind::Slab, 8, BoundaryCondition::Specular),
        ("ball_diffusive", unit_ball(), 6, BoundaryCondition::Diffusive),
    ] {
        let s = solver(kind, cells, &lat, SolverConfig { bc, t_final: 5.0, ..cfg });
        let mu = Field::maxwellian(s.grid.clone());
        let sol = s.solve_full(&mu, FullForm::Full).unwrap();
        let dev = sol.traj.fields.iter().map(|f| f.sub(&mu).max_abs()).fold(0.0, f64::max) / mu.max_abs();
        checks.push(CheckRecord::at_most(&format!("{name}_maxwellian_deviation_t5"), dev, 1e-10));
    }
    verdict(8, &checks);
}

struct NonlinearRun {
    solver: Solver,
    f0: Field,
    sol: CoupledSolution,
    elapsed: Duration,
}

/// Slab, hard spheres, `m = <v>^10`, `||f0|| = 1e-2`, on 32 cells x 12^3 velocities.
fn nonlinear_run() -> &'static NonlinearRun {
    static RUN: OnceLock<NonlinearRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let lat = lattice(12);
        let s = solver(DomainKind::Slab, 32, &lat, SolverConfig::default());
        let f0 = initial_perturbation(&s.grid, &s.cfg.weight, 1e-2, InitialProfile::Homogeneous);
        let sol = s.solve_coupled(&f0).unwrap();
        NonlinearRun {
            solver: s,
            f0,
            sol,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_09_nonlinear_decay() {
    let run = nonlinear_run();
    let m = run.solver.cfg.weight;
    let norm0 = run.solver.weight_norm(&run.f0);
    let fit = decay_fit(&run.sol.f.norm_series(&m), 0.2).unwrap();
    let nu0 = nu_zero(&CollisionModel::hard_spheres());
    println!(
        "criterion  9 outer differences {:?}, inner iterations {:?}, contraction {:?}",
        run.sol.outer_differences, run.sol.inner_iterations, run.sol.contraction
    );
    verdict(
        9,
        &[
            CheckRecord::at_most("initial_norm_error", (norm0 - 1e-2).abs(), 1e-15),
            CheckRecord::at_most("outer_iterations", run.sol.outer_iterations as f64, 10.0),
            CheckRecord::above("fitted_rate", fit.lambda_hat, 0.3 * nu0),
            CheckRecord::at_most("sup_norm_over_initial", run.sol.f.sup_norm(&m) / norm0, 3.0),
            runtime("nonlinear", run.elapsed, 1800.0),
        ],
    );
}

#[test]
fn criterion_10_coupled_vs_direct() {
    let lat = lattice(8);
    let mut checks = Vec::new();
    for bc in [BoundaryCondition::Specular, BoundaryCondition::Diffusive] {
        let s = solver(DomainKind::Slab, 8, &lat, SolverConfig { bc, ..SolverConfig::default() });
        let m = s.cfg.weight;
        let f0 = initial_perturbation(&s.grid, &m, 1e-2, InitialProfile::Modulated);
        let coupled = s.solve_coupled(&f0).unwrap();
        let direct = s.solve_full(&f0, FullForm::Perturbation).unwrap();
        let d = coupled.f.sup_distance(&direct.traj, &m) / coupled.f.sup_norm(&m);
        checks.push(CheckRecord::at_most(&format!("{bc:?}_relative_distance").to_lowercase(), d, 2.0 * s.cfg.tol_fixed_point));
    }
    verdict(10, &checks);
}

#[test]
fn criterion_11_uniqueness() {
    let lat = lattice(8);
    let s = solver(DomainKind::Slab, 8, &lat, SolverConfig::default());
    let f0 = initial_perturbation(&s.grid, &s.cfg.weight, 1e-2, InitialProfile::Modulated);
    let mut checks = Vec::new();
    for scale in [0.0, 10.0, 1000.0] {
        let r = s.uniqueness_probe(&f0, scale, 11).unwrap();
        println!(
            "criterion 11 scale {scale}: order distance {:.3e}, perturbation distance {:.3e}",
            r.order_distance, r.perturbation_distance
        );
        checks.push(CheckRecord::at_most(&format!("order_distance_scale_{scale}"), r.order_distance, s.cfg.tol_fixed_point));
        checks.push(CheckRecord::at_most(
            &format!("perturbation_distance_scale_{scale}"),
            r.perturbation_distance,
            r.bound.max(s.cfg.tol_fixed_point),
        ));
    }
    verdict(11, &checks);
}

#[test]
fn criterion_12_positivity() {
    let run = nonlinear_run();
    let mu = Field::maxwellian(run.solver.grid.clone());
    let big0 = mu.add(&run.f0);
    let big = with_maxwellian(&run.sol.f);
    let lb = check_lower_bound(&big, 1.0, run.solver.cfg.tol_pos).unwrap();
    println!(
        "criterion 12 rho_hat {:.6}, theta_hat {:.6}, min value {:.3e}, min mass {:.6}, max local energy {:.6}",
        lb.rho_hat, lb.theta_hat, lb.min_value, lb.min_mass, lb.max_local_energy
    );
    verdict(
        12,
        &[
            CheckRecord::at_least("initial_minimum", big0.data.iter().cloned().fold(f64::INFINITY, f64::min), 0.0),
            CheckRecord::above("min_mass", lb.min_mass, 0.0),
            CheckRecord::above("rho_hat", lb.rho_hat, 0.0),
            CheckRecord::above("theta_hat", lb.theta_hat, 0.0),
        ],
    );
}
