use std::sync::{Arc, OnceLock};

use kinetic::field::{Field, PhaseGrid};
use kinetic::geometry::DomainKind;
use kinetic::harness::{initial_perturbation, InitialProfile};
use kinetic::kernels::{CollisionModel, LatticeCollision};
use kinetic::solver::{FullForm, Solver, SolverConfig, Splitting};
use kinetic::transport::BoundaryCondition;
use kinetic::velocity::{VelocityGrid, VelocityGridSpec};
use kinetic::KineticError;

fn lattice() -> Arc<LatticeCollision> {
    static LAT: OnceLock<Arc<LatticeCollision>> = OnceLock::new();
    LAT.get_or_init(|| {
        let vg = Arc::new(VelocityGrid::new(VelocityGridSpec { n_per_dim: 8, v_max: 6.0 }).unwrap());
        Arc::new(LatticeCollision::new(&CollisionModel::hard_spheres(), vg))
    })
    .clone()
}

fn solver(cells: usize, cfg: SolverConfig) -> Solver {
    let lat = lattice();
    let grid = PhaseGrid::from_kind(DomainKind::Slab, cells, lat.grid.clone()).unwrap();
    Solver::new(grid, lat, cfg).unwrap()
}

fn data(s: &Solver) -> Field {
    initial_perturbation(&s.grid, &s.cfg.weight, 1e-2, InitialProfile::Modulated)
}

#[test]
fn resumed_outer_iteration_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("outer.bin");
    let cfg = SolverConfig {
        t_final: 0.4,
        bc: BoundaryCondition::Diffusive,
        ..SolverConfig::default()
    };
    let full = solver(8, cfg);
    let f0 = data(&full);
    let reference = full.solve_coupled(&f0).unwrap();
    assert!(reference.outer_iterations >= 2);

    let short = solver(8, SolverConfig { max_outer_iters: 1, ..cfg });
    match short.solve_coupled_checkpointed(&f0, &path) {
        Err(KineticError::CouplingFailed { iterations: 1, .. }) => {}
        other => panic!("expected an exhausted budget, got {:?}", other.map(|s| s.outer_iterations)),
    }
    assert!(path.exists());
    let resumed = full.solve_coupled_checkpointed(&f0, &path).unwrap();
    assert_eq!(resumed.outer_iterations, reference.outer_iterations);
    assert_eq!(resumed.outer_differences, reference.outer_differences);
    for (a, b) in resumed.f.fields.iter().zip(&reference.f.fields) {
        assert_eq!(a.data, b.data);
    }

    let other = f0.scaled(0.5);
    assert!(matches!(
        full.solve_coupled_checkpointed(&other, &path),
        Err(KineticError::Checkpoint { .. })
    ));
}

#[test]
fn linear_coupled_system_matches_direct_stepping() {
    for bc in [BoundaryCondition::Specular, BoundaryCondition::Diffusive] {
        let mut s = solver(8, SolverConfig { bc, t_final: 0.5, ..SolverConfig::default() });
        s.quadratic_off = true;
        let f0 = data(&s);
        let coupled = s.solve_coupled(&f0).unwrap();
        let direct = s.solve_full(&f0, FullForm::Perturbation).unwrap();
        let m = s.cfg.weight;
        let d = coupled.f.sup_distance(&direct.traj, &m) / coupled.f.sup_norm(&m);
        assert!(d <= 2.0 * s.cfg.tol_fixed_point, "{bc:?}: {d:e}");
    }
}

#[test]
fn inner_iterates_contract() {
    let s = solver(8, SolverConfig::default());
    let sol = s.solve_coupled(&data(&s)).unwrap();
    for (l, c) in sol.contraction.iter().enumerate() {
        assert!(*c < 1.0, "outer iteration {}: ratio {c}", l + 1);
    }
    for w in sol.outer_differences.windows(2) {
        assert!(w[1] < w[0], "{:?}", sol.outer_differences);
    }
}

#[test]
fn strang_splitting_is_more_accurate_and_keeps_the_maxwellian() {
    let run = |dt: f64, splitting: Splitting| {
        let s = solver(16, SolverConfig { dt, t_final: 0.4, splitting, ..SolverConfig::default() });
        let f0 = data(&s);
        s.solve_full(&f0, FullForm::Perturbation).unwrap().traj.fields.pop().unwrap()
    };
    let reference = run(0.0025, Splitting::Strang);
    for dt in [0.02, 0.01] {
        let lie = run(dt, Splitting::Lie).sub(&reference).max_abs();
        let strang = run(dt, Splitting::Strang).sub(&reference).max_abs();
        assert!(strang < 0.6 * lie, "dt {dt}: strang {strang:e}, lie {lie:e}");
    }
    let s = solver(8, SolverConfig { t_final: 1.0, splitting: Splitting::Strang, ..SolverConfig::default() });
    let mu = Field::maxwellian(s.grid.clone());
    let traj = s.solve_full(&mu, FullForm::Full).unwrap().traj;
    assert!(traj.fields.iter().all(|f| f.sub(&mu).max_abs() <= 1e-12 * mu.max_abs()));
}
