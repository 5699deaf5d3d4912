//! Cross-module integration scenarios: solver against kernel primitives,
//! measure convergence along sweeps, the bump-density energy identity, and
//! 2D coverage of the stepping, oracle and verification paths.

use ospde::kernel::apply_semigroup;
use ospde::noise::{sample_backward_noise, ForwardPathBatch};
use ospde::problem::{
    build_problem, CoefficientSet, ObstacleSpec, ProblemConfig, ScalarCoeff, SpaceTimeField,
    SpaceTimeGrid, TerminalSpec,
};
use ospde::solver::{extract_measure, penalization_sweep, psor_oracle, solve_penalized};
use ospde::verify::{verify_bsde_residual, verify_energy_identity};

#[test]
fn solver_and_semigroup_share_the_same_stencil() {
    // with f = g = h = 0 and no obstacle, the backward sweep from Φ is the
    // composed implicit heat step, bit for bit
    let grid = SpaceTimeGrid::new_1d(-8.0, 8.0, 201, 64, 0.25).unwrap();
    let problem = build_problem(&ProblemConfig {
        grid: grid.clone(),
        coefficients: CoefficientSet::zero(1, 1),
        terminal: TerminalSpec::Bump { amp: 1.0, center: vec![0.0], width: 0.5 },
        obstacle: ObstacleSpec::disabled(),
    })
    .unwrap();
    let noise = sample_backward_noise(1, 64, 1, grid.dt()).unwrap();
    let sol = solve_penalized(&problem, 0, &noise).unwrap();
    let semigroup = apply_semigroup(&problem.phi, grid.horizon, &grid).unwrap();
    for (a, b) in sol.u.slice(0).iter().zip(&semigroup) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn measure_mass_is_cauchy_and_limit_complementarity_vanishes() {
    let problem = build_problem(&ProblemConfig {
        grid: SpaceTimeGrid::new_1d(-8.0, 8.0, 201, 100, 0.25).unwrap(),
        coefficients: CoefficientSet::zero(1, 1),
        terminal: TerminalSpec::PutPayoff { strike: 1.0 },
        obstacle: ObstacleSpec::PutPayoff { strike: 1.0 },
    })
    .unwrap();
    let noise = sample_backward_noise(2, 100, 1, problem.grid.dt()).unwrap();
    let schedule = [16u32, 32, 64, 128, 256, 512];
    let (sols, report) = penalization_sweep(&problem, &schedule, &noise, 1e-8).unwrap();

    // total masses form a Cauchy sequence along the dyadic schedule
    let gaps: Vec<f64> = report
        .measure_masses
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .collect();
    for pair in gaps.windows(2) {
        assert!(pair[1] < pair[0], "mass increments not shrinking: {gaps:?}");
    }
    // the complementarity defect against the limit candidate decreases to 0
    for pair in report.limit_complementarity.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-15);
    }
    let last = *report.limit_complementarity.last().unwrap();
    assert!(last <= 1e-12, "limit complementarity {last}");

    // per-solution nodewise complementarity is exactly zero
    for sol in &sols {
        let m = extract_measure(sol, &problem);
        assert_eq!(m.complementarity_defect, 0.0);
    }
}

#[test]
fn energy_identity_with_bump_density() {
    let grid = SpaceTimeGrid::new_1d(-8.0, 8.0, 201, 100, 0.25).unwrap();
    let f = SpaceTimeField::from_fn(&grid, |_, i| {
        let x = grid.position(i)[0];
        (-x * x / 0.5).exp()
    });
    let batch = ForwardPathBatch::new(&grid, 29, 20_000).unwrap();
    let rep = verify_energy_identity(&f, &grid, &batch, &[0, 50], 0.05).unwrap();
    assert!(rep.pass, "entries {:?} measures {:?}", rep.entries, rep.measure_checks);
    // two independent batches agree within joint 3 sigma
    let batch2 = ForwardPathBatch::new(&grid, 31, 20_000).unwrap();
    let rep2 = verify_energy_identity(&f, &grid, &batch2, &[0, 50], 0.05).unwrap();
    for (a, b) in rep.entries.iter().zip(&rep2.entries) {
        let joint = 3.0 * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
        assert!(
            (a.rhs - b.rhs).abs() <= joint,
            "batch estimates disagree: {} vs {}",
            a.rhs,
            b.rhs
        );
    }
}

fn grid_2d(n: usize, nt: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::new(2, vec![(-6.0, 6.0), (-6.0, 6.0)], vec![n, n], nt, 0.25).unwrap()
}

#[test]
fn two_dimensional_constant_source_reproduces_time_to_maturity() {
    let problem = build_problem(&ProblemConfig {
        grid: grid_2d(61, 50),
        coefficients: CoefficientSet::zero(2, 1).with_f(ScalarCoeff::Constant { value: 1.0 }),
        terminal: TerminalSpec::Zero,
        obstacle: ObstacleSpec::disabled(),
    })
    .unwrap();
    let noise = sample_backward_noise(3, 50, 1, problem.grid.dt()).unwrap();
    let sol = solve_penalized(&problem, 0, &noise).unwrap();
    let center = problem.grid.node_index(&[30, 30]);
    let got = sol.u.slice(0)[center];
    assert!((got - 0.25).abs() < 2e-2, "u(0, center) = {got}");
}

#[test]
fn two_dimensional_oracle_equivalence_on_bump_obstacle() {
    let problem = build_problem(&ProblemConfig {
        grid: grid_2d(41, 40),
        coefficients: CoefficientSet::zero(2, 1),
        terminal: TerminalSpec::Bump { amp: 0.5, center: vec![0.0, 0.0], width: 1.0 },
        obstacle: ObstacleSpec::Bump { amp: 0.5, center: vec![0.0, 0.0], width: 1.0 },
    })
    .unwrap();
    let noise = sample_backward_noise(4, 40, 1, problem.grid.dt()).unwrap();
    let oracle = psor_oracle(&problem).unwrap();
    let mut last = f64::INFINITY;
    for n in [64u32, 256, 1024] {
        let sol = solve_penalized(&problem, n, &noise).unwrap();
        let mut dist: f64 = 0.0;
        for k in 0..=problem.grid.nt {
            for (i, (a, b)) in sol.u.slice(k).iter().zip(oracle.slice(k)).enumerate() {
                if problem.grid.node_in_core(i) {
                    dist = dist.max((a - b).abs());
                }
            }
        }
        assert!(dist < last, "2D oracle distance not decreasing at n={n}: {dist} >= {last}");
        last = dist;
    }
    assert!(last <= 5e-3, "2D oracle distance {last}");
}

#[test]
fn two_dimensional_residual_is_unbiased() {
    let problem = build_problem(&ProblemConfig {
        grid: grid_2d(61, 50),
        coefficients: CoefficientSet::zero(2, 1).with_f(ScalarCoeff::Constant { value: 1.0 }),
        terminal: TerminalSpec::Zero,
        obstacle: ObstacleSpec::disabled(),
    })
    .unwrap();
    let noise = sample_backward_noise(6, 50, 1, problem.grid.dt()).unwrap();
    let sol = solve_penalized(&problem, 0, &noise).unwrap();
    let batch = ForwardPathBatch::new(&problem.grid, 9, 2000).unwrap();
    let stats = verify_bsde_residual(&sol, &problem, &batch, &noise, 0.05).unwrap();
    assert!(stats.pass, "2D residual slice 0: {:?}", stats.per_slice[0]);
}
