use ngrc_core::integrator::{
    integrate, integrate_final, integrate_sampled, sample_trajectory, ContinuousSystem,
    IntegratorConfig,
};
use ngrc_core::systems::{
    pendulum_attractors, KuramotoRing, MagneticPendulum, MagneticPendulumParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tighter_tolerance_shrinks_error_tenfold() {
    let sys = MagneticPendulum::default();
    let x0 = [0.5, 0.5, 0.0, 0.0];
    let t = 10.0;
    let reference = integrate_final(&sys, &x0, t, &IntegratorConfig::with_tolerance(1e-13)).unwrap();
    let errs: Vec<f64> = [1e-7, 1e-8, 1e-9]
        .iter()
        .map(|&tol| {
            let x = integrate_final(&sys, &x0, t, &IntegratorConfig::with_tolerance(tol)).unwrap();
            max_diff(&x, &reference)
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] * 10.0 <= w[0], "errors {errs:?}");
    }
}

#[test]
fn default_and_tight_tolerances_agree_over_long_horizon() {
    let cfg_default = IntegratorConfig::default();
    let cfg_tight = IntegratorConfig::with_tolerance(1e-12);
    let pend = MagneticPendulum::default();
    for x0 in [[0.5, 0.5, 0.0, 0.0], [-1.2, 0.3, 0.0, 0.0], [0.9, -1.4, 0.0, 0.0]] {
        let a = integrate_final(&pend, &x0, 100.0, &cfg_default).unwrap();
        let b = integrate_final(&pend, &x0, 100.0, &cfg_tight).unwrap();
        assert!(max_diff(&a, &b) < 1e-6, "{x0:?}: {}", max_diff(&a, &b));
    }
    let ring = KuramotoRing::new(9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let x0: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let a = integrate_final(&ring, &x0, 100.0, &cfg_default).unwrap();
        let b = integrate_final(&ring, &x0, 100.0, &cfg_tight).unwrap();
        assert!(max_diff(&a, &b) < 1e-6);
    }
}

#[test]
fn pendulum_rest_point_is_stationary() {
    let p = MagneticPendulumParams::default();
    let sys = MagneticPendulum::new(p.clone());
    for att in pendulum_attractors(&p).unwrap() {
        let traj = integrate_sampled(&sys, &att, 1.0, 101, &IntegratorConfig::default()).unwrap();
        for s in &traj.states {
            assert!(max_diff(s, &att) < 1e-8);
        }
    }
}

#[test]
fn pendulum_energy_never_increases() {
    let p = MagneticPendulumParams::default();
    let sys = MagneticPendulum::new(p.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let x0 = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0, 0.0];
        let traj = integrate_sampled(&sys, &x0, 0.01, 5001, &IntegratorConfig::default()).unwrap();
        let energies: Vec<f64> = traj.states.iter().map(|s| p.energy(s)).collect();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn sampled_trajectory_matches_dense_evaluation() {
    let sys = MagneticPendulum::default();
    let x0 = [1.1, -0.4, 0.0, 0.0];
    let cfg = IntegratorConfig::default();
    let sol = integrate(&sys, &x0, 20.0, &cfg).unwrap();
    let traj = sample_trajectory(&sys, &x0, 0.01, 2001, &cfg).unwrap();
    for (i, s) in traj.states.iter().enumerate() {
        let direct = sol.eval(i as f64 * 0.01).unwrap();
        assert!(max_diff(s, &direct) <= 1e-9, "sample {i}: {}", max_diff(s, &direct));
    }
}

#[test]
fn interpolant_matches_step_landing_integration() {
    // Tight tolerance so the two step sequences share the same trajectory
    // and only the interpolation error remains.
    let sys = MagneticPendulum::default();
    let x0 = [1.1, -0.4, 0.0, 0.0];
    let cfg = IntegratorConfig::with_tolerance(1e-12);
    let dense = integrate(&sys, &x0, 20.0, &cfg).unwrap().sample(0.01, 2001).unwrap();
    let landed = integrate_sampled(&sys, &x0, 0.01, 2001, &cfg).unwrap();
    for (a, b) in dense.states.iter().zip(&landed.states) {
        assert!(max_diff(a, b) < 1e-9, "{}", max_diff(a, b));
    }
}

#[test]
fn sampled_trajectories_are_bit_identical() {
    let sys = KuramotoRing::new(11).unwrap();
    let x0: Vec<f64> = (0..11).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
    let cfg = IntegratorConfig::default();
    let a = integrate(&sys, &x0, 30.0, &cfg).unwrap().sample(0.01, 3001).unwrap();
    let b = integrate(&sys, &x0, 30.0, &cfg).unwrap().sample(0.01, 3001).unwrap();
    assert_eq!(a, b);
    assert_eq!(sys.dimension(), a.dimension());
}
