//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! Select criteria by number: `cargo test --test acceptance -- 1 8`.
//! `NGRC_ACCEPTANCE_QUICK=1` skips the n = 83 Kuramoto criterion.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use ngrc_core::basins::{BasinLabel, BasinSystem, GridRegion};
use ngrc_core::features::{feature_count, FeatureSpec, History, Nonlinearity};
use ngrc_core::harness::{
    run_single, run_sweep, train_model, ExperimentConfig, FeatureDescriptor, RegionConfig,
    SweepConfig, TruthCache,
};
use ngrc_core::integrator::{integrate_final, integrate_sampled, IntegratorConfig};
use ngrc_core::ngrc::{ridge_solve, DesignMatrices, NgrcModel, RolloutStatus};
use ngrc_core::systems::{
    default_magnets, kuramoto_rhs, pendulum_rhs, twisted_state, winding_number,
    KuramotoParams, MagneticPendulumParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct Outcome {
    p: f64,
    frac_diverged: f64,
    rmse: f64,
}

struct Ctx {
    cache: TruthCache,
    memo: Mutex<HashMap<String, Outcome>>,
}

impl Ctx {
    /// Runs a configuration once; repeated requests reuse the result.
    fn run(&self, cfg: &ExperimentConfig) -> Outcome {
        let key = cfg.to_json().unwrap();
        if let Some(o) = self.memo.lock().unwrap().get(&key) {
            return *o;
        }
        let out = run_single(cfg, &self.cache).expect("run succeeds");
        let o = Outcome {
            p: out.p,
            frac_diverged: out.frac_diverged,
            rmse: out.rmse,
        };
        self.memo.lock().unwrap().insert(key, o);
        o
    }
}

type Verdict = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_ps(ps: &[f64]) -> String {
    let parts: Vec<String> = ps.iter().map(|p| format!("{p:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn exact() -> FeatureDescriptor {
    FeatureDescriptor::PendulumExact { delta: 0.0 }
}

fn c1_exact_single_trajectory(ctx: &Ctx) -> Verdict {
    let ps: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = ExperimentConfig {
                k: 4,
                lambda: 1e-4,
                n_traj: 1,
                n_train: 1000,
                seed,
                ..ExperimentConfig::pendulum(exact())
            };
            ctx.run(&cfg).p
        })
        .collect();
    let med = median(ps.clone());
    verdict(
        (0.10..=0.25).contains(&ps[0]) && (0.12..=0.20).contains(&med),
        format!(
            "p per seed {} median {med:.3} (need seed 0 in [0.10, 0.25], median in [0.12, 0.20])",
            fmt_ps(&ps)
        ),
    )
}

fn c2_exact_fine_dt(ctx: &Ctx) -> Verdict {
    let cfg = ExperimentConfig {
        k: 3,
        dt: 1e-3,
        n_train: 10_000,
        ..ExperimentConfig::pendulum(exact())
    };
    let o = ctx.run(&cfg);
    verdict(o.p <= 0.05, format!("p = {:.4} (need <= 0.05)", o.p))
}

fn polynomial3() -> FeatureDescriptor {
    FeatureDescriptor::Polynomial { d_max: 3 }
}

fn c3_polynomial_failure(ctx: &Ctx) -> Verdict {
    let o = ctx.run(&ExperimentConfig::pendulum(polynomial3()));
    verdict(
        o.frac_diverged >= 0.5 && o.p >= 0.6,
        format!(
            "diverged fraction {:.3} (need >= 0.5), p = {:.3} (need >= 0.6)",
            o.frac_diverged, o.p
        ),
    )
}

fn rbf(n_centers: usize) -> FeatureDescriptor {
    FeatureDescriptor::RadialBasis {
        n_centers,
        h: None,
    }
}

fn c4_rbf_mediocrity(ctx: &Ctx) -> Verdict {
    let mut medians = Vec::new();
    let mut detail = String::new();
    let mut rmse_1000 = 0.0f64;
    for n in [10, 100, 1000] {
        let outs: Vec<Outcome> = (0..3)
            .map(|seed| ctx.run(&ExperimentConfig { seed, ..ExperimentConfig::pendulum(rbf(n)) }))
            .collect();
        let ps: Vec<f64> = outs.iter().map(|o| o.p).collect();
        if n == 1000 {
            rmse_1000 = outs.iter().map(|o| o.rmse).fold(0.0, f64::max);
        }
        let m = median(ps.clone());
        detail.push_str(&format!("N={n}: p {} median {m:.3}; ", fmt_ps(&ps)));
        medians.push(m);
    }
    let in_band = (0.39..=0.55).contains(&medians[2]);
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    detail.push_str(&format!(
        "max training RMSE at N=1000 {rmse_1000:.2e} (need median p(1000) in [0.39, 0.55] and decreasing medians)"
    ));
    verdict(in_band && decreasing, detail)
}

fn c5_delta_sensitivity(ctx: &Ctx) -> Verdict {
    let deltas = [1e-5, 1e-3, 1e-2, 1e-1];
    let cfg = ExperimentConfig {
        sweep: Some(SweepConfig {
            param: "delta".into(),
            values: deltas.to_vec(),
            replicates: 5,
        }),
        ..ExperimentConfig::pendulum(exact())
    };
    let report = run_sweep(&cfg, &ctx.cache).expect("sweep runs");
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    let means: Vec<f64> = report.summary().iter().map(|s| s.mean_p).collect();
    let increasing = means.windows(2).all(|w| w[1] > w[0]);
    verdict(
        failed == 0 && means[1] < 0.45 && means[3] > 0.55 && increasing,
        format!(
            "mean p over delta {deltas:?}: {} (need p(1e-3) < 0.45, p(1e-1) > 0.55, strictly increasing); failed replicates {failed}",
            fmt_ps(&means)
        ),
    )
}

fn c6_kuramoto9(ctx: &Ctx) -> Verdict {
    let e = ctx.run(&ExperimentConfig::kuramoto(9, FeatureDescriptor::KuramotoExact));
    let t = ctx.run(&ExperimentConfig::kuramoto(9, FeatureDescriptor::Trig { ell_max: 5 }));
    let q = ctx.run(&ExperimentConfig::kuramoto(9, FeatureDescriptor::Polynomial { d_max: 2 }));
    verdict(
        e.p <= 0.03 && t.p >= 0.4 && q.p >= 0.4,
        format!(
            "exact p = {:.4} (need <= 0.03), trig p = {:.3}, polynomial p = {:.3} (need >= 0.4)",
            e.p, t.p, q.p
        ),
    )
}

fn c7_kuramoto83(ctx: &Ctx) -> Verdict {
    let cfg = ExperimentConfig {
        region: RegionConfig::RandomSlice,
        resolution: 60,
        ..ExperimentConfig::kuramoto(83, FeatureDescriptor::KuramotoExact)
    };
    let o = ctx.run(&cfg);
    verdict(o.p <= 0.06, format!("p = {:.4} (need <= 0.06)", o.p))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c8_properties(_ctx: &Ctx) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool, extra: String| {
        ok &= pass;
        notes.push(format!("{name} {}{extra}", if pass { "ok" } else { "FAILED" }));
    };

    // Ridge residual identity on random data.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for &lambda in &[1e-6, 1e-3, 1.0, 1e2] {
        let d = DesignMatrices {
            g: DMatrix::from_fn(15, 400, |_, _| rng.random_range(-1.0..1.0)),
            y: DMatrix::from_fn(4, 400, |_, _| rng.random_range(-1.0..1.0)),
        };
        let w = ridge_solve(&d, lambda).unwrap();
        let lhs = (&d.y - &w * &d.g) * d.g.transpose();
        let rhs = &w * lambda;
        let scale = rhs.amax().max((&d.y * d.g.transpose()).amax());
        worst = worst.max((&lhs - &rhs).amax() / scale);
    }
    check("ridge identity", worst < 1e-8, format!(" ({worst:.1e})"));

    let poly = FeatureSpec::new(3, 4, Nonlinearity::Polynomial { d_max: 5 }).unwrap();
    check("m(k=3,d=5,n=4)", feature_count(&poly) == 6188, format!(" ({})", feature_count(&poly)));

    // Exact features with Euler weights step exactly like explicit Euler.
    let p = MagneticPendulumParams::default();
    let dt = 0.01;
    let spec = FeatureSpec::new(
        1,
        4,
        Nonlinearity::PendulumExact {
            magnets: default_magnets(),
            h: p.height,
        },
    )
    .unwrap();
    let mut w = DMatrix::zeros(4, feature_count(&spec));
    let w2 = p.omega0 * p.omega0;
    w[(0, 3)] = dt;
    w[(1, 4)] = dt;
    w[(2, 1)] = -dt * w2;
    w[(2, 3)] = -dt * p.alpha;
    w[(3, 2)] = -dt * w2;
    w[(3, 4)] = -dt * p.alpha;
    for i in 0..3 {
        w[(2, 5 + 2 * i)] = dt;
        w[(3, 6 + 2 * i)] = dt;
    }
    let model = NgrcModel::new(spec.clone(), dt, 1.0, &w).unwrap();
    let roll = model
        .rollout(&History::new(vec![vec![-0.8, 1.1, 0.2, -0.1]]).unwrap(), 5000, 1e6)
        .unwrap();
    let euler_err = roll
        .trajectory
        .states
        .windows(2)
        .map(|s| {
            let f = pendulum_rhs(&s[0], &p);
            let e: Vec<f64> = (0..4).map(|i| s[0][i] + dt * f[i]).collect();
            max_abs_diff(&s[1], &e)
        })
        .fold(0.0, f64::max);
    check("Euler equivalence", euler_err < 1e-12, format!(" ({euler_err:.1e})"));

    // Energy along true trajectories.
    let sys = BasinSystem::pendulum(p.clone()).unwrap();
    let mut rise = 0.0f64;
    for _ in 0..3 {
        let x0 = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0, 0.0];
        let traj = integrate_sampled(sys.dynamics(), &x0, 0.01, 3001, &IntegratorConfig::default()).unwrap();
        for s in traj.states.windows(2) {
            rise = rise.max(p.energy(&s[1]) - p.energy(&s[0]));
        }
    }
    check("energy monotone", rise <= 1e-8, format!(" (max rise {rise:.1e})"));

    // Twisted states: fixed points and winding numbers.
    let mut resid = 0.0f64;
    let mut winding_ok = true;
    for n in [5usize, 9, 12, 83] {
        let max_q = KuramotoParams::new(n).unwrap().max_stable_twist() as i64;
        for q in -max_q..=max_q {
            let theta = twisted_state(n, q, 0.3);
            resid = resid.max(kuramoto_rhs(&theta).iter().fold(0.0, |a, v| a.max(v.abs())));
        }
        for q in -((n as i64 - 1) / 2)..=((n as i64 - 1) / 2) {
            winding_ok &= winding_number(&twisted_state(n, q, 1.1)).ok() == Some(q);
        }
    }
    check("twisted residual", resid < 1e-12, format!(" ({resid:.1e})"));
    check("winding(twisted)", winding_ok, String::new());

    // 120° rotation maps basins onto each other with labels cycled.
    let region = GridRegion::pendulum_default(30);
    let truth = ngrc_core::basins::true_basin_grid(&sys, &region, 100.0, &IntegratorConfig::default()).unwrap();
    let (s, c) = (2.0 * PI / 3.0).sin_cos();
    let cycled = |l: BasinLabel| match l {
        // Magnet 0 at angle 0 rotates onto magnet 2 at 120°, 1 onto 0, 2 onto 1.
        BasinLabel::Attractor(i) => BasinLabel::Attractor([2, 0, 1][i as usize]),
        other => other,
    };
    let mut mismatches = 0;
    for j in 0..30 {
        for i in 0..30 {
            let (x, y) = region.coords(i, j);
            let rotated = [c * x - s * y, s * x + c * y, 0.0, 0.0];
            let end = integrate_final(sys.dynamics(), &rotated, 100.0, &IntegratorConfig::default()).unwrap();
            if sys.classify(&end) != cycled(truth.get(i, j)) {
                mismatches += 1;
            }
        }
    }
    check(
        "120-degree symmetry",
        mismatches == 0,
        format!(" ({mismatches}/900 cells differ)"),
    );

    // W = 0 keeps the state fixed.
    let zero = NgrcModel::new(spec, dt, 1.0, &DMatrix::zeros(4, 11)).unwrap();
    let x = vec![0.3, -0.2, 0.1, 0.05];
    let r = zero.rollout(&History::new(vec![x.clone()]).unwrap(), 1000, 1e6).unwrap();
    check(
        "W=0 constancy",
        r.status == RolloutStatus::Completed && r.trajectory.states.iter().all(|s| s == &x),
        String::new(),
    );

    // Save/load of a trained model is bit-exact.
    let cfg = ExperimentConfig {
        n_traj: 5,
        n_train: 500,
        ..ExperimentConfig::pendulum(rbf(20))
    };
    let (trained, _) = train_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ngrc");
    trained.save(&path, Some(cfg.to_value())).unwrap();
    let loaded = NgrcModel::load(&path).unwrap();
    let path2 = dir.path().join("m2.ngrc");
    loaded.save(&path2, Some(cfg.to_value())).unwrap();
    check(
        "save/load",
        loaded == trained && std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap(),
        String::new(),
    );

    verdict(ok, notes.join("; "))
}

fn c9_robustness(ctx: &Ctx) -> Verdict {
    let mut settings: Vec<(String, Box<dyn Fn(FeatureDescriptor) -> ExperimentConfig>)> = Vec::new();
    for lambda in [1e-2, 1.0, 1e2] {
        settings.push((
            format!("lambda={lambda}"),
            Box::new(move |f| ExperimentConfig {
                lambda,
                ..ExperimentConfig::pendulum(f)
            }),
        ));
    }
    for n_traj in [10, 100] {
        settings.push((
            format!("n_traj={n_traj}"),
            Box::new(move |f| ExperimentConfig {
                n_traj,
                ..ExperimentConfig::pendulum(f)
            }),
        ));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, make) in &settings {
        let e = ctx.run(&make(exact())).p;
        let q = ctx.run(&make(polynomial3())).p;
        let r = ctx.run(&make(rbf(100))).p;
        ok &= e < 0.45 && q > 0.45 && r > 0.45;
        parts.push(format!("{name}: exact {e:.3} poly {q:.3} rbf {r:.3}"));
    }
    verdict(
        ok,
        format!("{} (need exact < 0.45, others > 0.45)", parts.join("; ")),
    )
}

fn main() {
    let criteria: Vec<(u32, &str, fn(&Ctx) -> Verdict)> = vec![
        (8, "property suite", c8_properties),
        (1, "exact nonlinearity, single trajectory", c1_exact_single_trajectory),
        (2, "exact nonlinearity, fine dt", c2_exact_fine_dt),
        (3, "polynomial failure", c3_polynomial_failure),
        (4, "radial basis mediocrity", c4_rbf_mediocrity),
        (5, "magnet-position sensitivity", c5_delta_sensitivity),
        (6, "Kuramoto n=9 slice", c6_kuramoto9),
        (7, "Kuramoto n=83 random slice", c7_kuramoto83),
        (9, "hyperparameter robustness", c9_robustness),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let quick = std::env::var("NGRC_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let ctx = Ctx {
        cache: TruthCache::new(),
        memo: Mutex::new(HashMap::new()),
    };
    let mut failures = 0;
    for (num, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&num) {
            continue;
        }
        if quick && num == 7 {
            println!("SKIP criterion {num} ({name}): quick mode");
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&ctx)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {num} ({name}): {detail} [{secs:.0}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {num} ({name}): {detail} [{secs:.0}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
