use std::time::Instant;

use nalgebra::DMatrix;
use ngrc_core::features::{feature_count, make_rbf_centers, FeatureSpec, History, Nonlinearity};
use ngrc_core::ngrc::NgrcModel;
use ngrc_core::systems::default_magnets;

fn time(name: &str, family: Nonlinearity, k: usize, n: usize) {
    let spec = FeatureSpec::new(k, n, family).unwrap();
    let m = feature_count(&spec);
    let w = DMatrix::from_fn(n, m, |i, j| ((i * 31 + j * 17) % 7) as f64 * 1e-9);
    let model = NgrcModel::new(spec, 0.01, 1.0, &w).unwrap();
    let warm = History::new((0..k).map(|l| vec![0.1 + l as f64 * 1e-3; n]).collect()).unwrap();
    let steps = 200_000;
    let t = Instant::now();
    let (x, _) = model.rollout_final(&warm, steps, 1e6).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("{name}: m={m} {:.1} ns/step ({})", dt / steps as f64 * 1e9, x[0]);
}

fn main() {
    time("exact k2", Nonlinearity::PendulumExact { magnets: default_magnets(), h: 0.2 }, 2, 4);
    time("rbf1000 k2", Nonlinearity::RadialBasis { centers: make_rbf_centers(1000, 1), h: 0.2 }, 2, 4);
    time("poly3 k2", Nonlinearity::Polynomial { d_max: 3 }, 2, 4);
    time("kur83 exact", Nonlinearity::KuramotoExact, 2, 83);
    time("kur9 trig5", Nonlinearity::Trig { ell_max: 5 }, 2, 9);
    time("kur9 poly2", Nonlinearity::Polynomial { d_max: 2 }, 2, 9);
}
