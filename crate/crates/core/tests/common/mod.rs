//! Finite-difference gradient suites shared by the test targets. Each returns
//! the worst relative error over its random configurations.
#![allow(dead_code)]

use autodiff::{fd_gradient, max_rel_err, svd_unitarize_vjp, unitarize, Tape, Tensor, TensorMap};
use chaos_replica::adqc::{gate_name, AdqcModel};
use chaos_replica::dataset::{draw_state, window_from, Sample};
use chaos_replica::dynamics::MapFamily;
use chaos_replica::encoding;
use chaos_replica::lstm::{LstmConfig, LstmModel};
use chaos_replica::model::Model;
use chaos_replica::training::{loss_and_gradient, rmse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-6;
pub const FLOOR: f64 = 1e-3;

pub fn random_samples(
    rng: &mut ChaCha8Rng,
    family: &MapFamily,
    window: usize,
    mus: (f64, f64),
    n: usize,
) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let mu = rng.gen_range(mus.0..mus.1);
            let x1 = draw_state(rng, family.dim());
            window_from(family, mu, &x1, window).unwrap()
        })
        .collect()
}

pub fn plain_loss(model: &Model, samples: &[Sample]) -> f64 {
    let windows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let mus: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let preds = model.predict_batch(&windows, &mus).unwrap().concat();
    let labels: Vec<f64> = samples.iter().flat_map(|s| s.label.clone()).collect();
    rmse(&preds, &labels).unwrap()
}

pub fn perturb(params: &mut TensorMap, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Alternates the 1D and 2D systems with their default windows.
pub fn system_for(case: usize) -> (MapFamily, usize, (f64, f64)) {
    if case % 2 == 0 {
        (MapFamily::logistic_1d(), 8, (2.0, 4.0))
    } else {
        (MapFamily::logistic_2d(0.1), 4, (0.51, 0.9))
    }
}

pub fn encoder_suite(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mut params = TensorMap::new();
        encoding::EncoderParams::init(3, &mut rng)
            .unwrap()
            .insert_into(&mut params);
        params.get_mut(encoding::THETA).unwrap().data_mut()[0] = rng.gen_range(0.3..1.5);
        let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mus: Vec<f64> = (0..4).map(|_| rng.gen_range(2.0..4.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let build = |p: &TensorMap| {
            let mut tape = Tape::new();
            let (theta, t) = encoding::register(&mut tape, p);
            let x = tape.leaf(Tensor::vector(xs.clone()));
            let m = tape.leaf(Tensor::vector(mus.clone()));
            let v = encoding::encode_taped(&mut tape, x, m, theta, t, 3);
            let wv = tape.leaf(Tensor::matrix(4, 3, w.clone()));
            let prod = tape.mul(v, wv);
            let s = tape.sum(prod);
            (tape, s)
        };
        let (tape, s) = build(&params);
        let analytic = tape.backward(s).unwrap();
        let numeric = fd_gradient(
            |p| {
                let (t, s) = build(p);
                t.value(s).data()[0]
            },
            &params,
            H,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, FLOOR));
    }
    worst
}

/// RMSE gradient of the full circuit. Every encoder and light-cone entry is
/// differenced; gates off the cone must have an exactly zero gradient and
/// leave the loss unchanged when perturbed.
pub fn adqc_suite(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (family, window, mus) = system_for(case);
        let mut m = AdqcModel::init(family, window, 3, 4, &mut rng).unwrap();
        perturb(&mut m.params, &mut rng, 0.2);
        let samples = random_samples(&mut rng, &family, window, mus, 3);
        let cone = m.layout.light_cone(&m.targets()).gates;
        let model = Model::Adqc(m);
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, analytic) = loss_and_gradient(&model, &refs, 2).unwrap();
        let full = model.params().unwrap();
        let base = plain_loss(&model, &samples);

        let mut live = TensorMap::new();
        let mut analytic_live = TensorMap::new();
        for (name, t) in full.iter() {
            let on_cone = cone.iter().any(|&g| gate_name(g) == *name);
            if !name.starts_with("gate.") || on_cone {
                live.insert(name.clone(), t.clone());
                analytic_live.insert(name.clone(), analytic.expect(name).clone());
                continue;
            }
            if analytic.expect(name).data().iter().any(|&g| g != 0.0) {
                return f64::INFINITY;
            }
            let k = rng.gen_range(0..t.len());
            let mut p = full.clone();
            p.get_mut(name).unwrap().data_mut()[k] += 1e-3;
            if plain_loss(&model.with_params(p).unwrap(), &samples) != base {
                return f64::INFINITY;
            }
        }
        let numeric = fd_gradient(
            |sub| {
                let mut p = full.clone();
                for (name, t) in sub.iter() {
                    *p.get_mut(name).unwrap() = t.clone();
                }
                plain_loss(&model.with_params(p).unwrap(), &samples)
            },
            &live,
            H,
        );
        worst = worst.max(max_rel_err(&analytic_live, &numeric, FLOOR));
    }
    worst
}

pub fn lstm_suite(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (family, window, mus) = system_for(case);
        let cfg = LstmConfig::preset(&family, window, case % 4 < 2);
        let mut m = LstmModel::init(family, window, cfg, &mut rng).unwrap();
        perturb(&mut m.params, &mut rng, 0.3);
        let samples = random_samples(&mut rng, &family, window, mus, 3);
        let model = Model::Lstm(m);
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, analytic) = loss_and_gradient(&model, &refs, 2).unwrap();
        let numeric = fd_gradient(
            |p| plain_loss(&model.with_params(p.clone()).unwrap(), &samples),
            model.params().unwrap(),
            H,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, FLOOR));
    }
    worst
}

/// Adjoint of the polar map on random gate-sized latent matrices.
pub fn svd_suite(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let randn = |rng: &mut ChaCha8Rng| {
            Tensor::matrix(9, 9, (0..81).map(|_| rng.sample(StandardNormal)).collect())
        };
        let g = randn(&mut rng);
        let w = randn(&mut rng);
        let mut analytic = TensorMap::new();
        analytic.insert("g", svd_unitarize_vjp(&g, &w).unwrap());
        let mut p = TensorMap::new();
        p.insert("g", g);
        let numeric = fd_gradient(
            |m| {
                unitarize(m.expect("g"))
                    .unwrap()
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &p,
            H,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, FLOOR));
    }
    worst
}
