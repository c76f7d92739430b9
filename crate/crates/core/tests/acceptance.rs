//! Acceptance run: one PASS/FAIL line per criterion; soft criteria only warn.
//! With `ACCEPTANCE_STRICT=1` a failed hard criterion makes the run exit
//! non-zero. Without it the outcome is reported and the workspace test run
//! carries on to the remaining targets.
//!
//! The training criteria run at the default configuration for the 1D circuit
//! and at reduced epoch budgets for the ablation and the coupled system, so the
//! whole run fits in about half an hour on one core.

mod common;

use std::time::Instant;

use autodiff::{orthogonality_defect, unitarize, Tensor};
use chaos_replica::adqc::{apply_circuit, embed, CircuitLayout};
use chaos_replica::dataset::{draw_state, generate, stream_rng, Dataset, MuGrid, TEST_STREAM};
use chaos_replica::dynamics::{MapFamily, MapSpec, System};
use chaos_replica::encoding::feature_map;
use chaos_replica::evaluation::{
    evaluate, fit_eta, model_lyapunov, rollout_ensemble, EvalOptions, LyapunovOptions,
    LyapunovReport, Selection, DEFAULT_INITS, DEFAULT_ROLLOUT_STEPS,
};
use chaos_replica::model::Model;
use chaos_replica::presets::ExperimentPreset;
use chaos_replica::training::{dataset_loss, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const ABLATION_EPOCHS: usize = 40;
const COUPLED_EPOCHS: usize = 40;
const PER_MU: usize = 2000;

#[derive(PartialEq)]
enum Kind {
    Hard,
    Soft,
}

struct Outcome {
    id: usize,
    name: &'static str,
    kind: Kind,
    pass: bool,
    detail: String,
}

struct Report {
    outcomes: Vec<Outcome>,
}

impl Report {
    fn record(&mut self, id: usize, name: &'static str, kind: Kind, pass: bool, detail: String) {
        let tag = match (pass, &kind) {
            (true, _) => "PASS",
            (false, Kind::Hard) => "FAIL",
            (false, Kind::Soft) => "WARN",
        };
        println!("{tag} criterion {id:>2} {name}: {detail}");
        self.outcomes.push(Outcome {
            id,
            name,
            kind,
            pass,
            detail,
        });
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn data(system: System, seed: u64) -> (Dataset, Dataset) {
    let family = MapFamily::for_system(system);
    let window = chaos_replica::model::default_window(system);
    let (tr, te) = generate(&family, &MuGrid::preset(system), 3000, 500, window, seed).unwrap();
    (tr.subsample(PER_MU, seed).unwrap(), te)
}

fn train_preset(name: &str, seed: u64, tr: &Dataset, te: &Dataset, epochs: usize) -> Model {
    let model = ExperimentPreset::named(name).unwrap().build(seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    train(&model, tr, te, &cfg).unwrap().best
}

fn l_le(model: &Model, seed: u64) -> LyapunovReport {
    let grid = MuGrid::preset(model.family().kind);
    let points = model_lyapunov(
        model,
        &grid,
        &LyapunovOptions {
            seed,
            ..LyapunovOptions::default()
        },
    )
    .unwrap();
    LyapunovReport::from_points(points).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn oracle_exponents(report: &mut Report) {
    let ((ln2, fixed), secs) = timed(|| {
        let chaotic = MapSpec::logistic_1d(4.0).unwrap();
        let mut rng = stream_rng(0, TEST_STREAM);
        let runs: Vec<f64> = (0..5)
            .map(|_| {
                chaotic
                    .lyapunov_true(&draw_state(&mut rng, 1), 264, 200)
                    .unwrap()
                    .exponents[0]
            })
            .collect();
        let fixed = MapSpec::logistic_1d(2.2)
            .unwrap()
            .lyapunov_true(&[0.3], 264, 200)
            .unwrap()
            .exponents[0];
        (mean(&runs), fixed)
    });
    let pass = (ln2 - 2f64.ln()).abs() < 0.05 && (fixed - (0.2f64).ln()).abs() < 1e-4 && secs < 1.0;
    report.record(
        1,
        "true exponents",
        Kind::Hard,
        pass,
        format!("λ(4) = {ln2:.4}, λ(2.2) = {fixed:.6}, {secs:.3}s"),
    );
}

fn sign_structure(report: &mut Report) {
    let (signs, secs) = timed(|| {
        [2.2, 3.2, 3.4, 3.92].map(|mu| {
            MapSpec::logistic_1d(mu)
                .unwrap()
                .lyapunov_true(&[0.3], 264, 200)
                .unwrap()
                .exponents[0]
        })
    });
    let pass = signs[..3].iter().all(|&l| l < 0.0) && signs[3] > 0.0 && secs < 1.0;
    report.record(
        2,
        "sign structure",
        Kind::Hard,
        pass,
        format!("{signs:.4?}, {secs:.3}s"),
    );
}

fn gradient_suites(report: &mut Report) {
    let (worst, secs) = timed(|| {
        [
            ("encode", common::encoder_suite(100)),
            ("adqc", common::adqc_suite(100)),
            ("lstm", common::lstm_suite(100)),
            ("svd", common::svd_suite(100)),
        ]
    });
    let pass = worst.iter().all(|(_, e)| *e < 1e-4) && secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report.record(
        3,
        "gradient suites (100 cases each)",
        Kind::Hard,
        pass,
        format!("{}, {secs:.1}s", detail.join(", ")),
    );
}

fn unitarity(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut randn = |n: usize, s: f64| -> Vec<f64> {
        (0..n)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let (mut gate, mut norm, mut feature) = (0f64, 0f64, 0f64);
    for i in 0..1000 {
        let scale = [0.01, 1.0, 10.0][i % 3];
        let q = unitarize(&Tensor::matrix(9, 9, randn(81, scale))).unwrap();
        gate = gate.max(orthogonality_defect(&q));

        let layout = CircuitLayout::new(8, 3, 4).unwrap();
        let gates: Vec<Tensor> = (0..layout.n_gates())
            .map(|_| Tensor::matrix(9, 9, randn(81, 1.0)))
            .collect();
        let vectors: Vec<Vec<f64>> = (0..8).map(|_| randn(3, 1.0)).collect();
        let state = embed(&vectors).unwrap();
        norm = norm.max((apply_circuit(&state, &gates, &layout).unwrap().norm() - 1.0).abs());

        let a = randn(1, 100.0)[0];
        let theta = randn(1, 3.0)[0];
        let xi = feature_map(a, theta, 3);
        feature = feature.max((xi.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
    }
    let pass = gate < 1e-10 && norm < 1e-10 && feature < 1e-12;
    report.record(
        4,
        "unitarity and normalization (1000 draws)",
        Kind::Hard,
        pass,
        format!("gate {gate:.1e}, circuit {norm:.1e}, feature {feature:.1e}"),
    );
}

fn replication_1d(report: &mut Report) {
    let (tr, te) = data(System::Logistic1D, 0);
    let (model, secs) =
        timed(|| train_preset("adqc-1d-mu", 0, &tr, &te, TrainConfig::default().epochs));
    let l = dataset_loss(&model, &te.samples).unwrap();
    report.record(
        5,
        "1D circuit test loss",
        Kind::Hard,
        l <= 0.02,
        format!("L = {l:.5} (≤ 0.02), trained in {secs:.0}s"),
    );

    let grid = MuGrid::preset(System::Logistic1D);
    let (ev, secs) = timed(|| {
        evaluate(
            &model,
            &grid,
            Selection {
                rollout: false,
                ..Selection::ALL
            },
            &EvalOptions::default(),
        )
        .unwrap()
    });
    let ly = ev.report.lyapunov.as_ref().unwrap();
    let psnr = ev.report.psnr.unwrap_or(f64::INFINITY);
    let pass = ly.l_le <= 0.35 && ly.sign_accuracy >= 0.8 && psnr >= 38.0;
    report.record(
        6,
        "1D circuit characteristics",
        Kind::Hard,
        pass,
        format!(
            "L_LE = {:.4} (≤ 0.35), signs {:.0}% (≥ 80%), PSNR {psnr:.2} dB (≥ 38), {secs:.0}s",
            ly.l_le,
            100.0 * ly.sign_accuracy
        ),
    );

    let planted: Vec<f64> = (0..200)
        .map(|t| (1e-5 * (0.44 * t as f64).exp()).min(1.0))
        .collect();
    let synthetic = fit_eta(&planted)
        .map(|e| (e - 0.44).abs())
        .unwrap_or(f64::INFINITY);
    report.record(
        9,
        "planted growth rate",
        Kind::Hard,
        synthetic < 1e-6,
        format!("|η − 0.44| = {synthetic:.1e}"),
    );
    let mut rng = stream_rng(0, TEST_STREAM);
    let inits: Vec<Vec<f64>> = (0..DEFAULT_INITS)
        .map(|_| draw_state(&mut rng, 1))
        .collect();
    let eps = rollout_ensemble(&model, 3.92, &inits, DEFAULT_ROLLOUT_STEPS).unwrap();
    match fit_eta(&eps) {
        Ok(eta) => report.record(
            9,
            "trained growth rate at μ = 3.92",
            Kind::Soft,
            (0.29..=0.59).contains(&eta),
            format!("η = {eta:.4} (0.29..0.59)"),
        ),
        Err(e) => report.record(
            9,
            "trained growth rate at μ = 3.92",
            Kind::Soft,
            false,
            e.to_string(),
        ),
    }
}

fn ablation(report: &mut Report) {
    let start = Instant::now();
    let (tr, te) = data(System::Logistic1D, 0);
    let mut means = Vec::new();
    for preset in ["adqc-1d-mu", "lstm-1d-mu", "lstm-1d-raw"] {
        let scores: Vec<f64> = (0..5)
            .map(|seed| l_le(&train_preset(preset, seed, &tr, &te, ABLATION_EPOCHS), seed).l_le)
            .collect();
        eprintln!("  {preset}: L_LE per seed {scores:.4?}");
        means.push(mean(&scores));
    }
    let pass = means[0] < means[1] && means[1] < means[2];
    report.record(
        7,
        "ablation ordering",
        Kind::Hard,
        pass,
        format!(
            "mean L_LE circuit {:.4} < μ-LSTM {:.4} < raw LSTM {:.4} ({ABLATION_EPOCHS} epochs, {:.0}s)",
            means[0],
            means[1],
            means[2],
            start.elapsed().as_secs_f64()
        ),
    );
}

fn coupled(report: &mut Report) {
    let mut worst: f64 = 0.0;
    let mut rng = stream_rng(0, TEST_STREAM);
    for &mu in &MuGrid::preset_2d().values {
        let (x, y) = (draw_state(&mut rng, 1)[0], draw_state(&mut rng, 1)[0]);
        let pair = MapSpec::logistic_2d(mu, 0.0)
            .unwrap()
            .lyapunov_true(&[x, y], 264, 200)
            .unwrap()
            .exponents;
        let scalar = MapSpec::logistic_1d(4.0 * mu).unwrap();
        let mut singles = [
            scalar.lyapunov_true(&[x], 264, 200).unwrap().exponents[0],
            scalar.lyapunov_true(&[y], 264, 200).unwrap().exponents[0],
        ];
        singles.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in pair.iter().zip(singles) {
            worst = worst.max((a - b).abs());
        }
    }
    let decoupled = worst < 1e-8;

    let (tr, te) = data(System::Logistic2D, 0);
    let (model, secs) = timed(|| train_preset("adqc-2d-mu", 0, &tr, &te, COUPLED_EPOCHS));
    let ly = l_le(&model, 0);
    report.record(
        8,
        "coupled system",
        Kind::Hard,
        decoupled && ly.l_le <= 0.25,
        format!("β = 0 gap {worst:.1e} (< 1e-8), L_LE = {:.4} (≤ 0.25) after {COUPLED_EPOCHS} epochs in {secs:.0}s", ly.l_le),
    );
}

fn oracle_pipeline(report: &mut Report) {
    let (result, secs) = timed(|| {
        let mut details = Vec::new();
        let mut pass = true;
        for system in [System::Logistic1D, System::Logistic2D] {
            let oracle = Model::oracle(system);
            let family = MapFamily::for_system(system);
            let (_, te) =
                generate(&family, &MuGrid::preset(system), 1, 500, oracle.window(), 0).unwrap();
            let loss = dataset_loss(&oracle, &te.samples).unwrap();
            let ly = l_le(&oracle, 0);
            pass &= loss == 0.0 && ly.l_le < 1e-10 && ly.sign_accuracy == 1.0;
            details.push(format!(
                "{}: L = {loss}, L_LE = {:.1e}, signs {:.0}%",
                system.tag(),
                ly.l_le,
                100.0 * ly.sign_accuracy
            ));
        }
        (pass, details.join("; "))
    });
    report.record(
        10,
        "oracle pipeline",
        Kind::Hard,
        result.0 && secs < 60.0,
        format!("{}, {secs:.1}s", result.1),
    );
}

fn main() {
    // the test harness passes its own flags; listing asks for no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report {
        outcomes: Vec::new(),
    };
    oracle_exponents(&mut report);
    sign_structure(&mut report);
    gradient_suites(&mut report);
    unitarity(&mut report);
    oracle_pipeline(&mut report);
    replication_1d(&mut report);
    coupled(&mut report);
    ablation(&mut report);

    report.outcomes.sort_by_key(|o| o.id);
    println!("\nsummary");
    for o in &report.outcomes {
        let tag = if o.pass {
            "PASS"
        } else if o.kind == Kind::Hard {
            "FAIL"
        } else {
            "WARN"
        };
        println!("  {tag} {:>2} {}: {}", o.id, o.name, o.detail);
    }
    let failed = report
        .outcomes
        .iter()
        .filter(|o| !o.pass && o.kind == Kind::Hard)
        .count();
    if failed > 0 {
        println!("{failed} hard criteria failed");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
