//! Every backward rule against central finite differences (h = 1e-6).

use autodiff::{
    fd_gradient, max_rel_err, svd_unitarize_vjp, unitarize, Tape, Tensor, TensorMap, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const CASES: usize = 100;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduces `build`'s output against fixed random weights so the upstream
/// adjoint is generic, then compares backward with finite differences.
fn check<F>(name: &str, params: &TensorMap, weights_seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let loss = |p: &TensorMap| -> (Tape, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p
            .iter()
            .map(|(k, t)| tape.param(k.clone(), t.clone()))
            .collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = tape.leaf(randn(&mut rng, shape));
        let prod = tape.mul(out, w);
        let s = tape.sum(prod);
        (tape, s)
    };
    let (tape, s) = loss(params);
    let analytic = tape.backward(s).unwrap_or_else(|e| panic!("{name}: {e}"));
    let numeric = fd_gradient(
        |p| {
            let (t, s) = loss(p);
            t.value(s).data()[0]
        },
        params,
        H,
    );
    let err = max_rel_err(&analytic, &numeric, FLOOR);
    assert!(err < TOL, "{name}: relative error {err:e}");
    err
}

fn run_cases(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> TensorMap,
    build: impl Fn(&mut Tape, &[Var]) -> Var + Copy,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for case in 0..CASES {
        let p = make(&mut rng);
        check(name, &p, case as u64, build);
    }
}

fn two(shape_a: Vec<usize>, shape_b: Vec<usize>) -> impl Fn(&mut ChaCha8Rng) -> TensorMap {
    move |rng| {
        let mut p = TensorMap::new();
        p.insert("a", randn(rng, shape_a.clone()));
        p.insert("b", randn(rng, shape_b.clone()));
        p
    }
}

fn one(shape: Vec<usize>, lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> TensorMap {
    move |rng| {
        let mut p = TensorMap::new();
        p.insert("a", uniform(rng, shape.clone(), lo, hi));
        p
    }
}

#[test]
fn square_at_three() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.expect("x").data(), &[6.0]);
}

#[test]
fn rmse_at_its_minimum_has_zero_gradient() {
    let mut tape = Tape::new();
    let pred = tape.param("pred", Tensor::vector(vec![0.2, 0.7, 0.4]));
    let label = tape.leaf(Tensor::vector(vec![0.2, 0.7, 0.4]));
    let d = tape.sub(pred, label);
    let sq = tape.square(d);
    let s = tape.sum(sq);
    let m = tape.scale(s, 1.0 / 3.0);
    let l = tape.sqrt(m);
    let g = tape.backward(l).unwrap();
    assert!(g.expect("pred").data().iter().all(|&x| x == 0.0));
}

#[test]
fn elementwise_binary() {
    run_cases("add", two(vec![3, 4], vec![3, 4]), |t, v| t.add(v[0], v[1]));
    run_cases("sub", two(vec![3, 4], vec![3, 4]), |t, v| t.sub(v[0], v[1]));
    run_cases("mul", two(vec![3, 4], vec![3, 4]), |t, v| t.mul(v[0], v[1]));
    run_cases(
        "div",
        |rng| {
            let mut p = TensorMap::new();
            p.insert("a", randn(rng, vec![5]));
            p.insert("b", uniform(rng, vec![5], 0.5, 2.0));
            p
        },
        |t, v| t.div(v[0], v[1]),
    );
}

#[test]
fn elementwise_unary() {
    run_cases("scale", one(vec![6], -2.0, 2.0), |t, v| t.scale(v[0], -1.7));
    run_cases("offset", one(vec![6], -2.0, 2.0), |t, v| {
        t.offset(v[0], 0.3)
    });
    run_cases("sin", one(vec![6], -3.0, 3.0), |t, v| t.sin(v[0]));
    run_cases("cos", one(vec![6], -3.0, 3.0), |t, v| t.cos(v[0]));
    run_cases("powi", one(vec![6], -1.5, 1.5), |t, v| t.powi(v[0], 3));
    run_cases("sqrt", one(vec![6], 0.2, 3.0), |t, v| t.sqrt(v[0]));
    run_cases("ln", one(vec![6], 0.2, 3.0), |t, v| t.ln(v[0]));
    run_cases("sigmoid", one(vec![6], -4.0, 4.0), |t, v| t.sigmoid(v[0]));
    run_cases("tanh", one(vec![6], -3.0, 3.0), |t, v| t.tanh(v[0]));
    run_cases("square", one(vec![6], -3.0, 3.0), |t, v| t.square(v[0]));
}

#[test]
fn reductions_and_reshapes() {
    run_cases("sum", one(vec![2, 3], -1.0, 1.0), |t, v| t.sum(v[0]));
    run_cases("row_sum", one(vec![4, 3], -1.0, 1.0), |t, v| {
        t.row_sum(v[0])
    });
    run_cases("slice_cols", one(vec![4, 6], -1.0, 1.0), |t, v| {
        t.slice_cols(v[0], 2, 3)
    });
    run_cases("reshape", one(vec![4, 6], -1.0, 1.0), |t, v| {
        t.reshape(v[0], vec![8, 3])
    });
    run_cases("concat_cols", two(vec![4, 2], vec![4]), |t, v| {
        t.concat_cols(&[v[1], v[0], v[1]])
    });
    run_cases("group_sum", one(vec![2, 27], -1.0, 1.0), |t, v| {
        t.group_sum(v[0], 3, 3, 3)
    });
}

#[test]
fn broadcasting_products() {
    run_cases("matmul", two(vec![3, 4], vec![4, 2]), |t, v| {
        t.matmul(v[0], v[1])
    });
    run_cases("add_bias", two(vec![3, 4], vec![4]), |t, v| {
        t.add_bias(v[0], v[1])
    });
    run_cases("batch_outer", two(vec![3, 2], vec![3, 3]), |t, v| {
        t.batch_outer(v[0], v[1])
    });
    run_cases("scale_by", two(vec![5], vec![1]), |t, v| {
        t.scale_by(v[0], v[1])
    });
    run_cases(
        "div_rows",
        |rng| {
            let mut p = TensorMap::new();
            p.insert("a", randn(rng, vec![4, 3]));
            p.insert("b", uniform(rng, vec![4], 0.5, 2.0));
            p
        },
        |t, v| t.div_rows(v[0], v[1]),
    );
}

#[test]
fn local_gate_application() {
    // state [B, left·k·right] = [2, 3·9·3], gate 9×9
    run_cases("apply_local", two(vec![2, 81], vec![9, 9]), |t, v| {
        t.apply_local(v[0], v[1], 3, 9, 3)
    });
    run_cases("apply_local_edge", two(vec![2, 27], vec![9, 9]), |t, v| {
        t.apply_local(v[0], v[1], 3, 9, 1)
    });
    run_cases("apply_local_wide", two(vec![2, 64], vec![4, 4]), |t, v| {
        t.apply_local(v[0], v[1], 1, 4, 16)
    });
    run_cases(
        "apply_local_qubits",
        two(vec![2, 16], vec![4, 4]),
        |t, v| t.apply_local(v[0], v[1], 2, 4, 2),
    );
    run_cases("apply_local_odd", two(vec![2, 20], vec![5, 5]), |t, v| {
        t.apply_local(v[0], v[1], 2, 5, 2)
    });
}

#[test]
fn unitarize_node() {
    run_cases("unitarize", one(vec![4, 4], -1.0, 1.0), |t, v| {
        t.unitarize(v[0]).unwrap()
    });
    run_cases("unitarize9", one(vec![9, 9], -1.0, 1.0), |t, v| {
        t.unitarize(v[0]).unwrap()
    });
}

#[test]
fn svd_unitarize_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let g = randn(&mut rng, vec![4, 4]);
        let w = randn(&mut rng, vec![4, 4]);
        let analytic = svd_unitarize_vjp(&g, &w).unwrap();
        let mut p = TensorMap::new();
        p.insert("g", g);
        let numeric = fd_gradient(
            |m| {
                let q = unitarize(m.expect("g")).unwrap();
                q.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
            &p,
            H,
        );
        let mut a = TensorMap::new();
        a.insert("g", analytic);
        let err = max_rel_err(&a, &numeric, FLOOR);
        assert!(err < 1e-4, "svd vjp relative error {err:e}");
    }
}

#[test]
fn three_layer_composition() {
    // tanh(sigmoid(x W1 + b1) W2) summed through a log-sum.
    run_cases(
        "composition",
        |rng| {
            let mut p = TensorMap::new();
            p.insert("a_x", randn(rng, vec![4, 3]));
            p.insert("b_w1", randn(rng, vec![3, 5]));
            p.insert("c_b1", randn(rng, vec![5]));
            p.insert("d_w2", randn(rng, vec![5, 2]));
            p
        },
        |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_bias(h, v[2]);
            let h = t.sigmoid(h);
            let o = t.matmul(h, v[3]);
            let o = t.tanh(o);
            let sq = t.square(o);
            let s = t.offset(sq, 1.0);
            t.ln(s)
        },
    );
}

#[test]
fn shared_parameter_adjoints_accumulate_in_any_order() {
    let build = |order: bool| {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![0.3, -0.8, 1.1]));
        let a = tape.sin(x);
        let b = tape.square(x);
        let c = tape.tanh(x);
        let (p, q) = if order { (a, c) } else { (c, a) };
        let s1 = tape.add(p, b);
        let s2 = tape.add(s1, q);
        let s = tape.sum(s2);
        tape.backward(s).unwrap()
    };
    let g1 = build(true);
    let g2 = build(false);
    for (a, b) in g1.expect("x").data().iter().zip(g2.expect("x").data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn non_finite_adjoint_names_the_parameter() {
    let mut tape = Tape::new();
    let x = tape.param("theta", Tensor::scalar(0.0));
    let l = tape.ln(x);
    let err = tape.backward(l).unwrap_err();
    assert!(err.to_string().contains("theta"));
}
