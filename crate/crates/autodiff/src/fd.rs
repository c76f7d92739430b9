//! Central finite differences, the independent oracle for every backward rule.

use crate::tensor::{Gradients, TensorMap};

/// `(f(p + h) − f(p − h)) / 2h` for every scalar entry of every parameter.
pub fn fd_gradient<F>(mut f: F, params: &TensorMap, h: f64) -> Gradients
where
    F: FnMut(&TensorMap) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.expect(name).len();
        for i in 0..n {
            let orig = params.expect(name).data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            grads.get_mut(name).unwrap().data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    grads
}

/// Central-difference derivative of a scalar function.
pub fn fd_scalar(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)` with an absolute floor for entries near zero.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst entry-wise [`rel_err`] between two gradient maps over shared names.
pub fn max_rel_err(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in a.iter() {
        let tb = b
            .get(name)
            .unwrap_or_else(|| panic!("gradient `{name}` missing on one side"));
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            worst = worst.max(rel_err(x, y, floor));
        }
    }
    worst
}
