//! μ-tuned pre-processing.
//!
//! A scalar `a` is lifted to the unit vector
//! `ξ_j(a; θ) = √C(d−1, j−1) · cos(θπa/2)^{d−j} · sin(θπa/2)^{j−1}`, and a
//! feature `x` observed at hyper-parameter `μ` becomes
//! `v_k = Σ_ij ξ_i(x; θ) ξ_j(μ; θ) T_ijk`. Both `θ` and the `d×d×d` tensor `T`
//! are trained with the downstream model.

use std::f64::consts::FRAC_PI_2;

use autodiff::{Tape, Tensor, TensorMap, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::{Error, Result};

pub const THETA: &str = "encoder.theta";
pub const TENSOR: &str = "encoder.T";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d: usize,
    pub theta: f64,
    /// Shape `[d, d, d]`, indexed `T[i][j][k]`.
    pub t: Tensor,
}

impl EncoderParams {
    pub fn new(d: usize, theta: f64, t: Tensor) -> Result<Self> {
        if d < 2 {
            return Err(Error::Domain(format!(
                "encoder dimension must be at least 2, got {d}"
            )));
        }
        if t.shape() != [d, d, d] {
            return Err(Error::Shape(format!(
                "encoder tensor must be {d}×{d}×{d}, got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() || !theta.is_finite() {
            return Err(Error::Domain("encoder parameters must be finite".into()));
        }
        Ok(Self { d, theta, t })
    }

    /// θ = 1 and `T` i.i.d. normal with standard deviation `1/d`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / d as f64).expect("positive std");
        let data = (0..d * d * d).map(|_| normal.sample(rng)).collect();
        Self::new(d, 1.0, Tensor::new(vec![d, d, d], data))
    }

    pub fn insert_into(&self, params: &mut TensorMap) {
        params.insert(THETA, Tensor::scalar(self.theta));
        params.insert(TENSOR, self.t.clone());
    }

    pub fn from_params(params: &TensorMap) -> Result<Self> {
        let theta = params
            .get(THETA)
            .ok_or_else(|| Error::Schema(format!("missing `{THETA}`")))?;
        let t = params
            .get(TENSOR)
            .ok_or_else(|| Error::Schema(format!("missing `{TENSOR}`")))?;
        Self::new(t.rows(), theta.data()[0], t.clone())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `ξ(a; θ)` in dimension `d`.
pub fn feature_map(a: f64, theta: f64, d: usize) -> Vec<f64> {
    let phi = FRAC_PI_2 * theta * a;
    let (s, c) = phi.sin_cos();
    (1..=d)
        .map(|j| binomial(d - 1, j - 1).sqrt() * c.powi((d - j) as i32) * s.powi((j - 1) as i32))
        .collect()
}

/// `v_k = Σ_ij ξ_i(x) ξ_j(μ) T_ijk`.
pub fn encode(x: f64, mu: f64, params: &EncoderParams) -> Vec<f64> {
    let d = params.d;
    let xi_x = feature_map(x, params.theta, d);
    let xi_mu = feature_map(mu, params.theta, d);
    let t = params.t.data();
    let mut v = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            let w = xi_x[i] * xi_mu[j];
            for (k, vk) in v.iter_mut().enumerate() {
                *vk += w * t[(i * d + j) * d + k];
            }
        }
    }
    v
}

/// One encoded vector per scalar feature, in feature order.
pub fn encode_sample(s: &Sample, params: &EncoderParams) -> Vec<Vec<f64>> {
    s.features
        .iter()
        .map(|&x| encode(x, s.mu, params))
        .collect()
}

/// Taped `ξ` for a column of scalars `a: [N]` with a shared `θ: [1]`, giving `[N, d]`.
pub fn feature_map_taped(tape: &mut Tape, a: Var, theta: Var, d: usize) -> Var {
    let scaled = tape.scale_by(a, theta);
    let phi = tape.scale(scaled, FRAC_PI_2);
    let c = tape.cos(phi);
    let s = tape.sin(phi);
    let cols: Vec<Var> = (1..=d)
        .map(|j| {
            let cp = tape.powi(c, (d - j) as i32);
            let sp = tape.powi(s, (j - 1) as i32);
            let m = tape.mul(cp, sp);
            tape.scale(m, binomial(d - 1, j - 1).sqrt())
        })
        .collect();
    tape.concat_cols(&cols)
}

/// Taped contraction for `xs, mus: [N]`, giving `[N, d]`.
pub fn encode_taped(tape: &mut Tape, xs: Var, mus: Var, theta: Var, t: Var, d: usize) -> Var {
    let xi_x = feature_map_taped(tape, xs, theta, d);
    let xi_mu = feature_map_taped(tape, mus, theta, d);
    let outer = tape.batch_outer(xi_x, xi_mu);
    let t2 = tape.reshape(t, vec![d * d, d]);
    tape.matmul(outer, t2)
}

/// Registers `θ` and `T` from `params` on the tape.
pub fn register(tape: &mut Tape, params: &TensorMap) -> (Var, Var) {
    let theta = tape.param(THETA, params.expect(THETA).clone());
    let t = tape.param(TENSOR, params.expect(TENSOR).clone());
    (theta, t)
}
