//! LSTM baseline with a sigmoid read-out head.
//!
//! Raw variants read the window states directly (one state per step); μ-tuned
//! variants read the encoded vector of every scalar feature in order, so a 2D
//! window of `M` states becomes a sequence of `2M` vectors.

use autodiff::{sigmoid, Tape, Tensor, TensorMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::MapFamily;
use crate::encoding::{self, EncoderParams};
use crate::{Error, Result};

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub hidden: usize,
    /// Inputs pass through the μ-tuned encoder (`d_in` is then the encoder dimension).
    pub mu_tuned: bool,
}

impl LstmConfig {
    /// The baseline configuration for a system with window `window`.
    pub fn preset(family: &MapFamily, window: usize, mu_tuned: bool) -> Self {
        let dim = family.dim();
        let (d_in, seq_len) = if mu_tuned {
            (3, window * dim)
        } else {
            (dim, window)
        };
        Self {
            d_in,
            d_out: dim,
            seq_len,
            n_layers: 1,
            hidden: 8,
            mu_tuned,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    fn validate(&self, family: &MapFamily, window: usize) -> Result<()> {
        let dim = family.dim();
        let ok_seq = if self.mu_tuned {
            self.seq_len == window * dim
        } else {
            self.seq_len == window && self.d_in == dim
        };
        if !ok_seq || self.d_out != dim || self.hidden == 0 || self.n_layers == 0 || self.d_in == 0
        {
            return Err(Error::Shape(format!(
                "LSTM config {self:?} does not fit a window of {window} {dim}-D states"
            )));
        }
        Ok(())
    }
}

pub fn w_ih(layer: usize) -> String {
    format!("lstm.{layer}.w_ih")
}

pub fn w_hh(layer: usize) -> String {
    format!("lstm.{layer}.w_hh")
}

pub fn bias(layer: usize) -> String {
    format!("lstm.{layer}.b")
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// One cell's parameters. Gate blocks in the `4H` columns are ordered
/// input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    /// `[d_in, 4H]`
    pub w_ih: Tensor,
    /// `[H, 4H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

impl CellParams {
    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }
}

/// `(h', c')` for a single input vector.
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], p: &CellParams) -> (Vec<f64>, Vec<f64>) {
    let hd = p.hidden();
    let cols = 4 * hd;
    let mut z = p.b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (zk, w) in z.iter_mut().zip(&p.w_ih.data()[i * cols..(i + 1) * cols]) {
            *zk += xi * w;
        }
    }
    for (i, hi) in h.iter().enumerate() {
        for (zk, w) in z.iter_mut().zip(&p.w_hh.data()[i * cols..(i + 1) * cols]) {
            *zk += hi * w;
        }
    }
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for k in 0..hd {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hd + k]);
        let g = z[2 * hd + k].tanh();
        let o = sigmoid(z[3 * hd + k]);
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub family: MapFamily,
    pub window: usize,
    pub config: LstmConfig,
    pub params: TensorMap,
}

impl LstmModel {
    /// Uniform `±1/√H` weights, zero biases apart from the forget block.
    pub fn init(
        family: MapFamily,
        window: usize,
        config: LstmConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(&family, window)?;
        let hd = config.hidden;
        let bound = 1.0 / (hd as f64).sqrt();
        let mut uniform = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let mut params = TensorMap::new();
        for l in 0..config.n_layers {
            let d_in = if l == 0 { config.d_in } else { hd };
            params.insert(w_ih(l), uniform(vec![d_in, 4 * hd]));
            params.insert(w_hh(l), uniform(vec![hd, 4 * hd]));
            let mut b = Tensor::zeros(vec![4 * hd]);
            b.data_mut()[hd..2 * hd].fill(FORGET_BIAS);
            params.insert(bias(l), b);
        }
        params.insert(HEAD_W, uniform(vec![hd, config.d_out]));
        params.insert(HEAD_B, Tensor::zeros(vec![config.d_out]));
        if config.mu_tuned {
            EncoderParams::init(config.d_in, rng)?.insert_into(&mut params);
        }
        Ok(Self {
            family,
            window,
            config,
            params,
        })
    }

    pub fn cell(&self, layer: usize) -> CellParams {
        CellParams {
            w_ih: self.params.expect(&w_ih(layer)).clone(),
            w_hh: self.params.expect(&w_hh(layer)).clone(),
            b: self.params.expect(&bias(layer)).clone(),
        }
    }

    /// Input sequence for one window, plain arithmetic.
    pub fn sequence(&self, features: &[f64], mu: f64) -> Result<Vec<Vec<f64>>> {
        if features.len() != self.window * self.family.dim() {
            return Err(Error::Shape(format!(
                "window has {} features, expected {}",
                features.len(),
                self.window * self.family.dim()
            )));
        }
        if self.config.mu_tuned {
            let enc = EncoderParams::from_params(&self.params)?;
            Ok(features
                .iter()
                .map(|&x| encoding::encode(x, mu, &enc))
                .collect())
        } else {
            Ok(features
                .chunks(self.config.d_in)
                .map(<[f64]>::to_vec)
                .collect())
        }
    }

    /// Single-window prediction without a tape.
    pub fn predict_plain(&self, features: &[f64], mu: f64) -> Result<Vec<f64>> {
        let mut seq = self.sequence(features, mu)?;
        let hd = self.config.hidden;
        for l in 0..self.config.n_layers {
            let p = self.cell(l);
            let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
            for x in seq.iter_mut() {
                let (h2, c2) = lstm_step(x, &h, &c, &p);
                h = h2;
                c = c2;
                *x = h.clone();
            }
        }
        let last = seq.last().expect("non-empty sequence");
        let w = self.params.expect(HEAD_W);
        let b = self.params.expect(HEAD_B);
        Ok((0..self.config.d_out)
            .map(|j| {
                sigmoid(
                    b.data()[j]
                        + last
                            .iter()
                            .enumerate()
                            .map(|(k, h)| h * w.at(k, j))
                            .sum::<f64>(),
                )
            })
            .collect())
    }

    /// Taped batch prediction. `x` is `[B, M·dim]`, the result `[B, dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mus: &[f64]) -> Result<Var> {
        let cfg = self.config;
        let rows = tape.value(x).rows();
        let n_feat = self.window * self.family.dim();
        if tape.value(x).cols() != n_feat || mus.len() != rows {
            return Err(Error::Shape(format!(
                "expected {n_feat} features per window and one μ per row"
            )));
        }
        let inputs = if cfg.mu_tuned {
            let flat = tape.reshape(x, vec![rows * n_feat]);
            let mus_rep = tape.leaf(Tensor::vector(
                mus.iter()
                    .flat_map(|&m| std::iter::repeat(m).take(n_feat))
                    .collect(),
            ));
            let (theta, t) = encoding::register(tape, &self.params);
            let v = encoding::encode_taped(tape, flat, mus_rep, theta, t, cfg.d_in);
            tape.reshape(v, vec![rows, n_feat * cfg.d_in])
        } else {
            x
        };
        let mut seq: Vec<Var> = (0..cfg.seq_len)
            .map(|s| tape.slice_cols(inputs, s * cfg.d_in, cfg.d_in))
            .collect();

        let hd = cfg.hidden;
        for l in 0..cfg.n_layers {
            let wi = tape.param(w_ih(l), self.params.expect(&w_ih(l)).clone());
            let wh = tape.param(w_hh(l), self.params.expect(&w_hh(l)).clone());
            let b = tape.param(bias(l), self.params.expect(&bias(l)).clone());
            let mut h = tape.leaf(Tensor::zeros(vec![rows, hd]));
            let mut c = tape.leaf(Tensor::zeros(vec![rows, hd]));
            for xt in seq.iter_mut() {
                let zx = tape.matmul(*xt, wi);
                let zh = tape.matmul(h, wh);
                let z = tape.add(zx, zh);
                let z = tape.add_bias(z, b);
                let zi = tape.slice_cols(z, 0, hd);
                let zf = tape.slice_cols(z, hd, hd);
                let zg = tape.slice_cols(z, 2 * hd, hd);
                let zo = tape.slice_cols(z, 3 * hd, hd);
                let i = tape.sigmoid(zi);
                let f = tape.sigmoid(zf);
                let g = tape.tanh(zg);
                let o = tape.sigmoid(zo);
                let fc = tape.mul(f, c);
                let ig = tape.mul(i, g);
                c = tape.add(fc, ig);
                let tc = tape.tanh(c);
                h = tape.mul(o, tc);
                *xt = h;
            }
        }
        let hw = tape.param(HEAD_W, self.params.expect(HEAD_W).clone());
        let hb = tape.param(HEAD_B, self.params.expect(HEAD_B).clone());
        let last = *seq.last().expect("non-empty sequence");
        let out = tape.matmul(last, hw);
        let out = tape.add_bias(out, hb);
        Ok(tape.sigmoid(out))
    }
}
