//! Long-term scoring of one-step predictors.
//!
//! Every metric drives the model autoregressively: a window of `M` true
//! states seeds the rollout and each prediction is appended while the oldest
//! state is dropped. Rows for all μ values and initial states are advanced
//! together in parallel chunks.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{draw_state, stream_rng, window_from, MuGrid, TEST_STREAM};
use crate::dynamics::{LyapunovAccumulator, MapFamily, DEFAULT_BURN_IN, DEFAULT_T};
use crate::model::Model;
use crate::training::rmse;
use crate::{Error, Result};

/// True states with smaller magnitude are left out of the relative error.
pub const EPS_GUARD: f64 = 1e-8;
pub const ETA_LOW: f64 = 1e-3;
pub const ETA_HIGH: f64 = 0.3;
pub const MIN_FIT_POINTS: usize = 4;
pub const IMAGE_HEIGHT: usize = 256;
pub const DEFAULT_INITS: usize = 500;
pub const DEFAULT_COLLECT: usize = 64;
pub const DEFAULT_LE_RUNS: usize = 5;
pub const DEFAULT_ROLLOUT_STEPS: usize = 60;
const CHUNK: usize = 1024;

/// Windows of true states started from `inits` at the matching μ values.
pub fn seed_windows(
    family: &MapFamily,
    mus: &[f64],
    inits: &[Vec<f64>],
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    mus.iter()
        .zip(inits)
        .map(|(&mu, x1)| Ok(window_from(family, mu, x1, window)?.features))
        .collect()
}

fn predict_chunked(model: &Model, windows: &[Vec<f64>], mus: &[f64]) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Result<Vec<Vec<f64>>>> = windows
        .par_chunks(CHUNK)
        .zip(mus.par_chunks(CHUNK))
        .map(|(w, m)| model.predict_batch(w, m))
        .collect();
    let mut out = Vec::with_capacity(windows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn derivative_chunked(
    model: &Model,
    windows: &[Vec<f64>],
    mus: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let parts: Vec<_> = windows
        .par_chunks(CHUNK)
        .zip(mus.par_chunks(CHUNK))
        .map(|(w, m)| model.predict_with_derivative(w, m))
        .collect();
    let (mut preds, mut jacs) = (
        Vec::with_capacity(windows.len()),
        Vec::with_capacity(windows.len()),
    );
    for p in parts {
        let p = p?;
        preds.extend(p.predictions);
        jacs.extend(p.jacobians);
    }
    Ok((preds, jacs))
}

fn slide(windows: &mut [Vec<f64>], preds: &[Vec<f64>]) {
    for (w, p) in windows.iter_mut().zip(preds) {
        w.drain(..p.len());
        w.extend_from_slice(p);
    }
}

fn relative_error(pred: &[f64], truth: &[f64]) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, y) in pred.iter().zip(truth) {
        if y.abs() >= EPS_GUARD {
            sum += ((p - y) / y).abs();
            n += 1;
        }
    }
    (n > 0).then_some((sum, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Predicted states `x_{M+1}, …, x_{M+steps}`.
    pub predicted: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// Relative error per step.
    pub eps: Vec<f64>,
}

/// Rolls the model `steps` times from the true window started at `x0`.
pub fn rollout(model: &Model, mu: f64, x0: &[f64], steps: usize) -> Result<RolloutResult> {
    let family = model.family();
    let spec = family.at(mu)?;
    let mut window = window_from(&family, mu, x0, model.window())?.features;
    let dim = model.dim();
    let mut true_state = window[window.len() - dim..].to_vec();
    let mut out = RolloutResult {
        predicted: Vec::new(),
        truth: Vec::new(),
        eps: Vec::new(),
    };
    for _ in 0..steps {
        let p = model.predict_window(&window, mu)?;
        true_state = spec.step(&true_state)?;
        out.eps.push(
            relative_error(&p, &true_state)
                .map(|(s, n)| s / n as f64)
                .unwrap_or(f64::NAN),
        );
        slide(std::slice::from_mut(&mut window), std::slice::from_ref(&p));
        out.predicted.push(p);
        out.truth.push(true_state.clone());
    }
    Ok(out)
}

/// Mean relative error per step over an ensemble of initial states at one μ.
pub fn rollout_ensemble(
    model: &Model,
    mu: f64,
    inits: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<f64>> {
    let family = model.family();
    let spec = family.at(mu)?;
    let mus = vec![mu; inits.len()];
    let mut windows = seed_windows(&family, &mus, inits, model.window())?;
    let dim = model.dim();
    let mut truth: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| w[w.len() - dim..].to_vec())
        .collect();
    let mut eps = Vec::with_capacity(steps);
    for _ in 0..steps {
        let preds = predict_chunked(model, &windows, &mus)?;
        let mut sum = 0.0;
        let mut n = 0;
        for (p, y) in preds.iter().zip(truth.iter_mut()) {
            *y = spec.step(y)?;
            if let Some((s, k)) = relative_error(p, y) {
                sum += s;
                n += k;
            }
        }
        eps.push(if n > 0 { sum / n as f64 } else { f64::NAN });
        slide(&mut windows, &preds);
    }
    Ok(eps)
}

/// Least-squares growth rate of `ln ε(t)` (with `t` counted from 1) over the
/// first contiguous run of steps with `1e-3 ≤ ε ≤ 0.3`, which must end by
/// rising above the window.
pub fn fit_eta(eps: &[f64]) -> Result<f64> {
    let inside = |e: f64| (ETA_LOW..=ETA_HIGH).contains(&e);
    let start = eps.iter().position(|&e| inside(e));
    let (pts, grows): (Vec<(f64, f64)>, bool) = match start {
        Some(s) => {
            let pts: Vec<_> = eps[s..]
                .iter()
                .take_while(|&&e| inside(e))
                .enumerate()
                .map(|(i, e)| ((s + i + 1) as f64, e.ln()))
                .collect();
            (
                pts.clone(),
                eps.get(s + pts.len()).is_some_and(|&e| e > ETA_HIGH),
            )
        }
        None => (Vec::new(), false),
    };
    if !grows {
        return Err(Error::UndefinedFit(
            "the error never grows through the fit window".into(),
        ));
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::UndefinedFit(format!(
            "growth window holds {} points, need at least {MIN_FIT_POINTS}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(t, y)| (t - mt) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BifurcationImage {
    pub width: usize,
    pub height: usize,
    /// Row-major; row 0 is `x = 1`.
    pub pixels: Vec<u8>,
}

impl BifurcationImage {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Rows of column `col` darker than white.
    pub fn occupied_rows(&self, col: usize) -> Vec<usize> {
        (0..self.height)
            .filter(|&r| self.pixel(r, col) < 255)
            .collect()
    }

    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Schema("not an 8-bit binary PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| bad())?
                    .to_string(),
            );
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P5" || num(&fields[3])? != 255 {
            return Err(bad());
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BifurcationOptions {
    pub n_inits: usize,
    pub burn_in: usize,
    pub collect: usize,
    pub seed: u64,
}

impl Default for BifurcationOptions {
    fn default() -> Self {
        Self {
            n_inits: DEFAULT_INITS,
            burn_in: DEFAULT_BURN_IN,
            collect: DEFAULT_COLLECT,
            seed: 0,
        }
    }
}

/// Histogram of the first state component after burn-in, one column per μ.
pub fn bifurcation(
    model: &Model,
    grid: &MuGrid,
    opts: &BifurcationOptions,
) -> Result<BifurcationImage> {
    if opts.n_inits == 0 || opts.collect == 0 {
        return Err(Error::Domain(
            "bifurcation needs at least one initial state and one collected step".into(),
        ));
    }
    let family = model.family();
    let mut rng = stream_rng(opts.seed, TEST_STREAM);
    let mut mus = Vec::with_capacity(grid.len() * opts.n_inits);
    let mut inits = Vec::with_capacity(mus.capacity());
    for &mu in &grid.values {
        for _ in 0..opts.n_inits {
            mus.push(mu);
            inits.push(draw_state(&mut rng, family.dim()));
        }
    }
    let mut windows = seed_windows(&family, &mus, &inits, model.window())?;
    let width = grid.len();
    let mut counts = vec![0u64; width * IMAGE_HEIGHT];
    for step in 0..opts.burn_in + opts.collect {
        let preds = predict_chunked(model, &windows, &mus)?;
        if step >= opts.burn_in {
            for (row, p) in preds.iter().enumerate() {
                let col = row / opts.n_inits;
                let bin =
                    ((p[0].clamp(0.0, 1.0) * IMAGE_HEIGHT as f64) as usize).min(IMAGE_HEIGHT - 1);
                counts[(IMAGE_HEIGHT - 1 - bin) * width + col] += 1;
            }
        }
        slide(&mut windows, &preds);
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let pixels = counts
        .iter()
        .map(|&c| 255 - (255.0 * c as f64 / max).floor() as u8)
        .collect();
    Ok(BifurcationImage {
        width,
        height: IMAGE_HEIGHT,
        pixels,
    })
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical images.
pub fn psnr(a: &BifurcationImage, b: &BifurcationImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "images are {}×{} and {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.pixels.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovOptions {
    pub t: usize,
    pub burn_in: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            t: DEFAULT_T,
            burn_in: DEFAULT_BURN_IN,
            runs: DEFAULT_LE_RUNS,
            seed: 0,
        }
    }
}

/// Model and true spectra at one μ, each averaged over the same runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovPoint {
    pub mu: f64,
    pub model: Vec<f64>,
    pub truth: Vec<f64>,
}

impl LyapunovPoint {
    /// Whether the leading exponents share a sign.
    pub fn sign_agrees(&self) -> bool {
        (self.model[0] > 0.0) == (self.truth[0] > 0.0)
    }
}

/// Lyapunov spectra of the model's own rollouts, using the derivative of each
/// prediction with respect to the latest window state. The reference truth
/// starts from the last state of the same initial windows.
pub fn model_lyapunov(
    model: &Model,
    grid: &MuGrid,
    opts: &LyapunovOptions,
) -> Result<Vec<LyapunovPoint>> {
    if opts.runs == 0 || opts.t == 0 {
        return Err(Error::Domain(
            "Lyapunov estimate needs T ≥ 1 and at least one run".into(),
        ));
    }
    let family = model.family();
    let dim = family.dim();
    let mut rng = stream_rng(opts.seed, TEST_STREAM);
    let mut mus = Vec::new();
    let mut inits = Vec::new();
    for &mu in &grid.values {
        for _ in 0..opts.runs {
            mus.push(mu);
            inits.push(draw_state(&mut rng, dim));
        }
    }
    let mut windows = seed_windows(&family, &mus, &inits, model.window())?;
    let starts: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| w[w.len() - dim..].to_vec())
        .collect();

    for _ in 0..opts.burn_in {
        let preds = predict_chunked(model, &windows, &mus)?;
        slide(&mut windows, &preds);
    }
    let mut accs: Vec<LyapunovAccumulator> = (0..windows.len())
        .map(|_| LyapunovAccumulator::new(dim))
        .collect();
    for _ in 0..opts.t {
        let (preds, jacs) = derivative_chunked(model, &windows, &mus)?;
        for (acc, j) in accs.iter_mut().zip(&jacs) {
            acc.push(j);
        }
        slide(&mut windows, &preds);
    }

    let mut out = Vec::with_capacity(grid.len());
    for (i, &mu) in grid.values.iter().enumerate() {
        let spec = family.at(mu)?;
        let mut m = vec![0.0; dim];
        let mut t = vec![0.0; dim];
        for r in i * opts.runs..(i + 1) * opts.runs {
            let ms = accs[r].finish(opts.burn_in);
            let ts = spec.lyapunov_true(&starts[r], opts.t, opts.burn_in)?;
            for k in 0..dim {
                m[k] += ms.exponents[k] / opts.runs as f64;
                t[k] += ts.exponents[k] / opts.runs as f64;
            }
        }
        out.push(LyapunovPoint {
            mu,
            model: m,
            truth: t,
        });
    }
    Ok(out)
}

/// RMSE between model and true exponents over every (μ, index) pair.
pub fn l_le(model: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if model.len() != truth.len() || model.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape(
            "model and true spectra are not aligned".into(),
        ));
    }
    rmse(&model.concat(), &truth.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub points: Vec<LyapunovPoint>,
    pub l_le: f64,
    pub sign_agreement: Vec<bool>,
    pub sign_accuracy: f64,
}

impl LyapunovReport {
    pub fn from_points(points: Vec<LyapunovPoint>) -> Result<Self> {
        let model: Vec<Vec<f64>> = points.iter().map(|p| p.model.clone()).collect();
        let truth: Vec<Vec<f64>> = points.iter().map(|p| p.truth.clone()).collect();
        let l_le = l_le(&model, &truth)?;
        let sign_agreement: Vec<bool> = points.iter().map(LyapunovPoint::sign_agrees).collect();
        let sign_accuracy =
            sign_agreement.iter().filter(|&&b| b).count() as f64 / points.len().max(1) as f64;
        Ok(Self {
            points,
            l_le,
            sign_agreement,
            sign_accuracy,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaFit {
    pub mu: f64,
    pub eta: Option<f64>,
    pub eps: Vec<f64>,
}

/// Which artifacts [`evaluate`] produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub bifurcation: bool,
    pub lyapunov: bool,
    pub rollout: bool,
}

impl Selection {
    pub const ALL: Selection = Selection {
        bifurcation: true,
        lyapunov: true,
        rollout: true,
    };
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let none = Selection {
            bifurcation: false,
            lyapunov: false,
            rollout: false,
        };
        match s {
            "bifurcation" => Ok(Selection {
                bifurcation: true,
                ..none
            }),
            "lyapunov" => Ok(Selection {
                lyapunov: true,
                ..none
            }),
            "rollout" => Ok(Selection {
                rollout: true,
                ..none
            }),
            "all" => Ok(Selection::ALL),
            other => Err(Error::Domain(format!("unknown evaluation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bifurcation: BifurcationOptions,
    pub lyapunov: LyapunovOptions,
    pub rollout_steps: usize,
    pub rollout_inits: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bifurcation: BifurcationOptions::default(),
            lyapunov: LyapunovOptions::default(),
            rollout_steps: DEFAULT_ROLLOUT_STEPS,
            rollout_inits: DEFAULT_INITS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub model_kind: String,
    pub mu: Vec<f64>,
    /// μ values not on the system's training grid.
    pub extrapolated: Vec<bool>,
    pub lyapunov: Option<LyapunovReport>,
    /// `None` for identical images as well as when no image was rendered.
    pub psnr: Option<f64>,
    pub eta: Vec<EtaFit>,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub model_image: Option<BifurcationImage>,
    pub truth_image: Option<BifurcationImage>,
}

/// Runs the selected metrics of `model` over `grid`.
pub fn evaluate(
    model: &Model,
    grid: &MuGrid,
    what: Selection,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let family = model.family();
    let training_grid = MuGrid::preset(family.kind);
    let mut report = EvalReport {
        system: family.kind.tag().to_string(),
        model_kind: model.kind_tag().to_string(),
        mu: grid.values.clone(),
        extrapolated: grid
            .values
            .iter()
            .map(|&m| !training_grid.contains(m))
            .collect(),
        lyapunov: None,
        psnr: None,
        eta: Vec::new(),
    };
    let (mut model_image, mut truth_image) = (None, None);
    if what.bifurcation {
        let truth = Model::Oracle {
            family,
            window: model.window(),
        };
        let img = bifurcation(model, grid, &opts.bifurcation)?;
        let reference = bifurcation(
            &truth,
            grid,
            &BifurcationOptions {
                seed: opts.bifurcation.seed.wrapping_add(1),
                ..opts.bifurcation
            },
        )?;
        let p = psnr(&img, &reference)?;
        report.psnr = p.is_finite().then_some(p);
        model_image = Some(img);
        truth_image = Some(reference);
    }
    let lyapunov = if what.lyapunov || what.rollout {
        let points = if what.lyapunov {
            model_lyapunov(model, grid, &opts.lyapunov)?
        } else {
            let oracle = Model::Oracle {
                family,
                window: model.window(),
            };
            model_lyapunov(&oracle, grid, &opts.lyapunov)?
        };
        Some(LyapunovReport::from_points(points)?)
    } else {
        None
    };
    if what.rollout {
        let chaotic: Vec<f64> = lyapunov
            .as_ref()
            .expect("computed above")
            .points
            .iter()
            .filter(|p| p.truth[0] > 0.0)
            .map(|p| p.mu)
            .collect();
        let mut rng = stream_rng(opts.seed, TEST_STREAM);
        for mu in chaotic {
            let inits: Vec<Vec<f64>> = (0..opts.rollout_inits)
                .map(|_| draw_state(&mut rng, family.dim()))
                .collect();
            let eps = rollout_ensemble(model, mu, &inits, opts.rollout_steps)?;
            report.eta.push(EtaFit {
                mu,
                eta: fit_eta(&eps).ok(),
                eps,
            });
        }
    }
    if what.lyapunov {
        report.lyapunov = lyapunov;
    }
    Ok(Evaluation {
        report,
        model_image,
        truth_image,
    })
}

impl EvalReport {
    /// One row per μ: true and model exponents plus sign agreement.
    pub fn write_lyapunov_csv(&self, w: &mut impl Write) -> Result<()> {
        let Some(ly) = &self.lyapunov else {
            return Err(Error::Domain("report has no Lyapunov section".into()));
        };
        let dim = ly.points.first().map(|p| p.truth.len()).unwrap_or(1);
        let mut header = vec!["mu".to_string(), "extrapolated".to_string()];
        header.extend((1..=dim).map(|k| format!("true_le_{k}")));
        header.extend((1..=dim).map(|k| format!("model_le_{k}")));
        header.push("sign_agree".into());
        writeln!(w, "{}", header.join(","))?;
        for ((p, agree), extra) in ly
            .points
            .iter()
            .zip(&ly.sign_agreement)
            .zip(&self.extrapolated)
        {
            let mut row = vec![p.mu.to_string(), extra.to_string()];
            row.extend(p.truth.iter().map(f64::to_string));
            row.extend(p.model.iter().map(f64::to_string));
            row.push(agree.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Long format `mu,t,eps` for every rollout curve.
    pub fn write_rollout_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "mu,t,eps")?;
        for fit in &self.eta {
            for (i, e) in fit.eps.iter().enumerate() {
                writeln!(w, "{},{},{}", fit.mu, i + 1, e)?;
            }
        }
        Ok(())
    }
}
