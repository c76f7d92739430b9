//! RMSE minimization over the pooled all-μ training set.
//!
//! Each mini-batch is cut into a fixed number of shards whose squared-error
//! gradients are computed in parallel and summed in shard order, so results
//! do not depend on the worker count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use autodiff::{Gradients, Tape, Tensor, TensorMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::model::Model;
use crate::{Error, Result};

/// Stream used for mini-batch shuffling.
pub const SHUFFLE_STREAM: u64 = 3;
/// Rows per forward pass when only the loss is needed.
const EVAL_CHUNK: usize = 2048;

/// `sqrt(mean((pred − label)²))` over all scalar pairs.
pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "RMSE needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let sse: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((sse / preds.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best test loss.
    pub patience: Option<usize>,
    pub shards: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            epochs: 400,
            batch_size: 500,
            seed: 0,
            patience: Some(50),
            shards: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.shards == 0 {
            return Err(Error::Domain(
                "training needs lr > 0, epochs ≥ 1, batch size ≥ 1 and shards ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Root of the mean squared error accumulated over the epoch's batches.
    pub train_l: f64,
    pub test_l: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .min_by(|a, b| a.test_l.total_cmp(&b.test_l))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,L_train,L_test,grad_norm,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, r.train_l, r.test_l, r.grad_norm, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn batch_tensor(samples: &[&Sample]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cols = samples[0].features.len();
    let feats = samples
        .iter()
        .flat_map(|s| s.features.iter().copied())
        .collect();
    let labels = samples
        .iter()
        .flat_map(|s| s.label.iter().copied())
        .collect();
    let mus = samples.iter().map(|s| s.mu).collect();
    (Tensor::matrix(samples.len(), cols, feats), mus, labels)
}

/// Sum of squared errors over `samples` and its parameter gradient.
pub fn sse_and_gradient(model: &Model, samples: &[&Sample]) -> Result<(f64, Gradients)> {
    let params = model
        .params()
        .ok_or_else(|| Error::Training("the oracle cannot be trained".into()))?;
    let (x, mus, labels) = batch_tensor(samples);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = model.forward(&mut tape, xv, &mus)?;
    let target = tape.leaf(Tensor::new(tape.value(y).shape().to_vec(), labels));
    let diff = tape.sub(y, target);
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let value = tape.value(sse).data()[0];
    let mut grads = tape.backward(sse)?;
    for (name, t) in params.iter() {
        if !grads.contains(name) {
            grads.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
    }
    Ok((value, grads))
}

/// RMSE loss over `samples` and its gradient, reduced over `shards` in order.
pub fn loss_and_gradient(
    model: &Model,
    samples: &[&Sample],
    shards: usize,
) -> Result<(f64, Gradients)> {
    if samples.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let per = samples.len().div_ceil(shards.max(1));
    let parts: Vec<Result<(f64, Gradients)>> = samples
        .par_chunks(per)
        .map(|c| sse_and_gradient(model, c))
        .collect();
    let mut sse = 0.0;
    let mut grads: Option<Gradients> = None;
    for p in parts {
        let (s, g) = p?;
        sse += s;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.accumulate(&g),
        }
    }
    let mut grads = grads.expect("at least one shard");
    let n = (samples.len() * model.dim()) as f64;
    let l = (sse / n).sqrt();
    // d sqrt(S/n) = dS / (2 n L)
    grads.scale(if l > 0.0 { 1.0 / (2.0 * n * l) } else { 0.0 });
    Ok((l, grads))
}

/// RMSE of the model's one-step predictions over a dataset.
pub fn dataset_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Shape("empty dataset".into()));
    }
    let partial: Vec<Result<f64>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let windows: Vec<Vec<f64>> = chunk.iter().map(|s| s.features.clone()).collect();
            let mus: Vec<f64> = chunk.iter().map(|s| s.mu).collect();
            let preds = model.predict_batch(&windows, &mus)?;
            Ok(preds
                .iter()
                .zip(chunk)
                .flat_map(|(p, s)| p.iter().zip(&s.label).map(|(a, b)| (a - b) * (a - b)))
                .sum())
        })
        .collect();
    let mut sse = 0.0;
    for p in partial {
        sse += p?;
    }
    Ok((sse / (samples.len() * model.dim()) as f64).sqrt())
}

/// First- and second-moment state for the adaptive optimizer.
#[derive(Clone, Debug)]
struct AdamState {
    m: TensorMap,
    v: TensorMap,
    t: i32,
}

fn apply_update(
    params: &mut TensorMap,
    grads: &Gradients,
    cfg: &TrainConfig,
    adam: &mut AdamState,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (name, p) in params.iter_mut() {
                let g = grads.expect(name);
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.lr * gi;
                }
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(adam.t);
            let c2 = 1.0 - cfg.beta2.powi(adam.t);
            for (name, p) in params.iter_mut() {
                let g = grads.expect(name).data();
                let m = adam.m.get_mut(name).expect("moment exists").data_mut();
                let v = adam.v.get_mut(name).expect("moment exists").data_mut();
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    *w -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Result of [`train`]: the parameters with the best test loss and the log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Mini-batch training of `model`. The per-epoch callback sees each record
/// as it is produced.
pub fn train_with(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Training(
            "training and test sets must be non-empty".into(),
        ));
    }
    let mut params = model
        .params()
        .ok_or_else(|| Error::Training("the oracle cannot be trained".into()))?
        .clone();
    let mut current = model.clone();
    let mut adam = AdamState {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let mut rng = crate::dataset::stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();

    let mut best = (dataset_loss(model, &test.samples)?, model.clone(), 0);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        let mut grad_sq = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let (l, grads) =
                loss_and_gradient(&current, &batch, cfg.shards).map_err(|e| match e {
                    Error::Diff(autodiff::DiffError::NonFinite { param }) => Error::Training(
                        format!("non-finite gradient for `{param}` at epoch {epoch}"),
                    ),
                    e => e,
                })?;
            if !l.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}"
                )));
            }
            if let Some(bad) = grads.first_non_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for `{bad}` at epoch {epoch}"
                )));
            }
            sse += l * l * batch.len() as f64;
            grad_sq += grads.norm().powi(2);
            batches += 1;
            apply_update(&mut params, &grads, cfg, &mut adam);
            current = current.with_params(params.clone())?;
        }
        let train_l = (sse / train.len() as f64).sqrt();
        let test_l = dataset_loss(&current, &test.samples)?;
        if !test_l.is_finite() {
            return Err(Error::Training(format!(
                "non-finite test loss at epoch {epoch}"
            )));
        }
        let rec = EpochRecord {
            epoch,
            train_l,
            test_l,
            grad_norm: (grad_sq / batches as f64).sqrt(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: L_train {train_l:.6} L_test {test_l:.6}");
        on_epoch(&rec);
        log.records.push(rec);
        if test_l < best.0 {
            best = (test_l, current.clone(), epoch);
        }
        if let Some(p) = cfg.patience {
            if epoch - best.2 >= p {
                log::info!("early stop at epoch {epoch}: no test improvement for {p} epochs");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        log,
    })
}

pub fn train(
    model: &Model,
    train_set: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, test, cfg, |_| {})
}

/// Mean and sample standard deviation; the deviation is `None` below two values.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub seeds: usize,
    pub mean_l: f64,
    pub std_l: Option<f64>,
    pub mean_l_le: f64,
    pub std_l_le: Option<f64>,
}

/// Runs `run(value, seed) -> (L, L_LE)` for every grid point and seed.
pub fn sweep(
    values: &[usize],
    seeds: &[u64],
    mut run: impl FnMut(usize, u64) -> Result<(f64, f64)>,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::Domain(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    if seeds.len() < 2 {
        log::warn!("standard deviations are undefined with fewer than two seeds");
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut ls = Vec::new();
        let mut les = Vec::new();
        for &s in seeds {
            let (l, le) = run(v, s)?;
            ls.push(l);
            les.push(le);
        }
        let (mean_l, std_l) = mean_std(&ls);
        let (mean_l_le, std_l_le) = mean_std(&les);
        rows.push(SweepRow {
            value: v,
            seeds: seeds.len(),
            mean_l,
            std_l,
            mean_l_le,
            std_l_le,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], axis: &str, w: &mut impl Write) -> Result<()> {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    writeln!(w, "{axis},seeds,L_mean,L_std,L_LE_mean,L_LE_std")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.value,
            r.seeds,
            r.mean_l,
            opt(r.std_l),
            r.mean_l_le,
            opt(r.std_l_le)
        )?;
    }
    Ok(())
}

/// Deterministic RNG for model initialization from a run seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((rmse(&[0.6, 0.9, 0.2], &[0.5, 0.8, 0.1]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(rmse(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn mean_std_of_one_value() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_of_one_point_is_one_run() {
        let rows = sweep(&[4], &[0], |v, _| Ok((v as f64, 0.5))).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_l, 4.0);
        assert!(rows[0].std_l.is_none());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, "nl", &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("nl,seeds,L_mean,L_std,"));
    }
}
