//! A uniform interface over the circuit, the LSTM and the exact map.

use std::path::Path;

use autodiff::{Tape, Tensor, TensorMap, Var};
use serde::{Deserialize, Serialize};

use crate::adqc::AdqcModel;
use crate::dynamics::{MapFamily, System};
use crate::lstm::LstmModel;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA: u64 = 1;

/// Default window length `M` per system.
pub fn default_window(kind: System) -> usize {
    match kind {
        System::Logistic1D => 8,
        System::Logistic2D => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    /// The true map applied to the latest state of the window.
    Oracle {
        family: MapFamily,
        window: usize,
    },
    Adqc(AdqcModel),
    Lstm(LstmModel),
}

/// Predictions `[B, dim]` with Jacobians w.r.t. the latest window state,
/// each row-major `dim×dim` (rows = outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionWithDerivative {
    pub predictions: Vec<Vec<f64>>,
    pub jacobians: Vec<Vec<f64>>,
}

impl Model {
    pub fn oracle(kind: System) -> Self {
        Model::Oracle {
            family: MapFamily::for_system(kind),
            window: default_window(kind),
        }
    }

    pub fn kind_tag(&self) -> &'static str {
        match self {
            Model::Oracle { .. } => "oracle",
            Model::Adqc(_) => "adqc",
            Model::Lstm(_) => "lstm",
        }
    }

    pub fn family(&self) -> MapFamily {
        match self {
            Model::Oracle { family, .. } => *family,
            Model::Adqc(m) => m.family,
            Model::Lstm(m) => m.family,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Model::Oracle { window, .. } => *window,
            Model::Adqc(m) => m.window,
            Model::Lstm(m) => m.window,
        }
    }

    pub fn dim(&self) -> usize {
        self.family().dim()
    }

    pub fn n_features(&self) -> usize {
        self.window() * self.dim()
    }

    pub fn params(&self) -> Option<&TensorMap> {
        match self {
            Model::Oracle { .. } => None,
            Model::Adqc(m) => Some(&m.params),
            Model::Lstm(m) => Some(&m.params),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut TensorMap> {
        match self {
            Model::Oracle { .. } => None,
            Model::Adqc(m) => Some(&mut m.params),
            Model::Lstm(m) => Some(&mut m.params),
        }
    }

    /// A copy with `params` swapped in; shapes must match.
    pub fn with_params(&self, params: TensorMap) -> Result<Model> {
        let current = self
            .params()
            .ok_or_else(|| Error::Shape("the oracle has no parameters".into()))?;
        if current.len() != params.len()
            || current.iter().any(|(k, t)| {
                params
                    .get(k)
                    .map(|p| p.shape() != t.shape())
                    .unwrap_or(true)
            })
        {
            return Err(Error::Shape(
                "parameter set does not match the model".into(),
            ));
        }
        let mut m = self.clone();
        *m.params_mut().expect("checked above") = params;
        Ok(m)
    }

    /// Taped forward over a `[B, M·dim]` batch. Not available for the oracle.
    pub fn forward(&self, tape: &mut Tape, x: Var, mus: &[f64]) -> Result<Var> {
        match self {
            Model::Oracle { .. } => Err(Error::Shape(
                "the oracle has no differentiable forward pass".into(),
            )),
            Model::Adqc(m) => m.forward(tape, x, mus),
            Model::Lstm(m) => m.forward(tape, x, mus),
        }
    }

    fn check_batch(&self, windows: &[Vec<f64>], mus: &[f64]) -> Result<()> {
        if windows.len() != mus.len() {
            return Err(Error::Shape(format!(
                "{} windows but {} μ values",
                windows.len(),
                mus.len()
            )));
        }
        let n = self.n_features();
        if let Some(w) = windows.iter().find(|w| w.len() != n) {
            return Err(Error::Shape(format!(
                "window has {} features, expected {n}",
                w.len()
            )));
        }
        Ok(())
    }

    fn batch_leaf(&self, tape: &mut Tape, windows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::matrix(
            windows.len(),
            self.n_features(),
            windows.concat(),
        ))
    }

    /// Next-state predictions for a batch of flattened windows.
    pub fn predict_batch(&self, windows: &[Vec<f64>], mus: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_batch(windows, mus)?;
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.dim();
        match self {
            Model::Oracle { family, .. } => windows
                .iter()
                .zip(mus)
                .map(|(w, &mu)| family.at(mu)?.step(&w[w.len() - dim..]))
                .collect(),
            _ => {
                let mut tape = Tape::new();
                let x = self.batch_leaf(&mut tape, windows);
                let y = self.forward(&mut tape, x, mus)?;
                Ok(tape
                    .value(y)
                    .data()
                    .chunks(dim)
                    .map(<[f64]>::to_vec)
                    .collect())
            }
        }
    }

    pub fn predict_window(&self, window: &[f64], mu: f64) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[window.to_vec()], &[mu])?.remove(0))
    }

    /// Predictions and their derivatives w.r.t. the latest state of each window.
    pub fn predict_with_derivative(
        &self,
        windows: &[Vec<f64>],
        mus: &[f64],
    ) -> Result<PredictionWithDerivative> {
        self.check_batch(windows, mus)?;
        let dim = self.dim();
        if let Model::Oracle { family, .. } = self {
            let mut out = PredictionWithDerivative {
                predictions: Vec::new(),
                jacobians: Vec::new(),
            };
            for (w, &mu) in windows.iter().zip(mus) {
                let spec = family.at(mu)?;
                let last = &w[w.len() - dim..];
                out.predictions.push(spec.step(last)?);
                out.jacobians.push(spec.jacobian(last)?);
            }
            return Ok(out);
        }
        let rows = windows.len();
        let n = self.n_features();
        let mut tape = Tape::new();
        let x = self.batch_leaf(&mut tape, windows);
        let y = self.forward(&mut tape, x, mus)?;
        let predictions: Vec<Vec<f64>> = tape
            .value(y)
            .data()
            .chunks(dim)
            .map(<[f64]>::to_vec)
            .collect();
        let mut jacobians = vec![vec![0.0; dim * dim]; rows];
        for out in 0..dim {
            let mut seed = Tensor::zeros(vec![rows, dim]);
            for r in 0..rows {
                seed.data_mut()[r * dim + out] = 1.0;
            }
            let adj = tape.adjoints_seeded(y, seed);
            let gx = adj.get_or_zero(x);
            for (r, jac) in jacobians.iter_mut().enumerate() {
                for input in 0..dim {
                    jac[out * dim + input] = gx.data()[r * n + n - dim + input];
                }
            }
        }
        Ok(PredictionWithDerivative {
            predictions,
            jacobians,
        })
    }

    /// `dF/dx_M`: a single entry in 1D, a row-major `2×2` matrix in 2D.
    pub fn derivative_window(&self, window: &[f64], mu: f64) -> Result<Vec<f64>> {
        Ok(self
            .predict_with_derivative(&[window.to_vec()], &[mu])?
            .jacobians
            .remove(0))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: Option<u64>,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub final_train_l: Option<f64>,
    pub final_test_l: Option<f64>,
    pub preset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema: u64,
    pub model: Model,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA,
            model,
            meta,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        let found = raw
            .get("schema")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Schema("checkpoint lacks a schema field".into()))?;
        if found != CHECKPOINT_SCHEMA {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_SCHEMA,
            });
        }
        let ckpt: ModelCheckpoint =
            serde_json::from_value(raw).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        if let Some(p) = ckpt.model.params() {
            if let Some(bad) = p.first_non_finite() {
                return Err(Error::Schema(format!(
                    "checkpoint parameter `{bad}` is not finite"
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads a checkpoint file; `oracle:1d` and `oracle:2d` name the exact maps.
    pub fn load(path: &Path) -> Result<Self> {
        if let Some(tag) = path.to_str().and_then(|s| s.strip_prefix("oracle:")) {
            let kind: System = tag.parse().map_err(|_| {
                Error::Schema(format!("unknown oracle `{tag}` (expected 1d or 2d)"))
            })?;
            return Ok(Self::new(Model::oracle(kind), TrainingMeta::default()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_dispatches_to_the_map() {
        let m = Model::oracle(System::Logistic1D);
        let x = 1.0 - 1.0 / 2.2;
        let w = vec![x; 8];
        assert!((m.predict_window(&w, 2.2).unwrap()[0] - x).abs() < 1e-15);
        assert!((m.derivative_window(&w, 2.2).unwrap()[0] + 0.2).abs() < 1e-12);
        assert!(matches!(
            m.predict_window(&[0.5; 3], 2.2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn oracle_path_syntax() {
        let c = ModelCheckpoint::load(Path::new("oracle:2d")).unwrap();
        assert_eq!(c.model.window(), 4);
        assert_eq!(c.model.dim(), 2);
        assert!(ModelCheckpoint::load(Path::new("oracle:3d")).is_err());
    }

    #[test]
    fn version_mismatch() {
        let c = ModelCheckpoint::new(Model::oracle(System::Logistic1D), TrainingMeta::default());
        let s = c.to_json().unwrap().replace("\"schema\":1", "\"schema\":7");
        assert!(matches!(
            ModelCheckpoint::from_json(&s),
            Err(Error::Version { found: 7, .. })
        ));
        assert!(matches!(
            ModelCheckpoint::from_json("{\"schema\":1"),
            Err(Error::Schema(_))
        ));
    }
}
