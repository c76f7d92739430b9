//! Windowed one-step-ahead samples over a grid of μ values.
//!
//! Files are JSON lines: a header object followed by one object per sample.
//! Floats are written with round-trip precision so a reload is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{MapFamily, System};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;
/// Initial states are drawn from `(EDGE, 1 − EDGE)`.
pub const EDGE: f64 = 1e-6;

pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;
const SUBSAMPLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuGrid {
    pub values: Vec<f64>,
}

impl MuGrid {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { values }
    }

    /// 50 values `2.04, 2.08, …, 4.00`.
    pub fn preset_1d() -> Self {
        Self {
            values: (51..=100).map(|k| k as f64 / 25.0).collect(),
        }
    }

    /// 40 values `0.51, 0.52, …, 0.90`.
    pub fn preset_2d() -> Self {
        Self {
            values: (51..=90).map(|k| k as f64 / 100.0).collect(),
        }
    }

    pub fn preset(system: System) -> Self {
        match system {
            System::Logistic1D => Self::preset_1d(),
            System::Logistic2D => Self::preset_2d(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, mu: f64) -> bool {
        self.values.iter().any(|&v| (v - mu).abs() < 1e-12)
    }
}

/// `M` consecutive states and the state that follows them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub mu: f64,
    /// `M·dim` scalars; 2D states are interleaved `(x₁, x'₁, …, x_M, x'_M)`.
    pub features: Vec<f64>,
    pub label: Vec<f64>,
}

impl Sample {
    /// The most recent state in the window.
    pub fn last_state(&self) -> &[f64] {
        let dim = self.label.len();
        &self.features[self.features.len() - dim..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub family: MapFamily,
    pub window: usize,
    pub grid: MuGrid,
    pub role: Role,
    pub seed: u64,
    /// Grouped by μ in grid order.
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u64,
    system: System,
    beta: f64,
    #[serde(rename = "M")]
    window: usize,
    mu_grid: Vec<f64>,
    role: Role,
    seed: u64,
    count: usize,
}

/// An RNG on a dedicated stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws one initial state uniformly from the open unit box.
pub fn draw_state(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(EDGE..1.0 - EDGE)).collect()
}

/// Builds the window `x₁ … x_M` and label `x_{M+1}` from `x₁`.
pub fn window_from(family: &MapFamily, mu: f64, x1: &[f64], window: usize) -> Result<Sample> {
    let spec = family.at(mu)?;
    let traj = spec.trajectory(x1, window)?;
    let features = traj.states[..window].iter().flatten().copied().collect();
    let label = traj.states[window].clone();
    Ok(Sample {
        mu,
        features,
        label,
    })
}

fn generate_role(
    family: &MapFamily,
    grid: &MuGrid,
    per_mu: usize,
    window: usize,
    seed: u64,
    role: Role,
) -> Result<Dataset> {
    let stream = match role {
        Role::Train => TRAIN_STREAM,
        Role::Test => TEST_STREAM,
    };
    let mut rng = stream_rng(seed, stream);
    let mut samples = Vec::with_capacity(per_mu * grid.len());
    for &mu in &grid.values {
        for _ in 0..per_mu {
            let x1 = draw_state(&mut rng, family.dim());
            samples.push(window_from(family, mu, &x1, window)?);
        }
    }
    Ok(Dataset {
        family: *family,
        window,
        grid: grid.clone(),
        role,
        seed,
        samples,
    })
}

/// Generates the training and testing sets. The two draw initial states from
/// different streams of the same seed.
pub fn generate(
    family: &MapFamily,
    grid: &MuGrid,
    n_train: usize,
    n_test: usize,
    window: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Domain(
            "need at least one training and one testing sample per μ".into(),
        ));
    }
    if window == 0 {
        return Err(Error::Domain("window length M must be positive".into()));
    }
    let train = generate_role(family, grid, n_train, window, seed, Role::Train)?;
    let test = generate_role(family, grid, n_test, window, seed, Role::Test)?;
    Ok((train, test))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// Samples for one μ value.
    pub fn for_mu(&self, mu: f64) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(move |s| (s.mu - mu).abs() < 1e-12)
    }

    /// Keeps a seeded random subset of `per_mu` samples for each μ,
    /// preserving the original order within each group.
    pub fn subsample(&self, per_mu: usize, seed: u64) -> Result<Dataset> {
        let mut rng = stream_rng(seed, SUBSAMPLE_STREAM);
        let mut samples = Vec::with_capacity(per_mu * self.grid.len());
        for &mu in &self.grid.values {
            let group: Vec<&Sample> = self.for_mu(mu).collect();
            if group.len() < per_mu {
                return Err(Error::Domain(format!(
                    "μ = {mu} has {} samples, cannot draw {per_mu}",
                    group.len()
                )));
            }
            let mut picked = index::sample(&mut rng, group.len(), per_mu).into_vec();
            picked.sort_unstable();
            samples.extend(picked.into_iter().map(|i| group[i].clone()));
        }
        Ok(Dataset {
            samples,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            family: self.family,
            window: self.window,
            grid: self.grid.clone(),
            role: self.role,
            seed: self.seed,
            samples: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            schema: SCHEMA_VERSION,
            system: self.family.kind,
            beta: self.family.beta,
            window: self.window,
            mu_grid: self.grid.values.clone(),
            role: self.role,
            seed: self.seed,
            count: self.samples.len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::Schema(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Schema("empty dataset file".into()))??;
        let raw: serde_json::Value =
            serde_json::from_str(&first).map_err(|e| Error::Schema(format!("bad header: {e}")))?;
        let version = raw
            .get("schema")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Schema("header lacks `schema`".into()))?;
        if version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::Schema(format!("bad header: {e}")))?;
        let dim = header.system.dim();
        let mut samples = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("sample {i}: {e}")))?;
            if s.features.len() != header.window * dim || s.label.len() != dim {
                return Err(Error::Schema(format!(
                    "sample {i} has the wrong number of components"
                )));
            }
            samples.push(s);
        }
        if samples.len() != header.count {
            return Err(Error::Schema(format!(
                "header announces {} samples, file holds {}",
                header.count,
                samples.len()
            )));
        }
        let family = MapFamily {
            kind: header.system,
            beta: header.beta,
        };
        Ok(Dataset {
            family,
            window: header.window,
            grid: MuGrid {
                values: header.mu_grid,
            },
            role: header.role,
            seed: header.seed,
            samples,
        })
    }
}
