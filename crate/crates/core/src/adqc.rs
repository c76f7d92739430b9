//! Simulated automatically-differentiable quantum circuit.
//!
//! Each feature is encoded to a `d`-vector, normalized and placed on its own
//! qudit; the product state passes through a brick-wall of two-site gates
//! whose orthogonal matrices are the polar factors of unconstrained latent
//! `d²×d²` matrices. The prediction for a target site is the probability of
//! finding it in level 0.
//!
//! Gates outside the backward light cone of the measured sites cancel against
//! their transposes in the readout, so predictions are computed on the
//! smallest contiguous block of sites that contains the cone. The full-state
//! route ([`embed`], [`apply_circuit`], [`readout`]) is kept for inspection
//! and cross-checking.

use autodiff::{unitarize as polar, Tape, Tensor, TensorMap, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::dynamics::MapFamily;
use crate::encoding::{self, EncoderParams};
use crate::{Error, Result};

/// Standard deviation of the noise added to identity latent gates at init.
pub const GATE_INIT_STD: f64 = 0.01;
/// Encoded site vectors with a smaller squared norm are rejected.
const MIN_SITE_NORM_SQ: f64 = 1e-200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitLayout {
    pub n_sites: usize,
    pub d: usize,
    pub n_layers: usize,
}

/// A two-site gate acting on `site` and `site + 1` (0-based) in `layer` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatePlacement {
    pub layer: usize,
    pub site: usize,
}

/// Sites `lo..=hi` and the gates (indices into [`CircuitLayout::gates`])
/// that can influence the measured sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LightCone {
    pub lo: usize,
    pub hi: usize,
    pub gates: Vec<usize>,
}

impl CircuitLayout {
    pub fn new(n_sites: usize, d: usize, n_layers: usize) -> Result<Self> {
        if n_sites < 2 || d < 2 || n_layers == 0 {
            return Err(Error::Domain(format!(
                "circuit needs ≥2 sites, d ≥ 2 and ≥1 layer (got {n_sites}, {d}, {n_layers})"
            )));
        }
        Ok(Self {
            n_sites,
            d,
            n_layers,
        })
    }

    /// Gates in application order. Odd layers pair (1,2),(3,4),…; even layers
    /// pair (2,3),(4,5),… in 1-based site numbering.
    pub fn gates(&self) -> Vec<GatePlacement> {
        let mut out = Vec::new();
        for layer in 1..=self.n_layers {
            let start = if layer % 2 == 1 { 0 } else { 1 };
            let mut site = start;
            while site + 1 < self.n_sites {
                out.push(GatePlacement { layer, site });
                site += 2;
            }
        }
        out
    }

    pub fn n_gates(&self) -> usize {
        self.gates().len()
    }

    pub fn light_cone(&self, targets: &[usize]) -> LightCone {
        let gates = self.gates();
        let mut inside = vec![false; self.n_sites];
        for &t in targets {
            inside[t] = true;
        }
        let mut used = Vec::new();
        for (g, p) in gates.iter().enumerate().rev() {
            if inside[p.site] || inside[p.site + 1] {
                inside[p.site] = true;
                inside[p.site + 1] = true;
                used.push(g);
            }
        }
        used.reverse();
        let lo = inside.iter().position(|&b| b).unwrap_or(0);
        let hi = inside.iter().rposition(|&b| b).unwrap_or(0);
        LightCone {
            lo,
            hi,
            gates: used,
        }
    }
}

pub fn gate_name(g: usize) -> String {
    format!("gate.{g:03}")
}

/// Dense real amplitudes of `n_sites` qudits, first site most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensor {
    pub d: usize,
    pub n_sites: usize,
    pub amps: Vec<f64>,
}

impl StateTensor {
    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Normalizes every site vector and forms their tensor product.
pub fn embed(vectors: &[Vec<f64>]) -> Result<StateTensor> {
    let d = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Embedding("no site vectors".into()))?;
    let mut amps = vec![1.0];
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "site {i} has dimension {} instead of {d}",
                v.len()
            )));
        }
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if !(n2 > MIN_SITE_NORM_SQ) || !n2.is_finite() {
            return Err(Error::Embedding(format!(
                "site {i} vector has zero or non-finite norm"
            )));
        }
        let n = n2.sqrt();
        amps = amps
            .iter()
            .flat_map(|a| v.iter().map(move |x| a * x / n))
            .collect();
    }
    Ok(StateTensor {
        d,
        n_sites: vectors.len(),
        amps,
    })
}

/// The orthogonal polar factor `U Vᵀ` of a latent gate.
pub fn unitarize(g: &Tensor) -> Result<Tensor> {
    Ok(polar(g)?)
}

fn apply_gate(state: &mut StateTensor, gate: &Tensor, site: usize) {
    let d = state.d;
    let k = d * d;
    let right = d.pow((state.n_sites - site - 2) as u32);
    let left = d.pow(site as u32);
    let g = gate.data();
    let mut buf = vec![0.0; k];
    for l in 0..left {
        for r in 0..right {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = state.amps[(l * k + j) * right + r];
            }
            for i in 0..k {
                state.amps[(l * k + i) * right + r] = g[i * k..(i + 1) * k]
                    .iter()
                    .zip(&buf)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
}

/// Applies every gate of the layout, layer by layer, to the full state.
pub fn apply_circuit(
    state: &StateTensor,
    latent: &[Tensor],
    layout: &CircuitLayout,
) -> Result<StateTensor> {
    let placements = layout.gates();
    if latent.len() != placements.len() {
        return Err(Error::Shape(format!(
            "layout needs {} gates, got {}",
            placements.len(),
            latent.len()
        )));
    }
    if state.n_sites != layout.n_sites || state.d != layout.d {
        return Err(Error::Shape(
            "state does not match the circuit layout".into(),
        ));
    }
    let k = layout.d * layout.d;
    let mut out = state.clone();
    for (p, g) in placements.iter().zip(latent) {
        if g.shape() != [k, k] {
            return Err(Error::Shape(format!(
                "latent gate must be {k}×{k}, got {:?}",
                g.shape()
            )));
        }
        apply_gate(&mut out, &unitarize(g)?, p.site);
    }
    Ok(out)
}

/// Probability of level 0 on each target site, normalized by the total norm.
pub fn readout(state: &StateTensor, targets: &[usize]) -> Vec<f64> {
    let d = state.d;
    let total: f64 = state.amps.iter().map(|a| a * a).sum();
    targets
        .iter()
        .map(|&t| {
            let right = d.pow((state.n_sites - t - 1) as u32);
            let p0: f64 = state
                .amps
                .iter()
                .enumerate()
                .filter(|(idx, _)| (idx / right) % d == 0)
                .map(|(_, a)| a * a)
                .sum();
            p0 / total
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdqcModel {
    pub family: MapFamily,
    /// States per window `M`; the circuit has `M·dim` sites.
    pub window: usize,
    pub layout: CircuitLayout,
    /// Encoder `θ`, `T` and latent gates `gate.NNN`, row-major.
    pub params: TensorMap,
}

impl AdqcModel {
    pub fn init(
        family: MapFamily,
        window: usize,
        d: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layout = CircuitLayout::new(window * family.dim(), d, n_layers)?;
        let mut params = TensorMap::new();
        EncoderParams::init(d, rng)?.insert_into(&mut params);
        let k = d * d;
        let noise = Normal::new(0.0, GATE_INIT_STD).expect("positive std");
        for g in 0..layout.n_gates() {
            let mut t = Tensor::identity(k);
            for x in t.data_mut() {
                *x += noise.sample(rng);
            }
            params.insert(gate_name(g), t);
        }
        Ok(Self {
            family,
            window,
            layout,
            params,
        })
    }

    pub fn encoder(&self) -> Result<EncoderParams> {
        EncoderParams::from_params(&self.params)
    }

    pub fn latent_gates(&self) -> Vec<Tensor> {
        (0..self.layout.n_gates())
            .map(|g| self.params.expect(&gate_name(g)).clone())
            .collect()
    }

    /// Measured sites: the last (1D) or the last two (2D), one per state component.
    pub fn targets(&self) -> Vec<usize> {
        let n = self.layout.n_sites;
        (n - self.family.dim()..n).collect()
    }

    /// Full-state prediction for one sample, bypassing the light cone.
    pub fn predict_full(&self, sample: &Sample) -> Result<Vec<f64>> {
        let vectors = encoding::encode_sample(sample, &self.encoder()?);
        let state = embed(&vectors)?;
        let out = apply_circuit(&state, &self.latent_gates(), &self.layout)?;
        Ok(readout(&out, &self.targets()))
    }

    /// Taped batch prediction. `x` is `[B, M·dim]`, the result `[B, dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mus: &[f64]) -> Result<Var> {
        let d = self.layout.d;
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.layout.n_sites || mus.len() != rows {
            return Err(Error::Shape(format!(
                "expected {} features per window and one μ per row",
                self.layout.n_sites
            )));
        }
        let targets = self.targets();
        let cone = self.layout.light_cone(&targets);
        let width = cone.hi - cone.lo + 1;

        let xs = tape.slice_cols(x, cone.lo, width);
        let xs = tape.reshape(xs, vec![rows * width]);
        let mus_rep = tape.leaf(Tensor::vector(
            mus.iter()
                .flat_map(|&m| std::iter::repeat(m).take(width))
                .collect(),
        ));
        let (theta, t) = encoding::register(tape, &self.params);
        let v = encoding::encode_taped(tape, xs, mus_rep, theta, t, d);

        let sq = tape.square(v);
        let n2 = tape.row_sum(sq);
        if let Some(bad) = tape
            .value(n2)
            .data()
            .iter()
            .position(|&n| !(n > MIN_SITE_NORM_SQ) || !n.is_finite())
        {
            return Err(Error::Embedding(format!(
                "encoded site vector {} of window {} has zero or non-finite norm",
                bad % width + cone.lo,
                bad / width
            )));
        }
        let nrm = tape.sqrt(n2);
        let vn = tape.div_rows(v, nrm);
        let vn = tape.reshape(vn, vec![rows, width * d]);
        let mut state = tape.slice_cols(vn, 0, d);
        for s in 1..width {
            let site = tape.slice_cols(vn, s * d, d);
            state = tape.batch_outer(state, site);
        }

        let placements = self.layout.gates();
        for &g in &cone.gates {
            let p = placements[g];
            let latent = tape.param(gate_name(g), self.params.expect(&gate_name(g)).clone());
            let u = tape.unitarize(latent)?;
            let left = d.pow((p.site - cone.lo) as u32);
            let right = d.pow((cone.hi - p.site - 1) as u32);
            state = tape.apply_local(state, u, left, d * d, right);
        }

        let probs = tape.square(state);
        let total = tape.row_sum(probs);
        let outs: Vec<Var> = targets
            .iter()
            .map(|&t| {
                let left = d.pow((t - cone.lo) as u32);
                let right = d.pow((cone.hi - t) as u32);
                let marg = tape.group_sum(probs, left, d, right);
                let p0 = tape.slice_cols(marg, 0, 1);
                let p0 = tape.reshape(p0, vec![rows]);
                tape.div(p0, total)
            })
            .collect();
        Ok(tape.concat_cols(&outs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn brick_wall_placements() {
        let l = CircuitLayout::new(8, 3, 4).unwrap();
        let g = l.gates();
        assert_eq!(g.len(), 14);
        assert_eq!(g[0], GatePlacement { layer: 1, site: 0 });
        assert_eq!(g[4], GatePlacement { layer: 2, site: 1 });
        assert!(g.iter().all(|p| p.site + 1 < 8));
        assert!(CircuitLayout::new(1, 3, 4).is_err());
    }

    #[test]
    fn light_cone_of_last_site() {
        let l = CircuitLayout::new(8, 3, 4).unwrap();
        let c = l.light_cone(&[7]);
        assert_eq!((c.lo, c.hi), (4, 7));
        assert_eq!(c.gates.len(), 4);
        let c2 = l.light_cone(&[6, 7]);
        assert_eq!((c2.lo, c2.hi), (2, 7));
        assert_eq!(c2.gates.len(), 8);
    }

    #[test]
    fn embed_examples() {
        let s = embed(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(s.amps.iter().filter(|&&a| a != 0.0).count(), 1);
        assert_eq!(s.amps[0], 1.0);
        let a = vec![0.6, 0.8];
        let b = vec![0.0, 1.0];
        let s = embed(&[a, b]).unwrap();
        assert_eq!(s.amps, vec![0.0, 0.6, 0.0, 0.8]);
        assert!(matches!(
            embed(&[vec![0.0, 0.0, 0.0]]),
            Err(Error::Embedding(_))
        ));
    }

    #[test]
    fn readout_examples() {
        let a = vec![0.3, 0.5, 0.2];
        let r = readout(&embed(&[a.clone(), vec![1.0, 0.0, 0.0]]).unwrap(), &[1]);
        assert!((r[0] - 1.0).abs() < 1e-15);
        let r = readout(&embed(&[a.clone(), vec![0.0, 1.0, 0.0]]).unwrap(), &[1]);
        assert_eq!(r[0], 0.0);
        let r = readout(
            &embed(&[a, vec![0.3f64.sqrt(), 0.7f64.sqrt(), 0.0]]).unwrap(),
            &[1],
        );
        assert!((r[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn identity_gates_leave_state_unchanged() {
        let l = CircuitLayout::new(4, 3, 3).unwrap();
        let s = embed(&[
            vec![0.1, 0.2, 0.3],
            vec![1.0, -1.0, 0.5],
            vec![0.0, 0.4, 0.1],
            vec![0.7, 0.7, 0.0],
        ])
        .unwrap();
        let gates = vec![Tensor::identity(9); l.n_gates()];
        let out = apply_circuit(&s, &gates, &l).unwrap();
        for (a, b) in out.amps.iter().zip(&s.amps) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn swap_gate_permutes_sites() {
        let d = 3;
        let mut swap = Tensor::zeros(vec![9, 9]);
        for i in 0..d {
            for j in 0..d {
                swap.data_mut()[(j * d + i) * 9 + (i * d + j)] = 1.0;
            }
        }
        let l = CircuitLayout::new(2, 3, 1).unwrap();
        let a = vec![0.6, 0.8, 0.0];
        let b = vec![0.0, 0.0, 1.0];
        let out = apply_circuit(&embed(&[a.clone(), b.clone()]).unwrap(), &[swap], &l).unwrap();
        let expect = embed(&[b, a]).unwrap();
        for (x, y) in out.amps.iter().zip(&expect.amps) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let l = CircuitLayout::new(3, 3, 2).unwrap();
        let s = embed(&vec![vec![1.0, 0.0, 0.0]; 3]).unwrap();
        assert!(matches!(
            apply_circuit(&s, &[Tensor::identity(9)], &l),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn light_cone_route_matches_full_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (family, window, mu) in [
            (MapFamily::logistic_1d(), 8, 3.3),
            (MapFamily::logistic_2d(0.1), 4, 0.7),
        ] {
            let mut m = AdqcModel::init(family, window, 3, 4, &mut rng).unwrap();
            // push gates far from identity so every gate matters
            for (_, t) in m.params.iter_mut() {
                for x in t.data_mut() {
                    *x += rng.gen_range(-1.0..1.0);
                }
            }
            let feats: Vec<f64> = (0..window * family.dim())
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            let sample = Sample {
                mu,
                features: feats.clone(),
                label: vec![0.0; family.dim()],
            };
            let full = m.predict_full(&sample).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(1, feats.len(), feats));
            let y = m.forward(&mut tape, x, &[mu]).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&full) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
