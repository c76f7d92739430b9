//! Exact logistic maps and their Lyapunov spectra.
//!
//! * 1D: `x ↦ μ x (1 − x)` with `0 ≤ μ ≤ 4`.
//! * 2D: `(x, x') ↦ (4μ x(1 − x) + β x', 4μ x'(1 − x') + β x)` with a shared
//!   `μ ∈ (0, 0.9]`, `β ≥ 0` and `μ + β ≤ 1`, which keeps the unit square
//!   invariant.
//!
//! Lyapunov exponents go through [`LyapunovAccumulator`], which both the
//! ground truth here and the learned models in [`crate::evaluation`] feed
//! with per-step Jacobians, so the two paths share every arithmetic step.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default number of summed steps.
pub const DEFAULT_T: usize = 264;
/// Default transient discarded before summation.
pub const DEFAULT_BURN_IN: usize = 200;
/// Floor for the argument of `ln |·|`; a derivative below it marks a
/// superstable orbit.
pub const LOG_FLOOR: f64 = 1e-300;

/// Overshoot past `[0, 1]` attributed to rounding and clamped away.
const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "1d")]
    Logistic1D,
    #[serde(rename = "2d")]
    Logistic2D,
}

impl System {
    /// Number of state components.
    pub fn dim(self) -> usize {
        match self {
            System::Logistic1D => 1,
            System::Logistic2D => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            System::Logistic1D => "1d",
            System::Logistic2D => "2d",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(System::Logistic1D),
            "2d" => Ok(System::Logistic2D),
            other => Err(Error::Domain(format!(
                "unknown system `{other}` (expected 1d or 2d)"
            ))),
        }
    }
}

/// A map family with every hyper-parameter fixed except μ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFamily {
    pub kind: System,
    /// Coupling of the 2D map; ignored in 1D.
    pub beta: f64,
}

impl MapFamily {
    pub const DEFAULT_BETA: f64 = 0.1;

    pub fn logistic_1d() -> Self {
        Self {
            kind: System::Logistic1D,
            beta: 0.0,
        }
    }

    pub fn logistic_2d(beta: f64) -> Self {
        Self {
            kind: System::Logistic2D,
            beta,
        }
    }

    pub fn for_system(kind: System) -> Self {
        match kind {
            System::Logistic1D => Self::logistic_1d(),
            System::Logistic2D => Self::logistic_2d(Self::DEFAULT_BETA),
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn at(&self, mu: f64) -> Result<MapSpec> {
        MapSpec::new(self.kind, mu, self.beta)
    }
}

/// A fully specified map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    kind: System,
    mu: f64,
    beta: f64,
}

impl MapSpec {
    pub fn new(kind: System, mu: f64, beta: f64) -> Result<Self> {
        match kind {
            System::Logistic1D => {
                if !(0.0..=4.0).contains(&mu) {
                    return Err(Error::Domain(format!(
                        "1D logistic map needs 0 ≤ μ ≤ 4, got {mu}"
                    )));
                }
            }
            System::Logistic2D => {
                if !(mu > 0.0 && mu <= 0.9) {
                    return Err(Error::Domain(format!(
                        "2D logistic map needs 0 < μ ≤ 0.9, got {mu}"
                    )));
                }
                if !(beta >= 0.0) || mu + beta > 1.0 + ROUNDING_SLACK {
                    return Err(Error::Domain(format!(
                        "2D logistic map needs β ≥ 0 and μ + β ≤ 1, got μ={mu}, β={beta}"
                    )));
                }
            }
        }
        Ok(Self { kind, mu, beta })
    }

    pub fn logistic_1d(mu: f64) -> Result<Self> {
        Self::new(System::Logistic1D, mu, 0.0)
    }

    pub fn logistic_2d(mu: f64, beta: f64) -> Result<Self> {
        Self::new(System::Logistic2D, mu, beta)
    }

    pub fn kind(&self) -> System {
        self.kind
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{}-dimensional map got a state of length {}",
                self.dim(),
                state.len()
            )));
        }
        if let Some(x) = state.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!("state component {x} outside [0, 1]")));
        }
        Ok(())
    }

    /// Writes `f(state)` into `out` without validating the input.
    pub(crate) fn step_into(&self, state: &[f64], out: &mut [f64]) {
        match self.kind {
            System::Logistic1D => out[0] = settle(self.mu * state[0] * (1.0 - state[0])),
            System::Logistic2D => {
                let (x, y) = (state[0], state[1]);
                let a = 4.0 * self.mu;
                out[0] = settle(a * x * (1.0 - x) + self.beta * y);
                out[1] = settle(a * y * (1.0 - y) + self.beta * x);
            }
        }
    }

    /// Row-major Jacobian of the map at `state`, without validation.
    pub(crate) fn jacobian_into(&self, state: &[f64], out: &mut [f64]) {
        match self.kind {
            System::Logistic1D => out[0] = self.mu * (1.0 - 2.0 * state[0]),
            System::Logistic2D => {
                let a = 4.0 * self.mu;
                out[0] = a * (1.0 - 2.0 * state[0]);
                out[1] = self.beta;
                out[2] = self.beta;
                out[3] = a * (1.0 - 2.0 * state[1]);
            }
        }
    }

    /// One application of the map. Both 2D components are updated from the
    /// same input state.
    pub fn step(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut out = vec![0.0; self.dim()];
        self.step_into(state, &mut out);
        Ok(out)
    }

    /// Row-major Jacobian: a single entry in 1D, `[∂f₁/∂x, ∂f₁/∂x', ∂f₂/∂x, ∂f₂/∂x']` in 2D.
    pub fn jacobian(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut out = vec![0.0; self.dim() * self.dim()];
        self.jacobian_into(state, &mut out);
        Ok(out)
    }

    /// The orbit `x0, f(x0), …, f^steps(x0)`.
    pub fn trajectory(&self, x0: &[f64], steps: usize) -> Result<Trajectory> {
        if steps == 0 {
            return Err(Error::Domain("trajectory needs at least one step".into()));
        }
        self.check_state(x0)?;
        let dim = self.dim();
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0.to_vec());
        let mut cur = x0.to_vec();
        let mut next = vec![0.0; dim];
        for _ in 0..steps {
            self.step_into(&cur, &mut next);
            self.check_state(&next)?;
            std::mem::swap(&mut cur, &mut next);
            states.push(cur.clone());
        }
        Ok(Trajectory {
            states,
            mu: self.mu,
        })
    }

    /// Ground-truth Lyapunov spectrum: discard `burn_in` steps from `x0`, then
    /// average `ln |f'|` (1D) or the propagated QR diagonal (2D) over `t` steps.
    pub fn lyapunov_true(&self, x0: &[f64], t: usize, burn_in: usize) -> Result<LyapunovSpectrum> {
        if t == 0 {
            return Err(Error::Domain("Lyapunov exponent needs T ≥ 1".into()));
        }
        self.check_state(x0)?;
        let dim = self.dim();
        let mut cur = x0.to_vec();
        let mut next = vec![0.0; dim];
        for _ in 0..burn_in {
            self.step_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let mut acc = LyapunovAccumulator::new(dim);
        let mut jac = vec![0.0; dim * dim];
        for _ in 0..t {
            self.jacobian_into(&cur, &mut jac);
            acc.push(&jac);
            self.step_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(acc.finish(burn_in))
    }
}

fn settle(x: f64) -> f64 {
    if x > 1.0 && x <= 1.0 + ROUNDING_SLACK {
        1.0
    } else if x < 0.0 && x >= -ROUNDING_SLACK {
        0.0
    } else {
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub mu: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Sorted in descending order.
    pub exponents: Vec<f64>,
    pub steps: usize,
    pub burn_in: usize,
}

/// `2×2` QR factorization with a non-negative `R` diagonal.
/// Returns `(Q, R)` row-major.
pub fn qr2(a: [f64; 4]) -> ([f64; 4], [f64; 4]) {
    let r11 = a[0].hypot(a[2]);
    let (c, s) = if r11 == 0.0 {
        (1.0, 0.0)
    } else {
        (a[0] / r11, a[2] / r11)
    };
    let mut q = [c, -s, s, c];
    let r12 = c * a[1] + s * a[3];
    let mut r22 = -s * a[1] + c * a[3];
    if r22 < 0.0 {
        r22 = -r22;
        q[1] = -q[1];
        q[3] = -q[3];
    }
    (q, [r11, r12, 0.0, r22])
}

/// Running sum of `ln |R_kk|` along a sequence of Jacobians.
///
/// In 1D the Jacobian is a scalar and the sum is of `ln |f'|`. In 2D the
/// tangent frame `Q` (identity at start) is propagated: `J·Q = Q'·R`.
#[derive(Clone, Debug)]
pub struct LyapunovAccumulator {
    dim: usize,
    q: [f64; 4],
    sums: [f64; 2],
    steps: usize,
}

impl LyapunovAccumulator {
    pub fn new(dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "only 1D and 2D maps are supported");
        Self {
            dim,
            q: [1.0, 0.0, 0.0, 1.0],
            sums: [0.0; 2],
            steps: 0,
        }
    }

    pub fn push(&mut self, jac: &[f64]) {
        match self.dim {
            1 => self.sums[0] += jac[0].abs().max(LOG_FLOOR).ln(),
            _ => {
                let q = self.q;
                let a = [
                    jac[0] * q[0] + jac[1] * q[2],
                    jac[0] * q[1] + jac[1] * q[3],
                    jac[2] * q[0] + jac[3] * q[2],
                    jac[2] * q[1] + jac[3] * q[3],
                ];
                let (qn, r) = qr2(a);
                self.sums[0] += r[0].abs().max(LOG_FLOOR).ln();
                self.sums[1] += r[3].abs().max(LOG_FLOOR).ln();
                self.q = qn;
            }
        }
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn finish(&self, burn_in: usize) -> LyapunovSpectrum {
        let t = self.steps.max(1) as f64;
        let mut exponents: Vec<f64> = self.sums[..self.dim].iter().map(|s| s / t).collect();
        exponents.sort_by(|a, b| b.total_cmp(a));
        LyapunovSpectrum {
            exponents,
            steps: self.steps,
            burn_in,
        }
    }
}
