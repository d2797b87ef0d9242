//! Learnable binary joint selectors.
//!
//! Each joint `i` owns a row of logits `θ[i, ·]` over the `K` groups. During
//! training a row is relaxed into a point on the simplex by adding Gumbel
//! noise and applying a temperature-scaled softmax (a Concrete sample); at
//! evaluation the row is hardened to a one-hot vector at its argmax.

use rand::Rng;

use crate::autodiff::{ParamGroup, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `N×K` membership logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorLogits {
    pub theta: Parameter,
}

impl SelectorLogits {
    pub fn joints(&self) -> usize {
        self.theta.value.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.theta.value.shape()[1]
    }

    pub fn from_tensor(theta: Tensor) -> Result<Self> {
        match theta.shape() {
            [n, k] if *n >= 1 && *k >= 1 => Ok(Self {
                theta: Parameter::new(theta, ParamGroup::Selector),
            }),
            s => Err(Error::Config(format!(
                "selector logits must be N×K with N, K ≥ 1, got {s:?}"
            ))),
        }
    }
}

/// Every logit starts at `1/K`: no prior over groups.
pub fn init_logits(joints: usize, groups: usize) -> Result<SelectorLogits> {
    if joints < 1 || groups < 1 {
        return Err(Error::Config(format!(
            "selector needs at least one joint and one group, got N={joints}, K={groups}"
        )));
    }
    let theta = Tensor::full(&[joints, groups], 1.0 / groups as f64);
    SelectorLogits::from_tensor(theta)
}

/// Standard Gumbel variate from a uniform draw in the open unit interval.
pub fn gumbel_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain {
            op: "gumbel_noise",
            detail: format!("uniform sample {u} is outside (0, 1)"),
        });
    }
    Ok(-(-u.ln()).ln())
}

/// Draws an `rows×cols` matrix of independent Gumbel variates.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u = loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            };
            gumbel_noise(u).expect("u drawn from (0, 1)")
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches length")
}

/// Relaxed selector on the tape: row-wise `softmax((θ + noise) / τ)`.
///
/// `theta` is usually a bound [`SelectorLogits::theta`]; gradients flow back
/// to it while the noise stays fixed.
pub fn sample_relaxed(tape: &mut Tape, theta: Var, tau: f64, noise: &Tensor) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain {
            op: "sample_relaxed",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    if tape.shape(theta) != noise.shape() {
        return Err(Error::shape(
            "sample_relaxed",
            format!(
                "noise shape {:?} differs from logits {:?}",
                noise.shape(),
                tape.shape(theta)
            ),
        ));
    }
    let noise = tape.constant(noise.clone());
    let perturbed = tape.add(theta, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    tape.softmax(scaled)
}

/// Value-only relaxed sample, for inspection and statistics.
pub fn relaxed_values(
    logits: &SelectorLogits,
    tau: f64,
    noise: &Tensor,
) -> Result<RelaxedSelector> {
    let mut tape = Tape::new();
    let theta = tape.constant(logits.theta.value.clone());
    let s = sample_relaxed(&mut tape, theta, tau, noise)?;
    Ok(RelaxedSelector {
        values: tape.value(s).clone(),
    })
}

/// `N×K` soft memberships; rows lie on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSelector {
    pub values: Tensor,
}

/// One-hot group assignment, stored as the chosen group per joint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinarySelector {
    assignment: Vec<usize>,
    groups: usize,
}

impl BinarySelector {
    pub fn new(assignment: Vec<usize>, groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("binary selector needs K ≥ 1".into()));
        }
        if let Some((i, &g)) = assignment.iter().enumerate().find(|(_, &g)| g >= groups) {
            return Err(Error::Config(format!(
                "joint {i} assigned to group {g} of {groups}"
            )));
        }
        Ok(Self { assignment, groups })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn joints(&self) -> usize {
        self.assignment.len()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Dense `N×K` 0/1 matrix.
    pub fn to_matrix(&self) -> Tensor {
        let k = self.groups;
        let mut data = vec![0.0; self.assignment.len() * k];
        for (i, &g) in self.assignment.iter().enumerate() {
            data[i * k + g] = 1.0;
        }
        Tensor::new(vec![self.assignment.len(), k], data).expect("shape matches length")
    }

    /// Joint index sets, one per group; groups may be empty.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.groups];
        for (i, &g) in self.assignment.iter().enumerate() {
            sets[g].push(i);
        }
        sets
    }
}

/// Rowwise argmax of `θ`, ties going to the lowest group index.
pub fn harden(logits: &SelectorLogits) -> BinarySelector {
    harden_tensor(&logits.theta.value)
}

pub(crate) fn harden_tensor(theta: &Tensor) -> BinarySelector {
    let k = theta.shape()[1];
    let assignment = theta
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    BinarySelector {
        assignment,
        groups: k,
    }
}

/// Step-wise linear annealing with a floor.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub tau_init: f64,
    pub decrement: f64,
    pub interval: usize,
    pub tau_min: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_init: 5.0,
            decrement: 0.1,
            interval: 1000,
            tau_min: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0
            && self.tau_init > self.tau_min
            && self.decrement > 0.0
            && self.interval >= 1)
        {
            return Err(Error::Config(format!(
                "invalid temperature schedule {self:?}"
            )));
        }
        Ok(())
    }

    pub fn temperature_at(&self, step: usize) -> f64 {
        let drops = (step / self.interval) as f64;
        (self.tau_init - self.decrement * drops).max(self.tau_min)
    }
}
