//! Learnable keypoint costs and the IRL loss, recorded on a [`Graph`] so
//! gradients exist with respect to both the trajectory and the weights.
//!
//! Every family is linear in its weights: `C = psi . F(trajectory)`, with
//! `F` built from squared x/y deviations to the goal.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::sim::{Demonstration, SystemState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostFamily {
    Weighted,
    #[serde(rename = "timedep")]
    TimeDependent,
    Rbf,
}

impl CostFamily {
    pub const ALL: [CostFamily; 3] = [CostFamily::Weighted, CostFamily::TimeDependent, CostFamily::Rbf];

    pub fn tag(self) -> &'static str {
        match self {
            CostFamily::Weighted => "weighted",
            CostFamily::TimeDependent => "timedep",
            CostFamily::Rbf => "rbf",
        }
    }
}

impl fmt::Display for CostFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CostFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(CostFamily::Weighted),
            "timedep" | "time-dependent" => Ok(CostFamily::TimeDependent),
            "rbf" => Ok(CostFamily::Rbf),
            other => Err(Error::Config(format!(
                "unknown cost family `{other}` (expected weighted, timedep or rbf)"
            ))),
        }
    }
}

/// Fixed Gaussian kernels over time steps `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernels {
    pub centers: Vec<f64>,
    /// Negative; `kappa_j(t) = exp(bandwidth * (t - c_j)^2)`.
    pub bandwidth: f64,
}

impl RbfKernels {
    /// `count` centers evenly spaced over `[1, horizon]`, neighbours
    /// overlapping at half height.
    pub fn new(count: usize, horizon: usize) -> Result<Self> {
        if count == 0 || count >= horizon {
            return Err(Error::Config(format!(
                "need 0 < kernels < horizon, got {count} kernels for horizon {horizon}"
            )));
        }
        let span = (horizon - 1) as f64;
        let centers: Vec<f64> = if count == 1 {
            vec![1.0 + span / 2.0]
        } else {
            (0..count)
                .map(|j| 1.0 + span * j as f64 / (count - 1) as f64)
                .collect()
        };
        let spacing = if count == 1 { span } else { span / (count - 1) as f64 };
        let half = spacing / 2.0;
        Ok(Self {
            centers,
            bandwidth: -std::f64::consts::LN_2 / (half * half),
        })
    }

    pub fn value(&self, j: usize, t: f64) -> f64 {
        let d = t - self.centers[j];
        (self.bandwidth * d * d).exp()
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }
}

/// Shape of a parametrized cost: which family and its dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLayout {
    pub family: CostFamily,
    pub k: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<RbfKernels>,
}

impl CostLayout {
    pub fn new(family: CostFamily, k: usize, horizon: usize, kernels: usize) -> Result<Self> {
        if k == 0 || horizon == 0 {
            return Err(Error::Config("cost needs K >= 1 and T >= 1".into()));
        }
        let kernels = match family {
            CostFamily::Rbf => Some(RbfKernels::new(kernels, horizon)?),
            _ => None,
        };
        Ok(Self {
            family,
            k,
            horizon,
            kernels,
        })
    }

    /// Number of weights.
    pub fn len(&self) -> usize {
        let per_slot = self.k * 2;
        match self.family {
            CostFamily::Weighted => per_slot,
            CostFamily::TimeDependent => self.horizon * per_slot,
            CostFamily::Rbf => self.kernels.as_ref().map_or(0, RbfKernels::count) * per_slot,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-weight features: `cost = dot(psi, features)`.
    pub fn features(&self, g: &mut Graph, frames: &[Var], goal: Var) -> Result<Var> {
        let sq = squared_deviations(g, frames, goal, self.k)?;
        if sq.len() != self.horizon {
            return Err(Error::shape(
                "cost",
                format!("trajectory has {} frames, cost expects {}", sq.len(), self.horizon),
            ));
        }
        match self.family {
            CostFamily::Weighted => sum_frames(g, &sq),
            CostFamily::TimeDependent => g.concat(&sq),
            CostFamily::Rbf => {
                let kernels = self.kernels.as_ref().expect("rbf layout has kernels");
                let stacked = g.concat(&sq)?;
                let stacked = g.reshape(stacked, &[self.horizon, self.k * 2])?;
                let mut per_kernel = Vec::with_capacity(kernels.count());
                for j in 0..kernels.count() {
                    let weights: Vec<f64> = (1..=self.horizon).map(|t| kernels.value(j, t as f64)).collect();
                    let kappa = g.constant_vec(&weights)?;
                    per_kernel.push(g.vecmat(kappa, stacked)?);
                }
                g.concat(&per_kernel)
            }
        }
    }

    pub fn cost(&self, g: &mut Graph, psi: Var, frames: &[Var], goal: Var) -> Result<Var> {
        if g.value(psi).numel() != self.len() {
            return Err(Error::shape(
                "cost",
                format!("{} weights for a {} cost needing {}", g.value(psi).numel(), self.family, self.len()),
            ));
        }
        let f = self.features(g, frames, goal)?;
        g.dot(psi, f)
    }
}

/// A cost family together with its weight values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    #[serde(flatten)]
    pub layout: CostLayout,
    pub psi: Vec<f64>,
}

impl CostParams {
    /// All weights one, so the initial cost has the default cost's shape.
    pub fn ones(layout: CostLayout) -> Self {
        let psi = vec![1.0; layout.len()];
        Self { layout, psi }
    }

    pub fn new(layout: CostLayout, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != layout.len() {
            return Err(Error::shape(
                "cost params",
                format!("{} weights for layout needing {}", psi.len(), layout.len()),
            ));
        }
        Ok(Self { layout, psi })
    }

    pub fn family(&self) -> CostFamily {
        self.layout.family
    }

    /// Weight for `(slot, keypoint, axis)`; slot is 0 for the weighted
    /// family, the time step index or kernel index otherwise.
    pub fn weight(&self, slot: usize, keypoint: usize, axis: usize) -> f64 {
        self.psi[slot * self.layout.k * 2 + keypoint * 2 + axis]
    }

    pub fn slots(&self) -> usize {
        self.psi.len() / (self.layout.k * 2)
    }

    /// Effective per-step weights `[T][K*2]`, expanding kernels or the
    /// shared weight over time.
    pub fn per_step_weights(&self) -> Vec<Vec<f64>> {
        let k2 = self.layout.k * 2;
        (0..self.layout.horizon)
            .map(|t| match self.layout.family {
                CostFamily::Weighted => self.psi.clone(),
                CostFamily::TimeDependent => self.psi[t * k2..(t + 1) * k2].to_vec(),
                CostFamily::Rbf => {
                    let kernels = self.layout.kernels.as_ref().expect("rbf kernels");
                    (0..k2)
                        .map(|d| {
                            (0..kernels.count())
                                .map(|j| kernels.value(j, (t + 1) as f64) * self.psi[j * k2 + d])
                                .sum()
                        })
                        .collect()
                }
            })
            .collect()
    }

    /// Cost of plain-value frames (each `K*2` x/y).
    pub fn evaluate(&self, frames_xy: &[Vec<f64>], goal_xy: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let psi = g.constant_vec(&self.psi)?;
        let (frames, goal) = constants(&mut g, frames_xy, goal_xy)?;
        let c = self.layout.cost(&mut g, psi, &frames, goal)?;
        g.scalar(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: CostParams = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if p.psi.len() != p.layout.len() || p.psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "weights do not match the declared layout"));
        }
        Ok(p)
    }

    /// `slot,keypoint,axis,weight` rows for bar plots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,keypoint,axis,weight\n");
        let k = self.layout.k;
        for slot in 0..self.slots() {
            for kp in 0..k {
                for (axis, name) in ["x", "y"].iter().enumerate() {
                    out.push_str(&format!("{slot},{kp},{name},{:.16e}\n", self.weight(slot, kp, axis)));
                }
            }
        }
        out
    }
}

/// Record `frames` (each `K*2`) and the goal as constants.
pub fn constants(g: &mut Graph, frames_xy: &[Vec<f64>], goal_xy: &[f64]) -> Result<(Vec<Var>, Var)> {
    let frames = frames_xy
        .iter()
        .map(|f| g.constant_vec(f))
        .collect::<Result<Vec<_>>>()?;
    let goal = g.constant_vec(goal_xy)?;
    Ok((frames, goal))
}

/// Select the x/y channels of a flattened `K x 3` keypoint node.
pub fn xy_of(g: &mut Graph, z: Var) -> Result<Var> {
    let n = g.value(z).numel();
    if n % 3 != 0 {
        return Err(Error::shape("xy", format!("{n} values is not K x 3")));
    }
    let index: Vec<usize> = (0..n / 3).flat_map(|k| [3 * k, 3 * k + 1]).collect();
    g.gather(z, index)
}

fn squared_deviations(g: &mut Graph, frames: &[Var], goal: Var, k: usize) -> Result<Vec<Var>> {
    if g.value(goal).numel() != k * 2 {
        return Err(Error::shape(
            "cost",
            format!("goal has {} values, expected {}", g.value(goal).numel(), k * 2),
        ));
    }
    frames
        .iter()
        .map(|&f| {
            if g.value(f).numel() != k * 2 {
                return Err(Error::shape(
                    "cost",
                    format!("frame has {} values, expected {}", g.value(f).numel(), k * 2),
                ));
            }
            let d = g.sub(f, goal)?;
            g.square(d)
        })
        .collect()
}

fn sum_frames(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::shape("cost", "empty trajectory"))?;
    rest.iter().try_fold(first, |acc, &p| g.add(acc, p))
}

pub fn weighted_cost(g: &mut Graph, psi: Var, frames: &[Var], goal: Var) -> Result<Var> {
    let k = g.value(goal).numel() / 2;
    CostLayout::new(CostFamily::Weighted, k, frames.len(), 0)?.cost(g, psi, frames, goal)
}

pub fn timedep_cost(g: &mut Graph, psi: Var, frames: &[Var], goal: Var) -> Result<Var> {
    let k = g.value(goal).numel() / 2;
    CostLayout::new(CostFamily::TimeDependent, k, frames.len(), 0)?.cost(g, psi, frames, goal)
}

pub fn rbf_cost(g: &mut Graph, psi: Var, kernels: &RbfKernels, frames: &[Var], goal: Var) -> Result<Var> {
    if kernels.count() >= frames.len() {
        return Err(Error::Config(format!(
            "{} kernels for horizon {}: need fewer kernels than steps",
            kernels.count(),
            frames.len()
        )));
    }
    let layout = CostLayout {
        family: CostFamily::Rbf,
        k: g.value(goal).numel() / 2,
        horizon: frames.len(),
        kernels: Some(kernels.clone()),
    };
    layout.cost(g, psi, frames, goal)
}

/// Unweighted sum of squared x/y deviations over all frames.
pub fn default_cost(g: &mut Graph, frames: &[Var], goal: Var) -> Result<Var> {
    let k = g.value(goal).numel() / 2;
    let sq = squared_deviations(g, frames, goal, k)?;
    let total = sum_frames(g, &sq)?;
    g.sum(total)
}

/// Squared x/y distance between demonstrated and predicted frames.
pub fn irl_loss(g: &mut Graph, demo: &[Var], predicted: &[Var]) -> Result<Var> {
    if demo.len() != predicted.len() || demo.is_empty() {
        return Err(Error::shape(
            "irl loss",
            format!("demo has {} frames, prediction {}", demo.len(), predicted.len()),
        ));
    }
    let mut parts = Vec::with_capacity(demo.len());
    for (&d, &p) in demo.iter().zip(predicted) {
        let diff = g.sub(d, p)?;
        parts.push(g.square(diff)?);
    }
    let total = sum_frames(g, &parts)?;
    g.sum(total)
}

/// What the IRL and evaluation loops need from a demonstration: the start
/// state to plan from and the x/y frames `1..=T`, the last being the goal.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoTarget {
    pub start: SystemState,
    pub frames_xy: Vec<Vec<f64>>,
}

impl DemoTarget {
    pub fn from_demo(demo: &Demonstration) -> Self {
        Self {
            start: demo.start().clone(),
            frames_xy: demo.frames_xy(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.frames_xy.len()
    }

    pub fn k(&self) -> usize {
        self.start.k()
    }

    pub fn goal_xy(&self) -> &[f64] {
        self.frames_xy.last().expect("nonempty demo")
    }
}

/// X/y keypoint displacements from the first frame; entry 0 is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDemo {
    pub offsets: Vec<Vec<f64>>,
}

pub fn relativize_demo(demo: &Demonstration) -> RelativeDemo {
    let first = demo.start().xy();
    RelativeDemo {
        offsets: demo
            .states
            .iter()
            .map(|s| s.xy().iter().zip(&first).map(|(v, f)| v - f).collect())
            .collect(),
    }
}

/// Anchor a relative demo at an observed robot state.
pub fn rebase(rel: &RelativeDemo, start: &SystemState) -> Result<DemoTarget> {
    let base = start.xy();
    if rel.offsets.len() < 2 || rel.offsets.iter().any(|o| o.len() != base.len()) {
        return Err(Error::shape(
            "rebase",
            format!("relative demo with {} frames does not fit K={}", rel.offsets.len(), start.k()),
        ));
    }
    Ok(DemoTarget {
        start: start.clone(),
        frames_xy: rel.offsets[1..]
            .iter()
            .map(|o| o.iter().zip(&base).map(|(d, b)| b + d).collect())
            .collect(),
    })
}

/// Weight tensor helper for tests and callers holding plain weights.
pub fn weights(g: &mut Graph, psi: &[f64], trainable: bool) -> Result<Var> {
    let t = Tensor::vector(psi.to_vec())?;
    Ok(if trainable { g.variable(t) } else { g.constant(t) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::relative_error;
    use crate::sim::{Simulator, TaskSpec, NOMINAL_THETA};

    fn eval<F>(frames: &[Vec<f64>], goal: &[f64], f: F) -> f64
    where
        F: FnOnce(&mut Graph, &[Var], Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let (fr, go) = constants(&mut g, frames, goal).unwrap();
        let c = f(&mut g, &fr, go).unwrap();
        g.scalar(c).unwrap()
    }

    #[test]
    fn weighted_hand_case() {
        // K=1, T=2, deviations x (1, 1), y (2, 0).
        let frames = vec![vec![1.0, 2.0], vec![1.0, 0.0]];
        let c = eval(&frames, &[0.0, 0.0], |g, f, goal| {
            let psi = g.constant_vec(&[2.0, 3.0])?;
            weighted_cost(g, psi, f, goal)
        });
        assert_eq!(c, 16.0);
    }

    #[test]
    fn zero_weights_and_goal_frames() {
        let frames = vec![vec![0.3, 0.1, -0.2, 0.5]; 3];
        let c = eval(&frames, &[0.0; 4], |g, f, goal| {
            let psi = g.constant_vec(&[0.0; 4])?;
            weighted_cost(g, psi, f, goal)
        });
        assert_eq!(c, 0.0);
        let goal = vec![0.3, 0.1, -0.2, 0.5];
        let c = eval(&frames, &goal, |g, f, goal| {
            let psi = g.constant_vec(&[4.0; 12])?;
            timedep_cost(g, psi, f, goal)
        });
        assert_eq!(c, 0.0);
    }

    #[test]
    fn timedep_uniform_and_final_only() {
        let frames = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]];
        let goal = [0.0, 0.0];
        let total_sq: f64 = frames.iter().flatten().map(|v| v * v).sum();
        let c = eval(&frames, &goal, |g, f, goal| {
            let psi = g.constant_vec(&[2.5; 6])?;
            timedep_cost(g, psi, f, goal)
        });
        assert!((c - 2.5 * total_sq).abs() < 1e-12);
        let c = eval(&frames, &goal, |g, f, goal| {
            let psi = g.constant_vec(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0])?;
            timedep_cost(g, psi, f, goal)
        });
        assert_eq!(c, 9.0);
        // K=1, T=2 with distinct weights: 1*1 + 2*4 + 3*0.25 + 4*1.
        let c = eval(&frames[..2], &goal, |g, f, goal| {
            let psi = g.constant_vec(&[1.0, 2.0, 3.0, 4.0])?;
            timedep_cost(g, psi, f, goal)
        });
        assert_eq!(c, 1.0 + 8.0 + 0.75 + 4.0);
    }

    #[test]
    fn kernel_is_one_at_center_and_half_between() {
        let k = RbfKernels::new(5, 25).unwrap();
        assert_eq!(k.centers, vec![1.0, 7.0, 13.0, 19.0, 25.0]);
        for j in 0..5 {
            assert_eq!(k.value(j, k.centers[j]), 1.0);
        }
        assert!((k.value(0, 4.0) - 0.5).abs() < 1e-15);
        assert!(RbfKernels::new(25, 25).is_err());
    }

    #[test]
    fn rbf_hand_case() {
        // J=1 centred at 2 with b=-0.1, K=1, T=3.
        let kernels = RbfKernels {
            centers: vec![2.0],
            bandwidth: -0.1,
        };
        let frames = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let c = eval(&frames, &[0.0, 0.0], |g, f, goal| {
            let psi = g.constant_vec(&[0.7, 1.3])?;
            rbf_cost(g, psi, &kernels, f, goal)
        });
        let k1 = (-0.1f64).exp();
        let expect = 0.7 * (k1 * 1.0 + 0.0 + k1 * 1.0) + 1.3 * (0.0 + 4.0 + k1 * 1.0);
        assert!((c - expect).abs() < 1e-12, "{c} vs {expect}");
        let c = eval(&frames, &[0.0, 0.0], |g, f, goal| {
            let psi = g.constant_vec(&[0.0, 0.0])?;
            rbf_cost(g, psi, &kernels, f, goal)
        });
        assert_eq!(c, 0.0);
    }

    #[test]
    fn rbf_rejects_too_many_kernels() {
        let kernels = RbfKernels {
            centers: vec![1.0, 2.0],
            bandwidth: -1.0,
        };
        let mut g = Graph::new();
        let (f, goal) = constants(&mut g, &[vec![0.0, 0.0], vec![1.0, 1.0]], &[0.0, 0.0]).unwrap();
        let psi = g.constant_vec(&[1.0; 4]).unwrap();
        assert!(rbf_cost(&mut g, psi, &kernels, &f, goal).is_err());
    }

    #[test]
    fn default_cost_cases() {
        let c = eval(&[vec![3.0, 4.0]], &[0.0, 0.0], default_cost);
        assert_eq!(c, 25.0);
        let frames = vec![vec![0.2, -0.4, 1.0, 0.3], vec![0.1, 0.1, 0.7, -0.2]];
        let goal = [0.5, 0.0, 0.5, 0.0];
        let d = eval(&frames, &goal, default_cost);
        let w = eval(&frames, &goal, |g, f, goal| {
            let psi = g.constant_vec(&[1.0; 4])?;
            weighted_cost(g, psi, f, goal)
        });
        assert_eq!(d, w);
        assert_eq!(eval(&frames, &frames[1], |g, f, goal| default_cost(g, &f[1..], goal)), 0.0);
    }

    #[test]
    fn mismatched_dimensions_fail() {
        let mut g = Graph::new();
        let (f, goal) = constants(&mut g, &[vec![0.0; 4]], &[0.0; 2]).unwrap();
        let psi = g.constant_vec(&[1.0; 2]).unwrap();
        assert!(weighted_cost(&mut g, psi, &f, goal).is_err());
        let (f, goal) = constants(&mut g, &[vec![0.0; 2]], &[0.0; 2]).unwrap();
        let psi = g.constant_vec(&[1.0; 4]).unwrap();
        assert!(weighted_cost(&mut g, psi, &f, goal).is_err());
    }

    #[test]
    fn irl_loss_cases() {
        let mut g = Graph::new();
        let d = g.constant_vec(&[1.0, 2.0]).unwrap();
        let p = g.constant_vec(&[0.0, 0.0]).unwrap();
        let l = irl_loss(&mut g, &[d], &[p]).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 5.0);
        let l = irl_loss(&mut g, &[d], &[d]).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
        assert!(irl_loss(&mut g, &[d, d], &[p]).is_err());
    }

    #[test]
    fn irl_loss_ignores_keypoint_order() {
        let demo = vec![vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.8], vec![0.4, 0.6, 0.7, 0.1, 0.2, 0.3]];
        let pred = vec![vec![0.2, 0.8, 0.1, 0.25, 0.55, 0.7], vec![0.0, 0.6, 0.9, 0.3, 0.1, 0.4]];
        let perm = |f: &Vec<f64>| vec![f[4], f[5], f[0], f[1], f[2], f[3]];
        let loss = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut g = Graph::new();
            let (a, _) = constants(&mut g, a, &[0.0]).unwrap();
            let (b, _) = constants(&mut g, b, &[0.0]).unwrap();
            let l = irl_loss(&mut g, &a, &b).unwrap();
            g.scalar(l).unwrap()
        };
        let base = loss(&demo, &pred);
        let permuted = loss(
            &demo.iter().map(perm).collect::<Vec<_>>(),
            &pred.iter().map(perm).collect::<Vec<_>>(),
        );
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let frames = vec![vec![0.2, 0.4, 0.6, 0.1], vec![0.3, 0.35, 0.5, 0.2], vec![0.45, 0.3, 0.4, 0.3]];
        let goal = vec![0.5, 0.3, 0.4, 0.35];
        for family in CostFamily::ALL {
            let layout = CostLayout::new(family, 2, 3, 2).unwrap();
            let psi: Vec<f64> = (0..layout.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
            let cost_of = |psi: &[f64], frames: &[Vec<f64>]| {
                let mut g = Graph::new();
                let p = g.constant_vec(psi).unwrap();
                let (f, go) = constants(&mut g, frames, &goal).unwrap();
                let c = layout.cost(&mut g, p, &f, go).unwrap();
                g.scalar(c).unwrap()
            };
            let mut g = Graph::new();
            let p = g.variable(Tensor::vector(psi.clone()).unwrap());
            let f0 = g.variable(Tensor::vector(frames[0].clone()).unwrap());
            let (rest, go) = constants(&mut g, &frames[1..], &goal).unwrap();
            let mut all = vec![f0];
            all.extend(rest);
            let c = layout.cost(&mut g, p, &all, go).unwrap();
            let grads = g.gradient(c, &[p, f0]).unwrap();
            let gp = g.value(grads[0]).data().to_vec();
            let gf = g.value(grads[1]).data().to_vec();
            let eps = 1e-6;
            for i in 0..psi.len() {
                let (mut hi, mut lo) = (psi.clone(), psi.clone());
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (cost_of(&hi, &frames) - cost_of(&lo, &frames)) / (2.0 * eps);
                assert!(relative_error(gp[i], fd) < 1e-6, "{family} psi[{i}]");
            }
            for i in 0..4 {
                let (mut hi, mut lo) = (frames.clone(), frames.clone());
                hi[0][i] += eps;
                lo[0][i] -= eps;
                let fd = (cost_of(&psi, &hi) - cost_of(&psi, &lo)) / (2.0 * eps);
                assert!(relative_error(gf[i], fd) < 1e-6, "{family} frame[{i}]");
            }
        }
    }

    #[test]
    fn per_step_weights_reproduce_cost() {
        let frames = vec![vec![0.2, 0.4], vec![0.3, 0.35], vec![0.45, 0.3], vec![0.5, 0.5]];
        let goal = vec![0.5, 0.3];
        for family in CostFamily::ALL {
            let layout = CostLayout::new(family, 1, 4, 2).unwrap();
            let psi: Vec<f64> = (0..layout.len()).map(|i| 1.0 + i as f64).collect();
            let p = CostParams::new(layout, psi).unwrap();
            let direct = p.evaluate(&frames, &goal).unwrap();
            let expanded: f64 = p
                .per_step_weights()
                .iter()
                .zip(&frames)
                .map(|(w, f)| (0..2).map(|d| w[d] * (f[d] - goal[d]).powi(2)).sum::<f64>())
                .sum();
            assert!((direct - expanded).abs() < 1e-12 * direct.abs().max(1.0), "{family}");
        }
    }

    #[test]
    fn relative_demo_round_trip_and_shift() {
        let sim = Simulator::default();
        let task = TaskSpec::placing(&sim, NOMINAL_THETA, 0.1, 0.1, 10).unwrap();
        let demo = sim.generate_demo(&task).unwrap();
        let rel = relativize_demo(&demo);
        assert!(rel.offsets[0].iter().all(|v| *v == 0.0));
        let back = rebase(&rel, demo.start()).unwrap();
        for (a, b) in back.frames_xy.iter().zip(demo.frames_xy()) {
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        let mut shifted = demo.start().clone();
        for kp in &mut shifted.keypoints {
            kp.x += 0.05;
            kp.y -= 0.02;
        }
        let moved = rebase(&rel, &shifted).unwrap();
        for (a, b) in moved.goal_xy().chunks(2).zip(back.goal_xy().chunks(2)) {
            assert!((a[0] - b[0] - 0.05).abs() < 1e-12);
            assert!((a[1] - b[1] + 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cost.json");
        let layout = CostLayout::new(CostFamily::Rbf, 4, 25, 5).unwrap();
        let p = CostParams::new(layout, (0..40).map(|i| i as f64 * 0.1).collect()).unwrap();
        p.save(&path).unwrap();
        assert_eq!(CostParams::load(&path).unwrap(), p);
        assert_eq!(p.to_csv().lines().count(), 41);
    }

    #[test]
    fn family_tags_parse() {
        for f in CostFamily::ALL {
            assert_eq!(f.tag().parse::<CostFamily>().unwrap(), f);
        }
        assert!("neural".parse::<CostFamily>().is_err());
    }
}
