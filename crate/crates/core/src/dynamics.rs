//! One-step latent dynamics: a keypoint MLP plus an exact joint integrator,
//! or a differentiable ground-truth adapter around the simulator.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{dot_seq, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::sim::{unflatten_keypoints, Simulator, SystemState, Transition, DOF};

/// Hidden layer widths of the keypoint predictor.
pub const HIDDEN: [usize; 2] = [100, 25];

/// Dense layer, `w` is `[out, in]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|r| dot_seq(&self.w[r * self.inputs..(r + 1) * self.inputs], x) + self.b[r])
            .collect()
    }
}

/// Standardization constants applied around the MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    /// Zero for target dimensions without variance; those outputs are
    /// pinned to their mean.
    pub output_scale: Vec<f64>,
}

/// Parameters of the keypoint predictor, input `[z, theta, theta_dot, u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub k: usize,
    pub layers: Vec<Layer>,
    pub norm: Normalization,
}

impl MlpParams {
    pub fn input_dim(k: usize) -> usize {
        k * 3 + 3 * DOF
    }

    pub fn layer_sizes(k: usize) -> Vec<usize> {
        vec![Self::input_dim(k), HIDDEN[0], HIDDEN[1], k * 3]
    }

    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn init(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = Self::layer_sizes(k);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    b: vec![0.0; fan_out],
                    inputs: fan_in,
                    outputs: fan_out,
                }
            })
            .collect();
        let (din, dout) = (sizes[0], k * 3);
        Self {
            k,
            layers,
            norm: Normalization {
                input_mean: vec![0.0; din],
                input_scale: vec![1.0; din],
                output_mean: vec![0.0; dout],
                output_scale: vec![1.0; dout],
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes = Self::layer_sizes(self.k);
        let ok = self.layers.len() == sizes.len() - 1
            && self.layers.iter().zip(sizes.windows(2)).all(|(l, w)| {
                l.inputs == w[0] && l.outputs == w[1] && l.w.len() == w[0] * w[1] && l.b.len() == w[1]
            })
            && self.norm.input_mean.len() == sizes[0]
            && self.norm.input_scale.len() == sizes[0]
            && self.norm.output_mean.len() == self.k * 3
            && self.norm.output_scale.len() == self.k * 3;
        if !ok {
            return Err(Error::shape("mlp", format!("parameters inconsistent with K={}", self.k)));
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "mlp parameters".into(),
            });
        }
        Ok(())
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.norm.input_mean)
            .zip(&self.norm.input_scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// Network output in standardized target units.
    fn forward_standardized(&self, raw_input: &[f64]) -> Vec<f64> {
        let mut h = self.standardize(raw_input);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            }
        }
        h
    }

    /// Predicted next keypoints (flattened `K x 3`) for a raw input vector.
    pub fn forward(&self, raw_input: &[f64]) -> Vec<f64> {
        self.forward_standardized(raw_input)
            .iter()
            .zip(&self.norm.output_scale)
            .zip(&self.norm.output_mean)
            .map(|((o, s), m)| o * s + m)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

pub fn model_input(state: &SystemState, u: &[f64; DOF]) -> Vec<f64> {
    let mut x = state.flat_keypoints();
    x.extend_from_slice(&state.theta);
    x.extend_from_slice(&state.theta_dot);
    x.extend_from_slice(u);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub enum DynamicsModel {
    Learned(MlpParams),
    GroundTruth(Simulator),
}

impl DynamicsModel {
    pub fn k(&self) -> usize {
        match self {
            DynamicsModel::Learned(p) => p.k,
            DynamicsModel::GroundTruth(sim) => sim.k(),
        }
    }

    /// Record the model's constants on `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        match self {
            DynamicsModel::Learned(p) => {
                p.validate()?;
                let mut layers = Vec::with_capacity(p.layers.len());
                for l in &p.layers {
                    let w = g.constant(Tensor::matrix(l.outputs, l.inputs, l.w.clone())?);
                    let b = g.constant_vec(&l.b)?;
                    layers.push((w, b));
                }
                Ok(BoundModel::Learned(BoundMlp {
                    k: p.k,
                    layers,
                    in_mean: g.constant_vec(&p.norm.input_mean)?,
                    in_scale: g.constant_vec(&p.norm.input_scale)?,
                    out_mean: g.constant_vec(&p.norm.output_mean)?,
                    out_scale: g.constant_vec(&p.norm.output_scale)?,
                }))
            }
            DynamicsModel::GroundTruth(sim) => {
                let n = sim.object_offsets.len();
                let tri: Vec<f64> = (0..DOF)
                    .flat_map(|r| (0..DOF).map(move |c| if c <= r { 1.0 } else { 0.0 }))
                    .collect();
                let ox: Vec<f64> = sim.object_offsets.iter().map(|o| o[0]).collect();
                let oy: Vec<f64> = sim.object_offsets.iter().map(|o| o[1]).collect();
                let mut tail = vec![1.0; n];
                tail.extend_from_slice(&[sim.background[0], sim.background[1], 1.0]);
                let mut order = Vec::with_capacity(3 * (n + 1));
                for k in 0..n {
                    order.extend_from_slice(&[k, n + k, 2 * n + k]);
                }
                order.extend_from_slice(&[3 * n, 3 * n + 1, 3 * n + 2]);
                Ok(BoundModel::GroundTruth(BoundArm {
                    k: n + 1,
                    scale: sim.camera.scale,
                    cumulative: g.constant(Tensor::matrix(DOF, DOF, tri)?),
                    links: g.constant_vec(&sim.arm.link_lengths)?,
                    offset_x: g.constant_vec(&ox)?,
                    offset_y: g.constant_vec(&oy)?,
                    origin_x: g.constant_vec(&vec![sim.camera.origin[0]; n])?,
                    origin_y: g.constant_vec(&vec![sim.camera.origin[1]; n])?,
                    tail: g.constant_vec(&tail)?,
                    order: order.into(),
                }))
            }
        }
    }

    /// Value-level one-step prediction.
    pub fn predict(&self, state: &SystemState, u: &[f64; DOF]) -> Result<SystemState> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let s = StateVars::constant(&mut g, state)?;
        let u = g.constant_vec(u)?;
        let next = bound.predict(&mut g, &s, u)?;
        next.read(&g)
    }

    /// Value-level rollout; the result includes `start`.
    pub fn rollout(&self, start: &SystemState, actions: &[[f64; DOF]]) -> Result<Vec<SystemState>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let s0 = StateVars::constant(&mut g, start)?;
        let us = actions
            .iter()
            .map(|u| g.constant_vec(u))
            .collect::<Result<Vec<_>>>()?;
        let traj = bound.rollout(&mut g, &s0, &us)?;
        traj.iter().map(|s| s.read(&g)).collect()
    }
}

/// A system state recorded on a graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateVars {
    /// Flattened `K x 3` keypoints.
    pub z: Var,
    pub theta: Var,
    pub theta_dot: Var,
}

impl StateVars {
    pub fn constant(g: &mut Graph, s: &SystemState) -> Result<Self> {
        Ok(Self {
            z: g.constant_vec(&s.flat_keypoints())?,
            theta: g.constant_vec(&s.theta)?,
            theta_dot: g.constant_vec(&s.theta_dot)?,
        })
    }

    pub fn read(&self, g: &Graph) -> Result<SystemState> {
        let arr = |v: Var| -> [f64; DOF] {
            let d = g.value(v).data();
            std::array::from_fn(|i| d[i])
        };
        Ok(SystemState {
            theta: arr(self.theta),
            theta_dot: arr(self.theta_dot),
            keypoints: unflatten_keypoints(g.value(self.z).data()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    k: usize,
    layers: Vec<(Var, Var)>,
    in_mean: Var,
    in_scale: Var,
    out_mean: Var,
    out_scale: Var,
}

#[derive(Clone, Debug)]
pub struct BoundArm {
    k: usize,
    scale: f64,
    cumulative: Var,
    links: Var,
    offset_x: Var,
    offset_y: Var,
    origin_x: Var,
    origin_y: Var,
    tail: Var,
    order: Arc<[usize]>,
}

/// A dynamics model whose constants live on a particular graph.
#[derive(Clone, Debug)]
pub enum BoundModel {
    Learned(BoundMlp),
    GroundTruth(BoundArm),
}

impl BoundModel {
    pub fn k(&self) -> usize {
        match self {
            BoundModel::Learned(m) => m.k,
            BoundModel::GroundTruth(a) => a.k,
        }
    }

    pub fn predict(&self, g: &mut Graph, s: &StateVars, u: Var) -> Result<StateVars> {
        let k = self.k();
        let check = |v: Var, n: usize, what: &str| -> Result<()> {
            if g.value(v).numel() != n {
                return Err(Error::shape(
                    "predict",
                    format!("{what} has {} values, expected {n}", g.value(v).numel()),
                ));
            }
            Ok(())
        };
        check(s.z, k * 3, "keypoints")?;
        check(s.theta, DOF, "theta")?;
        check(s.theta_dot, DOF, "theta_dot")?;
        check(u, DOF, "action")?;

        let theta = g.add(s.theta, u)?;
        let z = match self {
            BoundModel::Learned(m) => {
                let x = g.concat(&[s.z, s.theta, s.theta_dot, u])?;
                let x = g.sub(x, m.in_mean)?;
                let mut h = g.mul(x, m.in_scale)?;
                let last = m.layers.len() - 1;
                for (i, &(w, b)) in m.layers.iter().enumerate() {
                    let wx = g.matvec(w, h)?;
                    h = g.add(wx, b)?;
                    if i < last {
                        h = g.relu(h)?;
                    }
                }
                let scaled = g.mul(h, m.out_scale)?;
                g.add(scaled, m.out_mean)?
            }
            BoundModel::GroundTruth(a) => a.keypoints(g, theta)?,
        };
        Ok(StateVars {
            z,
            theta,
            theta_dot: s.theta_dot,
        })
    }

    /// Chained predictions; the result starts with `s0`.
    pub fn rollout(&self, g: &mut Graph, s0: &StateVars, actions: &[Var]) -> Result<Vec<StateVars>> {
        let mut traj = Vec::with_capacity(actions.len() + 1);
        traj.push(*s0);
        for &u in actions {
            let next = self.predict(g, traj.last().expect("nonempty"), u)?;
            traj.push(next);
        }
        Ok(traj)
    }
}

impl BoundArm {
    /// Mirrors `Simulator::observe_keypoints` operation for operation.
    fn keypoints(&self, g: &mut Graph, theta: Var) -> Result<Var> {
        let angles = g.matvec(self.cumulative, theta)?;
        let c = g.cos(angles)?;
        let s = g.sin(angles)?;
        let px = g.dot(self.links, c)?;
        let py = g.dot(self.links, s)?;
        let cphi = g.slice(c, DOF - 1, 1)?;
        let sphi = g.slice(s, DOF - 1, 1)?;
        let n = self.k - 1;

        let cx = g.scalar_mul(cphi, self.offset_x)?;
        let sy = g.scalar_mul(sphi, self.offset_y)?;
        let rx = g.sub(cx, sy)?;
        let px = g.broadcast(px, &[n])?;
        let wx = g.add(px, rx)?;

        let sx = g.scalar_mul(sphi, self.offset_x)?;
        let cy = g.scalar_mul(cphi, self.offset_y)?;
        let ry = g.add(sx, cy)?;
        let py = g.broadcast(py, &[n])?;
        let wy = g.add(py, ry)?;

        let ix = g.scale(self.scale, wx)?;
        let ix = g.add(self.origin_x, ix)?;
        let iy = g.scale(self.scale, wy)?;
        let iy = g.sub(self.origin_y, iy)?;
        let parts = g.concat(&[ix, iy, self.tail])?;
        g.gather(parts, self.order.clone())
    }
}

/// Result of [`nmse`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub value: f64,
    /// Target dimensions skipped for having zero variance.
    pub excluded: usize,
}

/// Mean squared error per dimension divided by that dimension's target
/// variance, averaged over dimensions with nonzero variance.
pub fn nmse(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Nmse> {
    if predictions.len() != targets.len() || targets.len() < 2 {
        return Err(Error::shape(
            "nmse",
            format!("{} predictions vs {} targets (need >= 2)", predictions.len(), targets.len()),
        ));
    }
    let dims = targets[0].len();
    if predictions.iter().chain(targets).any(|r| r.len() != dims) {
        return Err(Error::shape("nmse", "ragged rows"));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut used = 0usize;
    for d in 0..dims {
        let mean = targets.iter().map(|t| t[d]).sum::<f64>() / n;
        let var = targets.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-20 * (1.0 + mean * mean) {
            continue;
        }
        let mse = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (p[d] - t[d]).powi(2))
            .sum::<f64>()
            / n;
        total += mse / var;
        used += 1;
    }
    Ok(Nmse {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        excluded: dims - used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_nmse: Vec<f64>,
    pub heldout_nmse: Vec<f64>,
    /// Target dimensions excluded from the NMSE (zero variance).
    pub excluded_dims: usize,
    pub seed: u64,
    pub config: TrainConfig,
    #[serde(skip)]
    pub params: Option<MlpParams>,
}

impl TrainReport {
    pub fn final_heldout(&self) -> f64 {
        self.heldout_nmse.last().copied().unwrap_or(f64::NAN)
    }

    pub fn params(&self) -> &MlpParams {
        self.params.as_ref().expect("trained parameters")
    }
}

fn mean_and_scale(rows: &[Vec<f64>], pin_constant: bool) -> (Vec<f64>, Vec<f64>) {
    let dims = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dims];
    let mut scale = vec![0.0; dims];
    for d in 0..dims {
        let m = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n;
        mean[d] = m;
        scale[d] = if var > 1e-20 * (1.0 + m * m) {
            var.sqrt()
        } else if pin_constant {
            0.0
        } else {
            1.0
        };
    }
    (mean, scale)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (pj, gj)) in p.iter_mut().zip(g.iter()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gj;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gj * gj;
                *pj -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fit the keypoint predictor to `(state, action) -> next keypoints`.
///
/// Splits `dataset` 90/10 by `seed`, minimizes the NMSE of the predicted
/// keypoints with mini-batch Adam, and records the NMSE on both splits after
/// every epoch. Aborts if the training NMSE stays above ten times its
/// initial value for three consecutive epochs.
pub fn train(dataset: &[Transition], config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    if dataset.len() < 4 {
        return Err(Error::Config(format!(
            "need at least 4 transitions to train, got {}",
            dataset.len()
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let k = dataset[0].state.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let holdout = ((dataset.len() as f64 * config.holdout_fraction).round() as usize)
        .clamp(2, dataset.len() - 2);
    let (held_idx, train_idx) = order.split_at(holdout);

    let inputs: Vec<Vec<f64>> = dataset.iter().map(|t| model_input(&t.state, &t.action)).collect();
    let targets: Vec<Vec<f64>> = dataset.iter().map(|t| t.next.flat_keypoints()).collect();
    let pick = |rows: &[Vec<f64>], idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| rows[i].clone()).collect()
    };
    let train_in = pick(&inputs, train_idx);
    let train_out = pick(&targets, train_idx);
    let held_in = pick(&inputs, held_idx);
    let held_out = pick(&targets, held_idx);

    let mut params = MlpParams::init(k, rng.gen());
    let (in_mean, in_std) = mean_and_scale(&train_in, false);
    let (out_mean, out_std) = mean_and_scale(&train_out, true);
    params.norm = Normalization {
        input_mean: in_mean,
        input_scale: in_std.iter().map(|s| 1.0 / s).collect(),
        output_mean: out_mean,
        output_scale: out_std.clone(),
    };
    let active: Vec<f64> = out_std.iter().map(|s| if *s > 0.0 { 1.0 } else { 0.0 }).collect();
    let n_active = active.iter().sum::<f64>().max(1.0);
    let std_targets: Vec<Vec<f64>> = train_out
        .iter()
        .map(|t| {
            t.iter()
                .zip(&params.norm.output_mean)
                .zip(&out_std)
                .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect();

    let evaluate = |p: &MlpParams, xs: &[Vec<f64>], ys: &[Vec<f64>]| -> Result<Nmse> {
        let preds: Vec<Vec<f64>> = xs.iter().map(|x| p.forward(x)).collect();
        nmse(&preds, ys)
    };

    let sizes: Vec<usize> = params.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect();
    let mut adam = Adam::new(&sizes, config.learning_rate);
    let initial = evaluate(&params, &train_in, &train_out)?;
    let mut report = TrainReport {
        train_nmse: Vec::with_capacity(config.epochs),
        heldout_nmse: Vec::with_capacity(config.epochs),
        excluded_dims: initial.excluded,
        seed,
        config: config.clone(),
        params: None,
    };
    let mut strikes = 0;
    let mut batch_order: Vec<usize> = (0..train_in.len()).collect();
    for epoch in 0..config.epochs {
        batch_order.shuffle(&mut rng);
        for batch in batch_order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut vars = Vec::with_capacity(params.layers.len());
            for l in &params.layers {
                let w = g.variable(Tensor::matrix(l.outputs, l.inputs, l.w.clone())?);
                let b = g.variable(Tensor::vector(l.b.clone())?);
                vars.push((w, b));
            }
            let mask = g.constant_vec(&active)?;
            let mut total: Option<Var> = None;
            for &i in batch {
                let x: Vec<f64> = params.standardize(&train_in[i]);
                let mut h = g.constant_vec(&x)?;
                for (li, &(w, b)) in vars.iter().enumerate() {
                    let wx = g.matvec(w, h)?;
                    h = g.add(wx, b)?;
                    if li + 1 < vars.len() {
                        h = g.relu(h)?;
                    }
                }
                let t = g.constant_vec(&std_targets[i])?;
                let d = g.sub(h, t)?;
                let d = g.mul(d, mask)?;
                let sq = g.square(d)?;
                let s = g.sum(sq)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            let total = total.expect("nonempty batch");
            let loss = g.scale(1.0 / (batch.len() as f64 * n_active), total)?;
            let flat_vars: Vec<Var> = vars.iter().flat_map(|(w, b)| [*w, *b]).collect();
            let grads = g.gradient(loss, &flat_vars)?;
            let grad_data: Vec<&[f64]> = grads.iter().map(|v| g.value(*v).data()).collect();
            let mut slots: Vec<&mut Vec<f64>> = params
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.w, &mut l.b])
                .collect();
            adam.step(&mut slots, &grad_data);
        }
        let train_score = evaluate(&params, &train_in, &train_out)?.value;
        let held_score = evaluate(&params, &held_in, &held_out)?.value;
        report.train_nmse.push(train_score);
        report.heldout_nmse.push(held_score);
        log::debug!("epoch {epoch}: train nmse {train_score:.5}, held-out {held_score:.5}");
        if !train_score.is_finite() || train_score > 10.0 * initial.value {
            strikes += 1;
            if strikes >= 3 {
                return Err(Error::Divergence {
                    epoch,
                    nmse: train_score,
                    initial: initial.value,
                });
            }
        } else {
            strikes = 0;
        }
    }
    report.params = Some(params);
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"KPDYN\x00\x01\x00";

/// Binary checkpoint: magic, then little-endian `u64` header
/// `[k, dof, n_layers, sizes...]`, then `f64` normalization constants
/// (input mean, input scale, output mean, output scale), then each layer's
/// weights and biases.
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let sizes = MlpParams::layer_sizes(params.k);
    let mut header = vec![params.k as u64, DOF as u64, params.layers.len() as u64];
    header.extend(sizes.iter().map(|s| *s as u64));
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    let norm = &params.norm;
    let floats = norm
        .input_mean
        .iter()
        .chain(&norm.input_scale)
        .chain(&norm.output_mean)
        .chain(&norm.output_scale)
        .chain(params.layers.iter().flat_map(|l| l.w.iter().chain(&l.b)));
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a dynamics checkpoint"));
    }
    let mut pos = 8;
    let mut next_u64 = || -> Result<u64> {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated header"))?;
        pos += 8;
        Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
    };
    let k = next_u64()? as usize;
    let dof = next_u64()? as usize;
    let n_layers = next_u64()? as usize;
    if dof != DOF || n_layers != HIDDEN.len() + 1 {
        return Err(bad("unsupported architecture"));
    }
    let sizes: Vec<usize> = (0..=n_layers)
        .map(|_| next_u64().map(|v| v as usize))
        .collect::<Result<_>>()?;
    if sizes != MlpParams::layer_sizes(k) {
        return Err(bad("layer sizes do not match K"));
    }
    let floats: Vec<f64> = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if (bytes.len() - pos) % 8 != 0 {
        return Err(bad("trailing bytes"));
    }
    let mut it = floats.into_iter();
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = it.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(bad("truncated parameters"))
        }
    };
    let (din, dout) = (sizes[0], k * 3);
    let norm = Normalization {
        input_mean: take(din)?,
        input_scale: take(din)?,
        output_mean: take(dout)?,
        output_scale: take(dout)?,
    };
    let layers = sizes
        .windows(2)
        .map(|w| {
            Ok(Layer {
                w: take(w[0] * w[1])?,
                b: take(w[1])?,
                inputs: w[0],
                outputs: w[1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if it.next().is_some() {
        return Err(bad("trailing parameters"));
    }
    let params = MlpParams { k, layers, norm };
    params.validate()?;
    Ok(params)
}

/// JSON sidecar holding the training report.
pub fn save_report(report: &TrainReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(path, e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::relative_error;
    use crate::sim::{SineSpec, NOMINAL_THETA};

    fn sim() -> Simulator {
        Simulator::default()
    }

    #[test]
    fn integrator_is_exact() {
        let model = DynamicsModel::Learned(MlpParams::init(4, 1));
        let mut state = sim().state_at([0.1, 0.0, 0.0]).unwrap();
        state.theta_dot = [0.3, -0.2, 0.1];
        let next = model.predict(&state, &[0.05, 0.0, 0.0]).unwrap();
        assert_eq!(next.theta, [0.1 + 0.05, 0.0, 0.0]);
        assert_eq!(next.theta_dot, state.theta_dot);
    }

    #[test]
    fn ground_truth_zero_action_keeps_keypoints() {
        let s = sim();
        let model = DynamicsModel::GroundTruth(s.clone());
        let state = s.state_at(NOMINAL_THETA).unwrap();
        let next = model.predict(&state, &[0.0; 3]).unwrap();
        assert_eq!(next.keypoints, state.keypoints);
    }

    #[test]
    fn predict_rejects_wrong_k() {
        let model = DynamicsModel::Learned(MlpParams::init(2, 1));
        let state = sim().state_at(NOMINAL_THETA).unwrap();
        assert!(matches!(
            model.predict(&state, &[0.0; 3]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn graph_and_value_mlp_agree() {
        let p = MlpParams::init(4, 5);
        let state = sim().state_at(NOMINAL_THETA).unwrap();
        let u = [0.01, -0.02, 0.03];
        let direct = p.forward(&model_input(&state, &u));
        let via_graph = DynamicsModel::Learned(p).predict(&state, &u).unwrap();
        assert_eq!(direct, via_graph.flat_keypoints());
    }

    #[test]
    fn ground_truth_rollout_matches_simulator() {
        let s = sim();
        let model = DynamicsModel::GroundTruth(s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let actions: Vec<[f64; 3]> = (0..12)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.1..0.1)))
                .collect();
            let start = s.state_at(NOMINAL_THETA).unwrap();
            let predicted = model.rollout(&start, &actions).unwrap();
            let executed = s.execute(&start, &actions).unwrap();
            for (p, e) in predicted.iter().zip(&executed) {
                assert_eq!(p.theta, e.theta);
                assert_eq!(p.keypoints, e.keypoints);
            }
        }
    }

    #[test]
    fn empty_rollout_is_start() {
        let s = sim();
        let start = s.state_at(NOMINAL_THETA).unwrap();
        let traj = DynamicsModel::GroundTruth(s).rollout(&start, &[]).unwrap();
        assert_eq!(traj, vec![start]);
    }

    fn final_keypoint_sum(model: &DynamicsModel, start: &SystemState, flat_u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let s0 = StateVars::constant(&mut g, start)?;
        let u = g.variable(Tensor::vector(flat_u.to_vec())?);
        let steps = (0..flat_u.len() / 3)
            .map(|t| g.slice(u, 3 * t, 3))
            .collect::<Result<Vec<_>>>()?;
        let traj = bound.rollout(&mut g, &s0, &steps)?;
        let last = traj.last().unwrap().z;
        let total = g.sum(last)?;
        let grad = g.gradient(total, &[u])?[0];
        Ok((g.scalar(total)?, g.value(grad).data().to_vec()))
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let s = sim();
        let start = s.state_at(NOMINAL_THETA).unwrap();
        let u: Vec<f64> = (0..15).map(|i| 0.01 * ((i as f64) * 0.7).sin()).collect();
        for model in [DynamicsModel::GroundTruth(s.clone()), DynamicsModel::Learned(MlpParams::init(4, 3))] {
            let (_, grad) = final_keypoint_sum(&model, &start, &u).unwrap();
            let eps = 1e-6;
            for i in 0..u.len() {
                let mut hi = u.clone();
                hi[i] += eps;
                let mut lo = u.clone();
                lo[i] -= eps;
                let fd = (final_keypoint_sum(&model, &start, &hi).unwrap().0
                    - final_keypoint_sum(&model, &start, &lo).unwrap().0)
                    / (2.0 * eps);
                let err = relative_error(grad[i], fd);
                assert!(err < 1e-5, "component {i}: {} vs {fd} ({err})", grad[i]);
            }
        }
    }

    #[test]
    fn nmse_reference_points() {
        let targets: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 2.0]];
        let exact = nmse(&targets, &targets).unwrap();
        assert_eq!(exact.value, 0.0);
        assert_eq!(exact.excluded, 1);
        let mean = vec![vec![3.0, 2.0]; 3];
        assert!((nmse(&mean, &targets).unwrap().value - 1.0).abs() < 1e-15);
        assert!(nmse(&targets[..1], &targets[..1]).is_err());
    }

    #[test]
    fn nmse_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let preds: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| t.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect())
            .collect();
        // Oracle: per-dimension variance via E[x^2] - E[x]^2 over the samples.
        let mut expect = 0.0;
        for d in 0..3 {
            let col: Vec<f64> = targets.iter().map(|t| t[d]).collect();
            let ex = col.iter().sum::<f64>() / 10.0;
            let ex2 = col.iter().map(|v| v * v).sum::<f64>() / 10.0;
            let mse = preds.iter().zip(&targets).map(|(p, t)| (p[d] - t[d]).powi(2)).sum::<f64>() / 10.0;
            expect += mse / (ex2 - ex * ex);
        }
        expect /= 3.0;
        let got = nmse(&preds, &targets).unwrap().value;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn constant_dataset_fits() {
        let s = sim();
        let state = s.state_at(NOMINAL_THETA).unwrap();
        let u = [0.05, -0.05, 0.02];
        let next = s.step(&state, &u).unwrap();
        // Two alternating tuples so the targets have variance to normalize by.
        let other = s.state_at([1.5, -1.7, 0.3]).unwrap();
        let other_next = s.step(&other, &u).unwrap();
        let data: Vec<Transition> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    Transition { state: state.clone(), action: u, next: next.clone() }
                } else {
                    Transition { state: other.clone(), action: u, next: other_next.clone() }
                }
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-2,
            holdout_fraction: 0.1,
        };
        let report = train(&data, &cfg, 3).unwrap();
        assert!(*report.train_nmse.last().unwrap() < 1e-3, "{:?}", report.train_nmse);
    }

    #[test]
    fn training_is_deterministic() {
        let s = sim();
        let spec = SineSpec {
            n_steps: 200,
            ..SineSpec::default()
        };
        let data = s.generate_sine_data(&spec, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&data, &cfg, 8).unwrap();
        let b = train(&data, &cfg, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = MlpParams::init(4, 9);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
