//! Cost learning from demonstrations.
//!
//! [`train_irl`] differentiates the IRL loss through the unrolled inner
//! action optimization. [`apprenticeship_train`] is the feature-matching
//! baseline solved with the projection method.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{constants, irl_loss, CostFamily, CostLayout, CostParams, DemoTarget};
use crate::diff::{Graph, Tensor};
use crate::dynamics::{DynamicsModel, StateVars};
use crate::error::{Error, Result};
use crate::planner::{
    descend_recorded, execute_plan, goal_mse, optimize_actions, predicted_frames, relative_distance,
    relative_distance_x, Objective, PlanConfig,
};
use crate::sim::{Simulator, DOF, FRAME_PIXELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlConfig {
    /// Outer (cost weight) step size.
    pub eta: f64,
    /// Inner (action) step size.
    pub alpha: f64,
    pub iters: usize,
    pub epochs: usize,
    pub family: CostFamily,
    /// RBF kernel count.
    pub kernels: usize,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            alpha: 0.01,
            iters: 50,
            epochs: 500,
            family: CostFamily::Weighted,
            kernels: 5,
        }
    }
}

impl IrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.iters == 0 {
            return Err(Error::Config("epochs and iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            alpha: self.alpha,
            iters: self.iters,
            backtracking: false,
        }
    }
}

/// Per-epoch training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IrlRecord {
    /// Mean IRL loss over the training demos, before that epoch's update.
    pub train_loss: Vec<f64>,
    /// Weights after each epoch.
    pub psi: Vec<Vec<f64>>,
    /// Relative distance on each test demo after each epoch.
    pub test_relative: Vec<Vec<f64>>,
}

impl IrlRecord {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn test_mean(&self, epoch: usize) -> f64 {
        mean(&self.test_relative[epoch])
    }

    /// `epoch,train_loss,test_rel_mean,test_rel_std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_rel_mean,test_rel_std\n");
        for e in 0..self.epochs() {
            let (m, s) = match self.test_relative.get(e) {
                Some(v) if !v.is_empty() => (mean(v), std_dev(v)),
                _ => (f64::NAN, f64::NAN),
            };
            out.push_str(&format!("{e},{:.16e},{m:.16e},{s:.16e}\n", self.train_loss[e]));
        }
        out
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn check_targets(targets: &[DemoTarget], k: usize, horizon: usize) -> Result<()> {
    for (i, t) in targets.iter().enumerate() {
        if t.horizon() != horizon || t.k() != k {
            return Err(Error::shape(
                "demos",
                format!(
                    "demo {i} has K={}, T={} but training uses K={k}, T={horizon}",
                    t.k(),
                    t.horizon()
                ),
            ));
        }
    }
    Ok(())
}

/// IRL loss after the inner optimization under `psi`, and optionally its
/// gradient with respect to `psi` through the whole inner trace.
pub fn irl_loss_and_gradient(
    model: &DynamicsModel,
    layout: &CostLayout,
    psi: &[f64],
    target: &DemoTarget,
    alpha: f64,
    iters: usize,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let psi_var = g.variable(Tensor::vector(psi.to_vec())?);
    let bound = model.bind(&mut g)?;
    let s0 = StateVars::constant(&mut g, &target.start)?;
    let (demo_frames, goal) = constants(&mut g, &target.frames_xy, target.goal_xy())?;
    let u0 = g.constant_vec(&vec![0.0; target.horizon() * DOF])?;
    let u = descend_recorded(&mut g, u0, alpha, iters, |g, u| {
        let (_, frames) = predicted_frames(g, &bound, &s0, u)?;
        layout.cost(g, psi_var, &frames, goal)
    })?;
    let (_, frames) = predicted_frames(&mut g, &bound, &s0, u)?;
    let loss = irl_loss(&mut g, &demo_frames, &frames)?;
    let value = g.scalar(loss)?;
    if !with_gradient {
        return Ok((value, None));
    }
    let grad = g.gradient(loss, &[psi_var])?[0];
    Ok((value, Some(g.value(grad).data().to_vec())))
}

/// Relative distance of the plan under `objective` for each target.
pub fn test_relative_distances(
    model: &DynamicsModel,
    objective: Objective,
    targets: &[DemoTarget],
    plan: &PlanConfig,
) -> Result<Vec<f64>> {
    targets
        .par_iter()
        .map(|t| {
            optimize_actions(model, &t.start, t.goal_xy(), objective, plan, t.horizon(), None)
                .map(|p| p.relative_distance)
        })
        .collect()
}

/// Gradient-based bilevel IRL.
///
/// Each epoch runs the inner optimization from zero actions for every
/// training demo, averages the gradients of the IRL loss with respect to
/// the weights, takes one step of size `eta` and clamps the weights at zero.
pub fn train_irl(
    config: &IrlConfig,
    model: &DynamicsModel,
    train: &[DemoTarget],
    test: &[DemoTarget],
) -> Result<(CostParams, IrlRecord)> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("train_irl needs at least one demo".into()))?;
    let (k, horizon) = (first.k(), first.horizon());
    check_targets(train, k, horizon)?;
    check_targets(test, k, horizon)?;
    if model.k() != k {
        return Err(Error::shape("train_irl", format!("model K={} vs demo K={k}", model.k())));
    }
    let layout = CostLayout::new(config.family, k, horizon, config.kernels)?;
    let mut params = CostParams::ones(layout);
    let plan = config.plan_config();
    let mut record = IrlRecord::default();

    for epoch in 0..config.epochs {
        let results: Vec<(f64, Vec<f64>)> = train
            .par_iter()
            .map(|t| {
                irl_loss_and_gradient(model, &params.layout, &params.psi, t, config.alpha, config.iters, true)
                    .map(|(l, g)| (l, g.expect("gradient requested")))
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::NonFiniteGradient {
                    stage: "cost update",
                    index: epoch,
                },
                other => other,
            })?;
        let n = results.len() as f64;
        let mut grad = vec![0.0; params.psi.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                stage: "cost update",
                index: epoch,
            });
        }
        for (p, g) in params.psi.iter_mut().zip(&grad) {
            *p = (*p - config.eta * g / n).max(0.0);
        }
        record.train_loss.push(loss / n);
        record.psi.push(params.psi.clone());
        if !test.is_empty() {
            record
                .test_relative
                .push(test_relative_distances(model, Objective::Learned(&params), test, &plan)?);
        }
        log::debug!("epoch {epoch}: irl loss {:.6e}", loss / n);
    }
    Ok((params, record))
}

/// Squared x/y deviation per keypoint and axis.
pub fn features(z_xy: &[f64], goal_xy: &[f64]) -> Result<Vec<f64>> {
    if z_xy.len() != goal_xy.len() {
        return Err(Error::shape(
            "features",
            format!("{} values vs goal {}", z_xy.len(), goal_xy.len()),
        ));
    }
    Ok(z_xy.iter().zip(goal_xy).map(|(z, g)| (z - g).powi(2)).collect())
}

/// `sum_t gamma^t phi(z_t)` over frames `0..=T`.
pub fn feature_expectation(frames_xy: &[Vec<f64>], goal_xy: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("discount must lie in (0, 1], got {gamma}")));
    }
    let mut mu = vec![0.0; goal_xy.len()];
    let mut w = 1.0;
    for f in frames_xy {
        for (m, p) in mu.iter_mut().zip(features(f, goal_xy)?) {
            *m += w * p;
        }
        w *= gamma;
    }
    Ok(mu)
}

/// Unit-norm maximizer of `min_j w.(mu_E - mu_j)` given the projection
/// `mu_bar` of `mu_E` onto the hull of the policies seen so far; returns
/// the direction and the margin `|mu_E - mu_bar|`.
pub fn max_margin_direction(mu_expert: &[f64], mu_bar: &[f64]) -> (Vec<f64>, f64) {
    let w: Vec<f64> = mu_expert.iter().zip(mu_bar).map(|(e, b)| e - b).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; w.len()], 0.0);
    }
    (w.iter().map(|v| v / norm).collect(), norm)
}

/// Orthogonal projection of `mu_expert` onto the line through `mu_bar` and
/// `mu_new`. `None` when `mu_new == mu_bar`.
pub fn project(mu_expert: &[f64], mu_bar: &[f64], mu_new: &[f64]) -> Option<Vec<f64>> {
    let d: Vec<f64> = mu_new.iter().zip(mu_bar).map(|(n, b)| n - b).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    if dd == 0.0 {
        return None;
    }
    let num: f64 = d.iter().zip(mu_expert.iter().zip(mu_bar)).map(|(di, (e, b))| di * (e - b)).sum();
    let step = num / dd;
    Some(mu_bar.iter().zip(&d).map(|(b, di)| b + step * di).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApprenticeshipConfig {
    pub alpha: f64,
    pub iters: usize,
    pub epochs: usize,
    pub gamma: f64,
    /// Stop once the margin, measured in squared pixels, is at most this.
    pub margin_threshold: f64,
}

impl Default for ApprenticeshipConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            iters: 50,
            epochs: 500,
            gamma: 0.9,
            margin_threshold: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApprenticeshipStatus {
    /// Margin fell to the threshold.
    Converged,
    /// A new policy reproduced an old feature expectation.
    Degenerate,
    EpochBudget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApprenticeshipResult {
    pub status: ApprenticeshipStatus,
    /// Margin before each epoch's plan, in squared pixels.
    pub margins: Vec<f64>,
    pub record: IrlRecord,
    /// Cost of the last epoch's policy (weights are the negated direction).
    pub params: CostParams,
}

fn pixel_features(frames: &[Vec<f64>], goal: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let px2 = FRAME_PIXELS * FRAME_PIXELS;
    Ok(feature_expectation(frames, goal, gamma)?
        .into_iter()
        .map(|v| v * px2)
        .collect())
}

fn expert_frames(t: &DemoTarget) -> Vec<Vec<f64>> {
    let mut frames = vec![t.start.xy()];
    frames.extend(t.frames_xy.iter().cloned());
    frames
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / n;
        }
    }
    out
}

/// Apprenticeship learning with the projection method.
///
/// Features are the per-keypoint, per-axis squared deviations from the
/// goal, so the policy for direction `w` plans with the weighted cost
/// `-w . phi` (rewards `w . phi`).
pub fn apprenticeship_train(
    config: &ApprenticeshipConfig,
    model: &DynamicsModel,
    train: &[DemoTarget],
    test: &[DemoTarget],
) -> Result<ApprenticeshipResult> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("apprenticeship needs at least one demo".into()))?;
    let (k, horizon) = (first.k(), first.horizon());
    check_targets(train, k, horizon)?;
    check_targets(test, k, horizon)?;
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let plan = PlanConfig {
        alpha: config.alpha,
        iters: config.iters,
        backtracking: false,
    };
    let layout = CostLayout::new(CostFamily::Weighted, k, horizon, 0)?;

    let mu_expert = mean_rows(
        &train
            .iter()
            .map(|t| pixel_features(&expert_frames(t), t.goal_xy(), config.gamma))
            .collect::<Result<Vec<_>>>()?,
    );
    let policy_mu = |params: Option<&CostParams>| -> Result<(Vec<f64>, f64)> {
        let rows: Vec<(Vec<f64>, f64)> = train
            .par_iter()
            .map(|t| {
                let predicted = match params {
                    Some(p) => {
                        optimize_actions(model, &t.start, t.goal_xy(), Objective::Learned(p), &plan, horizon, None)?
                            .predicted
                    }
                    None => model.rollout(&t.start, &vec![[0.0; DOF]; horizon])?,
                };
                let frames: Vec<Vec<f64>> = predicted.iter().map(|s| s.xy()).collect();
                let loss: f64 = frames[1..]
                    .iter()
                    .zip(&t.frames_xy)
                    .map(|(p, d)| p.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .sum();
                Ok((pixel_features(&frames, t.goal_xy(), config.gamma)?, loss))
            })
            .collect::<Result<_>>()?;
        let mus: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let loss = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        Ok((mean_rows(&mus), loss))
    };

    let (mu0, _) = policy_mu(None)?;
    let mut mu_bar = mu0;
    let mut margins = Vec::new();
    let mut record = IrlRecord::default();
    let mut params = CostParams::new(layout.clone(), vec![0.0; layout.len()])?;
    let mut status = ApprenticeshipStatus::EpochBudget;
    for epoch in 0..config.epochs {
        let (w, margin) = max_margin_direction(&mu_expert, &mu_bar);
        margins.push(margin);
        if margin <= config.margin_threshold {
            status = ApprenticeshipStatus::Converged;
            break;
        }
        params = CostParams::new(layout.clone(), w.iter().map(|v| -v).collect())?;
        let (mu_new, loss) = policy_mu(Some(&params))?;
        record.train_loss.push(loss);
        record.psi.push(w);
        if !test.is_empty() {
            record
                .test_relative
                .push(test_relative_distances(model, Objective::Learned(&params), test, &plan)?);
        }
        match project(&mu_expert, &mu_bar, &mu_new) {
            Some(next) => mu_bar = next,
            None => {
                log::info!("apprenticeship: policy repeated at epoch {epoch}");
                status = ApprenticeshipStatus::Degenerate;
                break;
            }
        }
    }
    Ok(ApprenticeshipResult {
        status,
        margins,
        record,
        params,
    })
}

/// Outcome of planning one test demo with a given cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Relative distance of the planned trajectory, all x/y channels.
    pub relative: f64,
    /// Same over x channels only.
    pub relative_x: f64,
    /// Goal MSE of the final frame in squared pixels; the executed frame
    /// when a simulator is given, the predicted one otherwise.
    pub goal_mse_px: f64,
    /// Relative distance of the executed trajectory, if executed.
    pub executed_relative: Option<f64>,
}

/// Plan each test demo from its start toward its goal under `objective`.
pub fn evaluate_cost(
    objective: Objective,
    targets: &[DemoTarget],
    model: &DynamicsModel,
    plan: &PlanConfig,
    sim: Option<&Simulator>,
) -> Result<Vec<EvalMetrics>> {
    targets
        .par_iter()
        .map(|t| {
            let goal = t.goal_xy();
            let result = optimize_actions(model, &t.start, goal, objective, plan, t.horizon(), None)?;
            let first = result.predicted[0].xy();
            let last = result.predicted.last().expect("nonempty").xy();
            let (final_xy, executed_relative) = match sim {
                Some(sim) => {
                    let executed = execute_plan(sim, &t.start, &result.actions)?;
                    let end = executed.last().expect("nonempty").xy();
                    let rel = relative_distance(&executed[0].xy(), &end, goal)?;
                    (end, Some(rel))
                }
                None => (last.clone(), None),
            };
            Ok(EvalMetrics {
                relative: result.relative_distance,
                relative_x: relative_distance_x(&first, &last, goal)?,
                goal_mse_px: goal_mse(&final_xy, goal)? * FRAME_PIXELS * FRAME_PIXELS,
                executed_relative,
            })
        })
        .collect()
}
