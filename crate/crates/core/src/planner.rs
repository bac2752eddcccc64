//! Gradient-descent MPC over open-loop action sequences.

use crate::costs::{constants, default_cost, xy_of, CostParams};
use crate::diff::{Graph, Tensor, Var};
use crate::dynamics::{BoundModel, DynamicsModel, StateVars};
use crate::error::{Error, Result};
use crate::sim::{Simulator, SystemState, DOF};

#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    /// Step size of the action updates.
    pub alpha: f64,
    pub iters: usize,
    /// Halve the step and retry whenever an update raises the cost.
    pub backtracking: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            iters: 50,
            backtracking: false,
        }
    }
}

impl PlanConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.iters == 0 {
            return Err(Error::Config(format!(
                "planner needs alpha > 0 and iters >= 1, got alpha={} iters={}",
                self.alpha, self.iters
            )));
        }
        Ok(())
    }
}

/// The cost a plan descends.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Default,
    Learned(&'a CostParams),
}

impl Objective<'_> {
    /// Record the cost of `frames` (x/y per step `1..=T`).
    pub fn record(&self, g: &mut Graph, frames: &[Var], goal: Var) -> Result<Var> {
        match self {
            Objective::Default => default_cost(g, frames, goal),
            Objective::Learned(p) => {
                let psi = g.constant_vec(&p.psi)?;
                p.layout.cost(g, psi, frames, goal)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub actions: Vec<[f64; DOF]>,
    /// Predicted states `0..=T` under the final actions.
    pub predicted: Vec<SystemState>,
    /// Cost before each update.
    pub cost_history: Vec<f64>,
    pub relative_distance: f64,
}

fn non_finite_gradient(err: Error, iteration: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::NonFiniteGradient {
            stage: "action update",
            index: iteration,
        },
        other => other,
    }
}

/// `iters` plain gradient steps `u <- u - alpha * dC/du`, all recorded on
/// `g`, so the returned node can be differentiated with respect to anything
/// `objective` depends on.
pub fn descend_recorded<F>(g: &mut Graph, u_init: Var, alpha: f64, iters: usize, mut objective: F) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut u = u_init;
    for i in 0..iters {
        let cost = objective(g, u)?;
        let grad = g.gradient(cost, &[u]).map_err(|e| non_finite_gradient(e, i))?[0];
        let step = g.scale(alpha, grad).map_err(|e| non_finite_gradient(e, i))?;
        u = g.sub(u, step).map_err(|e| non_finite_gradient(e, i))?;
    }
    Ok(u)
}

/// Same updates as [`descend_recorded`], but each step on a fresh graph.
/// Returns the final actions and the cost before each update.
pub fn descend_values<F>(u_init: Vec<f64>, config: &PlanConfig, mut objective: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    config.validate()?;
    let mut u = u_init;
    let mut alpha = config.alpha;
    let mut history: Vec<f64> = Vec::with_capacity(config.iters);
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut halvings = 0;
    while history.len() < config.iters {
        let i = history.len();
        let mut g = Graph::new();
        let uv = g.variable(Tensor::vector(u.clone()).map_err(|e| non_finite_gradient(e, i))?);
        let cost = objective(&mut g, uv).map_err(|e| non_finite_gradient(e, i))?;
        let value = g.scalar(cost)?;
        if config.backtracking && halvings < 40 {
            if let (Some(&last), Some((prev_u, prev_grad))) = (history.last(), previous.as_ref()) {
                if value > last {
                    alpha *= 0.5;
                    halvings += 1;
                    u = prev_u.iter().zip(prev_grad).map(|(p, d)| p - alpha * d).collect();
                    continue;
                }
            }
        }
        let grad = g.gradient(cost, &[uv]).map_err(|e| non_finite_gradient(e, i))?[0];
        let grad = g.value(grad).data().to_vec();
        history.push(value);
        let next: Vec<f64> = u.iter().zip(&grad).map(|(ui, gi)| ui - alpha * gi).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                stage: "action update",
                index: i,
            });
        }
        previous = Some((std::mem::replace(&mut u, next), grad));
    }
    Ok((u, history))
}

/// Split a flat `T*DOF` action node into per-step nodes.
pub fn action_steps(g: &mut Graph, u: Var) -> Result<Vec<Var>> {
    let n = g.value(u).numel();
    if n % DOF != 0 {
        return Err(Error::shape("actions", format!("{n} values is not T x {DOF}")));
    }
    (0..n / DOF).map(|t| g.slice(u, t * DOF, DOF)).collect()
}

/// Roll out `u` and return the predicted states plus x/y frames `1..=T`.
pub fn predicted_frames(
    g: &mut Graph,
    model: &BoundModel,
    s0: &StateVars,
    u: Var,
) -> Result<(Vec<StateVars>, Vec<Var>)> {
    let steps = action_steps(g, u)?;
    let traj = model.rollout(g, s0, &steps)?;
    let frames = traj[1..]
        .iter()
        .map(|s| xy_of(g, s.z))
        .collect::<Result<Vec<_>>>()?;
    Ok((traj, frames))
}

pub fn flatten_actions(actions: &[[f64; DOF]]) -> Vec<f64> {
    actions.iter().flatten().copied().collect()
}

pub fn unflatten_actions(flat: &[f64]) -> Vec<[f64; DOF]> {
    flat.chunks_exact(DOF)
        .map(|c| std::array::from_fn(|i| c[i]))
        .collect()
}

/// Plan `horizon` actions from `start` toward `goal_xy` with `objective`.
/// Actions start at zero unless `u_init` is given.
pub fn optimize_actions(
    model: &DynamicsModel,
    start: &SystemState,
    goal_xy: &[f64],
    objective: Objective,
    config: &PlanConfig,
    horizon: usize,
    u_init: Option<&[[f64; DOF]]>,
) -> Result<PlanResult> {
    if horizon == 0 {
        return Err(Error::Config("planning horizon must be at least 1".into()));
    }
    if let Objective::Learned(p) = objective {
        if p.layout.horizon != horizon || p.layout.k != start.k() {
            return Err(Error::shape(
                "plan",
                format!(
                    "cost built for K={}, T={} used with K={}, T={horizon}",
                    p.layout.k,
                    p.layout.horizon,
                    start.k()
                ),
            ));
        }
    }
    let u0 = match u_init {
        Some(u) if u.len() == horizon => flatten_actions(u),
        Some(u) => {
            return Err(Error::shape(
                "plan",
                format!("{} initial actions for horizon {horizon}", u.len()),
            ))
        }
        None => vec![0.0; horizon * DOF],
    };
    let build = |g: &mut Graph, u: Var| -> Result<(Vec<StateVars>, Var)> {
        let bound = model.bind(g)?;
        let s0 = StateVars::constant(g, start)?;
        let (traj, frames) = predicted_frames(g, &bound, &s0, u)?;
        let goal = g.constant_vec(goal_xy)?;
        let cost = objective.record(g, &frames, goal)?;
        Ok((traj, cost))
    };
    let (u, history) = descend_values(u0, config, |g, u| build(g, u).map(|(_, c)| c))?;
    let actions = unflatten_actions(&u);
    let predicted = model.rollout(start, &actions)?;
    let relative_distance = relative_distance(
        &predicted[0].xy(),
        &predicted.last().expect("nonempty").xy(),
        goal_xy,
    )?;
    Ok(PlanResult {
        actions,
        predicted,
        cost_history: history,
        relative_distance,
    })
}

/// Clamp to the arm's limits and run the plan open loop.
pub fn execute_plan(sim: &Simulator, start: &SystemState, actions: &[[f64; DOF]]) -> Result<Vec<SystemState>> {
    let clamped: Vec<[f64; DOF]> = actions.iter().map(|u| sim.arm.clamp_action(*u)).collect();
    sim.execute(start, &clamped)
}

fn distance(a: &[f64], b: &[f64], stride: usize) -> f64 {
    a.iter()
        .zip(b)
        .step_by(stride)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `|z_T - goal| / |z_0 - goal|` over x/y channels.
pub fn relative_distance(first_xy: &[f64], last_xy: &[f64], goal_xy: &[f64]) -> Result<f64> {
    relative(first_xy, last_xy, goal_xy, 1)
}

/// As [`relative_distance`] over the x channels only.
pub fn relative_distance_x(first_xy: &[f64], last_xy: &[f64], goal_xy: &[f64]) -> Result<f64> {
    relative(first_xy, last_xy, goal_xy, 2)
}

fn relative(first: &[f64], last: &[f64], goal: &[f64], stride: usize) -> Result<f64> {
    if first.len() != goal.len() || last.len() != goal.len() {
        return Err(Error::shape("relative distance", "frame and goal sizes differ"));
    }
    let d0 = distance(first, goal, stride);
    if d0 == 0.0 {
        return Err(Error::ZeroDistance);
    }
    Ok(distance(last, goal, stride) / d0)
}

/// Mean over keypoints of the squared x/y distance to the goal.
pub fn goal_mse(final_xy: &[f64], goal_xy: &[f64]) -> Result<f64> {
    if final_xy.len() != goal_xy.len() || goal_xy.len() % 2 != 0 || goal_xy.is_empty() {
        return Err(Error::shape("goal mse", "frame and goal sizes differ"));
    }
    let k = goal_xy.len() / 2;
    Ok(final_xy
        .iter()
        .zip(goal_xy)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / k as f64)
}

/// Cost of plain-value frames under `objective`.
pub fn objective_value(objective: Objective, frames_xy: &[Vec<f64>], goal_xy: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (frames, goal) = constants(&mut g, frames_xy, goal_xy)?;
    let c = objective.record(&mut g, &frames, goal)?;
    g.scalar(c)
}
