//! Planar 3-link arm holding an object that carries keypoints.
//!
//! The simulator stands in for robot, camera and keypoint detector: it
//! emits keypoints directly in normalized image coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::dot_seq;
use crate::error::{Error, Result};

pub const DOF: usize = 3;

/// Image side length in pixels. Keypoint coordinates are stored as
/// fractions of this frame, so `[0, 1]` spans the full image.
pub const FRAME_PIXELS: f64 = 240.0;

/// Folded configuration below the base, end effector near `(-0.07, -0.39)` m.
/// Around this pose a joint-space step that moves the object keypoints along
/// x barely moves them along y. Default start pose for scripted tasks.
pub const NOMINAL_THETA: [f64; DOF] = [-1.1, -1.2, -2.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub link_lengths: [f64; DOF],
    pub joint_limits: [[f64; 2]; DOF],
    /// Largest admissible `|u_i|` per control step, radians.
    pub step_limit: f64,
    /// Seconds per control step.
    pub control_period: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            link_lengths: [0.4, 0.3, 0.2],
            joint_limits: [[-3.1, 3.1], [-2.6, 2.6], [-2.6, 2.6]],
            step_limit: 0.15,
            control_period: 0.2,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::Config("joint limits must satisfy min < max".into()));
        }
        if !(self.step_limit > 0.0) || !(self.control_period > 0.0) {
            return Err(Error::Config(
                "step limit and control period must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn check_limits(&self, theta: &[f64; DOF]) -> Result<()> {
        for (joint, (&angle, [min, max])) in theta.iter().zip(&self.joint_limits).enumerate() {
            if !(angle >= *min && angle <= *max) {
                return Err(Error::JointLimit {
                    joint,
                    angle,
                    min: *min,
                    max: *max,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, theta: [f64; DOF]) -> [f64; DOF] {
        let mut out = theta;
        for (v, [lo, hi]) in out.iter_mut().zip(&self.joint_limits) {
            *v = v.clamp(*lo, *hi);
        }
        out
    }

    /// Clamp every action component to the per-step limit.
    pub fn clamp_action(&self, u: [f64; DOF]) -> [f64; DOF] {
        u.map(|v| v.clamp(-self.step_limit, self.step_limit))
    }
}

/// Affine map from workspace meters to normalized image coordinates.
/// The image `y` axis points down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMap {
    /// Image units per meter.
    pub scale: f64,
    /// Image coordinates of the workspace origin.
    pub origin: [f64; 2],
}

impl Default for CameraMap {
    /// Workspace square `[-1, 1]^2` onto the full frame.
    fn default() -> Self {
        Self {
            scale: 0.5,
            origin: [0.5, 0.5],
        }
    }
}

impl CameraMap {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(Error::Config("camera scale must be nonzero".into()));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 2]) -> [f64; 2] {
        [self.origin[0] + self.scale * p[0], self.origin[1] - self.scale * p[1]]
    }

    pub fn unproject(&self, q: [f64; 2]) -> [f64; 2] {
        [(q[0] - self.origin[0]) / self.scale, (self.origin[1] - q[1]) / self.scale]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub theta: [f64; DOF],
    /// Joint velocities, radians per second.
    pub theta_dot: [f64; DOF],
    pub keypoints: Vec<Keypoint>,
}

impl SystemState {
    pub fn k(&self) -> usize {
        self.keypoints.len()
    }

    /// `(x, y, intensity)` per keypoint, concatenated.
    pub fn flat_keypoints(&self) -> Vec<f64> {
        flatten_keypoints(&self.keypoints)
    }

    /// `(x, y)` per keypoint, concatenated.
    pub fn xy(&self) -> Vec<f64> {
        self.keypoints.iter().flat_map(|kp| [kp.x, kp.y]).collect()
    }
}

pub fn flatten_keypoints(kps: &[Keypoint]) -> Vec<f64> {
    kps.iter().flat_map(|kp| [kp.x, kp.y, kp.intensity]).collect()
}

pub fn unflatten_keypoints(flat: &[f64]) -> Vec<Keypoint> {
    flat.chunks_exact(3)
        .map(|c| Keypoint {
            x: c[0],
            y: c[1],
            intensity: c[2],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 2],
    pub orientation: f64,
}

/// Sequence of states; element 0 is the start state.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub states: Vec<SystemState>,
}

impl Demonstration {
    pub fn start(&self) -> &SystemState {
        &self.states[0]
    }

    /// Number of actions, one less than the number of states.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn k(&self) -> usize {
        self.states[0].k()
    }

    /// Keypoints of the last frame.
    pub fn goal(&self) -> &[Keypoint] {
        &self.states.last().expect("nonempty demonstration").keypoints
    }

    pub fn goal_xy(&self) -> Vec<f64> {
        self.states.last().expect("nonempty demonstration").xy()
    }

    /// `(x, y)` of frames `1..=T`, the frames an optimized plan is scored on.
    pub fn frames_xy(&self) -> Vec<Vec<f64>> {
        self.states[1..].iter().map(SystemState::xy).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reaching,
    Placing,
}

/// A scripted object path: end-effector positions for frames `1..=T` at a
/// fixed orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub start_theta: [f64; DOF],
    pub path: Vec<[f64; 2]>,
}

impl TaskSpec {
    pub fn horizon(&self) -> usize {
        self.path.len()
    }

    /// Move along workspace `x` by `dx` at constant speed over `horizon` frames.
    pub fn reaching(sim: &Simulator, start_theta: [f64; DOF], dx: f64, horizon: usize) -> Result<Self> {
        let p0 = sim.forward_kinematics(&start_theta)?.position;
        let path = (1..=horizon)
            .map(|t| [p0[0] + dx * t as f64 / horizon as f64, p0[1]])
            .collect();
        Ok(Self {
            kind: TaskKind::Reaching,
            start_theta,
            path,
        })
    }

    /// Move along `x` by `dx` during the first half of the horizon, then
    /// along `y` by `dy` during the second half.
    pub fn placing(
        sim: &Simulator,
        start_theta: [f64; DOF],
        dx: f64,
        dy: f64,
        horizon: usize,
    ) -> Result<Self> {
        let p0 = sim.forward_kinematics(&start_theta)?.position;
        let first = horizon / 2;
        let second = horizon - first;
        let mut path = Vec::with_capacity(horizon);
        for t in 1..=first {
            path.push([p0[0] + dx * t as f64 / first as f64, p0[1]]);
        }
        for t in 1..=second {
            path.push([p0[0] + dx, p0[1] + dy * t as f64 / second as f64]);
        }
        Ok(Self {
            kind: TaskKind::Placing,
            start_theta,
            path,
        })
    }
}

/// One `(state, action, next-state)` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: SystemState,
    pub action: [f64; DOF],
    pub next: SystemState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineSpec {
    pub center: [f64; DOF],
    /// Hz.
    pub frequencies: Vec<f64>,
    /// Per-frequency command amplitude, radians per step.
    pub amplitudes: Vec<f64>,
    /// Per-joint multiplier on the commanded amplitude.
    pub joint_emphasis: [f64; DOF],
    pub n_steps: usize,
    /// Standard deviation of additive keypoint noise, image units.
    pub pixel_noise: f64,
}

impl Default for SineSpec {
    fn default() -> Self {
        Self {
            center: NOMINAL_THETA,
            frequencies: vec![0.07, 0.9, 1.3, 1.7, 2.3],
            amplitudes: vec![0.03; 5],
            joint_emphasis: [1.0, 0.6, 1.0],
            n_steps: 2000,
            pixel_noise: 0.0,
        }
    }
}

/// Arm, camera and keypoint layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub arm: ArmConfig,
    pub camera: CameraMap,
    /// Object keypoints in the end-effector frame, meters.
    pub object_offsets: Vec<[f64; 2]>,
    /// Fixed background keypoint, image units.
    pub background: [f64; 2],
}

impl Default for Simulator {
    fn default() -> Self {
        Self {
            arm: ArmConfig::default(),
            camera: CameraMap::default(),
            object_offsets: vec![[0.05, 0.06], [0.05, -0.06], [0.12, 0.0]],
            background: [0.12, 0.88],
        }
    }
}

impl Simulator {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.camera.validate()
    }

    /// Number of keypoints, including the background one.
    pub fn k(&self) -> usize {
        self.object_offsets.len() + 1
    }

    /// Cumulative link angles `[t1, t1 + t2, t1 + t2 + t3]`.
    ///
    /// Evaluated as a product with a lower-triangular ones matrix so the
    /// differentiable adapter in `dynamics` reproduces it bit for bit.
    pub fn link_angles(theta: &[f64; DOF]) -> [f64; DOF] {
        let mut out = [0.0; DOF];
        for (r, o) in out.iter_mut().enumerate() {
            let row: [f64; DOF] = std::array::from_fn(|c| if c <= r { 1.0 } else { 0.0 });
            *o = dot_seq(&row, theta);
        }
        out
    }

    pub fn forward_kinematics(&self, theta: &[f64; DOF]) -> Result<Pose> {
        self.arm.check_limits(theta)?;
        Ok(self.fk_unchecked(theta))
    }

    fn fk_unchecked(&self, theta: &[f64; DOF]) -> Pose {
        let a = Self::link_angles(theta);
        let c = a.map(f64::cos);
        let s = a.map(f64::sin);
        Pose {
            position: [
                dot_seq(&self.arm.link_lengths, &c),
                dot_seq(&self.arm.link_lengths, &s),
            ],
            orientation: a[DOF - 1],
        }
    }

    pub fn observe_keypoints(&self, theta: &[f64; DOF]) -> Result<Vec<Keypoint>> {
        self.arm.check_limits(theta)?;
        Ok(self.observe_unchecked(theta))
    }

    fn observe_unchecked(&self, theta: &[f64; DOF]) -> Vec<Keypoint> {
        let a = Self::link_angles(theta);
        let c = a.map(f64::cos);
        let s = a.map(f64::sin);
        let px = dot_seq(&self.arm.link_lengths, &c);
        let py = dot_seq(&self.arm.link_lengths, &s);
        let (cphi, sphi) = (c[DOF - 1], s[DOF - 1]);
        let cam = &self.camera;
        let mut kps: Vec<Keypoint> = self
            .object_offsets
            .iter()
            .map(|[ox, oy]| {
                let wx = px + (cphi * ox - sphi * oy);
                let wy = py + (sphi * ox + cphi * oy);
                Keypoint {
                    x: cam.origin[0] + cam.scale * wx,
                    y: cam.origin[1] - cam.scale * wy,
                    intensity: 1.0,
                }
            })
            .collect();
        kps.push(Keypoint {
            x: self.background[0],
            y: self.background[1],
            intensity: 1.0,
        });
        kps
    }

    pub fn state_at(&self, theta: [f64; DOF]) -> Result<SystemState> {
        Ok(SystemState {
            theta,
            theta_dot: [0.0; DOF],
            keypoints: self.observe_keypoints(&theta)?,
        })
    }

    pub fn step(&self, state: &SystemState, u: &[f64; DOF]) -> Result<SystemState> {
        let limit = self.arm.step_limit;
        for (joint, &value) in u.iter().enumerate() {
            if !(value.abs() <= limit) {
                return Err(Error::ActionLimit { joint, value, limit });
            }
        }
        let raw: [f64; DOF] = std::array::from_fn(|i| state.theta[i] + u[i]);
        let theta = self.arm.clamp(raw);
        let period = self.arm.control_period;
        let theta_dot = std::array::from_fn(|i| (theta[i] - state.theta[i]) / period);
        Ok(SystemState {
            theta,
            theta_dot,
            keypoints: self.observe_unchecked(&theta),
        })
    }

    /// Execute `actions` open loop from `start`; the result includes `start`.
    pub fn execute(&self, start: &SystemState, actions: &[[f64; DOF]]) -> Result<Vec<SystemState>> {
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(start.clone());
        for u in actions {
            let next = self.step(states.last().expect("nonempty"), u)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Task-space Jacobian of `(x, y, orientation)` with respect to `theta`.
    fn jacobian(&self, theta: &[f64; DOF]) -> [[f64; DOF]; 3] {
        let a = Self::link_angles(theta);
        let l = &self.arm.link_lengths;
        let mut jac = [[0.0; DOF]; 3];
        for i in 0..DOF {
            for j in i..DOF {
                jac[0][i] -= l[j] * a[j].sin();
                jac[1][i] += l[j] * a[j].cos();
            }
            jac[2][i] = 1.0;
        }
        jac
    }

    /// Damped-least-squares IK toward `target` starting from `seed`.
    /// Returns the solution and the final task-space error norm.
    pub fn inverse_kinematics(&self, target: &Pose, seed: [f64; DOF]) -> ([f64; DOF], f64) {
        const DAMPING: f64 = 1e-2;
        const MAX_ITERS: usize = 500;
        let mut theta = seed;
        let mut err_norm = f64::INFINITY;
        for _ in 0..MAX_ITERS {
            let pose = self.fk_unchecked(&theta);
            let e = [
                target.position[0] - pose.position[0],
                target.position[1] - pose.position[1],
                target.orientation - pose.orientation,
            ];
            err_norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if err_norm < 1e-13 {
                break;
            }
            let jac = self.jacobian(&theta);
            // (J J^T + lambda^2 I) y = e, then dtheta = J^T y
            let mut a = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    a[r][c] = (0..DOF).map(|k| jac[r][k] * jac[c][k]).sum::<f64>();
                }
                a[r][r] += DAMPING * DAMPING;
            }
            let Some(y) = solve3(a, e) else { break };
            for (k, th) in theta.iter_mut().enumerate() {
                *th += (0..3).map(|r| jac[r][k] * y[r]).sum::<f64>();
            }
            theta = self.arm.clamp(theta);
        }
        (theta, err_norm)
    }

    /// Track the scripted path with DLS inverse kinematics and execute the
    /// resulting joint displacements.
    pub fn generate_demo(&self, task: &TaskSpec) -> Result<Demonstration> {
        let start = self.state_at(task.start_theta)?;
        let orientation = self.fk_unchecked(&task.start_theta).orientation;
        let mut states = vec![start];
        for (i, waypoint) in task.path.iter().enumerate() {
            let frame = i + 1;
            let current = states.last().expect("nonempty").clone();
            let target = Pose {
                position: *waypoint,
                orientation,
            };
            let (theta, err) = self.inverse_kinematics(&target, current.theta);
            if err > 1e-9 {
                return Err(Error::Unreachable {
                    frame,
                    reason: format!("inverse kinematics residual {err:.3e}"),
                });
            }
            let u: [f64; DOF] = std::array::from_fn(|j| theta[j] - current.theta[j]);
            if u.iter().any(|v| v.abs() > self.arm.step_limit) {
                return Err(Error::Unreachable {
                    frame,
                    reason: format!("joint displacement {u:?} exceeds step limit"),
                });
            }
            states.push(self.step(&current, &u)?);
        }
        Ok(Demonstration { states })
    }

    /// Self-supervised dynamics data from sinusoidal joint commands.
    pub fn generate_sine_data(&self, spec: &SineSpec, seed: u64) -> Result<Vec<Transition>> {
        if spec.frequencies.len() != spec.amplitudes.len() {
            return Err(Error::Config(
                "sine frequencies and amplitudes differ in length".into(),
            ));
        }
        let total: f64 = spec.amplitudes.iter().map(|a| a.abs()).sum();
        let peak = spec.joint_emphasis.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        if total * peak > self.arm.step_limit {
            return Err(Error::Config(format!(
                "sine amplitude {} exceeds per-step limit {}",
                total * peak,
                self.arm.step_limit
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<[f64; DOF]> = spec
            .frequencies
            .iter()
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let dt = self.arm.control_period;
        let mut state = self.state_at(self.arm.clamp(spec.center))?;
        let mut out = Vec::with_capacity(spec.n_steps);
        for step in 0..spec.n_steps {
            let time = step as f64 * dt;
            let mut u = [0.0; DOF];
            for (i, (f, a)) in spec.frequencies.iter().zip(&spec.amplitudes).enumerate() {
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj += a
                        * spec.joint_emphasis[j]
                        * (std::f64::consts::TAU * f * time + phases[i][j]).sin();
                }
            }
            let u = self.arm.clamp_action(u);
            let next = self.step(&state, &u)?;
            out.push(Transition {
                state: state.clone(),
                action: u,
                next: next.clone(),
            });
            state = next;
        }
        if spec.pixel_noise > 0.0 {
            let normal = rand_distr_normal(spec.pixel_noise);
            for tr in &mut out {
                for kp in tr.state.keypoints.iter_mut().chain(tr.next.keypoints.iter_mut()) {
                    kp.x += normal(&mut rng);
                    kp.y += normal(&mut rng);
                }
            }
        }
        Ok(out)
    }
}

/// Box-Muller sampler; avoids pulling in a distributions crate for one use.
fn rand_distr_normal(std: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |rng| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let rest: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - rest) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn sim() -> Simulator {
        Simulator::default()
    }

    #[test]
    fn fk_fully_extended() {
        let pose = sim().forward_kinematics(&[0.0; 3]).unwrap();
        assert!((pose.position[0] - 0.9).abs() < 1e-15);
        assert_eq!(pose.position[1], 0.0);
        assert_eq!(pose.orientation, 0.0);
    }

    #[test]
    fn fk_quarter_turn() {
        let pose = sim().forward_kinematics(&[FRAC_PI_2, 0.0, 0.0]).unwrap();
        assert!(pose.position[0].abs() < 1e-15);
        assert!((pose.position[1] - 0.9).abs() < 1e-15);
        assert_eq!(pose.orientation, FRAC_PI_2);
    }

    fn rot(a: f64) -> [[f64; 3]; 3] {
        [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]]
    }

    fn trans(x: f64) -> [[f64; 3]; 3] {
        [[1.0, 0.0, x], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    #[test]
    fn fk_matches_homogeneous_chain() {
        let s = sim();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let theta: [f64; 3] = std::array::from_fn(|i| {
                let [lo, hi] = s.arm.joint_limits[i];
                rng.gen_range(lo..hi)
            });
            let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            for i in 0..3 {
                m = matmul(m, rot(theta[i]));
                m = matmul(m, trans(s.arm.link_lengths[i]));
            }
            let pose = s.forward_kinematics(&theta).unwrap();
            assert!((pose.position[0] - m[0][2]).abs() < 1e-12);
            assert!((pose.position[1] - m[1][2]).abs() < 1e-12);
            let phi = m[1][0].atan2(m[0][0]);
            let diff = (pose.orientation - phi).rem_euclid(std::f64::consts::TAU);
            assert!(diff < 1e-12 || (std::f64::consts::TAU - diff) < 1e-12);
        }
    }

    #[test]
    fn fk_rejects_out_of_limits() {
        assert!(matches!(
            sim().forward_kinematics(&[0.0, 3.0, 0.0]),
            Err(Error::JointLimit { joint: 1, .. })
        ));
    }

    #[test]
    fn background_keypoint_is_fixed() {
        let s = sim();
        let a = s.observe_keypoints(&[0.1, 0.2, 0.3]).unwrap();
        let b = s.observe_keypoints(&[-1.0, 1.5, -0.4]).unwrap();
        assert_eq!(a.last(), b.last());
        assert!(a.iter().all(|kp| kp.intensity == 1.0));
    }

    #[test]
    fn zero_offsets_sit_on_end_effector() {
        let mut s = sim();
        s.object_offsets = vec![[0.0, 0.0]; 3];
        let theta = [0.3, 0.4, -0.2];
        let pose = s.forward_kinematics(&theta).unwrap();
        let px = s.camera.project(pose.position);
        for kp in &s.observe_keypoints(&theta).unwrap()[..3] {
            assert!((kp.x - px[0]).abs() < 1e-15 && (kp.y - px[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn translation_scales_through_camera() {
        let s = sim();
        let theta = [0.2, 1.0, 0.9];
        let pose = s.forward_kinematics(&theta).unwrap();
        let delta = [0.07, -0.03];
        let target = Pose {
            position: [pose.position[0] + delta[0], pose.position[1] + delta[1]],
            orientation: pose.orientation,
        };
        let (moved, err) = s.inverse_kinematics(&target, theta);
        assert!(err < 1e-12);
        let a = s.observe_keypoints(&theta).unwrap();
        let b = s.observe_keypoints(&moved).unwrap();
        for k in 0..3 {
            assert!((b[k].x - a[k].x - s.camera.scale * delta[0]).abs() < 1e-12);
            assert!((b[k].y - a[k].y + s.camera.scale * delta[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_action_is_stationary() {
        let s = sim();
        let st = s.state_at([0.2, 1.0, 0.9]).unwrap();
        let next = s.step(&st, &[0.0; 3]).unwrap();
        assert_eq!(next.theta, st.theta);
        assert_eq!(next.theta_dot, [0.0; 3]);
        assert_eq!(next.keypoints, st.keypoints);
    }

    #[test]
    fn step_clamps_at_joint_limit() {
        let s = sim();
        let st = s.state_at([3.1, 0.0, 0.0]).unwrap();
        let next = s.step(&st, &[0.1, 0.0, 0.0]).unwrap();
        assert_eq!(next.theta[0], 3.1);
        assert_eq!(next.theta_dot[0], 0.0);
    }

    #[test]
    fn step_rejects_large_actions() {
        let s = sim();
        let st = s.state_at([0.0; 3]).unwrap();
        assert!(matches!(
            s.step(&st, &[0.0, 0.2, 0.0]),
            Err(Error::ActionLimit { joint: 1, .. })
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let s = sim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actions: Vec<[f64; 3]> = (0..30)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.1..0.1)))
            .collect();
        let start = s.state_at([0.2, 1.0, 0.9]).unwrap();
        let a = s.execute(&start, &actions).unwrap();
        let b = s.execute(&start, &actions).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_consistency() {
        let s = sim();
        let start = s.state_at([0.2, 1.0, 0.9]).unwrap();
        let next = s.step(&start, &[0.05, -0.02, 0.1]).unwrap();
        assert_eq!(next.keypoints, s.observe_keypoints(&next.theta).unwrap());
    }

    #[test]
    fn reaching_demo_moves_only_in_x() {
        let s = sim();
        let task = TaskSpec::reaching(&s, NOMINAL_THETA, 0.2, 25).unwrap();
        let demo = s.generate_demo(&task).unwrap();
        assert_eq!(demo.horizon(), 25);
        for k in 0..3 {
            let ys: Vec<f64> = demo
                .states
                .iter()
                .map(|st| st.keypoints[k].y * FRAME_PIXELS)
                .collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
            assert!(var < 1e-6, "keypoint {k} y variance {var} px^2");
        }
        assert_eq!(demo.goal(), &demo.states[25].keypoints[..]);
        for st in &demo.states {
            for kp in &st.keypoints {
                assert!((0.0..=1.0).contains(&kp.x) && (0.0..=1.0).contains(&kp.y));
            }
        }
    }

    #[test]
    fn placing_demo_is_two_phase() {
        let s = sim();
        let task = TaskSpec::placing(&s, NOMINAL_THETA, 0.1, 0.1, 10).unwrap();
        let demo = s.generate_demo(&task).unwrap();
        assert_eq!(demo.horizon(), 10);
        for t in 6..=10 {
            for k in 0..3 {
                let dx = demo.states[t].keypoints[k].x - demo.states[t - 1].keypoints[k].x;
                assert!(dx.abs() * FRAME_PIXELS < 1e-6, "frame {t} dx {dx}");
            }
        }
    }

    #[test]
    fn unreachable_waypoint_reports_frame() {
        let s = sim();
        let task = TaskSpec::reaching(&s, NOMINAL_THETA, 3.0, 25).unwrap();
        match s.generate_demo(&task) {
            Err(Error::Unreachable { frame, .. }) => assert!(frame >= 1),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn sine_zero_amplitude_is_static() {
        let s = sim();
        let spec = SineSpec {
            amplitudes: vec![0.0; 5],
            n_steps: 20,
            ..SineSpec::default()
        };
        for tr in s.generate_sine_data(&spec, 1).unwrap() {
            assert_eq!(tr.action, [0.0; 3]);
            assert_eq!(tr.next.theta, tr.state.theta);
            assert_eq!(tr.next.keypoints, tr.state.keypoints);
        }
    }

    #[test]
    fn sine_tuples_are_self_consistent() {
        let s = sim();
        let spec = SineSpec {
            n_steps: 300,
            ..SineSpec::default()
        };
        for tr in s.generate_sine_data(&spec, 9).unwrap() {
            assert_eq!(s.step(&tr.state, &tr.action).unwrap(), tr.next);
        }
    }

    #[test]
    fn sine_covers_commanded_range() {
        let s = sim();
        let data = s.generate_sine_data(&SineSpec::default(), 11).unwrap();
        assert_eq!(data.len(), 2000);
        const BINS: usize = 20;
        for j in 0..3 {
            let angles: Vec<f64> = data.iter().map(|t| t.state.theta[j]).collect();
            let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut hit = [false; BINS];
            for a in &angles {
                let b = (((a - lo) / (hi - lo)) * BINS as f64) as usize;
                hit[b.min(BINS - 1)] = true;
            }
            let covered = hit.iter().filter(|h| **h).count();
            assert!(covered * 100 >= 80 * BINS, "joint {j}: {covered}/{BINS}");
        }
    }

    #[test]
    fn sine_rejects_excessive_amplitude() {
        let s = sim();
        let spec = SineSpec {
            amplitudes: vec![0.1, 0.1, 0.1],
            ..SineSpec::default()
        };
        assert!(s.generate_sine_data(&spec, 0).is_err());
    }
}
