//! Flat `key=value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Recognized keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | `sim-reaching-known`, `reaching-learned` or `placing` (required, first) |
//! | `seed` | single seed, same as `seeds = N` |
//! | `seeds` | comma-separated seed list |
//! | `epochs` | outer epochs for IRL and the baseline |
//! | `eta` | outer rate for every family (otherwise the preset's per-family table) |
//! | `alpha` | inner (action) rate, also used for test-time planning |
//! | `baseline_alpha` | inner rate of the apprenticeship baseline |
//! | `iters_max` | inner gradient steps |
//! | `cost_family` | `weighted`, `timedep`, `rbf`, a comma list, or `all` |
//! | `kernels` | RBF kernel count |
//! | `gamma` | baseline discount |
//! | `train_demos` | comma list of training-set sizes, e.g. `1,10` |
//! | `baseline` | `true`/`false`: whether `eval` expects baseline artifacts |
//! | `plan_cost` | cost used by `plan`: `default`, `baseline` or a family tag |
//! | `dyn_epochs` | dynamics training epochs |
//! | `sine_steps` | transitions in the sine dataset |
//! | `pixel_noise` | keypoint noise on the sine dataset, image units |
//! | `out_dir` | output directory |

use std::fmt::Write as _;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costs::CostFamily;
use crate::error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "KPIRL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    SimReachingKnown,
    ReachingLearned,
    Placing,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::SimReachingKnown, Preset::ReachingLearned, Preset::Placing];

    pub fn tag(self) -> &'static str {
        match self {
            Preset::SimReachingKnown => "sim-reaching-known",
            Preset::ReachingLearned => "reaching-learned",
            Preset::Placing => "placing",
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Preset::Placing => 10,
            _ => 25,
        }
    }

    /// Keypoints per frame: three on the held object, one background.
    pub fn keypoints(self) -> usize {
        4
    }

    pub fn uses_learned_model(self) -> bool {
        !matches!(self, Preset::SimReachingKnown)
    }

    pub fn is_reaching(self) -> bool {
        !matches!(self, Preset::Placing)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// What `plan` optimizes against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanCost {
    Default,
    Baseline,
    Learned(CostFamily),
}

impl fmt::Display for PlanCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanCost::Default => f.write_str("default"),
            PlanCost::Baseline => f.write_str("baseline"),
            PlanCost::Learned(family) => f.write_str(family.tag()),
        }
    }
}

impl FromStr for PlanCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(PlanCost::Default),
            "baseline" => Ok(PlanCost::Baseline),
            other => Ok(PlanCost::Learned(other.parse()?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Overrides the preset's per-family outer rate.
    pub eta: Option<f64>,
    pub alpha: f64,
    pub baseline_alpha: f64,
    pub iters: usize,
    pub families: Vec<CostFamily>,
    pub kernels: usize,
    pub gamma: f64,
    pub train_demos: Vec<usize>,
    pub baseline: bool,
    pub plan_cost: PlanCost,
    pub dyn_epochs: usize,
    pub sine_steps: usize,
    pub pixel_noise: f64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let out_dir = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(preset.tag());
        let base = Self {
            preset,
            seeds: vec![0, 1, 2],
            epochs: 200,
            eta: None,
            alpha: 1e-4,
            baseline_alpha: 1e-2,
            iters: 50,
            families: vec![CostFamily::Weighted],
            kernels: 5,
            gamma: 0.9,
            train_demos: vec![1],
            baseline: true,
            plan_cost: PlanCost::Learned(CostFamily::Weighted),
            dyn_epochs: 400,
            sine_steps: 2000,
            pixel_noise: 0.0,
            out_dir,
        };
        match preset {
            Preset::SimReachingKnown => base,
            Preset::ReachingLearned => Self {
                epochs: 60,
                alpha: 3e-5,
                baseline_alpha: 3e-3,
                families: CostFamily::ALL.to_vec(),
                train_demos: vec![1, 10],
                ..base
            },
            Preset::Placing => Self {
                epochs: 5000,
                alpha: 1e-3,
                families: CostFamily::ALL.to_vec(),
                baseline: false,
                plan_cost: PlanCost::Learned(CostFamily::TimeDependent),
                ..base
            },
        }
    }

    /// Outer rate used for `family`.
    pub fn eta_for(&self, family: CostFamily) -> f64 {
        if let Some(eta) = self.eta {
            return eta;
        }
        use CostFamily::*;
        match (self.preset, family) {
            (Preset::SimReachingKnown, Weighted) => 15.0,
            (Preset::SimReachingKnown, TimeDependent) => 15.0 * 25.0,
            (Preset::SimReachingKnown, Rbf) => 15.0 * 5.0,
            (Preset::ReachingLearned, Weighted) => 60.0,
            (Preset::ReachingLearned, TimeDependent) => 60.0 * 25.0,
            (Preset::ReachingLearned, Rbf) => 60.0 * 5.0,
            (Preset::Placing, Weighted) => 4.5,
            (Preset::Placing, TimeDependent) => 45.0,
            (Preset::Placing, Rbf) => 9.0,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((n + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .find(|(_, k, _)| k == "preset")
            .ok_or_else(|| Error::Config("missing `preset` key".into()))?
            .2
            .parse()?;
        let mut config = Self::preset(preset);
        for (line, key, value) in &pairs {
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value.split(',').map(|v| num(key, v.trim())).collect()
        }
        match key {
            "preset" => {
                let p: Preset = value.parse()?;
                if p != self.preset {
                    return Err(Error::Config("preset may only be given once".into()));
                }
            }
            "seed" => self.seeds = vec![num(key, value)?],
            "seeds" => self.seeds = list(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "eta" => self.eta = Some(num(key, value)?),
            "alpha" => self.alpha = num(key, value)?,
            "baseline_alpha" => self.baseline_alpha = num(key, value)?,
            "iters_max" => self.iters = num(key, value)?,
            "cost_family" => {
                self.families = if value == "all" {
                    CostFamily::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_>>()?
                }
            }
            "kernels" => self.kernels = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "train_demos" => self.train_demos = list(key, value)?,
            "baseline" => self.baseline = num(key, value)?,
            "plan_cost" => self.plan_cost = value.parse()?,
            "dyn_epochs" => self.dyn_epochs = num(key, value)?,
            "sine_steps" => self.sine_steps = num(key, value)?,
            "pixel_noise" => self.pixel_noise = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.families.is_empty() {
            return bad("at least one cost family is required");
        }
        if self.epochs == 0 || self.iters == 0 {
            return bad("epochs and iters_max must be at least 1");
        }
        if !(self.alpha > 0.0) || !(self.baseline_alpha > 0.0) || self.eta.is_some_and(|e| !(e > 0.0)) {
            return bad("rates must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel_noise must be nonnegative");
        }
        let available = match self.preset {
            Preset::Placing => 1,
            _ => crate::harness::experiment::REACHING_TRAIN,
        };
        if self.train_demos.iter().any(|&n| n == 0 || n > available) {
            return Err(Error::Config(format!(
                "train_demos must lie in 1..={available} for {}",
                self.preset
            )));
        }
        if self.preset.uses_learned_model() && self.sine_steps < 4 {
            return bad("sine_steps must be at least 4");
        }
        if self.families.contains(&CostFamily::Rbf) && self.kernels >= self.preset.horizon() {
            return bad("kernels must be smaller than the horizon");
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn render(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        let _ = writeln!(out, "preset = {}", self.preset);
        let _ = writeln!(out, "seeds = {}", join(self.seeds.iter().map(|s| s.to_string()).collect()));
        let _ = writeln!(out, "epochs = {}", self.epochs);
        if let Some(eta) = self.eta {
            let _ = writeln!(out, "eta = {eta}");
        }
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "baseline_alpha = {}", self.baseline_alpha);
        let _ = writeln!(out, "iters_max = {}", self.iters);
        let _ = writeln!(
            out,
            "cost_family = {}",
            join(self.families.iter().map(|f| f.tag().to_string()).collect())
        );
        let _ = writeln!(out, "kernels = {}", self.kernels);
        let _ = writeln!(out, "gamma = {}", self.gamma);
        let _ = writeln!(
            out,
            "train_demos = {}",
            join(self.train_demos.iter().map(|n| n.to_string()).collect())
        );
        let _ = writeln!(out, "baseline = {}", self.baseline);
        let _ = writeln!(out, "plan_cost = {}", self.plan_cost);
        let _ = writeln!(out, "dyn_epochs = {}", self.dyn_epochs);
        let _ = writeln!(out, "sine_steps = {}", self.sine_steps);
        let _ = writeln!(out, "pixel_noise = {}", self.pixel_noise);
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        out
    }

    /// SHA-256 of the rendered configuration without `out_dir`.
    pub fn hash(&self) -> String {
        let text: String = self
            .render()
            .lines()
            .filter(|l| !l.starts_with("out_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
