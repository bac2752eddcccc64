//! The six pipeline commands and the on-disk layout they share.
//!
//! Every seed writes under `<out_dir>/seed-<n>/`; cross-seed summaries,
//! the rendered config and the manifest sit at `<out_dir>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, PlanCost, Preset};
use super::io::{self, MetricRow, SummaryRow};
use super::manifest::RunManifest;
use crate::costs::{rebase, relativize_demo, CostFamily, CostParams, DemoTarget, RelativeDemo};
use crate::dynamics::{self, DynamicsModel, TrainConfig};
use crate::error::{Error, Result};
use crate::irl::{self, ApprenticeshipConfig, IrlConfig};
use crate::planner::{execute_plan, optimize_actions, Objective, PlanConfig};
use crate::sim::{Demonstration, SineSpec, Simulator, TaskSpec, DOF, NOMINAL_THETA};

pub const REACHING_DEMOS: usize = 15;
pub const REACHING_TRAIN: usize = 10;
/// Reaching start angles are drawn within this many radians of the nominal pose.
pub const REACHING_START_SPREAD: f64 = 0.1;
/// Range of the end-effector displacement magnitude along x, metres.
pub const REACHING_DX: (f64, f64) = (0.1, 0.25);
pub const PLACING_DX: f64 = 0.1;
pub const PLACING_DY: f64 = 0.1;
/// Where the scripted placing demo is recorded.
pub const PLACING_DEMO_START: [f64; DOF] = [
    NOMINAL_THETA[0] + 0.05,
    NOMINAL_THETA[1] - 0.05,
    NOMINAL_THETA[2] + 0.05,
];
/// Robot start configurations the placing cost is evaluated from; the cost
/// is trained from the first.
pub const PLACING_STARTS: [[f64; DOF]; 2] = [
    NOMINAL_THETA,
    [NOMINAL_THETA[0] - 0.1, NOMINAL_THETA[1] + 0.1, NOMINAL_THETA[2] - 0.05],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainDynamics,
    TrainIrl,
    Baseline,
    Plan,
    Eval,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::TrainDynamics,
        Command::TrainIrl,
        Command::Baseline,
        Command::Plan,
        Command::Eval,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDynamics => "train-dynamics",
            Command::TrainIrl => "train-irl",
            Command::Baseline => "baseline",
            Command::Plan => "plan",
            Command::Eval => "eval",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

/// Files written and lines worth showing the user.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub messages: Vec<String>,
}

impl Outcome {
    fn merge(mut self, other: Outcome) -> Self {
        self.files.extend(other.files);
        self.messages.extend(other.messages);
        self
    }
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

pub fn train_demo_path(cfg: &ExperimentConfig, seed: u64, i: usize) -> PathBuf {
    seed_dir(cfg, seed).join("demos").join(format!("train_{i:02}.csv"))
}

pub fn test_demo_path(cfg: &ExperimentConfig, seed: u64, i: usize) -> PathBuf {
    seed_dir(cfg, seed).join("demos").join(format!("test_{i:02}.csv"))
}

pub fn relative_demo_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("demos").join("placing_relative.csv")
}

pub fn starts_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("demos").join("starts.csv")
}

pub fn dataset_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("data").join("sine.csv")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("model").join("dynamics.kpd")
}

pub fn report_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("model").join("report.json")
}

/// Holds `cost.json`, `record.csv` and `weights.csv`.
pub fn irl_dir(cfg: &ExperimentConfig, seed: u64, family: CostFamily, demos: usize) -> PathBuf {
    seed_dir(cfg, seed).join("irl").join(format!("{family}-{demos}demo"))
}

/// Holds `cost.json`, `record.csv`, `margins.csv` and `status.txt`.
pub fn baseline_dir(cfg: &ExperimentConfig, seed: u64, demos: usize) -> PathBuf {
    seed_dir(cfg, seed).join("baseline").join(format!("{demos}demo"))
}

pub fn metrics_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("eval").join("metrics.csv")
}

pub fn summary_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("eval").join("summary.csv")
}

pub fn weights_summary_path(cfg: &ExperimentConfig, family: CostFamily, demos: usize) -> PathBuf {
    cfg.out_dir.join("eval").join(format!("weights_{family}-{demos}demo.csv"))
}

fn is_infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::Unreachable { .. } | Error::JointLimit { .. } | Error::ActionLimit { .. }
    )
}

/// Draw `count` feasible reaching demos: start angles within
/// [`REACHING_START_SPREAD`] of the nominal pose, end effector moved along x
/// by a magnitude in [`REACHING_DX`] with random sign. Infeasible draws are
/// discarded.
pub fn reaching_demos(sim: &Simulator, seed: u64, count: usize, horizon: usize) -> Result<Vec<Demonstration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 100 {
        if out.len() == count {
            break;
        }
        let theta: [f64; DOF] =
            std::array::from_fn(|j| NOMINAL_THETA[j] + rng.gen_range(-REACHING_START_SPREAD..REACHING_START_SPREAD));
        let magnitude = rng.gen_range(REACHING_DX.0..REACHING_DX.1);
        let dx = if rng.gen::<bool>() { magnitude } else { -magnitude };
        match TaskSpec::reaching(sim, theta, dx, horizon).and_then(|t| sim.generate_demo(&t)) {
            Ok(d) => out.push(d),
            Err(e) if is_infeasible(&e) => log::debug!("discarding reaching draw: {e}"),
            Err(e) => return Err(e),
        }
    }
    if out.len() < count {
        return Err(Error::Config(format!(
            "only {} of {count} reaching demos were feasible",
            out.len()
        )));
    }
    Ok(out)
}

pub fn placing_demo(sim: &Simulator, horizon: usize) -> Result<Demonstration> {
    sim.generate_demo(&TaskSpec::placing(sim, PLACING_DEMO_START, PLACING_DX, PLACING_DY, horizon)?)
}

fn require(path: &Path, producer: Command) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {}; run `irl {producer}` first",
            path.display()
        )))
    }
}

pub fn load_model(cfg: &ExperimentConfig, seed: u64) -> Result<DynamicsModel> {
    if !cfg.preset.uses_learned_model() {
        return Ok(DynamicsModel::GroundTruth(Simulator::default()));
    }
    let path = checkpoint_path(cfg, seed);
    require(&path, Command::TrainDynamics)?;
    Ok(DynamicsModel::Learned(dynamics::load_checkpoint(&path)?))
}

/// Training and test targets for one seed.
pub fn load_targets(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<DemoTarget>, Vec<DemoTarget>)> {
    match cfg.preset {
        Preset::Placing => {
            let rel_path = relative_demo_path(cfg, seed);
            require(&rel_path, Command::GenData)?;
            let rel = io::read_relative_demo(&rel_path)?;
            let starts = io::read_starts(&starts_path(cfg, seed))?;
            let sim = Simulator::default();
            let targets = starts
                .iter()
                .map(|th| rebase(&rel, &sim.state_at(*th)?))
                .collect::<Result<Vec<_>>>()?;
            Ok((targets[..1].to_vec(), targets))
        }
        _ => {
            let read = |paths: Vec<PathBuf>| -> Result<Vec<DemoTarget>> {
                paths
                    .iter()
                    .map(|p| {
                        require(p, Command::GenData)?;
                        io::read_demo(p)
                    })
                    .collect()
            };
            let train = read((0..REACHING_TRAIN).map(|i| train_demo_path(cfg, seed, i)).collect())?;
            let test = read(
                (0..REACHING_DEMOS - REACHING_TRAIN)
                    .map(|i| test_demo_path(cfg, seed, i))
                    .collect(),
            )?;
            Ok((train, test))
        }
    }
}

fn plan_config(cfg: &ExperimentConfig, alpha: f64) -> PlanConfig {
    PlanConfig {
        alpha,
        iters: cfg.iters,
        backtracking: false,
    }
}

fn gen_data(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let sim = Simulator::default();
    let mut out = Outcome::default();
    let horizon = cfg.preset.horizon();
    if cfg.preset.is_reaching() {
        let demos = reaching_demos(&sim, seed, REACHING_DEMOS, horizon)?;
        for (i, d) in demos.iter().enumerate() {
            let path = if i < REACHING_TRAIN {
                train_demo_path(cfg, seed, i)
            } else {
                test_demo_path(cfg, seed, i - REACHING_TRAIN)
            };
            io::write_demo(&path, d)?;
            out.files.push(path);
        }
    } else {
        let demo = placing_demo(&sim, horizon)?;
        let rel: RelativeDemo = relativize_demo(&demo);
        let (rp, sp) = (relative_demo_path(cfg, seed), starts_path(cfg, seed));
        io::write_relative_demo(&rp, &rel)?;
        io::write_starts(&sp, &PLACING_STARTS)?;
        out.files.extend([rp, sp]);
    }
    if cfg.preset.uses_learned_model() {
        let spec = SineSpec {
            n_steps: cfg.sine_steps,
            pixel_noise: cfg.pixel_noise,
            ..SineSpec::default()
        };
        let data = sim.generate_sine_data(&spec, seed)?;
        let path = dataset_path(cfg, seed);
        io::write_transitions(&path, &data)?;
        out.files.push(path);
    }
    out.messages.push(format!("seed {seed}: wrote {} files", out.files.len()));
    Ok(out)
}

fn train_dynamics(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    if !cfg.preset.uses_learned_model() {
        return Err(Error::Config(format!(
            "preset {} plans with the ground-truth model; nothing to train",
            cfg.preset
        )));
    }
    let data_path = dataset_path(cfg, seed);
    require(&data_path, Command::GenData)?;
    let data = io::read_transitions(&data_path)?;
    let config = TrainConfig {
        epochs: cfg.dyn_epochs,
        ..TrainConfig::default()
    };
    let report = dynamics::train(&data, &config, seed)?;
    let (cp, rp) = (checkpoint_path(cfg, seed), report_path(cfg, seed));
    if let Some(dir) = cp.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    dynamics::save_checkpoint(report.params(), &cp)?;
    dynamics::save_report(&report, &rp)?;
    Ok(Outcome {
        files: vec![cp, rp],
        messages: vec![format!(
            "seed {seed}: held-out NMSE {:.5} ({} constant dims excluded)",
            report.final_heldout(),
            report.excluded_dims
        )],
    })
}

fn train_irl(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let model = load_model(cfg, seed)?;
    let (train, test) = load_targets(cfg, seed)?;
    let mut out = Outcome::default();
    for &family in &cfg.families {
        for &n in &cfg.train_demos {
            let ic = IrlConfig {
                eta: cfg.eta_for(family),
                alpha: cfg.alpha,
                iters: cfg.iters,
                epochs: cfg.epochs,
                family,
                kernels: cfg.kernels,
            };
            let started = Instant::now();
            let (params, record) = irl::train_irl(&ic, &model, &train[..n], &test)?;
            let dir = irl_dir(cfg, seed, family, n);
            let files = [dir.join("cost.json"), dir.join("record.csv"), dir.join("weights.csv")];
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            params.save(&files[0])?;
            io::write_record(&files[1], &record)?;
            io::write_plain(&files[2], &params.to_csv())?;
            out.files.extend(files);
            let last = record.epochs() - 1;
            out.messages.push(format!(
                "seed {seed} {family} {n}-demo: loss {:.4e} -> {:.4e}, test relative {:.4} ({:.1}s)",
                record.train_loss[0],
                record.train_loss[last],
                record.test_mean(last),
                started.elapsed().as_secs_f64()
            ));
        }
    }
    Ok(out)
}

fn baseline(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let model = load_model(cfg, seed)?;
    let (train, test) = load_targets(cfg, seed)?;
    let mut out = Outcome::default();
    for &n in &cfg.train_demos {
        let ac = ApprenticeshipConfig {
            alpha: cfg.baseline_alpha,
            iters: cfg.iters,
            epochs: cfg.epochs,
            gamma: cfg.gamma,
            margin_threshold: 1.0,
        };
        let result = irl::apprenticeship_train(&ac, &model, &train[..n], &test)?;
        let dir = baseline_dir(cfg, seed, n);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files = [
            dir.join("cost.json"),
            dir.join("record.csv"),
            dir.join("margins.csv"),
            dir.join("status.txt"),
        ];
        result.params.save(&files[0])?;
        io::write_record(&files[1], &result.record)?;
        let margins: String = std::iter::once("epoch,margin\n".to_string())
            .chain(result.margins.iter().enumerate().map(|(e, m)| format!("{e},{m:.16e}\n")))
            .collect();
        io::write_plain(&files[2], &margins)?;
        io::write_plain(&files[3], &format!("{:?}\n", result.status))?;
        out.files.extend(files);
        out.messages.push(format!(
            "seed {seed} baseline {n}-demo: {:?} after {} epochs, final margin {:.3}",
            result.status,
            result.margins.len(),
            result.margins.last().copied().unwrap_or(f64::NAN)
        ));
    }
    Ok(out)
}

/// Learned or baseline cost for one training-set size.
fn load_cost(cfg: &ExperimentConfig, seed: u64, cost: PlanCost, demos: usize) -> Result<Option<CostParams>> {
    let (path, producer) = match cost {
        PlanCost::Default => return Ok(None),
        PlanCost::Baseline => (baseline_dir(cfg, seed, demos).join("cost.json"), Command::Baseline),
        PlanCost::Learned(f) => (irl_dir(cfg, seed, f, demos).join("cost.json"), Command::TrainIrl),
    };
    require(&path, producer)?;
    CostParams::load(&path).map(Some)
}

fn cost_alpha(cfg: &ExperimentConfig, cost: PlanCost) -> f64 {
    match cost {
        PlanCost::Baseline => cfg.baseline_alpha,
        _ => cfg.alpha,
    }
}

fn plan(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let model = load_model(cfg, seed)?;
    let (_, test) = load_targets(cfg, seed)?;
    let demos = *cfg.train_demos.iter().max().expect("validated nonempty");
    let params = load_cost(cfg, seed, cfg.plan_cost, demos)?;
    let objective = params.as_ref().map_or(Objective::Default, Objective::Learned);
    let pc = plan_config(cfg, cost_alpha(cfg, cfg.plan_cost));
    let sim = Simulator::default();
    let dir = seed_dir(cfg, seed).join("plans").join(cfg.plan_cost.to_string());
    let mut out = Outcome::default();
    for (i, t) in test.iter().enumerate() {
        let result = optimize_actions(&model, &t.start, t.goal_xy(), objective, &pc, t.horizon(), None)?;
        let executed = execute_plan(&sim, &t.start, &result.actions)?;
        let path = dir.join(format!("target_{i:02}.csv"));
        io::write_plan(&path, &result.predicted, &executed, &result.actions)?;
        out.files.push(path);
        out.messages.push(format!(
            "seed {seed} target {i}: relative distance {:.4}",
            result.relative_distance
        ));
    }
    Ok(out)
}

/// Every cost `eval` compares, with its training-set size.
pub fn eval_costs(cfg: &ExperimentConfig) -> Vec<(PlanCost, usize)> {
    let mut costs = vec![(PlanCost::Default, 0)];
    for &f in &cfg.families {
        for &n in &cfg.train_demos {
            costs.push((PlanCost::Learned(f), n));
        }
    }
    if cfg.baseline {
        costs.extend(cfg.train_demos.iter().map(|&n| (PlanCost::Baseline, n)));
    }
    costs
}

fn eval_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricRow>> {
    let model = load_model(cfg, seed)?;
    let (_, test) = load_targets(cfg, seed)?;
    let sim = Simulator::default();
    let mut rows = Vec::new();
    for (cost, n) in eval_costs(cfg) {
        let params = load_cost(cfg, seed, cost, n)?;
        let objective = params.as_ref().map_or(Objective::Default, Objective::Learned);
        let metrics = irl::evaluate_cost(objective, &test, &model, &plan_config(cfg, cost_alpha(cfg, cost)), Some(&sim))?;
        rows.extend(metrics.iter().enumerate().map(|(i, m)| MetricRow {
            seed,
            cost: cost.to_string(),
            train_demos: n,
            target: i,
            relative: m.relative,
            relative_x: m.relative_x,
            goal_mse_px: m.goal_mse_px,
            executed_relative: m.executed_relative.unwrap_or(f64::NAN),
        }));
    }
    Ok(rows)
}

/// Aggregate per-seed metrics: average over targets within a seed, then
/// mean and population std across seeds. Placing keeps starts apart.
pub fn summarize(rows: &[MetricRow], per_start: bool) -> Vec<SummaryRow> {
    type Key = (String, usize, Option<usize>);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<&MetricRow>>> = BTreeMap::new();
    for r in rows {
        let key = (r.cost.clone(), r.train_demos, per_start.then_some(r.target));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().entry(r.seed).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let by_seed = &groups[&key];
            let stat = |f: fn(&MetricRow) -> f64| -> (f64, Option<f64>) {
                let per_seed: Vec<f64> = by_seed
                    .values()
                    .map(|rs| irl::mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()))
                    .collect();
                let std = (per_seed.len() > 1).then(|| irl::std_dev(&per_seed));
                (irl::mean(&per_seed), std)
            };
            let (relative_mean, relative_std) = stat(|r| r.relative);
            let (relative_x_mean, relative_x_std) = stat(|r| r.relative_x);
            let (goal_mse_mean, goal_mse_std) = stat(|r| r.goal_mse_px);
            let (executed_relative_mean, executed_relative_std) = stat(|r| r.executed_relative);
            SummaryRow {
                cost: key.0,
                train_demos: key.1,
                start: key.2,
                seeds: by_seed.len(),
                relative_mean,
                relative_std,
                relative_x_mean,
                relative_x_std,
                goal_mse_mean,
                goal_mse_std,
                executed_relative_mean,
                executed_relative_std,
            }
        })
        .collect()
}

fn mean_std_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.3} ({s:.3})"),
        None => format!("{mean:.3}"),
    }
}

/// Markdown comparison table in `mean (std)` form.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let placing = rows.iter().any(|r| r.start.is_some());
    let mut out = String::from("| cost | demos |");
    if placing {
        out.push_str(" start |");
    }
    out.push_str(" relative | relative x | goal MSE (px^2) | executed relative |\n|---|---|");
    if placing {
        out.push_str("---|");
    }
    out.push_str("---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} |", r.cost, r.train_demos));
        if let Some(s) = r.start {
            out.push_str(&format!(" {s} |"));
        }
        out.push_str(&format!(
            " {} | {} | {} | {} |\n",
            mean_std_cell(r.relative_mean, r.relative_std),
            mean_std_cell(r.relative_x_mean, r.relative_x_std),
            mean_std_cell(r.goal_mse_mean, r.goal_mse_std),
            mean_std_cell(r.executed_relative_mean, r.executed_relative_std),
        ));
    }
    out
}

/// Per-weight mean and std across seeds, the data behind a weight bar plot.
fn weight_bars(cfg: &ExperimentConfig, family: CostFamily, demos: usize) -> Result<String> {
    let params = cfg
        .seeds
        .iter()
        .map(|&s| load_cost(cfg, s, PlanCost::Learned(family), demos).map(|p| p.expect("learned cost")))
        .collect::<Result<Vec<_>>>()?;
    let first = &params[0];
    let mut out = String::from("slot,keypoint,axis,mean,std\n");
    for slot in 0..first.slots() {
        for kp in 0..first.layout.k {
            for (axis, name) in ["x", "y"].iter().enumerate() {
                let w: Vec<f64> = params.iter().map(|p| p.weight(slot, kp, axis)).collect();
                out.push_str(&format!(
                    "{slot},{kp},{name},{:.16e},{:.16e}\n",
                    irl::mean(&w),
                    irl::std_dev(&w)
                ));
            }
        }
    }
    Ok(out)
}

fn eval(cfg: &ExperimentConfig) -> Result<Outcome> {
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&s| eval_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outcome::default();
    for (&seed, rows) in cfg.seeds.iter().zip(&per_seed) {
        let path = metrics_path(cfg, seed);
        io::write_metrics(&path, rows)?;
        out.files.push(path);
    }
    let all: Vec<MetricRow> = per_seed.into_iter().flatten().collect();
    let summary = summarize(&all, cfg.preset == Preset::Placing);
    let sp = summary_path(cfg);
    io::write_summary(&sp, &summary)?;
    let table = render_table(&summary);
    let tp = cfg.out_dir.join("eval").join("table.md");
    io::write_plain(&tp, &table)?;
    out.files.extend([sp, tp]);
    for &f in &cfg.families {
        for &n in &cfg.train_demos {
            let path = weights_summary_path(cfg, f, n);
            io::write_plain(&path, &weight_bars(cfg, f, n)?)?;
            out.files.push(path);
        }
    }
    out.messages.push(table);
    Ok(out)
}

/// Run one command for every configured seed and update the manifest.
pub fn run(cfg: &ExperimentConfig, command: Command) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let started = Instant::now();
    log::info!("{command} ({}) in {}", cfg.preset, cfg.out_dir.display());
    let per_seed = |f: fn(&ExperimentConfig, u64) -> Result<Outcome>| -> Result<Outcome> {
        let parts = cfg.seeds.par_iter().map(|&s| f(cfg, s)).collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().fold(Outcome::default(), Outcome::merge))
    };
    let mut outcome = match command {
        Command::GenData => per_seed(gen_data)?,
        Command::TrainDynamics => per_seed(train_dynamics)?,
        Command::TrainIrl => per_seed(train_irl)?,
        Command::Baseline => per_seed(baseline)?,
        Command::Plan => per_seed(plan)?,
        Command::Eval => eval(cfg)?,
    };
    let config_path = cfg.out_dir.join("config.txt");
    io::write_plain(&config_path, &cfg.render())?;
    outcome.files.push(config_path);

    let mut manifest = RunManifest::open(&cfg.out_dir, &cfg.hash(), &cfg.seeds)?;
    manifest.record(&cfg.out_dir, &outcome.files)?;
    manifest
        .timings
        .insert(command.tag().to_string(), started.elapsed().as_secs_f64());
    manifest.save(&cfg.out_dir)?;
    Ok(outcome)
}

/// Commands a full run of the preset needs, in order.
pub fn pipeline(cfg: &ExperimentConfig) -> Vec<Command> {
    let mut cmds = vec![Command::GenData];
    if cfg.preset.uses_learned_model() {
        cmds.push(Command::TrainDynamics);
    }
    cmds.push(Command::TrainIrl);
    if cfg.baseline {
        cmds.push(Command::Baseline);
    }
    cmds.push(Command::Eval);
    cmds
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Outcome> {
    pipeline(cfg)
        .into_iter()
        .try_fold(Outcome::default(), |acc, c| Ok(acc.merge(run(cfg, c)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(preset: Preset, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(preset);
        cfg.out_dir = dir.to_path_buf();
        cfg.seeds = vec![3];
        cfg.epochs = 2;
        cfg.iters = 2;
        cfg.dyn_epochs = 2;
        cfg.sine_steps = 40;
        cfg
    }

    #[test]
    fn command_tags_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.tag().parse::<Command>().unwrap(), c);
        }
        assert!("fly".parse::<Command>().is_err());
    }

    #[test]
    fn reaching_demos_are_deterministic_and_move_along_x() {
        let sim = Simulator::default();
        let a = reaching_demos(&sim, 9, 4, 25).unwrap();
        let b = reaching_demos(&sim, 9, 4, 25).unwrap();
        assert_eq!(a, b);
        for d in &a {
            let (s, g) = (d.start().xy(), d.goal_xy());
            let dx = (g[0] - s[0]).abs() / sim.camera.scale;
            assert!(dx > REACHING_DX.0 - 1e-6 && dx < REACHING_DX.1 + 1e-6, "dx {dx}");
            assert!((g[1] - s[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn known_pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::SimReachingKnown, dir.path());
        cfg.train_demos = vec![1, 2];
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.files.iter().all(|f| f.exists()));
        let rec = io::read_record(&irl_dir(&cfg, 3, CostFamily::Weighted, 2).join("record.csv")).unwrap();
        assert_eq!(rec.len(), 2);
        let summary = io::read_summary(&summary_path(&cfg)).unwrap();
        let costs: Vec<&str> = summary.iter().map(|r| r.cost.as_str()).collect();
        assert_eq!(costs, ["default", "weighted", "weighted", "baseline", "baseline"]);
        assert!(summary.iter().all(|r| r.relative_std.is_none()));
        let manifest = RunManifest::open(dir.path(), &cfg.hash(), &cfg.seeds).unwrap();
        assert!(manifest.verify(dir.path()).is_empty());
        for c in ["gen-data", "train-irl", "baseline", "eval"] {
            assert!(manifest.timings.contains_key(c));
        }
        assert!(run(&cfg, Command::TrainDynamics).is_err());

        let plan = run(&cfg, Command::Plan).unwrap();
        assert_eq!(plan.files.len(), 5 + 1);
    }

    #[test]
    fn placing_pipeline_reports_each_start() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::Placing, dir.path());
        cfg.families = vec![CostFamily::TimeDependent];
        run_pipeline(&cfg).unwrap();
        let summary = io::read_summary(&summary_path(&cfg)).unwrap();
        assert_eq!(summary.len(), 4);
        assert_eq!(summary.iter().filter(|r| r.start == Some(1)).count(), 2);
        let table = std::fs::read_to_string(dir.path().join("eval/table.md")).unwrap();
        assert!(table.contains("| start |"));
    }

    #[test]
    fn missing_artifacts_name_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Preset::ReachingLearned, dir.path());
        let err = run(&cfg, Command::TrainIrl).unwrap_err().to_string();
        assert!(err.contains("train-dynamics"), "{err}");
        run(&cfg, Command::GenData).unwrap();
        let err = run(&cfg, Command::Eval).unwrap_err().to_string();
        assert!(err.contains("train-dynamics"), "{err}");
    }

    #[test]
    fn summary_averages_targets_then_seeds() {
        let row = |seed, target, relative| MetricRow {
            seed,
            cost: "default".into(),
            train_demos: 0,
            target,
            relative,
            relative_x: 0.0,
            goal_mse_px: 1.0,
            executed_relative: 0.0,
        };
        let rows = vec![row(0, 0, 0.2), row(0, 1, 0.4), row(1, 0, 0.5), row(1, 1, 0.7)];
        let s = summarize(&rows, false);
        assert_eq!(s.len(), 1);
        assert!((s[0].relative_mean - 0.45).abs() < 1e-15);
        assert!((s[0].relative_std.unwrap() - 0.15).abs() < 1e-15);
        let p = summarize(&rows, true);
        assert_eq!(p.len(), 2);
        assert!((p[1].relative_mean - 0.55).abs() < 1e-15);
    }
}
