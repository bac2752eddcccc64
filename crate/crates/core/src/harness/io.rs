//! CSV formats for demos, datasets, training records and metrics.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! file reads back bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::{DemoTarget, RelativeDemo};
use crate::error::{Error, Result};
use crate::sim::{Demonstration, Keypoint, SystemState, Transition, DOF};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, rows))
}

fn field(path: &Path, row: &csv::StringRecord, i: usize) -> Result<f64> {
    let raw = row
        .get(i)
        .ok_or_else(|| Error::format(path, format!("missing column {i}")))?;
    raw.parse()
        .map_err(|_| Error::format(path, format!("bad number {raw:?} in column {i}")))
}

fn keypoint_columns(header: &[String], first: usize, per: usize, path: &Path) -> Result<usize> {
    let rest = header.len().saturating_sub(first);
    if rest == 0 || rest % per != 0 {
        return Err(Error::format(path, "keypoint columns do not form whole keypoints"));
    }
    Ok(rest / per)
}

fn joint_header(prefix: &str) -> Vec<String> {
    let mut h: Vec<String> = (0..DOF).map(|j| format!("{prefix}theta_{j}")).collect();
    h.extend((0..DOF).map(|j| format!("{prefix}theta_dot_{j}")));
    h
}

fn keypoint_header(prefix: &str, k: usize) -> Vec<String> {
    (0..k)
        .flat_map(|i| ["x", "y", "i"].map(|a| format!("{prefix}kp{i}_{a}")))
        .collect()
}

fn push_state(row: &mut Vec<String>, s: &SystemState) {
    row.extend(s.theta.iter().chain(&s.theta_dot).map(f64::to_string));
    row.extend(s.flat_keypoints().iter().map(f64::to_string));
}

fn read_state(path: &Path, row: &csv::StringRecord, at: usize, k: usize) -> Result<SystemState> {
    let theta = std::array::from_fn(|j| field(path, row, at + j));
    let theta_dot = std::array::from_fn(|j| field(path, row, at + DOF + j));
    let mut keypoints = Vec::with_capacity(k);
    for i in 0..k {
        let c = at + 2 * DOF + 3 * i;
        keypoints.push(Keypoint {
            x: field(path, row, c)?,
            y: field(path, row, c + 1)?,
            intensity: field(path, row, c + 2)?,
        });
    }
    Ok(SystemState {
        theta: collect_array(theta)?,
        theta_dot: collect_array(theta_dot)?,
        keypoints,
    })
}

fn collect_array(a: [Result<f64>; DOF]) -> Result<[f64; DOF]> {
    let mut out = [0.0; DOF];
    for (o, v) in out.iter_mut().zip(a) {
        *o = v?;
    }
    Ok(out)
}

fn to_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Demo file: one row per frame `t = 0..=T`. Only row 0 carries the joint
/// state; later rows leave those columns empty, since a demonstration is
/// keypoints plus the initial proprioceptive state.
pub fn write_demo(path: &Path, demo: &Demonstration) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(joint_header(""));
    header.extend(keypoint_header("", demo.k()));
    let rows: Vec<Vec<String>> = demo
        .states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut row = vec![t.to_string()];
            if t == 0 {
                push_state(&mut row, s);
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * DOF));
                row.extend(s.flat_keypoints().iter().map(f64::to_string));
            }
            row
        })
        .collect();
    write_text(path, &to_csv(&header, &rows))
}

pub fn read_demo(path: &Path) -> Result<DemoTarget> {
    let (header, rows) = records(path)?;
    let k = keypoint_columns(&header, 1 + 2 * DOF, 3, path)?;
    if rows.len() < 2 {
        return Err(Error::format(path, "a demo needs at least two frames"));
    }
    let start = read_state(path, &rows[0], 1, k)?;
    let frames_xy = rows[1..]
        .iter()
        .map(|row| {
            (0..k)
                .flat_map(|i| [1 + 2 * DOF + 3 * i, 2 + 2 * DOF + 3 * i])
                .map(|c| field(path, row, c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DemoTarget { start, frames_xy })
}

pub fn write_relative_demo(path: &Path, rel: &RelativeDemo) -> Result<()> {
    let k = rel.offsets.first().map_or(0, |o| o.len() / 2);
    let mut header = vec!["t".to_string()];
    header.extend((0..k).flat_map(|i| [format!("kp{i}_dx"), format!("kp{i}_dy")]));
    let rows: Vec<Vec<String>> = rel
        .offsets
        .iter()
        .enumerate()
        .map(|(t, o)| std::iter::once(t.to_string()).chain(o.iter().map(f64::to_string)).collect())
        .collect();
    write_text(path, &to_csv(&header, &rows))
}

pub fn read_relative_demo(path: &Path) -> Result<RelativeDemo> {
    let (header, rows) = records(path)?;
    let k = keypoint_columns(&header, 1, 2, path)?;
    let offsets = rows
        .iter()
        .map(|row| (1..=2 * k).map(|c| field(path, row, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(RelativeDemo { offsets })
}

pub fn write_starts(path: &Path, starts: &[[f64; DOF]]) -> Result<()> {
    let mut header = vec!["start".to_string()];
    header.extend((0..DOF).map(|j| format!("theta_{j}")));
    let rows: Vec<Vec<String>> = starts
        .iter()
        .enumerate()
        .map(|(i, th)| std::iter::once(i.to_string()).chain(th.iter().map(f64::to_string)).collect())
        .collect();
    write_text(path, &to_csv(&header, &rows))
}

pub fn read_starts(path: &Path) -> Result<Vec<[f64; DOF]>> {
    let (_, rows) = records(path)?;
    rows.iter()
        .map(|row| collect_array(std::array::from_fn(|j| field(path, row, 1 + j))))
        .collect()
}

/// Dataset file: state, action and next state per row.
pub fn write_transitions(path: &Path, data: &[Transition]) -> Result<()> {
    let k = data.first().map_or(0, |t| t.state.k());
    let mut header = joint_header("");
    header.extend(keypoint_header("", k));
    header.extend((0..DOF).map(|j| format!("u_{j}")));
    header.extend(joint_header("next_"));
    header.extend(keypoint_header("next_", k));
    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|tr| {
            let mut row = Vec::with_capacity(header.len());
            push_state(&mut row, &tr.state);
            row.extend(tr.action.iter().map(f64::to_string));
            push_state(&mut row, &tr.next);
            row
        })
        .collect();
    write_text(path, &to_csv(&header, &rows))
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>> {
    let (header, rows) = records(path)?;
    let state_cols = header.len().saturating_sub(DOF) / 2;
    if header.len() < DOF || (header.len() - DOF) % 2 != 0 || state_cols < 2 * DOF || (state_cols - 2 * DOF) % 3 != 0 {
        return Err(Error::format(path, "unexpected dataset columns"));
    }
    let k = (state_cols - 2 * DOF) / 3;
    rows.iter()
        .map(|row| {
            Ok(Transition {
                state: read_state(path, row, 0, k)?,
                action: collect_array(std::array::from_fn(|j| field(path, row, state_cols + j)))?,
                next: read_state(path, row, state_cols + DOF, k)?,
            })
        })
        .collect()
}

/// One row of a training-record CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_rel_mean: f64,
    pub test_rel_std: f64,
}

pub fn write_record(path: &Path, record: &crate::irl::IrlRecord) -> Result<()> {
    write_text(path, &record.to_csv())
}

pub fn read_record(path: &Path) -> Result<Vec<RecordRow>> {
    let (_, rows) = records(path)?;
    rows.iter()
        .map(|row| {
            Ok(RecordRow {
                epoch: field(path, row, 0)? as usize,
                train_loss: field(path, row, 1)?,
                test_rel_mean: field(path, row, 2)?,
                test_rel_std: field(path, row, 3)?,
            })
        })
        .collect()
}

/// Per-target metrics of one planned cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    /// `default`, `baseline` or a cost family tag.
    pub cost: String,
    /// Training demos behind the cost; 0 for the default cost.
    pub train_demos: usize,
    /// Test demo index, or start configuration for placing.
    pub target: usize,
    pub relative: f64,
    pub relative_x: f64,
    pub goal_mse_px: f64,
    pub executed_relative: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = reader(path)?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<MetricRow>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Mean/std across seeds for one cost (and start, for placing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cost: String,
    pub train_demos: usize,
    /// Start configuration for placing; empty for reaching.
    pub start: Option<usize>,
    pub seeds: usize,
    pub relative_mean: f64,
    pub relative_std: Option<f64>,
    pub relative_x_mean: f64,
    pub relative_x_std: Option<f64>,
    pub goal_mse_mean: f64,
    pub goal_mse_std: Option<f64>,
    pub executed_relative_mean: f64,
    pub executed_relative_std: Option<f64>,
}

/// Write the summary; with a single seed the std columns are dropped.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let with_std = rows.iter().any(|r| r.seeds > 1);
    let mut header: Vec<String> = ["cost", "train_demos", "start", "seeds"].map(String::from).to_vec();
    for m in ["relative", "relative_x", "goal_mse", "executed_relative"] {
        header.push(format!("{m}_mean"));
        if with_std {
            header.push(format!("{m}_std"));
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.cost.clone(),
                r.train_demos.to_string(),
                r.start.map(|s| s.to_string()).unwrap_or_default(),
                r.seeds.to_string(),
            ];
            for (m, s) in [
                (r.relative_mean, r.relative_std),
                (r.relative_x_mean, r.relative_x_std),
                (r.goal_mse_mean, r.goal_mse_std),
                (r.executed_relative_mean, r.executed_relative_std),
            ] {
                row.push(m.to_string());
                if with_std {
                    row.push(s.map(|v| v.to_string()).unwrap_or_default());
                }
            }
            row
        })
        .collect();
    write_text(path, &to_csv(&header, &body))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let (header, rows) = records(path)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::format(path, format!("missing column {name}")));
    let opt = |row: &csv::StringRecord, name: &str| -> Result<Option<f64>> {
        match col(name) {
            Some(i) if !row[i].is_empty() => Ok(Some(field(path, row, i)?)),
            _ => Ok(None),
        }
    };
    rows.iter()
        .map(|row| {
            let start = &row[need("start")?];
            Ok(SummaryRow {
                cost: row[need("cost")?].to_string(),
                train_demos: field(path, row, need("train_demos")?)? as usize,
                start: if start.is_empty() {
                    None
                } else {
                    Some(start.parse().map_err(|_| Error::format(path, "bad start index"))?)
                },
                seeds: field(path, row, need("seeds")?)? as usize,
                relative_mean: field(path, row, need("relative_mean")?)?,
                relative_std: opt(row, "relative_std")?,
                relative_x_mean: field(path, row, need("relative_x_mean")?)?,
                relative_x_std: opt(row, "relative_x_std")?,
                goal_mse_mean: field(path, row, need("goal_mse_mean")?)?,
                goal_mse_std: opt(row, "goal_mse_std")?,
                executed_relative_mean: field(path, row, need("executed_relative_mean")?)?,
                executed_relative_std: opt(row, "executed_relative_std")?,
            })
        })
        .collect()
}

/// Predicted and executed keypoints of one plan, with the actions taken.
pub fn write_plan(
    path: &Path,
    predicted: &[SystemState],
    executed: &[SystemState],
    actions: &[[f64; DOF]],
) -> Result<()> {
    let k = predicted.first().map_or(0, |s| s.k());
    let mut header = vec!["t".to_string()];
    header.extend((0..DOF).map(|j| format!("u_{j}")));
    header.extend((0..k).flat_map(|i| [format!("pred_kp{i}_x"), format!("pred_kp{i}_y")]));
    header.extend((0..k).flat_map(|i| [format!("exec_kp{i}_x"), format!("exec_kp{i}_y")]));
    let rows: Vec<Vec<String>> = predicted
        .iter()
        .zip(executed)
        .enumerate()
        .map(|(t, (p, e))| {
            let mut row = vec![t.to_string()];
            match actions.get(t) {
                Some(u) => row.extend(u.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), DOF)),
            }
            row.extend(p.xy().iter().map(f64::to_string));
            row.extend(e.xy().iter().map(f64::to_string));
            row
        })
        .collect();
    write_text(path, &to_csv(&header, &rows))
}

pub(crate) fn write_plain(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::relativize_demo;
    use crate::irl::IrlRecord;
    use crate::sim::{SineSpec, Simulator, TaskSpec, NOMINAL_THETA};

    fn demo() -> Demonstration {
        let sim = Simulator::default();
        sim.generate_demo(&TaskSpec::reaching(&sim, NOMINAL_THETA, 0.12, 5).unwrap())
            .unwrap()
    }

    #[test]
    fn demo_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = demo();
        write_demo(&path, &d).unwrap();
        assert_eq!(read_demo(&path).unwrap(), DemoTarget::from_demo(&d));
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        assert!(text.lines().nth(2).unwrap().starts_with("1,,,,,,,"));
    }

    #[test]
    fn relative_demo_and_starts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rel = relativize_demo(&demo());
        let p = dir.path().join("rel.csv");
        write_relative_demo(&p, &rel).unwrap();
        assert_eq!(read_relative_demo(&p).unwrap(), rel);
        let starts = vec![NOMINAL_THETA, [0.1, -0.2, 1.0 / 3.0]];
        let p = dir.path().join("starts.csv");
        write_starts(&p, &starts).unwrap();
        assert_eq!(read_starts(&p).unwrap(), starts);
    }

    #[test]
    fn transitions_round_trip() {
        let sim = Simulator::default();
        let spec = SineSpec {
            n_steps: 30,
            pixel_noise: 0.01,
            ..SineSpec::default()
        };
        let data = sim.generate_sine_data(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.csv");
        write_transitions(&p, &data).unwrap();
        assert_eq!(read_transitions(&p).unwrap(), data);
    }

    #[test]
    fn record_metrics_summary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = IrlRecord {
            train_loss: vec![0.5, 0.25],
            psi: vec![vec![1.0], vec![2.0]],
            test_relative: vec![vec![0.3, 0.5], vec![0.2, 0.2]],
        };
        let p = dir.path().join("record.csv");
        write_record(&p, &rec).unwrap();
        let rows = read_record(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].test_rel_mean, 0.4);
        assert_eq!(rows[1].train_loss, 0.25);

        let metrics = vec![MetricRow {
            seed: 2,
            cost: "rbf".into(),
            train_demos: 10,
            target: 4,
            relative: 0.1 + 0.2,
            relative_x: 1e-300,
            goal_mse_px: 12.5,
            executed_relative: 0.7,
        }];
        let p = dir.path().join("metrics.csv");
        write_metrics(&p, &metrics).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), metrics);

        let mut row = SummaryRow {
            cost: "default".into(),
            train_demos: 0,
            start: Some(1),
            seeds: 3,
            relative_mean: 0.5,
            relative_std: Some(0.1),
            relative_x_mean: 0.4,
            relative_x_std: Some(0.0),
            goal_mse_mean: 3.0,
            goal_mse_std: Some(1.0),
            executed_relative_mean: 0.6,
            executed_relative_std: Some(0.2),
        };
        let p = dir.path().join("summary.csv");
        write_summary(&p, std::slice::from_ref(&row)).unwrap();
        assert_eq!(read_summary(&p).unwrap(), vec![row.clone()]);

        row.seeds = 1;
        row.start = None;
        for s in [
            &mut row.relative_std,
            &mut row.relative_x_std,
            &mut row.goal_mse_std,
            &mut row.executed_relative_std,
        ] {
            *s = None;
        }
        write_summary(&p, std::slice::from_ref(&row)).unwrap();
        assert!(!fs::read_to_string(&p).unwrap().contains("_std"));
        assert_eq!(read_summary(&p).unwrap(), vec![row]);
    }

    #[test]
    fn malformed_files_report_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "t,theta_0\n0,abc\n").unwrap();
        let err = read_demo(&p).unwrap_err().to_string();
        assert!(err.contains("bad.csv"), "{err}");
        let missing = dir.path().join("missing.csv");
        assert!(read_record(&missing).unwrap_err().to_string().contains("missing.csv"));
    }
}
