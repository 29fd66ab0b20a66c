//! File formats, preprocessing, metrics, manifests, and plot emission.
//!
//! Trajectories and datasets are plain CSV with a mandatory header row,
//! comma separator, and decimal points; values are written with shortest
//! round-trip float formatting, so write→read is value-identical. All file
//! writes go through [`write_atomic`].

mod manifest;
mod metrics;
mod plot;
mod preprocess;

pub use manifest::{replay_args, RunManifest};
pub use metrics::{evaluate_heights, MetricsReport, VariableMetrics};
pub use plot::{plot_heights, PlotSeries, SeriesStyle};
pub use preprocess::{preprocess, PreprocessReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mech::{SegmentDataset, SimSegment, TrajectoryDataset, TrajectoryStep, SEGMENT_DT, SEGMENT_POINTS};

/// Writes a file via a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp_path, bytes)?;
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

/// One row of the trajectory CSV schema.
///
/// Mandatory channels are the process time and the three flows; height
/// channels, the eight optical detection positions, and ground-truth columns
/// of synthetic twins are optional (empty cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrajectoryRow {
    pub tau_s: f64,
    #[serde(default)]
    pub q_in_m3s: Option<f64>,
    #[serde(default)]
    pub q_bot_m3s: Option<f64>,
    #[serde(default)]
    pub q_top_m3s: Option<f64>,
    #[serde(default)]
    pub h_hp_m: Option<f64>,
    #[serde(default)]
    pub h_dp_m: Option<f64>,
    #[serde(default)]
    pub h_3_0: Option<f64>,
    #[serde(default)]
    pub h_3_1: Option<f64>,
    #[serde(default)]
    pub h_3_2: Option<f64>,
    #[serde(default)]
    pub h_3_3: Option<f64>,
    #[serde(default)]
    pub h_4_0: Option<f64>,
    #[serde(default)]
    pub h_4_1: Option<f64>,
    #[serde(default)]
    pub h_4_2: Option<f64>,
    #[serde(default)]
    pub h_4_3: Option<f64>,
    #[serde(default)]
    pub truth_h_hp_m: Option<f64>,
    #[serde(default)]
    pub truth_h_dp_m: Option<f64>,
    #[serde(default)]
    pub truth_q_bot_m3s: Option<f64>,
    #[serde(default)]
    pub truth_q_top_m3s: Option<f64>,
    #[serde(default)]
    pub truth_q_c_m3s: Option<f64>,
    #[serde(default)]
    pub truth_q_s_m3s: Option<f64>,
}

impl TrajectoryRow {
    pub fn detection_heights(&self) -> [Option<f64>; 8] {
        [
            self.h_3_0, self.h_3_1, self.h_3_2, self.h_3_3, self.h_4_0, self.h_4_1, self.h_4_2,
            self.h_4_3,
        ]
    }

    pub fn set_detection_heights(&mut self, values: [Option<f64>; 8]) {
        [
            &mut self.h_3_0,
            &mut self.h_3_1,
            &mut self.h_3_2,
            &mut self.h_3_3,
            &mut self.h_4_0,
            &mut self.h_4_1,
            &mut self.h_4_2,
            &mut self.h_4_3,
        ]
        .into_iter()
        .zip(values)
        .for_each(|(slot, v)| *slot = v);
    }
}

impl From<&TrajectoryStep> for TrajectoryRow {
    fn from(s: &TrajectoryStep) -> Self {
        TrajectoryRow {
            tau_s: s.tau_s,
            q_in_m3s: Some(s.q_in),
            q_bot_m3s: Some(s.q_bot),
            q_top_m3s: Some(s.q_top),
            h_hp_m: Some(s.h_hp),
            h_dp_m: Some(s.h_dp),
            truth_h_hp_m: Some(s.h_hp_true),
            truth_h_dp_m: Some(s.h_dp_true),
            truth_q_bot_m3s: Some(s.q_bot_true),
            truth_q_top_m3s: Some(s.q_top_true),
            truth_q_c_m3s: Some(s.q_c_true),
            truth_q_s_m3s: Some(s.q_s_true),
            ..Default::default()
        }
    }
}

pub fn trajectory_to_rows(traj: &TrajectoryDataset) -> Vec<TrajectoryRow> {
    traj.steps.iter().map(TrajectoryRow::from).collect()
}

fn csv_parse_error(path: &Path, e: csv::Error) -> Error {
    let line = match e.kind() {
        csv::ErrorKind::Deserialize { pos, .. } | csv::ErrorKind::UnequalLengths { pos, .. } => {
            pos.as_ref().map(|p| p.line()).unwrap_or(0)
        }
        _ => 0,
    };
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| csv_parse_error(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numeric(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let file = std::fs::File::open(path)?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    let mut prev_tau = f64::NEG_INFINITY;
    for rec in r.deserialize::<TrajectoryRow>() {
        let row = rec.map_err(|e| csv_parse_error(path, e))?;
        if !row.tau_s.is_finite() || row.tau_s <= prev_tau {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: rows.len() as u64 + 2,
                message: format!("tau_s must be strictly increasing, got {}", row.tau_s),
            });
        }
        prev_tau = row.tau_s;
        rows.push(row);
    }
    Ok(rows)
}

/// One grid point of a simulated pretraining segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment_id: u64,
    pub t_s: f64,
    pub h_hp0_m: f64,
    pub h_dp0_m: f64,
    pub q_in_m3s: f64,
    pub q_bot_m3s: f64,
    pub h_hp_m: f64,
    pub h_dp_m: f64,
    pub q_top_m3s: f64,
    pub q_c_m3s: f64,
    pub q_s_m3s: f64,
}

pub fn segment_dataset_to_rows(data: &SegmentDataset) -> Vec<SegmentRow> {
    let mut rows = Vec::with_capacity(data.segments.len() * SEGMENT_POINTS);
    for (id, seg) in data.segments.iter().enumerate() {
        for (k, t) in seg.times.iter().enumerate() {
            rows.push(SegmentRow {
                segment_id: id as u64,
                t_s: *t,
                h_hp0_m: seg.initial.h_hp,
                h_dp0_m: seg.initial.h_dp,
                q_in_m3s: seg.control.q_in,
                q_bot_m3s: seg.q_bot,
                h_hp_m: seg.states[k].h_hp,
                h_dp_m: seg.states[k].h_dp,
                q_top_m3s: seg.flows[k].q_top,
                q_c_m3s: seg.internal[k].q_c,
                q_s_m3s: seg.internal[k].q_s,
            });
        }
    }
    rows
}

pub fn write_segment_csv(path: &Path, data: &SegmentDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in segment_dataset_to_rows(data) {
        w.serialize(&row).map_err(|e| csv_parse_error(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numeric(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_segment_csv(path: &Path) -> Result<SegmentDataset> {
    use crate::domain::{ControlInput, FlowMeasurement, InternalFlows, SettlerState};
    let file = std::fs::File::open(path)?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows: Vec<SegmentRow> = Vec::new();
    for rec in r.deserialize::<SegmentRow>() {
        rows.push(rec.map_err(|e| csv_parse_error(path, e))?);
    }
    let mut segments = Vec::new();
    for chunk in rows.chunks(SEGMENT_POINTS) {
        if chunk.len() != SEGMENT_POINTS
            || chunk.iter().any(|r| r.segment_id != chunk[0].segment_id)
        {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("segments must have exactly {SEGMENT_POINTS} grid rows"),
            });
        }
        for (k, row) in chunk.iter().enumerate() {
            if (row.t_s - k as f64 * SEGMENT_DT).abs() > 1e-9 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: format!("segment grid must step by {SEGMENT_DT} s"),
                });
            }
        }
        let first = &chunk[0];
        segments.push(SimSegment {
            initial: SettlerState {
                h_hp: first.h_hp0_m,
                h_dp: first.h_dp0_m,
            },
            control: ControlInput { q_in: first.q_in_m3s },
            q_bot: first.q_bot_m3s,
            times: chunk.iter().map(|r| r.t_s).collect(),
            states: chunk
                .iter()
                .map(|r| SettlerState { h_hp: r.h_hp_m, h_dp: r.h_dp_m })
                .collect(),
            flows: chunk
                .iter()
                .map(|r| FlowMeasurement { q_bot: r.q_bot_m3s, q_top: r.q_top_m3s })
                .collect(),
            internal: chunk
                .iter()
                .map(|r| InternalFlows { q_c: r.q_c_m3s, q_s: r.q_s_m3s })
                .collect(),
        });
    }
    Ok(SegmentDataset { segments, resampled: 0 })
}

/// Per-step record of a filtering run, physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRow {
    pub tau_s: f64,
    pub q_in_m3s: f64,
    pub meas_q_bot_m3s: f64,
    pub meas_q_top_m3s: f64,
    pub pred_q_bot_m3s: f64,
    pub pred_q_top_m3s: f64,
    pub x_pred_h_hp_m: f64,
    pub x_pred_h_dp_m: f64,
    pub x_upd_h_hp_m: f64,
    pub x_upd_h_dp_m: f64,
    pub p_00: f64,
    pub p_01: f64,
    pub p_11: f64,
    pub w_00: f64,
    pub w_01: f64,
    pub w_11: f64,
    pub k_00: f64,
    pub k_01: f64,
    pub k_10: f64,
    pub k_11: f64,
}

pub fn write_estimation_csv(path: &Path, rows: &[EstimationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| csv_parse_error(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numeric(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}
