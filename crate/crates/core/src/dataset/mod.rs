//! Trajectory ingestion, environmental features, normalization and the
//! per-cell series the models train on.

mod features;
mod normalize;
mod records;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use features::{
    extract_features, recursive_variation, slot, FeatureVector, FEATURE_DIM, GRID_SQUARE,
    NEIGHBOR_RADIUS, RING,
};
pub use normalize::NormStats;
pub use records::{
    load_trajectories, parse_csv, to_csv, to_jsonl, write_trajectories, Format, Gap, ImageBounds,
    TrajectoryRecord, TrajectorySet, CSV_HEADER,
};

use crate::error::{Error, Result};

/// Trajectories with at least this many frames are used for training and
/// evaluation (and cut to this length).
pub const DEFAULT_MIN_FRAMES: usize = 105;

/// Position and velocity of one cell, in pixels and pixels/frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl CellState {
    pub const DIM: usize = 4;

    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Cells split by trajectory length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrajectorySplit {
    /// Long enough to train on; only their first `min_frames` frames are used.
    pub correct: Vec<u32>,
    /// Everything else; still present as environment for feature extraction.
    pub context: Vec<u32>,
    pub min_frames: usize,
}

pub fn filter_correct_trajectories(set: &TrajectorySet, min_frames: usize) -> TrajectorySplit {
    let (correct, context) = set
        .cell_ids()
        .partition(|&id| set.trajectory_len(id) >= min_frames);
    TrajectorySplit {
        correct,
        context,
        min_frames,
    }
}

/// Aligned per-frame data of one cell. Entry `k` belongs to `frames[k]`; a
/// trajectory's first frame is skipped because its velocity is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    pub cell_id: u32,
    pub frames: Vec<u32>,
    pub states: Vec<CellState>,
    pub features: Vec<FeatureVector>,
    pub area: Vec<f64>,
    pub brightness: Vec<f64>,
    pub labels: Vec<Option<u8>>,
}

impl CellSeries {
    /// Builds the series from at most the first `max_frames` frames of the
    /// cell's trajectory.
    pub fn build(set: &TrajectorySet, cell_id: u32, max_frames: usize) -> Result<Self> {
        let traj = set.trajectory(cell_id);
        if traj.is_empty() {
            return Err(Error::UnknownCell { frame: 0, cell_id });
        }
        let mut s = CellSeries {
            cell_id,
            frames: Vec::new(),
            states: Vec::new(),
            features: Vec::new(),
            area: Vec::new(),
            brightness: Vec::new(),
            labels: Vec::new(),
        };
        for w in traj[..traj.len().min(max_frames)].windows(2) {
            let (prev, cur) = (w[0], w[1]);
            s.frames.push(cur.frame);
            s.states
                .push(CellState::new(cur.x, cur.y, cur.x - prev.x, cur.y - prev.y));
            s.features.push(extract_features(cur.frame, cell_id, set)?);
            s.area.push(cur.area);
            s.brightness.push(cur.brightness);
            s.labels.push(cur.mitosis);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Velocities as `[vx, vy]` pairs.
    pub fn velocities(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| [s.vx, s.vy]).collect()
    }
}

/// Series of several cells plus the normalization statistics computed on
/// them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: Vec<CellSeries>,
    pub state_stats: NormStats,
    pub feature_stats: NormStats,
}

impl Dataset {
    /// Series for `cells`, with statistics computed on those same series.
    pub fn build(set: &TrajectorySet, cells: &[u32], max_frames: usize) -> Result<Self> {
        let series = cells
            .iter()
            .map(|&id| CellSeries::build(set, id, max_frames))
            .collect::<Result<Vec<_>>>()?;
        Self::from_series(series)
    }

    pub fn from_series(series: Vec<CellSeries>) -> Result<Self> {
        let states: Vec<[f64; 4]> = series
            .iter()
            .flat_map(|s| s.states.iter().map(|z| z.to_array()))
            .collect();
        let state_stats = NormStats::from_rows(4, states.iter().map(|z| &z[..]))?;
        let feature_stats = NormStats::from_rows(
            FEATURE_DIM,
            series
                .iter()
                .flat_map(|s| s.features.iter().map(FeatureVector::as_slice)),
        )?;
        Ok(Self {
            series,
            state_stats,
            feature_stats,
        })
    }

    /// Same series, normalized with externally frozen statistics.
    pub fn with_stats(series: Vec<CellSeries>, state_stats: NormStats, feature_stats: NormStats) -> Self {
        Self {
            series,
            state_stats,
            feature_stats,
        }
    }

    pub fn transitions(&self) -> usize {
        self.series.iter().map(|s| s.len().saturating_sub(1)).sum()
    }
}

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "x",
    "y",
    "grad_x",
    "grad_y",
    "grid_0",
    "grid_1",
    "grid_2",
    "grid_3",
    "grid_4",
    "grid_5",
    "grid_6",
    "grid_7",
    "neighbors",
    "sector_tl",
    "sector_tr",
    "sector_bl",
    "sector_br",
    "neighbor_vx",
    "neighbor_vy",
    "brightness",
    "area",
    "area_variation",
    "eccentricity",
];

/// Feature matrix CSV: `frame,cell_id`, the 23 feature columns, then the
/// velocity of the following frame (`vx,vy`), i.e. the prediction target.
pub fn feature_matrix_csv(series: &[CellSeries]) -> String {
    let mut out = String::from("frame,cell_id,");
    out.push_str(&FEATURE_NAMES.join(","));
    out.push_str(",vx,vy\n");
    for s in series {
        for k in 0..s.len().saturating_sub(1) {
            let _ = write!(out, "{},{}", s.frames[k], s.cell_id);
            for v in s.features[k].as_slice() {
                let _ = write!(out, ",{v}");
            }
            let next = s.states[k + 1];
            let _ = writeln!(out, ",{},{}", next.vx, next.vy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(cell: u32, frames: u32) -> Vec<TrajectoryRecord> {
        (0..frames)
            .map(|f| TrajectoryRecord {
                frame: f,
                cell_id: cell,
                x: f as f64,
                y: 10.0 + cell as f64 * 20.0,
                area: 50.0,
                eccentricity: 0.0,
                brightness: 10.0,
                mitosis: None,
            })
            .collect()
    }

    #[test]
    fn filter_thresholds() {
        let mut recs = line(0, 104);
        recs.extend(line(1, 200));
        recs.extend(line(2, 105));
        let set = TrajectorySet::new(recs, None).unwrap();
        let split = filter_correct_trajectories(&set, DEFAULT_MIN_FRAMES);
        assert_eq!(split.correct, vec![1, 2]);
        assert_eq!(split.context, vec![0]);
        let s = CellSeries::build(&set, 1, DEFAULT_MIN_FRAMES).unwrap();
        assert_eq!(s.frames.first(), Some(&1));
        assert_eq!(s.frames.last(), Some(&104));
    }

    #[test]
    fn empty_input_gives_empty_split() {
        let set = TrajectorySet::new(vec![], None).unwrap();
        let split = filter_correct_trajectories(&set, DEFAULT_MIN_FRAMES);
        assert!(split.correct.is_empty() && split.context.is_empty());
    }

    #[test]
    fn series_velocities_are_differences() {
        let set = TrajectorySet::new(line(0, 5), None).unwrap();
        let s = CellSeries::build(&set, 0, 10).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.states.iter().all(|z| z.vx == 1.0 && z.vy == 0.0));
    }

    #[test]
    fn feature_matrix_layout() {
        let set = TrajectorySet::new(line(0, 4), None).unwrap();
        let s = CellSeries::build(&set, 0, 10).unwrap();
        let csv = feature_matrix_csv(&[s]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 2 + FEATURE_DIM + 2);
        assert_eq!(lines.count(), 2);
    }
}
