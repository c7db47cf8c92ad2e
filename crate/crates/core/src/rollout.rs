//! Roll-out prediction from a single observed state, the relative-error
//! accuracy metric and plot-ready CSV exports.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::combiner::Contribution;
use crate::dataset::{CellSeries, CellState, FeatureVector};
use crate::error::{Error, Result};
use crate::generic::{thermo_increments, ThermoTrace};
use crate::model::ModelBundle;
use crate::write_atomic;

/// Default exclusion threshold for near-zero ground-truth velocities,
/// pixels/frame.
pub const DEFAULT_EPS_V: f64 = 1e-6;

/// What the environmental network sees in its cell-center slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionFeed {
    /// The roll-out's own predicted position.
    #[default]
    Predicted,
    /// Whatever the supplied feature vectors contain.
    Observed,
}

impl FromStr for PositionFeed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(PositionFeed::Predicted),
            "observed" => Ok(PositionFeed::Observed),
            other => Err(Error::Config(format!(
                "unknown position feed {other:?} (expected predicted or observed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutResult {
    /// `states[0]` is the initial state, `states[k + 1]` the prediction
    /// after step `k`.
    pub states: Vec<CellState>,
    pub thermo: ThermoTrace,
    pub contributions: Vec<Contribution>,
}

impl RolloutResult {
    pub fn steps(&self) -> usize {
        self.contributions.len()
    }

    /// Predicted velocities after each step.
    pub fn velocities(&self) -> Vec<[f64; 2]> {
        self.states.iter().skip(1).map(|s| [s.vx, s.vy]).collect()
    }
}

/// Rolls the model forward `n_frames` steps from `initial`. Only the
/// environment features enter after the first frame; step `k` uses
/// `env[k]`.
pub fn rollout(
    bundle: &ModelBundle,
    initial: CellState,
    env: &[FeatureVector],
    n_frames: usize,
    feed: PositionFeed,
) -> Result<RolloutResult> {
    if n_frames > env.len() {
        return Err(Error::Config(format!(
            "roll-out of {n_frames} frames needs as many feature vectors, got {}",
            env.len()
        )));
    }
    if !initial.is_finite() {
        return Err(Error::Diverged {
            context: "initial state is not finite".into(),
        });
    }
    let mut out = RolloutResult {
        states: vec![initial],
        ..RolloutResult::default()
    };
    let mut z = initial;
    for (k, f) in env[..n_frames].iter().enumerate() {
        let f = match feed {
            PositionFeed::Predicted => ModelBundle::with_position(f, z.x, z.y),
            PositionFeed::Observed => *f,
        };
        let step = bundle.step(&z, &f).map_err(|e| match e {
            Error::Diverged { context } => Error::Diverged {
                context: format!("roll-out frame {k}: {context}"),
            },
            other => other,
        })?;
        let (de, ds) = thermo_increments(&step.z_norm, &step.z_spnn, &step.gradients);
        out.thermo.push(de, ds);
        out.contributions.push(step.contribution);
        z = step.next;
        out.states.push(z);
    }
    Ok(out)
}

/// Rolls out a recorded series from its first state over at most
/// `max_frames` steps.
pub fn rollout_series(
    bundle: &ModelBundle,
    series: &CellSeries,
    max_frames: usize,
    feed: PositionFeed,
) -> Result<RolloutResult> {
    let n = max_frames.min(series.len().saturating_sub(1));
    let initial = *series
        .states
        .first()
        .ok_or_else(|| Error::Config(format!("cell {} has no states", series.cell_id)))?;
    rollout(bundle, initial, &series.features, n, feed)
}

/// Per-axis mean of `100·(1 − |(pred − gt)/gt|)`, clamped at 0, over frames
/// where `|gt| ≥ eps`.
pub fn velocity_accuracy(pred: &[[f64; 2]], gt: &[[f64; 2]], eps: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::dim("accuracy ground truth", pred.len(), gt.len()));
    }
    let axis = |a: usize| -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            if g[a].abs() < eps {
                continue;
            }
            sum += (100.0 * (1.0 - ((p[a] - g[a]) / g[a]).abs())).max(0.0);
            n += 1;
        }
        if n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "every ground-truth velocity on axis {} is below {eps}",
                ["x", "y"][a]
            )));
        }
        Ok(sum / n as f64)
    };
    Ok((axis(0)?, axis(1)?))
}

/// Root-mean-square distance between two equally long position sequences.
pub fn position_rmse(a: &[CellState], b: &[CellState]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("position sequence", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.x - q.x).powi(2) + (p.y - q.y).powi(2))
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Root-mean-square velocity error (both components).
pub fn velocity_rmse(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("velocity sequence", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// `frame,x_pred,y_pred,x_gt,y_gt`; row `k` pairs `pred[k]` with `gt[k]`.
pub fn trajectory_csv(frames: &[u32], pred: &[CellState], gt: &[CellState]) -> Result<String> {
    if pred.len() != gt.len() || frames.len() != pred.len() {
        return Err(Error::dim("trajectory export", pred.len(), gt.len().min(frames.len())));
    }
    let mut out = String::from("frame,x_pred,y_pred,x_gt,y_gt\n");
    for ((f, p), g) in frames.iter().zip(pred).zip(gt) {
        let _ = writeln!(out, "{f},{},{},{},{}", p.x, p.y, g.x, g.y);
    }
    Ok(out)
}

/// `frame,spnn_vx,spnn_vy,conn_vx,conn_vy,bias_x,bias_y,out_vx,out_vy`.
pub fn contribution_csv(frames: &[u32], contributions: &[Contribution]) -> String {
    let mut out = String::from("frame,spnn_vx,spnn_vy,conn_vx,conn_vy,bias_x,bias_y,out_vx,out_vy\n");
    for (f, c) in frames.iter().zip(contributions) {
        let o = c.output();
        let _ = writeln!(
            out,
            "{f},{},{},{},{},{},{},{},{}",
            c.spnn[0], c.spnn[1], c.conn[0], c.conn[1], c.bias[0], c.bias[1], o[0], o[1]
        );
    }
    out
}

/// Paths written by [`export_traces`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportPaths {
    pub trajectory: std::path::PathBuf,
    pub thermo: std::path::PathBuf,
    pub contributions: std::path::PathBuf,
}

impl ExportPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            trajectory: dir.join(format!("{stem}_trajectory.csv")),
            thermo: dir.join(format!("{stem}_thermo.csv")),
            contributions: dir.join(format!("{stem}_contributions.csv")),
        }
    }
}

/// Writes the three traces of a roll-out of `series`. The trajectory starts
/// with the shared initial state; prediction after step `k` is paired with
/// `series.states[k + 1]`.
pub fn export_traces(result: &RolloutResult, series: &CellSeries, paths: &ExportPaths) -> Result<()> {
    let n = result.steps();
    if series.len() < n + 1 {
        return Err(Error::dim("ground-truth frames", n + 1, series.len()));
    }
    let traj = trajectory_csv(&series.frames[..=n], &result.states, &series.states[..=n])?;
    write_atomic(&paths.trajectory, &traj)?;
    write_atomic(&paths.thermo, &result.thermo.to_csv())?;
    write_atomic(
        &paths.contributions,
        &contribution_csv(&series.frames[..n], &result.contributions),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NormStats, FEATURE_DIM};
    use crate::model::zero_bundle;

    fn stats() -> (NormStats, NormStats) {
        (
            NormStats {
                min: vec![0.0, 0.0, -1.0, -1.0],
                max: vec![300.0, 100.0, 1.0, 1.0],
            },
            NormStats {
                min: vec![0.0; FEATURE_DIM],
                max: vec![1.0; FEATURE_DIM],
            },
        )
    }

    #[test]
    fn zero_bundle_is_stationary() {
        let (s, f) = stats();
        let b = zero_bundle(s, f);
        let env = vec![FeatureVector([0.0; FEATURE_DIM]); 10];
        let r = rollout(&b, CellState::new(5.0, 6.0, 0.3, 0.1), &env, 10, PositionFeed::Predicted).unwrap();
        assert_eq!(r.states.len(), 11);
        assert!(r.states[1..].iter().all(|z| z.x == 5.0 && z.y == 6.0 && z.vx == 0.0));
        assert_eq!(r.thermo.len(), 10);
        assert!(r.thermo.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_step_matches_pipeline() {
        let (s, f) = stats();
        let mut b = zero_bundle(s, f);
        b.combiner = crate::combiner::CombinerLayer::new([[0.0; 4]; 2], [0.5, -0.25]);
        let env = vec![FeatureVector([0.2; FEATURE_DIM])];
        let z0 = CellState::new(10.0, 10.0, 0.0, 0.0);
        let r = rollout(&b, z0, &env, 1, PositionFeed::Predicted).unwrap();
        let direct = b.step(&z0, &ModelBundle::with_position(&env[0], 10.0, 10.0)).unwrap();
        assert_eq!(r.states[1], direct.next);
    }

    #[test]
    fn too_few_features_is_an_error() {
        let (s, f) = stats();
        let b = zero_bundle(s, f);
        assert!(rollout(&b, CellState::default(), &[], 1, PositionFeed::Predicted).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let v = [[1.0, 2.0], [0.5, -1.0]];
        assert_eq!(velocity_accuracy(&v, &v, DEFAULT_EPS_V).unwrap(), (100.0, 100.0));
        let (ax, _) = velocity_accuracy(&[[1.1, 1.0]], &[[1.0, 1.0]], DEFAULT_EPS_V).unwrap();
        assert!((ax - 90.0).abs() < 1e-9);
        let (ax, _) = velocity_accuracy(&[[5.0, 1.0]], &[[1.0, 1.0]], DEFAULT_EPS_V).unwrap();
        assert_eq!(ax, 0.0);
        assert!(velocity_accuracy(&[[1.0, 1.0]], &[[0.0, 1.0]], DEFAULT_EPS_V).is_err());
        // zero frames are skipped, not counted
        let (ax, _) =
            velocity_accuracy(&[[3.0, 1.0], [1.0, 1.0]], &[[0.0, 1.0], [1.0, 1.0]], DEFAULT_EPS_V)
                .unwrap();
        assert_eq!(ax, 100.0);
    }

    #[test]
    fn empty_exports_have_headers_only() {
        assert_eq!(trajectory_csv(&[], &[], &[]).unwrap(), "frame,x_pred,y_pred,x_gt,y_gt\n");
        assert_eq!(contribution_csv(&[], &[]).lines().count(), 1);
        assert_eq!(ThermoTrace::default().to_csv().lines().count(), 1);
    }
}
