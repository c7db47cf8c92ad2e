//! The 23-component environmental feature vector.
//!
//! | slots   | content                                           |
//! |---------|---------------------------------------------------|
//! | 0..2    | cell center (x, y)                                |
//! | 2..4    | density gradient (x, y)                           |
//! | 4..12   | density of each of the 8 surrounding grid squares |
//! | 12      | number of cells within 75 px                      |
//! | 13..17  | cells per image quadrant (TL, TR, BL, BR)         |
//! | 17..19  | mean velocity of the cells within 75 px           |
//! | 19      | brightness                                        |
//! | 20      | area                                              |
//! | 21      | area change since the previous frame              |
//! | 22      | eccentricity                                      |
//!
//! Image coordinates: y grows downwards, so "top" means small y.

use serde::{Deserialize, Serialize};

use super::records::TrajectorySet;
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 23;
pub const GRID_SQUARE: f64 = 20.0;
pub const NEIGHBOR_RADIUS: f64 = 75.0;

pub mod slot {
    pub const CENTER: usize = 0;
    pub const GRADIENT: usize = 2;
    pub const GRID: usize = 4;
    pub const NEIGHBOR_COUNT: usize = 12;
    pub const SECTORS: usize = 13;
    pub const NEIGHBOR_VELOCITY: usize = 17;
    pub const BRIGHTNESS: usize = 19;
    pub const AREA: usize = 20;
    pub const AREA_VARIATION: usize = 21;
    pub const ECCENTRICITY: usize = 22;
}

/// Moore-ring offsets (in grid squares) of the 8 squares around the one
/// holding the cell, row by row.
pub const RING: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn center(&self) -> [f64; 2] {
        [self.0[slot::CENTER], self.0[slot::CENTER + 1]]
    }

    pub fn with_center(mut self, x: f64, y: f64) -> Self {
        self.0[slot::CENTER] = x;
        self.0[slot::CENTER + 1] = y;
        self
    }
}

fn square_of(v: f64) -> i64 {
    (v / GRID_SQUARE).floor() as i64
}

/// Computes the feature vector of `cell_id` in `frame` from every record of
/// that frame.
pub fn extract_features(frame: u32, cell_id: u32, set: &TrajectorySet) -> Result<FeatureVector> {
    let me = set
        .get(frame, cell_id)
        .ok_or(Error::UnknownCell { frame, cell_id })?;
    let mut f = [0.0; FEATURE_DIM];
    f[slot::CENTER] = me.x;
    f[slot::CENTER + 1] = me.y;

    let (sx, sy) = (square_of(me.x), square_of(me.y));
    let mid = (set.bounds.width / 2.0, set.bounds.height / 2.0);
    let mut neighbors = 0usize;
    let mut vel_sum = (0.0, 0.0);
    let mut vel_n = 0usize;

    for other in set.frame(frame) {
        // Quadrant counts include the cell itself.
        let right = other.x >= mid.0;
        let bottom = other.y >= mid.1;
        f[slot::SECTORS + 2 * usize::from(bottom) + usize::from(right)] += 1.0;

        if other.cell_id == cell_id {
            continue;
        }
        let (ox, oy) = (square_of(other.x) - sx, square_of(other.y) - sy);
        if let Some(k) = RING.iter().position(|&d| d == (ox, oy)) {
            f[slot::GRID + k] += other.area / (GRID_SQUARE * GRID_SQUARE);
        }
        if (other.x - me.x).hypot(other.y - me.y) <= NEIGHBOR_RADIUS {
            neighbors += 1;
            if let Some((vx, vy)) = set.velocity(frame, other.cell_id) {
                vel_sum.0 += vx;
                vel_sum.1 += vy;
                vel_n += 1;
            }
        }
    }

    for (k, &(dx, dy)) in RING.iter().enumerate() {
        let norm = ((dx * dx + dy * dy) as f64).sqrt();
        f[slot::GRADIENT] += f[slot::GRID + k] * dx as f64 / norm;
        f[slot::GRADIENT + 1] += f[slot::GRID + k] * dy as f64 / norm;
    }
    f[slot::NEIGHBOR_COUNT] = neighbors as f64;
    if vel_n > 0 {
        f[slot::NEIGHBOR_VELOCITY] = vel_sum.0 / vel_n as f64;
        f[slot::NEIGHBOR_VELOCITY + 1] = vel_sum.1 / vel_n as f64;
    }
    f[slot::BRIGHTNESS] = me.brightness;
    f[slot::AREA] = me.area;
    f[slot::AREA_VARIATION] = frame
        .checked_sub(1)
        .and_then(|p| set.get(p, cell_id))
        .map_or(0.0, |prev| me.area - prev.area);
    f[slot::ECCENTRICITY] = me.eccentricity;
    Ok(FeatureVector(f))
}

/// `out[n] = series[n] - series[n - window]`, the sum of the last `window`
/// frame-to-frame changes; early frames use whatever history exists.
pub fn recursive_variation(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|n| series[n] - series[n.saturating_sub(window)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageBounds, TrajectoryRecord};

    fn rec(frame: u32, cell_id: u32, x: f64, y: f64, area: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            frame,
            cell_id,
            x,
            y,
            area,
            eccentricity: 0.25,
            brightness: 100.0,
            mitosis: None,
        }
    }

    fn set(records: Vec<TrajectoryRecord>) -> TrajectorySet {
        TrajectorySet::new(records, Some(ImageBounds { width: 300.0, height: 100.0 })).unwrap()
    }

    #[test]
    fn isolated_cell() {
        let s = set(vec![rec(0, 0, 50.0, 50.0, 80.0), rec(0, 1, 250.0, 50.0, 80.0)]);
        let f = extract_features(0, 0, &s).unwrap().0;
        assert_eq!(&f[slot::GRADIENT..slot::NEIGHBOR_COUNT + 1], &[0.0; 11]);
        assert_eq!(&f[slot::NEIGHBOR_VELOCITY..slot::NEIGHBOR_VELOCITY + 2], &[0.0, 0.0]);
        assert_eq!(f[slot::AREA_VARIATION], 0.0);
        assert_eq!((f[slot::BRIGHTNESS], f[slot::AREA], f[slot::ECCENTRICITY]), (100.0, 80.0, 0.25));
    }

    #[test]
    fn east_neighbor_density_and_gradient() {
        // Cell in square (2, 2); neighbor in square (3, 2).
        let area = 60.0;
        let s = set(vec![rec(0, 0, 50.0, 50.0, 80.0), rec(0, 1, 70.0, 50.0, area)]);
        let f = extract_features(0, 0, &s).unwrap().0;
        let east = RING.iter().position(|&d| d == (1, 0)).unwrap();
        for k in 0..8 {
            let expected = if k == east { area / 400.0 } else { 0.0 };
            assert_eq!(f[slot::GRID + k], expected);
        }
        assert_eq!(f[slot::GRADIENT], area / 400.0);
        assert_eq!(f[slot::GRADIENT + 1], 0.0);
        assert_eq!(f[slot::NEIGHBOR_COUNT], 1.0);
    }

    #[test]
    fn one_cell_per_quadrant() {
        let s = set(vec![
            rec(0, 0, 10.0, 10.0, 1.0),
            rec(0, 1, 290.0, 10.0, 1.0),
            rec(0, 2, 10.0, 90.0, 1.0),
            rec(0, 3, 290.0, 90.0, 1.0),
        ]);
        for id in 0..4 {
            let f = extract_features(0, id, &s).unwrap().0;
            assert_eq!(&f[slot::SECTORS..slot::SECTORS + 4], &[1.0, 1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn neighbor_velocity_and_area_variation() {
        let s = set(vec![
            rec(0, 0, 50.0, 50.0, 80.0),
            rec(0, 1, 100.0, 50.0, 80.0),
            rec(1, 0, 51.0, 50.0, 75.0),
            rec(1, 1, 103.0, 54.0, 80.0),
        ]);
        let f = extract_features(1, 0, &s).unwrap().0;
        assert_eq!(f[slot::NEIGHBOR_VELOCITY], 3.0);
        assert_eq!(f[slot::NEIGHBOR_VELOCITY + 1], 4.0);
        assert_eq!(f[slot::AREA_VARIATION], -5.0);
    }

    #[test]
    fn unknown_cell_errors() {
        let s = set(vec![rec(0, 0, 50.0, 50.0, 80.0)]);
        assert!(matches!(
            extract_features(3, 0, &s),
            Err(Error::UnknownCell { frame: 3, cell_id: 0 })
        ));
    }

    #[test]
    fn recursive_variation_cases() {
        assert_eq!(recursive_variation(&[4.0; 5], 3), vec![0.0; 5]);
        let v = recursive_variation(&[1.0, 2.0, 4.0, 8.0], 2);
        assert_eq!(v[3], 6.0);
        assert_eq!(v, vec![0.0, 1.0, 3.0, 6.0]);
        assert_eq!(recursive_variation(&[1.0, 2.0, 4.0, 8.0], 1), vec![0.0, 1.0, 2.0, 4.0]);
    }
}
