use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature ranges for min-max scaling onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Column-wise ranges over `rows`, each of length `dim`.
    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut seen = false;
        for row in rows {
            if row.len() != dim {
                return Err(Error::dim("normalization row", dim, row.len()));
            }
            seen = true;
            for (k, &v) in row.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        if !seen {
            return Err(Error::Config("normalization statistics need at least one row".into()));
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `d(normalized)/d(raw)` per feature; 0 for constant features.
    pub fn scale(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(&lo, &hi)| if hi > lo { 2.0 / (hi - lo) } else { 0.0 })
            .collect()
    }

    pub fn normalize_value(&self, k: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[k], self.max[k]);
        if hi > lo {
            2.0 * (x - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, k: usize, u: f64) -> f64 {
        let (lo, hi) = (self.min[k], self.max[k]);
        if hi > lo {
            (u + 1.0) * (hi - lo) / 2.0 + lo
        } else {
            lo
        }
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, &x)| self.normalize_value(k, x))
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, &u)| self.denormalize_value(k, u))
            .collect()
    }

    /// Stats of a contiguous sub-range of features.
    pub fn slice(&self, range: std::ops::Range<usize>) -> NormStats {
        NormStats {
            min: self.min[range.clone()].to_vec(),
            max: self.max[range].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> NormStats {
        NormStats {
            min: vec![-2.0, 10.0, 3.0],
            max: vec![6.0, 20.0, 3.0],
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = stats();
        assert_eq!(s.normalize(&[-2.0, 10.0, 3.0]), vec![-1.0, -1.0, 0.0]);
        assert_eq!(s.normalize(&[6.0, 20.0, 3.0]), vec![1.0, 1.0, 0.0]);
        assert_eq!(s.normalize(&[2.0, 15.0, 3.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn from_rows_collects_ranges() {
        let rows = [vec![1.0, 5.0], vec![-1.0, 7.0], vec![0.5, 6.0]];
        let s = NormStats::from_rows(2, rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(s.min, vec![-1.0, 5.0]);
        assert_eq!(s.max, vec![1.0, 7.0]);
        assert!(NormStats::from_rows(2, std::iter::empty()).is_err());
    }
}
