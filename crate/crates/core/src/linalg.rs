//! Sparse matrices for the encoder weights.
//!
//! The constructed networks are extremely sparse (a few dozen nonzeros in
//! matrices with tens of thousands of slots), so weights are stored as
//! triplets. Serialization switches to dense nested arrays when a matrix is
//! less than 90% zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Row-major sparse matrix. Entry positions are unique and double as the
/// fixed support mask of the constructions: an entry may hold the value 0
/// and still occupy a support position.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet>,
}

impl SparseMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMat {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn from_triplets(nrows: usize, ncols: usize, triplets: Vec<Triplet>) -> Result<Self> {
        for t in &triplets {
            if t.row >= nrows || t.col >= ncols {
                return Err(Error::IndexOutOfRange {
                    context: "sparse matrix triplet".into(),
                    index: t.row.max(t.col),
                    limit: nrows.max(ncols),
                });
            }
        }
        let mut m = SparseMat {
            nrows,
            ncols,
            entries: Vec::new(),
        };
        for t in triplets {
            m.set(t.row, t.col, t.value);
        }
        Ok(m)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut m = SparseMat::zeros(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    m.set(i, j, v);
                }
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Sets the entry at (row, col), overwriting an existing one.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.nrows && col < self.ncols, "entry out of bounds");
        if let Some(e) = self
            .entries
            .iter_mut()
            .find(|e| e.row == row && e.col == col)
        {
            e.value = value;
        } else {
            self.entries.push(Triplet { row, col, value });
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.row == row && e.col == col)
            .map_or(0.0, |e| e.value)
    }

    pub fn entries(&self) -> &[Triplet] {
        &self.entries
    }

    /// Number of entries with value != 0.
    pub fn count_nonzero(&self) -> usize {
        self.entries.iter().filter(|e| e.value != 0.0).count()
    }

    /// Number of allocated parameter slots (dense size).
    pub fn param_slots(&self) -> usize {
        self.nrows * self.ncols
    }

    /// y = self * x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for e in &self.entries {
            y[e.row] += e.value * x[e.col];
        }
        y
    }

    /// y += self * x, without allocating.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for e in &self.entries {
            y[e.row] += e.value * x[e.col];
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.ncols]; self.nrows];
        for e in &self.entries {
            rows[e.row][e.col] = e.value;
        }
        rows
    }

    /// True if all nonzero entries lie at positions present in `mask`.
    pub fn support_within(&self, mask: &SparseMat) -> bool {
        self.entries
            .iter()
            .filter(|e| e.value != 0.0)
            .all(|e| mask.entries.iter().any(|m| m.row == e.row && m.col == e.col))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatRepr {
    Sparse {
        nrows: usize,
        ncols: usize,
        triplets: Vec<Triplet>,
    },
    Dense(Vec<Vec<f64>>),
}

impl Serialize for SparseMat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let slots = self.param_slots();
        let repr = if slots == 0 || self.count_nonzero() * 10 <= slots {
            let mut triplets: Vec<Triplet> = self
                .entries
                .iter()
                .copied()
                .filter(|e| e.value != 0.0)
                .collect();
            triplets.sort_by_key(|t| (t.row, t.col));
            MatRepr::Sparse {
                nrows: self.nrows,
                ncols: self.ncols,
                triplets,
            }
        } else {
            MatRepr::Dense(self.to_dense())
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparseMat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match MatRepr::deserialize(d)? {
            MatRepr::Sparse {
                nrows,
                ncols,
                triplets,
            } => SparseMat::from_triplets(nrows, ncols, triplets)
                .map_err(|e| serde::de::Error::custom(e.to_string())),
            MatRepr::Dense(rows) => Ok(SparseMat::from_dense(&rows)),
        }
    }
}

pub fn count_nonzero_vec(v: &[f64]) -> usize {
    v.iter().filter(|x| **x != 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense() {
        let m = SparseMat::from_triplets(
            3,
            4,
            vec![
                Triplet {
                    row: 0,
                    col: 1,
                    value: 2.0,
                },
                Triplet {
                    row: 2,
                    col: 3,
                    value: -1.5,
                },
            ],
        )
        .unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(m.matvec(&x), vec![4.0, 0.0, -6.0]);
    }

    #[test]
    fn set_overwrites() {
        let mut m = SparseMat::zeros(2, 2);
        m.set(0, 0, 1.0);
        m.set(0, 0, 3.0);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.count_nonzero(), 1);
    }

    #[test]
    fn serde_roundtrip_sparse_and_dense() {
        let mut m = SparseMat::zeros(5, 5);
        m.set(1, 2, 0.5);
        let js = serde_json::to_string(&m).unwrap();
        assert!(js.contains("triplets"));
        let back: SparseMat = serde_json::from_str(&js).unwrap();
        assert_eq!(back.get(1, 2), 0.5);

        let dense = SparseMat::from_dense(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let js = serde_json::to_string(&dense).unwrap();
        assert!(!js.contains("triplets"));
        let back: SparseMat = serde_json::from_str(&js).unwrap();
        assert_eq!(back.get(1, 1), 4.0);
    }
}
