//! Content × question answerability matrices.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::KbError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// `A`: which content generated which question.
    Observed,
    /// `A*`: which content can answer which question.
    Oracle,
    /// `Â`: dense probabilities estimating `A*`.
    Estimate,
}

impl MatrixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::Observed => "observed",
            MatrixKind::Oracle => "oracle",
            MatrixKind::Estimate => "estimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixEntries {
    /// Positions holding a 1.
    Binary(BTreeSet<(usize, usize)>),
    /// Row-major `m × n` probabilities in `[0, 1]`.
    Dense { probs: Vec<f64>, threshold: f64 },
}

/// An `m × n` answerability matrix (rows are contents, columns are questions).
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerabilityMatrix {
    m: usize,
    n: usize,
    kind: MatrixKind,
    entries: MatrixEntries,
}

impl AnswerabilityMatrix {
    /// Observed `A` from each column's generating row.
    pub fn observed(m: usize, generators: &[usize]) -> Result<Self, KbError> {
        let set = generators.iter().copied().enumerate().map(|(j, i)| (i, j)).collect();
        Self::binary(MatrixKind::Observed, m, generators.len(), set)
    }

    pub fn binary(kind: MatrixKind, m: usize, n: usize, ones: BTreeSet<(usize, usize)>) -> Result<Self, KbError> {
        if kind == MatrixKind::Estimate {
            return Err(KbError::Invalid("estimate matrices are dense".into()));
        }
        if let Some(&(i, j)) = ones.iter().find(|&&(i, j)| i >= m || j >= n) {
            return Err(KbError::Invalid(format!("entry ({i}, {j}) outside {m}×{n}")));
        }
        if kind == MatrixKind::Observed {
            let mut per_column = vec![0usize; n];
            for &(_, j) in &ones {
                per_column[j] += 1;
            }
            if let Some(j) = per_column.iter().position(|&c| c != 1) {
                return Err(KbError::Invalid(format!(
                    "observed column {j} has {} generators, expected exactly 1",
                    per_column[j]
                )));
            }
        }
        Ok(Self {
            m,
            n,
            kind,
            entries: MatrixEntries::Binary(ones),
        })
    }

    pub fn estimate(m: usize, n: usize, probs: Vec<f64>, threshold: f64) -> Result<Self, KbError> {
        if probs.len() != m * n {
            return Err(KbError::Invalid(format!(
                "estimate has {} entries, expected {m}×{n}",
                probs.len()
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(KbError::Invalid(format!("threshold {threshold} outside (0, 1)")));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(KbError::Invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            m,
            n,
            kind: MatrixKind::Estimate,
            entries: MatrixEntries::Dense { probs, threshold },
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn entries(&self) -> &MatrixEntries {
        &self.entries
    }

    pub fn threshold(&self) -> Option<f64> {
        match &self.entries {
            MatrixEntries::Dense { threshold, .. } => Some(*threshold),
            MatrixEntries::Binary(_) => None,
        }
    }

    /// Raw value: 0/1 for binary kinds, the probability for estimates.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        match &self.entries {
            MatrixEntries::Binary(set) => {
                if set.contains(&(i, j)) {
                    1.0
                } else {
                    0.0
                }
            }
            MatrixEntries::Dense { probs, .. } => probs[i * self.n + j],
        }
    }

    /// Binarized value (estimates compare against their stored threshold).
    pub fn is_set(&self, i: usize, j: usize) -> bool {
        match &self.entries {
            MatrixEntries::Binary(set) => set.contains(&(i, j)),
            MatrixEntries::Dense { probs, threshold } => probs[i * self.n + j] >= *threshold,
        }
    }

    /// Rows with a binarized 1 in column `j`, ascending.
    pub fn column_rows(&self, j: usize) -> Vec<usize> {
        (0..self.m).filter(|&i| self.is_set(i, j)).collect()
    }

    /// Number of binarized 1s in each row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.m];
        match &self.entries {
            MatrixEntries::Binary(set) => set.iter().for_each(|&(i, _)| counts[i] += 1),
            MatrixEntries::Dense { .. } => {
                for (i, c) in counts.iter_mut().enumerate() {
                    *c = (0..self.n).filter(|&j| self.is_set(i, j)).count();
                }
            }
        }
        counts
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.m).map(|i| self.value(i, j)).sum())
            .collect()
    }

    /// Count of binarized 1s.
    pub fn ones(&self) -> usize {
        match &self.entries {
            MatrixEntries::Binary(set) => set.len(),
            MatrixEntries::Dense { probs, threshold } => probs.iter().filter(|&&p| p >= *threshold).count(),
        }
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self, KbError> {
        let n = columns.len();
        match &self.entries {
            MatrixEntries::Binary(set) => {
                let mut ones = BTreeSet::new();
                for (new_j, &old_j) in columns.iter().enumerate() {
                    for i in 0..self.m {
                        if set.contains(&(i, old_j)) {
                            ones.insert((i, new_j));
                        }
                    }
                }
                Self::binary(self.kind, self.m, n, ones)
            }
            MatrixEntries::Dense { probs, threshold } => {
                let mut out = Vec::with_capacity(self.m * n);
                for i in 0..self.m {
                    out.extend(columns.iter().map(|&j| probs[i * self.n + j]));
                }
                Self::estimate(self.m, n, out, *threshold)
            }
        }
    }
}
