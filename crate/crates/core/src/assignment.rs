//! Maximum-weight bipartite assignment with an optional minimum-score
//! threshold.
//!
//! [`solve`] returns a one-to-one assignment of size `min(rows, cols)` with
//! the largest total score. Among equally good assignments it returns the
//! lexicographically smallest set of `(row, col)` pairs, so outputs are
//! reproducible. [`solve_with_threshold`] applies the threshold after the
//! optimal assignment has been found: any pair scoring below it is dropped
//! and both endpoints become unmatched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("score at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} scores for a {rows}x{cols} matrix, got {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
}

/// Dense row-major matrix of finite scores. May be rectangular or empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssignmentError> {
        if data.len() != rows * cols {
            return Err(AssignmentError::Shape {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row vectors. An empty slice gives a `0x0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AssignmentError::Ragged {
                    row: i,
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A `rows x 0` or `0 x cols` matrix.
    pub fn empty(rows: usize, cols: usize) -> Self {
        assert!(rows == 0 || cols == 0, "empty matrix must have a zero dimension");
        Self {
            rows,
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_entry(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by row.
    pub matches: Vec<Match>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn total_score(&self) -> f64 {
        self.matches.iter().map(|m| m.score).sum()
    }

    /// Column matched to `row`, if any.
    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.matches.iter().find(|m| m.row == row).map(|m| m.col)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.row, m.col)).collect()
    }

    fn from_pairs(matrix: &ScoreMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; matrix.rows];
        let mut col_used = vec![false; matrix.cols];
        let matches = pairs
            .into_iter()
            .map(|(row, col)| {
                row_used[row] = true;
                col_used[col] = true;
                Match {
                    row,
                    col,
                    score: matrix.get(row, col),
                }
            })
            .collect();
        Self {
            matches,
            unmatched_rows: (0..matrix.rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..matrix.cols).filter(|&c| !col_used[c]).collect(),
        }
    }
}

/// Optimal assignment of size `min(rows, cols)` maximizing the total score.
pub fn solve(matrix: &ScoreMatrix) -> Assignment {
    let need = matrix.rows.min(matrix.cols);
    if need == 0 {
        return Assignment::from_pairs(matrix, Vec::new());
    }
    let all_rows: Vec<usize> = (0..matrix.rows).collect();
    let all_cols: Vec<usize> = (0..matrix.cols).collect();
    let best = best_value(matrix, &all_rows, &all_cols);
    let eps = 1e-9 * (1.0 + matrix.max_abs() * need as f64);

    // Fix pairs greedily in (row, col) order, keeping a pair only when the
    // remaining subproblem can still reach the optimum.
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(need);
    let mut fixed_sum = 0.0;
    let mut col_free = vec![true; matrix.cols];
    for row in 0..matrix.rows {
        if pairs.len() == need {
            break;
        }
        let rest_need = need - pairs.len() - 1;
        let rest_rows: Vec<usize> = (row + 1..matrix.rows).collect();
        if rest_rows.len() < rest_need {
            break;
        }
        for col in 0..matrix.cols {
            if !col_free[col] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..matrix.cols).filter(|&c| c != col && col_free[c]).collect();
            if rest_cols.len() < rest_need {
                continue;
            }
            let here = matrix.get(row, col);
            let rest = if rest_need == 0 {
                0.0
            } else {
                best_value(matrix, &rest_rows, &rest_cols)
            };
            if fixed_sum + here + rest >= best - eps {
                pairs.push((row, col));
                fixed_sum += here;
                col_free[col] = false;
                break;
            }
        }
    }
    debug_assert_eq!(pairs.len(), need);
    Assignment::from_pairs(matrix, pairs)
}

/// [`solve`] followed by removal of every match scoring below `tau`.
pub fn solve_with_threshold(matrix: &ScoreMatrix, tau: f64) -> Assignment {
    debug_assert!(!tau.is_nan(), "threshold must not be NaN");
    let full = solve(matrix);
    let kept: Vec<(usize, usize)> = full
        .matches
        .iter()
        .filter(|m| m.score >= tau)
        .map(|m| (m.row, m.col))
        .collect();
    Assignment::from_pairs(matrix, kept)
}

/// Largest total score of a matching of size `min(|rows|, |cols|)` within
/// the given row and column subsets.
fn best_value(matrix: &ScoreMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    // Hungarian below needs rows <= cols; transpose when necessary.
    let (short, long, transposed) = if rows.len() <= cols.len() {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let score = |i: usize, j: usize| {
        if transposed {
            matrix.get(long[j], short[i])
        } else {
            matrix.get(short[i], long[j])
        }
    };
    let cost: Vec<Vec<f64>> = (0..short.len())
        .map(|i| (0..long.len()).map(|j| -score(i, j)).collect())
        .collect();
    let assigned = min_cost_assignment(&cost);
    assigned.iter().enumerate().map(|(i, &j)| score(i, j)).sum()
}

/// Shortest-augmenting-path Hungarian algorithm for an `n x m` cost matrix
/// with `n <= m`. Returns the column assigned to each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assigned[owner[j] - 1] = j - 1;
        }
    }
    assigned
}
