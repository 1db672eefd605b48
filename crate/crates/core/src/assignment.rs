//! Optimal bipartite assignment and the detection matching cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::matrix::Matrix;
use crate::selection::{GroundTruthSet, PredictionSet};

/// Result of a rectangular assignment: each row maps to at most one column,
/// and exactly `min(rows, cols)` rows are assigned.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty(rows: usize) -> Self {
        Assignment {
            row_to_col: vec![None; rows],
            total_cost: 0.0,
        }
    }

    /// `(row, col)` pairs in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
            .collect()
    }

    pub fn num_assigned(&self) -> usize {
        self.row_to_col.iter().filter(|c| c.is_some()).count()
    }

    /// Row assigned to each column (`None` for unassigned columns).
    pub fn col_to_row(&self, cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; cols];
        for (r, c) in self.pairs() {
            out[c] = Some(r);
        }
        out
    }
}

/// Weights of the classification, L1 and GIoU terms of a matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            w_cls: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_cls, self.w_l1, self.w_giou];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!(
                "match weights must be nonnegative with one positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Minimum-cost assignment of rows to columns (Hungarian method with
/// potentials, O(n^2 m)).
///
/// Rectangular matrices are allowed; `min(rows, cols)` pairs are produced.
/// Ties are broken deterministically by scan order (lowest column first).
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    if let Some(bad) = cost.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite cost entry {bad}")));
    }
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return Ok(Assignment::empty(rows));
    }
    let row_to_col = if rows <= cols {
        solve_wide(cost)
    } else {
        let t = cost.transposed();
        let col_to_row = solve_wide(&t);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        out
    };
    let total_cost = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .sum();
    Ok(Assignment {
        row_to_col,
        total_cost,
    })
}

/// Shortest-augmenting-path Hungarian for `rows <= cols`; every row is assigned.
fn solve_wide(cost: &Matrix) -> Vec<Option<usize>> {
    let (n, m) = (cost.rows(), cost.cols());
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = cost.row(i0 - 1);
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
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

    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Cost of assigning prediction `i` to ground truth `j`:
/// `w_cls * (-p_i[c_j]) + w_l1 * |b_i - b_j|_1 + w_giou * (1 - giou(b_i, b_j))`.
pub fn match_cost(preds: &PredictionSet, gts: &GroundTruthSet, w: &MatchWeights) -> Result<Matrix> {
    let mut evaluations = 0;
    match_cost_counted(preds, gts, w, &mut evaluations)
}

/// [`match_cost`], adding the number of entries evaluated to `counter`.
pub fn match_cost_counted(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &MatchWeights,
    counter: &mut u64,
) -> Result<Matrix> {
    if preds.num_queries() == 0 {
        return Err(Error::Invalid("match_cost needs at least one prediction".into()));
    }
    if let Some(&c) = gts.classes.iter().find(|&&c| c >= preds.num_columns()) {
        return Err(Error::Invalid(format!(
            "ground-truth class {c} outside the {} predicted classes",
            preds.num_columns()
        )));
    }
    let m = Matrix::from_fn(preds.num_queries(), gts.len(), |i, j| {
        *counter += 1;
        let p = &preds.boxes[i];
        let g = &gts.boxes[j];
        w.w_cls * -preds.class_probs.get(i, gts.classes[j])
            + w.w_l1 * p.l1(g)
            + w.w_giou * (1.0 - giou(p, g))
    });
    Ok(m)
}

/// Optimal one-to-one matching of predictions (rows) to ground truths (columns).
pub fn bipartite_match(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &MatchWeights,
) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment::empty(preds.num_queries()));
    }
    hungarian(&match_cost(preds, gts, w)?)
}
