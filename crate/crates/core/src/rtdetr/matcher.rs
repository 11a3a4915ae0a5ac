//! Minimum-cost bipartite matching of ground truths to queries.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Rectangular assignment: each row gets a distinct column, minimizing the
/// summed cost. Requires `rows <= cols`.
///
/// Shortest augmenting paths with row/column potentials, `O(rows^2 * cols)`.
/// Returns the column of every row.
pub fn linear_sum_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Input("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Input(format!("{n} ground truths but only {m} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    // 1-based arrays, index 0 is the virtual column
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
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
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// One query's prediction in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    /// Sigmoid class probabilities.
    pub scores: Vec<f64>,
    /// Normalized `(cx, cy, w, h)`.
    pub cxcywh: [f64; 4],
}

/// Ground truth in the same normalized frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedTarget {
    pub class_id: usize,
    pub cxcywh: [f64; 4],
}

fn to_corners(b: [f64; 4]) -> BBox {
    BBox::from_cxcywh(b[0], b[1], b[2], b[3])
}

/// `w_cls * (-p_class) + w_l1 * |box - gt|_1 + w_giou * (1 - GIoU)`.
pub fn matching_cost(pred: &QueryPrediction, gt: &NormalizedTarget, w: &CostWeights) -> f64 {
    let l1: f64 = pred.cxcywh.iter().zip(&gt.cxcywh).map(|(a, b)| (a - b).abs()).sum();
    let giou = to_corners(pred.cxcywh).giou(&to_corners(gt.cxcywh));
    w.cls * (-pred.scores[gt.class_id]) + w.l1 * l1 + w.giou * (1.0 - giou)
}

/// Cost matrix with one row per ground truth and one column per query.
pub fn cost_matrix(preds: &[QueryPrediction], gts: &[NormalizedTarget], w: &CostWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| preds.iter().map(|p| matching_cost(p, g, w)).collect())
        .collect()
}

/// Match every ground truth to a distinct query. Returns `(query, gt)`
/// pairs ordered by ground-truth index.
pub fn hungarian_match(
    preds: &[QueryPrediction],
    gts: &[NormalizedTarget],
    w: &CostWeights,
) -> Result<Vec<(usize, usize)>> {
    if w.cls < 0.0 || w.l1 < 0.0 || w.giou < 0.0 {
        return Err(Error::Config("matching weights must be non-negative".into()));
    }
    if gts.len() > preds.len() {
        return Err(Error::Input(format!(
            "{} ground truths exceed {} queries",
            gts.len(),
            preds.len()
        )));
    }
    let cols = linear_sum_assignment(&cost_matrix(preds, gts, w))?;
    Ok(cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect())
}

/// Summed cost of an assignment (row `g` -> column `cols[g]`), in row order.
pub fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(g, &q)| cost[g][q]).sum()
}
