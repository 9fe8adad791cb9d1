//! Minimum-cost bipartite matching between queries and ground truth.

use serde::{Deserialize, Serialize};

use crate::decoder::{softmax, QuerySet};
use crate::rgbd::{wrap_angle, Box3D};

/// `(query, ground truth)` pairs sorted by query index.
pub type Assignment = Vec<(usize, usize)>;

/// Optimal assignment for `rows ≤ cols` via shortest augmenting paths with
/// potentials. Returns `col_of_row`.
fn solve_wide(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Minimum total cost of matching `min(|rows|, |cols|)` pairs.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let c = solve_wide(cost, rows, cols);
        rows.iter().zip(c).map(|(&r, j)| cost[r][cols[j]]).sum()
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        let c = solve_wide(&t, cols, rows);
        cols.iter().zip(c).map(|(&col, i)| cost[rows[i]][col]).sum()
    }
}

fn total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

/// Exact minimum-cost assignment of `min(M, G)` pairs. Among optimal
/// assignments the lexicographically smallest pair list is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let m = cost.len();
    let g = cost.first().map_or(0, |r| r.len());
    if m == 0 || g == 0 {
        return Vec::new();
    }
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..g).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());
    let need = m.min(g);
    let mut pairs: Assignment = Vec::with_capacity(need);
    let mut used_col = vec![false; g];
    let mut next_row = 0;
    while pairs.len() < need {
        let mut placed = false;
        'search: for i in next_row..m {
            if m - i < need - pairs.len() {
                break;
            }
            for j in 0..g {
                if used_col[j] {
                    continue;
                }
                let rows: Vec<usize> = (i + 1..m).collect();
                let cols: Vec<usize> = (0..g).filter(|&c| c != j && !used_col[c]).collect();
                let remaining = need - pairs.len() - 1;
                if rows.len().min(cols.len()) < remaining {
                    continue;
                }
                let fixed = total(cost, &pairs) + cost[i][j];
                if fixed + optimum(cost, &rows, &cols) <= best + tol {
                    pairs.push((i, j));
                    used_col[j] = true;
                    next_row = i + 1;
                    placed = true;
                    break 'search;
                }
            }
        }
        assert!(placed, "an optimal completion always exists");
    }
    pairs
}

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub class: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub iou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            center: 1.0,
            size: 1.0,
            yaw: 0.5,
            iou: 2.0,
        }
    }
}

pub fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).sum()
}

/// `M×G` matching cost, computed off the tape.
pub fn match_cost(preds: &QuerySet, gts: &[Box3D], w: &CostWeights) -> Vec<Vec<f64>> {
    preds
        .boxes
        .iter()
        .zip(&preds.logits)
        .map(|(b, l)| {
            let p = softmax(l);
            gts.iter()
                .map(|gt| {
                    w.class * (1.0 - p[gt.class_id])
                        + w.center * l1(&b.center, &gt.center)
                        + w.size * l1(&b.size, &gt.size)
                        + w.yaw * wrap_angle(b.yaw - gt.yaw).abs()
                        + w.iou * (1.0 - b.hull_iou(gt))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        assert_eq!(hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn ties_pick_lexicographic_first() {
        let c = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1)]);
        let c = vec![vec![0.0; 3]];
        assert_eq!(hungarian(&c), vec![(0, 0)]);
    }

    #[test]
    fn empty_is_empty() {
        assert!(hungarian(&[]).is_empty());
        assert!(hungarian(&[vec![], vec![]]).is_empty());
    }

    #[test]
    fn tall_and_wide() {
        let c = vec![vec![5.0, 1.0], vec![1.0, 5.0], vec![0.0, 0.5]];
        assert_eq!(hungarian(&c), vec![(0, 1), (2, 0)]);
        let t = vec![vec![5.0, 1.0, 0.0], vec![1.0, 5.0, 0.5]];
        assert_eq!(hungarian(&t), vec![(0, 2), (1, 0)]);
    }
}
