use crate::error::{Error, Result};

/// Minimum-cost assignment of every ground truth to a distinct query.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, ground truth)`, ordered by ground truth.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned costs, accumulated in ground-truth order.
    pub cost: f64,
}

/// Solves the rectangular assignment problem for an `N × K` cost matrix
/// (`cost[query][gt]`, `K ≤ N`) with the shortest augmenting path method.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n_queries = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidShape {
            op: "hungarian",
            msg: "cost rows differ in length".into(),
        });
    }
    if k > n_queries {
        return Err(Error::TooManyTargets {
            gts: k,
            queries: n_queries,
        });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidShape {
            op: "hungarian",
            msg: "non-finite cost".into(),
        });
    }
    if k == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }

    // Rows are ground truths (1-based), columns are queries (1-based); index 0
    // is the virtual source.
    let (n, m) = (k, n_queries);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
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
    let mut by_gt = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            by_gt[owner[j] - 1] = j - 1;
        }
    }
    let pairs: Vec<_> = by_gt.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    let total = pairs.iter().map(|&(q, g)| cost[q][g]).sum();
    Ok(Assignment { pairs, cost: total })
}
