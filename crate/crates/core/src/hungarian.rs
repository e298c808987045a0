//! Optimal one-to-one assignment of rows to columns.
//!
//! Shortest augmenting paths with row/column potentials, `O(K^2 M)`. Rows are
//! added one at a time; a rectangular `K <= M` matrix is handled directly
//! since every row is matched and surplus columns simply stay free.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs, one per row in row order.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the selected score entries.
    pub total: f64,
}

impl Assignment {
    pub fn column_of(&self, row: usize) -> usize {
        self.pairs[row].1
    }
}

pub fn hungarian_assign(score: &Tensor, sense: Sense) -> Result<Assignment> {
    let (k, m) = (score.rows(), score.cols());
    if k > m {
        return Err(Error::TooManyRows { rows: k, cols: m });
    }
    if !score.is_finite() {
        return Err(Error::NonFinite("hungarian_assign"));
    }
    if k == 0 {
        return Ok(Assignment { pairs: Vec::new(), total: 0.0 });
    }
    let cost = |i: usize, j: usize| match sense {
        Sense::Minimize => score.get(i, j),
        Sense::Maximize => -score.get(i, j),
    };
    // 1-based potentials; column 0 is the virtual root.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=k {
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
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut col_of = vec![0usize; k];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of[owner[j] - 1] = j - 1;
        }
    }
    let pairs: Vec<(usize, usize)> = col_of.into_iter().enumerate().collect();
    let total = pairs.iter().map(|&(r, c)| score.get(r, c)).sum();
    Ok(Assignment { pairs, total })
}
