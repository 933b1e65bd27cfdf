//! Rectangular linear assignment (Kuhn–Munkres with potentials).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; `None` for surplus rows of a tall
    /// matrix.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

/// Minimum-cost assignment of rows to distinct columns. Every row is
/// matched when `rows ≤ cols`, otherwise every column is.
pub fn hungarian<R: AsRef<[f64]>>(cost: &[R]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.as_ref().len());
    if rows == 0 || cols == 0 {
        return Err(Error::Contract("assignment on an empty cost matrix".into()));
    }
    if cost.iter().any(|r| r.as_ref().len() != cols) {
        return Err(Error::dim("hungarian", "ragged cost matrix"));
    }
    if cost.iter().flat_map(|r| r.as_ref()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("hungarian"));
    }

    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j].as_ref()[i]
        } else {
            cost[i].as_ref()[j]
        }
    };

    // Shortest augmenting paths, 1-based with a virtual column 0.
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
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut row_to_col = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=m {
        if owner[j] == 0 {
            continue;
        }
        let (r, c) = if transposed {
            (j - 1, owner[j] - 1)
        } else {
            (owner[j] - 1, j - 1)
        };
        row_to_col[r] = Some(c);
        total += cost[r].as_ref()[c];
    }
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_cost() {
        let a = hungarian(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn two_by_two_swap() {
        // enumerate: identity costs 4+3 = 7, swap costs 1+2 = 3
        let a = hungarian(&[[4.0, 1.0], [2.0, 3.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![Some(1), Some(0)]);
        assert_eq!(a.cost, 3.0);
    }

    #[test]
    fn wide_and_tall() {
        let wide = hungarian(&[[5.0, 1.0, 9.0], [1.0, 7.0, 0.5]]).unwrap();
        assert_eq!(wide.row_to_col, vec![Some(1), Some(2)]);
        assert_eq!(wide.cost, 1.5);
        let tall = hungarian(&[[5.0, 1.0], [1.0, 7.0], [0.5, 9.0]]).unwrap();
        assert_eq!(tall.row_to_col, vec![Some(1), None, Some(0)]);
        assert_eq!(tall.cost, 1.5);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let empty: [[f64; 0]; 0] = [];
        assert!(hungarian(&empty).is_err());
        assert!(hungarian(&[[f64::NAN]]).is_err());
    }
}
