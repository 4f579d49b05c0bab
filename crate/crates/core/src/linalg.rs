//! Compact sparse linear algebra for the per-destination chain systems.
//!
//! Every destination MDP produces matrices of the form `A = I - gamma * Pi P`
//! over its transient states: small (at most a few hundred rows), a handful of
//! entries per column, nonsymmetric. The solver refills the same sparsity
//! pattern every evaluation and needs both `A x = b` and `A^T x = b`, so the
//! factorization is done once per refill and reused for both solve directions.
//!
//! The factorization is a left-looking sparse LU with partial pivoting
//! (Gilbert-Peierls): for each column, the sparse triangular solve
//! `x = L \ A(:,j)` is evaluated over the set of rows reachable in the graph
//! of `L`, found by depth-first search.

use crate::error::{Error, Result};

/// Compressed sparse column matrix with a fixed pattern.
#[derive(Debug, Clone)]
pub struct CscMat {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMat {
    /// Builds the pattern from (row, col) pairs and returns, for each input
    /// pair, the index of its slot in `values`. Duplicate coordinates share a
    /// slot, so callers can scatter-accumulate into the returned slots.
    pub fn from_coords(n: usize, coords: &[(usize, usize)]) -> (CscMat, Vec<usize>) {
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| (coords[i].1, coords[i].0));

        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(coords.len());
        let mut slots = vec![0usize; coords.len()];
        let mut last: Option<(usize, usize)> = None;
        for &i in &order {
            let (r, c) = coords[i];
            assert!(r < n && c < n, "coordinate ({r},{c}) out of bounds for n={n}");
            if last != Some((r, c)) {
                row_idx.push(r);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
            slots[i] = row_idx.len() - 1;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        let values = vec![0.0; row_idx.len()];
        (
            CscMat {
                n,
                col_ptr,
                row_idx,
                values,
            },
            slots,
        )
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// y = A * x (used by tests and residual checks).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
        y
    }
}

/// Sparse LU factors of `P A = L U` with partial pivoting.
///
/// `L` is unit lower triangular (unit diagonal implicit), `U` upper triangular
/// including its diagonal. Row indices of both factors are in pivot order.
pub struct LuFactors {
    n: usize,
    l_col_ptr: Vec<usize>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
    u_col_ptr: Vec<usize>,
    u_row: Vec<usize>,
    u_val: Vec<f64>,
    /// perm[k] = original row that became pivot row k.
    perm: Vec<usize>,
}

const PIVOT_FLOOR: f64 = 1e-120;

pub fn factor(a: &CscMat) -> Result<LuFactors> {
    let n = a.n;
    let none = usize::MAX;
    // pinv[original row] = pivot position, or `none` while unassigned.
    let mut pinv = vec![none; n];
    let mut perm = vec![0usize; n];

    let mut l_col_ptr = Vec::with_capacity(n + 1);
    let mut l_row: Vec<usize> = Vec::new();
    let mut l_val: Vec<f64> = Vec::new();
    let mut u_col_ptr = Vec::with_capacity(n + 1);
    let mut u_row: Vec<usize> = Vec::new();
    let mut u_val: Vec<f64> = Vec::new();
    l_col_ptr.push(0);
    u_col_ptr.push(0);

    // Dense workspace indexed by original row.
    let mut x = vec![0.0f64; n];
    let mut visited = vec![false; n]; // by pivot index
    let mut topo: Vec<usize> = Vec::with_capacity(n);
    // Explicit DFS stack of (pivot node, next child offset).
    let mut stack: Vec<(usize, usize)> = Vec::new();

    for j in 0..n {
        // Scatter A(:,j) and collect the reachable elimination set.
        topo.clear();
        let mut below: Vec<usize> = Vec::new(); // original rows not yet pivotal
        for k in a.col_ptr[j]..a.col_ptr[j + 1] {
            let r = a.row_idx[k];
            x[r] = a.values[k];
            let p = pinv[r];
            if p == none {
                below.push(r);
            } else if !visited[p] {
                // DFS over the graph of L from node p, post-order collected.
                stack.push((p, l_col_ptr[p]));
                visited[p] = true;
                loop {
                    let step = match stack.last_mut() {
                        None => break,
                        Some(top) => {
                            let node = top.0;
                            let end = l_col_ptr[node + 1];
                            let mut descend = None;
                            while top.1 < end {
                                let rr = l_row[top.1];
                                top.1 += 1;
                                let pp = pinv[rr];
                                if pp != none && !visited[pp] {
                                    descend = Some(pp);
                                    break;
                                }
                            }
                            (node, descend)
                        }
                    };
                    match step {
                        (_, Some(pp)) => {
                            visited[pp] = true;
                            stack.push((pp, l_col_ptr[pp]));
                        }
                        (node, None) => {
                            topo.push(node);
                            stack.pop();
                        }
                    }
                }
            }
        }
        // Post-order gives children first; eliminate in reverse (topological).
        topo.reverse();

        for &p in &topo {
            let orig = perm[p];
            let xp = x[orig];
            if xp != 0.0 {
                for k in l_col_ptr[p]..l_col_ptr[p + 1] {
                    x[l_row[k]] -= l_val[k] * xp;
                }
            }
        }

        // Partial pivot among rows that are not yet pivotal. The DFS only
        // tracked original entries of A(:,j); eliminations can create fill in
        // other non-pivotal rows, which live in `l_row` updates above, so
        // collect candidates from both sources.
        for &p in &topo {
            for k in l_col_ptr[p]..l_col_ptr[p + 1] {
                let r = l_row[k];
                if pinv[r] == none && !below.contains(&r) {
                    below.push(r);
                }
            }
        }

        let mut pivot_row = none;
        let mut pivot_abs = 0.0f64;
        for &r in &below {
            let v = x[r].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = r;
            }
        }
        if pivot_row == none || pivot_abs < PIVOT_FLOOR || !pivot_abs.is_finite() {
            return Err(Error::SingularSystem {
                col: j,
                pivot: pivot_abs,
            });
        }
        let pivot_val = x[pivot_row];

        // U(:,j): eliminated pivotal rows plus the diagonal.
        for &p in &topo {
            let orig = perm[p];
            let v = x[orig];
            if v != 0.0 {
                u_row.push(p);
                u_val.push(v);
            }
            x[orig] = 0.0;
            visited[p] = false;
        }
        u_row.push(j);
        u_val.push(pivot_val);
        u_col_ptr.push(u_row.len());

        // L(:,j): remaining non-pivotal rows, scaled.
        for &r in &below {
            if r == pivot_row {
                continue;
            }
            let v = x[r];
            if v != 0.0 {
                l_row.push(r);
                l_val.push(v / pivot_val);
            }
            x[r] = 0.0;
        }
        x[pivot_row] = 0.0;
        l_col_ptr.push(l_row.len());

        pinv[pivot_row] = j;
        perm[j] = pivot_row;
    }

    // Translate L's row indices from original to pivot order so the solves
    // need no indirection.
    for r in l_row.iter_mut() {
        *r = pinv[*r];
    }

    Ok(LuFactors {
        n,
        l_col_ptr,
        l_row,
        l_val,
        u_col_ptr,
        u_row,
        u_val,
        perm,
    })
}

impl LuFactors {
    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for k in 0..n {
            y[k] = b[self.perm[k]];
        }
        // L y' = y, forward scatter.
        for k in 0..n {
            let yk = y[k];
            if yk != 0.0 {
                for i in self.l_col_ptr[k]..self.l_col_ptr[k + 1] {
                    y[self.l_row[i]] -= self.l_val[i] * yk;
                }
            }
        }
        // U x = y', backward scatter; diagonal of column j is the entry with
        // row == j (always pushed last during factorization).
        for j in (0..n).rev() {
            let lo = self.u_col_ptr[j];
            let hi = self.u_col_ptr[j + 1];
            let xj = y[j] / self.u_val[hi - 1];
            y[j] = xj;
            if xj != 0.0 {
                for i in lo..hi - 1 {
                    y[self.u_row[i]] -= self.u_val[i] * xj;
                }
            }
        }
        y
    }

    /// Solves A^T x = b.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // U^T z = b, forward gather.
        let mut z = vec![0.0; n];
        for j in 0..n {
            let lo = self.u_col_ptr[j];
            let hi = self.u_col_ptr[j + 1];
            let mut s = b[j];
            for i in lo..hi - 1 {
                s -= self.u_val[i] * z[self.u_row[i]];
            }
            z[j] = s / self.u_val[hi - 1];
        }
        // L^T w = z, backward gather.
        for k in (0..n).rev() {
            let mut s = z[k];
            for i in self.l_col_ptr[k]..self.l_col_ptr[k + 1] {
                s -= self.l_val[i] * z[self.l_row[i]];
            }
            z[k] = s;
        }
        // x = P^T w.
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[self.perm[k]] = z[k];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for j in 0..n {
            let mut p = j;
            for r in j + 1..n {
                if a[r][j].abs() > a[p][j].abs() {
                    p = r;
                }
            }
            if a[p][j].abs() < 1e-300 {
                return None;
            }
            a.swap(j, p);
            b.swap(j, p);
            for r in j + 1..n {
                let f = a[r][j] / a[j][j];
                if f != 0.0 {
                    for c in j..n {
                        a[r][c] -= f * a[j][c];
                    }
                    b[r] -= f * b[j];
                }
            }
        }
        let mut x = vec![0.0; n];
        for j in (0..n).rev() {
            let mut s = b[j];
            for c in j + 1..n {
                s -= a[j][c] * x[c];
            }
            x[j] = s / a[j][j];
        }
        Some(x)
    }

    fn random_system(rng: &mut ChaCha8Rng, n: usize) -> (CscMat, Vec<Vec<f64>>) {
        // Diagonally dominant sparse matrix, like I - gamma Pi P.
        let mut coords = Vec::new();
        let mut vals = Vec::new();
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            coords.push((r, r));
            vals.push(1.0);
            dense[r][r] += 1.0;
            let k = rng.gen_range(0..4usize);
            for _ in 0..k {
                let c = rng.gen_range(0..n);
                let v = -rng.gen_range(0.0..0.9) / (k as f64 + 1.0);
                coords.push((r, c));
                vals.push(v);
                dense[r][c] += v;
            }
        }
        let (mut m, slots) = CscMat::from_coords(n, &coords);
        for (i, &s) in slots.iter().enumerate() {
            m.values[s] += vals[i];
        }
        (m, dense)
    }

    #[test]
    fn matches_dense_elimination_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let n = 2 + (trial % 40);
            let (m, dense) = random_system(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let lu = factor(&m).expect("nonsingular");

            let x = lu.solve(&b);
            let want = dense_solve(dense.clone(), b.clone()).unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - want[i]).abs() < 1e-9,
                    "solve mismatch at {i}: {} vs {}",
                    x[i],
                    want[i]
                );
            }

            let mut dense_t = vec![vec![0.0; n]; n];
            for r in 0..n {
                for c in 0..n {
                    dense_t[c][r] = dense[r][c];
                }
            }
            let xt = lu.solve_transpose(&b);
            let want_t = dense_solve(dense_t, b.clone()).unwrap();
            for i in 0..n {
                assert!(
                    (xt[i] - want_t[i]).abs() < 1e-9,
                    "transpose solve mismatch at {i}: {} vs {}",
                    xt[i],
                    want_t[i]
                );
            }

            // Residual check on the original matrix.
            let ax = m.mul_vec(&x);
            for i in 0..n {
                assert!((ax[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_coords_share_slots() {
        let coords = [(0, 0), (1, 0), (0, 0), (1, 1)];
        let (mut m, slots) = CscMat::from_coords(2, &coords);
        assert_eq!(slots[0], slots[2]);
        assert_eq!(m.nnz(), 3);
        for (i, &s) in slots.iter().enumerate() {
            m.values[s] += (i + 1) as f64;
        }
        // (0,0) accumulates 1 + 3.
        let x = m.mul_vec(&[1.0, 0.0]);
        assert_eq!(x[0], 4.0);
        assert_eq!(x[1], 2.0);
    }

    #[test]
    fn singular_matrix_is_an_error() {
        // Second column identically zero.
        let coords = [(0, 0), (1, 0)];
        let (mut m, slots) = CscMat::from_coords(2, &coords);
        m.values[slots[0]] = 1.0;
        m.values[slots[1]] = 2.0;
        assert!(matches!(factor(&m), Err(Error::SingularSystem { .. })));
    }

    #[test]
    fn permutation_stress_wide_value_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = 30;
            let (mut m, dense) = {
                let (m, d) = random_system(&mut rng, n);
                (m, d)
            };
            // Scale some columns hard to force pivoting.
            let mut dense = dense;
            for c in (0..n).step_by(3) {
                for k in m.col_ptr[c]..m.col_ptr[c + 1] {
                    m.values[k] *= 1e-6;
                }
                for r in 0..n {
                    dense[r][c] *= 1e-6;
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lu = factor(&m).unwrap();
            let x = lu.solve(&b);
            let want = dense_solve(dense, b.clone()).unwrap();
            for i in 0..n {
                let scale = want[i].abs().max(1.0);
                assert!((x[i] - want[i]).abs() / scale < 1e-8);
            }
        }
    }
}
