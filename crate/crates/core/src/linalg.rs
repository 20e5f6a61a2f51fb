//! Sparse symmetric assembly, envelope Cholesky and dense condition numbers.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric matrix stored by rows as sorted (column, value) lists holding
/// both triangles.
#[derive(Clone, Debug)]
pub struct SymmetricSparse {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SymmetricSparse {
    pub fn new(n: usize) -> Self {
        SymmetricSparse {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` to entry (i, j) only; callers add both (i, j) and (j, i).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(p) => row[p].1 += v,
            Err(p) => row.insert(p, (j, v)),
        }
    }

    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        self.add(i, j, v);
        if i != j {
            self.add(j, i, v);
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.rows[i];
        row.binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| row[p].1)
            .unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `b - A x` accumulated in double-double precision, so that iterative
    /// refinement can correct errors beyond working precision.
    pub fn residual_compensated(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(b)
            .map(|(r, &bi)| {
                let (mut hi, mut lo) = (bi, 0.0);
                for &(c, v) in r {
                    let p = -v * x[c];
                    let perr = (-v).mul_add(x[c], -p);
                    let (s, serr) = two_sum(hi, p);
                    hi = s;
                    lo += serr + perr;
                }
                hi + lo
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] = v;
            }
        }
        m
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Reverse Cuthill-McKee ordering of the first `n_graph` unknowns; unknowns
/// past `n_graph` keep their relative order and go last. Returns `perm` with
/// `perm[new] = old`.
pub fn rcm_ordering(a: &SymmetricSparse, n_graph: usize) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n_graph)
        .map(|i| a.row(i).iter().filter(|&&(c, _)| c < n_graph && c != i).count())
        .collect();
    let mut visited = vec![false; n_graph];
    let mut order = Vec::with_capacity(n);
    while order.len() < n_graph {
        // start each component from a minimum-degree node
        let start = (0..n_graph)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .unwrap();
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nb: Vec<usize> = a
                .row(u)
                .iter()
                .map(|&(c, _)| c)
                .filter(|&c| c < n_graph && !visited[c])
                .collect();
            nb.sort_by_key(|&c| (degree[c], c));
            for c in nb {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order.extend(n_graph..n);
    order
}

/// Cholesky factor in variable-band (envelope) storage.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    /// First stored column of each row of L (permuted numbering).
    first: Vec<usize>,
    /// Offset of each row's first entry in `vals`.
    start: Vec<usize>,
    vals: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factorizes `a` after permuting by `perm` (`perm[new] = old`).
    pub fn factor(a: &SymmetricSparse, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        if perm.len() != n {
            return Err(Error::Dimension(format!("permutation of length {} for dimension {n}", perm.len())));
        }
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        for new in 0..n {
            let old = perm[new];
            first[new] = a
                .row(old)
                .iter()
                .map(|&(c, _)| inv[c])
                .filter(|&c| c <= new)
                .min()
                .unwrap_or(new);
        }
        let mut start = vec![0; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut vals = vec![0.0; start[n]];
        for new in 0..n {
            for &(c, v) in a.row(perm[new]) {
                let c = inv[c];
                if c <= new {
                    vals[start[new] + c - first[new]] = v;
                }
            }
        }
        let mut scale = 0.0f64;
        for i in 0..n {
            scale = scale.max(vals[start[i + 1] - 1].abs());
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = vals[start[i] + j - fi];
                let ri = &vals[start[i] + lo - fi..start[i] + j - fi];
                let rj = &vals[start[j] + lo - fj..start[j] + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                if j < i {
                    vals[start[i] + j - fi] = s / vals[start[j + 1] - 1];
                } else {
                    if !(s > 1e-14 * scale) {
                        return Err(Error::Factorization(format!(
                            "matrix is not positive definite at pivot {i} (value {s:e})"
                        )));
                    }
                    vals[start[i + 1] - 1] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky {
            perm,
            first,
            start,
            vals,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        // forward: L y = b
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.vals[self.start[i]..self.start[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(l, x)| l * x).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        // backward: L^T x = y, column-oriented over rows of L
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.vals[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let xi = y[i];
            for (l, yj) in row[..i - fi].iter().zip(&mut y[fi..i]) {
                *yj -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.vals.len()
    }
}

/// Ratio of the largest to the smallest singular value. Exactly symmetric
/// input goes through the symmetric eigensolver (singular values are the
/// absolute eigenvalues); anything else through the SVD. Returns
/// `f64::INFINITY` when the smallest value is zero relative to the largest.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return f64::NAN;
    }
    let values: Vec<f64> = if m.is_square() && m == &m.transpose() {
        let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
        match f.self_adjoint_eigenvalues(faer::Side::Lower) {
            Ok(ev) => ev.iter().map(|v| v.abs()).collect(),
            Err(_) => return f64::NAN,
        }
    } else {
        m.clone().singular_values().iter().copied().collect()
    };
    let max = values.iter().cloned().fold(0.0, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 || min <= 1e-300 * max {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_1d(n: usize, shift: f64) -> SymmetricSparse {
        let mut a = SymmetricSparse::new(n);
        for i in 0..n {
            a.add(i, i, 2.0 + shift);
            if i + 1 < n {
                a.add_sym(i, i + 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn envelope_solve_matches_dense() {
        let a = laplacian_1d(30, 0.1);
        let perm: Vec<usize> = (0..30).rev().collect();
        let f = EnvelopeCholesky::factor(&a, perm).unwrap();
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = SymmetricSparse::new(2);
        a.add(0, 0, 1.0);
        a.add(1, 1, -1.0);
        assert!(matches!(
            EnvelopeCholesky::factor(&a, vec![0, 1]),
            Err(Error::Factorization(_))
        ));
    }

    #[test]
    fn rcm_keeps_tail_unknowns_last() {
        let mut a = laplacian_1d(6, 0.0);
        a.add_sym(0, 5, -1.0);
        let p = rcm_ordering(&a, 4);
        assert_eq!(&p[4..], &[4, 5]);
        let mut s = p[..4].to_vec();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn condition_number_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, -2.0, 0.5]));
        assert!((condition_number(&m) - 8.0).abs() < 1e-12);
        let z = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(condition_number(&z), f64::INFINITY);
        assert_eq!(condition_number(&DMatrix::identity(5, 5)), 1.0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 0.1]));
        assert!((condition_number(&d) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn nonsymmetric_input_uses_singular_values() {
        // singular values of [[1, 2], [0, 1]] are sqrt(2) +- 1
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let want = (2f64.sqrt() + 1.0) / (2f64.sqrt() - 1.0);
        assert!((condition_number(&m) - want).abs() < 1e-12 * want);
    }

    #[test]
    fn random_spd_matches_power_iteration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let b = DMatrix::<f64>::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let mut a = b.transpose() * &b + DMatrix::identity(20, 20) * 0.5;
        a = (&a + a.transpose()) * 0.5;
        let power = |m: &DMatrix<f64>| {
            let mut v = nalgebra::DVector::from_element(20, 1.0);
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let w = m * &v;
                lambda = w.norm() / v.norm();
                v = w.normalize();
            }
            lambda
        };
        let lmax = power(&a);
        let lmin = 1.0 / power(&a.clone().try_inverse().unwrap());
        let want = lmax / lmin;
        let got = condition_number(&a);
        assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn random_spd_systems_solve(seed in 0u64..1000, n in 2usize..25) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = SymmetricSparse::new(n);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..i {
                    if rng.random_bool(0.3) {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        a.add_sym(i, j, v);
                        dense[(i, j)] = v;
                        dense[(j, i)] = v;
                    }
                }
            }
            for i in 0..n {
                let d = n as f64 + 1.0;
                a.add(i, i, d);
                dense[(i, i)] = d;
            }
            let f = EnvelopeCholesky::factor(&a, rcm_ordering(&a, n)).unwrap();
            let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
            let x = f.solve(&b);
            let xd = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b));
            for i in 0..n {
                prop_assert!((x[i] - xd[i]).abs() < 1e-10);
            }
        }
    }
}
