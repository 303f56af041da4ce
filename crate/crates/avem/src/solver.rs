//! Compressed sparse row matrices and a Jacobi-preconditioned conjugate
//! gradient solver. The adaptive loop feeds the previous solution in as a
//! warm start, so iteration counts stay low as the mesh grows.

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("invalid system: {0}")]
    Shape(String),
    #[error("matrix is not positive definite (p'Ap = {curvature} at iteration {iteration})")]
    Breakdown { iteration: usize, curvature: f64 },
    #[error("non-finite values encountered at iteration {0}")]
    NonFinite(usize),
    #[error("no convergence after {iterations} iterations (relative residual {residual_rel})")]
    NoConvergence { iterations: usize, residual_rel: f64 },
}

/// Square sparse system `A x = b` in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSystem {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    /// Builds CSR from unordered triplets; duplicate entries are summed.
    pub fn from_triplets(
        n: usize,
        mut triplets: Vec<(u32, u32, f64)>,
        rhs: Vec<f64>,
    ) -> Result<Self, SolveError> {
        if rhs.len() != n {
            return Err(SolveError::Shape(format!(
                "rhs length {} does not match dimension {n}",
                rhs.len()
            )));
        }
        for &(r, c, v) in &triplets {
            if r as usize >= n || c as usize >= n {
                return Err(SolveError::Shape(format!("entry ({r}, {c}) out of range {n}")));
            }
            if !v.is_finite() {
                return Err(SolveError::Shape(format!("entry ({r}, {c}) is {v}")));
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if col_idx.len() > row_ptr[r as usize]
                && row_ptr[r as usize + 1] > 0
                && *col_idx.last().unwrap() == c
                && row_ptr[r as usize + 1] == col_idx.len()
            {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr[r as usize + 1] = col_idx.len();
        }
        // Rows with no entries inherit the previous offset.
        for i in 1..=n {
            if row_ptr[i] < row_ptr[i - 1] {
                row_ptr[i] = row_ptr[i - 1];
            }
        }
        Ok(SparseSystem { n, row_ptr, col_idx, values, rhs })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] as usize == i {
                    d[i] += self.values[k];
                }
            }
        }
        d
    }

    /// Entry lookup for tests and matrix export; O(row nnz).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[k] as usize == j {
                acc += self.values[k];
            }
        }
        acc
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgConfig {
    /// Stop when `||b - Ax|| <= tol_rel * ||b||`.
    pub tol_rel: f64,
    /// Defaults to `20 n` when `None`.
    pub max_iter: Option<usize>,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { tol_rel: 1e-10, max_iter: None }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_rel: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient. The matrix must be symmetric
/// positive definite; indefiniteness surfaces as [`SolveError::Breakdown`].
pub fn cg_solve(
    sys: &SparseSystem,
    x0: Option<&[f64]>,
    cfg: &CgConfig,
) -> Result<CgOutcome, SolveError> {
    let n = sys.n;
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(SolveError::Shape(format!(
                "warm start length {} does not match dimension {n}",
                x0.len()
            )));
        }
    }
    if !(cfg.tol_rel > 0.0 && cfg.tol_rel.is_finite()) {
        return Err(SolveError::Shape(format!("tolerance {} not positive", cfg.tol_rel)));
    }
    let b_norm = dot(&sys.rhs, &sys.rhs).sqrt();
    if !b_norm.is_finite() {
        return Err(SolveError::NonFinite(0));
    }
    if b_norm == 0.0 {
        return Ok(CgOutcome { x: vec![0.0; n], iterations: 0, residual_rel: 0.0 });
    }
    let diag = sys.diagonal();
    let mut diag_inv = vec![0.0; n];
    for i in 0..n {
        if !(diag[i] > 0.0) {
            return Err(SolveError::Shape(format!(
                "diagonal entry {} at row {i} rules out positive definiteness",
                diag[i]
            )));
        }
        diag_inv[i] = 1.0 / diag[i];
    }

    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    sys.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = sys.rhs[i] - r[i];
    }
    let tol_abs = cfg.tol_rel * b_norm;
    let mut res = dot(&r, &r).sqrt();
    if res <= tol_abs {
        return Ok(CgOutcome { x, iterations: 0, residual_rel: res / b_norm });
    }

    let mut z: Vec<f64> = r.iter().zip(&diag_inv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = cfg.max_iter.unwrap_or(20 * n.max(1));

    for iter in 1..=max_iter {
        sys.matvec(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() || !rz.is_finite() {
            return Err(SolveError::NonFinite(iter));
        }
        if curvature <= 0.0 {
            return Err(SolveError::Breakdown { iteration: iter, curvature });
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt();
        if !res.is_finite() {
            return Err(SolveError::NonFinite(iter));
        }
        if res <= tol_abs {
            return Ok(CgOutcome { x, iterations: iter, residual_rel: res / b_norm });
        }
        for i in 0..n {
            z[i] = r[i] * diag_inv[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::NoConvergence { iterations: max_iter, residual_rel: res / b_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_to_system(a: &nalgebra::DMatrix<f64>, rhs: Vec<f64>) -> SparseSystem {
        let n = a.nrows();
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    triplets.push((i as u32, j as u32, a[(i, j)]));
                }
            }
        }
        SparseSystem::from_triplets(n, triplets, rhs).unwrap()
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> nalgebra::DMatrix<f64> {
        let b = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = &b * b.transpose();
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        a
    }

    #[test]
    fn from_triplets_merges_duplicates() {
        let sys = SparseSystem::from_triplets(
            2,
            vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0), (0, 1, 3.0), (1, 1, 5.0)],
            vec![1.0, 2.0],
        )
        .unwrap();
        assert_eq!(sys.nnz(), 4);
        assert_eq!(sys.get(0, 0), 3.0);
        assert_eq!(sys.get(0, 1), 3.0);
        assert_eq!(sys.get(1, 0), 4.0);
        assert_eq!(sys.get(1, 1), 5.0);
        let mut y = vec![0.0; 2];
        sys.matvec(&[1.0, 1.0], &mut y);
        assert_eq!(y, vec![6.0, 9.0]);
    }

    #[test]
    fn from_triplets_rejects_bad_entries() {
        assert!(SparseSystem::from_triplets(2, vec![(2, 0, 1.0)], vec![0.0, 0.0]).is_err());
        assert!(SparseSystem::from_triplets(2, vec![(0, 0, f64::NAN)], vec![0.0, 0.0]).is_err());
        assert!(SparseSystem::from_triplets(2, vec![], vec![0.0]).is_err());
    }

    #[test]
    fn cg_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [1usize, 2, 5, 20, 60] {
            let a = random_spd(n, &mut rng);
            let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sys = dense_to_system(&a, rhs.clone());
            let got = cg_solve(&sys, None, &CgConfig { tol_rel: 1e-12, max_iter: None }).unwrap();
            let exact = a
                .clone()
                .lu()
                .solve(&nalgebra::DVector::from_vec(rhs))
                .expect("SPD system solvable");
            for i in 0..n {
                assert!(
                    (got.x[i] - exact[i]).abs() <= 1e-8 * (1.0 + exact[i].abs()),
                    "n={n} i={i}: {} vs {}",
                    got.x[i],
                    exact[i]
                );
            }
        }
    }

    #[test]
    fn warm_start_with_solution_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(30, &mut rng);
        let rhs: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = dense_to_system(&a, rhs);
        let cold = cg_solve(&sys, None, &CgConfig::default()).unwrap();
        assert!(cold.iterations > 0);
        let warm = cg_solve(&sys, Some(&cold.x), &CgConfig::default()).unwrap();
        assert_eq!(warm.iterations, 0);
        assert_eq!(warm.x, cold.x);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let sys = SparseSystem::from_triplets(
            3,
            vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)],
            vec![0.0; 3],
        )
        .unwrap();
        let out = cg_solve(&sys, Some(&[5.0, 5.0, 5.0]), &CgConfig::default()).unwrap();
        assert_eq!(out.x, vec![0.0; 3]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn indefinite_matrix_reported() {
        // Symmetric with positive diagonal but indefinite.
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let sys = dense_to_system(&a, vec![1.0, -1.0]);
        match cg_solve(&sys, None, &CgConfig::default()) {
            Err(SolveError::Breakdown { .. }) => {}
            other => panic!("expected breakdown, got {other:?}"),
        }
        // Nonpositive diagonal caught before iterating.
        let b = nalgebra::DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let sys = dense_to_system(&b, vec![1.0, 1.0]);
        assert!(matches!(cg_solve(&sys, None, &CgConfig::default()), Err(SolveError::Shape(_))));
    }

    #[test]
    fn iteration_cap_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(40, &mut rng);
        let rhs: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = dense_to_system(&a, rhs);
        match cg_solve(&sys, None, &CgConfig { tol_rel: 1e-14, max_iter: Some(1) }) {
            Err(SolveError::NoConvergence { iterations: 1, .. }) => {}
            other => panic!("expected no convergence, got {other:?}"),
        }
    }
}
