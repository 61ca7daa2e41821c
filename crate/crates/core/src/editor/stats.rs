//! Second-moment statistics over a key population.
//!
//! `C = K Kᵀ + λ I` is held in eigendecomposition form: an orthonormal basis
//! of the key span with its eigenvalues, plus the ridge λ on the orthogonal
//! complement. Every matrix function of C (inverse, inverse square root, the
//! matrix itself) is then a cheap closed form, and the representation stays
//! exact even when the key count is far smaller than the key dimension
//! (Gram-matrix route) or far larger (direct route).

use nalgebra::{DMatrix, DVector};

use super::keys::KeySet;
use crate::error::{RectError, Result};
use crate::tensor::Tensor;

/// Ratio used for the editor's default ridge.
pub const EDIT_RIDGE_FACTOR: f64 = 1e-4;
/// Ratio used by the span-residual diagnostic, where the ridge should be as
/// small as numerics allow.
pub const SPAN_RIDGE_FACTOR: f64 = 1e-10;
/// Relative residual below which a key counts as in-span.
pub const IN_SPAN_TOLERANCE: f64 = 1e-6;

/// Default ridge: `factor * trace(K Kᵀ) / n`, floored away from zero.
pub fn default_ridge(keys: &KeySet) -> f64 {
    ridge_from_trace(keys.sum_squares(), keys.key_dim(), EDIT_RIDGE_FACTOR)
}

fn ridge_from_trace(trace: f64, n: usize, factor: f64) -> f64 {
    (factor * trace / n.max(1) as f64).max(1e-12)
}

/// Regularized second-moment statistics of a key population, in
/// eigendecomposition form.
#[derive(Debug, Clone)]
pub struct KeyStatistics {
    /// Orthonormal eigenvectors spanning the key subspace, `n x r`.
    evecs: DMatrix<f64>,
    /// Eigenvalues of C on that subspace (ridge already included), length r.
    evals: Vec<f64>,
    /// Ridge; also C's eigenvalue on the orthogonal complement.
    lambda: f64,
    n: usize,
}

/// Build `C = K Kᵀ + λ I` and its eigendecomposition. When the population has
/// fewer keys than dimensions the decomposition goes through the Gram matrix
/// `KᵀK`, which is exact and much cheaper.
pub fn key_stats(keys: &KeySet, lambda: f64) -> Result<KeyStatistics> {
    if lambda <= 0.0 {
        return Err(RectError::InvalidArgument(format!(
            "key_stats ridge must be positive, got {lambda}"
        )));
    }
    if keys.is_empty() {
        return Err(RectError::EmptyInput("key_stats needs at least one key".into()));
    }
    let n = keys.key_dim();
    let d = keys.len();

    if d >= n {
        // Direct route: eigendecompose the n x n moment matrix.
        let mut c = DMatrix::<f64>::zeros(n, n);
        for k in keys.columns() {
            for i in 0..n {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                for j in i..n {
                    c[(i, j)] += ki * k[j];
                }
            }
        }
        for i in 0..n {
            c[(i, i)] += lambda;
            for j in (i + 1)..n {
                c[(j, i)] = c[(i, j)];
            }
        }
        let eig = c
            .try_symmetric_eigen(f64::EPSILON, 50_000)
            .ok_or_else(|| eigen_failure(n, keys.sum_squares(), lambda))?;
        let evals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(lambda)).collect();
        Ok(KeyStatistics {
            evecs: eig.eigenvectors,
            evals,
            lambda,
            n,
        })
    } else {
        // Gram route: eigendecompose KᵀK (d x d) and lift the eigenvectors.
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            let ki = keys.column(i);
            for j in i..d {
                let kj = keys.column(j);
                let dot: f64 = ki.iter().zip(kj).map(|(a, b)| a * b).sum();
                gram[(i, j)] = dot;
                gram[(j, i)] = dot;
            }
        }
        let eig = gram
            .try_symmetric_eigen(f64::EPSILON, 50_000)
            .ok_or_else(|| eigen_failure(d, keys.sum_squares(), lambda))?;
        let s_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d)
            .filter(|&i| eig.eigenvalues[i] > s_max * 1e-12 && eig.eigenvalues[i] > 0.0)
            .collect();
        let r = keep.len();
        let mut evecs = DMatrix::<f64>::zeros(n, r);
        let mut evals = Vec::with_capacity(r);
        for (col, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i];
            let inv_sqrt = 1.0 / s.sqrt();
            // u = K q / sqrt(s): unit-norm eigenvector of K Kᵀ.
            let mut u = DVector::<f64>::zeros(n);
            for (j, k) in keys.columns().enumerate() {
                let q = eig.eigenvectors[(j, i)] * inv_sqrt;
                if q == 0.0 {
                    continue;
                }
                for row in 0..n {
                    u[row] += q * k[row];
                }
            }
            evecs.set_column(col, &u);
            evals.push(s + lambda);
        }
        Ok(KeyStatistics {
            evecs,
            evals,
            lambda,
            n,
        })
    }
}

fn eigen_failure(dim: usize, trace: f64, lambda: f64) -> RectError {
    RectError::Eigen(format!(
        "symmetric eigensolver did not converge on a {dim}x{dim} matrix \
         (trace {trace:.3e}, ridge {lambda:.3e}, condition bound {:.3e})",
        trace / lambda
    ))
}

impl KeyStatistics {
    pub fn key_dim(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Eigenvalues of C on the key span (the complement sits at λ).
    pub fn span_eigenvalues(&self) -> &[f64] {
        &self.evals
    }

    /// Full spectrum of C, descending: span eigenvalues plus the (n - r)-fold
    /// ridge eigenvalue.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut s = self.evals.clone();
        s.extend(std::iter::repeat(self.lambda).take(self.n - self.evals.len()));
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    /// Apply `g(C)` to a vector for a scalar function g, via the
    /// eigendecomposition: `g(C) x = U g(Λ) Uᵀ x + g(λ) (x - U Uᵀ x)`.
    fn apply_fn(&self, g: impl Fn(f64) -> f64, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let xv = DVector::from_column_slice(x);
        let t = self.evecs.tr_mul(&xv);
        let scaled = DVector::from_iterator(
            self.evals.len(),
            t.iter().zip(&self.evals).map(|(ti, ev)| ti * g(*ev)),
        );
        let mut y = &self.evecs * scaled;
        if self.evals.len() < self.n {
            let proj = &self.evecs * &t;
            let g_l = g(self.lambda);
            for i in 0..self.n {
                y[i] += g_l * (xv[i] - proj[i]);
            }
        }
        y.as_slice().to_vec()
    }

    pub fn c_apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_fn(|v| v, x)
    }

    pub fn c_inv_apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_fn(|v| 1.0 / v, x)
    }

    /// ZCA whitening: `Z k` with `Z = C^{-1/2} = U Σ^{-1/2} Uᵀ`.
    pub fn whiten(&self, k: &Tensor) -> Result<Tensor> {
        if k.numel() != self.n {
            return Err(RectError::ShapeMismatch {
                context: "whiten".into(),
                expected: vec![self.n],
                actual: k.shape().to_vec(),
            });
        }
        Tensor::new(
            k.shape().to_vec(),
            self.apply_fn(|v| 1.0 / v.sqrt(), k.data()),
        )
    }

    /// The rank-one edit direction `d = C^{-1} k*`.
    pub fn edit_direction(&self, k_star: &[f64]) -> Result<Vec<f64>> {
        if k_star.len() != self.n {
            return Err(RectError::ShapeMismatch {
                context: "edit_direction".into(),
                expected: vec![self.n],
                actual: vec![k_star.len()],
            });
        }
        Ok(self.c_inv_apply(k_star))
    }

    /// Materialize C as a dense row-major matrix (test/diagnostic use).
    pub fn materialize_c(&self) -> DMatrix<f64> {
        self.materialize_fn(|v| v)
    }

    /// Materialize Z = C^{-1/2} as a dense matrix (test/diagnostic use).
    pub fn materialize_z(&self) -> DMatrix<f64> {
        self.materialize_fn(|v| 1.0 / v.sqrt())
    }

    fn materialize_fn(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let r = self.evals.len();
        let mut scaled = self.evecs.clone();
        for (c, ev) in (0..r).zip(&self.evals) {
            let gv = g(*ev);
            for row in 0..self.n {
                scaled[(row, c)] *= gv;
            }
        }
        let mut m = &scaled * self.evecs.transpose();
        if r < self.n {
            let g_l = g(self.lambda);
            let proj = &self.evecs * self.evecs.transpose();
            for i in 0..self.n {
                for j in 0..self.n {
                    let compl = if i == j { 1.0 } else { 0.0 } - proj[(i, j)];
                    m[(i, j)] += g_l * compl;
                }
            }
        }
        m
    }
}

/// Out-of-span residual of a candidate key against a key population:
/// `r = k* - K (KᵀK + λI)^{-1} Kᵀ k*`, which by the push-through identity
/// equals `λ (K Kᵀ + λI)^{-1} k*` and is computable for any key count.
/// The flag reports `‖r‖ / ‖k*‖ <= 1e-6`.
pub fn span_residual(keys: &KeySet, k_star: &Tensor, lambda: f64) -> Result<(Tensor, bool)> {
    let stats = key_stats(keys, lambda)?;
    if k_star.numel() != stats.key_dim() {
        return Err(RectError::ShapeMismatch {
            context: "span_residual".into(),
            expected: vec![stats.key_dim()],
            actual: k_star.shape().to_vec(),
        });
    }
    let mut r = stats.c_inv_apply(k_star.data());
    for v in &mut r {
        *v *= lambda;
    }
    let r = Tensor::new(k_star.shape().to_vec(), r)?;
    let k_norm = k_star.norm();
    let in_span = if k_norm == 0.0 {
        true
    } else {
        r.norm() / k_norm <= IN_SPAN_TOLERANCE
    };
    Ok((r, in_span))
}

/// `span_residual` with the diagnostic default ridge
/// (`1e-10 * trace(KKᵀ)/n`).
pub fn span_residual_default(keys: &KeySet, k_star: &Tensor) -> Result<(Tensor, bool)> {
    let lambda = ridge_from_trace(keys.sum_squares(), keys.key_dim(), SPAN_RIDGE_FACTOR);
    span_residual(keys, k_star, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn keyset_from_columns(cols: &[Vec<f64>]) -> KeySet {
        let mut ks = KeySet::new(cols[0].len(), 0, "test".into());
        for c in cols {
            ks.push_column(c);
        }
        ks
    }

    fn random_keyset(n: usize, d: usize, seed: u64) -> KeySet {
        let mut rng = rng_for(seed, "stats-test");
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        keyset_from_columns(&cols)
    }

    #[test]
    fn identity_keys_give_identity_stats() {
        // K = I (orthonormal keys), tiny ridge: C ~ I, Z ~ I.
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let ks = keyset_from_columns(&cols);
        let stats = key_stats(&ks, 1e-12).unwrap();
        let c = stats.materialize_c();
        let z = stats.materialize_z();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - expect).abs() < 1e-9);
                assert!((z[(i, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn diagonal_case_matches_closed_form() {
        // C = diag(4, 1) -> Z = diag(0.5, 1); whiten([2, 3]) = [1, 3].
        // Build keys giving KKᵀ = diag(4 - λ', 1 - λ')... simpler: columns
        // [2, 0] and [0, 1] give KKᵀ = diag(4, 1); use a negligible ridge.
        let ks = keyset_from_columns(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let stats = key_stats(&ks, 1e-13).unwrap();
        let z = stats.materialize_z();
        assert!((z[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((z[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(z[(0, 1)].abs() < 1e-9);
        let zk = stats
            .whiten(&Tensor::from_vec(vec![2.0, 3.0]))
            .unwrap();
        assert!((zk.data()[0] - 1.0).abs() < 1e-6);
        assert!((zk.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zcz_is_identity_for_random_keys() {
        for (n, d, seed) in [(16usize, 40usize, 1u64), (32, 8, 2), (48, 48, 3)] {
            let ks = random_keyset(n, d, seed);
            let stats = key_stats(&ks, 1e-4).unwrap();
            let c = stats.materialize_c();
            let z = stats.materialize_z();
            let zcz = &z * &c * &z;
            let mut err = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    err += (zcz[(i, j)] - expect).powi(2);
                }
            }
            let rel = err.sqrt() / (n as f64).sqrt();
            assert!(rel <= 1e-6, "n={n} d={d}: ZCZ error {rel:.3e}");
        }
    }

    #[test]
    fn gram_route_matches_direct_route() {
        // Same population through both routes (d < n vs padded d >= n).
        let n = 12;
        let ks = random_keyset(n, 5, 7);
        let lambda = 1e-3;
        let gram_stats = key_stats(&ks, lambda).unwrap();

        let mut cols: Vec<Vec<f64>> = ks.columns().map(|c| c.to_vec()).collect();
        while cols.len() < n {
            cols.push(vec![0.0; n]);
        }
        let direct_stats = key_stats(&keyset_from_columns(&cols), lambda).unwrap();

        let cg = gram_stats.materialize_c();
        let cd = direct_stats.materialize_c();
        let zg = gram_stats.materialize_z();
        let zd = direct_stats.materialize_z();
        assert!((&cg - &cd).norm() < 1e-9 * cd.norm());
        assert!((&zg - &zd).norm() < 1e-8 * zd.norm());
    }

    #[test]
    fn rejects_nonpositive_ridge() {
        let ks = random_keyset(4, 4, 1);
        assert!(key_stats(&ks, 0.0).is_err());
        assert!(key_stats(&ks, -1.0).is_err());
    }

    #[test]
    fn span_residual_basis_cases() {
        // K = [e1]: k* = e1 is in span; k* = e2 has residual e2.
        let ks = keyset_from_columns(&[vec![1.0, 0.0]]);
        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let e2 = Tensor::from_vec(vec![0.0, 1.0]);

        let (r1, in1) = span_residual_default(&ks, &e1).unwrap();
        assert!(in1, "e1 should be in span, residual {:?}", r1.data());
        assert!(r1.norm() < 1e-6);

        let (r2, in2) = span_residual_default(&ks, &e2).unwrap();
        assert!(!in2);
        assert!((r2.data()[1] - 1.0).abs() < 1e-9);
        assert!(r2.data()[0].abs() < 1e-12);
    }

    #[test]
    fn span_residual_matches_least_squares_oracle() {
        // Oracle: r = k* - K (KᵀK + λI)^{-1} Kᵀ k* solved literally.
        let n = 10;
        let d = 4;
        let ks = random_keyset(n, d, 21);
        let mut rng = rng_for(22, "kstar");
        let k_star = Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let lambda = 1e-8;

        let kmat = DMatrix::<f64>::from_fn(n, d, |i, j| ks.column(j)[i]);
        let gram = kmat.tr_mul(&kmat) + DMatrix::identity(d, d) * lambda;
        let rhs = kmat.tr_mul(&DVector::from_column_slice(k_star.data()));
        let beta = gram.lu().solve(&rhs).unwrap();
        let proj = &kmat * beta;
        let oracle: Vec<f64> = k_star
            .data()
            .iter()
            .zip(proj.iter())
            .map(|(a, b)| a - b)
            .collect();

        let (r, _) = span_residual(&ks, &k_star, lambda).unwrap();
        for (got, want) in r.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn whitened_population_has_identity_covariance() {
        // d >> n: covariance of whitened keys approaches I.
        let n = 8;
        let d = 4000;
        let ks = random_keyset(n, d, 9);
        // Use a tiny ridge so whitening is close to exact.
        let stats = key_stats(&ks, 1e-9 * ks.sum_squares() / n as f64).unwrap();
        let mut cov = vec![0.0; n * n];
        for k in ks.columns() {
            let w = stats
                .whiten(&Tensor::from_vec(k.to_vec()))
                .unwrap();
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += w.data()[i] * w.data()[j];
                }
            }
        }
        let mut err = 0.0;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                err += (cov[i * n + j] - expect).powi(2);
            }
        }
        let rel = err.sqrt() / (n as f64).sqrt();
        assert!(rel < 0.05, "whitened covariance deviates: {rel:.3}");
    }

    #[test]
    #[ignore = "timing probe, run with --ignored --nocapture"]
    fn eigen_timing_probe() {
        for n in [144usize, 256, 1024, 2048] {
            let ks = random_keyset(n, n + 8, 99);
            let t = std::time::Instant::now();
            let stats = key_stats(&ks, 1e-4).unwrap();
            println!("direct n={n}: {:?} (r={})", t.elapsed(), stats.span_eigenvalues().len());
        }
        for (n, d) in [(1024usize, 128usize), (2048, 128)] {
            let ks = random_keyset(n, d, 100);
            let t = std::time::Instant::now();
            let stats = key_stats(&ks, 1e-4).unwrap();
            println!("gram n={n} d={d}: {:?} (r={})", t.elapsed(), stats.span_eigenvalues().len());
        }
    }
}
