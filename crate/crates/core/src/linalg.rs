//! Minimum-norm least squares with rank reporting.
//!
//! Small and moderately sized designs go through a thin SVD. Very wide or very
//! tall designs (thousands of columns, as in a high-order panel VAR) use an
//! eigendecomposition of the smaller Gram matrix, which yields the same
//! minimum-norm solution at a fraction of the cost.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Column count above which the Gram-matrix route is used.
const SVD_MAX_COLS: usize = 320;

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    /// `cols(x) × cols(y)` coefficient matrix.
    pub coefficients: Array2<f64>,
    pub rank: usize,
    pub n_cols: usize,
}

impl LstsqSolution {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.n_cols
    }
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves `min ‖xB − y‖` for every column of `y`, returning the minimum-norm
/// solution when `x` is rank deficient.
pub fn lstsq(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<LstsqSolution> {
    let (n, k) = x.dim();
    if n == 0 || k == 0 {
        return Err(Error::EmptySample("least-squares design"));
    }
    if y.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "design has {n} rows but response has {}",
            y.nrows()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "least-squares input contains non-finite values".into(),
        ));
    }
    let xm = to_dmatrix(x);
    let ym = to_dmatrix(y);
    let (coef, rank) = if k <= SVD_MAX_COLS && n <= 50_000 {
        solve_svd(xm, &ym)?
    } else {
        solve_gram(&xm, &ym)
    };
    Ok(LstsqSolution {
        coefficients: to_array(&coef),
        rank,
        n_cols: k,
    })
}

fn solve_svd(x: DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let (n, k) = x.shape();
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (n.max(k) as f64) * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coef = svd
        .solve(y, tol)
        .map_err(|e| Error::InvalidArgument(format!("svd solve failed: {e}")))?;
    Ok((coef, rank))
}

fn solve_gram(x: &DMatrix<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (n, k) = x.shape();
    let xt = x.transpose();
    // Work on the smaller Gram matrix.
    let tall = n >= k;
    let gram = if tall { &xt * x } else { x * &xt };
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = (n.max(k) as f64) * f64::EPSILON * lmax;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > tol { 1.0 / l } else { 0.0 })
        .collect();
    let rank = inv.iter().filter(|&&v| v != 0.0).count();
    let q = &eig.eigenvectors;
    let mut scaled_q = q.clone();
    for (j, &s) in inv.iter().enumerate() {
        scaled_q.column_mut(j).scale_mut(s);
    }
    let pinv_gram = &scaled_q * q.transpose();
    let coef = if tall {
        pinv_gram * (&xt * y)
    } else {
        xt * (pinv_gram * y)
    };
    (coef, rank)
}

/// Least squares for a single response vector.
pub fn lstsq_vec(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(Array1<f64>, usize)> {
    let y2 = y.to_owned().insert_axis(ndarray::Axis(1));
    let sol = lstsq(x, y2.view())?;
    Ok((sol.coefficients.column(0).to_owned(), sol.rank))
}

/// Prepends a column of ones.
pub fn with_intercept(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let mut out = Array2::ones((n, k + 1));
    out.slice_mut(ndarray::s![.., 1..]).assign(&x);
    out
}

/// OLS of `y` on `[1, x]`; returns `(intercept, slopes, rank)`.
pub fn ols_with_intercept(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, usize)> {
    let design = with_intercept(x);
    let (beta, rank) = lstsq_vec(design.view(), y)?;
    Ok((beta[0], beta.slice(ndarray::s![1..]).to_owned(), rank))
}

/// Centered R² of `y` against fitted values.
pub fn r_squared(y: ArrayView1<f64>, fitted: ArrayView1<f64>) -> f64 {
    let mean = y.mean().unwrap_or(0.0);
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst <= 0.0 {
        return 0.0;
    }
    let ssr: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    (1.0 - ssr / sst).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_fit_recovers_coefficients() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let y = array![1.0, 3.0, 5.0, 7.0];
        let (b, rank) = lstsq_vec(x.view(), y.view()).unwrap();
        assert_eq!(rank, 2);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_columns_report_rank() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![1.0, 2.0, 3.0];
        let (b, rank) = lstsq_vec(x.view(), y.view()).unwrap();
        assert_eq!(rank, 1);
        // minimum-norm: b ∝ (1, 2) with 1·b0 + 2·b1 = 1
        assert!((b[0] - 0.2).abs() < 1e-12 && (b[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gram_route_matches_svd_route() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // wide: 30 rows, 400 cols
        let x = Array2::from_shape_fn((30, 400), |_| rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>());
        let wide = lstsq(x.view(), y.view()).unwrap();
        assert_eq!(wide.rank, 30);
        // exact interpolation when underdetermined
        let fit = x.dot(&wide.coefficients);
        assert!((&fit - &y).iter().all(|e| e.abs() < 1e-9));
        let (svd_coef, _) = solve_svd(to_dmatrix(x.view()), &to_dmatrix(y.view())).unwrap();
        let diff = (&to_array(&svd_coef) - &wide.coefficients)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "min-norm solutions differ by {diff}");
    }

    #[test]
    fn r_squared_bounds() {
        let y = array![1.0, 2.0, 3.0];
        assert_eq!(r_squared(y.view(), y.view()), 1.0);
        let c = array![2.0, 2.0, 2.0];
        assert_eq!(r_squared(y.view(), c.view()), 0.0);
        assert_eq!(r_squared(c.view(), c.view()), 0.0);
    }
}
