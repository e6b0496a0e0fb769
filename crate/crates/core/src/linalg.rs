//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DMatrixViewMut, Dyn};

use crate::error::{Error, Result};

/// Diagonal jitter levels tried, in order, when a factorization fails.
pub const JITTER_LEVELS: [f64; 7] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

const BLOCK: usize = 64;

/// Unblocked lower Cholesky of a small diagonal block, in place.
fn factor_diagonal_block(a: &mut DMatrixViewMut<'_, f64>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= a[(j, p)] * a[(j, p)];
        }
        if !(d > 0.0) {
            return false;
        }
        let ljj = d.sqrt();
        a[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for p in 0..j {
                v -= a[(i, p)] * a[(j, p)];
            }
            a[(i, j)] = v / ljj;
        }
    }
    true
}

/// Right-looking blocked Cholesky. Only the lower triangle of `a` is read;
/// on success it holds `L` and the strict upper triangle is zeroed.
fn cholesky_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        if !factor_diagonal_block(&mut a.view_mut((k, k), (kb, kb))) {
            return false;
        }
        let rest = n - k - kb;
        if rest > 0 {
            let l11_inv_t = lower_triangular_inverse(&a.view((k, k), (kb, kb)).lower_triangle()).transpose();
            let panel = a.view((k + kb, k), (rest, kb)) * l11_inv_t;
            a.view_mut((k + kb, k), (rest, kb)).copy_from(&panel);
            let panel_t = panel.transpose();
            let mut j = 0;
            while j < rest {
                let jb = BLOCK.min(rest - j);
                let (lhs, rhs) = (panel.rows(j, rest - j), panel_t.columns(j, jb));
                a.view_mut((k + kb + j, k + kb + j), (rest - j, jb)).gemm(-1.0, &lhs, &rhs, 1.0);
                j += jb;
            }
        }
        k += kb;
    }
    a.fill_upper_triangle(0.0, 1);
    true
}

/// Cholesky factorization, adding escalating diagonal jitter on failure.
/// Returns the factor and the jitter that was needed (0 if none).
pub fn cholesky_with_jitter(matrix: DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if !matrix.is_square() {
        return Err(Error::Structural(format!("{context}: matrix is not square")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let mut factor = matrix.clone();
    if cholesky_in_place(&mut factor) {
        return Ok((Cholesky::pack_dirty(factor), 0.0));
    }
    for &jitter in &JITTER_LEVELS {
        factor.copy_from(&matrix);
        for i in 0..factor.nrows() {
            factor[(i, i)] += jitter;
        }
        if cholesky_in_place(&mut factor) {
            return Ok((Cholesky::pack_dirty(factor), jitter));
        }
    }
    Err(Error::Conditioning {
        context: context.to_string(),
        jitter: JITTER_LEVELS.to_vec(),
    })
}

/// Inverse of a lower-triangular matrix. Recursive 2x2 blocking pushes most
/// of the work into matrix products.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 48 {
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            // forward substitution for column j, column-oriented
            let mut x = inv.column_mut(j);
            x[j] = 1.0;
            for k in j..n {
                let xk = x[k] / l[(k, k)];
                x[k] = xk;
                let col = l.column(k);
                for i in k + 1..n {
                    x[i] -= col[i] * xk;
                }
            }
        }
        return inv;
    }
    let h = n / 2;
    let a_inv = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let c_inv = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h));
    let lower_left = -(&c_inv * (b * &a_inv));
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    inv.view_mut((h, 0), (n - h, h)).copy_from(&lower_left);
    inv
}

/// `A⁻¹` from the Cholesky factor of `A`, as `L⁻ᵀL⁻¹` computed one block
/// row of the lower triangle at a time.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l_inv = lower_triangular_inverse(&chol.l());
    let n = l_inv.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let ib = BLOCK.min(n - i);
        // rows of L⁻¹ above i vanish in block column i
        let lhs = l_inv.view((i, i), (n - i, ib)).transpose();
        let rhs = l_inv.view((i, 0), (n - i, i + ib));
        inv.view_mut((i, 0), (ib, i + ib)).gemm(1.0, &lhs, &rhs, 0.0);
        i += ib;
    }
    inv.fill_upper_triangle_with_lower_triangle();
    inv
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // Eigenvalues of the smaller Gram matrix are the squared singular values.
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    gram.symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v))
        .sqrt()
}
