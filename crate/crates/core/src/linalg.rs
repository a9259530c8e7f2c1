//! Small dense helpers shared by the solvers: Hermitian eigendecomposition,
//! Gram-Schmidt with image tracking, projections.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use rand::Rng;

use crate::Real;

pub type CVec<T> = DVector<Complex<T>>;
pub type CMat<T> = DMatrix<Complex<T>>;

#[inline]
pub fn c<T: Real>(re: T) -> Complex<T> {
    Complex::new(re, T::zero())
}

pub fn norm<T: Real>(v: &CVec<T>) -> T {
    v.iter()
        .fold(T::zero(), |acc, z| acc + z.norm_sqr())
        .sqrt()
}

pub fn column_norm<T: Real>(m: &CMat<T>, j: usize) -> T {
    m.column(j)
        .iter()
        .fold(T::zero(), |acc, z| acc + z.norm_sqr())
        .sqrt()
}

/// `⟨u, v⟩ = Σ conj(u_i) v_i`.
pub fn inner<T: Real>(u: &CVec<T>, v: &CVec<T>) -> Complex<T> {
    u.iter()
        .zip(v.iter())
        .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a.conj() * b)
}

/// `(X + Xᴴ)/2`.
pub fn hermitize<T: Real>(m: &CMat<T>) -> CMat<T> {
    let half = c(T::lit(0.5));
    (m + m.adjoint()) * half
}

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen<T: Real>(m: &CMat<T>) -> (Vec<T>, CMat<T>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(hermitize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// `v ← v - B (Bᴴ v)`.
pub fn project_out<T: Real>(v: &mut CVec<T>, basis: &CMat<T>) {
    if basis.ncols() == 0 {
        return;
    }
    let coeffs = basis.ad_mul(v);
    *v -= basis * coeffs;
}

/// Max-norm of `XᴴX - I`.
pub fn orthonormality_defect<T: Real>(x: &CMat<T>) -> T {
    let gram = x.ad_mul(x);
    let mut worst = T::zero();
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { T::one() } else { T::zero() };
            let d = (gram[(i, j)] - c(target)).norm_sqr().sqrt();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Relative norm below which Gram-Schmidt drops a column: `1e-10`, or a
/// thousand ulps when the scalar type cannot resolve that.
pub fn drop_tolerance<T: Real>() -> T {
    T::lit(1e-10).max(T::default_epsilon() * T::lit(1e3))
}

/// Orthonormalises the columns of `y` against the orthonormal columns of every
/// matrix in `against`, then among themselves, two passes of classical
/// Gram-Schmidt. `images`, when given, receives the same linear combinations
/// (used to keep `H·y` in sync without re-applying `H`); `against_images`
/// must then hold the images of `against`.
///
/// Columns whose norm collapses below `drop_tol` times their norm before the
/// pass are removed. Returns the retained columns (and images).
pub fn orthonormalize<T: Real>(
    y: &CMat<T>,
    mut images: Option<&CMat<T>>,
    against: &[&CMat<T>],
    against_images: &[&CMat<T>],
    drop_tol: T,
) -> (CMat<T>, Option<CMat<T>>) {
    let nrows = y.nrows();
    let mut cols: Vec<CVec<T>> = Vec::with_capacity(y.ncols());
    let mut img_cols: Vec<CVec<T>> = Vec::new();
    let track = images.is_some();
    if track {
        assert!(
            against.iter().zip(against_images).all(|(b, h)| b.ncols() == h.ncols()),
            "orthonormalize: images of every block are needed when tracking"
        );
    }

    for j in 0..y.ncols() {
        let mut v: CVec<T> = y.column(j).into_owned();
        let mut hv: Option<CVec<T>> = images.as_mut().map(|m| m.column(j).into_owned());
        let start = norm(&v);
        if start == T::zero() {
            continue;
        }
        let mut keep = true;
        for _pass in 0..2 {
            let before = norm(&v);
            for (k, b) in against.iter().enumerate() {
                if b.ncols() == 0 {
                    continue;
                }
                let coeffs = b.ad_mul(&v);
                v -= *b * &coeffs;
                if let Some(h) = hv.as_mut() {
                    *h -= against_images[k] * &coeffs;
                }
            }
            for (k, q) in cols.iter().enumerate() {
                let coef = inner(q, &v);
                v -= q * coef;
                if let Some(h) = hv.as_mut() {
                    *h -= &img_cols[k] * coef;
                }
            }
            let after = norm(&v);
            if after <= drop_tol * before || after == T::zero() {
                keep = false;
                break;
            }
            let inv = c(T::one() / after);
            v *= inv;
            if let Some(h) = hv.as_mut() {
                *h *= inv;
            }
        }
        if keep {
            cols.push(v);
            if let Some(h) = hv {
                img_cols.push(h);
            }
        }
    }

    let out = if cols.is_empty() {
        CMat::zeros(nrows, 0)
    } else {
        CMat::from_columns(&cols)
    };
    let out_img = if track {
        Some(if img_cols.is_empty() {
            CMat::zeros(nrows, 0)
        } else {
            CMat::from_columns(&img_cols)
        })
    } else {
        None
    };
    (out, out_img)
}

/// Horizontal concatenation.
pub fn hcat<T: Real>(blocks: &[&CMat<T>]) -> CMat<T> {
    let nrows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let ncols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(nrows, ncols);
    let mut offset = 0;
    for b in blocks {
        if b.ncols() > 0 {
            out.columns_mut(offset, b.ncols()).copy_from(*b);
        }
        offset += b.ncols();
    }
    out
}

/// Column-wise uniform random complex matrix with entries in `[-1, 1]²`.
pub fn random_matrix<T: Real, R: Rng>(rng: &mut R, nrows: usize, ncols: usize) -> CMat<T> {
    CMat::from_fn(nrows, ncols, |_, _| {
        let re: f64 = rng.random_range(-1.0..1.0);
        let im: f64 = rng.random_range(-1.0..1.0);
        Complex::new(T::lit(re), T::lit(im))
    })
}

/// Random Hermitian matrix with entries of unit scale.
pub fn random_hermitian<T: Real, R: Rng>(rng: &mut R, n: usize) -> CMat<T> {
    hermitize(&random_matrix(rng, n, n))
}

/// Solves the small dense system `a x = b`.
pub fn solve_small<T: Real>(a: &CMat<T>, b: &CVec<T>) -> Option<CVec<T>> {
    if a.nrows() == 0 {
        return Some(CVec::zeros(0));
    }
    a.clone().lu().solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigen_sorted_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: CMat<f64> = random_hermitian(&mut rng, 12);
        let (vals, vecs) = hermitian_eigen(&h);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert!(orthonormality_defect(&vecs) < 1e-13);
        let resid = &h * &vecs - &vecs * CMat::from_diagonal(&DVector::from_iterator(12, vals.iter().map(|&v| c(v))));
        assert!(resid.norm() < 1e-12);
    }

    #[test]
    fn gram_schmidt_drops_dependent_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: CMat<f64> = random_matrix(&mut rng, 10, 3);
        let mut y = hcat(&[&a, &a.columns(0, 1).into_owned()]);
        y[(0, 3)] += c(1e-14);
        let (q, _) = orthonormalize(&y, None, &[], &[], 1e-8);
        assert_eq!(q.ncols(), 3);
        assert!(orthonormality_defect(&q) < 1e-14);
    }

    #[test]
    fn images_follow_linear_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: CMat<f64> = random_hermitian(&mut rng, 8);
        let b0: CMat<f64> = random_matrix(&mut rng, 8, 2);
        let (b, _) = orthonormalize(&b0, None, &[], &[], 1e-8);
        let hb = &h * &b;
        let y: CMat<f64> = random_matrix(&mut rng, 8, 3);
        let hy = &h * &y;
        let (q, hq) = orthonormalize(&y, Some(&hy), &[&b], &[&hb], 1e-8);
        let hq = hq.unwrap();
        assert!((&h * &q - hq).norm() < 1e-12);
        assert!(b.ad_mul(&q).norm() < 1e-14);
    }
}
