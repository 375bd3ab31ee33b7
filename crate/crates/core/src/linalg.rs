//! Small complex-matrix helpers shared by the rate engine and the estimator.

use nalgebra::DMatrix;
pub use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type CMat = DMatrix<Complex64>;

pub fn zeros(rows: usize, cols: usize) -> CMat {
    CMat::zeros(rows, cols)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Squared Frobenius norm.
pub fn frob_sq(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn frob(a: &CMat) -> f64 {
    frob_sq(a).sqrt()
}

/// `‖A − Aᴴ‖_F`.
pub fn hermitian_defect(a: &CMat) -> f64 {
    if a.nrows() != a.ncols() {
        return f64::INFINITY;
    }
    frob(&(a - a.adjoint()))
}

/// Replaces `a` with `(a + aᴴ)/2`.
pub fn hermitianize(a: &mut CMat) {
    let h = (&*a + a.adjoint()) * Complex64::new(0.5, 0.0);
    *a = h;
}

/// Matrix with i.i.d. circularly-symmetric unit-variance complex Gaussian entries.
pub fn random_gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * s, im * s)
    })
}

/// log2 det of a Hermitian positive-definite matrix via its Cholesky factor.
///
/// Falls back to clamped eigenvalues if round-off breaks definiteness.
pub fn log2_det_hpd(a: &CMat) -> f64 {
    let mut m = a.clone();
    hermitianize(&mut m);
    match m.clone().cholesky() {
        Some(ch) => {
            let l = ch.l_dirty();
            let ln: f64 = (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum();
            2.0 * ln / std::f64::consts::LN_2
        }
        None => {
            let eig = m.symmetric_eigen();
            eig.eigenvalues.iter().map(|&v| v.max(f64::MIN_POSITIVE).log2()).sum()
        }
    }
}
