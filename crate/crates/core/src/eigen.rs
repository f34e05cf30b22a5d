//! Eigenvalues of small dense nonsymmetric matrices.

use nalgebra::{linalg::Schur, Complex, SMatrix};

pub(crate) type Mat6 = SMatrix<f64, 6, 6>;

const SCHUR_EPS: f64 = f64::EPSILON;
const SCHUR_MAX_ITERS: usize = 10_000;

/// All six eigenvalues from the real Schur form. `None` if the QR iteration
/// does not converge.
pub(crate) fn eigenvalues6(m: &Mat6) -> Option<[Complex<f64>; 6]> {
    let schur = Schur::try_new(*m, SCHUR_EPS, SCHUR_MAX_ITERS)?;
    let ev = schur.complex_eigenvalues();
    let mut out = [Complex::new(0.0, 0.0); 6];
    for (o, e) in out.iter_mut().zip(ev.iter()) {
        *o = *e;
    }
    Some(out)
}

/// Accepts `|Im| ≤ tol·(1 + |Re|)` as real.
pub(crate) fn is_real(z: &Complex<f64>, tol: f64) -> bool {
    z.im.abs() <= tol * (1.0 + z.re.abs())
}
