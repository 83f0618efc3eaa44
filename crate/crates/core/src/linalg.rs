//! Eigenvalues of dense nonsymmetric matrices.
//!
//! With the `lapack` feature the work goes to `dgeev` (balancing, Hessenberg
//! reduction, Francis double-shift QR); otherwise nalgebra's real Schur
//! iteration is used. Both are exposed so they can be checked against each
//! other.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

/// All eigenvalues of a square matrix, in no particular order.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    #[cfg(feature = "lapack")]
    {
        eigenvalues_lapack(m)
    }
    #[cfg(not(feature = "lapack"))]
    {
        eigenvalues_schur(m)
    }
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Pure-Rust route through nalgebra's real Schur form.
pub fn eigenvalues_schur(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    check_square(m)?;
    let schur = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 1000 * m.nrows().max(1))
        .ok_or(Error::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

#[cfg(feature = "lapack")]
pub fn eigenvalues_lapack(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    // link the system OpenBLAS/LAPACK
    use openblas_src as _;

    check_square(m)?;
    let n = m.nrows();
    let ld = n as i32;
    // nalgebra storage is column-major, which is what LAPACK expects
    let mut a = m.as_slice().to_vec();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut vl = [0.0];
    let mut vr = [0.0];
    let mut info = 0;

    let mut query = [0.0];
    unsafe {
        lapack::dgeev(
            b'N', b'N', ld, &mut a, ld, &mut wr, &mut wi, &mut vl, 1, &mut vr, 1, &mut query, -1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigenFailure);
    }
    let lwork = (query[0] as usize).max(3 * n);
    let mut work = vec![0.0; lwork];
    unsafe {
        lapack::dgeev(
            b'N',
            b'N',
            ld,
            &mut a,
            ld,
            &mut wr,
            &mut wi,
            &mut vl,
            1,
            &mut vr,
            1,
            &mut work,
            lwork as i32,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigenFailure);
    }
    Ok(wr
        .into_iter()
        .zip(wi)
        .map(|(re, im)| Complex::new(re, im))
        .collect())
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenFailure);
    }
    Ok(())
}
