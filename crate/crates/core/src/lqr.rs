//! Continuous-time LQR synthesis.
//!
//! Sign convention: `u = -K x` with `K = R^{-1} B^T P`, where `P` solves
//! `A^T P + P A - P B R^{-1} B^T P + Q = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Continuous-time plant `dx/dt = A x + B u` with quadratic cost weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<T: Scalar> {
    /// Feedback gain, `action_dim x state_dim`.
    pub k: DMatrix<T>,
    /// Optimal cost matrix, symmetric PSD.
    pub p: DMatrix<T>,
}

impl<T: Scalar> LinearSystem<T> {
    /// Checks shapes, symmetry of `Q`/`R` and positive definiteness of `R`.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, q: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(dim_err("A", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(dim_err("B rows", n, b.nrows()));
        }
        let m = b.ncols();
        if q.shape() != (n, n) {
            return Err(dim_err("Q", format!("{n}x{n}"), format!("{:?}", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(dim_err("R", format!("{m}x{m}"), format!("{:?}", r.shape())));
        }
        let tol = lit::<T>(1e-12) * (T::one() + q.norm() + r.norm());
        if (&q - q.transpose()).norm() > tol || (&r - r.transpose()).norm() > tol {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        if q.clone().symmetric_eigenvalues().min() < -tol {
            return Err(Error::Config("Q must be positive semidefinite".into()));
        }
        Ok(Self { a, b, q, r })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn r_inv(&self) -> DMatrix<T> {
        self.r
            .clone()
            .cholesky()
            .expect("R validated positive definite")
            .inverse()
    }

    /// `A^T P + P A - P B R^{-1} B^T P + Q`.
    pub fn care_residual(&self, p: &DMatrix<T>) -> DMatrix<T> {
        let s = &self.b * self.r_inv() * self.b.transpose();
        self.a.transpose() * p + p * &self.a - p * s * p + &self.q
    }

    /// Gain `R^{-1} B^T P`.
    pub fn gain(&self, p: &DMatrix<T>) -> DMatrix<T> {
        self.r_inv() * self.b.transpose() * p
    }
}

fn residual_tol<T: Scalar>(p: &DMatrix<T>) -> T {
    let floor = lit::<T>(1e-8).max(T::default_epsilon() * lit(1e4));
    floor * (T::one() + p.norm())
}

fn symmetrize<T: Scalar>(p: &DMatrix<T>) -> DMatrix<T> {
    (p + p.transpose()) * lit::<T>(0.5)
}

/// Integrates `dP/dt = A^T P + P A - P S P + Q` from `P = 0` with explicit
/// Euler steps until the derivative norm falls below `1e-10`.
fn riccati_flow<T: Scalar>(sys: &LinearSystem<T>) -> Result<DMatrix<T>> {
    const MAX_STEPS: usize = 1_000_000;
    let n = sys.state_dim();
    let s = &sys.b * sys.r_inv() * sys.b.transpose();
    let stop = lit::<T>(1e-10).max(T::default_epsilon() * lit(1e3));
    let mut h = lit::<T>(1e-3);
    let blowup = lit::<T>(1e12) * (T::one() + sys.q.norm());
    'restart: for _ in 0..5 {
        let mut p = DMatrix::<T>::zeros(n, n);
        for _ in 0..MAX_STEPS {
            let dp = sys.a.transpose() * &p + &p * &sys.a - &p * &s * &p + &sys.q;
            let norm = dp.norm();
            if !norm.is_finite() || p.norm() > blowup {
                h *= lit(0.5);
                continue 'restart;
            }
            if norm < stop {
                return Ok(symmetrize(&p));
            }
            p += dp * h;
        }
        return Ok(symmetrize(&p));
    }
    Err(Error::NonConvergent("Riccati flow diverged for every step size".into()))
}

/// Solves `Ac^T X + X Ac + C = 0` by Kronecker vectorization.
pub(crate) fn solve_lyapunov<T: Scalar>(ac: &DMatrix<T>, c: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = ac.nrows();
    let eye = DMatrix::<T>::identity(n, n);
    let act = ac.transpose();
    let op = eye.kronecker(&act) + act.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, c.iter().map(|&v| -v));
    let x = op.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Solves the continuous algebraic Riccati equation.
///
/// A Riccati-flow warm start provides a stabilizing gain; Newton-Kleinman
/// iterations then polish `P` to the residual tolerance.
pub fn solve_care<T: Scalar>(sys: &LinearSystem<T>) -> Result<LqrSolution<T>> {
    let mut p = riccati_flow(sys)?;
    let mut k = sys.gain(&p);
    let zero_offset = DVector::zeros(sys.action_dim());
    for _ in 0..50 {
        if sys.care_residual(&p).norm() <= residual_tol(&p) {
            break;
        }
        if closed_loop_max_real_eig(sys, &k, &zero_offset)? >= T::zero() {
            return Err(Error::NonConvergent(
                "warm-start gain is not stabilizing; system may be unstabilizable".into(),
            ));
        }
        let ac = &sys.a - &sys.b * &k;
        let c = &sys.q + k.transpose() * &sys.r * &k;
        p = symmetrize(
            &solve_lyapunov(&ac, &c)
                .ok_or_else(|| Error::NonConvergent("singular Lyapunov operator".into()))?,
        );
        k = sys.gain(&p);
    }
    let residual = sys.care_residual(&p).norm();
    if !(residual <= residual_tol(&p)) {
        return Err(Error::NonConvergent(format!(
            "CARE residual {residual} above tolerance"
        )));
    }
    if closed_loop_max_real_eig(sys, &k, &zero_offset)? >= T::zero() {
        return Err(Error::NonConvergent("closed loop not Hurwitz".into()));
    }
    Ok(LqrSolution { k, p })
}

/// Largest real part among the eigenvalues of `A - B K_eff`.
///
/// `u_offset` is only shape-checked: a constant control offset moves the
/// equilibrium, not the spectrum.
pub fn closed_loop_max_real_eig<T: Scalar>(
    sys: &LinearSystem<T>,
    k_eff: &DMatrix<T>,
    u_offset: &DVector<T>,
) -> Result<T> {
    let (n, m) = (sys.state_dim(), sys.action_dim());
    if k_eff.shape() != (m, n) {
        return Err(dim_err("K_eff", format!("{m}x{n}"), format!("{:?}", k_eff.shape())));
    }
    if u_offset.len() != m {
        return Err(dim_err("u_offset", m, u_offset.len()));
    }
    let ac = &sys.a - &sys.b * k_eff;
    let eigs = ac.complex_eigenvalues();
    Ok(eigs
        .iter()
        .map(|z| z.re)
        .reduce(|acc, re| acc.max(re))
        .expect("state dimension is positive"))
}

/// `x0^T P x0`.
pub fn lqr_optimal_cost<T: Scalar>(p: &DMatrix<T>, x0: &DVector<T>) -> T {
    (x0.transpose() * p * x0)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn double_integrator() -> LinearSystem<f64> {
        LinearSystem::new(
            dmatrix![0.0, 1.0; 0.0, 0.0],
            dmatrix![0.0; 1.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_care_closed_form() {
        let sys = LinearSystem::<f64>::new(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let sol = solve_care(&sys).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((sol.k[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn double_integrator_eigs() {
        let sys = double_integrator();
        let v = closed_loop_max_real_eig(&sys, &dmatrix![1.0, 2.0], &dvector![0.0]).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn shape_errors() {
        let sys = double_integrator();
        assert!(matches!(
            closed_loop_max_real_eig(&sys, &dmatrix![1.0], &dvector![0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(LinearSystem::new(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0]).is_err());
        assert!(LinearSystem::new(dmatrix![0.0], dmatrix![1.0], dmatrix![-1.0], dmatrix![1.0]).is_err());
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let sys = LinearSystem::new(
            dmatrix![1.0, 0.0; 0.0, -1.0],
            dmatrix![0.0; 1.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap();
        assert!(matches!(solve_care(&sys), Err(Error::NonConvergent(_))));
    }

    #[test]
    fn optimal_cost_quadratic_form() {
        assert_eq!(lqr_optimal_cost(&dmatrix![1.0], &dvector![2.0]), 4.0);
        let sol = solve_care(&double_integrator()).unwrap();
        assert_eq!(lqr_optimal_cost(&sol.p, &dvector![0.0, 0.0]), 0.0);
    }

    #[test]
    fn solves_in_single_precision() {
        let sys = LinearSystem::<f32>::new(
            dmatrix![0.0, 1.0; 0.0, 0.0],
            dmatrix![0.0; 1.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0],
        )
        .unwrap();
        let sol = solve_care(&sys).unwrap();
        // P = [[sqrt 3, 1], [1, sqrt 3]] for the double integrator with Q = I, R = 1.
        assert!((sol.p[(0, 0)] - 3f32.sqrt()).abs() < 1e-4);
        assert!((sol.p[(0, 1)] - 1.0).abs() < 1e-4);
    }
}
