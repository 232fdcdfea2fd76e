//! Quadratic-region fit of a critic's last layer.
//!
//! The critic is `ReLU.. -> Swish -> linear`. Inside the ReLU layers' linear
//! region the Swish pre-activation is affine, `z = W_hat x_hat + b_hat` with
//! `x_hat = [x; u]`, and replacing `z sigmoid(z)` by `z^2/4 + z/2` turns the
//! critic into a quadratic form in `x_hat`:
//!
//! ```text
//! Q(x_hat) = x_hat^T G x_hat + l^T x_hat + c,
//! G = 1/4 W_hat^T diag(w) W_hat,
//! l = 1/2 W_hat^T diag(w) (b_hat + 1),
//! c = sum_i w_i (b_hat_i^2 / 4 + b_hat_i / 2) + b_o.
//! ```
//!
//! The fit chooses `(w, b_o)` close to the current layer such that along
//! `u = -K x` the critic equals `-x^T P x + rho_exit`, the linear term
//! vanishes, and `G` is negative semidefinite.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::net::{effective_linearization_prefix, sigmoid, Activation, EffectiveLinearization, NetworkParams};
use crate::scalar::{lit, to_f64, Scalar};

/// Maclaurin approximation `x^2/4 + x/2` of `x sigmoid(x)`.
pub fn swish_quadratic<T: Scalar>(x: T) -> T {
    x * x / lit(4.0) + x / lit(2.0)
}

/// `|x sigmoid(x) - (x^2/4 + x/2)|`.
pub fn swish_quadratic_error<T: Scalar>(x: T) -> T {
    (x * sigmoid(x) - swish_quadratic(x)).abs()
}

/// Critic output under the Maclaurin model: `w_o . q(W_hat x_hat + b_hat) + b_o`.
pub fn quadratic_forward<T: Scalar>(
    w_hat: &DMatrix<T>,
    b_hat: &DVector<T>,
    w_o: &DVector<T>,
    b_o: T,
    x_hat: &DVector<T>,
) -> Result<T> {
    if x_hat.len() != w_hat.ncols() {
        return Err(dim_err("x_hat", w_hat.ncols(), x_hat.len()));
    }
    if b_hat.len() != w_hat.nrows() {
        return Err(dim_err("b_hat", w_hat.nrows(), b_hat.len()));
    }
    if w_o.len() != w_hat.nrows() {
        return Err(dim_err("W_o", w_hat.nrows(), w_o.len()));
    }
    let z = w_hat * x_hat + b_hat;
    Ok(z.iter().zip(w_o.iter()).fold(b_o, |acc, (&zi, &wi)| acc + wi * swish_quadratic(zi)))
}

/// `[x; u]^T [[A_o, B_o], [C_o, D_o]] [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm<T: Scalar> {
    pub a_o: DMatrix<T>,
    pub b_o: DMatrix<T>,
    pub c_o: DMatrix<T>,
    pub d_o: DMatrix<T>,
}

impl<T: Scalar> QuadraticForm<T> {
    pub fn from_matrix(g: &DMatrix<T>, state_dim: usize) -> Self {
        let n = g.nrows();
        let a = n - state_dim;
        Self {
            a_o: g.view((0, 0), (state_dim, state_dim)).into_owned(),
            b_o: g.view((0, state_dim), (state_dim, a)).into_owned(),
            c_o: g.view((state_dim, 0), (a, state_dim)).into_owned(),
            d_o: g.view((state_dim, state_dim), (a, a)).into_owned(),
        }
    }

    pub fn assemble(&self) -> DMatrix<T> {
        let (s, a) = (self.a_o.nrows(), self.d_o.nrows());
        let mut g = DMatrix::zeros(s + a, s + a);
        g.view_mut((0, 0), (s, s)).copy_from(&self.a_o);
        g.view_mut((0, s), (s, a)).copy_from(&self.b_o);
        g.view_mut((s, 0), (a, s)).copy_from(&self.c_o);
        g.view_mut((s, s), (a, a)).copy_from(&self.d_o);
        g
    }

    pub fn value(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        let xu = DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
        (xu.transpose() * self.assemble() * xu)[(0, 0)]
    }

    /// `A_o - K^T C_o - B_o K + K^T D_o K`: the form restricted to `u = -K x`.
    pub fn along_gain(&self, k: &DMatrix<T>) -> DMatrix<T> {
        &self.a_o - k.transpose() * &self.c_o - &self.b_o * k + k.transpose() * &self.d_o * k
    }

    pub fn max_eigenvalue(&self) -> T {
        max_eig(&self.assemble())
    }
}

fn max_eig<T: Scalar>(g: &DMatrix<T>) -> T {
    let sym = (g + g.transpose()) * lit::<T>(0.5);
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .reduce(|a, b| a.max(b))
        .unwrap_or_else(T::zero)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticFitProblem<T: Scalar> {
    /// Effective Swish pre-activation weight over `[x; u]`.
    pub w_hat: DMatrix<T>,
    pub b_hat: DVector<T>,
    /// Current last-layer weights (one per Swish unit) and bias.
    pub w_d: DVector<T>,
    pub b_d: T,
    pub p: DMatrix<T>,
    pub k: DMatrix<T>,
    pub rho_exit: T,
    pub nu: T,
}

impl<T: Scalar> CriticFitProblem<T> {
    /// Reads `W_hat`, `b_hat` and the current last layer from a
    /// `ReLU.. -> Swish -> linear` critic with a single output.
    pub fn from_critic(
        critic: &NetworkParams<T>,
        m: T,
        p: DMatrix<T>,
        k: DMatrix<T>,
        rho_exit: T,
        nu: T,
    ) -> Result<(Self, EffectiveLinearization<T>)> {
        let n = critic.depth();
        if n < 2 || critic.layers[n - 2].activation != Activation::Swish {
            return Err(Error::Config("critic needs a Swish penultimate layer".into()));
        }
        if critic.output_dim() != 1 || critic.last_layer().activation != Activation::Identity {
            return Err(Error::Config("critic needs a single linear output".into()));
        }
        let lin = effective_linearization_prefix(critic, n - 1, m)?;
        let last = critic.last_layer();
        let scale = critic.output_scale[0];
        let prob = Self {
            w_hat: lin.w_eff().clone(),
            b_hat: lin.b_eff().clone(),
            w_d: last.weight.row(0).transpose() * scale,
            b_d: last.bias[0] * scale,
            p,
            k,
            rho_exit,
            nu,
        };
        prob.check()?;
        Ok((prob, lin))
    }

    pub fn state_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn check(&self) -> Result<()> {
        let (h, d) = self.w_hat.shape();
        let s = self.p.nrows();
        if self.p.ncols() != s {
            return Err(dim_err("P", format!("{s}x{s}"), format!("{:?}", self.p.shape())));
        }
        if d <= s {
            return Err(dim_err("W_hat columns", format!("> {s}"), d));
        }
        if self.k.shape() != (d - s, s) {
            return Err(dim_err("K", format!("{}x{s}", d - s), format!("{:?}", self.k.shape())));
        }
        if self.b_hat.len() != h {
            return Err(dim_err("b_hat", h, self.b_hat.len()));
        }
        if self.w_d.len() != h {
            return Err(dim_err("W_d", h, self.w_d.len()));
        }
        Ok(())
    }

    /// `[I; -K]`.
    fn along(&self) -> DMatrix<T> {
        let s = self.state_dim();
        let mut t = DMatrix::zeros(self.w_hat.ncols(), s);
        t.view_mut((0, 0), (s, s)).fill_with_identity();
        t.view_mut((s, 0), (self.k.nrows(), s)).copy_from(&(-&self.k));
        t
    }

    /// Quadratic coefficient `G(w)`.
    pub fn block(&self, w: &DVector<T>) -> DMatrix<T> {
        let mut scaled = self.w_hat.clone();
        for (mut row, &wi) in scaled.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        self.w_hat.transpose() * scaled * lit::<T>(0.25)
    }

    fn bias_coeffs(&self) -> DVector<T> {
        self.b_hat.map(|b| b * b * lit(0.25) + b * lit(0.5))
    }

    /// Residuals of the four equality groups for a candidate `(w, b_o)`.
    pub fn residuals(&self, w: &DVector<T>, b_o: T, form: &QuadraticForm<T>) -> Residuals {
        let g = self.block(w);
        let scale = T::one().max(self.p.norm());
        let cost = (form.along_gain(&self.k) + &self.p).norm() / scale;
        let block = (form.assemble() - &g).norm();
        let bias = ((self.bias_coeffs().dot(w) + b_o - self.rho_exit).abs()) / T::one().max(self.rho_exit.abs());
        let lin = self.w_hat.transpose() * w.component_mul(&self.b_hat.add_scalar(T::one()));
        Residuals {
            cost: to_f64(cost),
            block: to_f64(block),
            bias: to_f64(bias),
            linear: to_f64(lin.norm()),
        }
    }
}

/// Constraint residuals, each scaled by its problem magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `|P + (A_o - K^T C_o - B_o K + K^T D_o K)| / max(1, |P|)`.
    pub cost: f64,
    /// `|1/4 W_hat^T diag(w) W_hat - [[A_o, B_o], [C_o, D_o]]|`.
    pub block: f64,
    /// `|constant term - rho_exit| / max(1, |rho_exit|)`.
    pub bias: f64,
    /// `|b_hat^T diag(w) W_hat + w^T W_hat|`.
    pub linear: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.cost.max(self.block).max(self.bias).max(self.linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticFitConfig {
    /// Initial weight of the augmented penalty on `G(w) = Z`.
    pub penalty_init: f64,
    /// Factor by which the penalty weight is raised or lowered to keep the
    /// primal and dual residuals balanced.
    pub penalty_growth: f64,
    pub max_outer: usize,
    /// Relative stopping tolerance of the splitting iterations.
    pub split_tol: f64,
    pub residual_tol: f64,
    /// Largest admissible eigenvalue of the assembled block.
    pub eig_tol: f64,
}

impl Default for CriticFitConfig {
    fn default() -> Self {
        Self {
            penalty_init: 1.0,
            penalty_growth: 10.0,
            max_outer: 5000,
            split_tol: 1e-10,
            residual_tol: 1e-6,
            eig_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticFitReport {
    pub residuals: Residuals,
    pub max_block_eig: f64,
    pub objective: f64,
    pub nu: f64,
    /// Splitting iterations run (0 when the unconstrained optimum was already semidefinite).
    pub iterations: usize,
    /// `(penalty weight, max eigenvalue of G(w))` per iteration.
    pub trajectory: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticFit<T: Scalar> {
    pub w_o: DVector<T>,
    pub b_o: T,
    pub form: QuadraticForm<T>,
    pub report: CriticFitReport,
}

/// Rows of `T^T G(w) T = -P` (upper triangle), with `T = [I; -K]`.
fn cost_rows<T: Scalar>(p: &CriticFitProblem<T>) -> (DMatrix<T>, DVector<T>) {
    let proj = &p.w_hat * p.along();
    let (e, mut rhs) = sym_rows(&proj);
    let s = p.state_dim();
    let mut r = 0;
    for a in 0..s {
        for b in a..s {
            rhs[r] = -p.p[(a, b)];
            r += 1;
        }
    }
    (e, rhs)
}

/// Maps `w` to the upper-triangle entries of `1/4 V^T diag(w) V` where row
/// `i` of `v` is the `i`-th unit's direction.
fn sym_rows<T: Scalar>(v: &DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    let (h, d) = v.shape();
    let rows = d * (d + 1) / 2;
    let mut e = DMatrix::zeros(rows, h);
    let quarter = lit::<T>(0.25);
    let mut r = 0;
    for a in 0..d {
        for b in a..d {
            for i in 0..h {
                e[(r, i)] = quarter * v[(i, a)] * v[(i, b)];
            }
            r += 1;
        }
    }
    (e, DVector::zeros(rows))
}

/// Rows of `b_hat^T diag(w) W_hat + w^T W_hat = 0`.
fn linear_rows<T: Scalar>(p: &CriticFitProblem<T>) -> DMatrix<T> {
    let (h, d) = p.w_hat.shape();
    DMatrix::from_fn(d, h, |j, i| (p.b_hat[i] + T::one()) * p.w_hat[(i, j)])
}

fn vstack<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn vcat<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn symmetrize<T: Scalar>(g: &DMatrix<T>) -> DMatrix<T> {
    (g + g.transpose()) * lit::<T>(0.5)
}

/// Projection onto `{X : X <= 0}` in the Frobenius norm.
fn project_nsd<T: Scalar>(g: &DMatrix<T>) -> DMatrix<T> {
    let eig = symmetrize(g).symmetric_eigen();
    let clamped = eig.eigenvalues.map(|v| v.min(T::zero()));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

struct Quadratic<T: Scalar> {
    h: DMatrix<T>,
    g: DVector<T>,
}

/// Objective `|w - w_d|^2 + (b_o(w) - b_d)^2 + (nu + 1^T w)^2` as `w^T H w - 2 g^T w + const`.
fn base_objective<T: Scalar>(p: &CriticFitProblem<T>) -> Quadratic<T> {
    let n = p.w_hat.nrows();
    let c = p.bias_coeffs();
    let ones = DVector::from_element(n, T::one());
    let h = DMatrix::identity(n, n) + &c * c.transpose() + &ones * ones.transpose();
    let g = &p.w_d + &c * (p.rho_exit - p.b_d) - &ones * p.nu;
    Quadratic { h, g }
}

fn objective_value<T: Scalar>(p: &CriticFitProblem<T>, w: &DVector<T>, b_o: T) -> T {
    (w - &p.w_d).norm_squared() + (b_o - p.b_d).powi(2) + (p.nu + w.sum()).powi(2)
}

/// Factored KKT matrix of `min w^T H w - 2 g^T w  s.t.  E w = e`.
struct Kkt<T: Scalar> {
    n: usize,
    m: usize,
    kkt: DMatrix<T>,
    lu: nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>,
}

impl<T: Scalar> Kkt<T> {
    fn new(h: &DMatrix<T>, e: &DMatrix<T>) -> Self {
        let (m, n) = e.shape();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(h * lit::<T>(2.0)));
        kkt.view_mut((0, n), (n, m)).copy_from(&e.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(e);
        let lu = kkt.clone().lu();
        Self { n, m, kkt, lu }
    }

    fn solve(&self, g: &DVector<T>, rhs: &DVector<T>) -> Result<DVector<T>> {
        let mut b = DVector::zeros(self.n + self.m);
        b.rows_mut(0, self.n).copy_from(&(g * lit::<T>(2.0)));
        b.rows_mut(self.n, self.m).copy_from(rhs);
        let finite = |x: &DVector<T>| x.iter().all(|v| v.is_finite());
        self.lu
            .solve(&b)
            .filter(finite)
            .or_else(|| {
                // Redundant rows: least-squares solve, accepted only if consistent.
                let x = self.kkt.clone().svd(true, true).solve(&b, T::default_epsilon() * lit(1e4)).ok()?;
                let tol = lit::<T>(1e-9) * T::one().max(b.norm());
                (finite(&x) && (&self.kkt * &x - &b).norm() <= tol).then_some(x)
            })
            .map(|x| x.rows(0, self.n).into_owned())
            .ok_or_else(|| Error::Infeasible("critic fit constraints are inconsistent or degenerate".into()))
    }
}

/// Moves `z` onto `{G : T^T G T = -P, G <= 0}` through the basis `[T, N]`,
/// `N = [K^T; I]`, in which the block reads `[[-P, X], [X^T, Y]]` and
/// semidefiniteness is `Y <= -X^T P^-1 X`. `Y` is clamped with a small margin.
fn pin_target<T: Scalar>(p: &CriticFitProblem<T>, z: &DMatrix<T>, margin: T) -> Result<DMatrix<T>> {
    let s = p.state_dim();
    let a = p.k.nrows();
    let d = s + a;
    let mut v = DMatrix::zeros(d, d);
    v.view_mut((0, 0), (d, s)).copy_from(&p.along());
    v.view_mut((0, s), (s, a)).copy_from(&p.k.transpose());
    v.view_mut((s, s), (a, a)).fill_with_identity();
    let mut m = v.transpose() * symmetrize(z) * &v;
    let x = m.view((0, s), (s, a)).into_owned();
    let y = m.view((s, s), (a, a)).into_owned();
    let p_inv = p
        .p
        .clone()
        .pseudo_inverse(T::default_epsilon() * lit(1e3))
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    let y_max = -(x.transpose() * p_inv * &x) - DMatrix::identity(a, a) * margin;
    let y_new = &y_max + project_nsd(&(y - &y_max));
    m.view_mut((0, 0), (s, s)).copy_from(&(-&p.p));
    m.view_mut((s, s), (a, a)).copy_from(&symmetrize(&y_new));
    m.view_mut((s, 0), (a, s)).copy_from(&x.transpose());
    let v_inv = v
        .try_inverse()
        .ok_or_else(|| Error::Infeasible("singular change of basis".into()))?;
    Ok(symmetrize(&(v_inv.transpose() * m * v_inv)))
}

/// Quadratic-region fit: the equality groups are imposed exactly, and
/// `G(w) <= 0` is handled by an augmented-penalty splitting `G(w) = Z`,
/// `Z` projected onto the negative semidefinite cone by eigenvalue clamping.
/// The result is finally re-solved with `G(w)` pinned to a semidefinite
/// block that satisfies the cost constraint exactly.
pub fn fit_critic_last_layer<T: Scalar>(p: &CriticFitProblem<T>, cfg: &CriticFitConfig) -> Result<CriticFit<T>> {
    p.check()?;
    let n = p.w_hat.nrows();
    let d = p.w_hat.ncols();
    let (cost_e, cost_rhs) = cost_rows(p);
    let lin_e = linear_rows(p);
    let e = vstack(&cost_e, &lin_e);
    let rhs = vcat(&cost_rhs, &DVector::zeros(d));
    let base = base_objective(p);
    let c = p.bias_coeffs();

    let mut w = Kkt::new(&base.h, &e).solve(&base.g, &rhs)?;
    let mut top = max_eig(&p.block(&w));
    let mut trajectory = vec![(0.0, to_f64(top))];
    let mut iterations = 0;

    if to_f64(top) > cfg.eig_tol {
        // |G(w) - S|^2 = w^T Psi w - 2 w^T phi(S) + const.
        let gram = &p.w_hat * p.w_hat.transpose();
        let psi = gram.map(|v| v * v / lit(16.0));
        let phi = |s: &DMatrix<T>| {
            DVector::from_fn(n, |i, _| {
                let wi = p.w_hat.row(i).transpose();
                (wi.transpose() * s * &wi)[(0, 0)] * lit(0.25)
            })
        };
        let growth = lit::<T>(cfg.penalty_growth);
        let half = lit::<T>(0.5);
        let mut rho = lit::<T>(cfg.penalty_init);
        let mut kkt = Kkt::new(&(&base.h + &psi * (rho * half)), &e);
        let mut z = project_nsd(&p.block(&w));
        let mut u = DMatrix::<T>::zeros(d, d);
        while iterations < cfg.max_outer {
            iterations += 1;
            w = kkt.solve(&(&base.g + phi(&(&z - &u)) * (rho * half)), &rhs)?;
            let g = p.block(&w);
            let z_old = std::mem::replace(&mut z, project_nsd(&(&g + &u)));
            u += &g - &z;
            top = max_eig(&g);
            trajectory.push((to_f64(rho), to_f64(top)));
            let primal = to_f64((&g - &z).norm());
            let dual = to_f64(rho * (&z - &z_old).norm());
            let scale = 1.0f64.max(to_f64(g.norm()));
            if primal <= cfg.split_tol * scale && dual <= cfg.split_tol * scale {
                break;
            }
            if primal > 10.0 * dual {
                rho *= growth;
                u /= growth;
                kkt = Kkt::new(&(&base.h + &psi * (rho * half)), &e);
            } else if dual > 10.0 * primal {
                rho /= growth;
                u *= growth;
                kkt = Kkt::new(&(&base.h + &psi * (rho * half)), &e);
            }
        }
        let margin = lit::<T>(cfg.eig_tol * 1e-2) * T::one().max(p.p.norm());
        let target = pin_target(p, &z, margin)?;
        let (pin_e, _) = sym_rows(&p.w_hat);
        let mut pin_rhs = DVector::zeros(pin_e.nrows());
        let mut r = 0;
        for a in 0..d {
            for b in a..d {
                pin_rhs[r] = target[(a, b)];
                r += 1;
            }
        }
        let e_pin = vstack(&pin_e, &lin_e);
        let rhs_pin = vcat(&pin_rhs, &DVector::zeros(d));
        w = Kkt::new(&base.h, &e_pin).solve(&base.g, &rhs_pin)?;
        top = max_eig(&p.block(&w));
    }

    let b_o = p.rho_exit - c.dot(&w);
    let form = QuadraticForm::from_matrix(&p.block(&w), p.state_dim());
    let residuals = p.residuals(&w, b_o, &form);
    let report = CriticFitReport {
        residuals,
        max_block_eig: to_f64(top),
        objective: to_f64(objective_value(p, &w, b_o)),
        nu: to_f64(p.nu),
        iterations,
        trajectory,
    };
    if report.max_block_eig > cfg.eig_tol || residuals.max() > cfg.residual_tol {
        return Err(Error::Infeasible(format!(
            "critic fit residual {:.3e}, max block eigenvalue {:.3e} after {iterations} iterations",
            residuals.max(),
            report.max_block_eig
        )));
    }
    Ok(CriticFit { w_o: w, b_o, form, report })
}

/// Writes the fitted last layer into `critic`.
pub fn apply_critic_fit<T: Scalar>(critic: &NetworkParams<T>, fit: &CriticFit<T>) -> Result<NetworkParams<T>> {
    let last = critic.last_layer();
    if last.weight.shape() != (1, fit.w_o.len()) {
        return Err(dim_err("critic last layer", fit.w_o.len(), last.weight.ncols()));
    }
    let scale = critic.output_scale[0];
    let mut out = critic.clone();
    let last = out.layers.last_mut().unwrap();
    last.weight = DMatrix::from_row_slice(1, fit.w_o.len(), (&fit.w_o / scale).as_slice());
    last.bias[0] = fit.b_o / scale;
    Ok(out)
}

/// Whether `x_hat` keeps every preceding ReLU unit in its linear region and
/// every Swish unit within `bound` of its Maclaurin model.
pub fn in_quadratic_region<T: Scalar>(
    lin: &EffectiveLinearization<T>,
    p: &CriticFitProblem<T>,
    x_hat: &DVector<T>,
    bound: T,
) -> bool {
    if !lin.contains(x_hat) {
        return false;
    }
    let z = &p.w_hat * x_hat + &p.b_hat;
    z.iter().all(|&zi| swish_quadratic_error(zi) <= bound)
}

pub fn write_critic_report<W: Write>(out: &mut W, r: &CriticFitReport) -> std::io::Result<()> {
    writeln!(out, "metric,value")?;
    writeln!(out, "residual_cost,{}", r.residuals.cost)?;
    writeln!(out, "residual_block,{}", r.residuals.block)?;
    writeln!(out, "residual_bias,{}", r.residuals.bias)?;
    writeln!(out, "residual_linear,{}", r.residuals.linear)?;
    writeln!(out, "max_block_eig,{}", r.max_block_eig)?;
    writeln!(out, "objective,{}", r.objective)?;
    writeln!(out, "nu,{}", r.nu)?;
    writeln!(out, "iterations,{}", r.iterations)
}

/// `iteration,penalty,max_eig` per splitting iteration.
pub fn write_critic_trajectory<W: Write>(out: &mut W, r: &CriticFitReport) -> std::io::Result<()> {
    writeln!(out, "iteration,penalty,max_eig")?;
    for (i, (mu, eig)) in r.trajectory.iter().enumerate() {
        writeln!(out, "{i},{mu},{eig}")?;
    }
    Ok(())
}
