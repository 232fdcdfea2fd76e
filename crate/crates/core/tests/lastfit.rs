use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlqr::biasshift::{initialize_biases, BiasShiftConfig};
use rlqr::env::{linearize_upright, PendulumParams};
use rlqr::lastfit::{apply_fit, fit_exact, fit_penalized, fit_relaxed, FitConfig, FitProblem};
use rlqr::lqr::solve_care;
use rlqr::net::{effective_linearization, Activation, NetworkParams};
use rlqr::Error;

fn random_problem(seed: u64, hidden: usize, state: usize, action: usize) -> FitProblem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r: f64| rng.random_range(-r..r);
    FitProblem {
        w_prev: DMatrix::from_fn(hidden, state, |_, _| u(1.0)),
        b_prev: DVector::from_fn(hidden, |_, _| u(0.5)),
        w_n: DMatrix::from_fn(action, hidden, |_, _| u(0.1)),
        b_n: DVector::from_fn(action, |_, _| u(0.1)),
        k: DMatrix::from_fn(action, state, |_, _| u(5.0)),
        output_scale: DVector::from_element(action, 0.8),
        nu_k: 1.0,
        epsilon: 1e-6,
        nu_growth: 10.0,
        max_rounds: 20,
    }
}

fn objective(p: &FitProblem<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    (w - &p.w_n).norm_squared() + (b - &p.b_n).norm_squared()
}

/// Solves the equality-constrained least squares directly over all of
/// `vec(W_o), b_o` with one dense KKT system.
fn dense_kkt(p: &FitProblem<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (h, s) = p.w_prev.shape();
    let a = p.w_n.nrows();
    let nv = a * h + a;
    let nc = a * s + a;
    let wi = |r: usize, c: usize| r * h + c;
    let bi = |r: usize| a * h + r;
    let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
    let mut rhs = DVector::zeros(nv + nc);
    for i in 0..nv {
        kkt[(i, i)] = 2.0;
    }
    for r in 0..a {
        for c in 0..h {
            rhs[wi(r, c)] = 2.0 * p.w_n[(r, c)];
        }
        rhs[bi(r)] = 2.0 * p.b_n[r];
    }
    let mut row = nv;
    for r in 0..a {
        for j in 0..s {
            for c in 0..h {
                kkt[(row, wi(r, c))] = p.w_prev[(c, j)];
                kkt[(wi(r, c), row)] = p.w_prev[(c, j)];
            }
            rhs[row] = -p.k[(r, j)];
            row += 1;
        }
        for c in 0..h {
            kkt[(row, wi(r, c))] = p.b_prev[c];
            kkt[(wi(r, c), row)] = p.b_prev[c];
        }
        kkt[(row, bi(r))] = 1.0;
        kkt[(bi(r), row)] = 1.0;
        row += 1;
    }
    let x = kkt.lu().solve(&rhs).unwrap();
    let w = DMatrix::from_fn(a, h, |r, c| x[wi(r, c)]);
    let b = DVector::from_fn(a, |r, _| x[bi(r)]);
    (w, b)
}

#[test]
fn exact_fit_matches_dense_kkt_at_width_256() {
    for (seed, action) in [(1, 1), (2, 2)] {
        let p = random_problem(seed, 256, 2, action);
        let fit = fit_exact(&p, None).unwrap();
        let (w, b) = dense_kkt(&p);
        assert!((&fit.w_o - &w).amax() < 1e-10, "seed {seed}");
        assert!((&fit.b_o - &b).amax() < 1e-10, "seed {seed}");
        assert!(fit.gain_error < 1e-8);
        assert!(fit.offset.amax() < 1e-12);
    }
}

#[test]
fn exact_fit_is_optimal_along_feasible_directions() {
    let p = random_problem(5, 64, 2, 1);
    let fit = fit_exact(&p, None).unwrap();
    let base = objective(&p, &fit.w_o, &fit.b_o);
    // Directions D with D W_prev = 0 (and db = -D b_prev) keep every constraint.
    let c = &p.w_prev;
    let proj = DMatrix::identity(64, 64) - c * (c.transpose() * c).try_inverse().unwrap() * c.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let raw = DMatrix::from_fn(1, 64, |_, _| rng.random_range(-1.0..1.0));
        let d = raw * &proj;
        assert!((&d * c).amax() < 1e-10);
        let db = -(&d * &p.b_prev);
        for eps in [1e-3, -1e-3, 0.1] {
            let w = &fit.w_o + &d * eps;
            let b = &fit.b_o + &db * eps;
            assert!(objective(&p, &w, &b) >= base - 1e-12);
        }
    }
}

#[test]
fn penalized_fit_approaches_exact_fit() {
    let p = random_problem(11, 32, 2, 1);
    let exact = fit_exact(&p, None).unwrap();
    let w = fit_penalized(&p, 1e8).unwrap();
    let gain_error = (&w * &p.w_prev + &p.k).norm();
    assert!(gain_error < 1e-4, "{gain_error}");
    assert!((&w - &exact.w_o).amax() < 1e-4);
}

#[test]
fn gain_error_is_monotone_in_penalty() {
    let p = random_problem(12, 32, 2, 1);
    let mut last = f64::INFINITY;
    let mut nu = 1e-3;
    while nu < 1e9 {
        let w = fit_penalized(&p, nu).unwrap();
        let e = (&w * &p.w_prev + &p.k).norm();
        assert!(e <= last * (1.0 + 1e-9), "nu {nu}: {e} > {last}");
        last = e;
        nu *= 10.0;
    }
}

#[test]
fn rank_deficient_previous_layer_is_infeasible() {
    let mut p = random_problem(3, 16, 2, 1);
    let col = p.w_prev.column(0).into_owned();
    p.w_prev.set_column(1, &(col * 2.0));
    assert!(matches!(fit_exact(&p, None), Err(Error::Infeasible(_))));
}

#[test]
fn penalized_fit_stays_finite_on_collapsed_region() {
    let mut p = random_problem(13, 24, 2, 1);
    let col = p.w_prev.column(0).into_owned();
    p.w_prev.set_column(1, &(col * -0.5));
    let mut last = f64::INFINITY;
    let mut nu = 1.0;
    while nu <= 1e19 {
        let w = fit_penalized(&p, nu).unwrap();
        assert!(w.iter().all(|v| v.is_finite()), "nu {nu}");
        let e = (&w * &p.w_prev + &p.k).norm();
        assert!(e <= last * (1.0 + 1e-9) + 1e-9, "nu {nu}: {e} > {last}");
        last = e;
        nu *= 10.0;
    }
    // Reachable gains are multiples of [1, -0.5]; the limit is K's distance to that line.
    let dir = DVector::from_vec(vec![1.0, -0.5]).normalize();
    let k_row = p.k.row(0).transpose();
    let floor = (&k_row - &dir * dir.dot(&k_row)).norm();
    assert!((last - floor).abs() < 1e-6 * (1.0 + floor), "{last} vs {floor}");
}

fn shifted_actor(seed: u64) -> NetworkParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [Activation::Relu, Activation::Relu, Activation::Tanh];
    let mut net = NetworkParams::init_uniform(&[2, 64, 32, 1], &acts, DVector::from_element(1, 0.8), &mut rng).unwrap();
    initialize_biases(&mut net, &BiasShiftConfig::default(), 2, &mut rng).unwrap();
    net
}

#[test]
fn relaxed_fit_stabilizes_the_pendulum() {
    let params = PendulumParams::<f64>::default();
    let sys = linearize_upright(&params).unwrap();
    let k = solve_care(&sys).unwrap().k;
    for seed in 0..5 {
        let actor = shifted_actor(seed);
        let p = FitProblem::from_actor(&actor, &k, 0.2, &FitConfig::default()).unwrap();
        let fit = fit_relaxed(&p, &sys).unwrap();
        assert!(fit.stable && fit.rounds <= 20);
        for pair in fit.history.windows(2) {
            assert!(pair[1].gain_error <= pair[0].gain_error * (1.0 + 1e-9));
        }
        // The refitted actor's region gain reproduces the plant gain it was scored with.
        let fitted = apply_fit(&actor, &fit).unwrap();
        let lin = effective_linearization(&fitted, 0.2).unwrap();
        let plant = -(lin.w_eff() * 0.8);
        assert!((&plant - p.plant_gain(&fit.w_o)).amax() < 1e-10);
        assert!(lin.b_eff().amax() < 1e-10);
    }
}

#[test]
fn exact_fit_reproduces_lqr_gain_in_region() {
    let params = PendulumParams::<f64>::default();
    let sys = linearize_upright(&params).unwrap();
    let k = solve_care(&sys).unwrap().k;
    let actor = shifted_actor(42);
    let p = FitProblem::from_actor(&actor, &k, 0.2, &FitConfig::default()).unwrap();
    let fit = fit_exact(&p, Some(&sys)).unwrap();
    assert!(fit.stable);
    let fitted = apply_fit(&actor, &fit).unwrap();
    let lin = effective_linearization(&fitted, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut checked = 0;
    while checked < 200 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
        if !lin.contains(&x) {
            continue;
        }
        let z = fitted.pre_output(&x).unwrap()[0];
        let target = -(&k * &x)[0] / 0.8;
        assert!((z - target).abs() < 1e-8 * (1.0 + target.abs()));
        checked += 1;
    }
}
