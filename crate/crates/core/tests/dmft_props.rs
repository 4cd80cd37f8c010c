use multipass_core::dmft::{self, DmftConfig, DmftModel, DmftTrace, Formulation, KernelMode};
use multipass_core::{targets, ScalarFn, TargetFunction};
use nalgebra::DMatrix;
use std::time::Instant;

fn cfg(alpha: f64, eta: f64, steps: usize, n: usize) -> DmftConfig {
    DmftConfig { n_samples: n, seed: 1, ..DmftConfig::new(alpha, eta, 0.0, steps) }
}

fn run(target: &str, p: usize, c: &DmftConfig) -> DmftTrace {
    let t = targets::resolve(target).unwrap();
    dmft::integrate(c, &t, &DmftModel::symmetric(p, ScalarFn::Relu).unwrap()).unwrap()
}

/// Entries of M u with propagated standard errors.
fn along(m: &DMatrix<f64>, se: &DMatrix<f64>, u: &[f64]) -> Vec<(f64, f64)> {
    (0..m.nrows())
        .map(|i| {
            let v: f64 = u.iter().enumerate().map(|(l, x)| m[(i, l)] * x).sum();
            let s: f64 = u.iter().enumerate().map(|(l, x)| (se[(i, l)] * x).powi(2)).sum::<f64>().sqrt();
            (v, s)
        })
        .collect()
}

#[test]
fn kernels_are_causal() {
    let tr = run("staircase3", 4, &cfg(3.0, 0.2, 4, 5000));
    let eye = DMatrix::<f64>::identity(4, 4);
    for t in 0..tr.t.len() {
        assert_eq!(tr.response[t][t], eye, "R_theta({t},{t})");
        assert!(tr.memory[t][t].iter().all(|&x| x == 0.0));
        assert!(tr.teacher_memory[t][t].iter().all(|&x| x == 0.0));
        assert_eq!(tr.response[t].len(), t + 1);
        assert_eq!(tr.memory[t].len(), t + 1);
    }
}

#[test]
fn covariances_are_symmetric_and_psd() {
    for (target, p) in [("tanh", 1), ("he3", 1), ("staircase3", 4), ("leap3_multi", 8)] {
        let tr = run(target, p, &cfg(3.0, 0.2, 4, 10_000));
        for (t, e) in tr.min_eig_omega.iter().enumerate() {
            assert!(*e >= -1e-8, "{target}: Omega min eig {e} at t = {t}");
        }
        for (t, e) in tr.min_eig_loss.iter().enumerate() {
            assert!(*e >= -1e-8, "{target}: C_L min eig {e} at t = {t}");
        }
        for t in 0..tr.c_theta.len() {
            let c = &tr.c_theta[t][t];
            assert!((c - c.transpose()).abs().max() < 1e-12, "{target} C({t},{t})");
        }
    }
}

#[test]
fn deterministic_in_seed() {
    let c = cfg(3.0, 0.2, 3, 4000);
    let a = run("staircase3", 4, &c);
    let b = run("staircase3", 4, &c);
    assert_eq!(a.m, b.m);
    assert_eq!(a.c_loss, b.c_loss);
    let other = run("staircase3", 4, &DmftConfig { seed: 2, ..c });
    assert_ne!(a.m, other.m);
}

#[test]
fn even_target_overlap_stays_null() {
    // He4 is even along its only direction; the committee along (e2 - e1)/sqrt2
    let s = 1.0 / 2f64.sqrt();
    for (target, p, u) in [("he4", 1, vec![1.0]), ("he4", 8, vec![1.0]), ("committee", 8, vec![-s, s])] {
        let tr = run(target, p, &cfg(3.0, 0.1, 6, 20_000));
        for t in 0..tr.m.len() {
            for (v, se) in along(&tr.m[t], &tr.m_stderr[t], &u) {
                assert!(v.abs() <= 4.0 * se + 1e-12, "{target} p = {p} t = {t}: {v} +- {se}");
            }
        }
    }
}

#[test]
fn pathwise_and_finite_difference_kernels_agree() {
    let t = targets::resolve("tanh").unwrap();
    let model = DmftModel::symmetric(1, ScalarFn::Tanh).unwrap();
    let base = cfg(3.0, 0.2, 4, 20_000);
    let pw = dmft::integrate(&base, &t, &model).unwrap();
    let fd = dmft::integrate(&DmftConfig { kernel_mode: KernelMode::FiniteDifference, ..base }, &t, &model).unwrap();
    for s in 0..pw.m.len() {
        let (a, b) = (pw.m[s][(0, 0)], fd.m[s][(0, 0)]);
        assert!((a - b).abs() < 1e-3 + 0.01 * a.abs(), "t = {s}: {a} vs {b}");
    }
}

#[test]
fn single_and_two_process_formulations_agree() {
    let t = targets::resolve("tanh").unwrap();
    let model = DmftModel::symmetric(1, ScalarFn::Relu).unwrap();
    let base = cfg(3.0, 0.1, 4, 20_000);
    let two = dmft::integrate(&base, &t, &model).unwrap();
    let one = dmft::integrate(&DmftConfig { formulation: Formulation::SingleProcess, ..base }, &t, &model).unwrap();
    for s in 0..two.m.len() {
        let (a, b) = (two.m[s][(0, 0)], one.m[s][(0, 0)]);
        let tol = 4.0 * (two.m_stderr[s][(0, 0)].powi(2) + one.m_stderr[s][(0, 0)].powi(2)).sqrt() + 2e-3;
        assert!((a - b).abs() < tol, "t = {s}: {a} vs {b}");
    }
}

#[test]
fn one_pass_theory_cannot_see_he3_early() {
    let t: TargetFunction = targets::resolve("he3").unwrap();
    let model = DmftModel::symmetric(1, ScalarFn::Relu).unwrap();
    let tr = dmft::one_pass_effective(&cfg(3.0, 0.1, 6, 20_000), &t, &model).unwrap();
    for (s, m) in tr.m.iter().enumerate() {
        assert!(m[(0, 0)].abs() < 0.02, "t = {s}: {}", m[(0, 0)]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let t = targets::resolve("tanh").unwrap();
    let model = DmftModel::symmetric(1, ScalarFn::Relu).unwrap();
    for bad in [
        DmftConfig { n_samples: 10, ..cfg(3.0, 0.1, 2, 1000) },
        DmftConfig { eta: -1.0, ..cfg(3.0, 0.1, 2, 1000) },
        DmftConfig { steps: 0, ..cfg(3.0, 0.1, 2, 1000) },
    ] {
        assert!(dmft::integrate(&bad, &t, &model).is_err());
    }
    assert!(DmftModel::symmetric(3, ScalarFn::Relu).is_err());
}

#[test]
fn cost_grows_with_horizon_but_not_faster_than_quartic() {
    let time = |steps| {
        let start = Instant::now();
        run("staircase3", 4, &cfg(3.0, 0.2, steps, 20_000));
        start.elapsed().as_secs_f64()
    };
    time(2);
    let short = time(3);
    let long = time(6);
    // doubling T multiplies the work by at most 2^4; slack for timer noise
    assert!(long > short, "T = 6 took {long}s, T = 3 took {short}s");
    assert!(long / short < 16.0 * 3.0, "ratio {}", long / short);
}
