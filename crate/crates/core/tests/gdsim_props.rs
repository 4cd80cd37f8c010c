use multipass_core::gdsim::{
    self, evaluate_loss, gd_step, generate_dataset, BatchSchedule, GradNormalization, SecondLayer, StepWorkspace,
    StudentState, TeacherKind, TrainConfig,
};
use multipass_core::{directions, rng, targets, Readout, ScalarFn, Teacher};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn config(d: usize, p: usize, eta: f64, steps: usize, runs: usize, activation: ScalarFn) -> TrainConfig {
    TrainConfig {
        d,
        alpha: 3.0,
        p,
        eta,
        lambda: 0.0,
        steps,
        schedule: BatchSchedule::FullBatchReuse,
        seed: 3,
        runs,
        activation,
        second_layer: SecondLayer::PlusMinus,
        grad_normalization: GradNormalization::Sum,
        teacher: TeacherKind::Random,
    }
}

fn random_student(d: usize, a: Vec<f64>, sigma: ScalarFn, seed: u64) -> StudentState {
    let p = a.len();
    let mut w = vec![0.0; p * d];
    rng::fill_normal(&mut rng::stream(seed, &[77]), &mut w);
    StudentState { d, w, readout: Readout::new(a, sigma, false), twin: None }
}

/// Exact gradient read back from one step: w' = w - eta * grad.
fn step_gradient(s: &StudentState, data: &gdsim::Dataset, rows: &[usize]) -> Vec<f64> {
    let mut moved = s.clone();
    gd_step(&mut moved, data, rows, 1.0, 0.0, GradNormalization::Sum, &mut StepWorkspace::default()).unwrap();
    s.w.iter().zip(&moved.w).map(|(a, b)| a - b).collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let (d, n) = (12, 9);
    let target = targets::resolve("leap3_multi").unwrap();
    let teacher = Teacher::random(d, 2, 5).unwrap();
    let data = generate_dataset(n, &teacher, &target, &mut rng::stream(1, &[2]));
    let rows: Vec<usize> = (0..n).collect();
    for sigma in [ScalarFn::Tanh, ScalarFn::Softplus, ScalarFn::Hermite(3)] {
        let s = random_student(d, vec![0.7, -0.2, 0.4], sigma, 11);
        let g = step_gradient(&s, &data, &rows);
        let eps = 1e-6;
        for i in 0..s.w.len() {
            let mut plus = s.clone();
            plus.w[i] += eps;
            let mut minus = s.clone();
            minus.w[i] -= eps;
            // summed loss = n * mean loss
            let fd = n as f64 * (evaluate_loss(&plus, &data, &rows) - evaluate_loss(&minus, &data, &rows)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{sigma} coord {i}: fd {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn deterministic_given_seed() {
    let cfg = config(200, 4, 0.2, 3, 3, ScalarFn::Relu);
    let t = targets::resolve("staircase3").unwrap();
    let a = gdsim::train(&cfg, &t, &[]).unwrap();
    let b = gdsim::train(&cfg, &t, &[]).unwrap();
    assert_eq!(a.m_mean, b.m_mean);
    assert_eq!(a.loss_mean, b.loss_mean);
    for (x, y) in a.per_run.iter().zip(&b.per_run) {
        assert_eq!(x.m, y.m);
    }
    let other = gdsim::train(&TrainConfig { seed: 4, ..cfg }, &t, &[]).unwrap();
    assert_ne!(a.m_mean, other.m_mean);
}

#[test]
fn symmetric_init_starts_at_zero_output() {
    let t = targets::resolve("tanh").unwrap();
    for p in [1, 2, 8] {
        let cfg = config(100, p, 0.1, 1, 1, ScalarFn::Relu);
        let s = gdsim::run_student(&cfg, 0);
        let teacher = gdsim::run_teacher(&cfg, 1, 0).unwrap();
        let data = generate_dataset(20, &teacher, &t, &mut rng::stream(0, &[1]));
        for i in 0..20 {
            assert_eq!(s.forward(data.row(i)), 0.0, "p = {p}");
        }
    }
}

#[test]
fn initial_overlap_concentrates_at_scale_one_over_root_d() {
    let d = 2000;
    let cfg = config(d, 8, 0.1, 0, 16, ScalarFn::Relu);
    let mut sq = 0.0;
    let mut count = 0.0;
    for run in 0..cfg.runs {
        let m = gdsim::run_student(&cfg, run).overlap(&gdsim::run_teacher(&cfg, 3, run).unwrap());
        // rows come in identical pairs, so only half are independent
        for j in 0..4 {
            for l in 0..3 {
                sq += m[(j, l)] * m[(j, l)];
                count += 1.0;
            }
        }
    }
    let ratio = sq / count * d as f64;
    assert!((ratio - 1.0).abs() < 0.2, "E[M0^2] d = {ratio}");
}

#[test]
fn full_batch_loss_decreases_at_small_step() {
    // pilot: relu p = 8 on the staircase target is monotone for eta up to about 0.5
    let cfg = config(400, 8, 0.25, 3, 4, ScalarFn::Relu);
    let t = targets::resolve("staircase3").unwrap();
    let trace = gdsim::train(&cfg, &t, &[]).unwrap();
    for run in &trace.per_run {
        for w in run.loss[..=3].windows(2) {
            assert!(w[1] <= w[0], "loss rose: {:?}", run.loss);
        }
    }
}

#[test]
fn first_step_overlap_is_rank_one() {
    let d = 4000;
    let cfg = config(d, 8, 0.3, 1, 3, ScalarFn::Relu);
    let t = targets::resolve("leap3_multi").unwrap();
    let mut ratio = 0.0;
    for run in 0..cfg.runs {
        let tr = gdsim::train_run(&cfg, &t, run).unwrap();
        // the spike is the first-step increment; M0 itself is O(1/sqrt d) noise of full rank
        let sv = (&tr.m[1] - &tr.m[0]).singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        ratio += s[1] / s[0];
    }
    ratio /= cfg.runs as f64;
    assert!(ratio < 0.1, "sigma2 / sigma1 = {ratio}");
}

fn permute_rows(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |j, l| m[(perm[j], l)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_neurons_permutes_overlaps(seed in 0u64..1000, shift in 1usize..6) {
        let (d, n, p) = (40, 60, 6);
        let target = targets::resolve("staircase3").unwrap();
        let teacher = Teacher::random(d, 3, seed).unwrap();
        let data = generate_dataset(n, &teacher, &target, &mut rng::stream(seed, &[1]));
        let a: Vec<f64> = (0..p).map(|j| (j as f64 - 2.5) / 3.0).collect();
        let s = random_student(d, a.clone(), ScalarFn::Tanh, seed);
        let perm: Vec<usize> = (0..p).map(|j| (j + shift) % p).collect();
        let mut q = StudentState {
            d,
            w: perm.iter().flat_map(|&j| s.row(j).to_vec()).collect(),
            readout: Readout::new(perm.iter().map(|&j| a[j]).collect(), ScalarFn::Tanh, false),
            twin: None,
        };
        let mut s = s;
        let rows: Vec<usize> = (0..n).collect();
        let mut ws = StepWorkspace::default();
        for _ in 0..3 {
            gd_step(&mut s, &data, &rows, 0.3, 0.01, GradNormalization::Sum, &mut ws).unwrap();
            gd_step(&mut q, &data, &rows, 0.3, 0.01, GradNormalization::Sum, &mut ws).unwrap();
            prop_assert_eq!(permute_rows(&s.overlap(&teacher), &perm), q.overlap(&teacher));
        }
    }

    #[test]
    fn projections_are_sign_blind(seed in 0u64..1000) {
        // the teacher projection is a norm, so flipping the teacher does not change it
        let t = targets::resolve("tanh").unwrap();
        let pr = directions::resolve("teacher", &t).unwrap();
        let mut r = rng::stream(seed, &[3]);
        let mut v = vec![0.0; 4];
        rng::fill_normal(&mut r, &mut v);
        let m = DMatrix::from_column_slice(4, 1, &v);
        prop_assert!((pr.apply(&m) - pr.apply(&(-m.clone()))).abs() < 1e-15);
    }
}

#[test]
fn reused_steps_span_the_easy_subspace() {
    // p = 8 on z1 + z1 z2: the smallest singular value of M leaves the M0 noise
    // floor; at d = 2000 it is clear of it from about t = 4
    let d = 2000;
    let cfg = config(d, 8, 0.3, 6, 3, ScalarFn::Relu);
    let t = targets::resolve("easy_multi").unwrap();
    for run in 0..cfg.runs {
        let tr = gdsim::train_run(&cfg, &t, run).unwrap();
        let smin: Vec<f64> = tr.m.iter().map(|m| m.clone().singular_values().min()).collect();
        assert!(smin[6] > 0.2 && smin[6] > 3.0 * smin[0], "run {run}: {smin:?}");
    }
}
