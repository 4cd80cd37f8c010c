use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use multipass_core::dmft::{self, DmftConfig, DmftModel};
use multipass_core::gdsim::{self, generate_dataset, BatchSchedule, GradNormalization, SecondLayer, StepWorkspace, TeacherKind, TrainConfig};
use multipass_core::hardness::{moment_quadrature, Direction};
use multipass_core::{rng, targets, ScalarFn};
use std::hint::black_box;

fn gd_step(c: &mut Criterion) {
    let target = targets::resolve("leap3_multi").unwrap();
    for (d, p) in [(500, 8), (2000, 8)] {
        let cfg = TrainConfig {
            d,
            alpha: 3.0,
            p,
            eta: 0.3,
            lambda: 0.0,
            steps: 1,
            schedule: BatchSchedule::FullBatchReuse,
            seed: 0,
            runs: 1,
            activation: ScalarFn::Relu,
            second_layer: SecondLayer::PlusMinus,
            grad_normalization: GradNormalization::Sum,
            teacher: TeacherKind::Random,
        };
        let teacher = gdsim::run_teacher(&cfg, 2, 0).unwrap();
        let data = generate_dataset(cfg.n(), &teacher, &target, &mut rng::stream(0, &[1]));
        let rows: Vec<usize> = (0..cfg.n()).collect();
        let student = gdsim::run_student(&cfg, 0);
        let mut ws = StepWorkspace::default();
        c.bench_function(&format!("gd_step d={d} p={p} n=3d"), |b| {
            b.iter_batched(
                || student.clone(),
                |mut s| gdsim::gd_step(&mut s, &data, &rows, 0.3, 0.0, GradNormalization::Sum, &mut ws).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

fn dmft_integrate(c: &mut Criterion) {
    let target = targets::resolve("staircase3").unwrap();
    let model = DmftModel::symmetric(4, ScalarFn::Relu).unwrap();
    let mut g = c.benchmark_group("dmft");
    g.sample_size(10);
    for steps in [2, 4] {
        let cfg = DmftConfig { n_samples: 10_000, ..DmftConfig::new(3.0, 0.2, 0.0, steps) };
        g.bench_function(format!("two_process p=4 T={steps} n=1e4"), |b| {
            b.iter(|| dmft::integrate(black_box(&cfg), &target, &model).unwrap())
        });
    }
    g.finish();
}

fn quadrature(c: &mut Criterion) {
    let t = targets::resolve("z1z2z3_he3").unwrap();
    let dir = Direction::axis(4, 3).unwrap();
    c.bench_function("moment_quadrature k=4 power=3", |b| {
        b.iter(|| moment_quadrature(black_box(&t), &dir, 3).unwrap())
    });
}

criterion_group!(benches, gd_step, dmft_integrate, quadrature);
criterion_main!(benches);
