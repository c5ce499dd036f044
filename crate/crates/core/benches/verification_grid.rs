//! Verification-grid evaluation of a dilation path, parallel against
//! sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use opc_core::dilation::{build_shift, schaffer_path};
use opc_core::instances::{uniform_grid, ScalarFn, TargetPath};
use opc_core::kernel::{self, c};
use opc_core::{par, Tolerances};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn residual_grid(crit: &mut Criterion) {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = kernel::random_matrix(&mut rng, 4, 4);
    let base = &base * c(1.0 / kernel::op_norm(&base), 0.0);
    let d = TargetPath::single(ScalarFn::wave(c(0.5, 0.0), 1.0), base);
    let model = build_shift(4, 24).unwrap();
    let (w, _) = schaffer_path(&model, &d, &uniform_grid(3), 1.0, &tol).unwrap();
    let residual = |t: &f64| -> f64 {
        let v = w.eval(*t).unwrap();
        kernel::op_norm(&(v.adjoint() * &model.u * &v - d.eval(*t)))
    };

    let mut group = crit.benchmark_group("verification_grid");
    group.sample_size(10);
    for n in [64usize, 256, 1024] {
        let grid = uniform_grid(n);
        group.bench_with_input(BenchmarkId::new("parallel", n), &grid, |b, g| b.iter(|| par::map(g, residual)));
        group.bench_with_input(BenchmarkId::new("sequential", n), &grid, |b, g| b.iter(|| par::map_seq(g, residual)));
    }
    group.finish();
}

criterion_group!(benches, residual_grid);
criterion_main!(benches);
