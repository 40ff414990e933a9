use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deformreg::diffeo::{generate_dvf, RandomizationParams};
use deformreg::drr::{default_geometry, default_step, render_drr};
use deformreg::net::{Mode, Network, NetworkConfig, Tensor};
use deformreg::par;
use deformreg::phantom::{centered_grid, chest_phantom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Thread counts to compare: sequential against everything available.
fn thread_counts() -> Vec<usize> {
    let n = par::num_threads();
    if n > 1 {
        vec![1, n]
    } else {
        vec![1]
    }
}

fn drr(c: &mut Criterion) {
    let vol = chest_phantom(centered_grid(32, 3.0).unwrap()).unwrap();
    let (k, e) = default_geometry(vol.grid(), [64, 64]).unwrap();
    let step = default_step(vol.grid());
    let mut group = c.benchmark_group("render_drr_64x64");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || render_drr(&vol, &k, &e, step).unwrap()))
        });
    }
    group.finish();
}

fn dvf(c: &mut Criterion) {
    let grid = centered_grid(24, 4.0).unwrap();
    let params = RandomizationParams {
        t_max: 20,
        ..RandomizationParams::default()
    };
    let mut group = c.benchmark_group("generate_dvf_24cubed");
    group.sample_size(10);
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                par::with_threads(t, || generate_dvf(&grid, &params, &mut rng).unwrap())
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let cfg = NetworkConfig::default();
    let [h, w] = cfg.input_size;
    let x = Tensor::<f32>::zeros(vec![4, 1, h, w]);
    let mut group = c.benchmark_group("network_forward_backward_batch4");
    group.sample_size(10);
    for t in thread_counts() {
        let mut net = Network::<f32>::new(cfg.clone()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    let y = net.forward(&x, Mode::Train).unwrap();
                    net.backward(&y).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, drr, dvf, network);
criterion_main!(benches);
