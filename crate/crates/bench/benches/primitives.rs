use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use corrmatch_core::Tensor;

fn filled(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::leaf(shape, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = filled(&[64, 256], &mut rng);
    let b = filled(&[256, 64], &mut rng);
    c.bench_function("matmul_64x256x64", |bench| {
        bench.iter(|| a.matmul(&b).unwrap())
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = filled(&[3, 32, 32], &mut rng);
    let kernel = filled(&[16, 3, 3, 3], &mut rng);
    c.bench_function("conv2d_3x32x32_to_16", |bench| {
        bench.iter(|| image.conv2d(&kernel, 1, 1).unwrap())
    });
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = filled(&[4, 32, 32], &mut rng);
    c.bench_function("softmax_4x32x32_axis0", |bench| {
        bench.iter(|| logits.softmax(0).unwrap())
    });
}

fn bench_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ones = Tensor::leaf(&[32, 1], vec![1.0; 32]).unwrap();
    c.bench_function("matmul_relu_reduce_backward", |bench| {
        bench.iter_batched(
            || {
                let a = filled(&[32, 128], &mut rng);
                let w_data: Vec<f64> = (0..128 * 32).map(|_| rng.gen_range(-0.1..0.1)).collect();
                let w = Tensor::param(&[128, 32], w_data).unwrap();
                (a, w)
            },
            |(a, w)| {
                let out = a.matmul(&w).unwrap().relu();
                let loss = ones
                    .transpose()
                    .unwrap()
                    .matmul(&out)
                    .unwrap()
                    .matmul(&ones)
                    .unwrap();
                loss.backward().unwrap();
                loss
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_matmul, bench_conv2d, bench_softmax, bench_backward);
criterion_main!(benches);
