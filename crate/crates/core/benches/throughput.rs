//! Throughput of the data-parallel hot paths.
//!
//! Every group is named after the backend it was built with, so the two
//! builds can be compared side by side in the criterion report:
//!
//! ```text
//! cargo bench -p facerestore --bench throughput
//! cargo bench -p facerestore --bench throughput --no-default-features
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use facerestore::degrade::{degrade, DegradeConfig, KernelKind};
use facerestore::flowcore::{euler_sample, Conditioning, SamplerConfig, VelocityArch, VelocityModel};
use facerestore::nn::layers::Conv2d;
use facerestore::nn::params::ParamSet;
use facerestore::nn::tensor::Tensor;
use facerestore::rng::{self, SeededRng};
use facerestore::synthgen::{self, AttrVector, IdentityLatent, ATTR_COUNT, DEFAULT_SIZE};
use facerestore::{par, Image};

fn backend() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn random_tensor(n: usize, c: usize, s: usize, r: &mut SeededRng) -> Tensor<f32> {
    let data = (0..n * c * s * s).map(|_| rng::gaussian(r)).collect();
    Tensor::from_vec(n, c, s, s, data)
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("conv3x3/{}", backend()));
    g.sample_size(20);
    let mut r = rng::rng_from(1);
    let mut ps = ParamSet::<f32>::new();
    let layer = Conv2d::new(&mut ps, "c", 16, 16, 3, &mut r);
    for batch in [1usize, 8] {
        let x = random_tensor(batch, 16, DEFAULT_SIZE, &mut r);
        let y = layer.forward(&ps, &x);
        g.bench_with_input(BenchmarkId::new("forward", batch), &x, |b, x| {
            b.iter(|| black_box(layer.forward(&ps, x)))
        });
        g.bench_with_input(BenchmarkId::new("backward", batch), &x, |b, x| {
            let mut grads = ps.zeros_like();
            b.iter(|| black_box(layer.backward(&ps, x, &y, Some(&mut grads), true)))
        });
    }
    g.finish();
}

fn velocity_net(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("velocity_net/{}", backend()));
    g.sample_size(10);
    let model = VelocityModel::new(VelocityArch::default(), 3);
    let net = &model.net;
    let mut r = rng::rng_from(2);
    for batch in [1usize, 8] {
        let zt = random_tensor(batch, 3, DEFAULT_SIZE, &mut r);
        let lq = random_tensor(batch, 3, DEFAULT_SIZE, &mut r);
        let t: Vec<f32> = (0..batch).map(|i| (i as f32 + 0.5) / batch as f32).collect();
        let attrs = vec![0.5f32; batch * ATTR_COUNT];
        g.bench_function(BenchmarkId::new("forward_backward", batch), |b| {
            let mut grads = net.params.zeros_like();
            b.iter(|| {
                let pass = net.forward(&zt, &lq, &t, &attrs);
                net.backward(&pass, &pass.v, &mut grads);
                black_box(&grads);
            })
        });
    }
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("euler_sample/{}", backend()));
    g.sample_size(10);
    let model = VelocityModel::new(VelocityArch::default(), 4);
    let lq = Image::filled(DEFAULT_SIZE, DEFAULT_SIZE, 3, 0.5);
    let cond = Conditioning::new(lq, AttrVector::template(ATTR_COUNT));
    let cfg = SamplerConfig { steps: 10, ..SamplerConfig::default() };
    g.bench_function("10_steps", |b| b.iter(|| black_box(euler_sample(&model, &cond, &cfg).unwrap())));
    g.finish();
}

fn data_pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("data/{}", backend()));
    g.sample_size(10);
    let faces: Vec<Image> = par::map_range(16, |i| {
        let mut r = rng::rng_from(rng::derive(5, rng::purpose::CORPUS, i as u64));
        let id = IdentityLatent::random(&mut r);
        synthgen::render_face(&id, &AttrVector::template(ATTR_COUNT)).unwrap()
    });
    g.bench_function("render_16", |b| {
        b.iter(|| {
            black_box(par::map_range(16, |i| {
                let mut r = rng::rng_from(rng::derive(5, rng::purpose::CORPUS, i as u64));
                let id = IdentityLatent::random(&mut r);
                synthgen::render_face(&id, &AttrVector::template(ATTR_COUNT)).unwrap()
            }))
        })
    });
    let cfg = DegradeConfig {
        kernel: KernelKind::Gaussian,
        kernel_sigma: 1.5,
        down_scale: 4,
        noise_sigma: 0.03,
        jpeg_quality: 60,
        seed: 9,
    };
    g.bench_function("degrade_16", |b| {
        b.iter(|| black_box(par::map_slice(&faces, |f| degrade(f, &cfg).unwrap())))
    });
    g.finish();
}

criterion_group!(benches, conv, velocity_net, sampler, data_pipeline);
criterion_main!(benches);
