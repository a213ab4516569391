use criterion::{black_box, criterion_group, criterion_main, Criterion};

use prefdyn::diffusion::{make_ddpm_schedule, Denoiser};
use prefdyn::dynamics::ntk_kernel;
use prefdyn::losses::{dpo_loss, pgdpo_loss, LossConfig};
use prefdyn::net::{self, init_params, NetArch};
use prefdyn::verify::random_config;

fn default_model() -> Denoiser {
    Denoiser::new(
        NetArch::for_data(2, 2, 64, 2).unwrap(),
        make_ddpm_schedule(50, 1e-4, 0.02).unwrap(),
    )
}

fn network(c: &mut Criterion) {
    let arch = NetArch::for_data(2, 2, 64, 2).unwrap();
    let p = init_params(&arch, 0);
    let (x, cond, u) = ([0.3, -0.2], [0.5, 0.1], [1.0, -1.0]);
    c.bench_function("forward", |b| {
        b.iter(|| net::forward(&arch, &p, black_box(&x), 0.4, &cond).unwrap())
    });
    c.bench_function("vjp", |b| {
        b.iter(|| net::vjp(&arch, &p, black_box(&x), 0.4, &cond, &u).unwrap())
    });
    c.bench_function("jacobian", |b| {
        b.iter(|| net::jacobian(&arch, &p, black_box(&x), 0.4, &cond).unwrap())
    });
}

fn losses_and_kernels(c: &mut Criterion) {
    let model = default_model();
    let set = random_config(&model, 0, (2, 50)).unwrap();
    let cfg = LossConfig::default();
    c.bench_function("dpo_loss", |b| {
        b.iter(|| {
            dpo_loss(
                &model,
                black_box(&set.params),
                &set.ref_params,
                &set.pair,
                &cfg,
            )
            .unwrap()
        })
    });
    c.bench_function("pgdpo_loss", |b| {
        b.iter(|| {
            pgdpo_loss(
                &model,
                black_box(&set.params),
                &set.ref_params,
                &set.pair,
                &cfg,
            )
            .unwrap()
        })
    });
    let (a, bl) = (set.pair.chosen().latent(), set.held_out.latent());
    c.bench_function("ntk_kernel", |b| {
        b.iter(|| ntk_kernel(&model, black_box(&set.params), &a, &bl).unwrap())
    });
}

criterion_group!(benches, network, losses_and_kernels);
criterion_main!(benches);
