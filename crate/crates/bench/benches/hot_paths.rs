// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mifin_bench::{bench_model, PROMPT};
use mifin_core::patching::{builtin_pairs, parse_pairs, patch_scan, Direction, Granularity};
use mifin_core::sae::{train_sae, SaeConfig, TrainParams};
use mifin_core::synthetic::SyntheticSpec;
use mifin_core::Capture;

fn forward(c: &mut Criterion) {
    let b = bench_model();
    let ids = b.encode(PROMPT);
    c.bench_function("forward_12_tokens", |bench| {
        bench.iter(|| b.forward(black_box(&ids), &Capture::none()).unwrap())
    });
    let all = Capture::resid_post_all(b.config.n_layers);
    c.bench_function("forward_with_resid_capture", |bench| {
        bench.iter(|| b.forward(black_box(&ids), &all).unwrap())
    });
}

fn sae_epoch(c: &mut Criterion) {
    let synth = SyntheticSpec {
        rows: 4096,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap();
    let cfg = SaeConfig {
        d_in: 16,
        d_hid: 128,
        alpha: 0.1,
        seed: 0,
    };
    let params = TrainParams {
        epochs: 1,
        holdout_fraction: 0.0,
        ..TrainParams::default()
    };
    c.bench_function("sae_epoch_4096x16_to_128", |bench| {
        bench.iter(|| train_sae(&synth.store, &cfg, &params).unwrap())
    });
}

fn patching(c: &mut Criterion) {
    let b = bench_model();
    let set = parse_pairs(&b, builtin_pairs("finance-pairs").unwrap().as_bytes()).unwrap();
    let pairs = &set.pairs[..2];
    let mut g = c.benchmark_group("patch_scan");
    g.sample_size(10);
    g.bench_function("head_2_pairs", |bench| {
        bench.iter(|| patch_scan(&b, pairs, Granularity::LayerHead, Direction::Denoising).unwrap())
    });
    g.bench_function("position_2_pairs", |bench| {
        bench.iter(|| patch_scan(&b, pairs, Granularity::LayerPosition, Direction::Denoising).unwrap())
    });
    g.finish();
}

criterion_group!(benches, forward, sae_epoch, patching);
criterion_main!(benches);
