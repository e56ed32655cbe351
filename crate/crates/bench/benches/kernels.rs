//! Hot kernels: contrastive loss and its gradient, the regularizer, one
//! alignment training step, forest fitting and the spatial split.

use std::hint::black_box;

use botaclip::data::PairedDataset;
use botaclip::encoders::BotaniaDims;
use botaclip::forest::{fit_classifier, ForestConfig};
use botaclip::io::{generate_synthetic, SynthConfig};
use botaclip::losses::{scl_logits, sigmoid_contrastive_grad, sigmoid_contrastive_loss, PairLabels, ScalarsTauB, SimilarityTarget};
use botaclip::numerics::l2_normalize_rows;
use botaclip::spatial::{FoldAssignment, SplitConfig};
use botaclip::train::{train_botaclip, ModelConfig, TrainConfig};
use botaclip::{Matrix, Rng};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn unit(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    l2_normalize_rows(&Matrix::from_fn(n, d, |_, _| rng.normal())).unwrap()
}

fn losses(c: &mut Criterion) {
    let mut g = c.benchmark_group("losses");
    for n in [64, 256] {
        let (zi, zt) = (unit(n, 768, 1), unit(n, 768, 2));
        let s = ScalarsTauB::default();
        let labels = PairLabels::new(n);
        g.bench_with_input(BenchmarkId::new("scl", n), &n, |b, _| {
            b.iter(|| {
                let logits = scl_logits(black_box(&zi), black_box(&zt), &s).unwrap();
                sigmoid_contrastive_loss(&logits, &labels).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("scl_grad", n), &n, |b, _| {
            b.iter(|| sigmoid_contrastive_grad(black_box(&zi), black_box(&zt), &s).unwrap())
        });
        let target = SimilarityTarget::new(&zi).unwrap();
        g.bench_with_input(BenchmarkId::new("regularizer_grad", n), &n, |b, _| {
            b.iter(|| target.value_and_grad(black_box(&zt)).unwrap())
        });
    }
    g.finish();
}

fn small_dataset() -> PairedDataset {
    generate_synthetic(&SynthConfig {
        pairs: 256,
        img_dim: 64,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn training(c: &mut Criterion) {
    let data = small_dataset();
    let split = FoldAssignment::build(&data.locations, &SplitConfig::default(), &mut Rng::new(0)).unwrap();
    let model = ModelConfig {
        botania: BotaniaDims {
            input: 0,
            hidden1: 128,
            hidden2: 64,
            classes: 8,
        },
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::botaclip()
    };
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("botaclip_epoch_256_pairs", |b| {
        b.iter(|| train_botaclip(black_box(&data), &split, &cfg, &model, None).unwrap())
    });
    g.finish();
}

fn forest(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let x = Matrix::from_fn(400, 64, |_, _| rng.normal());
    let y: Vec<u8> = (0..400).map(|i| u8::from(x.get(i, 0) + 0.5 * x.get(i, 1) > 0.0)).collect();
    let cfg = ForestConfig {
        n_trees: 20,
        ..ForestConfig::default()
    };
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    g.bench_function("classifier_20_trees_400x64", |b| {
        b.iter(|| fit_classifier(black_box(&x), &y, &cfg).unwrap())
    });
    g.finish();
}

fn split(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let points: Vec<(f64, f64)> = (0..10_000)
        .map(|_| (rng.uniform_range(0.0, 250_000.0), rng.uniform_range(0.0, 250_000.0)))
        .collect();
    c.bench_function("buffered_split_10k", |b| {
        b.iter(|| FoldAssignment::build(black_box(&points), &SplitConfig::default(), &mut Rng::new(0)).unwrap())
    });
}

criterion_group!(benches, losses, training, forest, split);
criterion_main!(benches);
