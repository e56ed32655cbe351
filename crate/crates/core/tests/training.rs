use botaclip::encoders::{BotaniaDims, Parameterized};
use botaclip::io::{generate_synthetic, SynthConfig, SyntheticData};
use botaclip::losses::BOTASP_LAMBDA;
use botaclip::spatial::{FoldAssignment, SplitConfig};
use botaclip::train::{
    top_k_accuracy, train_botaclip, train_botania, train_botasp, BotaspConfig, ModelConfig, TrainConfig,
};
use botaclip::{Matrix, Rng};

const LN2: f64 = std::f64::consts::LN_2;

fn small_model() -> ModelConfig {
    ModelConfig {
        botania: BotaniaDims {
            input: 0,
            hidden1: 32,
            hidden2: 16,
            classes: 8,
        },
        ..ModelConfig::default()
    }
}

fn small_synth(seed: u64) -> SyntheticData {
    generate_synthetic(&SynthConfig {
        pairs: 256,
        img_dim: 16,
        n_species: 24,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn buffered(data: &SyntheticData, seed: u64) -> FoldAssignment {
    FoldAssignment::build(&data.dataset.locations, &SplitConfig::default(), &mut Rng::new(seed)).unwrap()
}

/// Two classes, each owning a disjoint block of three species.
fn block_cover(n: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let cover = Matrix::from_fn(n, 6, |i, j| {
        if j / 3 == labels[i] {
            rng.uniform_range(20.0, 80.0)
        } else {
            rng.uniform_range(0.0, 5.0)
        }
    });
    (cover, labels)
}

fn botania_toy(seed: u64, cfg: &TrainConfig) -> (f64, botaclip::train::TrainLog) {
    let (cover, labels) = block_cover(80, &mut Rng::new(seed));
    let train: Vec<usize> = (0..60).collect();
    let val: Vec<usize> = (60..80).collect();
    let dims = BotaniaDims {
        input: 6,
        hidden1: 16,
        hidden2: 8,
        classes: 2,
    };
    let (model, log) = train_botania(&cover, &labels, &train, &val, dims, &TrainConfig { seed, ..*cfg }).unwrap();
    let logits = model.infer_logits(&cover.select_rows(&val)).unwrap();
    let y: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    (top_k_accuracy(&logits, &y, 1).unwrap(), log)
}

#[test]
fn botania_separates_block_classes() {
    let cfg = TrainConfig {
        max_epochs: 50,
        batch_size: 16,
        patience: 50,
        ..TrainConfig::botania()
    };
    assert_eq!(cfg.optimizer.lr, 0.3);
    for seed in 0..5 {
        let (acc, log) = botania_toy(seed, &cfg);
        assert!(log.records.len() <= 50);
        assert_eq!(acc, 1.0, "seed {seed}");
    }
}

#[test]
fn botania_early_stops() {
    let cfg = TrainConfig {
        max_epochs: 300,
        batch_size: 16,
        patience: 3,
        ..TrainConfig::botania()
    };
    let (_, log) = botania_toy(0, &cfg);
    let last = log.records.last().unwrap().epoch;
    assert!(log.stopped_early);
    assert!(log.records.len() < 300);
    assert!(log.best_epoch < last);
    assert_eq!(last - log.best_epoch, 3);
}

#[test]
fn contrastive_training_beats_chance_and_keeps_inputs() {
    let data = small_synth(1);
    let split = buffered(&data, 1);
    let before = data.dataset.images.clone();
    let cfg = TrainConfig {
        max_epochs: 60,
        seed: 1,
        ..TrainConfig::botaclip()
    };
    let (_, log) = train_botaclip(&data.dataset, &split, &cfg, &small_model(), None).unwrap();
    let best = log.best().unwrap();
    assert!(best.scl < LN2, "validation SCL {} ≥ ln 2", best.scl);
    assert_eq!(best.epoch, log.best_epoch);
    // frozen image embeddings are never written to
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        data.dataset.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn training_is_deterministic() {
    let data = small_synth(2);
    let split = buffered(&data, 2);
    let cfg = TrainConfig {
        max_epochs: 5,
        seed: 9,
        ..TrainConfig::botaclip()
    };
    let (a, log_a) = train_botaclip(&data.dataset, &split, &cfg, &small_model(), None).unwrap();
    let (b, log_b) = train_botaclip(&data.dataset, &split, &cfg, &small_model(), None).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    assert_eq!(log_a, log_b);
    let other = TrainConfig { seed: 10, ..cfg };
    let (c, _) = train_botaclip(&data.dataset, &split, &other, &small_model(), None).unwrap();
    assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
}

#[test]
fn botasp_bce_decreases_without_regularizer() {
    let data = small_synth(4);
    let split = buffered(&data, 4);
    let firsts = data.dataset.first_views(&(0..data.dataset.n_pairs()).collect::<Vec<_>>());
    let x = data.dataset.images.select_rows(&firsts);
    let cfg = TrainConfig {
        lambda: 0.0,
        max_epochs: 5,
        patience: 5,
        batch_size: 32,
        ..TrainConfig::botasp()
    };
    assert_eq!(TrainConfig::botasp().lambda, BOTASP_LAMBDA);
    let arch = BotaspConfig {
        hidden: 32,
        ..BotaspConfig::default()
    };
    let (_, log) = train_botasp(&x, &data.presence.values, &split.train(), &split.validation(), &arch, &cfg)
        .unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "training BCE {losses:?}");
}

/// 1-NN retrieval of the vegetation class from training images: a random
/// split puts same-cell neighbours on both sides and inflates the score.
#[test]
fn random_split_overestimates_retrieval() {
    let mut gaps = Vec::new();
    for seed in 0..6 {
        let data = generate_synthetic(&SynthConfig {
            pairs: 512,
            img_dim: 32,
            views_per_pair: 1,
            noise: 0.2,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let classes = data.dataset.classes.clone().unwrap();
        let split = buffered(&data, seed);
        let (train, val) = (split.train(), split.validation());
        let mut order: Vec<usize> = (0..data.dataset.n_pairs()).collect();
        Rng::new(seed).substream("random-split", 0).shuffle(&mut order);
        let (rand_val, rest) = order.split_at(val.len());
        let rand_train = &rest[..train.len().min(rest.len())];
        let x = &data.dataset.images;
        let retrieval = |train: &[usize], val: &[usize]| {
            let hits = val
                .iter()
                .filter(|&&q| {
                    let nearest = train
                        .iter()
                        .copied()
                        .max_by(|&a, &b| {
                            let sa = botaclip::numerics::dot(x.row(q), x.row(a));
                            let sb = botaclip::numerics::dot(x.row(q), x.row(b));
                            sa.total_cmp(&sb)
                        })
                        .unwrap();
                    classes[nearest] == classes[q]
                })
                .count();
            hits as f64 / val.len() as f64
        };
        let spatial = retrieval(&train, &val);
        let random = retrieval(rand_train, rand_val);
        gaps.push(random - spatial);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(gaps.iter().all(|&g| g > 0.0) && mean > 0.05, "random − buffered retrieval gaps {gaps:?}");
}
