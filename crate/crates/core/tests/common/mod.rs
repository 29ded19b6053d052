#![allow(dead_code)]

use etrag::corpus::{generate_synthetic, SyntheticTask, SyntheticTaskConfig};
use etrag::encoder::EncoderConfig;
use etrag::generator::GeneratorConfig;
use etrag::pipeline::ModelConfig;
use etrag::retriever::Database;
use etrag::training::{LossItem, TrainConfig};

/// A handful of instances over a tiny vocabulary.
pub fn tiny_task(n_train: usize, seed: u64) -> SyntheticTask {
    let cfg = SyntheticTaskConfig {
        n_labels: 3,
        n_entities: 4,
        vocab_size: 30,
        sentence_len: (4, 6),
        n_train,
        n_dev: 2,
        n_test: 2,
        seed,
        ..Default::default()
    };
    generate_synthetic(&cfg).unwrap()
}

pub fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { vocab_size: vocab, d_enc: 4, n_out: 3, pos_dim: 2, ..Default::default() },
        generator: GeneratorConfig { vocab_size: vocab, d_model: 4, d_dec: 4, pos_dim: 2, prompt_dim: 3 },
        max_input_len: 24,
        beam: 4,
    }
}

/// Every instance queries all the others.
pub fn leave_one_out(db: &Database) -> Vec<LossItem<'_>> {
    (0..db.len())
        .map(|i| LossItem { inst: &db.instances[i], subset: (0..db.len()).filter(|&j| j != i).collect(), pick: None })
        .collect()
}

/// Small but complete training config for fast runs.
pub fn quick_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        k: 2,
        warmup_steps: 5,
        subset_size: 4,
        batch_size: 4,
        eval_every: 5,
        patience: 2,
        max_steps: 20,
        seed,
        ..Default::default()
    }
}

use etrag::encoder::InstanceEmbedding;
use etrag::matrix::Matrix;
use etrag::params::uniform;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A random `l×n` embedding with rows of random positive scale.
pub fn random_embedding(rng: &mut ChaCha8Rng, l: usize, n: usize) -> InstanceEmbedding {
    InstanceEmbedding { rows: uniform(rng, l, n, 2.0), source: "random".into() }
}

/// An embedding at exactly distance `d` from `query`: every row makes the
/// angle `acos(1 − 2d)` with the matching query row.
pub fn at_distance(rng: &mut ChaCha8Rng, query: &InstanceEmbedding, d: f64) -> InstanceEmbedding {
    let (l, n) = query.rows.shape();
    let cos = 1.0 - 2.0 * d;
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let mut rows = Vec::with_capacity(l * n);
    for r in 0..l {
        let q = unit(query.rows.row(r).to_vec());
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dot: f64 = raw.iter().zip(&q).map(|(a, b)| a * b).sum();
        let u = unit(raw.iter().zip(&q).map(|(a, b)| a - dot * b).collect());
        let scale = rng.gen_range(0.5..2.0);
        rows.extend(q.iter().zip(&u).map(|(a, b)| scale * (cos * a + sin * b)));
    }
    InstanceEmbedding { rows: Matrix::from_vec(l, n, rows).unwrap(), source: "fixture".into() }
}

/// A query and a database whose `k + 1` nearest distances are separated by
/// at least `gap`, with every other distance at least `gap` beyond them.
/// Returns the embeddings and the true distances.
pub fn gapped_database(
    rng: &mut ChaCha8Rng,
    size: usize,
    k: usize,
    gap: f64,
) -> (InstanceEmbedding, Vec<InstanceEmbedding>, Vec<f64>) {
    let query = random_embedding(rng, 3, 8);
    let mut dists: Vec<f64> = Vec::with_capacity(size);
    let mut d = rng.gen_range(0.0..0.05);
    for _ in 0..=k.min(size - 1) {
        dists.push(d);
        d += gap + rng.gen_range(0.0..0.01);
    }
    let floor = d;
    while dists.len() < size {
        dists.push(rng.gen_range(floor..1.0));
    }
    dists.shuffle(rng);
    let db = dists.iter().map(|&d| at_distance(rng, &query, d)).collect();
    (query, db, dists)
}
