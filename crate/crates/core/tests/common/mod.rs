#![allow(dead_code)]

use coapt::autodiff::Tensor;
use coapt::classifier::{Backbone, ClassQuery};
use coapt::encoders::{build_frozen_encoders, random_token_table, EncoderConfig, ImageInput};
use coapt::tokenizer::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

pub fn small_encoder(dim: usize) -> EncoderConfig {
    EncoderConfig {
        dim,
        depth: 2,
        heads: 2,
        ctx_len: 77,
        ffn_mult: 2,
        image_width: dim,
        image_depth: 1,
        patch_dim: 8,
        patches: 4,
    }
}

/// Class names `cls0..`, each with attribute words `cls{i}a{j}`.
pub fn class_queries(classes: usize, attrs: usize) -> Vec<ClassQuery> {
    (0..classes)
        .map(|i| ClassQuery::new(format!("cls{i}"), (0..attrs).map(|j| format!("cls{i}a{j}")).collect()))
        .collect()
}

/// Backbone whose vocabulary covers `classes × attrs` words plus `extra`.
pub fn backbone(seed: u64, cfg: &EncoderConfig, classes: usize, attrs: usize, toy_image: bool) -> Backbone {
    let mut words: Vec<String> = Vec::new();
    for q in class_queries(classes, attrs) {
        words.push(q.name.clone());
        words.extend(q.attrs);
    }
    let vocab = Vocabulary::build(&[words]).unwrap();
    let table = random_token_table(seed, vocab.size(), cfg.dim);
    let (text, image) = build_frozen_encoders(seed, cfg, table, toy_image).unwrap();
    Backbone { vocab, text, image }
}

pub fn feature_images(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<ImageInput> {
    (0..n)
        .map(|_| ImageInput::Feature(gaussian(1, dim, 1.0, rng)))
        .collect()
}

pub fn token_images(n: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Vec<ImageInput> {
    (0..n)
        .map(|_| ImageInput::Tokens(gaussian(cfg.patches, cfg.patch_dim, 1.0, rng)))
        .collect()
}
