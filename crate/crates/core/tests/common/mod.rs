#![allow(dead_code)]

use metnet::corpus::Corpus;
use metnet::data::{LossVariant, TrainConfig};
use metnet::embedding::EmbeddingStore;
use metnet::loss::{build_prototypes, episode_loss, episode_loss_value, LossSettings, PrototypeSet, TokenBatch};
use metnet::net::{init_params, NetShape, TripletNetParams};
use metnet::rng::{indexed_stream, Rng};
use metnet::synth::{generate, SynthSpec};
use ndarray::Array2;
use rand::Rng as _;

/// A tiny episode built straight from random vectors: three slots, every
/// slot labeled at least once, at least one O token, at most ten tokens.
pub struct ToyEpisode {
    pub params: TripletNetParams<f64>,
    pub protos: PrototypeSet,
    pub tokens: TokenBatch,
    pub settings: LossSettings,
}

pub const TOY_DIM: usize = 4;
pub const TOY_SHAPE: NetShape = NetShape {
    dim_in: TOY_DIM,
    hidden1: 8,
    hidden2: 4,
    n_margins: 3,
};

pub fn toy_episode(case: u64, variant: LossVariant) -> ToyEpisode {
    let mut rng: Rng = indexed_stream(0x7e57, "toy", case);
    let n_tokens = rng.random_range(5..=10usize);
    let mut labels: Vec<Option<usize>> = vec![Some(0), Some(1), Some(2), None];
    while labels.len() < n_tokens {
        let l = rng.random_range(0..4usize);
        labels.push((l < 3).then_some(l));
    }
    // shuffle so slot order and token order are unrelated
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let embeddings = Array2::from_shape_simple_fn((n_tokens, TOY_DIM), || rng.random_range(-1.0..1.0));
    let protos = build_prototypes(embeddings.view(), &labels, 3).unwrap();
    let mut params = init_params(TOY_SHAPE, case).unwrap().to_f64();
    let margins = TOY_SHAPE.margin_range();
    for v in &mut params.values_mut()[margins] {
        *v = rng.random_range(0.5..3.0);
    }
    let settings = LossSettings {
        variant,
        alpha: rng.random_range(0.1..0.9),
        fixed_margin: rng.random_range(0.5..3.0),
        neg_per_class: rng.random_range(1..=3usize),
    };
    ToyEpisode {
        params,
        protos,
        tokens: TokenBatch::new(embeddings, labels).unwrap(),
        settings,
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter (weights, biases and margins).
pub fn max_gradient_error(ep: &ToyEpisode, h: f64) -> f64 {
    let (_, grad) = episode_loss(&ep.params, &ep.protos, &ep.tokens, &ep.settings, None).unwrap();
    let mut probe = ep.params.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.values().len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = episode_loss_value(&probe, &ep.protos, &ep.tokens, &ep.settings).unwrap();
        probe.values_mut()[i] = orig - h;
        let down = episode_loss_value(&probe, &ep.protos, &ep.tokens, &ep.settings).unwrap();
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.values()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Synthetic corpus split into training types and held-out test types.
pub struct SynthSplit {
    pub train: Corpus,
    pub test: Corpus,
    pub store: EmbeddingStore,
}

pub fn synth_split(spec: &SynthSpec) -> SynthSplit {
    let (corpus, store) = generate(spec).unwrap();
    let held = spec.held_out_types();
    let held: Vec<&str> = held.iter().map(String::as_str).collect();
    let (train, test) = corpus.split_by_types(&held).unwrap();
    SynthSplit { train, test, store }
}

/// The hyper-parameters of the desk-scale runs: T=3, gamma=0.2,
/// beta=1e-4, alpha=0.3, SGD.
pub fn desk_config() -> TrainConfig {
    TrainConfig::default()
}
