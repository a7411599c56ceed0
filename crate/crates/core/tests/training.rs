mod common;

use common::{desk_config, synth_split};
use metnet::corpus::Corpus;
use metnet::data::{EpisodeConfig, LabelSet, LabeledSentence, OptimizerKind, TrainConfig};
use metnet::embedding::EmbeddingStore;
use metnet::inference::{evaluate, margin_region_predict, EvalOptions, RegionSet};
use metnet::net::{init_params, NetShape, TripletNetParams};
use metnet::sampler::{sample_episode, SamplerState};
use metnet::synth::SynthSpec;
use metnet::trainer::{outer_step, prepare_episode, test_adapt_and_predict, train, TrainerState};
use ndarray::{Array1, Array2};

fn small_shape() -> NetShape {
    NetShape::new(32, 5).with_hidden(32, 16)
}

#[test]
fn zero_meta_rate_leaves_params_unchanged() {
    let data = synth_split(&SynthSpec::separable(1));
    let ecfg = EpisodeConfig::new(5, 2, 2, 1).unwrap();
    let ep = sample_episode(&data.train, &ecfg, &mut SamplerState::new()).unwrap();
    let inputs = prepare_episode(&ep, &data.store).unwrap();
    let params = init_params(small_shape(), 1).unwrap();
    let mut state = TrainerState::new(params.clone(), 1);
    let cfg = TrainConfig {
        meta_lr: 0.0,
        ..desk_config()
    };
    let log = outer_step(&mut state, &[inputs], 2, &cfg).unwrap();
    assert_eq!(state.params, params);
    assert!(log.query_loss > 0.0);
    assert_eq!(state.epoch, 1);
}

#[test]
fn identical_state_and_episode_give_identical_update() {
    let data = synth_split(&SynthSpec::separable(2));
    let ecfg = EpisodeConfig::new(5, 2, 2, 2).unwrap();
    let ep = sample_episode(&data.train, &ecfg, &mut SamplerState::new()).unwrap();
    let inputs = prepare_episode(&ep, &data.store).unwrap();
    for optimizer in OptimizerKind::ALL {
        let cfg = TrainConfig {
            optimizer: *optimizer,
            ..desk_config()
        };
        let fresh = || TrainerState::new(init_params(small_shape(), 2).unwrap(), 2);
        let (mut a, mut b) = (fresh(), fresh());
        outer_step(&mut a, std::slice::from_ref(&inputs), 2, &cfg).unwrap();
        outer_step(&mut b, std::slice::from_ref(&inputs), 2, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, fresh().params);
    }
}

#[test]
fn zero_epochs_returns_initial_params() {
    let data = synth_split(&SynthSpec::separable(3));
    let ecfg = EpisodeConfig::new(5, 2, 2, 3).unwrap();
    let params = init_params(small_shape(), 3).unwrap();
    let state = TrainerState::new(params.clone(), 3);
    let out = train(&data.train, &data.store, &ecfg, &desk_config(), state, 0, |_, _| Ok(())).unwrap();
    assert_eq!(out.params, params);
    assert!(out.log.is_empty());
}

#[test]
fn too_few_margin_slots_rejected() {
    let data = synth_split(&SynthSpec::separable(3));
    let ecfg = EpisodeConfig::new(5, 2, 2, 3).unwrap();
    let state = TrainerState::new(init_params(NetShape::new(32, 4).with_hidden(8, 4), 3).unwrap(), 3);
    assert!(train(&data.train, &data.store, &ecfg, &desk_config(), state, 1, |_, _| Ok(())).is_err());
}

/// Mean query loss over the last ten of 200 outer steps against the first
/// step, with AdamW at 1e-3 (plain SGD at 1e-4 barely moves in 200 steps).
#[test]
fn two_hundred_outer_steps_halve_query_loss() {
    let data = synth_split(&SynthSpec::separable(0));
    let ecfg = EpisodeConfig::new(5, 5, 5, 0).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::AdamW,
        meta_lr: 1e-3,
        ..desk_config()
    };
    let state = TrainerState::new(init_params(NetShape::new(32, 5), 0).unwrap(), 0);
    let out = train(&data.train, &data.store, &ecfg, &cfg, state, 200, |_, _| Ok(())).unwrap();
    let first = out.log[0].query_loss;
    let tail = out.log[190..].iter().map(|l| l.query_loss).sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * first, "first {first}, last ten {tail}");
}

#[test]
fn evaluation_is_reproducible_and_single_episode_pools_trivially() {
    let data = synth_split(&SynthSpec::multimodal_o(4));
    let ecfg = EpisodeConfig::new(5, 2, 2, 40).unwrap();
    let params = init_params(small_shape(), 4).unwrap();
    let cfg = desk_config();
    let opts = EvalOptions {
        n_episodes: 1,
        workers: 1,
        train_labels: Some(data.train.label_set()),
    };
    let one = evaluate(&params, &data.test, &data.store, &ecfg, &cfg, &opts).unwrap();
    assert_eq!(one.n_episodes, 1);
    assert_eq!(one.micro_f1, one.episode_f1[0]);
    assert_eq!(one.std_episode_f1(), 0.0);

    let opts = EvalOptions { n_episodes: 6, ..opts };
    let a = evaluate(&params, &data.test, &data.store, &ecfg, &cfg, &opts).unwrap();
    let b = evaluate(&params, &data.test, &data.store, &ecfg, &cfg, &EvalOptions { workers: 4, ..opts }).unwrap();
    assert_eq!(a, b);

    let overlapping = EvalOptions {
        train_labels: Some(data.test.label_set()),
        ..opts
    };
    assert!(evaluate(&params, &data.test, &data.store, &ecfg, &cfg, &overlapping).is_err());
}

#[test]
fn test_adaptation_is_pure_and_repeatable() {
    let data = synth_split(&SynthSpec::multimodal_o(5));
    let ecfg = EpisodeConfig::new(5, 2, 2, 50).unwrap();
    let ep = sample_episode(&data.test, &ecfg, &mut SamplerState::new()).unwrap();
    let params = init_params(small_shape(), 5).unwrap();
    let before = params.checksum();
    let a = test_adapt_and_predict(&params, &ep, &data.store, 2, &desk_config()).unwrap();
    let b = test_adapt_and_predict(&params, &ep, &data.store, 2, &desk_config()).unwrap();
    assert_eq!(a, b);
    assert_eq!(params.checksum(), before);
    assert_eq!(a.len(), ep.query().len());
}

/// `y = relu(x) - relu(-x) = x`, written as a two-layer ReLU network.
fn identity_net(dim: usize, n_margins: usize, margin: f32) -> TripletNetParams<f32> {
    let shape = NetShape::new(dim, n_margins).with_hidden(2 * dim, dim);
    let mut values = Vec::with_capacity(shape.n_params());
    for i in 0..dim {
        for j in 0..2 * dim {
            values.push(if j == i { 1.0 } else if j == i + dim { -1.0 } else { 0.0 });
        }
    }
    values.extend(std::iter::repeat_n(0.0, 2 * dim));
    for j in 0..2 * dim {
        for k in 0..dim {
            values.push(if j == k { 1.0 } else if j == k + dim { -1.0 } else { 0.0 });
        }
    }
    values.extend(std::iter::repeat_n(0.0, dim));
    values.extend(std::iter::repeat_n(margin, n_margins));
    TripletNetParams::from_flat(shape, values).unwrap()
}

#[test]
fn no_adaptation_through_identity_net_is_raw_region_rule() {
    let labels = LabelSet::new(vec!["A".into(), "B".into()], "O").unwrap();
    let points: [(&str, [f32; 2]); 12] = [
        ("A", [0.0, 0.0]),
        ("O", [5.0, 5.0]),
        ("B", [3.0, 0.0]),
        ("A", [0.2, 0.1]),
        ("O", [-4.0, 1.0]),
        ("B", [3.1, -0.2]),
        ("A", [0.1, -0.3]),
        ("O", [1.5, 0.0]),
        ("B", [2.8, 0.3]),
        ("A", [-0.2, 0.2]),
        ("O", [0.0, 3.0]),
        ("B", [3.3, 0.1]),
    ];
    let mut store = EmbeddingStore::new(2).unwrap();
    let mut sentences = Vec::new();
    for (sid, chunk) in points.chunks(3).enumerate() {
        let tags: Vec<&str> = chunk.iter().map(|(t, _)| *t).collect();
        let tokens = (0..3).map(|i| format!("w{sid}{i}")).collect();
        for (i, (_, v)) in chunk.iter().enumerate() {
            store.insert(sid as u32, i as u32, v).unwrap();
        }
        sentences.push(LabeledSentence::from_tags(sid as u32, tokens, &tags, &labels).unwrap());
    }
    let corpus = Corpus::new(sentences, labels).unwrap();
    let ecfg = EpisodeConfig::new(2, 1, 1, 8).unwrap();
    let cfg = TrainConfig {
        inner_steps: 0,
        ..desk_config()
    };
    let params = identity_net(2, 2, 1.2);
    for counter in 0..5 {
        let ep = sample_episode(&corpus, &ecfg, &mut SamplerState::at(counter)).unwrap();
        let preds = test_adapt_and_predict(&params, &ep, &store, 1, &cfg).unwrap();

        // raw prototypes, raw query vectors, radius 1.2
        let mut centers = Array2::<f64>::zeros((2, 2));
        let mut counts = [0.0; 2];
        for s in ep.support() {
            for (i, l) in s.labels().iter().enumerate() {
                if let Some(slot) = ep.slot_of(*l) {
                    let v = store.get(s.sentence_id(), i as u32).unwrap();
                    centers[[slot, 0]] += v[0] as f64;
                    centers[[slot, 1]] += v[1] as f64;
                    counts[slot] += 1.0;
                }
            }
        }
        for slot in 0..2 {
            centers[[slot, 0]] /= counts[slot];
            centers[[slot, 1]] /= counts[slot];
        }
        let regions = RegionSet::new(centers, vec![1.2f32 as f64; 2]).unwrap();
        for (s, pred) in ep.query().iter().zip(&preds) {
            for (i, p) in pred.iter().enumerate() {
                let v = store.get(s.sentence_id(), i as u32).unwrap();
                let q = Array1::from(vec![v[0] as f64, v[1] as f64]);
                let want = margin_region_predict(&regions, q.view())
                    .unwrap()
                    .map_or(metnet::data::LabelId::O, |slot| ep.types()[slot]);
                assert_eq!(*p, want);
            }
        }
    }
}
