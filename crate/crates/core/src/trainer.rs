//! Episodic meta-training: support-set adaptation in the inner loop and a
//! first-order meta update from the adapted query loss in the outer loop.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::corpus::Corpus;
use crate::data::{Episode, EpisodeConfig, InferenceVariant, LabelId, OptimizerKind, TrainConfig};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::inference::{margin_region_predict, nearest_prototype_predict, RegionSet};
use crate::loss::{
    build_prototypes, episode_loss, episode_loss_value, slot_margins, LossSettings, PrototypeSet,
    TokenBatch,
};
use crate::net::{forward_batch, Dropout, Gradient, Scalar, TripletNetParams};
use crate::rng::{stream, Rng};
use crate::sampler::{sample_episode, SamplerState};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAM_WEIGHT_DECAY: f64 = 0.01;

/// Input-space view of an episode: support prototypes and both token sets.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    pub protos: PrototypeSet,
    pub support: TokenBatch,
    pub query: TokenBatch,
}

fn token_batch<P: EmbeddingProvider + ?Sized>(
    episode: &Episode,
    sentences: &[crate::data::LabeledSentence],
    provider: &P,
) -> Result<TokenBatch> {
    let n: usize = sentences.iter().map(|s| s.len()).sum();
    let mut embeddings = Array2::<f64>::zeros((n, provider.dim()));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for s in sentences {
        let vectors = provider.embed_sentence(s)?;
        for (v, &l) in vectors.rows().into_iter().zip(s.labels()) {
            embeddings.row_mut(row).assign(&v.mapv(f64::from));
            labels.push(episode.slot_of(l));
            row += 1;
        }
    }
    TokenBatch::new(embeddings, labels)
}

/// Embeds an episode and averages the support vectors of each slot.
pub fn prepare_episode<P: EmbeddingProvider + ?Sized>(
    episode: &Episode,
    provider: &P,
) -> Result<EpisodeInputs> {
    let support = token_batch(episode, episode.support(), provider)?;
    let query = token_batch(episode, episode.query(), provider)?;
    let protos = build_prototypes(support.embeddings.view(), &support.labels, episode.n_ways())?;
    Ok(EpisodeInputs {
        protos,
        support,
        query,
    })
}

/// A differentiable objective over network parameters.
pub trait Objective {
    fn loss_and_grad<F: Scalar>(
        &self,
        params: &TripletNetParams<F>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(f64, Gradient)>;
}

/// Mean triple loss of a token set against fixed input-space prototypes.
pub struct TripletObjective<'a> {
    pub protos: &'a PrototypeSet,
    pub tokens: &'a TokenBatch,
    pub settings: LossSettings,
}

impl Objective for TripletObjective<'_> {
    fn loss_and_grad<F: Scalar>(
        &self,
        params: &TripletNetParams<F>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(f64, Gradient)> {
        episode_loss(params, self.protos, self.tokens, &self.settings, dropout)
    }
}

pub fn loss_settings(cfg: &TrainConfig, k_shots: usize) -> LossSettings {
    LossSettings {
        variant: cfg.loss_variant,
        alpha: cfg.alpha,
        fixed_margin: cfg.fixed_margin,
        neg_per_class: cfg.negatives(k_shots),
    }
}

/// `steps` full-batch gradient steps of size `lr` on `objective`, starting
/// from a copy of `params`. Weights and margins are both updated and margins
/// are floored after every step; `params` itself is never touched.
pub fn inner_adapt<F: Scalar, O: Objective>(
    params: &TripletNetParams<F>,
    objective: &O,
    lr: f64,
    steps: usize,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<TripletNetParams<F>> {
    let mut adapted = params.clone();
    if lr == 0.0 {
        return Ok(adapted);
    }
    for _ in 0..steps {
        let drop = dropout.as_mut().map(|(rate, rng)| Dropout {
            rate: *rate,
            rng,
        });
        let (_, grad) = objective.loss_and_grad(&adapted, drop)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteUpdate);
        }
        adapted.apply_step(&grad, lr)?;
    }
    Ok(adapted)
}

/// Losses recorded for one outer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Support loss at the adapted parameters (eval mode).
    pub support_loss: f64,
    /// Query loss at the adapted parameters (the meta objective).
    pub query_loss: f64,
}

impl StepLog {
    /// Tab-separated `step, support_loss, query_loss`.
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.support_loss, self.query_loss)
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Mutable training state: parameters, counters, random streams and the
/// loss history.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: TripletNetParams<f32>,
    pub epoch: usize,
    pub sampler: SamplerState,
    dropout_rng: Rng,
    adam: Option<AdamState>,
    pub log: Vec<StepLog>,
}

impl TrainerState {
    pub fn new(params: TripletNetParams<f32>, seed: u64) -> Self {
        Self {
            params,
            epoch: 0,
            sampler: SamplerState::new(),
            dropout_rng: stream(seed, "dropout"),
            adam: None,
            log: Vec::new(),
        }
    }

    /// Mean query loss over the recorded steps.
    pub fn mean_query_loss(&self) -> Option<f64> {
        (!self.log.is_empty())
            .then(|| self.log.iter().map(|l| l.query_loss).sum::<f64>() / self.log.len() as f64)
    }

    fn apply_meta_gradient(&mut self, grad: &Gradient, cfg: &TrainConfig) -> Result<()> {
        match cfg.optimizer {
            OptimizerKind::Sgd => self.params.apply_step(grad, cfg.meta_lr),
            OptimizerKind::AdamW => {
                let n = grad.values().len();
                let adam = self.adam.get_or_insert_with(|| AdamState {
                    t: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                adam.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(adam.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(adam.t as i32);
                // decay applies to the weight matrices only
                let shape = self.params.shape();
                let w1_end = shape.dim_in * shape.hidden1;
                let w2_start = w1_end + shape.hidden1;
                let w2_end = w2_start + shape.hidden1 * shape.hidden2;
                let lr = cfg.meta_lr;
                let values = self.params.values();
                let delta: Vec<f64> = grad
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        adam.m[i] = ADAM_BETA1 * adam.m[i] + (1.0 - ADAM_BETA1) * g;
                        adam.v[i] = ADAM_BETA2 * adam.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let step = (adam.m[i] / bc1) / ((adam.v[i] / bc2).sqrt() + ADAM_EPS);
                        let decay = if i < w1_end || (w2_start..w2_end).contains(&i) {
                            ADAM_WEIGHT_DECAY * values[i] as f64
                        } else {
                            0.0
                        };
                        -lr * (step + decay)
                    })
                    .collect();
                self.params.apply_delta(delta)
            }
        }
    }
}

/// One meta update from a batch of episodes (first-order: the query gradient
/// at the adapted parameters is applied to the shared initialization).
pub fn outer_step(
    state: &mut TrainerState,
    batch: &[EpisodeInputs],
    k_shots: usize,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty episode batch".into()));
    }
    let settings = loss_settings(cfg, k_shots);
    let mut meta_grad = Gradient::zeros(state.params.shape());
    let mut support_loss = 0.0;
    let mut query_loss = 0.0;
    for inputs in batch {
        let support = TripletObjective {
            protos: &inputs.protos,
            tokens: &inputs.support,
            settings,
        };
        let adapted = inner_adapt(
            &state.params,
            &support,
            cfg.inner_lr,
            cfg.inner_steps,
            Some((cfg.dropout_rate, &mut state.dropout_rng)),
        )?;
        support_loss += episode_loss_value(&adapted, &inputs.protos, &inputs.support, &settings)?;
        let (q, g) = episode_loss(
            &adapted,
            &inputs.protos,
            &inputs.query,
            &settings,
            Some(Dropout {
                rate: cfg.dropout_rate,
                rng: &mut state.dropout_rng,
            }),
        )?;
        query_loss += q;
        meta_grad.add_assign(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    meta_grad.scale(scale);
    if !meta_grad.is_finite() {
        return Err(Error::NonFiniteUpdate);
    }
    state.apply_meta_gradient(&meta_grad, cfg)?;
    state.epoch += 1;
    let log = StepLog {
        step: state.epoch,
        support_loss: support_loss * scale,
        query_loss: query_loss * scale,
    };
    state.log.push(log);
    Ok(log)
}

/// Runs `epochs` outer steps, each over `cfg.episodes_per_batch` freshly
/// sampled episodes. `on_step` sees the state after every step (for loss
/// logs and periodic checkpoints).
pub fn train<P, C>(
    corpus: &Corpus,
    provider: &P,
    episode_cfg: &EpisodeConfig,
    cfg: &TrainConfig,
    mut state: TrainerState,
    epochs: usize,
    mut on_step: C,
) -> Result<TrainerState>
where
    P: EmbeddingProvider + ?Sized,
    C: FnMut(&TrainerState, &StepLog) -> Result<()>,
{
    cfg.validate()?;
    if state.params.shape().n_margins < episode_cfg.n_ways() {
        return Err(Error::SlotCountMismatch {
            episode: episode_cfg.n_ways(),
            params: state.params.shape().n_margins,
        });
    }
    for _ in 0..epochs {
        let batch = (0..cfg.episodes_per_batch)
            .map(|_| {
                let episode = sample_episode(corpus, episode_cfg, &mut state.sampler)?;
                prepare_episode(&episode, provider)
            })
            .collect::<Result<Vec<_>>>()?;
        let log = outer_step(&mut state, &batch, episode_cfg.k_shots(), cfg)?;
        on_step(&state, &log)?;
    }
    Ok(state)
}

/// Test-time view of an episode after support adaptation.
#[derive(Debug, Clone)]
pub struct AdaptedEpisode {
    pub params: TripletNetParams<f32>,
    pub regions: RegionSet,
    /// Mean of the mapped support O tokens, if the support has any.
    pub o_center: Option<Array1<f64>>,
    /// Query tokens in the output space, one row per token.
    pub query_mapped: Array2<f64>,
}

/// Adapts a copy of `params` on the support set and maps prototypes and
/// query tokens with the adapted network.
pub fn adapt_episode(
    params: &TripletNetParams<f32>,
    inputs: &EpisodeInputs,
    k_shots: usize,
    cfg: &TrainConfig,
) -> Result<AdaptedEpisode> {
    let settings = loss_settings(cfg, k_shots);
    let support = TripletObjective {
        protos: &inputs.protos,
        tokens: &inputs.support,
        settings,
    };
    let adapted = inner_adapt(params, &support, cfg.inner_lr, cfg.inner_steps, None)?;
    let n = inputs.protos.n_slots();
    let (centers, _) = forward_batch(&adapted, inputs.protos.input(), None)?;
    let radii = slot_margins(&adapted, n, cfg.loss_variant, cfg.fixed_margin)?;
    let regions = RegionSet::new(centers, radii)?;
    let (query_mapped, _) = forward_batch(&adapted, inputs.query.embeddings.view(), None)?;
    let o_center = o_center(&adapted, &inputs.support)?;
    Ok(AdaptedEpisode {
        params: adapted,
        regions,
        o_center,
        query_mapped,
    })
}

fn o_center<F: Scalar>(params: &TripletNetParams<F>, support: &TokenBatch) -> Result<Option<Array1<f64>>> {
    let rows: Vec<usize> = (0..support.len()).filter(|&i| support.labels[i].is_none()).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let o_inputs = support.embeddings.select(Axis(0), &rows);
    let (mapped, _) = forward_batch(params, o_inputs.view(), None)?;
    Ok(mapped.mean_axis(Axis(0)))
}

/// Slot predictions (`None` = O) for every row of `points`.
pub fn predict_slots(
    adapted: &AdaptedEpisode,
    points: ArrayView2<'_, f64>,
    variant: InferenceVariant,
) -> Result<Vec<Option<usize>>> {
    points
        .rows()
        .into_iter()
        .map(|q| match variant {
            InferenceVariant::MarginRegion => margin_region_predict(&adapted.regions, q),
            InferenceVariant::NearestPrototypeWithO => {
                nearest_prototype_predict(adapted.regions.centers(), adapted.o_center.as_ref().map(|c| c.view()), q)
            }
        })
        .collect()
}

/// Fine-tunes a copy of `params` on the episode's support set and labels
/// every query token. Returns one label sequence per query sentence.
pub fn test_adapt_and_predict<P: EmbeddingProvider + ?Sized>(
    params: &TripletNetParams<f32>,
    episode: &Episode,
    provider: &P,
    k_shots: usize,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<LabelId>>> {
    let inputs = prepare_episode(episode, provider)?;
    let adapted = adapt_episode(params, &inputs, k_shots, cfg)?;
    let slots = predict_slots(&adapted, adapted.query_mapped.view(), cfg.inference_variant)?;
    let mut out = Vec::with_capacity(episode.query().len());
    let mut flat = slots.into_iter();
    for s in episode.query() {
        out.push(
            flat.by_ref()
                .take(s.len())
                .map(|slot| slot.map_or(LabelId::O, |i| episode.types()[i]))
                .collect(),
        );
    }
    Ok(out)
}
