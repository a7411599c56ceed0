//! N-way K-shot episode construction over sentence-level corpora.
//!
//! Sampling is greedy at the sentence level: the sampled types are filled to
//! at least K (support) and L (query) entity-token mentions while no type
//! exceeds the cap (2K / 2L by default).

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::data::{Episode, EpisodeConfig, LabelId, LabelSet, LabeledSentence};
use crate::error::{Error, Result};
use crate::rng::indexed_stream;

const RESHUFFLES: usize = 16;

/// Sampler position: episodes are a pure function of `(seed, counter)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerState {
    counter: u64,
    support_cap: Option<usize>,
    query_cap: Option<usize>,
}

impl Default for SamplerState {
    fn default() -> Self {
        Self::new()
    }
}

impl SamplerState {
    pub fn new() -> Self {
        Self::at(0)
    }

    /// State positioned at episode number `counter`.
    pub fn at(counter: u64) -> Self {
        Self {
            counter,
            support_cap: None,
            query_cap: None,
        }
    }

    /// Overrides the per-type mention caps (defaults 2K and 2L).
    pub fn with_caps(mut self, support_cap: usize, query_cap: usize) -> Result<Self> {
        if support_cap == 0 || query_cap == 0 {
            return Err(Error::InvalidConfig("mention caps must be positive".into()));
        }
        self.support_cap = Some(support_cap);
        self.query_cap = Some(query_cap);
        Ok(self)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn caps(&self, cfg: &EpisodeConfig) -> (usize, usize) {
        (
            self.support_cap.unwrap_or(2 * cfg.k_shots()).max(cfg.k_shots()),
            self.query_cap.unwrap_or(2 * cfg.query_size()).max(cfg.query_size()),
        )
    }
}

/// Labels outside `types` become O; tokens are untouched.
pub fn relabel_for_episode(s: &LabeledSentence, types: &[LabelId]) -> LabeledSentence {
    s.relabeled(types)
}

/// Draws the next episode and advances the sampler.
pub fn sample_episode(corpus: &Corpus, cfg: &EpisodeConfig, st: &mut SamplerState) -> Result<Episode> {
    let mut rng = indexed_stream(cfg.seed(), "episode", st.counter);
    st.counter += 1;
    let (support_cap, query_cap) = st.caps(cfg);
    let need = cfg.k_shots() + cfg.query_size();

    let mut eligible = Vec::new();
    let mut shortfall = None;
    for t in corpus.label_set().type_ids() {
        let have = corpus.mention_count(t);
        if have >= need && corpus.sentences_with(t).len() >= 2 {
            eligible.push(t);
        } else if shortfall.is_none() {
            shortfall = Some((t, have));
        }
    }
    if eligible.len() < cfg.n_ways() {
        return Err(match shortfall {
            Some((t, have)) => Error::InsufficientData {
                what: corpus.label_set().name_of(t).unwrap_or("?").to_string(),
                have,
                need,
            },
            None => Error::InsufficientData {
                what: "entity types".into(),
                have: eligible.len(),
                need: cfg.n_ways(),
            },
        });
    }

    let types: Vec<LabelId> = eligible
        .choose_multiple(&mut rng, cfg.n_ways())
        .copied()
        .collect();
    let candidates: Vec<u32> = types
        .iter()
        .flat_map(|&t| corpus.sentences_with(t).iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut last_err = Error::ExhaustedCandidates("support");
    for _ in 0..RESHUFFLES {
        let mut order = candidates.clone();
        order.shuffle(&mut rng);
        let Some((support, rest)) =
            greedy_fill(corpus, &types, &order, cfg.k_shots(), support_cap)
        else {
            last_err = Error::ExhaustedCandidates("support");
            continue;
        };
        let Some((query, _)) = greedy_fill(corpus, &types, &rest, cfg.query_size(), query_cap)
        else {
            last_err = Error::ExhaustedCandidates("query");
            continue;
        };
        let relabel = |ids: Vec<u32>| -> Vec<LabeledSentence> {
            ids.into_iter()
                .filter_map(|id| corpus.get(id))
                .map(|s| relabel_for_episode(s, &types))
                .collect()
        };
        return Episode::new(types.clone(), relabel(support), relabel(query), cfg);
    }
    Err(last_err)
}

/// Picks sentences from `order` until each type has `target` mentions.
/// Returns the chosen ids and the unused remainder (in order).
fn greedy_fill(
    corpus: &Corpus,
    types: &[LabelId],
    order: &[u32],
    target: usize,
    cap: usize,
) -> Option<(Vec<u32>, Vec<u32>)> {
    let mut counts = vec![0usize; types.len()];
    let mut chosen = Vec::new();
    let mut rest = Vec::new();
    let mut iter = order.iter();
    for &id in iter.by_ref() {
        if counts.iter().all(|&c| c >= target) {
            rest.push(id);
            break;
        }
        let s = corpus.get(id)?;
        let mut local = vec![0usize; types.len()];
        for l in s.labels() {
            if let Some(slot) = types.iter().position(|t| t == l) {
                local[slot] += 1;
            }
        }
        let helps = local
            .iter()
            .zip(&counts)
            .any(|(&add, &have)| add > 0 && have < target);
        let fits = local.iter().zip(&counts).all(|(&add, &have)| have + add <= cap);
        if helps && fits {
            counts.iter_mut().zip(&local).for_each(|(c, a)| *c += a);
            chosen.push(id);
        } else {
            rest.push(id);
        }
    }
    rest.extend(iter);
    counts.iter().all(|&c| c >= target).then_some((chosen, rest))
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceRecord {
    id: u32,
    tokens: Vec<String>,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    n_ways: usize,
    k_shots: usize,
    query_size: usize,
    types: Vec<String>,
    support: Vec<SentenceRecord>,
    query: Vec<SentenceRecord>,
}

fn label_name(labels: &LabelSet, id: LabelId) -> Result<String> {
    labels
        .name_of(id)
        .map(str::to_string)
        .ok_or_else(|| Error::UnknownLabel(format!("#{}", id.0)))
}

/// Serializes an episode as one JSON line (no trailing newline).
pub fn episode_to_line(episode: &Episode, cfg: &EpisodeConfig, labels: &LabelSet) -> Result<String> {
    let sentences = |set: &[LabeledSentence]| -> Result<Vec<SentenceRecord>> {
        set.iter()
            .map(|s| {
                Ok(SentenceRecord {
                    id: s.sentence_id(),
                    tokens: s.tokens().to_vec(),
                    labels: s
                        .labels()
                        .iter()
                        .map(|&l| label_name(labels, l))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    };
    let record = EpisodeRecord {
        n_ways: cfg.n_ways(),
        k_shots: cfg.k_shots(),
        query_size: cfg.query_size(),
        types: episode
            .types()
            .iter()
            .map(|&t| label_name(labels, t))
            .collect::<Result<_>>()?,
        support: sentences(episode.support())?,
        query: sentences(episode.query())?,
    };
    Ok(serde_json::to_string(&record)?)
}

/// Parses and re-validates a line written by [`episode_to_line`].
pub fn episode_from_line(line: &str, labels: &LabelSet) -> Result<(Episode, EpisodeConfig)> {
    let record: EpisodeRecord = serde_json::from_str(line)?;
    let cfg = EpisodeConfig::new(record.n_ways, record.k_shots, record.query_size, 0)?;
    let types = record
        .types
        .iter()
        .map(|t| labels.id_of(t).ok_or_else(|| Error::UnknownLabel(t.clone())))
        .collect::<Result<Vec<_>>>()?;
    let sentences = |set: Vec<SentenceRecord>| -> Result<Vec<LabeledSentence>> {
        set.into_iter()
            .map(|s| LabeledSentence::from_tags(s.id, s.tokens, &s.labels, labels))
            .collect()
    };
    let episode = Episode::new(types, sentences(record.support)?, sentences(record.query)?, &cfg)?;
    Ok((episode, cfg))
}
