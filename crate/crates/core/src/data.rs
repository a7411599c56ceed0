//! Core domain types: labels, sentences, episode and training configuration.
//!
//! Labels are interned as small integer ids against a [`LabelSet`]; the O
//! label is always id 0 and entity types occupy ids `1..=n`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Interned label id. [`LabelId::O`] is the non-entity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId(pub u32);

impl LabelId {
    pub const O: LabelId = LabelId(0);

    pub fn is_o(self) -> bool {
        self == Self::O
    }
}

/// Ordered set of entity type names plus the distinguished O label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    entity_types: Vec<String>,
    o_label: String,
    index: HashMap<String, LabelId>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(entity_types: Vec<String>, o_label: S) -> Result<Self> {
        let o_label = o_label.into();
        let mut set = Self {
            entity_types: Vec::with_capacity(entity_types.len()),
            o_label,
            index: HashMap::new(),
        };
        for name in entity_types {
            if set.index.contains_key(&name) {
                return Err(Error::DuplicateType(name));
            }
            set.push_type(name)?;
        }
        Ok(set)
    }

    /// Returns the id of `name`, adding it as a new entity type if unseen.
    pub(crate) fn intern(&mut self, name: &str) -> Result<LabelId> {
        if name == self.o_label {
            return Ok(LabelId::O);
        }
        if let Some(&id) = self.index.get(name) {
            return Ok(id);
        }
        self.push_type(name.to_string())
    }

    fn push_type(&mut self, name: String) -> Result<LabelId> {
        if name == self.o_label {
            return Err(Error::InvalidConfig(format!(
                "O label {name:?} listed as an entity type"
            )));
        }
        let id = LabelId(self.entity_types.len() as u32 + 1);
        self.index.insert(name.clone(), id);
        self.entity_types.push(name);
        Ok(id)
    }

    pub fn o_label(&self) -> &str {
        &self.o_label
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn len(&self) -> usize {
        self.entity_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_types.is_empty()
    }

    /// Entity type ids in declaration order.
    pub fn type_ids(&self) -> impl Iterator<Item = LabelId> + '_ {
        (1..=self.entity_types.len() as u32).map(LabelId)
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        if name == self.o_label {
            Some(LabelId::O)
        } else {
            self.index.get(name).copied()
        }
    }

    pub fn name_of(&self, id: LabelId) -> Option<&str> {
        if id.is_o() {
            Some(&self.o_label)
        } else {
            self.entity_types.get(id.0 as usize - 1).map(String::as_str)
        }
    }

    pub fn contains(&self, id: LabelId) -> bool {
        (id.0 as usize) <= self.entity_types.len()
    }

    /// True when no entity type name is shared with `other`.
    pub fn is_disjoint(&self, other: &LabelSet) -> bool {
        self.entity_types.iter().all(|t| !other.index.contains_key(t))
    }
}

/// A tokenized sentence with one IO label per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    sentence_id: u32,
    tokens: Vec<String>,
    labels: Vec<LabelId>,
}

impl LabeledSentence {
    pub fn new(sentence_id: u32, tokens: Vec<String>, labels: Vec<LabelId>) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::LengthMismatch {
                tokens: tokens.len(),
                labels: labels.len(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        Ok(Self {
            sentence_id,
            tokens,
            labels,
        })
    }

    /// Builds a sentence from tag names, resolving each against `labels`.
    pub fn from_tags<T: AsRef<str>>(
        sentence_id: u32,
        tokens: Vec<String>,
        tags: &[T],
        labels: &LabelSet,
    ) -> Result<Self> {
        let ids = tags
            .iter()
            .map(|t| {
                labels
                    .id_of(t.as_ref())
                    .ok_or_else(|| Error::UnknownLabel(t.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sentence_id, tokens, ids)
    }

    pub fn sentence_id(&self) -> u32 {
        self.sentence_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy of this sentence with every label outside `keep` replaced by O.
    pub fn relabeled(&self, keep: &[LabelId]) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&l| if keep.contains(&l) { l } else { LabelId::O })
            .collect();
        Self {
            sentence_id: self.sentence_id,
            tokens: self.tokens.clone(),
            labels,
        }
    }
}

/// Checks a sentence against a label set.
pub fn validate_sentence(s: &LabeledSentence, labels: &LabelSet) -> Result<()> {
    if s.tokens.len() != s.labels.len() {
        return Err(Error::LengthMismatch {
            tokens: s.tokens.len(),
            labels: s.labels.len(),
        });
    }
    if s.tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    match s.labels.iter().find(|&&l| !labels.contains(l)) {
        Some(bad) => Err(Error::UnknownLabel(format!("#{}", bad.0))),
        None => Ok(()),
    }
}

/// Shape of an N-way K-shot episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    n_ways: usize,
    k_shots: usize,
    query_size: usize,
    seed: u64,
}

impl EpisodeConfig {
    pub fn new(n_ways: usize, k_shots: usize, query_size: usize, seed: u64) -> Result<Self> {
        if n_ways < 2 {
            return Err(Error::InvalidConfig(format!("n_ways must be >= 2, got {n_ways}")));
        }
        if k_shots < 1 {
            return Err(Error::InvalidConfig("k_shots must be >= 1".into()));
        }
        if query_size < 1 {
            return Err(Error::InvalidConfig("query_size must be >= 1".into()));
        }
        Ok(Self {
            n_ways,
            k_shots,
            query_size,
            seed,
        })
    }

    pub fn n_ways(&self) -> usize {
        self.n_ways
    }

    pub fn k_shots(&self) -> usize {
        self.k_shots
    }

    pub fn query_size(&self) -> usize {
        self.query_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Counts entity tokens of each type in `types` across `sentences`.
pub fn mention_counts(sentences: &[LabeledSentence], types: &[LabelId]) -> Vec<usize> {
    let mut counts = vec![0; types.len()];
    for s in sentences {
        for l in &s.labels {
            if let Some(slot) = types.iter().position(|t| t == l) {
                counts[slot] += 1;
            }
        }
    }
    counts
}

/// One meta-task: N sampled types, a support set and a query set.
///
/// Mentions of types outside `types` are already relabeled to O. The position
/// of a type in `types` is its way-slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    types: Vec<LabelId>,
    support: Vec<LabeledSentence>,
    query: Vec<LabeledSentence>,
}

impl Episode {
    pub fn new(
        types: Vec<LabelId>,
        support: Vec<LabeledSentence>,
        query: Vec<LabeledSentence>,
        cfg: &EpisodeConfig,
    ) -> Result<Self> {
        if types.len() != cfg.n_ways {
            return Err(Error::InvalidEpisode(format!(
                "expected {} types, got {}",
                cfg.n_ways,
                types.len()
            )));
        }
        let distinct: HashSet<_> = types.iter().collect();
        if distinct.len() != types.len() || types.iter().any(|t| t.is_o()) {
            return Err(Error::InvalidEpisode("types must be distinct entity types".into()));
        }
        let support_ids: HashSet<u32> = support.iter().map(|s| s.sentence_id).collect();
        if support_ids.len() != support.len() {
            return Err(Error::InvalidEpisode("duplicate support sentence".into()));
        }
        let query_ids: HashSet<u32> = query.iter().map(|s| s.sentence_id).collect();
        if query_ids.len() != query.len() {
            return Err(Error::InvalidEpisode("duplicate query sentence".into()));
        }
        if let Some(id) = support_ids.intersection(&query_ids).next() {
            return Err(Error::InvalidEpisode(format!(
                "sentence {id} appears in both support and query"
            )));
        }
        for s in support.iter().chain(&query) {
            if let Some(l) = s.labels.iter().find(|l| !l.is_o() && !types.contains(l)) {
                return Err(Error::InvalidEpisode(format!(
                    "sentence {} carries out-of-episode label #{}",
                    s.sentence_id, l.0
                )));
            }
        }
        for (set, sentences, need) in [
            ("support", &support, cfg.k_shots),
            ("query", &query, cfg.query_size),
        ] {
            let counts = mention_counts(sentences, &types);
            if let Some(slot) = counts.iter().position(|&c| c < need) {
                return Err(Error::InvalidEpisode(format!(
                    "{set} has {} mentions for slot {slot}, need {need}",
                    counts[slot]
                )));
            }
        }
        Ok(Self {
            types,
            support,
            query,
        })
    }

    pub fn types(&self) -> &[LabelId] {
        &self.types
    }

    pub fn n_ways(&self) -> usize {
        self.types.len()
    }

    pub fn support(&self) -> &[LabeledSentence] {
        &self.support
    }

    pub fn query(&self) -> &[LabeledSentence] {
        &self.query
    }

    /// Way-slot of a label, `None` for O.
    pub fn slot_of(&self, label: LabelId) -> Option<usize> {
        self.types.iter().position(|&t| t == label)
    }
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        "unknown {} {other:?}", stringify!($name)
                    ))),
                }
            }
        }
    };
}

named_enum! {
    /// Which triplet objective drives training.
    LossVariant {
        Improved => "improved",
        ImprovedNoWeights => "improved-no-weights",
        ImprovedFixedMargin => "improved-fixed-margin",
        Original => "original",
    }
}

impl LossVariant {
    /// Whether margins are learned (otherwise `fixed_margin` is used everywhere).
    pub fn adaptive_margins(self) -> bool {
        matches!(self, LossVariant::Improved | LossVariant::ImprovedNoWeights)
    }
}

named_enum! {
    /// How query tokens are labeled at test time.
    InferenceVariant {
        MarginRegion => "margin-region",
        NearestPrototypeWithO => "nearest-prototype-with-o",
    }
}

named_enum! {
    /// Optimizer for the outer (meta) update.
    OptimizerKind {
        Sgd => "sgd",
        AdamW => "adamw",
    }
}

/// Hyper-parameters of episodic training and test-time adaptation.
///
/// Fields are public for convenient tuning; [`TrainConfig::validate`] is
/// enforced by [`crate::trainer::train`] and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Inner-loop step size on the support set.
    pub inner_lr: f64,
    /// Outer-loop (meta) step size.
    pub meta_lr: f64,
    /// Inner-loop gradient steps per episode.
    pub inner_steps: usize,
    /// Balance between the positive and negative terms of the loss.
    pub alpha: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub episodes_per_batch: usize,
    /// Nearest negatives kept per slot; `None` means "use K".
    pub neg_per_class: Option<usize>,
    pub loss_variant: LossVariant,
    pub inference_variant: InferenceVariant,
    pub fixed_margin: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.2,
            meta_lr: 1e-4,
            inner_steps: 3,
            alpha: 0.3,
            epochs: 6000,
            dropout_rate: 0.1,
            episodes_per_batch: 1,
            neg_per_class: None,
            loss_variant: LossVariant::Improved,
            inference_variant: InferenceVariant::MarginRegion,
            fixed_margin: 5.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("inner_lr", self.inner_lr)?;
        positive("meta_lr", self.meta_lr)?;
        positive("fixed_margin", self.fixed_margin)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.episodes_per_batch == 0 {
            return Err(Error::InvalidConfig("episodes_per_batch must be positive".into()));
        }
        if self.neg_per_class == Some(0) {
            return Err(Error::InvalidConfig("neg_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Negatives per slot, defaulting to the shot count.
    pub fn negatives(&self, k_shots: usize) -> usize {
        self.neg_per_class.unwrap_or(k_shots).max(1)
    }
}
