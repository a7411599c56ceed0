//! Gaussian-mixture corpora with token vectors attached, for exercising the
//! full pipeline without a language model.
//!
//! Entity type `k` is an isotropic Gaussian around `a * e_k`, where
//! `a = mode_separation / sqrt(2)` and `e_k` is the k-th basis vector, so
//! any two entity centers are `mode_separation` apart. O tokens come from
//! `modes_o` Gaussians. With [`OLayout::Isolated`] the O modes sit on their
//! own axes like the entity types. With [`OLayout::Adjacent`] O mode `j` is
//! displaced by `mode_separation` from one entity center along a private
//! axis, so each such mode is closer to that entity than to the O mean.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{write_conll, Corpus};
use crate::data::{LabelId, LabelSet, LabeledSentence};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OLayout {
    Isolated,
    Adjacent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_types: usize,
    pub modes_o: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub mode_separation: f64,
    pub sentences: usize,
    pub tokens_per_sentence: usize,
    pub o_layout: OLayout,
    pub seed: u64,
}

impl SynthSpec {
    /// Ten well separated types and a single O mode.
    pub fn separable(seed: u64) -> Self {
        Self {
            n_types: 10,
            modes_o: 1,
            dim: 32,
            cluster_std: 0.02,
            mode_separation: 1.0,
            sentences: 400,
            tokens_per_sentence: 8,
            o_layout: OLayout::Isolated,
            seed,
        }
    }

    /// Ten types and five O modes, each parked next to an entity cluster.
    /// Clusters are a little wider than in [`SynthSpec::separable`], so some
    /// entity tokens fall near the learned region boundaries.
    pub fn multimodal_o(seed: u64) -> Self {
        Self {
            modes_o: 5,
            cluster_std: 0.025,
            o_layout: OLayout::Adjacent,
            ..Self::separable(seed)
        }
    }

    pub fn type_names(&self) -> Vec<String> {
        (0..self.n_types).map(|k| format!("T{k}")).collect()
    }

    /// The upper half of the type names, used as the held-out test types.
    pub fn held_out_types(&self) -> Vec<String> {
        self.type_names().split_off(self.n_types / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_types == 0 || self.modes_o == 0 || self.sentences == 0 {
            return bad("n_types, modes_o and sentences must be positive");
        }
        if self.tokens_per_sentence < 3 {
            return bad("tokens_per_sentence must be at least 3");
        }
        if !(self.cluster_std.is_finite() && self.cluster_std > 0.0) {
            return bad("cluster_std must be positive");
        }
        if !(self.mode_separation.is_finite() && self.mode_separation > 0.0) {
            return bad("mode_separation must be positive");
        }
        if self.n_types + self.modes_o > self.dim {
            return bad("dim must be at least n_types + modes_o");
        }
        if self.o_layout == OLayout::Adjacent && self.modes_o > self.n_types {
            return bad("adjacent layout needs modes_o <= n_types");
        }
        Ok(())
    }

    fn axis_scale(&self) -> f64 {
        self.mode_separation / std::f64::consts::SQRT_2
    }

    pub fn entity_center(&self, k: usize) -> Array1<f64> {
        let mut c = Array1::zeros(self.dim);
        c[k] = self.axis_scale();
        c
    }

    /// Entity type an adjacent O mode is attached to. Modes are spread
    /// evenly over the types so both halves of a type split get some.
    pub fn anchor_type(&self, mode: usize) -> usize {
        mode * self.n_types / self.modes_o
    }

    pub fn o_center(&self, mode: usize) -> Array1<f64> {
        match self.o_layout {
            OLayout::Isolated => {
                let mut c = Array1::zeros(self.dim);
                c[self.n_types + mode] = self.axis_scale();
                c
            }
            OLayout::Adjacent => {
                let mut c = self.entity_center(self.anchor_type(mode));
                c[self.n_types + mode] = self.mode_separation;
                c
            }
        }
    }
}

/// Draws the corpus. Sentence `i` carries entity type `i mod n_types` on one
/// or two random positions; every other token is O from a uniformly chosen
/// mode. Tokens are named `s{sentence}_{position}`.
pub fn generate(spec: &SynthSpec) -> Result<(Corpus, EmbeddingStore)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "synth");
    let labels = LabelSet::new(spec.type_names(), "O")?;
    let entity: Vec<Array1<f64>> = (0..spec.n_types).map(|k| spec.entity_center(k)).collect();
    let o_modes: Vec<Array1<f64>> = (0..spec.modes_o).map(|j| spec.o_center(j)).collect();
    let mut store = EmbeddingStore::new(spec.dim)?;
    let mut sentences = Vec::with_capacity(spec.sentences);
    let len = spec.tokens_per_sentence;

    for sid in 0..spec.sentences {
        let ty = sid % spec.n_types;
        let n_mentions = rng.random_range(1..=2usize);
        let first = rng.random_range(0..len);
        let mut second = first;
        if n_mentions == 2 {
            while second == first {
                second = rng.random_range(0..len);
            }
        }
        let mut tokens = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        for pos in 0..len {
            let center = if pos == first || pos == second {
                tags.push(LabelId(ty as u32 + 1));
                &entity[ty]
            } else {
                tags.push(LabelId::O);
                &o_modes[rng.random_range(0..spec.modes_o)]
            };
            let v: Vec<f32> = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (c + spec.cluster_std * z) as f32
                })
                .collect();
            store.insert(sid as u32, pos as u32, &v)?;
            tokens.push(format!("s{sid}_{pos}"));
        }
        sentences.push(LabeledSentence::new(sid as u32, tokens, tags)?);
    }
    Ok((Corpus::new(sentences, labels)?, store))
}

/// Writes `corpus` as CoNLL text and its vectors as EMBV1. Records are keyed
/// by sentence position in the written file, which is how [`parse_conll`]
/// numbers sentences when reading it back.
///
/// [`parse_conll`]: crate::corpus::parse_conll
pub fn write_files(corpus: &Corpus, store: &EmbeddingStore, conll: &Path, embeddings: &Path) -> Result<()> {
    let mut rekeyed = EmbeddingStore::new(store.dim())?;
    for (pos, s) in corpus.sentences().iter().enumerate() {
        for i in 0..s.len() as u32 {
            let v = store.get(s.sentence_id(), i).ok_or(Error::MissingEmbedding {
                sentence_id: s.sentence_id(),
                token_index: i,
            })?;
            rekeyed.insert(pos as u32, i, v)?;
        }
    }
    let mut w = BufWriter::new(File::create(conll)?);
    write_conll(corpus, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(embeddings)?);
    rekeyed.save(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::euclidean;
    use proptest::prelude::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            sentences: 60,
            ..SynthSpec::multimodal_o(seed)
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let (c1, s1) = generate(&small(3)).unwrap();
        let (c2, s2) = generate(&small(3)).unwrap();
        assert_eq!(c1.sentences(), c2.sentences());
        assert_eq!(s1, s2);
        let (_, s3) = generate(&small(4)).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn one_record_per_token() {
        let (c, s) = generate(&small(1)).unwrap();
        let n_tokens: usize = c.sentences().iter().map(|x| x.len()).sum();
        assert_eq!(s.len(), n_tokens);
        for sent in c.sentences() {
            for i in 0..sent.len() {
                assert!(s.get(sent.sentence_id(), i as u32).is_some());
            }
        }
    }

    #[test]
    fn written_files_read_back_consistently() {
        let spec = small(2);
        let (c, s) = generate(&spec).unwrap();
        let held = spec.held_out_types();
        let held: Vec<&str> = held.iter().map(String::as_str).collect();
        let (_, test) = c.split_by_types(&held).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (cp, ep) = (dir.path().join("test.conll"), dir.path().join("test.emb"));
        write_files(&test, &s, &cp, &ep).unwrap();
        let back = crate::corpus::parse_conll(std::io::BufReader::new(File::open(&cp).unwrap()), "O").unwrap();
        let store = EmbeddingStore::load(File::open(&ep).unwrap()).unwrap();
        assert_eq!(back.len(), test.len());
        for (orig, read) in test.sentences().iter().zip(back.sentences()) {
            let a = crate::embedding::embeddings_for(&s, orig).unwrap();
            let b = crate::embedding::embeddings_for(&store, read).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn presets_satisfy_their_invariants() {
        let sep = SynthSpec::separable(0);
        assert!(sep.mode_separation > 4.0 * sep.cluster_std);
        sep.validate().unwrap();
        let mm = SynthSpec::multimodal_o(0);
        mm.validate().unwrap();
        let modes: Vec<Array1<f64>> = (0..mm.modes_o).map(|j| mm.o_center(j)).collect();
        let mean = modes.iter().fold(Array1::zeros(mm.dim), |a, m| a + m) / mm.modes_o as f64;
        for m in &modes {
            assert!(euclidean(m.view(), mean.view()) >= mm.mode_separation / 2.0);
        }
        // each adjacent mode is nearer its anchor entity than the O mean
        for (j, m) in modes.iter().enumerate() {
            let anchor = mm.entity_center(mm.anchor_type(j));
            assert!(euclidean(m.view(), anchor.view()) < euclidean(m.view(), mean.view()));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::separable(0);
        s.dim = 10;
        assert!(generate(&s).is_err());
        let mut s = SynthSpec::separable(0);
        s.cluster_std = 0.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn two_cluster_nearest_centroid() {
        let spec = SynthSpec {
            n_types: 1,
            modes_o: 1,
            sentences: 200,
            ..SynthSpec::separable(11)
        };
        let (c, s) = generate(&spec).unwrap();
        // centroids estimated from the data itself
        let mut sums = [Array1::<f64>::zeros(spec.dim), Array1::zeros(spec.dim)];
        let mut counts = [0usize; 2];
        let mut points = Vec::new();
        for sent in c.sentences() {
            for (i, l) in sent.labels().iter().enumerate() {
                let v = Array1::from_iter(s.get(sent.sentence_id(), i as u32).unwrap().iter().map(|&x| x as f64));
                let k = l.0 as usize;
                sums[k] += &v;
                counts[k] += 1;
                points.push((v, k));
            }
        }
        let cents: Vec<Array1<f64>> = sums.iter().zip(counts).map(|(s, n)| s / n as f64).collect();
        let correct = points
            .iter()
            .filter(|(v, k)| {
                let d0 = euclidean(v.view(), cents[0].view());
                let d1 = euclidean(v.view(), cents[1].view());
                (if d0 <= d1 { 0 } else { 1 }) == *k
            })
            .count();
        assert!(correct as f64 / points.len() as f64 >= 0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cluster_means_near_centers(seed in any::<u64>()) {
            let spec = small(seed);
            let (c, s) = generate(&spec).unwrap();
            let mut sums = vec![Array1::<f64>::zeros(spec.dim); spec.n_types];
            let mut counts = vec![0usize; spec.n_types];
            for sent in c.sentences() {
                for (i, l) in sent.labels().iter().enumerate() {
                    if l.is_o() {
                        continue;
                    }
                    let k = l.0 as usize - 1;
                    for (acc, &x) in sums[k].iter_mut().zip(s.get(sent.sentence_id(), i as u32).unwrap()) {
                        *acc += x as f64;
                    }
                    counts[k] += 1;
                }
            }
            for k in 0..spec.n_types {
                let n = counts[k] as f64;
                let err = &sums[k] / n - spec.entity_center(k);
                // root-mean-square coordinate error
                let rms = (err.dot(&err) / spec.dim as f64).sqrt();
                prop_assert!(rms <= 3.0 * spec.cluster_std / n.sqrt());
            }
        }
    }
}
