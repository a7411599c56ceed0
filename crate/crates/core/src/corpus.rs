//! Labeled corpora and the two-column CoNLL reader/writer.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::data::{validate_sentence, LabelId, LabelSet, LabeledSentence};
use crate::error::{Error, Result};

/// A labeled corpus with a per-type index of the sentences mentioning it.
#[derive(Debug, Clone)]
pub struct Corpus {
    sentences: Vec<LabeledSentence>,
    label_set: LabelSet,
    // index[t - 1] = sentence ids mentioning entity type t, in corpus order
    index: Vec<Vec<u32>>,
    by_id: HashMap<u32, usize>,
}

impl Corpus {
    pub fn new(sentences: Vec<LabeledSentence>, label_set: LabelSet) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(sentences.len());
        let mut index = vec![Vec::new(); label_set.len()];
        for (pos, s) in sentences.iter().enumerate() {
            validate_sentence(s, &label_set)?;
            if by_id.insert(s.sentence_id(), pos).is_some() {
                return Err(Error::InconsistentCorpus(format!(
                    "duplicate sentence id {}",
                    s.sentence_id()
                )));
            }
            let mut seen = HashSet::new();
            for &l in s.labels() {
                if !l.is_o() && seen.insert(l) {
                    index[l.0 as usize - 1].push(s.sentence_id());
                }
            }
        }
        Ok(Self {
            sentences,
            label_set,
            index,
            by_id,
        })
    }

    pub fn sentences(&self) -> &[LabeledSentence] {
        &self.sentences
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, sentence_id: u32) -> Option<&LabeledSentence> {
        self.by_id.get(&sentence_id).map(|&i| &self.sentences[i])
    }

    /// Sentence ids containing at least one mention of `label`.
    pub fn sentences_with(&self, label: LabelId) -> &[u32] {
        if label.is_o() {
            return &[];
        }
        self.index
            .get(label.0 as usize - 1)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Total entity-token mentions of `label` in the corpus.
    pub fn mention_count(&self, label: LabelId) -> usize {
        self.sentences_with(label)
            .iter()
            .map(|id| {
                self.get(*id)
                    .map(|s| s.labels().iter().filter(|&&l| l == label).count())
                    .unwrap_or(0)
            })
            .sum()
    }

    /// Splits into two corpora over disjoint entity-type sets.
    ///
    /// Sentences whose entity types all fall in `held_out` go to the second
    /// corpus, sentences with only the remaining types (or none) go to the
    /// first; sentences mixing both are dropped. Sentence ids are preserved so
    /// embedding stores keyed on them stay valid.
    pub fn split_by_types(&self, held_out: &[&str]) -> Result<(Corpus, Corpus)> {
        for name in held_out {
            if self.label_set.id_of(name).is_none() {
                return Err(Error::UnknownLabel(name.to_string()));
            }
        }
        let (test_names, train_names): (Vec<String>, Vec<String>) = self
            .label_set
            .entity_types()
            .iter()
            .cloned()
            .partition(|t| held_out.contains(&t.as_str()));
        let train_set = LabelSet::new(train_names, self.label_set.o_label())?;
        let test_set = LabelSet::new(test_names, self.label_set.o_label())?;

        let remap = |s: &LabeledSentence, target: &LabelSet| -> Option<LabeledSentence> {
            let labels = s
                .labels()
                .iter()
                .map(|&l| self.label_set.name_of(l).and_then(|n| target.id_of(n)))
                .collect::<Option<Vec<_>>>()?;
            LabeledSentence::new(s.sentence_id(), s.tokens().to_vec(), labels).ok()
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &self.sentences {
            if let Some(r) = remap(s, &train_set) {
                train.push(r);
            } else if let Some(r) = remap(s, &test_set) {
                test.push(r);
            }
        }
        let train = Corpus::new(train, train_set)?;
        let test = Corpus::new(test, test_set)?;
        debug_assert!(train.label_set.is_disjoint(&test.label_set));
        Ok((train, test))
    }
}

/// Parses two-column `token tag` text; blank lines end sentences.
///
/// Tags equal to `o_tag` map to O, every other tag becomes an entity type in
/// order of first appearance. Sentence ids are assigned in file order from 0.
pub fn parse_conll<R: BufRead>(reader: R, o_tag: &str) -> Result<Corpus> {
    let mut label_set = LabelSet::new(Vec::new(), o_tag)?;
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();

    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<LabelId>, sentences: &mut Vec<LabeledSentence>| -> Result<()> {
        if !tokens.is_empty() {
            let id = sentences.len() as u32;
            sentences.push(LabeledSentence::new(
                id,
                std::mem::take(tokens),
                std::mem::take(labels),
            )?);
        }
        Ok(())
    };

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next(), cols.next()) {
            (None, _, _) => flush(&mut tokens, &mut labels, &mut sentences)?,
            (Some(token), Some(tag), None) => {
                tokens.push(token.to_string());
                labels.push(label_set.intern(tag)?);
            }
            (Some(_), None, _) => {
                return Err(Error::MalformedLine {
                    line: n + 1,
                    reason: "expected token and tag".into(),
                })
            }
            (Some(_), Some(_), Some(_)) => {
                return Err(Error::MalformedLine {
                    line: n + 1,
                    reason: "more than two columns".into(),
                })
            }
        }
    }
    flush(&mut tokens, &mut labels, &mut sentences)?;
    Corpus::new(sentences, label_set)
}

/// Writes a corpus in the format read by [`parse_conll`].
pub fn write_conll<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let ls = corpus.label_set();
    for s in corpus.sentences() {
        for (tok, &l) in s.tokens().iter().zip(s.labels()) {
            let tag = ls.name_of(l).ok_or_else(|| Error::UnknownLabel(format!("#{}", l.0)))?;
            writeln!(out, "{tok}\t{tag}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
