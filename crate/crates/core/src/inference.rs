//! Query labeling (margin regions and the nearest-prototype baseline) and
//! micro-averaged evaluation over test episodes.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::data::{EpisodeConfig, LabelId, LabelSet, TrainConfig};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::loss::euclidean;
use crate::net::{TripletNetParams, MARGIN_FLOOR};
use crate::sampler::{sample_episode, SamplerState};
use crate::trainer::test_adapt_and_predict;

/// Balls in the output space, one per way-slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    centers: Array2<f64>,
    radii: Vec<f64>,
}

impl RegionSet {
    pub fn new(centers: Array2<f64>, radii: Vec<f64>) -> Result<Self> {
        if centers.nrows() == 0 || centers.nrows() != radii.len() {
            return Err(Error::DimensionMismatch {
                expected: centers.nrows(),
                got: radii.len(),
            });
        }
        if let Some(r) = radii.iter().find(|r| !(r.is_finite() && **r >= MARGIN_FLOOR)) {
            return Err(Error::InvalidConfig(format!("region radius {r} below floor")));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("region center".into()));
        }
        Ok(Self { centers, radii })
    }

    pub fn centers(&self) -> ArrayView2<'_, f64> {
        self.centers.view()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

/// Slot whose region contains `q` (nearest center if several do, lowest
/// slot on ties), or `None` (O) when `q` lies outside every region.
/// Boundaries count as inside.
pub fn margin_region_predict(regions: &RegionSet, q: ArrayView1<'_, f64>) -> Result<Option<usize>> {
    if q.len() != regions.centers.ncols() {
        return Err(Error::DimensionMismatch {
            expected: regions.centers.ncols(),
            got: q.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (c, &r)) in regions.centers.rows().into_iter().zip(&regions.radii).enumerate() {
        let d = euclidean(q, c);
        if d <= r && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Nearest of the entity centers and the O center. Ties go to the lowest
/// entity slot; O is ordered last.
pub fn nearest_prototype_predict(
    centers: ArrayView2<'_, f64>,
    o_center: Option<ArrayView1<'_, f64>>,
    q: ArrayView1<'_, f64>,
) -> Result<Option<usize>> {
    let total = centers.nrows() + o_center.is_some() as usize;
    if total < 2 {
        return Err(Error::InvalidConfig("nearest-prototype inference needs at least two centers".into()));
    }
    for width in std::iter::once(centers.ncols()).chain(o_center.map(|o| o.len())) {
        if width != q.len() {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: q.len(),
            });
        }
    }
    let mut best: Option<(Option<usize>, f64)> = None;
    for (i, c) in centers.rows().into_iter().enumerate() {
        let d = euclidean(q, c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((Some(i), d));
        }
    }
    if let Some(o) = o_center {
        let d = euclidean(q, o);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((None, d));
        }
    }
    Ok(best.and_then(|(label, _)| label))
}

/// Pooled counts behind a micro-averaged F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn scores(&self) -> Scores {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.true_positives, self.predicted);
        let recall = ratio(self.true_positives, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_shapes(gold: &[Vec<LabelId>], pred: &[Vec<LabelId>]) -> Result<()> {
    if gold.len() != pred.len() || gold.iter().zip(pred).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::ShapeMismatch);
    }
    Ok(())
}

/// Token-level counts: a true positive is a non-O token predicted exactly.
pub fn token_counts(gold: &[Vec<LabelId>], pred: &[Vec<LabelId>]) -> Result<F1Counts> {
    check_shapes(gold, pred)?;
    let mut c = F1Counts::default();
    for (g, p) in gold.iter().flatten().zip(pred.iter().flatten()) {
        c.gold += !g.is_o() as usize;
        c.predicted += !p.is_o() as usize;
        c.true_positives += (!g.is_o() && g == p) as usize;
    }
    Ok(c)
}

/// Maximal runs of one non-O label as `(start, end_exclusive, label)`.
fn spans(labels: &[LabelId]) -> Vec<(usize, usize, LabelId)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let l = labels[i];
        let start = i;
        while i < labels.len() && labels[i] == l {
            i += 1;
        }
        if !l.is_o() {
            out.push((start, i, l));
        }
    }
    out
}

/// Span-level counts over maximal same-label runs (exact match).
pub fn span_counts(gold: &[Vec<LabelId>], pred: &[Vec<LabelId>]) -> Result<F1Counts> {
    check_shapes(gold, pred)?;
    let mut c = F1Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans(g);
        let ps = spans(p);
        c.gold += gs.len();
        c.predicted += ps.len();
        c.true_positives += ps.iter().filter(|s| gs.contains(s)).count();
    }
    Ok(c)
}

/// Token-level micro precision, recall and F1.
pub fn micro_f1(gold: &[Vec<LabelId>], pred: &[Vec<LabelId>]) -> Result<Scores> {
    Ok(token_counts(gold, pred)?.scores())
}

/// Aggregate over test episodes. Micro scores pool token counts across all
/// episodes; `episode_f1` keeps each episode's own F1.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub episode_f1: Vec<f64>,
    pub n_episodes: usize,
    /// Span-level pooled scores, for comparison.
    pub span: Scores,
}

impl EvalReport {
    pub fn from_counts(tokens: &[F1Counts], span: F1Counts) -> Self {
        let mut pooled = F1Counts::default();
        tokens.iter().for_each(|c| pooled.add(*c));
        let s = pooled.scores();
        Self {
            micro_precision: s.precision,
            micro_recall: s.recall,
            micro_f1: s.f1,
            episode_f1: tokens.iter().map(|c| c.scores().f1).collect(),
            n_episodes: tokens.len(),
            span: span.scores(),
        }
    }

    pub fn mean_episode_f1(&self) -> f64 {
        if self.episode_f1.is_empty() {
            return 0.0;
        }
        self.episode_f1.iter().sum::<f64>() / self.episode_f1.len() as f64
    }

    /// Population standard deviation of the per-episode F1.
    pub fn std_episode_f1(&self) -> f64 {
        if self.episode_f1.is_empty() {
            return 0.0;
        }
        let mean = self.mean_episode_f1();
        let var = self.episode_f1.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / self.episode_f1.len() as f64;
        var.sqrt()
    }

    /// `n_episodes, P, R, F1, mean episode F1, std` separated by tabs.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.n_episodes,
            self.micro_precision,
            self.micro_recall,
            self.micro_f1,
            self.mean_episode_f1(),
            self.std_episode_f1()
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "episodes: {}\nmicro precision: {:.4}\nmicro recall: {:.4}\nmicro f1: {:.4}\n\
             episode f1 mean: {:.4}\nepisode f1 std: {:.4}\nspan f1: {:.4}\n",
            self.n_episodes,
            self.micro_precision,
            self.micro_recall,
            self.micro_f1,
            self.mean_episode_f1(),
            self.std_episode_f1(),
            self.span.f1
        )
    }
}

/// Evaluation run settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub n_episodes: usize,
    /// Upper bound on worker threads; 1 evaluates sequentially.
    pub workers: usize,
    /// When given, the test corpus must share no entity type with it.
    pub train_labels: Option<&'a LabelSet>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            workers: 1,
            train_labels: None,
        }
    }
}

/// Samples `n_episodes` test episodes (episode `i` from sampler position
/// `i`), adapts on each support set and scores the query predictions.
pub fn evaluate<P: EmbeddingProvider + ?Sized>(
    params: &TripletNetParams<f32>,
    corpus: &Corpus,
    provider: &P,
    episode_cfg: &EpisodeConfig,
    cfg: &TrainConfig,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    if let Some(train) = opts.train_labels {
        if !train.is_disjoint(corpus.label_set()) {
            return Err(Error::InvalidConfig(
                "test corpus shares entity types with the training corpus".into(),
            ));
        }
    }
    let run = |i: usize| -> Result<(F1Counts, F1Counts)> {
        let episode = sample_episode(corpus, episode_cfg, &mut SamplerState::at(i as u64))?;
        let pred = test_adapt_and_predict(params, &episode, provider, episode_cfg.k_shots(), cfg)?;
        let gold: Vec<Vec<LabelId>> = episode.query().iter().map(|s| s.labels().to_vec()).collect();
        Ok((token_counts(&gold, &pred)?, span_counts(&gold, &pred)?))
    };
    let results: Vec<(F1Counts, F1Counts)> = if opts.workers <= 1 {
        (0..opts.n_episodes).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| (0..opts.n_episodes).into_par_iter().map(run).collect::<Result<_>>())?
    };
    let tokens: Vec<F1Counts> = results.iter().map(|r| r.0).collect();
    let mut span = F1Counts::default();
    results.iter().for_each(|r| span.add(r.1));
    Ok(EvalReport::from_counts(&tokens, span))
}
