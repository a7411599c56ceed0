//! Prototypes, triple construction and the triplet loss family.
//!
//! Token labels are given as way-slots: `Some(i)` for the i-th sampled type
//! and `None` for O.

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::LossVariant;
use crate::error::{Error, Result};
use crate::net::{backward, forward_batch, Dropout, Gradient, Scalar, TripletNetParams, MARGIN_FLOOR};

/// Loss value and its partial derivatives for one triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub value: f64,
    pub d_dp: f64,
    pub d_dn: f64,
    pub d_margin: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

fn check_margin(m: f64) -> Result<()> {
    if m < MARGIN_FLOOR {
        return Err(Error::InvalidConfig(format!("margin {m} below floor {MARGIN_FLOOR}")));
    }
    Ok(())
}

/// `α·σ(d_p − m)·d_p + (1 − α)·σ(m − d_n)·max(m − d_n, 0)`.
///
/// At `d_n = m` the hinge contributes a zero subgradient.
pub fn improved_triplet_loss(dp: f64, dn: f64, m: f64, alpha: f64) -> Result<LossTerms> {
    check_inputs(&[dp, dn, m, alpha])?;
    check_margin(m)?;
    let sp = sigmoid(dp - m);
    let pos = alpha * sp * dp;
    // d/d(dp) of σ(dp − m)·dp
    let d_pos = alpha * (sp * (1.0 - sp) * dp + sp);

    let u = m - dn;
    let (neg, d_neg_du) = if u > 0.0 {
        let sn = sigmoid(u);
        ((1.0 - alpha) * sn * u, (1.0 - alpha) * (sn * (1.0 - sn) * u + sn))
    } else {
        (0.0, 0.0)
    };
    Ok(LossTerms {
        value: pos + neg,
        d_dp: d_pos,
        d_dn: -d_neg_du,
        d_margin: -alpha * sp * (1.0 - sp) * dp + d_neg_du,
    })
}

/// The improved loss with both sigmoid weights replaced by 1.
pub fn unweighted_triplet_loss(dp: f64, dn: f64, m: f64, alpha: f64) -> Result<LossTerms> {
    check_inputs(&[dp, dn, m, alpha])?;
    check_margin(m)?;
    let u = m - dn;
    let active = u > 0.0;
    Ok(LossTerms {
        value: alpha * dp + (1.0 - alpha) * u.max(0.0),
        d_dp: alpha,
        d_dn: if active { -(1.0 - alpha) } else { 0.0 },
        d_margin: if active { 1.0 - alpha } else { 0.0 },
    })
}

/// `max(0, m + d_p − d_n)` with a zero subgradient on the boundary.
pub fn original_triplet_loss(dp: f64, dn: f64, m: f64) -> Result<LossTerms> {
    check_inputs(&[dp, dn, m])?;
    if m <= 0.0 {
        return Err(Error::InvalidConfig(format!("margin must be positive, got {m}")));
    }
    let z = m + dp - dn;
    let active = z > 0.0;
    let sign = if active { 1.0 } else { 0.0 };
    Ok(LossTerms {
        value: z.max(0.0),
        d_dp: sign,
        d_dn: -sign,
        d_margin: sign,
    })
}

/// Per-slot prototypes: input-space means and, once mapped, output centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    input: Array2<f64>,
    centers: Option<Array2<f64>>,
}

impl PrototypeSet {
    /// `n_slots × D` input-space prototypes.
    pub fn input(&self) -> ArrayView2<'_, f64> {
        self.input.view()
    }

    pub fn n_slots(&self) -> usize {
        self.input.nrows()
    }

    /// Output-space centers, if [`PrototypeSet::map`] has been applied.
    pub fn centers(&self) -> Option<ArrayView2<'_, f64>> {
        self.centers.as_ref().map(|c| c.view())
    }

    /// Maps the prototypes through the network (deterministic pass).
    pub fn map<F: Scalar>(mut self, params: &TripletNetParams<F>) -> Result<Self> {
        let (centers, _) = forward_batch(params, self.input.view(), None)?;
        self.centers = Some(centers);
        Ok(self)
    }
}

/// Mean of the vectors labeled with each slot.
pub fn build_prototypes(
    embeddings: ArrayView2<'_, f64>,
    labels: &[Option<usize>],
    n_slots: usize,
) -> Result<PrototypeSet> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.nrows(),
            got: labels.len(),
        });
    }
    let mut sums = Array2::<f64>::zeros((n_slots, embeddings.ncols()));
    let mut counts = vec![0usize; n_slots];
    for (row, label) in embeddings.rows().into_iter().zip(labels) {
        if let Some(slot) = *label {
            if slot >= n_slots {
                return Err(Error::InvalidEpisode(format!("slot {slot} out of range")));
            }
            let mut acc = sums.row_mut(slot);
            acc += &row;
            counts[slot] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        row /= c as f64;
    }
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("prototype".into()));
    }
    Ok(PrototypeSet {
        input: sums,
        centers: None,
    })
}

/// An (anchor, positive, negative) triple. The anchor is the mapped
/// prototype of `slot`; `positive` and `negative` index the token list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub slot: usize,
    pub positive: usize,
    pub negative: usize,
}

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// For every slot, pairs each positive token with each of the `k` negatives
/// nearest to the slot's center (ties broken by token position).
pub fn construct_triples(
    centers: ArrayView2<'_, f64>,
    mapped: ArrayView2<'_, f64>,
    labels: &[Option<usize>],
    k: usize,
) -> Result<Vec<Triple>> {
    if mapped.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: mapped.nrows(),
            got: labels.len(),
        });
    }
    if centers.ncols() != mapped.ncols() {
        return Err(Error::DimensionMismatch {
            expected: centers.ncols(),
            got: mapped.ncols(),
        });
    }
    let k = k.max(1);
    if let Some(slot) = (0..centers.nrows()).find(|&slot| !labels.contains(&Some(slot))) {
        return Err(Error::NoPositive(slot));
    }
    let mut triples = Vec::new();
    for slot in 0..centers.nrows() {
        let anchor = centers.row(slot);
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(slot)).collect();
        let mut negatives: Vec<(f64, usize)> = (0..labels.len())
            .filter(|&i| labels[i] != Some(slot))
            .map(|i| (euclidean(anchor, mapped.row(i)), i))
            .collect();
        if negatives.is_empty() {
            return Err(Error::NoNegative(slot));
        }
        negatives.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        negatives.truncate(k);
        for &positive in &positives {
            for &(_, negative) in &negatives {
                triples.push(Triple {
                    slot,
                    positive,
                    negative,
                });
            }
        }
    }
    Ok(triples)
}

/// Loss-related subset of the training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub variant: LossVariant,
    pub alpha: f64,
    pub fixed_margin: f64,
    pub neg_per_class: usize,
}

/// Support- or query-side inputs of one episode in the input space.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.nrows(),
                got: labels.len(),
            });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Radius used for each slot under `variant`.
pub fn slot_margins<F: Scalar>(
    params: &TripletNetParams<F>,
    n_slots: usize,
    variant: LossVariant,
    fixed_margin: f64,
) -> Result<Vec<f64>> {
    let available = params.shape().n_margins;
    if n_slots > available {
        return Err(Error::SlotCountMismatch {
            episode: n_slots,
            params: available,
        });
    }
    Ok(if variant.adaptive_margins() {
        params.effective_margins()[..n_slots].to_vec()
    } else {
        vec![fixed_margin; n_slots]
    })
}

fn triple_terms(variant: LossVariant, dp: f64, dn: f64, m: f64, alpha: f64) -> Result<LossTerms> {
    match variant {
        LossVariant::Improved | LossVariant::ImprovedFixedMargin => improved_triplet_loss(dp, dn, m, alpha),
        LossVariant::ImprovedNoWeights => unweighted_triplet_loss(dp, dn, m, alpha),
        LossVariant::Original => original_triplet_loss(dp, dn, m),
    }
}

/// Mean triple loss of an episode and, if requested, its full gradient
/// (network weights through the anchor, positive and negative branches, plus
/// margins for the adaptive variants).
pub fn episode_loss<F: Scalar>(
    params: &TripletNetParams<F>,
    protos: &PrototypeSet,
    tokens: &TokenBatch,
    settings: &LossSettings,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Gradient)> {
    let (value, grad) = evaluate(params, protos, tokens, settings, dropout, true)?;
    Ok((value, grad.expect("gradient requested")))
}

/// Mean triple loss without the backward pass.
pub fn episode_loss_value<F: Scalar>(
    params: &TripletNetParams<F>,
    protos: &PrototypeSet,
    tokens: &TokenBatch,
    settings: &LossSettings,
) -> Result<f64> {
    Ok(evaluate(params, protos, tokens, settings, None, false)?.0)
}

fn evaluate<F: Scalar>(
    params: &TripletNetParams<F>,
    protos: &PrototypeSet,
    tokens: &TokenBatch,
    settings: &LossSettings,
    dropout: Option<Dropout<'_>>,
    with_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    let n_slots = protos.n_slots();
    let margins = slot_margins(params, n_slots, settings.variant, settings.fixed_margin)?;
    let inputs = concatenate(Axis(0), &[protos.input.view(), tokens.embeddings.view()])
        .map_err(|_| Error::DimensionMismatch {
            expected: protos.input.ncols(),
            got: tokens.embeddings.ncols(),
        })?;
    let (mapped, trace) = forward_batch(params, inputs.view(), dropout)?;
    let centers = mapped.slice(s![..n_slots, ..]);
    let token_out = mapped.slice(s![n_slots.., ..]);
    let triples = construct_triples(centers, token_out, &tokens.labels, settings.neg_per_class)?;

    let scale = 1.0 / triples.len() as f64;
    let mut total = 0.0;
    let mut d_mapped = Array2::<f64>::zeros(mapped.raw_dim());
    let mut d_margins = vec![0.0; n_slots];
    for t in &triples {
        let anchor = centers.row(t.slot);
        let pos = token_out.row(t.positive);
        let neg = token_out.row(t.negative);
        let dp = euclidean(anchor, pos);
        let dn = euclidean(anchor, neg);
        let terms = triple_terms(settings.variant, dp, dn, margins[t.slot], settings.alpha)?;
        total += terms.value;
        if !with_grad {
            continue;
        }
        d_margins[t.slot] += terms.d_margin;
        // ∂d/∂anchor = (anchor − x) / d; zero when the points coincide.
        for (d, other, row, coef) in [
            (dp, pos, n_slots + t.positive, terms.d_dp),
            (dn, neg, n_slots + t.negative, terms.d_dn),
        ] {
            if d == 0.0 || coef == 0.0 {
                continue;
            }
            let unit = (&anchor - &other) * (coef / d);
            let mut a = d_mapped.row_mut(t.slot);
            a += &unit;
            let mut o = d_mapped.row_mut(row);
            o -= &unit;
        }
    }
    let value = total * scale;
    if !with_grad {
        return Ok((value, None));
    }
    d_mapped *= scale;
    let mut grad = backward(params, &trace, d_mapped.view())?;
    if settings.variant.adaptive_margins() {
        let raw = params.raw_margins();
        for (slot, (g, dm)) in grad.margins_mut().iter_mut().zip(&d_margins).enumerate() {
            // The floor clamp is flat below MARGIN_FLOOR.
            if raw[slot].to_f64() >= MARGIN_FLOOR {
                *g = dm * scale;
            }
        }
    }
    Ok((value, Some(grad)))
}
