//! Contrastive verification loss, per-attribute cross-entropy, and the
//! weighted total objective over a pair batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::AttributeVector;
use crate::error::{Error, Result};
use crate::network::{
    backward, forward_trace, AttributeLogits, Branch, Embedding, ForwardTrace, ModelParams, Objective,
};
use crate::sampler::{PairBatch, PairLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub margin: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin > 0.0 && self.margin.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("margin must be positive, got {}", self.margin)))
        }
    }
}

/// Weights of the photo-side and sketch-side attribute terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.lambda1, self.lambda2] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: {a} vs {b}")))
    }
}

pub fn euclidean_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_len(a.len(), b.len(), "embedding lengths differ")?;
    Ok(squared_distance(a.as_slice(), b.as_slice()).sqrt())
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Loss as a function of the pair distance.
#[inline]
pub fn contrastive_from_distance(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Genuine => 0.5 * d * d,
        PairLabel::Impostor => {
            let h = (margin - d).max(0.0);
            0.5 * h * h
        }
    }
}

pub fn contrastive_loss(a: &Embedding, b: &Embedding, label: PairLabel, cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(contrastive_from_distance(euclidean_distance(a, b)?, label, cfg.margin))
}

/// Loss and its gradient with respect to `a`; the gradient for `b` is the negation.
pub fn contrastive_with_grad(a: &[f64], b: &[f64], label: PairLabel, margin: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    match label {
        PairLabel::Genuine => (0.5 * d * d, diff),
        PairLabel::Impostor => {
            if d >= margin || d == 0.0 {
                // d == 0 has no direction; take the zero subgradient.
                let h = (margin - d).max(0.0);
                (0.5 * h * h, vec![0.0; diff.len()])
            } else {
                let scale = -(margin - d) / d;
                let h = margin - d;
                (0.5 * h * h, diff.into_iter().map(|v| v * scale).collect())
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]` from the raw logit.
#[inline]
pub fn binary_cross_entropy_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Sum over attributes of binary cross-entropy (natural log).
pub fn attribute_loss(logits: &AttributeLogits, labels: &AttributeVector) -> Result<f64> {
    check_len(logits.0.len(), labels.len(), "attribute logits vs labels")?;
    Ok(logits
        .0
        .iter()
        .enumerate()
        .map(|(t, &z)| binary_cross_entropy_with_logit(z, labels.as_f64(t)))
        .sum())
}

/// Gradient of [`attribute_loss`] with respect to each logit.
pub fn attribute_loss_grad(logits: &AttributeLogits, labels: &AttributeVector) -> Vec<f64> {
    logits
        .0
        .iter()
        .enumerate()
        .map(|(t, &z)| sigmoid(z) - labels.as_f64(t))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean contrastive loss over the batch pairs.
    pub l1: f64,
    /// Mean photo-branch attribute loss over unique photos.
    pub l2: f64,
    /// Mean sketch-branch attribute loss over unique sketches.
    pub l3: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Names the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [("L1", self.l1), ("L2", self.l2), ("L3", self.l3), ("LT", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Multipliers applied to each term when differentiating. The total loss uses
/// `(1, lambda1, lambda2)`; unit vectors isolate one term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermCoefficients {
    pub verification: f64,
    pub photo_attributes: f64,
    pub sketch_attributes: f64,
}

impl TermCoefficients {
    pub fn total(weights: &LossWeights) -> Self {
        Self {
            verification: 1.0,
            photo_attributes: weights.lambda1,
            sketch_attributes: weights.lambda2,
        }
    }

    pub const VERIFICATION: Self = Self {
        verification: 1.0,
        photo_attributes: 0.0,
        sketch_attributes: 0.0,
    };
    pub const PHOTO_ATTRIBUTES: Self = Self {
        verification: 0.0,
        photo_attributes: 1.0,
        sketch_attributes: 0.0,
    };
    pub const SKETCH_ATTRIBUTES: Self = Self {
        verification: 0.0,
        photo_attributes: 0.0,
        sketch_attributes: 1.0,
    };

    fn combine(&self, l1: f64, l2: f64, l3: f64) -> f64 {
        self.verification * l1 + self.photo_attributes * l2 + self.sketch_attributes * l3
    }
}

/// Images whose gradients are reduced together; fixed so that summation order
/// does not depend on the thread count.
const REDUCTION_CHUNK: usize = 4;

struct BatchForward {
    photos: Vec<ForwardTrace>,
    sketches: Vec<ForwardTrace>,
}

fn forward_batch(params: &ModelParams, batch: &PairBatch) -> Result<BatchForward> {
    if batch.pairs.is_empty() {
        return Err(Error::Domain("empty pair batch".into()));
    }
    let photos = batch
        .photos
        .par_iter()
        .map(|p| forward_trace(params, Branch::Photo, &p.image))
        .collect::<Result<Vec<_>>>()?;
    let sketches = batch
        .sketches
        .par_iter()
        .map(|s| {
            let input = params.encode_sketch(&s.image, &s.witness_attributes)?;
            forward_trace(params, Branch::Sketch, &input)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchForward { photos, sketches })
}

/// Loss components over a batch, with the gradient of
/// `coeffs.combine(L1, L2, L3)` when `with_gradient` is set.
pub fn evaluate_batch(
    params: &ModelParams,
    batch: &PairBatch,
    cfg: &ContrastiveConfig,
    weights: &LossWeights,
    coeffs: TermCoefficients,
    with_gradient: bool,
) -> Result<(LossBreakdown, Option<ModelParams>)> {
    cfg.validate()?;
    weights.validate()?;
    let fwd = forward_batch(params, batch)?;
    let e = params.config.embedding_dim();
    let mut d_photo_emb = vec![vec![0.0; e]; fwd.photos.len()];
    let mut d_sketch_emb = vec![vec![0.0; e]; fwd.sketches.len()];

    let n_pairs = batch.pairs.len() as f64;
    let mut l1 = 0.0;
    for pair in &batch.pairs {
        let a = fwd.photos[pair.photo].embedding.as_slice();
        let b = fwd.sketches[pair.sketch].embedding.as_slice();
        let (loss, grad_a) = contrastive_with_grad(a, b, pair.label, cfg.margin);
        l1 += loss;
        let scale = coeffs.verification / n_pairs;
        for k in 0..e {
            d_photo_emb[pair.photo][k] += scale * grad_a[k];
            d_sketch_emb[pair.sketch][k] -= scale * grad_a[k];
        }
    }
    l1 /= n_pairs;

    let attribute_term = |traces: &[ForwardTrace], labels: Vec<&AttributeVector>, coeff: f64| -> Result<(f64, Vec<Vec<f64>>)> {
        let n = traces.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(traces.len());
        for (t, y) in traces.iter().zip(labels) {
            loss += attribute_loss(&t.logits, y)?;
            grads.push(attribute_loss_grad(&t.logits, y).into_iter().map(|g| coeff * g / n).collect());
        }
        Ok((loss / n, grads))
    };
    let (l2, d_photo_logits) = attribute_term(
        &fwd.photos,
        batch.photos.iter().map(|p| &p.attributes).collect(),
        coeffs.photo_attributes,
    )?;
    let (l3, d_sketch_logits) = attribute_term(
        &fwd.sketches,
        batch.sketches.iter().map(|s| &s.attributes).collect(),
        coeffs.sketch_attributes,
    )?;

    let breakdown = LossBreakdown {
        l1,
        l2,
        l3,
        total: l1 + weights.lambda1 * l2 + weights.lambda2 * l3,
    };
    if !with_gradient {
        return Ok((breakdown, None));
    }
    // (trace, d_embedding, d_logits) for every image with a non-zero upstream gradient.
    let jobs: Vec<(&ForwardTrace, &[f64], &[f64])> = fwd
        .photos
        .iter()
        .zip(&d_photo_emb)
        .zip(&d_photo_logits)
        .chain(fwd.sketches.iter().zip(&d_sketch_emb).zip(&d_sketch_logits))
        .map(|((t, de), dl)| (t, de.as_slice(), dl.as_slice()))
        .filter(|(_, de, dl)| de.iter().chain(dl.iter()).any(|&v| v != 0.0))
        .collect();
    let partials: Vec<ModelParams> = jobs
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            for (trace, de, dl) in chunk {
                backward(params, trace, de, dl, &mut g);
            }
            g
        })
        .collect();
    let mut grad = params.zeros_like();
    for p in &partials {
        grad.add_scaled(p, 1.0);
    }
    Ok((breakdown, Some(grad)))
}

/// Mean contrastive loss over the batch (L1).
pub fn batch_verification_loss(params: &ModelParams, batch: &PairBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    let (b, _) = evaluate_batch(
        params,
        batch,
        cfg,
        &LossWeights::default(),
        TermCoefficients::VERIFICATION,
        false,
    )?;
    Ok(b.l1)
}

/// `L1 + lambda1 L2 + lambda2 L3` and its components.
pub fn total_loss(
    params: &ModelParams,
    batch: &PairBatch,
    weights: &LossWeights,
    cfg: &ContrastiveConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate_batch(params, batch, cfg, weights, TermCoefficients::total(weights), false)?.0)
}

/// One loss term (or the weighted total) over a fixed batch, as an [`Objective`].
pub struct BatchObjective<'a> {
    pub batch: &'a PairBatch,
    pub contrastive: ContrastiveConfig,
    pub weights: LossWeights,
    pub coeffs: TermCoefficients,
}

impl<'a> BatchObjective<'a> {
    pub fn total(batch: &'a PairBatch, contrastive: ContrastiveConfig, weights: LossWeights) -> Self {
        Self {
            batch,
            contrastive,
            weights,
            coeffs: TermCoefficients::total(&weights),
        }
    }

    pub fn term(batch: &'a PairBatch, contrastive: ContrastiveConfig, coeffs: TermCoefficients) -> Self {
        Self {
            batch,
            contrastive,
            weights: LossWeights::default(),
            coeffs,
        }
    }
}

impl Objective for BatchObjective<'_> {
    fn value_and_gradient(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        let (b, g) = evaluate_batch(params, self.batch, &self.contrastive, &self.weights, self.coeffs, true)?;
        Ok((self.coeffs.combine(b.l1, b.l2, b.l3), g.expect("gradient requested")))
    }

    fn value(&self, params: &ModelParams) -> Result<f64> {
        let (b, _) = evaluate_batch(params, self.batch, &self.contrastive, &self.weights, self.coeffs, false)?;
        Ok(self.coeffs.combine(b.l1, b.l2, b.l3))
    }
}
