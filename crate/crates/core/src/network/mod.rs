//! Coupled embedding networks.
//!
//! Each branch is a VGG-style trunk (3×3 conv + ReLU stages separated by 2×2
//! max pooling) whose last convolution produces `embedding_dim` maps that are
//! globally averaged into the embedding. One affine binary classifier per
//! attribute reads the embedding.

mod checkpoint;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    Checkpoint, TrainingProgress,
    CHECKPOINT_VERSION,
};
use layers::{
    global_average, global_average_backward, max_pool2, max_pool2_backward, relu_backward_in_place,
    relu_in_place, Conv3x3,
};

use crate::datamodel::{encode_attribute_channels, AttributeVector, PhotoSample, SketchSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Convolution widths per stage; 2×2 max pooling separates stages.
    pub stages: Vec<Vec<usize>>,
    pub embedding_dim: usize,
    pub attribute_count: usize,
}

impl BackboneConfig {
    /// VGG-16 layout with the last block narrowed to 256, 256, 64.
    pub fn full(input_channels: usize, attribute_count: usize) -> Self {
        Self {
            input_channels,
            stages: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![256, 256, 64],
            ],
            embedding_dim: 64,
            attribute_count,
        }
    }

    /// Three stages of widths 8, 16, 32 ending in an `embedding_dim` projection.
    pub fn desk(input_channels: usize, attribute_count: usize, embedding_dim: usize) -> Self {
        Self {
            input_channels,
            stages: vec![vec![8], vec![16], vec![32, embedding_dim]],
            embedding_dim,
            attribute_count,
        }
    }

    /// Two-stage trunk for gradient checks.
    pub fn tiny(input_channels: usize, attribute_count: usize, embedding_dim: usize) -> Self {
        Self {
            input_channels,
            stages: vec![vec![4], vec![6, embedding_dim]],
            embedding_dim,
            attribute_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("input channels and embedding_dim must be positive".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Config(format!("invalid stage layout {:?}", self.stages)));
        }
        let last = *self.stages.last().and_then(|s| s.last()).expect("non-empty");
        if last != self.embedding_dim {
            return Err(Error::Config(format!(
                "final convolution width {last} must equal embedding_dim {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Smallest spatial side that survives every pooling step.
    pub fn min_input_side(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut c = self.input_channels;
        for stage in &self.stages {
            for &width in stage {
                shapes.push((c, width));
                c = width;
            }
        }
        shapes
    }
}

/// Both branch layouts plus the canonical input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub photo: BackboneConfig,
    pub sketch: BackboneConfig,
    pub input_height: usize,
    pub input_width: usize,
    /// When false the sketch branch sees all-zero attribute planes.
    pub sketch_attribute_input: bool,
}

impl ModelConfig {
    pub fn full(attribute_count: usize) -> Self {
        Self {
            photo: BackboneConfig::full(3, attribute_count),
            sketch: BackboneConfig::full(1 + attribute_count, attribute_count),
            input_height: 250,
            input_width: 200,
            sketch_attribute_input: true,
        }
    }

    pub fn desk(attribute_count: usize) -> Self {
        Self {
            photo: BackboneConfig::desk(3, attribute_count, 16),
            sketch: BackboneConfig::desk(1 + attribute_count, attribute_count, 16),
            input_height: 32,
            input_width: 32,
            sketch_attribute_input: true,
        }
    }

    pub fn tiny(attribute_count: usize) -> Self {
        Self {
            photo: BackboneConfig::tiny(3, attribute_count, 8),
            sketch: BackboneConfig::tiny(1 + attribute_count, attribute_count, 8),
            input_height: 8,
            input_width: 8,
            sketch_attribute_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.photo.validate()?;
        self.sketch.validate()?;
        if self.photo.embedding_dim != self.sketch.embedding_dim {
            return Err(Error::Config(format!(
                "embedding dims differ: photo {} vs sketch {}",
                self.photo.embedding_dim, self.sketch.embedding_dim
            )));
        }
        if self.photo.attribute_count != self.sketch.attribute_count {
            return Err(Error::Config("branches must predict the same attribute count".into()));
        }
        if self.sketch.input_channels != 1 + self.sketch.attribute_count {
            return Err(Error::Config(format!(
                "sketch branch needs 1 + {} input channels, got {}",
                self.sketch.attribute_count, self.sketch.input_channels
            )));
        }
        let side = self.photo.min_input_side().max(self.sketch.min_input_side());
        if self.input_height < side || self.input_width < side {
            return Err(Error::Config(format!(
                "{}x{} input is too small for the configured pooling depth",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    pub fn attribute_count(&self) -> usize {
        self.photo.attribute_count
    }

    pub fn embedding_dim(&self) -> usize {
        self.photo.embedding_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pre-sigmoid attribute scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeLogits(pub Vec<f64>);

impl AttributeLogits {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Trunk plus attribute heads for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub convs: Vec<Conv3x3>,
    /// `[attribute][embedding]`
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl BranchWeights {
    fn zeros(cfg: &BackboneConfig) -> Self {
        Self {
            convs: cfg
                .conv_shapes()
                .into_iter()
                .map(|(i, o)| Conv3x3::zeros(i, o))
                .collect(),
            head_weight: vec![0.0; cfg.attribute_count * cfg.embedding_dim],
            head_bias: vec![0.0; cfg.attribute_count],
        }
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// Weights of both branches. Gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub photo: BranchWeights,
    pub sketch: BranchWeights,
}

/// Which branch a forward or backward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Photo,
    Sketch,
}

/// He-initialized model; deterministic given `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_branch = |cfg: &BackboneConfig| {
        let mut w = BranchWeights::zeros(cfg);
        for conv in &mut w.convs {
            let std = (2.0 / (conv.in_channels * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut conv.weight {
                *v = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, (1.0 / cfg.embedding_dim as f64).sqrt()).expect("positive std");
        for v in &mut w.head_weight {
            *v = normal.sample(&mut rng);
        }
        w
    };
    let photo = init_branch(&config.photo);
    let sketch = init_branch(&config.sketch);
    Ok(ModelParams {
        config: config.clone(),
        photo,
        sketch,
    })
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            photo: BranchWeights::zeros(&config.photo),
            sketch: BranchWeights::zeros(&config.sketch),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Parameter blocks in a fixed order: photo convs (weight, bias), photo
    /// head, then the same for the sketch branch.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.photo.blocks();
        b.extend(self.sketch.blocks());
        b
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.photo.blocks_mut();
        b.extend(self.sketch.blocks_mut());
        b
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn branch(&self, branch: Branch) -> (&BackboneConfig, &BranchWeights) {
        match branch {
            Branch::Photo => (&self.config.photo, &self.photo),
            Branch::Sketch => (&self.config.sketch, &self.sketch),
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut BranchWeights {
        match branch {
            Branch::Photo => &mut self.photo,
            Branch::Sketch => &mut self.sketch,
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// SHA-256 over the configuration and every parameter bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for block in self.blocks() {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Builds the sketch-branch input, zeroing attribute planes when the
    /// model was configured without attribute input.
    pub fn encode_sketch(&self, sketch: &Tensor, witness: &AttributeVector) -> Result<Tensor> {
        let t = self.config.attribute_count();
        if self.config.sketch_attribute_input {
            encode_attribute_channels(sketch, witness, t)
        } else {
            if witness.len() != t {
                return Err(Error::Dimension(format!(
                    "attribute vector has {} entries, model expects {t}",
                    witness.len()
                )));
            }
            encode_attribute_channels(sketch, &AttributeVector::zeros(t), t)
        }
    }
}

/// Cached activations of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    branch: Branch,
    /// Input to every convolution, in order.
    conv_inputs: Vec<Tensor>,
    /// Output of every convolution after its activation.
    conv_outputs: Vec<Tensor>,
    /// Argmax indices and input shape of each pooling step.
    pools: Vec<(Vec<usize>, (usize, usize, usize))>,
    pub embedding: Embedding,
    pub logits: AttributeLogits,
}

fn check_input(cfg: &BackboneConfig, input: &Tensor) -> Result<()> {
    if input.channels() != cfg.input_channels {
        return Err(Error::Dimension(format!(
            "branch expects {} input channels, got {}",
            cfg.input_channels,
            input.channels()
        )));
    }
    let side = cfg.min_input_side();
    if input.height() < side || input.width() < side {
        return Err(Error::Dimension(format!(
            "{}x{} input too small for {} pooling stages",
            input.height(),
            input.width(),
            cfg.stages.len() - 1
        )));
    }
    if !input.is_finite() {
        return Err(Error::Domain("input contains non-finite values".into()));
    }
    Ok(())
}

fn head(cfg: &BackboneConfig, w: &BranchWeights, embedding: &[f64]) -> Vec<f64> {
    let e = cfg.embedding_dim;
    (0..cfg.attribute_count)
        .map(|t| {
            w.head_bias[t]
                + w.head_weight[t * e..(t + 1) * e]
                    .iter()
                    .zip(embedding)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

/// Subtracted from every input value so that [0,1] images and 0/1 attribute
/// planes enter the first convolution centred on zero.
pub const INPUT_OFFSET: f64 = 0.5;

/// Runs a branch, keeping the activations needed for backpropagation.
pub fn forward_trace(params: &ModelParams, branch: Branch, input: &Tensor) -> Result<ForwardTrace> {
    let (cfg, w) = params.branch(branch);
    check_input(cfg, input)?;
    let n_convs = w.convs.len();
    let mut conv_inputs = Vec::with_capacity(n_convs);
    let mut conv_outputs = Vec::with_capacity(n_convs);
    let mut pools = Vec::with_capacity(cfg.stages.len());
    let mut x = input.map(|v| v - INPUT_OFFSET);
    let mut li = 0;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for _ in stage {
            let mut y = w.convs[li].forward(&x);
            // The embedding projection stays linear.
            if li + 1 < n_convs {
                relu_in_place(&mut y);
            }
            conv_inputs.push(std::mem::replace(&mut x, y.clone()));
            conv_outputs.push(y);
            li += 1;
        }
        if si + 1 < cfg.stages.len() {
            let shape = x.shape();
            let (pooled, argmax) = max_pool2(&x);
            pools.push((argmax, shape));
            x = pooled;
        }
    }
    let embedding = global_average(&x);
    let logits = head(cfg, w, &embedding);
    if embedding.iter().chain(&logits).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forward pass produced non-finite outputs".into()));
    }
    Ok(ForwardTrace {
        branch,
        conv_inputs,
        conv_outputs,
        pools,
        embedding: Embedding(embedding),
        logits: AttributeLogits(logits),
    })
}

/// Accumulates into `grads` the parameter gradient of
/// `<d_embedding, embedding> + <d_logits, logits>`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_embedding: &[f64],
    d_logits: &[f64],
    grads: &mut ModelParams,
) {
    let branch = trace.branch;
    let (cfg, w) = params.branch(branch);
    let g = grads.branch_mut(branch);
    let e = cfg.embedding_dim;
    let emb = trace.embedding.as_slice();
    let mut d_emb = d_embedding.to_vec();
    for (t, &dl) in d_logits.iter().enumerate() {
        if dl == 0.0 {
            continue;
        }
        g.head_bias[t] += dl;
        let row = &w.head_weight[t * e..(t + 1) * e];
        let grow = &mut g.head_weight[t * e..(t + 1) * e];
        for k in 0..e {
            grow[k] += dl * emb[k];
            d_emb[k] += dl * row[k];
        }
    }
    let last = trace.conv_outputs.last().expect("at least one conv");
    let mut d = global_average_backward(&d_emb, last.height(), last.width());
    let mut li = w.convs.len();
    for si in (0..cfg.stages.len()).rev() {
        if si + 1 < cfg.stages.len() {
            let (argmax, shape) = &trace.pools[si];
            d = max_pool2_backward(&d, argmax, *shape);
        }
        for _ in 0..cfg.stages[si].len() {
            li -= 1;
            if li + 1 < w.convs.len() {
                relu_backward_in_place(&mut d, &trace.conv_outputs[li]);
            }
            match w.convs[li].backward(&trace.conv_inputs[li], &d, &mut g.convs[li], li > 0) {
                Some(next) => d = next,
                None => debug_assert_eq!(li, 0),
            }
        }
    }
}

pub fn forward(params: &ModelParams, branch: Branch, input: &Tensor) -> Result<(Embedding, AttributeLogits)> {
    let t = forward_trace(params, branch, input)?;
    Ok((t.embedding, t.logits))
}

/// Embeds an RGB photo.
pub fn forward_photo(params: &ModelParams, image: &Tensor) -> Result<(Embedding, AttributeLogits)> {
    forward(params, Branch::Photo, image)
}

/// Embeds a sketch already stacked with its attribute planes.
pub fn forward_sketch(params: &ModelParams, encoded: &Tensor) -> Result<(Embedding, AttributeLogits)> {
    forward(params, Branch::Sketch, encoded)
}

pub fn embed_photo(params: &ModelParams, photo: &PhotoSample) -> Result<(Embedding, AttributeLogits)> {
    forward_photo(params, &photo.image)
}

pub fn embed_sketch(params: &ModelParams, sketch: &SketchSample) -> Result<(Embedding, AttributeLogits)> {
    forward_sketch(params, &params.encode_sketch(&sketch.image, &sketch.witness_attributes)?)
}

/// A scalar function of the parameters with its exact gradient.
pub trait Objective {
    fn value_and_gradient(&self, params: &ModelParams) -> Result<(f64, ModelParams)>;

    fn value(&self, params: &ModelParams) -> Result<f64> {
        Ok(self.value_and_gradient(params)?.0)
    }
}

impl<F> Objective for F
where
    F: Fn(&ModelParams) -> Result<(f64, ModelParams)>,
{
    fn value_and_gradient(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        self(params)
    }
}

/// Gradient of `objective` at `params`; fails on non-finite values.
pub fn gradients(params: &ModelParams, objective: &dyn Objective) -> Result<ModelParams> {
    let (value, grad) = objective.value_and_gradient(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("gradient contains non-finite entries".into()));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::AttributeVector;

    fn probe(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |ch, y, x| ((ch * 7 + y * 3 + x * 5) % 13) as f64 / 12.0)
    }

    #[test]
    fn default_channel_counts_and_heads() {
        let cfg = ModelConfig::full(12);
        cfg.validate().unwrap();
        assert_eq!(cfg.photo.input_channels, 3);
        assert_eq!(cfg.sketch.input_channels, 13);
        assert_eq!(cfg.embedding_dim(), 64);
        let desk = build_model(&ModelConfig::desk(12), 0).unwrap();
        assert_eq!(desk.photo.convs[0].in_channels, 3);
        assert_eq!(desk.sketch.convs[0].in_channels, 13);
        assert_eq!(desk.photo.head_bias.len(), 12);
        assert_eq!(desk.sketch.head_bias.len(), 12);
    }

    #[test]
    fn full_layout_widths() {
        let cfg = BackboneConfig::full(3, 12);
        let widths: Vec<usize> = cfg.conv_shapes().iter().map(|s| s.1).collect();
        assert_eq!(widths, [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 256, 256, 64]);
    }

    #[test]
    fn mismatched_embedding_dims_rejected() {
        let mut cfg = ModelConfig::desk(12);
        cfg.sketch = BackboneConfig::desk(13, 12, 8);
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let cfg = ModelConfig::desk(12);
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a, build_model(&cfg, 43).unwrap());
    }

    #[test]
    fn biases_start_at_zero() {
        let p = build_model(&ModelConfig::desk(12), 1).unwrap();
        assert!(p.photo.convs.iter().all(|c| c.bias.iter().all(|&b| b == 0.0)));
        assert!(p.sketch.head_bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn embedding_length_and_purity() {
        let p = build_model(&ModelConfig::desk(12), 3).unwrap();
        let x = probe(3, 32, 32);
        let (e1, l1) = forward_photo(&p, &x).unwrap();
        let (e2, l2) = forward_photo(&p, &x).unwrap();
        assert_eq!(e1.len(), 16);
        assert_eq!(l1.0.len(), 12);
        assert_eq!((e1, l1), (e2, l2));
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let p = build_model(&ModelConfig::desk(12), 3).unwrap();
        assert!(matches!(forward_photo(&p, &probe(1, 32, 32)), Err(Error::Dimension(_))));
        assert!(matches!(forward_sketch(&p, &probe(3, 32, 32)), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_final_maps_average_to_their_value() {
        // A single 1x1 stage with zero weights reduces to the bias planes.
        let cfg = ModelConfig {
            photo: BackboneConfig {
                input_channels: 3,
                stages: vec![vec![4]],
                embedding_dim: 4,
                attribute_count: 2,
            },
            sketch: BackboneConfig {
                input_channels: 3,
                stages: vec![vec![4]],
                embedding_dim: 4,
                attribute_count: 2,
            },
            input_height: 5,
            input_width: 5,
            sketch_attribute_input: true,
        };
        let mut p = ModelParams::zeros(&cfg);
        p.photo.convs[0].bias = vec![0.5, -1.0, 2.0, 0.25];
        let (e, _) = forward_photo(&p, &probe(3, 5, 5)).unwrap();
        assert_eq!(e.0, vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn attribute_planes_influence_sketch_embedding() {
        let cfg = ModelConfig::desk(12);
        let sketch = probe(1, 32, 32);
        let mut changed = 0;
        for seed in 0..5 {
            let p = build_model(&cfg, seed).unwrap();
            let a = AttributeVector::zeros(12);
            let mut b = a.clone();
            b.set(5, true);
            let (ea, _) = forward_sketch(&p, &p.encode_sketch(&sketch, &a).unwrap()).unwrap();
            let (eb, _) = forward_sketch(&p, &p.encode_sketch(&sketch, &b).unwrap()).unwrap();
            if ea != eb {
                changed += 1;
            }
        }
        assert_eq!(changed, 5);
    }

    #[test]
    fn zeroed_attribute_input_ignores_witness() {
        let mut cfg = ModelConfig::desk(12);
        cfg.sketch_attribute_input = false;
        let p = build_model(&cfg, 0).unwrap();
        let sketch = probe(1, 32, 32);
        let mut b = AttributeVector::zeros(12);
        b.set(0, true);
        let ea = forward_sketch(&p, &p.encode_sketch(&sketch, &AttributeVector::zeros(12)).unwrap()).unwrap();
        let eb = forward_sketch(&p, &p.encode_sketch(&sketch, &b).unwrap()).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        let obj = |q: &ModelParams| Ok((3.5, q.zeros_like()));
        let g = gradients(&p, &obj).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        let obj = |q: &ModelParams| {
            let v = 0.5 * q.flat().iter().map(|w| w * w).sum::<f64>();
            Ok((v, q.clone()))
        };
        let g = gradients(&p, &obj).unwrap();
        assert_eq!(g.flat(), p.flat());
    }

    #[test]
    fn non_finite_objective_rejected() {
        let p = build_model(&ModelConfig::tiny(12), 0).unwrap();
        let obj = |q: &ModelParams| Ok((f64::NAN, q.zeros_like()));
        assert!(matches!(gradients(&p, &obj), Err(Error::Numeric(_))));
    }

    /// Finite-difference check of a single branch on a linear functional of
    /// its outputs.
    #[test]
    fn branch_backward_matches_finite_differences() {
        let cfg = ModelConfig::tiny(3);
        let p = build_model(&cfg, 11).unwrap();
        let x = probe(3, 8, 8).map(|v| v - 0.3);
        let de: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let dl: Vec<f64> = vec![0.3, -0.7, 0.2];
        let f = |q: &ModelParams| {
            let (e, l) = forward_photo(q, &x).unwrap();
            e.0.iter().zip(&de).map(|(a, b)| a * b).sum::<f64>()
                + l.0.iter().zip(&dl).map(|(a, b)| a * b).sum::<f64>()
        };
        let trace = forward_trace(&p, Branch::Photo, &x).unwrap();
        let mut g = p.zeros_like();
        backward(&p, &trace, &de, &dl, &mut g);
        let analytic = g.flat();
        let h = 1e-6;
        let n_photo: usize = p.photo.blocks().iter().map(|b| b.len()).sum();
        for idx in (0..n_photo).step_by(7) {
            let mut plus = p.clone();
            let mut minus = p.clone();
            set_flat(&mut plus, idx, h);
            set_flat(&mut minus, idx, -h);
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(err < 1e-5, "param {idx}: numeric {numeric} analytic {}", analytic[idx]);
        }
    }

    fn set_flat(p: &mut ModelParams, mut idx: usize, delta: f64) {
        for b in p.blocks_mut() {
            if idx < b.len() {
                b[idx] += delta;
                return;
            }
            idx -= b.len();
        }
    }
}
