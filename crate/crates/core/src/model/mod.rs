//! Per-voxel classifier: a rectified-linear backbone followed by a single
//! affine classification head.
//!
//! Pre-training and finetuning differ only in the head: [`swap_head`]
//! replaces it and leaves every backbone parameter bit-identical.
//! [`MHModel`] shares one backbone between several named heads.

mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, load_mh_checkpoint, load_network, save_checkpoint, save_mh_checkpoint,
    save_network, CheckpointStats, CHECKPOINT_EXTENSION,
};

use crate::featurize::N_FEATURES;
use crate::seed;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 32];

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layer widths must be at least 1 and at least one hidden layer is required")]
    InvalidWidth,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no head named {0:?}")]
    UnknownHead(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Fully connected layer, `y = x W + b` with `W` of shape (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
        Dense {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.fan_in(), self.fan_out())
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Uniform access to every parameter tensor, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn layer_tensors<'a>(layers: impl IntoIterator<Item = &'a Dense>) -> Vec<&'a [f64]> {
    layers.into_iter().flat_map(Dense::tensors).collect()
}

fn layer_tensors_mut<'a>(layers: impl IntoIterator<Item = &'a mut Dense>) -> Vec<&'a mut [f64]> {
    layers.into_iter().flat_map(Dense::tensors_mut).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Vec<Dense>,
    pub head: Dense,
}

/// Same structure as [`Model`], holding ∂loss/∂parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<Dense>,
    pub head: Dense,
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(self.backbone.iter().chain([&self.head]))
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        layer_tensors_mut(self.backbone.iter_mut().chain([&mut self.head]))
    }
}

impl Parameters for Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(self.backbone.iter().chain([&self.head]))
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        layer_tensors_mut(self.backbone.iter_mut().chain([&mut self.head]))
    }
}

fn init_backbone(input: usize, hidden: &[usize], seed: u64) -> Result<Vec<Dense>> {
    if input == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(ModelError::InvalidWidth);
    }
    let mut fan_in = input;
    Ok(hidden
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            let layer = Dense::glorot(fan_in, w, &mut seed::rng(seed, &["layer".into(), l.into()]));
            fan_in = w;
            layer
        })
        .collect())
}

fn init_head(fan_in: usize, n_classes: usize, seed: u64) -> Dense {
    Dense::glorot(fan_in, n_classes, &mut seed::rng(seed, &["head".into()]))
}

impl Model {
    pub fn init(input: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(ModelError::InvalidWidth);
        }
        let backbone = init_backbone(input, hidden, seed)?;
        let head = init_head(*hidden.last().expect("non-empty"), n_classes, seed);
        Ok(Model { backbone, head })
    }

    pub fn input_width(&self) -> usize {
        self.backbone[0].fan_in()
    }

    pub fn embedding_width(&self) -> usize {
        self.head.fan_in()
    }

    pub fn n_classes(&self) -> usize {
        self.head.fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.backbone.iter().map(Dense::fan_out).collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            backbone: self.backbone.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }
}

/// Model on the 14 voxel features.
pub fn init_model(hidden_widths: &[usize], n_classes: usize, seed: u64) -> Result<Model> {
    Model::init(N_FEATURES, hidden_widths, n_classes, seed)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input of every backbone layer, then the embedding fed to the head.
    pub activations: Vec<Array2<f64>>,
    /// Pre-activation of every backbone layer.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input")
    }
}

fn check_input(backbone: &[Dense], x: &Array2<f64>) -> Result<()> {
    let want = backbone[0].fan_in();
    if x.ncols() != want {
        return Err(ModelError::ShapeMismatch(format!(
            "features have {} columns, model expects {want}",
            x.ncols()
        )));
    }
    Ok(())
}

fn backbone_forward(backbone: &[Dense], x: &Array2<f64>) -> Result<ForwardCache> {
    check_input(backbone, x)?;
    let mut activations = Vec::with_capacity(backbone.len() + 1);
    let mut pre_activations = Vec::with_capacity(backbone.len());
    activations.push(x.clone());
    for layer in backbone {
        let z = layer.affine(activations.last().expect("non-empty").view());
        activations.push(z.mapv(|v| v.max(0.0)));
        pre_activations.push(z);
    }
    Ok(ForwardCache {
        activations,
        pre_activations,
    })
}

fn backbone_backward(
    backbone: &[Dense],
    cache: &ForwardCache,
    mut grad: Array2<f64>,
) -> Vec<Dense> {
    let mut grads: Vec<Dense> = Vec::with_capacity(backbone.len());
    for (l, layer) in backbone.iter().enumerate().rev() {
        let z = &cache.pre_activations[l];
        ndarray::Zip::from(&mut grad).and(z).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let input = &cache.activations[l];
        let weight = input.t().dot(&grad);
        let bias = grad.sum_axis(Axis(0));
        if l > 0 {
            grad = grad.dot(&layer.weight.t());
        }
        grads.push(Dense { weight, bias });
    }
    grads.reverse();
    grads
}

fn head_backward(head: &Dense, embedding: &Array2<f64>, grad_logits: &Array2<f64>) -> (Dense, Array2<f64>) {
    let grad = Dense {
        weight: embedding.t().dot(grad_logits),
        bias: grad_logits.sum_axis(Axis(0)),
    };
    (grad, grad_logits.dot(&head.weight.t()))
}

fn check_cache(backbone: &[Dense], head: &Dense, cache: &ForwardCache, grad_logits: &Array2<f64>) -> Result<()> {
    let rows = cache.activations[0].nrows();
    if cache.activations.len() != backbone.len() + 1
        || cache.pre_activations.len() != backbone.len()
        || cache.embedding().ncols() != head.fan_in()
    {
        return Err(ModelError::ShapeMismatch("cache does not match the model".into()));
    }
    if grad_logits.dim() != (rows, head.fan_out()) {
        return Err(ModelError::ShapeMismatch(format!(
            "logit gradient is {:?}, expected ({rows}, {})",
            grad_logits.dim(),
            head.fan_out()
        )));
    }
    Ok(())
}

pub fn forward(model: &Model, features: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    let cache = backbone_forward(&model.backbone, features)?;
    let logits = model.head.affine(cache.embedding().view());
    Ok((logits, cache))
}

pub fn backward(model: &Model, cache: &ForwardCache, grad_logits: &Array2<f64>) -> Result<Gradients> {
    check_cache(&model.backbone, &model.head, cache, grad_logits)?;
    let (head, grad_emb) = head_backward(&model.head, cache.embedding(), grad_logits);
    let backbone = backbone_backward(&model.backbone, cache, grad_emb);
    Ok(Gradients { backbone, head })
}

/// Activations entering the head.
pub fn extract_penultimate(model: &Model, features: &Array2<f64>) -> Result<Array2<f64>> {
    let mut cache = backbone_forward(&model.backbone, features)?;
    Ok(cache.activations.pop().expect("non-empty"))
}

/// Replace the head with a fresh `n_new_classes` one; the backbone is
/// moved over untouched.
pub fn swap_head(model: Model, n_new_classes: usize, seed: u64) -> Result<Model> {
    if n_new_classes < 2 {
        return Err(ModelError::InvalidWidth);
    }
    let head = init_head(model.embedding_width(), n_new_classes, seed);
    Ok(Model {
        backbone: model.backbone,
        head,
    })
}

/// Shared backbone with one head per source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MHModel {
    pub backbone: Vec<Dense>,
    pub heads: BTreeMap<String, Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MHGradients {
    pub backbone: Vec<Dense>,
    pub heads: BTreeMap<String, Dense>,
}

impl Parameters for MHModel {
    fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(self.backbone.iter().chain(self.heads.values()))
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        layer_tensors_mut(self.backbone.iter_mut().chain(self.heads.values_mut()))
    }
}

impl Parameters for MHGradients {
    fn tensors(&self) -> Vec<&[f64]> {
        layer_tensors(self.backbone.iter().chain(self.heads.values()))
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        layer_tensors_mut(self.backbone.iter_mut().chain(self.heads.values_mut()))
    }
}

impl MHModel {
    /// `heads` lists (name, class count); head seeds are keyed by name.
    pub fn init(input: usize, hidden: &[usize], heads: &[(String, usize)], seed: u64) -> Result<Self> {
        let backbone = init_backbone(input, hidden, seed)?;
        let width = *hidden.last().expect("non-empty");
        let mut map = BTreeMap::new();
        for (name, n) in heads {
            if *n == 0 {
                return Err(ModelError::InvalidWidth);
            }
            let head = Dense::glorot(width, *n, &mut seed::rng(seed, &["head".into(), name.as_str().into()]));
            map.insert(name.clone(), head);
        }
        Ok(MHModel { backbone, heads: map })
    }

    pub fn head(&self, name: &str) -> Result<&Dense> {
        self.heads
            .get(name)
            .ok_or_else(|| ModelError::UnknownHead(name.to_string()))
    }

    /// A single-head view for the named head.
    pub fn to_model(&self, name: &str) -> Result<Model> {
        Ok(Model {
            backbone: self.backbone.clone(),
            head: self.head(name)?.clone(),
        })
    }

    pub fn zero_gradients(&self) -> MHGradients {
        MHGradients {
            backbone: self.backbone.iter().map(Dense::zeros_like).collect(),
            heads: self
                .heads
                .iter()
                .map(|(k, h)| (k.clone(), h.zeros_like()))
                .collect(),
        }
    }

    pub fn forward(&self, features: &Array2<f64>, head: &str) -> Result<(Array2<f64>, ForwardCache)> {
        let h = self.head(head)?;
        let cache = backbone_forward(&self.backbone, features)?;
        Ok((h.affine(cache.embedding().view()), cache))
    }

    /// Gradients for one head's loss; other heads get zero gradients.
    pub fn backward(&self, cache: &ForwardCache, head: &str, grad_logits: &Array2<f64>) -> Result<MHGradients> {
        let h = self.head(head)?;
        check_cache(&self.backbone, h, cache, grad_logits)?;
        let (hg, grad_emb) = head_backward(h, cache.embedding(), grad_logits);
        let mut grads = self.zero_gradients();
        grads.backbone = backbone_backward(&self.backbone, cache, grad_emb);
        grads.heads.insert(head.to_string(), hg);
        Ok(grads)
    }
}

/// A checkpointed network of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Single(Model),
    Multi(MHModel),
}

impl Network {
    pub fn backbone(&self) -> &[Dense] {
        match self {
            Network::Single(m) => &m.backbone,
            Network::Multi(m) => &m.backbone,
        }
    }

    /// Backbone with a fresh `n_classes` head, as [`swap_head`] builds it.
    pub fn into_swapped(self, n_classes: usize, seed: u64) -> Result<Model> {
        let model = match self {
            Network::Single(m) => m,
            Network::Multi(m) => {
                let head = m.heads.values().next().cloned().ok_or(ModelError::InvalidWidth)?;
                Model {
                    backbone: m.backbone,
                    head,
                }
            }
        };
        swap_head(model, n_classes, seed)
    }
}

pub fn mh_forward(mh: &MHModel, features: &Array2<f64>, dataset_name: &str) -> Result<Array2<f64>> {
    Ok(mh.forward(features, dataset_name)?.0)
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    for (a, o) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}
