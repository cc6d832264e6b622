//! MLP feature extractor: `linear -> [batchnorm] -> [relu]` blocks.
//!
//! Teacher and student are both [`FeatureExtractorParams`] built from the same
//! layer specs. Checkpoints are a fixed binary layout:
//!
//! ```text
//! b"SCDA1\n" | u32 LE manifest length | UTF-8 JSON manifest | f64 LE payload
//! ```
//!
//! The payload lists, per layer, `weight` (row-major, `in x out`), `bias`, and
//! for batchnorm layers `gamma`, `beta`, `running_mean`, `running_var`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, BatchNormCache, BatchNormState, KernelError, Matrix, Mode,
};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SCDA1\n";
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_FEATURE_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint payload length mismatch: manifest declares {expected} values, payload has {found_bytes} bytes")]
    PayloadLength { expected: usize, found_bytes: usize },
    #[error("checkpoint shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_batchnorm: bool,
    pub has_relu: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, has_batchnorm: bool, has_relu: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            has_batchnorm,
            has_relu,
        }
    }
}

/// `input -> 64 (BN, ReLU) -> 64 (BN, ReLU) -> 32` linear head.
pub fn default_spec(input_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(input_dim, DEFAULT_HIDDEN_DIM, true, true),
        LayerSpec::new(DEFAULT_HIDDEN_DIM, DEFAULT_HIDDEN_DIM, true, true),
        LayerSpec::new(DEFAULT_HIDDEN_DIM, DEFAULT_FEATURE_DIM, false, false),
    ]
}

pub fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.is_empty() {
        return Err(ModelError::InvalidSpec("no layers".into()));
    }
    for (i, l) in spec.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(ModelError::InvalidSpec(format!("layer{i} has a zero dimension")));
        }
        if i > 0 && spec[i - 1].out_dim != l.in_dim {
            return Err(ModelError::InvalidSpec(format!(
                "layer{} outputs {} but layer{i} expects {}",
                i - 1,
                spec[i - 1].out_dim,
                l.in_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNormState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        }
    }
}

/// Weights, biases and batchnorm state for every layer, plus the spec they
/// were built from. `Clone` is a deep copy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractorParams {
    pub layers: Vec<Layer>,
    spec: Vec<LayerSpec>,
    seed: u64,
}

impl FeatureExtractorParams {
    /// Assembles params from parts, checking them against `spec`.
    pub fn from_parts(spec: Vec<LayerSpec>, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        validate_spec(&spec)?;
        if spec.len() != layers.len() {
            return Err(ModelError::Structure(format!(
                "{} specs but {} layers",
                spec.len(),
                layers.len()
            )));
        }
        for (i, (s, l)) in spec.iter().zip(&layers).enumerate() {
            let bad = l.weights.shape() != (s.in_dim, s.out_dim)
                || l.bias.len() != s.out_dim
                || l.bn.is_some() != s.has_batchnorm
                || l
                    .bn
                    .as_ref()
                    .is_some_and(|b| b.dim() != s.out_dim || !b.is_consistent());
            if bad {
                return Err(ModelError::Shape {
                    layer: format!("layer{i}"),
                    detail: format!("parameters do not match spec {s:?}"),
                });
            }
        }
        Ok(Self { layers, spec, seed })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    /// Seed the parameters were initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.spec[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.spec[self.spec.len() - 1].out_dim
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.spec == other.spec
    }

    pub fn ensure_same_structure(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(ModelError::Structure(format!("{what}: layer specs differ")))
        }
    }

    /// Learnable tensors in canonical order: per layer weight, bias, gamma, beta.
    /// A linear bias that feeds a batchnorm is cancelled by the mean subtraction,
    /// so it stays at zero and is not listed.
    pub fn learnable(&self) -> Vec<(String, ParamKind, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), ParamKind::Weight, l.weights.data()));
            if l.bn.is_none() {
                out.push((format!("layer{i}.bias"), ParamKind::Bias, &l.bias[..]));
            }
            if let Some(bn) = &l.bn {
                out.push((format!("layer{i}.gamma"), ParamKind::Gamma, &bn.gamma[..]));
                out.push((format!("layer{i}.beta"), ParamKind::Beta, &bn.beta[..]));
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push((ParamKind::Weight, l.weights.data_mut()));
            if l.bn.is_none() {
                out.push((ParamKind::Bias, &mut l.bias[..]));
            }
            if let Some(bn) = &mut l.bn {
                out.push((ParamKind::Gamma, &mut bn.gamma[..]));
                out.push((ParamKind::Beta, &mut bn.beta[..]));
            }
        }
        out
    }

    /// `(running_mean, running_var)` for every batchnorm layer.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|bn| (&bn.running_mean[..], &bn.running_var[..]))
            .collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<(&mut [f64], &mut [f64])> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.bn.as_mut())
            .map(|bn| (&mut bn.running_mean[..], &mut bn.running_var[..]))
            .collect()
    }

    pub fn flatten_learnable(&self) -> Vec<f64> {
        self.learnable()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    /// One name per learnable scalar, e.g. `layer0.weight[3]`.
    pub fn learnable_names(&self) -> Vec<String> {
        self.learnable()
            .into_iter()
            .flat_map(|(n, _, v)| (0..v.len()).map(move |i| format!("{n}[{i}]")))
            .collect()
    }

    pub fn set_learnable(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.learnable().iter().map(|(_, _, v)| v.len()).sum();
        if flat.len() != total {
            return Err(ModelError::Structure(format!(
                "expected {total} learnable values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, dst) in self.learnable_mut() {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.learnable()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
            && self
                .running_stats()
                .iter()
                .all(|(m, v)| m.iter().chain(v.iter()).all(|x| x.is_finite()))
    }

    /// Eval-mode forward pass: batchnorm uses running statistics, nothing is mutated.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, spec) in self.layers.iter().zip(&self.spec) {
            h = linear_forward(&h, &layer.weights, &layer.bias)?;
            if let Some(bn) = &layer.bn {
                h = batchnorm_eval(&h, bn)?;
            }
            if spec.has_relu {
                h = relu_forward(&h);
            }
        }
        Ok(h)
    }

    /// Forward pass normalizing with batch statistics but leaving running
    /// statistics untouched.
    pub fn forward_batch_stats(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, spec) in self.layers.iter().zip(&self.spec) {
            h = linear_forward(&h, &layer.weights, &layer.bias)?;
            if let Some(bn) = &layer.bn {
                let mut scratch = bn.clone();
                h = batchnorm_forward(&h, &mut scratch, Mode::Train)?.0;
            }
            if spec.has_relu {
                h = relu_forward(&h);
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(KernelError::Shape {
                op: "forward_features",
                left: x.shape_str(),
                right: format!("input dim {}", self.input_dim()),
            }
            .into());
        }
        x.ensure_finite("forward input")?;
        Ok(())
    }
}

/// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` drawn row-major,
/// layer by layer, from one xoshiro256** stream; zero biases; identity batchnorm.
pub fn init_params(spec: &[LayerSpec], seed: u64) -> Result<FeatureExtractorParams> {
    validate_spec(spec)?;
    let mut rng = rng::seeded(seed);
    let layers = spec
        .iter()
        .map(|s| {
            let bound = (6.0 / s.in_dim as f64).sqrt();
            let weights =
                Matrix::from_fn(s.in_dim, s.out_dim, |_, _| rng::symmetric(&mut rng, bound));
            Layer {
                weights,
                bias: vec![0.0; s.out_dim],
                bn: s.has_batchnorm.then(|| BatchNormState::new(s.out_dim)),
            }
        })
        .collect();
    FeatureExtractorParams::from_parts(spec.to_vec(), layers, seed)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    input: Matrix,
    bn: Option<BatchNormCache>,
    /// Input to the ReLU, when the layer has one.
    pre_relu: Option<Matrix>,
}

/// Intermediates saved by [`forward_features`] for [`backward_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    mode: Mode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Runs the network. Train mode normalizes with batch statistics and updates
/// running statistics; eval mode leaves `params` untouched.
pub fn forward_features(
    params: &mut FeatureExtractorParams,
    x: &Matrix,
    mode: Mode,
) -> Result<(Matrix, ForwardCache)> {
    params.check_input(x)?;
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for (layer, spec) in params.layers.iter_mut().zip(&params.spec) {
        let input = h;
        let mut z = linear_forward(&input, &layer.weights, &layer.bias)?;
        let mut bn_cache = None;
        if let Some(bn) = layer.bn.as_mut() {
            let (y, c) = batchnorm_forward(&z, bn, mode)?;
            z = y;
            bn_cache = Some(c);
        }
        let pre_relu = if spec.has_relu {
            let out = relu_forward(&z);
            let pre = std::mem::replace(&mut z, out);
            Some(pre)
        } else {
            None
        };
        caches.push(LayerCache {
            input,
            bn: bn_cache,
            pre_relu,
        });
        h = z;
    }
    Ok((h, ForwardCache { mode, layers: caches }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Empty for layers without batchnorm.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients laid out like the learnable parameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(params: &FeatureExtractorParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    let bn_dim = l.bn.as_ref().map_or(0, |b| b.dim());
                    LayerGrads {
                        weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                        bias: vec![0.0; l.bias.len()],
                        gamma: vec![0.0; bn_dim],
                        beta: vec![0.0; bn_dim],
                    }
                })
                .collect(),
        }
    }

    /// Same order as [`FeatureExtractorParams::learnable`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.data());
            if l.gamma.is_empty() {
                out.push(&l.bias[..]);
            } else {
                out.push(&l.gamma[..]);
                out.push(&l.beta[..]);
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let has_bn = !l.gamma.is_empty();
            out.push(l.weights.data_mut());
            if !has_bn {
                out.push(&mut l.bias[..]);
            } else {
                out.push(&mut l.gamma[..]);
                out.push(&mut l.beta[..]);
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    /// True when every tensor has the length of the matching parameter tensor.
    pub fn matches(&self, params: &FeatureExtractorParams) -> bool {
        let mine = self.slices();
        let theirs = params.learnable();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|(a, (_, _, b))| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Backpropagates `grad_features` through a train-mode forward pass.
/// Also returns the gradient with respect to the network input.
pub fn backward_features_with_input(
    params: &FeatureExtractorParams,
    cache: &ForwardCache,
    grad_features: &Matrix,
) -> Result<(ParamGrads, Matrix)> {
    if cache.mode != Mode::Train {
        return Err(ModelError::Structure(
            "backward needs a train-mode forward cache".into(),
        ));
    }
    if cache.layers.len() != params.layers.len() {
        return Err(ModelError::Structure(format!(
            "cache has {} layers, params have {}",
            cache.layers.len(),
            params.layers.len()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = grad_features.clone();
    for (layer, lc) in params.layers.iter().zip(&cache.layers).rev() {
        if let Some(pre) = &lc.pre_relu {
            g = relu_backward(pre, &g)?;
        }
        let (mut gamma, mut beta) = (Vec::new(), Vec::new());
        if layer.bn.is_some() {
            let bc = lc
                .bn
                .as_ref()
                .ok_or_else(|| ModelError::Structure("missing batchnorm cache".into()))?;
            let bg = batchnorm_backward(bc, &g)?;
            g = bg.grad_x;
            gamma = bg.grad_gamma;
            beta = bg.grad_beta;
        }
        let lg = linear_backward(&lc.input, &layer.weights, &g)?;
        g = lg.grad_x;
        grads.push(LayerGrads {
            weights: lg.grad_w,
            bias: lg.grad_bias,
            gamma,
            beta,
        });
    }
    grads.reverse();
    Ok((ParamGrads { layers: grads }, g))
}

pub fn backward_features(
    params: &FeatureExtractorParams,
    cache: &ForwardCache,
    grad_features: &Matrix,
) -> Result<ParamGrads> {
    backward_features_with_input(params, cache, grad_features).map(|(g, _)| g)
}

pub fn clone_params(params: &FeatureExtractorParams) -> FeatureExtractorParams {
    params.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    name: String,
    in_dim: usize,
    out_dim: usize,
    has_batchnorm: bool,
    has_relu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_momentum: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    feature_dim: usize,
    param_count: usize,
    layers: Vec<ManifestLayer>,
}

const MANIFEST_FORMAT: &str = "scoda-checkpoint-v1";

fn expected_tensors(name: &str, s: &LayerSpec) -> Vec<TensorEntry> {
    let t = |n: &str, shape: Vec<usize>| TensorEntry {
        name: format!("{name}.{n}"),
        shape,
    };
    let mut v = vec![t("weight", vec![s.in_dim, s.out_dim]), t("bias", vec![s.out_dim])];
    if s.has_batchnorm {
        for n in ["gamma", "beta", "running_mean", "running_var"] {
            v.push(t(n, vec![s.out_dim]));
        }
    }
    v
}

/// Serializes params to the checkpoint byte layout.
pub fn checkpoint_bytes(params: &FeatureExtractorParams) -> Vec<u8> {
    let mut payload: Vec<f64> = Vec::new();
    let mut layers = Vec::new();
    for (i, (s, l)) in params.spec.iter().zip(&params.layers).enumerate() {
        let name = format!("layer{i}");
        payload.extend_from_slice(l.weights.data());
        payload.extend_from_slice(&l.bias);
        if let Some(bn) = &l.bn {
            payload.extend_from_slice(&bn.gamma);
            payload.extend_from_slice(&bn.beta);
            payload.extend_from_slice(&bn.running_mean);
            payload.extend_from_slice(&bn.running_var);
        }
        layers.push(ManifestLayer {
            tensors: expected_tensors(&name, s),
            name,
            in_dim: s.in_dim,
            out_dim: s.out_dim,
            has_batchnorm: s.has_batchnorm,
            has_relu: s.has_relu,
            bn_eps: l.bn.as_ref().map(|b| b.eps),
            bn_momentum: l.bn.as_ref().map(|b| b.bn_momentum),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: params.seed,
        feature_dim: params.feature_dim(),
        param_count: payload.len(),
        layers,
    };
    let text = serde_json::to_string(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(10 + text.len() + payload.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses and validates checkpoint bytes.
pub fn params_from_checkpoint_bytes(bytes: &[u8]) -> Result<FeatureExtractorParams> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    if rest.len() < 4 {
        return Err(ModelError::Manifest("missing manifest length".into()));
    }
    let mlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < mlen {
        return Err(ModelError::Manifest(format!(
            "manifest length {mlen} exceeds file size"
        )));
    }
    let text = std::str::from_utf8(&rest[..mlen])
        .map_err(|e| ModelError::Manifest(format!("manifest is not UTF-8: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(text).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(ModelError::Manifest(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let payload = &rest[mlen..];

    let mut spec = Vec::with_capacity(manifest.layers.len());
    let mut declared = 0usize;
    for ml in &manifest.layers {
        let s = LayerSpec::new(ml.in_dim, ml.out_dim, ml.has_batchnorm, ml.has_relu);
        if ml.tensors != expected_tensors(&ml.name, &s) {
            return Err(ModelError::Shape {
                layer: ml.name.clone(),
                detail: format!(
                    "tensor list {:?} does not match layer dims {}x{}",
                    ml.tensors
                        .iter()
                        .map(|t| (&t.name, &t.shape))
                        .collect::<Vec<_>>(),
                    ml.in_dim,
                    ml.out_dim
                ),
            });
        }
        declared += ml
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum::<usize>();
        spec.push(s);
    }
    if let Err(ModelError::InvalidSpec(msg)) = validate_spec(&spec) {
        return Err(ModelError::Shape {
            layer: "manifest".into(),
            detail: msg,
        });
    }
    if declared != manifest.param_count {
        return Err(ModelError::Manifest(format!(
            "param_count {} but tensors declare {declared}",
            manifest.param_count
        )));
    }
    if payload.len() != declared * 8 {
        return Err(ModelError::PayloadLength {
            expected: declared,
            found_bytes: payload.len(),
        });
    }
    if manifest.feature_dim != spec[spec.len() - 1].out_dim {
        return Err(ModelError::Manifest(format!(
            "feature_dim {} but last layer outputs {}",
            manifest.feature_dim,
            spec[spec.len() - 1].out_dim
        )));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(spec.len());
    for (s, ml) in spec.iter().zip(&manifest.layers) {
        let weights = Matrix::from_vec(s.in_dim, s.out_dim, take(s.in_dim * s.out_dim))
            .map_err(|e| ModelError::Shape {
                layer: ml.name.clone(),
                detail: e.to_string(),
            })?;
        let bias = take(s.out_dim);
        let bn = if s.has_batchnorm {
            Some(BatchNormState {
                gamma: take(s.out_dim),
                beta: take(s.out_dim),
                running_mean: take(s.out_dim),
                running_var: take(s.out_dim),
                eps: ml.bn_eps.unwrap_or(crate::numkernel::DEFAULT_BN_EPS),
                bn_momentum: ml
                    .bn_momentum
                    .unwrap_or(crate::numkernel::DEFAULT_BN_MOMENTUM),
            })
        } else {
            None
        };
        layers.push(Layer { weights, bias, bn });
    }
    let params = FeatureExtractorParams::from_parts(spec, layers, manifest.seed)?;
    if !params.is_finite() {
        return Err(KernelError::NonFinite("checkpoint payload").into());
    }
    Ok(params)
}

pub fn save_checkpoint(params: &FeatureExtractorParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<FeatureExtractorParams> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    params_from_checkpoint_bytes(&bytes)
}
