//! Dual-speed teacher-student adaptation.
//!
//! Each step on a target mini-batch:
//!
//! 1. teacher features in eval mode (read-only), student features in train mode;
//! 2. `L = cos_weight * L_cos + lambda * L_space` and its gradient w.r.t. the student features;
//! 3. backprop through the student and one SGD-with-momentum step;
//! 4. teacher weights `theta <- m * theta + (1 - m) * psi` using the updated student;
//! 5. teacher batchnorm running statistics blended the same way.
//!
//! The teacher never sees the optimizer. Also here: the label-free two-view
//! pretext pre-training that produces the initial checkpoint, and sequential
//! adaptation over several target domains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{augment_view, AugmentSpec, DataError, DomainDataset};
use crate::losses::{cos_loss, weighted_loss, LossValue};
use crate::model::{
    backward_features_with_input, forward_features, init_params, FeatureExtractorParams,
    LayerSpec, ModelError, ParamGrads, ParamKind,
};
use crate::numkernel::{linear_backward, linear_forward, KernelError, Matrix, Mode};
use crate::rng;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
}

pub type Result<T> = std::result::Result<T, AdaptError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Weight on the space-similarity term.
    pub lambda: f64,
    /// Weight on the cosine term; 0 only for the space-only ablation.
    pub cos_weight: f64,
    /// Teacher EMA momentum.
    pub m: f64,
    pub eta: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to batchnorm gamma/beta as well.
    pub decay_bn_affine: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            cos_weight: 1.0,
            m: 0.999,
            eta: 0.0035,
            sgd_momentum: 0.9,
            weight_decay: 1e-3,
            decay_bn_affine: false,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            shuffle: true,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AdaptError::Config(msg));
        if !(0.0..1.0).contains(&self.m) {
            return bad(format!("m must be in [0, 1), got {}", self.m));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.cos_weight >= 0.0 && self.cos_weight.is_finite()) {
            return bad(format!("cos_weight must be >= 0, got {}", self.cos_weight));
        }
        if !(self.sgd_momentum >= 0.0 && self.sgd_momentum < 1.0) {
            return bad(format!("sgd_momentum must be in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            eta: self.eta,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            decay_bn_affine: self.decay_bn_affine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bn_affine: bool,
}

/// Momentum buffers shaped like the student's learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamGrads,
}

impl OptimizerState {
    pub fn new(student: &FeatureExtractorParams) -> Self {
        Self {
            velocity: ParamGrads::zeros_like(student),
        }
    }
}

/// `v <- mu * v + g + wd * p; p <- p - eta * v` for every learnable parameter.
/// Batchnorm running statistics are never touched.
pub fn sgd_step(
    student: &mut FeatureExtractorParams,
    grads: &ParamGrads,
    opt: &mut OptimizerState,
    cfg: &SgdConfig,
) -> Result<()> {
    if !grads.matches(student) || !opt.velocity.matches(student) {
        return Err(ModelError::Structure("sgd_step: gradients or optimizer state do not match student".into()).into());
    }
    let params = student.learnable_mut();
    let vels = opt.velocity.slices_mut();
    let gs = grads.slices();
    for (((kind, p), v), g) in params.into_iter().zip(vels).zip(gs) {
        let decays = matches!(kind, ParamKind::Weight | ParamKind::Bias) || cfg.decay_bn_affine;
        let wd = if decays { cfg.weight_decay } else { 0.0 };
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + wd * *pi;
            *pi -= cfg.eta * *vi;
        }
    }
    Ok(())
}

/// `theta <- m * theta + (1 - m) * psi` over every learnable tensor.
pub fn ema_step(teacher: &mut FeatureExtractorParams, student: &FeatureExtractorParams, m: f64) -> Result<()> {
    teacher.ensure_same_structure(student, "ema_step")?;
    let src = student.learnable();
    for ((_, dst), (_, _, s)) in teacher.learnable_mut().into_iter().zip(src) {
        for (t, &p) in dst.iter_mut().zip(s) {
            *t = m * *t + (1.0 - m) * p;
        }
    }
    Ok(())
}

/// Blends the teacher's batchnorm running statistics towards the student's.
pub fn bn_ema_step(teacher: &mut FeatureExtractorParams, student: &FeatureExtractorParams, m: f64) -> Result<()> {
    teacher.ensure_same_structure(student, "bn_ema_step")?;
    let src = student.running_stats();
    for ((tm, tv), (sm, sv)) in teacher.running_stats_mut().into_iter().zip(src) {
        for (t, &s) in tm.iter_mut().zip(sm) {
            *t = m * *t + (1.0 - m) * s;
        }
        for (t, &s) in tv.iter_mut().zip(sv) {
            *t = (m * *t + (1.0 - m) * s).max(0.0);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: LossValue,
    pub degenerate: usize,
}

/// One adaptation step on `batch`; see the module docs for the exact order.
pub fn adapt_step(
    teacher: &mut FeatureExtractorParams,
    student: &mut FeatureExtractorParams,
    opt: &mut OptimizerState,
    batch: &Matrix,
    cfg: &AdaptationConfig,
) -> Result<StepOutcome> {
    teacher.ensure_same_structure(student, "adapt_step")?;
    if batch.rows() < 2 {
        return Err(KernelError::DegenerateBatch(batch.rows()).into());
    }
    let f_teacher = teacher.forward_eval(batch)?;
    let (f_student, cache) = forward_features(student, batch, Mode::Train)?;
    let out = weighted_loss(&f_teacher, &f_student, cfg.cos_weight, cfg.lambda)?;
    if !out.value.total.is_finite() || !out.grad_student.is_finite() {
        return Err(AdaptError::Divergence { step: 0 });
    }
    let (grads, _) = backward_features_with_input(student, &cache, &out.grad_student)?;
    sgd_step(student, &grads, opt, &cfg.sgd())?;
    ema_step(teacher, student, cfg.m)?;
    bn_ema_step(teacher, student, cfg.m)?;
    Ok(StepOutcome {
        loss: out.value,
        degenerate: out.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRunResult {
    pub adapted_student: FeatureExtractorParams,
    pub final_teacher: FeatureExtractorParams,
    pub loss_trace: Vec<LossValue>,
    pub degeneracy_count: usize,
}

/// What an observer sees after each adaptation step.
pub struct StepEvent<'a> {
    pub step: usize,
    pub teacher_before: &'a FeatureExtractorParams,
    pub teacher_after: &'a FeatureExtractorParams,
    pub student_after: &'a FeatureExtractorParams,
    pub loss: &'a LossValue,
}

/// Mini-batch index lists for one epoch; a trailing batch of fewer than 2 rows is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle: bool, rng: &mut rng::Prng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng::shuffle(rng, &mut order);
    }
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Runs the adaptation loop from an existing teacher/student pair.
pub fn adapt_pair(
    mut teacher: FeatureExtractorParams,
    mut student: FeatureExtractorParams,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
    mut observer: Option<&mut dyn FnMut(&StepEvent<'_>)>,
) -> Result<AdaptRunResult> {
    cfg.validate()?;
    teacher.ensure_same_structure(&student, "adapt_pair")?;
    if target.is_empty() {
        return Err(AdaptError::EmptyDataset(target.domain_id.clone()));
    }
    let mut opt = OptimizerState::new(&student);
    let mut shuffle_rng = rng::seeded(cfg.seed);
    let mut trace = Vec::new();
    let mut degenerate = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(target.len(), cfg.batch_size, cfg.shuffle, &mut shuffle_rng) {
            let batch = target.features.select_rows(&idx);
            let step = trace.len();
            let before = observer.as_ref().map(|_| teacher.clone());
            let outcome = adapt_step(&mut teacher, &mut student, &mut opt, &batch, cfg).map_err(|e| match e {
                AdaptError::Divergence { .. } => AdaptError::Divergence { step },
                other => other,
            })?;
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(&StepEvent {
                    step,
                    teacher_before: before,
                    teacher_after: &teacher,
                    student_after: &student,
                    loss: &outcome.loss,
                });
            }
            trace.push(outcome.loss);
            degenerate += outcome.degenerate;
        }
    }
    Ok(AdaptRunResult {
        adapted_student: student,
        final_teacher: teacher,
        loss_trace: trace,
        degeneracy_count: degenerate,
    })
}

/// Adapts a copy of `source` to `target`: teacher and student both start as `source`.
pub fn adapt_run(
    source: &FeatureExtractorParams,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
) -> Result<AdaptRunResult> {
    adapt_pair(source.clone(), source.clone(), target, cfg, None)
}

pub fn adapt_run_observed(
    source: &FeatureExtractorParams,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<AdaptRunResult> {
    adapt_pair(source.clone(), source.clone(), target, cfg, Some(observer))
}

/// Adapts to each target in turn. Stage `k` starts from stage `k-1`'s final
/// teacher and student, with fresh optimizer buffers and shuffle seed `seed + k`.
pub fn continual_run(
    source: &FeatureExtractorParams,
    targets: &[DomainDataset],
    cfg: &AdaptationConfig,
) -> Result<Vec<AdaptRunResult>> {
    if targets.is_empty() {
        return Err(AdaptError::Config("continual_run needs at least one target".into()));
    }
    let mut results: Vec<AdaptRunResult> = Vec::with_capacity(targets.len());
    for (k, target) in targets.iter().enumerate() {
        let (teacher, student) = match results.last() {
            Some(prev) => (prev.final_teacher.clone(), prev.adapted_student.clone()),
            None => (source.clone(), source.clone()),
        };
        let stage_cfg = AdaptationConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..*cfg
        };
        results.push(adapt_pair(teacher, student, target, &stage_cfg, None)?);
    }
    Ok(results)
}

/// Schedule of the label-free pretext task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub epochs: usize,
    pub eta: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// EMA momentum of the target network.
    pub m: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            eta: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            m: 0.99,
            seed: 0,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        AdaptationConfig {
            m: self.m,
            eta: self.eta,
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            ..AdaptationConfig::default()
        }
        .validate()
    }
}

/// Linear `d -> d` head on the online network, initialized to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Predictor {
    pub fn identity(d: usize) -> Self {
        Self {
            weights: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn forward(&self, f: &Matrix) -> Result<Matrix> {
        Ok(linear_forward(f, &self.weights, &self.bias)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextResult {
    pub online: FeatureExtractorParams,
    pub loss_trace: Vec<f64>,
}

/// Seed of the augmentation draw for `(step, view)`.
fn view_seed(seed: u64, step: usize, view: u64) -> u64 {
    rng::stream(seed, 0x5EED_0000 + 2 * step as u64 + view).next_seed()
}

trait NextSeed {
    fn next_seed(self) -> u64;
}

impl NextSeed for rng::Prng {
    fn next_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

/// One symmetrized two-view loss evaluation: returns the loss, the online
/// network gradients and the predictor gradients.
fn pretext_loss_and_grads(
    online: &mut FeatureExtractorParams,
    target: &FeatureExtractorParams,
    predictor: &Predictor,
    view_a: &Matrix,
    view_b: &Matrix,
) -> Result<(f64, ParamGrads, Predictor)> {
    let z_a = target.forward_batch_stats(view_a)?;
    let z_b = target.forward_batch_stats(view_b)?;
    let mut grads = ParamGrads::zeros_like(online);
    let mut pred_grads = Predictor {
        weights: Matrix::zeros(predictor.weights.rows(), predictor.weights.cols()),
        bias: vec![0.0; predictor.bias.len()],
    };
    let mut loss = 0.0;
    // predict view B's target from view A's online features, and vice versa
    for (view, z_other) in [(view_a, &z_b), (view_b, &z_a)] {
        let (f, cache) = forward_features(online, view, Mode::Train)?;
        let p = predictor.forward(&f)?;
        let l = cos_loss(z_other, &p)?;
        loss += 0.5 * l.value;
        let mut g = l.grad_student;
        for v in g.data_mut() {
            *v *= 0.5;
        }
        let lg = linear_backward(&f, &predictor.weights, &g)?;
        for (a, b) in pred_grads.weights.data_mut().iter_mut().zip(lg.grad_w.data()) {
            *a += b;
        }
        for (a, b) in pred_grads.bias.iter_mut().zip(&lg.grad_bias) {
            *a += b;
        }
        let (og, _) = backward_features_with_input(online, &cache, &lg.grad_x)?;
        grads.add_assign(&og);
    }
    Ok((loss, grads, pred_grads))
}

/// Label-free pre-training on the source domain.
///
/// An online network with a linear predictor learns to predict, from one
/// augmented view, the stop-gradient features that an EMA target network
/// assigns to another view of the same samples. The loss is the cosine loss,
/// symmetrized over the two views. Returns the online network; the predictor
/// is discarded.
pub fn pretext_pretrain(
    spec: &[LayerSpec],
    source: &DomainDataset,
    cfg: &PretextConfig,
    aug: &AugmentSpec,
) -> Result<PretextResult> {
    cfg.validate()?;
    aug.validate()?;
    if source.is_empty() {
        return Err(AdaptError::EmptyDataset(source.domain_id.clone()));
    }
    let mut online = init_params(spec, cfg.seed)?;
    pretext_from(&mut online, source, cfg, aug).map(|loss_trace| PretextResult { online, loss_trace })
}

fn pretext_from(
    online: &mut FeatureExtractorParams,
    source: &DomainDataset,
    cfg: &PretextConfig,
    aug: &AugmentSpec,
) -> Result<Vec<f64>> {
    let d = online.feature_dim();
    let mut target = online.clone();
    let mut predictor = Predictor::identity(d);
    let mut opt = OptimizerState::new(online);
    let mut pred_vel = Predictor {
        weights: Matrix::zeros(d, d),
        bias: vec![0.0; d],
    };
    let sgd = SgdConfig {
        eta: cfg.eta,
        momentum: cfg.sgd_momentum,
        weight_decay: cfg.weight_decay,
        decay_bn_affine: false,
    };
    let mut shuffle_rng = rng::stream(cfg.seed, 0xBA7C);
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(source.len(), cfg.batch_size, true, &mut shuffle_rng) {
            let step = trace.len();
            let x = source.features.select_rows(&idx);
            let view_a = augment_view(&x, aug, view_seed(cfg.seed, step, 0));
            let view_b = augment_view(&x, aug, view_seed(cfg.seed, step, 1));
            let (loss, grads, pgrads) = pretext_loss_and_grads(online, &target, &predictor, &view_a, &view_b)?;
            if !loss.is_finite() {
                return Err(AdaptError::Divergence { step });
            }
            sgd_step(online, &grads, &mut opt, &sgd)?;
            let pairs = [
                (predictor.weights.data_mut(), pred_vel.weights.data_mut(), pgrads.weights.data()),
                (&mut predictor.bias[..], &mut pred_vel.bias[..], &pgrads.bias[..]),
            ];
            for (p, v, g) in pairs {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = sgd.momentum * *vi + gi + sgd.weight_decay * *pi;
                    *pi -= sgd.eta * *vi;
                }
            }
            ema_step(&mut target, online, cfg.m)?;
            bn_ema_step(&mut target, online, cfg.m)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}
