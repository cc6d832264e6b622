//! Double-double reference evaluation of the feature network and the
//! distillation losses, used as the finite-difference side of gradient checks.
//!
//! Central differences of an `f64` loss near 1 carry roundoff of about
//! `1e-16 / h`, which swamps gradients below roughly `1e-7`. Evaluating the
//! loss in ~106-bit arithmetic and differencing against the unperturbed value
//! before rounding removes that floor. This path shares no code with the
//! analytic forward/backward kernels.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::losses::{weighted_loss, NORM_EPS};
use crate::model::{backward_features_with_input, forward_features, FeatureExtractorParams, Layer, LayerSpec};
use crate::numkernel::{grad_check, GradCheckReport, Matrix, Mode};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = self.hi.sqrt();
        let (p, e) = two_prod(x, x);
        let r = self - Dd { hi: p, lo: e };
        quick_two_sum(x, r.hi / (2.0 * x))
    }

    pub fn max0(self) -> Dd {
        if self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0) {
            self
        } else {
            Dd::ZERO
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        let q = quick_two_sum(q1, q2);
        q + Dd::new(q3)
    }
}

/// Row-major `rows x cols` block of double-doubles.
#[derive(Debug, Clone)]
pub struct DdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Dd>,
}

impl DdMatrix {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| Dd::new(v)).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.at(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

fn linear_column(input: &DdMatrix, layer: &Layer, j: usize, w_override: Option<(usize, f64)>, bias: f64) -> Vec<Dd> {
    (0..input.rows)
        .map(|i| {
            let mut acc = Dd::new(bias);
            for p in 0..input.cols {
                let w = match w_override {
                    Some((q, v)) if q == p => v,
                    _ => layer.weights.get(p, j),
                };
                acc = acc + input.at(i, p) * Dd::new(w);
            }
            acc
        })
        .collect()
}

/// Batchnorm (batch statistics) and ReLU applied to one pre-activation column.
fn activate_column(mut z: Vec<Dd>, bn: Option<(f64, f64, f64)>, relu: bool) -> Vec<Dd> {
    if let Some((gamma, beta, eps)) = bn {
        let inv_n = Dd::new(1.0) / Dd::new(z.len() as f64);
        let mut mean = Dd::ZERO;
        for &v in &z {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = Dd::ZERO;
        for &v in &z {
            let c = v - mean;
            var = var + c * c;
        }
        let std = (var * inv_n + Dd::new(eps)).sqrt();
        for v in z.iter_mut() {
            *v = (*v - mean) / std * Dd::new(gamma) + Dd::new(beta);
        }
    }
    if relu {
        for v in z.iter_mut() {
            *v = v.max0();
        }
    }
    z
}

fn bn_column(layer: &Layer, j: usize) -> Option<(f64, f64, f64)> {
    layer.bn.as_ref().map(|bn| (bn.gamma[j], bn.beta[j], bn.eps))
}

fn set_column(m: &mut DdMatrix, j: usize, col: &[Dd]) {
    for (i, &v) in col.iter().enumerate() {
        m.data[i * m.cols + j] = v;
    }
}

fn layer_forward(input: &DdMatrix, layer: &Layer, spec: &LayerSpec) -> DdMatrix {
    let q = layer.weights.cols();
    let mut out = DdMatrix { rows: input.rows, cols: q, data: vec![Dd::ZERO; input.rows * q] };
    for j in 0..q {
        let z = linear_column(input, layer, j, None, layer.bias[j]);
        set_column(&mut out, j, &activate_column(z, bn_column(layer, j), spec.has_relu));
    }
    out
}

/// Train-mode (batch statistics) forward pass in double-double.
pub fn forward_train(params: &FeatureExtractorParams, x: &Matrix) -> DdMatrix {
    let mut h = DdMatrix::from_matrix(x);
    for (layer, spec) in params.layers.iter().zip(params.spec()) {
        h = layer_forward(&h, layer, spec);
    }
    h
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Weight { p: usize, j: usize },
    Bias(usize),
    Gamma(usize),
    Beta(usize),
}

/// Loss evaluation for single-coordinate perturbations, reusing the
/// unperturbed activations of every layer the coordinate cannot affect.
struct Oracle<'a> {
    params: &'a FeatureExtractorParams,
    teacher: DdMatrix,
    kind: LossKind,
    /// `acts[l]` is the input of layer `l`; the last entry holds the features.
    acts: Vec<DdMatrix>,
    base_loss: Dd,
    base_flat: Vec<f64>,
    slots: Vec<(usize, Slot)>,
}

impl<'a> Oracle<'a> {
    fn new(params: &'a FeatureExtractorParams, x: &Matrix, teacher: &Matrix, kind: LossKind) -> Self {
        let mut acts = vec![DdMatrix::from_matrix(x)];
        for (layer, spec) in params.layers.iter().zip(params.spec()) {
            let next = layer_forward(acts.last().expect("non-empty"), layer, spec);
            acts.push(next);
        }
        let teacher = DdMatrix::from_matrix(teacher);
        let base_loss = loss_dd(&teacher, acts.last().expect("non-empty"), kind);
        let mut slots = Vec::new();
        for (l, layer) in params.layers.iter().enumerate() {
            let (rows, cols) = layer.weights.shape();
            for p in 0..rows {
                for j in 0..cols {
                    slots.push((l, Slot::Weight { p, j }));
                }
            }
            if layer.bn.is_none() {
                slots.extend((0..cols).map(|j| (l, Slot::Bias(j))));
            } else {
                slots.extend((0..cols).map(|j| (l, Slot::Gamma(j))));
                slots.extend((0..cols).map(|j| (l, Slot::Beta(j))));
            }
        }
        Self { params, teacher, kind, acts, base_loss, base_flat: params.flatten_learnable(), slots }
    }

    /// `L(flat) - L(base)` in double-double, rounded once.
    fn eval(&self, flat: &[f64]) -> f64 {
        let changed: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] != self.base_flat[i]).collect();
        let features = match changed.as_slice() {
            [] => return 0.0,
            &[i] => self.perturbed_features(i, flat[i]),
            _ => {
                let mut p = self.params.clone();
                if p.set_learnable(flat).is_err() {
                    return f64::NAN;
                }
                forward_train(&p, &self.base_input())
            }
        };
        (loss_dd(&self.teacher, &features, self.kind) - self.base_loss).to_f64()
    }

    fn base_input(&self) -> Matrix {
        let a = &self.acts[0];
        Matrix::from_fn(a.rows, a.cols, |i, j| a.at(i, j).hi)
    }

    fn perturbed_features(&self, index: usize, value: f64) -> DdMatrix {
        let (l, slot) = self.slots[index];
        let layer = &self.params.layers[l];
        let spec = &self.params.spec()[l];
        let input = &self.acts[l];
        let bn = |j| bn_column(layer, j);
        let (j, col) = match slot {
            Slot::Weight { p, j } => {
                let z = linear_column(input, layer, j, Some((p, value)), layer.bias[j]);
                (j, activate_column(z, bn(j), spec.has_relu))
            }
            Slot::Bias(j) => (j, activate_column(linear_column(input, layer, j, None, value), bn(j), spec.has_relu)),
            Slot::Gamma(j) => {
                let (_, beta, eps) = bn(j).expect("gamma implies batchnorm");
                let z = linear_column(input, layer, j, None, layer.bias[j]);
                (j, activate_column(z, Some((value, beta, eps)), spec.has_relu))
            }
            Slot::Beta(j) => {
                let (gamma, _, eps) = bn(j).expect("beta implies batchnorm");
                let z = linear_column(input, layer, j, None, layer.bias[j]);
                (j, activate_column(z, Some((gamma, value, eps)), spec.has_relu))
            }
        };
        let mut h = self.acts[l + 1].clone();
        set_column(&mut h, j, &col);
        for (layer, spec) in self.params.layers.iter().zip(self.params.spec()).skip(l + 1) {
            h = layer_forward(&h, layer, spec);
        }
        h
    }
}

/// `1 - mean_i cos(t_i, s_i)` over rows; rows with a norm below the
/// degeneracy threshold contribute cosine 0.
pub fn row_cosine_loss(t: &DdMatrix, s: &DdMatrix) -> Dd {
    let mut sum = Dd::ZERO;
    for i in 0..t.rows {
        let (mut dot, mut nt, mut ns) = (Dd::ZERO, Dd::ZERO, Dd::ZERO);
        for j in 0..t.cols {
            let (a, b) = (t.at(i, j), s.at(i, j));
            dot = dot + a * b;
            nt = nt + a * a;
            ns = ns + b * b;
        }
        let (nt, ns) = (nt.sqrt(), ns.sqrt());
        if nt.hi >= NORM_EPS && ns.hi >= NORM_EPS {
            sum = sum + dot / (nt * ns);
        }
    }
    Dd::new(1.0) - sum / Dd::new(t.rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Cos,
    Space,
    Total { lambda: f64 },
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cos => "cos",
            LossKind::Space => "space",
            LossKind::Total { .. } => "total",
        }
    }

    /// `(cos_weight, lambda)` of this loss.
    pub fn weights(self) -> (f64, f64) {
        match self {
            LossKind::Cos => (1.0, 0.0),
            LossKind::Space => (0.0, 1.0),
            LossKind::Total { lambda } => (1.0, lambda),
        }
    }
}

pub fn loss_dd(teacher_features: &DdMatrix, student_features: &DdMatrix, kind: LossKind) -> Dd {
    let (wc, ws) = kind.weights();
    let mut l = Dd::ZERO;
    if wc != 0.0 {
        l = l + Dd::new(wc) * row_cosine_loss(teacher_features, student_features);
    }
    if ws != 0.0 {
        l = l + Dd::new(ws) * row_cosine_loss(&teacher_features.transpose(), &student_features.transpose());
    }
    l
}

/// Checks the analytic gradient of `kind(teacher_features, f(x; params))`
/// with respect to every learnable parameter against central differences of
/// the double-double evaluation.
pub fn network_grad_check(
    params: &FeatureExtractorParams,
    x: &Matrix,
    teacher_features: &Matrix,
    kind: LossKind,
    tol: f64,
) -> Result<GradCheckReport, crate::model::ModelError> {
    let mut work = params.clone();
    let (features, cache) = forward_features(&mut work, x, Mode::Train)?;
    let (cw, lambda) = kind.weights();
    let grad = weighted_loss(teacher_features, &features, cw, lambda)?.grad_student;
    let (grads, _) = backward_features_with_input(params, &cache, &grad)?;

    let oracle = Oracle::new(params, x, teacher_features, kind);
    let report = grad_check(
        |flat| oracle.eval(flat),
        &params.flatten_learnable(),
        &grads.flatten(),
        &params.learnable_names(),
        tol,
    )
    .map_err(crate::model::ModelError::from)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cos_loss, space_loss};
    use crate::model::{default_spec, init_params};
    use crate::rng;

    #[test]
    fn dd_arithmetic_carries_extra_precision() {
        let third = Dd::new(1.0) / Dd::new(3.0);
        let back = third * Dd::new(3.0) - Dd::new(1.0);
        assert!(back.to_f64().abs() < 1e-30, "{back:?}");
        let two = Dd::new(2.0).sqrt();
        assert!((two * two - Dd::new(2.0)).to_f64().abs() < 1e-30);
        let tiny = Dd::new(1.0) + Dd::new(1e-20) - Dd::new(1.0);
        assert_eq!(tiny.to_f64(), 1e-20);
        assert_eq!(Dd::new(-1.0).max0(), Dd::ZERO);
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_fn(rows, cols, |_, _| rng::symmetric(&mut r, 1.0))
    }

    #[test]
    fn matches_f64_forward_and_losses() {
        let p = init_params(&default_spec(5), 3).unwrap();
        let x = batch(1, 6, 5);
        let (f, _) = forward_features(&mut p.clone(), &x, Mode::Train).unwrap();
        let fd = forward_train(&p, &x);
        for (a, b) in f.data().iter().zip(&fd.data) {
            assert!((a - b.to_f64()).abs() < 1e-12);
        }
        let t = batch(2, 6, p.feature_dim());
        let td = DdMatrix::from_matrix(&t);
        let ff = DdMatrix::from_matrix(&f);
        assert!((loss_dd(&td, &ff, LossKind::Cos).to_f64() - cos_loss(&t, &f).unwrap().value).abs() < 1e-14);
        assert!((loss_dd(&td, &ff, LossKind::Space).to_f64() - space_loss(&t, &f).unwrap().value).abs() < 1e-14);
    }

    #[test]
    fn incremental_perturbation_matches_full_forward() {
        let p = init_params(&default_spec(4), 9).unwrap();
        let x = batch(1, 6, 4);
        let t = batch(2, 6, p.feature_dim());
        let kind = LossKind::Total { lambda: 0.7 };
        let oracle = Oracle::new(&p, &x, &t, kind);
        let flat = p.flatten_learnable();
        let td = DdMatrix::from_matrix(&t);
        let base = loss_dd(&td, &forward_train(&p, &x), kind);
        for i in (0..flat.len()).step_by(37) {
            let mut f = flat.clone();
            f[i] += 0.01;
            let mut q = p.clone();
            q.set_learnable(&f).unwrap();
            let full = (loss_dd(&td, &forward_train(&q, &x), kind) - base).to_f64();
            assert!((oracle.eval(&f) - full).abs() <= 1e-28 + 1e-25 * full.abs(), "{i}");
        }
    }

    #[test]
    fn small_network_passes() {
        let spec = vec![LayerSpec::new(4, 6, true, true), LayerSpec::new(6, 3, false, false)];
        let p = init_params(&spec, 5).unwrap();
        let x = batch(6, 8, 4);
        let t = batch(7, 8, 3);
        for kind in [LossKind::Cos, LossKind::Space, LossKind::Total { lambda: 1.0 }] {
            let r = network_grad_check(&p, &x, &t, kind, 1e-5).unwrap();
            assert!(r.passed, "{kind:?} {:?}", r.worst());
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A loss whose analytic side is deliberately off by a factor.
        let p = init_params(&[LayerSpec::new(3, 2, false, false)], 1).unwrap();
        let x = batch(2, 4, 3);
        let t = batch(3, 4, 2);
        let f = p.forward_eval(&x).unwrap();
        let (_, cache) = forward_features(&mut p.clone(), &x, Mode::Train).unwrap();
        let g = cos_loss(&t, &f).unwrap().grad_student;
        let (grads, _) = backward_features_with_input(&p, &cache, &g).unwrap();
        let wrong: Vec<f64> = grads.flatten().iter().map(|v| v * 1.01).collect();
        let td = DdMatrix::from_matrix(&t);
        let base = loss_dd(&td, &forward_train(&p, &x), LossKind::Cos);
        let mut q = p.clone();
        let r = grad_check(
            |flat| {
                q.set_learnable(flat).unwrap();
                (loss_dd(&td, &forward_train(&q, &x), LossKind::Cos) - base).to_f64()
            },
            &p.flatten_learnable(),
            &wrong,
            &p.learnable_names(),
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
