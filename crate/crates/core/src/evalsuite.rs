//! Evaluation in feature space: kNN and linear-probe classifiers, confusion
//! matrices, pre/post adaptation reports and loss-component ablations.
//!
//! Classifier references are built from the pre-adaptation checkpoint and then
//! frozen, so pre and post measurements differ only through the features of
//! the queried model.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DomainDataset;
use crate::duospeed::{adapt_run, AdaptError, AdaptRunResult, AdaptationConfig};
use crate::losses::LossValue;
use crate::model::{FeatureExtractorParams, ModelError};
use crate::numkernel::{matmul, KernelError, Matrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("report I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("report parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn invalid(msg: impl Into<String>) -> EvalError {
    EvalError::Invalid(msg.into())
}

fn norms(x: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Cosine-distance kNN. Among the `k` nearest references (distance ties by
/// reference index), the majority label wins; vote ties go to the class with
/// the smallest summed distance, then to the lowest class id. Zero vectors
/// have cosine 0 to everything.
pub fn knn_predict(
    ref_features: &Matrix,
    ref_labels: &[usize],
    n_classes: usize,
    query: &Matrix,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    if ref_features.rows() == 0 {
        return Err(invalid("kNN reference is empty"));
    }
    if ref_labels.len() != ref_features.rows() {
        return Err(invalid(format!(
            "{} reference labels for {} reference rows",
            ref_labels.len(),
            ref_features.rows()
        )));
    }
    if let Some(&bad) = ref_labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!("reference label {bad} out of range for {n_classes} classes")));
    }
    if ref_features.cols() != query.cols() {
        return Err(KernelError::Shape {
            op: "knn",
            left: ref_features.shape_str(),
            right: query.shape_str(),
        }
        .into());
    }
    let ref_norms = norms(ref_features);
    let q_norms = norms(query);
    let sims = matmul(query, &ref_features.transpose())?;
    let k = k.min(ref_features.rows());
    let mut out = Vec::with_capacity(query.rows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(ref_features.rows());
    for i in 0..query.rows() {
        dist.clear();
        for (j, &rn) in ref_norms.iter().enumerate() {
            let denom = q_norms[i] * rn;
            let cos = if denom > 0.0 { sims.get(i, j) / denom } else { 0.0 };
            dist.push((1.0 - cos, j));
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        let mut summed = vec![0.0f64; n_classes];
        for &(d, j) in &dist[..k] {
            votes[ref_labels[j]] += 1;
            summed[ref_labels[j]] += d;
        }
        let best = (0..n_classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(summed[a].total_cmp(&summed[b]))
                    .then(a.cmp(&b))
            })
            .expect("k >= 1 gives at least one vote");
        out.push(best);
    }
    Ok(out)
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

pub fn knn_accuracy(
    ref_features: &Matrix,
    ref_labels: &[usize],
    query_features: &Matrix,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if query_labels.len() != query_features.rows() {
        return Err(invalid("query labels do not match query rows"));
    }
    let n_classes = ref_labels.iter().chain(query_labels).max().map_or(1, |&m| m + 1);
    let pred = knn_predict(ref_features, ref_labels, n_classes, query_features, k)?;
    Ok(fraction_correct(&pred, query_labels))
}

/// Linear softmax classifier on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ProbeParams {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        Ok(crate::numkernel::linear_forward(features, &self.weights, &self.bias)?)
    }

    /// Argmax of the logits; ties go to the lowest class id.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(features)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

fn softmax_rows(z: &mut Matrix) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multinomial logistic regression by full-batch gradient descent on the mean
/// softmax cross-entropy, from zero weights. Zero initialization makes the
/// result independent of `seed`; the argument is kept so callers can record it.
pub fn train_probe(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    _seed: u64,
    epochs: usize,
    eta: f64,
) -> Result<ProbeParams> {
    if labels.len() != features.rows() || labels.is_empty() {
        return Err(invalid("probe needs one label per feature row and at least one row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(invalid("probe needs at least 2 classes"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid(format!("probe eta must be > 0, got {eta}")));
    }
    let n = features.rows() as f64;
    let xt = features.transpose();
    let mut probe = ProbeParams {
        weights: Matrix::zeros(features.cols(), n_classes),
        bias: vec![0.0; n_classes],
    };
    for _ in 0..epochs {
        let mut g = probe.logits(features)?;
        softmax_rows(&mut g);
        for (i, &l) in labels.iter().enumerate() {
            let row = g.row_mut(i);
            row[l] -= 1.0;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let gw = matmul(&xt, &g)?;
        for (w, d) in probe.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= eta * d;
        }
        for (b, d) in probe.bias.iter_mut().zip(crate::numkernel::column_sums(&g)) {
            *b -= eta * d;
        }
    }
    Ok(probe)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(labels: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != pred.len() {
            return Err(invalid("labels and predictions differ in length"));
        }
        let mut counts = vec![vec![0; n_classes]; n_classes];
        for (&l, &p) in labels.iter().zip(pred) {
            if l >= n_classes || p >= n_classes {
                return Err(invalid(format!("class id out of range for {n_classes} classes")));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

/// A classifier over feature vectors of one fixed feature space.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Knn {
        features: Matrix,
        labels: Vec<usize>,
        n_classes: usize,
        k: usize,
    },
    Probe(ProbeParams),
}

impl Classifier {
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        match self {
            Classifier::Knn { features: r, labels, n_classes, k } => knn_predict(r, labels, *n_classes, features, *k),
            Classifier::Probe(p) => p.predict(features),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::Knn { n_classes, .. } => *n_classes,
            Classifier::Probe(p) => p.n_classes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Knn,
    Probe,
}

/// Which adapted network the post-adaptation measurement uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatedModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classifier: ClassifierKind,
    pub k: usize,
    pub probe_epochs: usize,
    pub probe_eta: f64,
    /// Share of each labeled evaluation set used as the classifier reference.
    pub reference_fraction: f64,
    pub model: EvaluatedModel,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Knn,
            k: 5,
            probe_epochs: 500,
            probe_eta: 0.5,
            reference_fraction: 0.5,
            model: EvaluatedModel::Student,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if !(self.probe_eta.is_finite() && self.probe_eta > 0.0) {
            return Err(invalid(format!("probe_eta must be > 0, got {}", self.probe_eta)));
        }
        if !(self.reference_fraction > 0.0 && self.reference_fraction < 1.0) {
            return Err(invalid(format!(
                "reference_fraction must be in (0, 1), got {}",
                self.reference_fraction
            )));
        }
        Ok(())
    }
}

/// Builds a classifier on `reference` as seen through `params`.
pub fn build_classifier(
    params: &FeatureExtractorParams,
    reference: &DomainDataset,
    cfg: &EvalConfig,
) -> Result<Classifier> {
    let features = params.forward_eval(&reference.features)?;
    Ok(match cfg.classifier {
        ClassifierKind::Knn => Classifier::Knn {
            features,
            labels: reference.labels.clone(),
            n_classes: reference.n_classes,
            k: cfg.k,
        },
        ClassifierKind::Probe => Classifier::Probe(train_probe(
            &features,
            &reference.labels,
            reference.n_classes,
            cfg.seed,
            cfg.probe_epochs,
            cfg.probe_eta,
        )?),
    })
}

/// Eval-mode features of `ds` under `params`, classified by `classifier`.
pub fn evaluate_model(
    params: &FeatureExtractorParams,
    ds: &DomainDataset,
    classifier: &Classifier,
) -> Result<(f64, ConfusionMatrix)> {
    if classifier.n_classes() != ds.n_classes {
        return Err(invalid(format!(
            "classifier has {} classes, dataset {}",
            classifier.n_classes(),
            ds.n_classes
        )));
    }
    let features = params.forward_eval(&ds.features)?;
    let pred = classifier.predict(&features)?;
    let cm = ConfusionMatrix::from_predictions(&ds.labels, &pred, ds.n_classes)?;
    Ok((cm.accuracy(), cm))
}

/// Labeled data for measuring one domain: `reference` trains the frozen
/// classifier, `query` is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDomain {
    pub reference: DomainDataset,
    pub query: DomainDataset,
}

impl EvalDomain {
    /// Stratified split of `ds` into reference and query parts.
    pub fn split(ds: &DomainDataset, cfg: &EvalConfig) -> Result<Self> {
        let (reference, query) = crate::datagen::split_dataset(ds, cfg.reference_fraction, cfg.seed)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(Self { reference, query })
    }

    pub fn domain_id(&self) -> &str {
        &self.query.domain_id
    }

    /// Source split plus target query splits that are all scored against the
    /// source reference, so target accuracy measures transfer of the source
    /// classifier.
    pub fn source_referenced(
        source: &DomainDataset,
        targets: &[DomainDataset],
        cfg: &EvalConfig,
    ) -> Result<(Self, Vec<Self>)> {
        let source_eval = Self::split(source, cfg)?;
        let target_evals = targets
            .iter()
            .map(|t| {
                Ok(Self {
                    reference: source_eval.reference.clone(),
                    query: Self::split(t, cfg)?.query,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((source_eval, target_evals))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub domain_id: String,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub delta: f64,
    pub pre_confusion: ConfusionMatrix,
    pub post_confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
    pub mean_total: f64,
    pub degeneracy_count: usize,
}

impl LossSummary {
    pub fn from_trace(trace: &[LossValue], degeneracy_count: usize) -> Self {
        let totals: Vec<f64> = trace.iter().map(|l| l.total).collect();
        let mean = if totals.is_empty() { 0.0 } else { totals.iter().sum::<f64>() / totals.len() as f64 };
        Self {
            steps: totals.len(),
            first_total: totals.first().copied().unwrap_or(0.0),
            last_total: totals.last().copied().unwrap_or(0.0),
            mean_total: mean,
            degeneracy_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub records: Vec<DomainRecord>,
    pub loss: Option<LossSummary>,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Pre/post accuracy of `pre` and `post` on every domain, each domain scored
/// by a classifier built once from `pre`.
pub fn compare_models(
    pre: &FeatureExtractorParams,
    post: &FeatureExtractorParams,
    domains: &[EvalDomain],
    cfg: &EvalConfig,
) -> Result<Vec<DomainRecord>> {
    cfg.validate()?;
    pre.ensure_same_structure(post, "compare_models")?;
    domains
        .iter()
        .map(|d| {
            let classifier = build_classifier(pre, &d.reference, cfg)?;
            let (pre_accuracy, pre_confusion) = evaluate_model(pre, &d.query, &classifier)?;
            let (post_accuracy, post_confusion) = evaluate_model(post, &d.query, &classifier)?;
            Ok(DomainRecord {
                domain_id: d.domain_id().to_string(),
                pre_accuracy,
                post_accuracy,
                delta: post_accuracy - pre_accuracy,
                pre_confusion,
                post_confusion,
            })
        })
        .collect()
}

fn evaluated<'a>(run: &'a AdaptRunResult, cfg: &EvalConfig) -> &'a FeatureExtractorParams {
    match cfg.model {
        EvaluatedModel::Student => &run.adapted_student,
        EvaluatedModel::Teacher => &run.final_teacher,
    }
}

/// Source forgetting and target gain of one adaptation run.
pub fn forgetting_report(
    h: &FeatureExtractorParams,
    adapted: &AdaptRunResult,
    source_eval: &EvalDomain,
    target_eval: &EvalDomain,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<AdaptationReport> {
    let records = compare_models(h, evaluated(adapted, cfg), &[source_eval.clone(), target_eval.clone()], cfg)?;
    Ok(AdaptationReport {
        records,
        loss: Some(LossSummary::from_trace(&adapted.loss_trace, adapted.degeneracy_count)),
        config: config_echo,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    CosineOnly,
    SpaceOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [Self::Full, Self::CosineOnly, Self::SpaceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::CosineOnly => "cosine-only",
            Self::SpaceOnly => "space-only",
        }
    }

    /// Loss weighting of this variant; everything else is taken from `cfg`.
    pub fn config(self, cfg: &AdaptationConfig) -> AdaptationConfig {
        match self {
            Self::Full => *cfg,
            Self::CosineOnly => AdaptationConfig { lambda: 0.0, ..*cfg },
            Self::SpaceOnly => AdaptationConfig { lambda: 1.0, cos_weight: 0.0, ..*cfg },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub pre_accuracy: f64,
    pub accuracy: f64,
    pub source_accuracy: f64,
    pub loss_trace: Vec<LossValue>,
}

/// Adapts `h` to `target_data` once per loss variant with identical seeds and
/// data order, and scores each on the target and source evaluation sets.
pub fn ablation_run(
    h: &FeatureExtractorParams,
    target_data: &DomainDataset,
    source_eval: &EvalDomain,
    target_eval: &EvalDomain,
    adapt_cfg: &AdaptationConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    eval_cfg.validate()?;
    adapt_cfg.validate()?;
    let target_clf = build_classifier(h, &target_eval.reference, eval_cfg)?;
    let source_clf = build_classifier(h, &source_eval.reference, eval_cfg)?;
    let (pre_accuracy, _) = evaluate_model(h, &target_eval.query, &target_clf)?;
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let run = adapt_run(h, target_data, &variant.config(adapt_cfg))?;
            let model = evaluated(&run, eval_cfg);
            let (accuracy, _) = evaluate_model(model, &target_eval.query, &target_clf)?;
            let (source_accuracy, _) = evaluate_model(model, &source_eval.query, &source_clf)?;
            Ok(AblationRow {
                variant,
                seed: adapt_cfg.seed,
                pre_accuracy,
                accuracy,
                source_accuracy,
                loss_trace: run.loss_trace,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

pub const REPORT_HEADER: &str = "domain,phase,accuracy,delta,seed";

/// CSV rows (`pre` with delta 0, then `post`) followed by one confusion block
/// per domain and phase.
pub fn report_csv(report: &AdaptationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_HEADER}");
    for r in &report.records {
        let _ = writeln!(s, "{},pre,{:?},{:?},{}", r.domain_id, r.pre_accuracy, 0.0, report.seed);
        let _ = writeln!(s, "{},post,{:?},{:?},{}", r.domain_id, r.post_accuracy, r.delta, report.seed);
    }
    for r in &report.records {
        for (phase, cm) in [("pre", &r.pre_confusion), ("post", &r.post_confusion)] {
            let _ = writeln!(s);
            let _ = writeln!(s, "# confusion domain={} phase={phase}", r.domain_id);
            for row in &cm.counts {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "{}", cells.join(","));
            }
        }
    }
    s
}

pub fn write_report(report: &AdaptationReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Text => {
            let mut t = serde_json::to_string_pretty(report).map_err(|e| invalid(e.to_string()))?;
            t.push('\n');
            t
        }
    };
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub domain: String,
    pub phase: String,
    pub accuracy: f64,
    pub delta: f64,
    pub seed: u64,
}

/// Reads back the accuracy rows of [`report_csv`], stopping at the first
/// blank line.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(EvalError::Parse { line: 1, msg: "missing report header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            break;
        }
        let err = |msg: String| EvalError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        rows.push(ReportRow {
            domain: f[0].to_string(),
            phase: f[1].to_string(),
            accuracy: num(f[2])?,
            delta: num(f[3])?,
            seed: f[4].parse().map_err(|e| err(format!("{:?}: {e}", f[4])))?,
        });
    }
    Ok(rows)
}
