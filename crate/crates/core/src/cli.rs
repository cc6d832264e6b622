//! `scoda` command line: data generation, pretext pre-training, adaptation,
//! evaluation, ablation and the gradient self-check.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O or input
//! error, 4 numerical divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{self, AugmentSpec, BlobSpec, DomainDataset, DomainShiftSpec};
use crate::duospeed::{self, AdaptError, AdaptRunResult, AdaptationConfig, PretextConfig};
use crate::evalsuite::{self, ClassifierKind, EvalConfig, EvalDomain, EvaluatedModel};
use crate::hiprec::{self, LossKind};
use crate::losses::{self, LossValue};
use crate::model::{self, FeatureExtractorParams, LayerSpec};
use crate::numkernel::{self, GradCheckReport, Matrix};
use crate::rng;

pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("check failed: {0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Check(_) => 1,
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Input(_) => 3,
            Self::Divergence(_) => 4,
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Divergence { .. } => Self::Divergence(e.to_string()),
            AdaptError::Config(m) => Self::Config(m),
            other => Self::Input(other.to_string()),
        }
    }
}

impl From<evalsuite::EvalError> for CliError {
    fn from(e: evalsuite::EvalError) -> Self {
        match e {
            evalsuite::EvalError::Adapt(a) => a.into(),
            evalsuite::EvalError::Io { path, source } => Self::Io {
                path,
                msg: source.to_string(),
            },
            other => Self::Input(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "scoda", version, about = "Dual-speed teacher-student source-free domain adaptation")]
pub struct Cli {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source and target dataset CSVs.
    GenData,
    /// Label-free pre-training on a source dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a checkpoint to one target, or to several in sequence.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "target", required = true)]
        targets: Vec<PathBuf>,
    },
    /// Pre/post accuracy report of two checkpoints.
    Eval {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "target", required = true)]
        targets: Vec<PathBuf>,
    },
    /// Full, cosine-only and space-only adaptation for every configured seed.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub blobs: BlobSpec,
    /// One target domain per entry.
    pub shifts: Vec<DomainShiftSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 3,
            dim: 16,
            n_per_class: 200,
            blobs: BlobSpec::default(),
            shifts: vec![DomainShiftSpec::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Widths of the hidden (linear, batchnorm, ReLU) layers.
    pub hidden: Vec<usize>,
    /// Width of the final linear layer.
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, input_dim: usize) -> Vec<LayerSpec> {
        let mut spec = Vec::with_capacity(self.hidden.len() + 1);
        let mut width = input_dim;
        for &h in &self.hidden {
            spec.push(LayerSpec::new(width, h, true, true));
            width = h;
        }
        spec.push(LayerSpec::new(width, self.feature_dim, false, false));
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub eta: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub m: f64,
    pub seed: u64,
    pub augment: AugmentSpec,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretextConfig::default();
        Self {
            epochs: p.epochs,
            eta: p.eta,
            sgd_momentum: p.sgd_momentum,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            m: p.m,
            seed: p.seed,
            augment: AugmentSpec::default(),
        }
    }
}

impl PretrainSection {
    pub fn pretext(&self) -> PretextConfig {
        PretextConfig {
            epochs: self.epochs,
            eta: self.eta,
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            m: self.m,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub classifier: ClassifierKind,
    pub k: usize,
    pub probe_epochs: usize,
    pub probe_eta: f64,
    pub reference_fraction: f64,
    pub model: EvaluatedModel,
    pub seed: u64,
    /// Adaptation seeds for `ablate`; empty means `[adapt.seed]`.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            classifier: e.classifier,
            k: e.k,
            probe_epochs: e.probe_epochs,
            probe_eta: e.probe_eta,
            reference_fraction: e.reference_fraction,
            model: e.model,
            seed: e.seed,
            ablation_seeds: Vec::new(),
        }
    }
}

impl EvalSection {
    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            classifier: self.classifier,
            k: self.k,
            probe_epochs: self.probe_epochs,
            probe_eta: self.probe_eta,
            reference_fraction: self.reference_fraction,
            model: self.model,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptationConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies the seed override and checks every section.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.pretrain.seed = s;
            self.adapt.seed = s;
            self.eval.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, msg: String| CliError::Config(format!("{path}: {msg}"));
        let d = &self.data;
        if d.dim < 2 {
            return Err(cfg("data.dim", format!("must be >= 2, got {}", d.dim)));
        }
        if d.n_classes < 2 {
            return Err(cfg("data.n_classes", format!("must be >= 2, got {}", d.n_classes)));
        }
        if d.n_per_class < 10 {
            return Err(cfg("data.n_per_class", format!("must be >= 10, got {}", d.n_per_class)));
        }
        if d.shifts.is_empty() {
            return Err(cfg("data.shifts", "needs at least one shift".into()));
        }
        d.blobs.validate().map_err(|e| cfg("data.blobs", e.to_string()))?;
        for (i, s) in d.shifts.iter().enumerate() {
            s.validate().map_err(|e| cfg(&format!("data.shifts[{i}]"), e.to_string()))?;
        }
        if self.model.hidden.contains(&0) || self.model.feature_dim == 0 {
            return Err(cfg("model", "layer widths must be >= 1".into()));
        }
        model::validate_spec(&self.model.spec(d.dim)).map_err(|e| cfg("model", e.to_string()))?;
        self.pretrain.pretext().validate().map_err(|e| cfg("pretrain", e.to_string()))?;
        self.pretrain
            .augment
            .validate()
            .map_err(|e| cfg("pretrain.augment", e.to_string()))?;
        self.adapt.validate().map_err(|e| cfg("adapt", e.to_string()))?;
        self.eval.eval().validate().map_err(|e| cfg("eval", e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    cfg.resolve(seed)
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let text = read_text(path)?;
    datagen::parse_dataset(&text).map_err(|e| io_err(path, e))
}

fn load_checkpoint(path: &Path) -> Result<FeatureExtractorParams> {
    let bytes = read_bytes(path)?;
    model::params_from_checkpoint_bytes(&bytes).map_err(|e| io_err(path, e))
}

fn check_input_dim(params: &FeatureExtractorParams, ds: &DomainDataset, path: &Path) -> Result<()> {
    if params.input_dim() != ds.dim() {
        return Err(CliError::Input(format!(
            "{} has {} features, checkpoint expects {}",
            path.display(),
            ds.dim(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Files staged in memory and written only once the whole command succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    fn names(&self) -> Vec<String> {
        self.files.iter().map(|(p, _)| p.to_string_lossy().replace('\\', "/")).collect()
    }

    fn write(self) -> Result<()> {
        for (rel, bytes) in &self.files {
            let path = self.dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

fn input_entry(path: &Path) -> Result<serde_json::Value> {
    let bytes = read_bytes(path)?;
    Ok(serde_json::json!({
        "path": path.to_string_lossy(),
        "sha256": hex(&Sha256::digest(&bytes)),
    }))
}

fn finish(
    mut out: Outputs,
    command: &str,
    seed: u64,
    cfg: &RunConfig,
    inputs: &[&Path],
    extra: serde_json::Value,
) -> Result<()> {
    let inputs = inputs.iter().map(|p| input_entry(p)).collect::<Result<Vec<_>>>()?;
    let mut manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_json(),
        "inputs": inputs,
        "outputs": out.names(),
    });
    if let (Some(m), serde_json::Value::Object(extra)) = (manifest.as_object_mut(), extra) {
        m.extend(extra);
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    out.add("manifest.json", text);
    out.write()
}

pub fn loss_trace_csv(trace: &[LossValue]) -> String {
    let mut s = String::from("step,total,cos,space\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", v.total, v.cos_component, v.space_component);
    }
    s
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let d = &cfg.data;
    let (source, targets) = datagen::make_domain_family(d.seed, d.n_classes, d.dim, d.n_per_class, &d.blobs, &d.shifts)
        .map_err(|e| CliError::Config(format!("data: {e}")))?;
    let mut out = Outputs::new(out_dir);
    out.add("source.csv", datagen::dataset_to_string(&source));
    for (t, ds) in targets.iter().enumerate() {
        out.add(format!("target_{t}.csv"), datagen::dataset_to_string(ds));
    }
    let extra = serde_json::json!({ "data_seed": d.seed, "shifts": d.shifts });
    finish(out, "gen-data", d.seed, cfg, &[], extra)
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<()> {
    let source = load_dataset(data)?;
    let spec = cfg.model.spec(source.dim());
    let result = duospeed::pretext_pretrain(&spec, &source, &cfg.pretrain.pretext(), &cfg.pretrain.augment)?;
    let mut trace = String::from("step,loss\n");
    for (i, l) in result.loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{l}");
    }
    let mut out = Outputs::new(out_dir);
    out.add("checkpoint.bin", model::checkpoint_bytes(&result.online));
    out.add("pretrain_loss.csv", trace);
    finish(out, "pretrain", cfg.pretrain.seed, cfg, &[data], serde_json::json!({}))
}

fn stage_files(out: &mut Outputs, prefix: &Path, run: &AdaptRunResult) {
    out.add(prefix.join("student.bin"), model::checkpoint_bytes(&run.adapted_student));
    out.add(prefix.join("teacher.bin"), model::checkpoint_bytes(&run.final_teacher));
    out.add(prefix.join("loss_trace.csv"), loss_trace_csv(&run.loss_trace));
}

pub fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, targets: &[PathBuf], out_dir: &Path) -> Result<()> {
    let h = load_checkpoint(checkpoint)?;
    let data = targets
        .iter()
        .map(|p| {
            let ds = load_dataset(p)?;
            check_input_dim(&h, &ds, p)?;
            Ok(ds)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outputs::new(out_dir);
    let mut stages = Vec::new();
    if data.len() == 1 {
        let run = duospeed::adapt_run(&h, &data[0], &cfg.adapt)?;
        stage_files(&mut out, Path::new(""), &run);
        stages.push(serde_json::json!({ "steps": run.loss_trace.len(), "degeneracy_count": run.degeneracy_count }));
    } else {
        for (k, run) in duospeed::continual_run(&h, &data, &cfg.adapt)?.iter().enumerate() {
            stage_files(&mut out, Path::new(&format!("stage_{k}")), run);
            stages.push(serde_json::json!({
                "stage": k,
                "seed": cfg.adapt.seed.wrapping_add(k as u64),
                "steps": run.loss_trace.len(),
                "degeneracy_count": run.degeneracy_count,
            }));
        }
    }
    let mut inputs: Vec<&Path> = vec![checkpoint];
    inputs.extend(targets.iter().map(PathBuf::as_path));
    finish(out, "adapt", cfg.adapt.seed, cfg, &inputs, serde_json::json!({ "stages": stages }))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pre: &Path,
    post: &Path,
    source: &Path,
    targets: &[PathBuf],
    out_dir: &Path,
) -> Result<()> {
    let pre_params = load_checkpoint(pre)?;
    let post_params = load_checkpoint(post)?;
    pre_params
        .ensure_same_structure(&post_params, "eval")
        .map_err(|e| CliError::Input(e.to_string()))?;
    let source_ds = load_dataset(source)?;
    check_input_dim(&pre_params, &source_ds, source)?;
    let target_ds = targets
        .iter()
        .map(|p| {
            let ds = load_dataset(p)?;
            check_input_dim(&pre_params, &ds, p)?;
            Ok(ds)
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_cfg = cfg.eval.eval();
    let (source_eval, target_evals) = EvalDomain::source_referenced(&source_ds, &target_ds, &eval_cfg)?;
    let mut domains = vec![source_eval];
    domains.extend(target_evals);
    let records = evalsuite::compare_models(&pre_params, &post_params, &domains, &eval_cfg)?;
    let report = evalsuite::AdaptationReport {
        records,
        loss: None,
        config: serde_json::json!({ "config": cfg.to_json(), "config_hash": cfg.hash() }),
        seed: eval_cfg.seed,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    let mut out = Outputs::new(out_dir);
    out.add("report.csv", evalsuite::report_csv(&report));
    out.add("report.json", json);
    let mut inputs: Vec<&Path> = vec![pre, post, source];
    inputs.extend(targets.iter().map(PathBuf::as_path));
    finish(out, "eval", eval_cfg.seed, cfg, &inputs, serde_json::json!({}))
}

pub fn ablation_seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.eval.ablation_seeds.is_empty() {
        vec![cfg.adapt.seed]
    } else {
        cfg.eval.ablation_seeds.clone()
    }
}

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, source: &Path, target: &Path, out_dir: &Path) -> Result<()> {
    let h = load_checkpoint(checkpoint)?;
    let source_ds = load_dataset(source)?;
    check_input_dim(&h, &source_ds, source)?;
    let target_ds = load_dataset(target)?;
    check_input_dim(&h, &target_ds, target)?;
    let eval_cfg = cfg.eval.eval();
    let (source_eval, target_evals) =
        EvalDomain::source_referenced(&source_ds, std::slice::from_ref(&target_ds), &eval_cfg)?;
    let seeds = ablation_seeds(cfg);
    let mut table = String::from("variant,seed,pre_accuracy,accuracy,source_accuracy,final_loss\n");
    let mut sums = [[0.0f64; 3]; 3];
    for &seed in &seeds {
        let adapt_cfg = AdaptationConfig { seed, ..cfg.adapt };
        let rows = evalsuite::ablation_run(&h, &target_ds, &source_eval, &target_evals[0], &adapt_cfg, &eval_cfg)?;
        for (i, row) in rows.iter().enumerate() {
            let final_loss = row.loss_trace.last().map_or(f64::NAN, |v| v.total);
            let _ = writeln!(
                table,
                "{},{},{},{},{},{}",
                row.variant.name(),
                seed,
                row.pre_accuracy,
                row.accuracy,
                row.source_accuracy,
                final_loss
            );
            sums[i][0] += row.pre_accuracy;
            sums[i][1] += row.accuracy;
            sums[i][2] += row.source_accuracy;
        }
    }
    let n = seeds.len() as f64;
    for (variant, s) in evalsuite::AblationVariant::ALL.iter().zip(&sums) {
        let _ = writeln!(table, "{},mean,{},{},{},", variant.name(), s[0] / n, s[1] / n, s[2] / n);
    }
    let mut out = Outputs::new(out_dir);
    out.add("ablation.csv", table);
    finish(
        out,
        "ablate",
        cfg.adapt.seed,
        cfg,
        &[checkpoint, source, target],
        serde_json::json!({ "ablation_seeds": seeds }),
    )
}

/// One named finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Seeded 8x16 batch in `[-1, 1]` through the default network, with teacher
/// features from an independently initialized network in eval mode.
pub fn gradcheck_inputs(seed: u64) -> (FeatureExtractorParams, Matrix, Matrix) {
    let spec = model::default_spec(16);
    let student = model::init_params(&spec, seed).expect("default spec is valid");
    let teacher = model::init_params(&spec, seed ^ 0x7EAC_4E70).expect("default spec is valid");
    let mut r = rng::stream(seed, 0x6C0C_4EC4);
    let x = Matrix::from_fn(8, 16, |_, _| rng::symmetric(&mut r, 1.0));
    let tf = teacher.forward_eval(&x).expect("shapes match");
    (student, x, tf)
}

/// Loss-level checks against student features, then end-to-end checks
/// through every learnable network parameter.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let (student, x, tf) = gradcheck_inputs(seed);
    let sf = student.forward_batch_stats(&x).map_err(|e| CliError::Check(e.to_string()))?;
    let kinds = [
        ("cos", LossKind::Cos),
        ("space", LossKind::Space),
        ("total", LossKind::Total { lambda: 1.0 }),
    ];
    let mut entries = Vec::new();
    let names: Vec<String> = (0..sf.rows())
        .flat_map(|i| (0..sf.cols()).map(move |j| format!("f[{i},{j}]")))
        .collect();
    for (label, kind) in kinds {
        let (cw, lambda) = kind.weights();
        let loss = |flat: &[f64]| {
            let s = Matrix::from_vec(sf.rows(), sf.cols(), flat.to_vec()).expect("shape");
            losses::weighted_loss(&tf, &s, cw, lambda).expect("shapes match").value.total
        };
        let analytic = losses::weighted_loss(&tf, &sf, cw, lambda)
            .map_err(|e| CliError::Check(e.to_string()))?
            .grad_student;
        let report = numkernel::grad_check(loss, sf.data(), analytic.data(), &names, GRADCHECK_TOL)
            .map_err(|e| CliError::Check(e.to_string()))?;
        entries.push(GradCheckEntry {
            name: format!("loss/{label}"),
            report,
        });
    }
    for (label, kind) in kinds {
        let report = hiprec::network_grad_check(&student, &x, &tf, kind, GRADCHECK_TOL)
            .map_err(|e| CliError::Check(e.to_string()))?;
        entries.push(GradCheckEntry {
            name: format!("network/{label}"),
            report,
        });
    }
    Ok(entries)
}

/// Runs the suite, printing one line per check; fails naming the worst parameter.
pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let entries = gradcheck_suite(seed)?;
    let mut worst: Option<(&str, String, f64)> = None;
    let mut max_err = 0.0f64;
    for e in &entries {
        let (param, err) = e.report.worst().map(|(n, v)| (n.to_string(), v)).unwrap_or_default();
        println!(
            "{:<14} max_rel_error={:.3e} worst={} {}",
            e.name,
            e.report.max_rel_error,
            param,
            if e.report.passed { "ok" } else { "FAIL" }
        );
        max_err = max_err.max(e.report.max_rel_error);
        if !e.report.passed && worst.as_ref().is_none_or(|w| err > w.2) {
            worst = Some((&e.name, param, err));
        }
    }
    println!("max relative error: {max_err:.3e} (tolerance {GRADCHECK_TOL:e})");
    match worst {
        None => Ok(()),
        Some((check, param, err)) => Err(CliError::Check(format!(
            "{check}: parameter {param} has relative error {err:.3e}"
        ))),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out),
        Command::Pretrain { data } => cmd_pretrain(&cfg, data, &cli.out),
        Command::Adapt { checkpoint, targets } => cmd_adapt(&cfg, checkpoint, targets, &cli.out),
        Command::Eval {
            pre,
            post,
            source,
            targets,
        } => cmd_eval(&cfg, pre, post, source, targets, &cli.out),
        Command::Ablate {
            checkpoint,
            source,
            target,
        } => cmd_ablate(&cfg, checkpoint, source, target, &cli.out),
        Command::Gradcheck => cmd_gradcheck(cli.seed.unwrap_or(cfg.adapt.seed)),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("scoda: {e}");
            e.exit_code()
        }
    }
}
