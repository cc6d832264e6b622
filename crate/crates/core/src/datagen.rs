//! Synthetic multi-domain datasets, two-view augmentation and the dataset
//! CSV format.
//!
//! A source domain is a set of isotropic Gaussian class blobs. A target domain
//! applies a [`DomainShiftSpec`] to the same draws: Givens rotations over
//! seeded coordinate pairs, then a global scale, then a per-dimension offset,
//! then additive Gaussian noise. Class identity is preserved.
//!
//! Dataset files:
//!
//! ```text
//! # scoda-dataset v1 domain=<id> classes=<K>
//! f0,f1,...,f{D-1},label
//! 0.25,-1.5,...,2
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::Matrix;
use crate::rng::{self, Prng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("dataset I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// Labeled feature vectors from one domain. Labels are only used for
/// evaluation; adaptation never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domain_id: String,
    pub n_classes: usize,
}

impl DomainDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        domain_id: impl Into<String>,
        n_classes: usize,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if labels.len() != features.rows() {
            return Err(invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        if domain_id.is_empty() || domain_id.chars().any(char::is_whitespace) {
            return Err(invalid(format!("domain id {domain_id:?} must be non-empty without whitespace")));
        }
        Ok(Self {
            features,
            labels,
            domain_id,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Subset with the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain_id: self.domain_id.clone(),
            n_classes: self.n_classes,
        }
    }

    pub fn with_domain_id(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }
}

/// Shape of the source class blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    /// Per-dimension standard deviation of each class.
    pub class_std: f64,
    /// Class means are drawn as `mean_scale * N(0, I)`.
    pub mean_scale: f64,
    /// Minimum pairwise distance between class means, in units of `class_std`.
    pub min_separation: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            class_std: 0.45,
            mean_scale: 0.5,
            min_separation: 4.0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return Err(invalid("blobs.class_std must be > 0"));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(invalid("blobs.mean_scale must be > 0"));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(invalid("blobs.min_separation must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftSpec {
    /// Angle of every Givens rotation, in degrees.
    pub rotation_degrees: f64,
    /// Magnitude of the per-dimension offset; each dimension gets a seeded sign.
    pub mean_shift: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: 30.0,
            mean_shift: 1.0,
            scale: 1.2,
            noise_sigma: 0.3,
        }
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation_degrees: 0.0,
            mean_shift: 0.0,
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !self.rotation_degrees.is_finite() || !self.mean_shift.is_finite() {
            return Err(invalid("rotation_degrees and mean_shift must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub noise_sigma: f64,
    /// Each row is scaled by a factor uniform in `[1 - scale_jitter, 1 + scale_jitter)`.
    pub scale_jitter: f64,
    pub dropout_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            scale_jitter: 0.2,
            dropout_prob: 0.1,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_jitter: 0.0,
            dropout_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(invalid(format!("dropout_prob must be in [0, 1), got {}", self.dropout_prob)));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(invalid(format!("scale_jitter must be in [0, 1), got {}", self.scale_jitter)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

const TAG_MEANS: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_SHIFT: u64 = 100;
const TAG_NOISE: u64 = 200;

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn exact_cos_sin(degrees: f64) -> (f64, f64) {
    let r = degrees.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let t = degrees.to_radians();
            (t.cos(), t.sin())
        }
    }
}

/// The seeded pieces of a domain shift: rotation planes and offset signs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPlan {
    pub pairs: Vec<(usize, usize)>,
    pub offset: Vec<f64>,
}

impl ShiftPlan {
    pub fn new(dim: usize, shift: &DomainShiftSpec, rng: &mut Prng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        rng::shuffle(rng, &mut perm);
        let pairs = perm.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let offset = (0..dim)
            .map(|_| {
                if rng::unit(rng) < 0.5 {
                    -shift.mean_shift
                } else {
                    shift.mean_shift
                }
            })
            .collect();
        Self { pairs, offset }
    }
}

/// Applies rotation, scale and offset (no noise) to `x` in place.
pub fn apply_shift(x: &mut Matrix, shift: &DomainShiftSpec, plan: &ShiftPlan) {
    let (c, s) = exact_cos_sin(shift.rotation_degrees);
    let rotate = !(c == 1.0 && s == 0.0);
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        if rotate {
            for &(a, b) in &plan.pairs {
                let (va, vb) = (row[a], row[b]);
                row[a] = c * va - s * vb;
                row[b] = s * va + c * vb;
            }
        }
        if shift.scale != 1.0 {
            for v in row.iter_mut() {
                *v *= shift.scale;
            }
        }
        if shift.mean_shift != 0.0 {
            for (v, o) in row.iter_mut().zip(&plan.offset) {
                *v += o;
            }
        }
    }
}

fn draw_means(rng: &mut Prng, n_classes: usize, dim: usize, blobs: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    let min_dist = blobs.min_separation * blobs.class_std;
    for _ in 0..10_000 {
        let means: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| (0..dim).map(|_| blobs.mean_scale * rng::normal(rng)).collect())
            .collect();
        let ok = (0..n_classes).all(|a| {
            (a + 1..n_classes).all(|b| {
                let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                d2.sqrt() >= min_dist
            })
        });
        if ok {
            return Ok(means);
        }
    }
    Err(invalid("could not place class means at the requested separation"))
}

/// Source blobs plus one target per shift; all targets reuse the source draws.
pub fn make_domain_family(
    seed: u64,
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    blobs: &BlobSpec,
    shifts: &[DomainShiftSpec],
) -> Result<(DomainDataset, Vec<DomainDataset>)> {
    if dim < 2 || n_classes < 2 || n_per_class < 10 {
        return Err(invalid(format!(
            "need dim >= 2, n_classes >= 2, n_per_class >= 10 (got {dim}, {n_classes}, {n_per_class})"
        )));
    }
    blobs.validate()?;
    for s in shifts {
        s.validate()?;
    }
    let means = draw_means(&mut rng::stream(seed, TAG_MEANS), n_classes, dim, blobs)?;
    let mut rng = rng::stream(seed, TAG_SAMPLES);
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|m| m + blobs.class_std * rng::normal(&mut rng)));
            labels.push(k);
        }
    }
    let features = Matrix::from_vec(n, dim, data).map_err(|e| invalid(e.to_string()))?;
    let source = DomainDataset::new(features, labels, "source", n_classes)?;

    let targets = shifts
        .iter()
        .enumerate()
        .map(|(t, shift)| {
            let mut x = source.features.clone();
            let plan = ShiftPlan::new(dim, shift, &mut rng::stream(seed, TAG_SHIFT + t as u64));
            apply_shift(&mut x, shift, &plan);
            if shift.noise_sigma > 0.0 {
                let mut nr = rng::stream(seed, TAG_NOISE + t as u64);
                for v in x.data_mut() {
                    *v += shift.noise_sigma * rng::normal(&mut nr);
                }
            }
            DomainDataset::new(x, source.labels.clone(), format!("target_{t}"), n_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((source, targets))
}

pub fn make_domain_pair(
    seed: u64,
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    shift: &DomainShiftSpec,
) -> Result<(DomainDataset, DomainDataset)> {
    make_domain_pair_with(seed, n_classes, dim, n_per_class, &BlobSpec::default(), shift)
}

pub fn make_domain_pair_with(
    seed: u64,
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    blobs: &BlobSpec,
    shift: &DomainShiftSpec,
) -> Result<(DomainDataset, DomainDataset)> {
    let (source, mut targets) =
        make_domain_family(seed, n_classes, dim, n_per_class, blobs, std::slice::from_ref(shift))?;
    Ok((source, targets.remove(0).with_domain_id("target")))
}

/// `x' = (x * mask) * jitter + noise`, fully determined by `(x, aug, seed)`.
pub fn augment_view(x: &Matrix, aug: &AugmentSpec, seed: u64) -> Matrix {
    let mut rng = rng::seeded(seed);
    let mut out = x.clone();
    for r in 0..out.rows() {
        let jitter = if aug.scale_jitter > 0.0 {
            1.0 + rng::symmetric(&mut rng, aug.scale_jitter)
        } else {
            1.0
        };
        for v in out.row_mut(r) {
            if aug.dropout_prob > 0.0 && rng::unit(&mut rng) < aug.dropout_prob {
                *v = 0.0;
            }
            if jitter != 1.0 {
                *v *= jitter;
            }
            if aug.noise_sigma > 0.0 {
                *v += aug.noise_sigma * rng::normal(&mut rng);
            }
        }
    }
    out
}

pub fn dataset_to_string(ds: &DomainDataset) -> String {
    let d = ds.dim();
    let mut s = String::new();
    writeln!(s, "# scoda-dataset v1 domain={} classes={}", ds.domain_id, ds.n_classes).unwrap();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            // `{:?}` is the shortest representation that parses back bit-exactly.
            write!(s, "{v:?},").unwrap();
        }
        writeln!(s, "{}", ds.labels[i]).unwrap();
    }
    s
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(ds)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<DomainDataset> {
    let perr = |line: usize, msg: String| DataError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let rest = header
        .strip_prefix("# scoda-dataset v1 ")
        .ok_or_else(|| perr(ln, format!("expected '# scoda-dataset v1 ...' header, got {header:?}")))?;
    let (mut domain, mut classes) = (None, None);
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("domain", v)) => domain = Some(v.to_string()),
            Some(("classes", v)) => {
                classes = Some(
                    v.parse::<usize>()
                        .map_err(|_| perr(ln, format!("bad class count {v:?}")))?,
                )
            }
            _ => return Err(perr(ln, format!("unknown header field {tok:?}"))),
        }
    }
    let domain = domain.ok_or_else(|| perr(ln, "missing domain=".into()))?;
    let k = classes.ok_or_else(|| perr(ln, "missing classes=".into()))?;
    if k < 1 {
        return Err(perr(ln, "classes must be >= 1".into()));
    }

    let (ln, cols) = lines.next().ok_or_else(|| perr(2, "missing column header".into()))?;
    let names: Vec<&str> = cols.split(',').collect();
    let d = names.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    if d == 0 || names != expected {
        return Err(perr(ln, format!("column header must be f0,...,f{{D-1}},label; got {cols:?}")));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(perr(ln, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| perr(ln, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(perr(ln, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        let label: usize = fields[d]
            .trim()
            .parse()
            .map_err(|_| perr(ln, format!("bad label {:?}", fields[d])))?;
        if label >= k {
            return Err(perr(ln, format!("label {label} out of range for {k} classes")));
        }
        labels.push(label);
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, d, data).map_err(|e| invalid(e.to_string()))?;
    DomainDataset::new(features, labels, domain, k)
}

/// Seeded stratified split: each class contributes `round(fraction * n_c)`
/// samples (at least one, at most `n_c - 1`) to the first part. Both parts keep
/// the original row order.
pub fn split_dataset(
    ds: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut rng = rng::seeded(seed);
    let mut in_first = vec![false; ds.len()];
    for class in 0..ds.n_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(invalid(format!("class {class} has fewer than 2 samples")));
        }
        rng::shuffle(&mut rng, &mut idx);
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..take] {
            in_first[i] = true;
        }
    }
    let first: Vec<usize> = (0..ds.len()).filter(|&i| in_first[i]).collect();
    let second: Vec<usize> = (0..ds.len()).filter(|&i| !in_first[i]).collect();
    Ok((ds.select(&first), ds.select(&second)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generation_is_seeded_and_structured() {
        let shift = DomainShiftSpec::default();
        let (s1, t1) = make_domain_pair(42, 3, 16, 20, &shift).unwrap();
        let (s2, t2) = make_domain_pair(42, 3, 16, 20, &shift).unwrap();
        assert_eq!((&s1, &t1), (&s2, &t2));
        let (s3, _) = make_domain_pair(43, 3, 16, 20, &shift).unwrap();
        assert_ne!(s1, s3);
        assert_eq!(s1.class_counts(), vec![20; 3]);
        assert_eq!(t1.labels, s1.labels);
        assert_eq!(t1.domain_id, "target");
        assert!(make_domain_pair(1, 1, 16, 20, &shift).is_err());
        assert!(make_domain_pair(1, 3, 1, 20, &shift).is_err());
        assert!(make_domain_pair(1, 3, 16, 9, &shift).is_err());
        let bad = DomainShiftSpec { scale: 0.0, ..shift };
        assert!(make_domain_pair(1, 3, 16, 20, &bad).is_err());
    }

    #[test]
    fn class_means_respect_separation() {
        let blobs = BlobSpec::default();
        let means = draw_means(&mut rng::stream(5, TAG_MEANS), 4, 16, &blobs).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d.sqrt() >= blobs.min_separation * blobs.class_std);
            }
        }
    }

    #[test]
    fn null_shift_reproduces_source() {
        let (s, t) = make_domain_pair(7, 3, 8, 15, &DomainShiftSpec::identity()).unwrap();
        assert_eq!(s.features, t.features);
    }

    #[test]
    fn half_turn_negates_rotated_coordinates() {
        let shift = DomainShiftSpec {
            rotation_degrees: 180.0,
            ..DomainShiftSpec::identity()
        };
        let (s, t) = make_domain_pair(3, 2, 5, 10, &shift).unwrap();
        let plan = ShiftPlan::new(5, &shift, &mut rng::stream(3, TAG_SHIFT));
        assert_eq!(plan.pairs.len(), 2);
        let rotated: Vec<usize> = plan.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        for i in 0..s.len() {
            for j in 0..5 {
                let want = if rotated.contains(&j) { -s.features.get(i, j) } else { s.features.get(i, j) };
                assert_eq!(t.features.get(i, j), want);
            }
        }
    }

    #[test]
    fn augment_view_behaviour() {
        let (s, _) = make_domain_pair(1, 2, 6, 10, &DomainShiftSpec::identity()).unwrap();
        let x = &s.features;
        assert_eq!(&augment_view(x, &AugmentSpec::none(), 9), x);
        let aug = AugmentSpec::default();
        assert_eq!(augment_view(x, &aug, 1), augment_view(x, &aug, 1));
        assert_ne!(augment_view(x, &aug, 1), augment_view(x, &aug, 2));
        assert!(AugmentSpec { dropout_prob: 1.0, ..aug }.validate().is_err());
        let drop_only = AugmentSpec {
            dropout_prob: 0.5,
            ..AugmentSpec::none()
        };
        let v = augment_view(x, &drop_only, 4);
        for (a, b) in v.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || a == b);
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let (_, t) = make_domain_pair(11, 3, 4, 10, &DomainShiftSpec::default()).unwrap();
        save_dataset(&t, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# scoda-dataset v1 domain=target classes=3\nf0,f1,f2,f3,label\n"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# scoda-dataset v1 domain=x classes=2\nf0,f1,label\n0.5,1,0\n1,2,2\n";
        match parse_dataset(text) {
            Err(DataError::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        let ragged = "# scoda-dataset v1 domain=x classes=2\nf0,f1,label\n0.5,0\n";
        assert!(matches!(parse_dataset(ragged), Err(DataError::Parse { line: 3, .. })));
        let bad_header = "scoda v1\nf0,label\n";
        assert!(matches!(parse_dataset(bad_header), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn external_feature_csv_loads() {
        // e.g. precomputed embeddings written by another tool
        let text = "# scoda-dataset v1 domain=clipart classes=3\r\nf0,f1,f2,label\r\n1e-3,-2.5,3,2\r\n0,0.125,-1E2,0\r\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.domain_id, "clipart");
        assert_eq!(ds.labels, vec![2, 0]);
        assert_eq!(ds.features.row(1), &[0.0, 0.125, -100.0]);
    }

    #[test]
    fn split_examples() {
        let (s, _) = make_domain_pair(2, 3, 4, 100, &DomainShiftSpec::identity()).unwrap();
        let (a, b) = split_dataset(&s, 0.5, 1).unwrap();
        assert_eq!(a.class_counts(), vec![50; 3]);
        assert_eq!(b.class_counts(), vec![50; 3]);
        assert_eq!(split_dataset(&s, 0.5, 1).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<Vec<u64>> = a
            .features
            .data()
            .chunks(4)
            .chain(b.features.data().chunks(4))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = s.features.data().chunks(4).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split_dataset(&s, 1.0, 1).is_err());
        let tiny = s.select(&[0, 100, 101]);
        assert!(split_dataset(&tiny, 0.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_any_finite_values(vals in prop::collection::vec(-1e300f64..1e300, 6)) {
            let ds = DomainDataset::new(Matrix::from_vec(3, 2, vals).unwrap(), vec![0, 1, 1], "p", 2).unwrap();
            prop_assert_eq!(parse_dataset(&dataset_to_string(&ds)).unwrap(), ds);
        }
    }
}
