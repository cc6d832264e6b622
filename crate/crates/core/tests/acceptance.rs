//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};

use scoda::cli::{self, main_with};
use scoda::datagen::{make_domain_pair, AugmentSpec, DomainDataset, DomainShiftSpec};
use scoda::duospeed::{adapt_run, adapt_run_observed, pretext_pretrain, AdaptationConfig, PretextConfig};
use scoda::evalsuite::{
    ablation_run, build_classifier, evaluate_model, forgetting_report, AblationVariant, EvalConfig, EvalDomain,
};
use scoda::model::{checkpoint_bytes, default_spec, init_params, FeatureExtractorParams};
use scoda::{cos_loss, space_loss, Matrix};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Everything the 5-seed criteria share, computed once.
struct SeedRun {
    seed: u64,
    source: DomainDataset,
    target: DomainDataset,
    source_eval: EvalDomain,
    target_eval: EvalDomain,
    h: FeatureExtractorParams,
    pre_source: f64,
    pre_target: f64,
    post_source: f64,
    post_target: f64,
    elapsed: Duration,
}

fn seed_run(seed: u64) -> SeedRun {
    let started = Instant::now();
    let (source, target) = make_domain_pair(seed, 3, 16, 200, &DomainShiftSpec::default()).unwrap();
    let eval_cfg = EvalConfig::default();
    let (source_eval, mut targets) =
        EvalDomain::source_referenced(&source, std::slice::from_ref(&target), &eval_cfg).unwrap();
    let target_eval = targets.remove(0);
    let pcfg = PretextConfig { seed, ..PretextConfig::default() };
    let h = pretext_pretrain(&default_spec(16), &source, &pcfg, &AugmentSpec::default())
        .unwrap()
        .online;
    let acfg = AdaptationConfig { seed, ..AdaptationConfig::default() };
    let run = adapt_run(&h, &target, &acfg).unwrap();
    let report = forgetting_report(&h, &run, &source_eval, &target_eval, &eval_cfg, serde_json::json!({})).unwrap();
    let elapsed = started.elapsed();
    SeedRun {
        seed,
        source,
        target,
        source_eval,
        target_eval,
        h,
        pre_source: report.records[0].pre_accuracy,
        pre_target: report.records[1].pre_accuracy,
        post_source: report.records[0].post_accuracy,
        post_target: report.records[1].post_accuracy,
        elapsed,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut all = true;
    for seed in [0u64, 1] {
        for entry in cli::gradcheck_suite(seed).unwrap() {
            all &= entry.report.passed;
            if entry.report.max_rel_error >= worst.1 {
                let param = entry.report.worst().map(|(n, _)| n.to_string()).unwrap_or_default();
                worst = (format!("seed {seed} {} {param}", entry.name), entry.report.max_rel_error);
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        all && worst.1 < 1e-5 && elapsed < Duration::from_secs(30),
        format!(
            "gradient fidelity: max rel error {:.3e} at {} (< 1e-5), {:.1?} (< 30 s)",
            worst.1, worst.0, elapsed
        ),
    )
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
        .prop_filter("rows and columns bounded away from zero", |m| {
            let t = m.transpose();
            (0..m.rows()).all(|i| m.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-6)
                && (0..t.rows()).all(|i| t.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
}

fn shaped() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5).prop_map(|(b, d)| (2 * b, 2 * d))
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    shaped().prop_flat_map(|(b, d)| (matrix(b, d), matrix(b, d)))
}

fn check(name: &str, failures: &mut Vec<String>, result: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) {
    if let Err(e) = result {
        failures.push(format!("{name}: {e}"));
    }
}

fn ensure(cond: bool, msg: String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg))
    }
}

fn criterion_2() -> Outcome {
    let cfg = PropConfig {
        failure_persistence: None,
        ..PropConfig::with_cases(100)
    };
    let mut failures = Vec::new();

    check("identical", &mut failures, TestRunner::new(cfg.clone()).run(&pair(), |(a, _)| {
        let c = cos_loss(&a, &a).unwrap().value;
        let s = space_loss(&a, &a).unwrap().value;
        ensure(c.abs() < 1e-12 && s.abs() < 1e-12, format!("cos {c:e} space {s:e}"))
    }));

    // Rotating coordinate (resp. row) pairs by 90 degrees makes every row
    // (resp. column) orthogonal to its counterpart.
    check("orthogonal", &mut failures, TestRunner::new(cfg.clone()).run(&pair(), |(a, _)| {
        let rows_rot = Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            if j % 2 == 0 { -a.get(i, j + 1) } else { a.get(i, j - 1) }
        });
        let cols_rot = Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            if i % 2 == 0 { -a.get(i + 1, j) } else { a.get(i - 1, j) }
        });
        let c = cos_loss(&a, &rows_rot).unwrap().value;
        let s = space_loss(&a, &cols_rot).unwrap().value;
        ensure(c == 1.0 && s == 1.0, format!("cos {c} space {s}"))
    }));

    check("duality", &mut failures, TestRunner::new(cfg.clone()).run(&pair(), |(a, b)| {
        let s = space_loss(&a, &b).unwrap().value;
        let c = cos_loss(&a.transpose(), &b.transpose()).unwrap().value;
        ensure((s - c).abs() < 1e-12, format!("{s} vs {c}"))
    }));

    let scaled = pair().prop_flat_map(|(a, b)| {
        let (r, c) = a.shape();
        (Just(a), Just(b), proptest::collection::vec(0.01f64..100.0, r), proptest::collection::vec(0.01f64..100.0, c))
    });
    check("row scale", &mut failures, TestRunner::new(cfg.clone()).run(&scaled, |(a, b, rs, _)| {
        let bs = Matrix::from_fn(b.rows(), b.cols(), |i, j| rs[i] * b.get(i, j));
        let base = cos_loss(&a, &b).unwrap().value;
        let after = cos_loss(&a, &bs).unwrap().value;
        ensure((base - after).abs() < 1e-12, format!("{base} vs {after}"))
    }));
    check("column scale", &mut failures, TestRunner::new(cfg).run(&scaled, |(a, b, _, cs)| {
        let bs = Matrix::from_fn(b.rows(), b.cols(), |i, j| cs[j] * b.get(i, j));
        let base = space_loss(&a, &b).unwrap().value;
        let after = space_loss(&a, &bs).unwrap().value;
        ensure((base - after).abs() < 1e-12, format!("{base} vs {after}"))
    }));

    let n = 5 - failures.len();
    outcome(
        failures.is_empty(),
        format!("loss identities: {n}/5 properties held over 100 cases each{}", failures.iter().map(|f| format!("; {f}")).collect::<String>()),
    )
}

fn criterion_3(run: &SeedRun) -> Outcome {
    let cfg = AdaptationConfig { seed: run.seed, ..AdaptationConfig::default() };
    let m = cfg.m;
    let mut worst = 0.0f64;
    let mut steps = 0usize;
    let mut observe = |ev: &scoda::duospeed::StepEvent| {
        steps += 1;
        let before = ev.teacher_before.learnable();
        let after = ev.teacher_after.learnable();
        let student = ev.student_after.learnable();
        for ((b, a), s) in before.iter().zip(&after).zip(&student) {
            for ((tb, ta), ps) in b.2.iter().zip(a.2).zip(s.2) {
                worst = worst.max((ta - (m * tb + (1.0 - m) * ps)).abs());
            }
        }
        let rb = ev.teacher_before.running_stats();
        let ra = ev.teacher_after.running_stats();
        let rs = ev.student_after.running_stats();
        for ((b, a), s) in rb.iter().zip(&ra).zip(&rs) {
            for ((tb, ta), ps) in b.0.iter().chain(b.1).zip(a.0.iter().chain(a.1)).zip(s.0.iter().chain(s.1)) {
                worst = worst.max((ta - (m * tb + (1.0 - m) * ps)).abs());
            }
        }
    };
    adapt_run_observed(&run.h, &run.target, &cfg, &mut observe).unwrap();
    outcome(
        steps > 0 && worst <= 1e-15,
        format!("EMA exactness: {steps} steps, max |teacher - (m*old + (1-m)*student)| = {worst:e} (<= 1e-15)"),
    )
}

fn criterion_4(runs: &[SeedRun]) -> Outcome {
    let pre = mean(runs.iter().map(|r| r.pre_target));
    let post = mean(runs.iter().map(|r| r.post_target));
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    let gain = 100.0 * (post - pre);
    outcome(
        gain >= 10.0 && slowest < Duration::from_secs(60),
        format!(
            "adaptation gain: target kNN {} -> {} ({gain:+.2} points, need >= +10), slowest run {slowest:.1?} (< 60 s)",
            pct(pre),
            pct(post)
        ),
    )
}

fn criterion_5(runs: &[SeedRun]) -> Outcome {
    let pre = mean(runs.iter().map(|r| r.pre_source));
    let post = mean(runs.iter().map(|r| r.post_source));
    let drop = 100.0 * (pre - post);
    outcome(
        drop <= 3.0,
        format!("forgetting: source kNN {} -> {} (drop {drop:.2} points, need <= 3)", pct(pre), pct(post)),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let mut acc = [0.0f64; 3];
    for r in runs {
        let cfg = AdaptationConfig { seed: r.seed, ..AdaptationConfig::default() };
        let rows = ablation_run(&r.h, &r.target, &r.source_eval, &r.target_eval, &cfg, &EvalConfig::default()).unwrap();
        for (a, row) in acc.iter_mut().zip(&rows) {
            *a += 100.0 * row.accuracy / runs.len() as f64;
        }
    }
    let [full, cos_only, space_only] = acc;
    let passed = full >= cos_only && full >= space_only && (full - cos_only >= 0.5 || full - space_only >= 0.5);
    let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
    outcome(
        passed,
        format!(
            "ablation ordering: {} {full:.2}, {} {cos_only:.2}, {} {space_only:.2} (need full >= both, > one by 0.5)",
            names[0], names[1], names[2]
        ),
    )
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(root: &Path) -> Vec<i32> {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let cfg = s(root.join("config.json"));
    let data = root.join("data");
    let pre = s(root.join("pre/checkpoint.bin"));
    let src = s(data.join("source.csv"));
    let t0 = s(data.join("target_0.csv"));
    let t1 = s(data.join("target_1.csv"));
    let commands: Vec<Vec<String>> = vec![
        vec!["gen-data".into()],
        vec!["pretrain".into(), "--data".into(), src.clone()],
        vec!["adapt".into(), "--checkpoint".into(), pre.clone(), "--target".into(), t0.clone()],
        vec!["adapt".into(), "--checkpoint".into(), pre.clone(), "--target".into(), t0.clone(), "--target".into(), t1],
        vec![
            "eval".into(), "--pre".into(), pre.clone(), "--post".into(), s(root.join("adapt/student.bin")),
            "--source".into(), src.clone(), "--target".into(), t0.clone(),
        ],
        vec!["ablate".into(), "--checkpoint".into(), pre, "--source".into(), src, "--target".into(), t0],
    ];
    let outs = ["data", "pre", "adapt", "continual", "eval", "ablate"];
    commands
        .iter()
        .zip(outs)
        .map(|(c, out)| {
            let mut args = vec!["scoda".to_string(), "--config".into(), cfg.clone(), "--out".into(), s(root.join(out))];
            args.extend(c.iter().cloned());
            main_with(args)
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(
        root.join("config.json"),
        r#"{"seed": 7, "data": {"shifts": [{}, {"rotation_degrees": 45.0}]}, "eval": {"ablation_seeds": [7, 8]}}"#,
    )
    .unwrap();
    let codes_a = pipeline(root);
    let first = snapshot(root);
    let codes_b = pipeline(root);
    let second = snapshot(root);
    let differing: Vec<String> = first
        .iter()
        .filter(|(p, bytes)| second.get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let kinds = |ext: &str| first.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    let ok_codes = codes_a.iter().chain(&codes_b).all(|&c| c == 0);
    outcome(
        ok_codes && differing.is_empty() && first.len() == second.len(),
        format!(
            "determinism: {} files ({} checkpoints, {} CSVs, {} JSON) byte-identical across reruns; exit codes {codes_a:?}{}",
            first.len(),
            kinds("bin"),
            kinds("csv"),
            kinds("json"),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    )
}

fn criterion_8(run: &SeedRun) -> Outcome {
    let base = AdaptationConfig { seed: run.seed, ..AdaptationConfig::default() };
    let h_bytes = checkpoint_bytes(&run.h);

    let noop = adapt_run(&run.h, &run.target, &AdaptationConfig { epochs: 0, ..base }).unwrap();
    let epochs0 = checkpoint_bytes(&noop.adapted_student) == h_bytes
        && checkpoint_bytes(&noop.final_teacher) == h_bytes
        && noop.loss_trace.is_empty();

    let frozen = adapt_run(&run.h, &run.target, &AdaptationConfig { eta: 0.0, ..base }).unwrap();
    let eta0 = frozen.adapted_student.flatten_learnable() == run.h.flatten_learnable() && !frozen.loss_trace.is_empty();

    let mut tracked = true;
    let mut observe = |ev: &scoda::duospeed::StepEvent| {
        tracked &= ev.teacher_after.flatten_learnable() == ev.student_after.flatten_learnable()
            && ev.teacher_after.running_stats() == ev.student_after.running_stats();
    };
    adapt_run_observed(&run.h, &run.target, &AdaptationConfig { m: 0.0, epochs: 3, ..base }, &mut observe).unwrap();

    outcome(
        epochs0 && eta0 && tracked,
        format!("degenerate runs: epochs=0 no-op {epochs0}, eta=0 frozen student {eta0}, m=0 teacher == student {tracked}"),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let cfg = EvalConfig::default();
    let knn = |p: &FeatureExtractorParams, r: &SeedRun| {
        let clf = build_classifier(p, &r.source_eval.reference, &cfg).unwrap();
        evaluate_model(p, &r.source_eval.query, &clf).unwrap().0
    };
    let pretext = mean(runs.iter().map(|r| knn(&r.h, r)));
    let random = mean(runs.iter().map(|r| knn(&init_params(&default_spec(16), r.seed).unwrap(), r)));
    let benefit = 100.0 * (pretext - random);
    let n_source = runs.iter().map(|r| r.source.len()).sum::<usize>();
    outcome(
        benefit >= 5.0,
        format!(
            "pretext benefit: source kNN pretext {} vs random init {} ({benefit:+.2} points, need >= +5; {n_source} source samples)",
            pct(pretext),
            pct(random)
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    let results = [
        guarded(criterion_1),
        guarded(criterion_2),
        guarded(|| criterion_3(&runs[0])),
        guarded(|| criterion_4(&runs)),
        guarded(|| criterion_5(&runs)),
        guarded(|| criterion_6(&runs)),
        guarded(criterion_7),
        guarded(|| criterion_8(&runs[0])),
        guarded(|| criterion_9(&runs)),
    ];
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        println!("{} criterion {}: {}", if r.passed { "PASS" } else { "FAIL" }, i + 1, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
