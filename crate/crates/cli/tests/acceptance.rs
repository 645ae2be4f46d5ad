//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//! `cargo test --release -p tdir-cli --test acceptance`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdir_core::data::{
    balance_classes, make_pretext_dataset, reverse_time, slice_windows, stratified_split, Dataset, Direction,
    SplitSpec, SubjectRecord,
};
use tdir_core::evaluation::{auc, auc_bruteforce_oracle, median, ScoredSet};
use tdir_core::training::{adam_step, batch_gradients, AdamState, Checkpoint, Labeled, TrainConfig};
use tdir_core::{init_params, ModelConfig, Tensor};

type Check = Result<String, String>;

fn tdir(args: &[&str]) -> i32 {
    let mut full = vec!["tdir"];
    full.extend_from_slice(args);
    tdir_cli::main_with(full)
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    match tdir(args) {
        0 => Ok(()),
        code => Err(format!("`tdir {}` exited with {code}", args.join(" "))),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn jobs() -> String {
    std::thread::available_parallelism().map_or(1, |n| n.get()).to_string()
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or(f64::NAN)
}

/// Every file under `dir` except run manifests (they record wall time).
fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn same_artifacts(a: &Path, b: &Path) -> Result<usize, String> {
    let (x, y) = (artifacts(a), artifacts(b));
    if x.is_empty() {
        return Err(format!("{} is empty", a.display()));
    }
    if x.keys().ne(y.keys()) {
        return Err(format!("{} and {} hold different files", a.display(), b.display()));
    }
    for (k, v) in &x {
        if y[k] != *v {
            return Err(format!("{} differs between {} and {}", k.display(), a.display(), b.display()));
        }
    }
    Ok(x.len())
}

fn c1_gradcheck() -> Check {
    let t = Instant::now();
    let code = tdir(&["gradcheck"]);
    let secs = t.elapsed().as_secs_f64();
    if code != 0 {
        return Err(format!("gradcheck exited with {code}"));
    }
    if secs > 60.0 {
        return Err(format!("gradcheck took {secs:.1}s"));
    }
    Ok(format!("all primitives and reduced model within 1e-4, {secs:.2}s"))
}

fn c2_auc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // half the instances draw from a few dyadic levels, forcing ties
        let levels = if case % 2 == 0 { rng.gen_range(1..6) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if levels > 0 {
                    rng.gen_range(0..levels) as f64 / 8.0
                } else {
                    rng.gen_range(-4.0..4.0)
                }
            })
            .collect();
        let s = ScoredSet::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let fast = auc(&s).map_err(|e| e.to_string())?;
        let slow = auc_bruteforce_oracle(&s).map_err(|e| e.to_string())?;
        worst = worst.max((fast - slow).abs());
        let flipped = ScoredSet::new(scores.clone(), labels.iter().map(|l| 1 - l).collect()).unwrap();
        let comp = fast + auc(&flipped).unwrap();
        if (comp - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: auc + complement = {comp}"));
        }
        let moved = ScoredSet::new(scores.iter().map(|x| x.exp() * 3.0 - 7.0).collect(), labels).unwrap();
        if auc(&moved).unwrap() != fast {
            return Err(format!("case {case}: monotone transform changed the AUC"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("max |auc - oracle| = {worst:e}"));
    }
    Ok(format!("1000 instances, max |auc - oracle| = {worst:e}; complement and monotone invariance hold"))
}

fn c3_pretext() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<SubjectRecord> = (0..823)
        .map(|i| {
            let m = Tensor::new(vec![4, 140], (0..560).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            SubjectRecord::new(format!("s{i:04}"), i % 2, m).unwrap()
        })
        .collect();
    let d = Dataset::new(records, vec!["a".into(), "b".into()], "acceptance").map_err(|e| e.to_string())?;
    let pre = make_pretext_dataset(&d, 20).map_err(|e| e.to_string())?;
    let fwd = pre.iter().filter(|s| s.direction == Direction::Forward).count();
    if pre.len() != 1646 || fwd != 823 {
        return Err(format!("{} pretext samples, {fwd} forward", pre.len()));
    }
    for r in d.records() {
        let twice = reverse_time(&reverse_time(r));
        let bits = |x: &SubjectRecord| x.matrix().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&twice) != bits(r) || twice.matrix().dims() != r.matrix().dims() {
            return Err(format!("reverse_time is not an involution on {}", r.subject_id));
        }
    }
    let w = slice_windows(&d.records()[0], 20).map_err(|e| e.to_string())?;
    if w.windows.len() != 7 || pre.iter().any(|s| s.sample.windows.len() != 7) {
        return Err(format!("{} windows at length 20", w.windows.len()));
    }
    Ok("823 subjects -> 1646 samples (823 per direction), involution exact, 7 windows".into())
}

struct Pretrained {
    checkpoint: PathBuf,
    auc: f64,
    secs: f64,
}

fn synth(out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut args = vec!["synth", "--out", p(out)];
    args.extend_from_slice(extra);
    run_ok(&args)
}

fn pretrain(data: &Path, out: &Path, seed: u64) -> Result<Pretrained, String> {
    let seed = seed.to_string();
    let t = Instant::now();
    run_ok(&[
        "pretrain", "--data", p(data), "--out", p(out), "--seed", &seed, "--epochs", "50", "--patience", "5",
    ])?;
    let secs = t.elapsed().as_secs_f64();
    let checkpoint = out.join("checkpoint.tdir");
    let ck = Checkpoint::load(&checkpoint).map_err(|e| e.to_string())?;
    let auc = ck.meta.extra.get("test_auc").and_then(|v| v.parse().ok()).ok_or("no test_auc in checkpoint")?;
    Ok(Pretrained { checkpoint, auc, secs })
}

fn c4_learnability(root: &Path) -> Result<(String, PathBuf), String> {
    let mut runs = Vec::new();
    for seed in [1u64, 2, 3] {
        let data = root.join(format!("c4-data-{seed}"));
        synth(&data, &["--subjects-per-class", "100", "--asymmetry", "1.5", "--seed", &seed.to_string()])?;
        runs.push(pretrain(&data, &root.join(format!("c4-pre-{seed}")), seed)?);
    }
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let med = median(&aucs).unwrap();
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let total: f64 = runs.iter().map(|r| r.secs).sum();
    let detail = format!(
        "held-out AUCs {aucs:.3?}, median {med:.4}; slowest run {slowest:.0}s, all three {total:.0}s"
    );
    if med < 0.9 {
        return Err(detail);
    }
    if Duration::from_secs_f64(slowest) > Duration::from_secs(15 * 60) {
        return Err(detail);
    }
    Ok((detail, runs.swap_remove(0).checkpoint))
}

fn c5_null(root: &Path) -> Check {
    let mut aucs = Vec::new();
    for seed in [11u64, 12, 13, 14, 15] {
        let data = root.join(format!("c5-data-{seed}"));
        synth(
            &data,
            &["--subjects-per-class", "100", "--asymmetry", "0", "--gaussian-only", "--seed", &seed.to_string()],
        )?;
        aucs.push(pretrain(&data, &root.join(format!("c5-pre-{seed}")), seed)?.auc);
    }
    let med = median(&aucs).unwrap();
    let detail = format!("held-out AUCs {aucs:.3?}, median {med:.4}");
    if (0.4..=0.6).contains(&med) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_c7_transfer(root: &Path, checkpoint: &Path) -> (Check, Check) {
    let out = root.join("c6-sweep");
    let res = (|| {
        let data = root.join("c6-down");
        // same generator dynamics and mixing, new subjects
        synth(&data, &["--subjects-per-class", "60", "--seed", "101"])?;
        let jobs = jobs();
        run_ok(&[
            "sweep", "--data", p(&data), "--init", p(checkpoint), "--out", p(&out), "--sizes", "15,25,42",
            "--repeats", "5", "--val-size", "18", "--test-size", "18", "--jobs", &jobs,
        ])?;
        Ok::<_, String>((read_csv(&out.join("comparison.csv"))?, read_csv(&out.join("runs_detail.csv"))?))
    })();
    let (cmp, detail) = match res {
        Ok(x) => x,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let delta = |size: &str| cmp.iter().find(|r| r["subjects_per_class"] == size).map(|r| num(r, "delta_median_auc"));
    let c6 = match (delta("15"), delta("25"), delta("42")) {
        (Some(d15), Some(d25), Some(dfull)) => {
            let text = format!("median PTR-NPT delta: 15 {d15:+.4}, 25 {d25:+.4}, full (42) {dfull:+.4}");
            if d15 >= 0.0 && d25 >= 0.0 && d15 >= dfull {
                Ok(text)
            } else {
                Err(text)
            }
        }
        _ => Err("comparison.csv lacks a size".into()),
    };
    let epochs = |arm: &str| {
        let v: Vec<f64> = detail.iter().filter(|r| r["arm"] == arm).map(|r| num(r, "epochs_to_best")).collect();
        median(&v)
    };
    let c7 = match (epochs("PTR"), epochs("NPT")) {
        (Some(ptr), Some(npt)) => {
            let text = format!("median epochs_to_best PTR {ptr} vs NPT {npt}");
            if ptr <= npt {
                Ok(text)
            } else {
                Err(text)
            }
        }
        _ => Err("runs_detail.csv lacks an arm".into()),
    };
    (c6, c7)
}

fn c8_determinism(root: &Path) -> Check {
    let r = |name: &str| root.join("c8").join(name);
    let mut compared = 0;
    let small = ["--subjects-per-class", "20", "--components", "8", "--timepoints", "60", "--seed", "5"];
    synth(&r("data-a"), &small)?;
    synth(&r("data-b"), &small)?;
    compared += same_artifacts(&r("data-a"), &r("data-b"))?;

    let data = r("data-a");
    let train = ["--epochs", "3", "--patience", "2", "--window-len", "10", "--seed", "9"];
    for out in ["pre-a", "pre-b"] {
        let out = r(out);
        let mut a = vec!["pretrain", "--data", p(&data), "--out", p(&out)];
        a.extend_from_slice(&train);
        run_ok(&a)?;
    }
    compared += same_artifacts(&r("pre-a"), &r("pre-b"))?;
    let ck_path = r("pre-a").join("checkpoint.tdir");
    let bytes = fs::read(&ck_path).map_err(|e| e.to_string())?;
    let reloaded = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    if reloaded.to_bytes().map_err(|e| e.to_string())? != bytes {
        return Err("checkpoint save -> load -> save changed bytes".into());
    }

    let ck = p(&ck_path).to_string();
    for (out, jobs) in [("ft-a", "1"), ("ft-b", "2")] {
        let out = r(out);
        let mut a = vec!["finetune", "--data", p(&data), "--out", p(&out), "--init", &ck, "--folds", "3"];
        a.extend_from_slice(&train);
        a.extend_from_slice(&["--jobs", jobs]);
        run_ok(&a)?;
    }
    compared += same_artifacts(&r("ft-a"), &r("ft-b"))?;

    for (out, jobs) in [("sw-a", "1"), ("sw-b", "2")] {
        let out = r(out);
        let mut a = vec![
            "sweep", "--data", p(&data), "--out", p(&out), "--init", &ck, "--sizes", "4,6", "--repeats", "2",
        ];
        a.extend_from_slice(&train);
        a.extend_from_slice(&["--jobs", jobs]);
        run_ok(&a)?;
    }
    compared += same_artifacts(&r("sw-a"), &r("sw-b"))?;
    let runs = r("sw-a").join("runs.csv");
    run_ok(&["report", "--runs", p(&runs), "--out", p(&r("rep-a"))])?;

    for dir in ["data-a", "pre-a", "ft-a", "sw-a", "rep-a"] {
        let replay = r(&format!("{dir}-replay"));
        run_ok(&["replay", p(&r(dir).join("manifest.json")), "--out", p(&replay)])?;
        compared += same_artifacts(&r(dir), &replay)?;
    }
    Ok(format!(
        "{compared} artifacts identical across reruns, --jobs 1 vs 2 and manifest replays; checkpoint round trip exact"
    ))
}

fn c9_splits() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let classes = rng.gen_range(2..=4);
        let counts: Vec<usize> = (0..classes).map(|_| rng.gen_range(3..30)).collect();
        let mut records = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let m = Tensor::new(vec![1, 2], vec![k as f32, i as f32]).unwrap();
                records.push(SubjectRecord::new(format!("k{k}-{i}"), k, m).unwrap());
            }
        }
        let names = (0..classes).map(|k| format!("c{k}")).collect();
        let d = Dataset::new(records, names, "split check").unwrap();
        let total = d.len();
        let spec = SplitSpec {
            val_size: rng.gen_range(0..=total / 3),
            test_size: rng.gen_range(0..=total / 3),
            seed: rng.gen(),
            stratified: case % 4 != 0,
        };
        let (a, b, c) = stratified_split(&d, &spec).map_err(|e| format!("case {case}: {e}"))?;
        if b.len() != spec.val_size || c.len() != spec.test_size {
            return Err(format!("case {case}: holdout sizes {} / {}", b.len(), c.len()));
        }
        let mut ids: Vec<&str> =
            [&a, &b, &c].iter().flat_map(|p| p.records().iter().map(|r| r.subject_id.as_str())).collect();
        ids.sort_unstable();
        let mut want: Vec<&str> = d.records().iter().map(|r| r.subject_id.as_str()).collect();
        want.sort_unstable();
        if ids != want {
            return Err(format!("case {case}: parts are not a partition"));
        }
    }

    let mut records = Vec::new();
    for (k, n) in [(0usize, 651usize), (1, 172)] {
        for i in 0..n {
            records.push(SubjectRecord::new(format!("k{k}-{i}"), k, Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap());
        }
    }
    let d = Dataset::new(records, vec!["major".into(), "minor".into()], "rotation").unwrap();
    let trials = 651usize.div_ceil(172);
    let mut seen = std::collections::BTreeSet::new();
    for t in 0..trials {
        let b = balance_classes(&d, 4, t).map_err(|e| e.to_string())?;
        if b.class_counts() != vec![172, 172] {
            return Err(format!("trial {t}: counts {:?}", b.class_counts()));
        }
        seen.extend(b.records().iter().filter(|r| r.label == 0).map(|r| r.subject_id.clone()));
    }
    if seen.len() != 651 {
        return Err(format!("{trials} trials cover {} of 651 majority subjects", seen.len()));
    }
    Ok(format!("100 random splits partition exactly; {trials} rotation trials cover all 651 majority subjects"))
}

fn c10_overfit() -> Check {
    let cfg = ModelConfig {
        components: 53,
        window_len: 20,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let samples: Vec<(Vec<Tensor>, usize)> = (0..4)
        .map(|i| {
            let w = (0..7)
                .map(|_| Tensor::new(vec![53, 20], (0..1060).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            (w, i % 2)
        })
        .collect();
    let view: Vec<Labeled<'_>> = samples.iter().map(|(w, l)| (w.as_slice(), *l)).collect();
    let tc = TrainConfig::default();
    let mut params = init_params(&cfg, 0).map_err(|e| e.to_string())?;
    let mut state = AdamState::default();
    let all: Vec<usize> = (0..4).collect();
    for step in 0..=500 {
        let (loss, grads) = batch_gradients(&params, &cfg, &view, &all).map_err(|e| e.to_string())?;
        if loss < 0.05 {
            return Ok(format!("loss {loss:.4} after {step} Adam steps (lr {})", tc.learning_rate));
        }
        if step == 500 {
            return Err(format!("loss {loss:.4} after 500 steps"));
        }
        adam_step(&mut params, &grads, &mut state, &tc).map_err(|e| e.to_string())?;
    }
    unreachable!()
}

fn main() {
    // cargo passes harness flags such as --nocapture; nothing to parse
    if std::env::var_os("RUST_LOG").is_none() {
        std::env::set_var("RUST_LOG", "warn");
    }
    let root = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut report = |name: &'static str, r: Check| {
        match &r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, r));
    };

    report("1 gradient correctness", c1_gradcheck());
    report("2 AUC oracle equivalence", c2_auc_oracle());
    report("3 pretext construction", c3_pretext());
    let ck = match c4_learnability(root.path()) {
        Ok((d, ck)) => {
            report("4 pretext learnability", Ok(d));
            Some(ck)
        }
        Err(e) => {
            report("4 pretext learnability", Err(e));
            None
        }
    };
    report("5 null control", c5_null(root.path()));
    match ck {
        Some(ck) => {
            let (c6, c7) = c6_c7_transfer(root.path(), &ck);
            report("6 transfer benefit", c6);
            report("7 faster convergence", c7);
        }
        None => {
            report("6 transfer benefit", Err("no pretext checkpoint".into()));
            report("7 faster convergence", Err("no pretext checkpoint".into()));
        }
    }
    report("8 determinism and persistence", c8_determinism(root.path()));
    report("9 split and balancing contracts", c9_splits());
    report("10 optimization sanity", c10_overfit());

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!(
        "\n{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
