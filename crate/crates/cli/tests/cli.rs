use std::fs;
use std::path::{Path, PathBuf};

use tdir_cli::commands::reduced_model;
use tdir_cli::main_with;
use tdir_core::data::load_dataset;
use tdir_core::training::Checkpoint;
use tempfile::TempDir;

fn tdir(args: &[&str]) -> i32 {
    let mut full = vec!["tdir"];
    full.extend_from_slice(args);
    main_with(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    arch: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let arch = dir.path().join("arch.txt");
        fs::write(&arch, reduced_model().to_canonical_text()).unwrap();
        assert_eq!(
            tdir(&[
                "synth", "--out", s(&data), "--components", "5", "--timepoints", "36", "--subjects-per-class", "12",
                "--seed", "3",
            ]),
            0
        );
        Fixture { dir, data, arch }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Shared training flags: reduced architecture, 12-step windows.
    fn train<'a>(&'a self, epochs: &'a str) -> Vec<&'a str> {
        vec!["--arch", s(&self.arch), "--window-len", "12", "--epochs", epochs, "--patience", "1", "--batch", "8"]
    }

    fn pretrain(&self, out: &Path) {
        let mut a = vec!["pretrain", "--data", s(&self.data), "--out", s(out)];
        a.extend(self.train("3"));
        assert_eq!(tdir(&a), 0);
    }
}

#[test]
fn synth_writes_the_requested_shape_deterministically() {
    let f = Fixture::new();
    let d = load_dataset(&f.data).unwrap();
    assert_eq!(d.len(), 24);
    assert_eq!(d.class_counts(), vec![12, 12]);
    assert_eq!(d.records()[0].components(), 5);
    assert_eq!(d.records()[0].timepoints(), 36);
    assert!(f.data.join("manifest.json").exists());

    let again = f.path("again");
    tdir(&["synth", "--out", s(&again), "--components", "5", "--timepoints", "36", "--subjects-per-class", "12", "--seed", "3"]);
    for entry in fs::read_dir(f.data.join("matrices")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(fs::read(&p).unwrap(), fs::read(again.join("matrices").join(p.file_name().unwrap())).unwrap());
    }
}

#[test]
fn exit_codes() {
    assert_eq!(tdir(&["--help"]), 0);
    assert_eq!(tdir(&["synth"]), 1, "missing --out");
    assert_eq!(tdir(&["synth", "--out", "/tmp/x", "--ar", "0.5"]), 1, "malformed --ar");
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    assert_eq!(tdir(&["pretrain", "--data", s(&missing), "--out", s(&t.path().join("o"))]), 1);
    assert_eq!(tdir(&["gradcheck", "--points", "1"]), 0);
    assert_eq!(tdir(&["gradcheck", "--points", "1", "--corrupt-op", "sigmoid"]), 2);
    assert_eq!(tdir(&["gradcheck", "--corrupt-op", "no-such-op"]), 1);
}

#[test]
fn pretrain_history_matches_epochs_and_finetune_uses_checkpoint() {
    let f = Fixture::new();
    let pre = f.path("pre");
    f.pretrain(&pre);
    let ck = Checkpoint::load(&pre.join("checkpoint.tdir")).unwrap();
    assert_eq!(lines(&pre.join("history.csv")).len() - 1, ck.meta.epochs_run);
    assert!(ck.meta.extra.contains_key("test_auc"));

    let ft = f.path("ft");
    let ckp = pre.join("checkpoint.tdir");
    let mut a = vec![
        "finetune", "--data", s(&f.data), "--out", s(&ft), "--init", s(&ckp), "--subjects-per-class", "4",
        "--folds", "2",
    ];
    a.extend(f.train("2"));
    assert_eq!(tdir(&a), 0);
    assert_eq!(lines(&ft.join("folds.csv")).len(), 3);
    assert!(Checkpoint::load(&ft.join("checkpoint.tdir")).is_ok());

    // window length disagreeing with the checkpoint
    let mut bad = vec!["finetune", "--data", s(&f.data), "--out", s(&ft), "--init", s(&ckp)];
    bad.extend(["--arch", s(&f.arch), "--window-len", "9"]);
    assert_eq!(tdir(&bad), 1);
}

#[test]
fn finetune_rotation_balancing_runs() {
    let f = Fixture::new();
    let ft = f.path("ft");
    let mut a = vec![
        "finetune", "--data", s(&f.data), "--out", s(&ft), "--balance", "rotate", "--trial", "2", "--val-size",
        "4", "--test-size", "4",
    ];
    a.extend(f.train("1"));
    assert_eq!(tdir(&a), 0);
}

#[test]
fn sweep_grid_and_report_consistency() {
    let f = Fixture::new();
    let pre = f.path("pre");
    f.pretrain(&pre);
    let sw = f.path("sweep");
    let ck = pre.join("checkpoint.tdir");
    let mut a = vec![
        "sweep", "--data", s(&f.data), "--out", s(&sw), "--init", s(&ck), "--sizes",
        "2,3,5", "--repeats", "5", "--val-size", "4", "--test-size", "4", "--tag", "toy",
    ];
    a.extend(f.train("1"));
    assert_eq!(tdir(&a), 0);
    assert_eq!(lines(&sw.join("runs.csv")).len() - 1, 30);
    assert_eq!(lines(&sw.join("summary.csv")).len() - 1, 6);
    let cmp = lines(&sw.join("comparison.csv"));
    assert!(cmp[0].contains("delta"));
    assert_eq!(cmp.len() - 1, 3);

    let rep = f.path("report");
    assert_eq!(tdir(&["report", "--runs", s(&sw.join("runs.csv")), "--out", s(&rep)]), 0);
    let svg = fs::read_to_string(rep.join("auc_toy.svg")).unwrap();
    assert_eq!(svg.matches(r#"<g class="box""#).count(), 6);

    // medians in the plot are the summary's medians, as written
    let mut r = csv::Reader::from_path(rep.join("summary.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|x| x == name).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let mark = format!(
            r#"data-size="{}" data-arm="{}""#,
            &rec[col("subjects_per_class")],
            &rec[col("arm")]
        );
        let at = svg.find(&mark).unwrap_or_else(|| panic!("no box for {mark}"));
        let tail = &svg[at..];
        let med = tail.split("data-median=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(med, &rec[col("median_auc")]);
    }
}

#[test]
fn report_rejects_mixed_tags_unless_grouped_and_draws_degenerate_boxes() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a.csv");
    let b = t.path().join("b.csv");
    fs::write(&a, "dataset,arm,subjects_per_class,repeat,test_auc\nx,PTR,15,0,0.8\nx,NPT,15,0,0.7\n").unwrap();
    fs::write(&b, "dataset,arm,subjects_per_class,repeat,test_auc\ny,PTR,15,0,0.6\ny,NPT,15,0,0.65\n").unwrap();
    let out = t.path().join("rep");
    assert_eq!(tdir(&["report", "--runs", s(&a), s(&b), "--out", s(&out)]), 1);
    assert_eq!(tdir(&["report", "--runs", s(&a), s(&b), "--out", s(&out), "--group-by", "dataset"]), 0);
    let svg = fs::read_to_string(out.join("auc_x.svg")).unwrap();
    assert!(svg.contains(r#"data-min="0.8" data-q1="0.8" data-median="0.8" data-q3="0.8" data-max="0.8""#));
    assert!(out.join("auc_y.svg").exists());

    fs::write(&b, "dataset,arm\nbroken").unwrap();
    assert_eq!(tdir(&["report", "--runs", s(&b), "--out", s(&out)]), 1);
}

#[test]
fn replay_reproduces_outputs() {
    let f = Fixture::new();
    let pre = f.path("pre");
    f.pretrain(&pre);
    let again = f.path("replayed");
    assert_eq!(tdir(&["replay", s(&pre.join("manifest.json")), "--out", s(&again)]), 0);
    for name in ["checkpoint.tdir", "history.csv"] {
        assert_eq!(fs::read(pre.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(pre.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["args"]["train"]["window_len"], 12);

    let junk = f.path("junk.json");
    fs::write(&junk, "{}").unwrap();
    assert_eq!(tdir(&["replay", s(&junk)]), 1);
}
