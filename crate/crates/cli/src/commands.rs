use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use tdir_core::data::{
    balance_classes, load_dataset, make_pretext_dataset, stratified_split, subsample_per_class, synth_generate,
    write_dataset, zscore_normalize, Dataset, Direction, MixingSpec, SplitSpec, SynthConfig,
};
use tdir_core::evaluation::{
    comparison_to_csv, comparisons, read_runs_csv, reports_from_rows, runs_to_csv, summary_to_csv, Arm, EvalReport,
};
use tdir_core::io_util::write_atomic;
use tdir_core::model::model_gradient_check;
use tdir_core::seed::derive;
use tdir_core::tensor::gradcheck::{primitive_suite, FdOptions};
use tdir_core::training::{
    evaluate_auc, kfold_on_holdouts, pretrain, sweep_subjects_per_class, Checkpoint, EpochRecord, FoldResult,
    InitFrom, Labeled, TrainConfig,
};
use tdir_core::{ModelConfig, OpKind};

use crate::args::*;
use crate::manifest::RunManifest;
use crate::plot::box_plot_svg;
use crate::Invalid;

pub const CHECKPOINT_FILE: &str = "checkpoint.tdir";
pub const HISTORY_FILE: &str = "history.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const RUNS_DETAIL_FILE: &str = "runs_detail.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Outcome of a command that ran to completion but found a failure to
/// report, e.g. a gradient check above tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn run(command: &Command) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new(command);
    let out = match command {
        Command::Synth(a) => cmd_synth(a, &mut manifest)?,
        Command::Pretrain(a) => cmd_pretrain(a, &mut manifest)?,
        Command::Finetune(a) => cmd_finetune(a, &mut manifest)?,
        Command::Sweep(a) => cmd_sweep(a, &mut manifest)?,
        Command::Report(a) => cmd_report(a, &mut manifest)?,
        Command::Gradcheck(a) => {
            let (out, result) = cmd_gradcheck(a, &mut manifest)?;
            if let Some(dir) = out {
                manifest.duration_secs = started.elapsed().as_secs_f64();
                manifest.write(&dir)?;
            }
            return result;
        }
        Command::Replay(a) => return cmd_replay(a),
    };
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&out)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn put(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    write_atomic(&dir.join(name), bytes)?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn parse_ar(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Invalid(format!("--ar entry {pair:?} is not a1:a2")))?;
            let p = |s: &str| s.trim().parse::<f64>().map_err(|_| Invalid(format!("--ar value {s:?}")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

pub fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    Ok(SynthConfig {
        components: a.components,
        timepoints: a.timepoints,
        subjects_per_class: a.subjects_per_class,
        n_classes: a.classes,
        ar_coefficients: parse_ar(&a.ar)?,
        asymmetry_strength: a.asymmetry,
        jump_rate: a.jump_rate,
        noise_scale: a.noise,
        gaussian_only: a.gaussian_only,
        mixing: MixingSpec {
            density: a.mixing_density,
            weight: a.mixing_weight,
            driver_weight: a.driver_weight,
            seed: a.mixing_seed,
        },
        seed: a.seed,
    })
}

fn cmd_synth(a: &SynthArgs, manifest: &mut RunManifest) -> Result<PathBuf> {
    let cfg = synth_config(a)?;
    let d = synth_generate(&cfg)?;
    create_out(&a.out)?;
    write_dataset(&d, &a.out)?;
    manifest.seeds.insert("seed".into(), a.seed);
    manifest.seeds.insert("mixing_seed".into(), a.mixing_seed);
    manifest.outputs.extend(
        [tdir_core::data::MANIFEST_FILE, tdir_core::data::CLASSES_FILE, "matrices/"].map(String::from),
    );
    println!(
        "wrote {} subjects, {} classes, {}x{} each, to {}",
        d.len(),
        d.class_names().len(),
        cfg.components,
        cfg.timepoints,
        a.out.display()
    );
    Ok(a.out.clone())
}

fn load(path: &Path, normalize: Normalize, manifest: &mut RunManifest) -> Result<Dataset> {
    let d = load_dataset(path)?;
    manifest.inputs.push(path.to_path_buf());
    log::info!("loaded {} subjects, class counts {:?}", d.len(), d.class_counts());
    Ok(match normalize {
        Normalize::Zscore => d.map_records(zscore_normalize),
        Normalize::None => d,
    })
}

fn model_config(t: &TrainFlags, components: usize, manifest: &mut RunManifest) -> Result<ModelConfig> {
    let base = match &t.arch {
        Some(p) => {
            manifest.inputs.push(p.clone());
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelConfig::from_canonical_text(&text).map_err(|e| Invalid(format!("--arch {}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    let cfg = ModelConfig {
        components,
        window_len: t.window_len,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(t: &TrainFlags, init_from: InitFrom, reinit_head: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch,
        max_epochs: t.epochs,
        patience: t.patience,
        seed: t.seed,
        init_from,
        reinit_head,
        ..TrainConfig::default()
    }
}

fn split_spec(s: &SplitFlags, seed: u64, n: usize, manifest: &mut RunManifest) -> SplitSpec {
    let default = ((n as f64) * 0.15).round() as usize;
    let spec = SplitSpec {
        val_size: s.val_size.unwrap_or(default),
        test_size: s.test_size.unwrap_or(default),
        seed: s.split_seed.unwrap_or(seed),
        stratified: true,
    };
    manifest.seeds.insert("split_seed".into(), spec.seed);
    spec
}

fn history_csv(rows: &[(usize, EpochRecord)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "epoch", "train_loss", "val_auc"])?;
    for (fold, r) in rows {
        w.write_record([fold.to_string(), r.epoch.to_string(), r.train_loss.to_string(), r.val_auc.to_string()])?;
    }
    Ok(w.into_inner()?)
}

fn cmd_pretrain(a: &PretrainArgs, manifest: &mut RunManifest) -> Result<PathBuf> {
    let d = load(&a.data, a.train.normalize, manifest)?;
    let components = d.components().ok_or_else(|| Invalid("dataset is empty".into()))?;
    let mcfg = model_config(&a.train, components, manifest)?;
    let spec = split_spec(&a.split, a.train.seed, d.len(), manifest);
    manifest.seeds.insert("seed".into(), a.train.seed);
    // Split subjects before building pretext pairs, so a subject's forward
    // and reversed copies always land in the same part.
    let (train, val, test) = stratified_split(&d, &spec)?;
    let all = make_pretext_dataset(&d, mcfg.window_len)?;
    let fwd = all.iter().filter(|s| s.direction == Direction::Forward).count();
    log::info!(
        "{} pretext samples ({fwd} forward, {} reversed), {} windows of {} per sample",
        all.len(),
        all.len() - fwd,
        all.first().map_or(0, |s| s.sample.windows.len()),
        mcfg.window_len
    );
    drop(all);
    let (ptrain, pval) = (make_pretext_dataset(&train, mcfg.window_len)?, make_pretext_dataset(&val, mcfg.window_len)?);
    log::info!(
        "pretext split: {} train / {} val / {} test samples",
        ptrain.len(),
        pval.len(),
        2 * test.len()
    );
    let tcfg = train_config(&a.train, InitFrom::Scratch, false);
    let (mut ck, outcome) = pretrain(&ptrain, &pval, &tcfg, &mcfg)?;
    if !test.is_empty() {
        let ptest = make_pretext_dataset(&test, mcfg.window_len)?;
        let view: Vec<Labeled<'_>> = ptest
            .iter()
            .map(|s| (s.sample.windows.as_slice(), s.direction.label()))
            .collect();
        let auc = evaluate_auc(&ck.params, &mcfg, &view)?;
        ck.meta.extra.insert("test_auc".into(), auc.to_string());
        println!("held-out pretext AUC {auc:.4}");
    }
    println!(
        "best validation AUC {:.4} at epoch {} of {}",
        outcome.best_val_auc,
        outcome.best_epoch,
        outcome.epochs_run()
    );
    create_out(&a.out)?;
    put(&a.out, CHECKPOINT_FILE, &ck.to_bytes()?, manifest)?;
    let rows: Vec<_> = outcome.history.iter().map(|r| (0, *r)).collect();
    put(&a.out, HISTORY_FILE, &history_csv(&rows)?, manifest)?;
    Ok(a.out.clone())
}

fn folds_csv(results: &[FoldResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "best_val_auc", "test_auc", "epochs_to_best", "epochs_run"])?;
    for r in results {
        w.write_record([
            r.fold.to_string(),
            r.best_val_auc.to_string(),
            r.test_auc.to_string(),
            r.epochs_to_best.to_string(),
            r.epochs_run.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn load_checkpoint(path: &Path, mcfg: &ModelConfig, manifest: &mut RunManifest) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_config(mcfg)?;
    manifest.inputs.push(path.to_path_buf());
    Ok(ck)
}

fn cmd_finetune(a: &FinetuneArgs, manifest: &mut RunManifest) -> Result<PathBuf> {
    let mut d = load(&a.data, a.train.normalize, manifest)?;
    let components = d.components().ok_or_else(|| Invalid("dataset is empty".into()))?;
    let mcfg = model_config(&a.train, components, manifest)?;
    manifest.seeds.insert("seed".into(), a.train.seed);
    let split_seed = a.split.split_seed.unwrap_or(a.train.seed);
    if a.balance == Balance::Rotate {
        d = balance_classes(&d, split_seed, a.trial)?;
        log::info!("balanced (trial {}): class counts {:?}", a.trial, d.class_counts());
    }
    let spec = split_spec(&a.split, a.train.seed, d.len(), manifest);
    let (mut pool, val, test) = stratified_split(&d, &spec)?;
    if let Some(n) = a.subjects_per_class {
        pool = subsample_per_class(&pool, n, derive(spec.seed, &[0x53554253]))?;
    }
    log::info!("training pool {} / val {} / test {}", pool.len(), val.len(), test.len());
    let ck = match a.init.as_str() {
        "scratch" => None,
        path => Some(load_checkpoint(Path::new(path), &mcfg, manifest)?),
    };
    let init_from = match &ck {
        None => InitFrom::Scratch,
        Some(_) => InitFrom::Checkpoint(PathBuf::from(&a.init)),
    };
    let tcfg = train_config(&a.train, init_from, !a.keep_head);
    let runs = kfold_on_holdouts(&pool, &val, &test, a.folds, spec.seed, ck.as_ref(), &tcfg, &mcfg, a.train.jobs)?;
    for (r, _) in &runs {
        println!(
            "fold {}: best validation AUC {:.4} at epoch {}, test AUC {:.4}",
            r.fold, r.best_val_auc, r.epochs_to_best, r.test_auc
        );
    }
    // best validation AUC wins; ties go to the lowest fold
    let best = runs
        .iter()
        .fold(None::<&(FoldResult, Checkpoint)>, |acc, r| match acc {
            Some(b) if b.0.best_val_auc >= r.0.best_val_auc => Some(b),
            _ => Some(r),
        })
        .expect("at least one fold");
    create_out(&a.out)?;
    let results: Vec<FoldResult> = runs.iter().map(|r| r.0.clone()).collect();
    put(&a.out, FOLDS_FILE, &folds_csv(&results)?, manifest)?;
    let rows: Vec<_> = results
        .iter()
        .flat_map(|r| r.history.iter().map(move |h| (r.fold, *h)))
        .collect();
    put(&a.out, HISTORY_FILE, &history_csv(&rows)?, manifest)?;
    put(&a.out, CHECKPOINT_FILE, &best.1.to_bytes()?, manifest)?;
    Ok(a.out.clone())
}

fn detail_csv(tag: &str, runs: &[tdir_core::training::SweepRun]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "arm",
        "subjects_per_class",
        "repeat",
        "test_auc",
        "best_val_auc",
        "epochs_to_best",
        "epochs_run",
    ])?;
    for r in runs {
        w.write_record([
            tag.to_string(),
            r.arm.to_string(),
            r.subjects_per_class.to_string(),
            r.repeat.to_string(),
            r.result.test_auc.to_string(),
            r.result.best_val_auc.to_string(),
            r.result.epochs_to_best.to_string(),
            r.result.epochs_run.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn dir_tag(path: &Path) -> String {
    let p = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    p.canonicalize()
        .ok()
        .and_then(|c| c.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into())
}

fn cmd_sweep(a: &SweepArgs, manifest: &mut RunManifest) -> Result<PathBuf> {
    let d = load(&a.data, a.train.normalize, manifest)?;
    let components = d.components().ok_or_else(|| Invalid("dataset is empty".into()))?;
    let mcfg = model_config(&a.train, components, manifest)?;
    manifest.seeds.insert("seed".into(), a.train.seed);
    let spec = split_spec(&a.split, a.train.seed, d.len(), manifest);
    let ck = load_checkpoint(&a.init, &mcfg, manifest)?;
    let tcfg = train_config(&a.train, InitFrom::Checkpoint(a.init.clone()), true);
    let tag = a.tag.clone().unwrap_or_else(|| dir_tag(&a.data));
    let arms = [(Arm::Ptr, Some(&ck)), (Arm::Npt, None)];
    let res = sweep_subjects_per_class(&d, &spec, &a.sizes, &arms, a.repeats, &tcfg, &mcfg, a.train.jobs)?;
    let rows = res.rows(&tag);
    let reports = reports_from_rows(&rows)?;
    let cmp = comparisons(&reports)?;
    for c in &cmp {
        println!(
            "{} per class: PTR median {:.4}, NPT median {:.4}, delta {:+.4}",
            c.subjects_per_class, c.ptr_median, c.npt_median, c.median_delta
        );
    }
    create_out(&a.out)?;
    put(&a.out, RUNS_FILE, &runs_to_csv(&rows)?, manifest)?;
    put(&a.out, RUNS_DETAIL_FILE, &detail_csv(&tag, &res.runs)?, manifest)?;
    put(&a.out, SUMMARY_FILE, &summary_to_csv(&reports)?, manifest)?;
    put(&a.out, COMPARISON_FILE, &comparison_to_csv(&cmp)?, manifest)?;
    Ok(a.out.clone())
}

/// File name for a dataset tag's plot.
pub fn plot_file(tag: &str) -> String {
    let safe: String = tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("auc_{safe}.svg")
}

fn cmd_report(a: &ReportArgs, manifest: &mut RunManifest) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for p in &a.runs {
        rows.extend(read_runs_csv(p)?);
        manifest.inputs.push(p.clone());
    }
    if rows.is_empty() {
        bail!(Invalid("no runs in the input files".into()));
    }
    let reports = reports_from_rows(&rows)?;
    let mut tags: Vec<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
    tags.dedup();
    if tags.len() > 1 && a.group_by.is_none() {
        bail!(Invalid(format!(
            "runs mix dataset tags {tags:?}; pass --group-by dataset for one plot per tag"
        )));
    }
    let cmp = comparisons(&reports)?;
    create_out(&a.out)?;
    put(&a.out, SUMMARY_FILE, &summary_to_csv(&reports)?, manifest)?;
    put(&a.out, COMPARISON_FILE, &comparison_to_csv(&cmp)?, manifest)?;
    let mut by_tag: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
    for r in &reports {
        by_tag.entry(&r.dataset).or_default().push(r.clone());
    }
    for (tag, rs) in by_tag {
        put(&a.out, &plot_file(tag), box_plot_svg(tag, &rs).as_bytes(), manifest)?;
    }
    println!("{} runs in {} cells", rows.len(), reports.len());
    Ok(a.out.clone())
}

/// Dimensions small enough for a full finite-difference sweep in seconds.
pub fn reduced_model() -> ModelConfig {
    ModelConfig {
        components: 5,
        window_len: 12,
        conv_channels: [4, 6, 5],
        conv_kernels: [4, 4, 3],
        encoder_dim: 8,
        lstm_hidden: 6,
        attention_dim: 5,
        head_hidden: 7,
        ..ModelConfig::default()
    }
}

type GradcheckOutcome = (Option<PathBuf>, Result<()>);

fn cmd_gradcheck(a: &GradcheckArgs, manifest: &mut RunManifest) -> Result<GradcheckOutcome> {
    let corrupt = match &a.corrupt_op {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Invalid(format!("unknown op {name:?}")))?),
    };
    manifest.seeds.insert("seed".into(), a.seed);
    let mut results = primitive_suite(a.points, a.seed, corrupt)?
        .into_iter()
        .map(|o| (o.name, o.max_rel_error))
        .collect::<Vec<_>>();
    let opts = FdOptions {
        samples_per_tensor: None,
        seed: a.seed,
        corrupt,
        ..FdOptions::default()
    };
    results.push(("model".into(), model_gradient_check(&reduced_model(), 3, &opts)?));

    let mut failed = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["op", "max_rel_error", "status"])?;
    for (name, err) in &results {
        let ok = *err <= a.tolerance;
        if !ok {
            failed.push(name.clone());
        }
        let status = if ok { "PASS" } else { "FAIL" };
        println!("{name:<20} {err:>12.3e}  {status}");
        w.write_record([name.clone(), err.to_string(), status.to_string()])?;
    }
    let out = match &a.out {
        Some(dir) => {
            create_out(dir)?;
            put(dir, GRADCHECK_FILE, &w.into_inner()?, manifest)?;
            Some(dir.clone())
        }
        None => None,
    };
    let result = if failed.is_empty() {
        println!("all {} checks within {:e}", results.len(), a.tolerance);
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for: {}", failed.join(", "))).into())
    };
    Ok((out, result))
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let mut cmd = m.args;
    if let Some(out) = &a.out {
        match &mut cmd {
            Command::Synth(x) => x.out = out.clone(),
            Command::Pretrain(x) => x.out = out.clone(),
            Command::Finetune(x) => x.out = out.clone(),
            Command::Sweep(x) => x.out = out.clone(),
            Command::Report(x) => x.out = out.clone(),
            Command::Gradcheck(x) => x.out = Some(out.clone()),
            Command::Replay(_) => bail!(Invalid("a manifest cannot record a replay".into())),
        }
    }
    if let Command::Replay(_) = cmd {
        bail!(Invalid("a manifest cannot record a replay".into()));
    }
    log::info!("replaying {}", cmd.name());
    run(&cmd)
}
