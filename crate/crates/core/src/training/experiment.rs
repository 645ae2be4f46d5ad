use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{finetune_windowed, window_dataset, Checkpoint, FoldResult, TrainConfig};
use crate::data::{stratified_split, subsample_per_class, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{Arm, RunRow};
use crate::model::ModelConfig;
use crate::seed;

const SEED_FOLDS: u64 = 0x464F4C44;
const SEED_SUBSAMPLE: u64 = 0x53554253;

/// Runs `f` over `items` on at most `jobs` threads, results in input order.
fn run_parallel<I: Sync, R: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
        .install(|| items.par_iter().map(&f).collect())
}

/// Splits `0..dataset.len()` into `k` disjoint folds: each class is
/// shuffled, then dealt round-robin, continuing the deal across classes so
/// fold sizes differ by at most one.
pub fn kfold_partition(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > dataset.len() {
        return Err(Error::Infeasible(format!(
            "{k} folds over a pool of {} records",
            dataset.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in 0..dataset.class_names().len() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.records()[i].label == class)
            .collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[SEED_FOLDS, class as u64])));
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Fixed validation and test holdouts from `spec`; the remaining pool is cut
/// into `k` folds and run `f` trains on all folds but `f`. Every fold is
/// scored on the same test holdout.
pub fn kfold_run(
    dataset: &Dataset,
    k: usize,
    spec: &SplitSpec,
    init: Option<&Checkpoint>,
    config: &TrainConfig,
    model_config: &ModelConfig,
    jobs: usize,
) -> Result<Vec<(FoldResult, Checkpoint)>> {
    if k < 2 {
        return Err(Error::Infeasible(format!("k-fold needs k >= 2, got {k}")));
    }
    let (pool, val, test) = stratified_split(dataset, spec)?;
    kfold_on_holdouts(&pool, &val, &test, k, spec.seed, init, config, model_config, jobs)
}

/// [`kfold_run`] on splits made by the caller. `k = 1` trains once on the
/// whole pool. Fold `f` trains with seed `derive(config.seed, [f])`.
#[allow(clippy::too_many_arguments)]
pub fn kfold_on_holdouts(
    pool: &Dataset,
    val: &Dataset,
    test: &Dataset,
    k: usize,
    partition_seed: u64,
    init: Option<&Checkpoint>,
    config: &TrainConfig,
    model_config: &ModelConfig,
    jobs: usize,
) -> Result<Vec<(FoldResult, Checkpoint)>> {
    let folds = match k {
        0 => return Err(Error::Infeasible("zero folds".into())),
        1 => vec![Vec::new()],
        _ => kfold_partition(pool, k, partition_seed)?,
    };
    let w = model_config.window_len;
    let pool_w = window_dataset(pool, w)?;
    let val_w = window_dataset(val, w)?;
    let test_w = window_dataset(test, w)?;
    let ids: Vec<usize> = (0..k).collect();
    run_parallel(&ids, jobs, |&f| {
        let held: BTreeSet<usize> = folds[f].iter().copied().collect();
        let train: Vec<_> = (0..pool_w.len())
            .filter(|i| !held.contains(i))
            .map(|i| pool_w[i].clone())
            .collect();
        let cfg = TrainConfig {
            seed: seed::derive(config.seed, &[f as u64]),
            ..config.clone()
        };
        log::info!("fold {}/{k}: {} training subjects", f + 1, train.len());
        finetune_windowed(init, &train, &val_w, &test_w, &cfg, model_config, f)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub subjects_per_class: usize,
    pub arm: Arm,
    pub repeat: usize,
    pub result: FoldResult,
}

/// Runs in (size, arm, repeat) grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
}

impl SweepResult {
    pub fn rows(&self, dataset: &str) -> Vec<RunRow> {
        self.runs
            .iter()
            .map(|r| RunRow {
                dataset: dataset.to_string(),
                arm: r.arm,
                subjects_per_class: r.subjects_per_class,
                repeat: r.repeat,
                test_auc: r.result.test_auc,
            })
            .collect()
    }
}

/// Subjects-per-class sweep over fixed holdouts. For repeat `r` the training
/// subsample is drawn with one seed at every size, so larger sizes contain
/// the smaller selections, and both arms see the same subjects. Each run
/// trains with seed `derive(config.seed, [size, arm, r])`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_subjects_per_class(
    dataset: &Dataset,
    spec: &SplitSpec,
    sizes: &[usize],
    arms: &[(Arm, Option<&Checkpoint>)],
    repeats: usize,
    config: &TrainConfig,
    model_config: &ModelConfig,
    jobs: usize,
) -> Result<SweepResult> {
    if sizes.is_empty() || arms.is_empty() || repeats == 0 {
        return Err(Error::InvalidConfig("sweep needs sizes, arms and at least one repeat".into()));
    }
    for &(arm, ck) in arms {
        match (arm, ck) {
            (Arm::Ptr, None) => return Err(Error::InvalidConfig("PTR arm needs a checkpoint".into())),
            (_, Some(c)) => c.ensure_config(model_config)?,
            _ => {}
        }
    }
    let (pool, val, test) = stratified_split(dataset, spec)?;
    let smallest = pool.class_counts().into_iter().min().unwrap_or(0);
    if let Some(&too_big) = sizes.iter().find(|&&s| s > smallest) {
        return Err(Error::Infeasible(format!(
            "{too_big} subjects per class requested, the training pool has {smallest} in its smallest class"
        )));
    }
    let w = model_config.window_len;
    let val_w = window_dataset(&val, w)?;
    let test_w = window_dataset(&test, w)?;
    let mut grid = Vec::new();
    for &size in sizes {
        for (a, &(arm, ck)) in arms.iter().enumerate() {
            for r in 0..repeats {
                grid.push((size, a, arm, ck, r));
            }
        }
    }
    let runs = run_parallel(&grid, jobs, |&(size, a, arm, ck, r)| {
        let sub = subsample_per_class(&pool, size, seed::derive(spec.seed, &[SEED_SUBSAMPLE, r as u64]))?;
        let cfg = TrainConfig {
            seed: seed::derive(config.seed, &[size as u64, a as u64, r as u64]),
            ..config.clone()
        };
        let (result, _) = finetune_windowed(ck, &window_dataset(&sub, w)?, &val_w, &test_w, &cfg, model_config, r)?;
        log::info!(
            "{arm} size {size} repeat {r}: test AUC {:.4}, best epoch {}",
            result.test_auc,
            result.epochs_to_best
        );
        Ok(SweepRun {
            subjects_per_class: size,
            arm,
            repeat: r,
            result,
        })
    })?;
    Ok(SweepResult { runs })
}
