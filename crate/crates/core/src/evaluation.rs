//! ROC/AUC, per-cell summaries and PTR-vs-NPT comparison rows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Positive-class scores and binary labels, one per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(
                "scored set",
                format!("{} scores for {} labels", scores.len(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidConfig(format!("label {l} is not binary")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidConfig("NaN score".into()));
        }
        Ok(ScoredSet {
            scores,
            labels: labels.into_iter().map(|l| l == 1).collect(),
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.labels.iter().map(|&l| l as u8)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_sizes(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::SingleClass {
                positives: pos,
                negatives: neg,
            });
        }
        Ok((pos, neg))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// One point per distinct score (predict positive when `score >= threshold`,
/// thresholds descending), framed by sentinels `(0,0)` at `+∞` and `(1,1)`
/// at `−∞`.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<RocPoint>> {
    let (pos, neg) = s.class_sizes()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == thr {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: thr,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    out.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        tpr: 1.0,
        fpr: 1.0,
    });
    Ok(out)
}

/// Trapezoidal area under a curve from [`roc_curve`].
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mann–Whitney AUC: `(Σ ranks of positives − P(P+1)/2) / (P·N)`, ties
/// sharing their average rank.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.class_sizes()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let hits = order[i..j].iter().filter(|&&k| s.labels[k]).count();
        rank_sum += avg * hits as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Mean over all positive/negative pairs of 1 (positive higher), ½ (tie) or
/// 0. Quadratic; a reference for [`auc`].
pub fn auc_bruteforce_oracle(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.class_sizes()?;
    let mut wins = 0.0f64;
    for (i, &li) in s.labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in s.labels.iter().enumerate() {
            if lj {
                continue;
            }
            wins += match s.scores[i].partial_cmp(&s.scores[j]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(wins / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Initialized from a pretext checkpoint.
    Ptr,
    /// Trained from scratch.
    Npt,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Ptr => "PTR",
            Arm::Npt => "NPT",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PTR" | "ptr" => Ok(Arm::Ptr),
            "NPT" | "npt" => Ok(Arm::Npt),
            _ => Err(Error::InvalidConfig(format!("unknown arm {s:?} (PTR or NPT)"))),
        }
    }
}

/// One fine-tuning run's outcome, as stored in the per-run CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub dataset: String,
    pub arm: Arm,
    pub subjects_per_class: usize,
    pub repeat: usize,
    pub test_auc: f64,
}

/// The runs of one (dataset, arm, subjects-per-class) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub arm: Arm,
    pub subjects_per_class: usize,
    pub repeats: Vec<usize>,
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median with the midpoint convention for even counts.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

/// `repeats[i]` identifies the run that produced `aucs[i]`.
pub fn summarize(
    aucs: &[f64],
    repeats: &[usize],
    dataset: &str,
    arm: Arm,
    subjects_per_class: usize,
) -> Result<EvalReport> {
    if aucs.is_empty() {
        return Err(Error::Infeasible("cannot summarize an empty AUC list".into()));
    }
    if repeats.len() != aucs.len() {
        return Err(Error::shape(
            "summarize",
            format!("{} run ids for {} AUCs", repeats.len(), aucs.len()),
        ));
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        arm,
        subjects_per_class,
        repeats: repeats.to_vec(),
        aucs: aucs.to_vec(),
        mean: mean_of(aucs),
        median: median(aucs).expect("nonempty"),
    })
}

/// Groups per-run rows into one report per (dataset, size, arm), in that
/// sort order.
pub fn reports_from_rows(rows: &[RunRow]) -> Result<Vec<EvalReport>> {
    let mut cells: BTreeMap<(String, usize, Arm), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.dataset.clone(), r.subjects_per_class, r.arm))
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|((ds, size, arm), mut rs)| {
            rs.sort_by_key(|r| r.repeat);
            let aucs: Vec<f64> = rs.iter().map(|r| r.test_auc).collect();
            let reps: Vec<usize> = rs.iter().map(|r| r.repeat).collect();
            summarize(&aucs, &reps, &ds, arm, size)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub dataset: String,
    pub subjects_per_class: usize,
    pub ptr_mean: f64,
    pub ptr_median: f64,
    pub npt_mean: f64,
    pub npt_median: f64,
    /// PTR median minus NPT median.
    pub median_delta: f64,
    /// PTR minus NPT, run by run after sorting both by repeat index.
    pub paired_deltas: Vec<f64>,
}

pub fn compare_arms(ptr: &EvalReport, npt: &EvalReport) -> Result<ComparisonRow> {
    if ptr.dataset != npt.dataset || ptr.subjects_per_class != npt.subjects_per_class {
        return Err(Error::InvalidConfig(format!(
            "cannot compare {}@{} with {}@{}",
            ptr.dataset, ptr.subjects_per_class, npt.dataset, npt.subjects_per_class
        )));
    }
    let sorted = |r: &EvalReport| {
        let mut v: Vec<(usize, f64)> = r.repeats.iter().copied().zip(r.aucs.iter().copied()).collect();
        v.sort_by_key(|p| p.0);
        v
    };
    let paired_deltas = sorted(ptr)
        .into_iter()
        .zip(sorted(npt))
        .map(|((_, a), (_, b))| a - b)
        .collect();
    Ok(ComparisonRow {
        dataset: ptr.dataset.clone(),
        subjects_per_class: ptr.subjects_per_class,
        ptr_mean: ptr.mean,
        ptr_median: ptr.median,
        npt_mean: npt.mean,
        npt_median: npt.median,
        median_delta: ptr.median - npt.median,
        paired_deltas,
    })
}

/// Every (dataset, size) cell that has both arms, compared.
pub fn comparisons(reports: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    let mut out = Vec::new();
    for p in reports.iter().filter(|r| r.arm == Arm::Ptr) {
        if let Some(n) = reports.iter().find(|r| {
            r.arm == Arm::Npt && r.dataset == p.dataset && r.subjects_per_class == p.subjects_per_class
        }) {
            out.push(compare_arms(p, n)?);
        }
    }
    Ok(out)
}

pub const RUNS_HEADER: [&str; 5] = ["dataset", "arm", "subjects_per_class", "repeat", "test_auc"];
pub const SUMMARY_HEADER: [&str; 6] = [
    "dataset",
    "arm",
    "subjects_per_class",
    "mean_auc",
    "median_auc",
    "n_runs",
];
pub const COMPARISON_HEADER: [&str; 7] = [
    "dataset",
    "subjects_per_class",
    "ptr_mean_auc",
    "ptr_median_auc",
    "npt_mean_auc",
    "npt_median_auc",
    "delta_median_auc",
];

// Floats are written with Rust's shortest round-trip formatting, so a value
// read back from any of these files is bit-identical to the one written.

pub fn runs_to_csv(rows: &[RunRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUNS_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.arm.to_string(),
            r.subjects_per_class.to_string(),
            r.repeat.to_string(),
            r.test_auc.to_string(),
        ])?;
    }
    finish(w)
}

pub fn summary_to_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.arm.to_string(),
            r.subjects_per_class.to_string(),
            r.mean.to_string(),
            r.median.to_string(),
            r.aucs.len().to_string(),
        ])?;
    }
    finish(w)
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.subjects_per_class.to_string(),
            r.ptr_mean.to_string(),
            r.ptr_median.to_string(),
            r.npt_mean.to_string(),
            r.npt_median.to_string(),
            r.median_delta.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv buffer: {e}")))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RUNS_HEADER {
        return Err(Error::InvalidConfig(format!(
            "{}: expected header {}, got {}",
            path.display(),
            RUNS_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| {
            Error::InvalidConfig(format!("{}: line {line}: bad {what}", path.display()))
        };
        let test_auc: f64 = rec[4].parse().map_err(|_| bad("test_auc"))?;
        if !(0.0..=1.0).contains(&test_auc) {
            return Err(bad("test_auc (outside [0, 1])"));
        }
        rows.push(RunRow {
            dataset: rec[0].to_string(),
            arm: rec[1].parse()?,
            subjects_per_class: rec[2].parse().map_err(|_| bad("subjects_per_class"))?,
            repeat: rec[3].parse().map_err(|_| bad("repeat"))?,
            test_auc,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auc(&set(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.2, 0.9, 0.4, 0.6], &[1, 0, 0, 1])).unwrap(), 0.25);
        assert_eq!(auc(&set(&[0.5; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc_bruteforce_oracle(&set(&[0.7, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auc_bruteforce_oracle(&set(&[0.3, 0.3], &[1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = set(&[0.1, 0.2], &[1, 1]);
        assert!(matches!(auc(&s), Err(Error::SingleClass { positives: 2, negatives: 0 })));
        assert!(auc_bruteforce_oracle(&s).is_err());
        assert!(roc_curve(&s).is_err());
        assert!(ScoredSet::new(vec![0.1], vec![2]).is_err());
        assert!(ScoredSet::new(vec![0.1], vec![]).is_err());
    }

    #[test]
    fn roc_shapes() {
        let c = roc_curve(&set(&[0.9, 0.1], &[1, 0])).unwrap();
        assert!(c.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let flat = roc_curve(&set(&[0.4; 4], &[1, 0, 1, 0])).unwrap();
        assert_eq!(flat.len(), 3);
        assert!(flat.iter().all(|p| p.tpr == p.fpr));
        assert_eq!((flat[0].tpr, flat[2].tpr), (0.0, 1.0));
    }

    #[test]
    fn summaries() {
        let r = summarize(&[0.7, 0.8, 0.9], &[0, 1, 2], "d", Arm::Ptr, 15).unwrap();
        assert!((r.mean - 0.8).abs() < 1e-15);
        assert_eq!(r.median, 0.8);
        let r = summarize(&[0.6, 0.8], &[0, 1], "d", Arm::Ptr, 15).unwrap();
        assert!((r.median - 0.7).abs() < 1e-15);
        assert!(summarize(&[], &[], "d", Arm::Npt, 1).is_err());
        // the report carries mean and median side by side
        let r = summarize(&[0.801, 0.802, 0.803], &[0, 1, 2], "fbirn", Arm::Ptr, 15).unwrap();
        assert_eq!(r.median, 0.802);
        assert_eq!(r.mean, mean_of(&r.aucs));
        assert_eq!(Some(r.median), median(&r.aucs));
    }

    #[test]
    fn comparisons_by_cell() {
        let p = summarize(&[0.6, 0.67, 0.7], &[0, 1, 2], "abide", Arm::Ptr, 25).unwrap();
        let same = compare_arms(&p, &EvalReport { arm: Arm::Npt, ..p.clone() }).unwrap();
        assert_eq!(same.median_delta, 0.0);
        assert!(same.paired_deltas.iter().all(|&d| d == 0.0));
        let n = summarize(&[0.55, 0.61, 0.63, 0.5], &[3, 0, 1, 2], "abide", Arm::Npt, 25).unwrap();
        let row = compare_arms(&p, &n).unwrap();
        assert!((row.median_delta - (0.67 - 0.58)).abs() < 1e-12);
        assert_eq!(row.paired_deltas.len(), 3);
        // repeat 0 pairs with repeat 0
        assert!((row.paired_deltas[0] - (0.6 - 0.61)).abs() < 1e-12);
        let p67 = summarize(&[0.67], &[0], "abide", Arm::Ptr, 237).unwrap();
        let n61 = summarize(&[0.61], &[0], "abide", Arm::Npt, 237).unwrap();
        assert!((compare_arms(&p67, &n61).unwrap().median_delta - 0.06).abs() < 1e-12);
        let other = summarize(&[0.6], &[0], "cobre", Arm::Npt, 25).unwrap();
        assert!(compare_arms(&p, &other).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            RunRow { dataset: "d".into(), arm: Arm::Ptr, subjects_per_class: 15, repeat: 0, test_auc: 0.1 + 0.2 },
            RunRow { dataset: "d".into(), arm: Arm::Npt, subjects_per_class: 15, repeat: 0, test_auc: 2.0 / 3.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        std::fs::write(&path, runs_to_csv(&rows).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dataset,arm,subjects_per_class,repeat,test_auc\n"));
        assert_eq!(read_runs_csv(&path).unwrap(), rows);
        let reps = reports_from_rows(&rows).unwrap();
        let summary = String::from_utf8(summary_to_csv(&reps).unwrap()).unwrap();
        assert!(summary.starts_with("dataset,arm,subjects_per_class,mean_auc,median_auc,n_runs\n"));
        assert_eq!(reps[0].arm, Arm::Ptr);
        std::fs::write(&path, "dataset,arm,subjects_per_class,repeat,test_auc\nd,PTR,x,0,0.5\n").unwrap();
        assert!(read_runs_csv(&path).is_err());
    }

    fn random_set(rng: &mut ChaCha8Rng) -> ScoredSet {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(1..=n);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse quantization injects ties
        let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        ScoredSet::new(scores, labels).unwrap()
    }

    #[test]
    fn rank_auc_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let s = random_set(&mut rng);
            let a = auc(&s).unwrap();
            assert!((a - auc_bruteforce_oracle(&s).unwrap()).abs() <= 1e-12);
            let flipped = ScoredSet::new(s.scores.clone(), s.labels().map(|l| 1 - l).collect()).unwrap();
            assert!((a + auc(&flipped).unwrap() - 1.0).abs() <= 1e-12);
            let curve = roc_curve(&s).unwrap();
            assert!((trapezoid_area(&curve) - a).abs() <= 1e-9);
            for w in curve.windows(2) {
                assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
            }
            for map in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3)] {
                let t = ScoredSet::new(s.scores.iter().map(|&x| map(x)).collect(), s.labels().collect()).unwrap();
                assert_eq!(auc(&t).unwrap(), a);
            }
        }
    }

    proptest! {
        #[test]
        fn summary_is_recomputable(v in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let ids: Vec<usize> = (0..v.len()).collect();
            let r = summarize(&v, &ids, "d", Arm::Npt, 5).unwrap();
            prop_assert_eq!(r.mean, mean_of(&r.aucs));
            prop_assert_eq!(Some(r.median), median(&r.aucs));
            prop_assert_eq!(&r.aucs, &v);
        }
    }
}
