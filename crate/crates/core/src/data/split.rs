use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub stratified: bool,
}

fn shuffled(mut v: Vec<usize>, seed: u64) -> Vec<usize> {
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

fn indices_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); dataset.class_names().len()];
    for (i, r) in dataset.records().iter().enumerate() {
        by[r.label].push(i);
    }
    by
}

/// Splits `total` across classes in proportion to `counts`, rounding by
/// largest remainder (ties to the lower class index).
fn apportion(total: usize, counts: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut out: Vec<usize> = counts.iter().map(|&c| total * c / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| ((total * counts[b]) % n).cmp(&((total * counts[a]) % n)).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        out[k] += 1;
    }
    out
}

/// Disjoint `(train, val, test)`; train is whatever the holdouts leave.
/// Each part keeps the dataset's record order.
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    if spec.val_size + spec.test_size >= n && spec.val_size + spec.test_size > 0 {
        return Err(Error::Infeasible(format!(
            "holdouts of {} + {} leave no training records out of {n}",
            spec.val_size, spec.test_size
        )));
    }
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut train = Vec::new();
    if spec.stratified {
        let by = indices_by_class(dataset);
        let counts: Vec<usize> = by.iter().map(Vec::len).collect();
        let v = apportion(spec.val_size, &counts);
        let t = apportion(spec.test_size, &counts);
        for (k, idx) in by.into_iter().enumerate() {
            if v[k] + t[k] > idx.len() {
                return Err(Error::Infeasible(format!(
                    "class {k} has {} records, holdouts need {} + {}",
                    idx.len(),
                    v[k],
                    t[k]
                )));
            }
            let idx = shuffled(idx, seed::derive(spec.seed, &[k as u64]));
            val.extend_from_slice(&idx[..v[k]]);
            test.extend_from_slice(&idx[v[k]..v[k] + t[k]]);
            train.extend_from_slice(&idx[v[k] + t[k]..]);
        }
    } else {
        let idx = shuffled((0..n).collect(), spec.seed);
        val.extend_from_slice(&idx[..spec.val_size]);
        test.extend_from_slice(&idx[spec.val_size..spec.val_size + spec.test_size]);
        train.extend_from_slice(&idx[spec.val_size + spec.test_size..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    let tag = |name: &str| format!("{} [{name} split, seed {}]", dataset.provenance, spec.seed);
    Ok((
        dataset.select(&train, tag("train")),
        dataset.select(&val, tag("val")),
        dataset.select(&test, tag("test")),
    ))
}

/// Two-class balancing by rotation: keeps every minority record and a
/// minority-sized block of the (seed-shuffled) majority list starting at
/// `trial_index · minority_size`, wrapping around. Consecutive trials walk
/// through the whole majority class.
pub fn balance_classes(dataset: &Dataset, seed: u64, trial_index: usize) -> Result<Dataset> {
    let by = indices_by_class(dataset);
    if by.len() != 2 || by.iter().any(Vec::is_empty) {
        return Err(Error::Infeasible(format!(
            "balancing needs two non-empty classes, got counts {:?}",
            dataset.class_counts()
        )));
    }
    let (minor, major) = if by[0].len() < by[1].len() { (0, 1) } else { (1, 0) };
    let m = by[minor].len();
    let pool = shuffled(by[major].clone(), seed::derive(seed, &[0x42414C]));
    let start = (trial_index % pool.len()) * m % pool.len();
    let mut keep = by[minor].clone();
    keep.extend((0..m).map(|i| pool[(start + i) % pool.len()]));
    keep.sort_unstable();
    Ok(dataset.select(
        &keep,
        format!("{} [balanced, seed {seed}, trial {trial_index}]", dataset.provenance),
    ))
}

/// Exactly `n_per_class` records of every class, chosen uniformly without
/// replacement. For a fixed seed the picks are prefixes of one permutation
/// per class, so a larger `n` always contains the smaller selection.
pub fn subsample_per_class(dataset: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut keep = Vec::new();
    for (k, idx) in indices_by_class(dataset).into_iter().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::Infeasible(format!(
                "class {k} has {} records, {n_per_class} requested",
                idx.len()
            )));
        }
        let idx = shuffled(idx, seed::derive(seed, &[k as u64]));
        keep.extend_from_slice(&idx[..n_per_class]);
    }
    keep.sort_unstable();
    Ok(dataset.select(
        &keep,
        format!("{} [{n_per_class} per class, seed {seed}]", dataset.provenance),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn toy(counts: &[usize]) -> Dataset {
        let mut recs = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let m = Tensor::new(vec![1, 2], vec![k as f32, i as f32]).unwrap();
                recs.push(SubjectRecord::new(format!("k{k}-{i}"), k, m).unwrap());
            }
        }
        let names = (0..counts.len()).map(|k| format!("c{k}")).collect();
        Dataset::new(recs, names, "toy").unwrap()
    }

    fn ids(d: &Dataset) -> BTreeSet<String> {
        d.records().iter().map(|r| r.subject_id.clone()).collect()
    }

    fn spec(val: usize, test: usize, seed: u64) -> SplitSpec {
        SplitSpec {
            val_size: val,
            test_size: test,
            seed,
            stratified: true,
        }
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(apportion(59, &[160, 151]), [30, 29]);
        assert_eq!(apportion(3, &[1, 1, 1]), [1, 1, 1]);
        assert_eq!(apportion(1, &[1, 1]), [1, 0]);
        assert_eq!(apportion(0, &[5, 5]), [0, 0]);
    }

    #[test]
    fn holdout_sizes_on_a_311_record_dataset() {
        let d = toy(&[160, 151]);
        let (train, val, test) = stratified_split(&d, &spec(59, 59, 3)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (193, 59, 59));
        assert_eq!(val.class_counts(), [30, 29]);
    }

    #[test]
    fn empty_holdouts_keep_everything() {
        let d = toy(&[4, 3]);
        let (train, val, test) = stratified_split(&d, &spec(0, 0, 1)).unwrap();
        assert_eq!(train.records(), d.records());
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn infeasible_holdouts() {
        let d = toy(&[4, 3]);
        assert!(matches!(stratified_split(&d, &spec(4, 3, 0)), Err(Error::Infeasible(_))));
        // both single-record holdouts round onto class 0, which has one record
        let tiny = toy(&[1, 1, 1]);
        assert!(matches!(stratified_split(&tiny, &spec(1, 1, 0)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn balancing_a_651_172_shape() {
        let d = toy(&[651, 172]);
        let mut seen = BTreeSet::new();
        for trial in 0..4 {
            let b = balance_classes(&d, 11, trial).unwrap();
            assert_eq!(b.class_counts(), [172, 172]);
            seen.extend(b.records().iter().filter(|r| r.label == 0).map(|r| r.subject_id.clone()));
        }
        assert_eq!(seen.len(), 651);
        let three: BTreeSet<String> = (0..3)
            .flat_map(|t| ids(&balance_classes(&d, 11, t).unwrap()))
            .filter(|id| id.starts_with("k0"))
            .collect();
        assert!(three.len() < 651);
    }

    #[test]
    fn balancing_balanced_input_is_identity() {
        let d = toy(&[5, 5]);
        assert_eq!(balance_classes(&d, 2, 3).unwrap().records(), d.records());
        assert!(balance_classes(&toy(&[5, 0]), 0, 0).is_err());
        assert!(balance_classes(&toy(&[2, 2, 2]), 0, 0).is_err());
    }

    #[test]
    fn subsampling() {
        let d = toy(&[20, 30]);
        let s = subsample_per_class(&d, 15, 4).unwrap();
        assert_eq!(s.class_counts(), [15, 15]);
        assert_eq!(s, subsample_per_class(&d, 15, 4).unwrap());
        let full = subsample_per_class(&d, 20, 4).unwrap();
        assert_eq!(full.class_counts(), [20, 20]);
        assert!(ids(&s).is_subset(&ids(&full)));
        assert!(subsample_per_class(&d, 21, 4).is_err());
        let all0 = subsample_per_class(&toy(&[6]), 6, 9).unwrap();
        assert_eq!(ids(&all0), ids(&toy(&[6])));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn split_partitions_exactly(
            counts in prop::collection::vec(2usize..40, 2..4),
            vf in 0.0f64..0.4,
            tf in 0.0f64..0.4,
            seed in any::<u64>(),
            stratified in any::<bool>(),
        ) {
            let d = toy(&counts);
            let n = d.len();
            let sp = SplitSpec {
                val_size: (vf * n as f64) as usize,
                test_size: (tf * n as f64) as usize,
                seed,
                stratified,
            };
            let (train, val, test) = stratified_split(&d, &sp).unwrap();
            prop_assert_eq!(val.len(), sp.val_size);
            prop_assert_eq!(test.len(), sp.test_size);
            let (a, b, c) = (ids(&train), ids(&val), ids(&test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert_eq!(a.len() + b.len() + c.len(), n);
            let union: BTreeSet<String> = a.union(&b).chain(c.iter()).cloned().collect();
            prop_assert_eq!(union, ids(&d));
        }
    }
}
