//! Subject time-course datasets: loading, windowing, the time-reversal
//! pretext construction, synthetic generation, and split/balance helpers.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, write_dataset, CLASSES_FILE, MANIFEST_FILE};
pub use split::{balance_classes, stratified_split, subsample_per_class, SplitSpec};
pub use synth::{synth_generate, MixingSpec, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One subject: a `components × timepoints` time-course matrix and a label.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: usize,
    matrix: Tensor,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, label: usize, matrix: Tensor) -> Result<Self> {
        let subject_id = subject_id.into();
        if matrix.dims().len() != 2 {
            return Err(Error::shape(
                "subject",
                format!("{subject_id}: matrix must be 2-D, got {:?}", matrix.dims()),
            ));
        }
        let t = matrix.dims()[1];
        if let Some(row) = matrix
            .values()
            .chunks(t)
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                subject: subject_id,
                row,
            });
        }
        Ok(SubjectRecord {
            subject_id,
            label,
            matrix,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn components(&self) -> usize {
        self.matrix.dims()[0]
    }

    pub fn timepoints(&self) -> usize {
        self.matrix.dims()[1]
    }

    /// Time course of component `c`.
    pub fn row(&self, c: usize) -> &[f32] {
        let t = self.timepoints();
        &self.matrix.values()[c * t..(c + 1) * t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    class_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        records: Vec<SubjectRecord>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if let Some(first) = records.first() {
            let expected = first.components();
            for r in &records {
                if r.components() != expected {
                    return Err(Error::InconsistentComponents {
                        subject: r.subject_id.clone(),
                        expected,
                        found: r.components(),
                    });
                }
                if r.label >= class_names.len() {
                    return Err(Error::InvalidConfig(format!(
                        "subject {}: label {} but only {} classes",
                        r.subject_id,
                        r.label,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Dataset {
            records,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn components(&self) -> Option<usize> {
        self.records.first().map(SubjectRecord::components)
    }

    /// Record count per class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Same classes and provenance, records picked by index (in the given order).
    pub fn select(&self, indices: &[usize], provenance: impl Into<String>) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: provenance.into(),
        }
    }

    pub fn map_records(&self, f: impl Fn(&SubjectRecord) -> SubjectRecord) -> Dataset {
        Dataset {
            records: self.records.iter().map(f).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// A subject cut into contiguous, non-overlapping `components × window_len`
/// windows, in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub subject_id: String,
    pub label: usize,
    pub windows: Vec<Tensor>,
}

/// Time direction of a pretext sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward = 0,
    Reversed = 1,
}

impl Direction {
    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample {
    pub sample: WindowedSample,
    pub direction: Direction,
}

pub fn slice_windows(record: &SubjectRecord, window_len: usize) -> Result<WindowedSample> {
    let (c, t) = (record.components(), record.timepoints());
    if window_len == 0 {
        return Err(Error::InvalidConfig("window length must be at least 1".into()));
    }
    if t < window_len {
        return Err(Error::Infeasible(format!(
            "subject {}: {t} timepoints is shorter than window length {window_len}",
            record.subject_id
        )));
    }
    let n = t / window_len;
    if t % window_len != 0 {
        log::warn!(
            "subject {}: dropping {} trailing timepoints ({t} is not a multiple of {window_len})",
            record.subject_id,
            t % window_len
        );
    }
    let values = record.matrix.values();
    let windows = (0..n)
        .map(|w| {
            let mut buf = Vec::with_capacity(c * window_len);
            for comp in 0..c {
                let start = comp * t + w * window_len;
                buf.extend_from_slice(&values[start..start + window_len]);
            }
            Tensor::new(vec![c, window_len], buf).expect("window dims are positive")
        })
        .collect();
    Ok(WindowedSample {
        subject_id: record.subject_id.clone(),
        label: record.label,
        windows,
    })
}

/// Reverses every component's time course; the id gains a `-rev` suffix.
pub fn reverse_time(record: &SubjectRecord) -> SubjectRecord {
    let (c, t) = (record.components(), record.timepoints());
    let mut out = Vec::with_capacity(c * t);
    for comp in 0..c {
        out.extend(record.row(comp).iter().rev());
    }
    SubjectRecord {
        subject_id: format!("{}-rev", record.subject_id),
        label: record.label,
        matrix: Tensor::new(vec![c, t], out).expect("same dims"),
    }
}

/// Forward and reversed twin for every record, interleaved as
/// `[fwd_0, rev_0, fwd_1, rev_1, …]`. The whole series is reversed before
/// windowing, so window order flips along with time inside each window.
pub fn make_pretext_dataset(dataset: &Dataset, window_len: usize) -> Result<Vec<PretextSample>> {
    let mut out = Vec::with_capacity(2 * dataset.len());
    for r in dataset.records() {
        out.push(PretextSample {
            sample: slice_windows(r, window_len)?,
            direction: Direction::Forward,
        });
        out.push(PretextSample {
            sample: slice_windows(&reverse_time(r), window_len)?,
            direction: Direction::Reversed,
        });
    }
    Ok(out)
}

/// Per-component standardization over time. Constant components map to zero.
pub fn zscore_normalize(record: &SubjectRecord) -> SubjectRecord {
    let (c, t) = (record.components(), record.timepoints());
    let mut out = Vec::with_capacity(c * t);
    for comp in 0..c {
        let row = record.row(comp);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        out.extend(row.iter().map(|&v| ((v as f64 - mean) / std) as f32));
    }
    SubjectRecord {
        subject_id: record.subject_id.clone(),
        label: record.label,
        matrix: Tensor::new(vec![c, t], out).expect("same dims"),
    }
}
