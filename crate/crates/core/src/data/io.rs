use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";
const MANIFEST_HEADER: &str = "subject_id\tlabel\tpath";

/// Loads a dataset from a manifest file, or from a directory holding
/// `manifest.tsv`. Matrix paths and `classes.txt` resolve against the
/// manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = read_text(&manifest, "manifest")?;
    let classes_path = root.join(CLASSES_FILE);
    let class_names: Vec<String> = read_text(&classes_path, "classes")?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let bad = |line: usize, detail: String| Error::Manifest {
        path: manifest.clone(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(bad(1, format!("expected header {MANIFEST_HEADER:?}, got {h:?}"))),
        None => return Err(bad(1, "empty manifest".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| bad(i + 1, format!("label {:?} is not a non-negative integer", fields[1])))?;
        if label >= class_names.len() {
            return Err(bad(
                i + 1,
                format!("label {label} but {CLASSES_FILE} lists {} classes", class_names.len()),
            ));
        }
        let matrix = read_matrix(fields[0], &root.join(fields[2]))?;
        records.push(SubjectRecord::new(fields[0], label, matrix)?);
    }
    Dataset::new(records, class_names, format!("loaded from {}", manifest.display()))
}

fn read_text(path: &Path, subject: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            subject: subject.to_string(),
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })
}

fn read_matrix(subject: &str, path: &Path) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            subject: subject.to_string(),
            path: path.to_path_buf(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(Error::RaggedRows {
                subject: subject.to_string(),
                row,
                expected,
                found: rec.len(),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| Error::NonNumeric {
                subject: subject.to_string(),
                row,
                col,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    subject: subject.to_string(),
                    row,
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    Tensor::new(vec![rows, cols], values).map_err(|_| Error::EmptyMatrix {
        subject: subject.to_string(),
    })
}

/// Writes `dataset` under `dir` in the format [`load_dataset`] reads:
/// `manifest.tsv`, `classes.txt` and one CSV matrix per subject in
/// `matrices/`. Floats use the shortest representation that parses back to
/// the same bits.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mdir = dir.join("matrices");
    fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for r in dataset.records() {
        let rel = PathBuf::from("matrices").join(format!("{}.csv", r.subject_id));
        manifest.push_str(&format!("{}\t{}\t{}\n", r.subject_id, r.label, rel.display()));
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.join(&rel))?;
        for c in 0..r.components() {
            w.write_record(r.row(c).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dir.join(&rel), e))?;
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let mut classes = dataset.class_names().join("\n");
    classes.push('\n');
    write_file(&dir.join(CLASSES_FILE), classes.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
