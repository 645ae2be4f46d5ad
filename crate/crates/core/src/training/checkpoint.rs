use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDIR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretext,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretext => "pretext",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretext" => Ok(Phase::Pretext),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Checkpoint(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub epochs_run: usize,
    /// 1-based epoch the stored parameters come from.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub seed: u64,
    /// Keys this version does not interpret, kept so re-saving is lossless.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let mut kv = self.extra.clone();
        kv.insert("best_epoch".into(), self.best_epoch.to_string());
        kv.insert("best_val_auc".into(), self.best_val_auc.to_string());
        kv.insert("epochs_run".into(), self.epochs_run.to_string());
        kv.insert("phase".into(), self.phase.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("metadata: {m}"));
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| bad(format!("missing key {k}")));
        let phase = take("phase")?.parse()?;
        let epochs_run = take("epochs_run")?.parse().map_err(|_| bad("epochs_run".into()))?;
        let best_epoch = take("best_epoch")?.parse().map_err(|_| bad("best_epoch".into()))?;
        let best_val_auc = take("best_val_auc")?.parse().map_err(|_| bad("best_val_auc".into()))?;
        let seed = take("seed")?.parse().map_err(|_| bad("seed".into()))?;
        Ok(CheckpointMeta {
            phase,
            epochs_run,
            best_epoch,
            best_val_auc,
            seed,
            extra: kv,
        })
    }
}

/// Model configuration, parameters and training metadata.
///
/// Binary layout, little-endian: `TDIR`, format version (u32), config text
/// (u32 length + bytes), tensor count (u32), then per tensor in name order:
/// name (u32 length + bytes), ndim (u32), dims (u32 each), `f32` values;
/// finally the metadata text (u32 length + `key=value` lines).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(out, bytes.len())?;
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("text block is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(4 * self.params.scalar_count() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_block(&mut out, self.config.to_canonical_text().as_bytes())?;
        put_u32(&mut out, self.params.len())?;
        // BTreeMap iteration is the lexicographic name order
        for (name, t) in self.params.iter() {
            put_block(&mut out, name.as_bytes())?;
            put_u32(&mut out, t.dims().len())?;
            for &d in t.dims() {
                put_u32(&mut out, d)?;
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_block(&mut out, self.meta.to_text().as_bytes())?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = ModelConfig::from_canonical_text(r.text()?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.text()?.to_string();
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(dims, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let meta = CheckpointMeta::from_text(r.text()?)?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let params = ModelParams::from_map(tensors);
        params.check_against(&config)?;
        Ok(Checkpoint {
            config,
            params,
            meta,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                subject: "checkpoint".into(),
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rejects a checkpoint built for a different architecture.
    pub fn ensure_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.config != config {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint has\n{}requested\n{}",
                self.config.to_canonical_text(),
                config.to_canonical_text()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig {
            components: 3,
            window_len: 8,
            conv_channels: [2, 3, 2],
            conv_kernels: [2, 2, 2],
            encoder_dim: 4,
            lstm_hidden: 3,
            attention_dim: 2,
            head_hidden: 3,
            ..ModelConfig::default()
        }
    }

    fn ckpt() -> Checkpoint {
        let config = tiny();
        Checkpoint {
            params: init_params(&config, 3).unwrap(),
            config,
            meta: CheckpointMeta {
                phase: Phase::Pretext,
                epochs_run: 7,
                best_epoch: 4,
                best_val_auc: 0.1 + 0.2,
                seed: u64::MAX,
                extra: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TDIR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_unknown_keys() {
        let mut c = ckpt();
        c.meta.extra.insert("note".into(), "kept".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert_eq!(loaded.meta.extra["note"], "kept");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn config_mismatch_rejected() {
        let c = ckpt();
        assert!(c.ensure_config(&tiny()).is_ok());
        let other = ModelConfig {
            lstm_hidden: 4,
            ..tiny()
        };
        assert!(matches!(c.ensure_config(&other), Err(Error::Checkpoint(_))));
        // tensors that disagree with the embedded config
        let mut wrong = c.clone();
        wrong.config = other;
        assert!(Checkpoint::from_bytes(&wrong.to_bytes().unwrap()).is_err());
    }
}
