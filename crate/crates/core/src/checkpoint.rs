//! Binary checkpoint format and the training-metrics sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TANMCKPT"  u32 version
//! u64 header length, JSON header
//! f64 train_loss, f64 val_accuracy
//! tree initial, tree trained
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! A tree is a `u64` entry count followed by, per entry, the path (`u64`
//! length + UTF-8), the rank and dimensions (`u64`s) and the values (`f64`s).

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::{Checkpoint, MetricRow};
use crate::io::{csv_error, fmt17, metadata_line, parse_metadata_line};
use crate::model::{Mode, ModelSpec};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TANMCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    mode: Mode,
    task_id: String,
    model_seed: u64,
    theta0_digest: String,
    meta: BTreeMap<String, String>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tree(buf: &mut Vec<u8>, t: &ParamTree) {
    put_u64(buf, t.len() as u64);
    for (path, v) in t.iter() {
        put_u64(buf, path.len() as u64);
        buf.extend_from_slice(path.as_bytes());
        put_u64(buf, v.shape().len() as u64);
        for &d in v.shape() {
            put_u64(buf, d as u64);
        }
        for &x in v.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Serialize a checkpoint. `meta` carries free-form provenance such as a
/// configuration digest.
pub fn encode(ck: &Checkpoint, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        spec: ck.spec.clone(),
        mode: ck.mode(),
        task_id: ck.task_id.clone(),
        model_seed: ck.model_seed,
        theta0_digest: ck.theta0_digest.clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&ck.train_loss.to_le_bytes());
    buf.extend_from_slice(&ck.val_accuracy.to_le_bytes());
    put_tree(&mut buf, &ck.initial);
    put_tree(&mut buf, &ck.trained);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tree(&mut self) -> Result<ParamTree> {
        let n = self.len()?;
        let mut t = ParamTree::new();
        for _ in 0..n {
            let plen = self.len()?;
            let path = std::str::from_utf8(self.take(plen)?)
                .map_err(|_| Error::Format("non-UTF-8 parameter path".into()))?
                .to_string();
            let rank = self.len()?;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            if count > self.bytes.len() / 8 {
                return Err(Error::Format(format!("implausible shape {shape:?}")));
            }
            let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if t.insert(path.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate path {path}")));
            }
        }
        Ok(t)
    }
}

/// Parse and verify a serialized checkpoint.
pub fn decode(bytes: &[u8]) -> Result<(Checkpoint, BTreeMap<String, String>)> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Format("checkpoint digest mismatch: file is corrupted".into()));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = c.len()?;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.mode != header.spec.mode {
        return Err(Error::Format("checkpoint header disagrees on the mode".into()));
    }
    let train_loss = c.f64()?;
    let val_accuracy = c.f64()?;
    let initial = c.tree()?;
    let trained = c.tree()?;
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    if initial.layout() != trained.layout() || initial.layout() != header.spec.trainable_layout() {
        return Err(Error::Format("checkpoint trees do not match the model spec".into()));
    }
    let ck = Checkpoint {
        spec: header.spec,
        task_id: header.task_id,
        model_seed: header.model_seed,
        theta0_digest: header.theta0_digest,
        initial,
        trained,
        train_loss,
        val_accuracy,
    };
    Ok((ck, header.meta))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint, meta: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, encode(ck, meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// `step,train_loss,val_accuracy` CSV; the accuracy is empty on steps that
/// were not evaluated.
pub fn write_metrics<W: Write>(rows: &[MetricRow], meta: &BTreeMap<String, String>, mut out: W) -> Result<()> {
    writeln!(out, "{}", metadata_line("tanmerge-metrics v1", meta))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "train_loss", "val_accuracy"]).map_err(csv_error)?;
    for r in rows {
        let acc = r.val_accuracy.map(fmt17).unwrap_or_default();
        w.write_record([r.step.to_string(), fmt17(r.train_loss), acc]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: BufRead>(mut input: R) -> Result<(Vec<MetricRow>, BTreeMap<String, String>)> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let meta = parse_metadata_line(first.trim_end(), "tanmerge-metrics v1")?;
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(input).records() {
        let rec = rec.map_err(csv_error)?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Format(format!("bad number {:?}", &rec[i])))
        };
        rows.push(MetricRow {
            step: rec[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", &rec[0])))?,
            train_loss: num(1)?,
            val_accuracy: if rec[2].is_empty() { None } else { Some(num(2)?) },
        });
    }
    Ok((rows, meta))
}
