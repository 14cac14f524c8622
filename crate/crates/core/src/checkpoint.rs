//! Model checkpoints.
//!
//! A checkpoint is a plain-text manifest followed by concatenated FBT1
//! tensors:
//!
//! ```text
//! FBNET-CKPT 1
//! config model.c_mid = 32
//! meta epoch = 7
//! tensor head.classifier.weight 5x40x1x1 1234 829
//! end
//! <binary blobs>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line. Running
//! batch-norm statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var` vectors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{Model, ModelConfig};
use crate::tensor::{decode_tensor, encode_tensor, Real, Tensor};

const HEADER: &str = "FBNET-CKPT 1";

/// A restored model plus the free-form metadata saved with it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub meta: KvMap,
}

fn named_tensors<T: Real>(model: &Model<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for s in model.buffers.iter() {
        let c = s.mean.len();
        out.push((format!("{}_mean", s.name), Tensor::new(vec![c], s.mean.clone()).expect("stats length")));
        out.push((format!("{}_var", s.name), Tensor::new(vec![c], s.var.clone()).expect("stats length")));
    }
    out
}

fn check_token(what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\n', '\r']) {
        return Err(Error::config(format!("checkpoint {what} {value:?} cannot be stored")));
    }
    Ok(())
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, meta: &KvMap) -> Result<Vec<u8>> {
    let mut header = format!("{HEADER}\n");
    for (k, v) in model.config().to_kv().iter() {
        header.push_str(&format!("config {k} = {v}\n"));
    }
    for (k, v) in meta.iter() {
        check_token("metadata key", k)?;
        check_token("metadata value", v)?;
        header.push_str(&format!("meta {k} = {v}\n"));
    }
    let mut blobs = Vec::new();
    for (name, tensor) in named_tensors(model) {
        let bytes = encode_tensor(&tensor);
        let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {} {}\n", shape.join("x"), blobs.len(), bytes.len()));
        blobs.extend_from_slice(&bytes);
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&blobs);
    Ok(out)
}

/// Writes through a temporary file and a rename, so an interrupted save
/// never replaces a good checkpoint with a partial one.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &Model<T>, meta: &KvMap) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let bad = |reason: String| Error::format(path, reason);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest is not terminated by an end line".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not valid UTF-8".into()))
    };
    if next_line()? != HEADER {
        return Err(bad(format!("missing {HEADER:?} header")));
    }
    let mut config_text = String::new();
    let mut meta_text = String::new();
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "config" => config_text.push_str(&format!("{rest}\n")),
            "meta" => meta_text.push_str(&format!("{rest}\n")),
            "tensor" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset, len] = fields[..] else {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                };
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("malformed tensor line {line:?}")));
                let shape = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape.split('x').map(parse).collect::<Result<Vec<_>>>()?
                };
                entries.push(Entry {
                    name: name.to_string(),
                    shape,
                    offset: parse(offset)?,
                    len: parse(len)?,
                });
            }
            _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
        }
    }
    let blobs = &bytes[pos..];
    let mut config = ModelConfig::toy();
    let config_kv = KvMap::parse(&config_text)?;
    config.apply_kv(&config_kv)?;
    let mut model = Model::<T>::new(&config, 0)?;
    let mut expected = named_tensors(&model);
    let mut filled = vec![false; expected.len()];
    let mut end_of_data = 0;
    for e in &entries {
        let slot = expected
            .iter()
            .position(|(n, _)| *n == e.name)
            .ok_or_else(|| bad(format!("unexpected tensor {}", e.name)))?;
        if filled[slot] {
            return Err(bad(format!("tensor {} stored twice", e.name)));
        }
        let blob = e
            .offset
            .checked_add(e.len)
            .and_then(|end| blobs.get(e.offset..end))
            .ok_or_else(|| bad(format!("tensor {} lies outside the file", e.name)))?;
        let (tensor, used) = decode_tensor::<T>(blob).map_err(|r| bad(format!("tensor {}: {r}", e.name)))?;
        if used != e.len || tensor.shape() != e.shape.as_slice() || tensor.shape() != expected[slot].1.shape() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, the configured model needs {:?}",
                e.name,
                tensor.shape(),
                expected[slot].1.shape()
            )));
        }
        expected[slot].1 = tensor;
        filled[slot] = true;
        end_of_data = end_of_data.max(e.offset + e.len);
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(bad(format!("tensor {} is missing", expected[i].0)));
    }
    if end_of_data != blobs.len() {
        return Err(bad(format!("{} unreferenced trailing bytes", blobs.len() - end_of_data)));
    }
    let mut values = expected.into_iter().map(|(_, t)| t);
    for p in model.params.iter_mut() {
        p.value = values.next().expect("one tensor per parameter");
    }
    for s in model.buffers.iter_mut() {
        s.mean = values.next().expect("running mean").into_data();
        s.var = values.next().expect("running variance").into_data();
    }
    Ok(Checkpoint {
        model,
        meta: KvMap::parse(&meta_text)?,
    })
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
