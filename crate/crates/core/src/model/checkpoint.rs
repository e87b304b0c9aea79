//! Checkpoint container: `SDTPCKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then raw little-endian tensor data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::diffmath::{Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDTPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Serializes named tensors plus free-form metadata.
pub fn encode<T: Real>(tensors: &[(String, &Tensor<T>)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE.to_string(),
        tensors: entries,
        meta,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn read_values<T: Real, S: Real>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES).map(|c| T::c(S::read_le(c).f64())).collect()
}

/// Named tensors plus the JSON metadata block.
pub type Decoded<T> = (Vec<(String, Tensor<T>)>, serde_json::Value);

/// Parses a container. Stored values are converted to `T` when the stored
/// dtype differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Decoded<T>> {
    let (header, data) = split(bytes)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * width;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past the data section",
                e.name
            )));
        }
        let raw = &data[e.offset..end];
        let values = if width == 4 {
            read_values::<T, f32>(raw)
        } else {
            read_values::<T, f64>(raw)
        };
        out.push((e.name, Tensor::new(&e.shape, values)?));
    }
    Ok((out, header.meta))
}

/// Element type recorded in a container header.
pub fn stored_dtype(bytes: &[u8]) -> Result<String> {
    Ok(split(bytes)?.0.dtype)
}

/// The `kind` field of the metadata, if any.
pub fn kind(bytes: &[u8]) -> Result<Option<String>> {
    Ok(split(bytes)?
        .0
        .meta
        .get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_string))
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not an SDTP checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    Ok((header, &body[hlen..]))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Model tensors and the config needed to rebuild them.
pub fn encode_model<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "kind": "model",
        "config": params.config,
        "checksum": params.checksum(),
    });
    encode(&params.named_tensors(), meta)
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let (tensors, meta) = decode::<T>(bytes)?;
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("model checkpoint has no config".into()))?,
    )?;
    let tensors = tensors.into_iter().filter(|(n, _)| !n.starts_with("scorer.")).collect();
    ModelParams::from_named(&config, tensors)
}

pub fn save_model<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_model(params)?)
}

pub fn load_model<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    decode_model(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 9,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for_dtype::<f32>();
        for_dtype::<f64>();
    }

    fn for_dtype<T: Real>() {
        let p = ModelParams::<T>::init(&cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&p, &path).unwrap();
        let q: ModelParams<T> = load_model(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn rejects_garbage_and_versions() {
        assert!(decode::<f32>(b"not a checkpoint at all").is_err());
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let mut bytes = encode_model(&p).unwrap();
        bytes[8] = 9;
        let err = decode_model::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn widening_load() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let q: ModelParams<f64> = decode_model(&encode_model(&p).unwrap()).unwrap();
        assert_eq!(q.cast::<f32>(), p);
    }
}
