//! Single-file checkpoint archive.
//!
//! Layout: magic `EVCK`, format version (u32 LE), header length (u32 LE),
//! a JSON header carrying the backbone configuration plus a tensor manifest
//! (name, shape, offset, length — offsets counted in floats), then all
//! tensor data concatenated as little-endian f32. Parameters come first in
//! visit order, then batch-norm running statistics.

use std::collections::HashMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_backbone_bytes(model: &Backbone) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |p| {
        tensors.push((
            p.name.clone(),
            p.value.shape().to_vec(),
            p.value.iter().map(|&v| v as f32).collect(),
        ));
    });
    model.visit_buffers(&mut |name, a| {
        tensors.push((
            name.to_string(),
            a.shape().to_vec(),
            a.iter().map(|&v| v as f32).collect(),
        ));
    });

    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        manifest.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header { config: *model.config(), tensors: manifest };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_backbone(model: &Backbone, path: impl AsRef<Path>) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, save_backbone_bytes(model))?;
    Ok(())
}

pub fn load_backbone_bytes(bytes: &[u8]) -> Result<Backbone> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint shorter than its header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let data_start = 12 + header_len;
    if bytes.len() < data_start {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..data_start])?;
    let blob = &bytes[data_start..];
    if blob.len() % 4 != 0 {
        return Err(Error::Format("checkpoint data is not whole floats".into()));
    }
    let total_floats = (blob.len() / 4) as u64;
    let expected: u64 = header.tensors.iter().map(|t| t.len).sum();
    if total_floats != expected {
        return Err(Error::Format(format!(
            "checkpoint data holds {total_floats} floats, manifest expects {expected}"
        )));
    }

    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        if numel as u64 != t.len {
            return Err(Error::Format(format!(
                "tensor {} manifest length {} does not match shape {:?}",
                t.name, t.len, t.shape
            )));
        }
        let start = t.offset as usize * 4;
        let end = start + t.len as usize * 4;
        if end > blob.len() {
            return Err(Error::Format(format!("tensor {} overruns the data blob", t.name)));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if by_name.insert(t.name.clone(), (t.shape.clone(), values)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", t.name)));
        }
    }

    let mut model = Backbone::new(header.config, 0)?;
    let mut problem: Option<String> = None;
    model.visit_params_mut(&mut |p| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(&p.name) {
            None => problem = Some(format!("tensor {} missing from checkpoint", p.name)),
            Some((shape, values)) => {
                if shape != p.value.shape() {
                    problem = Some(format!(
                        "tensor {} has shape {shape:?}, model expects {:?}",
                        p.name,
                        p.value.shape()
                    ));
                } else {
                    p.value =
                        ArrayD::from_shape_vec(p.value.raw_dim(), values).expect("length checked");
                    p.grad = ArrayD::zeros(p.value.raw_dim());
                }
            }
        }
    });
    if let Some(msg) = problem.take() {
        return Err(Error::Format(msg));
    }
    model.visit_buffers_mut(&mut |name, buf| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => problem = Some(format!("tensor {name} missing from checkpoint")),
            Some((shape, values)) => {
                if shape != buf.shape() {
                    problem = Some(format!(
                        "tensor {name} has shape {shape:?}, model expects {:?}",
                        buf.shape()
                    ));
                } else {
                    *buf = ArrayD::from_shape_vec(buf.raw_dim(), values).expect("length checked");
                }
            }
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Format(msg));
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint carries unknown tensor {name}")));
    }
    Ok(model)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Backbone> {
    load_backbone_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ForwardMode};
    use crate::rng::substream_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_batch(n: usize, hw: usize, seed: u64) -> Array3<f32> {
        let mut rng = substream_rng(seed, 0);
        Array3::from_shape_fn((n, hw, hw), |_| rng.gen_range(-1.5f32..1.5))
    }

    #[test]
    fn round_trip_preserves_all_state_at_storage_precision() {
        let cfg = BackboneConfig {
            kind: BackboneKind::HalfResnet18,
            dropout_rate: 0.2,
            input_size: (16, 16),
        };
        let mut model = Backbone::new(cfg, 9).unwrap();
        // Move the running statistics off their initial values.
        let _ = model
            .forward(&random_batch(4, 16, 1), ForwardMode::Train, Some(&mut substream_rng(2, 0)))
            .unwrap();

        let bytes = save_backbone_bytes(&model);
        let loaded = load_backbone_bytes(&bytes).unwrap();
        assert_eq!(model.fingerprint(), loaded.fingerprint());

        let collect = |m: &Backbone| {
            let mut v: Vec<f32> = Vec::new();
            m.visit_params(&mut |p| v.extend(p.value.iter().map(|&x| x as f32)));
            m.visit_buffers(&mut |_, a| v.extend(a.iter().map(|&x| x as f32)));
            v
        };
        assert_eq!(collect(&model), collect(&loaded));

        // Loading is idempotent and deterministic.
        let mut a = load_backbone_bytes(&bytes).unwrap();
        let mut b = loaded;
        let batch = random_batch(3, 16, 5);
        let out_a = a.forward(&batch, ForwardMode::Eval, None).unwrap();
        let out_b = b.forward(&batch, ForwardMode::Eval, None).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.evck");
        let model = Backbone::new(BackboneConfig::default(), 3).unwrap();
        save_backbone(&model, &path).unwrap();
        let loaded = load_backbone(&path).unwrap();
        assert_eq!(model.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn rejects_corrupt_archives() {
        let model = Backbone::new(BackboneConfig::default(), 4).unwrap();
        let bytes = save_backbone_bytes(&model);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(load_backbone_bytes(&bad_magic), Err(Error::Format(_))));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(load_backbone_bytes(truncated).is_err());

        let mut bad_version = bytes;
        bad_version[4] = 99;
        assert!(matches!(load_backbone_bytes(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_backbone("/nonexistent/nowhere.evck"),
            Err(Error::Io(_))
        ));
    }
}
