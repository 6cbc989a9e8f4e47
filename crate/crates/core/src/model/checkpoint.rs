//! Checkpoint file: a JSON header (config, vocabulary, shape manifest,
//! config hash, epoch/step counters) followed by raw little-endian f64
//! parameter data in manifest order, optionally followed by AdamW moment
//! tensors for exact training resume. Loading fails loudly on any shape
//! mismatch.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams, Vocab};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    manifest: Vec<TensorSpec>,
    config_hash: String,
    epoch: u64,
    step: u64,
    has_optimizer: bool,
}

/// Optimizer moments and counters carried for resume.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub epoch: u64,
}

fn write_params(file: &mut impl Write, params: &ModelParams) -> Result<()> {
    for tensor in params.params() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params_into(file: &mut impl Read, params: &mut ModelParams) -> Result<()> {
    let mut word = [0u8; 8];
    for tensor in params.params_mut() {
        for v in tensor.data_mut() {
            file.read_exact(&mut word)
                .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
            *v = f64::from_le_bytes(word);
        }
    }
    Ok(())
}

/// Save a model (and optionally its optimizer state) to `path`.
pub fn save(
    path: &Path,
    model: &Model,
    config_hash: &str,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let manifest: Vec<TensorSpec> = model
        .params
        .param_names()
        .into_iter()
        .zip(model.params.params())
        .map(|(name, t)| TensorSpec {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        manifest,
        config_hash: config_hash.to_string(),
        epoch: optimizer.map_or(0, |o| o.epoch),
        step: optimizer.map_or(0, |o| o.step),
        has_optimizer: optimizer.is_some(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    write_params(&mut file, &model.params)?;
    if let Some(opt) = optimizer {
        write_params(&mut file, &opt.m)?;
        write_params(&mut file, &opt.v)?;
    }
    Ok(())
}

/// Load a model; returns the stored config hash and optimizer state when
/// present.
pub fn load(path: &Path) -> Result<(Model, String, Option<OptimizerState>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let mut word4 = [0u8; 4];
    file.read_exact(&mut word4)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    if u32::from_le_bytes(word4) != VERSION {
        return Err(Error::BadCheckpoint("unsupported version".into()));
    }
    let mut word8 = [0u8; 8];
    file.read_exact(&mut word8)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let header_len = u64::from_le_bytes(word8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let mut header: Header = serde_json::from_slice(&header_bytes)?;
    header.vocab.restore_index();

    let mut model = Model::new(header.config.clone(), header.vocab.clone());
    // Shape manifest must match the architecture the config describes.
    let names = model.params.param_names();
    if names.len() != header.manifest.len() {
        return Err(Error::ShapeMismatch {
            context: "checkpoint manifest length".into(),
            expected: names.len().to_string(),
            got: header.manifest.len().to_string(),
        });
    }
    for ((name, tensor), spec) in names
        .iter()
        .zip(model.params.params())
        .zip(&header.manifest)
    {
        if name != &spec.name || tensor.shape() != spec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: format!("checkpoint tensor {name}"),
                expected: format!("{:?}", tensor.shape()),
                got: format!("{} {:?}", spec.name, spec.shape),
            });
        }
    }
    read_params_into(&mut file, &mut model.params)?;
    let optimizer = if header.has_optimizer {
        let mut m = model.params.zeros_like();
        let mut v = model.params.zeros_like();
        read_params_into(&mut file, &mut m)?;
        read_params_into(&mut file, &mut v)?;
        Some(OptimizerState {
            m,
            v,
            step: header.step,
            epoch: header.epoch,
        })
    } else {
        None
    };
    Ok((model, header.config_hash, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_features, tiny_model};

    #[test]
    fn roundtrip_reproduces_eval_outputs() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hsck");
        save(&path, &model, "deadbeef", None).unwrap();
        let (back, hash, opt) = load(&path).unwrap();
        assert_eq!(hash, "deadbeef");
        assert!(opt.is_none());
        assert_eq!(back.params, model.params);

        let fb = tiny_features(32, 8, 4);
        let h1 = model.encode_audio(&fb).unwrap();
        let h2 = back.encode_audio(&fb).unwrap();
        assert_eq!(h1, h2);
        let q1 = model.encode_text("shunt").unwrap();
        let q2 = back.encode_text("shunt").unwrap();
        assert_eq!(q1, q2);
        assert_eq!(
            model.query_decode(&h1, &[q1]),
            back.query_decode(&h2, &[q2])
        );
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hsck");
        save(&path, &model, "h", None).unwrap();

        // Corrupt the manifest by loading with a different architecture:
        // rewrite the header with an incompatible config but keep data.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header["config"]["d"] = serde_json::json!(32);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load(&path), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let model = tiny_model();
        let mut m = model.params.zeros_like();
        m.lambda.data_mut()[0] = 0.5;
        let v = model.params.zeros_like();
        let state = OptimizerState {
            m,
            v,
            step: 17,
            epoch: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hsck");
        save(&path, &model, "h", Some(&state)).unwrap();
        let (_, _, opt) = load(&path).unwrap();
        let opt = opt.unwrap();
        assert_eq!(opt.step, 17);
        assert_eq!(opt.epoch, 3);
        assert_eq!(opt.m.lambda.item(), 0.5);
    }
}
