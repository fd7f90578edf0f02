//! Binary checkpoint container.
//!
//! ```text
//! "MMRNCKPT" | u32 version | u64 header length | JSON header | f64 parameter blob
//! ```
//!
//! Integers and floats are little-endian. The header carries the model config,
//! normalization statistics, training metadata and a name -> (offset, shape)
//! index into the blob, where offsets count `f64` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::mmrnet::{Checkpoint, Model, ModelConfig, Normalization, TrainMeta};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMRNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: Option<Normalization>,
    meta: TrainMeta,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, DatasetError> {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for (name, value) in ckpt.model.named_values() {
        params.push(ParamEntry { name, offset: blob.len(), shape: value.shape().to_vec() });
        blob.extend_from_slice(value.data());
    }
    let header = Header { config: ckpt.model.config.clone(), norm: ckpt.norm.clone(), meta: ckpt.meta.clone(), params };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in blob {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DatasetError> {
    let bad = |m: &str| DatasetError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DatasetError::UnknownVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len || !(body.len() - header_len).is_multiple_of(8) {
        return Err(bad("truncated"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let blob: Vec<f64> =
        body[header_len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    // initial values are overwritten below, so any seed will do
    let mut model = Model::<f64>::new(header.config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| DatasetError::Checkpoint(e.to_string()))?;
    let mut slots = model.named_params_mut();
    if slots.len() != header.params.len() {
        return Err(bad("parameter count differs from the config"));
    }
    let mut used = 0;
    for ((name, param), entry) in slots.iter_mut().zip(&header.params) {
        if *name != entry.name || param.shape() != entry.shape.as_slice() {
            return Err(DatasetError::Checkpoint(format!("parameter `{}` does not match the config", entry.name)));
        }
        let n = param.value.len();
        let src = blob.get(entry.offset..entry.offset + n).ok_or_else(|| bad("parameter outside the blob"))?;
        param.value.data_mut().copy_from_slice(src);
        used += n;
    }
    if used != blob.len() {
        return Err(bad("unreferenced trailing parameters"));
    }
    Ok(Checkpoint { norm: header.norm, meta: header.meta, model })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DatasetError> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, DatasetError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmrnet::Variant;
    use crate::simworld::Track;

    fn ckpt(variant: Variant) -> Checkpoint {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            t_max: 4,
            features: 3,
            lineup_vocab: 6,
            lineup_dim: 2,
            ffn_dim: 8,
            head_hidden: 4,
            variant,
        };
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let norm = Normalization { feature_mean: vec![0.1, 0.2, 0.3], feature_std: vec![1.0, 2.0, 0.5], label_mean: 24.5, label_std: 3.25 };
        let meta = TrainMeta { label_k: 18, label_track: Track::Ts2, seed: 3, epochs: 5, best_epoch: 4, best_val_mse: 0.1 };
        Checkpoint { norm: Some(norm), meta, model }
    }

    #[test]
    fn round_trip_is_exact_for_every_variant() {
        for v in Variant::ALL {
            let c = ckpt(v);
            let bytes = encode_checkpoint(&c).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, c, "{v}");
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes, "{v}");
        }
    }

    #[test]
    fn layout_prefix() {
        let bytes = encode_checkpoint(&ckpt(Variant::Lr)).unwrap();
        assert_eq!(&bytes[..8], b"MMRNCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        // LR on 4 x 3 inputs: 12 weights and 1 bias
        assert_eq!(bytes.len() - 20 - h, 13 * 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&ckpt(Variant::Mmrnet)).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(DatasetError::UnknownVersion(2))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = ckpt(Variant::Gru);
        write_checkpoint(&path, &c).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), c);
    }
}
