//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//! `"IMNN"` magic · `u16` version · `u32` config-JSON length · config JSON ·
//! every trainable tensor (canonical order) as raw `f32` · the six
//! BatchNorm running means/variances · one optimizer flag byte · optional
//! Adam state (step count, then first/second moments in canonical order).
//! Tensor shapes are implied by the config, so the byte budget is exact;
//! trailing bytes are rejected. Round-trips are bit-exact.

use super::model::{ModelConfig, ModelParams};
use super::optim::AdamState;
use super::tensor::Tensor;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"IMNN";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("malformed config block: {0}")]
    BadConfig(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

/// A loaded or about-to-be-saved model snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|_| CheckpointError::Truncated)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(cp: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg_json =
        serde_json::to_string(&cp.config).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    out.write_all(cfg_json.as_bytes())?;
    for t in cp.params.trainable() {
        write_f32s(&mut out, &t.data)?;
    }
    for st in &cp.params.bn_state {
        write_f32s(&mut out, &st.running_mean.data)?;
        write_f32s(&mut out, &st.running_var.data)?;
    }
    match &cp.adam {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.write_all(&adam.step.to_le_bytes())?;
            for t in &adam.m {
                write_f32s(&mut out, &t.data)?;
            }
            for t in &adam.v {
                write_f32s(&mut out, &t.data)?;
            }
        }
    }
    Ok(out)
}

/// Parse a checkpoint from bytes, validating magic, version, config, and
/// exact length.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(|_| CheckpointError::Truncated)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|_| CheckpointError::Truncated)?;
    let cfg_len = u32::from_le_bytes(len4) as usize;
    if r.len() < cfg_len {
        return Err(CheckpointError::Truncated);
    }
    let (cfg_bytes, rest) = r.split_at(cfg_len);
    r = rest;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // Template params give the canonical tensor shapes for this config.
    let mut params = ModelParams::<f32>::init(&config, 0);
    for t in params.trainable_mut() {
        let data = read_f32s(&mut r, t.numel())?;
        t.data = data;
    }
    for st in params.bn_state.iter_mut() {
        st.running_mean.data = read_f32s(&mut r, st.running_mean.numel())?;
        st.running_var.data = read_f32s(&mut r, st.running_var.numel())?;
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|_| CheckpointError::Truncated)?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let mut step8 = [0u8; 8];
            r.read_exact(&mut step8).map_err(|_| CheckpointError::Truncated)?;
            let shapes: Vec<Vec<usize>> =
                params.trainable().iter().map(|t| t.shape.clone()).collect();
            let read_moments = |r: &mut &[u8]| -> Result<Vec<Tensor<f32>>, CheckpointError> {
                shapes
                    .iter()
                    .map(|s| {
                        Ok(Tensor::from_vec(s, read_f32s(r, s.iter().product())?))
                    })
                    .collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(AdamState { step: u64::from_le_bytes(step8), m, v })
        }
        other => return Err(CheckpointError::BadConfig(format!("bad optimizer flag {other}"))),
    };
    if !r.is_empty() {
        return Err(CheckpointError::TrailingBytes(r.len()));
    }
    Ok(Checkpoint { config, params, adam })
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_checkpoint(cp)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::{adam_step, AdamConfig};
    use crate::nn::{mse_loss, model_backward, model_forward, RunMode};
    use crate::rng::CounterRng;

    fn trained_checkpoint(seed: u64) -> Checkpoint {
        let config = ModelConfig::default();
        let mut params = ModelParams::<f32>::init(&config, seed);
        // One real optimization step so every stored field is nontrivial.
        let mut rng = CounterRng::new(seed);
        let n = 2;
        let x = Tensor::from_vec(
            &[n, 3, 32, 64],
            (0..n * 3 * 32 * 64).map(|_| rng.range(0.0, 1.0) as f32).collect(),
        );
        let t = Tensor::from_vec(&[n, 2], vec![0.3, -0.2, 0.8, 0.1]);
        let (y, cache) = model_forward(&config, &params, &x, RunMode::Train, 5).unwrap();
        let (_, gout) = mse_loss(&y, &t).unwrap();
        let grads = model_backward(&config, &params, &cache, &gout).unwrap();
        let mut adam = AdamState::new_for(&params.trainable());
        adam_step(&mut params, &grads, &mut adam, &AdamConfig::default());
        crate::nn::apply_bn_updates(&mut params, &cache);
        Checkpoint { config, params, adam: Some(adam) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cp = trained_checkpoint(42);
        let bytes = encode_checkpoint(&cp).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cp, back);
        // Bit-exactness, not just approximate equality: re-encoding the
        // decoded checkpoint reproduces the same bytes.
        assert_eq!(bytes, encode_checkpoint(&back).unwrap());
    }

    #[test]
    fn round_trip_without_optimizer_state() {
        let mut cp = trained_checkpoint(43);
        cp.adam = None;
        let bytes = encode_checkpoint(&cp).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), cp);
    }

    #[test]
    fn file_round_trip() {
        let cp = trained_checkpoint(44);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.imnn");
        save_checkpoint(&path, &cp).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), cp);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cp = trained_checkpoint(45);
        let bytes = encode_checkpoint(&cp).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic), Err(CheckpointError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad_version),
            Err(CheckpointError::BadVersion(9))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(truncated), Err(CheckpointError::Truncated)));

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_checkpoint(&trailing),
            Err(CheckpointError::TrailingBytes(4))
        ));
    }

    #[test]
    fn loaded_params_predict_identically() {
        let cp = trained_checkpoint(46);
        let back = decode_checkpoint(&encode_checkpoint(&cp).unwrap()).unwrap();
        let x = Tensor::from_vec(
            &[1, 3, 32, 64],
            (0..3 * 32 * 64).map(|i| (i % 97) as f32 / 97.0).collect(),
        );
        let (a, _) = model_forward(&cp.config, &cp.params, &x, RunMode::Eval, 0).unwrap();
        let (b, _) = model_forward(&back.config, &back.params, &x, RunMode::Eval, 0).unwrap();
        assert_eq!(a.data, b.data);
    }
}
