//! Binary checkpoint with a JSON sidecar.
//!
//! The payload starts with the magic `D2SCKPT\0`, a little-endian `u32`
//! version, the completed iteration and optimizer step (`u64` each) and a
//! `u32` tensor count. Each tensor follows as four `u32` dimensions and its
//! `f32` values. Tensor order is the network parameters (single,
//! registration, multi) followed by the first and then second Adam moments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{Adam, PipelineState, TrainConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"D2SCKPT\0";
const VERSION: u32 = 1;
pub const SIDECAR_FORMAT: &str = "d2s-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub n_aux: usize,
    pub architecture: String,
    pub iterations_completed: u64,
    pub tensor_count: usize,
    pub payload_sha256: String,
}

/// Path of the sidecar belonging to a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

fn architecture(cfg: &TrainConfig) -> String {
    let n = &cfg.net;
    format!(
        "unet depth {} width {}/{} leaky {}; single 1->1, registration 2->2, multi {}->1",
        n.depth,
        n.denoiser_width,
        n.registration_width,
        n.leaky_slope,
        crate::nets::NetConfig::multi_channels(cfg.n_aux)
    )
}

fn encode(state: &PipelineState) -> Vec<u8> {
    let tensors: Vec<&Tensor<f32>> = state
        .networks
        .params()
        .chain(&state.optimizer.first_moment)
        .chain(&state.optimizer.second_moment)
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(state: &PipelineState, path: &Path) -> Result<()> {
    let payload = encode(state);
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT.into(),
        config: state.config,
        config_hash: state.config.hash(),
        n_aux: state.config.n_aux,
        architecture: architecture(&state.config),
        iterations_completed: state.iteration,
        tensor_count: 3 * state.networks.params().count(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<PipelineState> {
    let side = sidecar_path(path);
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&json).map_err(|e| Error::format(&side, format!("bad sidecar: {e}")))?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::format(&side, format!("unknown format {:?}", sidecar.format)));
    }
    let cfg = sidecar.config;
    if cfg.hash() != sidecar.config_hash {
        return Err(Error::format(
            &side,
            format!(
                "config hash mismatch: recorded {}, computed {}",
                sidecar.config_hash,
                cfg.hash()
            ),
        ));
    }
    if sidecar.n_aux != cfg.n_aux {
        return Err(Error::format(
            &side,
            format!("n_aux {} disagrees with the config value {}", sidecar.n_aux, cfg.n_aux),
        ));
    }
    cfg.validate().map_err(|e| Error::format(&side, e.to_string()))?;

    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != sidecar.payload_sha256 {
        return Err(Error::format(
            path,
            format!(
                "payload checksum mismatch: recorded {}, computed {digest}",
                sidecar.payload_sha256
            ),
        ));
    }

    let mut r = Reader {
        buf: &payload,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let iteration = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;

    let mut state = PipelineState::new(cfg).map_err(|e| Error::format(path, e.to_string()))?;
    let n_params = state.networks.params().count();
    if count != 3 * n_params || count != sidecar.tensor_count {
        return Err(Error::format(
            path,
            format!("expected {} tensors, payload holds {count}", 3 * n_params),
        ));
    }
    let expected: Vec<[usize; 4]> = state.networks.params().map(|t| t.shape()).collect();
    let mut tensors = Vec::with_capacity(count);
    for k in 0..count {
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        if shape != expected[k % n_params] {
            return Err(Error::format(
                path,
                format!("tensor {k} has shape {shape:?}, expected {:?}", expected[k % n_params]),
            ));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(shape, data));
    }
    if r.pos != payload.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }

    let second = tensors.split_off(2 * n_params);
    let first = tensors.split_off(n_params);
    for (p, t) in state.networks.params_mut().zip(tensors) {
        *p = t;
    }
    state.optimizer = Adam {
        step,
        first_moment: first,
        second_moment: second,
        ..state.optimizer
    };
    state.iteration = iteration;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::{tiny_config, tiny_stack};
    use crate::pipeline::{infer, train};

    #[test]
    fn round_trip_preserves_state_and_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let stack = tiny_stack();
        let (state, _) = train(&stack, &tiny_config()).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(
            infer(&loaded, &stack, 2, 9).unwrap(),
            infer(&state, &stack, 2, 9).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (state, _) = train(&tiny_stack(), &tiny_config()).unwrap();
        save_checkpoint(&state, &path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert_eq!(err.exit_code(), 3);

        save_checkpoint(&state, &path).unwrap();
        let side = sidecar_path(&path);
        let text = fs::read_to_string(&side)
            .unwrap()
            .replace("\"n_train\": 3", "\"n_train\": 4");
        fs::write(&side, text).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("config hash"), "{err}");

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
