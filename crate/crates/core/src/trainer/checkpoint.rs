//! Checkpoint persistence: a parameter blob plus a JSON manifest.
//!
//! The blob stores every parameter by name with full f64 precision, so a
//! loaded model is bit-identical to the saved one; the manifest carries the
//! model configuration needed to rebuild the parameter skeleton and the dev
//! metric that justified keeping this checkpoint.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{ModelConfig, RetrieverModel};
use crate::error::{Error, Result};

const PARAMS_MAGIC: [u8; 4] = *b"SNDP";
const PARAMS_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Optimizer step the parameters were snapshotted at.
    pub step: u64,
    pub dev_topk: f64,
    pub fingerprint: String,
    /// Hash of the (model, training) configuration pair.
    pub config_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hex = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        use std::fmt::Write as _;
        write!(hex, "{b:02x}").expect("hex write");
    }
    hex
}

pub fn params_path(dir: &Path) -> PathBuf {
    dir.join("params.bin")
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("train_log.jsonl")
}

pub fn save_checkpoint(
    dir: &Path,
    model: &RetrieverModel,
    step: u64,
    dev_topk: f64,
    config_hash: &str,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_params(&params_path(dir), model)?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config.clone(),
        step,
        dev_topk,
        fingerprint: model.fingerprint(),
        config_hash: config_hash.to_string(),
    };
    let path = manifest_path(dir);
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Rebuilds the model and overwrites its parameters from the blob. The
/// returned model is not frozen; freeze it before using it as a teacher.
pub fn load_checkpoint(dir: &Path) -> Result<(RetrieverModel, CheckpointManifest)> {
    let path = manifest_path(dir);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }

    let mut model = RetrieverModel::new(manifest.model.clone())?;
    read_params_into(&params_path(dir), &mut model)?;

    let fp = model.fingerprint();
    if fp != manifest.fingerprint {
        return Err(Error::format(
            &path,
            format!(
                "parameter blob does not match manifest fingerprint (blob {fp}, manifest {})",
                manifest.fingerprint
            ),
        ));
    }
    Ok((model, manifest))
}

fn write_params(path: &Path, model: &RetrieverModel) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(&PARAMS_MAGIC).map_err(io)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes()).map_err(io)?;
    let count = u32::try_from(model.store.iter().count())
        .map_err(|_| Error::format(path, "too many parameters"))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;

    for (_, param) in model.store.iter() {
        let name = param.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let shape = param.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &x in param.tensor.data() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_params_into(path: &Path, model: &mut RetrieverModel) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if head[0..4] != PARAMS_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != PARAMS_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported parameter blob version {version}"),
        ));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let expected = model.store.iter().count();
    if count != expected {
        return Err(Error::format(
            path,
            format!("blob has {count} parameters, model wants {expected}"),
        ));
    }

    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(Error::format(path, "parameter name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format(path, "truncated parameter name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;

        let rank = read_u32(&mut r, path)? as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::format(path, format!("bad rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }

        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        let param = model.store.get_mut(id);
        if param.tensor.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "{name}: blob shape {shape:?} vs model shape {:?}",
                    param.tensor.shape()
                ),
            ));
        }
        let mut buf = [0u8; 8];
        for x in param.tensor.data_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated data in {name}")))?;
            *x = f64::from_le_bytes(buf);
        }
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(path, "trailing bytes after parameters")),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated field"))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;

    fn small_config() -> ModelConfig {
        ModelConfig {
            modality: Modality::Tokens { vocab_size: 10 },
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            t_max: 16,
            conv_hidden: 6,
            conv1: (4, 4),
            conv2: (3, 3),
            eps: 1e-5,
            init_seed: 3,
            use_positions: true,
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let model = RetrieverModel::new(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let saved = save_checkpoint(dir.path(), &model, 42, 0.625, "cfg-hash").unwrap();
        assert_eq!(saved.fingerprint, model.fingerprint());

        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.dev_topk, 0.625);
        assert_eq!(manifest.config_hash, "cfg-hash");
        assert_eq!(manifest.model, model.config);
        assert!(!loaded.is_frozen());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let model = RetrieverModel::new(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 1, 0.0, "h").unwrap();

        let blob = params_path(dir.path());
        let mut bytes = fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&blob, &bytes).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("fingerprint"), "{detail}")
            }
            other => panic!("expected Format error, got {other:?}"),
        }

        bytes.push(0);
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));

        fs::write(&blob, &bytes[..8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn manifest_model_mismatch_is_detected() {
        let model = RetrieverModel::new(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 1, 0.0, "h").unwrap();

        // Rewrite the blob from a model with a different seed: shapes all
        // match, values do not, so the fingerprint check must fire.
        let mut other_cfg = small_config();
        other_cfg.init_seed = 99;
        let other = RetrieverModel::new(other_cfg).unwrap();
        write_params(&params_path(dir.path()), &other).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("fingerprint"), "{detail}")
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn sha_hex_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
