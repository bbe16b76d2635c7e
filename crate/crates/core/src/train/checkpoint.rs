use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Model, NetSpec, Network};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "contrastlab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetRecord {
    pub prefix: String,
    pub input_dim: usize,
    pub spec: NetSpec,
}

impl NetRecord {
    fn of(net: &Network) -> Self {
        Self {
            prefix: net.prefix().to_string(),
            input_dim: net.input_dim(),
            spec: net.spec().clone(),
        }
    }
}

/// Location of one tensor inside the blob, in 8-byte elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub encoder: NetRecord,
    pub projector: Option<NetRecord>,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: Option<String>,
    pub seed: u64,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64
/// values in manifest order) into `dir`. Returns the manifest path.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    model: &Model,
    config_hash: Option<&str>,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in &params {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let blob_name = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: config_hash.map(str::to_string),
        seed,
        encoder: NetRecord::of(&model.encoder),
        projector: model.projector.as_ref().map(NetRecord::of),
        blob: blob_name.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    fs::write(dir.join(&blob_name), &blob)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(format_err(
            manifest_path,
            format!("unknown format {:?}", manifest.format),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path)?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(format_err(
            &blob_path,
            "blob checksum does not match manifest",
        ));
    }
    if blob.len() % 8 != 0 {
        return Err(format_err(&blob_path, "blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut enc = ParamStore::new();
    let mut proj = ParamStore::new();
    for e in &manifest.tensors {
        let slice = values
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| format_err(&blob_path, format!("`{}` runs past the blob", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec())?;
        let owner = if e.name.starts_with(&format!("{}.", manifest.encoder.prefix)) {
            &mut enc
        } else {
            &mut proj
        };
        owner.insert(e.name.clone(), t);
    }
    let r = &manifest.encoder;
    let encoder = Network::from_params(&r.prefix, r.spec.clone(), r.input_dim, enc)?;
    let projector = match &manifest.projector {
        Some(r) => Some(Network::from_params(
            &r.prefix,
            r.spec.clone(),
            r.input_dim,
            proj,
        )?),
        None if proj.is_empty() => None,
        None => {
            return Err(format_err(
                manifest_path,
                "tensors without an owning network",
            ))
        }
    };
    Ok(Checkpoint {
        model: Model::new(encoder, projector)?,
        config_hash: manifest.config_hash,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Activation, Architecture};

    #[test]
    fn round_trip_and_checksum() {
        let spec = NetSpec {
            architecture: Architecture::Mlp2 { hidden: 4 },
            output_dim: 3,
            activation: Activation::Tanh,
            normalize_output: true,
        };
        let enc = Network::init("enc", spec.clone(), 2, 1).unwrap();
        let proj = Network::init("proj", spec, 3, 1).unwrap();
        let model = Model::new(enc, Some(proj)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), "ckpt", &model, Some("abc"), 7).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.seed, 7);
        let first = fs::read(&path).unwrap();
        save_checkpoint(dir.path(), "ckpt", &model, Some("abc"), 7).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let blob = dir.path().join("ckpt.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
