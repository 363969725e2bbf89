//! Checkpoint serialization: binary named-tensor snapshots with a
//! human-readable JSON sidecar.
//!
//! A checkpoint is a pair of files sharing a stem (`head_3_epoch_20.bin` /
//! `head_3_epoch_20.json`). The binary file carries the tensors; the sidecar
//! carries architecture id, class index, config hash, epoch, and metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{arch, ArchId, Network};
use crate::error::{Error, Result};
use crate::rng::SeedState;

const MAGIC: &[u8; 4] = b"GRCT";
const VERSION: u32 = 1;

/// Sidecar metadata stored next to each tensor snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchId,
    /// Class index for binary heads; `None` for the softmax baseline.
    pub class_index: Option<usize>,
    pub in_shape: (usize, usize, usize),
    pub out_dim: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub train_loss: f64,
    pub clean_metric: f64,
    pub adv_metric: f64,
}

/// Write tensors to `<stem>.bin` and metadata to `<stem>.json`.
pub fn save_checkpoint(
    stem: &Path,
    tensors: &[(String, ArrayD<f64>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    save_tensors(stem, tensors)?;
    let json_path = stem.with_extension("json");
    let mut jf = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut jf, meta)
        .map_err(|e| Error::config(format!("serializing checkpoint meta: {e}")))?;
    jf.write_all(b"\n")?;
    jf.flush()?;
    Ok(())
}

/// Write named tensors to `<stem>.bin` (no metadata sidecar).
pub fn save_tensors(stem: &Path, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bin_path = stem.with_extension("bin");
    let mut w = BufWriter::new(File::create(&bin_path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u8).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read tensors back from `<stem>.bin`.
pub fn load_tensors(stem: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let bin_path = stem.with_extension("bin");
    let mut r = BufReader::new(
        File::open(&bin_path)
            .map_err(|e| Error::load(format!("checkpoint {}: {e}", bin_path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::load(format!(
            "{} is not a checkpoint file",
            bin_path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::load(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::load("invalid tensor name encoding".to_string()))?;
        let ndim = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::load(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(tensors)
}

pub fn load_meta(stem: &Path) -> Result<CheckpointMeta> {
    let json_path = stem.with_extension("json");
    let f = File::open(&json_path)
        .map_err(|e| Error::load(format!("checkpoint meta {}: {e}", json_path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::load(format!("parsing {}: {e}", json_path.display())))
}

/// Reconstruct a network from a checkpoint stem: metadata fixes the
/// architecture, the binary file restores the tensors.
pub fn load_network(stem: &Path) -> Result<(Network, CheckpointMeta)> {
    let meta = load_meta(stem)?;
    let mut rng = SeedState::new(0);
    let mut net = arch::build_network(meta.arch, meta.in_shape, meta.out_dim, &mut rng);
    let tensors = load_tensors(stem)?;
    net.restore(&tensors);
    Ok((net, meta))
}

/// Canonical checkpoint stem `head_{k}_epoch_{e}` under `dir`.
pub fn head_stem(dir: &Path, class_index: usize, epoch: usize) -> PathBuf {
    dir.join(format!("head_{class_index}_epoch_{epoch}"))
}

/// Canonical checkpoint stem for the softmax baseline.
pub fn baseline_stem(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("baseline_epoch_{epoch}"))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
