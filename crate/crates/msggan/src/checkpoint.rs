//! Versioned archive files: a JSON manifest followed by raw little-endian
//! f32 blocks keyed by canonical names. Used for training checkpoints and
//! for the per-epoch fixed-latent snapshots behind the stability metric.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch_spec::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 8] = b"MSGGANCK";
const SNAP_MAGIC: &[u8; 8] = b"MSGGANSN";

#[derive(Serialize, Deserialize, Clone, PartialEq, Eq, Debug)]
struct BlockEntry {
    name: String,
    shape: [usize; 4],
}

fn block_entries(blocks: &BTreeMap<String, Tensor<f32>>) -> Vec<BlockEntry> {
    blocks.iter().map(|(n, t)| BlockEntry { name: n.clone(), shape: t.shape().0 }).collect()
}

/// Writes magic, version, manifest length + bytes, then every block's raw
/// f32 data in manifest order.
fn write_archive(
    path: &Path,
    magic: &[u8; 8],
    manifest: &[u8],
    blocks: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(manifest)?;
    for t in blocks.values() {
        let mut bytes = Vec::with_capacity(t.data().len() * 4);
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads an archive written by [`write_archive`]; the entry list must come
/// from the parsed manifest.
fn read_archive(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, fs::File)> {
    let mut f = fs::File::open(path)?;
    let mut got_magic = [0u8; 8];
    f.read_exact(&mut got_magic)?;
    if &got_magic != magic {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: wrong file signature",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    f.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: format version {} (this build reads {})",
            path.display(),
            version,
            FORMAT_VERSION
        )));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    f.read_exact(&mut manifest)?;
    Ok((manifest, f))
}

fn read_blocks(f: &mut fs::File, entries: &[BlockEntry]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut blocks = BTreeMap::new();
    for e in entries {
        let shape = Shape(e.shape);
        let mut bytes = vec![0u8; shape.numel() * 4];
        f.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if blocks.insert(e.name.clone(), Tensor::from_vec(shape, data)).is_some() {
            return Err(Error::IncompatibleCheckpoint(format!("duplicate block '{}'", e.name)));
        }
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} trailing bytes after the last block",
            rest.len()
        )));
    }
    Ok(blocks)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    spec: ArchitectureSpec,
    config_hash: u64,
    seed: u64,
    equalized_lr: bool,
    step: u64,
    real_images_shown: u64,
    epoch: u64,
    batch_in_epoch: u64,
    blocks: Vec<BlockEntry>,
}

/// Full training state: counters, the resolved architecture, and every
/// parameter / optimizer-moment / latent block. RNG state is implicit:
/// streams are re-derived from (seed, purpose, counter).
#[derive(Clone, PartialEq, Debug)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub config_hash: u64,
    pub seed: u64,
    pub equalized_lr: bool,
    pub step: u64,
    pub real_images_shown: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub blocks: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            config_hash: self.config_hash,
            seed: self.seed,
            equalized_lr: self.equalized_lr,
            step: self.step,
            real_images_shown: self.real_images_shown,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            blocks: block_entries(&self.blocks),
        };
        write_archive(path, CKPT_MAGIC, &serde_json::to_vec(&manifest)?, &self.blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, mut f) = read_archive(path, CKPT_MAGIC)?;
        let m: CheckpointManifest = serde_json::from_slice(&manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "manifest format version {} (this build reads {})",
                m.format_version, FORMAT_VERSION
            )));
        }
        let blocks = read_blocks(&mut f, &m.blocks)?;
        Ok(Checkpoint {
            spec: m.spec,
            config_hash: m.config_hash,
            seed: m.seed,
            equalized_lr: m.equalized_lr,
            step: m.step,
            real_images_shown: m.real_images_shown,
            epoch: m.epoch,
            batch_in_epoch: m.batch_in_epoch,
            blocks,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    format_version: u32,
    epoch: u64,
    latents_fingerprint: u64,
    blocks: Vec<BlockEntry>,
}

/// Images generated from the fixed evaluation latents at one epoch boundary,
/// keyed by resolution. The fingerprint ties snapshots to one latent set.
#[derive(Clone, PartialEq, Debug)]
pub struct EpochSnapshot {
    pub epoch: u64,
    pub latents_fingerprint: u64,
    pub images: BTreeMap<usize, Tensor<f32>>,
}

fn scale_block_name(resolution: usize) -> String {
    format!("scale_{:06}", resolution)
}

impl EpochSnapshot {
    pub fn save(&self, path: &Path) -> Result<()> {
        let blocks: BTreeMap<String, Tensor<f32>> =
            self.images.iter().map(|(&r, t)| (scale_block_name(r), t.clone())).collect();
        let manifest = SnapshotManifest {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            latents_fingerprint: self.latents_fingerprint,
            blocks: block_entries(&blocks),
        };
        write_archive(path, SNAP_MAGIC, &serde_json::to_vec(&manifest)?, &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, mut f) = read_archive(path, SNAP_MAGIC)?;
        let m: SnapshotManifest = serde_json::from_slice(&manifest)?;
        let blocks = read_blocks(&mut f, &m.blocks)?;
        let mut images = BTreeMap::new();
        for (name, t) in blocks {
            let r: usize = name
                .strip_prefix("scale_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("bad block name '{name}'")))?;
            images.insert(r, t);
        }
        Ok(EpochSnapshot { epoch: m.epoch, latents_fingerprint: m.latents_fingerprint, images })
    }
}
