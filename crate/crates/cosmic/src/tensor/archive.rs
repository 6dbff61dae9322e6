//! Tensor archive: the on-disk container for checkpoints and feature caches.
//!
//! A directory holding `manifest.json` (names, shapes, dtype, trainable
//! flags, byte ranges, free-form meta) and `tensors.bin` (concatenated
//! little-endian payloads). Round-trips are bitwise exact. Writes go to a
//! temp directory first and are renamed into place, so readers never see a
//! partial archive.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct ArchiveEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

pub fn save<T: Scalar>(
    dir: &Path,
    entries: &[ArchiveEntry<T>],
    meta: &serde_json::Value,
) -> Result<()> {
    let tmp = tmp_sibling(dir)?;
    fs::create_dir_all(&tmp)?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        entries: Vec::with_capacity(entries.len()),
        meta: meta.clone(),
    };
    let mut bin = fs::File::create(tmp.join("tensors.bin"))?;
    let mut offset = 0u64;
    for e in entries {
        let mut bytes = Vec::with_capacity(e.tensor.numel() * T::byte_width());
        for &v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        bin.write_all(&bytes)?;
        manifest.entries.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            trainable: e.trainable,
            offset,
            byte_len: bytes.len() as u64,
        });
        offset += bytes.len() as u64;
    }
    bin.sync_all()?;
    drop(bin);
    let mut mf = fs::File::create(tmp.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.sync_all()?;
    drop(mf);
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(Vec<ArchiveEntry<T>>, serde_json::Value)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "archive manifest not found at {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported archive format version {}",
            manifest.format_version
        )));
    }
    let mut bin = Vec::new();
    fs::File::open(dir.join("tensors.bin"))?.read_to_end(&mut bin)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    let w = T::byte_width();
    for e in &manifest.entries {
        if e.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "entry `{}` has dtype {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let start = e.offset as usize;
        let end = start + e.byte_len as usize;
        if end > bin.len() || e.byte_len as usize != e.shape.iter().product::<usize>() * w {
            return Err(Error::Format(format!("entry `{}` has a bad byte range", e.name)));
        }
        let data: Vec<T> = bin[start..end].chunks_exact(w).map(T::from_le_slice).collect();
        out.push(ArchiveEntry {
            name: e.name.clone(),
            tensor: Tensor::from_vec(&e.shape, data)?,
            trainable: e.trainable,
        });
    }
    Ok((out, manifest.meta))
}

pub fn load_meta(dir: &Path) -> Result<serde_json::Value> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "archive manifest not found at {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    Ok(manifest.meta)
}

/// Save a parameter store, preserving trainable flags.
pub fn save_store<T: Scalar>(dir: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    let entries: Vec<ArchiveEntry<T>> = store
        .iter()
        .map(|(_, p)| ArchiveEntry {
            name: p.name.clone(),
            tensor: p.tensor.clone(),
            trainable: p.trainable,
        })
        .collect();
    save(dir, &entries, meta)
}

/// Load archived tensors into an existing store. Every store parameter must
/// be present with a matching shape; names, shapes, or flags that disagree
/// are structural errors.
pub fn load_into_store<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<serde_json::Value> {
    let (entries, meta) = load::<T>(dir)?;
    let mut seen = 0usize;
    for e in entries {
        if let Some((id, p)) = store.by_name(&e.name) {
            if p.tensor.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint shape {:?} does not match model shape {:?} for `{}`",
                    e.tensor.shape(),
                    p.tensor.shape(),
                    e.name
                )));
            }
            store.get_mut(id).tensor = e.tensor;
            seen += 1;
        } else {
            return Err(Error::Format(format!(
                "checkpoint contains unknown parameter `{}`",
                e.name
            )));
        }
    }
    if seen != store.len() {
        return Err(Error::Format(format!(
            "checkpoint provides {seen} of {} parameters",
            store.len()
        )));
    }
    Ok(meta)
}

fn tmp_sibling(dir: &Path) -> Result<PathBuf> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::config(format!("bad archive path {}", dir.display())))?;
    Ok(parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id())))
}
