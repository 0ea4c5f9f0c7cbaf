//! Checkpoint directory: a text manifest plus one little-endian f64 blob.
//!
//! `manifest.txt` has one line per parameter, `name shape dtype offset`,
//! with the shape written as `AxBxC` and the offset in bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
const HEADER: &str = "# otsnet checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    fn bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * 8
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn write_manifest(store: &ParamStore) -> String {
    let mut out = format!("{HEADER}\n");
    let mut offset = 0;
    for p in store.iter() {
        out.push_str(&format!("{} {} f64 {offset}\n", p.name, shape_str(p.value.shape())));
        offset += p.value.len() * 8;
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Checkpoint("manifest header missing".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Checkpoint(format!("malformed manifest line `{line}`"));
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, dtype, offset] = f[..] else { return Err(bad()) };
            if dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let shape = if shape == "scalar" {
                Vec::new()
            } else {
                shape.split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
            };
            Ok(ManifestEntry { name: name.into(), shape, offset: offset.parse().map_err(|_| bad())? })
        })
        .collect()
}

pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(store.num_elements() * 8);
    for p in store.iter() {
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST), write_manifest(store))?;
    let mut f = fs::File::create(dir.join(WEIGHTS))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Loads values into a store with the same layout. The first tensor whose
/// name, shape or extent disagrees is named in the error.
pub fn load(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let entries = parse_manifest(&manifest)?;
    let blob =
        fs::read(dir.join(WEIGHTS)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(WEIGHTS).display())))?;
    if entries.len() != store.len() {
        let first = store.iter().zip(&entries).find(|(p, e)| p.name != e.name);
        let name = match first {
            Some((p, _)) => p.name.clone(),
            None => store.iter().nth(entries.len().min(store.len())).map_or_else(
                || entries[store.len()].name.clone(),
                |p| p.name.clone(),
            ),
        };
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}; first mismatch at {name}",
            entries.len(),
            store.len()
        )));
    }
    let expected: usize = entries.iter().map(ManifestEntry::bytes).sum();
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!("weights blob is {} bytes, manifest describes {expected}", blob.len())));
    }
    let mut values = Vec::with_capacity(entries.len());
    for (p, e) in store.iter().zip(&entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: model expects {} {:?}, checkpoint has {} {:?}",
                p.name,
                p.name,
                p.value.shape(),
                e.name,
                e.shape
            )));
        }
        if e.offset + e.bytes() > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {}: offset past end of blob", e.name)));
        }
        let data: Vec<f64> = blob[e.offset..e.offset + e.bytes()]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        values.push(Tensor::new(&e.shape, data)?);
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.set_value(id, v)?;
    }
    Ok(())
}
