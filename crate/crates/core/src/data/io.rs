//! Directory format: `manifest.json` plus `data.bin`, a concatenation of
//! little-endian `f32` blobs. Each blob records its byte offset, value
//! count and SHA-256 digest in the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Group, Provenance, SampleRecord};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
const FORMAT: &str = "mspt-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub n_points: usize,
    pub grid: Option<(usize, usize)>,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub coord_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub precision: String,
    pub generator: Option<Provenance>,
    pub samples: Vec<SampleEntry>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let first = data.samples.first();
    let dims = first.map_or((0, 0, 0), |s| (s.coord_dim, s.in_dim, s.out_dim));
    let mut bin = Vec::new();
    let mut entries = Vec::with_capacity(data.len());
    for s in &data.samples {
        s.validate()?;
        if (s.coord_dim, s.in_dim, s.out_dim) != dims {
            return Err(Error::Input("samples disagree on channel dimensions".into()));
        }
        let groups: Vec<f32> = s.groups.iter().map(|g| g.code()).collect();
        let mut blobs = Vec::new();
        for (name, values) in [
            ("coords", &s.coords),
            ("in_fields", &s.in_fields),
            ("targets", &s.targets),
            ("groups", &groups),
        ] {
            if name == "groups" && values.is_empty() {
                continue;
            }
            let start = bin.len();
            for v in values.iter() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            blobs.push(BlobEntry {
                name: name.into(),
                offset: start as u64,
                len: values.len() as u64,
                sha256: digest(&bin[start..]),
            });
        }
        entries.push(SampleEntry {
            n_points: s.n(),
            grid: s.grid,
            blobs,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        n_samples: data.len(),
        coord_dim: dims.0,
        in_dim: dims.1,
        out_dim: dims.2,
        precision: "f32".into(),
        generator: data.provenance.clone(),
        samples: entries,
    };
    std::fs::write(dir.join(DATA_FILE), &bin)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_blob(bin: &[u8], b: &BlobEntry) -> Result<Vec<f32>> {
    let start = b.offset as usize;
    let bytes = start
        .checked_add(4 * b.len as usize)
        .and_then(|end| bin.get(start..end))
        .ok_or_else(|| Error::Corrupt(format!("blob {} extends past the end of {DATA_FILE}", b.name)))?;
    if digest(bytes) != b.sha256 {
        return Err(Error::Corrupt(format!("checksum mismatch in blob {}", b.name)));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = std::fs::read(dir.join(MANIFEST))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let m: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION || m.precision != "f32" {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{} ({})",
            m.format, m.version, m.precision
        )));
    }
    if m.samples.len() != m.n_samples {
        return Err(Error::Format("manifest sample count disagrees with its entries".into()));
    }
    let bin = if m.n_samples == 0 {
        Vec::new()
    } else {
        std::fs::read(dir.join(DATA_FILE))
            .map_err(|e| Error::Corrupt(format!("cannot read {DATA_FILE}: {e}")))?
    };
    let mut last_end = 0u64;
    let mut samples = Vec::with_capacity(m.n_samples);
    for e in &m.samples {
        let mut s = SampleRecord {
            coords: Vec::new(),
            in_fields: Vec::new(),
            targets: Vec::new(),
            coord_dim: m.coord_dim,
            in_dim: m.in_dim,
            out_dim: m.out_dim,
            groups: Vec::new(),
            grid: e.grid,
        };
        for b in &e.blobs {
            if b.offset < last_end {
                return Err(Error::Format("blob offsets are not increasing".into()));
            }
            last_end = b.offset + 4 * b.len;
            let values = read_blob(&bin, b)?;
            match b.name.as_str() {
                "coords" => s.coords = values,
                "in_fields" => s.in_fields = values,
                "targets" => s.targets = values,
                "groups" => {
                    s.groups = values.into_iter().map(Group::from_code).collect::<Result<_>>()?
                }
                other => return Err(Error::Format(format!("unknown blob {other}"))),
            }
        }
        if s.n() != e.n_points {
            return Err(Error::Format("sample point count disagrees with its blobs".into()));
        }
        s.validate().map_err(|e| Error::Format(e.to_string()))?;
        samples.push(s);
    }
    Ok(Dataset {
        samples,
        provenance: m.generator,
    })
}
