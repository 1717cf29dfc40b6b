//! Versioned binary container for models, batches, and SAE snapshots.
//!
//! Layout: `[u64 LE header length][header JSON][array bytes...]`. The header
//! carries the format version, a kind tag, a semantic manifest, and ordered
//! array descriptors; array payloads follow in declared order as raw
//! little-endian values, so round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::synthgen::{ActivationBatch, FeatureModel, GeneratorParams, HierarchySpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    manifest: Value,
    arrays: Vec<ArrayDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
            ArrayData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            ArrayData::F32(v) => Ok(v),
            _ => Err(Error::format("expected f32 array")),
        }
    }
    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::format("expected f64 array")),
        }
    }
    pub fn as_u32(&self) -> Result<&[u32]> {
        match self {
            ArrayData::U32(v) => Ok(v),
            _ => Err(Error::format("expected u32 array")),
        }
    }
    pub fn as_u64(&self) -> Result<&[u64]> {
        match self {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::format("expected u64 array")),
        }
    }
}

pub struct Container {
    pub kind: String,
    pub manifest: Value,
    arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Container {
    pub fn new(kind: &str, manifest: Value) -> Self {
        Container { kind: kind.to_string(), manifest, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.to_string(), shape, data));
    }

    pub fn array(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d)
            .ok_or_else(|| Error::format(format!("array `{name}` missing from container")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, _)| s.as_slice())
            .ok_or_else(|| Error::format(format!("array `{name}` missing from container")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            manifest: self.manifest.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, shape, data)| ArrayDesc {
                    name: name.clone(),
                    dtype: data.dtype().to_string(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::format(format!("header encode: {e}")))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, _, data) in &self.arrays {
            match data {
                ArrayData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::U64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, expect_kind: &str) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(format!("header decode: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        if header.kind != expect_kind {
            return Err(Error::format(format!(
                "container kind `{}` but expected `{expect_kind}`",
                header.kind
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for desc in &header.arrays {
            let count: usize = desc.shape.iter().product();
            let data = match desc.dtype.as_str() {
                "f32" => {
                    let mut buf = vec![0u8; count * 4];
                    r.read_exact(&mut buf)?;
                    ArrayData::F32(
                        buf.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                "f64" => {
                    let mut buf = vec![0u8; count * 8];
                    r.read_exact(&mut buf)?;
                    ArrayData::F64(
                        buf.chunks_exact(8)
                            .map(|c| {
                                f64::from_le_bytes([
                                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                                ])
                            })
                            .collect(),
                    )
                }
                "u32" => {
                    let mut buf = vec![0u8; count * 4];
                    r.read_exact(&mut buf)?;
                    ArrayData::U32(
                        buf.chunks_exact(4)
                            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                "u64" => {
                    let mut buf = vec![0u8; count * 8];
                    r.read_exact(&mut buf)?;
                    ArrayData::U64(
                        buf.chunks_exact(8)
                            .map(|c| {
                                u64::from_le_bytes([
                                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                                ])
                            })
                            .collect(),
                    )
                }
                other => return Err(Error::format(format!("unknown dtype `{other}`"))),
            };
            arrays.push((desc.name.clone(), desc.shape.clone(), data));
        }
        Ok(Container { kind: header.kind, manifest: header.manifest, arrays })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    spec: HierarchySpec,
    params: GeneratorParams,
    dim: usize,
    seed: u64,
    variations: Vec<String>,
    fingerprint: String,
}

pub fn save_model(model: &FeatureModel, path: &Path) -> Result<()> {
    let manifest = serde_json::to_value(ModelManifest {
        spec: model.spec,
        params: model.params,
        dim: model.dim,
        seed: model.seed,
        variations: model.variations.clone(),
        fingerprint: model.fingerprint(),
    })
    .unwrap();
    let mut c = Container::new("feature_model", manifest);
    c.push(
        "directions",
        vec![model.num_features, model.dim],
        ArrayData::F32(model.directions.iter().copied().collect()),
    );
    let parent: Vec<u32> =
        model.parent.iter().map(|p| p.map(|v| v + 1).unwrap_or(0)).collect();
    c.push("parent", vec![parent.len()], ArrayData::U32(parent));
    c.push("root_of", vec![model.root_of.len()], ArrayData::U32(model.root_of.clone()));
    c.push(
        "firing_prob",
        vec![model.firing_prob.len()],
        ArrayData::F64(model.firing_prob.clone()),
    );
    c.push("mag_mean", vec![model.mag_mean.len()], ArrayData::F64(model.mag_mean.clone()));
    c.push("mag_std", vec![model.mag_std.len()], ArrayData::F64(model.mag_std.clone()));
    c.push("bias", vec![model.dim], ArrayData::F32(model.bias.to_vec()));
    c.write(path)
}

pub fn load_model(path: &Path) -> Result<FeatureModel> {
    let c = Container::read(path, "feature_model")?;
    let manifest: ModelManifest = serde_json::from_value(c.manifest.clone())
        .map_err(|e| Error::format(format!("model manifest: {e}")))?;
    let num_features = manifest.spec.total_features();
    let directions = Array2::from_shape_vec(
        (num_features, manifest.dim),
        c.array("directions")?.as_f32()?.to_vec(),
    )
    .map_err(|e| Error::format(format!("directions shape: {e}")))?;
    let parent: Vec<Option<u32>> = c
        .array("parent")?
        .as_u32()?
        .iter()
        .map(|&v| if v == 0 { None } else { Some(v - 1) })
        .collect();
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); num_features];
    for (f, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p as usize].push(f as u32);
        }
    }
    let model = FeatureModel {
        dim: manifest.dim,
        num_features,
        directions,
        parent,
        children,
        root_of: c.array("root_of")?.as_u32()?.to_vec(),
        firing_prob: c.array("firing_prob")?.as_f64()?.to_vec(),
        mag_mean: c.array("mag_mean")?.as_f64()?.to_vec(),
        mag_std: c.array("mag_std")?.as_f64()?.to_vec(),
        bias: Array1::from_vec(c.array("bias")?.as_f32()?.to_vec()),
        spec: manifest.spec,
        params: manifest.params,
        seed: manifest.seed,
        variations: manifest.variations,
    };
    if model.fingerprint() != manifest.fingerprint {
        return Err(Error::format("model fingerprint mismatch"));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct BatchManifest {
    n: usize,
    dim: usize,
    seed: u64,
    model_fingerprint: String,
}

pub fn save_batch(batch: &ActivationBatch, path: &Path) -> Result<()> {
    let manifest = serde_json::to_value(BatchManifest {
        n: batch.len(),
        dim: batch.dim(),
        seed: batch.seed,
        model_fingerprint: batch.model_fingerprint.clone(),
    })
    .unwrap();
    let mut c = Container::new("activation_batch", manifest);
    c.push(
        "x",
        vec![batch.len(), batch.dim()],
        ArrayData::F32(batch.x.iter().copied().collect()),
    );
    c.push("offsets", vec![batch.offsets.len()], ArrayData::U64(batch.offsets.clone()));
    c.push(
        "active_feat",
        vec![batch.active_feat.len()],
        ArrayData::U32(batch.active_feat.clone()),
    );
    c.push(
        "active_mag",
        vec![batch.active_mag.len()],
        ArrayData::F32(batch.active_mag.clone()),
    );
    c.write(path)
}

pub fn load_batch(path: &Path) -> Result<ActivationBatch> {
    let c = Container::read(path, "activation_batch")?;
    let manifest: BatchManifest = serde_json::from_value(c.manifest.clone())
        .map_err(|e| Error::format(format!("batch manifest: {e}")))?;
    let x = Array2::from_shape_vec(
        (manifest.n, manifest.dim),
        c.array("x")?.as_f32()?.to_vec(),
    )
    .map_err(|e| Error::format(format!("x shape: {e}")))?;
    Ok(ActivationBatch {
        x,
        offsets: c.array("offsets")?.as_u64()?.to_vec(),
        active_feat: c.array("active_feat")?.as_u32()?.to_vec(),
        active_mag: c.array("active_mag")?.as_f32()?.to_vec(),
        seed: manifest.seed,
        model_fingerprint: manifest.model_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_model, sample_batch, GeneratorParams, HierarchySpec};

    #[test]
    fn model_roundtrip_bit_exact() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 3 };
        let m = build_model(spec, 16, 42, GeneratorParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&m, &path).unwrap();
        let m2 = load_model(&path).unwrap();
        assert_eq!(m.directions, m2.directions);
        assert_eq!(m.parent, m2.parent);
        assert_eq!(m.children, m2.children);
        assert_eq!(m.firing_prob, m2.firing_prob);
        assert_eq!(m.bias, m2.bias);
        assert_eq!(m.fingerprint(), m2.fingerprint());
        // Re-saving yields identical bytes.
        let path2 = dir.path().join("model2.bin");
        save_model(&m2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn batch_roundtrip_bit_exact() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 3 };
        let m = build_model(spec, 16, 42, GeneratorParams::default()).unwrap();
        let b = sample_batch(&m, 32, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        save_batch(&b, &path).unwrap();
        let b2 = load_batch(&path).unwrap();
        assert_eq!(b.x, b2.x);
        assert_eq!(b.offsets, b2.offsets);
        assert_eq!(b.active_feat, b2.active_feat);
        assert_eq!(b.active_mag, b2.active_mag);
        assert_eq!(b.model_fingerprint, b2.model_fingerprint);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 3 };
        let m = build_model(spec, 16, 42, GeneratorParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&m, &path).unwrap();
        assert!(Container::read(&path, "activation_batch").is_err());
    }
}
