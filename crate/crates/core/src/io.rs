//! Model archives: a JSON manifest plus one little-endian blob per tensor.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/tensors/<id>.bin
//! ```
//!
//! Blob kinds are `f32` (row-major floats), `mask` (bit-packed, LSB first)
//! and `bcs` (serialized [`BcsMatrix`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcs::BcsMatrix;
use crate::error::{Error, Result};
use crate::graph::{Layer, Params, TensorGraph};
use crate::mask::{Mask, MaskSet};
use crate::pruning::PruningScheme;
use crate::tensor::Tensor;

pub const FORMAT: &str = "blockprune-archive";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

const LAYER_KINDS: &[&str] = &[
    "input",
    "fc",
    "conv2d",
    "depthwise_conv2d",
    "relu",
    "max_pool",
    "avg_pool",
    "flatten",
    "add",
    "softmax_cross_entropy",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    F32,
    Mask,
    Bcs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub id: String,
    pub kind: BlobKind,
    /// Logical shape (`[rows, cols]` for BCS).
    pub shape: Vec<usize>,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningEntry {
    pub scheme: PruningScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bcs: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the producing configuration's canonical JSON.
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self { tool_version: crate::TOOL_VERSION.into(), seed, config_hash: config_hash(config)? })
    }
}

pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
    Ok(hex(&Sha256::digest(&canonical)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub pruning: BTreeMap<String, PruningEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceEntry>,
    pub provenance: Provenance,
}

impl Manifest {
    pub fn tensor(&self, id: &str) -> Result<&TensorEntry> {
        self.tensors.iter().find(|t| t.id == id).ok_or_else(|| Error::MissingBlob(id.to_string()))
    }

    /// Parses a manifest, reporting unknown layer kinds by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Archive(format!("manifest is not JSON: {e}")))?;
        if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
            for l in layers {
                let kind = l.get("kind").and_then(|k| k.as_str()).unwrap_or("<missing>");
                if !LAYER_KINDS.contains(&kind) {
                    let id = l.get("id").and_then(|i| i.as_str()).unwrap_or("<unnamed>");
                    return Err(Error::Archive(format!("unknown layer kind `{kind}` (layer `{id}`)")));
                }
            }
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| Error::Archive(format!("manifest: {e}")))?;
        if m.format != FORMAT {
            return Err(Error::Archive(format!("format `{}` is not `{FORMAT}`", m.format)));
        }
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!("unsupported format version {}", m.format_version)));
        }
        Ok(m)
    }
}

/// Reference batch and the outputs the producer computed for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub input: Tensor,
    pub output: Tensor,
}

/// In-memory archive contents.
#[derive(Clone, Debug)]
pub struct ModelArchive {
    pub graph: TensorGraph,
    pub masks: MaskSet,
    pub schemes: BTreeMap<String, PruningScheme>,
    pub bcs: BTreeMap<String, BcsMatrix>,
    pub reference: Option<Reference>,
    pub provenance: Provenance,
}

pub fn weight_id(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_id(layer: &str) -> String {
    format!("{layer}.bias")
}

pub fn mask_id(layer: &str) -> String {
    format!("{layer}.mask")
}

pub fn bcs_id(layer: &str) -> String {
    format!("{layer}.bcs")
}

pub fn blob_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(TENSOR_DIR).join(format!("{id}.bin"))
}

pub fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_bytes(bytes: &[u8], id: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Archive(format!("blob `{id}` has {} bytes, not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl ModelArchive {
    pub fn new(graph: TensorGraph, provenance: Provenance) -> Self {
        Self {
            graph,
            masks: MaskSet::new(),
            schemes: BTreeMap::new(),
            bcs: BTreeMap::new(),
            reference: None,
            provenance,
        }
    }

    /// Writes the archive; existing blobs in `dir/tensors` are overwritten.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir.join(TENSOR_DIR))?;
        let mut tensors = Vec::new();
        let mut write = |id: String, kind: BlobKind, shape: Vec<usize>, bytes: Vec<u8>| -> Result<()> {
            fs::write(blob_path(dir, &id), &bytes)?;
            tensors.push(TensorEntry {
                id,
                kind,
                shape,
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
            Ok(())
        };
        for (id, p) in self.graph.params() {
            write(weight_id(id), BlobKind::F32, p.weight.shape().to_vec(), f32_bytes(p.weight.data()))?;
            write(bias_id(id), BlobKind::F32, p.bias.shape().to_vec(), f32_bytes(p.bias.data()))?;
        }
        let mut pruning = BTreeMap::new();
        let ids: std::collections::BTreeSet<&String> =
            self.masks.keys().chain(self.schemes.keys()).chain(self.bcs.keys()).collect();
        for id in ids {
            let mut entry = PruningEntry {
                scheme: self.schemes.get(id).cloned().unwrap_or_else(PruningScheme::none),
                mask: None,
                bcs: None,
            };
            if let Some(m) = self.masks.get(id) {
                write(mask_id(id), BlobKind::Mask, m.shape().to_vec(), m.pack())?;
                entry.mask = Some(mask_id(id));
            }
            if let Some(b) = self.bcs.get(id) {
                write(bcs_id(id), BlobKind::Bcs, vec![b.rows, b.cols], b.to_bytes())?;
                entry.bcs = Some(bcs_id(id));
            }
            pruning.insert(id.clone(), entry);
        }
        let reference = match &self.reference {
            Some(r) => {
                write("reference.input".into(), BlobKind::F32, r.input.shape().to_vec(), f32_bytes(r.input.data()))?;
                write("reference.output".into(), BlobKind::F32, r.output.shape().to_vec(), f32_bytes(r.output.data()))?;
                Some(ReferenceEntry { input: "reference.input".into(), output: "reference.output".into() })
            }
            None => None,
        };
        let manifest = Manifest {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            input_shape: self.graph.input_shape().to_vec(),
            layers: self.graph.layers().to_vec(),
            tensors,
            pruning,
            reference,
            provenance: self.provenance.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Archive(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
        let manifest = Manifest::from_json(&text)?;
        let blob = |id: &str, kind: BlobKind| -> Result<(Vec<u8>, &TensorEntry)> {
            let entry = manifest.tensor(id)?;
            if entry.kind != kind {
                return Err(Error::Archive(format!("blob `{id}` is {:?}, expected {kind:?}", entry.kind)));
            }
            let path = blob_path(dir, id);
            let bytes = fs::read(&path).map_err(|_| Error::MissingBlob(id.to_string()))?;
            if bytes.len() as u64 != entry.bytes {
                return Err(Error::Archive(format!(
                    "blob `{id}` has {} bytes, manifest says {}",
                    bytes.len(),
                    entry.bytes
                )));
            }
            if !entry.sha256.is_empty() && hex(&Sha256::digest(&bytes)) != entry.sha256 {
                return Err(Error::Archive(format!("blob `{id}` checksum mismatch")));
            }
            Ok((bytes, entry))
        };
        let f32_tensor = |id: &str| -> Result<Tensor> {
            let (bytes, entry) = blob(id, BlobKind::F32)?;
            let data = f32_from_bytes(&bytes, id)?;
            Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Archive(format!("blob `{id}` disagrees with its shape: {e}")))
        };
        let mut params = BTreeMap::new();
        for layer in manifest.layers.iter().filter(|l| l.kind.has_weights()) {
            let weight = f32_tensor(&weight_id(&layer.id))?;
            let bias = f32_tensor(&bias_id(&layer.id))?;
            params.insert(layer.id.clone(), Params { weight, bias });
        }
        let graph = TensorGraph::from_parts(manifest.layers.clone(), params)?;
        if graph.input_shape() != manifest.input_shape.as_slice() {
            return Err(Error::Archive("input_shape disagrees with the input layer".into()));
        }
        let mut masks = MaskSet::new();
        let mut schemes = BTreeMap::new();
        let mut bcs = BTreeMap::new();
        for (id, entry) in &manifest.pruning {
            let layer =
                graph.layer(id).ok_or_else(|| Error::Archive(format!("pruning metadata for unknown layer `{id}`")))?;
            if let Some(mid) = &entry.mask {
                let (bytes, te) = blob(mid, BlobKind::Mask)?;
                let mask = Mask::unpack(te.shape.clone(), &bytes)?;
                let w = &graph.param(id).expect("weight layer").weight;
                if mask.shape() != w.shape() {
                    return Err(Error::Archive(format!(
                        "mask `{mid}` has shape {:?} but weights of `{id}` are {:?}",
                        mask.shape(),
                        w.shape()
                    )));
                }
                masks.insert(id.clone(), mask);
            }
            if let Some(bid) = &entry.bcs {
                let (bytes, _) = blob(bid, BlobKind::Bcs)?;
                bcs.insert(id.clone(), BcsMatrix::from_bytes(&bytes)?);
            }
            entry.scheme.validate_for(&layer.kind)?;
            schemes.insert(id.clone(), entry.scheme.clone());
        }
        let reference = match &manifest.reference {
            Some(r) => Some(Reference { input: f32_tensor(&r.input)?, output: f32_tensor(&r.output)? }),
            None => None,
        };
        Ok(Self { graph, masks, schemes, bcs, reference, provenance: manifest.provenance })
    }
}

pub fn save_model(graph: &TensorGraph, dir: &Path, provenance: Provenance) -> Result<Manifest> {
    ModelArchive::new(graph.clone(), provenance).save(dir)
}

pub fn load_model(dir: &Path) -> Result<TensorGraph> {
    Ok(ModelArchive::load(dir)?.graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_reference_model;

    #[test]
    fn mlp2_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_reference_model("mlp2", 3).unwrap();
        save_model(&g, dir.path(), Provenance::new(3, &"cfg").unwrap()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.params(), g.params());
        assert_eq!(back.layers(), g.layers());
    }

    #[test]
    fn missing_blob_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_reference_model("mlp2", 0).unwrap();
        save_model(&g, dir.path(), Provenance::new(0, &()).unwrap()).unwrap();
        fs::remove_file(blob_path(dir.path(), "fc2.weight")).unwrap();
        match load_model(dir.path()) {
            Err(Error::MissingBlob(id)) => assert_eq!(id, "fc2.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_layer_kind_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_reference_model("mlp2", 0).unwrap();
        save_model(&g, dir.path(), Provenance::new(0, &()).unwrap()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replacen("\"relu\"", "\"batch_norm\"", 1);
        fs::write(&p, text).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("batch_norm"), "{err}");
    }
}
