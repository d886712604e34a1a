//! On-disk formats: `.sdt` tensor files, hidden-state dumps, pruning plans
//! and toy-model checkpoints.
//!
//! `.sdt` layout, little-endian throughout:
//!
//! ```text
//! b"SDTENSR1" | rank: u32 | dims: rank x u64 | payload: product(dims) x f32
//! ```
//!
//! Values are computed in `f64` and narrowed to `f32` (round to nearest,
//! ties to even) when stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::scoring::{LayerScore, PruningPlan};
use crate::tensor::TensorF;
use crate::toymodel::{ToyConfig, ToyModel};

pub const SDT_MAGIC: &[u8; 8] = b"SDTENSR1";
pub const HASH_ALGORITHM: &str = "sha256";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_VERSION: u32 = 1;
pub const DUMP_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes `data` with shape `dims` as an `.sdt` byte stream.
pub fn encode_sdt(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(SDT_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes an `.sdt` byte stream; `name` labels errors.
pub fn decode_sdt(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..8] != SDT_MAGIC {
        return Err(Error::Format(format!("{name}: missing SDTENSR1 magic")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = rank
        .checked_mul(8)
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(format!("{name}: rank {rank} overflows")))?;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "{name}: header needs {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let raw = u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes"));
        dims.push(usize::try_from(raw).map_err(|_| {
            Error::Format(format!("{name}: dimension {raw} does not fit in memory"))
        })?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("{name}: element count overflows")))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Format(format!("{name}: byte count overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{name}: expected {expected} bytes for dims {dims:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

/// `manifest.json` of a hidden-state dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    pub version: u32,
    pub layers: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub source_model: String,
    #[serde(default)]
    pub calib_fingerprint: String,
    pub hash_algorithm: String,
    pub files: Vec<FileHash>,
    /// Producer-specific metadata (sample counts, padding policy, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn boundary_file_name(i: usize) -> String {
    format!("boundary_{i:04}.sdt")
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `boundary_0000.sdt ..= boundary_{L:04}.sdt` and `manifest.json`.
pub fn write_dump(boundaries: &BoundarySet, dir: &Path) -> Result<DumpManifest> {
    write_dump_with(boundaries, dir, BTreeMap::new())
}

pub fn write_dump_with(
    boundaries: &BoundarySet,
    dir: &Path,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<DumpManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (b, s, d) = boundaries.shape();
    let mut files = Vec::with_capacity(boundaries.boundaries().len());
    for (i, t) in boundaries.boundaries().iter().enumerate() {
        let name = boundary_file_name(i);
        let bytes = encode_sdt(t.dims(), t.data());
        write_file(&dir.join(&name), &bytes)?;
        files.push(FileHash {
            sha256: sha256_hex(&bytes),
            name,
        });
    }
    let manifest = DumpManifest {
        format: "sdt-dump".into(),
        version: DUMP_VERSION,
        layers: boundaries.layer_count(),
        batch: b,
        seq_len: s,
        hidden: d,
        source_model: boundaries.model_fingerprint.clone(),
        calib_fingerprint: boundaries.calib_fingerprint.clone(),
        hash_algorithm: HASH_ALGORITHM.into(),
        files,
        extra,
    };
    write_file(&dir.join(MANIFEST_FILE), to_pretty_json(&manifest).as_bytes())?;
    Ok(manifest)
}

pub fn read_dump_manifest(dir: &Path) -> Result<DumpManifest> {
    let manifest: DumpManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.version != DUMP_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: DUMP_VERSION,
        });
    }
    if manifest.hash_algorithm != HASH_ALGORITHM {
        return Err(Error::Integrity(format!(
            "unsupported hash algorithm {:?}",
            manifest.hash_algorithm
        )));
    }
    Ok(manifest)
}

fn verified_bytes(dir: &Path, entry: &FileHash) -> Result<Vec<u8>> {
    let path = dir.join(&entry.name);
    let bytes = read_file(&path)?;
    let actual = sha256_hex(&bytes);
    if actual != entry.sha256 {
        return Err(Error::Integrity(format!(
            "{}: sha256 {actual} does not match manifest {}",
            path.display(),
            entry.sha256
        )));
    }
    Ok(bytes)
}

/// Loads and verifies a dump, widening the stored `f32` values to `f64`.
pub fn read_dump(dir: &Path) -> Result<BoundarySet> {
    let m = read_dump_manifest(dir)?;
    if m.layers == 0 || m.files.len() != m.layers + 1 {
        return Err(Error::Format(format!(
            "manifest lists {} files for {} layers (need L + 1 with L >= 1)",
            m.files.len(),
            m.layers
        )));
    }
    let want = [m.batch, m.seq_len, m.hidden];
    let mut tensors = Vec::with_capacity(m.files.len());
    for entry in &m.files {
        let bytes = verified_bytes(dir, entry)?;
        let (dims, data) = decode_sdt(&bytes, &dir.join(&entry.name).display().to_string())?;
        if dims != want {
            return Err(Error::Shape(format!(
                "{}: dims {dims:?} differ from manifest {want:?}",
                entry.name
            )));
        }
        tensors.push(TensorF::new(dims, data.into_iter().map(f64::from).collect())?);
    }
    BoundarySet::new(tensors, m.source_model, m.calib_fingerprint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRecord {
    layer: usize,
    l_sim: f64,
    l_diff: f64,
    i_sim: f64,
    i_diff: f64,
    importance: f64,
    degenerate_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    total_layers: usize,
    k: usize,
    alpha: f64,
    metric: MetricKind,
    pruned_indices: Vec<usize>,
    ranking: Vec<usize>,
    scores: Vec<ScoreRecord>,
    calibration_fingerprint: String,
    tie_break_events: usize,
    saturation_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    excluded: Vec<usize>,
}

/// Canonical JSON text of `plan`: fixed key order, shortest round-trip floats.
pub fn plan_to_json(plan: &PruningPlan) -> String {
    let file = PlanFile {
        version: PLAN_VERSION,
        total_layers: plan.total_layers,
        k: plan.k,
        alpha: plan.alpha,
        metric: plan.metric_kind,
        pruned_indices: plan.pruned_indices.clone(),
        ranking: plan.ranking.clone(),
        scores: plan
            .scores
            .iter()
            .map(|s| ScoreRecord {
                layer: s.layer_index,
                l_sim: s.l_sim,
                l_diff: s.l_diff,
                i_sim: s.i_sim,
                i_diff: s.i_diff,
                importance: s.importance,
                degenerate_tokens: s.degenerate_token_count,
            })
            .collect(),
        calibration_fingerprint: plan.calibration_fingerprint.clone(),
        tie_break_events: plan.tie_break_events,
        saturation_count: plan.saturation_count,
        excluded: plan.excluded.clone(),
    };
    to_pretty_json(&file)
}

pub fn plan_from_json(text: &str, origin: &Path) -> Result<PruningPlan> {
    let json_err = |source| Error::Json {
        path: origin.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format(format!("{}: plan has no version", origin.display())))?;
    if version != u64::from(PLAN_VERSION) {
        return Err(Error::Version {
            found: version.min(u64::from(u32::MAX)) as u32,
            expected: PLAN_VERSION,
        });
    }
    let file: PlanFile = serde_json::from_value(value).map_err(json_err)?;
    let plan = PruningPlan {
        total_layers: file.total_layers,
        k: file.k,
        alpha: file.alpha,
        metric_kind: file.metric,
        pruned_indices: file.pruned_indices,
        ranking: file.ranking,
        calibration_fingerprint: file.calibration_fingerprint,
        tie_break_events: file.tie_break_events,
        saturation_count: file.saturation_count,
        excluded: file.excluded,
        scores: file
            .scores
            .into_iter()
            .map(|r| LayerScore {
                layer_index: r.layer,
                l_sim: r.l_sim,
                l_diff: r.l_diff,
                i_sim: r.i_sim,
                i_diff: r.i_diff,
                importance: r.importance,
                alpha: file.alpha,
                metric_kind: file.metric,
                degenerate_token_count: r.degenerate_tokens,
            })
            .collect(),
    };
    plan.validate()?;
    Ok(plan)
}

pub fn write_plan(plan: &PruningPlan, path: &Path) -> Result<()> {
    write_file(path, plan_to_json(plan).as_bytes())
}

pub fn read_plan(path: &Path) -> Result<PruningPlan> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{}: plan is not UTF-8", path.display())))?;
    plan_from_json(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

/// `manifest.json` of a toy-model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub mlp_dim: usize,
    pub max_positions: usize,
    pub seed: u64,
    pub hash_algorithm: String,
    pub tensors: Vec<TensorEntry>,
}

/// Stores every parameter tensor as `<name>.sdt` next to a manifest. Weights
/// are narrowed to `f32`.
pub fn save_checkpoint(model: &ToyModel, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, dims, data) in model.named_tensors() {
        let file = format!("{name}.sdt");
        let bytes = encode_sdt(&dims, data);
        write_file(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            sha256: sha256_hex(&bytes),
            name,
            file,
            dims,
        });
    }
    let c = model.config;
    let manifest = CheckpointManifest {
        format: "toy-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        vocab_size: c.vocab_size,
        hidden_dim: c.hidden_dim,
        layer_count: model.layers.len(),
        head_count: c.head_count,
        mlp_dim: c.mlp_dim,
        max_positions: c.max_positions,
        seed: model.seed,
        hash_algorithm: HASH_ALGORITHM.into(),
        tensors,
    };
    write_file(&dir.join(MANIFEST_FILE), to_pretty_json(&manifest).as_bytes())?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ToyModel> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: m.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = ToyConfig {
        vocab_size: m.vocab_size,
        hidden_dim: m.hidden_dim,
        layer_count: m.layer_count,
        head_count: m.head_count,
        mlp_dim: m.mlp_dim,
        max_positions: m.max_positions,
    };
    config.validate()?;
    let mut model = ToyModel::zeros(config, m.seed);
    let mut by_name: BTreeMap<&str, &TensorEntry> =
        m.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, dims, slot) in model.named_tensors_mut() {
        let entry = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        let hash = FileHash {
            name: entry.file.clone(),
            sha256: entry.sha256.clone(),
        };
        let bytes = verified_bytes(dir, &hash)?;
        let (got, data) = decode_sdt(&bytes, &entry.file)?;
        if got != dims || entry.dims != dims {
            return Err(Error::Shape(format!(
                "{name}: stored dims {got:?}, expected {dims:?}"
            )));
        }
        for (dst, src) in slot.iter_mut().zip(data) {
            *dst = f64::from(src);
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(model)
}

/// Path helper used by the CLI: `dir/manifest.json`.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdt_header_layout() {
        let bytes = encode_sdt(&[2, 1], &[1.0, -2.5]);
        assert_eq!(&bytes[..8], b"SDTENSR1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[32..36], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // halfway between 1.0 and the next f32 rounds down to the even mantissa
        let halfway = 1.0 + f64::from(f32::EPSILON) / 2.0;
        let bytes = encode_sdt(&[1], &[halfway]);
        let (_, v) = decode_sdt(&bytes, "t").unwrap();
        assert_eq!(v[0], 1.0f32);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_sdt(b"NOTMAGIC0000", "x"), Err(Error::Format(_))));
        let mut bytes = encode_sdt(&[3], &[1.0, 2.0, 3.0]);
        bytes.pop();
        match decode_sdt(&bytes, "b.sdt") {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("b.sdt") && msg.contains("expected 32 bytes"), "{msg}")
            }
            other => panic!("{other:?}"),
        }
    }
}
