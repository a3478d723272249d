//! Persistence primitives: atomic file writes, headered JSONL artifacts,
//! content hashing, and plain-text model checkpoints.
//!
//! Every artifact is plain text and line-delimited so files diff cleanly and
//! can be read from any language. A JSONL artifact starts with a header line
//! `{"format": "<kind>", "version": 1}` identifying what the records are,
//! followed by one JSON record per line. Writes go through a temp file in the
//! same directory plus an atomic rename, so a crash never leaves a partial
//! artifact under the final name. Floating-point values round-trip exactly:
//! writing a model, reading it back, and writing it again produces
//! byte-identical files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::mlp::ParamBlocks;
use crate::reward::{PairwiseRewardModel, PointwiseRewardModel, RmArch};
use crate::rl::{Policy, PolicyArch, ValueArch, ValueModel, ValueVariant};
use crate::seeds;
use crate::synthworld::Vocab;

/// Version stamped into every artifact header.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Header {
    format: String,
    version: u32,
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes `bytes` to `path` atomically: the data lands in a temp file in the
/// same directory and is renamed over the destination, so readers never see
/// a partial file. Parent directories are created as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("write_atomic: {} has no file name", path.display())))?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

fn render_jsonl<T: Serialize>(kind: &str, items: &[T]) -> Result<String> {
    let mut out = String::new();
    let header = Header { format: kind.to_string(), version: FORMAT_VERSION };
    out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?);
    out.push('\n');
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a headered JSONL artifact atomically: a `{"format", "version"}`
/// header line, then one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, items: &[T]) -> Result<()> {
    write_atomic(path, render_jsonl(kind, items)?.as_bytes())
}

fn parse_header(path: &Path, kind: &str, line: Option<&str>) -> Result<()> {
    let line = line.ok_or_else(|| {
        Error::Format(format!("{}: empty file, expected a {kind} header", path.display()))
    })?;
    let header: Header = serde_json::from_str(line).map_err(|e| {
        Error::Format(format!("{}: malformed header line: {e}", path.display()))
    })?;
    if header.format != kind {
        return Err(Error::Format(format!(
            "{}: artifact holds {:?} records, expected {kind:?}",
            path.display(),
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} unsupported (this build reads version {FORMAT_VERSION})",
            path.display(),
            header.version
        )));
    }
    Ok(())
}

/// Reads a headered JSONL artifact written by [`write_jsonl`], verifying the
/// header's kind and version before parsing records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    parse_header(path, kind, lines.next())?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}: bad record on line {}: {e}", path.display(), i + 2))
        })?;
        out.push(item);
    }
    Ok(out)
}

/// One parameter block of a checkpoint: name, shape, and row-major data.
#[derive(Debug, Serialize, Deserialize)]
struct BlockRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn block_records(model: &impl ParamBlocks, context: &str) -> Result<Vec<BlockRecord>> {
    let names = model.block_names();
    let blocks = model.blocks();
    let mut out = Vec::with_capacity(blocks.len());
    for (name, block) in names.into_iter().zip(blocks) {
        if !block.is_finite() {
            return Err(Error::Numeric(format!(
                "{context}: refusing to checkpoint non-finite values in block {name}"
            )));
        }
        out.push(BlockRecord {
            name,
            shape: block.shape().to_vec(),
            data: block.data().to_vec(),
        });
    }
    Ok(out)
}

fn apply_block_records(
    model: &mut impl ParamBlocks,
    records: &[BlockRecord],
    context: &str,
) -> Result<()> {
    let names = model.block_names();
    if records.len() != names.len() {
        return Err(Error::Format(format!(
            "{context}: checkpoint has {} blocks, model expects {}",
            records.len(),
            names.len()
        )));
    }
    for ((record, name), block) in records.iter().zip(names).zip(model.blocks_mut()) {
        if record.name != name {
            return Err(Error::Format(format!(
                "{context}: checkpoint block {:?} where model expects {name:?}",
                record.name
            )));
        }
        if record.shape != block.shape() {
            return Err(Error::Format(format!(
                "{context}: block {name} has shape {:?}, model expects {:?}",
                record.shape,
                block.shape()
            )));
        }
        if record.data.len() != block.numel() {
            return Err(Error::Format(format!(
                "{context}: block {name} carries {} values for shape {:?}",
                record.data.len(),
                record.shape
            )));
        }
        if record.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{context}: block {name} contains non-finite values"
            )));
        }
        block.data_mut().copy_from_slice(&record.data);
    }
    Ok(())
}

/// A checkpoint file is a headered JSONL artifact whose first record is the
/// model's metadata and whose remaining records are its parameter blocks.
fn save_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    model: &impl ParamBlocks,
) -> Result<()> {
    let mut out = render_jsonl::<serde_json::Value>(kind, &[])?;
    out.push_str(&serde_json::to_string(meta).map_err(|e| Error::Format(e.to_string()))?);
    out.push('\n');
    for record in block_records(model, kind)? {
        out.push_str(&serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, Vec<BlockRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    parse_header(path, kind, lines.next())?;
    let meta_line = lines.next().ok_or_else(|| {
        Error::Format(format!("{}: checkpoint has no metadata line", path.display()))
    })?;
    let meta: M = serde_json::from_str(meta_line).map_err(|e| {
        Error::Format(format!("{}: bad checkpoint metadata: {e}", path.display()))
    })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let record: BlockRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}: bad block record on line {}: {e}", path.display(), i + 3))
        })?;
        records.push(record);
    }
    Ok((meta, records))
}

const PAIRWISE_RM_KIND: &str = "pairwise-rm-checkpoint";
const POINTWISE_RM_KIND: &str = "pointwise-rm-checkpoint";
const POLICY_KIND: &str = "policy-checkpoint";
const VALUE_KIND: &str = "value-checkpoint";

#[derive(Serialize, Deserialize)]
struct RmMeta {
    content_tokens: usize,
    max_response_len: usize,
    arch: RmArch,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    content_tokens: usize,
    max_response_len: usize,
    arch: PolicyArch,
}

#[derive(Serialize, Deserialize)]
struct ValueMeta {
    variant: ValueVariant,
    content_tokens: usize,
    max_response_len: usize,
    arch: ValueArch,
}

/// Fixed-seed source for the throwaway initialization that checkpoint
/// loading immediately overwrites.
fn load_rng() -> rand_chacha::ChaCha8Rng {
    seeds::rng(0, "checkpoint-load")
}

/// Saves a pairwise reward model checkpoint.
pub fn save_pairwise_rm(path: &Path, model: &PairwiseRewardModel) -> Result<()> {
    let meta = RmMeta {
        content_tokens: model.vocab().content_size,
        max_response_len: model.max_response_len(),
        arch: model.arch(),
    };
    save_checkpoint(path, PAIRWISE_RM_KIND, &meta, model)
}

/// Loads a pairwise reward model checkpoint.
pub fn load_pairwise_rm(path: &Path) -> Result<PairwiseRewardModel> {
    let (meta, records): (RmMeta, _) = load_checkpoint(path, PAIRWISE_RM_KIND)?;
    let vocab = Vocab::new(meta.content_tokens)?;
    let mut model =
        PairwiseRewardModel::init(vocab, meta.max_response_len, meta.arch, &mut load_rng())?;
    apply_block_records(&mut model, &records, PAIRWISE_RM_KIND)?;
    Ok(model)
}

/// Saves a pointwise reward model checkpoint.
pub fn save_pointwise_rm(path: &Path, model: &PointwiseRewardModel) -> Result<()> {
    let meta = RmMeta {
        content_tokens: model.vocab().content_size,
        max_response_len: model.max_response_len(),
        arch: model.arch(),
    };
    save_checkpoint(path, POINTWISE_RM_KIND, &meta, model)
}

/// Loads a pointwise reward model checkpoint.
pub fn load_pointwise_rm(path: &Path) -> Result<PointwiseRewardModel> {
    let (meta, records): (RmMeta, _) = load_checkpoint(path, POINTWISE_RM_KIND)?;
    let vocab = Vocab::new(meta.content_tokens)?;
    let mut model =
        PointwiseRewardModel::init(vocab, meta.max_response_len, meta.arch, &mut load_rng())?;
    apply_block_records(&mut model, &records, POINTWISE_RM_KIND)?;
    Ok(model)
}

/// Saves a policy checkpoint.
pub fn save_policy(path: &Path, policy: &Policy) -> Result<()> {
    let meta = PolicyMeta {
        content_tokens: policy.vocab().content_size,
        max_response_len: policy.max_response_len(),
        arch: policy.arch(),
    };
    save_checkpoint(path, POLICY_KIND, &meta, policy)
}

/// Loads a policy checkpoint.
pub fn load_policy(path: &Path) -> Result<Policy> {
    let (meta, records): (PolicyMeta, _) = load_checkpoint(path, POLICY_KIND)?;
    let vocab = Vocab::new(meta.content_tokens)?;
    let mut policy = Policy::init(vocab, meta.max_response_len, meta.arch, &mut load_rng())?;
    apply_block_records(&mut policy, &records, POLICY_KIND)?;
    Ok(policy)
}

/// Saves a value-model checkpoint.
pub fn save_value_model(path: &Path, model: &ValueModel) -> Result<()> {
    let meta = ValueMeta {
        variant: model.variant(),
        content_tokens: model.vocab().content_size,
        max_response_len: model.max_response_len(),
        arch: model.arch(),
    };
    save_checkpoint(path, VALUE_KIND, &meta, model)
}

/// Loads a value-model checkpoint.
pub fn load_value_model(path: &Path) -> Result<ValueModel> {
    let (meta, records): (ValueMeta, _) = load_checkpoint(path, VALUE_KIND)?;
    let vocab = Vocab::new(meta.content_tokens)?;
    let mut model = ValueModel::init(
        meta.variant,
        vocab,
        meta.max_response_len,
        meta.arch,
        &mut load_rng(),
    )?;
    apply_block_records(&mut model, &records, VALUE_KIND)?;
    Ok(model)
}
