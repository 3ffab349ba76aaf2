//! On-disk formats.
//!
//! Pools, queries and descriptors are line-delimited JSON. Probe tensors are a
//! raw little-endian `f32` payload (`probes.bin`) next to a JSON header
//! (`probes.json`). A trained head is `head.json` plus its `f64` parameters in
//! `head.bin`. Everything read here is validated and, where it carries expert
//! columns, realigned to pool order by expert id.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cscr_core::data::validate_queries;
use cscr_core::{
    Activation, Descriptor, DescriptorKind, Expert, ExpertPool, LogitProbeTensor, MlpHead, PerplexityTable,
    QueryRecord, Split,
};

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::parse(path, 0, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::parse(path, e.line(), e))
}

/// Non-blank lines parsed as `T`, with their 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| CliError::parse(path, i + 1, e)))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row).map_err(|e| CliError::parse(path, 0, e))?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRow {
    id: String,
    cost: f64,
    kind: DescriptorKind,
}

pub fn read_pool(path: &Path) -> Result<ExpertPool> {
    let rows: Vec<(usize, PoolRow)> = read_jsonl(path)?;
    for (line, r) in &rows {
        if !(r.cost.is_finite() && r.cost >= 0.0) {
            return Err(CliError::parse(path, *line, format!("expert \"{}\" has invalid cost {}", r.id, r.cost)));
        }
    }
    let experts = rows.into_iter().map(|(_, r)| Expert { id: r.id, cost: r.cost, kind: r.kind }).collect();
    ExpertPool::new(experts).map_err(|e| CliError::data(path, e))
}

pub fn write_pool(path: &Path, pool: &ExpertPool) -> Result<()> {
    write_jsonl(path, pool.experts().iter().map(|e| PoolRow { id: e.id.clone(), cost: e.cost, kind: e.kind }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRow {
    id: String,
    split: Split,
    embedding: Vec<f64>,
    quality: BTreeMap<String, f64>,
}

/// Queries with quality columns in pool order. Columns for experts outside the
/// pool are ignored; a missing column is an error.
pub fn read_queries(path: &Path, pool: &ExpertPool) -> Result<Vec<QueryRecord>> {
    let rows: Vec<(usize, QueryRow)> = read_jsonl(path)?;
    let dim = rows.first().map(|(_, r)| r.embedding.len());
    let mut records = Vec::with_capacity(rows.len());
    for (line, mut r) in rows {
        if Some(r.embedding.len()) != dim {
            return Err(CliError::parse(
                path,
                line,
                format!("query \"{}\" has embedding dimension {}, expected {}", r.id, r.embedding.len(), dim.unwrap_or(0)),
            ));
        }
        let quality = pool
            .ids()
            .map(|id| {
                r.quality.remove(id).ok_or_else(|| {
                    CliError::parse(path, line, format!("query \"{}\" is missing quality for expert \"{id}\"", r.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(QueryRecord { id: r.id, split: r.split, embedding: r.embedding, quality });
    }
    validate_queries(&records, pool.len()).map_err(|e| CliError::data(path, e))?;
    Ok(records)
}

pub fn write_queries(path: &Path, records: &[QueryRecord], pool: &ExpertPool) -> Result<()> {
    write_jsonl(
        path,
        records.iter().map(|r| QueryRow {
            id: r.id.clone(),
            split: r.split,
            embedding: r.embedding.clone(),
            quality: pool.ids().map(String::from).zip(r.quality.iter().copied()).collect(),
        }),
    )
}

/// Header of a probe payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeHeader {
    pub kind: DescriptorKind,
    pub expert_ids: Vec<String>,
    /// `[experts, probes, steps, tokens]` for logit probes, `[experts, probes]` for perplexity.
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Vocabulary ids of the token axis; logit probes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeData {
    Logit(LogitProbeTensor),
    Perplexity(PerplexityTable),
}

impl ProbeData {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            ProbeData::Logit(_) => DescriptorKind::Logit,
            ProbeData::Perplexity(_) => DescriptorKind::Perplexity,
        }
    }

    /// Restricted to the pool's experts of this kind, in pool order.
    pub fn align_to_pool(&self, pool: &ExpertPool) -> cscr_core::Result<Self> {
        Ok(match self {
            ProbeData::Logit(t) => ProbeData::Logit(t.align_to_pool(pool)?),
            ProbeData::Perplexity(t) => ProbeData::Perplexity(t.align_to_pool(pool)?),
        })
    }
}

/// `probes.bin` → `probes.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn f32_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn write_probes(bin: &Path, probes: &ProbeData) -> Result<()> {
    let (header, values) = match probes {
        ProbeData::Logit(t) => (
            ProbeHeader {
                kind: DescriptorKind::Logit,
                expert_ids: t.expert_ids().to_vec(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                token_ids: Some(t.token_ids().to_vec()),
            },
            t.probs(),
        ),
        ProbeData::Perplexity(t) => (
            ProbeHeader {
                kind: DescriptorKind::Perplexity,
                expert_ids: t.expert_ids().to_vec(),
                shape: vec![t.expert_ids().len(), t.n_probes()],
                dtype: "f32".into(),
                token_ids: None,
            },
            t.scores(),
        ),
    };
    write_bytes(bin, &f32_payload(values))?;
    write_json(&sidecar_path(bin), &header)
}

/// Reads a probe file as stored, without aligning it to a pool.
pub fn read_probes(bin: &Path) -> Result<ProbeData> {
    let head_path = sidecar_path(bin);
    let header: ProbeHeader = read_json(&head_path)?;
    let bad = |msg: String| CliError::parse(&head_path, 0, msg);
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype \"{}\"", header.dtype)));
    }
    let rank = match header.kind {
        DescriptorKind::Logit => 4,
        DescriptorKind::Perplexity => 2,
    };
    if header.shape.len() != rank {
        return Err(bad(format!("{} probes need a rank-{rank} shape, got {:?}", header.kind.as_str(), header.shape)));
    }
    if header.shape[0] != header.expert_ids.len() {
        return Err(bad(format!("shape {:?} does not match {} expert ids", header.shape, header.expert_ids.len())));
    }
    let bytes = fs::read(bin).map_err(|e| CliError::io(bin, e))?;
    let count: usize = header.shape.iter().product();
    if bytes.len() != 4 * count {
        return Err(CliError::parse(bin, 0, format!("payload holds {} bytes, shape needs {}", bytes.len(), 4 * count)));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let data = match header.kind {
        DescriptorKind::Logit => {
            let tokens = header.token_ids.ok_or_else(|| bad("logit probes need token_ids".into()))?;
            if tokens.len() != header.shape[3] {
                return Err(bad(format!("{} token ids for a token axis of {}", tokens.len(), header.shape[3])));
            }
            LogitProbeTensor::new(header.expert_ids, tokens, header.shape[1], header.shape[2], values)
                .map(ProbeData::Logit)
        }
        DescriptorKind::Perplexity => {
            PerplexityTable::new(header.expert_ids, header.shape[1], values).map(ProbeData::Perplexity)
        }
    };
    data.map_err(|e| CliError::data(bin, e))
}

/// Probe data aligned to the pool, checked against the expected kind.
pub fn load_probe_data(bin: &Path, pool: &ExpertPool, kind: DescriptorKind) -> Result<ProbeData> {
    let data = read_probes(bin)?;
    if data.kind() != kind {
        return Err(CliError::Invalid(format!(
            "{} holds {} probes, expected {}",
            bin.display(),
            data.kind().as_str(),
            kind.as_str()
        )));
    }
    data.align_to_pool(pool).map_err(|e| CliError::data(bin, e))
}

/// Descriptors in pool order. Every pool expert needs one of its declared kind;
/// descriptors of experts outside the pool are ignored.
pub fn read_descriptors(path: &Path, pool: &ExpertPool) -> Result<Vec<Descriptor>> {
    let rows: Vec<(usize, Descriptor)> = read_jsonl(path)?;
    let mut by_id: HashMap<String, (usize, Descriptor)> = HashMap::new();
    for (line, d) in rows {
        if by_id.contains_key(&d.expert_id) {
            return Err(CliError::parse(path, line, format!("duplicate descriptor for \"{}\"", d.expert_id)));
        }
        by_id.insert(d.expert_id.clone(), (line, d));
    }
    pool.experts()
        .iter()
        .map(|e| {
            let (line, d) = by_id
                .remove(&e.id)
                .ok_or_else(|| CliError::data(path, cscr_core::Error::MissingExpert(e.id.clone())))?;
            if d.kind != e.kind {
                return Err(CliError::parse(
                    path,
                    line,
                    format!("descriptor for \"{}\" is {}, pool says {}", e.id, d.kind.as_str(), e.kind.as_str()),
                ));
            }
            Descriptor::new(d.expert_id, d.kind, d.vector).map_err(|err| CliError::parse(path, line, err))
        })
        .collect()
}

pub fn write_descriptors(path: &Path, descriptors: &[Descriptor]) -> Result<()> {
    write_jsonl(path, descriptors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadHeader {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// Parameter order: `W1, b1, W2, b2`, weights row-major.
    pub layout: String,
    pub dtype: String,
    pub sha256: String,
}

const HEAD_LAYOUT: &str = "w1,b1,w2,b2";

pub fn write_head(dir: &Path, head: &MlpHead) -> Result<()> {
    let bytes: Vec<u8> = head.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    let header = HeadHeader {
        input_dim: head.input_dim(),
        hidden_dim: head.hidden_dim(),
        output_dim: head.output_dim(),
        activation: head.activation(),
        layout: HEAD_LAYOUT.into(),
        dtype: "f64".into(),
        sha256: sha256_hex(&bytes),
    };
    write_bytes(&dir.join("head.bin"), &bytes)?;
    write_json(&dir.join("head.json"), &header)
}

pub fn read_head(dir: &Path) -> Result<MlpHead> {
    let head_path = dir.join("head.json");
    let bin = dir.join("head.bin");
    let h: HeadHeader = read_json(&head_path)?;
    if h.dtype != "f64" || h.layout != HEAD_LAYOUT {
        return Err(CliError::parse(&head_path, 0, "unsupported checkpoint layout or dtype"));
    }
    let bytes = fs::read(&bin).map_err(|e| CliError::io(&bin, e))?;
    if sha256_hex(&bytes) != h.sha256 {
        return Err(CliError::parse(&bin, 0, "checkpoint digest mismatch"));
    }
    if bytes.len() % 8 != 0 {
        return Err(CliError::parse(&bin, 0, "payload is not a whole number of f64 values"));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    MlpHead::from_params(h.input_dim, h.hidden_dim, h.output_dim, h.activation, params).map_err(|e| CliError::data(&bin, e))
}

/// Writes CSV rows; fields are never quoted, so they must not contain commas.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for row in rows {
        writeln!(w, "{row}").map_err(io)?;
    }
    w.flush().map_err(io)
}
