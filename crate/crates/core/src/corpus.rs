//! Corpus ingestion, normalization, persistence, and task files.
//!
//! Vector file layout (bit-exact): magic `GRLE`, u32 LE version = 1, u32 LE
//! count, u32 LE dim, then count×dim float32 LE, row-major. Metadata and task
//! files are JSON-lines, one object per row in vector-file order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VECTOR_MAGIC: [u8; 4] = *b"GRLE";
pub const VECTOR_VERSION: u32 = 1;

/// Source modality of a corpus asset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Table,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Table, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Table => "table",
            Modality::Image => "image",
        }
    }
}

/// One corpus asset: identifier, modality tag, embedding vector.
#[derive(Debug, Clone)]
pub struct EvidenceItem {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f32>,
    pub payload: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    id: String,
    modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload: Option<String>,
}

/// Immutable in-memory corpus: dense row-major matrix plus id/modality maps.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    dim: usize,
    ids: Vec<String>,
    modalities: Vec<Modality>,
    payloads: Vec<Option<String>>,
    vectors: Vec<f32>,
    id_to_row: HashMap<String, u32>,
    /// Rank of each row's id in ascending id order; used for deterministic
    /// tie-breaking in search.
    id_order: Vec<u32>,
}

impl CorpusIndex {
    /// Validate and index a stream of evidence items.
    pub fn ingest<I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = EvidenceItem>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut modalities = Vec::new();
        let mut payloads = Vec::new();
        let mut vectors = Vec::new();
        let mut id_to_row = HashMap::new();

        for (row, item) in items.into_iter().enumerate() {
            let d = *dim.get_or_insert(item.vector.len());
            if item.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: item.vector.len(),
                    context: "ingest",
                });
            }
            if item.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, context: "ingest" });
            }
            if id_to_row.insert(item.id.clone(), row as u32).is_some() {
                return Err(Error::DuplicateId(item.id));
            }
            ids.push(item.id);
            modalities.push(item.modality);
            payloads.push(item.payload);
            vectors.extend_from_slice(&item.vector);
        }

        let dim = dim.unwrap_or(0);
        let id_order = compute_id_order(&ids);
        Ok(CorpusIndex { dim, ids, modalities, payloads, vectors, id_to_row, id_order })
    }

    /// Ingest from a metadata stream (JSON lines) and a vector stream
    /// (`GRLE` layout). The streams must agree on count, and every metadata
    /// row pairs with the vector at the same position.
    pub fn ingest_readers<M: BufRead, V: Read>(meta: M, vectors: V) -> Result<Self> {
        let (dim, rows) = read_vector_stream(vectors)?;
        let mut metas = Vec::new();
        for line in meta.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetaRecord = serde_json::from_str(&line)?;
            metas.push(rec);
        }
        if metas.len() != rows.len() {
            return Err(Error::Truncated { declared: rows.len(), found: metas.len() });
        }
        let items = metas.into_iter().zip(rows).map(|(m, vector)| EvidenceItem {
            id: m.id,
            modality: m.modality,
            vector,
            payload: m.payload,
        });
        let index = Self::ingest(items)?;
        if index.len() > 0 && index.dim != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: index.dim, context: "ingest" });
        }
        Ok(index)
    }

    /// L2-normalize every row so dot product equals cosine similarity.
    pub fn normalize(mut self) -> Result<Self> {
        for row in 0..self.len() {
            let start = row * self.dim;
            let slice = &mut self.vectors[start..start + self.dim];
            let norm = slice.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroNorm(self.ids[row].clone()));
            }
            for v in slice.iter_mut() {
                *v = ((*v as f64) / norm) as f32;
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, row: u32) -> &str {
        &self.ids[row as usize]
    }

    pub fn modality(&self, row: u32) -> Modality {
        self.modalities[row as usize]
    }

    pub fn payload(&self, row: u32) -> Option<&str> {
        self.payloads[row as usize].as_deref()
    }

    pub fn vector(&self, row: u32) -> &[f32] {
        let start = row as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row_of(&self, id: &str) -> Result<u32> {
        self.id_to_row.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_to_row.contains_key(id)
    }

    pub(crate) fn id_order(&self) -> &[u32] {
        &self.id_order
    }

    /// Resolve a set of ids to a row set for search exclusion.
    pub fn rows_of<'a, I: IntoIterator<Item = &'a str>>(&self, ids: I) -> Result<HashSet<u32>> {
        ids.into_iter().map(|id| self.row_of(id)).collect()
    }

    /// Apply per-modality projections in place (rows are re-normalized).
    pub fn project(mut self, proj: &dyn Fn(Modality, &[f32]) -> Vec<f32>) -> Result<Self> {
        for row in 0..self.len() {
            let start = row * self.dim;
            let mapped = proj(self.modalities[row], &self.vectors[start..start + self.dim]);
            if mapped.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: mapped.len(),
                    context: "projection",
                });
            }
            self.vectors[start..start + self.dim].copy_from_slice(&mapped);
        }
        self.normalize()
    }

    /// Write the vector file and metadata file. Round-trips bitwise.
    pub fn save<P: AsRef<Path>, Q: AsRef<Path>>(&self, vec_path: P, meta_path: Q) -> Result<()> {
        let mut vf = BufWriter::new(File::create(vec_path)?);
        vf.write_all(&VECTOR_MAGIC)?;
        vf.write_all(&VECTOR_VERSION.to_le_bytes())?;
        vf.write_all(&(self.len() as u32).to_le_bytes())?;
        vf.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.vectors {
            vf.write_all(&v.to_le_bytes())?;
        }
        vf.flush()?;

        let mut mf = BufWriter::new(File::create(meta_path)?);
        for row in 0..self.len() {
            let rec = MetaRecord {
                id: self.ids[row].clone(),
                modality: self.modalities[row],
                payload: self.payloads[row].clone(),
            };
            serde_json::to_writer(&mut mf, &rec)?;
            mf.write_all(b"\n")?;
        }
        mf.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>, Q: AsRef<Path>>(vec_path: P, meta_path: Q) -> Result<Self> {
        let vf = BufReader::new(File::open(vec_path)?);
        let mf = BufReader::new(File::open(meta_path)?);
        Self::ingest_readers(mf, vf)
    }
}

fn compute_id_order(ids: &[String]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..ids.len() as u32).collect();
    order.sort_by(|&a, &b| ids[a as usize].cmp(&ids[b as usize]));
    let mut rank = vec![0u32; ids.len()];
    for (pos, row) in order.into_iter().enumerate() {
        rank[row as usize] = pos as u32;
    }
    rank
}

/// Parse a `GRLE` vector stream into (dim, rows).
fn read_vector_stream<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated { declared: 1, found: 0 })?;
    if magic != VECTOR_MAGIC {
        return Err(Error::BadMagic { expected: VECTOR_MAGIC, got: magic });
    }
    let version = read_u32(&mut r)?;
    if version != VECTOR_VERSION {
        return Err(Error::VersionMismatch { expected: VECTOR_VERSION, got: version });
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = count * dim * 4;
    if payload.len() < expected {
        return Err(Error::Truncated { declared: count, found: payload.len() / (dim.max(1) * 4) });
    }
    let mut rows = Vec::with_capacity(count);
    for row in 0..count {
        let start = row * dim * 4;
        let mut v = Vec::with_capacity(dim);
        for j in 0..dim {
            let off = start + j * 4;
            v.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        rows.push(v);
    }
    Ok((dim, rows))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated { declared: 1, found: 0 })?;
    Ok(u32::from_le_bytes(buf))
}

// ── retrieval tasks ─────────────────────────────────────────────────────

/// One retrieval instance: query vector, gold evidence set, partial context,
/// optional withheld target, and a question-type label.
#[derive(Debug, Clone)]
pub struct RetrievalTask {
    pub qid: String,
    pub query: Vec<f32>,
    pub gold: Vec<String>,
    pub context: Vec<String>,
    pub target: Option<String>,
    pub qtype: Option<String>,
    /// Externally supplied alignment anchor, when the task file carries one.
    pub anchor: Option<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    qid: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    query_vec: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    query_ref: Option<String>,
    gold: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qtype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_vec: Option<Vec<f32>>,
}

impl RetrievalTask {
    /// Check the structural invariants against a loaded corpus.
    pub fn validate(&self, corpus: &CorpusIndex) -> Result<()> {
        let fail = |reason: String| Error::InvalidTask { qid: self.qid.clone(), reason };
        if self.gold.is_empty() {
            return Err(fail("gold set is empty".into()));
        }
        if self.query.len() != corpus.dim() {
            return Err(fail(format!(
                "query dimension {} does not match corpus dimension {}",
                self.query.len(),
                corpus.dim()
            )));
        }
        let gold: HashSet<&str> = self.gold.iter().map(|s| s.as_str()).collect();
        if gold.len() != self.gold.len() {
            return Err(fail("duplicate ids in gold set".into()));
        }
        for id in self.gold.iter().chain(self.context.iter()) {
            if !corpus.contains(id) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        if let Some(t) = &self.target {
            if !gold.contains(t.as_str()) {
                return Err(fail(format!("target {t:?} not in gold set")));
            }
            if self.context.iter().any(|c| c == t) {
                return Err(fail(format!("target {t:?} appears in context")));
            }
            for c in &self.context {
                if !gold.contains(c.as_str()) {
                    return Err(fail(format!("context id {c:?} not in gold set")));
                }
            }
        }
        Ok(())
    }
}

/// Load tasks from a JSON-lines file, resolving `query_ref` entries against
/// the corpus and validating every instance.
pub fn load_tasks<P: AsRef<Path>>(path: P, corpus: &CorpusIndex) -> Result<Vec<RetrievalTask>> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)?;
        let query = match (rec.query_vec, &rec.query_ref) {
            (Some(v), _) => v,
            (None, Some(id)) => corpus.vector(corpus.row_of(id)?).to_vec(),
            (None, None) => {
                return Err(Error::InvalidTask {
                    qid: rec.qid,
                    reason: "task needs query_vec or query_ref".into(),
                })
            }
        };
        let task = RetrievalTask {
            qid: rec.qid,
            query,
            gold: rec.gold,
            context: rec.context.unwrap_or_default(),
            target: rec.target,
            qtype: rec.qtype,
            anchor: rec.anchor_vec,
        };
        task.validate(corpus)?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn save_tasks<P: AsRef<Path>>(path: P, tasks: &[RetrievalTask]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tasks {
        let rec = TaskRecord {
            qid: t.qid.clone(),
            query_vec: Some(t.query.clone()),
            query_ref: None,
            gold: t.gold.clone(),
            context: if t.context.is_empty() { None } else { Some(t.context.clone()) },
            target: t.target.clone(),
            qtype: t.qtype.clone(),
            anchor_vec: t.anchor.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Expand tasks with full gold sets into one completion instance per withheld
/// target. Tasks with fewer than two gold items are dropped; tasks that
/// already carry a target are rejected.
pub fn expand_leave_one_out(
    tasks: &[RetrievalTask],
    corpus: &CorpusIndex,
) -> Result<Vec<RetrievalTask>> {
    let mut out = Vec::new();
    for task in tasks {
        if task.target.is_some() {
            return Err(Error::InvalidTask {
                qid: task.qid.clone(),
                reason: "leave-one-out input must not have a preset target".into(),
            });
        }
        for id in &task.gold {
            if !corpus.contains(id) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        if task.gold.len() < 2 {
            continue;
        }
        for (i, withheld) in task.gold.iter().enumerate() {
            let context: Vec<String> =
                task.gold.iter().filter(|g| *g != withheld).cloned().collect();
            out.push(RetrievalTask {
                qid: format!("{}#{}", task.qid, i),
                query: task.query.clone(),
                gold: task.gold.clone(),
                context,
                target: Some(withheld.clone()),
                qtype: task.qtype.clone(),
                anchor: task.anchor.clone(),
            });
        }
    }
    Ok(out)
}
