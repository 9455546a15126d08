//! Append-only experience memory with exact cosine retrieval.
//!
//! Each entry pairs an embedding with the agent's rationale and the judge's
//! critique. Retrieval is a linear scan, so results are exact and ordered
//! by similarity descending with ties resolved by insertion order.
//!
//! On disk a store is JSONL: a header object `{"schema":1,"dim":d}`
//! followed by one entry object per line. A store opened with
//! [`KnowledgeBase::create`] writes every append through to its file and
//! syncs it before returning.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::MemorySignal;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Embedding(
                "embedding must have at least one component".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
            line: None,
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a.values(), b.values()) / (na * nb))
}

/// Free-form per-entry metadata (true label, predicted score, split tag).
pub type EntryMeta = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbEntry {
    pub id: String,
    pub emb: Embedding,
    pub reasoning: String,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<EntryMeta>,
}

impl KbEntry {
    pub fn split_tag(&self) -> Option<&str> {
        self.meta.as_ref()?.get("split")?.as_str()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit<'a> {
    pub entry: &'a KbEntry,
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: u32,
    dim: Option<usize>,
}

#[derive(Debug, Default)]
pub struct KnowledgeBase {
    dim: Option<usize>,
    entries: Vec<KbEntry>,
    norms: Vec<f64>,
    ids: HashMap<String, usize>,
    sink: Option<Sink>,
}

#[derive(Debug)]
struct Sink {
    path: PathBuf,
    file: File,
    header_written: bool,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            ..Self::default()
        }
    }

    /// Empty store backed by `path`, truncating any existing file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            sink: Some(Sink {
                path: path.to_path_buf(),
                file,
                header_written: false,
            }),
            ..Self::default()
        })
    }

    /// Loads `path` and keeps appending to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut kb = Self::load(path)?;
        let header_written = std::fs::metadata(path)
            .map_err(|e| Error::io(path, e))?
            .len()
            > 0;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        kb.sink = Some(Sink {
            path: path.to_path_buf(),
            file,
            header_written,
        });
        Ok(kb)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KbEntry> {
        self.ids.get(id).map(|&i| &self.entries[i])
    }

    pub fn backing_path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.path.as_path())
    }

    fn check_insert(&self, entry: &KbEntry, line: Option<usize>) -> Result<()> {
        if self.ids.contains_key(&entry.id) {
            return Err(Error::DuplicateId {
                id: entry.id.clone(),
                line,
            });
        }
        if let Some(dim) = self.dim {
            if entry.emb.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: entry.emb.dim(),
                    line,
                });
            }
        }
        Ok(())
    }

    fn push_unchecked(&mut self, entry: KbEntry) {
        self.dim.get_or_insert(entry.emb.dim());
        self.ids.insert(entry.id.clone(), self.entries.len());
        self.norms.push(entry.emb.norm());
        self.entries.push(entry);
    }

    pub fn append(&mut self, entry: KbEntry) -> Result<()> {
        self.check_insert(&entry, None)?;
        let dim = self.dim.unwrap_or(entry.emb.dim());
        if let Some(sink) = self.sink.as_mut() {
            let mut buf = Vec::new();
            if !sink.header_written {
                write_json_line(
                    &mut buf,
                    &Header {
                        schema: SCHEMA_VERSION,
                        dim: Some(dim),
                    },
                )?;
            }
            write_json_line(&mut buf, &entry)?;
            sink.file
                .write_all(&buf)
                .and_then(|_| sink.file.sync_data())
                .map_err(|e| Error::io(&sink.path, e))?;
            sink.header_written = true;
        }
        self.push_unchecked(entry);
        Ok(())
    }

    /// Exact top-K by cosine similarity. Stored zero-norm embeddings are
    /// skipped.
    pub fn retrieve_top_k(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievalHit<'_>>> {
        if k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let q_norm = query.norm();
        if q_norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let Some(dim) = self.dim else {
            return Ok(Vec::new());
        };
        if query.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: query.dim(),
                line: None,
            });
        }

        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(self.entries.len());
        for (idx, (entry, &norm)) in self.entries.iter().zip(&self.norms).enumerate() {
            if norm == 0.0 {
                log::warn!("skipping zero-norm KB entry `{}`", entry.id);
                continue;
            }
            let sim = dot(query.values(), entry.emb.values()) / (q_norm * norm);
            scored.push((sim, idx));
        }
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(similarity, idx)| RetrievalHit {
                entry: &self.entries[idx],
                similarity,
            })
            .collect())
    }

    /// Writes the whole store to `path` in the JSONL format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))?;
        out.get_ref().sync_all().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        if self.dim.is_some() || !self.entries.is_empty() {
            write_json_line(
                &mut buf,
                &Header {
                    schema: SCHEMA_VERSION,
                    dim: self.dim,
                },
            )?;
        }
        for entry in &self.entries {
            write_json_line(&mut buf, entry)?;
        }
        out.write_all(&buf).map_err(|e| Error::io("<kb>", e))
    }

    /// Reads a store written by [`save`](Self::save) or by write-through
    /// appends. A zero-byte file is an empty store.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut kb = Self::default();
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                let header: Header = serde_json::from_str(&line).map_err(|e| Error::Schema {
                    line: line_no,
                    message: format!("invalid header: {e}"),
                })?;
                if header.schema != SCHEMA_VERSION {
                    return Err(Error::Schema {
                        line: line_no,
                        message: format!("unsupported schema version {}", header.schema),
                    });
                }
                kb.dim = header.dim;
                saw_header = true;
                continue;
            }
            let entry: KbEntry = serde_json::from_str(&line).map_err(|e| Error::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
            kb.check_insert(&entry, Some(line_no))?;
            kb.push_unchecked(entry);
        }
        Ok(kb)
    }

    pub fn stats(&self) -> KbStats {
        let mut split_counts = BTreeMap::new();
        for entry in &self.entries {
            let tag = entry.split_tag().unwrap_or("untagged").to_string();
            *split_counts.entry(tag).or_insert(0usize) += 1;
        }
        let mut norms = self.norms.clone();
        norms.sort_by(f64::total_cmp);
        let norm_percentiles = if norms.is_empty() {
            None
        } else {
            Some(NormPercentiles {
                p0: percentile(&norms, 0.0),
                p25: percentile(&norms, 0.25),
                p50: percentile(&norms, 0.5),
                p75: percentile(&norms, 0.75),
                p100: percentile(&norms, 1.0),
            })
        };
        KbStats {
            size: self.entries.len(),
            dim: self.dim,
            split_counts,
            norm_percentiles,
        }
    }
}

fn write_json_line<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *buf, value).map_err(|e| Error::Parse(e.to_string()))?;
    buf.push(b'\n');
    Ok(())
}

/// Linear interpolation between closest ranks on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormPercentiles {
    pub p0: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbStats {
    pub size: usize,
    pub dim: Option<usize>,
    pub split_counts: BTreeMap<String, usize>,
    pub norm_percentiles: Option<NormPercentiles>,
}

/// The fixed map `g` from an embedding to a 3-component memory signal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Projection {
    /// L2-normalize, keep the first three components.
    #[default]
    Truncate,
    /// L2-normalize, multiply by a seeded 3×d Gaussian matrix with
    /// entries of variance 1/3.
    Random { seed: u64 },
}

impl Projection {
    pub fn project(&self, emb: &Embedding) -> Result<MemorySignal> {
        if emb.dim() < 3 {
            return Err(Error::DimensionTooSmall(emb.dim()));
        }
        let norm = emb.norm();
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        match *self {
            Projection::Truncate => {
                let v = emb.values();
                MemorySignal::new([v[0] / norm, v[1] / norm, v[2] / norm])
            }
            Projection::Random { seed } => {
                let matrix = random_matrix(seed, emb.dim());
                let mut out = [0.0; 3];
                for (row, slot) in matrix.chunks_exact(emb.dim()).zip(out.iter_mut()) {
                    *slot = dot(row, emb.values()) / norm;
                }
                MemorySignal::new(out)
            }
        }
    }
}

fn random_matrix(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0f64 / 3.0).sqrt();
    (0..3 * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

pub fn project_g(emb: &Embedding) -> Result<MemorySignal> {
    Projection::Truncate.project(emb)
}

/// Component-wise mean of `g` over the hits; `(0,0,0)` when empty.
pub fn summarize(hits: &[RetrievalHit<'_>], projection: &Projection) -> Result<MemorySignal> {
    if hits.is_empty() {
        return Ok(MemorySignal::ZERO);
    }
    let mut acc = [0.0; 3];
    for hit in hits {
        let g = projection.project(&hit.entry.emb)?.components();
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let n = hits.len() as f64;
    MemorySignal::new(acc.map(|a| a / n))
}
