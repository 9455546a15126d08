//! Dataset manifests, splitting, and run configuration.
//!
//! A manifest lists memes by reference (image path or URI plus OCR text),
//! either as JSONL objects with keys `id, image, ocr_text, label, split`
//! or as CSV with the same header columns.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub mod config;

pub use config::{BackendConfig, Config, EmbeddingConfig, Paths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "validation")]
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeRecord {
    pub id: String,
    #[serde(rename = "image", alias = "image_ref", default)]
    pub image_ref: String,
    pub ocr_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// 1-based source line, for diagnostics.
    #[serde(skip)]
    pub line: usize,
}

impl MemeRecord {
    pub fn new(id: impl Into<String>, ocr_text: impl Into<String>, label: Option<u8>) -> Self {
        Self {
            id: id.into(),
            image_ref: String::new(),
            ocr_text: ocr_text.into(),
            label,
            split: None,
            line: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<MemeRecord>,
    pub source: PathBuf,
    /// SHA-256 of the file bytes, hex.
    pub checksum: String,
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

fn check_label(label: Option<u8>, line: usize) -> Result<()> {
    match label {
        None | Some(0) | Some(1) => Ok(()),
        Some(other) => Err(schema(line, format!("label must be 0 or 1, got {other}"))),
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checksum = hex::encode(Sha256::digest(&bytes));
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let records = if is_csv {
        parse_csv(&bytes)?
    } else {
        parse_jsonl(&bytes)?
    };
    let mut seen = HashSet::new();
    for record in &records {
        if !seen.insert(record.id.as_str()) {
            return Err(Error::DuplicateId {
                id: record.id.clone(),
                line: Some(record.line),
            });
        }
    }
    Ok(Manifest {
        records,
        source: path.to_path_buf(),
        checksum,
    })
}

pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<MemeRecord>> {
    let mut records = Vec::new();
    for (i, line) in bytes.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| schema(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: MemeRecord =
            serde_json::from_str(&line).map_err(|e| schema(line_no, e.to_string()))?;
        check_label(record.label, line_no)?;
        if record.id.trim().is_empty() {
            return Err(schema(line_no, "empty id"));
        }
        record.line = line_no;
        records.push(record);
    }
    Ok(records)
}

pub fn parse_csv(bytes: &[u8]) -> Result<Vec<MemeRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| schema(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let required =
        |name: &str| column(name).ok_or_else(|| schema(1, format!("missing `{name}` column")));
    let (id_col, image_col, ocr_col) = (required("id")?, required("image")?, required("ocr_text")?);
    let (label_col, split_col) = (column("label"), column("split"));

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            schema(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let cell = |col: Option<usize>| {
            col.and_then(|c| row.get(c))
                .map(str::trim)
                .filter(|s| !s.is_empty())
        };
        let label = cell(label_col)
            .map(|s| {
                s.parse::<u8>()
                    .map_err(|_| schema(line, format!("invalid label `{s}`")))
            })
            .transpose()?;
        check_label(label, line)?;
        let split = cell(split_col)
            .map(|s| s.parse::<Split>().map_err(|e| schema(line, e)))
            .transpose()?;
        let id = cell(Some(id_col)).ok_or_else(|| schema(line, "empty id"))?;
        records.push(MemeRecord {
            id: id.to_string(),
            image_ref: row.get(image_col).unwrap_or("").trim().to_string(),
            ocr_text: row.get(ocr_col).unwrap_or("").to_string(),
            label,
            split,
            line,
        });
    }
    Ok(records)
}

pub fn write_jsonl_manifest(records: &[MemeRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1]: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partitions {
    pub train: Vec<MemeRecord>,
    pub val: Vec<MemeRecord>,
    pub test: Vec<MemeRecord>,
}

impl Partitions {
    pub fn get(&self, split: Split) -> &[MemeRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Tagged records go to their tagged partition. Untagged records are
/// shuffled with `seed` and cut at floor boundaries, remainder to train.
/// Each partition keeps manifest order.
pub fn split(records: &[MemeRecord], fractions: &SplitFractions, seed: u64) -> Result<Partitions> {
    fractions.validate()?;
    let mut parts = Partitions::default();
    let mut untagged: Vec<usize> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.split {
            Some(Split::Train) => parts.train.push(r.clone()),
            Some(Split::Val) => parts.val.push(r.clone()),
            Some(Split::Test) => parts.test.push(r.clone()),
            None => untagged.push(i),
        }
    }
    if untagged.is_empty() {
        return Ok(parts);
    }

    let n = untagged.len();
    let cut = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let (n_val, n_test) = (cut(fractions.val), cut(fractions.test));
    let n_train = n - n_val - n_test;

    let mut order = untagged;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned: Vec<(usize, Split)> = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (idx, split)
        })
        .collect();
    assigned.sort_by_key(|(idx, _)| *idx);

    // tagged records first, then untagged ones, each group in manifest order
    let mut extra = Partitions::default();
    for (idx, split) in assigned {
        let mut r = records[idx].clone();
        r.split = Some(split);
        match split {
            Split::Train => extra.train.push(r),
            Split::Val => extra.val.push(r),
            Split::Test => extra.test.push(r),
        }
    }
    parts.train.extend(extra.train);
    parts.val.extend(extra.val);
    parts.test.extend(extra.test);
    Ok(parts)
}

/// Every record in `records` must carry a label.
pub fn require_labels(records: &[MemeRecord]) -> Result<()> {
    match records.iter().find(|r| r.label.is_none()) {
        Some(r) => Err(Error::MissingLabel {
            id: r.id.clone(),
            line: r.line,
        }),
        None => Ok(()),
    }
}

const HUMOROUS: &[&str] = &[
    "so ironic that the rainbow logo lasts exactly one month",
    "lol my cat came out before I did",
    "the joke writes itself: brands discovering us every June",
    "sarcasm level: congratulating us on existing",
    "a pun so bad it had to be proud",
    "when your aunt asks about your roommate again",
    "me pretending the parade is just a long brunch line",
];

const SERIOUS: &[&str] = &[
    "join the protest at city hall this saturday",
    "equal rights are human rights",
    "memorial vigil for the victims, candles at 8pm",
    "support line open 24/7 for anyone who needs it",
    "ironic how the new law erases people from schools",
    "voter registration closes friday, check your status",
];

/// Deterministic labelled records for offline runs, `syn-NNNN` ids.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<MemeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let humorous = rng.random_bool(0.55);
            let pool = if humorous { HUMOROUS } else { SERIOUS };
            let phrase = pool[rng.random_range(0..pool.len())];
            MemeRecord {
                id: format!("syn-{i:04}"),
                image_ref: format!("images/syn-{i:04}.png"),
                ocr_text: format!("{phrase} (#{i})"),
                label: Some(u8::from(humorous)),
                split: None,
                line: i + 1,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_jsonl_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            "{\"id\":\"b\",\"image\":\"b.png\",\"ocr_text\":\"x\",\"label\":1,\"split\":\"train\"}\n\
             {\"id\":\"a\",\"image\":\"a.png\",\"ocr_text\":\"\"}\n\
             \n\
             {\"id\":\"c\",\"image_ref\":\"c.png\",\"ocr_text\":\"z\",\"label\":0,\"split\":\"validation\"}\n",
        );
        let m = load_manifest(&p).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(m.records[2].line, 4);
        assert_eq!(m.records[2].split, Some(Split::Val));
        assert_eq!(m.records[1].label, None);
        assert_eq!(m.checksum.len(), 64);
    }

    #[test]
    fn duplicate_id_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            "{\"id\":\"a\",\"image\":\"\",\"ocr_text\":\"\"}\n{\"id\":\"a\",\"image\":\"\",\"ocr_text\":\"\"}\n",
        );
        assert!(matches!(
            load_manifest(&p),
            Err(Error::DuplicateId { line: Some(2), .. })
        ));
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            "{\"id\":\"a\",\"ocr_text\":\"\"}\n{\"id\":\"b\"}\n",
        );
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Schema { line: 2, .. })
        ));
        let p = write(
            dir.path(),
            "m2.jsonl",
            "{\"id\":\"a\",\"ocr_text\":\"\",\"label\":2}\n",
        );
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn loads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "id,image,ocr_text,label,split\nm1,a.png,\"hello, world\",1,train\nm2,b.png,bye,,test\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].ocr_text, "hello, world");
        assert_eq!(m.records[1].label, None);
        assert_eq!(m.records[1].split, Some(Split::Test));
        assert_eq!(m.records[1].line, 3);
    }

    #[test]
    fn csv_missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "id,image,label\nm1,a.png,1\n");
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Schema { line: 1, .. })
        ));
        let p = write(
            dir.path(),
            "bad.csv",
            "id,image,ocr_text,label\nm1,a.png,t,yes\n",
        );
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn fraction_split_sizes() {
        let records = synthetic_records(100, 1);
        let p = split(&records, &SplitFractions::default(), 42).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (85, 5, 10));
        let mut ids: Vec<_> = p
            .train
            .iter()
            .chain(&p.val)
            .chain(&p.test)
            .map(|r| r.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert!(p.train.windows(2).all(|w| w[0].line < w[1].line));
    }

    #[test]
    fn remainder_goes_to_train() {
        let records = synthetic_records(7, 1);
        let f = SplitFractions {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let p = split(&records, &f, 0).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (5, 1, 1));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let records = synthetic_records(50, 2);
        let ids = |p: &Partitions| p.test.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        let a = split(&records, &SplitFractions::default(), 9).unwrap();
        let b = split(&records, &SplitFractions::default(), 9).unwrap();
        let c = split(&records, &SplitFractions::default(), 10).unwrap();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn predefined_tags_win() {
        let mut records = synthetic_records(10, 3);
        for (i, r) in records.iter_mut().enumerate() {
            r.split = Some(if i < 2 { Split::Test } else { Split::Train });
        }
        let f = SplitFractions {
            train: 0.0,
            val: 1.0,
            test: 0.0,
        };
        for seed in [0, 1, 2] {
            let p = split(&records, &f, seed).unwrap();
            assert_eq!((p.train.len(), p.val.len(), p.test.len()), (8, 0, 2));
        }
    }

    #[test]
    fn bad_fractions() {
        let f = SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(matches!(split(&[], &f, 0), Err(Error::Config(_))));
    }

    #[test]
    fn missing_labels_are_reported() {
        let mut records = synthetic_records(3, 0);
        records[1].label = None;
        assert!(matches!(
            require_labels(&records),
            Err(Error::MissingLabel { line: 2, .. })
        ));
    }

    #[test]
    fn synthetic_records_have_both_classes() {
        let r = synthetic_records(20, 0);
        assert!(r.iter().any(|r| r.label == Some(1)));
        assert!(r.iter().any(|r| r.label == Some(0)));
        assert_eq!(r, synthetic_records(20, 0));
    }
}
