//! C-STS records: JSONL ingest, validation, seeded validation/test splits and
//! rating normalization.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

/// Validation share used when splitting a labelled pool into validation and test.
pub const DEFAULT_VALIDATION_RATIO: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("record {id}: rating {rating} outside [1, 5]")]
    RatingOutOfRange { id: String, rating: f64 },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labelled instance: two sentences compared under a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstsRecord {
    pub id: String,
    pub sentence1: String,
    pub sentence2: String,
    pub condition: String,
    /// Human rating on the original 1–5 scale.
    #[serde(rename = "label")]
    pub rating: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

#[derive(Deserialize)]
struct RawLine {
    #[serde(default)]
    id: Option<String>,
    sentence1: String,
    sentence2: String,
    condition: String,
    label: f64,
}

impl CstsRecord {
    fn validate(&self, line: usize) -> Result<(), DatasetError> {
        for (name, text) in [
            ("sentence1", &self.sentence1),
            ("sentence2", &self.sentence2),
            ("condition", &self.condition),
        ] {
            if text.trim().is_empty() {
                return Err(DatasetError::MalformedLine {
                    line,
                    reason: format!("field {name} is empty"),
                });
            }
        }
        check_rating(&self.id, self.rating)
    }
}

fn check_rating(id: &str, rating: f64) -> Result<(), DatasetError> {
    if !(MIN_RATING..=MAX_RATING).contains(&rating) {
        return Err(DatasetError::RatingOutOfRange {
            id: id.to_string(),
            rating,
        });
    }
    Ok(())
}

/// Loads a dataset file. Line numbers in errors are 1-based; synthesized ids
/// are the 0-based line index.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<CstsRecord>, DatasetError> {
    match format {
        DatasetFormat::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            parse_jsonl(reader)
        }
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<CstsRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: index + 1,
                reason: e.to_string(),
            })?;
        let record = CstsRecord {
            id: raw.id.unwrap_or_else(|| index.to_string()),
            sentence1: raw.sentence1,
            sentence2: raw.sentence2,
            condition: raw.condition,
            rating: raw.label,
        };
        record.validate(index + 1)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as JSONL with keys `id, sentence1, sentence2, condition, label`.
pub fn write_dataset(records: &[CstsRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Maps a rating from [1, 5] onto [0, 1].
pub fn normalize_rating(rating: f64) -> Result<f64, DatasetError> {
    check_rating("", rating)?;
    Ok((rating - MIN_RATING) / (MAX_RATING - MIN_RATING))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CstsRecord>,
    pub validation: Vec<CstsRecord>,
    pub test: Vec<CstsRecord>,
    pub seed: u64,
}

/// Number of records that go to the first part of a split: `ceil(ratio * n)`.
///
/// The product is nudged down by a few ulps before the ceiling so that exact
/// shares such as `0.7 * 10` do not round up to the next integer.
pub fn head_count(n: usize, ratio: f64) -> usize {
    let exact = ratio * n as f64;
    let count = (exact - exact.abs() * 4.0 * f64::EPSILON).ceil();
    (count.max(0.0) as usize).min(n)
}

fn shuffled(records: &[CstsRecord], seed: u64) -> Vec<CstsRecord> {
    let mut out = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

/// Seeded shuffle, then the first `ceil(ratio * n)` records go to validation
/// and the rest to test. `train` is left empty.
pub fn split_dataset(
    records: &[CstsRecord],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut pool = shuffled(records, seed);
    let test = pool.split_off(head_count(pool.len(), ratio));
    Ok(DatasetSplit {
        train: Vec::new(),
        validation: pool,
        test,
        seed,
    })
}

/// Carves a training share off a single pool, then splits the remainder into
/// validation and test as [`split_dataset`] does. Used when no separate
/// training file exists (synthetic benchmarks).
pub fn split_with_train(
    records: &[CstsRecord],
    train_fraction: f64,
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidRatio(train_fraction));
    }
    let mut pool = shuffled(records, seed);
    let holdout = pool.split_off(head_count(pool.len(), train_fraction));
    if holdout.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut split = split_dataset(&holdout, ratio, seed.wrapping_add(1))?;
    split.train = pool;
    split.seed = seed;
    Ok(split)
}
