//! Per-record pairs of condition-aware vectors.
//!
//! A [`CompositionVariant`] picks which stored rows feed the two sides of a
//! pair (`cond`: the condition encoded given each sentence; `sent`: each
//! sentence encoded given the condition) and whether the unconditional
//! condition embedding is subtracted from both.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize_rating, CstsRecord, DatasetError};
use crate::embstore::{read_matrix, write_matrix, EmbeddingStore, Role, RowKey, StoreError};
use crate::metrics::{cosine, MetricError};

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("missing row {0}")]
    MissingRow(RowKey),
    #[error("{} rows missing, first {}", .0.len(), .0[0])]
    MissingRows(Vec<RowKey>),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("unknown variant {0:?}; expected cond, cond-c, sent or sent-c")]
    UnknownVariant(String),
    #[error("pair file: {0}")]
    Format(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Cond,
    Sent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionVariant {
    pub base: Base,
    pub subtract_condition: bool,
}

impl CompositionVariant {
    pub const COND: Self = Self::new(Base::Cond, false);
    pub const COND_MINUS_C: Self = Self::new(Base::Cond, true);
    pub const SENT: Self = Self::new(Base::Sent, false);
    pub const SENT_MINUS_C: Self = Self::new(Base::Sent, true);
    pub const ALL: [Self; 4] = [Self::SENT_MINUS_C, Self::SENT, Self::COND_MINUS_C, Self::COND];

    pub const fn new(base: Base, subtract_condition: bool) -> Self {
        CompositionVariant {
            base,
            subtract_condition,
        }
    }

    fn roles(self) -> [Role; 2] {
        match self.base {
            Base::Cond => [Role::CondGivenS1, Role::CondGivenS2],
            Base::Sent => [Role::Sent1GivenC, Role::Sent2GivenC],
        }
    }

    /// Every store key this variant reads for `record`.
    pub fn required_keys(self, record: &CstsRecord) -> Vec<RowKey> {
        let mut keys: Vec<RowKey> = self
            .roles()
            .iter()
            .map(|&role| RowKey::conditional(record.id.clone(), role, &record.condition))
            .collect();
        if self.subtract_condition {
            keys.push(RowKey::unconditional(&record.condition));
        }
        keys
    }
}

impl fmt::Display for CompositionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.base {
            Base::Cond => "cond",
            Base::Sent => "sent",
        };
        if self.subtract_condition {
            write!(f, "{base} - c")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for CompositionVariant {
    type Err = ComposeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match compact.as_str() {
            "cond" => Ok(Self::COND),
            "cond-c" => Ok(Self::COND_MINUS_C),
            "sent" => Ok(Self::SENT),
            "sent-c" => Ok(Self::SENT_MINUS_C),
            _ => Err(ComposeError::UnknownVariant(s.to_string())),
        }
    }
}

/// The two condition-aware vectors for one record, plus its rating on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPair {
    pub record_id: String,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub rating: f64,
}

impl ComposedPair {
    pub fn dim(&self) -> usize {
        self.e1.len()
    }
}

fn lookup(store: &EmbeddingStore, key: RowKey) -> Result<&[f32], ComposeError> {
    store.lookup(&key).map_err(|e| match e {
        StoreError::MissingRow(k) => ComposeError::MissingRow(k),
        other => other.into(),
    })
}

pub fn compose_record(
    record: &CstsRecord,
    store: &EmbeddingStore,
    variant: CompositionVariant,
) -> Result<ComposedPair, ComposeError> {
    let [r1, r2] = variant.roles();
    let row1 = lookup(store, RowKey::conditional(record.id.clone(), r1, &record.condition))?;
    let row2 = lookup(store, RowKey::conditional(record.id.clone(), r2, &record.condition))?;
    let offset = if variant.subtract_condition {
        Some(lookup(store, RowKey::unconditional(&record.condition))?)
    } else {
        None
    };
    let build = |row: &[f32]| -> Vec<f64> {
        match offset {
            Some(c) => row.iter().zip(c).map(|(&x, &y)| x as f64 - y as f64).collect(),
            None => row.iter().map(|&x| x as f64).collect(),
        }
    };
    Ok(ComposedPair {
        record_id: record.id.clone(),
        e1: build(row1),
        e2: build(row2),
        rating: normalize_rating(record.rating)?,
    })
}

/// Composes every record in order. Fails without partial output if any row
/// is missing, listing all of them.
pub fn compose_dataset(
    records: &[CstsRecord],
    store: &EmbeddingStore,
    variant: CompositionVariant,
) -> Result<Vec<ComposedPair>, ComposeError> {
    let missing: Vec<RowKey> = records
        .iter()
        .flat_map(|r| variant.required_keys(r))
        .filter(|k| !store.contains(k))
        .collect();
    if !missing.is_empty() {
        return Err(ComposeError::MissingRows(missing));
    }
    records
        .iter()
        .map(|r| compose_record(r, store, variant))
        .collect()
}

/// Zero-shot C-STS score: the raw cosine of the two composed vectors.
pub fn unsupervised_score(pair: &ComposedPair) -> Result<f64, MetricError> {
    cosine(&pair.e1, &pair.e2)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairsIndex {
    variant: Option<CompositionVariant>,
    dim: usize,
    record_ids: Vec<String>,
    ratings: Vec<f64>,
}

/// Writes pairs as `dir/e1.cemb`, `dir/e2.cemb` and `dir/pairs.json`.
/// Vectors are narrowed to `f32`.
pub fn write_pairs(
    dir: &Path,
    pairs: &[ComposedPair],
    variant: Option<CompositionVariant>,
) -> Result<(), ComposeError> {
    let dim = match pairs.first() {
        Some(p) => p.dim(),
        None => return Err(ComposeError::Format("no pairs to write".into())),
    };
    std::fs::create_dir_all(dir)?;
    let mut e1 = Vec::with_capacity(pairs.len() * dim);
    let mut e2 = Vec::with_capacity(pairs.len() * dim);
    for p in pairs {
        if p.e1.len() != dim || p.e2.len() != dim {
            return Err(ComposeError::DimMismatch(dim, p.e1.len().max(p.e2.len())));
        }
        e1.extend(p.e1.iter().map(|&x| x as f32));
        e2.extend(p.e2.iter().map(|&x| x as f32));
    }
    write_matrix(&dir.join("e1.cemb"), dim, &e1)?;
    write_matrix(&dir.join("e2.cemb"), dim, &e2)?;
    let index = PairsIndex {
        variant,
        dim,
        record_ids: pairs.iter().map(|p| p.record_id.clone()).collect(),
        ratings: pairs.iter().map(|p| p.rating).collect(),
    };
    let mut out = BufWriter::new(File::create(dir.join("pairs.json"))?);
    serde_json::to_writer_pretty(&mut out, &index)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_pairs(
    dir: &Path,
) -> Result<(Vec<ComposedPair>, Option<CompositionVariant>), ComposeError> {
    let index: PairsIndex =
        serde_json::from_reader(BufReader::new(File::open(dir.join("pairs.json"))?))?;
    let (n1, d1, e1) = read_matrix(&dir.join("e1.cemb"))?;
    let (n2, d2, e2) = read_matrix(&dir.join("e2.cemb"))?;
    if d1 != index.dim || d2 != index.dim {
        return Err(ComposeError::DimMismatch(index.dim, if d1 != index.dim { d1 } else { d2 }));
    }
    let n = index.record_ids.len();
    if n1 != n || n2 != n || index.ratings.len() != n {
        return Err(ComposeError::Format(format!(
            "row counts disagree: e1 {n1}, e2 {n2}, ids {n}, ratings {}",
            index.ratings.len()
        )));
    }
    let pairs = index
        .record_ids
        .into_iter()
        .zip(index.ratings)
        .zip(e1.chunks_exact(d1).zip(e2.chunks_exact(d2)))
        .map(|((record_id, rating), (a, b))| ComposedPair {
            record_id,
            e1: a.iter().map(|&x| x as f64).collect(),
            e2: b.iter().map(|&x| x as f64).collect(),
            rating,
        })
        .collect();
    Ok((pairs, index.variant))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, condition: &str) -> CstsRecord {
        CstsRecord {
            id: id.into(),
            sentence1: "a".into(),
            sentence2: "b".into(),
            condition: condition.into(),
            rating: 3.0,
        }
    }

    fn store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3).unwrap();
        s.push("0", Role::CondGivenS1, "c", &[1.0, 2.0, 3.0]).unwrap();
        s.push("0", Role::CondGivenS2, "c", &[0.5, 0.5, 0.5]).unwrap();
        s.push("0", Role::Sent1GivenC, "c", &[3.0, 0.0, 1.0]).unwrap();
        s.push("0", Role::Sent2GivenC, "c", &[0.0, 3.0, 1.0]).unwrap();
        s.push_unconditional("c", &[0.5, 0.5, 0.5]).unwrap();
        s
    }

    #[test]
    fn identity_without_subtraction() {
        let pair = compose_record(&record("0", "c"), &store(), CompositionVariant::COND).unwrap();
        assert_eq!(pair.e1, vec![1.0, 2.0, 3.0]);
        assert_eq!(pair.e2, vec![0.5, 0.5, 0.5]);
        assert_eq!(pair.rating, 0.5);
    }

    #[test]
    fn subtraction_is_componentwise() {
        let pair =
            compose_record(&record("0", "c"), &store(), CompositionVariant::COND_MINUS_C).unwrap();
        assert_eq!(pair.e1, vec![0.5, 1.5, 2.5]);
        assert_eq!(pair.e2, vec![0.0, 0.0, 0.0]);
        assert!(matches!(unsupervised_score(&pair), Err(MetricError::ZeroVector)));
    }

    #[test]
    fn sent_variant_reads_sentence_rows() {
        let pair = compose_record(&record("0", "c"), &store(), CompositionVariant::SENT).unwrap();
        assert_eq!(pair.e1, vec![3.0, 0.0, 1.0]);
        assert!((unsupervised_score(&pair).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn missing_rows_reported_together() {
        let records = vec![record("0", "c"), record("1", "c"), record("2", "other")];
        match compose_dataset(&records, &store(), CompositionVariant::COND_MINUS_C) {
            Err(ComposeError::MissingRows(keys)) => assert_eq!(keys.len(), 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            compose_record(&records[1], &store(), CompositionVariant::COND),
            Err(ComposeError::MissingRow(_))
        ));
    }

    #[test]
    fn unsupervised_score_examples() {
        let pair = |e1: Vec<f64>, e2: Vec<f64>| ComposedPair {
            record_id: "x".into(),
            e1,
            e2,
            rating: 0.0,
        };
        assert_eq!(unsupervised_score(&pair(vec![2.0, 1.0], vec![2.0, 1.0])).unwrap(), 1.0);
        assert_eq!(unsupervised_score(&pair(vec![1.0, 0.0], vec![0.0, 1.0])).unwrap(), 0.0);
        let c = unsupervised_score(&pair(vec![1.0, 0.0], vec![1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn variant_names() {
        for v in CompositionVariant::ALL {
            assert_eq!(v.to_string().parse::<CompositionVariant>().unwrap(), v);
        }
        assert!("cond+c".parse::<CompositionVariant>().is_err());
    }

    #[test]
    fn permuted_records_give_permuted_pairs() {
        let mut s = EmbeddingStore::new(2).unwrap();
        let records: Vec<_> = (0..6).map(|i| record(&i.to_string(), "c")).collect();
        for (i, r) in records.iter().enumerate() {
            s.push(r.id.clone(), Role::CondGivenS1, "c", &[i as f32, 1.0]).unwrap();
            s.push(r.id.clone(), Role::CondGivenS2, "c", &[1.0, i as f32]).unwrap();
        }
        s.push_unconditional("c", &[0.25, -0.5]).unwrap();
        let v = CompositionVariant::COND_MINUS_C;
        let forward = compose_dataset(&records, &s, v).unwrap();
        let reversed: Vec<_> = records.iter().rev().cloned().collect();
        let mut backward = compose_dataset(&reversed, &s, v).unwrap();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![
            compose_record(&record("0", "c"), &store(), CompositionVariant::COND).unwrap(),
            compose_record(&record("0", "c"), &store(), CompositionVariant::SENT).unwrap(),
        ];
        write_pairs(dir.path(), &pairs, Some(CompositionVariant::COND)).unwrap();
        let (back, variant) = read_pairs(dir.path()).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(variant, Some(CompositionVariant::COND));
    }
}
