//! Embedding matrices on disk.
//!
//! A CEMB file is a 20-byte little-endian header followed by row-major
//! `f32` data:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `b"CEMB"`       |
//! | 4      | 4    | version `u32` = 1     |
//! | 8      | 8    | row count `u64`       |
//! | 16     | 4    | dim `u32`             |
//!
//! An [`EmbeddingStore`] adds a sidecar manifest at `<path>.manifest.json`
//! binding every row to the record, role and condition it was encoded from.
//! Unconditional condition rows are shared by every record with the same
//! condition and are keyed by the condition hash alone.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported CEMB version {0}")]
    UnsupportedVersion(u32),
    #[error("file holds {actual} bytes but header promises {expected}")]
    Truncated { expected: u64, actual: u64 },
    #[error("manifest has {manifest} rows but header has {header}")]
    DimMismatch { header: usize, manifest: usize },
    #[error("vector length {got} does not match store dim {expected}")]
    VectorLength { expected: usize, got: usize },
    #[error("row {0} contains a non-finite value")]
    NonFiniteVector(usize),
    #[error("duplicate row key {0}")]
    DuplicateKey(RowKey),
    #[error("missing row {0}")]
    MissingRow(RowKey),
    #[error("invalid row key {0}: {1}")]
    InvalidKey(RowKey, &'static str),
    #[error("condition hash mismatch for {0:?}")]
    HashMismatch(String),
    #[error("conditions {0:?} and {1:?} share a hash")]
    HashCollision(String, String),
    #[error("dim must be positive and fit in u32, got {0}")]
    InvalidDim(usize),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a over the trimmed UTF-8 bytes of a condition.
pub fn condition_hash(condition: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    condition
        .trim()
        .bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Which prompt produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Condition encoded with the first sentence in the instruction.
    CondGivenS1,
    CondGivenS2,
    /// First sentence encoded with the condition in the instruction.
    Sent1GivenC,
    Sent2GivenC,
    /// Condition encoded under the bare instruction.
    CondUnconditional,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::CondGivenS1 => "cond_given_s1",
            Role::CondGivenS2 => "cond_given_s2",
            Role::Sent1GivenC => "sent1_given_c",
            Role::Sent2GivenC => "sent2_given_c",
            Role::CondUnconditional => "cond_unconditional",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub record_id: String,
    pub role: Role,
    pub condition_hash: u64,
}

impl RowKey {
    pub fn conditional(record_id: impl Into<String>, role: Role, condition: &str) -> Self {
        RowKey {
            record_id: record_id.into(),
            role,
            condition_hash: condition_hash(condition),
        }
    }

    pub fn unconditional(condition: &str) -> Self {
        RowKey {
            record_id: String::new(),
            role: Role::CondUnconditional,
            condition_hash: condition_hash(condition),
        }
    }

    fn validate(&self) -> Result<(), StoreError> {
        match (self.role, self.record_id.is_empty()) {
            (Role::CondUnconditional, false) => Err(StoreError::InvalidKey(
                self.clone(),
                "unconditional rows carry no record id",
            )),
            (Role::CondUnconditional, true) | (_, false) => Ok(()),
            (_, true) => Err(StoreError::InvalidKey(
                self.clone(),
                "conditional rows need a record id",
            )),
        }
    }

    // Unconditional rows resolve by condition hash alone.
    fn index_key(&self) -> (String, Role, u64) {
        match self.role {
            Role::CondUnconditional => (String::new(), self.role, self.condition_hash),
            _ => (self.record_id.clone(), self.role, 0),
        }
    }
}

impl std::fmt::Display for RowKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({:?}, {}, {:016x})",
            self.record_id,
            self.role.as_str(),
            self.condition_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub role: Role,
    pub condition: String,
    pub condition_hash: u64,
}

impl ManifestEntry {
    pub fn key(&self) -> RowKey {
        RowKey {
            record_id: self.record_id.clone(),
            role: self.role,
            condition_hash: self.condition_hash,
        }
    }
}

/// A dimension-tagged `f32` matrix with one manifest entry per row.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
    manifest: Vec<ManifestEntry>,
    index: HashMap<(String, Role, u64), usize>,
    conditions: HashMap<u64, String>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.manifest == other.manifest
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, StoreError> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(StoreError::InvalidDim(dim));
        }
        Ok(EmbeddingStore {
            dim,
            data: Vec::new(),
            manifest: Vec::new(),
            index: HashMap::new(),
            conditions: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn contains(&self, key: &RowKey) -> bool {
        self.index.contains_key(&key.index_key())
    }

    /// Appends a row encoded from `condition`. The key is derived from the
    /// entry; its hash must match the condition text.
    pub fn push(
        &mut self,
        record_id: impl Into<String>,
        role: Role,
        condition: &str,
        vector: &[f32],
    ) -> Result<usize, StoreError> {
        let entry = ManifestEntry {
            record_id: record_id.into(),
            role,
            condition: condition.to_string(),
            condition_hash: condition_hash(condition),
        };
        self.push_entry(entry, vector)
    }

    /// Adds the unconditional row for `condition` unless one exists already.
    /// Returns the row index either way.
    pub fn push_unconditional(
        &mut self,
        condition: &str,
        vector: &[f32],
    ) -> Result<usize, StoreError> {
        let key = RowKey::unconditional(condition);
        if let Some(&row) = self.index.get(&key.index_key()) {
            self.check_collision(key.condition_hash, condition)?;
            return Ok(row);
        }
        self.push("", Role::CondUnconditional, condition, vector)
    }

    fn check_collision(&self, hash: u64, condition: &str) -> Result<(), StoreError> {
        match self.conditions.get(&hash) {
            Some(known) if known.trim() != condition.trim() => Err(StoreError::HashCollision(
                known.clone(),
                condition.to_string(),
            )),
            _ => Ok(()),
        }
    }

    fn push_entry(&mut self, entry: ManifestEntry, vector: &[f32]) -> Result<usize, StoreError> {
        if vector.len() != self.dim {
            return Err(StoreError::VectorLength {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let row = self.manifest.len();
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(StoreError::NonFiniteVector(row));
        }
        if condition_hash(&entry.condition) != entry.condition_hash {
            return Err(StoreError::HashMismatch(entry.condition));
        }
        let key = entry.key();
        key.validate()?;
        self.check_collision(entry.condition_hash, &entry.condition)?;
        let index_key = key.index_key();
        if self.index.contains_key(&index_key) {
            return Err(StoreError::DuplicateKey(key));
        }
        self.index.insert(index_key, row);
        self.conditions
            .entry(entry.condition_hash)
            .or_insert_with(|| entry.condition.clone());
        self.data.extend_from_slice(vector);
        self.manifest.push(entry);
        Ok(row)
    }

    pub fn lookup(&self, key: &RowKey) -> Result<&[f32], StoreError> {
        match self.index.get(&key.index_key()) {
            Some(&row) => Ok(self.row(row)),
            None => Err(StoreError::MissingRow(key.clone())),
        }
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.manifest.iter().filter(|e| e.role == role).count()
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes a bare CEMB matrix (no manifest).
pub fn write_matrix(path: &Path, dim: usize, data: &[f32]) -> Result<(), StoreError> {
    if dim == 0 || dim > u32::MAX as usize {
        return Err(StoreError::InvalidDim(dim));
    }
    if !data.len().is_multiple_of(dim) {
        return Err(StoreError::VectorLength {
            expected: dim,
            got: data.len() % dim,
        });
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(StoreError::NonFiniteVector(i / dim));
    }
    let count = (data.len() / dim) as u64;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for x in data {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a bare CEMB matrix, returning `(count, dim, data)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>), StoreError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| StoreError::BadMagic(path.to_path_buf()))?;
    if &header[0..4] != MAGIC {
        return Err(StoreError::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(StoreError::InvalidDim(0));
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let expected = count.saturating_mul(dim as u64).saturating_mul(4);
    if body.len() as u64 != expected {
        return Err(StoreError::Truncated {
            expected: expected + HEADER_LEN as u64,
            actual: body.len() as u64 + HEADER_LEN as u64,
        });
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(StoreError::NonFiniteVector(i / dim));
    }
    Ok((count as usize, dim, data))
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<(), StoreError> {
    write_matrix(path, store.dim, &store.data)?;
    let mut out = BufWriter::new(File::create(manifest_path(path))?);
    serde_json::to_writer(&mut out, &store.manifest)?;
    out.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let (count, dim, data) = read_matrix(path)?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_reader(BufReader::new(File::open(manifest_path(path))?))?;
    if manifest.len() != count {
        return Err(StoreError::DimMismatch {
            header: count,
            manifest: manifest.len(),
        });
    }
    let mut store = EmbeddingStore::new(dim)?;
    store.data.reserve(data.len());
    for (entry, row) in manifest.into_iter().zip(data.chunks_exact(dim)) {
        store.push_entry(entry, row)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(condition_hash(""), 0xcbf29ce484222325);
        assert_eq!(condition_hash("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(condition_hash("foobar"), 0x85944171f73967e8);
        assert_eq!(condition_hash("  foobar \n"), condition_hash("foobar"));
    }

    #[test]
    fn empty_store_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cemb");
        let store = EmbeddingStore::new(4096).unwrap();
        write_store(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[0..4], b"CEMB");
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4096);
        assert_eq!(std::fs::read_to_string(manifest_path(&path)).unwrap(), "[]");
        let back = read_store(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.dim(), 4096);
    }

    #[test]
    fn small_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cemb");
        let mut store = EmbeddingStore::new(3).unwrap();
        store
            .push("0", Role::CondGivenS1, "colour", &[1.0, -2.5, 3.25])
            .unwrap();
        store
            .push_unconditional("colour", &[0.1, 0.2, f32::MIN_POSITIVE])
            .unwrap();
        write_store(&store, &path).unwrap();
        let back = read_store(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.row(1)[2].to_bits(), f32::MIN_POSITIVE.to_bits());
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let mut store = EmbeddingStore::new(2).unwrap();
        assert!(matches!(
            store.push("0", Role::CondGivenS1, "c", &[f32::NAN, 0.0]),
            Err(StoreError::NonFiniteVector(0))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_matrix(&dir.path().join("x"), 2, &[0.0, f32::INFINITY]),
            Err(StoreError::NonFiniteVector(0))
        ));
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn lookup_and_dedup() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.push("a", Role::CondGivenS1, "game", &[1.0, 0.0]).unwrap();
        store.push("b", Role::CondGivenS1, "game", &[0.0, 1.0]).unwrap();
        let r1 = store.push_unconditional("game", &[0.5, 0.5]).unwrap();
        let r2 = store.push_unconditional(" game ", &[9.0, 9.0]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(store.count_role(Role::CondUnconditional), 1);

        let key = RowKey::conditional("b", Role::CondGivenS1, "game");
        assert_eq!(store.lookup(&key).unwrap(), &[0.0, 1.0]);
        let shared = RowKey::unconditional("game");
        assert_eq!(store.lookup(&shared).unwrap(), &[0.5, 0.5]);

        let absent = RowKey::conditional("c", Role::CondGivenS1, "game");
        assert!(matches!(store.lookup(&absent), Err(StoreError::MissingRow(_))));
    }

    #[test]
    fn key_invariants() {
        let mut store = EmbeddingStore::new(1).unwrap();
        assert!(matches!(
            store.push("", Role::CondGivenS2, "c", &[1.0]),
            Err(StoreError::InvalidKey(..))
        ));
        assert!(matches!(
            store.push("r", Role::CondUnconditional, "c", &[1.0]),
            Err(StoreError::InvalidKey(..))
        ));
        store.push("r", Role::CondGivenS2, "c", &[1.0]).unwrap();
        assert!(matches!(
            store.push("r", Role::CondGivenS2, "c", &[1.0]),
            Err(StoreError::DuplicateKey(_))
        ));
        assert!(matches!(
            store.push("q", Role::CondGivenS2, "c", &[1.0, 2.0]),
            Err(StoreError::VectorLength { .. })
        ));
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cemb");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::BadMagic(_))));

        let mut store = EmbeddingStore::new(2).unwrap();
        store.push("0", Role::CondGivenS1, "c", &[1.0, 2.0]).unwrap();
        write_store(&store, &path).unwrap();
        std::fs::write(manifest_path(&path), "[]").unwrap();
        assert!(matches!(
            read_store(&path),
            Err(StoreError::DimMismatch { header: 1, manifest: 0 })
        ));

        write_store(&store, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::NonFiniteVector(0))));

        bytes.truncate(HEADER_LEN + 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dim in 1usize..9, rows in proptest::collection::vec(any::<u32>(), 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.cemb");
            let mut store = EmbeddingStore::new(dim).unwrap();
            for (i, bits) in rows.iter().enumerate() {
                let v: Vec<f32> = (0..dim)
                    .map(|j| {
                        let x = f32::from_bits(bits.rotate_left(j as u32));
                        if x.is_finite() { x } else { j as f32 }
                    })
                    .collect();
                store.push(i.to_string(), Role::Sent1GivenC, "c", &v).unwrap();
            }
            write_store(&store, &path).unwrap();
            prop_assert_eq!(read_store(&path).unwrap(), store);
        }
    }
}
