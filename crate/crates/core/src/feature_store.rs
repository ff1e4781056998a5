//! On-disk hidden-state feature files, the JSON-lines sidecar manifest, and
//! pairing of base/blank views.
//!
//! Feature file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "VLCBFS01"
//! 8       2     format version (u16, = 1)
//! 10      4     d_h (u32)
//! 14      8     record count (u64)
//! 22      16    reserved, zero
//! 38      ...   records, each 20 + 4 * d_h bytes:
//!               16  hash_id
//!               1   view   (0 = base, 1 = blank)
//!               1   label  (0 = incorrect, 1 = correct, 255 = unlabeled)
//!               1   split  (0 = train, 1 = val, 2 = test)
//!               1   reserved, zero
//!               4*d_h  f32 values
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VLCBFS01";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 38;
const RECORD_PREFIX_LEN: usize = 20;

/// Opaque 16-byte sample identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashId(pub [u8; 16]);

impl HashId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 32 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(Error::Validation(format!(
                "hash id {s:?} is not 32 lowercase hex characters"
            )));
        }
        let bytes = hex::decode(s)
            .map_err(|e| Error::Validation(format!("hash id {s:?}: {e}")))?;
        let mut out = [0u8; 16];
        out.copy_from_slice(&bytes);
        Ok(HashId(out))
    }
}

impl fmt::Debug for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashId({})", self.to_hex())
    }
}

impl fmt::Display for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Base,
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Incorrect,
    Correct,
    Unlabeled,
}

impl Label {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::Correct => Some(true),
            Label::Incorrect => Some(false),
            Label::Unlabeled => None,
        }
    }

    pub fn from_bool(y: bool) -> Self {
        if y {
            Label::Correct
        } else {
            Label::Incorrect
        }
    }
}

/// One (sample, view) hidden state with its label and identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub hash_id: HashId,
    pub view: View,
    pub split: Split,
    pub label: Label,
    pub vector: Vec<f32>,
}

/// Decoded contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub d_h: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn split(&self, split: Split) -> Vec<FeatureRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }
}

fn validate_records(d_h: usize, records: &[FeatureRecord]) -> Result<()> {
    if d_h == 0 || d_h > u32::MAX as usize {
        return Err(Error::Format(format!("d_h {d_h} out of range")));
    }
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != d_h {
            return Err(Error::Format(format!(
                "record {i} ({}) has {} values, file d_h is {d_h}",
                r.hash_id,
                r.vector.len()
            )));
        }
        if let Some(j) = r.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record {i} ({}) has non-finite value at index {j}",
                r.hash_id
            )));
        }
    }
    Ok(())
}

/// Serializes records into the feature-file byte layout.
pub fn encode_features(d_h: usize, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    validate_records(d_h, records)?;
    let stride = RECORD_PREFIX_LEN + 4 * d_h;
    let mut buf = Vec::with_capacity(HEADER_LEN + stride * records.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d_h as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    buf.extend_from_slice(&[0u8; 16]);
    for r in records {
        buf.extend_from_slice(&r.hash_id.0);
        buf.push(match r.view {
            View::Base => 0,
            View::Blank => 1,
        });
        buf.push(match r.label {
            Label::Incorrect => 0,
            Label::Correct => 1,
            Label::Unlabeled => 255,
        });
        buf.push(match r.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        });
        buf.push(0);
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Header fields of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u16,
    pub d_h: usize,
    pub count: u64,
}

pub fn decode_header(bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, expected VLCBFS01".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let d_h = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if bytes[22..38].iter().any(|&b| b != 0) {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    if d_h == 0 {
        return Err(Error::Format("d_h is zero".into()));
    }
    Ok(FeatureHeader {
        version,
        d_h,
        count,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let header = decode_header(bytes)?;
    let d_h = header.d_h;
    let stride = RECORD_PREFIX_LEN + 4 * d_h;
    let expected = (header.count as u128) * stride as u128 + HEADER_LEN as u128;
    let actual = bytes.len() as u128;
    if actual < expected {
        return Err(Error::Truncated(format!(
            "header declares {} records ({expected} bytes), file has {actual} bytes",
            header.count
        )));
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            actual - expected,
            header.count
        )));
    }

    let mut records = Vec::with_capacity(header.count as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(stride).enumerate() {
        let mut id = [0u8; 16];
        id.copy_from_slice(&chunk[..16]);
        let view = match chunk[16] {
            0 => View::Base,
            1 => View::Blank,
            b => return Err(Error::Format(format!("record {i}: bad view byte {b}"))),
        };
        let label = match chunk[17] {
            0 => Label::Incorrect,
            1 => Label::Correct,
            255 => Label::Unlabeled,
            b => return Err(Error::Format(format!("record {i}: bad label byte {b}"))),
        };
        let split = match chunk[18] {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            b => return Err(Error::Format(format!("record {i}: bad split byte {b}"))),
        };
        if chunk[19] != 0 {
            return Err(Error::Format(format!("record {i}: reserved byte not zero")));
        }
        let vector: Vec<f32> = chunk[RECORD_PREFIX_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(FeatureRecord {
            hash_id: HashId(id),
            view,
            split,
            label,
            vector,
        });
    }
    validate_records(d_h, &records)?;
    Ok(FeatureFile { d_h, records })
}

pub fn write_feature_file(path: impl AsRef<Path>, d_h: usize, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(d_h, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Sidecar metadata for one sample, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hash_id: String,
    pub dataset: String,
    #[serde(default)]
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_swap: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_swap: Option<f64>,
    /// Probability the model assigned to its real-image top-1 token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1_prob: Option<f64>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<HashId> {
        let id = HashId::from_hex(&self.hash_id)?;
        if let Some(f) = self.flip_swap {
            if f > 1 {
                return Err(Error::Validation(format!("{}: flip_swap {f} not in {{0,1}}", self.hash_id)));
            }
        }
        for (name, value) in [("dp_swap", self.dp_swap), ("top1_prob", self.top1_prob)] {
            if let Some(p) = value {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Validation(format!("{}: {name} {p} not in [0,1]", self.hash_id)));
                }
            }
        }
        Ok(id)
    }
}

pub type Manifest = HashMap<HashId, ManifestEntry>;

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        e.validate()?;
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let id = entry.validate()?;
        if out.insert(id, entry).is_some() {
            return Err(Error::Ambiguity(format!(
                "manifest line {}: duplicate hash id {id}",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

/// Both views of one labeled sample, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub hash_id: HashId,
    pub h_base: Vec<f64>,
    pub h_blank: Vec<f64>,
    pub y: bool,
    pub dataset: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinedViews {
    pub pairs: Vec<PairedSample>,
    /// Present in the base collection only, in base order.
    pub unmatched_base: Vec<HashId>,
    /// Present in the blank collection only, in blank order.
    pub unmatched_blank: Vec<HashId>,
}

fn index_unique(records: &[FeatureRecord], what: &str) -> Result<HashMap<HashId, usize>> {
    let mut index = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if index.insert(r.hash_id, i).is_some() {
            return Err(Error::Ambiguity(format!("hash id {} appears twice in {what} view", r.hash_id)));
        }
    }
    Ok(index)
}

/// Pairs base and blank records by hash id, in base order.
pub fn join_views(base: &[FeatureRecord], blank: &[FeatureRecord]) -> Result<JoinedViews> {
    let blank_index = index_unique(blank, "blank")?;
    let base_index = index_unique(base, "base")?;
    let mut out = JoinedViews::default();
    for b in base {
        let Some(&j) = blank_index.get(&b.hash_id) else {
            out.unmatched_base.push(b.hash_id);
            continue;
        };
        let k = &blank[j];
        if k.vector.len() != b.vector.len() {
            return Err(Error::Dimension {
                expected: b.vector.len(),
                got: k.vector.len(),
            });
        }
        let y = match (b.label.as_bool(), k.label.as_bool()) {
            (Some(y), None) => y,
            (Some(y), Some(z)) if y == z => y,
            (Some(_), Some(_)) => {
                return Err(Error::Validation(format!("{}: base and blank labels disagree", b.hash_id)))
            }
            (None, _) => {
                return Err(Error::Validation(format!("{}: paired sample is unlabeled", b.hash_id)))
            }
        };
        out.pairs.push(PairedSample {
            hash_id: b.hash_id,
            h_base: b.vector.iter().map(|&v| v as f64).collect(),
            h_blank: k.vector.iter().map(|&v| v as f64).collect(),
            y,
            dataset: String::new(),
        });
    }
    out.unmatched_blank = blank
        .iter()
        .filter(|k| !base_index.contains_key(&k.hash_id))
        .map(|k| k.hash_id)
        .collect();
    Ok(out)
}

/// Fills `dataset` on each pair from the manifest; missing entries keep an empty name.
pub fn attach_datasets(pairs: &mut [PairedSample], manifest: &Manifest) {
    for p in pairs {
        if let Some(e) = manifest.get(&p.hash_id) {
            p.dataset = e.dataset.clone();
        }
    }
}

/// Counts (correct, incorrect) labels; any unlabeled entry is an error.
pub fn class_counts<I>(labels: I) -> Result<(usize, usize)>
where
    I: IntoIterator<Item = Label>,
{
    let mut plus = 0;
    let mut minus = 0;
    for l in labels {
        match l {
            Label::Correct => plus += 1,
            Label::Incorrect => minus += 1,
            Label::Unlabeled => {
                return Err(Error::Validation("class counts require labeled records".into()))
            }
        }
    }
    Ok((plus, minus))
}

/// Hash ids of records, checked for uniqueness.
pub fn unique_ids(records: &[FeatureRecord]) -> Result<HashSet<HashId>> {
    Ok(index_unique(records, "input")?.into_keys().collect())
}
