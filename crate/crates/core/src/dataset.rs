//! Embedding datasets: on-disk format, synthetic generation, deterministic
//! batching and paraphrase sampling.
//!
//! A dataset on disk is a directory holding `header.json` plus one binary
//! record file per split (`train.cavq`, `dev.cavq`, `test.cavq`). The record
//! file starts with magic `CAVQ` and a little-endian `u16` format version,
//! followed by records back to back:
//!
//! ```text
//! id_len: u32 | id: utf-8 | answer_id: u32 | answer_text_len: u32 |
//! answer_text: utf-8 | image_embed: d_img x f32 | question_embed: d_text x f32 |
//! pool_size: u32 | pool_size paraphrase vectors of d_text x f32
//! ```
//!
//! All integers and floats are little-endian; vectors are stored as `f32`
//! regardless of the in-memory compute precision.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, normal01, sample_without_replacement, stream_rng};

pub const DATA_MAGIC: [u8; 4] = *b"CAVQ";
pub const DATA_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    Magic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u16, expected: u16 },
    #[error("record {record}: truncated or malformed ({what})")]
    Parse { record: usize, what: String },
    #[error("record {record}: field {field} has length {got}, expected {expected}")]
    Validation {
        record: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("record {record}: answer_id {got} out of range (num_classes {classes})")]
    BadAnswerId {
        record: usize,
        got: u32,
        classes: usize,
    },
    #[error("header invalid: {0}")]
    InvalidHeader(String),
    #[error("split {split} has {got} records but header declares {declared}")]
    SplitSize {
        split: Split,
        got: usize,
        declared: usize,
    },
    #[error("synthetic spec invalid: {0}")]
    InvalidSpec(String),
    #[error("could not place {classes} class centroids with separation {separation} after {attempts} attempts")]
    Generation {
        classes: usize,
        separation: f64,
        attempts: usize,
    },
    #[error("paraphrase pool exhausted: requested {requested}, pool has {available}")]
    PoolExhausted { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.cavq",
            Split::Dev => "dev.cavq",
            Split::Test => "test.cavq",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|dev|test)")),
        }
    }
}

/// Shared dataset metadata stored as `header.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d_img: usize,
    pub d_text: usize,
    pub num_classes: usize,
    pub answer_vocab: Vec<String>,
    pub splits: BTreeMap<Split, usize>,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.d_img == 0 || self.d_text == 0 || self.num_classes == 0 {
            return Err(DatasetError::InvalidHeader(
                "dims and num_classes must be positive".into(),
            ));
        }
        if self.answer_vocab.len() != self.num_classes {
            return Err(DatasetError::InvalidHeader(format!(
                "answer_vocab has {} entries, num_classes is {}",
                self.answer_vocab.len(),
                self.num_classes
            )));
        }
        let mut seen = self.answer_vocab.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.num_classes {
            return Err(DatasetError::InvalidHeader(
                "answer_vocab entries must be distinct".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: precomputed embeddings plus the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_embed: Vec<f32>,
    pub question_embed: Vec<f32>,
    pub paraphrase_pool: Vec<Vec<f32>>,
    pub answer_id: u32,
    pub answer_text: String,
}

/// One loaded split plus its header.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub split: Split,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn min_pool_size(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.paraphrase_pool.len())
            .min()
            .unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Binary record IO
// ---------------------------------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize one split's records (including the file magic and version).
pub fn encode_records(records: &[SampleRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATA_MAGIC);
    buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
    for r in records {
        put_u32(&mut buf, r.id.len() as u32);
        buf.extend_from_slice(r.id.as_bytes());
        put_u32(&mut buf, r.answer_id);
        put_u32(&mut buf, r.answer_text.len() as u32);
        buf.extend_from_slice(r.answer_text.as_bytes());
        put_f32s(&mut buf, &r.image_embed);
        put_f32s(&mut buf, &r.question_embed);
        put_u32(&mut buf, r.paraphrase_pool.len() as u32);
        for p in &r.paraphrase_pool {
            put_f32s(&mut buf, p);
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Parse {
                record,
                what: format!("unexpected end of file reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: usize, what: &str) -> Result<u32, DatasetError> {
        let b = self.take(4, record, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, record: usize, what: &str) -> Result<Vec<f32>, DatasetError> {
        let b = self.take(4 * n, record, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn string(&mut self, record: usize, what: &str) -> Result<String, DatasetError> {
        let len = self.u32(record, what)? as usize;
        let b = self.take(len, record, what)?;
        String::from_utf8(b.to_vec()).map_err(|e| DatasetError::Parse {
            record,
            what: format!("{what} is not valid utf-8: {e}"),
        })
    }
}

/// Parse a record file and validate every record against the header.
pub fn decode_records(buf: &[u8], header: &DatasetHeader) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, 0, "magic")?;
    if magic != DATA_MAGIC {
        return Err(DatasetError::Magic {
            found: [magic[0], magic[1], magic[2], magic[3]],
            expected: DATA_MAGIC,
        });
    }
    let vb = cur.take(2, 0, "version")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != DATA_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }

    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let idx = records.len();
        let id = cur.string(idx, "id")?;
        let answer_id = cur.u32(idx, "answer_id")?;
        let answer_text = cur.string(idx, "answer_text")?;
        let image_embed = cur.f32s(header.d_img, idx, "image_embed")?;
        let question_embed = cur.f32s(header.d_text, idx, "question_embed")?;
        let pool_size = cur.u32(idx, "pool_size")? as usize;
        let mut paraphrase_pool = Vec::with_capacity(pool_size);
        for _ in 0..pool_size {
            paraphrase_pool.push(cur.f32s(header.d_text, idx, "paraphrase")?);
        }
        if answer_id as usize >= header.num_classes {
            return Err(DatasetError::BadAnswerId {
                record: idx,
                got: answer_id,
                classes: header.num_classes,
            });
        }
        records.push(SampleRecord {
            id,
            image_embed,
            question_embed,
            paraphrase_pool,
            answer_id,
            answer_text,
        });
    }
    Ok(records)
}

/// Validate in-memory records against a header (vector lengths, labels).
pub fn validate_records(records: &[SampleRecord], header: &DatasetHeader) -> Result<(), DatasetError> {
    for (idx, r) in records.iter().enumerate() {
        if r.image_embed.len() != header.d_img {
            return Err(DatasetError::Validation {
                record: idx,
                field: "image_embed",
                expected: header.d_img,
                got: r.image_embed.len(),
            });
        }
        if r.question_embed.len() != header.d_text {
            return Err(DatasetError::Validation {
                record: idx,
                field: "question_embed",
                expected: header.d_text,
                got: r.question_embed.len(),
            });
        }
        for p in &r.paraphrase_pool {
            if p.len() != header.d_text {
                return Err(DatasetError::Validation {
                    record: idx,
                    field: "paraphrase_pool",
                    expected: header.d_text,
                    got: p.len(),
                });
            }
        }
        if r.answer_id as usize >= header.num_classes {
            return Err(DatasetError::BadAnswerId {
                record: idx,
                got: r.answer_id,
                classes: header.num_classes,
            });
        }
    }
    Ok(())
}

/// Write `bytes` to `path` atomically (temp file in the same directory, then
/// rename), so interrupted writers never leave a partial file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp).to_path_buf();
    {
        let mut f = fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    match fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp_path);
            Err(e)
        }
    }
}

/// Write `header.json` plus one record file per provided split.
pub fn save_dataset(
    dir: &Path,
    header: &DatasetHeader,
    splits: &[(Split, &[SampleRecord])],
) -> Result<(), DatasetError> {
    header.validate()?;
    for (split, records) in splits {
        validate_records(records, header)?;
        let declared = header.splits.get(split).copied().unwrap_or(records.len());
        if declared != records.len() {
            return Err(DatasetError::SplitSize {
                split: *split,
                got: records.len(),
                declared,
            });
        }
    }
    let header_json = serde_json::to_vec_pretty(header)?;
    atomic_write(&dir.join("header.json"), &header_json)?;
    for (split, records) in splits {
        atomic_write(&dir.join(split.file_name()), &encode_records(records))?;
    }
    Ok(())
}

pub fn load_header(dir: &Path) -> Result<DatasetHeader, DatasetError> {
    let bytes = fs::read(dir.join("header.json"))?;
    let header: DatasetHeader = serde_json::from_slice(&bytes)?;
    header.validate()?;
    Ok(header)
}

/// Load one split, validating every record against the header. Record order
/// is preserved as stored.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let header = load_header(dir)?;
    let mut buf = Vec::new();
    fs::File::open(dir.join(split.file_name()))?.read_to_end(&mut buf)?;
    let records = decode_records(&buf, &header)?;
    validate_records(&records, &header)?;
    if let Some(&declared) = header.splits.get(&split) {
        if declared != records.len() {
            return Err(DatasetError::SplitSize {
                split,
                got: records.len(),
                declared,
            });
        }
    }
    Ok(Dataset {
        header,
        split,
        records,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Parameters of the clustered synthetic generator. Question embeddings form
/// one Gaussian cluster per answer class; each paraphrase is its question
/// embedding plus small noise, and image embeddings carry class signal with
/// strength `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub d_img: usize,
    pub d_text: usize,
    pub pool_size: usize,
    /// Paraphrase noise; must stay below `separation` so paraphrases remain
    /// semantically within-cluster.
    pub sigma_p: f64,
    /// Minimum pairwise distance between question-cluster centroids.
    pub separation: f64,
    pub sigma_q: f64,
    /// Label-image correlation in [0, 1]; 0 means images carry no class
    /// signal at all.
    pub rho: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            samples_per_class: 100,
            d_img: 768,
            d_text: 1024,
            pool_size: 10,
            sigma_p: 0.1,
            separation: 1.0,
            sigma_q: 4.0,
            rho: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(DatasetError::InvalidSpec(
                "num_classes and samples_per_class must be positive".into(),
            ));
        }
        if self.d_img == 0 || self.d_text == 0 {
            return Err(DatasetError::InvalidSpec("dims must be positive".into()));
        }
        if self.separation <= 0.0 {
            return Err(DatasetError::InvalidSpec("separation must be positive".into()));
        }
        if self.sigma_p < 0.0 || self.sigma_q < 0.0 {
            return Err(DatasetError::InvalidSpec("noise sigmas must be nonnegative".into()));
        }
        if self.sigma_p >= self.separation {
            return Err(DatasetError::InvalidSpec(format!(
                "sigma_p ({}) must be < separation ({}) so paraphrases stay within-cluster",
                self.sigma_p, self.separation
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DatasetError::InvalidSpec("rho must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Header plus 80/10/10 per-class splits produced by the generator.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub header: DatasetHeader,
    pub train: Vec<SampleRecord>,
    pub dev: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl GeneratedDataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        save_dataset(
            dir,
            &self.header,
            &[
                (Split::Train, &self.train),
                (Split::Dev, &self.dev),
                (Split::Test, &self.test),
            ],
        )
    }

    pub fn dataset(&self, split: Split) -> Dataset {
        Dataset {
            header: self.header.clone(),
            split,
            records: self.split(split).to_vec(),
        }
    }
}

fn gaussian_vec(rng: &mut impl RngCore, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * normal01(rng)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const CENTROID_ATTEMPTS: usize = 1000;

fn draw_centroids(
    rng: &mut impl RngCore,
    classes: usize,
    dim: usize,
    scale: f64,
    min_distance: f64,
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut placed = false;
        for _ in 0..CENTROID_ATTEMPTS {
            let candidate = gaussian_vec(rng, dim, scale);
            if centroids.iter().all(|c| distance(c, &candidate) >= min_distance) {
                centroids.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DatasetError::Generation {
                classes,
                separation: min_distance,
                attempts: CENTROID_ATTEMPTS,
            });
        }
    }
    Ok(centroids)
}

/// Generate a clustered dataset. Identical `(spec, seed)` yield byte-identical
/// output: all draws come from one ChaCha stream in a fixed order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<GeneratedDataset, DatasetError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, rng::DOMAIN_SYNTHETIC, 0);

    let question_centroids = draw_centroids(
        &mut rng,
        spec.num_classes,
        spec.d_text,
        spec.separation,
        spec.separation,
    )?;
    // Image-space class signatures; no separation constraint of their own.
    let image_centroids: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian_vec(&mut rng, spec.d_img, 1.0))
        .collect();

    let answer_vocab: Vec<String> = (0..spec.num_classes)
        .map(|c| format!("the answer is {c}"))
        .collect();

    let spc = spec.samples_per_class;
    let n_train = spc * 8 / 10;
    let n_dev = spc / 10;

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.num_classes {
        for i in 0..spc {
            let question_embed: Vec<f32> = question_centroids[c]
                .iter()
                .map(|&mu| (mu + spec.sigma_q * normal01(&mut rng)) as f32)
                .collect();
            let image_embed: Vec<f32> = image_centroids[c]
                .iter()
                .map(|&nu| (spec.rho * nu + normal01(&mut rng)) as f32)
                .collect();
            let paraphrase_pool: Vec<Vec<f32>> = (0..spec.pool_size)
                .map(|_| {
                    question_embed
                        .iter()
                        .map(|&q| (q as f64 + spec.sigma_p * normal01(&mut rng)) as f32)
                        .collect()
                })
                .collect();
            let record = SampleRecord {
                id: format!("c{c:03}-s{i:04}"),
                image_embed,
                question_embed,
                paraphrase_pool,
                answer_id: c as u32,
                answer_text: answer_vocab[c].clone(),
            };
            if i < n_train {
                train.push(record);
            } else if i < n_train + n_dev {
                dev.push(record);
            } else {
                test.push(record);
            }
        }
    }

    let mut splits = BTreeMap::new();
    splits.insert(Split::Train, train.len());
    splits.insert(Split::Dev, dev.len());
    splits.insert(Split::Test, test.len());
    let header = DatasetHeader {
        d_img: spec.d_img,
        d_text: spec.d_text,
        num_classes: spec.num_classes,
        answer_vocab,
        splits,
    };
    header.validate()?;
    Ok(GeneratedDataset {
        header,
        train,
        dev,
        test,
    })
}

// ---------------------------------------------------------------------------
// Batching and paraphrase sampling
// ---------------------------------------------------------------------------

/// Deterministic shuffled batch order for one epoch: the permutation is a
/// function of `(shuffle_seed, epoch)` only. The final batch may be short.
pub struct BatchIndices {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchIndices {
    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn batch_indices(n: usize, batch_size: usize, epoch: u64, shuffle_seed: u64) -> BatchIndices {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut rng = stream_rng(shuffle_seed, rng::DOMAIN_SHUFFLE, epoch);
    BatchIndices {
        order: rng::permutation(&mut rng, n),
        batch_size,
    }
}

/// Batches of record references in the epoch's shuffled order.
pub fn batch_iter<'a>(
    records: &'a [SampleRecord],
    batch_size: usize,
    epoch: u64,
    shuffle_seed: u64,
) -> impl Iterator<Item = Vec<&'a SampleRecord>> + 'a {
    let batches = batch_indices(records.len(), batch_size, epoch, shuffle_seed);
    let chunks: Vec<Vec<usize>> = batches.iter().map(|c| c.to_vec()).collect();
    chunks
        .into_iter()
        .map(move |chunk| chunk.into_iter().map(|i| &records[i]).collect())
}

/// Draw `n` distinct paraphrases uniformly without replacement from the
/// record's pool. `n == 0` leaves the rng untouched.
pub fn sample_paraphrases<'a>(
    record: &'a SampleRecord,
    n: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<&'a [f32]>, DatasetError> {
    let pool = record.paraphrase_pool.len();
    if n > pool {
        return Err(DatasetError::PoolExhausted {
            requested: n,
            available: pool,
        });
    }
    Ok(sample_without_replacement(rng, pool, n)
        .into_iter()
        .map(|i| record.paraphrase_pool[i].as_slice())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, DOMAIN_PARAPHRASE};
    use rand_core::RngCore;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 20,
            d_img: 6,
            d_text: 8,
            pool_size: 5,
            sigma_p: 0.05,
            separation: 1.0,
            sigma_q: 0.3,
            rho: 0.8,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let gen = generate_synthetic(&tiny_spec(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        gen.save(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("train.cavq")).unwrap();

        let loaded = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.records, gen.train);
        // Re-encode and compare bytes.
        assert_eq!(encode_records(&loaded.records), first);
    }

    #[test]
    fn empty_record_list_is_valid() {
        let header = DatasetHeader {
            d_img: 4,
            d_text: 4,
            num_classes: 2,
            answer_vocab: vec!["a".into(), "b".into()],
            splits: BTreeMap::new(),
        };
        let bytes = encode_records(&[]);
        let records = decode_records(&bytes, &header).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn wrong_question_length_is_rejected_with_record_index() {
        let header = DatasetHeader {
            d_img: 2,
            d_text: 3,
            num_classes: 2,
            answer_vocab: vec!["a".into(), "b".into()],
            splits: BTreeMap::new(),
        };
        let good = SampleRecord {
            id: "ok".into(),
            image_embed: vec![0.0; 2],
            question_embed: vec![0.0; 3],
            paraphrase_pool: vec![],
            answer_id: 0,
            answer_text: "a".into(),
        };
        let mut bad = good.clone();
        bad.question_embed = vec![0.0; 2];
        let err = validate_records(&[good, bad], &header).unwrap_err();
        match err {
            DatasetError::Validation { record, field, expected, got } => {
                assert_eq!(record, 1);
                assert_eq!(field, "question_embed");
                assert_eq!(expected, 3);
                assert_eq!(got, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let header = DatasetHeader {
            d_img: 1,
            d_text: 1,
            num_classes: 2,
            answer_vocab: vec!["a".into(), "b".into()],
            splits: BTreeMap::new(),
        };
        let mut bytes = encode_records(&[]);
        bytes[0] = b'X';
        assert!(matches!(
            decode_records(&bytes, &header),
            Err(DatasetError::Magic { .. })
        ));
        let mut bytes = encode_records(&[]);
        bytes[4] = 99;
        assert!(matches!(
            decode_records(&bytes, &header),
            Err(DatasetError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_file_names_the_failing_record() {
        let gen = generate_synthetic(&tiny_spec(), 7).unwrap();
        let bytes = encode_records(&gen.dev);
        let cut = bytes.len() - 10;
        let err = decode_records(&bytes[..cut], &gen.header).unwrap_err();
        match err {
            DatasetError::Parse { record, .. } => assert_eq!(record, gen.dev.len() - 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_paraphrase_noise_copies_question_exactly() {
        let spec = SyntheticSpec {
            sigma_p: 0.0,
            ..tiny_spec()
        };
        let gen = generate_synthetic(&spec, 3).unwrap();
        for r in gen.train.iter().chain(&gen.dev).chain(&gen.test) {
            for p in &r.paraphrase_pool {
                assert_eq!(p, &r.question_embed);
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_datasets() {
        let a = generate_synthetic(&tiny_spec(), 99).unwrap();
        let b = generate_synthetic(&tiny_spec(), 99).unwrap();
        assert_eq!(encode_records(&a.train), encode_records(&b.train));
        assert_eq!(encode_records(&a.dev), encode_records(&b.dev));
        assert_eq!(encode_records(&a.test), encode_records(&b.test));
        let c = generate_synthetic(&tiny_spec(), 100).unwrap();
        assert_ne!(encode_records(&a.train), encode_records(&c.train));
    }

    #[test]
    fn split_sizes_follow_80_10_10() {
        let spec = SyntheticSpec {
            num_classes: 10,
            samples_per_class: 100,
            d_img: 4,
            d_text: 6,
            ..tiny_spec()
        };
        let gen = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(gen.train.len(), 800);
        assert_eq!(gen.dev.len(), 100);
        assert_eq!(gen.test.len(), 100);
        // Disjoint by id.
        let mut ids: Vec<&str> = gen
            .train
            .iter()
            .chain(&gen.dev)
            .chain(&gen.test)
            .map(|r| r.id.as_str())
            .collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn unsatisfiable_separation_fails_with_generation_error() {
        // 1-D question space cannot hold 50 centroids this far apart.
        let spec = SyntheticSpec {
            num_classes: 50,
            d_text: 1,
            sigma_p: 0.5,
            ..tiny_spec()
        };
        assert!(matches!(
            generate_synthetic(&spec, 1),
            Err(DatasetError::Generation { .. })
        ));
    }

    #[test]
    fn spec_invariant_sigma_p_below_separation() {
        let spec = SyntheticSpec {
            sigma_p: 2.0,
            separation: 1.0,
            ..tiny_spec()
        };
        assert!(matches!(
            generate_synthetic(&spec, 1),
            Err(DatasetError::InvalidSpec(_))
        ));
    }

    #[test]
    fn rho_zero_images_score_chance_with_nearest_centroid_probe() {
        // Independent probe: class centroids estimated from train images,
        // nearest-centroid classification of test images.
        let spec = SyntheticSpec {
            num_classes: 5,
            samples_per_class: 200,
            d_img: 16,
            d_text: 8,
            rho: 0.0,
            ..tiny_spec()
        };
        let gen = generate_synthetic(&spec, 11).unwrap();
        let probe = |train: &[SampleRecord], test: &[SampleRecord]| -> f64 {
            let mut centroids = vec![vec![0f64; spec.d_img]; spec.num_classes];
            let mut counts = vec![0usize; spec.num_classes];
            for r in train {
                counts[r.answer_id as usize] += 1;
                for (c, &x) in centroids[r.answer_id as usize].iter_mut().zip(&r.image_embed) {
                    *c += x as f64;
                }
            }
            for (c, n) in centroids.iter_mut().zip(&counts) {
                for x in c {
                    *x /= *n as f64;
                }
            }
            let mut correct = 0usize;
            for r in test {
                let img: Vec<f64> = r.image_embed.iter().map(|&x| x as f64).collect();
                let best = (0..spec.num_classes)
                    .min_by(|&a, &b| {
                        distance(&centroids[a], &img)
                            .partial_cmp(&distance(&centroids[b], &img))
                            .unwrap()
                    })
                    .unwrap();
                if best == r.answer_id as usize {
                    correct += 1;
                }
            }
            correct as f64 / test.len() as f64
        };
        let acc = probe(&gen.train, &gen.test);
        assert!((acc - 0.2).abs() <= 0.05, "chance-level probe got {acc}");

        // Positive control: with strong correlation the probe is far above chance.
        let strong = SyntheticSpec { rho: 1.0, ..spec };
        let gen = generate_synthetic(&strong, 11).unwrap();
        let acc = probe(&gen.train, &gen.test);
        assert!(acc > 0.8, "strong-signal probe got {acc}");
    }

    #[test]
    fn batches_cover_every_record_exactly_once() {
        let b = batch_indices(10, 16, 0, 5);
        let chunks: Vec<&[usize]> = b.iter().collect();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].len(), 10);

        let b = batch_indices(32, 16, 3, 5);
        let chunks: Vec<&[usize]> = b.iter().collect();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].len(), 16);
        assert_eq!(chunks[1].len(), 16);
        let mut all: Vec<usize> = chunks.concat();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_deterministic_per_seed_and_epoch() {
        let a: Vec<usize> = batch_indices(50, 8, 2, 9).iter().flatten().copied().collect();
        let b: Vec<usize> = batch_indices(50, 8, 2, 9).iter().flatten().copied().collect();
        let c: Vec<usize> = batch_indices(50, 8, 3, 9).iter().flatten().copied().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn epoch_permutations_pass_chi_squared_uniformity() {
        // First-position frequency over many epochs, n = 8 records.
        let n = 8usize;
        let epochs = 10_000u64;
        let mut counts = vec![0u64; n];
        for e in 0..epochs {
            let b = batch_indices(n, n, e, 1234);
            counts[b.iter().next().unwrap()[0]] += 1;
        }
        let expected = epochs as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // Critical value for df = 7 at alpha = 0.001.
        assert!(chi2 < 24.322, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn paraphrase_sampling_contracts() {
        let gen = generate_synthetic(&tiny_spec(), 2).unwrap();
        let record = &gen.train[0];
        let mut rng = stream_rng(5, DOMAIN_PARAPHRASE, 0);

        // n = 0: empty, rng untouched.
        let before = rng.clone();
        assert!(sample_paraphrases(record, 0, &mut rng).unwrap().is_empty());
        assert_eq!(rng.clone().next_u64(), before.clone().next_u64());

        // n = P: the whole pool in some order.
        let all = sample_paraphrases(record, 5, &mut rng).unwrap();
        assert_eq!(all.len(), 5);
        for p in &record.paraphrase_pool {
            assert!(all.iter().any(|s| *s == p.as_slice()));
        }

        // n > P: pool exhausted.
        assert!(matches!(
            sample_paraphrases(record, 6, &mut rng),
            Err(DatasetError::PoolExhausted { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn paraphrase_sampling_is_uniform() {
        let gen = generate_synthetic(&tiny_spec(), 2).unwrap();
        let mut record = gen.train[0].clone();
        record.paraphrase_pool = (0..10).map(|i| vec![i as f32; 8]).collect();
        let mut rng = stream_rng(6, DOMAIN_PARAPHRASE, 0);
        let draws = 100_000usize;
        let mut counts = vec![0u64; 10];
        for _ in 0..draws {
            for p in sample_paraphrases(&record, 2, &mut rng).unwrap() {
                counts[p[0] as usize] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.01, "index {i}: freq {freq}");
        }
    }

    #[test]
    fn atomic_write_replaces_whole_file_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"first version").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No temp leftovers.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
