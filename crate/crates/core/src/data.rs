//! Dataset manifests, in-memory samples and the synthetic generator.
//!
//! A manifest is line-delimited JSON: the first line is a header naming the
//! split, the ordered category names, the dimensions and the embedding table;
//! each following line is one record with its question token ids, a
//! reference into a sidecar feature file, its category id and its answer
//! string. Relative paths are resolved against the manifest's directory.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    check_feature_dims, pad_or_truncate, write_vocab, EmbeddingTable, FeatureFile, RegionFeatures,
    PAD_ID, PAD_TOKEN,
};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const EMBEDDING_FILE: &str = "embeddings.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDims {
    pub k: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub n_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub split: String,
    pub categories: Vec<String>,
    /// Where answer strings come from; always `"records"`.
    pub answers: String,
    pub dims: DatasetDims,
    pub embedding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRef {
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub tokens: Vec<usize>,
    pub features: FeatureRef,
    pub category: usize,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn n_c(&self) -> usize {
        self.header.categories.len()
    }

    pub fn dims(&self) -> DatasetDims {
        self.header.dims
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn embedding_path(&self) -> PathBuf {
        self.resolve(&self.header.embedding)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Copy with a subset of records, in the given order.
    fn with_records(&self, split: &str, indices: &[usize]) -> Self {
        let mut header = self.header.clone();
        header.split = split.to_string();
        DatasetManifest {
            base_dir: self.base_dir.clone(),
            header,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Header fields of a feature file, read without loading its values.
fn feature_header(path: &Path) -> Result<(usize, usize, usize)> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; 24];
    f.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated feature header"))?;
    if &buf[..4] != b"CQFT" {
        return Err(Error::format(path, "bad feature file magic"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes")) as usize;
    Ok((word(8), word(12), word(20)))
}

/// Parses and validates a manifest, checking every feature reference.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: ManifestHeader = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: line_no,
                msg: format!("header: {e}"),
            })?;
            if h.categories.is_empty() {
                return Err(Error::Manifest {
                    line: line_no,
                    msg: "header lists no categories".into(),
                });
            }
            let d = h.dims;
            if d.k == 0 || d.d_v == 0 || d.d_w == 0 || d.n_w == 0 {
                return Err(Error::Manifest {
                    line: line_no,
                    msg: "dims must be positive".into(),
                });
            }
            header = Some(h);
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    let header = header.ok_or(Error::Manifest {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let manifest = DatasetManifest {
        base_dir,
        header,
        records,
    };
    validate(&manifest)?;
    Ok(manifest)
}

fn validate(m: &DatasetManifest) -> Result<()> {
    let n_c = m.n_c();
    let dims = m.dims();
    let mut headers: HashMap<&str, Option<(usize, usize, usize)>> = HashMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.category >= n_c {
            return Err(Error::CategoryOutOfRange {
                record: i,
                id: r.category,
                n_c,
            });
        }
        let dangling = || Error::DanglingReference {
            record: i,
            path: m.resolve(&r.features.file),
            offset: r.features.offset,
        };
        let entry = headers
            .entry(r.features.file.as_str())
            .or_insert_with(|| feature_header(&m.resolve(&r.features.file)).ok());
        let Some((k, d_v, count)) = *entry else {
            return Err(dangling());
        };
        if k != dims.k || d_v != dims.d_v {
            return Err(Error::DimensionMismatch {
                what: format!("record {i}: feature file k×d_v vs dims block"),
                expected: dims.k * dims.d_v,
                found: k * d_v,
            });
        }
        if r.features.offset >= count as u64 {
            return Err(dangling());
        }
    }
    Ok(())
}

/// One question/image/answer triple with features in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// Padded or truncated to `n_w`.
    pub tokens: Vec<usize>,
    pub regions: RegionFeatures<T>,
    pub category: usize,
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub categories: Vec<String>,
    pub dims: DatasetDims,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Resolves every record of a validated manifest into memory.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let dims = m.dims();
        let mut files: HashMap<&str, FeatureFile<T>> = HashMap::new();
        let mut samples = Vec::with_capacity(m.records.len());
        for (i, r) in m.records.iter().enumerate() {
            if !files.contains_key(r.features.file.as_str()) {
                let f = FeatureFile::load(&m.resolve(&r.features.file))?;
                check_feature_dims(&f, dims.k, dims.d_v)?;
                files.insert(&r.features.file, f);
            }
            let regions = files[r.features.file.as_str()]
                .record(r.features.offset)
                .ok_or_else(|| Error::DanglingReference {
                    record: i,
                    path: m.resolve(&r.features.file),
                    offset: r.features.offset,
                })?;
            samples.push(Sample {
                tokens: pad_or_truncate(&r.tokens, dims.n_w, PAD_ID)?,
                regions,
                category: r.category,
                answer: r.answer.clone(),
            });
        }
        Ok(Dataset {
            categories: m.header.categories.clone(),
            dims,
            samples,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest(&load_manifest(path)?)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seeded split into `(train, val)` that keeps each category's proportion
/// within one record.
pub fn split(
    manifest: &DatasetManifest,
    ratios: (f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train_ratio, val_ratio) = ratios;
    if !(0.0..=1.0).contains(&train_ratio)
        || !(0.0..=1.0).contains(&val_ratio)
        || (train_ratio + val_ratio - 1.0).abs() > 1e-9
    {
        return Err(Error::Split(format!(
            "ratios {train_ratio} and {val_ratio} must be in [0, 1] and sum to 1"
        )));
    }
    let mut by_category = vec![Vec::new(); manifest.n_c()];
    for (i, r) in manifest.records.iter().enumerate() {
        by_category[r.category].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_category.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Split(format!(
                "category {c} has {} record(s), fewer than 2 splits",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * train_ratio).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((
        manifest.with_records("train", &train),
        manifest.with_records("val", &val),
    ))
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_c: usize,
    /// Number of distinct answers in each category.
    pub answers_per_category: Vec<usize>,
    pub samples_per_category: usize,
    pub dims: DatasetDims,
    /// Tokens owned by each category.
    pub tokens_per_category: usize,
    /// Minimum distance between prototypes and minimum prototype norm.
    pub margin: f64,
    /// Per-coordinate standard deviation of sample noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn uniform(
        n_c: usize,
        answers: usize,
        samples: usize,
        dims: DatasetDims,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            n_c,
            answers_per_category: vec![answers; n_c],
            samples_per_category: samples,
            dims,
            tokens_per_category: 8,
            margin: 2.0,
            noise: 0.1,
            seed,
        }
    }

    /// Largest noise norm a sample can carry in a `dim`-dimensional space.
    pub fn noise_radius(&self, dim: usize) -> f64 {
        self.noise * ((dim as f64).sqrt() + 3.0)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims;
        if self.n_c == 0
            || self.samples_per_category == 0
            || self.tokens_per_category == 0
            || d.k == 0
            || d.d_v == 0
            || d.d_w == 0
            || d.n_w == 0
        {
            return Err(Error::InvalidArgument(
                "synthetic counts and dims must be at least 1".into(),
            ));
        }
        if self.answers_per_category.len() != self.n_c || self.answers_per_category.contains(&0) {
            return Err(Error::InvalidArgument(
                "every category needs at least one answer".into(),
            ));
        }
        if let Some((c, &a)) = self
            .answers_per_category
            .iter()
            .enumerate()
            .find(|(_, &a)| a > self.samples_per_category)
        {
            return Err(Error::InvalidArgument(format!(
                "category {c} has {a} answers but only {} samples",
                self.samples_per_category
            )));
        }
        if self.margin.is_nan() || self.margin <= 0.0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::InvalidArgument(
                "margin must be positive, noise non-negative".into(),
            ));
        }
        let radius = self.noise_radius(d.d_v.max(d.d_w));
        if self.margin <= 2.0 * radius {
            return Err(Error::Separability(format!(
                "margin {} must exceed twice the noise radius {radius:.4} \
                 (noise {} × (√dim + 3)); raise the margin or lower the noise",
                self.margin, self.noise
            )));
        }
        Ok(())
    }
}

/// Generator output; prototypes are kept for oracle checks.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub features: FeatureFile<f64>,
    pub embedding: EmbeddingTable<f64>,
    pub vocab: Vec<String>,
    /// One point per category in word-embedding space.
    pub category_prototypes: Vec<Vec<f64>>,
    /// Indexed `[category][answer]` in region-feature space.
    pub answer_prototypes: Vec<Vec<Vec<f64>>>,
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian noise rescaled to stay strictly inside `radius`.
fn bounded_noise<R: Rng>(rng: &mut R, dim: usize, std: f64, radius: f64) -> Vec<f64> {
    let mut v = gaussian(rng, dim, std);
    let n = norm(&v);
    let cap = radius * 0.999;
    if n > cap {
        v.iter_mut().for_each(|x| *x *= cap / n);
    }
    v
}

fn prototypes<R: Rng>(rng: &mut R, count: usize, dim: usize, margin: f64) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 + 100 * count {
            return Err(Error::Separability(format!(
                "could not place {count} prototypes {margin} apart in {dim} dimensions"
            )));
        }
        let p = gaussian(rng, dim, margin);
        let far = norm(&p) >= margin
            && out.iter().all(|q| {
                let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
                norm(&d) >= margin
            });
        if far {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn category_name(c: usize) -> String {
    format!("category-{c}")
}

pub fn answer_name(c: usize, a: usize) -> String {
    format!("c{c}-answer-{a}")
}

/// Builds a dataset where nearest-prototype classification is exact.
///
/// Each category owns a disjoint band of tokens whose embeddings sit near
/// the category prototype. Each sample hides its answer prototype, plus
/// bounded noise, in one random region; the other regions are noise only.
/// Within a category, answers are assigned round-robin.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius_w = spec.noise_radius(d.d_w);
    let radius_v = spec.noise_radius(d.d_v);

    let category_prototypes = prototypes(&mut rng, spec.n_c, d.d_w, spec.margin)?;
    let total_answers: usize = spec.answers_per_category.iter().sum();
    let mut flat = prototypes(&mut rng, total_answers, d.d_v, spec.margin)?.into_iter();
    let answer_prototypes: Vec<Vec<Vec<f64>>> = spec
        .answers_per_category
        .iter()
        .map(|&n| flat.by_ref().take(n).collect())
        .collect();

    let band = spec.tokens_per_category;
    let mut vocab = vec![PAD_TOKEN.to_string()];
    let mut rows = vec![0.0; d.d_w];
    for (c, proto) in category_prototypes.iter().enumerate() {
        for j in 0..band {
            vocab.push(format!("c{c}-w{j}"));
            let noise = bounded_noise(&mut rng, d.d_w, spec.noise, radius_w);
            rows.extend(proto.iter().zip(noise).map(|(p, n)| p + n));
        }
    }
    let embedding = EmbeddingTable::new(Tensor::new([vocab.len(), d.d_w], rows)?)?;

    let mut features = FeatureFile::new(d.k, d.d_v);
    let mut records = Vec::with_capacity(spec.n_c * spec.samples_per_category);
    let min_len = d.n_w.div_ceil(2);
    for (c, protos) in answer_prototypes.iter().enumerate() {
        for i in 0..spec.samples_per_category {
            let a = i % protos.len();
            let len = rng.random_range(min_len..=d.n_w);
            let tokens = (0..len)
                .map(|_| 1 + c * band + rng.random_range(0..band))
                .collect();
            let signal = rng.random_range(0..d.k);
            let mut values = Vec::with_capacity(d.k * d.d_v);
            for region in 0..d.k {
                let noise = bounded_noise(&mut rng, d.d_v, spec.noise, radius_v);
                if region == signal {
                    values.extend(protos[a].iter().zip(noise).map(|(p, n)| p + n));
                } else {
                    values.extend(noise);
                }
            }
            let offset =
                features.push(&RegionFeatures::new(Tensor::new([d.k, d.d_v], values)?)?)?;
            records.push(ManifestRecord {
                tokens,
                features: FeatureRef {
                    file: FEATURES_FILE.to_string(),
                    offset,
                },
                category: c,
                answer: answer_name(c, a),
            });
        }
    }
    let manifest = DatasetManifest {
        base_dir: PathBuf::new(),
        header: ManifestHeader {
            split: "all".into(),
            categories: (0..spec.n_c).map(category_name).collect(),
            answers: "records".into(),
            dims: d,
            embedding: EMBEDDING_FILE.into(),
            vocab: Some(VOCAB_FILE.into()),
        },
        records,
    };
    Ok(SyntheticData {
        manifest,
        features,
        embedding,
        vocab,
        category_prototypes,
        answer_prototypes,
    })
}

impl SyntheticData {
    /// Writes manifest, features, embedding table and vocabulary into `dir`
    /// and returns the manifest path.
    pub fn write(&mut self, dir: &Path, precision: Precision) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.features.save(&dir.join(FEATURES_FILE), precision)?;
        self.embedding.save(&dir.join(EMBEDDING_FILE), precision)?;
        write_vocab(&dir.join(VOCAB_FILE), &self.vocab)?;
        let path = dir.join(MANIFEST_FILE);
        self.manifest.save(&path)?;
        self.manifest.base_dir = dir.to_path_buf();
        Ok(path)
    }
}
