//! Partially labeled datasets: synthetic Gaussian mixtures and exported
//! embedding files.
//!
//! Binary features: `GCDE`, u32 version, u64 n, u64 d, then `n·d`
//! little-endian f64 in row-major order. Binary labels: `n` little-endian
//! i64 with no header. CSV features: a header line `n,d` followed by one
//! comma-separated row per sample.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

pub const MAGIC: &[u8; 4] = b"GCDE";
pub const VERSION: u32 = 1;

const FEATURES_FILE: &str = "features.bin";
const LABELS_FILE: &str = "labels.bin";
const META_FILE: &str = "dataset.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct GcdDataset {
    /// `n × d`
    pub features: Tensor,
    /// Ground truth for every sample; only the labeled ones are visible to
    /// training.
    pub labels: Vec<usize>,
    pub labeled: Vec<bool>,
    pub num_classes: usize,
    /// Sorted.
    pub old_classes: Vec<usize>,
    pub split_seed: u64,
}

impl GcdDataset {
    /// Assemble a dataset and draw its labeled split.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        mut old_classes: Vec<usize>,
        split_seed: u64,
    ) -> Result<Self> {
        old_classes.sort_unstable();
        old_classes.dedup();
        if features.rows() != labels.len() {
            return Err(Error::dim(
                "GcdDataset",
                format!("{} feature rows for {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(&c) = labels.iter().chain(&old_classes).find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!("class {c} outside 0..{num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("dataset features"));
        }
        let labeled = split_labeled(&labels, &old_classes, split_seed);
        Ok(Self {
            features,
            labels,
            labeled,
            num_classes,
            old_classes,
            split_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn new_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|c| !self.old_classes.contains(c)).collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled[i]).collect()
    }

    /// Labels visible to training.
    pub fn visible_labels(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .zip(&self.labeled)
            .map(|(&y, &l)| l.then_some(y))
            .collect()
    }

    /// Rows `indices` of the feature matrix.
    pub fn rows(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Tensor::matrix(indices.len(), d, data).expect("row gather keeps shape")
    }
}

/// Label `⌊n_c/2⌋` samples of every old class `c`, chosen by a seeded
/// shuffle that visits the classes in ascending order.
pub fn split_labeled(labels: &[usize], old_classes: &[usize], seed: u64) -> Vec<bool> {
    let mut rng = seeded(seed, stream::SPLIT);
    let mut labeled = vec![false; labels.len()];
    let mut classes = old_classes.to_vec();
    classes.sort_unstable();
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[..members.len() / 2] {
            labeled[i] = true;
        }
    }
    labeled
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub old: usize,
    pub per_class: usize,
    pub dim: usize,
    pub std: f64,
    /// Minimum distance between class centers.
    pub separation: f64,
    pub seed: u64,
    /// Class `c` gets `per_class·decay^c` samples when set.
    pub long_tail: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            old: 5,
            per_class: 100,
            dim: 16,
            std: 1.0,
            separation: 6.0,
            seed: 0,
            long_tail: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.old > self.classes {
            return Err(Error::Config(format!(
                "need 0 < classes and old ≤ classes, got {} / {}",
                self.classes, self.old
            )));
        }
        if self.per_class == 0 || self.dim == 0 {
            return Err(Error::Config("per_class and dim must be positive".into()));
        }
        if !(self.separation > 0.0) || !(self.std >= 0.0) {
            return Err(Error::Config("separation must be positive and std non-negative".into()));
        }
        if let Some(d) = self.long_tail {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("long-tail decay must lie in (0,1], got {d}")));
            }
        }
        Ok(())
    }

    pub fn class_size(&self, c: usize) -> usize {
        match self.long_tail {
            None => self.per_class,
            Some(d) => ((self.per_class as f64 * d.powi(c as i32)).round() as usize).max(1),
        }
    }
}

const CENTER_RETRIES: usize = 1000;

fn unit_gaussian<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class centers on the sphere of radius `separation`, redrawn until every
/// pair is at least `separation` apart.
pub fn synth_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = seeded(cfg.seed, stream::DATA);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let mut placed = false;
        for _ in 0..CENTER_RETRIES {
            let cand: Vec<f64> = unit_gaussian(cfg.dim, &mut rng)
                .into_iter()
                .map(|x| x * cfg.separation)
                .collect();
            if centers
                .iter()
                .all(|o| crate::das::euclidean(o, &cand) >= cfg.separation)
            {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place center {c} at separation {} in {} dimensions",
                cfg.separation, cfg.dim
            )));
        }
    }
    Ok(centers)
}

/// Isotropic Gaussian mixture with the first `old` classes known. Samples
/// are stored class by class.
pub fn synth_gmm(cfg: &SynthConfig) -> Result<GcdDataset> {
    cfg.validate()?;
    let centers = synth_centers(cfg)?;
    let mut rng = seeded(cfg.seed, stream::DATA ^ 0xA5);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..cfg.class_size(c) {
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + cfg.std * z);
            }
            labels.push(c);
        }
    }
    let features = Tensor::matrix(labels.len(), cfg.dim, data)?;
    GcdDataset::new(features, labels, cfg.classes, (0..cfg.old).collect(), cfg.seed)
}

/// A uniformly random subset of `size` rows, sorted, reproducible per seed.
pub fn sample_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed, stream::PROBE);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(n));
    idx.sort_unstable();
    idx
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_finite(path: &Path, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::format(path, format!("non-finite value at position {i}"))),
        None => Ok(()),
    }
}

pub fn encode_binary(features: &Tensor) -> Vec<u8> {
    let (n, d) = (features.rows() as u64, features.cols() as u64);
    let mut out = Vec::with_capacity(24 + features.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn decode_binary(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing GCDE header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (n, d) = (u64_at(bytes, 8) as usize, u64_at(bytes, 16) as usize);
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::format(path, "header size overflows"))?;
    if bytes.len() - 24 != expected {
        return Err(Error::format(
            path,
            format!("{n}×{d} header but {} payload bytes", bytes.len() - 24),
        ));
    }
    let data: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(path, &data)?;
    Tensor::matrix(n, d, data)
}

pub fn encode_csv(features: &Tensor) -> String {
    let (n, d) = (features.rows(), features.cols());
    let mut out = format!("{n},{d}\n");
    for row in features.data().chunks(d.max(1)).take(n) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(path: &Path, text: &str) -> Result<Tensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("malformed header {header:?}")))?;
    let [n, d] = dims[..] else {
        return Err(Error::format(path, format!("header must be `n,d`, got {header:?}")));
    };
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("row {r}: unparsable value")))?;
        if vals.len() != d {
            return Err(Error::format(path, format!("row {r}: {} values, expected {d}", vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != n {
        return Err(Error::format(path, format!("header says {n} rows, found {rows}")));
    }
    check_finite(path, &data)?;
    Tensor::matrix(n, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` and `.txt` are text, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv" | "txt") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

pub fn save_features(path: &Path, features: &Tensor, format: Format) -> Result<()> {
    match format {
        Format::Binary => write(path, &encode_binary(features)),
        Format::Csv => write(path, encode_csv(features).as_bytes()),
    }
}

/// Reads either format, recognising binary files by their magic.
pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(path, &bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "neither GCDE nor UTF-8 text"))?;
        decode_csv(path, &text)
    }
}

/// Labels as little-endian i64, or one integer per line for text formats.
pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    match Format::from_path(path) {
        Format::Binary => {
            let bytes: Vec<u8> = labels.iter().flat_map(|&y| (y as i64).to_le_bytes()).collect();
            write(path, &bytes)
        }
        Format::Csv => {
            let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
            write(path, text.as_bytes())
        }
    }
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let raw: Vec<i64> = match Format::from_path(path) {
        Format::Binary => {
            if bytes.len() % 8 != 0 {
                return Err(Error::format(path, "label file length is not a multiple of 8"));
            }
            bytes
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        Format::Csv => String::from_utf8_lossy(&bytes)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, "unparsable label"))?,
    };
    raw.into_iter()
        .map(|y| usize::try_from(y).map_err(|_| Error::format(path, format!("negative label {y}"))))
        .collect()
}

/// Features and labels from separate files. `num_classes` defaults to the
/// largest label plus one.
pub fn load_embeddings(
    features_path: &Path,
    labels_path: &Path,
    old_classes: &[usize],
    num_classes: Option<usize>,
    split_seed: u64,
) -> Result<GcdDataset> {
    let features = load_features(features_path)?;
    let labels = load_labels(labels_path)?;
    if labels.len() != features.rows() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} feature rows", labels.len(), features.rows()),
        ));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    GcdDataset::new(features, labels, k, old_classes.to_vec(), split_seed)
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join(META_FILE)
}

/// Write `features.bin`, `labels.bin` and `dataset.cfg` under `dir`.
pub fn save_dir(dir: &Path, ds: &GcdDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_features(&dir.join(FEATURES_FILE), &ds.features, Format::Binary)?;
    save_labels(&dir.join(LABELS_FILE), &ds.labels)?;
    let old: Vec<String> = ds.old_classes.iter().map(|c| c.to_string()).collect();
    let meta = format!(
        "num_classes={}\nold_classes={}\nsplit_seed={}\n",
        ds.num_classes,
        old.join(","),
        ds.split_seed
    );
    write(&meta_path(dir), meta.as_bytes())
}

/// Inverse of [`save_dir`]; the labeled split is redrawn from the stored
/// seed and comes out identical.
pub fn load_dir(dir: &Path) -> Result<GcdDataset> {
    let path = meta_path(dir);
    let text = String::from_utf8(read(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
    let mut num_classes = None;
    let mut old = None;
    let mut seed = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("expected key=value, got {line:?}")))?;
        let bad = || Error::format(&path, format!("bad value for {k}"));
        match k.trim() {
            "num_classes" => num_classes = Some(v.trim().parse().map_err(|_| bad())?),
            "split_seed" => seed = Some(v.trim().parse().map_err(|_| bad())?),
            "old_classes" => {
                old = Some(
                    v.split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad())?,
                )
            }
            other => return Err(Error::format(&path, format!("unknown key {other}"))),
        }
    }
    let missing = |k: &str| Error::format(&path, format!("missing {k}"));
    load_embeddings(
        &dir.join(FEATURES_FILE),
        &dir.join(LABELS_FILE),
        &old.ok_or_else(|| missing("old_classes"))?,
        Some(num_classes.ok_or_else(|| missing("num_classes"))?),
        seed.ok_or_else(|| missing("split_seed"))?,
    )
}
