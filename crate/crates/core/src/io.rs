//! Dataset ingestion (IDX, synthetic), splitting and on-disk outputs.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::models::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a whole file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {count} labels, found {}", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
///
/// Classes are `max(label) + 1`, with a floor of 10 for digit datasets.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::CountMismatch {
            images: img.count,
            labels: lab.len(),
        });
    }
    let classes = lab.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    let features = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(
        features,
        img.rows * img.cols,
        lab.into_iter().map(usize::from).collect(),
        classes,
    )
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bundled 10k-digit MNIST subset shipped with the crate.
pub fn bundled_mnist_paths() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    (
        dir.join("mnist-10k-images-idx3-ubyte.gz"),
        dir.join("mnist-10k-labels-idx1-ubyte.gz"),
    )
}

/// Gaussian class clusters with a controllable noise spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    /// Distance between any two class means (before normalization).
    pub separation: f64,
    /// Noise standard deviation along the first feature axis.
    pub noise_std: f64,
    /// Geometric decay of the noise standard deviation across axes, in `(0, 1]`.
    pub anisotropy: f64,
    pub samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            feature_dim: 10,
            separation: 4.0,
            noise_std: 1.0,
            anisotropy: 1.0,
            samples: 200,
        }
    }
}

/// Samples class-balanced Gaussian clusters, then min-max scales every feature to `[0, 1]`.
///
/// Class `c` is centred at `separation/√2 · e_{c mod f}`, so distinct means sit
/// exactly `separation` apart when `classes ≤ feature_dim`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.feature_dim == 0 || spec.samples == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs ≥ 2 classes, ≥ 1 feature and ≥ 1 sample".into(),
        ));
    }
    if !(spec.separation >= 0.0)
        || !(spec.noise_std >= 0.0)
        || !(spec.anisotropy > 0.0 && spec.anisotropy <= 1.0)
    {
        return Err(Error::InvalidArgument(
            "separation and noise_std must be ≥ 0 and anisotropy in (0, 1]".into(),
        ));
    }
    let f = spec.feature_dim;
    let mut rng = SeededRng::new(seed).substream("synthetic");
    let offset = spec.separation / std::f64::consts::SQRT_2;
    let stds: Vec<f64> = (0..f)
        .map(|j| spec.noise_std * spec.anisotropy.powi(j as i32))
        .collect();
    let mut features = Vec::with_capacity(spec.samples * f);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        for (j, s) in stds.iter().enumerate() {
            let mean = if j == c % f { offset } else { 0.0 };
            features.push(mean + s * rng.standard_normal());
        }
        labels.push(c);
    }
    for j in 0..f {
        let (lo, hi) = (0..spec.samples)
            .map(|i| features[i * f + j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                (lo.min(x), hi.max(x))
            });
        let span = hi - lo;
        for i in 0..spec.samples {
            let x = &mut features[i * f + j];
            *x = if span > 0.0 { (*x - lo) / span } else { 0.5 };
        }
    }
    Dataset::new(features, f, labels, spec.classes)
}

/// Sizes of the disjoint private/public/holdout/test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub private: usize,
    pub public: usize,
    pub holdout: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub private: Dataset,
    pub public: Option<Dataset>,
    pub holdout: Option<Dataset>,
    pub test: Option<Dataset>,
    /// Source indices of each split, in the order above.
    pub indices: [Vec<usize>; 4],
}

/// Seeded random partition of `data` into disjoint splits.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let total = spec.private + spec.public + spec.holdout + spec.test;
    if spec.private == 0 || total > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples into private {} + public {} + holdout {} + test {}",
            data.len(),
            spec.private,
            spec.public,
            spec.holdout,
            spec.test
        )));
    }
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut SeededRng::new(spec.seed).substream("split"));
    let mut cursor = 0;
    let mut take = |n: usize| {
        let part = perm[cursor..cursor + n].to_vec();
        cursor += n;
        part
    };
    let idx = [
        take(spec.private),
        take(spec.public),
        take(spec.holdout),
        take(spec.test),
    ];
    let opt = |ix: &Vec<usize>| -> Result<Option<Dataset>> {
        if ix.is_empty() {
            Ok(None)
        } else {
            data.subset(ix).map(Some)
        }
    };
    Ok(Splits {
        private: data.subset(&idx[0])?,
        public: opt(&idx[1])?,
        holdout: opt(&idx[2])?,
        test: opt(&idx[3])?,
        indices: idx,
    })
}

/// Appends JSON lines to a file while hashing everything written.
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: PathBuf,
    hasher: Sha256,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            hasher: Sha256::new(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.hasher.update(line.as_bytes());
        self.out
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Flushes and returns the hex SHA-256 of the stream.
    pub fn finish(mut self) -> Result<String> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(hex::encode(self.hasher.finalize()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row of a 2-D gradient cloud dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grad2dRow {
    pub step: usize,
    pub sample: usize,
    pub layer: String,
    pub variant: String,
    pub x: f64,
    pub y: f64,
}

/// Writes `step,sample,layer,variant,x,y` CSV and returns its SHA-256.
pub fn write_grad2d_csv(path: &Path, rows: &[Grad2dRow]) -> Result<String> {
    let mut text = String::from("step,sample,layer,variant,x,y\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{:e},{:e}\n",
            r.step, r.sample, r.layer, r.variant, r.x, r.y
        ));
    }
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}
