//! On-disk datasets: binary PGM images and masks, one annotation JSON per
//! sample and a `manifest.json` per directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{gen_sample, quantize, Domain, DomainConfig, LabeledSample};
use crate::numcore::Tensor;
use crate::raster::{BinaryMap, PixelBox};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unexpected end of file")]
    UnexpectedEof { path: PathBuf },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

impl DataError {
    fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        DataError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub base_seed: u64,
    pub ids: Vec<u64>,
    pub config_hash: String,
    pub config: DomainConfig,
    /// Filled on load; never written.
    #[serde(skip)]
    pub check_warnings: Vec<String>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl Manifest {
    pub fn sample_path(&self, id: u64) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Warns when the dataset was generated from a different config.
    pub fn check_against(&mut self, expected: &DomainConfig) {
        let want = expected.hash();
        if want != self.config_hash {
            self.check_warnings.push(format!(
                "config hash mismatch in {}: manifest {} vs expected {}",
                self.dir.display(),
                self.config_hash,
                want
            ));
        }
    }

    pub fn load_all(&self) -> Result<Vec<LabeledSample>, DataError> {
        self.ids.iter().map(|&id| load_sample(&self.sample_path(id))).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    sample_id: u64,
    domain: Domain,
    boxes: Vec<[usize; 4]>,
    mask_file: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes values in `[0, 1]` as 8-bit P5 with `round(v * 255)`.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<(), DataError> {
    assert_eq!(values.len(), height * width);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a P5 file with maxval 255 and returns `(height, width, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let eof = || DataError::UnexpectedEof { path: path.to_path_buf() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(eof());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(eof());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(DataError::corrupt(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| DataError::corrupt(path, format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(DataError::corrupt(path, format!("maxval {maxval} is not 255")));
    }
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(eof());
    }
    if raster.len() > need {
        return Err(DataError::corrupt(path, "trailing bytes after raster"));
    }
    Ok((height, width, raster.to_vec()))
}

/// Writes `count` samples with ids `base_seed..base_seed + count`.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    domain: Domain,
    cfg: &DomainConfig,
    base_seed: u64,
) -> Result<Manifest, DataError> {
    if count == 0 {
        return Err(DataError::Invalid("count must be at least 1".into()));
    }
    cfg.validate().map_err(DataError::Invalid)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let id = base_seed + i;
        let sample = gen_sample(id, domain, cfg);
        write_sample(dir, &sample)?;
        ids.push(id);
    }
    let manifest = Manifest {
        domain,
        base_seed,
        ids,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        check_warnings: Vec::new(),
        dir: dir.to_path_buf(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn write_sample(dir: &Path, sample: &LabeledSample) -> Result<(), DataError> {
    let id = sample.sample_id;
    let (h, w) = sample.mask.shape();
    write_pgm(&dir.join(format!("{id}.pgm")), h, w, sample.image.data())?;
    let mask: Vec<f64> = sample.mask.bits().iter().map(|&b| f64::from(b)).collect();
    let mask_file = format!("{id}.mask.pgm");
    write_pgm(&dir.join(&mask_file), h, w, &mask)?;
    let ann = Annotation {
        sample_id: id,
        domain: sample.domain,
        boxes: sample.boxes.iter().map(PixelBox::as_array).collect(),
        mask_file,
    };
    let path = dir.join(format!("{id}.json"));
    let json = serde_json::to_string(&ann).expect("annotation serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

/// Loads a sample from its annotation file; the image and mask PGMs are
/// resolved next to it.
pub fn load_sample(path: &Path) -> Result<LabeledSample, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ann: Annotation = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let image_path = dir.join(format!("{}.pgm", ann.sample_id));
    let (h, w, pixels) = read_pgm(&image_path)?;
    let mask_path = dir.join(&ann.mask_file);
    let (mh, mw, mask_bytes) = read_pgm(&mask_path)?;
    if (mh, mw) != (h, w) {
        return Err(DataError::corrupt(&mask_path, format!("mask is {mh}x{mw}, image is {h}x{w}")));
    }
    if let Some(bad) = mask_bytes.iter().position(|&b| b != 0 && b != 255) {
        return Err(DataError::corrupt(&mask_path, format!("mask byte {bad} is not 0 or 255")));
    }
    let mut boxes = Vec::with_capacity(ann.boxes.len());
    for [x0, y0, x1, y1] in ann.boxes {
        let b = PixelBox::new(x0, y0, x1, y1)
            .filter(|b| b.x_max <= w && b.y_max <= h)
            .ok_or_else(|| DataError::corrupt(path, format!("invalid box {:?}", [x0, y0, x1, y1])))?;
        boxes.push(b);
    }
    let data = pixels.iter().map(|&p| quantize(f64::from(p) / 255.0)).collect();
    Ok(LabeledSample {
        image: Tensor::new(vec![h, w], data).expect("pixel values are finite"),
        mask: BinaryMap::from_bits(h, w, mask_bytes),
        boxes,
        domain: ann.domain,
        sample_id: ann.sample_id,
    })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.clone(),
        source,
    })?;
    manifest.dir = dir.to_path_buf();
    let recomputed = manifest.config.hash();
    if recomputed != manifest.config_hash {
        manifest.check_warnings.push(format!(
            "config hash mismatch in {}: stored {} but config hashes to {}",
            path.display(),
            manifest.config_hash,
            recomputed
        ));
    }
    Ok(manifest)
}
