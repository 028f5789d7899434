//! BLCF tensor files, saliency image ingestion and the dataset manifest.
//!
//! Tensor file layout (all integers and floats little-endian):
//!
//! | bytes          | content                      |
//! |----------------|------------------------------|
//! | 4              | magic `BLCF`                 |
//! | 1              | format version (`1`)         |
//! | 4              | `ndim` as `u32`              |
//! | 4 · ndim       | each dimension as `u32`      |
//! | 4 · Π dims     | row-major `f32` payload      |

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"BLCF";
pub const FORMAT_VERSION: u8 = 1;

/// Dense row-major tensor of rank 2 (`H × W` maps) or rank 3 (`M × N × D` feature maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::Shape(format!("rank must be 2 or 3, got {}", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: S) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Shape(format!("expected a 2-D map, got dims {:?}", self.dims))),
        }
    }

    /// `(rows, cols, depth)` of a rank-3 tensor.
    pub fn shape3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [m, n, d] => Ok((m, n, d)),
            _ => Err(Error::Shape(format!(
                "expected an M×N×D feature map, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Descriptor at grid cell `(i, j)` of a rank-3 tensor.
    pub fn descriptor(&self, i: usize, j: usize) -> &[S] {
        let (n, d) = (self.dims[1], self.dims[2]);
        let start = (i * n + j) * d;
        &self.data[start..start + d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::of(v.wide())).collect(),
        }
    }
}

/// Writes `tensor` in the BLCF format.
pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    if !tensor.is_finite() {
        return Err(Error::NonFinite {
            context: path.display().to_string(),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&[FORMAT_VERSION]).map_err(io)?;
    out.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io)?;
    for &d in tensor.dims() {
        out.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for v in tensor.data() {
        out.write_all(&(v.wide() as f32).to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parses a BLCF tensor from an in-memory buffer. `path` is used for error context only.
pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 9 {
        return Err(truncated("header ends early".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: bytes[4],
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let ndim = u32_at(5) as usize;
    if ndim != 2 && ndim != 3 {
        return Err(Error::Shape(format!(
            "{}: rank must be 2 or 3, got {ndim}",
            path.display()
        )));
    }
    let header = 9 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated("dimension list ends early".into()));
    }
    let dims: Vec<usize> = (0..ndim).map(|k| u32_at(9 + 4 * k) as usize).collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(truncated(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            4 * count,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: path.display().to_string(),
        });
    }
    Tensor::new(dims, data)
}

/// Reads only the header of a tensor file and returns its dims, checking that the file size
/// matches them.
pub fn read_tensor_dims(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = [0u8; 9 + 4 * 3];
    let mut filled = 0;
    while filled < head.len() {
        match f.read(&mut head[filled..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            n => filled += n,
        }
    }
    let head = &head[..filled];
    if head.len() < 4 || &head[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if head.len() < 9 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "header ends early".into(),
        });
    }
    if head[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: head[4],
        });
    }
    let ndim = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    if ndim != 2 && ndim != 3 {
        return Err(Error::Shape(format!(
            "{}: rank must be 2 or 3, got {ndim}",
            path.display()
        )));
    }
    if head.len() < 9 + 4 * ndim {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "dimension list ends early".into(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_le_bytes(head[9 + 4 * k..13 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let expected = (9 + 4 * ndim + 4 * dims.iter().product::<usize>()) as u64;
    if file_len != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("dims {dims:?} need {expected} bytes, file has {file_len}"),
        });
    }
    Ok(dims)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Reads an 8-bit grayscale saliency image as a `target_h × target_w` map in `[0, 1]`.
/// Colour images are converted to luma first; other sizes are bilinearly resized.
pub fn read_saliency_image<S: Scalar>(path: impl AsRef<Path>, target_w: usize, target_h: usize) -> Result<Tensor<S>> {
    let path = path.as_ref();
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidParameter(format!("target size {target_w}x{target_h}")));
    }
    let gray = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Decode {
                path: path.to_path_buf(),
                source,
            },
        })?
        .into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let scaled: Vec<S> = gray.as_raw().iter().map(|&p| S::of(f64::from(p) / 255.0)).collect();
    let data = if (w, h) == (target_w, target_h) {
        scaled
    } else {
        resample::bilinear(&scaled, h, w, 1, target_h, target_w)
            .into_iter()
            .map(|v| v.max(S::zero()).min(S::one()))
            .collect()
    };
    Tensor::new(vec![target_h, target_w], data)
}

/// Loads a saliency map stored either as a 2-D BLCF tensor (kept at its stored size) or as
/// a grayscale image (resized to `width × height`).
pub fn read_saliency<S: Scalar>(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let is_tensor = {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read(&mut head).map_err(|e| Error::io(path, e))? == 4 && &head == MAGIC
    };
    if is_tensor {
        let tensor = read_tensor(path)?;
        tensor.shape2()?;
        if tensor.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter(format!(
                "{}: saliency values must lie in [0, 1]",
                path.display()
            )));
        }
        Ok(tensor.cast())
    } else {
        read_saliency_image(path, width, height)
    }
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    /// Original image width in pixels.
    pub width: usize,
    /// Original image height in pixels.
    pub height: usize,
    pub tensor_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_path: Option<PathBuf>,
    /// RGB source image, only needed for on-the-fly BMS weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

/// Reads a JSON-lines manifest. Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageMeta>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", lineno + 1),
        };
        let mut meta: ImageMeta = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if meta.width == 0 || meta.height == 0 {
            return Err(parse_err(format!("{}: width and height must be ≥ 1", meta.image_id)));
        }
        if !seen.insert(meta.image_id.clone()) {
            return Err(Error::DuplicateImageId(meta.image_id));
        }
        meta.tensor_path = resolve(meta.tensor_path);
        meta.saliency_path = meta.saliency_path.map(resolve);
        meta.image_path = meta.image_path.map(resolve);
        entries.push(meta);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ImageMeta]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for meta in entries {
        let line = serde_json::to_string(meta).expect("manifest entries serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
