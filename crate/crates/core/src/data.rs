//! Datasets held in memory and the synthetic 2-D generators.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Per-coordinate affine map `x_norm = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: alloc::vec![0.0; d],
            scale: alloc::vec![1.0; d],
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.shift.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shift.len(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.shift[i % d]) / self.scale[i % d];
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % d] + self.shift[i % d];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Tensor,
    normalization: Normalization,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    /// Wraps raw samples (identity normalisation). Rejects empty or
    /// non-finite data.
    pub fn new(name: impl Into<String>, samples: Tensor) -> Result<Self> {
        if samples.shape().len() != 2 || samples.rows() == 0 || samples.cols() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite { context: "dataset" });
        }
        let d = samples.cols();
        Ok(Self {
            name: name.into(),
            samples,
            normalization: Normalization::identity(d),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Standardises each coordinate to zero mean and unit variance,
    /// recording the map. Constant columns keep scale 1.
    pub fn standardized(self) -> Result<Self> {
        let mean = self.samples.column_means();
        let n = self.len() as f64;
        let d = self.dim();
        let mut var = alloc::vec![0.0; d];
        for r in 0..self.len() {
            for (c, v) in self.samples.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        let norm = Normalization { shift: mean, scale };
        self.with_normalization(norm)
    }

    /// Applies `norm` on top of the raw samples.
    pub fn with_normalization(self, norm: Normalization) -> Result<Self> {
        let raw = self.raw_samples()?;
        let samples = norm.apply(&raw)?;
        Ok(Self {
            samples,
            normalization: norm,
            ..self
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Samples in normalised coordinates.
    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Samples in the original coordinates.
    pub fn raw_samples(&self) -> Result<Tensor> {
        self.normalization.invert(&self.samples)
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.samples.select_rows(indices)
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Empty("dataset"))
    } else {
        Ok(())
    }
}

/// Equal-weight mixture of `modes` isotropic Gaussians with means on a
/// circle of `radius`. Labels hold the generating mode.
pub fn make_gaussian_ring(n: usize, modes: usize, radius: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    if modes == 0 || !(sigma > 0.0) || !(radius >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "ring needs modes >= 1, sigma > 0, radius >= 0 (got {modes}, {sigma}, {radius})"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(modes);
        let angle = 2.0 * PI * k as f64 / modes as f64;
        data.push(radius * angle.cos() + sigma * rng.normal());
        data.push(radius * angle.sin() + sigma * rng.normal());
        labels.push(k);
    }
    let name = alloc::format!("ring{modes}");
    Dataset::new(name, Tensor::from_vec(&[n, 2], data)?)?.with_labels(labels)
}

/// Uniform on the dark squares of a 4x4 checkerboard covering `[-4, 4]^2`.
pub fn make_checkerboard(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x = rng.uniform_range(-2.0, 2.0);
        let offset = (x.floor() as i64).rem_euclid(2) as f64;
        let y = rng.uniform() - 2.0 * rng.below(2) as f64 + offset;
        data.push(2.0 * x);
        data.push(2.0 * y);
    }
    Dataset::new("checkerboard", Tensor::from_vec(&[n, 2], data)?)
}

/// Pinwheel with `arms` spiralling arms; draws falling outside `[-4, 4]^2`
/// are redrawn.
pub fn make_pinwheel(n: usize, arms: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    if arms == 0 {
        return Err(Error::InvalidConfig(String::from("pinwheel needs arms >= 1")));
    }
    let (radial, tangential, rate) = (0.3, 0.1, 0.25);
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let k = rng.below(arms);
        let a = rng.normal() * radial + 1.0;
        let b = rng.normal() * tangential;
        let angle = 2.0 * PI * k as f64 / arms as f64 + rate * a.exp();
        let (s, c) = angle.sin_cos();
        let x = 2.0 * (c * a - s * b);
        let y = 2.0 * (s * a + c * b);
        if x.abs() <= 4.0 && y.abs() <= 4.0 {
            data.push(x);
            data.push(y);
            labels.push(k);
        }
    }
    Dataset::new("pinwheel", Tensor::from_vec(&[n, 2], data)?)?.with_labels(labels)
}

/// Failure modes of the IDX decoder.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("IDX payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimensions {0:?} overflow the addressable size")]
    DimensionOverflow(Vec<u32>),
}

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

/// Magic of an unsigned-byte IDX file with `rank` dimensions.
pub fn idx_magic(rank: u8) -> u32 {
    0x0800 | rank as u32
}

/// Decodes big-endian IDX bytes holding unsigned-byte data.
pub fn parse_idx(bytes: &[u8]) -> core::result::Result<IdxArray, IdxError> {
    let word = |at: usize| -> core::result::Result<u32, IdxError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(IdxError::Truncated {
                expected: at + 4,
                found: bytes.len(),
            })
    };
    let magic = word(0)?;
    let rank = (magic & 0xff) as usize;
    if magic & 0xffff_ff00 != 0x0800 || rank == 0 {
        return Err(IdxError::BadMagic(magic));
    }
    let dims: Vec<u32> = (0..rank)
        .map(|i| word(4 + 4 * i))
        .collect::<core::result::Result<_, _>>()?;
    let header = 4 + 4 * rank;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|c| c.checked_add(header).map(|_| c))
        .ok_or_else(|| IdxError::DimensionOverflow(dims.clone()))?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(IdxError::Truncated {
            expected: header + count,
            found: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: payload[..count].to_vec(),
    })
}

/// Encodes an unsigned-byte tensor in IDX layout.
pub fn encode_idx(array: &IdxArray) -> core::result::Result<Vec<u8>, IdxError> {
    let overflow = || IdxError::DimensionOverflow(array.dims.clone());
    let rank = u8::try_from(array.dims.len()).map_err(|_| overflow())?;
    let count = array
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(overflow)?;
    if count != array.data.len() {
        return Err(IdxError::Truncated {
            expected: count,
            found: array.data.len(),
        });
    }
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + count);
    out.extend_from_slice(&idx_magic(rank).to_be_bytes());
    for d in &array.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

impl Dataset {
    /// Images of an IDX array `[n, d1, d2, ...]` flattened to rows and
    /// scaled to `[0, 1]`.
    pub fn from_idx(name: impl Into<String>, array: &IdxArray) -> Result<Self> {
        let n = *array.dims.first().ok_or(Error::Empty("idx dimensions"))? as usize;
        check_n(n)?;
        let width = array.data.len() / n;
        let data = array.data.iter().map(|&b| b as f64 / 255.0).collect();
        Dataset::new(name, Tensor::from_vec(&[n, width], data)?)
    }

    /// Rows quantised back to bytes, as an IDX image array with the given
    /// per-image dimensions.
    pub fn to_idx(&self, image_dims: &[u32]) -> Result<IdxArray> {
        let width: usize = image_dims.iter().map(|&d| d as usize).product();
        if width != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: width,
            });
        }
        let raw = self.raw_samples()?;
        let mut dims = alloc::vec![self.len() as u32];
        dims.extend_from_slice(image_dims);
        Ok(IdxArray {
            dims,
            data: raw
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        })
    }
}
