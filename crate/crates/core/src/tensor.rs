//! Dense f32 tensors and the KVQT on-disk format.
//!
//! KVQT is the ingestion contract for calibration activations and gradients:
//! magic `"KVQT"`, format version `u32 = 1`, dtype code `u32` (0 = f32),
//! `ndim: u32`, then `ndim` little-endian `u64` dims, then `product(dims)`
//! little-endian `f32` payload values in row-major order. No padding, no
//! footer.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: [u8; 4] = *b"KVQT";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected \"KVQT\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("unsupported dtype code {found} (expected {DTYPE_F32} = f32)")]
    UnsupportedDtype { found: u32 },
    #[error("truncated payload: {context}")]
    Truncated { context: String },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape/data mismatch: shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeMismatch {
        shape: Vec<u64>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shape overflows addressable size: {shape:?}")]
    ShapeOverflow { shape: Vec<u64> },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Dense row-major f32 tensor; the universal calibration/simulation payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<u64>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len() == product(shape)`.
    pub fn new(shape: Vec<u64>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = checked_len(&shape)?;
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: Vec<u64>) -> Result<Self, TensorError> {
        let len = checked_len(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    /// 2-D convenience constructor: shape `[rows, cols]`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows as u64, cols as u64], data)
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        assert_eq!(self.shape.len(), 2, "row() requires a 2-D tensor");
        let cols = self.shape[1] as usize;
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn n_rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "n_rows() requires a 2-D tensor");
        self.shape[0] as usize
    }

    pub fn n_cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "n_cols() requires a 2-D tensor");
        self.shape[1] as usize
    }

    /// True if every element is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn checked_len(shape: &[u64]) -> Result<usize, TensorError> {
    let mut n: u64 = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::ShapeOverflow {
                shape: shape.to_vec(),
            })?;
    }
    usize::try_from(n).map_err(|_| TensorError::ShapeOverflow {
        shape: shape.to_vec(),
    })
}

/// Reads a KVQT tensor file, rejecting malformed headers and non-finite
/// payload values.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_ctx(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(TensorError::VersionMismatch { found: version });
    }
    let dtype = read_u32(&mut r, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(TensorError::UnsupportedDtype { found: dtype });
    }
    let ndim = read_u32(&mut r, "ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut buf = [0u8; 8];
        read_exact_ctx(&mut r, &mut buf, &format!("dim {i}"))?;
        shape.push(u64::from_le_bytes(buf));
    }
    let len = checked_len(&shape)?;

    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for i in 0..len {
        read_exact_ctx(&mut r, &mut buf, &format!("payload element {i} of {len}"))?;
        let v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

/// Writes a tensor in KVQT format. `read_tensor(write_tensor(t)) == t`
/// bit-for-bit on the payload.
pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    read_exact_ctx(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorError::Truncated {
                context: what.to_string(),
            }
        } else {
            TensorError::Io(e)
        }
    })
}

/// One layer's calibration dump: pre-RoPE Key activations, Value activations,
/// and matching gradients, one tensor per calibration sample.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub grads_keys: Vec<Tensor>,
    pub grads_values: Vec<Tensor>,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration set must contain at least one sample")]
    Empty,
    #[error("sample {sample}: {kind} activation/gradient shapes differ ({activation:?} vs {gradient:?})")]
    GradShapeMismatch {
        sample: usize,
        kind: &'static str,
        activation: Vec<u64>,
        gradient: Vec<u64>,
    },
    #[error("sample count mismatch: keys {keys}, values {values}, grads_keys {grads_keys}, grads_values {grads_values}")]
    CountMismatch {
        keys: usize,
        values: usize,
        grads_keys: usize,
        grads_values: usize,
    },
}

impl CalibrationSet {
    pub fn new(
        keys: Vec<Tensor>,
        values: Vec<Tensor>,
        grads_keys: Vec<Tensor>,
        grads_values: Vec<Tensor>,
    ) -> Result<Self, CalibrationError> {
        if keys.is_empty() {
            return Err(CalibrationError::Empty);
        }
        if keys.len() != values.len()
            || keys.len() != grads_keys.len()
            || keys.len() != grads_values.len()
        {
            return Err(CalibrationError::CountMismatch {
                keys: keys.len(),
                values: values.len(),
                grads_keys: grads_keys.len(),
                grads_values: grads_values.len(),
            });
        }
        for (i, (a, g)) in keys.iter().zip(&grads_keys).enumerate() {
            if a.shape() != g.shape() {
                return Err(CalibrationError::GradShapeMismatch {
                    sample: i,
                    kind: "key",
                    activation: a.shape().to_vec(),
                    gradient: g.shape().to_vec(),
                });
            }
        }
        for (i, (a, g)) in values.iter().zip(&grads_values).enumerate() {
            if a.shape() != g.shape() {
                return Err(CalibrationError::GradShapeMismatch {
                    sample: i,
                    kind: "value",
                    activation: a.shape().to_vec(),
                    gradient: g.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            keys,
            values,
            grads_keys,
            grads_values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.keys.len()
    }
}
