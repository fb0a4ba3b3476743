//! Dense row-major f64 tensors.
//!
//! Tensors are plain values: shape + data, with an optional gradient
//! accumulator that exists exactly when `requires_grad` is set. All autodiff
//! bookkeeping lives in [`crate::tape`]; a `Tensor` on its own never records
//! anything.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the on-disk tensor record.
const DTNS_MAGIC: &[u8; 4] = b"DTNS";
const DTNS_VERSION: u8 = 0x01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking that the extents multiply out to the data length.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalars are represented as shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark the tensor as a gradient leaf. The accumulator is allocated (zeroed)
    /// now so that `grad` is present exactly when `requires_grad` is.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
        if yes {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let acc = self
            .grad
            .as_mut()
            .expect("accumulate_grad on a tensor without requires_grad");
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} at flat index {i} in {what}"
                )));
            }
        }
        Ok(())
    }

    /// Serialize as a DTNS record: magic "DTNS", version 0x01, u8 rank,
    /// rank x u32 little-endian extents, then little-endian f64 payload.
    pub fn write_dtns<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DTNS_MAGIC)?;
        w.write_all(&[DTNS_VERSION])?;
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "rank {} exceeds DTNS limit",
                self.shape.len()
            )));
        }
        w.write_all(&[self.shape.len() as u8])?;
        for &e in &self.shape {
            if e > u32::MAX as usize {
                return Err(Error::Format(format!("extent {e} exceeds DTNS limit")));
            }
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dtns<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DTNS_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {magic:?}, expected \"DTNS\""
            )));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] != DTNS_VERSION {
            return Err(Error::Format(format!("unsupported DTNS version {}", byte[0])));
        }
        r.read_exact(&mut byte)?;
        let rank = byte[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut ext = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut ext)?;
            shape.push(u32::from_le_bytes(ext) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(&shape, data)
    }

    pub fn save_dtns<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dtns(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_dtns<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_dtns(&mut f)
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`: flat index =
/// (o * len + j) * inner + i with j running along the axis.
pub(crate) fn axis_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// C[m x n] = A[m x k] * B[k x n], row-major. The k loop is unrolled by four;
/// the resulting summation order is fixed, so outputs are bit-reproducible.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p < k4 {
            let a0 = arow[p];
            let a1 = arow[p + 1];
            let a2 = arow[p + 2];
            let a3 = arow[p + 3];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
            p += 1;
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
