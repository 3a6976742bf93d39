//! Dense row-major `f64` tensors and the kernels the tape is built from.
//!
//! Tensors are plain values: every kernel here is a pure function of its
//! inputs. Differentiation lives in [`crate::tape`].

use std::io::{Read, Write};

use crate::error::{DflatError, Result};

/// Magic prefix of the tensor dump format.
pub const DUMP_MAGIC: &[u8; 4] = b"DFLT";

/// Epsilon used by every layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) || expected != data.len() {
            return Err(DflatError::shape("tensor", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `m×n` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(DflatError::shape("from_rows", &[m, n], &[]));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; for a matrix, the row count.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Product of all trailing extents; for a matrix, the column count.
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Same data viewed under new dims.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(DflatError::shape("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            dims: vec![n, m],
            data: out,
        }
    }

    /// Writes the `DFLT` dump: magic, LE u32 rank, LE u32 dims, LE f64 data.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.data.len());
        self.write_dump(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Tensor> {
        let fmt = |e: std::io::Error| DflatError::Format(format!("truncated tensor dump: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(fmt)?;
        if &magic != DUMP_MAGIC {
            return Err(DflatError::Format(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(fmt)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut word).map_err(fmt)?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut val = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut val).map_err(fmt)?;
            data.push(f64::from_le_bytes(val));
        }
        Tensor::new(dims, data)
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.dims.len() != 2 {
        return Err(DflatError::shape(op, &t.dims, &[]));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    if b.dims[0] != k {
        return Err(DflatError::shape("matmul", &a.dims, &b.dims));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_nt", a)?;
    check_matrix("matmul_nt", b)?;
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[0]);
    if b.dims[1] != k {
        return Err(DflatError::shape("matmul_nt", &a.dims, &b.dims));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_tn", a)?;
    check_matrix("matmul_tn", b)?;
    let (k, m, n) = (a.dims[0], a.dims[1], b.dims[1]);
    if b.dims[0] != k {
        return Err(DflatError::shape("matmul_tn", &a.dims, &b.dims));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        dims: x.dims.clone(),
        data: out,
    }
}

/// Per-row normalisation followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(DflatError::config("layer_norm needs at least 2 channels"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(DflatError::shape("layer_norm", &x.dims, gain.dims()));
    }
    let (normed, _) = normalize_rows(x);
    let mut out = normed.data;
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor {
        dims: x.dims.clone(),
        data: out,
    })
}

/// Zero-mean, unit-variance rows; also returns each row's `1/sqrt(var+eps)`.
pub(crate) fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let mut out = x.data.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (
        Tensor {
            dims: x.dims.clone(),
            data: out,
        },
        inv_std,
    )
}
