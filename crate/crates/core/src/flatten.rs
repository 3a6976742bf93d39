//! Dual flattening of an encoder map and the row/column positional codes.
//!
//! A map of `h×w` cells is serialised twice: row-major (rows top to bottom,
//! each left to right) and column-major (columns left to right, each top to
//! bottom). Each orientation carries a 1-D sinusoidal code per row (or
//! column), interpolated up to the query length and replicated across the
//! tokens of that row (or column) for the keys.

use crate::error::{DflatError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Row,
    Column,
}

impl Orientation {
    pub fn label(self) -> &'static str {
        match self {
            Orientation::Row => "row",
            Orientation::Column => "col",
        }
    }

    /// Source cell `(i, j)` of flattened token `t` for an `h×w` map.
    pub fn source_cell(self, t: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Orientation::Row => (t / w, t % w),
            Orientation::Column => (t % h, t / h),
        }
    }

    /// Row-major cell index of every flattened token, in token order.
    pub fn permutation(self, h: usize, w: usize) -> Vec<usize> {
        (0..h * w)
            .map(|t| {
                let (i, j) = self.source_cell(t, h, w);
                i * w + j
            })
            .collect()
    }

    /// Number of source lines (rows or columns) and tokens per line.
    pub fn lines(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Orientation::Row => (h, w),
            Orientation::Column => (w, h),
        }
    }
}

/// Encoder output `S_o`: `h×w` cells of `d` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let dims = values.dims().to_vec();
        let [h, w, d] = dims[..] else {
            return Err(DflatError::shape("feature_map", &dims, &[3]));
        };
        if d < 2 || d % 2 != 0 {
            return Err(DflatError::config(format!("channel count {d} must be even and >= 2")));
        }
        Ok(FeatureMap { h, w, d, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Cells in row-major order as an `hw×d` matrix.
    pub fn as_matrix(&self) -> Tensor {
        self.values.clone().reshape(&[self.h * self.w, self.d]).expect("same length")
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.d;
        &self.values.data()[start..start + self.d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlattenedSequence {
    pub orientation: Orientation,
    pub h: usize,
    pub w: usize,
    pub tokens: Tensor,
    pub pos: Tensor,
}

impl FlattenedSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Serialises `map` in the given orientation and attaches its key codes.
pub fn flatten(map: &FeatureMap, orientation: Orientation) -> FlattenedSequence {
    let d = map.channels();
    let mut data = Vec::with_capacity(map.values.len());
    for cell in orientation.permutation(map.h, map.w) {
        data.extend_from_slice(&map.values.data()[cell * d..(cell + 1) * d]);
    }
    let tokens = Tensor::new(vec![map.h * map.w, d], data).expect("hw×d");
    let (lines, per_line) = orientation.lines(map.h, map.w);
    let base = sinusoid_base(lines, d).expect("feature maps have even d");
    FlattenedSequence {
        orientation,
        h: map.h,
        w: map.w,
        tokens,
        pos: replicate_codes(&base, per_line),
    }
}

/// Inverse of [`flatten`] on the tokens.
pub fn unflatten(seq: &FlattenedSequence) -> FeatureMap {
    let d = seq.tokens.cols();
    let mut data = vec![0.0; seq.tokens.len()];
    for (t, cell) in seq.orientation.permutation(seq.h, seq.w).into_iter().enumerate() {
        data[cell * d..(cell + 1) * d].copy_from_slice(seq.tokens.row(t));
    }
    FeatureMap::new(Tensor::new(vec![seq.h, seq.w, d], data).expect("h×w×d"))
        .expect("flattened sequences come from valid maps")
}

/// Sinusoidal table: `(p, 2k) = sin(p / 10000^(2k/d))`, `(p, 2k+1) = cos(..)`.
pub fn sinusoid_base(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(DflatError::config(format!("sinusoid channels {d} must be even")));
    }
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        for k in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Endpoint-aligned linear interpolation of `base` rows up to `target` rows.
///
/// Output row `i` samples source coordinate `i·(h−1)/(target−1)`.
pub fn interpolate_codes(base: &Tensor, target: usize) -> Result<Tensor> {
    let h = base.rows();
    if target < h {
        return Err(DflatError::config(format!(
            "cannot interpolate {h} codes down to {target}"
        )));
    }
    let d = base.cols();
    let mut data = Vec::with_capacity(target * d);
    for i in 0..target {
        if h == 1 || target == 1 {
            data.extend_from_slice(base.row(0));
            continue;
        }
        let (lo, frac) = align_corners(i, h, target);
        if frac == 0.0 {
            data.extend_from_slice(base.row(lo));
        } else {
            let (a, b) = (base.row(lo), base.row(lo + 1));
            data.extend(a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y));
        }
    }
    Tensor::new(vec![target, d], data)
}

/// Source index and fractional offset of output `i` when stretching `src`
/// samples over `dst` with aligned end points; exact at integer positions.
pub(crate) fn align_corners(i: usize, src: usize, dst: usize) -> (usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0.0);
    }
    let num = i * (src - 1);
    let den = dst - 1;
    let lo = num / den;
    let rem = num % den;
    if rem == 0 {
        (lo, 0.0)
    } else {
        (lo, rem as f64 / den as f64)
    }
}

/// Repeats each base row `reps` times in order, producing one constant code
/// per flattened line: row codes across `w` tokens, column codes across `h`.
pub fn replicate_codes(base: &Tensor, reps: usize) -> Tensor {
    let d = base.cols();
    let mut data = Vec::with_capacity(base.rows() * reps * d);
    for r in 0..base.rows() {
        for _ in 0..reps {
            data.extend_from_slice(base.row(r));
        }
    }
    Tensor::new(vec![base.rows() * reps, d], data).expect("rows·reps × d")
}

/// Base, query and key codes for one orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalCodes {
    pub base: Tensor,
    pub query_codes: Tensor,
    pub key_codes: Tensor,
}

impl PositionalCodes {
    /// `lines` source rows (or columns), `queries` output rows (or columns),
    /// `per_line` tokens in each flattened line.
    pub fn build(lines: usize, queries: usize, per_line: usize, d: usize) -> Result<Self> {
        let base = sinusoid_base(lines, d)?;
        Ok(PositionalCodes {
            query_codes: interpolate_codes(&base, queries)?,
            key_codes: replicate_codes(&base, per_line),
            base,
        })
    }
}
