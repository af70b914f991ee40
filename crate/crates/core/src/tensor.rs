//! Dense N-dimensional tensors and factor matrices.
//!
//! Storage is row-major (last index varies fastest). All mode arguments in
//! this module are 0-based: mode `0` is the first axis.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// An N-dimensional array of `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::argument("tensor must have at least one mode"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::argument(format!(
            "extent of mode {pos} is zero in shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::argument(format!("shape {shape:?} overflows usize")))
}

fn ensure_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite { index: i }),
        None => Ok(()),
    }
}

/// Splits a shape around `mode` into (product before, extent, product after).
pub(crate) fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer = shape[..mode].iter().product();
    let inner = shape[mode + 1..].iter().product();
    (outer, shape[mode], inner)
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::argument(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(shape.to_vec(), data)
    }

    /// Trusted constructor for internal results whose shape is already valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of a multi-index. Panics if the index is out of bounds.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(
                i < d,
                "index {idx:?} out of bounds for shape {:?}",
                self.shape
            );
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::argument(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::argument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Applies an activation elementwise, rejecting non-finite results.
    pub fn activate(&self, act: &Activation) -> Result<Self> {
        if act.is_identity() {
            return Ok(self.clone());
        }
        let data: Vec<f64> = self.data.iter().map(|&v| act.apply(v)).collect();
        ensure_finite(&data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.ndim() {
            return Err(Error::argument(format!(
                "mode {mode} out of range for order-{} tensor",
                self.ndim()
            )));
        }
        Ok(())
    }

    /// Mode-`mode` matricization: a `d_mode x prod(other extents)` matrix whose
    /// columns enumerate the remaining axes in row-major order.
    pub fn unfold(&self, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let (outer, dim, inner) = split_at_mode(&self.shape, mode);
        let cols = outer * inner;
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..dim {
                let src = &self.data[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                data[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(src);
            }
        }
        Ok(Self::from_parts(vec![dim, cols], data))
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(matrix: &Self, mode: usize, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if mode >= shape.len() {
            return Err(Error::argument(format!(
                "mode {mode} out of range for shape {shape:?}"
            )));
        }
        let (outer, dim, inner) = split_at_mode(shape, mode);
        if matrix.shape() != [dim, outer * inner] || matrix.len() != len {
            return Err(Error::argument(format!(
                "matrix of shape {:?} cannot fold into {shape:?} along mode {mode}",
                matrix.shape()
            )));
        }
        let cols = outer * inner;
        let mut data = vec![0.0; len];
        for o in 0..outer {
            for i in 0..dim {
                data[(o * dim + i) * inner..(o * dim + i + 1) * inner].copy_from_slice(
                    &matrix.data[i * cols + o * inner..i * cols + (o + 1) * inner],
                );
            }
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// `result(.., i, ..) = sum_j a(i, j) * self(.., j, ..)` along `mode`.
    pub fn mode_n_product(&self, a: &FactorMatrix, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        if a.cols() != self.shape[mode] {
            return Err(Error::argument(format!(
                "factor has {} columns but mode {mode} has extent {}",
                a.cols(),
                self.shape[mode]
            )));
        }
        let out = self.mode_product_unchecked(a, mode);
        ensure_finite(&out.data)?;
        Ok(out)
    }

    pub(crate) fn mode_product_unchecked(&self, a: &FactorMatrix, mode: usize) -> Self {
        let (outer, dim, inner) = split_at_mode(&self.shape, mode);
        let rows = a.rows();
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        let mut data = vec![0.0; outer * rows * inner];
        for o in 0..outer {
            let src = &self.data[o * dim * inner..(o + 1) * dim * inner];
            let dst = &mut data[o * rows * inner..(o + 1) * rows * inner];
            for i in 0..rows {
                let out = &mut dst[i * inner..(i + 1) * inner];
                for j in 0..dim {
                    let w = a.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for (acc, &v) in out.iter_mut().zip(&src[j * inner..(j + 1) * inner]) {
                        *acc += w * v;
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    /// Mode product followed by an elementwise activation, `act(self x_mode a)`.
    pub fn generalized_mode_n_product(
        &self,
        a: &FactorMatrix,
        mode: usize,
        act: &Activation,
    ) -> Result<Self> {
        self.mode_n_product(a, mode)?.activate(act)
    }

    /// Concatenates tensors along `mode`; all other extents must agree.
    pub fn concat_mode(ts: &[Self], mode: usize) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::argument("concat of an empty list"))?;
        first.check_mode(mode)?;
        for (k, t) in ts.iter().enumerate().skip(1) {
            let compatible = t.ndim() == first.ndim()
                && t.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(m, (a, b))| m == mode || a == b);
            if !compatible {
                return Err(Error::argument(format!(
                    "tensor {k} has shape {:?}, incompatible with {:?} off mode {mode}",
                    t.shape, first.shape
                )));
            }
        }
        let (outer, _, inner) = split_at_mode(&first.shape, mode);
        let total: usize = ts.iter().map(|t| t.shape[mode]).sum();
        let mut shape = first.shape.clone();
        shape[mode] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in ts {
                let block = t.shape[mode] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Self::from_parts(shape, data))
    }

    /// The sub-tensor with indices `start..start + len` along `mode`.
    pub fn slice_mode(&self, mode: usize, start: usize, len: usize) -> Result<Self> {
        self.check_mode(mode)?;
        if len == 0 || start + len > self.shape[mode] {
            return Err(Error::argument(format!(
                "slice {start}..{} out of range for extent {}",
                start + len,
                self.shape[mode]
            )));
        }
        let (outer, dim, inner) = split_at_mode(&self.shape, mode);
        let mut shape = self.shape.clone();
        shape[mode] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Self::from_parts(shape, data))
    }
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_error(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::argument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let reference = b.frobenius_norm();
    if reference == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / reference)
}

/// A dense `rows x cols` matrix, row-major. Factor matrices map a rank
/// dimension (`cols`) onto a mode extent (`rows`).
#[derive(Clone, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for FactorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl FactorMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::argument(format!(
                "factor matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::argument(format!(
                "{rows}x{cols} factor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Self::from_parts(self.cols, self.rows, data)
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::argument(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(Self::from_parts(self.rows, other.cols, data))
    }

    /// Rows `start..start + len`.
    pub fn row_block(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.rows {
            return Err(Error::argument(format!(
                "row block {start}..{} out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Self::from_parts(len, self.cols, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[Self]) -> Result<Self> {
        let cols = blocks
            .first()
            .ok_or_else(|| Error::argument("vstack of an empty list"))?
            .cols;
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::argument("vstack blocks differ in column count"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Ok(Self::from_parts(rows, cols, data))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(blocks: &[Self]) -> Result<Self> {
        let rows = blocks
            .first()
            .ok_or_else(|| Error::argument("hstack of an empty list"))?
            .rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::argument("hstack blocks differ in row count"));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(&b.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
        Ok(Self::from_parts(rows, cols, data))
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_parts(vec![self.rows, self.cols], self.data.clone())
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        match *t.shape() {
            [rows, cols] => Self::new(rows, cols, t.data().to_vec()),
            _ => Err(Error::argument(format!(
                "factor matrix needs a 2-D tensor, got shape {:?}",
                t.shape()
            ))),
        }
    }
}

/// Elementwise nonlinearity used by the generalized mode product.
#[derive(Clone, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("Identity"),
            Self::Relu => f.write_str("Relu"),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Activation {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::Custom(f) => f(x),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    /// Serializable name; `None` for custom maps.
    pub fn name(&self) -> Option<&'static str> {
        match self {
            Self::Identity => Some("identity"),
            Self::Relu => Some("relu"),
            Self::Custom(_) => None,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            other => Err(Error::argument(format!("unknown activation {other:?}"))),
        }
    }
}
