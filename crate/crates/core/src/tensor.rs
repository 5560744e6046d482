//! Dense row-major tensors and the STMX1 binary container.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Splits `dims` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != data.len() {
            return Err(shape_err!(
                "dims {:?} hold {} values, got {}",
                dims,
                numel(&dims),
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        Self { dims, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let dims = dims.into();
        let data = (0..numel(&dims)).map(&mut f).collect();
        Self { dims, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range {d} on axis {i}");
            off = off * d + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.dims.len(), 2);
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the sub-tensor at `index` along axis 0.
    pub fn select0(&self, index: usize) -> Tensor {
        let inner: usize = self.dims[1..].iter().product();
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(shape_err!("stack: {:?} vs {:?}", t.dims, first.dims));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Tensor { dims, data })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        permute_values(self, axes)
    }

    // ---- STMX1 ---------------------------------------------------------

    /// Encodes as STMX1: magic, `u8` rank, little-endian `u64` extents, then
    /// little-endian `f32` values in row-major order.
    pub fn to_stmx_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds 255", self.dims.len())));
        }
        let mut out = Vec::with_capacity(5 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&STMX_MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes an STMX1 buffer. Trailing bytes, truncated payloads and
    /// non-finite values are rejected.
    pub fn from_stmx_bytes(bytes: &[u8]) -> Result<Tensor> {
        let fmt_err = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 5 || bytes[..4] != STMX_MAGIC {
            return Err(fmt_err("missing STMX1 magic"));
        }
        let ndim = bytes[4] as usize;
        let header = 5 + 8 * ndim;
        if bytes.len() < header {
            return Err(fmt_err("truncated STMX1 header"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: u64 = 1;
        for chunk in bytes[5..header].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            count = count.checked_mul(d).ok_or_else(|| fmt_err("element count overflows"))?;
            dims.push(usize::try_from(d).map_err(|_| fmt_err("extent exceeds usize"))?);
        }
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| fmt_err("payload size overflows"))?;
        if payload.len() as u64 != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                expected
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err("non-finite value in payload"));
        }
        Ok(Tensor { dims, data })
    }

    pub fn write_stmx(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_stmx_bytes()?)?;
        Ok(())
    }

    pub fn read_stmx(mut r: impl Read) -> Result<Tensor> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Tensor::from_stmx_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_stmx_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Tensor::from_stmx_bytes(&bytes)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }
}

pub const STMX_MAGIC: [u8; 4] = *b"STMX";

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

pub(crate) fn permute_values(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let n = t.dims.len();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err!("invalid permutation {:?} for rank {}", axes, n));
    }
    let src_strides = t.strides();
    let out_dims: Vec<usize> = axes.iter().map(|&a| t.dims[a]).collect();
    let gather_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total = t.data.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..total {
        data.push(t.data[src]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            src += gather_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= gather_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { dims: out_dims, data })
}
