use crate::error::{Error, Result};

use super::Real;

/// Dense row-major N-dimensional array.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &e) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= e;
    }
    strides
}

/// Copies `src` into a new buffer laid out as `out_shape`, where output axis
/// `i` advances the source by `src_strides[i]` elements (0 = broadcast).
pub(crate) fn strided_gather<T: Copy>(
    src: &[T],
    out_shape: &[usize],
    src_strides: &[usize],
) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= idx[ax] * src_strides[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse of [`strided_gather`]: adds every element of `src` (laid out as
/// `src_shape`) into `dst` at the strided offset.
pub(crate) fn strided_scatter_add<T: Real>(
    src: &[T],
    src_shape: &[usize],
    dst_strides: &[usize],
    dst: &mut [T],
) {
    let n: usize = src_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = src_shape.len();
    if rank == 0 {
        dst[0] += src[0];
        return;
    }
    let inner = src_shape[rank - 1];
    let inner_stride = dst_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut pos = 0usize;
    loop {
        let chunk = &src[pos..pos + inner];
        if inner_stride == 0 {
            let s: T = chunk.iter().copied().sum();
            dst[base] += s;
        } else {
            for (j, &v) in chunk.iter().enumerate() {
                dst[base + j * inner_stride] += v;
            }
        }
        pos += inner;
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += dst_strides[ax];
            if idx[ax] < src_shape[ax] {
                break;
            }
            base -= idx[ax] * dst_strides[ax];
            idx[ax] = 0;
        }
    }
}

/// Source strides that realize a right-aligned broadcast of `from` to `to`.
pub(crate) fn broadcast_strides(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::shape("broadcast", from, to));
    }
    let offset = to.len() - from.len();
    let src = contiguous_strides(from);
    let mut strides = vec![0; to.len()];
    for (i, &e) in from.iter().enumerate() {
        let target = to[offset + i];
        if e == target {
            strides[offset + i] = src[i];
        } else if e != 1 {
            return Err(Error::shape("broadcast", from, to));
        }
    }
    Ok(strides)
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, converting element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &self.shape, perm));
        }
        let strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        Ok(Self {
            data: strided_gather(&self.data, &out_shape, &src_strides),
            shape: out_shape,
        })
    }

    /// Materializes a right-aligned broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let strides = broadcast_strides(&self.shape, shape)?;
        Ok(Self {
            data: strided_gather(&self.data, shape, &strides),
            shape: shape.to_vec(),
        })
    }

    /// Sums a broadcast-expanded tensor back down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        let strides = broadcast_strides(shape, &self.shape)?;
        let mut out = Self::zeros(shape);
        strided_scatter_add(&self.data, &self.shape, &strides, &mut out.data);
        Ok(out)
    }

    /// Sum over `axes`, keeping reduced axes as extent 1.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let mut out_shape = self.shape.clone();
        for &a in axes {
            if a >= self.rank() {
                return Err(Error::config(format!(
                    "reduction axis {a} out of range for rank {}",
                    self.rank()
                )));
            }
            out_shape[a] = 1;
        }
        self.sum_to(&out_shape)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`; `rhs` may also be a
    /// plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.matmul_t(rhs, false, false)
    }

    /// Matrix product with optional transposition of the last two axes of
    /// either operand.
    pub fn matmul_t(&self, rhs: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let err = || Error::shape("matmul", &self.shape, &rhs.shape);
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(err());
        }
        let (ra, rb) = (self.rank(), rhs.rank());
        let (a_rows, a_cols) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (b_rows, b_cols) = (rhs.shape[rb - 2], rhs.shape[rb - 1]);
        let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
        let (k2, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if k != k2 {
            return Err(err());
        }
        let lead = &self.shape[..ra - 2];
        let shared_rhs = rb == 2;
        if !shared_rhs && rhs.shape[..rb - 2] != *lead {
            return Err(err());
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let a_str = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
        let b_str = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
        let (sa, sb) = (a_rows * a_cols, b_rows * b_cols);
        for i in 0..batch {
            let b_off = if shared_rhs { 0 } else { i * sb };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data[i * sa..(i + 1) * sa],
                a_str,
                &rhs.data[b_off..b_off + sb],
                b_str,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        Tensor::new(out_shape, out)
    }
}
