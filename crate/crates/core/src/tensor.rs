//! Dense row-major tensors with a fixed four-axis shape.
//!
//! Lower-rank data pads leading axes with extent 1, so a matrix is
//! `[1, 1, rows, cols]` and a vector is `[1, 1, 1, len]`. Axes are read as
//! batch, heads, length, feature where that interpretation applies.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::memory;

pub type Shape = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_scalar!(f32, DType::F32);
impl_scalar!(f64, DType::F64);

/// PRNG seed. Fills use ChaCha8 seeded via `seed_from_u64`, drawing standard
/// normals in double precision and rounding to the tensor dtype, so the same
/// seed gives the same values (up to rounding) in either precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent seed for a named sub-stream.
    pub fn derive(self, stream: u64) -> Seed {
        // splitmix64 finalizer
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Sum,
}

/// Pointwise maps. Binary operands either match the input shape exactly,
/// collapse the last axis to 1 (one value per row), or are a `[1, 1, 1, D]`
/// row vector repeated over every row.
#[derive(Debug, Clone, Copy)]
pub enum Elementwise<'a, T: Scalar> {
    Exp,
    Scale(T),
    SubBroadcast(&'a Tensor<T>),
    MulBroadcast(&'a Tensor<T>),
    DivBroadcast(&'a Tensor<T>),
    Add(&'a Tensor<T>),
    Maximum(&'a Tensor<T>),
}

pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
    tag: u64,
}

fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn wrap(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let tag = memory::register(data.len() * std::mem::size_of::<T>());
        Tensor { shape, data, tag }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::BufferLength {
                op: "from_vec",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self::wrap(shape, data))
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::wrap(shape, vec![value; numel(&shape)])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for b in 0..shape[0] {
            for h in 0..shape[1] {
                for i in 0..shape[2] {
                    for j in 0..shape[3] {
                        data.push(f([b, h, i, j]));
                    }
                }
            }
        }
        Self::wrap(shape, data)
    }

    /// Matrix `[1, 1, rows, cols]` from nested rows.
    pub fn matrix(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec([1, 1, rows.len(), cols], data)
    }

    /// Standard-normal fill; deterministic in `(shape, seed)`.
    pub fn randn(shape: Shape, seed: Seed) -> Self {
        let mut rng = seed.rng();
        let data = (0..numel(&shape))
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(x)
            })
            .collect();
        Self::wrap(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        let [_, h, l, d] = self.shape;
        self.data[((idx[0] * h + idx[1]) * l + idx[2]) * d + idx[3]]
    }

    pub fn into_vec(mut self) -> Vec<T> {
        memory::release(self.tag, self.size_bytes());
        self.tag = 0;
        std::mem::take(&mut self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::wrap(self.shape, self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect())
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                axes: "all",
                lhs: self.shape.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: [usize; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return Err(Error::InvalidInput(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let s = self.shape;
        let strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
        let out_shape = perm.map(|p| s[p]);
        let st = perm.map(|p| strides[p]);
        let mut data = Vec::with_capacity(self.data.len());
        for a in 0..out_shape[0] {
            for b in 0..out_shape[1] {
                for c in 0..out_shape[2] {
                    let base = a * st[0] + b * st[1] + c * st[2];
                    data.extend((0..out_shape[3]).map(|d| self.data[base + d * st[3]]));
                }
            }
        }
        Ok(Tensor::wrap(out_shape, data))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Self {
        self.permute([0, 1, 3, 2]).expect("fixed permutation is valid")
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= 4 || start + len > self.shape[axis] {
            return Err(Error::InvalidInput(format!(
                "slice [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let s = self.shape;
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s;
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor::wrap(out_shape, data))
    }

    /// Copies batches `[b0, b0 + bl)` and rows `[r0, r0 + rl)` (axes 0 and 2).
    pub fn block(&self, b0: usize, bl: usize, r0: usize, rl: usize) -> Result<Self> {
        let [b, h, l, d] = self.shape;
        if b0 + bl > b || r0 + rl > l {
            return Err(Error::InvalidInput(format!(
                "block batches [{b0}, {}) rows [{r0}, {}) out of range for {:?}",
                b0 + bl,
                r0 + rl,
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(bl * h * rl * d);
        for bi in b0..b0 + bl {
            for hi in 0..h {
                let base = ((bi * h + hi) * l + r0) * d;
                data.extend_from_slice(&self.data[base..base + rl * d]);
            }
        }
        Ok(Tensor::wrap([bl, h, rl, d], data))
    }

    /// Writes `src` into `self` at offset `start` along `axis`.
    pub(crate) fn write_slice_axis(&mut self, axis: usize, start: usize, src: &Tensor<T>) -> Result<()> {
        let s = self.shape;
        let t = src.shape;
        let mismatch = (0..4).any(|a| a != axis && s[a] != t[a]);
        if axis >= 4 || mismatch || start + t[axis] > s[axis] {
            return Err(Error::Dimension {
                op: "write_slice_axis",
                axes: "non-sliced axes",
                lhs: s.to_vec(),
                rhs: t.to_vec(),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let chunk = t[axis] * inner;
        for o in 0..outer {
            let dst = (o * s[axis] + start) * inner;
            self.data[dst..dst + chunk].copy_from_slice(&src.data[o * chunk..(o + 1) * chunk]);
        }
        Ok(())
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let mut shape = first.shape;
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Tensor::zeros(shape);
        let mut offset = 0;
        for p in parts {
            out.write_slice_axis(axis, offset, p)?;
            offset += p.shape[axis];
        }
        Ok(out)
    }

    /// Pointwise map returning a new tensor; `self` is untouched.
    pub fn elementwise(&self, op: Elementwise<'_, T>) -> Result<Self> {
        self.clone().apply(op)
    }

    /// Pointwise map that reuses this tensor's buffer.
    pub fn apply(mut self, op: Elementwise<'_, T>) -> Result<Self> {
        match op {
            Elementwise::Exp => self.data.iter_mut().for_each(|x| *x = x.exp()),
            Elementwise::Scale(c) => self.data.iter_mut().for_each(|x| *x = *x * c),
            Elementwise::SubBroadcast(u) => self.zip_broadcast("sub_broadcast", u, |x, y| x - y)?,
            Elementwise::MulBroadcast(u) => self.zip_broadcast("mul_broadcast", u, |x, y| x * y)?,
            Elementwise::DivBroadcast(u) => self.zip_broadcast("div_broadcast", u, |x, y| x / y)?,
            Elementwise::Add(u) => self.zip_broadcast("add", u, |x, y| x + y)?,
            Elementwise::Maximum(u) => self.zip_broadcast("maximum", u, |x, y| x.max(y))?,
        }
        Ok(self)
    }

    fn zip_broadcast(&mut self, op: &'static str, u: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<()> {
        let s = self.shape;
        let t = u.shape;
        if t == s {
            for (x, &y) in self.data.iter_mut().zip(&u.data) {
                *x = f(*x, y);
            }
        } else if t[..3] == s[..3] && t[3] == 1 {
            for (row, &y) in self.data.chunks_exact_mut(s[3].max(1)).zip(&u.data) {
                row.iter_mut().for_each(|x| *x = f(*x, y));
            }
        } else if t[..3] == [1, 1, 1] && t[3] == s[3] {
            for row in self.data.chunks_exact_mut(s[3].max(1)) {
                for (x, &y) in row.iter_mut().zip(&u.data) {
                    *x = f(*x, y);
                }
            }
        } else {
            return Err(Error::Dimension {
                op,
                axes: "broadcast",
                lhs: s.to_vec(),
                rhs: t.to_vec(),
            });
        }
        Ok(())
    }

    /// Collapses the last axis to extent 1.
    pub fn rowwise_reduce(&self, kind: Reduce) -> Result<Self> {
        let [b, h, l, d] = self.shape;
        if d == 0 {
            return Err(Error::EmptyReduction);
        }
        let data = self
            .data
            .chunks_exact(d)
            .map(|row| match kind {
                Reduce::Max => row[1..].iter().fold(row[0], |m, &x| m.max(x)),
                Reduce::Sum => row[1..].iter().fold(row[0], |acc, &x| acc + x),
            })
            .collect();
        Ok(Tensor::wrap([b, h, l, 1], data))
    }

    pub fn has_nan(&self) -> Option<usize> {
        self.data.iter().position(|x| x.is_nan())
    }
}

/// `out[b,h,i,j] = sum_k a[b,h,i,k] * b[b,h,k,j]`, summing `k` in order.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ha, m, ka] = a.shape;
    let [bb, hb, kb, n] = b.shape;
    if ba != bb || ha != hb {
        return Err(Error::Dimension {
            op: "batched_matmul",
            axes: "batch/heads",
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    if ka != kb {
        return Err(Error::Dimension {
            op: "batched_matmul",
            axes: "inner (a axis 3, b axis 2)",
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    let mut out = vec![T::ZERO; ba * ha * m * n];
    if n > 0 {
        for p in 0..ba * ha {
            let a_mat = &a.data[p * m * ka..(p + 1) * m * ka];
            let b_mat = &b.data[p * ka * n..(p + 1) * ka * n];
            let o_mat = &mut out[p * m * n..(p + 1) * m * n];
            for (a_row, o_row) in a_mat.chunks_exact(ka.max(1)).zip(o_mat.chunks_exact_mut(n)) {
                for (kk, b_row) in b_mat.chunks_exact(n).enumerate() {
                    let coef = a_row[kk];
                    for (o, &bv) in o_row.iter_mut().zip(b_row) {
                        *o += coef * bv;
                    }
                }
            }
        }
    }
    Ok(Tensor::wrap([ba, ha, m, n], out))
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor::wrap(self.shape, self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        memory::release(self.tag, self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .finish_non_exhaustive()
    }
}

/// Bitwise equality, treating equal NaN payloads as equal.
pub fn bit_identical<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape == b.shape
        && a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
}
