//! Dense numeric arrays with explicit shape/stride/offset views.
//!
//! A [`StridedTensor`] is a window onto a shared element buffer. Views made
//! with [`StridedTensor::view`], [`StridedTensor::transpose`] or the column
//! slicers copy nothing: they alias the parent's buffer, and writes through
//! one view are visible through every overlapping view. Layout convention
//! throughout the crate: time is the last axis, so a feature sequence is
//! `[d, t]` with one column per frame.
//!
//! Only f32 and f64 elements are supported. f32 is the runtime width; f64
//! exists for oracles and gradient checks.

use std::cell::RefCell;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};

/// On-disk element type codes (`TNS1` header byte).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_nan(self) -> bool {
                self.is_nan()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

type Buffer<E> = Rc<RefCell<Vec<E>>>;

/// Shape/stride/offset view over a shared element buffer.
///
/// `Clone` is shallow: the clone aliases the same buffer. Use
/// [`StridedTensor::to_contiguous`] for a deep copy.
#[derive(Clone)]
pub struct StridedTensor<E: Scalar> {
    shape: Vec<usize>,
    strides: Vec<isize>,
    offset: usize,
    buffer: Buffer<E>,
}

impl<E: Scalar> fmt::Debug for StridedTensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "StridedTensor{{shape: {:?}, strides: {:?}, offset: {}}}",
            self.shape, self.strides, self.offset
        )
    }
}

/// Row-major strides for a given shape.
fn contiguous_strides(shape: &[usize]) -> Vec<isize> {
    let mut strides = vec![1isize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1] as isize;
    }
    strides
}

/// Eager reachability check: every in-range multi-index must land inside the
/// buffer. Views with no elements (some extent 0) are trivially valid.
fn check_reachable(len: usize, shape: &[usize], strides: &[isize], offset: usize) -> Result<()> {
    if shape.len() != strides.len() {
        return Err(Error::Dimension(format!(
            "shape rank {} != strides rank {}",
            shape.len(),
            strides.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Ok(());
    }
    let mut lo = offset as isize;
    let mut hi = offset as isize;
    for (&extent, &stride) in shape.iter().zip(strides) {
        let span = (extent as isize - 1) * stride;
        if span >= 0 {
            hi += span;
        } else {
            lo += span;
        }
    }
    if lo < 0 || hi as usize >= len {
        return Err(Error::Bounds(format!(
            "view reaches elements {lo}..={hi} of a buffer with {len} elements \
             (shape {shape:?}, strides {strides:?}, offset {offset})"
        )));
    }
    Ok(())
}

impl<E: Scalar> StridedTensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            offset: 0,
            buffer: Rc::new(RefCell::new(vec![E::ZERO; n])),
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let t = Self::zeros(shape);
        t.buffer.borrow_mut().fill(value);
        t
    }

    /// Fresh contiguous tensor from row-major data.
    pub fn from_shape_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            offset: 0,
            buffer: Rc::new(RefCell::new(data)),
        })
    }

    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_shape_vec(&[r, c], data)
    }

    pub fn eye(n: usize) -> Self {
        let t = Self::zeros(&[n, n]);
        {
            let mut buf = t.buffer.borrow_mut();
            for i in 0..n {
                buf[i * n + i] = E::ONE;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[isize] {
        &self.strides
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Extents of a rank-2 tensor, or a dimension error naming `what`.
    pub fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what}: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// True if the two tensors share one element buffer.
    pub fn aliases(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.buffer, &other.buffer)
    }

    /// Identity of the backing buffer while it is alive; used to
    /// deduplicate shared parameters.
    pub fn buffer_addr(&self) -> usize {
        Rc::as_ptr(&self.buffer) as usize
    }

    /// Row-major layout with positive unit column stride and offset-packed
    /// rows; what [`crate::attention::rel_shift`] requires of its input.
    pub fn is_contiguous(&self) -> bool {
        self.strides == contiguous_strides(&self.shape)
    }

    fn buffer_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut pos = self.offset as isize;
        for (&i, &s) in index.iter().zip(&self.strides) {
            pos += i as isize * s;
        }
        pos as usize
    }

    pub fn get(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {i} out of range for axis {axis} with extent {d}");
        }
        let pos = self.buffer_index(index);
        self.buffer.borrow()[pos]
    }

    pub fn set(&self, index: &[usize], value: E) {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {i} out of range for axis {axis} with extent {d}");
        }
        let pos = self.buffer_index(index);
        self.buffer.borrow_mut()[pos] = value;
    }

    /// Arbitrary re-view of the same buffer. Fails eagerly if any reachable
    /// index would land outside the buffer; never copies elements.
    pub fn view(&self, shape: &[usize], strides: &[isize], offset: usize) -> Result<Self> {
        check_reachable(self.buffer.borrow().len(), shape, strides, offset)?;
        Ok(Self {
            shape: shape.to_vec(),
            strides: strides.to_vec(),
            offset,
            buffer: Rc::clone(&self.buffer),
        })
    }

    /// Transposed view of a rank-2 tensor (no copy).
    pub fn transpose(&self) -> Result<Self> {
        self.dims2("transpose")?;
        Ok(Self {
            shape: vec![self.shape[1], self.shape[0]],
            strides: vec![self.strides[1], self.strides[0]],
            offset: self.offset,
            buffer: Rc::clone(&self.buffer),
        })
    }

    /// Column range of a rank-2 tensor as a view (no copy).
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        let (_, c) = self.dims2("slice_cols")?;
        if range.start > range.end || range.end > c {
            return Err(Error::Bounds(format!(
                "column range {range:?} out of bounds for {c} columns"
            )));
        }
        Ok(Self {
            shape: vec![self.shape[0], range.end - range.start],
            strides: self.strides.clone(),
            offset: (self.offset as isize + range.start as isize * self.strides[1]) as usize,
            buffer: Rc::clone(&self.buffer),
        })
    }

    /// Row range of a rank-2 tensor as a view (no copy).
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        let (r, _) = self.dims2("slice_rows")?;
        if range.start > range.end || range.end > r {
            return Err(Error::Bounds(format!(
                "row range {range:?} out of bounds for {r} rows"
            )));
        }
        Ok(Self {
            shape: vec![range.end - range.start, self.shape[1]],
            strides: self.strides.clone(),
            offset: (self.offset as isize + range.start as isize * self.strides[0]) as usize,
            buffer: Rc::clone(&self.buffer),
        })
    }

    /// Elements in row-major order over the logical shape, whatever the
    /// strides. This is also the serialization order.
    pub fn to_vec(&self) -> Vec<E> {
        let n = self.elem_count();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let buf = self.buffer.borrow();
        let mut index = vec![0usize; self.rank()];
        let mut pos = self.offset as isize;
        loop {
            out.push(buf[pos as usize]);
            // Odometer step, rightmost axis fastest.
            let mut axis = self.rank();
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                index[axis] += 1;
                pos += self.strides[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                pos -= self.shape[axis] as isize * self.strides[axis];
                index[axis] = 0;
            }
        }
    }

    /// Overwrite all elements from row-major data of matching length.
    pub fn write_row_major(&self, data: &[E]) -> Result<()> {
        if data.len() != self.elem_count() {
            return Err(Error::Dimension(format!(
                "write_row_major: {} values for {} elements",
                data.len(),
                self.elem_count()
            )));
        }
        if data.is_empty() {
            return Ok(());
        }
        let mut buf = self.buffer.borrow_mut();
        let mut index = vec![0usize; self.rank()];
        let mut pos = self.offset as isize;
        let mut src = data.iter();
        loop {
            buf[pos as usize] = *src.next().unwrap();
            let mut axis = self.rank();
            loop {
                if axis == 0 {
                    return Ok(());
                }
                axis -= 1;
                index[axis] += 1;
                pos += self.strides[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                pos -= self.shape[axis] as isize * self.strides[axis];
                index[axis] = 0;
            }
        }
    }

    /// Deep copy into a fresh contiguous buffer.
    pub fn to_contiguous(&self) -> Self {
        Self::from_shape_vec(&self.shape, self.to_vec()).expect("shape/data agree by construction")
    }

    /// Cast element type, copying into a fresh buffer.
    pub fn cast<F: Scalar>(&self) -> StridedTensor<F> {
        let data = self.to_vec().into_iter().map(|x| F::from_f64(x.to_f64())).collect();
        StridedTensor::from_shape_vec(&self.shape, data).expect("same shape")
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        let data = self.to_vec().into_iter().map(f).collect();
        Self::from_shape_vec(&self.shape, data).expect("same shape")
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .to_vec()
            .into_iter()
            .zip(other.to_vec())
            .map(|(a, b)| f(a, b))
            .collect();
        Self::from_shape_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn mul_scalar(&self, s: E) -> Self {
        self.map(|x| x * s)
    }

    /// Matrix product with a fixed, documented accumulation order: for every
    /// output cell the inner (`k`) axis is summed innermost in ascending
    /// order. The result is freshly allocated and contiguous.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, ka) = self.dims2("matmul lhs")?;
        let (kb, n) = other.dims2("matmul rhs")?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {ka} vs {kb} (lhs {:?}, rhs {:?})",
                self.shape, other.shape
            )));
        }
        let a = self.buffer.borrow();
        let b = other.buffer.borrow();
        let (a_off, ars, acs) = (self.offset as isize, self.strides[0], self.strides[1]);
        let (b_off, brs, bcs) = (other.offset as isize, other.strides[0], other.strides[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let a_row = a_off + i as isize * ars;
            for j in 0..n {
                let b_col = b_off + j as isize * bcs;
                let mut acc = E::ZERO;
                for k in 0..ka {
                    let av = a[(a_row + k as isize * acs) as usize];
                    let bv = b[(b_col + k as isize * brs) as usize];
                    acc = acc + av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        drop(a);
        drop(b);
        Self::from_shape_vec(&[m, n], out)
    }

    /// Row-wise softmax with mandatory max subtraction. Errors on any
    /// non-finite input entry.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        if c == 0 {
            return Err(Error::Dimension("softmax_rows: zero columns".into()));
        }
        let data = self.to_vec();
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax_rows: non-finite input entry {bad}"
            )));
        }
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let mut max = row[0];
            for &x in row.iter().skip(1) {
                max = max.maximum(x);
            }
            let mut sum = E::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        Self::from_shape_vec(&[r, c], out)
    }

    /// Concatenation along the time (last) axis of two `[d, t]` tensors.
    pub fn concat_time(&self, other: &Self) -> Result<Self> {
        let (da, ta) = self.dims2("concat_time lhs")?;
        let (db, tb) = other.dims2("concat_time rhs")?;
        if da != db {
            return Err(Error::Dimension(format!(
                "concat_time: leading extents {da} vs {db}"
            )));
        }
        let left = self.to_vec();
        let right = other.to_vec();
        let mut out = Vec::with_capacity(da * (ta + tb));
        for r in 0..da {
            out.extend_from_slice(&left[r * ta..(r + 1) * ta]);
            out.extend_from_slice(&right[r * tb..(r + 1) * tb]);
        }
        Self::from_shape_vec(&[da, ta + tb], out)
    }

    /// Concatenation along the leading (feature) axis of two `[d, t]` tensors.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        let (ra, ca) = self.dims2("concat_rows lhs")?;
        let (rb, cb) = other.dims2("concat_rows rhs")?;
        if ca != cb {
            return Err(Error::Dimension(format!(
                "concat_rows: trailing extents {ca} vs {cb}"
            )));
        }
        let mut data = self.to_vec();
        data.extend(other.to_vec());
        Self::from_shape_vec(&[ra + rb, ca], data)
    }

    pub fn write_tns<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"TNS1")?;
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[E::DTYPE.code()])?;
        let mut payload = Vec::with_capacity(self.elem_count() * E::DTYPE.byte_width());
        for x in self.to_vec() {
            x.write_le(&mut payload);
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_tns<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, 0)?;
        if &magic != b"TNS1" {
            return Err(Error::Format(format!(
                "bad magic {magic:?} at byte offset 0, expected \"TNS1\""
            )));
        }
        let mut rank = [0u8; 1];
        read_exact_at(r, &mut rank, 4)?;
        let rank = rank[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut at = 5;
        for _ in 0..rank {
            let mut ext = [0u8; 4];
            read_exact_at(r, &mut ext, at)?;
            shape.push(u32::from_le_bytes(ext) as usize);
            at += 4;
        }
        let mut code = [0u8; 1];
        read_exact_at(r, &mut code, at)?;
        at += 1;
        let dtype = Dtype::from_code(code[0])?;
        if dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "dtype mismatch: file holds {dtype:?}, reader expects {:?}",
                E::DTYPE
            )));
        }
        let n: usize = shape.iter().product();
        let width = E::DTYPE.byte_width();
        let mut payload = vec![0u8; n * width];
        read_exact_at(r, &mut payload, at)?;
        let data = payload.chunks_exact(width).map(E::read_le).collect();
        Self::from_shape_vec(&shape, data)
    }

    /// Max |a - b| over all elements; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "max_abs_diff: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of logical content (shape and elements).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .to_vec()
                .iter()
                .zip(other.to_vec())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Format(format!(
                "truncated: expected {} bytes at byte offset {}, got {}",
                buf.len(),
                offset,
                filled
            )));
        }
        filled += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: &[Vec<f64>]) -> StridedTensor<f64> {
        StridedTensor::from_rows(rows).unwrap()
    }

    /// Independent triple-loop product, same k-innermost ascending order as
    /// the implementation documents.
    fn naive_matmul(a: &StridedTensor<f64>, b: &StridedTensor<f64>) -> StridedTensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let out = StridedTensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.get(&[i, kk]) * b.get(&[kk, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_exact() {
        let x = t64(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = StridedTensor::<f64>::eye(2);
        let y = i.matmul(&x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn matmul_annihilator() {
        let x = t64(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let z = StridedTensor::<f64>::zeros(&[2, 2]);
        let y = x.matmul(&z).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = StridedTensor::from_shape_vec(
            &[7, 5],
            (0..35).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let b = StridedTensor::from_shape_vec(
            &[5, 3],
            (0..15).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(got.bit_eq(&want), "64-bit matmul must equal the triple-loop oracle exactly");
    }

    #[test]
    fn matmul_accepts_noncontiguous_views() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = StridedTensor::from_shape_vec(
            &[4, 6],
            (0..24).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let at = a.transpose().unwrap(); // 6x4, non-contiguous
        let b = StridedTensor::from_shape_vec(
            &[4, 2],
            (0..8).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let got = at.matmul(&b).unwrap();
        let want = naive_matmul(&at.to_contiguous(), &b);
        assert!(got.bit_eq(&want));
    }

    #[test]
    fn matmul_dimension_error() {
        let a = StridedTensor::<f64>::zeros(&[2, 3]);
        let b = StridedTensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_row() {
        let m = t64(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let s = m.softmax_rows().unwrap();
        for v in s.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stability_limit() {
        let m = t64(&[vec![1000.0, 0.0]]);
        let s = m.softmax_rows().unwrap();
        let v = s.to_vec();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = StridedTensor::from_shape_vec(
            &[4, 6],
            (0..24).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect(),
        )
        .unwrap();
        let got = m.softmax_rows().unwrap();
        // Direct formula, no max subtraction (safe at this magnitude).
        for i in 0..4 {
            let mut denom = 0.0;
            for j in 0..6 {
                denom += m.get(&[i, j]).exp();
            }
            for j in 0..6 {
                let want = m.get(&[i, j]).exp() / denom;
                assert!((got.get(&[i, j]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = t64(&[vec![0.0, f64::NAN]]);
        assert!(matches!(m.softmax_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn concat_time_cases() {
        let empty = StridedTensor::<f64>::zeros(&[2, 0]);
        let b = t64(&[vec![3.0], vec![4.0]]);
        let joined = empty.concat_time(&b).unwrap();
        assert!(joined.bit_eq(&b));
        assert!(!joined.aliases(&b), "concat copies");

        let a = t64(&[vec![1.0], vec![2.0]]);
        let ab = a.concat_time(&b).unwrap();
        assert_eq!(ab.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);

        let tall = StridedTensor::<f64>::zeros(&[3, 1]);
        assert!(matches!(a.concat_time(&tall), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_time_matches_index_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = StridedTensor::from_shape_vec(
            &[3, 4],
            (0..12).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let b = StridedTensor::from_shape_vec(
            &[3, 2],
            (0..6).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let ab = a.concat_time(&b).unwrap();
        for r in 0..3 {
            for c in 0..6 {
                let want = if c < 4 { a.get(&[r, c]) } else { b.get(&[r, c - 4]) };
                assert_eq!(ab.get(&[r, c]), want);
            }
        }
    }

    #[test]
    fn view_identity_and_strided_pick() {
        let t = StridedTensor::from_shape_vec(&[10], (0..10).map(|i| i as f64).collect()).unwrap();
        let same = t.view(&[10], &[1], 0).unwrap();
        assert!(same.bit_eq(&t));
        let odd = t.view(&[5], &[2], 1).unwrap();
        assert_eq!(odd.to_vec(), vec![1.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn view_write_through_aliases_parent() {
        let t = StridedTensor::<f64>::zeros(&[2, 3]);
        let v = t.view(&[2], &[1], 1).unwrap(); // elements (0,1) and (0,2)
        v.set(&[0], 99.0);
        assert_eq!(t.get(&[0, 1]), 99.0);
        assert!(v.aliases(&t));
    }

    #[test]
    fn view_bounds_checked_eagerly() {
        let t = StridedTensor::<f64>::zeros(&[4]);
        assert!(matches!(t.view(&[5], &[1], 0), Err(Error::Bounds(_))));
        assert!(matches!(t.view(&[2], &[-1], 0), Err(Error::Bounds(_))));
        // Negative stride with a valid anchor is fine.
        let rev = t.view(&[4], &[-1], 3).unwrap();
        assert_eq!(rev.elem_count(), 4);
    }

    #[test]
    fn transpose_involution_shares_buffer() {
        let x = t64(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let tt = x.transpose().unwrap().transpose().unwrap();
        assert!(tt.bit_eq(&x));
        assert!(tt.aliases(&x));
    }

    #[test]
    fn slice_cols_matches_index_oracle_and_aliases() {
        let x = t64(&[
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        ]);
        let s = x.slice_cols(2..5).unwrap();
        assert!(s.aliases(&x));
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(s.get(&[r, c]), x.get(&[r, c + 2]));
            }
        }
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = t64(&[vec![1.5, -2.0], vec![0.25, 4.0]]);
        let y = x.add(&StridedTensor::zeros(&[2, 2])).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let t = StridedTensor::from_shape_vec(
            &[3, 5],
            (0..15).map(|_| rng.random::<f32>() * 7.0 - 3.5).collect(),
        )
        .unwrap();
        let mut bytes = Vec::new();
        t.write_tns(&mut bytes).unwrap();
        let back = StridedTensor::<f32>::read_tns(&mut bytes.as_slice()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn serialization_of_view_uses_logical_order() {
        let x = t64(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let xt = x.transpose().unwrap();
        let mut bytes = Vec::new();
        xt.write_tns(&mut bytes).unwrap();
        let back = StridedTensor::<f64>::read_tns(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), &[2, 2]);
        assert_eq!(back.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let t = StridedTensor::<f32>::zeros(&[2, 2]);
        let mut bytes = Vec::new();
        t.write_tns(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = StridedTensor::<f32>::read_tns(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format(msg) => {
                assert!(msg.contains("expected 16 bytes"), "got: {msg}");
                assert!(msg.contains("got 13"), "got: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_format_error() {
        let t = StridedTensor::<f32>::zeros(&[2]);
        let mut bytes = Vec::new();
        t.write_tns(&mut bytes).unwrap();
        assert!(matches!(
            StridedTensor::<f64>::read_tns(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
