//! Dense row-major tensors over f32 or f64.
//!
//! Feature maps use H×W×C layout so the channel vector at a pixel is a
//! contiguous slice; convolution kernels are Cout×Cin×kh×kw; affine
//! weights are In×Out. Training runs in f32, gradient checks in f64.

use crate::error::{Error, Result};
use rand::Rng;

/// Element type of a stored tensor payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor. Implemented for f32 and f64 only.
pub trait Element:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense N-dimensional array, row-major, rank >= 1, all dims >= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor", "rank must be >= 1"));
    }
    let mut len = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::invalid("tensor", format!("zero dim in {shape:?}")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::invalid("tensor", format!("shape overflow {shape:?}")))?;
    }
    Ok(len)
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        if data.len() != len {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor. Panics on an invalid shape (programmer error).
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = validate_shape(&shape).expect("valid shape");
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = validate_shape(&shape).expect("valid shape");
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Rank-1 tensor of length 1 holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector has no valid shape");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: all dims >= 1
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

    /// Scalar value of a length-1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Flat index for a rank-3 H×W×C tensor.
    #[inline]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        let (_h, w, ch) = self.dims3();
        (y * w + x) * ch + c
    }

    /// Dims of a rank-3 tensor as (H, W, C).
    #[inline]
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "dims3 on shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx3(y, x, c)]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Raw little-endian payload bytes, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_of());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let len = validate_shape(&shape)?;
        let want = len * T::DTYPE.size_of();
        if bytes.len() != want {
            return Err(Error::shape(
                "tensor",
                format!("payload of {} bytes, expected {want}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(T::DTYPE.size_of())
            .map(T::read_le)
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Xavier/Glorot uniform initialization: U(-a, a) with a = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform<T: Element>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        T::from_f64_lossy(rng.random_range(-bound..bound))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major_channels_last() {
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 3), 3.0);
        assert_eq!(t.at3(0, 1, 0), 4.0);
        assert_eq!(t.at3(1, 0, 0), 12.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32);
        let r = t.reshaped(vec![6]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4]).is_err());
    }

    #[test]
    fn le_bytes_round_trip_is_bitwise() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -0.0, f32::MIN_POSITIVE]).unwrap();
        let b = t.to_le_bytes();
        let back = Tensor::<f32>::from_le_bytes(vec![3], &b).unwrap();
        for (x, y) in t.data().iter().zip(back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn xavier_respects_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = xavier_uniform(vec![10, 10], 10, 10, &mut rng);
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // not all identical
        assert!(t.data().iter().any(|&v| v != t.data()[0]));
    }
}
