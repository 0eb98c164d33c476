use crate::error::{Error, Result};

use super::rng::Rng;
use super::scalar::{DType, Scalar};

/// Dense row-major tensor.
///
/// Every extent is at least 1, so a tensor is never empty, and `data.len()`
/// always equals the product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if data.len() != len {
            return Err(Error::shape(&shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![S::zero(); other.data.len()],
        }
    }

    /// Deterministic pseudo-uniform values in `[-0.1, 0.1)`.
    pub fn seeded_fill(shape: &[usize], seed: u64) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut rng = Rng::new(seed);
        let data = (0..len).map(|_| S::lit(rng.uniform(-0.1, 0.1))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NumericalError(op))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// Bit-for-bit equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Largest element-wise `|a - b| / max(|a|, |b|)`; zero where both are equal.
    pub fn max_rel_diff(&self, other: &Self) -> Result<S> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| rel_diff(a, b))
            .fold(S::zero(), S::max))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(T::nan()))
                .collect(),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * S::DTYPE.size());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes a payload of either element type, converting to `S`.
    pub fn from_le_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Result<Self> {
        let len = check_shape(&shape)?;
        if bytes.len() != len * dtype.size() {
            return Err(Error::CorruptLog(format!(
                "payload of {} bytes does not match shape {:?} ({:?})",
                bytes.len(),
                shape,
                dtype
            )));
        }
        let data = match dtype {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| S::lit(f64::read_le(c)))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| S::lit(f32::read_le(c) as f64))
                .collect(),
        };
        Ok(Self { shape, data })
    }
}

pub fn rel_diff<S: Scalar>(a: S, b: S) -> S {
    if a == b {
        return S::zero();
    }
    let denom = a.abs().max(b.abs());
    if denom == S::zero() {
        S::zero()
    } else {
        (a - b).abs() / denom
    }
}

/// Element-wise sum in the given order, strictly left to right.
pub fn ordered_sum<S: Scalar>(tensors: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let (first, rest) = tensors.split_first().ok_or(Error::EmptyInput)?;
    let mut acc = (*first).clone();
    for t in rest {
        acc.ensure_same_shape(t)?;
        for (a, &b) in acc.data.iter_mut().zip(&t.data) {
            *a += b;
        }
    }
    acc.ensure_finite("ordered_sum")
}

pub fn l2_norm<S: Scalar>(t: &Tensor<S>) -> Result<S> {
    l2_norm_slice(t.data())
}

/// Square root of the left-to-right sum of squares.
pub fn l2_norm_slice<S: Scalar>(values: &[S]) -> Result<S> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut acc = S::zero();
    for &v in values {
        acc += v * v;
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn seeded_fill_is_deterministic() {
        let a = Tensor::<f64>::seeded_fill(&[2, 2], 7).unwrap();
        let b = Tensor::<f64>::seeded_fill(&[2, 2], 7).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn seeded_fill_differs_by_seed() {
        let a = Tensor::<f64>::seeded_fill(&[3], 1).unwrap();
        let b = Tensor::<f64>::seeded_fill(&[3], 2).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f64>::seeded_fill(&[0], 1),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f64>::zeros(&[]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0f64; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ordered_sum_basics() {
        let s = ordered_sum(&[&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])]).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        let one = t(&[3], &[0.1, -0.0, 1e300]);
        assert!(ordered_sum(&[&one]).unwrap().bit_eq(&one));
        assert!(matches!(
            ordered_sum::<f64>(&[]),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            ordered_sum(&[&t(&[2], &[1.0, 2.0]), &t(&[1, 2], &[1.0, 2.0])]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ordered_sum_is_reproducible_but_order_sensitive() {
        let a = t(&[1], &[1e16]);
        let b = t(&[1], &[1.0]);
        let c = t(&[1], &[-1e16]);
        let abc = ordered_sum(&[&a, &b, &c]).unwrap();
        let acb = ordered_sum(&[&a, &c, &b]).unwrap();
        assert_eq!(abc.data()[0], 0.0);
        assert_eq!(acb.data()[0], 1.0);
        for _ in 0..5 {
            assert!(ordered_sum(&[&a, &b, &c]).unwrap().bit_eq(&abc));
        }
    }

    #[test]
    fn ordered_sum_rejects_overflow() {
        let big = t(&[1], &[f64::MAX]);
        assert!(matches!(
            ordered_sum(&[&big, &big]),
            Err(Error::NumericalError(_))
        ));
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&t(&[2], &[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(l2_norm(&Tensor::<f64>::zeros(&[4]).unwrap()).unwrap(), 0.0);
        assert_eq!(l2_norm(&t(&[4], &[1.0; 4])).unwrap(), 2.0);
        assert!(matches!(l2_norm_slice::<f64>(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn byte_round_trip_and_downcast() {
        let a = Tensor::<f64>::seeded_fill(&[3, 2], 11).unwrap();
        let back = Tensor::<f64>::from_le_bytes(vec![3, 2], DType::F64, &a.to_le_bytes()).unwrap();
        assert!(a.bit_eq(&back));
        let narrow: Tensor<f32> = a.cast();
        let wide = Tensor::<f64>::from_le_bytes(vec![3, 2], DType::F32, &narrow.to_le_bytes()).unwrap();
        assert!(a.max_rel_diff(&wide).unwrap() < 1e-6);
    }
}
