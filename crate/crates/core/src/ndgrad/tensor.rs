use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;
use crate::error::{shape_err, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {:?} need {} elements, got {}",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: T) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z)
            })
            .collect();
        Self { dims, data }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis (1 for scalars).
    #[inline]
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> From<T> for Tensor<T> {
    fn from(v: T) -> Self {
        Self::scalar(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.last_dim(), 3);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f64>::from_f64([2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }
}
