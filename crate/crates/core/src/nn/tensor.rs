use crate::error::ShapeError;

use super::scalar::Scalar;

/// Dense 4-D array in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, ShapeError> {
        if shape.contains(&0) {
            return Err(ShapeError::new(format!("tensor dimensions must be >= 1, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(ShapeError::new(format!(
                "tensor {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// `height * width`.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Channel plane `c` of batch item `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checked mode: reject NaN or infinite entries.
    pub fn check_finite(&self, what: &str) -> Result<(), ShapeError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(ShapeError::new(format!("{what}: non-finite value at flat index {i}"))),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Center crop of every channel plane to `height x width`.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self, ShapeError> {
        if height > self.height() || width > self.width() {
            return Err(ShapeError::new(format!(
                "cannot center-crop {:?} to {height}x{width}",
                self.shape
            )));
        }
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let [n, c, _, _] = self.shape;
        let mut out = Vec::with_capacity(n * c * height * width);
        for b in 0..n {
            for ch in 0..c {
                let cropped =
                    crate::raster::center_crop_slice(self.channel(b, ch), self.width(), self.height(), width, height)?;
                out.extend_from_slice(&cropped);
            }
        }
        Ok(Self {
            shape: [n, c, height, width],
            data: out,
        })
    }
}
