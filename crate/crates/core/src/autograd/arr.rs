//! Dense row-major f64 array used by the tape.

use ndarray::{Array1, Array2, Array3};

/// Row-major dense array. Shape `[]` is a scalar, `[n]` a vector,
/// `[m, n]` a matrix, `[c, h, w]` a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product::<usize>().max(1);
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product::<usize>().max(1);
        Self { shape: shape.to_vec(), data: vec![v; len] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let len = shape.iter().product::<usize>().max(1);
        assert_eq!(len, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar payload; panics on non-singleton arrays.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank 3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self::from_vec(&[a.len()], a.to_vec())
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (m, n) = a.dim();
        let data = a.as_standard_layout().iter().copied().collect();
        Self::from_vec(&[m, n], data)
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        let (c, h, w) = a.dim();
        let data = a.as_standard_layout().iter().copied().collect();
        Self::from_vec(&[c, h, w], data)
    }

    pub fn to_array1(&self) -> Array1<f64> {
        assert_eq!(self.shape.len(), 1, "expected rank 1, got {:?}", self.shape);
        Array1::from_vec(self.data.clone())
    }

    pub fn to_array2(&self) -> Array2<f64> {
        let (m, n) = self.dims2();
        Array2::from_shape_vec((m, n), self.data.clone()).expect("row-major data")
    }

    pub fn to_array3(&self) -> Array3<f64> {
        let (c, h, w) = self.dims3();
        Array3::from_shape_vec((c, h, w), self.data.clone()).expect("row-major data")
    }
}
