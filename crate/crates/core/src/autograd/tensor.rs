use crate::error::{shape_err, Result};

/// Dense row-major array of up to four dimensions (batch, channel, height,
/// width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("tensors have 1 to 4 dimensions, got {}", shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!("shape {shape:?} needs {numel} values, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "tensors have 1 to 4 dimensions");
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` view of a 3-D or 4-D tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        nchw(&self.shape)
    }

    /// `(c, h, w)` of a single image tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match nchw(&self.shape)? {
            (1, c, h, w) => Ok((c, h, w)),
            _ => shape_err(format!("expected a single image, got {:?}", self.shape)),
        }
    }

    /// Value at `(c, y, x)` of a single image tensor.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, _, h, w) = nchw(&self.shape).expect("image tensor");
        self.data[(c * h + y) * w + x]
    }

    /// Channel `c` of a single image tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, _, h, w) = nchw(&self.shape).expect("image tensor");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("expected a (C,H,W) or (N,C,H,W) tensor, got {shape:?}")),
    }
}
