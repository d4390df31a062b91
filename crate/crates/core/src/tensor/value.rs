use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f64`.
///
/// `Tensor` is a plain value. Gradient bookkeeping lives on the
/// [`Tape`](super::Tape), which owns one gradient buffer per recorded node.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected a 4-D NCHW tensor, got {:?}", self.shape)),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * h + y) * w + x]
    }

    /// Errors on the first NaN or infinite value.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Contract(format!(
                "non-finite value {} at flat index {} of tensor {:?}",
                self.data[i], i, self.shape
            ))),
        }
    }

    /// Copy of image `n` as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(shape_err!("batch index {} out of range {}", n, batch));
        }
        let len = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Concatenates `1×C×H×W` (or `Ni×C×H×W`) tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty batch"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (ni, ci, hi, wi) = t.dims4()?;
            if (ci, hi, wi) != (c, h, w) {
                return Err(shape_err!(
                    "batch items disagree: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                ));
            }
            n += ni;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
