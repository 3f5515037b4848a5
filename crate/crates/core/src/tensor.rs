//! Dense time-major tensors.
//!
//! Every layer activation uses the `T × B × D` layout (time, batch,
//! channels). Values are stored row-major in `f64`; spike tensors are the
//! same storage constrained to `{0, 1}`.

use crate::error::{dim_err, Error, Result};

/// Dense real-valued tensor (membrane potentials, currents, analog input).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub type AnalogTensor = Tensor;

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err("tensor", "len", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing (channel) axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.len() / d
        }
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err("reshape", "len", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape.len() != expected.len() {
            return Err(dim_err(op, "rank", expected.len(), self.shape.len()));
        }
        for (axis, (&e, &a)) in expected.iter().zip(&self.shape).enumerate() {
            if e != a {
                return Err(dim_err(op, axis.to_string(), e, a));
            }
        }
        Ok(())
    }
}

/// Binary activation tensor. Every element is exactly `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor(Tensor);

impl SpikeTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self(Tensor::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Firing rate: nonzero count over element count.
    pub fn firing_rate(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.count_nonzero() as f64 / self.0.len() as f64
    }
}

impl TryFrom<Tensor> for SpikeTensor {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if let Some(bad) = t.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::Contract(format!(
                "spike tensor holds non-binary value {bad}"
            )));
        }
        Ok(Self(t))
    }
}

impl From<SpikeTensor> for Tensor {
    fn from(s: SpikeTensor) -> Tensor {
        s.0
    }
}
