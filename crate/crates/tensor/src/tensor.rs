use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::rng::Rng;

/// How to fill a freshly created tensor.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
    Values(Vec<f64>),
}

/// Dense row-major f64 array.
///
/// The data buffer is shared copy-on-write, so cloning a tensor (or binding
/// it to a tape) does not copy the payload. `grad` is only ever written for
/// tensors with `requires_grad` set.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be >= 1".into(),
        });
    }
    Ok(())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Create a tensor. `rng` is only consulted by the random initializers.
    pub fn create(shape: &[usize], init: Init, rng: Option<&mut Rng>) -> Result<Tensor> {
        check_shape(shape)?;
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi } => {
                let rng = rng.ok_or_else(|| {
                    TensorError::Contract("uniform init needs an Rng".into())
                })?;
                (0..n).map(|_| rng.uniform(lo, hi)).collect()
            }
            Init::Normal { mean, std } => {
                let rng = rng
                    .ok_or_else(|| TensorError::Contract("normal init needs an Rng".into()))?;
                (0..n).map(|_| rng.normal(mean, std)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(TensorError::InvalidShape {
                        shape: shape.to_vec(),
                        reason: format!("{} values supplied for {} elements", v.len(), n),
                    });
                }
                v
            }
        };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::create(shape, Init::Values(data), None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::create(shape, Init::Zeros, None)
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        Tensor::create(shape, Init::Ones, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::create(shape, Init::Constant(value), None)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
        Tensor::create(shape, Init::Uniform { lo, hi }, Some(rng))
    }

    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Tensor> {
        Tensor::create(shape, Init::Normal { mean, std }, Some(rng))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// Caller guarantees `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn shared_data(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the payload; copies it first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradient tracking off also drops any stored gradient.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Tensor {
        self.set_requires_grad(flag);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the stored gradient. Tensors that do not require grad
    /// ignore the call and keep `grad == None`.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.numel() {
            return Err(TensorError::Contract(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Same data viewed under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(crate::error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Bitwise equality of shape and payload (distinguishes -0.0 from 0.0).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}
