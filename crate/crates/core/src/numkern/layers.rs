use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::{DenseMatrix, Real};
use super::NumError;

/// A model (or gradient of one) viewed as an ordered list of flat tensors.
///
/// Gradients use the same type as the parameters they belong to, so
/// optimizers can zip the two lists.
pub trait Parameters<T: Real> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;
    /// Whether weight decay applies to each tensor (weights yes, biases no).
    fn decay_mask(&self) -> Vec<bool>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    fn assign_flat(&mut self, values: &[T]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, values.len());
    }
}

/// Affine map `y = x Wᵀ + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

/// Gradients of a linear layer for one upstream gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub input: DenseMatrix<T>,
}

pub fn linear_forward<T: Real>(
    x: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    bias: &[T],
) -> Result<DenseMatrix<T>, NumError> {
    if bias.len() != weight.rows() {
        return Err(NumError::InvalidArgument(format!(
            "bias length {} != output width {}",
            bias.len(),
            weight.rows()
        )));
    }
    let mut y = x.matmul_transposed(weight)?;
    for r in 0..y.rows() {
        for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
            *v = T::of(v.f64() + b.f64());
        }
    }
    Ok(y)
}

/// Backward pass of [`linear_forward`] given `upstream = ∂L/∂y`.
pub fn linear_backward<T: Real>(
    x: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    upstream: &DenseMatrix<T>,
) -> Result<LinearGrads<T>, NumError> {
    if upstream.rows() != x.rows() || upstream.cols() != weight.rows() {
        return Err(NumError::InvalidArgument(format!(
            "upstream gradient {:?} does not match output {}x{}",
            upstream.shape(),
            x.rows(),
            weight.rows()
        )));
    }
    if x.cols() != weight.cols() {
        return Err(NumError::InvalidArgument(format!(
            "input width {} != weight input width {}",
            x.cols(),
            weight.cols()
        )));
    }
    let dw = upstream.transposed_matmul(x)?;
    let mut db = vec![0.0f64; weight.rows()];
    for r in upstream.iter_rows() {
        for (acc, &g) in db.iter_mut().zip(r) {
            *acc += g.f64();
        }
    }
    let dx = upstream.matmul(weight)?;
    Ok(LinearGrads {
        weight: dw,
        bias: db.into_iter().map(T::of).collect(),
        input: dx,
    })
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(outputs, inputs),
            bias: vec![T::default(); outputs],
        }
    }

    /// Gaussian weights with standard deviation `1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = 1.0 / (inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..inputs * outputs)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self {
            weight: DenseMatrix::from_vec(outputs, inputs, data).expect("sized"),
            bias: vec![T::default(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>, NumError> {
        linear_forward(x, &self.weight, &self.bias)
    }

    /// Returns the parameter gradient packed as a `Linear` and `∂L/∂x`.
    pub fn backward(
        &self,
        x: &DenseMatrix<T>,
        upstream: &DenseMatrix<T>,
    ) -> Result<(Linear<T>, DenseMatrix<T>), NumError> {
        let g = linear_backward(x, &self.weight, upstream)?;
        Ok((
            Linear {
                weight: g.weight,
                bias: g.bias,
            },
            g.input,
        ))
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::of(b.f64())).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.weight.data(), &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
    fn decay_mask(&self) -> Vec<bool> {
        vec![true, false]
    }
}

pub fn relu_forward<T: Real>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(|v| if v > T::default() { v } else { T::default() })
}

/// Indicator `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_mask<T: Real>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(|v| if v > T::default() { T::of(1.0) } else { T::default() })
}

pub fn relu_backward<T: Real>(
    pre: &DenseMatrix<T>,
    upstream: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>, NumError> {
    if pre.shape() != upstream.shape() {
        return Err(NumError::InvalidArgument(format!(
            "relu backward shape mismatch {:?} vs {:?}",
            pre.shape(),
            upstream.shape()
        )));
    }
    let data = pre
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&p, &g)| if p > T::default() { g } else { T::default() })
        .collect();
    DenseMatrix::from_vec(pre.rows(), pre.cols(), data)
}

/// Two-layer network `W₂ · ReLU(W₁x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

/// Activations retained from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpForward<T> {
    pub pre_activation: DenseMatrix<T>,
    pub hidden: DenseMatrix<T>,
    pub output: DenseMatrix<T>,
}

impl<T: Real> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, width: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(inputs, width, rng),
            output: Linear::init(width, outputs, rng),
        }
    }

    pub fn zeros(inputs: usize, width: usize, outputs: usize) -> Self {
        Self {
            hidden: Linear::zeros(inputs, width),
            output: Linear::zeros(width, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn width(&self) -> usize {
        self.hidden.outputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<MlpForward<T>, NumError> {
        let pre_activation = self.hidden.forward(x)?;
        let hidden = relu_forward(&pre_activation);
        let output = self.output.forward(&hidden)?;
        Ok(MlpForward {
            pre_activation,
            hidden,
            output,
        })
    }

    /// Backpropagates `∂L/∂output`, plus an optional direct gradient on the
    /// hidden activations (used by feature-matching objectives).
    pub fn backward(
        &self,
        x: &DenseMatrix<T>,
        fwd: &MlpForward<T>,
        d_output: &DenseMatrix<T>,
        d_hidden_extra: Option<&DenseMatrix<T>>,
    ) -> Result<(Mlp<T>, DenseMatrix<T>), NumError> {
        let (g_out, mut d_hidden) = self.output.backward(&fwd.hidden, d_output)?;
        if let Some(extra) = d_hidden_extra {
            if extra.shape() != d_hidden.shape() {
                return Err(NumError::InvalidArgument(format!(
                    "hidden gradient {:?} != hidden shape {:?}",
                    extra.shape(),
                    d_hidden.shape()
                )));
            }
            for (d, &e) in d_hidden.data_mut().iter_mut().zip(extra.data()) {
                *d = T::of(d.f64() + e.f64());
            }
        }
        let d_pre = relu_backward(&fwd.pre_activation, &d_hidden)?;
        let (g_hidden, dx) = self.hidden.backward(x, &d_pre)?;
        Ok((
            Mlp {
                hidden: g_hidden,
                output: g_out,
            },
            dx,
        ))
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.cast(),
            output: self.output.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.hidden.tensors();
        v.extend(self.output.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
    fn decay_mask(&self) -> Vec<bool> {
        vec![true, false, true, false]
    }
}
