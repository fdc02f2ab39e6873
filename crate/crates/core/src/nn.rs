//! Small dense layers with hand-written backward passes, and an Adam optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat access to every trainable tensor, in a fixed order.
pub trait Params<T: Scalar> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += scale * other`; both must share a layout.
    fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }
}

fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Affine map `y = x W^T + b` applied row-wise; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for both
    /// weights and biases.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..=bound));
        let weight = Array2::from_shape_simple_fn((output, input), &mut draw);
        let bias = Array1::from_shape_simple_fn(output, &mut draw);
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "linear input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![slice(&self.weight), self.bias.as_slice().expect("contiguous bias")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            slice_mut(&mut self.weight),
            self.bias.as_slice_mut().expect("contiguous bias"),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(T::zero())),
            Activation::Identity => x.clone(),
        }
    }

    fn backward<T: Scalar>(self, pre: &Array2<T>, dy: Array2<T>) -> Array2<T> {
        match self {
            Activation::Relu => {
                let mut d = dy;
                d.zip_mut_with(pre, |g, &p| {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                });
                d
            }
            Activation::Identity => dy,
        }
    }
}

/// Two-layer feed-forward map with a nonlinearity between the layers and
/// none after the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
    pub activation: Activation,
}

/// Intermediate values kept from [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Mlp {
            first: Linear::init(input, hidden, rng),
            second: Linear::init(hidden, output, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            first: Linear::zeros(self.first.input_dim(), self.first.output_dim()),
            second: Linear::zeros(self.second.input_dim(), self.second.output_dim()),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.second.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        let pre = self.first.forward(x)?;
        let hidden = self.activation.apply(&pre);
        let out = self.second.forward(hidden.view())?;
        Ok((
            out,
            MlpCache {
                input: x.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: ArrayView2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let dh = self.second.backward(cache.hidden.view(), dy, &mut grad.second);
        let dpre = self.activation.backward(&cache.pre, dh);
        self.first.backward(cache.input.view(), dpre.view(), &mut grad.first)
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.first.tensors();
        v.extend(self.second.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.first.tensors_mut();
        v.extend(self.second.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Adam {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
