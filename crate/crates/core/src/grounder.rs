//! Student grounding network: text and visual encoders plus the similarity
//! head scoring every entity against every proposal.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrounderShape {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for GrounderShape {
    fn default() -> Self {
        GrounderShape {
            text_dim: 768,
            visual_dim: 1536,
            hidden_dim: 512,
            embed_dim: 512,
        }
    }
}

/// Affine map from an elementwise product `h ⊙ v` to a scalar score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SimilarityHead<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Params<T> for SimilarityHead<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("contiguous"),
            self.bias.as_slice().expect("contiguous"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("contiguous"),
            self.bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GrounderParams<T> {
    pub seed: u64,
    pub shape: GrounderShape,
    pub text: Mlp<T>,
    pub visual: Mlp<T>,
    pub head: SimilarityHead<T>,
}

impl<T: Scalar> GrounderParams<T> {
    pub fn init(shape: GrounderShape, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = Mlp::init(shape.text_dim, shape.hidden_dim, shape.embed_dim, activation, &mut rng);
        let visual = Mlp::init(shape.visual_dim, shape.hidden_dim, shape.embed_dim, activation, &mut rng);
        let head_lin = crate::nn::Linear::init(shape.embed_dim, 1, &mut rng);
        GrounderParams {
            seed,
            shape,
            text,
            visual,
            head: SimilarityHead {
                weight: head_lin.weight.row(0).to_owned(),
                bias: head_lin.bias,
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        GrounderParams {
            seed: self.seed,
            shape: self.shape,
            text: self.text.zeros_like(),
            visual: self.visual.zeros_like(),
            head: SimilarityHead {
                weight: Array1::zeros(self.head.weight.len()),
                bias: Array1::zeros(1),
            },
        }
    }

    /// `H = En_txt(E)`; rows are entities.
    pub fn encode_text(&self, embeddings: ArrayView2<T>) -> Result<Array2<T>> {
        check_cols("text embeddings", self.shape.text_dim, embeddings.ncols())?;
        self.text.forward(embeddings)
    }

    /// `V = En_vis(X)`; rows are proposals.
    pub fn encode_visual(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        check_cols("proposal features", self.shape.visual_dim, features.ncols())?;
        self.visual.forward(features)
    }

    pub fn encode_text_cached(&self, embeddings: ArrayView2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        check_cols("text embeddings", self.shape.text_dim, embeddings.ncols())?;
        self.text.forward_cached(embeddings)
    }

    pub fn encode_visual_cached(&self, features: ArrayView2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        check_cols("proposal features", self.shape.visual_dim, features.ncols())?;
        self.visual.forward_cached(features)
    }

    /// `A[i, j] = w · (h_i ⊙ v_j) + b`, i.e. `H diag(w) Vᵀ + b`.
    pub fn similarity_matrix(&self, h: ArrayView2<T>, v: ArrayView2<T>) -> Result<Array2<T>> {
        let d = self.head.weight.len();
        check_cols("entity encodings", d, h.ncols())?;
        check_cols("proposal encodings", d, v.ncols())?;
        let hw = &h * &self.head.weight;
        Ok(hw.dot(&v.t()) + self.head.bias[0])
    }

    /// Backward of [`GrounderParams::similarity_matrix`]: accumulates head
    /// gradients into `grad` and returns `(dH, dV)`.
    pub fn similarity_backward(
        &self,
        h: ArrayView2<T>,
        v: ArrayView2<T>,
        da: ArrayView2<T>,
        grad: &mut GrounderParams<T>,
    ) -> (Array2<T>, Array2<T>) {
        let w = &self.head.weight;
        // dA V has entry (i, k) = sum_j dA_ij v_jk
        let da_v = da.dot(&v);
        let dh = &da_v * w;
        let dv = da.t().dot(&h) * w;
        grad.head.weight += &(&da_v * &h).sum_axis(ndarray::Axis(0));
        grad.head.bias[0] += da.sum();
        (dh, dv)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl<T: Scalar> Params<T> for GrounderParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.text.tensors();
        v.extend(self.visual.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.text.tensors_mut();
        v.extend(self.visual.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

fn check_cols(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

/// Stacks equally sized rows into a matrix in the model's scalar type.
pub fn rows_to_matrix<T: Scalar>(rows: &[Vec<f64>], width: usize, context: &'static str) -> Result<Array2<T>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        check_cols(context, width, r.len())?;
        for (j, &v) in r.iter().enumerate() {
            out[[i, j]] = T::lit(v);
        }
    }
    Ok(out)
}
