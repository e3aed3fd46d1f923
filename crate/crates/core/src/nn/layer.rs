use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `act(W x + b)` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

/// Gradient buffers matching one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseGrad {
    pub fn add_assign(&mut self, other: &DenseGrad) {
        self.weights += &other.weights;
        self.biases += &other.biases;
    }
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights {}x{} vs {} biases",
                weights.nrows(),
                weights.ncols(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite layer parameter".into()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((out_dim, in_dim), || rng.uniform(-limit, limit));
        Self {
            weights,
            biases: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            weights: Array2::zeros(self.weights.raw_dim()),
            biases: Array1::zeros(self.biases.len()),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let x = ArrayView1::from(input);
        let z = self.weights.dot(&x) + &self.biases;
        Ok(z.mapv(|v| self.activation.apply(v)).to_vec())
    }

    /// Row-batched forward pass: one sample per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        let mut z = Array2::zeros((x.nrows(), self.out_dim()));
        general_mat_mul(1.0, &x, &self.weights.t(), 0.0, &mut z);
        z += &self.biases;
        if self.activation != Activation::Identity {
            z.mapv_inplace(|v| self.activation.apply(v));
        }
        z
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input when `want_input_grad` is set.
    ///
    /// `output` is the cached result of `forward_batch(x)`.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        output: ArrayView2<f64>,
        mut d_out: Array2<f64>,
        grad: &mut DenseGrad,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        if self.activation != Activation::Identity {
            ndarray::Zip::from(&mut d_out)
                .and(&output)
                .for_each(|d, &y| *d *= self.activation.derivative_from_output(y));
        }
        general_mat_mul(1.0, &d_out.t(), &x, 1.0, &mut grad.weights);
        grad.biases += &d_out.sum_axis(Axis(0));
        want_input_grad.then(|| d_out.dot(&self.weights))
    }

    pub fn param_slices(&self) -> [&[f64]; 2] {
        [
            self.weights.as_slice().expect("standard layout"),
            self.biases.as_slice().expect("standard layout"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weights.as_slice_mut().expect("standard layout"),
            self.biases.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl DenseGrad {
    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weights.as_slice().expect("standard layout"),
            self.biases.as_slice().expect("standard layout"),
        ]
    }
}
