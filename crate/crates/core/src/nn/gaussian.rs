use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Zip};

use super::layer::{Activation, DenseGrad, DenseLayer};
use super::rng::Rng;
use crate::error::{Error, Result};

pub const VAR_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian over a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianVector {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has {} dims, var has {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::DegenerateVariance);
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Marginal over the index range `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> GaussianVector {
        GaussianVector {
            mean: self.mean[start..start + len].to_vec(),
            var: self.var[start..start + len].to_vec(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps = rng.normals(self.len());
        reparameterize(self, &eps).expect("eps drawn at matching length")
    }
}

/// `mean + sqrt(var) * eps`.
pub fn reparameterize(g: &GaussianVector, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "noise has {} dims, distribution {}",
            eps.len(),
            g.len()
        )));
    }
    Ok(g.mean
        .iter()
        .zip(&g.var)
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

/// KL(N(mean, diag var) || N(0, I)).
pub fn kl_std_normal(g: &GaussianVector) -> f64 {
    0.5 * g
        .mean
        .iter()
        .zip(&g.var)
        .map(|(m, v)| v + m * m - 1.0 - v.ln())
        .sum::<f64>()
}

pub fn gaussian_log_pdf(x: &[f64], g: &GaussianVector) -> Result<f64> {
    if x.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "point has {} dims, distribution {}",
            x.len(),
            g.len()
        )));
    }
    Ok(x.iter()
        .zip(g.mean.iter().zip(&g.var))
        .map(|(xi, (m, v))| -0.5 * (2.0 * PI * v).ln() - (xi - m) * (xi - m) / (2.0 * v))
        .sum())
}

/// Mean and variance layers sharing one input; variance is
/// `softplus(raw) + var_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: DenseLayer,
    pub raw_var: DenseLayer,
    pub var_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHeadGrad {
    pub mean: DenseGrad,
    pub raw_var: DenseGrad,
}

impl GaussianHeadGrad {
    pub fn add_assign(&mut self, other: &GaussianHeadGrad) {
        self.mean.add_assign(&other.mean);
        self.raw_var.add_assign(&other.raw_var);
    }
}

/// Cached batch output of a [`GaussianHead`].
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub mean: Array2<f64>,
    pub raw: Array2<f64>,
    pub var: Array2<f64>,
}

impl GaussianHead {
    pub fn glorot(in_dim: usize, out_dim: usize, var_floor: f64, rng: &mut Rng) -> Self {
        Self {
            mean: DenseLayer::glorot(in_dim, out_dim, Activation::Identity, rng),
            raw_var: DenseLayer::glorot(in_dim, out_dim, Activation::Identity, rng),
            var_floor,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.mean.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mean.out_dim()
    }

    pub fn zero_grad(&self) -> GaussianHeadGrad {
        GaussianHeadGrad {
            mean: self.mean.zero_grad(),
            raw_var: self.raw_var.zero_grad(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<GaussianVector> {
        let mean = self.mean.forward(input)?;
        let var = self
            .raw_var
            .forward(input)?
            .into_iter()
            .map(|r| softplus(r) + self.var_floor)
            .collect();
        Ok(GaussianVector { mean, var })
    }

    pub fn forward_batch(&self, h: ArrayView2<f64>) -> HeadOutput {
        let mean = self.mean.forward_batch(h);
        let raw = self.raw_var.forward_batch(h);
        let floor = self.var_floor;
        let var = raw.mapv(|r| softplus(r) + floor);
        HeadOutput { mean, raw, var }
    }

    /// Backpropagates gradients w.r.t. the head's mean and variance outputs.
    /// Returns the gradient w.r.t. the head input.
    pub fn backward_batch(
        &self,
        h: ArrayView2<f64>,
        out: &HeadOutput,
        d_mean: Array2<f64>,
        mut d_var: Array2<f64>,
        grad: &mut GaussianHeadGrad,
    ) -> Array2<f64> {
        Zip::from(&mut d_var)
            .and(&out.raw)
            .for_each(|d, &r| *d *= sigmoid(r));
        let dh_mean = self
            .mean
            .backward_batch(h, out.mean.view(), d_mean, &mut grad.mean, true)
            .expect("input grad requested");
        let dh_var = self
            .raw_var
            .backward_batch(h, out.raw.view(), d_var, &mut grad.raw_var, true)
            .expect("input grad requested");
        dh_mean + dh_var
    }
}
