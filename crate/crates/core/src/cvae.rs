//! Temporal conditional VAE for one limb.
//!
//! The past window `x_past` is encoded into a 20-dimensional Gaussian, a
//! sample (or the mean) of which is passed through the transitioner into a
//! second 20-dimensional Gaussian, whose sample is decoded into a diagonal
//! Gaussian over the future window. Both latent stages are regularized by a
//! KL term against N(0, I); the decoder supplies the reconstruction term.
//!
//! ```text
//! x_past -> tanh(200) -> (mu_e, var_e) -> e -> tanh(30) -> (mu_t, var_t) -> t
//!        -> tanh(200) -> (mu_d, var_d) over x_future
//! ```

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{
    Activation, DenseGrad, DenseLayer, GaussianHead, GaussianHeadGrad, GaussianVector, HeadOutput,
    Rng, VAR_FLOOR,
};
use crate::skeleton::{flat_index, Limb};

/// Rows per gradient chunk. Chunk boundaries, not thread count, fix the
/// floating-point reduction order.
pub const CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub encoder_hidden: usize,
    pub latent: usize,
    pub transition_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            encoder_hidden: 200,
            latent: 20,
            transition_hidden: 30,
            decoder_hidden: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    Mean,
    Sample,
}

/// Mean-or-sample choice at each of the three stochastic stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub encoder: StageMode,
    pub transitioner: StageMode,
    pub decoder: StageMode,
}

impl ForwardMode {
    /// Point prediction.
    pub const MEAN: ForwardMode = ForwardMode {
        encoder: StageMode::Mean,
        transitioner: StageMode::Mean,
        decoder: StageMode::Mean,
    };
    /// Sample both latent stages, keep the decoder mean.
    pub const LATENT_SAMPLE: ForwardMode = ForwardMode {
        encoder: StageMode::Sample,
        transitioner: StageMode::Sample,
        decoder: StageMode::Mean,
    };
    pub const FULL_SAMPLE: ForwardMode = ForwardMode {
        encoder: StageMode::Sample,
        transitioner: StageMode::Sample,
        decoder: StageMode::Sample,
    };
}

/// Output of one latent stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub value: Vec<f64>,
    pub dist: GaussianVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub encoded: StageOutput,
    pub transitioned: StageOutput,
    pub decoded: GaussianVector,
    /// Decoder sample in decoder sample mode, otherwise the decoder mean.
    pub x_hat: Vec<f64>,
}

/// Smallest per-dimension scale a [`Standardizer`] will divide by.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Fixed per-dimension affine maps around the network. Past windows enter
/// as `(x - input_shift) / input_scale`; the decoder's Gaussian leaves as
/// mean `output_shift + output_scale * m`, variance `output_scale^2 * v`.
/// Not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
}

fn column_stats(rows: usize, dim: usize, row: &dyn Fn(usize) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    for i in 0..rows {
        for (m, v) in mean.iter_mut().zip(row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; dim];
    for i in 0..rows {
        for ((acc, v), m) in var.iter_mut().zip(row(i)).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|v| (v / rows as f64).sqrt().max(SCALE_FLOOR))
        .collect();
    (mean, scale)
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_shift: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            output_shift: vec![0.0; dim],
            output_scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations (floored at [`SCALE_FLOOR`]) of
    /// `n` past/future window pairs produced by `pair`.
    pub fn fit(n: usize, dim: usize, pair: impl Fn(usize) -> (Vec<f64>, Vec<f64>)) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("no windows to standardize".into()));
        }
        let (input_shift, input_scale) = column_stats(n, dim, &|i| pair(i).0);
        let (output_shift, output_scale) = column_stats(n, dim, &|i| pair(i).1);
        Ok(Self {
            input_shift,
            input_scale,
            output_shift,
            output_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.input_shift.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for v in [
            &self.input_shift,
            &self.input_scale,
            &self.output_shift,
            &self.output_scale,
        ] {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "standardizer has {} dims, model expects {dim}",
                    v.len()
                )));
            }
        }
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !ok(&self.input_shift) || !ok(&self.output_shift) {
            return Err(Error::ShapeMismatch(
                "standardizer shift is not finite".into(),
            ));
        }
        if !self
            .input_scale
            .iter()
            .chain(&self.output_scale)
            .all(|&s| s.is_finite() && s > 0.0)
        {
            return Err(Error::ShapeMismatch(
                "standardizer scale must be positive".into(),
            ));
        }
        Ok(())
    }

    fn forward_rows(x: ArrayView2<f64>, shift: &[f64], scale: &[f64]) -> Array2<f64> {
        let mut out = x.to_owned();
        out -= &Array1::from(shift.to_vec());
        out /= &Array1::from(scale.to_vec());
        out
    }

    fn input_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        Self::forward_rows(x, &self.input_shift, &self.input_scale)
    }

    fn target_rows(&self, y: ArrayView2<f64>) -> Array2<f64> {
        Self::forward_rows(y, &self.output_shift, &self.output_scale)
    }

    fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn output_rows(&self, mean: &mut Array2<f64>, var: &mut Array2<f64>) {
        let scale = Array1::from(self.output_scale.clone());
        *mean *= &scale;
        *mean += &Array1::from(self.output_shift.clone());
        *var *= &(&scale * &scale);
    }

    fn output(&self, g: GaussianVector) -> GaussianVector {
        let GaussianVector { mut mean, mut var } = g;
        for (i, s) in self.output_scale.iter().enumerate() {
            mean[i] = self.output_shift[i] + s * mean[i];
            var[i] *= s * s;
        }
        GaussianVector { mean, var }
    }

    /// Log-density offset per row between original and standardized units.
    fn log_jacobian(&self) -> f64 {
        self.output_scale.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbCvae {
    pub limb: Limb,
    pub delta_t: usize,
    pub standardizer: Standardizer,
    pub encoder: DenseLayer,
    pub encoder_head: GaussianHead,
    pub transitioner: DenseLayer,
    pub transitioner_head: GaussianHead,
    pub decoder: DenseLayer,
    pub decoder_head: GaussianHead,
}

/// Gradient buffers for every parameter of a [`LimbCvae`].
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeGrad {
    pub encoder: DenseGrad,
    pub encoder_head: GaussianHeadGrad,
    pub transitioner: DenseGrad,
    pub transitioner_head: GaussianHeadGrad,
    pub decoder: DenseGrad,
    pub decoder_head: GaussianHeadGrad,
}

impl CvaeGrad {
    pub fn add_assign(&mut self, other: &CvaeGrad) {
        self.encoder.add_assign(&other.encoder);
        self.encoder_head.add_assign(&other.encoder_head);
        self.transitioner.add_assign(&other.transitioner);
        self.transitioner_head.add_assign(&other.transitioner_head);
        self.decoder.add_assign(&other.decoder);
        self.decoder_head.add_assign(&other.decoder_head);
    }

    /// Same tensor order as [`LimbCvae::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(18);
        out.extend(self.encoder.slices());
        out.extend(self.encoder_head.mean.slices());
        out.extend(self.encoder_head.raw_var.slices());
        out.extend(self.transitioner.slices());
        out.extend(self.transitioner_head.mean.slices());
        out.extend(self.transitioner_head.raw_var.slices());
        out.extend(self.decoder.slices());
        out.extend(self.decoder_head.mean.slices());
        out.extend(self.decoder_head.raw_var.slices());
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn scale(&mut self, k: f64) {
        for g in [
            &mut self.encoder,
            &mut self.encoder_head.mean,
            &mut self.encoder_head.raw_var,
            &mut self.transitioner,
            &mut self.transitioner_head.mean,
            &mut self.transitioner_head.raw_var,
            &mut self.decoder,
            &mut self.decoder_head.mean,
            &mut self.decoder_head.raw_var,
        ] {
            g.weights *= k;
            g.biases *= k;
        }
    }
}

/// Intermediate values of a batched pass, kept for backpropagation.
struct BatchCache {
    x: Array2<f64>,
    enc_h: Array2<f64>,
    enc: HeadOutput,
    e: Array2<f64>,
    tr_h: Array2<f64>,
    tr: HeadOutput,
    t: Array2<f64>,
    dec_h: Array2<f64>,
    dec: HeadOutput,
}

/// Knobs of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboOptions {
    /// Multiplier on both KL terms; 0 leaves the pure reconstruction term.
    pub kl_weight: f64,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self { kl_weight: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    /// Gradient of `value` with respect to every parameter.
    pub grad: CvaeGrad,
}

fn sample_stage(head: &HeadOutput, eps: ArrayView2<f64>) -> Array2<f64> {
    let mut z = head.var.mapv(f64::sqrt);
    z *= &eps;
    z += &head.mean;
    z
}

fn kl_rows(head: &HeadOutput) -> f64 {
    let mut total = 0.0;
    Zip::from(&head.mean).and(&head.var).for_each(|&m, &v| {
        total += v + m * m - 1.0 - v.ln();
    });
    0.5 * total
}

/// Gradients of the KL term and the reparameterized sample with respect to
/// a latent stage's mean and variance.
fn latent_backward(
    head: &HeadOutput,
    eps: ArrayView2<f64>,
    d_sample: Array2<f64>,
    kl_weight: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut d_var = Array2::zeros(head.var.raw_dim());
    Zip::from(&mut d_var)
        .and(&d_sample)
        .and(&head.var)
        .and(&eps)
        .for_each(|dv, &ds, &v, &e| {
            *dv = ds * e / (2.0 * v.sqrt()) + kl_weight * 0.5 * (1.0 - 1.0 / v);
        });
    let mut d_mean = d_sample;
    d_mean.scaled_add(kl_weight, &head.mean);
    (d_mean, d_var)
}

impl LimbCvae {
    /// Default-width model for `limb` with Glorot initialization.
    pub fn new(limb: Limb, delta_t: usize, seed: u64) -> Self {
        let mut rng = Rng::from_stream(seed, &format!("init/{}", limb.name()));
        Self::with_topology(
            limb,
            delta_t,
            limb.dim(delta_t),
            Topology::default(),
            &mut rng,
        )
    }

    /// Arbitrary input/output dimension and layer widths.
    pub fn with_topology(
        limb: Limb,
        delta_t: usize,
        io_dim: usize,
        topo: Topology,
        rng: &mut Rng,
    ) -> Self {
        Self {
            limb,
            delta_t,
            standardizer: Standardizer::identity(io_dim),
            encoder: DenseLayer::glorot(io_dim, topo.encoder_hidden, Activation::Tanh, rng),
            encoder_head: GaussianHead::glorot(topo.encoder_hidden, topo.latent, VAR_FLOOR, rng),
            transitioner: DenseLayer::glorot(
                topo.latent,
                topo.transition_hidden,
                Activation::Tanh,
                rng,
            ),
            transitioner_head: GaussianHead::glorot(
                topo.transition_hidden,
                topo.latent,
                VAR_FLOOR,
                rng,
            ),
            decoder: DenseLayer::glorot(topo.latent, topo.decoder_hidden, Activation::Tanh, rng),
            decoder_head: GaussianHead::glorot(topo.decoder_hidden, io_dim, VAR_FLOOR, rng),
        }
    }

    pub fn io_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_head.out_dim()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            encoder_hidden: self.encoder.out_dim(),
            latent: self.latent_dim(),
            transition_hidden: self.transitioner.out_dim(),
            decoder_hidden: self.decoder.out_dim(),
        }
    }

    /// Checks that all layer shapes chain together.
    pub fn validate(&self) -> Result<()> {
        let chain = [
            (
                self.encoder.out_dim(),
                self.encoder_head.in_dim(),
                "encoder -> head",
            ),
            (
                self.encoder_head.out_dim(),
                self.transitioner.in_dim(),
                "encoder head -> transitioner",
            ),
            (
                self.transitioner.out_dim(),
                self.transitioner_head.in_dim(),
                "transitioner -> head",
            ),
            (
                self.transitioner_head.out_dim(),
                self.decoder.in_dim(),
                "transitioner head -> decoder",
            ),
            (
                self.decoder.out_dim(),
                self.decoder_head.in_dim(),
                "decoder -> head",
            ),
            (
                self.decoder_head.out_dim(),
                self.encoder.in_dim(),
                "output dim vs input dim",
            ),
        ];
        for (a, b, what) in chain {
            if a != b {
                return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
            }
        }
        for head in [
            &self.encoder_head,
            &self.transitioner_head,
            &self.decoder_head,
        ] {
            if head.mean.in_dim() != head.raw_var.in_dim()
                || head.mean.out_dim() != head.raw_var.out_dim()
            {
                return Err(Error::ShapeMismatch("gaussian head halves differ".into()));
            }
            if head.var_floor.is_nan() || head.var_floor <= 0.0 {
                return Err(Error::ShapeMismatch(
                    "variance floor must be positive".into(),
                ));
            }
        }
        self.standardizer.validate(self.io_dim())
    }

    pub fn zero_grad(&self) -> CvaeGrad {
        CvaeGrad {
            encoder: self.encoder.zero_grad(),
            encoder_head: self.encoder_head.zero_grad(),
            transitioner: self.transitioner.zero_grad(),
            transitioner_head: self.transitioner_head.zero_grad(),
            decoder: self.decoder.zero_grad(),
            decoder_head: self.decoder_head.zero_grad(),
        }
    }

    fn layers(&self) -> [&DenseLayer; 9] {
        [
            &self.encoder,
            &self.encoder_head.mean,
            &self.encoder_head.raw_var,
            &self.transitioner,
            &self.transitioner_head.mean,
            &self.transitioner_head.raw_var,
            &self.decoder,
            &self.decoder_head.mean,
            &self.decoder_head.raw_var,
        ]
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.param_slices())
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        [
            &mut self.encoder,
            &mut self.encoder_head.mean,
            &mut self.encoder_head.raw_var,
            &mut self.transitioner,
            &mut self.transitioner_head.mean,
            &mut self.transitioner_head.raw_var,
            &mut self.decoder,
            &mut self.decoder_head.mean,
            &mut self.decoder_head.raw_var,
        ]
        .into_iter()
        .flat_map(|l| l.param_slices_mut())
        .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64], expected: usize, what: &str) -> Result<()> {
        if v.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {expected} values, got {}",
                v.len()
            )));
        }
        Ok(())
    }

    fn stage(
        hidden: &DenseLayer,
        head: &GaussianHead,
        input: &[f64],
        eps: Option<&[f64]>,
    ) -> Result<StageOutput> {
        let h = hidden.forward(input)?;
        let dist = head.forward(&h)?;
        let value = match eps {
            None => dist.mean.clone(),
            Some(eps) => crate::nn::reparameterize(&dist, eps)?,
        };
        Ok(StageOutput { value, dist })
    }

    /// Encoder stage; `eps = None` selects the mean.
    pub fn encode(&self, x_past: &[f64], eps: Option<&[f64]>) -> Result<StageOutput> {
        self.check_len(x_past, self.io_dim(), "past window")?;
        Self::stage(
            &self.encoder,
            &self.encoder_head,
            &self.standardizer.input(x_past),
            eps,
        )
    }

    /// Transitioner stage; `eps = None` selects the mean.
    pub fn transition(&self, e: &[f64], eps: Option<&[f64]>) -> Result<StageOutput> {
        self.check_len(e, self.latent_dim(), "encoded state")?;
        Self::stage(&self.transitioner, &self.transitioner_head, e, eps)
    }

    pub fn decode(&self, t: &[f64]) -> Result<GaussianVector> {
        self.check_len(t, self.latent_dim(), "transitioned state")?;
        let h = self.decoder.forward(t)?;
        Ok(self.standardizer.output(self.decoder_head.forward(&h)?))
    }

    /// Encode, transition and decode, drawing noise from `rng` for every
    /// stage in sample mode.
    pub fn forward(
        &self,
        x_past: &[f64],
        mode: ForwardMode,
        rng: &mut Rng,
    ) -> Result<ForwardOutput> {
        let latent = self.latent_dim();
        let eps_e = (mode.encoder == StageMode::Sample).then(|| rng.normals(latent));
        let eps_t = (mode.transitioner == StageMode::Sample).then(|| rng.normals(latent));
        let encoded = self.encode(x_past, eps_e.as_deref())?;
        let transitioned = self.transition(&encoded.value, eps_t.as_deref())?;
        let decoded = self.decode(&transitioned.value)?;
        let x_hat = match mode.decoder {
            StageMode::Mean => decoded.mean.clone(),
            StageMode::Sample => decoded.sample(rng),
        };
        Ok(ForwardOutput {
            encoded,
            transitioned,
            decoded,
            x_hat,
        })
    }

    /// Batched pass on raw past windows; the decoder output stays in
    /// standardized units.
    fn forward_batch(
        &self,
        x_past: ArrayView2<f64>,
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
    ) -> BatchCache {
        let x = self.standardizer.input_rows(x_past);
        let enc_h = self.encoder.forward_batch(x.view());
        let enc = self.encoder_head.forward_batch(enc_h.view());
        let e = sample_stage(&enc, eps_e);
        let tr_h = self.transitioner.forward_batch(e.view());
        let tr = self.transitioner_head.forward_batch(tr_h.view());
        let t = sample_stage(&tr, eps_t);
        let dec_h = self.decoder.forward_batch(t.view());
        let dec = self.decoder_head.forward_batch(dec_h.view());
        BatchCache {
            x,
            enc_h,
            enc,
            e,
            tr_h,
            tr,
            t,
            dec_h,
            dec,
        }
    }

    /// Decoder distributions for a batch of past windows in all-mean mode.
    pub fn predict_batch(&self, x_past: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let zeros = Array2::zeros((x_past.nrows(), self.latent_dim()));
        let mut cache = self.forward_batch(x_past, zeros.view(), zeros.view());
        self.standardizer
            .output_rows(&mut cache.dec.mean, &mut cache.dec.var);
        (cache.dec.mean, cache.dec.var)
    }

    /// Encoder latent means (or the 200-unit hidden activations) per row.
    pub fn encoder_features(&self, x_past: ArrayView2<f64>, hidden_layer: bool) -> Array2<f64> {
        let h = self
            .encoder
            .forward_batch(self.standardizer.input_rows(x_past).view());
        if hidden_layer {
            h
        } else {
            self.encoder_head.mean.forward_batch(h.view())
        }
    }

    /// Negative ELBO summed over the rows and its gradient, one
    /// reparameterization draw per row.
    pub fn loss_grad_batch(
        &self,
        x_past: ArrayView2<f64>,
        x_future: ArrayView2<f64>,
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
        opts: ElboOptions,
    ) -> (f64, CvaeGrad) {
        let c = self.forward_batch(x_past, eps_e, eps_t);
        let w = opts.kl_weight;
        let target = self.standardizer.target_rows(x_future);

        let mut d_mean = Array2::zeros(c.dec.mean.raw_dim());
        let mut d_var = Array2::zeros(c.dec.var.raw_dim());
        let mut nll = 0.0;
        Zip::from(&mut d_mean)
            .and(&mut d_var)
            .and(&target)
            .and(&c.dec.mean)
            .and(&c.dec.var)
            .for_each(|dm, dv, &y, &m, &v| {
                let r = y - m;
                nll += 0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v);
                *dm = -r / v;
                *dv = 0.5 / v - r * r / (2.0 * v * v);
            });
        nll += x_past.nrows() as f64 * self.standardizer.log_jacobian();
        let loss = nll + w * (kl_rows(&c.enc) + kl_rows(&c.tr));

        let mut grad = self.zero_grad();
        let d_dec_h = self.decoder_head.backward_batch(
            c.dec_h.view(),
            &c.dec,
            d_mean,
            d_var,
            &mut grad.decoder_head,
        );
        let d_t = self
            .decoder
            .backward_batch(c.t.view(), c.dec_h.view(), d_dec_h, &mut grad.decoder, true)
            .expect("input grad requested");
        let (d_tr_mean, d_tr_var) = latent_backward(&c.tr, eps_t, d_t, w);
        let d_tr_h = self.transitioner_head.backward_batch(
            c.tr_h.view(),
            &c.tr,
            d_tr_mean,
            d_tr_var,
            &mut grad.transitioner_head,
        );
        let d_e = self
            .transitioner
            .backward_batch(
                c.e.view(),
                c.tr_h.view(),
                d_tr_h,
                &mut grad.transitioner,
                true,
            )
            .expect("input grad requested");
        let (d_enc_mean, d_enc_var) = latent_backward(&c.enc, eps_e, d_e, w);
        let d_enc_h = self.encoder_head.backward_batch(
            c.enc_h.view(),
            &c.enc,
            d_enc_mean,
            d_enc_var,
            &mut grad.encoder_head,
        );
        self.encoder.backward_batch(
            c.x.view(),
            c.enc_h.view(),
            d_enc_h,
            &mut grad.encoder,
            false,
        );
        (loss, grad)
    }

    /// Negative ELBO summed over rows, without gradients.
    pub fn loss_batch(
        &self,
        x_past: ArrayView2<f64>,
        x_future: ArrayView2<f64>,
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
        opts: ElboOptions,
    ) -> f64 {
        let c = self.forward_batch(x_past, eps_e, eps_t);
        let target = self.standardizer.target_rows(x_future);
        let mut nll = x_past.nrows() as f64 * self.standardizer.log_jacobian();
        Zip::from(&target)
            .and(&c.dec.mean)
            .and(&c.dec.var)
            .for_each(|&y, &m, &v| {
                let r = y - m;
                nll += 0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v);
            });
        nll + opts.kl_weight * (kl_rows(&c.enc) + kl_rows(&c.tr))
    }

    /// [`Self::loss_grad_batch`] split into fixed row chunks that may run in
    /// parallel; chunk results are summed in chunk order.
    pub fn loss_grad_chunked(
        &self,
        x_past: ArrayView2<f64>,
        x_future: ArrayView2<f64>,
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
        opts: ElboOptions,
        exec: Execution,
    ) -> (f64, CvaeGrad) {
        let n = x_past.nrows();
        let chunks = n.div_ceil(CHUNK_ROWS);
        let parts = exec::map_range(exec, chunks, |k| {
            let r = s![k * CHUNK_ROWS..((k + 1) * CHUNK_ROWS).min(n), ..];
            self.loss_grad_batch(
                x_past.slice(r),
                x_future.slice(r),
                eps_e.slice(r),
                eps_t.slice(r),
                opts,
            )
        });
        let mut iter = parts.into_iter();
        let (mut loss, mut grad) = iter.next().unwrap_or_else(|| (0.0, self.zero_grad()));
        for (l, g) in iter {
            loss += l;
            grad.add_assign(&g);
        }
        (loss, grad)
    }

    pub fn loss_chunked(
        &self,
        x_past: ArrayView2<f64>,
        x_future: ArrayView2<f64>,
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
        opts: ElboOptions,
        exec: Execution,
    ) -> f64 {
        let n = x_past.nrows();
        let chunks = n.div_ceil(CHUNK_ROWS);
        exec::map_range(exec, chunks, |k| {
            let r = s![k * CHUNK_ROWS..((k + 1) * CHUNK_ROWS).min(n), ..];
            self.loss_batch(
                x_past.slice(r),
                x_future.slice(r),
                eps_e.slice(r),
                eps_t.slice(r),
                opts,
            )
        })
        .into_iter()
        .sum()
    }

    /// S-sample estimate of the lower bound for one window pair and its
    /// gradient, with noise drawn from `rng`.
    pub fn elbo(
        &self,
        x_past: &[f64],
        x_future: &[f64],
        samples: usize,
        rng: &mut Rng,
        opts: ElboOptions,
    ) -> Result<ElboEstimate> {
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        self.check_len(x_past, self.io_dim(), "past window")?;
        self.check_len(x_future, self.io_dim(), "future window")?;
        let latent = self.latent_dim();
        let eps_e = Array2::from_shape_vec((samples, latent), rng.normals(samples * latent))
            .expect("shape matches draw count");
        let eps_t = Array2::from_shape_vec((samples, latent), rng.normals(samples * latent))
            .expect("shape matches draw count");
        self.elbo_with_noise(x_past, x_future, eps_e.view(), eps_t.view(), opts)
    }

    /// [`Self::elbo`] with explicit noise, one row per sample.
    pub fn elbo_with_noise(
        &self,
        x_past: &[f64],
        x_future: &[f64],
        eps_e: ArrayView2<f64>,
        eps_t: ArrayView2<f64>,
        opts: ElboOptions,
    ) -> Result<ElboEstimate> {
        let samples = eps_e.nrows();
        let past = ndarray::ArrayView1::from(x_past)
            .insert_axis(Axis(0))
            .broadcast((samples, x_past.len()))
            .expect("row broadcast")
            .to_owned();
        let future = ndarray::ArrayView1::from(x_future)
            .insert_axis(Axis(0))
            .broadcast((samples, x_future.len()))
            .expect("row broadcast")
            .to_owned();
        let (loss, mut grad) = self.loss_grad_batch(past.view(), future.view(), eps_e, eps_t, opts);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        grad.scale(-1.0 / samples as f64);
        Ok(ElboEstimate {
            value: -loss / samples as f64,
            grad,
        })
    }
}

/// 3-dimensional marginal of joint `joint` at window step `step`.
pub fn joint_marginal(
    g: &GaussianVector,
    step: usize,
    joint: usize,
    n_joints: usize,
) -> GaussianVector {
    g.slice(flat_index(step, joint, 0, n_joints), 3)
}

/// The four limb models sharing one window length.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub root: LimbCvae,
    pub torso: LimbCvae,
    pub right: LimbCvae,
    pub left: LimbCvae,
}

impl ModelSet {
    pub fn new(root: LimbCvae, torso: LimbCvae, right: LimbCvae, left: LimbCvae) -> Result<Self> {
        let set = Self {
            root,
            torso,
            right,
            left,
        };
        let dt = set.root.delta_t;
        for limb in Limb::ALL {
            let m = set.get(limb);
            if m.limb != limb {
                return Err(Error::ShapeMismatch(format!(
                    "model for {} found in {} slot",
                    m.limb.name(),
                    limb.name()
                )));
            }
            if m.delta_t != dt {
                return Err(Error::ShapeMismatch(
                    "limb models disagree on delta_t".into(),
                ));
            }
            if m.io_dim() != limb.dim(dt) {
                return Err(Error::ShapeMismatch(format!(
                    "{} model has io dim {}, expected {}",
                    limb.name(),
                    m.io_dim(),
                    limb.dim(dt)
                )));
            }
        }
        Ok(set)
    }

    /// Freshly initialized default-width models.
    pub fn initialized(delta_t: usize, seed: u64) -> Self {
        Self {
            root: LimbCvae::new(Limb::Root, delta_t, seed),
            torso: LimbCvae::new(Limb::Torso, delta_t, seed),
            right: LimbCvae::new(Limb::Right, delta_t, seed),
            left: LimbCvae::new(Limb::Left, delta_t, seed),
        }
    }

    pub fn delta_t(&self) -> usize {
        self.root.delta_t
    }

    pub fn get(&self, limb: Limb) -> &LimbCvae {
        match limb {
            Limb::Root => &self.root,
            Limb::Torso => &self.torso,
            Limb::Right => &self.right,
            Limb::Left => &self.left,
        }
    }

    pub fn get_mut(&mut self, limb: Limb) -> &mut LimbCvae {
        match limb {
            Limb::Root => &mut self.root,
            Limb::Torso => &mut self.torso,
            Limb::Right => &mut self.right,
            Limb::Left => &mut self.left,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, gaussian_log_pdf, kl_std_normal, relative_error};

    fn tiny(seed: u64) -> LimbCvae {
        let topo = Topology {
            encoder_hidden: 7,
            latent: 3,
            transition_hidden: 4,
            decoder_hidden: 5,
        };
        LimbCvae::with_topology(Limb::Root, 1, 6, topo, &mut Rng::new(seed))
    }

    fn tiny_scaled(seed: u64) -> LimbCvae {
        let mut m = tiny(seed);
        m.standardizer = Standardizer {
            input_shift: vec![0.1, -0.2, 0.0, 0.3, 0.05, -0.1],
            input_scale: vec![0.5, 2.0, 0.1, 1.0, 0.3, 0.7],
            output_shift: vec![-0.1, 0.2, 0.4, 0.0, 0.1, -0.3],
            output_scale: vec![0.2, 1.5, 0.05, 0.8, 3.0, 0.4],
        };
        m
    }

    #[test]
    fn standardizer_fit_and_validation() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = Standardizer::fit(2, 2, |i| {
            (
                rows[i].clone(),
                rows[1 - i].iter().map(|v| v * 2.0).collect(),
            )
        })
        .unwrap();
        assert_eq!(st.input_shift, vec![2.0, 5.0]);
        assert_eq!(st.input_scale, vec![1.0, SCALE_FLOOR]);
        assert_eq!(st.output_shift, vec![4.0, 10.0]);
        assert_eq!(st.output_scale, vec![2.0, SCALE_FLOOR]);
        assert!(Standardizer::fit(0, 2, |i| (rows[i].clone(), rows[i].clone())).is_err());
        let mut m = tiny(1);
        m.validate().unwrap();
        m.standardizer.output_scale[2] = 0.0;
        assert!(m.validate().is_err());
        m.standardizer = Standardizer::identity(5);
        assert!(m.validate().is_err());
    }

    #[test]
    fn scaled_batch_prediction_matches_single() {
        let m = tiny_scaled(5);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let (mean, var) = m.predict_batch(x.view());
        for i in 0..3 {
            let single = m
                .forward(
                    x.row(i).as_slice().unwrap(),
                    ForwardMode::MEAN,
                    &mut Rng::new(0),
                )
                .unwrap();
            for d in 0..6 {
                assert!((single.decoded.mean[d] - mean[[i, d]]).abs() < 1e-12);
                assert!((single.decoded.var[d] - var[[i, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_widths() {
        let m = LimbCvae::new(Limb::Right, 50, 1);
        assert_eq!(m.io_dim(), 450);
        assert_eq!(m.topology(), Topology::default());
        m.validate().unwrap();
        let x = vec![0.1; 450];
        let enc = m.encode(&x, None).unwrap();
        assert_eq!(enc.value.len(), 20);
        let tr = m.transition(&enc.value, None).unwrap();
        assert_eq!(tr.value.len(), 20);
        assert_eq!(m.transitioner.out_dim(), 30);
        let dec = m.decode(&tr.value).unwrap();
        assert_eq!((dec.mean.len(), dec.var.len()), (450, 450));
        assert!(dec.var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn mean_mode_is_deterministic_and_matches_zero_noise() {
        let m = tiny(3);
        let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
        let a = m.encode(&x, None).unwrap();
        assert_eq!(a, m.encode(&x, None).unwrap());
        assert_eq!(a.value, m.encode(&x, Some(&[0.0; 3])).unwrap().value);
        let ta = m.transition(&a.value, None).unwrap();
        assert_eq!(
            ta.value,
            m.transition(&a.value, Some(&[0.0; 3])).unwrap().value
        );
        let f1 = m.forward(&x, ForwardMode::MEAN, &mut Rng::new(1)).unwrap();
        let f2 = m.forward(&x, ForwardMode::MEAN, &mut Rng::new(2)).unwrap();
        assert_eq!(f1, f2);
        assert!(matches!(
            m.encode(&x[..5], None),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            m.transition(&[0.0; 2], None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let m = tiny(4);
        let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
        let a = m
            .forward(&x, ForwardMode::FULL_SAMPLE, &mut Rng::new(9))
            .unwrap();
        let b = m
            .forward(&x, ForwardMode::FULL_SAMPLE, &mut Rng::new(9))
            .unwrap();
        assert_eq!(a, b);
        let c = m
            .forward(&x, ForwardMode::FULL_SAMPLE, &mut Rng::new(10))
            .unwrap();
        assert_ne!(a.x_hat, c.x_hat);
    }

    #[test]
    fn batch_prediction_matches_single() {
        let m = tiny(5);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let (mean, var) = m.predict_batch(x.view());
        for i in 0..4 {
            let single = m
                .forward(
                    x.row(i).as_slice().unwrap(),
                    ForwardMode::MEAN,
                    &mut Rng::new(0),
                )
                .unwrap();
            for d in 0..6 {
                assert!((single.decoded.mean[d] - mean[[i, d]]).abs() < 1e-13);
                assert!((single.decoded.var[d] - var[[i, d]]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn elbo_value_matches_direct_evaluation() {
        for m in [tiny(6), tiny_scaled(6)] {
            let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
            let y = [0.1, 0.0, 0.5, -0.2, 0.2, -0.4];
            let eps_e = [0.3, -1.2, 0.5];
            let eps_t = [-0.7, 0.1, 1.4];
            let est = m
                .elbo_with_noise(
                    &x,
                    &y,
                    Array2::from_shape_vec((1, 3), eps_e.to_vec())
                        .unwrap()
                        .view(),
                    Array2::from_shape_vec((1, 3), eps_t.to_vec())
                        .unwrap()
                        .view(),
                    ElboOptions::default(),
                )
                .unwrap();
            let enc = m.encode(&x, Some(&eps_e)).unwrap();
            let tr = m.transition(&enc.value, Some(&eps_t)).unwrap();
            let dec = m.decode(&tr.value).unwrap();
            let direct = gaussian_log_pdf(&y, &dec).unwrap()
                - kl_std_normal(&enc.dist)
                - kl_std_normal(&tr.dist);
            assert!((est.value - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let m = if seed % 2 == 0 {
                tiny(100 + seed)
            } else {
                tiny_scaled(100 + seed)
            };
            let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
            let y = [0.1, 0.0, 0.5, -0.2, 0.2, -0.4];
            let mut rng = Rng::new(seed);
            let eps_e = Array2::from_shape_vec((2, 3), rng.normals(6)).unwrap();
            let eps_t = Array2::from_shape_vec((2, 3), rng.normals(6)).unwrap();
            let opts = ElboOptions::default();
            let analytic = m
                .elbo_with_noise(&x, &y, eps_e.view(), eps_t.view(), opts)
                .unwrap()
                .grad
                .to_flat();
            let mut probe = m.clone();
            let numeric = finite_diff_grad(
                |p| {
                    probe.set_flat(p).unwrap();
                    probe
                        .elbo_with_noise(&x, &y, eps_e.view(), eps_t.view(), opts)
                        .unwrap()
                        .value
                },
                &m.to_flat(),
                1e-5,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    relative_error(*a, *n, 1e-6) < 1e-4,
                    "analytic {a} numeric {n}"
                );
            }
        }
    }

    #[test]
    fn huge_decoder_variance_gives_constant_reconstruction() {
        let mut m = tiny(7);
        m.decoder_head.raw_var.weights.fill(0.0);
        m.decoder_head.raw_var.biases.fill(1e12);
        let var = super::super::nn::gaussian::softplus(1e12) + VAR_FLOOR;
        let expected = 6.0 * (-0.5 * (2.0 * PI * var).ln());
        let opts = ElboOptions { kl_weight: 0.0 };
        for y in [[0.0; 6], [3.0, -2.0, 1.0, 0.5, 9.0, -4.0]] {
            let est = m.elbo(&[0.1; 6], &y, 1, &mut Rng::new(0), opts).unwrap();
            assert!((est.value - expected).abs() < 1e-9 * expected.abs());
        }
    }

    #[test]
    fn zero_kl_weight_is_pure_reconstruction() {
        let m = tiny(8);
        let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
        let y = [0.0; 6];
        let eps = Array2::zeros((1, 3));
        let est = m
            .elbo_with_noise(
                &x,
                &y,
                eps.view(),
                eps.view(),
                ElboOptions { kl_weight: 0.0 },
            )
            .unwrap();
        let dec = m
            .forward(&x, ForwardMode::MEAN, &mut Rng::new(0))
            .unwrap()
            .decoded;
        assert!((est.value - gaussian_log_pdf(&y, &dec).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn chunked_reduction_is_execution_independent() {
        let m = LimbCvae::with_topology(Limb::Root, 2, 6, Topology::default(), &mut Rng::new(1));
        let n = 150;
        let mut rng = Rng::new(2);
        let x = Array2::from_shape_vec((n, 6), rng.normals(n * 6)).unwrap();
        let y = Array2::from_shape_vec((n, 6), rng.normals(n * 6)).unwrap();
        let ee = Array2::from_shape_vec((n, 20), rng.normals(n * 20)).unwrap();
        let et = Array2::from_shape_vec((n, 20), rng.normals(n * 20)).unwrap();
        let opts = ElboOptions::default();
        let seq = m.loss_grad_chunked(
            x.view(),
            y.view(),
            ee.view(),
            et.view(),
            opts,
            Execution::Sequential,
        );
        let par = m.loss_grad_chunked(
            x.view(),
            y.view(),
            ee.view(),
            et.view(),
            opts,
            Execution::Parallel,
        );
        assert_eq!(seq.0.to_bits(), par.0.to_bits());
        assert_eq!(seq.1, par.1);
        let l = m.loss_chunked(
            x.view(),
            y.view(),
            ee.view(),
            et.view(),
            opts,
            Execution::Parallel,
        );
        assert_eq!(l.to_bits(), seq.0.to_bits());
    }

    #[test]
    fn joint_marginal_is_contiguous_triple() {
        let g = GaussianVector::new((0..18).map(|i| i as f64).collect(), vec![1.0; 18]).unwrap();
        let j = joint_marginal(&g, 1, 2, 3);
        assert_eq!(j.mean, vec![15.0, 16.0, 17.0]);
    }

    #[test]
    fn flat_round_trip() {
        let m = tiny(9);
        let mut n = tiny(10);
        n.set_flat(&m.to_flat()).unwrap();
        assert_eq!(m, n);
        assert!(n.set_flat(&[0.0; 3]).is_err());
    }
}
