//! Whole-skeleton prediction from the four limb models, future sampling,
//! mapping back to sensor coordinates, and motion prediction error curves.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::cvae::{LimbCvae, ModelSet};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{GaussianVector, Rng};
use crate::skeleton::{
    self, denormalize_frame, FrameWindow, Limb, NormalizationContext, Point3, Recording, CHAIN,
    NUM_JOINTS, NUM_SEGMENTS,
};
use crate::trainer::{root_relative, PairDataset};

/// Anything that maps past limb windows to future limb windows.
pub trait WindowPredictor: Sync {
    fn delta_t(&self) -> usize;

    /// Future means, and variances when the predictor has them, for a batch
    /// of flattened past windows of `limb`, one per row.
    fn predict_rows(
        &self,
        limb: Limb,
        past: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)>;
}

impl WindowPredictor for ModelSet {
    fn delta_t(&self) -> usize {
        ModelSet::delta_t(self)
    }

    fn predict_rows(
        &self,
        limb: Limb,
        past: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let model = self.get(limb);
        if past.ncols() != model.io_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows have width {}, expected {}",
                limb.name(),
                past.ncols(),
                model.io_dim()
            )));
        }
        let (mean, var) = model.predict_batch(past);
        Ok((mean, Some(var)))
    }
}

/// A normalized 9-joint past window with the context of its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PastWindow {
    pub window: FrameWindow,
    pub context: NormalizationContext,
}

impl PastWindow {
    pub fn new(window: FrameWindow, context: NormalizationContext) -> Result<Self> {
        if window.n_joints != NUM_JOINTS {
            return Err(Error::ShapeMismatch(format!(
                "past window has {} joints, expected {NUM_JOINTS}",
                window.n_joints
            )));
        }
        if window.delta_t() == 0 {
            return Err(Error::ShapeMismatch("empty past window".into()));
        }
        if context.len() != window.delta_t() || context.segment_lengths.len() != window.delta_t() {
            return Err(Error::ContextMismatch(format!(
                "context covers {} frames, window {}",
                context.len(),
                window.delta_t()
            )));
        }
        Ok(Self { window, context })
    }

    /// Normalizes the `delta_t` sensor frames ending at frame index `end`.
    pub fn from_recording(recording: &Recording, end: usize, delta_t: usize) -> Result<Self> {
        if delta_t == 0 || end + 1 < delta_t || end >= recording.len() {
            return Err(Error::RecordingTooShort {
                frames: recording.len().min(end + 1),
                needed: delta_t.max(1),
            });
        }
        let slice = Recording {
            id: recording.id.clone(),
            fps: recording.fps,
            frames: recording.frames[end + 1 - delta_t..=end].to_vec(),
        };
        let (normalized, context) = skeleton::normalize(&slice)?;
        Self::new(normalized.window(0, delta_t)?, context)
    }

    pub fn delta_t(&self) -> usize {
        self.window.delta_t()
    }

    pub fn last_root(&self) -> Point3 {
        *self
            .context
            .root_positions
            .last()
            .expect("non-empty context")
    }

    pub fn last_lengths(&self) -> &[f64; NUM_SEGMENTS] {
        self.context
            .segment_lengths
            .last()
            .expect("non-empty context")
    }

    /// Model input of `limb`: the root trajectory relative to its last
    /// position, or the limb's normalized joints.
    pub fn limb_input(&self, limb: Limb) -> Vec<f64> {
        match limb {
            Limb::Root => root_relative(&self.context.root_positions, self.last_root()),
            _ => self.window.select_limb(limb).vectorize(),
        }
    }
}

/// Assembled prediction for one past window.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Decoder distribution per limb, in [`Limb::ALL`] order. The root
    /// distribution is over translations relative to the last past root.
    pub limbs: Vec<(Limb, GaussianVector)>,
    /// Normalized future window; joint 0 stays at the origin.
    pub window: FrameWindow,
    /// Per-step, per-joint variances of `window`.
    pub variance: Vec<Point3>,
    /// Future window in sensor coordinates.
    pub world: FrameWindow,
    /// Per-step, per-joint variances of `world`.
    pub world_variance: Vec<Point3>,
}

impl PredictionResult {
    pub fn limb(&self, limb: Limb) -> &GaussianVector {
        &self.limbs[limb.ordinal() as usize].1
    }

    /// Sensor-frame marginal of one joint at one future step.
    pub fn world_marginal(&self, step: usize, joint: usize) -> GaussianVector {
        let i = step * NUM_JOINTS + joint;
        GaussianVector {
            mean: self.world.points[i].to_vec(),
            var: self.world_variance[i].to_vec(),
        }
    }
}

/// Latent noise for one limb: encoder and transitioner draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub encoder: Vec<f64>,
    pub transitioner: Vec<f64>,
}

impl LatentNoise {
    pub fn zeros(latent: usize) -> Self {
        Self {
            encoder: vec![0.0; latent],
            transitioner: vec![0.0; latent],
        }
    }

    pub fn draw(latent: usize, rng: &mut Rng) -> Self {
        let encoder = rng.normals(latent);
        let transitioner = rng.normals(latent);
        Self {
            encoder,
            transitioner,
        }
    }
}

fn check_past(models: &ModelSet, past: &PastWindow) -> Result<()> {
    if past.delta_t() != models.delta_t() {
        return Err(Error::ShapeMismatch(format!(
            "past window has {} frames, models expect {}",
            past.delta_t(),
            models.delta_t()
        )));
    }
    Ok(())
}

fn run_limb(model: &LimbCvae, x: &[f64], noise: Option<&LatentNoise>) -> Result<GaussianVector> {
    let e = model.encode(x, noise.map(|n| n.encoder.as_slice()))?;
    let t = model.transition(&e.value, noise.map(|n| n.transitioner.as_slice()))?;
    model.decode(&t.value)
}

fn run(
    models: &ModelSet,
    past: &PastWindow,
    noise: Option<&[LatentNoise]>,
) -> Result<PredictionResult> {
    check_past(models, past)?;
    if let Some(n) = noise {
        if n.len() != Limb::ALL.len() {
            return Err(Error::ShapeMismatch(
                "need latent noise for every limb".into(),
            ));
        }
    }
    let limbs = Limb::ALL
        .iter()
        .map(|&limb| {
            let x = past.limb_input(limb);
            let n = noise.map(|n| &n[limb.ordinal() as usize]);
            Ok((limb, run_limb(models.get(limb), &x, n)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(past, limbs, models.delta_t()))
}

/// Joint source for the assembled window: (limb, position in its index set).
fn joint_source(joint: usize) -> Option<(Limb, usize)> {
    match joint {
        1..=4 => Some((Limb::Torso, joint - 1)),
        5 => Some((Limb::Right, 1)),
        7 => Some((Limb::Right, 2)),
        6 => Some((Limb::Left, 1)),
        8 => Some((Limb::Left, 2)),
        _ => None,
    }
}

/// Weights of each normalized joint in the sensor-frame position of every
/// joint (excluding the root translation) under [`denormalize_frame`].
fn world_coefficients(lengths: &[f64; NUM_SEGMENTS]) -> [[f64; NUM_JOINTS]; NUM_JOINTS] {
    let mut coef = [[0.0; NUM_JOINTS]; NUM_JOINTS];
    coef[0][0] = 1.0;
    for (s, &(p, c)) in CHAIN.iter().enumerate() {
        coef[c] = coef[p];
        coef[c][c] += lengths[s];
        coef[c][p] -= lengths[s];
    }
    coef
}

fn assemble(
    past: &PastWindow,
    limbs: Vec<(Limb, GaussianVector)>,
    delta_t: usize,
) -> PredictionResult {
    let mut points = vec![[0.0; 3]; delta_t * NUM_JOINTS];
    let mut variance = vec![[0.0; 3]; delta_t * NUM_JOINTS];
    for step in 0..delta_t {
        for joint in 0..NUM_JOINTS {
            if let Some((limb, slot)) = joint_source(joint) {
                let g = &limbs[limb.ordinal() as usize].1;
                let n = limb.indices().len();
                let at = skeleton::flat_index(step, slot, 0, n);
                let i = step * NUM_JOINTS + joint;
                points[i] = [g.mean[at], g.mean[at + 1], g.mean[at + 2]];
                variance[i] = [g.var[at], g.var[at + 1], g.var[at + 2]];
            }
        }
    }
    let window = FrameWindow {
        start_t: past.window.start_t + delta_t as u64,
        n_joints: NUM_JOINTS,
        points,
    };

    let root = &limbs[Limb::Root.ordinal() as usize].1;
    let anchor = past.last_root();
    let lengths = past.last_lengths();
    let coef = world_coefficients(lengths);
    let mut world_points = Vec::with_capacity(delta_t * NUM_JOINTS);
    let mut world_variance = Vec::with_capacity(delta_t * NUM_JOINTS);
    for step in 0..delta_t {
        let r = [
            anchor[0] + root.mean[3 * step],
            anchor[1] + root.mean[3 * step + 1],
            anchor[2] + root.mean[3 * step + 2],
        ];
        world_points.extend(denormalize_frame(window.frame(step), r, lengths));
        for c in coef.iter() {
            let mut v = [
                root.var[3 * step],
                root.var[3 * step + 1],
                root.var[3 * step + 2],
            ];
            for (j, w) in c.iter().enumerate() {
                if *w != 0.0 {
                    let vj = variance[step * NUM_JOINTS + j];
                    for k in 0..3 {
                        v[k] += w * w * vj[k];
                    }
                }
            }
            world_variance.push(v);
        }
    }
    PredictionResult {
        limbs,
        world: FrameWindow {
            start_t: window.start_t,
            n_joints: NUM_JOINTS,
            points: world_points,
        },
        window,
        variance,
        world_variance,
    }
}

/// All-mean prediction of every limb.
pub fn predict(models: &ModelSet, past: &PastWindow) -> Result<PredictionResult> {
    run(models, past, None)
}

/// One future drawn by sampling the encoder and transitioner stages of
/// every limb and keeping the decoder mean.
pub fn sample_future(
    models: &ModelSet,
    past: &PastWindow,
    rng: &mut Rng,
) -> Result<PredictionResult> {
    let noise: Vec<LatentNoise> = Limb::ALL
        .iter()
        .map(|&l| LatentNoise::draw(models.get(l).latent_dim(), rng))
        .collect();
    sample_future_with_noise(models, past, &noise)
}

/// [`sample_future`] with explicit noise, one entry per limb in
/// [`Limb::ALL`] order.
pub fn sample_future_with_noise(
    models: &ModelSet,
    past: &PastWindow,
    noise: &[LatentNoise],
) -> Result<PredictionResult> {
    run(models, past, Some(noise))
}

/// Sensor-frame future from a normalized window, absolute root positions
/// per step, and the segment lengths of the last observed frame.
pub fn to_world(
    window: &FrameWindow,
    roots: &[Point3],
    lengths: &[f64; NUM_SEGMENTS],
) -> Result<FrameWindow> {
    if window.n_joints != NUM_JOINTS {
        return Err(Error::ShapeMismatch(format!(
            "window has {} joints",
            window.n_joints
        )));
    }
    if roots.len() != window.delta_t() {
        return Err(Error::ContextMismatch(format!(
            "{} root positions for a {}-frame window",
            roots.len(),
            window.delta_t()
        )));
    }
    Ok(FrameWindow {
        start_t: window.start_t,
        n_joints: NUM_JOINTS,
        points: (0..window.delta_t())
            .flat_map(|s| denormalize_frame(window.frame(s), roots[s], lengths))
            .collect(),
    })
}

/// Per-step squared error summed over a limb's joints and coordinates,
/// averaged over all window pairs, and the matching mean summed variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MpeCurve {
    pub limb: Limb,
    pub mpe: Vec<f64>,
    pub mean_var: Option<Vec<f64>>,
}

impl MpeCurve {
    /// CSV with columns `step_ms,mpe,mean_var`; `mean_var` is empty for
    /// predictors without variances.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_ms,mpe,mean_var\n");
        for (s, m) in self.mpe.iter().enumerate() {
            let ms = skeleton::window_span_ms(s + 1);
            match &self.mean_var {
                Some(v) => writeln!(out, "{ms:.4},{m:.10e},{:.10e}", v[s]),
                None => writeln!(out, "{ms:.4},{m:.10e},"),
            }
            .expect("writing to a string");
        }
        out
    }
}

const EVAL_BLOCK: usize = 256;

/// Motion prediction error curves of a trained model set on test recordings.
pub fn evaluate_mpe(
    models: &ModelSet,
    test: &[Recording],
    exec: Execution,
) -> Result<Vec<MpeCurve>> {
    evaluate_mpe_with(models, test, exec)
}

/// MPE curves for any predictor, one per limb in [`Limb::ALL`] order.
pub fn evaluate_mpe_with<P: WindowPredictor + ?Sized>(
    predictor: &P,
    test: &[Recording],
    exec: Execution,
) -> Result<Vec<MpeCurve>> {
    let delta_t = predictor.delta_t();
    let (normalized, contexts): (Vec<_>, Vec<_>) = test
        .iter()
        .map(skeleton::normalize)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Limb::ALL
        .iter()
        .map(|&limb| {
            let data = PairDataset::from_normalized(&normalized, &contexts, limb, delta_t)?;
            limb_curve(predictor, &data, limb, exec)
        })
        .collect()
}

fn limb_curve<P: WindowPredictor + ?Sized>(
    predictor: &P,
    data: &PairDataset,
    limb: Limb,
    exec: Execution,
) -> Result<MpeCurve> {
    let delta_t = data.delta_t;
    let frame_dim = data.frame_dim;
    let n = data.len();
    if n == 0 {
        return Err(Error::RecordingTooShort {
            frames: 0,
            needed: 2 * delta_t + 1,
        });
    }
    let blocks = n.div_ceil(EVAL_BLOCK);
    let partial = exec::map_range(exec, blocks, |b| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let ids: Vec<usize> = (b * EVAL_BLOCK..((b + 1) * EVAL_BLOCK).min(n)).collect();
        let (past, future) = data.batch(&ids);
        let (mean, var) = predictor.predict_rows(limb, past.view())?;
        let mut err = vec![0.0; delta_t];
        let mut vsum = var.as_ref().map(|_| vec![0.0; delta_t]);
        for r in 0..ids.len() {
            for (i, (m, f)) in mean.row(r).iter().zip(future.row(r)).enumerate() {
                err[i / frame_dim] += (m - f) * (m - f);
            }
            if let (Some(v), Some(acc)) = (&var, vsum.as_mut()) {
                for (i, x) in v.row(r).iter().enumerate() {
                    acc[i / frame_dim] += x;
                }
            }
        }
        Ok((err, vsum))
    });
    let mut mpe = vec![0.0; delta_t];
    let mut mean_var: Option<Vec<f64>> = None;
    for p in partial {
        let (err, v) = p?;
        for (a, e) in mpe.iter_mut().zip(err) {
            *a += e;
        }
        if let Some(v) = v {
            let acc = mean_var.get_or_insert_with(|| vec![0.0; delta_t]);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
    let scale = 1.0 / n as f64;
    mpe.iter_mut().for_each(|x| *x *= scale);
    if let Some(v) = mean_var.as_mut() {
        v.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(MpeCurve {
        limb,
        mpe,
        mean_var,
    })
}

/// Gnuplot script plotting `<limb>_<label>.csv` files in one directory.
pub fn gnuplot_script(labels: &[&str]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'prediction horizon (ms)'\nset ylabel 'MPE'\nset term pngcairo size 1200,800\nset output 'mpe.png'\nset multiplot layout 2,2\n",
    );
    for limb in Limb::ALL {
        let plots: Vec<String> = labels
            .iter()
            .map(|l| format!("'{}_{l}.csv' using 1:2 with lines title '{l}'", limb.name()))
            .collect();
        writeln!(s, "set title '{}'\nplot {}", limb.name(), plots.join(", "))
            .expect("writing to a string");
    }
    s.push_str("unset multiplot\n");
    s
}
