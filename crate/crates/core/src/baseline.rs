//! Constant-velocity extrapolation and a constant (training-mean) predictor.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::predictor::WindowPredictor;
use crate::skeleton::{FrameWindow, Limb, Point3};
use crate::trainer::PairDataset;

/// Frames averaged for the velocity estimate.
pub const DEFAULT_VELOCITY_FRAMES: usize = 20;

/// Per-joint velocity in window units per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEstimate {
    pub velocity: Vec<Point3>,
}

/// Mean of the last `k` frame-to-frame differences.
pub fn estimate_velocity(past: &FrameWindow, k: usize) -> Result<VelocityEstimate> {
    let n = past.delta_t();
    if k == 0 || n < k + 1 {
        return Err(Error::WindowTooShort {
            frames: n,
            needed: k.max(1) + 1,
        });
    }
    let mut velocity = vec![[0.0; 3]; past.n_joints];
    for step in n - k..n {
        for (j, v) in velocity.iter_mut().enumerate() {
            let (a, b) = (past.point(step - 1, j), past.point(step, j));
            for c in 0..3 {
                v[c] += b[c] - a[c];
            }
        }
    }
    for v in &mut velocity {
        for c in v.iter_mut() {
            *c /= k as f64;
        }
    }
    Ok(VelocityEstimate { velocity })
}

/// `f + tau * v` for every joint.
pub fn extrapolate(last_frame: &[Point3], v: &VelocityEstimate, tau: usize) -> Vec<Point3> {
    let tau = tau as f64;
    last_frame
        .iter()
        .zip(&v.velocity)
        .map(|(f, v)| [f[0] + tau * v[0], f[1] + tau * v[1], f[2] + tau * v[2]])
        .collect()
}

/// Extrapolated frames `t + 1 ..= t + horizon` from a past window.
pub fn extrapolate_window(past: &FrameWindow, k: usize, horizon: usize) -> Result<FrameWindow> {
    let v = estimate_velocity(past, k)?;
    let last = past.last_frame();
    Ok(FrameWindow {
        start_t: past.start_t + past.delta_t() as u64,
        n_joints: past.n_joints,
        points: (1..=horizon)
            .flat_map(|tau| extrapolate(last, &v, tau))
            .collect(),
    })
}

/// Constant-velocity extrapolation applied to flat limb windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearPredictor {
    pub delta_t: usize,
    pub k: usize,
}

impl LinearPredictor {
    pub fn new(delta_t: usize) -> Self {
        Self {
            delta_t,
            k: DEFAULT_VELOCITY_FRAMES,
        }
    }
}

impl WindowPredictor for LinearPredictor {
    fn delta_t(&self) -> usize {
        self.delta_t
    }

    fn predict_rows(
        &self,
        limb: Limb,
        past: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let n_joints = limb.indices().len();
        check_width(limb, past.ncols(), self.delta_t)?;
        let mut out = Array2::zeros(past.raw_dim());
        for (row, mut dst) in past.outer_iter().zip(out.outer_iter_mut()) {
            let row = row.to_vec();
            let window = FrameWindow::devectorize(&row, self.delta_t, n_joints)?;
            let future = extrapolate_window(&window, self.k, self.delta_t)?;
            for (d, s) in dst.iter_mut().zip(future.vectorize()) {
                *d = s;
            }
        }
        Ok((out, None))
    }
}

/// Predicts the same future vector for every input: the mean future window
/// of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor {
    pub delta_t: usize,
    /// Future vector per limb, in [`Limb::ALL`] order.
    pub futures: Vec<Array1<f64>>,
}

impl ConstantPredictor {
    /// Mean future window per limb over the given datasets (one per limb, in
    /// [`Limb::ALL`] order).
    pub fn training_mean(datasets: &[PairDataset]) -> Result<Self> {
        if datasets.len() != Limb::ALL.len() {
            return Err(Error::InvalidArgument("need one dataset per limb".into()));
        }
        let delta_t = datasets[0].delta_t;
        let mut futures = Vec::with_capacity(4);
        for data in datasets {
            if data.is_empty() {
                return Err(Error::InvalidArgument("empty training set".into()));
            }
            let mut sum = Array1::zeros(data.dim());
            let ids: Vec<usize> = (0..data.len()).collect();
            for chunk in ids.chunks(1024) {
                let (_, future) = data.batch(chunk);
                sum += &future.sum_axis(Axis(0));
            }
            futures.push(sum / data.len() as f64);
        }
        Ok(Self { delta_t, futures })
    }
}

impl WindowPredictor for ConstantPredictor {
    fn delta_t(&self) -> usize {
        self.delta_t
    }

    fn predict_rows(
        &self,
        limb: Limb,
        past: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        check_width(limb, past.ncols(), self.delta_t)?;
        let f = &self.futures[limb.ordinal() as usize];
        let mut out = Array2::zeros(past.raw_dim());
        for mut row in out.outer_iter_mut() {
            row.assign(f);
        }
        Ok((out, None))
    }
}

fn check_width(limb: Limb, width: usize, delta_t: usize) -> Result<()> {
    if width != limb.dim(delta_t) {
        return Err(Error::ShapeMismatch(format!(
            "{} rows have width {width}, expected {}",
            limb.name(),
            limb.dim(delta_t)
        )));
    }
    Ok(())
}
