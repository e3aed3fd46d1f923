//! Bayesian end-point goal inference from predicted or observed hand
//! trajectories.
//!
//! Each target is an isotropic Gaussian around its position. The score of a
//! target given one predicted hand Gaussian is the marginal likelihood
//! `N(mu_g | mu_d, Sigma_d + sigma^2 I)`; per-step scores add in log space
//! and are normalized with log-sum-exp.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{estimate_velocity, extrapolate};
use crate::cvae::ModelSet;
use crate::error::{Error, Result};
use crate::nn::GaussianVector;
use crate::predictor::{predict, PastWindow};
use crate::skeleton::{FrameWindow, Point3, Recording, NUM_JOINTS, RIGHT_HAND};

/// Default target spread in metres.
pub const DEFAULT_SIGMA: f64 = 0.05;

/// Fractions of the reach at which classification is evaluated.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.43, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub pos: Point3,
}

/// Candidate goals with a shared isotropic spread and a uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<Target>,
    pub sigma: f64,
}

impl TargetSet {
    pub fn uniform(targets: Vec<Target>, sigma: f64) -> Result<Self> {
        if targets.len() < 2 {
            return Err(Error::InvalidArgument("need at least two targets".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        for (i, a) in targets.iter().enumerate() {
            if a.pos.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "target {} is not finite",
                    a.name
                )));
            }
            if targets[..i].iter().any(|b| b.pos == a.pos) {
                return Err(Error::InvalidArgument(format!(
                    "target {} duplicates another",
                    a.name
                )));
            }
        }
        Ok(Self { targets, sigma })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn from_json(json: &str, sigma: f64) -> Result<Self> {
        let targets: Vec<Target> = serde_json::from_str(json)?;
        Self::uniform(targets, sigma)
    }

    pub fn load(path: &Path, sigma: f64) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, sigma)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.targets).expect("targets serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// The same set with targets reordered so that new index `i` holds old
    /// target `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            targets: perm.iter().map(|&i| self.targets[i].clone()).collect(),
            sigma: self.sigma,
        }
    }
}

/// Normalized probabilities over the targets of a [`TargetSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GoalPosterior {
    pub probs: Vec<f64>,
}

impl GoalPosterior {
    /// Most probable target; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Normalizes log-scores with log-sum-exp.
pub fn normalize_log_scores(scores: &[f64]) -> Result<GoalPosterior> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateVariance);
    }
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(GoalPosterior {
        probs: exp.into_iter().map(|e| e / total).collect(),
    })
}

/// Unnormalized per-target log-scores for one 3-D hand Gaussian.
pub fn frame_log_scores(pred: &GaussianVector, targets: &TargetSet) -> Result<Vec<f64>> {
    if pred.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "hand Gaussian has {} dims, expected 3",
            pred.len()
        )));
    }
    if pred.var.iter().any(|v| !(*v > 0.0 && v.is_finite()))
        || pred.mean.iter().any(|m| !m.is_finite())
    {
        return Err(Error::DegenerateVariance);
    }
    let s2 = targets.sigma * targets.sigma;
    Ok(targets
        .targets
        .iter()
        .map(|t| {
            (0..3)
                .map(|k| {
                    let v = pred.var[k] + s2;
                    let d = t.pos[k] - pred.mean[k];
                    -0.5 * (std::f64::consts::TAU * v).ln() - d * d / (2.0 * v)
                })
                .sum()
        })
        .collect())
}

pub fn frame_posterior(pred: &GaussianVector, targets: &TargetSet) -> Result<GoalPosterior> {
    normalize_log_scores(&frame_log_scores(pred, targets)?)
}

/// Posterior from a window of per-step hand Gaussians treated as
/// independent evidence.
pub fn sequence_posterior(preds: &[GaussianVector], targets: &TargetSet) -> Result<GoalPosterior> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty evidence window".into()));
    }
    let mut total = vec![0.0; targets.len()];
    for p in preds {
        for (t, s) in total.iter_mut().zip(frame_log_scores(p, targets)?) {
            *t += s;
        }
    }
    normalize_log_scores(&total)
}

/// Source of hand evidence for classification.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    /// Predicted future hand Gaussians of the trained models.
    Cvae(&'a ModelSet),
    /// Constant-velocity extrapolation over `horizon` frames from the last
    /// `k` observed velocities, unit covariance.
    Linear { k: usize, horizon: usize },
    /// The last `frames` observed hand positions, unit covariance.
    Current { frames: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cvae,
    Linear,
    Current,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cvae, Method::Linear, Method::Current];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cvae => "cvae",
            Method::Linear => "linear",
            Method::Current => "current",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Evidence with the default window lengths. `models` is needed for
    /// [`Method::Cvae`] only.
    pub fn evidence<'a>(
        self,
        models: Option<&'a ModelSet>,
        delta_t: usize,
    ) -> Result<Evidence<'a>> {
        match self {
            Method::Cvae => models
                .map(Evidence::Cvae)
                .ok_or_else(|| Error::InvalidArgument("cvae evidence needs trained models".into())),
            Method::Linear => Ok(Evidence::Linear {
                k: crate::baseline::DEFAULT_VELOCITY_FRAMES,
                horizon: delta_t,
            }),
            Method::Current => Ok(Evidence::Current {
                frames: crate::baseline::DEFAULT_VELOCITY_FRAMES,
            }),
        }
    }
}

fn unit_gaussian(p: Point3) -> GaussianVector {
    GaussianVector {
        mean: p.to_vec(),
        var: vec![1.0; 3],
    }
}

/// Right-hand positions of the `n` frames ending at `end`.
fn hand_track(recording: &Recording, end: usize, n: usize) -> Result<FrameWindow> {
    let window = recording.window_ending_at(end, n)?;
    Ok(FrameWindow {
        start_t: window.start_t,
        n_joints: 1,
        points: (0..n).map(|s| window.point(s, RIGHT_HAND)).collect(),
    })
}

/// Hand evidence available after observing frames `..=end`.
pub fn evidence_at(
    evidence: Evidence<'_>,
    recording: &Recording,
    end: usize,
) -> Result<Vec<GaussianVector>> {
    if end >= recording.len() {
        return Err(Error::RecordingTooShort {
            frames: recording.len(),
            needed: end + 1,
        });
    }
    match evidence {
        Evidence::Cvae(models) => {
            let past = PastWindow::from_recording(recording, end, models.delta_t())?;
            let pred = predict(models, &past)?;
            debug_assert_eq!(pred.world.n_joints, NUM_JOINTS);
            Ok((0..models.delta_t())
                .map(|s| pred.world_marginal(s, RIGHT_HAND))
                .collect())
        }
        Evidence::Linear { k, horizon } => {
            let track = hand_track(recording, end, k + 1)?;
            let v = estimate_velocity(&track, k)?;
            let last = track.last_frame();
            Ok((1..=horizon)
                .map(|tau| unit_gaussian(extrapolate(last, &v, tau)[0]))
                .collect())
        }
        Evidence::Current { frames } => {
            let track = hand_track(recording, end, frames)?;
            Ok(track.points.iter().map(|&p| unit_gaussian(p)).collect())
        }
    }
}

/// Classification after observing a given fraction of a reach.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionResult {
    pub fraction: f64,
    pub predicted: usize,
    pub posterior: GoalPosterior,
}

/// Last observed frame index once `fraction` of the movement is seen.
pub fn fraction_end(onset: usize, duration: usize, fraction: f64) -> usize {
    onset + (fraction * duration as f64).round() as usize
}

/// Classifies a reach starting at frame `onset` and lasting `duration`
/// frames at each observed fraction.
pub fn classify_trajectory(
    evidence: Evidence<'_>,
    recording: &Recording,
    onset: usize,
    duration: usize,
    targets: &TargetSet,
    fractions: &[f64],
) -> Result<Vec<FractionResult>> {
    fractions
        .iter()
        .map(|&fraction| {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidArgument(format!(
                    "fraction {fraction} outside [0, 1]"
                )));
            }
            let end = fraction_end(onset, duration, fraction);
            let posterior = sequence_posterior(&evidence_at(evidence, recording, end)?, targets)?;
            Ok(FractionResult {
                fraction,
                predicted: posterior.argmax(),
                posterior,
            })
        })
        .collect()
}

/// One classified reach for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachOutcome {
    pub id: String,
    pub true_target: usize,
    pub results: Vec<FractionResult>,
}

/// Per-reach CSV: `fraction,true_target,predicted,p_1..p_N` with 1-based
/// target labels.
pub fn report_csv(outcomes: &[ReachOutcome], n_targets: usize) -> String {
    let mut out = String::from("reach,fraction,true_target,predicted");
    for i in 1..=n_targets {
        write!(out, ",p_{i}").expect("writing to a string");
    }
    out.push('\n');
    for o in outcomes {
        for r in &o.results {
            write!(
                out,
                "{},{},{},{}",
                o.id,
                r.fraction,
                o.true_target + 1,
                r.predicted + 1
            )
            .expect("writing to a string");
            for p in &r.posterior.probs {
                write!(out, ",{p:.12e}").expect("writing to a string");
            }
            out.push('\n');
        }
    }
    out
}

/// Fraction of reaches classified correctly at each fraction index.
pub fn accuracy(outcomes: &[ReachOutcome], n_fractions: usize) -> Vec<f64> {
    (0..n_fractions)
        .map(|f| {
            let hits = outcomes
                .iter()
                .filter(|o| o.results[f].predicted == o.true_target)
                .count();
            hits as f64 / outcomes.len().max(1) as f64
        })
        .collect()
}

/// Accuracy table with one row per method and one column per fraction.
pub fn accuracy_table(rows: &[(String, Vec<f64>)], fractions: &[f64]) -> String {
    let mut out = String::from("method");
    for f in fractions {
        write!(out, ",{:.0}%", f * 100.0).expect("writing to a string");
    }
    out.push('\n');
    for (name, acc) in rows {
        out.push_str(name);
        for a in acc {
            write!(out, ",{a:.4}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}
