//! Encoder activations, principal component analysis, and a silhouette
//! separation score for comparing groups of embedded reaches.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cvae::{LimbCvae, ModelSet};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Rng};
use crate::predictor::PastWindow;
use crate::skeleton::Limb;
use crate::synth::{ReachRecord, ReachStyle};
use crate::trainer::PairDataset;

/// Encoder latent means (or the hidden-layer activations with
/// `hidden_layer`) of every window, one row per window.
pub fn encoder_activations(
    model: &LimbCvae,
    windows: &[Vec<f64>],
    hidden_layer: bool,
) -> Result<Array2<f64>> {
    let d = model.io_dim();
    let mut x = Array2::zeros((windows.len(), d));
    for (mut row, w) in x.outer_iter_mut().zip(windows) {
        if w.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "window has {} values, model expects {d}",
                w.len()
            )));
        }
        row.assign(&ndarray::ArrayView1::from(w.as_slice()));
    }
    Ok(model.encoder_features(x.view(), hidden_layer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// One orthonormal component per row, by decreasing variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    /// Total variance of the fitted data (trace of the covariance).
    pub total_variance: f64,
}

const JACOBI_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns), unsorted.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[[i, i]]).collect(), v)
}

/// Top-`k` principal components of the rows of `data`.
pub fn pca_fit(data: ArrayView2<f64>, k: usize) -> Result<PcaModel> {
    let (n, dim) = data.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two rows".into()));
    }
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {dim} components"
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("PCA input is not finite".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance: f64 = cov.diag().sum();
    if total_variance <= 0.0 {
        return Err(Error::DegenerateData);
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut components = Array2::zeros((k, dim));
    let mut explained_variance = Vec::with_capacity(k);
    for (r, &i) in order.iter().take(k).enumerate() {
        let mut col = vectors.column(i).to_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        components.row_mut(r).assign(&col);
        explained_variance.push(values[i].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// `(x - mean) * components^T`.
pub fn project(pca: &PcaModel, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    if data.ncols() != pca.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} columns, model {}",
            data.ncols(),
            pca.mean.len()
        )));
    }
    Ok((&data - &pca.mean).dot(&pca.components.t()))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over the points of both groups, in [-1, 1].
pub fn separation_score(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    for g in [&a, &b] {
        if g.nrows() < 2 {
            return Err(Error::GroupTooSmall(g.nrows()));
        }
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch("groups differ in dimension".into()));
    }
    let rows =
        |m: &ArrayView2<f64>| -> Vec<Vec<f64>> { m.outer_iter().map(|r| r.to_vec()).collect() };
    let (ga, gb) = (rows(&a), rows(&b));
    let mut total = 0.0;
    for (own, other) in [(&ga, &gb), (&gb, &ga)] {
        for (i, p) in own.iter().enumerate() {
            let intra = own
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| distance(p, q))
                .sum::<f64>()
                / (own.len() - 1) as f64;
            let inter = other.iter().map(|q| distance(p, q)).sum::<f64>() / other.len() as f64;
            let m = intra.max(inter);
            total += if m > 0.0 { (inter - intra) / m } else { 0.0 };
        }
    }
    Ok(total / (ga.len() + gb.len()) as f64)
}

/// Group of an embedded window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbeddingLabel {
    Random,
    Legible(usize),
    Predictable(usize),
}

impl EmbeddingLabel {
    /// `random`, `legible-<n>` or `predictable-<n>` with a 1-based target.
    pub fn name(self) -> String {
        match self {
            EmbeddingLabel::Random => "random".into(),
            EmbeddingLabel::Legible(t) => format!("legible-{}", t + 1),
            EmbeddingLabel::Predictable(t) => format!("predictable-{}", t + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub coords: Array2<f64>,
    pub labels: Vec<EmbeddingLabel>,
}

impl LabeledEmbedding {
    /// Rows carrying `label`.
    pub fn group(&self, label: EmbeddingLabel) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.labels.len())
            .filter(|&i| self.labels[i] == label)
            .collect();
        self.coords.select(Axis(0), &idx)
    }

    /// CSV with columns `pc1,pc2,label`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pc1,pc2,label\n");
        for (row, label) in self.coords.outer_iter().zip(&self.labels) {
            writeln!(out, "{:.10e},{:.10e},{}", row[0], row[1], label.name())
                .expect("writing to a string");
        }
        out
    }
}

/// Right-arm past windows of a labeled reach, one per observed frame from
/// the first frame of movement to its end.
pub fn reach_windows(r: &ReachRecord, delta_t: usize) -> Result<Vec<Vec<f64>>> {
    (r.onset + 1..=r.onset + r.duration)
        .map(|end| {
            Ok(PastWindow::from_recording(&r.recording, end, delta_t)?.limb_input(Limb::Right))
        })
        .collect()
}

/// Two-component PCA embedding of `samples` random right-arm windows drawn
/// from `pool` together with every window of the labeled reaches.
pub fn embed_reaches(
    models: &ModelSet,
    pool: &PairDataset,
    labeled: &[ReachRecord],
    samples: usize,
    seed: u64,
    hidden_layer: bool,
) -> Result<LabeledEmbedding> {
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    if samples > 0 {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("no windows to sample from".into()));
        }
        let mut rng = Rng::new(derive_seed(seed, "latent/random"));
        for _ in 0..samples {
            windows.push(pool.pair(rng.below(pool.len())).0);
            labels.push(EmbeddingLabel::Random);
        }
    }
    for r in labeled {
        let label = match r.style {
            ReachStyle::Legible => EmbeddingLabel::Legible(r.target),
            ReachStyle::Predictable => EmbeddingLabel::Predictable(r.target),
        };
        for w in reach_windows(r, models.delta_t())? {
            windows.push(w);
            labels.push(label);
        }
    }
    let acts = encoder_activations(models.get(Limb::Right), &windows, hidden_layer)?;
    let pca = pca_fit(acts.view(), 2)?;
    Ok(LabeledEmbedding {
        coords: project(&pca, acts.view())?,
        labels,
    })
}

/// Separation of legible from predictable windows per target, for every
/// target where both groups have at least two windows.
pub fn style_separation(
    embedding: &LabeledEmbedding,
    n_targets: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for t in 0..n_targets {
        let a = embedding.group(EmbeddingLabel::Legible(t));
        let b = embedding.group(EmbeddingLabel::Predictable(t));
        if a.nrows() >= 2 && b.nrows() >= 2 {
            out.push((t, separation_score(a.view(), b.view())?));
        }
    }
    Ok(out)
}

/// Gnuplot script drawing the embedding CSV, one colour per label.
pub fn gnuplot_script(csv_name: &str, labels: &[EmbeddingLabel]) -> String {
    let mut s = format!(
        "set datafile separator ','\nset xlabel 'pc1'\nset ylabel 'pc2'\nset term pngcairo size 900,900\nset output 'embedding.png'\nfile = '{csv_name}'\n"
    );
    let plots: Vec<String> = labels
        .iter()
        .map(|l| {
            let n = l.name();
            format!("file using 1:(strcol(3) eq '{n}' ? $2 : 1/0) with points title '{n}'")
        })
        .collect();
    writeln!(s, "plot {}", plots.join(", \\\n     ")).expect("writing to a string");
    s
}
