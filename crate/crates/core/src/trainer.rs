//! Mini-batch ELBO maximization for the limb models, plus checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::{ElboOptions, LimbCvae, ModelSet, Standardizer, Topology};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{Activation, AdamConfig, AdamState, DenseLayer, GaussianHead, Rng};
use crate::skeleton::{self, FrameWindow, Limb, NormalizationContext, Point3, Recording};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Clamped to the dataset size.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative running-loss improvement below which an evaluation counts
    /// as stalled.
    pub rel_tol: f64,
    /// Consecutive stalled evaluations that end training.
    pub patience: usize,
    /// Batches between loss evaluations.
    pub eval_every: usize,
    pub seed: u64,
    /// Fraction of the scheduled steps over which the KL weight ramps
    /// linearly from 0 to 1; 0 disables the ramp.
    pub kl_warmup: f64,
    pub topology: Topology,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 1000,
            max_epochs: 100,
            rel_tol: 1e-4,
            patience: 5,
            eval_every: 10,
            seed: 0,
            kl_warmup: 0.0,
            topology: Topology::default(),
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "batch size, patience and eval interval must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return Err(Error::InvalidArgument(
                "kl warm-up fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Window pairs stored as per-recording feature sequences; each pair is a
/// pair of contiguous slices, so no window is copied until batching.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub delta_t: usize,
    pub frame_dim: usize,
    sequences: Vec<Vec<f64>>,
    index: Vec<(usize, usize)>,
    /// Express both windows relative to the last frame of the past window.
    relative: bool,
}

/// Root positions of a window relative to `anchor`, flattened.
pub fn root_relative(roots: &[Point3], anchor: Point3) -> Vec<f64> {
    roots
        .iter()
        .flat_map(|p| [p[0] - anchor[0], p[1] - anchor[1], p[2] - anchor[2]])
        .collect()
}

impl PairDataset {
    /// Pairs for `limb` from normalized recordings and their contexts. The
    /// root limb uses the sensor-frame root trajectory from the contexts.
    pub fn from_normalized(
        recordings: &[Recording],
        contexts: &[NormalizationContext],
        limb: Limb,
        delta_t: usize,
    ) -> Result<Self> {
        let mut sequences = Vec::with_capacity(recordings.len());
        let mut index = Vec::new();
        for (r, (rec, ctx)) in recordings.iter().zip(contexts).enumerate() {
            if ctx.len() != rec.len() {
                return Err(Error::ContextMismatch(format!("recording {}", rec.id)));
            }
            let starts = skeleton::pair_past_starts(rec.len(), delta_t)?;
            index.extend(starts.map(|s| (r, s)));
            let seq: Vec<f64> = match limb {
                Limb::Root => ctx.root_positions.iter().flatten().copied().collect(),
                _ => rec
                    .frames
                    .iter()
                    .flat_map(|f| limb.indices().iter().flat_map(|&j| f.joints[j]))
                    .collect(),
            };
            sequences.push(seq);
        }
        Ok(Self {
            delta_t,
            frame_dim: limb.indices().len() * 3,
            sequences,
            index,
            relative: limb == Limb::Root,
        })
    }

    /// Pairs given as explicit windows (any joint count).
    pub fn from_pairs(pairs: &[(FrameWindow, FrameWindow)], relative: bool) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training pairs".into()))?;
        let (delta_t, n_joints) = (first.0.delta_t(), first.0.n_joints);
        let mut sequences = Vec::with_capacity(pairs.len());
        for (p, f) in pairs {
            if p.delta_t() != delta_t
                || f.delta_t() != delta_t
                || p.n_joints != n_joints
                || f.n_joints != n_joints
            {
                return Err(Error::ShapeMismatch("pairs differ in shape".into()));
            }
            let mut seq = p.vectorize();
            seq.extend(f.vectorize());
            sequences.push(seq);
        }
        Ok(Self {
            delta_t,
            frame_dim: n_joints * 3,
            index: (0..pairs.len()).map(|i| (i, 0)).collect(),
            sequences,
            relative,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Window vector dimension.
    pub fn dim(&self) -> usize {
        self.delta_t * self.frame_dim
    }

    fn write_pair(&self, i: usize, past: &mut [f64], future: &mut [f64]) {
        let (r, s) = self.index[i];
        let d = self.dim();
        let seq = &self.sequences[r];
        let start = s * self.frame_dim;
        past.copy_from_slice(&seq[start..start + d]);
        future.copy_from_slice(&seq[start + d..start + 2 * d]);
        if self.relative {
            let anchor = past[d - self.frame_dim..].to_vec();
            for v in [past, future] {
                for (k, x) in v.iter_mut().enumerate() {
                    *x -= anchor[k % self.frame_dim];
                }
            }
        }
    }

    /// Past and future vectors of pair `i`.
    /// Per-dimension statistics of all past and future windows.
    pub fn standardizer(&self) -> Result<Standardizer> {
        Standardizer::fit(self.len(), self.dim(), |i| self.pair(i))
    }

    pub fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let (mut p, mut f) = (vec![0.0; d], vec![0.0; d]);
        self.write_pair(i, &mut p, &mut f);
        (p, f)
    }

    /// Batch matrices for the given pair indices, one row per pair.
    pub fn batch(&self, ids: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let mut past = Array2::zeros((ids.len(), d));
        let mut future = Array2::zeros((ids.len(), d));
        for (row, &i) in ids.iter().enumerate() {
            let p = past.row_mut(row).into_slice().expect("contiguous row");
            let f = future.row_mut(row).into_slice().expect("contiguous row");
            self.write_pair(i, p, f);
        }
        (past, future)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-pair negative ELBO over the batches since the last point.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedLimb {
    pub model: LimbCvae,
    pub history: Vec<LossPoint>,
    pub provenance: Provenance,
}

fn noise_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), rng.normals(rows * cols))
        .expect("draw count matches shape")
}

/// Mean negative ELBO over the whole dataset, with noise from a fixed
/// evaluation stream derived from `seed`.
pub fn dataset_loss(model: &LimbCvae, data: &PairDataset, seed: u64, exec: Execution) -> f64 {
    let mut rng = Rng::from_stream(seed, &format!("eval/{}", model.limb.name()));
    let latent = model.latent_dim();
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for block in ids.chunks(1024) {
        let (past, future) = data.batch(block);
        let eps_e = noise_matrix(&mut rng, block.len(), latent);
        let eps_t = noise_matrix(&mut rng, block.len(), latent);
        total += model.loss_chunked(
            past.view(),
            future.view(),
            eps_e.view(),
            eps_t.view(),
            ElboOptions::default(),
            exec,
        );
    }
    total / data.len() as f64
}

/// Trains a freshly initialized model for `limb` on `data`.
pub fn train_limb(data: &PairDataset, limb: Limb, config: &TrainConfig) -> Result<TrainedLimb> {
    let mut init_rng = Rng::from_stream(config.seed, &format!("init/{}", limb.name()));
    let mut model = LimbCvae::with_topology(
        limb,
        data.delta_t,
        data.dim(),
        config.topology,
        &mut init_rng,
    );
    model.standardizer = data.standardizer()?;
    train_model(model, data, config)
}

/// Continues training `model` on `data`.
pub fn train_model(
    mut model: LimbCvae,
    data: &PairDataset,
    config: &TrainConfig,
) -> Result<TrainedLimb> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if data.dim() != model.io_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset windows have {} dims, model expects {}",
            data.dim(),
            model.io_dim()
        )));
    }
    let name = model.limb.name();
    let mut shuffle_rng = Rng::from_stream(config.seed, &format!("shuffle/{name}"));
    let mut noise_rng = Rng::from_stream(config.seed, &format!("noise/{name}"));
    let mut adam = AdamState::new(
        model.param_count(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let batch_size = config.batch_size.min(data.len());
    let batches_per_epoch = data.len().div_ceil(batch_size);
    let warmup_steps =
        (config.kl_warmup * (config.max_epochs * batches_per_epoch) as f64).round() as usize;
    let latent = model.latent_dim();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let (mut step, mut epochs, mut stalled, mut converged) = (0usize, 0usize, 0usize, false);
    let (mut running, mut running_n) = (0.0, 0usize);
    let mut last_good = model.clone();

    'epochs: for epoch in 0..config.max_epochs {
        epochs = epoch + 1;
        shuffle_rng.shuffle(&mut order);
        for ids in order.chunks(batch_size) {
            let (past, future) = data.batch(ids);
            let eps_e = noise_matrix(&mut noise_rng, ids.len(), latent);
            let eps_t = noise_matrix(&mut noise_rng, ids.len(), latent);
            let kl_weight = if warmup_steps > 0 {
                ((step + 1) as f64 / warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let (loss, mut grad) = model.loss_grad_chunked(
                past.view(),
                future.view(),
                eps_e.view(),
                eps_t.view(),
                ElboOptions { kl_weight },
                config.exec,
            );
            let mean_loss = loss / ids.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good),
                });
            }
            grad.scale(1.0 / ids.len() as f64);
            let grads = grad.slices();
            let mut params = model.param_slices_mut();
            if adam.step_tensors(&mut params, &grads).is_err() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good),
                });
            }
            step += 1;
            running += mean_loss;
            running_n += 1;

            if step % config.eval_every == 0 {
                let current = running / running_n as f64;
                (running, running_n) = (0.0, 0);
                if let Some(prev) = history.last().map(|p: &LossPoint| p.loss) {
                    let improvement = (prev - current) / prev.abs().max(f64::MIN_POSITIVE);
                    if improvement < config.rel_tol {
                        stalled += 1;
                    } else {
                        stalled = 0;
                    }
                }
                history.push(LossPoint {
                    step,
                    epoch,
                    loss: current,
                });
                last_good = model.clone();
                if stalled >= config.patience {
                    converged = true;
                    break 'epochs;
                }
            }
        }
    }

    let final_loss = dataset_loss(&model, data, config.seed, config.exec);
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step,
            last_good: Box::new(last_good),
        });
    }
    Ok(TrainedLimb {
        model,
        history,
        provenance: Provenance {
            seed: config.seed,
            steps: step,
            epochs,
            final_loss,
            converged,
        },
    })
}

#[derive(Debug, Clone)]
pub struct TrainedSet {
    pub models: ModelSet,
    pub reports: Vec<(Limb, Vec<LossPoint>, Provenance)>,
}

/// Normalizes the recordings and trains the root, torso, right and left
/// models, possibly in parallel.
pub fn train_all(
    recordings: &[Recording],
    delta_t: usize,
    config: &TrainConfig,
) -> Result<TrainedSet> {
    train_all_from(recordings, delta_t, None, config)
}

/// [`train_all`], continuing from `initial` models when given.
pub fn train_all_from(
    recordings: &[Recording],
    delta_t: usize,
    initial: Option<&ModelSet>,
    config: &TrainConfig,
) -> Result<TrainedSet> {
    if let Some(m) = initial {
        if m.delta_t() != delta_t {
            return Err(Error::ShapeMismatch(format!(
                "initial models use delta_t {}, requested {delta_t}",
                m.delta_t()
            )));
        }
    }
    let (normalized, contexts): (Vec<_>, Vec<_>) = recordings
        .iter()
        .map(skeleton::normalize)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let results = exec::map_slice(config.exec, &Limb::ALL, |&limb| {
        let data = PairDataset::from_normalized(&normalized, &contexts, limb, delta_t)?;
        match initial {
            Some(m) => train_model(m.get(limb).clone(), &data, config),
            None => train_limb(&data, limb, config),
        }
    });
    let mut trained = Vec::with_capacity(4);
    for r in results {
        trained.push(r?);
    }
    let mut reports = Vec::with_capacity(4);
    let mut models = Vec::with_capacity(4);
    for (limb, t) in Limb::ALL.into_iter().zip(trained) {
        reports.push((limb, t.history, t.provenance));
        models.push(t.model);
    }
    let mut it = models.into_iter();
    let models = ModelSet::new(
        it.next().expect("root"),
        it.next().expect("torso"),
        it.next().expect("right"),
        it.next().expect("left"),
    )?;
    Ok(TrainedSet { models, reports })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    #[serde(rename = "in")]
    in_dim: usize,
    out: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    limb: Limb,
    delta_t: usize,
    io_dim: usize,
    var_floor: f64,
    standardizer: Standardizer,
    layers: Vec<LayerRecord>,
    provenance: Option<Provenance>,
}

const LAYER_NAMES: [&str; 9] = [
    "encoder",
    "encoder_mean",
    "encoder_raw_var",
    "transitioner",
    "transitioner_mean",
    "transitioner_raw_var",
    "decoder",
    "decoder_mean",
    "decoder_raw_var",
];

fn layer_record(name: &str, layer: &DenseLayer) -> LayerRecord {
    LayerRecord {
        name: name.to_string(),
        in_dim: layer.in_dim(),
        out: layer.out_dim(),
        activation: layer.activation,
        weights: layer.weights.iter().copied().collect(),
        biases: layer.biases.to_vec(),
    }
}

fn layer_from_record(rec: &LayerRecord, expected_name: &str) -> Result<DenseLayer> {
    if rec.name != expected_name {
        return Err(Error::ShapeMismatch(format!(
            "expected layer {expected_name}, found {}",
            rec.name
        )));
    }
    if rec.weights.len() != rec.in_dim * rec.out || rec.biases.len() != rec.out {
        return Err(Error::ShapeMismatch(format!(
            "layer {} declares {}x{} but stores {} weights and {} biases",
            rec.name,
            rec.out,
            rec.in_dim,
            rec.weights.len(),
            rec.biases.len()
        )));
    }
    let weights = Array2::from_shape_vec((rec.out, rec.in_dim), rec.weights.clone())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    DenseLayer::new(weights, rec.biases.clone().into(), rec.activation)
}

pub fn checkpoint_json(model: &LimbCvae, provenance: Option<&Provenance>) -> Result<String> {
    let layers = [
        &model.encoder,
        &model.encoder_head.mean,
        &model.encoder_head.raw_var,
        &model.transitioner,
        &model.transitioner_head.mean,
        &model.transitioner_head.raw_var,
        &model.decoder,
        &model.decoder_head.mean,
        &model.decoder_head.raw_var,
    ];
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        limb: model.limb,
        delta_t: model.delta_t,
        io_dim: model.io_dim(),
        var_floor: model.decoder_head.var_floor,
        standardizer: model.standardizer.clone(),
        layers: LAYER_NAMES
            .iter()
            .zip(layers)
            .map(|(n, l)| layer_record(n, l))
            .collect(),
        provenance: provenance.cloned(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<(LimbCvae, Option<Provenance>)> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse("missing format_version".into()))? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    if file.layers.len() != LAYER_NAMES.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} layers, expected {}",
            file.layers.len(),
            LAYER_NAMES.len()
        )));
    }
    let mut layers = file
        .layers
        .iter()
        .zip(LAYER_NAMES)
        .map(|(r, n)| layer_from_record(r, n))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || layers.next().expect("nine layers checked above");
    let floor = file.var_floor;
    let head = |mean: DenseLayer, raw_var: DenseLayer| GaussianHead {
        mean,
        raw_var,
        var_floor: floor,
    };
    let encoder = next();
    let encoder_head = head(next(), next());
    let transitioner = next();
    let transitioner_head = head(next(), next());
    let decoder = next();
    let decoder_head = head(next(), next());
    let model = LimbCvae {
        limb: file.limb,
        delta_t: file.delta_t,
        standardizer: file.standardizer,
        encoder,
        encoder_head,
        transitioner,
        transitioner_head,
        decoder,
        decoder_head,
    };
    model.validate()?;
    if model.io_dim() != file.io_dim {
        return Err(Error::ShapeMismatch(format!(
            "declared io dim {} but layers imply {}",
            file.io_dim,
            model.io_dim()
        )));
    }
    Ok((model, file.provenance))
}

pub fn save_checkpoint(
    model: &LimbCvae,
    provenance: Option<&Provenance>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, checkpoint_json(model, provenance)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LimbCvae> {
    Ok(checkpoint_from_json(&std::fs::read_to_string(path)?)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub delta_t: usize,
    pub limbs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes four limb checkpoints and a manifest into `dir`.
pub fn save_model_set(
    models: &ModelSet,
    provenance: &[(Limb, Provenance)],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut limbs = BTreeMap::new();
    for limb in Limb::ALL {
        let file = format!("{}.json", limb.name());
        let prov = provenance.iter().find(|(l, _)| *l == limb).map(|(_, p)| p);
        save_checkpoint(models.get(limb), prov, &dir.join(&file))?;
        limbs.insert(limb.name().to_string(), file);
    }
    let manifest = ModelManifest {
        format_version: CHECKPOINT_VERSION,
        delta_t: models.delta_t(),
        limbs,
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_model_set(dir: &Path) -> Result<ModelSet> {
    let manifest: ModelManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let load = |limb: Limb| -> Result<LimbCvae> {
        let file = manifest
            .limbs
            .get(limb.name())
            .ok_or_else(|| Error::Parse(format!("manifest lacks {}", limb.name())))?;
        let model = load_checkpoint(&dir.join(file))?;
        if model.delta_t != manifest.delta_t {
            return Err(Error::ShapeMismatch(format!(
                "{} checkpoint has delta_t {}, manifest {}",
                limb.name(),
                model.delta_t,
                manifest.delta_t
            )));
        }
        Ok(model)
    };
    ModelSet::new(
        load(Limb::Root)?,
        load(Limb::Torso)?,
        load(Limb::Right)?,
        load(Limb::Left)?,
    )
}

/// Loss history as CSV: `eval,step,epoch,loss`.
pub fn history_csv(history: &[LossPoint]) -> String {
    let mut out = String::from("eval,step,epoch,loss\n");
    for (i, p) in history.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i, p.step, p.epoch, p.loss));
    }
    out
}
