//! Fitting a [`DeformModel`] to a set of frames.
//!
//! Each step encodes a batch, decodes one pose per frame, renders it softly
//! and back-propagates the batch mean of
//! `rec + λ1·arap + λ2·joints` into every network parameter. In
//! [`TrainMode::Wild`] the reconstruction term only looks at pixels the
//! character covers and an area term keeps the character from shrinking.

mod adam;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::energies::{arap_var, area_var, joints_var, masked_rec_var, rec_var, LossWeights, MeshTerms};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{prepare_input, sha256_hex, Bound, DeformModel, ModelConfig, ModelManifest};
use crate::puppet::{DeformState, Puppet};
use crate::render::{coverage_area, render_mask_var, render_rgb_var, RasterConfig};

pub use adam::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Frames show the whole canvas; the character is rendered over white.
    #[default]
    Standard,
    /// Frames are crops with arbitrary backgrounds.
    Wild,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// `[width, height]` of the frames and of the model input.
    pub resolution: [usize; 2],
    pub weights: LossWeights,
    pub mode: TrainMode,
    /// Layer widths. Its `width` and `height` are replaced by `resolution`.
    pub model: ModelConfig,
    /// Record a checkpoint hash (and write one, when a directory is given)
    /// every this many epochs; 0 means only after the last epoch.
    pub checkpoint_every: usize,
    /// Silhouette softness in NDC units; defaults to 1.5 pixel pitches.
    pub sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            resolution: [256, 256],
            weights: LossWeights::default(),
            mode: TrainMode::Standard,
            model: ModelConfig::default(),
            checkpoint_every: 0,
            sigma: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: TrainConfig =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.resolution[0],
            height: self.resolution[1],
            ..self.model.clone()
        }
    }

    pub fn raster(&self) -> RasterConfig {
        let mut r = RasterConfig::new(self.resolution[0], self.resolution[1]);
        if let Some(s) = self.sigma {
            r.sigma = s;
        }
        if self.mode == TrainMode::Standard {
            r.background = [1.0; 4];
        }
        r
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub arap: f64,
    pub joints: f64,
    pub area: f64,
    pub total: f64,
    pub learning_rate: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Times the divergence guard rolled back an epoch.
    pub rollbacks: usize,
    /// Mean reconstruction loss of the final model over the training frames.
    pub final_rec: f64,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints `epoch_NNNN.npup` (with manifests) go here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Epoch records are appended here as they complete.
    pub log_path: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<DeformModel>,
}

/// Per-frame reconstruction losses of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

struct Terms {
    rec: Var,
    arap: Var,
    joints: Var,
    area: Option<Var>,
}

/// Everything fixed across steps.
struct Setup<'a> {
    puppet: &'a Puppet,
    cfg: &'a TrainConfig,
    raster: RasterConfig,
    mesh: MeshTerms,
    rest_area: f64,
    targets: Vec<Image>,
}

impl<'a> Setup<'a> {
    fn new(frames: &[Image], puppet: &'a Puppet, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(Error::Invalid("no frames to train on".into()));
        }
        let [w, h] = cfg.resolution;
        for (i, f) in frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(Error::shape(
                    "train",
                    format!("frame {i} is {}x{}, resolution is {w}x{h}", f.width, f.height),
                ));
            }
        }
        let raster = cfg.raster();
        let rest_area = match cfg.mode {
            TrainMode::Wild => coverage_area(&DeformState::rest(puppet), puppet, &raster)?,
            TrainMode::Standard => 0.0,
        };
        Ok(Setup {
            puppet,
            cfg,
            mesh: MeshTerms::new(puppet)?,
            rest_area,
            raster,
            targets: frames.iter().map(prepare_input).collect(),
        })
    }

    fn terms(&self, g: &mut Graph, verts: Var, target: &Image) -> Result<Terms> {
        let rendered = render_rgb_var(g, verts, self.puppet, &self.raster)?;
        let (rec, area) = match self.cfg.mode {
            TrainMode::Standard => (rec_var(g, rendered, target)?, None),
            TrainMode::Wild => {
                let mask = render_mask_var(g, verts, self.puppet, &self.raster)?;
                let rec = masked_rec_var(g, rendered, mask, target)?;
                (rec, Some(area_var(g, verts, self.puppet, &self.raster, self.rest_area)?))
            }
        };
        Ok(Terms {
            rec,
            arap: arap_var(g, verts, &self.mesh)?,
            joints: joints_var(g, verts, &self.mesh)?,
            area,
        })
    }

    fn objective(&self, g: &mut Graph, t: &Terms) -> Result<Var> {
        let w = &self.cfg.weights;
        let a = g.scale(t.arap, w.lambda1)?;
        let j = g.scale(t.joints, w.lambda2)?;
        let mut out = g.add(t.rec, a)?;
        out = g.add(out, j)?;
        if let Some(area) = t.area {
            let s = g.scale(area, w.area_weight)?;
            out = g.add(out, s)?;
        }
        Ok(out)
    }

    /// Batch loss, its components summed over the batch, and (when
    /// `trainable`) the parameter gradients.
    fn batch(&self, model: &DeformModel, idx: &[usize], trainable: bool) -> Result<BatchOut> {
        let mut g = Graph::new();
        let p: Bound = model.bind(&mut g, trainable);
        let imgs: Vec<&Image> = idx.iter().map(|&i| &self.targets[i]).collect();
        let x = g.constant(model.input_tensor(&imgs)?);
        let z = model.encode_graph(&mut g, &p, x)?;
        let verts = model.decode_graph(&mut g, &p, z, &self.puppet.rest_vertices)?;
        let mut sums = [0.0; 4];
        let mut recs = Vec::with_capacity(idx.len());
        let mut total: Option<Var> = None;
        for (&i, &v) in idx.iter().zip(&verts) {
            let t = self.terms(&mut g, v, &self.targets[i])?;
            let rec = g.value(t.rec).item();
            recs.push(rec);
            sums[0] += rec;
            sums[1] += g.value(t.arap).item();
            sums[2] += g.value(t.joints).item();
            if let Some(a) = t.area {
                sums[3] += g.value(a).item();
            }
            let o = self.objective(&mut g, &t)?;
            total = Some(match total {
                None => o,
                Some(acc) => g.add(acc, o)?,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / idx.len() as f64)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        let grads = if trainable {
            g.backward(loss)?;
            p.vars
                .iter()
                .zip(&model.params)
                .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(BatchOut { value, sums, recs, grads })
    }
}

struct BatchOut {
    value: f64,
    sums: [f64; 4],
    recs: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn write_checkpoint(dir: &Path, epoch: usize, model: &DeformModel, cfg: &TrainConfig) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = ModelManifest::new(model, cfg.seed);
    manifest.training = Some(serde_json::to_value(cfg).expect("config serializes"));
    let path = dir.join(format!("epoch_{epoch:04}.npup"));
    Ok(model.save(&path, manifest)?.checkpoint_sha256)
}

fn checkpoint_hash(model: &DeformModel) -> Result<String> {
    Ok(sha256_hex(&model.to_checkpoint().to_bytes()?))
}

pub fn train(frames: &[Image], puppet: &Puppet, cfg: &TrainConfig) -> Result<(DeformModel, TrainLog)> {
    train_with(frames, puppet, cfg, &RunOptions::default())
}

/// Trains with Adam over shuffled mini-batches.
///
/// If an epoch ends with a mean reconstruction loss above ten times the
/// initial one, the parameters and optimizer state are restored from the
/// start of that epoch and the learning rate is halved; after three such
/// rollbacks training stops with [`Error::Diverged`]. A non-finite loss stops
/// training with [`Error::NonFinite`]; the last good checkpoint is written
/// first when a checkpoint directory is set.
pub fn train_with(
    frames: &[Image],
    puppet: &Puppet,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<(DeformModel, TrainLog)> {
    let setup = Setup::new(frames, puppet, cfg)?;
    let mut model = match &opts.init {
        Some(m) => {
            if m.config != cfg.model_config() {
                return Err(Error::Config("initial model widths differ from the training config".into()));
            }
            m.check_puppet(puppet)?;
            m.clone()
        }
        None => DeformModel::new(cfg.model_config(), puppet.vertex_count(), cfg.seed)?,
    };
    let mut log_file = match &opts.log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let initial_rec = evaluate_prepared(&setup, &model)?.mean;
    let mut opt = Adam::new(cfg.learning_rate, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let snapshot = (model.clone(), opt.clone(), rng.clone());
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            match setup.batch(&model, chunk, true) {
                Ok(out) => {
                    for k in 0..4 {
                        sums[k] += out.sums[k];
                    }
                    sums[4] += out.value * chunk.len() as f64;
                    opt.step(&mut model.params, &out.grads);
                    if !model.is_finite() {
                        failure = Some(Error::NonFinite(format!("parameters after epoch {epoch} step")));
                    }
                }
                Err(e) => failure = Some(e),
            }
            if failure.is_some() {
                break;
            }
        }
        if let Some(e) = failure {
            if e.is_numeric() {
                model = snapshot.0;
                if let Some(dir) = &opts.checkpoint_dir {
                    write_checkpoint(dir, epoch, &model, cfg)?;
                }
            }
            return Err(e);
        }
        let n = frames.len() as f64;
        let rec = sums[0] / n;
        if rec > 10.0 * initial_rec {
            if log.rollbacks == 3 {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} reconstruction loss {rec} exceeds 10x the initial {initial_rec} after 3 rollbacks"
                )));
            }
            log.rollbacks += 1;
            (model, opt, rng) = snapshot;
            opt.lr *= 0.5;
            continue;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        let checkpoint_sha256 = if last || due {
            Some(match &opts.checkpoint_dir {
                Some(dir) => write_checkpoint(dir, epoch + 1, &model, cfg)?,
                None => checkpoint_hash(&model)?,
            })
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            rec,
            arap: sums[1] / n,
            joints: sums[2] / n,
            area: sums[3] / n,
            total: sums[4] / n,
            learning_rate: opt.lr,
            seconds: start.elapsed().as_secs_f64(),
            checkpoint_sha256,
        };
        if let Some(f) = &mut log_file {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(opts.log_path.as_ref().unwrap(), e))?;
        }
        log.epochs.push(record);
        epoch += 1;
    }
    log.final_rec = evaluate_prepared(&setup, &model)?.mean;
    Ok((model, log))
}

fn evaluate_prepared(setup: &Setup, model: &DeformModel) -> Result<EvalReport> {
    let mut per_frame = Vec::with_capacity(setup.targets.len());
    let idx: Vec<usize> = (0..setup.targets.len()).collect();
    for chunk in idx.chunks(setup.cfg.batch_size) {
        per_frame.extend(setup.batch(model, chunk, false)?.recs);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(EvalReport { per_frame, mean })
}

/// Reconstruction loss of `render(predict(frame))` against each frame, using
/// the same soft render and loss as training.
pub fn evaluate(frames: &[Image], model: &DeformModel, puppet: &Puppet, cfg: &TrainConfig) -> Result<EvalReport> {
    model.check_puppet(puppet)?;
    let setup = Setup::new(frames, puppet, cfg)?;
    evaluate_prepared(&setup, model)
}

/// The reconstruction loss [`evaluate`] reports, for a given pose.
pub fn state_loss(state: &DeformState, frame: &Image, puppet: &Puppet, cfg: &TrainConfig) -> Result<f64> {
    state.check(puppet)?;
    let setup = Setup::new(std::slice::from_ref(frame), puppet, cfg)?;
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![state.vertices.len(), 2], state.flat())?);
    let t = setup.terms(&mut g, v, &setup.targets[0])?;
    Ok(g.value(t.rec).item())
}
