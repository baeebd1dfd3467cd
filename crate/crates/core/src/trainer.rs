//! Training loop, optimizer, schedules, checkpoints and diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::densities::{sensitivity_probe, sensitivity_spread, LatentDiagnostics, DEFAULT_PROBE_DELTA};
use crate::error::{Error, Result};
use crate::metrics::{self, BinaryMask};
use crate::model::{self, Bound, LossNoise, ModelConfig, NetworkParams};
use crate::rng;
use crate::synthdata::{self, Dataset, MaskSet, Split};

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_EVAL: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Random flips and integer shifts of up to two pixels.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 10,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0;
        if !positive || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "max_lr, clip_norm, batch_size and epochs must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup to `max_lr`, then cosine decay to zero at `total_steps`.
pub fn learning_rate(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return cfg.max_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * cfg.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` to global L2 norm at most `max_norm`; returns the norm
/// before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &NetworkParams, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// `grads` are aligned with `params.iter()`.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPUN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    val_loss: f64,
}

/// Model snapshot with `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    /// Values are exactly representable as `f32`.
    pub params: NetworkParams,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, train: TrainConfig, epoch: usize, val_loss: f64, params: &NetworkParams) -> Self {
        Self {
            model,
            train,
            epoch,
            val_loss,
            params: params.rounded_to_f32(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors: Vec<_> = self.params.iter().collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        let params = NetworkParams::from_tensors(&header.model, tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            val_loss: header.val_loss,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub sinkhorn: f64,
    /// Mean Gini index of prior variances over the validation split.
    pub gini: f64,
    pub eff_rank: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record([
                "epoch", "train_loss", "val_loss", "recon", "kl", "sinkhorn", "gini", "eff_rank", "lr",
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }
}

/// Horizontal/vertical flips and an integer shift, edges replicated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    pub dx: i32,
    pub dy: i32,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        flip_x: false,
        flip_y: false,
        dx: 0,
        dy: 0,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            dx: rng.random_range(-2..=2),
            dy: rng.random_range(-2..=2),
        }
    }

    fn source(&self, i: usize, n: usize, flip: bool, shift: i32) -> usize {
        let j = (i as i64 - shift as i64).clamp(0, n as i64 - 1) as usize;
        if flip {
            n - 1 - j
        } else {
            j
        }
    }

    pub fn apply<T: Copy>(&self, h: usize, w: usize, data: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = self.source(y, h, self.flip_y, self.dy);
            for x in 0..w {
                out.push(data[sy * w + self.source(x, w, self.flip_x, self.dx)]);
            }
        }
        out
    }
}

struct Example {
    image: Vec<f64>,
    mask: BinaryMask,
    noise: LossNoise,
}

fn draw_example(sample: &MaskSet, cfg: &ModelConfig, augment: bool, rng: &mut ChaCha8Rng) -> Result<Example> {
    let k = rng.random_range(0..sample.masks.len());
    let aug = if augment {
        Augmentation::random(rng)
    } else {
        Augmentation::IDENTITY
    };
    let s = cfg.image_size;
    let image = aug.apply(s, s, &sample.image_f64());
    let mask = BinaryMask::new(s, s, aug.apply(s, s, sample.masks[k].bits()))?;
    Ok(Example {
        image,
        mask,
        noise: LossNoise::draw(cfg, rng),
    })
}

struct StepOutput {
    loss: f64,
    recon: f64,
    kl: f64,
    sinkhorn: f64,
    grads: Vec<Vec<f64>>,
}

fn example_gradient(params: &NetworkParams, cfg: &ModelConfig, ex: &Example) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, true)?;
    let terms = model::loss(&mut g, &p, cfg, &ex.image, &ex.mask, &ex.noise)?;
    let grads = g.backward(terms.total)?;
    let grads = grads
        .named()
        .map(|(_, t)| t.map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();
    Ok(StepOutput {
        loss: g.value(terms.total).item()?,
        recon: terms.recon,
        kl: terms.kl,
        sinkhorn: terms.sinkhorn,
        grads,
    })
}

struct ValSummary {
    loss: f64,
    gini: f64,
    eff_rank: f64,
}

fn validate(params: &NetworkParams, cfg: &ModelConfig, samples: &[&MaskSet], seed: u64) -> Result<ValSummary> {
    let mut rng = rng::stream(seed, STREAM_VAL);
    let examples: Vec<LossNoise> = samples.iter().map(|_| LossNoise::draw(cfg, &mut rng)).collect();
    let per: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .zip(&examples)
        .enumerate()
        .map(|(i, (s, noise))| {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, params, false)?;
            let mask = &s.masks[i % s.masks.len()];
            let terms = model::loss(&mut g, &p, cfg, &s.image_f64(), mask, noise)?;
            let diag = LatentDiagnostics::of(&terms.prior.value(&g)?)?;
            Ok((g.value(terms.total).item()?, diag.gini, diag.effective_rank))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok(ValSummary {
        loss: per.iter().map(|v| v.0).sum::<f64>() / n,
        gini: per.iter().map(|v| v.1).sum::<f64>() / n,
        eff_rank: per.iter().map(|v| v.2).sum::<f64>() / n,
    })
}

pub struct TrainOutput {
    /// Snapshot with the lowest validation loss.
    pub best: Checkpoint,
    pub log: RunLog,
    pub final_params: NetworkParams,
}

/// Trains on the train split and selects by validation loss. When
/// `checkpoint_path` is given the best checkpoint is written there on every
/// improvement.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutput> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.spec.image_size != model_cfg.image_size {
        return Err(Error::invalid(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            dataset.spec.image_size, model_cfg.image_size
        )));
    }
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("dataset needs non-empty train and val splits".into()));
    }

    let mut params = NetworkParams::init(model_cfg, train_cfg.seed);
    let mut adam = Adam::new(&params, train_cfg.weight_decay);
    let mut rng = rng::stream(train_cfg.seed, STREAM_TRAIN);
    let batches = train_set.len().div_ceil(train_cfg.batch_size);
    let total_steps = batches * train_cfg.epochs;
    let mut step = 0;
    let mut log = RunLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_recon, mut sum_kl, mut sum_sink) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (batch, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let abort = |reason: String| Error::TrainingAborted {
                epoch,
                batch: batch + 1,
                reason,
            };
            let examples = chunk
                .iter()
                .map(|&i| draw_example(train_set[i], model_cfg, train_cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let outputs: Vec<StepOutput> = examples
                .par_iter()
                .map(|ex| example_gradient(&params, model_cfg, ex))
                .collect::<Result<_>>()
                .map_err(|e| abort(e.to_string()))?;

            let scale = 1.0 / outputs.len() as f64;
            let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            for out in &outputs {
                if !out.loss.is_finite() {
                    return Err(abort(format!("non-finite loss {}", out.loss)));
                }
                sum_loss += out.loss;
                sum_recon += out.recon;
                sum_kl += out.kl;
                sum_sink += out.sinkhorn;
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += scale * v;
                    }
                }
            }
            clip_global_norm(&mut grads, train_cfg.clip_norm);
            lr = learning_rate(step, total_steps, train_cfg);
            adam.step(&mut params, &grads, lr);
            step += 1;
            if !params.is_finite() {
                return Err(abort("non-finite parameters after update".into()));
            }
        }

        let val = validate(&params, model_cfg, &val_set, train_cfg.seed)?;
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: sum_loss / n,
            val_loss: val.loss,
            recon: sum_recon / n,
            kl: sum_kl / n,
            sinkhorn: sum_sink / n,
            gini: val.gini,
            eff_rank: val.eff_rank,
            lr,
        };
        info!(
            "epoch {epoch}: train {:.5} val {:.5} recon {:.5} kl {:.5} sinkhorn {:.5} gini {:.4}",
            record.train_loss, record.val_loss, record.recon, record.kl, record.sinkhorn, record.gini
        );
        if best.as_ref().is_none_or(|b| val.loss < b.val_loss) {
            let ckpt = Checkpoint::new(model_cfg.clone(), train_cfg.clone(), epoch, val.loss, &params);
            if let Some(path) = checkpoint_path {
                ckpt.save(path)?;
            }
            best = Some(ckpt);
        }
        log.push(record);
    }

    Ok(TrainOutput {
        best: best.expect("at least one epoch"),
        log,
        final_params: params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub ewd: f64,
    pub ged: f64,
    pub gini: f64,
    pub eff_rank: f64,
    /// `max / min` of the decoder sensitivity probe; `None` when unbounded.
    pub zeta_spread: Option<f64>,
    /// Fraction of predictions closest to each mode template.
    pub mode_frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ewd_mean: f64,
    pub ewd_std: f64,
    pub ged_mean: f64,
    pub ged_std: f64,
    pub gini_mean: f64,
    pub gini_std: f64,
    pub eff_rank_mean: f64,
    pub eff_rank_std: f64,
    pub zeta_spread_mean: Option<f64>,
    pub mode_frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageReport>,
}

fn diagnose_image(ckpt: &Checkpoint, dataset: &Dataset, s: &MaskSet, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageReport> {
    let cfg = &ckpt.model;
    let image = s.image_f64();
    let prior = model::prior_density(&ckpt.params, cfg, &image)?;
    let diag = LatentDiagnostics::of(&prior)?;
    let preds = model::predict_with(&ckpt.params, cfg, &image, n, rng)?;
    let report = metrics::evaluate(&preds, &s.masks)?;

    let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let z = prior.sample(&noise)?;
    let zeta = sensitivity_probe(|z| model::decode(&ckpt.params, cfg, &image, z), &z, DEFAULT_PROBE_DELTA)?;
    let spread = sensitivity_spread(&zeta);

    let mut counts = vec![0usize; dataset.spec.modes.len()];
    for p in &preds {
        counts[synthdata::classify(&dataset.spec, &s.blob, p)?] += 1;
    }
    Ok(ImageReport {
        id: s.id.clone(),
        ewd: report.ewd,
        ged: report.ged,
        gini: diag.gini,
        eff_rank: diag.effective_rank,
        zeta_spread: spread.is_finite().then_some(spread),
        mode_frequencies: counts.iter().map(|c| *c as f64 / n as f64).collect(),
    })
}

/// Test-split metrics and latent diagnostics for `ckpt`, `n` predictions per
/// image.
pub fn diagnose(ckpt: &Checkpoint, dataset: &Dataset, n: usize, seed: u64) -> Result<Diagnosis> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Dataset("dataset has no test split".into()));
    }
    let k = dataset.spec.annotators;
    if n == 0 || n % k != 0 {
        return Err(Error::invalid(format!(
            "number of samples {n} must be a positive multiple of the annotator count {k}"
        )));
    }
    let per_image = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(seed, STREAM_EVAL + i as u64);
            diagnose_image(ckpt, dataset, s, n, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;

    let col = |f: fn(&ImageReport) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    let (ewd_mean, ewd_std) = metrics::mean_std(&col(|r| r.ewd));
    let (ged_mean, ged_std) = metrics::mean_std(&col(|r| r.ged));
    let (gini_mean, gini_std) = metrics::mean_std(&col(|r| r.gini));
    let (eff_rank_mean, eff_rank_std) = metrics::mean_std(&col(|r| r.eff_rank));
    let spreads: Option<Vec<f64>> = per_image.iter().map(|r| r.zeta_spread).collect();
    let modes = dataset.spec.modes.len();
    let mode_frequencies = (0..modes)
        .map(|m| per_image.iter().map(|r| r.mode_frequencies[m]).sum::<f64>() / per_image.len() as f64)
        .collect();
    Ok(Diagnosis {
        aggregate: Aggregate {
            ewd_mean,
            ewd_std,
            ged_mean,
            ged_std,
            gini_mean,
            gini_std,
            eff_rank_mean,
            eff_rank_std,
            zeta_spread_mean: spreads.map(|s| metrics::mean_std(&s).0),
            mode_frequencies,
        },
        per_image,
    })
}
