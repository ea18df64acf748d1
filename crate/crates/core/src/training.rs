//! Losses, the Adam optimizer, the episodic training loop, evaluation, metrics
//! logs and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;
use crate::autodiff::Precision;
use crate::episodes::{split_folds, EpisodeSource, Phase, FOLD_COUNT};
use crate::error::{LdagError, Result};
use crate::exec::try_map_ordered;
use crate::fusion::Prediction;
use crate::image::Mask;
use crate::metrics::{aggregate, EpisodeRecord, EvalReport};
use crate::mae::SoftmaxScope;
use crate::model::{FrozenDecoder, FusionMode, ModelParameters, ModelShape};
use crate::pipeline::{episode_step, predict_episode, prepare, ForwardConfig, LossBreakdown, PreparedEpisode, Toggles};
use crate::providers::{load_feature_file, save_feature_file, FeatureFile, Metadata, EMBED_DIM};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Source;

pub use crate::pipeline::total_loss;

/// Mean pixel BCE of a prediction against a mask, from logits.
pub fn bce_loss(pred: &Prediction, gt: &Mask) -> Result<f64> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(LdagError::Dimension(format!(
            "prediction {}x{} vs mask {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let total: f64 = pred
        .logits
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&l, &y)| {
            let x = f64::from(l);
            x.max(0.0) + (-x.abs()).exp().ln_1p() - f64::from(y) * x
        })
        .sum();
    Ok(total / gt.data().len() as f64)
}

/// Bias-corrected Adam over every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParameters, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.tensors().len() {
            return Err(LdagError::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.tensors().len()
            )));
        }
        for ((name, t), g) in params.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(LdagError::Dimension(format!(
                    "gradient for {name} has {} values, tensor has {}",
                    g.len(),
                    t.numel()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(LdagError::NonFiniteGradient(name.to_owned()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p = (f64::from(*p) - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub n: usize,
    pub tau: f64,
    pub tau1: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training episodes sampled once and revisited every epoch.
    pub episodes: usize,
    /// Test episodes for evaluation.
    pub eval_episodes: usize,
    pub seed: u64,
    pub shots: usize,
    pub fold: usize,
    pub toggles: Toggles,
    pub scope: SoftmaxScope,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n: 5,
            tau: 1.0,
            tau1: 1.0,
            lr: 1e-4,
            epochs: 8,
            batch_size: 8,
            episodes: 200,
            eval_episodes: 100,
            seed: 0,
            shots: 1,
            fold: 0,
            toggles: Toggles::default(),
            scope: SoftmaxScope::Pairwise,
            fusion: FusionMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdagError::Contract(m));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.tau > 0.0) || !(self.tau1 > 0.0) {
            return bad("temperatures must be > 0".into());
        }
        if self.shots == 0 || self.batch_size == 0 {
            return bad("shots and batch size must be >= 1".into());
        }
        if self.fold >= FOLD_COUNT {
            return bad(format!("fold must be below {FOLD_COUNT}, got {}", self.fold));
        }
        Ok(())
    }

    pub fn forward(&self) -> ForwardConfig {
        ForwardConfig {
            n: self.n,
            alpha: self.alpha,
            tau: self.tau,
            tau1: self.tau1,
            scope: self.scope,
            fusion: self.fusion,
            toggles: self.toggles,
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_pre: f64,
    pub loss_inf: f64,
    pub loss_total: f64,
    /// mIoU of the predictions made during the epoch, before each update.
    pub train_miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: Vec<EpochMetrics>,
    /// Per-step mean total loss.
    pub step_losses: Vec<f64>,
    /// Episodes dropped because a support mask vanished at feature resolution.
    pub skipped: usize,
}

/// Episodes prepared for the model, with the count of degenerate ones skipped.
pub struct PreparedSet {
    pub episodes: Vec<PreparedEpisode>,
    pub skipped: usize,
}

/// Sample, encode and prepare episodes of one phase.
pub fn prepare_set(
    source: &dyn EpisodeSource,
    cfg: &TrainConfig,
    phase: Phase,
    count: usize,
    shots: usize,
) -> Result<PreparedSet> {
    let split = split_folds(source.catalog(), FOLD_COUNT, cfg.fold)?;
    let seed = derive_seed(cfg.seed, phase as u64 + 1);
    let encoded = source.episodes(&split, phase, count, shots, seed)?;
    let mut attrs: BTreeMap<&str, AttributeSet> = BTreeMap::new();
    for e in &encoded {
        if !attrs.contains_key(e.class_name.as_str()) {
            attrs.insert(&e.class_name, source.attribute_set(&e.class_name, cfg.n)?);
        }
    }
    let forward = cfg.forward();
    let results = try_map_ordered(&encoded, |e| match prepare(e, &attrs[e.class_name.as_str()], &forward) {
        Ok(p) => Ok(Some(p)),
        Err(LdagError::DegenerateEpisode(_)) => Ok(None),
        Err(err) => Err(err),
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    Ok(PreparedSet {
        episodes: results.into_iter().flatten().collect(),
        skipped,
    })
}

fn model_shape(episodes: &[PreparedEpisode], n: usize) -> Result<ModelShape> {
    let first = episodes
        .first()
        .ok_or_else(|| LdagError::Contract("no usable training episodes".into()))?;
    Ok(ModelShape {
        text_dim: first.attributes.first().map_or(EMBED_DIM, |t| t.numel()),
        feat_dim: first.feature_extent().0,
        n,
    })
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..len).rev() {
        let j = rng.range_inclusive(0, i as i64) as usize;
        idx.swap(i, j);
    }
    idx
}

fn record(ep: &PreparedEpisode, pred: &Prediction) -> Result<EpisodeRecord> {
    EpisodeRecord::score(&ep.episode_id, &ep.class_name, ep.fold, &pred.mask, &ep.query_mask)
}

/// Train from freshly initialized parameters on prepared episodes.
pub fn train_prepared(cfg: &TrainConfig, episodes: &[PreparedEpisode]) -> Result<TrainOutcome> {
    let params = ModelParameters::init(model_shape(episodes, cfg.n)?, cfg.seed)?;
    train_from(cfg, params, episodes)
}

/// Gradient-accumulated Adam over `episodes`; batch gradients are computed
/// in parallel and summed in episode order, so results do not depend on threads.
pub fn train_from(cfg: &TrainConfig, mut params: ModelParameters, episodes: &[PreparedEpisode]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(LdagError::Contract("no usable training episodes".into()));
    }
    let forward = cfg.forward();
    let decoder = FrozenDecoder::for_params(&params);
    let mut adam = Adam::new(&params, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = shuffled(episodes.len(), derive_seed(cfg.seed, 0xE90C ^ epoch as u64));
        let mut losses: Vec<LossBreakdown> = Vec::with_capacity(episodes.len());
        let mut records = Vec::with_capacity(episodes.len());
        for batch in order.chunks(cfg.batch_size) {
            let steps = try_map_ordered(batch, |&i| episode_step(&params, &decoder, &episodes[i], &forward, Precision::F32))?;
            let mut sum: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for (s, &i) in steps.iter().zip(batch) {
                for (acc, g) in sum.iter_mut().zip(&s.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                losses.push(s.loss);
                records.push(record(&episodes[i], &s.prediction)?);
            }
            let scale = 1.0 / batch.len() as f64;
            sum.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(&mut params, &sum)?;
            step_losses.push(steps.iter().map(|s| s.loss.total).sum::<f64>() * scale);
        }
        let k = losses.len() as f64;
        log.push(EpochMetrics {
            epoch,
            loss_pre: losses.iter().map(|l| l.pre).sum::<f64>() / k,
            loss_inf: losses.iter().map(|l| l.inf).sum::<f64>() / k,
            loss_total: losses.iter().map(|l| l.total).sum::<f64>() / k,
            train_miou: aggregate(&records, serde_json::Value::Null)?.miou,
        });
    }
    Ok(TrainOutcome {
        params,
        log,
        step_losses,
        skipped: 0,
    })
}

/// Sample the fold's training episodes from `source` and train on them.
pub fn train(cfg: &TrainConfig, source: &dyn EpisodeSource) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = prepare_set(source, cfg, Phase::Train, cfg.episodes, cfg.shots)?;
    let mut out = train_prepared(cfg, &set.episodes)?;
    out.skipped = set.skipped;
    Ok(out)
}

/// Per-episode records of k-shot predictions.
pub fn evaluate_prepared(params: &ModelParameters, episodes: &[PreparedEpisode], forward: &ForwardConfig) -> Result<Vec<EpisodeRecord>> {
    let decoder = FrozenDecoder::for_params(params);
    try_map_ordered(episodes, |ep| {
        let (pred, _) = predict_episode(params, &decoder, ep, forward)?;
        record(ep, &pred)
    })
}

/// Evaluate on the fold's test classes and build the report.
pub fn evaluate(params: &ModelParameters, cfg: &TrainConfig, source: &dyn EpisodeSource) -> Result<EvalReport> {
    cfg.validate()?;
    let set = prepare_set(source, cfg, Phase::Test, cfg.eval_episodes, cfg.shots)?;
    let records = evaluate_prepared(params, &set.episodes, &cfg.forward())?;
    aggregate(&records, cfg.echo())
}

/// JSON lines, one record per epoch.
pub fn write_metrics_log(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    for m in log {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| LdagError::io(path, e))?;
    f.write_all(&out).map_err(|e| LdagError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub shape: ModelShape,
    pub seed: u64,
    pub decoder_seed: u64,
    pub names: Vec<String>,
    pub checksum: String,
    pub decoder_checksum: String,
    pub config: serde_json::Value,
}

fn param_file(name: &str) -> String {
    format!("{name}.ldt")
}

/// A directory of LDAGTNSR parameter files plus `manifest.json`.
pub fn save_checkpoint(dir: &Path, params: &ModelParameters, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LdagError::io(dir, e))?;
    for (name, t) in params.iter() {
        let mut meta = Metadata::new("param", Source::Toy);
        meta.extra.insert("name".into(), serde_json::Value::String(name.to_owned()));
        save_feature_file(&FeatureFile::Raw(t.clone(), meta), dir.join(param_file(name)))?;
    }
    let manifest = CheckpointManifest {
        shape: params.shape(),
        seed: params.seed(),
        decoder_seed: params.decoder_seed(),
        names: params.names().to_vec(),
        checksum: params.checksum(),
        decoder_checksum: FrozenDecoder::for_params(params).checksum(),
        config,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| LdagError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParameters, CheckpointManifest)> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| LdagError::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    let named = manifest
        .names
        .iter()
        .map(|name| match load_feature_file(dir.join(param_file(name)))? {
            FeatureFile::Raw(t, _) => Ok((name.clone(), t)),
            other => Err(LdagError::Contract(format!("{name} is a {} file, not a parameter", other.kind()))),
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParameters::from_named(manifest.shape, manifest.seed, named)?;
    if params.checksum() != manifest.checksum {
        return Err(LdagError::Contract(format!(
            "checkpoint checksum mismatch in {}",
            dir.display()
        )));
    }
    Ok((params, manifest))
}
