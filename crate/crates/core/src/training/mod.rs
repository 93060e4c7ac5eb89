//! Optimization of the shared parameters over a corpus.

mod adam;
mod checkpoint;
mod gradcheck;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use gradcheck::{
    check_flag_combinations, gradient_check, tiny_problem, GradCheckReport, REL_ERROR_FLOOR,
};

use crate::data::{resample_snippets, FeatureSequence, Video, VideoLabel};
use crate::error::{EcmError, Result};
use crate::model::{self, CasSource, EcmParams, ModelConfig, ModelShape, DEFAULT_K_RATIO};
use crate::objective::{self, LossBreakdown, LossWeights, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::seed;

/// Which streams contribute a classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Both,
    PreOnly,
    PostOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub streams: Streams,
    pub share_classifier: bool,
    pub use_c2c: bool,
    pub use_a2c: bool,
    pub class_agnostic_weights: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            streams: Streams::Both,
            share_classifier: true,
            use_c2c: true,
            use_a2c: true,
            class_agnostic_weights: false,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(EcmError::Config {
                field: format!("train.ablation.{field}"),
                message: message.into(),
            })
        };
        match self.streams {
            Streams::Both => Ok(()),
            _ if self.use_c2c => bad(
                "use_c2c",
                "c2c compares both streams; requires streams = both",
            ),
            Streams::PreOnly if self.use_a2c => bad(
                "use_a2c",
                "a2c needs the post stream; not available with pre_only",
            ),
            Streams::PostOnly if self.share_classifier => bad(
                "share_classifier",
                "post_only needs an independent attention classifier; set share_classifier = false",
            ),
            _ => Ok(()),
        }
    }

    pub fn loss_weights(&self, alpha: f64, beta: f64) -> LossWeights {
        LossWeights {
            cls_e: if self.streams == Streams::PostOnly {
                0.0
            } else {
                1.0
            },
            cls_o: if self.streams == Streams::PreOnly {
                0.0
            } else {
                1.0
            },
            alpha: if self.use_c2c { alpha } else { 0.0 },
            beta: if self.use_a2c { beta } else { 0.0 },
        }
    }

    /// The classifier whose CAS a trained model localizes from.
    pub fn cas_source(&self) -> CasSource {
        match self.streams {
            Streams::PostOnly => CasSource::Post,
            _ => CasSource::Pre,
        }
    }

    pub fn model_shape(
        &self,
        feature_dim: usize,
        categories: usize,
        model: &ModelConfig,
    ) -> ModelShape {
        ModelShape {
            feature_dim,
            hidden: model.hidden,
            categories,
            share_classifier: self.share_classifier,
            class_agnostic_weights: self.class_agnostic_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k_ratio: f64,
    pub seed: u64,
    /// Common snippet count for batching; defaults to the longest video.
    pub snippets: Option<usize>,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 5e-4,
            epochs: 150,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            k_ratio: DEFAULT_K_RATIO,
            seed: 0,
            snippets: None,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(EcmError::Config {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return bad("k_ratio", "must be in (0, 1]");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha", "loss coefficients must be nonnegative");
        }
        if matches!(self.snippets, Some(t) if t < FeatureSequence::MIN_SNIPPETS) {
            return bad("snippets", "must be >= 3");
        }
        self.ablation.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.ablation.loss_weights(self.alpha, self.beta)
    }
}

/// A training video reduced to what the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub video_id: String,
    pub features: FeatureSequence,
    pub label: VideoLabel,
}

/// Resamples every video to a common length and builds its label.
pub fn prepare_examples(
    videos: &[Video],
    categories: usize,
    snippets: Option<usize>,
) -> Result<Vec<Example>> {
    if videos.is_empty() {
        return Err(EcmError::InvalidArgument("training corpus is empty".into()));
    }
    let target = snippets.unwrap_or_else(|| {
        videos
            .iter()
            .map(|v| v.features.snippets())
            .max()
            .unwrap_or(FeatureSequence::MIN_SNIPPETS)
    });
    videos
        .iter()
        .map(|v| {
            let label = v
                .record
                .label(categories)
                .map_err(|e| EcmError::Label(format!("video {}: {e}", v.record.video_id)))?;
            Ok(Example {
                video_id: v.record.video_id.clone(),
                features: resample_snippets(&v.features, target)?,
                label,
            })
        })
        .collect()
}

fn example_gradient(
    params: &EcmParams,
    ex: &Example,
    weights: &LossWeights,
    k_ratio: f64,
) -> Result<(LossBreakdown, EcmParams)> {
    let trace = model::forward_traced(&ex.features, params, k_ratio)?;
    let (loss, head) = objective::objective(&trace.output, &ex.label, weights)?;
    let mut grad = params.zeros_like();
    model::backward(&ex.features, params, &trace, &head, &mut grad);
    Ok((loss, grad))
}

fn add_scaled(acc: &mut EcmParams, other: &EcmParams, scale: f64) {
    for (a, b) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, y) in a.data.iter_mut().zip(b.data) {
            *x += scale * y;
        }
    }
}

/// Batch-mean loss and its gradient. Per-video work runs in parallel; the
/// reduction is sequential in batch order, so results are deterministic.
pub fn batch_gradient(
    params: &EcmParams,
    batch: &[&Example],
    weights: &LossWeights,
    k_ratio: f64,
) -> Result<(LossBreakdown, EcmParams)> {
    if batch.is_empty() {
        return Err(EcmError::InvalidArgument("empty batch".into()));
    }
    let per_video: Vec<(LossBreakdown, EcmParams)> = batch
        .par_iter()
        .map(|ex| example_gradient(params, ex, weights, k_ratio))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    for (_, g) in &per_video {
        add_scaled(&mut grad, g, scale);
    }
    let losses: Vec<LossBreakdown> = per_video.iter().map(|(l, _)| *l).collect();
    Ok((LossBreakdown::mean(&losses).expect("nonempty"), grad))
}

/// Batch-mean objective without gradients.
pub fn batch_loss(
    params: &EcmParams,
    batch: &[&Example],
    weights: &LossWeights,
    k_ratio: f64,
) -> Result<LossBreakdown> {
    let losses: Vec<LossBreakdown> = batch
        .par_iter()
        .map(|ex| {
            let out = model::ecm_forward(&ex.features, params, k_ratio)?;
            Ok(objective::objective(&out, &ex.label, weights)?.0)
        })
        .collect::<Result<_>>()?;
    LossBreakdown::mean(&losses).ok_or_else(|| EcmError::InvalidArgument("empty batch".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// `step,cls_e,cls_o,c2c,a2c,total`
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,cls_e,cls_o,c2c,a2c,total\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step, l.cls_e, l.cls_o, l.c2c, l.a2c, l.total
            );
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,cls_e,cls_o,c2c,a2c,total\n");
        for e in &self.epochs {
            let l = &e.mean;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, l.cls_e, l.cls_o, l.c2c, l.a2c, l.total
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EcmParams,
    /// Parameters at the end of the epoch with the lowest mean training loss.
    pub best_params: EcmParams,
    pub best_epoch: usize,
    pub log: TrainingLog,
}

impl TrainOutcome {
    /// Writes `checkpoints/{final,best}.ckpt`, `losses.csv` and
    /// `epoch_losses.csv` under `dir`.
    pub fn write(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        let ckpt = dir.join("checkpoints");
        save_checkpoint(&ckpt.join("final.ckpt"), &self.params, meta)?;
        let best_meta = CheckpointMeta {
            epoch: self.best_epoch,
            ..meta.clone()
        };
        save_checkpoint(&ckpt.join("best.ckpt"), &self.best_params, &best_meta)?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| EcmError::io(p, e))
        };
        write("losses.csv", self.log.steps_csv())?;
        write("epoch_losses.csv", self.log.epochs_csv())
    }
}

pub fn train(
    videos: &[Video],
    categories: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(videos, categories, model, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    videos: &[Video],
    categories: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let examples = prepare_examples(videos, categories, cfg.snippets)?;
    let feature_dim = examples[0].features.dim();
    if let Some(ex) = examples.iter().find(|e| e.features.dim() != feature_dim) {
        return Err(EcmError::Shape(format!(
            "video {} has feature dim {}, corpus uses {feature_dim}",
            ex.video_id,
            ex.features.dim()
        )));
    }
    let shape = cfg.ablation.model_shape(feature_dim, categories, model);
    let mut params = EcmParams::init(&shape, seed::derive(cfg.seed, "train.init"));
    let weights = cfg.loss_weights();
    let mut optimizer = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = seed::rng(cfg.seed, "train.shuffle");

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, EcmParams)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = batch_gradient(&params, &batch, &weights, cfg.k_ratio)?;
            if !loss.total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|e| e.video_id.as_str()).collect();
                return Err(EcmError::NonFinite(format!(
                    "loss at epoch {epoch} step {step}: {loss:?}; batch {ids:?}"
                )));
            }
            optimizer.step(&mut params, &grad);
            log.steps.push(StepRecord { step, epoch, loss });
            epoch_losses.push(loss);
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean: LossBreakdown::mean(&epoch_losses).expect("nonempty epoch"),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(b, _, _)| record.mean.total < *b) {
            best = Some((record.mean.total, epoch, params.clone()));
        }
        log.epochs.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_params,
        best_epoch,
        log,
    })
}
