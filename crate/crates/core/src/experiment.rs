//! End-to-end runs: configuration, corpus loading, train/infer/evaluate, the
//! component ablation grid and the two-stream ensemble baselines.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic_corpus, load_manifest, load_videos, SyntheticCorpusSpec, Video,
};
use crate::error::{EcmError, Result};
use crate::evaluation::{
    frame_accuracy, fuse_cas, ground_truth_records, map_evaluate, merge_detections,
    prediction_from_cas, EvalReport,
};
use crate::localization::{localize, Detection, LocalizeConfig};
use crate::model::{predict, CasSource, EcmParams, ModelConfig, VideoPrediction};
use crate::training::{
    train_with_progress, AblationFlags, CheckpointMeta, EpochRecord, Streams, TrainConfig,
    TrainOutcome,
};

/// Where the corpus comes from: a synthetic spec or a pair of manifests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticCorpusSpec>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Fusion weights tried by the CAS-fusion ensemble baseline.
    pub fuse_lambdas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..=7).map(|i| i as f64 / 10.0).collect(),
            fuse_lambdas: vec![0.2, 0.4, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EcmError::Config {
            field: e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<root>".into()),
            message: e.message().to_string(),
        })
    }

    /// Reads and validates a TOML file. Relative manifest paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::load_unvalidated(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`Self::load`] without validation, for callers that patch the
    /// config before checking it.
    pub fn load_unvalidated(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EcmError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.test_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synthetic, &d.train_manifest, &d.test_manifest) {
            (Some(spec), None, None) => spec.validate()?,
            (None, Some(_), Some(_)) => {}
            _ => {
                return Err(EcmError::Config {
                    field: "data".into(),
                    message: "set either [data.synthetic] or both train_manifest and test_manifest"
                        .into(),
                })
            }
        }
        if self.model.hidden == 0 {
            return Err(EcmError::Config {
                field: "model.hidden".into(),
                message: "must be positive".into(),
            });
        }
        self.train.validate()?;
        self.localize.validate()?;
        let eval = &self.eval;
        if eval.thresholds.is_empty() || eval.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(EcmError::Config {
                field: "eval.thresholds".into(),
                message: "must be a nonempty list within (0, 1]".into(),
            });
        }
        if eval.fuse_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(EcmError::Config {
                field: "eval.fuse_lambdas".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    if let Some(spec) = &cfg.synthetic {
        let c = generate_synthetic_corpus(spec)?;
        return Ok(Dataset {
            categories: c.categories,
            train: c.train,
            test: c.test,
        });
    }
    let (Some(train), Some(test)) = (&cfg.train_manifest, &cfg.test_manifest) else {
        return Err(EcmError::Config {
            field: "data".into(),
            message: "no corpus configured".into(),
        });
    };
    let train = load_manifest(train)?;
    let test = load_manifest(test)?;
    if train.categories != test.categories {
        return Err(EcmError::Config {
            field: "data.test_manifest".into(),
            message: "category list differs from the training manifest".into(),
        });
    }
    Ok(Dataset {
        train: load_videos(&train)?,
        test: load_videos(&test)?,
        categories: train.categories,
    })
}

/// SHA-256 over categories, records and feature values of both splits.
pub fn corpus_hash(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for c in &data.categories {
        h.update(c.as_bytes());
        h.update([0]);
    }
    for (split, videos) in [("train", &data.train), ("test", &data.test)] {
        h.update(split.as_bytes());
        for v in videos {
            let r = &v.record;
            h.update(r.video_id.as_bytes());
            h.update([0]);
            h.update(r.duration.to_le_bytes());
            for l in &r.labels {
                h.update((*l as u64).to_le_bytes());
            }
            for g in &r.ground_truth {
                h.update(g.start.to_le_bytes());
                h.update(g.end.to_le_bytes());
                h.update((g.category as u64).to_le_bytes());
            }
            let (t, d) = v.features.values().dim();
            h.update((t as u64).to_le_bytes());
            h.update((d as u64).to_le_bytes());
            for x in v.features.values() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Reproducibility record written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub corpus_sha256: String,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig, data: &Dataset) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.train.seed,
            corpus_sha256: corpus_hash(data),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("run.json"), &serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EcmError::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| EcmError::io(path, e))
}

/// A trained parameter set plus what inference needs to use it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub outcome: TrainOutcome,
    pub meta: CheckpointMeta,
}

pub fn train_model(
    data: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let outcome = train_with_progress(&data.train, data.categories.len(), model, train, on_epoch)?;
    let meta = CheckpointMeta {
        categories: data.categories.clone(),
        k_ratio: train.k_ratio,
        cas_source: train.ablation.cas_source(),
        epoch: train.epochs - 1,
    };
    Ok(TrainedModel { outcome, meta })
}

/// Per-video CAS and video scores, in input order.
pub fn predict_videos(
    params: &EcmParams,
    k_ratio: f64,
    source: CasSource,
    videos: &[Video],
) -> Result<Vec<VideoPrediction>> {
    videos
        .par_iter()
        .map(|v| predict(&v.features, params, k_ratio, source))
        .collect()
}

pub fn detect(
    preds: &[VideoPrediction],
    videos: &[Video],
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>> {
    let per_video: Vec<Vec<Detection>> = preds
        .par_iter()
        .zip(videos)
        .map(|(p, v)| localize(p, &v.record.video_id, v.record.duration, cfg))
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

/// mAP of `dets` on `videos`, plus frame accuracy of `preds`.
pub fn evaluate(
    dets: &[Detection],
    preds: &[VideoPrediction],
    videos: &[Video],
    categories: usize,
    thresholds: &[f64],
    tau: f64,
) -> Result<EvalReport> {
    let records: Vec<_> = videos.iter().map(|v| v.record.clone()).collect();
    let mut report = map_evaluate(
        dets,
        &ground_truth_records(&records),
        categories,
        thresholds,
    )?;
    let items: Vec<_> = preds.iter().zip(&records).collect();
    report.frame_accuracy = frame_accuracy(&items, tau)?;
    Ok(report)
}

/// Inference plus evaluation of one model on the test split.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub predictions: Vec<VideoPrediction>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

pub fn test_model(
    params: &EcmParams,
    meta: &CheckpointMeta,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<TestResult> {
    let predictions = predict_videos(params, meta.k_ratio, meta.cas_source, &data.test)?;
    let detections = detect(&predictions, &data.test, &cfg.localize)?;
    let report = evaluate(
        &detections,
        &predictions,
        &data.test,
        data.categories.len(),
        &cfg.eval.thresholds,
        cfg.localize.tau,
    )?;
    Ok(TestResult {
        predictions,
        detections,
        report,
    })
}

/// The six rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PreOnly,
    PostOnly,
    Shared,
    SharedA2c,
    UnsharedFull,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PreOnly,
        Variant::PostOnly,
        Variant::Shared,
        Variant::SharedA2c,
        Variant::UnsharedFull,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PreOnly => "pre-only",
            Variant::PostOnly => "post-only",
            Variant::Shared => "shared",
            Variant::SharedA2c => "+a2c",
            Variant::UnsharedFull => "unshared-full",
            Variant::Full => "full",
        }
    }

    pub fn flags(self, class_agnostic_weights: bool) -> AblationFlags {
        let (streams, share_classifier, use_c2c, use_a2c) = match self {
            Variant::PreOnly => (Streams::PreOnly, true, false, false),
            Variant::PostOnly => (Streams::PostOnly, false, false, false),
            Variant::Shared => (Streams::Both, true, false, false),
            Variant::SharedA2c => (Streams::Both, true, false, true),
            Variant::UnsharedFull => (Streams::Both, false, true, true),
            Variant::Full => (Streams::Both, true, true, true),
        };
        AblationFlags {
            streams,
            share_classifier,
            use_c2c,
            use_a2c,
            class_agnostic_weights,
        }
    }
}

/// `cfg.train` with the ablation flags of `variant`.
pub fn variant_config(cfg: &TrainConfig, variant: Variant) -> TrainConfig {
    TrainConfig {
        ablation: variant.flags(cfg.ablation.class_agnostic_weights),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub model: TrainedModel,
    pub test: TestResult,
}

pub fn run_variant(
    data: &Dataset,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<VariantResult> {
    let train = variant_config(&cfg.train, variant);
    let model = train_model(data, &cfg.model, &train, |_| {})?;
    let test = test_model(&model.outcome.params, &model.meta, data, cfg)?;
    Ok(VariantResult {
        variant,
        model,
        test,
    })
}

/// Trains and evaluates every variant, in [`Variant::ALL`] order.
pub fn run_ablation(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<VariantResult>> {
    Variant::ALL
        .par_iter()
        .map(|&v| run_variant(data, cfg, v))
        .collect()
}

/// One line of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub pre_cls: bool,
    pub post_cls: bool,
    pub shared: bool,
    pub a2c: bool,
    pub c2c: bool,
    pub map_at_05: f64,
    pub average_map: f64,
    pub frame_accuracy: Option<f64>,
}

impl AblationRow {
    pub fn new(result: &VariantResult) -> Self {
        let f = result.variant.flags(false);
        let r = &result.test.report;
        Self {
            variant: result.variant.name().into(),
            pre_cls: f.streams != Streams::PostOnly,
            post_cls: f.streams != Streams::PreOnly,
            shared: f.streams == Streams::Both && f.share_classifier,
            a2c: f.use_a2c,
            c2c: f.use_c2c,
            map_at_05: map_at_05(r),
            average_map: r.average_map,
            frame_accuracy: r.frame_accuracy,
        }
    }
}

/// mAP@0.5, computed directly if 0.5 is not among the report's thresholds.
pub fn map_at_05(report: &EvalReport) -> f64 {
    report.map_at(0.5).unwrap_or(f64::NAN)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut out = String::from(
        "variant,pre_cls,post_cls,shared,a2c,c2c,map@0.5,average_map,frame_accuracy\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{}\n",
            r.variant,
            mark(r.pre_cls),
            mark(r.post_cls),
            mark(r.shared),
            mark(r.a2c),
            mark(r.c2c),
            r.map_at_05,
            r.average_map,
            r.frame_accuracy
                .map_or(String::new(), |f| format!("{f:.6}")),
        ));
    }
    out
}

/// Ensemble baselines built from independently trained single streams.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub merge: EvalReport,
    pub fused: Vec<(f64, EvalReport)>,
}

impl EnsembleReport {
    /// Best mAP@0.5 over the merge baseline and every fusion weight.
    pub fn best_map_at_05(&self) -> f64 {
        self.fused
            .iter()
            .map(|(_, r)| map_at_05(r))
            .chain([map_at_05(&self.merge)])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `pre` must come from a pre-only model and `post` from a post-only one.
pub fn ensemble(
    pre: &VariantResult,
    post: &VariantResult,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<EnsembleReport> {
    let c = data.categories.len();
    let eval = |dets: &[Detection], preds: &[VideoPrediction]| {
        evaluate(
            dets,
            preds,
            &data.test,
            c,
            &cfg.eval.thresholds,
            cfg.localize.tau,
        )
    };
    let merged = merge_detections(
        &pre.test.detections,
        &post.test.detections,
        cfg.localize.nms_iou,
    );
    // Frame accuracy of the merge is taken from the equal-weight CAS fusion.
    let half = fuse_all(pre, post, 0.5, pre.model.meta.k_ratio)?;
    let merge = eval(&merged, &half)?;
    let fused = cfg
        .eval
        .fuse_lambdas
        .iter()
        .map(|&lambda| {
            let preds = fuse_all(pre, post, lambda, pre.model.meta.k_ratio)?;
            let dets = detect(&preds, &data.test, &cfg.localize)?;
            Ok((lambda, eval(&dets, &preds)?))
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleReport { merge, fused })
}

fn fuse_all(
    pre: &VariantResult,
    post: &VariantResult,
    lambda: f64,
    k_ratio: f64,
) -> Result<Vec<VideoPrediction>> {
    pre.test
        .predictions
        .iter()
        .zip(&post.test.predictions)
        .map(|(a, b)| prediction_from_cas(fuse_cas(&a.cas, &b.cas, lambda)?, k_ratio))
        .collect()
}
