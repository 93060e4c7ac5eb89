//! Command-line front end: `synth`, `train`, `infer`, `eval`, `ablate` and
//! `gradcheck`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_corpus, load_manifest, load_videos};
use crate::error::{EcmError, Result};
use crate::evaluation::{
    frame_accuracy, ground_truth_records, map_evaluate, parse_thresholds, read_segments,
    write_segments,
};
use crate::experiment::{
    ablation_csv, detect, ensemble, load_dataset, map_at_05, predict_videos, run_ablation,
    test_model, train_model, write_file, AblationRow, DataConfig, ExperimentConfig, RunRecord,
};
use crate::localization::LocalizeConfig;
use crate::model::{ClassActivationSequence, VideoPrediction};
use crate::training::{check_flag_combinations, load_checkpoint, Streams};

#[derive(Debug, Parser)]
#[command(
    name = "ecm",
    version,
    about = "Weakly supervised temporal action localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted action instances.
    Synth(SynthArgs),
    /// Train a model, then localize and evaluate on the test split.
    Train(RunArgs),
    /// Localize actions in every video of a manifest.
    Infer(InferArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate the six-row component ablation plus ensembles.
    Ablate(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Experiment config whose [data.synthetic] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for features, manifests and a ready-to-use experiment.toml.
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed; also becomes the training seed in experiment.toml.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    categories: Option<usize>,
    /// Snippets per video.
    #[arg(long)]
    snippets: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Prototype separation relative to per-dimension noise.
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment TOML; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Detections JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-video CAS and video scores here.
    #[arg(long)]
    cas: Option<PathBuf>,
    /// Config providing the [localize] section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Ground truth in the detection record schema, or a `.jsonl` manifest.
    #[arg(long)]
    groundtruth: PathBuf,
    /// `start:step:stop` or a comma-separated list.
    #[arg(long, default_value = "0.1:0.1:0.7")]
    thresholds: String,
    /// CAS file from `infer --cas`; requires a `.jsonl` ground truth.
    #[arg(long)]
    cas: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    tau: f64,
    /// Directory for metrics.csv and per_class.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Exit status 2: unusable input (missing config, bad arguments).
const EXIT_USAGE: i32 = 2;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Run(EcmError),
}

impl From<EcmError> for Failure {
    fn from(e: EcmError) -> Self {
        match e {
            EcmError::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Run(other),
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> std::result::Result<(), Failure> {
    let base = match &a.config {
        Some(p) => load_config_unvalidated(p)?,
        None => ExperimentConfig::default(),
    };
    let mut spec = base.data.synthetic.clone().unwrap_or_default();
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.categories {
        spec.categories = v;
    }
    if let Some(v) = a.snippets {
        spec.snippets = v;
    }
    if let Some(v) = a.n_train {
        spec.n_train = v;
    }
    if let Some(v) = a.n_test {
        spec.n_test = v;
    }
    if let Some(v) = a.snr {
        spec.action_snr = v;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    let (train, test) = corpus.write(&a.out)?;
    let records: Vec<_> = corpus.test.iter().map(|v| v.record.clone()).collect();
    write_segments(
        &a.out.join("test_groundtruth.json"),
        &ground_truth_records(&records),
    )?;

    // A ready-to-train config pointing at the written manifests.
    let cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: None,
            train_manifest: Some("train.jsonl".into()),
            test_manifest: Some("test.jsonl".into()),
        },
        train: crate::training::TrainConfig {
            seed: spec.seed,
            ..base.train
        },
        ..base
    };
    write_file(&a.out.join("experiment.toml"), &cfg.to_toml())?;
    write_file(
        &a.out.join("synthetic.json"),
        &serde_json::to_string_pretty(&spec).map_err(EcmError::from)?,
    )?;
    println!(
        "wrote {} train and {} test videos: {}, {}",
        corpus.train.len(),
        corpus.test.len(),
        train.display(),
        test.display()
    );
    Ok(())
}

fn resolve(a: &RunArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let mut text_cfg = load_config_unvalidated(p)?;
            if a.train_manifest.is_some() || a.test_manifest.is_some() {
                text_cfg.data = DataConfig::default();
            }
            text_cfg
        }
        None => ExperimentConfig::default(),
    };
    if a.train_manifest.is_some() || a.test_manifest.is_some() {
        cfg.data.synthetic = None;
        cfg.data.train_manifest = a.train_manifest.clone();
        cfg.data.test_manifest = a.test_manifest.clone();
    }
    if let Some(v) = &a.out {
        cfg.output.dir = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.hidden {
        cfg.model.hidden = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_config_unvalidated(path: &Path) -> std::result::Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    Ok(ExperimentConfig::load_unvalidated(path)?)
}

fn train(a: RunArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(&a)?;
    let out = &cfg.output.dir;
    let data = load_dataset(&cfg.data)?;
    RunRecord::new("train", &cfg, &data).write(out)?;
    let epochs = cfg.train.epochs;
    let model = train_model(&data, &cfg.model, &cfg.train, |e| {
        if e.epoch == 0 || (e.epoch + 1) % 10 == 0 || e.epoch + 1 == epochs {
            eprintln!(
                "epoch {:>4}/{epochs}  loss {:.5}",
                e.epoch + 1,
                e.mean.total
            );
        }
    })?;
    model.outcome.write(out, &model.meta)?;
    let result = test_model(&model.outcome.params, &model.meta, &data, &cfg)?;
    write_segments(&out.join("detections.json"), &result.detections)?;
    write_file(&out.join("metrics.csv"), &result.report.metrics_csv())?;
    write_file(
        &out.join("per_class.csv"),
        &result.report.per_class_csv(&data.categories),
    )?;
    print!("{}", result.report.metrics_csv());
    Ok(())
}

/// One entry of the CAS file written by `infer --cas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasRecord {
    pub video_id: String,
    /// `T x C` snippet logits, row per snippet.
    pub cas: Vec<Vec<f64>>,
    pub video_scores: Vec<f64>,
}

impl CasRecord {
    pub fn new(video_id: &str, p: &VideoPrediction) -> Self {
        Self {
            video_id: video_id.into(),
            cas: p
                .cas
                .scores()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            video_scores: p.video_scores.to_vec(),
        }
    }

    pub fn prediction(&self) -> Result<VideoPrediction> {
        let t = self.cas.len();
        let c = self.video_scores.len();
        if self.cas.iter().any(|r| r.len() != c) {
            return Err(EcmError::Shape(format!(
                "video {}: CAS rows must have {c} entries",
                self.video_id
            )));
        }
        let flat: Vec<f64> = self.cas.iter().flatten().copied().collect();
        let scores = ndarray::Array2::from_shape_vec((t, c), flat)
            .map_err(|e| EcmError::Shape(e.to_string()))?;
        Ok(VideoPrediction {
            cas: ClassActivationSequence::new(scores)?,
            video_scores: self.video_scores.clone().into(),
        })
    }
}

fn infer(a: InferArgs) -> std::result::Result<(), Failure> {
    let localize = match &a.config {
        Some(p) => load_config_unvalidated(p)?.localize,
        None => LocalizeConfig::default(),
    };
    localize.validate()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.categories != ckpt.meta.categories {
        return Err(Failure::Usage(format!(
            "manifest {} categories differ from checkpoint {}",
            a.manifest.display(),
            a.checkpoint.display()
        )));
    }
    let videos = load_videos(&manifest)?;
    let preds = predict_videos(
        &ckpt.params,
        ckpt.meta.k_ratio,
        ckpt.meta.cas_source,
        &videos,
    )?;
    let dets = detect(&preds, &videos, &localize)?;
    write_segments(&a.out, &dets)?;
    if let Some(path) = &a.cas {
        let records: Vec<CasRecord> = preds
            .iter()
            .zip(&videos)
            .map(|(p, v)| CasRecord::new(&v.record.video_id, p))
            .collect();
        write_file(
            path,
            &serde_json::to_string(&records).map_err(EcmError::from)?,
        )?;
    }
    println!(
        "{} detections over {} videos -> {}",
        dets.len(),
        videos.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let thresholds = parse_thresholds(&a.thresholds).map_err(|e| Failure::Usage(e.to_string()))?;
    let dets = read_segments(&a.detections)?;
    let is_manifest = a.groundtruth.extension().is_some_and(|e| e == "jsonl");
    let (gts, names, records) = if is_manifest {
        let m = load_manifest(&a.groundtruth)?;
        (
            ground_truth_records(&m.records),
            m.categories,
            Some(m.records),
        )
    } else {
        let gts = read_segments(&a.groundtruth)?;
        let c = gts
            .iter()
            .chain(&dets)
            .map(|s| s.category + 1)
            .max()
            .unwrap_or(1);
        let names = (0..c).map(|i| i.to_string()).collect();
        (gts, names, None)
    };
    let mut report = map_evaluate(&dets, &gts, names.len(), &thresholds)?;
    if let Some(cas_path) = &a.cas {
        let Some(records) = &records else {
            return Err(Failure::Usage(
                "--cas needs a .jsonl manifest as --groundtruth".into(),
            ));
        };
        let text = std::fs::read_to_string(cas_path).map_err(|e| EcmError::io(cas_path, e))?;
        let cas: Vec<CasRecord> = serde_json::from_str(&text).map_err(EcmError::from)?;
        let preds: Vec<VideoPrediction> = cas
            .iter()
            .map(CasRecord::prediction)
            .collect::<Result<_>>()?;
        let mut items = Vec::new();
        for (c, p) in cas.iter().zip(&preds) {
            let rec = records
                .iter()
                .find(|r| r.video_id == c.video_id)
                .ok_or_else(|| {
                    Failure::Usage(format!(
                        "video {} in CAS file is not in the manifest",
                        c.video_id
                    ))
                })?;
            items.push((p, rec));
        }
        report.frame_accuracy = frame_accuracy(&items, a.tau)?;
    }
    let metrics = report.metrics_csv();
    print!("{metrics}");
    if let Some(dir) = &a.out {
        write_file(&dir.join("metrics.csv"), &metrics)?;
        write_file(&dir.join("per_class.csv"), &report.per_class_csv(&names))?;
    }
    Ok(())
}

fn ablate(a: RunArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(&a)?;
    let out = &cfg.output.dir;
    let data = load_dataset(&cfg.data)?;
    RunRecord::new("ablate", &cfg, &data).write(out)?;
    let results = run_ablation(&data, &cfg)?;
    let rows: Vec<AblationRow> = results.iter().map(AblationRow::new).collect();
    let table = ablation_csv(&rows);
    write_file(&out.join("ablation.csv"), &table)?;
    print!("{table}");

    let single = |s: Streams| {
        results
            .iter()
            .find(|r| r.variant.flags(false).streams == s)
            .expect("grid has both single-stream rows")
    };
    let ens = ensemble(
        single(Streams::PreOnly),
        single(Streams::PostOnly),
        &data,
        &cfg,
    )?;
    let mut csv = String::from("method,lambda,map@0.5,average_map\n");
    csv.push_str(&format!(
        "merge,,{:.6},{:.6}\n",
        map_at_05(&ens.merge),
        ens.merge.average_map
    ));
    for (lambda, r) in &ens.fused {
        csv.push_str(&format!(
            "fuse,{lambda},{:.6},{:.6}\n",
            map_at_05(r),
            r.average_map
        ));
    }
    write_file(&out.join("ensemble.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let checks = check_flag_combinations(a.seed, a.epsilon)?;
    let mut failed = 0;
    println!("share,c2c,a2c,class_agnostic,max_rel_error,worst_tensor,status");
    for c in &checks {
        let ok = c.report.max_rel_error <= a.tolerance;
        failed += usize::from(!ok);
        let f = c.flags;
        println!(
            "{},{},{},{},{:.3e},{},{}",
            f.share_classifier,
            f.use_c2c,
            f.use_a2c,
            f.class_agnostic_weights,
            c.report.max_rel_error,
            c.report.worst_tensor,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Run(EcmError::InvalidArgument(format!(
            "{failed} flag combinations exceed tolerance {}",
            a.tolerance
        ))));
    }
    Ok(())
}
