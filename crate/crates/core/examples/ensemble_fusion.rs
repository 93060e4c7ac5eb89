//! Independently trained pre- and post-classification streams combined after
//! the fact (detection merging and CAS fusion), compared with full ECM.
//!
//! ```text
//! cargo run --release --example ensemble_fusion [EPOCHS]
//! ```

use ecm::data::SyntheticCorpusSpec;
use ecm::experiment::{
    ensemble, load_dataset, map_at_05, run_variant, DataConfig, ExperimentConfig, Variant,
};
use ecm::model::ModelConfig;
use ecm::training::TrainConfig;

fn main() -> ecm::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(150, |s| s.parse().expect("EPOCHS"));
    let cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: Some(SyntheticCorpusSpec::default()),
            ..Default::default()
        },
        model: ModelConfig { hidden: 64 },
        train: TrainConfig {
            epochs,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = load_dataset(&cfg.data)?;

    let pre = run_variant(&data, &cfg, Variant::PreOnly)?;
    let post = run_variant(&data, &cfg, Variant::PostOnly)?;
    let full = run_variant(&data, &cfg, Variant::Full)?;
    let ens = ensemble(&pre, &post, &data, &cfg)?;

    println!("method            mAP@0.5");
    println!("pre-only          {:.4}", map_at_05(&pre.test.report));
    println!("post-only         {:.4}", map_at_05(&post.test.report));
    println!("merge detections  {:.4}", map_at_05(&ens.merge));
    for (lambda, report) in &ens.fused {
        println!("fuse lambda={lambda:.1}    {:.4}", map_at_05(report));
    }
    println!("full ECM          {:.4}", map_at_05(&full.test.report));
    Ok(())
}
