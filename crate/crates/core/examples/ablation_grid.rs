//! Trains the six component-ablation variants on one synthetic corpus and
//! prints the comparison table.
//!
//! ```text
//! cargo run --release --example ablation_grid [EPOCHS] [SEED]
//! ```

use ecm::data::SyntheticCorpusSpec;
use ecm::experiment::{
    ablation_csv, load_dataset, run_ablation, AblationRow, DataConfig, ExperimentConfig,
};
use ecm::model::ModelConfig;
use ecm::training::TrainConfig;

fn main() -> ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(150, |s| s.parse().expect("EPOCHS"));
    let seed = args.next().map_or(0, |s| s.parse().expect("SEED"));

    let cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: Some(SyntheticCorpusSpec {
                seed,
                ..Default::default()
            }),
            ..Default::default()
        },
        model: ModelConfig { hidden: 64 },
        train: TrainConfig {
            epochs,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = load_dataset(&cfg.data)?;
    let results = run_ablation(&data, &cfg)?;
    let rows: Vec<AblationRow> = results.iter().map(AblationRow::new).collect();
    print!("{}", ablation_csv(&rows));
    Ok(())
}
