//! Trains full ECM on the synthetic corpus, then localizes and evaluates on
//! the test split.
//!
//! ```text
//! cargo run --release --example train_synthetic [EPOCHS] [HIDDEN]
//! ```

use ecm::data::SyntheticCorpusSpec;
use ecm::experiment::{load_dataset, test_model, train_model, DataConfig, ExperimentConfig};
use ecm::model::ModelConfig;
use ecm::training::TrainConfig;

fn main() -> ecm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(150, |s| s.parse().expect("EPOCHS"));
    let hidden = args.next().map_or(64, |s| s.parse().expect("HIDDEN"));

    let cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: Some(SyntheticCorpusSpec::default()),
            ..Default::default()
        },
        model: ModelConfig { hidden },
        train: TrainConfig {
            epochs,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;

    let every = (epochs / 10).max(1);
    let model = train_model(&data, &cfg.model, &cfg.train, |e| {
        if (e.epoch + 1) % every == 0 {
            let m = &e.mean;
            println!(
                "epoch {:4}  total {:.4}  cls_e {:.4}  cls_o {:.4}  c2c {:.4}  a2c {:.4}",
                e.epoch + 1,
                m.total,
                m.cls_e,
                m.cls_o,
                m.c2c,
                m.a2c
            );
        }
    })?;
    println!(
        "lowest epoch loss at epoch {}",
        model.outcome.best_epoch + 1
    );

    let result = test_model(&model.outcome.params, &model.meta, &data, &cfg)?;
    println!(
        "\n{} detections on {} test videos",
        result.detections.len(),
        data.test.len()
    );
    print!("{}", result.report.metrics_csv());
    Ok(())
}
