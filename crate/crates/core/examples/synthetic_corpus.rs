//! Generates the default synthetic corpus and summarizes it.
//!
//! ```text
//! cargo run --release --example synthetic_corpus [OUT_DIR]
//! ```
//! With `OUT_DIR` the features and manifests are written to disk as well.

use std::path::PathBuf;

use ecm::data::{generate_synthetic_corpus, SyntheticCorpusSpec};

fn main() -> ecm::Result<()> {
    let spec = SyntheticCorpusSpec::default();
    let corpus = generate_synthetic_corpus(&spec)?;

    println!(
        "{} categories, {} train / {} test videos, {} snippets x {} dims, snr {}",
        corpus.categories.len(),
        corpus.train.len(),
        corpus.test.len(),
        spec.snippets,
        spec.feature_dim,
        spec.action_snr
    );

    let mut per_class = vec![0usize; corpus.categories.len()];
    let mut action_snippets = 0;
    let mut total_snippets = 0;
    for video in &corpus.train {
        for gt in &video.record.ground_truth {
            per_class[gt.category] += 1;
        }
        let classes = corpus.snippet_classes(video);
        action_snippets += classes
            .iter()
            .filter(|&&c| c < corpus.categories.len())
            .count();
        total_snippets += classes.len();
    }
    println!("train instances per class: {per_class:?}");
    println!(
        "action snippets: {:.1}%",
        100.0 * action_snippets as f64 / total_snippets as f64
    );

    let first = &corpus.train[0].record;
    println!(
        "\n{} ({:.1}s, labels {:?}):",
        first.video_id, first.duration, first.labels
    );
    for gt in &first.ground_truth {
        println!(
            "  [{:6.2}, {:6.2}) {}",
            gt.start, gt.end, corpus.categories[gt.category]
        );
    }

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        let (train, test) = corpus.write(&dir)?;
        println!("\nwrote {} and {}", train.display(), test.display());
    }
    Ok(())
}
