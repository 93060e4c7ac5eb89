//! Scores a small detection set against ground truth: per-class average
//! precision and mAP across temporal IoU thresholds.
//!
//! ```text
//! cargo run --example evaluate
//! ```

use ecm::evaluation::{average_map_thresholds, map_evaluate, temporal_iou, Detection};

fn seg(video: &str, start: f64, end: f64, category: usize, score: f64) -> Detection {
    Detection {
        video_id: video.into(),
        start,
        end,
        category,
        score,
    }
}

fn main() -> ecm::Result<()> {
    let gts = vec![
        seg("a", 2.0, 8.0, 0, 1.0),
        seg("a", 12.0, 15.0, 0, 1.0),
        seg("b", 0.0, 10.0, 1, 1.0),
    ];
    let dets = vec![
        seg("a", 2.5, 8.0, 0, 0.9),   // good match
        seg("a", 3.0, 5.0, 0, 0.8),   // fragment of the same instance
        seg("a", 11.0, 16.0, 0, 0.6), // loose match
        seg("b", 1.0, 9.0, 1, 0.7),
        seg("b", 20.0, 25.0, 1, 0.75), // false positive ranked first
    ];

    println!(
        "IoU of the first pair: {:.3}",
        temporal_iou((2.5, 8.0), (2.0, 8.0))
    );

    let thresholds = [0.3, 0.5, 0.7];
    let report = map_evaluate(&dets, &gts, 2, &thresholds)?;
    print!("{}", report.metrics_csv());
    print!("{}", report.per_class_csv(&["jump".into(), "throw".into()]));

    // `average` in the table is always taken over the standard range.
    let range = average_map_thresholds();
    println!(
        "average mAP over {:.2}:0.05:{:.2} = {:.4}",
        range[0],
        range[range.len() - 1],
        report.average_map
    );
    Ok(())
}
