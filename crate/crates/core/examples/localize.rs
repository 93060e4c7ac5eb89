//! Turns a hand-made class activation sequence into scored detections:
//! category rejection, min-max normalization, actionness grouping over a
//! threshold grid, proposal scoring and per-category NMS.
//!
//! ```text
//! cargo run --example localize
//! ```

use ndarray::{array, Array2};

use ecm::localization::{localize, minmax_normalize, tag_group, LocalizeConfig};
use ecm::model::{ClassActivationSequence, VideoPrediction};

fn main() -> ecm::Result<()> {
    // 12 snippets, 3 categories. Category 0 has two bumps, category 1 is
    // present but weak, category 2 falls below the rejection threshold.
    let c0 = [0.1, 0.2, 2.5, 3.0, 2.8, 0.3, 0.1, 0.2, 1.9, 2.2, 0.4, 0.1];
    let c1 = [0.0, 0.1, 0.1, 0.2, 0.6, 1.4, 1.5, 0.7, 0.2, 0.1, 0.0, 0.0];
    let c2 = [0.0; 12];
    let scores = Array2::from_shape_fn((12, 3), |(t, c)| [c0, c1, c2][c][t]);
    let pred = VideoPrediction {
        cas: ClassActivationSequence::new(scores)?,
        video_scores: array![0.7, 0.28, 0.02],
    };
    let duration = 24.0;
    let cfg = LocalizeConfig::default();

    let act = minmax_normalize(pred.cas.scores().column(0));
    println!("category 0 normalized: {:.2?}", act);
    for p in tag_group(&act, &[0.3, 0.6, 0.9], duration) {
        println!(
            "  proposal snippets [{}, {}) = [{:.1}s, {:.1}s)",
            p.first, p.last_exclusive, p.start, p.end
        );
    }

    println!("\ndetections (tau {}, nms iou {}):", cfg.tau, cfg.nms_iou);
    for d in localize(&pred, "demo", duration, &cfg)? {
        println!(
            "  class {}  [{:5.1}s, {:5.1}s)  score {:.3}",
            d.category, d.start, d.end, d.score
        );
    }
    Ok(())
}
