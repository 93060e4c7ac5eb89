//! From class activation sequences to scored temporal detections.
//!
//! Categories whose video score clears `tau` are kept; each kept CAS column is
//! min-max normalized, thresholded at every TAG level into maximal runs, and
//! the resulting proposals are scored and pruned by per-category NMS.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::snippet_to_seconds;
use crate::error::{EcmError, Result};
use crate::model::VideoPrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub tau: f64,
    pub tag_thresholds: Vec<f64>,
    pub nms_iou: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            tag_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.5,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(EcmError::Config {
                field: format!("localize.{field}"),
                message: message.into(),
            })
        };
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", "must be in (0, 1)");
        }
        if self.tag_thresholds.is_empty()
            || self.tag_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.tag_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(
                "tag_thresholds",
                "must be nonempty, strictly increasing, within (0, 1)",
            );
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou", "must be in [0, 1]");
        }
        Ok(())
    }
}

/// A scored temporal segment, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    #[serde(rename = "label")]
    pub category: usize,
    pub score: f64,
}

/// Intersection over union of `[a0, a1]` and `[b0, b1]`.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn select_categories(video_scores: ArrayView1<f64>, tau: f64) -> Vec<usize> {
    (0..video_scores.len())
        .filter(|&c| video_scores[c] >= tau)
        .collect()
}

/// `(x - min) / (max - min)`; a constant column maps to zeros.
pub fn minmax_normalize(column: ArrayView1<f64>) -> Vec<f64> {
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; column.len()];
    }
    column.iter().map(|&v| (v - min) / range).collect()
}

/// Maximal runs of snippets with `activation >= theta`, as half-open ranges.
pub fn tag_runs(activation: &[f64], theta: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &a) in activation.iter().enumerate() {
        match (a >= theta, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, activation.len()));
    }
    runs
}

/// A candidate segment from temporal actionness grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub first: usize,
    pub last_exclusive: usize,
    pub start: f64,
    pub end: f64,
}

/// Runs of every threshold, in threshold order; duplicates across thresholds
/// are kept.
pub fn tag_group(activation: &[f64], thresholds: &[f64], duration: f64) -> Vec<Proposal> {
    let t = activation.len();
    thresholds
        .iter()
        .flat_map(|&theta| tag_runs(activation, theta))
        .map(|(first, last_exclusive)| {
            let (start, end) = snippet_to_seconds(first, last_exclusive, t, duration);
            Proposal {
                first,
                last_exclusive,
                start,
                end,
            }
        })
        .collect()
}

/// Mean activation over `[first, last_exclusive)` times the video score.
pub fn score_proposal(
    activation: &[f64],
    first: usize,
    last_exclusive: usize,
    video_score: f64,
) -> Result<f64> {
    if first >= last_exclusive || last_exclusive > activation.len() {
        return Err(EcmError::InvalidArgument(format!(
            "proposal [{first}, {last_exclusive}) outside {} snippets",
            activation.len()
        )));
    }
    let seg = &activation[first..last_exclusive];
    Ok(seg.iter().sum::<f64>() / seg.len() as f64 * video_score)
}

fn by_score_then_start(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Greedy NMS within one (video, category) group: survivors in descending
/// score order.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(by_score_then_start);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| temporal_iou((k.start, k.end), (d.start, d.end)) <= iou_thr)
        {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] applied to each (video, category) group; output is grouped by
/// video id then category.
pub fn nms_per_category(dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(String, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups
            .entry((d.video_id.clone(), d.category))
            .or_default()
            .push(d);
    }
    groups.into_values().flat_map(|g| nms(g, iou_thr)).collect()
}

/// The full localization pipeline for one video.
pub fn localize(
    prediction: &VideoPrediction,
    video_id: &str,
    duration: f64,
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>> {
    let scores = prediction.cas.scores();
    if prediction.video_scores.len() != scores.ncols() {
        return Err(EcmError::Shape(format!(
            "{} video scores for a {}-category CAS",
            prediction.video_scores.len(),
            scores.ncols()
        )));
    }
    let mut out = Vec::new();
    for c in select_categories(prediction.video_scores.view(), cfg.tau) {
        let activation = minmax_normalize(scores.column(c));
        let video_score = prediction.video_scores[c];
        let mut dets = Vec::new();
        for p in tag_group(&activation, &cfg.tag_thresholds, duration) {
            dets.push(Detection {
                video_id: video_id.to_string(),
                start: p.start,
                end: p.end,
                category: c,
                score: score_proposal(&activation, p.first, p.last_exclusive, video_score)?,
            });
        }
        out.extend(nms(dets, cfg.nms_iou));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassActivationSequence;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn det(start: f64, end: f64, score: f64) -> Detection {
        Detection {
            video_id: "v".into(),
            start,
            end,
            category: 0,
            score,
        }
    }

    // Every interval [i, j) that is entirely above threshold and cannot be
    // extended on either side.
    fn brute_force_runs(a: &[f64], theta: f64) -> Vec<(usize, usize)> {
        let n = a.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..=n {
                let inside = a[i..j].iter().all(|&v| v >= theta);
                let left_closed = i == 0 || a[i - 1] < theta;
                let right_closed = j == n || a[j] < theta;
                if inside && left_closed && right_closed {
                    out.push((i, j));
                }
            }
        }
        out
    }

    // Quadratic greedy: repeatedly scan for the best remaining detection.
    fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut remaining: Vec<Detection> = dets.to_vec();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                if by_score_then_start(&remaining[i], &remaining[best]).is_lt() {
                    best = i;
                }
            }
            let b = remaining.remove(best);
            remaining.retain(|d| temporal_iou((b.start, b.end), (d.start, d.end)) <= thr);
            kept.push(b);
        }
        kept
    }

    #[test]
    fn select_examples() {
        assert_eq!(
            select_categories(array![0.9, 0.05, 0.05].view(), 0.25),
            vec![0]
        );
        assert!(select_categories(array![0.2, 0.1].view(), 0.25).is_empty());
        assert_eq!(LocalizeConfig::default().tau, 0.25);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            minmax_normalize(array![2.0, 4.0, 6.0].view()),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(minmax_normalize(array![3.0, 3.0, 3.0].view()), vec![0.0; 3]);
    }

    #[test]
    fn tag_example() {
        let p = tag_group(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &[0.5], 6.0);
        let secs: Vec<(f64, f64)> = p.iter().map(|p| (p.start, p.end)).collect();
        assert_eq!(secs, vec![(1.0, 3.0), (4.0, 5.0)]);
        assert!(tag_group(&[0.0; 5], &LocalizeConfig::default().tag_thresholds, 5.0).is_empty());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_proposal(&[1.0, 1.0, 1.0], 0, 3, 0.8).unwrap(), 0.8);
        assert_eq!(score_proposal(&[0.0, 0.0], 0, 2, 0.8).unwrap(), 0.0);
        assert!(score_proposal(&[1.0], 1, 1, 1.0).is_err());
    }

    #[test]
    fn nms_examples() {
        let kept = nms(vec![det(0.0, 2.0, 0.8), det(0.0, 2.0, 0.9)], 0.5);
        assert_eq!(kept, vec![det(0.0, 2.0, 0.9)]);
        let disjoint = vec![det(0.0, 1.0, 0.2), det(2.0, 3.0, 0.5)];
        assert_eq!(nms(disjoint, 0.5).len(), 2);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((1.0, 3.0), (1.0, 3.0)), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((temporal_iou((0.0, 4.0), (2.0, 6.0)) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn plateau_gives_one_detection() {
        let mut cas = Array2::zeros((10, 2));
        for t in 3..7 {
            cas[[t, 1]] = 5.0;
        }
        let pred = VideoPrediction {
            cas: ClassActivationSequence::new(cas).unwrap(),
            video_scores: array![0.1, 0.9],
        };
        let dets = localize(&pred, "v", 20.0, &LocalizeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(
            (dets[0].start, dets[0].end, dets[0].category),
            (6.0, 14.0, 1)
        );
        assert!((dets[0].score - 0.9).abs() < 1e-12);

        let none = VideoPrediction {
            video_scores: array![0.1, 0.2],
            ..pred
        };
        assert!(localize(&none, "v", 20.0, &LocalizeConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(LocalizeConfig::default().validate().is_ok());
        let unsorted = LocalizeConfig {
            tag_thresholds: vec![0.5, 0.3],
            ..LocalizeConfig::default()
        };
        assert!(unsorted.validate().is_err());
        let tau = LocalizeConfig {
            tau: 1.0,
            ..LocalizeConfig::default()
        };
        assert!(tau.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn runs_match_enumeration(
            a in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], 1..=12),
            theta in 0.01..1.0f64,
        ) {
            prop_assert_eq!(tag_runs(&a, theta), brute_force_runs(&a, theta));
        }

        #[test]
        fn nms_matches_quadratic_greedy(
            raw in prop::collection::vec((0u8..10, 1u8..5, 0u8..5), 0..=8),
            thr in prop_oneof![Just(0.5), 0.0..1.0f64],
        ) {
            let dets: Vec<Detection> = raw
                .iter()
                .map(|&(s, l, sc)| det(s as f64, (s + l) as f64, sc as f64 / 4.0))
                .collect();
            let kept = nms(dets.clone(), thr);
            prop_assert_eq!(&kept, &brute_force_nms(&dets, thr));
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(dets.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(temporal_iou((a.start, a.end), (b.start, b.end)) <= thr);
                }
            }
        }

        #[test]
        fn normalization_ignores_positive_affine_maps(
            v in prop::collection::vec(-5.0..5.0f64, 2..20),
            scale in 0.1..10.0f64,
            shift in -10.0..10.0f64,
        ) {
            let base = minmax_normalize(ndarray::ArrayView1::from(&v[..]));
            let mapped: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
            let got = minmax_normalize(ndarray::ArrayView1::from(&mapped[..]));
            for (a, b) in base.iter().zip(&got) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn widening_into_zeros_lowers_score(
            inner in prop::collection::vec(0.01..1.0f64, 1..6),
            pad in 1usize..4,
            vs in 0.01..1.0f64,
        ) {
            let mut a = inner.clone();
            a.extend(std::iter::repeat_n(0.0, pad));
            let narrow = score_proposal(&a, 0, inner.len(), vs).unwrap();
            let wide = score_proposal(&a, 0, a.len(), vs).unwrap();
            prop_assert!(wide < narrow);
        }

        #[test]
        fn detections_lie_within_video(
            cas in prop::collection::vec(-3.0..3.0f64, 12),
            duration in 1.0..100.0f64,
        ) {
            let pred = VideoPrediction {
                cas: ClassActivationSequence::new(Array2::from_shape_vec((6, 2), cas).unwrap()).unwrap(),
                video_scores: array![0.6, 0.4],
            };
            for d in localize(&pred, "v", duration, &LocalizeConfig::default()).unwrap() {
                prop_assert!(0.0 <= d.start && d.start < d.end && d.end <= duration + 1e-9);
            }
        }
    }
}
