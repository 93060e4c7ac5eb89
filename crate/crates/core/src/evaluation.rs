//! Detection metrics and two-stream ensemble baselines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{snippet_labels, Video, VideoRecord};
use crate::error::{EcmError, Result};
use crate::localization::nms_per_category;
pub use crate::localization::{temporal_iou, Detection};
use crate::model::{pre_stream_score, ClassActivationSequence, VideoPrediction};

/// IoU thresholds `0.50, 0.55, ..., 0.95` for average mAP.
pub fn average_map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Parses `start:step:stop` (inclusive) or a comma-separated list.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || EcmError::InvalidArgument(format!("bad threshold list {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    let out: Vec<f64> = match parts.as_slice() {
        [start, step, stop] => {
            let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
            if !(step > 0.0) || stop < start {
                return Err(bad());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            // Rounded to kill accumulation noise such as 0.30000000000000004.
            (0..=n)
                .map(|i| ((start + step * i as f64) * 1e9).round() / 1e9)
                .collect()
        }
        [list] => list.split(',').map(num).collect::<Result<_>>()?,
        _ => return Err(bad()),
    };
    if out.is_empty() || out.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(bad());
    }
    Ok(out)
}

/// Ground-truth segments of `videos` in the detection record schema, with
/// score 1.
pub fn ground_truth_records(videos: &[VideoRecord]) -> Vec<Detection> {
    videos
        .iter()
        .flat_map(|v| {
            v.ground_truth.iter().map(|g| Detection {
                video_id: v.video_id.clone(),
                start: g.start,
                end: g.end,
                category: g.category,
                score: 1.0,
            })
        })
        .collect()
}

pub fn write_segments(path: &Path, segments: &[Detection]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EcmError::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(segments)?;
    std::fs::write(path, json).map_err(|e| EcmError::io(path, e))
}

pub fn read_segments(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| EcmError::io(path, e))?;
    let segs: Vec<Detection> = serde_json::from_str(&text)?;
    for s in &segs {
        if !(s.start.is_finite() && s.end.is_finite() && s.score.is_finite() && s.start < s.end) {
            return Err(EcmError::InvalidArgument(format!(
                "{}: invalid segment {s:?}",
                path.display()
            )));
        }
    }
    Ok(segs)
}

/// Interpolated average precision for one category. Detections are matched
/// in descending score order, each to the unmatched ground truth of the same
/// video with the highest IoU, if that IoU reaches `iou_thr`. Returns `None`
/// when there is no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[Detection], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for &g in by_video.get(d.video_id.as_str()).into_iter().flatten() {
            if matched[g] {
                continue;
            }
            let iou = temporal_iou((d.start, d.end), (gts[g].start, gts[g].end));
            if iou >= iou_thr && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            matched[g] = true;
        }
        hits.push(best.is_some());
    }
    Some(interpolated_ap(&hits, gts.len()))
}

/// Area under the precision envelope for a ranked hit list.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub iou: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub by_threshold: Vec<ThresholdMap>,
    /// `per_class[c][i]`: AP of category `c` at `by_threshold[i]`; `None` for
    /// categories without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean mAP over 0.50:0.05:0.95.
    pub average_map: f64,
    pub frame_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.by_threshold
            .iter()
            .find(|t| (t.iou - iou).abs() < 1e-9)
            .map(|t| t.map)
    }

    /// `threshold,mAP` rows, then `average`, then `frame_accuracy` if known.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("threshold,mAP\n");
        for t in &self.by_threshold {
            let _ = writeln!(out, "{:.2},{:.6}", t.iou, t.map);
        }
        let _ = writeln!(out, "average,{:.6}", self.average_map);
        if let Some(f) = self.frame_accuracy {
            let _ = writeln!(out, "frame_accuracy,{f:.6}");
        }
        out
    }

    /// `category,AP@t1,AP@t2,...`; empty cells for categories without ground truth.
    pub fn per_class_csv(&self, names: &[String]) -> String {
        let mut out = String::from("category");
        for t in &self.by_threshold {
            let _ = write!(out, ",AP@{:.2}", t.iou);
        }
        out.push('\n');
        for (c, row) in self.per_class.iter().enumerate() {
            out.push_str(names.get(c).map_or("?", String::as_str));
            for ap in row {
                match ap {
                    Some(v) => {
                        let _ = write!(out, ",{v:.6}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// mAP over categories with ground truth; zero when none has any.
fn mean_ap(per_class: impl Iterator<Item = Option<f64>>) -> f64 {
    let aps: Vec<f64> = per_class.flatten().collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn split_by_category(segs: &[Detection], categories: usize) -> Vec<Vec<Detection>> {
    let mut out = vec![Vec::new(); categories];
    for s in segs {
        if s.category < categories {
            out[s.category].push(s.clone());
        }
    }
    out
}

pub fn map_evaluate(
    dets: &[Detection],
    gts: &[Detection],
    categories: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if let Some(bad) = dets.iter().chain(gts).find(|s| s.category >= categories) {
        return Err(EcmError::InvalidArgument(format!(
            "segment in {} has category {} but there are {categories}",
            bad.video_id, bad.category
        )));
    }
    let det_c = split_by_category(dets, categories);
    let gt_c = split_by_category(gts, categories);
    let ap = |c: usize, t: f64| average_precision(&det_c[c], &gt_c[c], t);
    let per_class: Vec<Vec<Option<f64>>> = (0..categories)
        .map(|c| thresholds.iter().map(|&t| ap(c, t)).collect())
        .collect();
    let by_threshold = thresholds
        .iter()
        .enumerate()
        .map(|(i, &iou)| ThresholdMap {
            iou,
            map: mean_ap(per_class.iter().map(|row| row[i])),
        })
        .collect();
    let avg_range = average_map_thresholds();
    let average_map = avg_range
        .iter()
        .map(|&t| mean_ap((0..categories).map(|c| ap(c, t))))
        .sum::<f64>()
        / avg_range.len() as f64;
    Ok(EvalReport {
        by_threshold,
        per_class,
        average_map,
        frame_accuracy: None,
    })
}

/// Snippet-level classification accuracy over ground-truth action snippets.
/// Categories scoring below `tau` are discarded per video; the prediction at
/// a snippet is the argmax over the surviving CAS columns, ties to the lower
/// index. Returns `None` when no video has an action snippet.
pub fn frame_accuracy(items: &[(&VideoPrediction, &VideoRecord)], tau: f64) -> Result<Option<f64>> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (pred, record) in items {
        let scores = pred.cas.scores();
        if pred.video_scores.len() != scores.ncols() {
            return Err(EcmError::Shape(format!(
                "video {}: {} scores for {} CAS columns",
                record.video_id,
                pred.video_scores.len(),
                scores.ncols()
            )));
        }
        let kept: Vec<usize> = (0..scores.ncols())
            .filter(|&c| pred.video_scores[c] >= tau)
            .collect();
        for (t, label) in snippet_labels(record, scores.nrows())
            .into_iter()
            .enumerate()
        {
            let Some(truth) = label else { continue };
            total += 1;
            let mut best: Option<usize> = None;
            for &c in &kept {
                if best.is_none_or(|b| scores[[t, c]] > scores[[t, b]]) {
                    best = Some(c);
                }
            }
            correct += (best == Some(truth)) as usize;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// `lambda * a + (1 - lambda) * b`.
pub fn fuse_cas(
    a: &ClassActivationSequence,
    b: &ClassActivationSequence,
    lambda: f64,
) -> Result<ClassActivationSequence> {
    if a.scores().dim() != b.scores().dim() {
        return Err(EcmError::Shape(format!(
            "cannot fuse CAS of shapes {:?} and {:?}",
            a.scores().dim(),
            b.scores().dim()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EcmError::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    ClassActivationSequence::new(a.scores() * lambda + b.scores() * (1.0 - lambda))
}

/// A prediction whose video scores are re-derived from `cas` by top-k
/// pooling, as for a CAS that no single stream produced.
pub fn prediction_from_cas(cas: ClassActivationSequence, k_ratio: f64) -> Result<VideoPrediction> {
    let (_, video_scores) = pre_stream_score(&cas, k_ratio)?;
    Ok(VideoPrediction { cas, video_scores })
}

/// Concatenates two detection sets and prunes duplicates per category.
pub fn merge_detections(a: &[Detection], b: &[Detection], nms_iou: f64) -> Vec<Detection> {
    nms_per_category(a.iter().chain(b).cloned().collect(), nms_iou)
}

/// Frame-accuracy input pairs for `videos`.
pub fn frame_items<'a>(
    preds: &'a [VideoPrediction],
    videos: &'a [Video],
) -> Vec<(&'a VideoPrediction, &'a VideoRecord)> {
    preds.iter().zip(videos.iter().map(|v| &v.record)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GtSegment;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn seg(video: &str, start: f64, end: f64, category: usize, score: f64) -> Detection {
        Detection {
            video_id: video.into(),
            start,
            end,
            category,
            score,
        }
    }

    // Quadratic matcher: scans every ground truth for every detection.
    fn reference_ap(dets: &[Detection], gts: &[Detection], thr: f64) -> Option<f64> {
        if gts.is_empty() {
            return None;
        }
        let mut sorted: Vec<&Detection> = dets.iter().collect();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; gts.len()];
        let mut hits = Vec::new();
        for d in sorted {
            let mut best = None;
            let mut best_iou = -1.0;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video_id != d.video_id {
                    continue;
                }
                let iou = temporal_iou((d.start, d.end), (g.start, g.end));
                if iou >= thr && iou > best_iou {
                    best_iou = iou;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            hits.push(best.is_some());
        }
        // Envelope by brute force: max precision at any rank with recall >= r.
        let n = hits.len();
        let prec: Vec<f64> = (0..n)
            .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
            .collect();
        let rec: Vec<f64> = (0..n)
            .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / gts.len() as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { rec[i - 1] };
            let env = (i..n).map(|j| prec[j]).fold(0.0, f64::max);
            ap += (rec[i] - prev) * env;
        }
        Some(ap)
    }

    #[test]
    fn ap_examples() {
        let gt = [seg("v", 0.0, 2.0, 0, 1.0)];
        assert_eq!(
            average_precision(&[seg("v", 0.0, 2.0, 0, 0.5)], &gt, 0.5),
            Some(1.0)
        );
        let dets = [seg("v", 5.0, 6.0, 0, 0.9), seg("v", 0.0, 2.0, 0, 0.8)];
        assert_eq!(average_precision(&dets, &gt, 0.5), Some(0.5));
        assert_eq!(average_precision(&[], &gt, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &[], 0.5), None);
    }

    #[test]
    fn detection_in_wrong_video_does_not_match() {
        let gt = [seg("a", 0.0, 2.0, 0, 1.0)];
        assert_eq!(
            average_precision(&[seg("b", 0.0, 2.0, 0, 1.0)], &gt, 0.5),
            Some(0.0)
        );
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let gts = vec![
            seg("v", 0.0, 2.0, 0, 1.0),
            seg("v", 3.0, 5.0, 1, 1.0),
            seg("w", 1.0, 4.0, 0, 1.0),
        ];
        let r = map_evaluate(&gts, &gts, 3, &[0.1, 0.5, 0.9]).unwrap();
        assert!(r.by_threshold.iter().all(|t| t.map == 1.0));
        assert_eq!(r.average_map, 1.0);
        assert_eq!(r.per_class[2], vec![None, None, None]);
        assert_eq!(r.map_at(0.5), Some(1.0));
    }

    #[test]
    fn out_of_range_category_is_an_error() {
        let gts = vec![seg("v", 0.0, 2.0, 4, 1.0)];
        assert!(map_evaluate(&[], &gts, 3, &[0.5]).is_err());
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!(
            parse_thresholds("0.1:0.1:0.7").unwrap(),
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
        );
        assert_eq!(parse_thresholds("0.5,0.75").unwrap(), vec![0.5, 0.75]);
        assert_eq!(
            parse_thresholds("0.5:0.05:0.95").unwrap(),
            average_map_thresholds()
                .iter()
                .map(|t| (t * 1e9).round() / 1e9)
                .collect::<Vec<_>>()
        );
        assert!(parse_thresholds("x").is_err());
        assert!(parse_thresholds("0.5:0:0.9").is_err());
        assert!(parse_thresholds("1.5").is_err());
    }

    fn record(gt: &[(f64, f64, usize)], duration: f64) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            duration,
            feature_path: "f".into(),
            labels: vec![],
            ground_truth: gt
                .iter()
                .map(|&(start, end, category)| GtSegment {
                    start,
                    end,
                    category,
                })
                .collect(),
        }
    }

    #[test]
    fn one_hot_oracle_is_perfect() {
        // 6 snippets over 6 s: snippets 1-2 are class 0, snippet 4 class 1.
        let rec = record(&[(1.0, 3.0, 0), (4.0, 5.0, 1)], 6.0);
        let mut cas = Array2::zeros((6, 2));
        cas[[1, 0]] = 1.0;
        cas[[2, 0]] = 1.0;
        cas[[4, 1]] = 1.0;
        let pred = VideoPrediction {
            cas: ClassActivationSequence::new(cas).unwrap(),
            video_scores: array![0.5, 0.5],
        };
        assert_eq!(frame_accuracy(&[(&pred, &rec)], 0.25).unwrap(), Some(1.0));

        // Dropping class 1 by tau makes its snippet wrong.
        let low = VideoPrediction {
            video_scores: array![0.5, 0.1],
            ..pred.clone()
        };
        let acc = frame_accuracy(&[(&low, &rec)], 0.25).unwrap().unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let rec0 = record(&[(0.0, 3.0, 0)], 3.0);
        let rec1 = record(&[(0.0, 3.0, 1)], 3.0);
        let pred = VideoPrediction {
            cas: ClassActivationSequence::new(Array2::ones((3, 2))).unwrap(),
            video_scores: array![0.5, 0.5],
        };
        assert_eq!(frame_accuracy(&[(&pred, &rec0)], 0.25).unwrap(), Some(1.0));
        assert_eq!(frame_accuracy(&[(&pred, &rec1)], 0.25).unwrap(), Some(0.0));
        assert_eq!(
            frame_accuracy(&[(&pred, &record(&[], 3.0))], 0.25).unwrap(),
            None
        );
    }

    #[test]
    fn fusion_endpoints_and_linearity() {
        let a = ClassActivationSequence::new(array![[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let b = ClassActivationSequence::new(array![[0.0, 4.0], [2.0, -1.0]]).unwrap();
        assert_eq!(fuse_cas(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse_cas(&a, &b, 0.0).unwrap(), b);
        let sum = fuse_cas(&a, &b, 0.3).unwrap().scores() + fuse_cas(&b, &a, 0.3).unwrap().scores();
        let direct = a.scores() + b.scores();
        assert!((sum - direct).iter().all(|v| v.abs() < 1e-15));
        let c = ClassActivationSequence::new(Array2::zeros((3, 2))).unwrap();
        assert!(fuse_cas(&a, &c, 0.5).is_err());
    }

    #[test]
    fn merge_examples() {
        let a = vec![seg("v", 0.0, 2.0, 0, 0.9), seg("v", 5.0, 7.0, 1, 0.4)];
        let mut merged = merge_detections(&a, &a, 0.5);
        merged.sort_by(|x, y| x.start.total_cmp(&y.start));
        assert_eq!(merged, a);
        let b = vec![seg("v", 10.0, 12.0, 0, 0.3)];
        assert_eq!(merge_detections(&a, &b, 0.5).len(), 3);
    }

    #[test]
    fn segments_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let segs = vec![seg("v", 0.0, 2.5, 1, 0.75)];
        write_segments(&path, &segs).unwrap();
        assert_eq!(read_segments(&path).unwrap(), segs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"label\": 1"));
        std::fs::write(
            &path,
            r#"[{"video_id":"v","start":3,"end":1,"label":0,"score":1}]"#,
        )
        .unwrap();
        assert!(read_segments(&path).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<Detection>, Vec<Detection>)> {
        let s = || {
            (0u8..5, 0u8..20, 1u8..6, 0u8..2).prop_map(move |(v, st, l, c)| {
                seg(
                    &format!("v{v}"),
                    st as f64,
                    (st + l) as f64,
                    c as usize,
                    0.0,
                )
            })
        };
        (
            prop::collection::vec((s(), 0u8..8), 0..=10),
            prop::collection::vec(s(), 0..=6),
        )
            .prop_map(|(d, g)| {
                let dets = d
                    .into_iter()
                    .enumerate()
                    // Distinct scores keep the ranking unambiguous.
                    .map(|(i, (mut x, s))| {
                        x.score = s as f64 + i as f64 * 1e-3;
                        x
                    })
                    .collect();
                (dets, g)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn matches_quadratic_reference((dets, gts) in instance(), thr in 0.1..0.9f64) {
            for c in 0..2 {
                let d: Vec<Detection> = dets.iter().filter(|x| x.category == c).cloned().collect();
                let g: Vec<Detection> = gts.iter().filter(|x| x.category == c).cloned().collect();
                let (a, b) = (average_precision(&d, &g, thr), reference_ap(&d, &g, thr));
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }

        #[test]
        fn ap_ignores_monotone_score_transforms((dets, gts) in instance(), thr in 0.1..0.9f64) {
            let mapped: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: (d.score * 3.0).exp(), ..d.clone() })
                .collect();
            let a = map_evaluate(&dets, &gts, 2, &[thr]).unwrap();
            let b = map_evaluate(&mapped, &gts, 2, &[thr]).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn map_values_in_unit_interval((dets, gts) in instance()) {
            let r = map_evaluate(&dets, &gts, 2, &[0.3, 0.5, 0.7]).unwrap();
            prop_assert!(r.by_threshold.iter().all(|t| (0.0..=1.0).contains(&t.map)));
            prop_assert!((0.0..=1.0).contains(&r.average_map));
        }
    }
}
