//! Video records, snippet feature sequences, labels and synthetic corpora.
//!
//! Snippet `t` (0-based) of a video with `T` snippets spans
//! `[t * duration / T, (t + 1) * duration / T]` seconds. Every module that
//! converts between snippet indices and seconds goes through
//! [`snippet_to_seconds`] and [`seconds_to_snippet`].

mod features;
mod manifest;
mod synthetic;

use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};

use crate::error::{EcmError, Result};

pub use features::{load_features, read_features, write_features};
pub use manifest::{load_manifest, load_videos, write_manifest, Manifest};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};

/// A ground-truth action instance, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub start: f64,
    pub end: f64,
    pub category: usize,
}

/// Video metadata. Labels are category indices into the manifest's
/// category list, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration: f64,
    pub feature_path: PathBuf,
    pub labels: Vec<usize>,
    pub ground_truth: Vec<GtSegment>,
}

impl VideoRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        for seg in &self.ground_truth {
            if seg.end < seg.start {
                return Err("segment end before start".to_string());
            }
            if seg.end == seg.start {
                return Err("empty segment".to_string());
            }
            if seg.start < 0.0 || seg.end > self.duration {
                return Err(format!(
                    "segment [{}, {}] outside [0, {}]",
                    seg.start, seg.end, self.duration
                ));
            }
            if !self.labels.contains(&seg.category) {
                return Err(format!(
                    "segment category {} missing from video labels",
                    seg.category
                ));
            }
        }
        Ok(())
    }

    pub fn label(&self, num_categories: usize) -> Result<VideoLabel> {
        VideoLabel::from_indices(num_categories, &self.labels)
    }
}

/// Per-snippet features of one video, `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Array2<f64>,
}

impl FeatureSequence {
    /// Minimum snippet count: fold-wise aggregation needs three folds.
    pub const MIN_SNIPPETS: usize = 3;

    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < Self::MIN_SNIPPETS {
            return Err(EcmError::Shape(format!(
                "feature sequence needs at least {} snippets, got {}",
                Self::MIN_SNIPPETS,
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(EcmError::Shape("feature dimension is zero".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(EcmError::NonFinite(format!(
                "feature value at flat index {pos}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn snippets(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.values.row(t)
    }
}

/// Binary video-level label `y` over `C` categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoLabel {
    positives: Vec<bool>,
}

impl VideoLabel {
    /// Builds a label with at least one positive category.
    pub fn from_indices(num_categories: usize, indices: &[usize]) -> Result<Self> {
        let mut positives = vec![false; num_categories];
        for &c in indices {
            if c >= num_categories {
                return Err(EcmError::Label(format!(
                    "category {c} out of range for {num_categories} categories"
                )));
            }
            positives[c] = true;
        }
        Self::from_mask(positives)
    }

    pub fn from_mask(positives: Vec<bool>) -> Result<Self> {
        if !positives.iter().any(|&p| p) {
            return Err(EcmError::Label("label has no positive category".into()));
        }
        Ok(Self { positives })
    }

    pub fn num_categories(&self) -> usize {
        self.positives.len()
    }

    pub fn is_positive(&self, c: usize) -> bool {
        self.positives[c]
    }

    /// Number of positive categories, `k`.
    pub fn positive_count(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.positives
            .iter()
            .enumerate()
            .filter_map(|(c, &p)| p.then_some(c))
    }

    /// `y / sum(y)`.
    pub fn normalized(&self) -> Vec<f64> {
        let k = self.positive_count() as f64;
        self.positives
            .iter()
            .map(|&p| if p { 1.0 / k } else { 0.0 })
            .collect()
    }
}

/// A record together with its loaded features.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub record: VideoRecord,
    pub features: FeatureSequence,
}

/// Start and end seconds of the half-open snippet range `[first, last_exclusive)`.
pub fn snippet_to_seconds(
    first: usize,
    last_exclusive: usize,
    snippets: usize,
    duration: f64,
) -> (f64, f64) {
    let step = duration / snippets as f64;
    (first as f64 * step, last_exclusive as f64 * step)
}

/// Index of the snippet containing time `t` (clamped to the valid range).
pub fn seconds_to_snippet(t: f64, snippets: usize, duration: f64) -> usize {
    let idx = (t / duration * snippets as f64).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(snippets - 1)
    }
}

/// Per-snippet ground-truth category (`None` for background). A snippet
/// belongs to a segment when its midpoint lies inside it.
pub fn snippet_labels(record: &VideoRecord, snippets: usize) -> Vec<Option<usize>> {
    let step = record.duration / snippets as f64;
    (0..snippets)
        .map(|t| {
            let mid = (t as f64 + 0.5) * step;
            record
                .ground_truth
                .iter()
                .find(|g| g.start <= mid && mid < g.end)
                .map(|g| g.category)
        })
        .collect()
}

/// Resamples to `target` snippets by nearest-index selection: output row `i`
/// is input row `round(i * (T - 1) / (target - 1))`.
pub fn resample_snippets(seq: &FeatureSequence, target: usize) -> Result<FeatureSequence> {
    if target < FeatureSequence::MIN_SNIPPETS {
        return Err(EcmError::InvalidArgument(format!(
            "target snippet count must be >= {}, got {target}",
            FeatureSequence::MIN_SNIPPETS
        )));
    }
    let t = seq.snippets();
    if t == target {
        return Ok(seq.clone());
    }
    let indices: Vec<usize> = (0..target).map(|i| resample_index(i, t, target)).collect();
    let values = seq.values().select(ndarray::Axis(0), &indices);
    FeatureSequence::new(values)
}

// Round-half-up in integer arithmetic.
fn resample_index(i: usize, from: usize, to: usize) -> usize {
    let num = 2 * i * (from - 1) + (to - 1);
    num / (2 * (to - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(rows: usize, dim: usize) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((rows, dim), |(t, d)| {
            (t * 10 + d) as f64
        }))
        .unwrap()
    }

    #[test]
    fn resample_identity_at_same_length() {
        let s = seq(100, 3);
        assert_eq!(resample_snippets(&s, 100).unwrap(), s);
    }

    #[test]
    fn resample_five_to_three_picks_even_rows() {
        let s = seq(5, 2);
        let r = resample_snippets(&s, 3).unwrap();
        assert_eq!(r.row(0), s.row(0));
        assert_eq!(r.row(1), s.row(2));
        assert_eq!(r.row(2), s.row(4));
    }

    #[test]
    fn resample_rejects_short_target() {
        assert!(resample_snippets(&seq(5, 2), 2).is_err());
    }

    proptest! {
        #[test]
        fn resample_is_a_projection(t in 3usize..200, target in 3usize..200) {
            let s = seq(t, 2);
            let once = resample_snippets(&s, target).unwrap();
            let twice = resample_snippets(&once, target).unwrap();
            prop_assert_eq!(once.snippets(), target);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn feature_sequence_rejects_short_or_nonfinite() {
        assert!(FeatureSequence::new(Array2::zeros((2, 4))).is_err());
        assert!(FeatureSequence::new(array![[1.0], [f64::NAN], [0.0]]).is_err());
    }

    #[test]
    fn label_normalization_and_count() {
        let y = VideoLabel::from_indices(4, &[0, 2]).unwrap();
        assert_eq!(y.positive_count(), 2);
        assert_eq!(y.normalized(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(y.positives().collect::<Vec<_>>(), vec![0, 2]);
        assert!(VideoLabel::from_indices(4, &[]).is_err());
        assert!(VideoLabel::from_indices(4, &[4]).is_err());
    }

    #[test]
    fn snippet_seconds_mapping() {
        assert_eq!(snippet_to_seconds(1, 3, 6, 6.0), (1.0, 3.0));
        assert_eq!(snippet_to_seconds(0, 10, 10, 25.0), (0.0, 25.0));
        assert_eq!(seconds_to_snippet(2.5, 10, 10.0), 2);
        assert_eq!(seconds_to_snippet(10.0, 10, 10.0), 9);
    }

    #[test]
    fn record_validation() {
        let mut rec = VideoRecord {
            video_id: "v".into(),
            duration: 10.0,
            feature_path: "v.ecmf".into(),
            labels: vec![1],
            ground_truth: vec![GtSegment {
                start: 5.0,
                end: 3.0,
                category: 1,
            }],
        };
        assert_eq!(rec.validate().unwrap_err(), "segment end before start");
        rec.ground_truth[0] = GtSegment {
            start: 3.0,
            end: 11.0,
            category: 1,
        };
        assert!(rec.validate().is_err());
        rec.ground_truth[0].end = 5.0;
        assert!(rec.validate().is_ok());
        rec.ground_truth[0].category = 0;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn snippet_labels_use_midpoints() {
        let rec = VideoRecord {
            video_id: "v".into(),
            duration: 6.0,
            feature_path: "v.ecmf".into(),
            labels: vec![0],
            ground_truth: vec![GtSegment {
                start: 1.0,
                end: 3.0,
                category: 0,
            }],
        };
        assert_eq!(
            snippet_labels(&rec, 6),
            vec![None, Some(0), Some(0), None, None, None]
        );
    }
}
