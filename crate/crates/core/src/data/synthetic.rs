//! Synthetic corpora with planted action instances.
//!
//! Every video is background interrupted by one or more action instances.
//! Action snippets are their class prototype plus isotropic Gaussian noise
//! with standard deviation `1 / action_snr`; background snippets use a shared
//! background prototype with the same noise. Prototypes are drawn uniformly
//! on the unit sphere and kept pairwise non-collinear.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    snippet_to_seconds, write_features, write_manifest, FeatureSequence, GtSegment, Manifest,
    Video, VideoRecord,
};
use crate::error::{EcmError, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub categories: usize,
    pub feature_dim: usize,
    pub snippets: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub action_snr: f64,
    pub max_instances_per_video: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            categories: 5,
            feature_dim: 32,
            snippets: 60,
            n_train: 160,
            n_test: 40,
            action_snr: 4.0,
            max_instances_per_video: 3,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(EcmError::Config {
                field: format!("synthetic.{field}"),
                message: message.to_string(),
            })
        };
        if self.categories < 2 {
            return bad("categories", "must be >= 2");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim", "must be >= 2");
        }
        if self.snippets < 9 {
            return bad("snippets", "must be >= 9");
        }
        if self.n_train < 1 || self.n_test < 1 {
            return bad("n_train", "video counts must be >= 1");
        }
        if self.max_instances_per_video < 1 {
            return bad("max_instances_per_video", "must be >= 1");
        }
        if !(self.action_snr > 0.0 && self.action_snr.is_finite()) {
            return bad("action_snr", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub categories: Vec<String>,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
    /// `(C + 1) x D`; the last row is the background prototype.
    pub prototypes: Array2<f64>,
}

// Largest |cos| allowed between two prototypes.
const MAX_ABS_COSINE: f64 = 0.95;
const PROTOTYPE_ATTEMPTS: usize = 100_000;

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let prototypes = draw_prototypes(spec)?;
    let categories = (0..spec.categories)
        .map(|c| format!("class_{c:02}"))
        .collect();
    let make = |split: &str, n: usize| -> Result<Vec<Video>> {
        (0..n)
            .map(|i| generate_video(spec, &prototypes, split, i))
            .collect()
    };
    Ok(SyntheticCorpus {
        categories,
        train: make("train", spec.n_train)?,
        test: make("test", spec.n_test)?,
        prototypes,
    })
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn draw_prototypes(spec: &SyntheticCorpusSpec) -> Result<Array2<f64>> {
    let mut rng = seed::rng(spec.seed, "synthetic.prototypes");
    let n = spec.categories + 1;
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(EcmError::InvalidArgument(format!(
                "could not draw {n} non-collinear prototypes in dimension {}",
                spec.feature_dim
            )));
        }
        let candidate = unit_vector(&mut rng, spec.feature_dim);
        if rows
            .iter()
            .all(|r| r.dot(&candidate).abs() < MAX_ABS_COSINE)
        {
            rows.push(candidate);
        }
    }
    let mut out = Array2::zeros((n, spec.feature_dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    Ok(out)
}

/// Planted instances as half-open snippet ranges with categories, sorted and
/// separated by at least one background snippet. Every instance in a video
/// shares one category, so the background between instances is true
/// background rather than another action.
fn plant_instances(rng: &mut impl Rng, spec: &SyntheticCorpusSpec) -> Vec<(usize, usize, usize)> {
    let t = spec.snippets;
    let max_n = spec.max_instances_per_video.min(t / 5).max(1);
    let n = rng.random_range(1..=max_n);
    let slot = t / n;
    let category = rng.random_range(0..spec.categories);
    let min_len = (slot / 4).max(2);
    let max_len = (slot * 2 / 3).max(min_len);
    (0..n)
        .map(|i| {
            let len = rng.random_range(min_len..=max_len);
            let offset = rng.random_range(1..=slot - len - 1);
            let start = i * slot + offset;
            (start, start + len, category)
        })
        .collect()
}

fn generate_video(
    spec: &SyntheticCorpusSpec,
    prototypes: &Array2<f64>,
    split: &str,
    index: usize,
) -> Result<Video> {
    let video_id = format!("{split}_{index:04}");
    let mut rng = seed::rng(spec.seed, &format!("synthetic.{video_id}"));
    let t = spec.snippets;
    let duration = t as f64 * rng.random_range(0.5..2.0);
    let instances = plant_instances(&mut rng, spec);

    let background = spec.categories;
    let mut row_class = vec![background; t];
    for &(s, e, c) in &instances {
        row_class[s..e].fill(c);
    }
    let sigma = 1.0 / spec.action_snr;
    let mut values = Array2::zeros((t, spec.feature_dim));
    for (ti, &cls) in row_class.iter().enumerate() {
        for d in 0..spec.feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            // Stored as f32 on disk; round now so in-memory and on-disk corpora agree.
            values[[ti, d]] = (prototypes[[cls, d]] + sigma * noise) as f32 as f64;
        }
    }

    let mut labels: Vec<usize> = instances.iter().map(|i| i.2).collect();
    labels.sort_unstable();
    labels.dedup();
    let ground_truth = instances
        .iter()
        .map(|&(s, e, c)| {
            let (start, end) = snippet_to_seconds(s, e, t, duration);
            GtSegment {
                start,
                end,
                category: c,
            }
        })
        .collect();
    let record = VideoRecord {
        video_id: video_id.clone(),
        duration,
        feature_path: PathBuf::from("features").join(format!("{video_id}.ecmf")),
        labels,
        ground_truth,
    };
    debug_assert!(record.validate().is_ok());
    Ok(Video {
        record,
        features: FeatureSequence::new(values)?,
    })
}

impl SyntheticCorpus {
    /// Per-snippet class of each planted row (`C` marks background).
    pub fn snippet_classes(&self, video: &Video) -> Vec<usize> {
        let t = video.features.snippets();
        super::snippet_labels(&video.record, t)
            .into_iter()
            .map(|l| l.unwrap_or(self.categories.len()))
            .collect()
    }

    /// Writes features plus `train.jsonl` and `test.jsonl` under `dir`, and
    /// returns the two manifest paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let write_split = |name: &str, videos: &[Video]| -> Result<PathBuf> {
            let mut records = Vec::with_capacity(videos.len());
            for v in videos {
                let mut rec = v.record.clone();
                rec.feature_path = dir.join(&v.record.feature_path);
                write_features(&rec.feature_path, &v.features)?;
                records.push(rec);
            }
            let path = dir.join(format!("{name}.jsonl"));
            write_manifest(
                &path,
                &Manifest {
                    categories: self.categories.clone(),
                    records,
                },
            )?;
            Ok(path)
        };
        Ok((
            write_split("train", &self.train)?,
            write_split("test", &self.test)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            categories: 3,
            feature_dim: 8,
            snippets: 30,
            n_train: 12,
            n_test: 4,
            action_snr: 4.0,
            max_instances_per_video: 3,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec {
            seed: 12,
            ..small()
        })
        .unwrap();
        assert_ne!(a.train[0].features, c.train[0].features);
    }

    #[test]
    fn single_instance_single_video() {
        let spec = SyntheticCorpusSpec {
            max_instances_per_video: 1,
            n_train: 1,
            ..small()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), 1);
        let rec = &corpus.train[0].record;
        assert_eq!(rec.ground_truth.len(), 1);
        assert_eq!(rec.labels, vec![rec.ground_truth[0].category]);
    }

    #[test]
    fn segments_disjoint_and_labels_match() {
        let corpus = generate_synthetic_corpus(&small()).unwrap();
        for v in corpus.train.iter().chain(&corpus.test) {
            let rec = &v.record;
            assert!(rec.validate().is_ok());
            for w in rec.ground_truth.windows(2) {
                assert!(w[0].end < w[1].start);
            }
            let mut cats: Vec<usize> = rec.ground_truth.iter().map(|g| g.category).collect();
            cats.sort_unstable();
            cats.dedup();
            assert_eq!(cats, rec.labels);
        }
    }

    #[test]
    fn prototypes_are_unit_and_non_collinear() {
        let corpus = generate_synthetic_corpus(&small()).unwrap();
        let p = &corpus.prototypes;
        for i in 0..p.nrows() {
            assert!((p.row(i).dot(&p.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(p.row(i).dot(&p.row(j)).abs() < MAX_ABS_COSINE);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        for bad in [
            SyntheticCorpusSpec {
                categories: 1,
                ..small()
            },
            SyntheticCorpusSpec {
                feature_dim: 1,
                ..small()
            },
            SyntheticCorpusSpec {
                snippets: 8,
                ..small()
            },
            SyntheticCorpusSpec {
                n_test: 0,
                ..small()
            },
            SyntheticCorpusSpec {
                action_snr: 0.0,
                ..small()
            },
        ] {
            assert!(generate_synthetic_corpus(&bad).is_err());
        }
    }

    #[test]
    fn minimum_length_videos_are_generated() {
        let spec = SyntheticCorpusSpec {
            snippets: 9,
            ..small()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        assert!(corpus
            .train
            .iter()
            .all(|v| v.record.ground_truth.len() == 1));
    }

    #[test]
    fn nearest_prototype_separates_clean_snippets() {
        let spec = SyntheticCorpusSpec {
            action_snr: 10.0,
            ..SyntheticCorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let p = &corpus.prototypes;
        let (mut hit, mut total) = (0usize, 0usize);
        for v in corpus.train.iter().chain(&corpus.test) {
            let truth = corpus.snippet_classes(v);
            for (row, &want) in v.features.values().rows().into_iter().zip(&truth) {
                let nearest = (0..p.nrows())
                    .min_by(|&a, &b| {
                        let da = (&row - &p.row(a)).mapv(|x| x * x).sum();
                        let db = (&row - &p.row(b)).mapv(|x| x * x).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hit += usize::from(nearest == want);
                total += 1;
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
    }
}
