//! JSON-lines manifests.
//!
//! The first non-empty line is a header declaring the ordered category list;
//! each following line describes one video:
//!
//! ```text
//! {"categories": ["run", "jump"]}
//! {"video_id": "v0", "duration": 6.0, "feature_path": "features/v0.ecmf",
//!  "labels": ["run"], "segments": [{"start": 1.0, "end": 3.0, "label": "run"}]}
//! ```
//!
//! Relative feature paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_features, GtSegment, Video, VideoRecord};
use crate::error::{EcmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    categories: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentLine {
    start: f64,
    end: f64,
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    video_id: String,
    duration: f64,
    feature_path: PathBuf,
    labels: Vec<String>,
    #[serde(default)]
    segments: Vec<SegmentLine>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| EcmError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let fail = |line: usize, message: String| EcmError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_no, header) = lines
        .next()
        .ok_or_else(|| fail(1, "missing category header".into()))?;
    let header: HeaderLine =
        serde_json::from_str(header).map_err(|e| fail(header_no, format!("header: {e}")))?;
    if header.categories.is_empty() {
        return Err(fail(header_no, "category list is empty".into()));
    }
    let categories = header.categories;
    let lookup = |name: &str, line: usize| {
        categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| fail(line, format!("unknown category `{name}`")))
    };

    let mut records = Vec::new();
    for (line_no, line) in lines {
        let raw: RecordLine =
            serde_json::from_str(line).map_err(|e| fail(line_no, e.to_string()))?;
        let mut labels = raw
            .labels
            .iter()
            .map(|l| lookup(l, line_no))
            .collect::<Result<Vec<_>>>()?;
        labels.sort_unstable();
        labels.dedup();
        let ground_truth = raw
            .segments
            .iter()
            .map(|s| {
                Ok(GtSegment {
                    start: s.start,
                    end: s.end,
                    category: lookup(&s.label, line_no)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let feature_path = if raw.feature_path.is_absolute() {
            raw.feature_path
        } else {
            base.join(raw.feature_path)
        };
        let record = VideoRecord {
            video_id: raw.video_id,
            duration: raw.duration,
            feature_path,
            labels,
            ground_truth,
        };
        record
            .validate()
            .map_err(|m| fail(line_no, format!("{m}, line {line_no}")))?;
        records.push(record);
    }
    Ok(Manifest {
        categories,
        records,
    })
}

/// Writes a manifest; feature paths are stored relative to `path`'s directory
/// when they live under it.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = serde_json::to_string(&HeaderLine {
        categories: manifest.categories.clone(),
    })?;
    out.push('\n');
    for rec in &manifest.records {
        let line = RecordLine {
            video_id: rec.video_id.clone(),
            duration: rec.duration,
            feature_path: rec
                .feature_path
                .strip_prefix(base)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| rec.feature_path.clone()),
            labels: rec
                .labels
                .iter()
                .map(|&c| manifest.categories[c].clone())
                .collect(),
            segments: rec
                .ground_truth
                .iter()
                .map(|g| SegmentLine {
                    start: g.start,
                    end: g.end,
                    label: manifest.categories[g.category].clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| EcmError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| EcmError::io(path, e))
}

/// Loads every record's features in parallel; output order follows the manifest.
pub fn load_videos(manifest: &Manifest) -> Result<Vec<Video>> {
    manifest
        .records
        .par_iter()
        .map(|record| {
            Ok(Video {
                features: load_features(record)?,
                record: record.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_line_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"categories": ["run", "jump"]}
{"video_id": "a", "duration": 10.0, "feature_path": "a.ecmf", "labels": ["jump", "run"], "segments": [{"start": 1.0, "end": 2.0, "label": "run"}]}
{"video_id": "b", "duration": 5.0, "feature_path": "/abs/b.ecmf", "labels": ["jump"]}
"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.categories, vec!["run", "jump"]);
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].video_id, "a");
        assert_eq!(m.records[0].labels, vec![0, 1]);
        assert_eq!(m.records[0].feature_path, dir.path().join("a.ecmf"));
        assert_eq!(m.records[1].labels, vec![1]);
        assert_eq!(m.records[1].feature_path, PathBuf::from("/abs/b.ecmf"));
        assert!(m.records[1].ground_truth.is_empty());
    }

    #[test]
    fn header_only_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "{\"categories\": [\"run\"]}\n");
        assert!(load_manifest(&p).unwrap().records.is_empty());
    }

    #[test]
    fn reversed_segment_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"categories": ["run"]}
{"video_id": "a", "duration": 10.0, "feature_path": "a.ecmf", "labels": ["run"], "segments": [{"start": 5.0, "end": 3.0, "label": "run"}]}
"#,
        );
        let msg = load_manifest(&p).unwrap_err().to_string();
        assert!(msg.contains("segment end before start, line 2"), "{msg}");
    }

    #[test]
    fn error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let unknown = write(
            dir.path(),
            "{\"categories\": [\"run\"]}\n{\"video_id\": \"a\", \"duration\": 1.0, \"feature_path\": \"a\", \"labels\": [\"swim\"]}\n",
        );
        assert!(load_manifest(&unknown)
            .unwrap_err()
            .to_string()
            .contains("unknown category `swim`"));

        let outside = write(
            dir.path(),
            "{\"categories\": [\"run\"]}\n{\"video_id\": \"a\", \"duration\": 4.0, \"feature_path\": \"a\", \"labels\": [\"run\"], \"segments\": [{\"start\": 1.0, \"end\": 5.0, \"label\": \"run\"}]}\n",
        );
        assert!(load_manifest(&outside).is_err());

        let malformed = write(dir.path(), "{\"categories\": [\"run\"]}\n{not json\n");
        let msg = load_manifest(&malformed).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");

        assert!(matches!(
            load_manifest(&dir.path().join("missing.jsonl")),
            Err(EcmError::Io { .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            categories: vec!["a".into(), "b".into()],
            records: vec![VideoRecord {
                video_id: "v".into(),
                duration: 12.5,
                feature_path: dir.path().join("features/v.ecmf"),
                labels: vec![1],
                ground_truth: vec![GtSegment {
                    start: 0.25,
                    end: 3.0,
                    category: 1,
                }],
            }],
        };
        let p = dir.path().join("out.jsonl");
        write_manifest(&p, &m).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .contains("\"feature_path\":\"features/v.ecmf\""));
        assert_eq!(load_manifest(&p).unwrap(), m);
    }
}
