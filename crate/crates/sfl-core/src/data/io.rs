//! On-disk dataset format and its parsers.
//!
//! A dataset directory holds five files, all human-diffable:
//!
//! ```text
//! meta.json      {"format_version": 1, "name": ..., "n": ..., "f": ..., "c": ...}
//! edges.csv      one "i,j" per line, undirected, each edge listed once
//! features.csv   n rows of f comma-separated reals
//! labels.csv     n lines, one integer in [0, c)
//! splits.json    {"train": [...], "val": [...], "test": [...]}   (zero-based indices)
//!   — or —
//! folds.json     {"count": k, "assignment": [...]}
//! ```
//!
//! Exactly one of `splits.json` / `folds.json` must be present. Feature
//! round trips are bit-exact: values are written with the shortest
//! representation that parses back to the same `f64`.
//!
//! The `parse_*` functions work on in-memory text and never touch the
//! filesystem; they are the fuzzing entry points.

use super::{DataError, Dataset, Splits};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub name: String,
    pub n: usize,
    pub f: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsFile {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldsFile {
    pub count: usize,
    pub assignment: Vec<usize>,
}

pub fn parse_meta_json(text: &str) -> Result<DatasetMeta, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::Parse {
        file: "meta.json",
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn parse_splits_json(text: &str) -> Result<SplitsFile, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::Parse {
        file: "splits.json",
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn parse_folds_json(text: &str) -> Result<FoldsFile, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::Parse {
        file: "folds.json",
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Parses "i,j" edge lines; blank lines are ignored.
pub fn parse_edges_csv(text: &str) -> Result<Vec<(usize, usize)>, DataError> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (i, j) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(DataError::Parse {
                    file: "edges.csv",
                    line: idx + 1,
                    reason: "expected exactly two comma-separated integers".into(),
                })
            }
        };
        let parse = |s: &str| -> Result<usize, DataError> {
            s.parse().map_err(|_| DataError::Parse {
                file: "edges.csv",
                line: idx + 1,
                reason: format!("'{s}' is not a node index"),
            })
        };
        edges.push((parse(i)?, parse(j)?));
    }
    Ok(edges)
}

/// Parses a rectangular block of comma-separated reals; returns row-major
/// data and the column count (0 for empty input).
pub fn parse_features_csv(text: &str) -> Result<(Vec<f64>, usize, usize), DataError> {
    let mut data = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut row_len = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                file: "features.csv",
                line: idx + 1,
                reason: format!("'{}' is not a real number", field.trim()),
            })?;
            data.push(v);
            row_len += 1;
        }
        if rows == 0 {
            cols = row_len;
        } else if row_len != cols {
            return Err(DataError::Parse {
                file: "features.csv",
                line: idx + 1,
                reason: format!("row has {row_len} columns, expected {cols}"),
            });
        }
        rows += 1;
    }
    Ok((data, cols, rows))
}

/// Parses one integer label per line.
pub fn parse_labels_csv(text: &str) -> Result<Vec<usize>, DataError> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse().map_err(|_| DataError::Parse {
            file: "labels.csv",
            line: idx + 1,
            reason: format!("'{line}' is not a label"),
        })?);
    }
    Ok(labels)
}

fn indices_to_mask(
    indices: &[usize],
    n: usize,
    place: &'static str,
) -> Result<Vec<bool>, DataError> {
    let mut mask = vec![false; n];
    for &index in indices {
        if index >= n {
            return Err(DataError::IndexOutOfRange { index, n, place });
        }
        mask[index] = true;
    }
    Ok(mask)
}

fn mask_to_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Loads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let read = |file: &str| -> Result<String, DataError> {
        let path = dir.join(file);
        if !path.exists() {
            return Err(DataError::MissingFile(path.display().to_string()));
        }
        Ok(std::fs::read_to_string(path)?)
    };

    let meta = parse_meta_json(&read("meta.json")?)?;
    let edges = parse_edges_csv(&read("edges.csv")?)?;
    let (features, cols, rows) = parse_features_csv(&read("features.csv")?)?;
    let labels = parse_labels_csv(&read("labels.csv")?)?;

    if rows != meta.n || cols != meta.f {
        return Err(DataError::ShapeMismatch(format!(
            "features.csv is {rows} x {cols}, meta.json declares {} x {}",
            meta.n, meta.f
        )));
    }
    if labels.len() != meta.n {
        return Err(DataError::ShapeMismatch(format!(
            "labels.csv has {} rows, meta.json declares {}",
            labels.len(),
            meta.n
        )));
    }

    let splits_path = dir.join("splits.json");
    let folds_path = dir.join("folds.json");
    let splits = match (splits_path.exists(), folds_path.exists()) {
        (true, true) => return Err(DataError::AmbiguousSplits),
        (false, false) => return Err(DataError::NoSplits),
        (true, false) => {
            let f = parse_splits_json(&read("splits.json")?)?;
            Splits::Masks {
                train: indices_to_mask(&f.train, meta.n, "splits.train")?,
                val: indices_to_mask(&f.val, meta.n, "splits.val")?,
                test: indices_to_mask(&f.test, meta.n, "splits.test")?,
            }
        }
        (false, true) => {
            let f = parse_folds_json(&read("folds.json")?)?;
            Splits::Folds {
                assignment: f.assignment,
                count: f.count,
            }
        }
    };

    let dataset = Dataset {
        name: meta.name,
        n: meta.n,
        edges,
        features,
        feature_dim: meta.f,
        labels,
        classes: meta.c,
        splits,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset directory; the inverse of [`load_dataset`].
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<(), DataError> {
    d.validate()?;
    std::fs::create_dir_all(dir)?;

    let meta = DatasetMeta {
        format_version: 1,
        name: d.name.clone(),
        n: d.n,
        f: d.feature_dim,
        c: d.classes,
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )?;

    let mut edges = String::new();
    for &(i, j) in &d.edges {
        writeln!(edges, "{i},{j}").unwrap();
    }
    std::fs::write(dir.join("edges.csv"), edges)?;

    let mut features = String::new();
    for row in d.features.chunks(d.feature_dim.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(features, "{}", line.join(",")).unwrap();
    }
    std::fs::write(dir.join("features.csv"), features)?;

    let mut labels = String::new();
    for label in &d.labels {
        writeln!(labels, "{label}").unwrap();
    }
    std::fs::write(dir.join("labels.csv"), labels)?;

    match &d.splits {
        Splits::Masks { train, val, test } => {
            let f = SplitsFile {
                train: mask_to_indices(train),
                val: mask_to_indices(val),
                test: mask_to_indices(test),
            };
            std::fs::write(
                dir.join("splits.json"),
                serde_json::to_string(&f).expect("splits serialize") + "\n",
            )?;
        }
        Splits::Folds { assignment, count } => {
            let f = FoldsFile {
                count: *count,
                assignment: assignment.clone(),
            };
            std::fs::write(
                dir.join("folds.json"),
                serde_json::to_string(&f).expect("folds serialize") + "\n",
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sbm, SbmConfig};

    fn sample() -> Dataset {
        generate_sbm(&SbmConfig {
            n: 40,
            classes: 2,
            avg_degree: 4.0,
            homophily: 0.7,
            feature_dim: 3,
            class_separation: 1.5,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let d = sample();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn folds_variant_round_trips() {
        let mut d = sample();
        let assignment = crate::data::make_folds(&d, 4, 3).unwrap();
        d.splits = Splits::Folds {
            assignment,
            count: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn label_out_of_range_names_the_row() {
        let d = sample();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        // Corrupt one label to equal the class count.
        let labels_path = dir.path().join("labels.csv");
        let mut text: Vec<String> = std::fs::read_to_string(&labels_path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        text[7] = "2".into();
        std::fs::write(&labels_path, text.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::LabelOutOfRange { row: 7, label: 2, .. }) => {}
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let d = sample();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("splits.json");
        let mut f: SplitsFile =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        f.val.push(f.train[0]);
        std::fs::write(&path, serde_json::to_string(&f).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::OverlappingMasks(_))
        ));
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::MissingFile(name)) => assert!(name.ends_with("meta.json")),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn both_split_files_is_ambiguous() {
        let d = sample();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        std::fs::write(
            dir.path().join("folds.json"),
            r#"{"count":2,"assignment":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::AmbiguousSplits)
        ));
    }

    #[test]
    fn parser_rejects_malformed_lines_with_line_numbers() {
        let err = parse_edges_csv("0,1\n2;3\n").unwrap_err();
        match err {
            DataError::Parse { file, line, .. } => {
                assert_eq!(file, "edges.csv");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_features_csv("1.0,2.0\n3.0\n").is_err());
        assert!(parse_labels_csv("0\n-1\n").is_err());
        assert!(parse_meta_json(r#"{"format_version":1}"#).is_err());
        // Unknown keys are rejected.
        assert!(parse_splits_json(r#"{"train":[],"val":[],"test":[],"extra":1}"#).is_err());
    }

    #[test]
    fn feature_round_trip_is_bit_exact_on_awkward_values() {
        let values = [
            1.0 / 3.0,
            -0.0,
            1e-300,
            -12345.678901234567,
            f64::MIN_POSITIVE,
            0.1 + 0.2,
        ];
        let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let (parsed, cols, rows) = parse_features_csv(&line.join(",")).unwrap();
        assert_eq!((cols, rows), (values.len(), 1));
        for (a, b) in parsed.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
