//! Datasets: representation, synthetic generation, splits and disk format.
//!
//! A [`Dataset`] is a graph (undirected edge list), a dense feature matrix,
//! integer labels, and either fixed train/val/test masks or a fold
//! assignment. The on-disk format is deliberately human-diffable text; see
//! [`io`] for the file layout and the parsing entry points.

mod io;
mod sbm;

pub use io::{
    load_dataset, parse_edges_csv, parse_features_csv, parse_folds_json, parse_labels_csv,
    parse_meta_json, parse_splits_json, save_dataset, DatasetMeta, FoldsFile, SplitsFile,
};
pub use sbm::{generate_sbm, SbmConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("parse error in {file} line {line}: {reason}")]
    Parse {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range [0, {classes}) at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("node index {index} out of range for {n} nodes in {place}")]
    IndexOutOfRange {
        index: usize,
        n: usize,
        place: &'static str,
    },
    #[error("split masks overlap at node {0}")]
    OverlappingMasks(usize),
    #[error("class {class} missing from the train split")]
    ClassMissingFromTrain { class: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("dataset has both splits.json and folds.json; keep exactly one")]
    AmbiguousSplits,
    #[error("dataset has neither splits.json nor folds.json")]
    NoSplits,
    #[error("graph has no edges")]
    NoEdges,
    #[error("class {class} has {members} members, fewer than {folds} folds")]
    ClassSmallerThanFolds {
        class: usize,
        members: usize,
        folds: usize,
    },
    #[error("fold count {0} must be at least 2")]
    TooFewFolds(usize),
    #[error("infeasible SBM config: {reason} (p_in = {p_in:.6}, p_out = {p_out:.6})")]
    InfeasibleSbm {
        reason: String,
        p_in: f64,
        p_out: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed boolean masks or a fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum Splits {
    Masks {
        train: Vec<bool>,
        val: Vec<bool>,
        test: Vec<bool>,
    },
    Folds {
        assignment: Vec<usize>,
        count: usize,
    },
}

/// Graph + features + labels + split information.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n: usize,
    /// Undirected edges, each listed once with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// Row-major `n x f`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Splits,
}

impl Dataset {
    /// Validates every structural invariant: index ranges, label ranges,
    /// finite features, mask disjointness and train-class coverage.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.len() != self.n * self.feature_dim {
            return Err(DataError::ShapeMismatch(format!(
                "features have {} entries, expected {} x {}",
                self.features.len(),
                self.n,
                self.feature_dim
            )));
        }
        if self.labels.len() != self.n {
            return Err(DataError::ShapeMismatch(format!(
                "{} labels for {} nodes",
                self.labels.len(),
                self.n
            )));
        }
        for (row, &label) in self.labels.iter().enumerate() {
            if label >= self.classes {
                return Err(DataError::LabelOutOfRange {
                    row,
                    label,
                    classes: self.classes,
                });
            }
        }
        for (idx, &v) in self.features.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteFeature {
                    row: idx / self.feature_dim,
                    col: idx % self.feature_dim,
                });
            }
        }
        for &(i, j) in &self.edges {
            for index in [i, j] {
                if index >= self.n {
                    return Err(DataError::IndexOutOfRange {
                        index,
                        n: self.n,
                        place: "edges",
                    });
                }
            }
        }
        match &self.splits {
            Splits::Masks { train, val, test } => {
                if train.len() != self.n || val.len() != self.n || test.len() != self.n {
                    return Err(DataError::ShapeMismatch("mask length != n".into()));
                }
                for i in 0..self.n {
                    let hits = train[i] as u8 + val[i] as u8 + test[i] as u8;
                    if hits > 1 {
                        return Err(DataError::OverlappingMasks(i));
                    }
                }
                for class in 0..self.classes {
                    let covered = (0..self.n).any(|i| train[i] && self.labels[i] == class);
                    if !covered {
                        return Err(DataError::ClassMissingFromTrain { class });
                    }
                }
            }
            Splits::Folds { assignment, count } => {
                if assignment.len() != self.n {
                    return Err(DataError::ShapeMismatch("fold assignment length != n".into()));
                }
                if *count < 2 {
                    return Err(DataError::TooFewFolds(*count));
                }
                for (node, &f) in assignment.iter().enumerate() {
                    if f >= *count {
                        return Err(DataError::IndexOutOfRange {
                            index: f,
                            n: *count,
                            place: "folds",
                        });
                    }
                    let _ = node;
                }
            }
        }
        Ok(())
    }

    /// Feature row of node `i`.
    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Fraction of edges whose endpoints share a label.
pub fn edge_homophily(d: &Dataset) -> Result<f64, DataError> {
    if d.edges.is_empty() {
        return Err(DataError::NoEdges);
    }
    let same = d
        .edges
        .iter()
        .filter(|&&(i, j)| d.labels[i] == d.labels[j])
        .count();
    Ok(same as f64 / d.edges.len() as f64)
}

/// Stratified-by-label fold assignment: each class is shuffled with the
/// seeded RNG and dealt round-robin, so fold sizes differ by at most one
/// per class. Rejects classes smaller than the fold count.
pub fn make_folds(d: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if folds < 2 {
        return Err(DataError::TooFewFolds(folds));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; d.n];
    for class in 0..d.classes {
        let mut members: Vec<usize> = (0..d.n).filter(|&i| d.labels[i] == class).collect();
        if members.len() < folds {
            return Err(DataError::ClassSmallerThanFolds {
                class,
                members: members.len(),
                folds,
            });
        }
        members.shuffle(&mut rng);
        for (pos, node) in members.into_iter().enumerate() {
            assignment[node] = pos % folds;
        }
    }
    Ok(assignment)
}

/// Citation-benchmark-style masks: a small labeled train set of
/// `train_per_class` nodes per class, `val_count` validation nodes drawn
/// from the remainder, everything else test. This is the split regime the
/// standard semi-supervised benchmarks use, where filter quality matters
/// far more than raw feature separability.
pub fn planetoid_masks(
    d: &Dataset,
    train_per_class: usize,
    val_count: usize,
    seed: u64,
) -> Result<Splits, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = vec![false; d.n];
    for class in 0..d.classes {
        let mut members: Vec<usize> = (0..d.n).filter(|&i| d.labels[i] == class).collect();
        if members.len() <= train_per_class {
            return Err(DataError::ClassSmallerThanFolds {
                class,
                members: members.len(),
                folds: train_per_class,
            });
        }
        members.shuffle(&mut rng);
        for &node in members.iter().take(train_per_class) {
            train[node] = true;
        }
    }
    let mut rest: Vec<usize> = (0..d.n).filter(|&i| !train[i]).collect();
    if rest.len() <= val_count {
        return Err(DataError::ShapeMismatch(format!(
            "val_count {val_count} leaves no test nodes out of {} unlabeled",
            rest.len()
        )));
    }
    rest.shuffle(&mut rng);
    let mut val = vec![false; d.n];
    let mut test = vec![false; d.n];
    for (pos, &node) in rest.iter().enumerate() {
        if pos < val_count {
            val[node] = true;
        } else {
            test[node] = true;
        }
    }
    Ok(Splits::Masks { train, val, test })
}

/// Masks for one fold of the cyclic protocol: fold `f` tests, fold
/// `(f + 1) % count` validates, the rest trains. With only two folds the
/// train set would be empty, so the validation fold doubles as train;
/// that degenerate case is the documented convention.
pub fn fold_masks(
    assignment: &[usize],
    count: usize,
    fold: usize,
) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let val_fold = (fold + 1) % count;
    let test: Vec<bool> = assignment.iter().map(|&a| a == fold).collect();
    let val: Vec<bool> = assignment.iter().map(|&a| a == val_fold).collect();
    let train: Vec<bool> = if count == 2 {
        val.clone()
    } else {
        assignment
            .iter()
            .map(|&a| a != fold && a != val_fold)
            .collect()
    };
    (train, val, test)
}
