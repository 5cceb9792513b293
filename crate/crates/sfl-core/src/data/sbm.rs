//! Stochastic block model generator with a homophily dial.
//!
//! Within-class and cross-class edge probabilities solve
//! `h = p_in / (p_in + (C-1) p_out)` at the requested average degree, so
//! `h = 0.9` produces a citation-network-like graph and `h = 0.1` a
//! strongly heterophilic one. Features are a class mean of norm `s` plus
//! unit Gaussian noise. Everything is drawn from one seeded stream in a
//! fixed order, so a config generates identical bytes every time.

use super::{DataError, Dataset, Splits};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub n: usize,
    pub classes: usize,
    pub avg_degree: f64,
    /// Target edge homophily in `[0, 1]`.
    pub homophily: f64,
    pub feature_dim: usize,
    /// Norm of each class-mean feature vector.
    pub class_separation: f64,
    pub seed: u64,
}

impl SbmConfig {
    /// Solves for the within/cross-class probabilities; errors if the
    /// combination is infeasible.
    pub fn edge_probabilities(&self) -> Result<(f64, f64), DataError> {
        let c = self.classes as f64;
        let m = self.n as f64 / c;
        let h = self.homophily;
        let denom = m - h;
        if denom <= 0.0 {
            return Err(DataError::InfeasibleSbm {
                reason: "class size does not support the homophily target".into(),
                p_in: f64::NAN,
                p_out: f64::NAN,
            });
        }
        let total = self.avg_degree / denom;
        let p_in = h * total;
        let p_out = (1.0 - h) * total / (c - 1.0);
        if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
            return Err(DataError::InfeasibleSbm {
                reason: "edge probabilities leave [0, 1]; lower avg_degree or raise n".into(),
                p_in,
                p_out,
            });
        }
        Ok((p_in, p_out))
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 || self.n < 2 * self.classes {
            return Err(DataError::ShapeMismatch(format!(
                "need classes >= 2 and n >= 2 * classes, got n = {}, classes = {}",
                self.n, self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(DataError::ShapeMismatch(format!(
                "homophily {} outside [0, 1]",
                self.homophily
            )));
        }
        if self.feature_dim == 0 || !self.avg_degree.is_finite() || self.avg_degree <= 0.0 {
            return Err(DataError::ShapeMismatch(
                "feature_dim and avg_degree must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a dataset with a stratified 60/20/20 fixed split.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let (p_in, p_out) = cfg.edge_probabilities()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();

    // Class means of norm `class_separation`.
    let mut means = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let mut g: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut g {
            *v *= cfg.class_separation / norm;
        }
        means.push(g);
    }

    let mut features = Vec::with_capacity(cfg.n * cfg.feature_dim);
    for &label in &labels {
        for j in 0..cfg.feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(means[label][j] + noise);
        }
    }

    let mut edges = Vec::new();
    for i in 0..cfg.n {
        for j in (i + 1)..cfg.n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    // Stratified 60/20/20 split; every class keeps at least one train node.
    let mut train = vec![false; cfg.n];
    let mut val = vec![false; cfg.n];
    let mut test = vec![false; cfg.n];
    for class in 0..cfg.classes {
        let mut members: Vec<usize> = (0..cfg.n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let m = members.len();
        let n_train = ((0.6 * m as f64).round() as usize).clamp(1, m);
        let n_val = ((0.2 * m as f64).round() as usize).min(m - n_train);
        for (pos, &node) in members.iter().enumerate() {
            if pos < n_train {
                train[node] = true;
            } else if pos < n_train + n_val {
                val[node] = true;
            } else {
                test[node] = true;
            }
        }
    }

    let dataset = Dataset {
        name: format!(
            "sbm-n{}-c{}-h{}-seed{}",
            cfg.n, cfg.classes, cfg.homophily, cfg.seed
        ),
        n: cfg.n,
        edges,
        features,
        feature_dim: cfg.feature_dim,
        labels,
        classes: cfg.classes,
        splits: Splits::Masks { train, val, test },
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::edge_homophily;

    fn cfg(h: f64, seed: u64) -> SbmConfig {
        SbmConfig {
            n: 300,
            classes: 5,
            avg_degree: 6.0,
            homophily: h,
            feature_dim: 4,
            class_separation: 1.0,
            seed,
        }
    }

    #[test]
    fn pure_homophily_has_no_cross_edges() {
        let d = generate_sbm(&cfg(1.0, 3)).unwrap();
        for &(i, j) in &d.edges {
            assert_eq!(d.labels[i], d.labels[j]);
        }
    }

    #[test]
    fn neutral_homophily_is_label_independent() {
        // h = 1/C makes within- and cross-class probabilities equal, so the
        // measured edge homophily should hover near 1/C.
        let mut measured = Vec::new();
        for seed in 0..5 {
            let d = generate_sbm(&cfg(0.2, seed)).unwrap();
            measured.push(edge_homophily(&d).unwrap());
        }
        let mean = measured.iter().sum::<f64>() / measured.len() as f64;
        assert!((mean - 0.2).abs() < 0.05, "measured {mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sbm(&cfg(0.4, 11)).unwrap();
        let b = generate_sbm(&cfg(0.4, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_sbm(&cfg(0.4, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn measured_homophily_tracks_the_dial() {
        let mut last = -1.0;
        for &h in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let mut total = 0.0;
            for seed in 0..5 {
                let d = generate_sbm(&cfg(h, 100 + seed)).unwrap();
                total += edge_homophily(&d).unwrap();
            }
            let mean = total / 5.0;
            assert!(
                mean > last,
                "homophily not monotone: h={h} gave {mean}, previous {last}"
            );
            assert!((mean - h).abs() < 0.08, "h={h} measured {mean}");
            last = mean;
        }
    }

    #[test]
    fn infeasible_degree_is_rejected_with_probabilities() {
        let bad = SbmConfig {
            n: 10,
            classes: 2,
            avg_degree: 50.0,
            homophily: 0.9,
            feature_dim: 2,
            class_separation: 1.0,
            seed: 0,
        };
        match generate_sbm(&bad) {
            Err(DataError::InfeasibleSbm { p_in, .. }) => assert!(p_in > 1.0),
            other => panic!("expected infeasible config, got {other:?}"),
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = generate_sbm(&cfg(0.5, 9)).unwrap();
        d.validate().unwrap();
        if let Splits::Masks { train, val, test } = &d.splits {
            let n_train = train.iter().filter(|&&b| b).count();
            let n_val = val.iter().filter(|&&b| b).count();
            let n_test = test.iter().filter(|&&b| b).count();
            assert_eq!(n_train + n_val + n_test, d.n);
            assert!((n_train as f64 / d.n as f64 - 0.6).abs() < 0.05);
        } else {
            panic!("expected masks");
        }
    }
}
