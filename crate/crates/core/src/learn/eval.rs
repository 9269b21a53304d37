//! Accuracy, precision and recall, and k-fold cross-validation.

use super::forest::{train, ForestConfig, ForestModel};
use super::{LearnError, TrainingExample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 1.0,
            t => (self.tp + self.tn) as f64 / t as f64,
        }
    }

    /// Precision and whether it was undefined (no positive predictions).
    /// An undefined precision counts as 1 when no positive was missed.
    pub fn precision(&self) -> (f64, bool) {
        match self.tp + self.fp {
            0 => (if self.fn_ == 0 { 1.0 } else { 0.0 }, true),
            p => (self.tp as f64 / p as f64, false),
        }
    }

    /// Recall and whether it was undefined (no actual positives).
    /// An undefined recall counts as 1 when nothing was falsely flagged.
    pub fn recall(&self) -> (f64, bool) {
        match self.tp + self.fn_ {
            0 => (if self.fp == 0 { 1.0 } else { 0.0 }, true),
            p => (self.tp as f64 / p as f64, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl From<Confusion> for LabelMetrics {
    fn from(confusion: Confusion) -> Self {
        let (precision, precision_undefined) = confusion.precision();
        let (recall, recall_undefined) = confusion.recall();
        Self {
            confusion,
            accuracy: confusion.accuracy(),
            precision,
            recall,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_label: Vec<LabelMetrics>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub folds: usize,
}

impl EvalReport {
    fn from_confusions(confusions: Vec<Confusion>, folds: usize) -> Self {
        let per_label: Vec<LabelMetrics> = confusions.into_iter().map(LabelMetrics::from).collect();
        let mean = |f: fn(&LabelMetrics) -> f64| {
            if per_label.is_empty() {
                1.0
            } else {
                per_label.iter().map(f).sum::<f64>() / per_label.len() as f64
            }
        };
        Self {
            accuracy: mean(|m| m.accuracy),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            per_label,
            folds,
        }
    }
}

fn confusions<T: Scalar>(
    model: &ForestModel<T>,
    examples: &[TrainingExample<T>],
    into: &mut [Confusion],
) -> Result<(), LearnError> {
    for ex in examples {
        let predicted = model.classify(&ex.features)?;
        if predicted.len() != ex.labels.len() || into.len() != ex.labels.len() {
            return Err(LearnError::Shape {
                expected: into.len(),
                actual: ex.labels.len(),
            });
        }
        for ((c, p), a) in into.iter_mut().zip(predicted).zip(&ex.labels) {
            c.add(p, *a);
        }
    }
    Ok(())
}

/// Scores a trained model on a labelled set.
pub fn evaluate<T: Scalar>(
    model: &ForestModel<T>,
    examples: &[TrainingExample<T>],
) -> Result<EvalReport, LearnError> {
    let mut c = vec![Confusion::default(); model.labels()];
    confusions(model, examples, &mut c)?;
    Ok(EvalReport::from_confusions(c, 1))
}

/// k-fold cross-validation over contiguous folds in wave order. Confusion
/// counts are summed over folds before the ratios are taken.
pub fn cross_validate<T: Scalar>(
    examples: &[TrainingExample<T>],
    k: usize,
    config: &ForestConfig,
) -> Result<EvalReport, LearnError> {
    let n = examples.len();
    if k < 2 || k > n {
        return Err(LearnError::Fold { k, examples: n });
    }
    let mut ordered: Vec<&TrainingExample<T>> = examples.iter().collect();
    ordered.sort_by_key(|e| e.wave);
    let labels = ordered[0].labels.len();
    let mut total = vec![Confusion::default(); labels];
    for fold in 0..k {
        let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
        let test: Vec<TrainingExample<T>> = ordered[lo..hi].iter().map(|e| (*e).clone()).collect();
        let train_set: Vec<TrainingExample<T>> = ordered[..lo]
            .iter()
            .chain(&ordered[hi..])
            .map(|e| (*e).clone())
            .collect();
        let fold_config = ForestConfig {
            seed: config.seed.wrapping_add(fold as u64),
            ..*config
        };
        let model = train(&train_set, &fold_config)?;
        confusions(&model, &test, &mut total)?;
    }
    Ok(EvalReport::from_confusions(total, k))
}

/// Whether the macro accuracy and recall meet the thresholds.
pub fn quality_gate(report: &EvalReport, min_accuracy: f64, min_recall: f64) -> bool {
    report.accuracy >= min_accuracy && report.recall >= min_recall
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(accuracy: f64, recall: f64) -> EvalReport {
        EvalReport {
            per_label: Vec::new(),
            accuracy,
            precision: 1.0,
            recall,
            folds: 10,
        }
    }

    #[test]
    fn gate_examples() {
        assert!(quality_gate(&report(0.95, 0.97), 0.90, 0.90));
        assert!(!quality_gate(&report(0.95, 0.80), 0.90, 0.90));
        assert!(quality_gate(&report(0.0, 0.0), 0.0, 0.0));
    }

    #[test]
    fn undefined_ratios() {
        let empty = Confusion {
            tn: 5,
            ..Confusion::default()
        };
        assert_eq!(empty.precision(), (1.0, true));
        assert_eq!(empty.recall(), (1.0, true));
        let missed = Confusion {
            fn_: 2,
            tn: 3,
            ..Confusion::default()
        };
        assert_eq!(missed.precision(), (0.0, true));
        assert_eq!(missed.recall(), (0.0, false));
        let flagged = Confusion {
            fp: 1,
            tn: 3,
            ..Confusion::default()
        };
        assert_eq!(flagged.recall(), (0.0, true));
    }

    fn data(n: usize, seed: u64, separable: bool) -> Vec<TrainingExample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: f64 = rng.random();
                let label = if separable {
                    x > 0.3
                } else {
                    rng.random_bool(0.7)
                };
                TrainingExample {
                    wave: i as u64,
                    features: vec![x],
                    labels: vec![label],
                }
            })
            .collect()
    }

    fn cfg() -> ForestConfig {
        ForestConfig {
            trees: 20,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn separable_cross_validation() {
        let r = cross_validate(&data(300, 4, true), 10, &cfg()).unwrap();
        assert_eq!(r.folds, 10);
        assert_eq!(r.per_label[0].confusion.total(), 300);
        assert!(r.accuracy >= 0.97, "{r:?}");
    }

    #[test]
    fn random_labels_score_near_prior() {
        // Quantised impacts: with continuous features, fully grown trees
        // memorise noise and score near 1-NN accuracy instead.
        let mut examples = data(1000, 8, false);
        for e in &mut examples {
            e.features[0] = (e.features[0] * 5.0).floor();
        }
        let prior = examples.iter().filter(|e| e.labels[0]).count() as f64 / 1000.0;
        let r = cross_validate(&examples, 10, &ForestConfig::default()).unwrap();
        let best = prior.max(1.0 - prior);
        assert!((r.accuracy - best).abs() <= 0.1, "{} vs {best}", r.accuracy);
    }

    #[test]
    fn leave_one_out_and_fold_errors() {
        let tiny = data(4, 1, true);
        assert_eq!(cross_validate(&tiny, 4, &cfg()).unwrap().folds, 4);
        assert!(matches!(
            cross_validate(&tiny, 5, &cfg()),
            Err(LearnError::Fold { k: 5, examples: 4 })
        ));
        assert!(matches!(
            cross_validate(&tiny, 1, &cfg()),
            Err(LearnError::Fold { .. })
        ));
    }

    proptest! {
        #[test]
        fn confusion_matches_naive_count(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
            let mut c = Confusion::default();
            for &(p, a) in &pairs {
                c.add(p, a);
            }
            let tp = pairs.iter().filter(|&&(p, a)| p && a).count();
            let fp = pairs.iter().filter(|&&(p, a)| p && !a).count();
            let fn_ = pairs.iter().filter(|&&(p, a)| !p && a).count();
            if tp + fp > 0 {
                prop_assert_eq!(c.precision().0, tp as f64 / (tp + fp) as f64);
            }
            if tp + fn_ > 0 {
                prop_assert_eq!(c.recall().0, tp as f64 / (tp + fn_) as f64);
            }
            let m = LabelMetrics::from(c);
            for v in [m.accuracy, m.precision, m.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
