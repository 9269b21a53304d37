//! Knowledge base and the Random-Forest multi-label classifier.
//!
//! Each tolerant step contributes one feature (its input impact) and one
//! label (whether its simulated error exceeded the bound). Labels are
//! learned independently, one forest per label. By default a label's trees
//! split only on its own step's impact ([`FeatureScope::Own`]).

mod eval;
mod forest;
mod tree;

use std::io::{Read, Write};

use thiserror::Error;

pub use eval::{cross_validate, evaluate, quality_gate, Confusion, EvalReport, LabelMetrics};
pub use forest::{train, FeatureScope, ForestConfig, ForestModel, LabelForest};
pub use tree::{Node, Tree};

use crate::scalar::{parse_scalar, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("cannot split {examples} examples into {k} folds")]
    Fold { k: usize, examples: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid training example: {0}")]
    InvalidExample(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for LearnError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

impl From<std::io::Error> for LearnError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// One row of the knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub wave: u64,
    /// Input impact per tolerant step.
    pub features: Vec<T>,
    /// Whether each tolerant step had to execute.
    pub labels: Vec<bool>,
}

/// Anything that maps a feature vector to execute bits.
pub trait Predictor<T> {
    fn dimension(&self) -> usize;

    fn predict(&self, features: &[T]) -> Result<Vec<bool>, LearnError>;

    fn predict_label(&self, features: &[T], label: usize) -> Result<bool, LearnError> {
        let all = self.predict(features)?;
        all.get(label).copied().ok_or(LearnError::Shape {
            expected: all.len(),
            actual: label + 1,
        })
    }
}

/// Training examples with the step names that give features their meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase<T> {
    steps: Vec<String>,
    examples: Vec<TrainingExample<T>>,
}

impl<T: Scalar> KnowledgeBase<T> {
    pub fn new(steps: Vec<String>) -> Self {
        Self {
            steps,
            examples: Vec::new(),
        }
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn examples(&self) -> &[TrainingExample<T>] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn push(&mut self, example: TrainingExample<T>) -> Result<(), LearnError> {
        let d = self.steps.len();
        for len in [example.features.len(), example.labels.len()] {
            if len != d {
                return Err(LearnError::Shape {
                    expected: d,
                    actual: len,
                });
            }
        }
        if let Some(bad) = example
            .features
            .iter()
            .find(|f| !f.is_finite() || **f < T::zero())
        {
            return Err(LearnError::InvalidExample(format!(
                "wave {}: feature {bad} is not a finite non-negative number",
                example.wave
            )));
        }
        self.examples.push(example);
        Ok(())
    }

    pub fn extend(&mut self, other: KnowledgeBase<T>) -> Result<(), LearnError> {
        if other.steps != self.steps {
            return Err(LearnError::InvalidExample(
                "knowledge bases describe different steps".into(),
            ));
        }
        self.examples.extend(other.examples);
        Ok(())
    }

    /// Writes `wave,feat_<step>...,label_<step>...` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LearnError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["wave".to_owned()];
        header.extend(self.steps.iter().map(|s| format!("feat_{s}")));
        header.extend(self.steps.iter().map(|s| format!("label_{s}")));
        w.write_record(&header)?;
        for ex in &self.examples {
            let mut row = vec![ex.wave.to_string()];
            row.extend(ex.features.iter().map(|f| f.to_string()));
            row.extend(ex.labels.iter().map(|&l| u8::from(l).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, LearnError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"wave") || cols.len() % 2 != 1 {
            return Err(LearnError::Parse {
                line: 1,
                message: "expected header `wave,feat_<step>...,label_<step>...`".into(),
            });
        }
        let d = (cols.len() - 1) / 2;
        let mut steps = Vec::with_capacity(d);
        for i in 0..d {
            let feat = cols[1 + i].strip_prefix("feat_");
            let label = cols[1 + d + i].strip_prefix("label_");
            match (feat, label) {
                (Some(f), Some(l)) if f == l => steps.push(f.to_owned()),
                _ => {
                    return Err(LearnError::Parse {
                        line: 1,
                        message: format!("column {} and {} do not pair up", 2 + i, 2 + d + i),
                    })
                }
            }
        }
        let mut kb = Self::new(steps);
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let line = i + 2;
            let err = |message: String| LearnError::Parse { line, message };
            if record.len() != cols.len() {
                return Err(err(format!("expected {} fields", cols.len())));
            }
            let wave = record[0]
                .parse::<u64>()
                .map_err(|_| err(format!("invalid wave `{}`", &record[0])))?;
            let features = (0..d)
                .map(|j| parse_scalar::<T>(&record[1 + j]).map_err(err))
                .collect::<Result<Vec<_>, _>>()?;
            let labels = (0..d)
                .map(|j| match &record[1 + d + j] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(err(format!("invalid label `{other}`"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            kb.push(TrainingExample {
                wave,
                features,
                labels,
            })?;
        }
        Ok(kb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase<f64> {
        let mut kb = KnowledgeBase::new(vec!["a".into(), "b".into()]);
        kb.push(TrainingExample {
            wave: 0,
            features: vec![0.1, 0.0],
            labels: vec![true, false],
        })
        .unwrap();
        kb.push(TrainingExample {
            wave: 1,
            features: vec![1.0 / 3.0, 2.5e-7],
            labels: vec![false, true],
        })
        .unwrap();
        kb
    }

    #[test]
    fn csv_round_trip() {
        let kb = kb();
        let mut buf = Vec::new();
        kb.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("wave,feat_a,feat_b,label_a,label_b\n0,0.1,0,1,0\n"));
        assert_eq!(KnowledgeBase::<f64>::read_csv(&buf[..]).unwrap(), kb);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut kb = kb();
        let bad = TrainingExample {
            wave: 2,
            features: vec![-1.0, 0.0],
            labels: vec![false, false],
        };
        assert!(matches!(kb.push(bad), Err(LearnError::InvalidExample(_))));
        let short = TrainingExample {
            wave: 2,
            features: vec![0.0],
            labels: vec![false, false],
        };
        assert!(matches!(kb.push(short), Err(LearnError::Shape { .. })));
        let text = "wave,feat_a,label_a\n0,0.5,2\n";
        assert!(matches!(
            KnowledgeBase::<f64>::read_csv(text.as_bytes()),
            Err(LearnError::Parse { line: 2, .. })
        ));
        let text = "wave,feat_a,label_b\n";
        assert!(matches!(
            KnowledgeBase::<f64>::read_csv(text.as_bytes()),
            Err(LearnError::Parse { line: 1, .. })
        ));
    }
}
