//! Bagged tree ensembles, one per label, and their text serialisation.
//!
//! ```text
//! qodflow-forest v1
//! dimension <d> labels <k> threshold <t> seed <s> trees <n> scope <own|all>
//! label <i> constant <0|1>        # single-class training column
//! label <i> trees <n>
//! tree <node count>
//! split <feature> <threshold> <left> <right>
//! leaf <0|1>
//! ```
//!
//! Node lines follow their `tree` line in index order; node 0 is the root.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tree::{Node, Tree};
use super::{LearnError, Predictor, TrainingExample};
use crate::scalar::{parse_scalar, Scalar};

const MAGIC: &str = "qodflow-forest v1";

/// Features a label's trees may split on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureScope {
    /// Label `i` sees only feature `i`. Needs as many features as labels.
    #[default]
    Own,
    All,
}

impl fmt::Display for FeatureScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Own => "own",
            Self::All => "all",
        })
    }
}

impl FromStr for FeatureScope {
    type Err = LearnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "own" => Ok(Self::Own),
            "all" => Ok(Self::All),
            other => Err(LearnError::InvalidParameter(format!(
                "unknown feature scope `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    /// Fraction of positive votes needed to execute; below 0.5 favours recall.
    pub vote_threshold: f64,
    pub seed: u64,
    pub scope: FeatureScope,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            vote_threshold: 0.5,
            seed: 0,
            scope: FeatureScope::default(),
        }
    }
}

impl ForestConfig {
    /// Recall-biased preset.
    pub fn recall() -> Self {
        Self {
            vote_threshold: 0.3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        if self.trees == 0 {
            return Err(LearnError::InvalidParameter(
                "trees must be positive".into(),
            ));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold < 1.0) {
            return Err(LearnError::InvalidParameter(format!(
                "vote threshold {} outside (0,1)",
                self.vote_threshold
            )));
        }
        Ok(())
    }
}

/// The ensemble for one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelForest<T> {
    pub trees: Vec<Tree<T>>,
    /// Set when the training column held a single class.
    pub constant: Option<bool>,
}

impl<T: Scalar> LabelForest<T> {
    pub fn vote_fraction(&self, x: &[T]) -> f64 {
        if let Some(c) = self.constant {
            return if c { 1.0 } else { 0.0 };
        }
        let yes = self.trees.iter().filter(|t| t.predict(x)).count();
        yes as f64 / self.trees.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel<T> {
    forests: Vec<LabelForest<T>>,
    dimension: usize,
    config: ForestConfig,
}

fn tree_seed(seed: u64, label: usize, tree: usize) -> u64 {
    // splitmix64 over the combined index keeps streams well separated.
    let mut z = seed.wrapping_add(
        0x9E37_79B9_7F4A_7C15u64.wrapping_mul(((label as u64) << 32) | (tree as u64 + 1)),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains one forest per label by binary relevance.
pub fn train<T: Scalar>(
    examples: &[TrainingExample<T>],
    config: &ForestConfig,
) -> Result<ForestModel<T>, LearnError> {
    config.validate()?;
    let first = examples
        .first()
        .ok_or_else(|| LearnError::InsufficientData("no training examples".into()))?;
    let d = first.features.len();
    let k = first.labels.len();
    for ex in examples {
        if ex.features.len() != d {
            return Err(LearnError::Shape {
                expected: d,
                actual: ex.features.len(),
            });
        }
        if ex.labels.len() != k {
            return Err(LearnError::Shape {
                expected: k,
                actual: ex.labels.len(),
            });
        }
    }
    if config.scope == FeatureScope::Own && d != k {
        return Err(LearnError::InvalidParameter(format!(
            "own-feature scope needs one feature per label, got {d} features for {k} labels"
        )));
    }
    let n = examples.len();
    let x: Vec<&[T]> = examples.iter().map(|e| e.features.as_slice()).collect();
    let all: Vec<usize> = (0..d).collect();
    let mut forests = Vec::with_capacity(k);
    for label in 0..k {
        let y: Vec<bool> = examples.iter().map(|e| e.labels[label]).collect();
        let positives = y.iter().filter(|&&v| v).count();
        if positives == 0 || positives == n || d == 0 {
            let class = 2 * positives >= n;
            if d > 0 {
                log::warn!("label {label}: single-class training column, constant {class}");
            }
            forests.push(LabelForest {
                trees: Vec::new(),
                constant: Some(class),
            });
            continue;
        }
        let pool = match config.scope {
            FeatureScope::Own => &all[label..=label],
            FeatureScope::All => &all[..],
        };
        let max_features = (pool.len() as f64).sqrt().ceil() as usize;
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(config.seed, label, t));
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                Tree::grow(&x, &y, rows, pool, max_features, &mut rng)
            })
            .collect();
        forests.push(LabelForest {
            trees,
            constant: None,
        });
    }
    Ok(ForestModel {
        forests,
        dimension: d,
        config: *config,
    })
}

impl<T: Scalar> ForestModel<T> {
    pub fn labels(&self) -> usize {
        self.forests.len()
    }

    pub fn forests(&self) -> &[LabelForest<T>] {
        &self.forests
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn vote_threshold(&self) -> f64 {
        self.config.vote_threshold
    }

    /// Same trees, different decision threshold.
    pub fn with_vote_threshold(mut self, threshold: f64) -> Result<Self, LearnError> {
        self.config.vote_threshold = threshold;
        self.config.validate()?;
        Ok(self)
    }

    /// Labels whose training column held a single class.
    pub fn constant_labels(&self) -> Vec<usize> {
        self.forests
            .iter()
            .enumerate()
            .filter(|(_, f)| f.constant.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    fn check_shape(&self, features: &[T]) -> Result<(), LearnError> {
        if features.len() != self.dimension {
            return Err(LearnError::Shape {
                expected: self.dimension,
                actual: features.len(),
            });
        }
        Ok(())
    }

    pub fn vote_fractions(&self, features: &[T]) -> Result<Vec<f64>, LearnError> {
        self.check_shape(features)?;
        Ok(self
            .forests
            .iter()
            .map(|f| f.vote_fraction(features))
            .collect())
    }

    pub fn classify(&self, features: &[T]) -> Result<Vec<bool>, LearnError> {
        Ok(self
            .vote_fractions(features)?
            .into_iter()
            .map(|v| v >= self.config.vote_threshold)
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(
            out,
            "dimension {} labels {} threshold {} seed {} trees {} scope {}",
            self.dimension,
            self.forests.len(),
            self.config.vote_threshold,
            self.config.seed,
            self.config.trees,
            self.config.scope
        );
        for (i, forest) in self.forests.iter().enumerate() {
            if let Some(c) = forest.constant {
                let _ = writeln!(out, "label {i} constant {}", u8::from(c));
                continue;
            }
            let _ = writeln!(out, "label {i} trees {}", forest.trees.len());
            for tree in &forest.trees {
                let _ = writeln!(out, "tree {}", tree.nodes.len());
                for node in &tree.nodes {
                    match node {
                        Node::Leaf(c) => {
                            let _ = writeln!(out, "leaf {}", u8::from(*c));
                        }
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            let _ = writeln!(out, "split {feature} {threshold} {left} {right}");
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, LearnError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| LearnError::Parse {
                line: 0,
                message: format!("unexpected end of model, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != MAGIC {
            return Err(LearnError::Parse {
                line,
                message: format!("expected `{MAGIC}`"),
            });
        }
        let (line, meta) = next("model parameters")?;
        let meta = fields(
            line,
            meta,
            &["dimension", "labels", "threshold", "seed", "trees", "scope"],
        )?;
        let dimension: usize = num(line, meta[0])?;
        let label_count: usize = num(line, meta[1])?;
        let config = ForestConfig {
            vote_threshold: num(line, meta[2])?,
            seed: num(line, meta[3])?,
            trees: num(line, meta[4])?,
            scope: meta[5].parse().map_err(|e: LearnError| LearnError::Parse {
                line,
                message: e.to_string(),
            })?,
        };
        config.validate().map_err(|e| LearnError::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut forests = Vec::with_capacity(label_count);
        for i in 0..label_count {
            let (line, head) = next("label")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let bad = |message: String| LearnError::Parse { line, message };
            if parts.len() != 4 || parts[0] != "label" || num::<usize>(line, parts[1])? != i {
                return Err(bad(format!("expected `label {i} ...`")));
            }
            match parts[2] {
                "constant" => {
                    forests.push(LabelForest {
                        trees: Vec::new(),
                        constant: Some(bit(line, parts[3])?),
                    });
                }
                "trees" => {
                    let count: usize = num(line, parts[3])?;
                    let mut trees = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (line, head) = next("tree")?;
                        let nodes_n: usize = num(line, fields(line, head, &["tree"])?[0])?;
                        let mut nodes = Vec::with_capacity(nodes_n);
                        for _ in 0..nodes_n {
                            let (line, node) = next("node")?;
                            let p: Vec<&str> = node.split_whitespace().collect();
                            nodes.push(match p.as_slice() {
                                ["leaf", c] => Node::Leaf(bit(line, c)?),
                                ["split", f, t, l, r] => Node::Split {
                                    feature: num(line, f)?,
                                    threshold: parse_scalar::<T>(t)
                                        .map_err(|message| LearnError::Parse { line, message })?,
                                    left: num(line, l)?,
                                    right: num(line, r)?,
                                },
                                _ => {
                                    return Err(LearnError::Parse {
                                        line,
                                        message: format!("invalid node `{node}`"),
                                    })
                                }
                            });
                        }
                        let tree = Tree { nodes };
                        if !tree.is_valid(dimension) {
                            return Err(LearnError::Parse {
                                line,
                                message: "tree structure is invalid".into(),
                            });
                        }
                        trees.push(tree);
                    }
                    if trees.is_empty() {
                        return Err(bad("a label needs at least one tree".into()));
                    }
                    forests.push(LabelForest {
                        trees,
                        constant: None,
                    });
                }
                other => return Err(bad(format!("unknown label kind `{other}`"))),
            }
        }
        if let Some((line, extra)) = lines.next() {
            return Err(LearnError::Parse {
                line,
                message: format!("trailing content `{extra}`"),
            });
        }
        Ok(Self {
            forests,
            dimension,
            config,
        })
    }
}

/// Values following each expected keyword, e.g. `dimension 3 labels 2`.
fn fields<'a>(line: usize, text: &'a str, keys: &[&str]) -> Result<Vec<&'a str>, LearnError> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 2 * keys.len() || parts.iter().step_by(2).zip(keys).any(|(p, k)| p != k) {
        return Err(LearnError::Parse {
            line,
            message: format!(
                "expected `{}`",
                keys.iter()
                    .map(|k| format!("{k} <v>"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        });
    }
    Ok(parts.into_iter().skip(1).step_by(2).collect())
}

fn num<N: std::str::FromStr>(line: usize, text: &str) -> Result<N, LearnError> {
    text.parse().map_err(|_| LearnError::Parse {
        line,
        message: format!("invalid number `{text}`"),
    })
}

fn bit(line: usize, text: &str) -> Result<bool, LearnError> {
    match text {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(LearnError::Parse {
            line,
            message: format!("expected 0 or 1, found `{text}`"),
        }),
    }
}

impl<T: Scalar> Predictor<T> for ForestModel<T> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn predict(&self, features: &[T]) -> Result<Vec<bool>, LearnError> {
        self.classify(features)
    }

    fn predict_label(&self, features: &[T], label: usize) -> Result<bool, LearnError> {
        self.check_shape(features)?;
        let forest = self.forests.get(label).ok_or(LearnError::Shape {
            expected: self.forests.len(),
            actual: label + 1,
        })?;
        Ok(forest.vote_fraction(features) >= self.config.vote_threshold)
    }
}
