//! CART decision trees with Gini splits and boolean leaves.

use rand::seq::index::sample;
use rand::Rng;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Leaf(bool),
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
}

/// Nodes in creation order; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn predict(&self, x: &[T]) -> bool {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(class) => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Checks child indices point forward and features are in range.
    pub fn is_valid(&self, dimension: usize) -> bool {
        !self.nodes.is_empty()
            && self.nodes.iter().enumerate().all(|(i, n)| match n {
                Node::Leaf(_) => true,
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    *feature < dimension
                        && *left > i
                        && *right > i
                        && *left < self.nodes.len()
                        && *right < self.nodes.len()
                }
            })
    }

    /// Grows an unpruned tree on the rows `sample_rows` of `x`/`y`, splitting
    /// only on the feature indices in `pool`. Each node draws `max_features`
    /// candidates from the pool; when none of them separates the node, the
    /// rest of the pool is tried.
    pub fn grow<R: Rng>(
        x: &[&[T]],
        y: &[bool],
        sample_rows: Vec<usize>,
        pool: &[usize],
        max_features: usize,
        rng: &mut R,
    ) -> Self {
        let d = pool.len();
        let mut nodes = vec![Node::Leaf(false)];
        let mut stack = vec![(0usize, sample_rows)];
        while let Some((slot, rows)) = stack.pop() {
            let positives = rows.iter().filter(|&&r| y[r]).count();
            let majority = 2 * positives >= rows.len();
            if positives == 0 || positives == rows.len() || rows.len() < 2 {
                nodes[slot] = Node::Leaf(majority);
                continue;
            }
            let mut order: Vec<usize> = sample(rng, d, d).into_iter().map(|i| pool[i]).collect();
            let take = max_features.clamp(1, d.max(1));
            let mut best = best_split(x, y, &rows, &order[..take]);
            if best.is_none() {
                order.drain(..take);
                order.sort_unstable();
                best = best_split(x, y, &rows, &order);
            }
            let Some((feature, threshold, _)) = best else {
                nodes[slot] = Node::Leaf(majority);
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| x[i][feature] <= threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf(false));
            let right = nodes.len();
            nodes.push(Node::Leaf(false));
            nodes[slot] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
            stack.push((right, r));
            stack.push((left, l));
        }
        Self { nodes }
    }
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

/// Lowest weighted Gini impurity over midpoints between distinct values.
fn best_split<T: Scalar>(
    x: &[&[T]],
    y: &[bool],
    rows: &[usize],
    features: &[usize],
) -> Option<(usize, T, f64)> {
    let total = rows.len();
    let total_pos = rows.iter().filter(|&&r| y[r]).count();
    let mut best: Option<(usize, T, f64)> = None;
    let mut sorted: Vec<(T, bool)> = Vec::with_capacity(total);
    for &f in features {
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| (x[r][f], y[r])));
        sorted.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut left_pos = 0;
        for i in 1..total {
            left_pos += usize::from(sorted[i - 1].1);
            let (lo, hi) = (sorted[i - 1].0, sorted[i].0);
            if lo >= hi || lo.is_nan() || hi.is_nan() {
                continue;
            }
            let score = (i as f64 * gini(left_pos, i)
                + (total - i) as f64 * gini(total_pos - left_pos, total - i))
                / total as f64;
            if best.as_ref().is_none_or(|b| score < b.2) {
                let two = T::one() + T::one();
                let mid = lo + (hi - lo) / two;
                let threshold = if mid < hi { mid } else { lo };
                best = Some((f, threshold, score));
            }
        }
    }
    best
}
