use super::split::{choose, Scanner};
use super::ForestParams;
use crate::rng::Xoshiro256StarStar;

/// Tree node, stored in preorder: a split's left child is always the next
/// node.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// `value <= threshold` goes left, `value > threshold` goes right.
    Split {
        feature: u8,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Sparse class counts, sorted by class index, all non-zero.
    Leaf { counts: Vec<(u32, u32)> },
}

impl TreeNode {
    /// Majority class of a leaf; ties go to the lowest class index.
    pub fn vote(&self) -> Option<u32> {
        match self {
            TreeNode::Leaf { counts } => counts
                .iter()
                .fold(None, |best: Option<(u32, u32)>, &(class, n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((class, n)),
                })
                .map(|(class, _)| class),
            TreeNode::Split { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub(crate) nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Wraps a preorder node list. Structure is checked when the tree is
    /// placed in a forest via [`RandomForest::from_parts`](super::RandomForest::from_parts).
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Leaf reached by `x`.
    pub fn leaf(&self, x: &[f64; 4]) -> &TreeNode {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left
                    } else {
                        *right
                    } as usize;
                }
                leaf => return leaf,
            }
        }
    }

    pub fn predict(&self, x: &[f64; 4]) -> u32 {
        self.leaf(x).vote().expect("leaf")
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

struct Work {
    start: usize,
    end: usize,
    depth: u32,
    /// Split node whose `right` should point at this node.
    right_of: Option<usize>,
}

/// Grows one tree on a bootstrap sample drawn from `rng`.
///
/// RNG use, in order: the bootstrap draws, then one feature-subset draw per
/// node that is not stopped early (pure, too small, or at max depth),
/// visiting nodes in preorder.
pub(crate) fn grow_tree(
    features: &[[f64; 4]],
    labels: &[u32],
    n_classes: usize,
    params: &ForestParams,
    rng: &mut Xoshiro256StarStar,
) -> DecisionTree {
    let n = features.len();
    let draws = ((params.bootstrap_fraction * n as f64).round() as usize).clamp(1, n);
    let sample: Vec<u32> = (0..draws).map(|_| rng.below_usize(n) as u32).collect();

    // one ascending ordering of the sample per feature; every node owns the
    // same [start, end) range in all four
    let mut sorted: [Vec<u32>; 4] = std::array::from_fn(|f| {
        let mut v = sample.clone();
        v.sort_by(|&a, &b| features[a as usize][f].total_cmp(&features[b as usize][f]));
        v
    });
    let mut scratch: Vec<u32> = Vec::with_capacity(draws);
    let mut scanner = Scanner::new(n_classes);
    let mut counts = vec![0u64; n_classes];
    let min_leaf = params.min_leaf.max(1) as usize;

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut stack = vec![Work {
        start: 0,
        end: draws,
        depth: 0,
        right_of: None,
    }];
    while let Some(work) = stack.pop() {
        let me = nodes.len();
        if let Some(parent) = work.right_of {
            if let TreeNode::Split { right, .. } = &mut nodes[parent] {
                *right = me as u32;
            }
        }
        let members = &sorted[0][work.start..work.end];
        counts.iter_mut().for_each(|c| *c = 0);
        for &id in members {
            counts[labels[id as usize] as usize] += 1;
        }
        let size = work.end - work.start;
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let at_depth = params.max_depth.is_some_and(|d| work.depth >= d);
        let split = if pure || size < 2 * min_leaf || at_depth {
            None
        } else {
            let subset = sample_features(rng, params.mtry as usize);
            let candidates: Vec<_> = subset
                .iter()
                .map(|&f| {
                    let order = &sorted[f][work.start..work.end];
                    let seq = order
                        .iter()
                        .map(|&id| (features[id as usize][f], labels[id as usize]));
                    (f, scanner.scan_feature(seq, &counts, min_leaf))
                })
                .collect();
            choose(candidates.into_iter(), &counts)
        };

        let Some(split) = split else {
            let leaf = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(class, &c)| (class as u32, c as u32))
                .collect();
            nodes.push(TreeNode::Leaf { counts: leaf });
            continue;
        };

        let f = split.feature;
        let goes_left = |id: u32| features[id as usize][f] <= split.threshold;
        let n_left = sorted[f][work.start..work.end]
            .iter()
            .take_while(|&&id| goes_left(id))
            .count();
        for (k, order) in sorted.iter_mut().enumerate() {
            if k == f {
                continue;
            }
            // stable partition keeps each side in ascending order
            let range = &mut order[work.start..work.end];
            scratch.clear();
            scratch.extend(range.iter().copied().filter(|&id| !goes_left(id)));
            let mut w = 0;
            for r in 0..range.len() {
                if goes_left(range[r]) {
                    range[w] = range[r];
                    w += 1;
                }
            }
            debug_assert_eq!(w, n_left);
            range[w..].copy_from_slice(&scratch);
        }

        nodes.push(TreeNode::Split {
            feature: f as u8,
            threshold: split.threshold,
            left: me as u32 + 1,
            right: u32::MAX,
        });
        let mid = work.start + n_left;
        stack.push(Work {
            start: mid,
            end: work.end,
            depth: work.depth + 1,
            right_of: Some(me),
        });
        stack.push(Work {
            start: work.start,
            end: mid,
            depth: work.depth + 1,
            right_of: None,
        });
    }
    DecisionTree { nodes }
}

/// `mtry` distinct features out of four, returned in ascending order.
fn sample_features(rng: &mut Xoshiro256StarStar, mtry: usize) -> Vec<usize> {
    let mut pool = [0usize, 1, 2, 3];
    for i in 0..mtry {
        let j = i + rng.below_usize(4 - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..mtry].to_vec();
    chosen.sort_unstable();
    chosen
}
