//! Random forest of CART trees over the four fingerprint features.
//!
//! Each tree is grown on a bootstrap sample with a fresh random subset of
//! `mtry` features considered at every node, splitting on Gini decrease
//! until nodes are pure. Prediction is a plurality vote of the trees' leaf
//! majorities. Every random choice comes from a per-tree xoshiro256**
//! stream whose seed is element `t` of a splitmix64 stream over the master
//! seed, so a model depends only on (data, params, seed) and not on how
//! trees are scheduled across threads.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::fingerprint::Fingerprint;
use crate::rng::{SplitMix64, Xoshiro256StarStar};

mod model_file;
mod split;
mod tree;

pub use model_file::{
    decode_model, encode_model, fnv1a64, load_model, save_model, ModelFormatError, FORMAT_VERSION,
    MAGIC,
};
pub use split::{best_split, best_split_with_min_leaf, Split};
pub use tree::{DecisionTree, TreeNode};

pub const N_FEATURES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training set has {n} instances but min_leaf is {min_leaf}")]
    TooFewInstances { n: usize, min_leaf: u32 },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("could not start worker pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: u32,
    /// Features considered per node; ⌊√4⌋ = 2 by default.
    pub mtry: u32,
    pub min_leaf: u32,
    /// `None` grows until purity.
    pub max_depth: Option<u32>,
    /// Bootstrap draws as a fraction of the training set, with replacement.
    pub bootstrap_fraction: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            mtry: 2,
            min_leaf: 1,
            max_depth: None,
            bootstrap_fraction: 1.0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::InvalidParams(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if !(1..=N_FEATURES as u32).contains(&self.mtry) {
            return bad(format!(
                "mtry must be in 1..={N_FEATURES}, got {}",
                self.mtry
            ));
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be at least 1 when set".into());
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return bad(format!(
                "bootstrap_fraction must be in (0, 1], got {}",
                self.bootstrap_fraction
            ));
        }
        Ok(())
    }
}

/// Trained, immutable ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub(crate) params: ForestParams,
    pub(crate) seed: u64,
    pub(crate) labels: Vec<String>,
    pub(crate) trees: Vec<DecisionTree>,
}

/// Per-tree seeds: the first `n` outputs of splitmix64 over the master seed.
pub fn tree_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut sm = SplitMix64::new(master);
    (0..n).map(|_| sm.next_u64()).collect()
}

impl RandomForest {
    /// Trains on the current rayon pool.
    pub fn train(
        train_set: &Dataset,
        params: &ForestParams,
        seed: u64,
    ) -> Result<Self, ForestError> {
        Self::train_impl(train_set, params, seed, true)
    }

    /// Trains with an explicit worker count; `1` trains trees one after
    /// another on the calling thread. The result is identical either way.
    pub fn train_with_threads(
        train_set: &Dataset,
        params: &ForestParams,
        seed: u64,
        threads: usize,
    ) -> Result<Self, ForestError> {
        if threads <= 1 {
            return Self::train_impl(train_set, params, seed, false);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| ForestError::ThreadPool(e.to_string()))?;
        pool.install(|| Self::train_impl(train_set, params, seed, true))
    }

    fn train_impl(
        train_set: &Dataset,
        params: &ForestParams,
        seed: u64,
        parallel: bool,
    ) -> Result<Self, ForestError> {
        params.validate()?;
        if train_set.is_empty() {
            return Err(ForestError::EmptyTrainingSet);
        }
        if train_set.len() < params.min_leaf as usize {
            return Err(ForestError::TooFewInstances {
                n: train_set.len(),
                min_leaf: params.min_leaf,
            });
        }
        let features = train_set.features();
        let labels = train_set.label_ids();
        let n_classes = train_set.labels().len();
        let grow = |s: &u64| {
            let mut rng = Xoshiro256StarStar::seed_from_u64(*s);
            tree::grow_tree(features, labels, n_classes, params, &mut rng)
        };
        let seeds = tree_seeds(seed, params.n_trees as usize);
        let trees = if parallel {
            seeds.par_iter().map(grow).collect()
        } else {
            seeds.iter().map(grow).collect()
        };
        Ok(Self {
            params: *params,
            seed,
            labels: train_set.labels().to_vec(),
            trees,
        })
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Class vocabulary, sorted lexicographically; class ids index into it.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Number of trees voting for each class, indexed like [`labels`](Self::labels).
    pub fn votes(&self, x: &[f64; 4]) -> Vec<u32> {
        let mut votes = vec![0u32; self.labels.len()];
        for tree in &self.trees {
            votes[tree.predict(x) as usize] += 1;
        }
        votes
    }

    /// Plurality class id; ties go to the lowest id (smallest label).
    pub fn predict_index(&self, x: &[f64; 4]) -> usize {
        let votes = self.votes(x);
        let mut best = 0;
        for (i, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict(&self, fingerprint: &Fingerprint) -> &str {
        &self.labels[self.predict_index(&fingerprint.to_array())]
    }

    /// Fraction of trees voting for each label that received any vote.
    pub fn predict_proba(&self, fingerprint: &Fingerprint) -> BTreeMap<String, f64> {
        let n = self.trees.len() as f64;
        self.votes(&fingerprint.to_array())
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v > 0)
            .map(|(i, v)| (self.labels[i].clone(), f64::from(v) / n))
            .collect()
    }

    /// Assembles a forest from parts, checking the structural invariants.
    pub fn from_parts(
        params: ForestParams,
        seed: u64,
        labels: Vec<String>,
        trees: Vec<DecisionTree>,
    ) -> Result<Self, ForestError> {
        params.validate()?;
        let invalid = |m: &str| Err(ForestError::InvalidParams(m.to_string()));
        if labels.is_empty() || labels.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("labels must be non-empty, sorted and distinct");
        }
        if trees.len() != params.n_trees as usize {
            return invalid("tree count does not match n_trees");
        }
        for tree in &trees {
            if !model_file::tree_is_well_formed(tree, labels.len(), params.min_leaf) {
                return invalid("malformed tree");
            }
        }
        Ok(Self {
            params,
            seed,
            labels,
            trees,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::LabeledInstance;
    use proptest::prelude::*;

    fn leaf(class: u32) -> DecisionTree {
        DecisionTree {
            nodes: vec![TreeNode::Leaf {
                counts: vec![(class, 1)],
            }],
        }
    }

    fn constant_forest(labels: &[&str], votes: &[(u32, usize)]) -> RandomForest {
        let trees: Vec<_> = votes
            .iter()
            .flat_map(|&(c, n)| std::iter::repeat_n(leaf(c), n))
            .collect();
        let params = ForestParams {
            n_trees: trees.len() as u32,
            ..Default::default()
        };
        RandomForest::from_parts(
            params,
            1,
            labels.iter().map(|s| s.to_string()).collect(),
            trees,
        )
        .unwrap()
    }

    fn fp(v: f64) -> Fingerprint {
        Fingerprint::from_array([v, 0.0, v, 0.0])
    }

    fn dataset(rows: &[(&str, [f64; 4])]) -> Dataset {
        Dataset::from_instances(rows.iter().map(|(l, f)| LabeledInstance {
            fingerprint: Fingerprint::from_array(*f),
            label: l.to_string(),
        }))
        .unwrap()
    }

    #[test]
    fn defaults() {
        let p = ForestParams::default();
        assert_eq!(
            (p.n_trees, p.mtry, p.min_leaf, p.max_depth),
            (100, 2, 1, None)
        );
    }

    #[test]
    fn invalid_params() {
        for p in [
            ForestParams {
                n_trees: 0,
                ..Default::default()
            },
            ForestParams {
                mtry: 0,
                ..Default::default()
            },
            ForestParams {
                mtry: 5,
                ..Default::default()
            },
            ForestParams {
                min_leaf: 0,
                ..Default::default()
            },
            ForestParams {
                bootstrap_fraction: 0.0,
                ..Default::default()
            },
        ] {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn unanimous_and_plurality() {
        let f = constant_forest(&["A"], &[(0, 10)]);
        assert_eq!(f.predict(&fp(1.0)), "A");
        assert_eq!(
            f.predict_proba(&fp(1.0)),
            BTreeMap::from([("A".to_string(), 1.0)])
        );

        let f = constant_forest(&["A", "B"], &[(1, 40), (0, 60)]);
        assert_eq!(f.predict(&fp(0.0)), "A");
        let p = f.predict_proba(&fp(0.0));
        assert_eq!((p["A"], p["B"]), (0.6, 0.4));
    }

    #[test]
    fn vote_tie_goes_to_smallest_label() {
        let f = constant_forest(&["bulb", "camera"], &[(1, 50), (0, 50)]);
        assert_eq!(f.predict(&fp(3.0)), "bulb");
    }

    #[test]
    fn single_class_training_gives_single_leaves() {
        let ds = dataset(&[
            ("cam", [1.0, 2.0, 3.0, 4.0]),
            ("cam", [5.0, 1.0, 0.0, 9.0]),
            ("cam", [0.0; 4]),
        ]);
        let f = RandomForest::train(
            &ds,
            &ForestParams {
                n_trees: 7,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(f.trees().iter().all(|t| t.nodes().len() == 1));
        assert_eq!(f.predict(&fp(100.0)), "cam");
    }

    #[test]
    fn training_errors() {
        let empty = Dataset::default();
        assert_eq!(
            RandomForest::train(&empty, &ForestParams::default(), 1),
            Err(ForestError::EmptyTrainingSet)
        );
        let one = dataset(&[("a", [0.0; 4])]);
        let p = ForestParams {
            min_leaf: 2,
            ..Default::default()
        };
        assert!(matches!(
            RandomForest::train(&one, &p, 1),
            Err(ForestError::TooFewInstances { .. })
        ));
    }

    #[test]
    fn serial_and_parallel_agree() {
        let rows: Vec<(&str, [f64; 4])> = (0..120)
            .map(|i| {
                let v = i as f64;
                (
                    if i % 3 == 0 { "x" } else { "y" },
                    [v % 7.0, v % 5.0, v % 11.0, (v * 0.37).sin().abs()],
                )
            })
            .collect();
        let ds = dataset(&rows);
        let p = ForestParams {
            n_trees: 16,
            ..Default::default()
        };
        let serial = RandomForest::train_with_threads(&ds, &p, 1, 1).unwrap();
        let parallel = RandomForest::train_with_threads(&ds, &p, 1, 4).unwrap();
        assert_eq!(encode_model(&serial), encode_model(&parallel));
        let other = RandomForest::train_with_threads(&ds, &p, 2, 1).unwrap();
        assert_ne!(encode_model(&serial), encode_model(&other));
    }

    #[test]
    fn tree_seed_stream() {
        let s = tree_seeds(1234567, 2);
        assert_eq!(s, vec![6457827717110365317, 3203168211198807973]);
    }

    /// Integer-valued features; the label is a function of the features, so
    /// labels are always consistent.
    fn random_dataset(seed: u64, n: usize, classes: u32) -> Dataset {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let names = ["a", "b", "c", "d"];
        let rows: Vec<(&str, [f64; 4])> = (0..n)
            .map(|_| {
                let x: [f64; 4] = std::array::from_fn(|_| rng.below(8) as f64);
                let c = (x[0] + 2.0 * x[1] + (x[2] > 4.0) as u8 as f64) as usize % classes as usize;
                (names[c], x)
            })
            .collect();
        dataset(&rows)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn proba_argmax_agrees_with_predict(seed in any::<u64>(), probes in proptest::collection::vec(proptest::array::uniform4(0.0f64..20.0), 20)) {
            let ds = random_dataset(seed, 80, 3);
            let f = RandomForest::train(&ds, &ForestParams { n_trees: 11, ..Default::default() }, seed).unwrap();
            for x in probes {
                let fpx = Fingerprint::from_array(x);
                let label = f.predict(&fpx);
                prop_assert!(f.labels().iter().any(|l| l == label));
                let proba = f.predict_proba(&fpx);
                prop_assert!((proba.values().sum::<f64>() - 1.0).abs() < 1e-12);
                let max = proba.values().cloned().fold(0.0, f64::max);
                let top: Vec<&String> = proba.iter().filter(|(_, &p)| p == max).map(|(l, _)| l).collect();
                // BTreeMap order: top[0] is the smallest tied label
                prop_assert_eq!(top[0].as_str(), label);
            }
        }

        #[test]
        fn training_fit_not_worse_than_holdout(seed in any::<u64>()) {
            let ds = random_dataset(seed, 300, 3).dedupe().0;
            let (train, test) = ds.split(&crate::dataset::SplitSpec { seed, ..Default::default() }).unwrap();
            let f = RandomForest::train(&train, &ForestParams { n_trees: 25, ..Default::default() }, 1).unwrap();
            let acc = |d: &Dataset| {
                (0..d.len()).filter(|&i| f.predict(&Fingerprint::from_array(d.features()[i])) == d.label(i)).count() as f64
                    / d.len() as f64
            };
            prop_assert!(acc(&train) >= acc(&test));
        }

        #[test]
        fn perturbation_without_crossing_thresholds_keeps_votes(seed in any::<u64>(), x in proptest::array::uniform4(0.0f64..20.0)) {
            let ds = random_dataset(seed, 60, 2);
            let f = RandomForest::train(&ds, &ForestParams { n_trees: 9, ..Default::default() }, 3).unwrap();
            for (t, tree) in f.trees().iter().enumerate() {
                // walk x's path, collect the tightest bounds on each feature
                let mut lo = [f64::NEG_INFINITY; 4];
                let mut hi = [f64::INFINITY; 4];
                let mut i = 0usize;
                while let TreeNode::Split { feature, threshold, left, right } = &tree.nodes()[i] {
                    let k = *feature as usize;
                    if x[k] <= *threshold { hi[k] = hi[k].min(*threshold); i = *left as usize; }
                    else { lo[k] = lo[k].max(*threshold); i = *right as usize; }
                }
                // move every feature to another point of (lo, hi]
                let y: [f64; 4] = std::array::from_fn(|k| if hi[k].is_finite() { hi[k] } else { x[k] + 1.0 });
                prop_assert!((0..4).all(|k| lo[k] < y[k] && y[k] <= hi[k]));
                prop_assert_eq!(tree.predict(&x), tree.predict(&y), "tree {}", t);
            }
        }
    }
}
