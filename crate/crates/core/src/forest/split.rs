//! Gini split search.
//!
//! Maximizing the Gini decrease of a binary split is the same as maximizing
//! `S_l/n_l + S_r/n_r`, where `S` is the sum of squared class counts of a
//! child. Candidates are compared in exact integer arithmetic on that
//! ratio, so equal-quality splits tie exactly and the tie rule (lower
//! feature, then lower threshold) is well defined. The comparison is exact
//! for node sizes below about 5·10^7.

use std::cmp::Ordering;

/// Chosen split: route `value <= threshold` left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Gini impurity decrease (parent minus size-weighted children).
    pub gain: f64,
}

/// `S_l/n_l + S_r/n_r` as an unreduced fraction.
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn new(sq_left: u64, n_left: u64, sq_right: u64, n_right: u64) -> Self {
        let (sl, nl, sr, nr) = (
            sq_left as u128,
            n_left as u128,
            sq_right as u128,
            n_right as u128,
        );
        Score {
            num: sl * nr + sr * nl,
            den: nl * nr,
        }
    }

    fn cmp(&self, other: &Score) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Threshold strictly between two adjacent distinct values, as close to the
/// midpoint as floating point allows.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) * 0.5;
    if mid >= hi || mid < lo || !mid.is_finite() {
        lo
    } else {
        mid
    }
}

fn sum_sq(counts: &[u64]) -> u64 {
    counts.iter().map(|c| c * c).sum()
}

/// Scratch space reused across nodes.
pub(crate) struct Scanner {
    left: Vec<u64>,
    right: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    threshold: f64,
    score: Score,
}

impl Scanner {
    pub(crate) fn new(n_classes: usize) -> Self {
        Self {
            left: vec![0; n_classes],
            right: vec![0; n_classes],
        }
    }

    /// Best threshold on one feature. `sorted` yields `(value, class)` in
    /// ascending value order; `parent` holds the node's class counts.
    pub(crate) fn scan_feature(
        &mut self,
        sorted: impl ExactSizeIterator<Item = (f64, u32)>,
        parent: &[u64],
        min_leaf: usize,
    ) -> Option<Candidate> {
        let n = sorted.len();
        self.left.iter_mut().for_each(|c| *c = 0);
        self.right.copy_from_slice(parent);
        let mut sq_left = 0u64;
        let mut sq_right = sum_sq(parent);
        let mut best: Option<Candidate> = None;
        let mut prev: Option<f64> = None;
        for (i, (value, class)) in sorted.enumerate() {
            if let Some(p) = prev {
                // boundary between positions i-1 and i
                if p < value && i >= min_leaf && n - i >= min_leaf {
                    let score = Score::new(sq_left, i as u64, sq_right, (n - i) as u64);
                    if best.is_none_or(|b| score.cmp(&b.score) == Ordering::Greater) {
                        best = Some(Candidate {
                            threshold: midpoint(p, value),
                            score,
                        });
                    }
                }
            }
            let c = class as usize;
            sq_left += 2 * self.left[c] + 1;
            self.left[c] += 1;
            sq_right -= 2 * self.right[c] - 1;
            self.right[c] -= 1;
            prev = Some(value);
        }
        best
    }
}

/// Folds per-feature candidates into the node's best split, or `None` when
/// no candidate strictly reduces impurity. `candidates` must come in
/// ascending feature order.
pub(crate) fn choose(
    candidates: impl Iterator<Item = (usize, Option<Candidate>)>,
    parent: &[u64],
) -> Option<Split> {
    let n: u64 = parent.iter().sum();
    let parent_sq = sum_sq(parent);
    let mut best: Option<(usize, Candidate)> = None;
    for (feature, cand) in candidates {
        let Some(cand) = cand else { continue };
        if best.is_none_or(|(_, b)| cand.score.cmp(&b.score) == Ordering::Greater) {
            best = Some((feature, cand));
        }
    }
    let (feature, cand) = best?;
    // gain > 0  <=>  num/den > S_p/n
    if cand.score.num * n as u128 <= parent_sq as u128 * cand.score.den {
        return None;
    }
    let gain =
        (cand.score.num as f64 / cand.score.den as f64 - parent_sq as f64 / n as f64) / n as f64;
    Some(Split {
        feature,
        threshold: cand.threshold,
        gain,
    })
}

/// Best Gini split of `instances` over the features in `feature_subset`.
///
/// Thresholds are midpoints between consecutive distinct values; ties go to
/// the lower feature index, then the lower threshold. Returns `None` when
/// there are fewer than two instances or no split has positive gain.
pub fn best_split(instances: &[([f64; 4], u32)], feature_subset: &[usize]) -> Option<Split> {
    best_split_with_min_leaf(instances, feature_subset, 1)
}

/// [`best_split`] restricted to splits leaving at least `min_leaf`
/// instances on each side.
pub fn best_split_with_min_leaf(
    instances: &[([f64; 4], u32)],
    feature_subset: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    if instances.len() < 2 {
        return None;
    }
    let n_classes = instances
        .iter()
        .map(|(_, c)| *c as usize + 1)
        .max()
        .unwrap_or(0);
    let mut parent = vec![0u64; n_classes];
    for (_, c) in instances {
        parent[*c as usize] += 1;
    }
    let mut features = feature_subset.to_vec();
    features.sort_unstable();
    features.dedup();
    let mut scanner = Scanner::new(n_classes);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let candidates: Vec<(usize, Option<Candidate>)> = features
        .iter()
        .map(|&f| {
            order.sort_by(|&a, &b| instances[a].0[f].total_cmp(&instances[b].0[f]));
            let sorted = order.iter().map(|&i| (instances[i].0[f], instances[i].1));
            (f, scanner.scan_feature(sorted, &parent, min_leaf.max(1)))
        })
        .collect();
    choose(candidates.into_iter(), &parent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type Q = Ratio<i128>;

    /// Gini impurity from the definition, in exact rationals.
    fn gini(labels: &[u32]) -> Q {
        let n = labels.len() as i128;
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut g = Q::from_integer(1);
        for c in classes {
            let k = labels.iter().filter(|&&l| l == c).count() as i128;
            g -= Q::new(k * k, n * n);
        }
        g
    }

    /// Exhaustive enumeration: every feature, every midpoint, exact gains.
    fn oracle(instances: &[([f64; 4], u32)], subset: &[usize]) -> Option<(usize, f64, Q)> {
        let n = instances.len() as i128;
        let all: Vec<u32> = instances.iter().map(|i| i.1).collect();
        let parent = gini(&all);
        let mut best: Option<(usize, f64, Q)> = None;
        let mut feats = subset.to_vec();
        feats.sort_unstable();
        feats.dedup();
        for f in feats {
            let mut vals: Vec<f64> = instances.iter().map(|i| i.0[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let left: Vec<u32> = instances
                    .iter()
                    .filter(|i| i.0[f] <= t)
                    .map(|i| i.1)
                    .collect();
                let right: Vec<u32> = instances
                    .iter()
                    .filter(|i| i.0[f] > t)
                    .map(|i| i.1)
                    .collect();
                let gain = parent
                    - Q::new(left.len() as i128, n) * gini(&left)
                    - Q::new(right.len() as i128, n) * gini(&right);
                let better = match &best {
                    None => true,
                    Some((bf, bt, bg)) => gain > *bg || (gain == *bg && (f, t) < (*bf, *bt)),
                };
                if better {
                    best = Some((f, t, gain));
                }
            }
        }
        best.filter(|b| b.2 > Q::from_integer(0))
    }

    fn row(v: f64, c: u32) -> ([f64; 4], u32) {
        ([v, 0.0, 0.0, 0.0], c)
    }

    #[test]
    fn four_point_example() {
        let data = [row(1.0, 0), row(2.0, 0), row(3.0, 1), row(4.0, 1)];
        let s = best_split(&data, &[0]).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 2.5));
        assert!((s.gain - 0.5).abs() < 1e-15);
        let (f, t, g) = oracle(&data, &[0]).unwrap();
        assert_eq!((f, t, g), (0, 2.5, Q::new(1, 2)));
    }

    #[test]
    fn pure_node_has_no_split() {
        let data = [row(1.0, 3), row(2.0, 3), row(5.0, 3)];
        assert_eq!(best_split(&data, &[0, 1, 2, 3]), None);
    }

    #[test]
    fn constant_feature_has_no_split() {
        let data = [row(1.0, 0), row(1.0, 1)];
        assert_eq!(best_split(&data, &[0]), None);
        assert_eq!(best_split(&data[..1], &[0]), None);
    }

    #[test]
    fn ties_prefer_lower_feature_then_threshold() {
        // features 0 and 2 are identical; both separate perfectly
        let data = [([1.0, 9.0, 1.0, 0.0], 0), ([2.0, 9.0, 2.0, 0.0], 1)];
        let s = best_split(&data, &[2, 0]).unwrap();
        assert_eq!(s.feature, 0);
        // A,B,A,B along one axis: thresholds 1.5 and 3.5 score the same
        let data = [row(1.0, 0), row(2.0, 1), row(3.0, 0), row(4.0, 1)];
        let got = best_split(&data, &[0]).unwrap();
        let (f, t, _) = oracle(&data, &[0]).unwrap();
        assert_eq!((got.feature, got.threshold), (f, t));
        assert_eq!(got.threshold, 1.5);
    }

    #[test]
    fn min_leaf_excludes_small_children() {
        let data = [row(1.0, 0), row(2.0, 1), row(3.0, 1), row(4.0, 1)];
        assert_eq!(best_split(&data, &[0]).unwrap().threshold, 1.5);
        assert_eq!(
            best_split_with_min_leaf(&data, &[0], 2).unwrap().threshold,
            2.5
        );
        assert_eq!(best_split_with_min_leaf(&data, &[0], 3), None);
    }

    #[test]
    fn midpoint_stays_strictly_below_upper() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let m = midpoint(lo, hi);
        assert!(lo <= m && m < hi);
        assert_eq!(midpoint(2.0, 4.0), 3.0);
    }

    fn small_dataset() -> impl Strategy<Value = Vec<([f64; 4], u32)>> {
        proptest::collection::vec(
            (proptest::array::uniform4(0u8..4), 0u32..3).prop_map(|(v, c)| (v.map(f64::from), c)),
            2..=12,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_exhaustive_oracle(
            data in small_dataset(),
            subset in proptest::sample::subsequence(vec![0usize, 1, 2, 3], 1..=4),
        ) {
            let got = best_split(&data, &subset);
            let want = oracle(&data, &subset);
            match (got, want) {
                (None, None) => {}
                (Some(s), Some((f, t, g))) => {
                    prop_assert_eq!((s.feature, s.threshold), (f, t));
                    let g = *g.numer() as f64 / *g.denom() as f64;
                    prop_assert!((s.gain - g).abs() < 1e-12);
                }
                (a, b) => prop_assert!(false, "got {:?}, oracle {:?}", a, b),
            }
        }
    }
}
