//! Honest tree growing: splits are chosen on the structure half of a
//! subsample and leaves are populated with the estimation half, so leaf
//! estimates never see the outcomes that shaped the tree.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node of an [`HonestTree`]. Routing sends `x[feature] <= threshold`
/// left.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

/// A fitted honest tree: split structure plus, per leaf, the estimation-half
/// sample indices it contains (indices into the forest's training arrays).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HonestTree {
    pub(crate) nodes: Vec<TreeNode>,
    pub(crate) leaf_members: Vec<Vec<u32>>,
    pub(crate) structure_indices: Vec<u32>,
    pub(crate) estimation_indices: Vec<u32>,
}

impl HonestTree {
    /// Routes a feature row to its leaf id.
    pub fn leaf_for(&self, x: &Array2<f64>, row: usize) -> usize {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { leaf } => return *leaf,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[[row, *feature]] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    /// Estimation-half members of leaf `leaf`.
    pub fn leaf_members(&self, leaf: usize) -> &[u32] {
        &self.leaf_members[leaf]
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_members.len()
    }

    pub fn structure_indices(&self) -> &[u32] {
        &self.structure_indices
    }

    pub fn estimation_indices(&self) -> &[u32] {
        &self.estimation_indices
    }

    /// Honesty invariant: the two halves never share a sample.
    pub fn halves_disjoint(&self) -> bool {
        let mut est = self.estimation_indices.clone();
        est.sort_unstable();
        self.structure_indices
            .iter()
            .all(|i| est.binary_search(i).is_err())
    }

    /// Builds a tree directly from parts; used by tests that need exact
    /// control over leaf membership (including empty leaves).
    pub fn from_parts(
        nodes: Vec<TreeNode>,
        leaf_members: Vec<Vec<u32>>,
        structure_indices: Vec<u32>,
        estimation_indices: Vec<u32>,
    ) -> Self {
        Self {
            nodes,
            leaf_members,
            structure_indices,
            estimation_indices,
        }
    }
}

/// Explicit subsample halves for one tree. The public fit entry points draw
/// these from the forest seed; tests and the permutation-consistency checks
/// can supply them directly.
#[derive(Debug, Clone)]
pub struct TreePlan {
    pub structure: Vec<u32>,
    pub estimation: Vec<u32>,
}

/// Per-node split targets. Implementations see the structure-half sample
/// indices of the node and return one score per sample; splits maximize
/// `(sum left)^2/n_left + (sum right)^2/n_right` of these scores.
pub(crate) trait SplitScorer {
    /// `None` marks a node that cannot be scored (forced leaf).
    fn node_scores(&self, node_structure: &[u32]) -> Option<Vec<f64>>;
}

pub(crate) struct GrowSettings {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub mtry: usize,
}

/// Grows one honest tree.
///
/// Split candidates are midpoints between consecutive distinct sorted
/// structure values on each of `mtry` randomly drawn features; a split is
/// valid only if both children keep at least `min_leaf` structure samples
/// and `min_leaf` estimation samples. Criterion ties break toward the
/// smallest feature index, then the smallest threshold.
pub(crate) fn grow_tree(
    x: &Array2<f64>,
    plan: &TreePlan,
    scorer: &dyn SplitScorer,
    settings: &GrowSettings,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<HonestTree> {
    let p = x.ncols();
    if plan.structure.is_empty() || plan.estimation.is_empty() {
        return Err(Error::ForestFit(
            "tree plan needs non-empty structure and estimation halves".into(),
        ));
    }

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut leaf_members: Vec<Vec<u32>> = Vec::new();

    // Work stack of (node slot, structure members, estimation members, depth);
    // deterministic DFS, left child first.
    struct Item {
        slot: usize,
        structure: Vec<u32>,
        estimation: Vec<u32>,
        depth: usize,
    }
    nodes.push(TreeNode::Leaf { leaf: usize::MAX });
    let mut stack = vec![Item {
        slot: 0,
        structure: plan.structure.clone(),
        estimation: plan.estimation.clone(),
        depth: 0,
    }];

    while let Some(item) = stack.pop() {
        let make_leaf =
            |nodes: &mut Vec<TreeNode>, leaf_members: &mut Vec<Vec<u32>>, item: &Item| {
                let leaf = leaf_members.len();
                leaf_members.push(item.estimation.clone());
                nodes[item.slot] = TreeNode::Leaf { leaf };
            };

        let depth_stop = settings
            .max_depth
            .is_some_and(|d| item.depth >= d);
        if depth_stop
            || item.structure.len() < 2 * settings.min_leaf
            || item.estimation.len() < 2 * settings.min_leaf
        {
            make_leaf(&mut nodes, &mut leaf_members, &item);
            continue;
        }
        let Some(scores) = scorer.node_scores(&item.structure) else {
            make_leaf(&mut nodes, &mut leaf_members, &item);
            continue;
        };

        // Candidate features for this node, sorted so criterion ties break
        // toward the smallest feature index.
        let mtry = settings.mtry.min(p).max(1);
        let mut features = rand::seq::index::sample(rng, p, mtry).into_vec();
        features.sort_unstable();

        let best = find_best_split(x, &item.structure, &item.estimation, &scores, &features, settings.min_leaf);
        let Some((feature, threshold)) = best else {
            make_leaf(&mut nodes, &mut leaf_members, &item);
            continue;
        };

        let (s_left, s_right): (Vec<u32>, Vec<u32>) = item
            .structure
            .iter()
            .partition(|&&i| x[[i as usize, feature]] <= threshold);
        let (e_left, e_right): (Vec<u32>, Vec<u32>) = item
            .estimation
            .iter()
            .partition(|&&i| x[[i as usize, feature]] <= threshold);

        let left_slot = nodes.len();
        nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        let right_slot = nodes.len();
        nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        nodes[item.slot] = TreeNode::Split {
            feature,
            threshold,
            left: left_slot,
            right: right_slot,
        };
        stack.push(Item {
            slot: right_slot,
            structure: s_right,
            estimation: e_right,
            depth: item.depth + 1,
        });
        stack.push(Item {
            slot: left_slot,
            structure: s_left,
            estimation: e_left,
            depth: item.depth + 1,
        });
    }

    Ok(HonestTree {
        nodes,
        leaf_members,
        structure_indices: plan.structure.clone(),
        estimation_indices: plan.estimation.clone(),
    })
}

/// Scans the candidate features and returns the best `(feature, threshold)`,
/// or `None` when no valid split improves on the parent.
fn find_best_split(
    x: &Array2<f64>,
    structure: &[u32],
    estimation: &[u32],
    scores: &[f64],
    features: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64)> {
    let n_s = structure.len();
    let total_score: f64 = scores.iter().sum();
    let parent_term = total_score * total_score / n_s as f64;

    let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
    let mut svals: Vec<(f64, f64)> = Vec::with_capacity(n_s);
    let mut evals: Vec<f64> = Vec::with_capacity(estimation.len());

    for &feature in features {
        svals.clear();
        for (pos, &i) in structure.iter().enumerate() {
            svals.push((x[[i as usize, feature]], scores[pos]));
        }
        svals.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        evals.clear();
        for &i in estimation {
            evals.push(x[[i as usize, feature]]);
        }
        evals.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));

        let mut left_count = 0usize;
        let mut left_sum = 0.0f64;
        let mut e_ptr = 0usize;
        let mut idx = 0usize;
        while idx < n_s {
            // Consume the group of equal values.
            let value = svals[idx].0;
            while idx < n_s && svals[idx].0 == value {
                left_sum += svals[idx].1;
                left_count += 1;
                idx += 1;
            }
            if idx == n_s {
                break;
            }
            let threshold = 0.5 * (value + svals[idx].0);
            if threshold <= value || threshold >= svals[idx].0 {
                // Midpoint collapsed onto a data value (adjacent floats).
                continue;
            }
            let right_count = n_s - left_count;
            if left_count < min_leaf || right_count < min_leaf {
                continue;
            }
            while e_ptr < evals.len() && evals[e_ptr] <= threshold {
                e_ptr += 1;
            }
            let e_left = e_ptr;
            let e_right = evals.len() - e_left;
            if e_left < min_leaf || e_right < min_leaf {
                continue;
            }
            let right_sum = total_score - left_sum;
            let gain = left_sum * left_sum / left_count as f64
                + right_sum * right_sum / right_count as f64
                - parent_term;
            if gain > 1e-12 * (1.0 + parent_term.abs())
                && best.is_none_or(|(bg, _, _)| gain > bg)
            {
                best = Some((gain, feature, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    struct IdentityScorer(Vec<f64>);
    impl SplitScorer for IdentityScorer {
        fn node_scores(&self, node: &[u32]) -> Option<Vec<f64>> {
            Some(node.iter().map(|&i| self.0[i as usize]).collect())
        }
    }

    #[test]
    fn grows_a_separating_split() {
        // 1-D data with two target groups; min_leaf 2 on both halves.
        let x = arr2(&[
            [0.0],
            [0.1],
            [0.2],
            [0.3],
            [1.0],
            [1.1],
            [1.2],
            [1.3],
        ]);
        let targets = vec![0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0];
        let plan = TreePlan {
            structure: vec![0, 1, 4, 5],
            estimation: vec![2, 3, 6, 7],
        };
        let mut rng = crate::rng::stream_rng(0, 0);
        let tree = grow_tree(
            &x,
            &plan,
            &IdentityScorer(targets),
            &GrowSettings {
                min_leaf: 2,
                max_depth: None,
                mtry: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tree.n_leaves(), 2);
        assert!(tree.halves_disjoint());
        // left leaf holds estimation rows 2,3; right leaf rows 6,7
        let left_leaf = tree.leaf_for(&x, 0);
        let right_leaf = tree.leaf_for(&x, 7);
        assert_ne!(left_leaf, right_leaf);
        assert_eq!(tree.leaf_members(left_leaf), &[2, 3]);
        assert_eq!(tree.leaf_members(right_leaf), &[6, 7]);
    }

    #[test]
    fn constant_scores_give_single_leaf() {
        let x = arr2(&[[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]]);
        let plan = TreePlan {
            structure: vec![0, 1, 2],
            estimation: vec![3, 4, 5],
        };
        let mut rng = crate::rng::stream_rng(1, 0);
        let tree = grow_tree(
            &x,
            &plan,
            &IdentityScorer(vec![2.0; 6]),
            &GrowSettings {
                min_leaf: 1,
                max_depth: None,
                mtry: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.leaf_members(0), &[3, 4, 5]);
    }

    #[test]
    fn max_depth_zero_forces_root_leaf() {
        let x = arr2(&[[0.0], [1.0], [2.0], [3.0]]);
        let plan = TreePlan {
            structure: vec![0, 1],
            estimation: vec![2, 3],
        };
        let mut rng = crate::rng::stream_rng(2, 0);
        let tree = grow_tree(
            &x,
            &plan,
            &IdentityScorer(vec![0.0, 5.0, 0.0, 5.0]),
            &GrowSettings {
                min_leaf: 1,
                max_depth: Some(0),
                mtry: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tree.n_leaves(), 1);
    }
}
