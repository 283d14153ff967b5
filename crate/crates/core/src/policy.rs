//! Update, prune and sample: the per-epoch policy cycle over an [`AugTree`].
//!
//! After each epoch every node on the path that was just trained with
//! receives the per-visit value `L_ma / L_val` (with `L_ma` the moving
//! average of the previous and current validation loss) and records the
//! loss change `L_val(t) - L_val(t-1)`. Walking the path from the root, the
//! first node whose last `prune_window` loss changes sum to a positive
//! number is removed together with its subtree, and the walk stops.
//!
//! The next path is then sampled top-down. While the mean visit count of
//! the candidate children is below the layer's `k_uct` threshold a child is
//! drawn uniformly; afterwards children are scored with
//!
//! ```text
//! UCT = q_sum / n + c1 * sqrt(ln(n_parent) / n) + c2 * S
//! S   = (1 - lambda) * q_mean + lambda * mean(q_mean of same-layer peers)
//! ```
//!
//! and drawn from `softmax(UCT / tau)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tree::{AugNode, AugPath, AugTree, NodeId, PruneEvent, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("{field} = {value} is out of range: {bound}")]
    InvalidParam {
        field: &'static str,
        value: f64,
        bound: &'static str,
    },
    #[error("k_uct has {got} entries but the tree has {depth} layers")]
    ThresholdCount { got: usize, depth: usize },
    #[error("feedback for epoch {got} but the outstanding path is for epoch {expected}")]
    StaleFeedback { expected: u64, got: u64 },
    #[error("validation loss must be finite and positive, got {0}")]
    InvalidLoss(f64),
    #[error("node {0} has never been visited")]
    UnvisitedNode(NodeId),
    #[error("node {0} has no children")]
    NoChildren(NodeId),
    #[error("every first-layer node has been pruned")]
    EmptyTree,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyParams {
    /// Weight of the previous epoch's loss in the moving average.
    pub beta: f64,
    /// Weight of same-layer peers in the communication term.
    pub lambda: f64,
    /// Exploration coefficient.
    pub c1: f64,
    /// Communication-term coefficient.
    pub c2: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// Per-layer mean-visit thresholds for switching from uniform to UCT sampling.
    pub k_uct: Vec<u32>,
    /// Number of recent loss changes summed by the prune test.
    pub prune_window: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda: 0.5,
            c1: std::f64::consts::SQRT_2,
            c2: 0.5,
            tau: 1.0,
            k_uct: vec![3, 1, 1],
            prune_window: 5,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let check = |field, value: f64, ok: bool, bound| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(PolicyError::InvalidParam { field, value, bound })
            }
        };
        check("beta", self.beta, (0.0..=1.0).contains(&self.beta), "[0, 1]")?;
        check("lambda", self.lambda, (0.0..=1.0).contains(&self.lambda), "[0, 1]")?;
        check("c1", self.c1, self.c1 >= 0.0, ">= 0")?;
        check("c2", self.c2, self.c2 >= 0.0, ">= 0")?;
        check("tau", self.tau, self.tau > 0.0, "> 0")?;
        let window = self.prune_window as f64;
        check("prune_window", window, self.prune_window >= 1, ">= 1")?;
        Ok(())
    }

    /// Validates against a concrete tree depth as well.
    pub fn validate_for_depth(&self, depth: usize) -> Result<(), PolicyError> {
        self.validate()?;
        if self.k_uct.len() != depth {
            return Err(PolicyError::ThresholdCount {
                got: self.k_uct.len(),
                depth,
            });
        }
        Ok(())
    }
}

/// `beta * prev + (1 - beta) * cur`.
#[inline]
pub fn moving_average<T: Scalar>(prev: T, cur: T, beta: T) -> T {
    beta * prev + (T::one() - beta) * cur
}

/// Value credited to every node on the path for one epoch.
#[inline]
pub fn per_visit_value<T: Scalar>(l_ma: T, l_val: T) -> T {
    l_ma / l_val
}

/// Exploitation + exploration + communication score.
#[inline]
pub fn uct<T: Scalar>(q_sum: T, visits: T, parent_visits: T, s: T, c1: T, c2: T) -> T {
    q_sum / visits + c1 * (parent_visits.ln() / visits).sqrt() + c2 * s
}

/// Temperature softmax, shifted by the maximum score for overflow safety.
pub fn softmax<T: Scalar>(scores: &[T], tau: T) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Draws an index from a probability vector with one uniform variate.
pub fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Loss statistics for one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochFeedback {
    pub epoch: u64,
    pub l_val: f64,
    pub l_val_prev: Option<f64>,
    pub l_ma: f64,
    /// `l_val - l_val_prev`; absent on the first epoch.
    pub l_node: Option<f64>,
}

impl EpochFeedback {
    /// Without a previous loss the moving average is the current loss and
    /// no loss change is recorded.
    pub fn new(epoch: u64, l_val: f64, l_val_prev: Option<f64>, beta: f64) -> Result<Self, PolicyError> {
        for l in std::iter::once(l_val).chain(l_val_prev) {
            if !(l.is_finite() && l > 0.0) {
                return Err(PolicyError::InvalidLoss(l));
            }
        }
        let l_ma = match l_val_prev {
            Some(prev) => moving_average(prev, l_val, beta),
            None => l_val,
        };
        Ok(Self {
            epoch,
            l_val,
            l_val_prev,
            l_ma,
            l_node: l_val_prev.map(|prev| l_val - prev),
        })
    }

    pub fn per_visit_value(&self) -> f64 {
        per_visit_value(self.l_ma, self.l_val)
    }
}

/// True iff the node holds a full window of loss changes with positive sum.
pub fn prune_check(node: &AugNode, window: usize) -> bool {
    node.loss_history.len() == window && node.loss_history.iter().sum::<f64>() > 0.0
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateOutcome {
    /// Nodes whose statistics were updated, in path order.
    pub updated: Vec<NodeId>,
    pub prune: Option<PruneEvent>,
}

/// Credits `feedback` to every node on `path`, then prunes the first node
/// (from the root) whose loss window triggers, stopping the walk there.
pub fn update_path(
    tree: &mut AugTree,
    path: &AugPath,
    feedback: &EpochFeedback,
    params: &PolicyParams,
) -> Result<UpdateOutcome, PolicyError> {
    if path.epoch != feedback.epoch {
        return Err(PolicyError::StaleFeedback {
            expected: path.epoch,
            got: feedback.epoch,
        });
    }
    for &id in &path.nodes {
        tree.node(id)?;
    }
    let value = feedback.per_visit_value();
    let root = tree.root_mut();
    root.visit_count += 1;
    root.q_sum += value;

    let mut outcome = UpdateOutcome::default();
    for &id in &path.nodes {
        let node = tree.node_mut(id)?;
        node.visit_count += 1;
        node.q_sum += value;
        if let Some(change) = feedback.l_node {
            node.loss_history.push_back(change);
            while node.loss_history.len() > params.prune_window {
                node.loss_history.pop_front();
            }
        }
        outcome.updated.push(id);
        if prune_check(node, params.prune_window) {
            let window_sum = node.loss_history.iter().sum();
            let layer = node.layer;
            let variant = tree.variant(id)?.key();
            let (removed_nodes, removed_leaves) = tree.prune(id)?;
            let event = PruneEvent {
                epoch: feedback.epoch,
                node: id,
                layer,
                variant,
                window_sum,
                removed_nodes,
                removed_leaves,
            };
            tree.record_prune(event.clone());
            outcome.prune = Some(event);
            break;
        }
    }
    Ok(outcome)
}

/// Communication term: own mean blended with the mean of visited same-layer peers.
pub fn communication(tree: &AugTree, id: NodeId, lambda: f64) -> Result<f64, PolicyError> {
    let own = tree.node(id)?.q_mean().ok_or(PolicyError::UnvisitedNode(id))?;
    let (sum, count) = tree
        .peers(id)?
        .filter_map(AugNode::q_mean)
        .fold((0.0, 0usize), |(s, c), q| (s + q, c + 1));
    if count == 0 {
        return Ok(own);
    }
    Ok((1.0 - lambda) * own + lambda * sum / count as f64)
}

pub fn uct_score(
    tree: &AugTree,
    id: NodeId,
    parent_visits: u64,
    params: &PolicyParams,
) -> Result<f64, PolicyError> {
    let node = tree.node(id)?;
    if node.visit_count == 0 {
        return Err(PolicyError::UnvisitedNode(id));
    }
    let s = communication(tree, id, params.lambda)?;
    Ok(uct(
        node.q_sum,
        node.visit_count as f64,
        parent_visits.max(1) as f64,
        s,
        params.c1,
        params.c2,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Below the layer threshold: uniform over all children.
    Random,
    /// At or above threshold, but some children never visited: uniform over those.
    Unvisited,
    /// Softmax over UCT scores.
    Uct,
}

/// Sampling probabilities over `parent`'s children and the mode that produced them.
pub fn child_distribution(
    tree: &AugTree,
    parent: NodeId,
    params: &PolicyParams,
) -> Result<(SampleMode, Vec<f64>), PolicyError> {
    let node = tree.node(parent)?;
    let children = &node.children;
    if children.is_empty() {
        return Err(PolicyError::NoChildren(parent));
    }
    let visits: Vec<u64> = children
        .iter()
        .map(|&c| tree.node(c).map(|n| n.visit_count))
        .collect::<Result<_, _>>()?;
    let mean = visits.iter().sum::<u64>() as f64 / visits.len() as f64;
    let threshold = params
        .k_uct
        .get(node.layer as usize)
        .or(params.k_uct.last())
        .copied()
        .unwrap_or(0) as f64;
    let uniform = |mask: &dyn Fn(u64) -> bool| {
        let hits = visits.iter().filter(|&&v| mask(v)).count() as f64;
        visits
            .iter()
            .map(|&v| if mask(v) { 1.0 / hits } else { 0.0 })
            .collect::<Vec<_>>()
    };
    if mean < threshold {
        return Ok((SampleMode::Random, uniform(&|_| true)));
    }
    if visits.contains(&0) {
        return Ok((SampleMode::Unvisited, uniform(&|v| v == 0)));
    }
    let scores: Vec<f64> = children
        .iter()
        .map(|&c| uct_score(tree, c, node.visit_count, params))
        .collect::<Result<_, _>>()?;
    Ok((SampleMode::Uct, softmax(&scores, params.tau)))
}

pub fn sample_child<R: Rng + ?Sized>(
    tree: &AugTree,
    parent: NodeId,
    params: &PolicyParams,
    rng: &mut R,
) -> Result<(NodeId, SampleMode), PolicyError> {
    let (mode, probs) = child_distribution(tree, parent, params)?;
    let idx = draw_index(&probs, rng);
    Ok((tree.node(parent)?.children[idx], mode))
}

/// Descends from the root to a leaf, sampling one child per layer.
pub fn select_path<R: Rng + ?Sized>(
    tree: &AugTree,
    params: &PolicyParams,
    rng: &mut R,
) -> Result<Vec<NodeId>, PolicyError> {
    if tree.is_empty() {
        return Err(PolicyError::EmptyTree);
    }
    let mut path = Vec::with_capacity(tree.depth());
    let mut cur = NodeId::ROOT;
    while !tree.node(cur)?.is_leaf() {
        let (next, _) = sample_child(tree, cur, params, rng)?;
        path.push(next);
        cur = next;
    }
    Ok(path)
}
