//! The layered augmentation tree.
//!
//! Nodes live in an arena indexed by [`NodeId`]. Ids are assigned
//! breadth-first in catalog order at construction and never reused, so a
//! pruned id stays dead for the lifetime of the tree (and its checkpoints).

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Catalog, OpVariant, VariantKey};

pub const DEFAULT_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn slot(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("every first-layer node has been pruned")]
    EmptyTree,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("the root sentinel cannot be pruned")]
    PruneRoot,
    #[error("tree depth must be at least 1")]
    ZeroDepth,
    #[error("corrupt tree: {0}")]
    Corrupt(String),
}

/// One tree node. The root sentinel has no variant and layer 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugNode {
    pub id: NodeId,
    /// Index into the tree's catalog; `None` for the root sentinel.
    pub variant: Option<usize>,
    pub layer: u8,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub visit_count: u64,
    /// Sum of per-visit values received.
    pub q_sum: f64,
    /// Most recent loss changes attributed to this node, oldest first.
    pub loss_history: VecDeque<f64>,
}

impl AugNode {
    fn new(id: NodeId, variant: Option<usize>, layer: u8, parent: Option<NodeId>) -> Self {
        Self {
            id,
            variant,
            layer,
            parent,
            children: Vec::new(),
            visit_count: 0,
            q_sum: 0.0,
            loss_history: VecDeque::new(),
        }
    }

    /// Mean per-visit value; `None` before the first visit.
    pub fn q_mean(&self) -> Option<f64> {
        (self.visit_count > 0).then(|| self.q_sum / self.visit_count as f64)
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A selected root-to-leaf chain of node ids (root excluded), tagged with
/// the epoch it was proposed for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugPath {
    pub nodes: Vec<NodeId>,
    pub epoch: u64,
}

/// Record of one subtree removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: u64,
    pub node: NodeId,
    pub layer: u8,
    pub variant: VariantKey,
    pub window_sum: f64,
    pub removed_nodes: usize,
    pub removed_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeDocument", into = "TreeDocument")]
pub struct AugTree {
    catalog: Catalog,
    depth: usize,
    slots: Vec<Option<AugNode>>,
    prune_log: Vec<PruneEvent>,
    /// (layer, catalog index) -> live node ids, ascending.
    peers: HashMap<(u8, usize), Vec<NodeId>>,
}

impl AugTree {
    /// Builds the default three-layer tree.
    pub fn build(catalog: Catalog) -> Self {
        Self::with_depth(catalog, DEFAULT_DEPTH).expect("default depth is positive")
    }

    /// Builds a tree where each node's children are every catalog variant
    /// whose operation kind does not already occur on the path to it.
    pub fn with_depth(catalog: Catalog, depth: usize) -> Result<Self, TreeError> {
        if depth == 0 {
            return Err(TreeError::ZeroDepth);
        }
        let mut slots = vec![Some(AugNode::new(NodeId::ROOT, None, 0, None))];
        let mut frontier = vec![NodeId::ROOT];
        for layer in 1..=depth {
            let mut next = Vec::new();
            for parent in frontier {
                let used: Vec<_> = ancestry(&slots, parent)
                    .filter_map(|v| catalog.get(v).map(|v| v.kind))
                    .collect();
                for (idx, v) in catalog.variants().iter().enumerate() {
                    if used.contains(&v.kind) {
                        continue;
                    }
                    let id = NodeId(slots.len() as u32);
                    slots.push(Some(AugNode::new(id, Some(idx), layer as u8, Some(parent))));
                    slots[parent.slot()].as_mut().unwrap().children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        let mut tree = Self {
            catalog,
            depth,
            slots,
            prune_log: Vec::new(),
            peers: HashMap::new(),
        };
        tree.rebuild_peers();
        Ok(tree)
    }

    fn rebuild_peers(&mut self) {
        self.peers.clear();
        for node in self.slots.iter().flatten() {
            if let Some(v) = node.variant {
                self.peers.entry((node.layer, v)).or_default().push(node.id);
            }
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> &AugNode {
        self.slots[0].as_ref().expect("root is never pruned")
    }

    pub(crate) fn root_mut(&mut self) -> &mut AugNode {
        self.slots[0].as_mut().expect("root is never pruned")
    }

    pub fn is_empty(&self) -> bool {
        self.root().children.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slots.get(id.slot()).is_some_and(Option::is_some)
    }

    pub fn node(&self, id: NodeId) -> Result<&AugNode, TreeError> {
        self.slots
            .get(id.slot())
            .and_then(Option::as_ref)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut AugNode, TreeError> {
        self.slots
            .get_mut(id.slot())
            .and_then(Option::as_mut)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &AugNode> {
        self.slots.iter().flatten()
    }

    pub fn node_count(&self) -> usize {
        self.nodes().count()
    }

    /// Number of id slots ever allocated, live or pruned.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn variant(&self, id: NodeId) -> Result<&OpVariant, TreeError> {
        let node = self.node(id)?;
        node.variant
            .and_then(|v| self.catalog.get(v))
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn path_variants(&self, path: &[NodeId]) -> Result<Vec<OpVariant>, TreeError> {
        path.iter().map(|&id| self.variant(id).copied()).collect()
    }

    /// Live nodes in the same layer with the same catalog variant, excluding `id`.
    pub fn peers(&self, id: NodeId) -> Result<impl Iterator<Item = &AugNode>, TreeError> {
        let node = self.node(id)?;
        let key = (node.layer, node.variant.unwrap_or(usize::MAX));
        Ok(self
            .peers
            .get(&key)
            .into_iter()
            .flatten()
            .filter(move |&&p| p != id)
            .filter_map(move |&p| self.node(p).ok()))
    }

    pub fn layer_nodes(&self, layer: u8) -> impl Iterator<Item = &AugNode> {
        self.nodes().filter(move |n| n.layer == layer)
    }

    pub fn prune_log(&self) -> &[PruneEvent] {
        &self.prune_log
    }

    pub(crate) fn record_prune(&mut self, event: PruneEvent) {
        self.prune_log.push(event);
    }

    /// First child at every layer.
    pub fn leftmost_path(&self) -> Result<Vec<NodeId>, TreeError> {
        if self.is_empty() {
            return Err(TreeError::EmptyTree);
        }
        let mut path = Vec::with_capacity(self.depth);
        let mut cur = self.root();
        while let Some(&first) = cur.children.first() {
            path.push(first);
            cur = self.node(first)?;
        }
        Ok(path)
    }

    /// Removes `id` and its whole subtree; returns (nodes removed, leaves removed).
    pub fn prune(&mut self, id: NodeId) -> Result<(usize, usize), TreeError> {
        if id == NodeId::ROOT {
            return Err(TreeError::PruneRoot);
        }
        let parent = self.node(id)?.parent.ok_or(TreeError::PruneRoot)?;
        self.node_mut(parent)?.children.retain(|&c| c != id);

        let mut removed = 0;
        let mut leaves = 0;
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let node = self.slots[cur.slot()].take().ok_or(TreeError::UnknownNode(cur))?;
            if let Some(key) = node.variant.map(|v| (node.layer, v)) {
                if let Some(list) = self.peers.get_mut(&key) {
                    list.retain(|&p| p != cur);
                    if list.is_empty() {
                        self.peers.remove(&key);
                    }
                }
            }
            removed += 1;
            if node.children.is_empty() {
                leaves += 1;
            }
            stack.extend(node.children);
        }
        Ok((removed, leaves))
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        self.nodes()
            .filter(|n| n.id != NodeId::ROOT && n.is_leaf())
            .count()
    }

    /// Every root-to-leaf path, depth-first in catalog order.
    pub fn paths(&self) -> Paths<'_> {
        Paths {
            tree: self,
            stack: self.root().children.iter().rev().map(|&c| vec![c]).collect(),
        }
    }

    /// Node count per layer, root layer first.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.depth + 1];
        for n in self.nodes() {
            sizes[n.layer as usize] += 1;
        }
        sizes
    }
}

/// Iterator over root-to-leaf paths; see [`AugTree::paths`].
pub struct Paths<'a> {
    tree: &'a AugTree,
    stack: Vec<Vec<NodeId>>,
}

impl Iterator for Paths<'_> {
    type Item = Vec<NodeId>;

    fn next(&mut self) -> Option<Self::Item> {
        while let Some(path) = self.stack.pop() {
            let last = *path.last().expect("paths are non-empty");
            let node = self.tree.node(last).ok()?;
            if node.is_leaf() {
                return Some(path);
            }
            for &c in node.children.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                self.stack.push(p);
            }
        }
        None
    }
}

/// Catalog indices from `id` up to (excluding) the root.
fn ancestry(slots: &[Option<AugNode>], id: NodeId) -> impl Iterator<Item = usize> + '_ {
    let mut cur = Some(id);
    std::iter::from_fn(move || loop {
        let node = slots.get(cur?.slot())?.as_ref()?;
        cur = node.parent;
        if node.variant.is_some() {
            return node.variant;
        }
    })
}

/// Serialized form: only live nodes are stored.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDocument {
    depth: usize,
    slots: usize,
    catalog: Catalog,
    nodes: Vec<AugNode>,
    prune_log: Vec<PruneEvent>,
}

impl From<AugTree> for TreeDocument {
    fn from(t: AugTree) -> Self {
        TreeDocument {
            depth: t.depth,
            slots: t.slots.len(),
            catalog: t.catalog,
            nodes: t.slots.into_iter().flatten().collect(),
            prune_log: t.prune_log,
        }
    }
}

impl TryFrom<TreeDocument> for AugTree {
    type Error = TreeError;

    fn try_from(doc: TreeDocument) -> Result<Self, Self::Error> {
        let corrupt = |m: String| TreeError::Corrupt(m);
        let mut slots: Vec<Option<AugNode>> = vec![None; doc.slots];
        for node in doc.nodes {
            let slot = slots
                .get_mut(node.id.slot())
                .ok_or_else(|| corrupt(format!("node {} beyond slot count", node.id)))?;
            if slot.is_some() {
                return Err(corrupt(format!("node {} listed twice", node.id)));
            }
            if node.variant.is_some_and(|v| v >= doc.catalog.len()) {
                return Err(corrupt(format!("node {} has unknown variant", node.id)));
            }
            *slot = Some(node);
        }
        match slots.first() {
            Some(Some(root)) if root.variant.is_none() && root.parent.is_none() => {}
            _ => return Err(corrupt("missing root sentinel".into())),
        }
        for node in slots.iter().flatten() {
            if node.layer as usize > doc.depth {
                return Err(corrupt(format!("node {} deeper than tree", node.id)));
            }
            for &c in &node.children {
                let child = slots
                    .get(c.slot())
                    .and_then(Option::as_ref)
                    .ok_or_else(|| corrupt(format!("dangling child {c}")))?;
                if child.parent != Some(node.id) || child.layer != node.layer + 1 {
                    return Err(corrupt(format!("child {c} does not link back")));
                }
            }
        }
        let mut tree = AugTree {
            catalog: doc.catalog,
            depth: doc.depth,
            slots,
            prune_log: doc.prune_log,
            peers: HashMap::new(),
        };
        tree.rebuild_peers();
        Ok(tree)
    }
}
