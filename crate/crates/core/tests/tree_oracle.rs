mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use augsearch::{default_catalog, AugTree, NodeId, Side};
use common::enumerate_paths;

#[test]
fn default_tree_matches_enumeration() {
    let start = Instant::now();
    let catalog = default_catalog();
    let tree = AugTree::build(catalog.clone());
    let expected: BTreeSet<Vec<usize>> = enumerate_paths(&catalog, 3).into_iter().collect();
    let got: BTreeSet<Vec<usize>> = tree
        .paths()
        .map(|p| p.iter().map(|&id| tree.node(id).unwrap().variant.unwrap()).collect())
        .collect();
    assert_eq!(expected.len(), 2340);
    assert_eq!(tree.leaf_count(), 2340);
    assert_eq!(got, expected);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn layer_one_fanout_depends_on_side() {
    let tree = AugTree::build(default_catalog());
    let first: Vec<_> = tree.layer_nodes(1).collect();
    assert_eq!(first.len(), 15);
    for node in first {
        let side = tree.variant(node.id).unwrap().side();
        let want = if side == Side::Single { 14 } else { 13 };
        assert_eq!(node.children.len(), want, "{:?}", tree.variant(node.id).unwrap());
    }
}

#[test]
fn pruned_subtree_size_matches_reenumeration() {
    let catalog = default_catalog();
    for victim in [NodeId(1), NodeId(7), NodeId(15)] {
        let mut tree = AugTree::build(catalog.clone());
        let v = tree.node(victim).unwrap().variant.unwrap();
        let subtree = enumerate_paths(&catalog, 3).iter().filter(|p| p[0] == v).count();
        let before = tree.leaf_count();
        let (_, leaves) = tree.prune(victim).unwrap();
        assert_eq!(leaves, subtree);
        assert_eq!(tree.leaf_count(), before - subtree);
        assert!(tree.paths().all(|p| !p.contains(&victim)));
    }
}

#[test]
fn smaller_depths_match_enumeration() {
    let catalog = default_catalog();
    for depth in 1..=4 {
        let tree = AugTree::with_depth(catalog.clone(), depth).unwrap();
        assert_eq!(tree.leaf_count(), enumerate_paths(&catalog, depth).len(), "depth {depth}");
    }
}
