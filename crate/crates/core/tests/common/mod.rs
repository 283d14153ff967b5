#![allow(dead_code)]

use augsearch::{default_catalog, AugTree, Catalog, NodeId};
use serde_json::Value;

/// Every ordered sequence of `depth` catalog indices with pairwise distinct
/// operation kinds, by plain nested enumeration.
pub fn enumerate_paths(catalog: &Catalog, depth: usize) -> Vec<Vec<usize>> {
    let n = catalog.len();
    let kind = |i: usize| catalog.variants()[i].kind;
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..depth {
        let mut next = Vec::new();
        for prefix in &out {
            for i in 0..n {
                if prefix.iter().all(|&p| kind(p) != kind(i)) {
                    let mut p = prefix.clone();
                    p.push(i);
                    next.push(p);
                }
            }
        }
        out = next;
    }
    out
}

/// A catalog made of the first `n` default variants with distinct kinds.
pub fn distinct_kind_catalog(n: usize) -> Catalog {
    let base = default_catalog();
    let mut picked = Vec::new();
    for v in base.variants() {
        if picked.len() < n && picked.iter().all(|p: &augsearch::OpVariant| p.kind != v.kind) {
            picked.push(*v);
        }
    }
    assert_eq!(picked.len(), n);
    Catalog::new(picked, base.roots().to_vec()).unwrap()
}

/// Overwrites visit counts and value sums through the serialized form.
pub fn pin(tree: &AugTree, stats: &[(NodeId, u64, f64)]) -> AugTree {
    let mut doc: Value = serde_json::to_value(tree).unwrap();
    for node in doc["nodes"].as_array_mut().unwrap() {
        let id = node["id"].as_u64().unwrap() as u32;
        if let Some(&(_, n, q)) = stats.iter().find(|s| s.0 .0 == id) {
            node["visit_count"] = n.into();
            node["q_sum"] = q.into();
        }
    }
    serde_json::from_value(doc).unwrap()
}
