//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use augsearch_cli::config::{ConfigDoc, EvaluatorSpec, SyntheticSpec};
use augsearch::engine::{derive_seed, run, Engine, Policy, RunConfig, SeedStream};
use augsearch::evaluator::{EvalError, Evaluator, SyntheticLandscape, TrainerProcess, Utility};
use augsearch::kernels::{self, apply, apply_with_magnitude, flip};
use augsearch::policy::{
    child_distribution, moving_average, per_visit_value, sample_child, softmax, uct, update_path,
};
use augsearch::{
    default_catalog, AugPath, AugTree, Catalog, EpochFeedback, NodeId, OpKind, OpVariant, PolicyParams,
    SampleMode, Side, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const BIN: &str = env!("CARGO_BIN_EXE_augsearch");

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("tree shape oracle", tree_shape),
        ("equation suite", equations),
        ("pruning property", pruning),
        ("sampling distribution", sampling),
        ("kernel invariants", kernel_invariants),
        ("synthetic search efficacy", efficacy),
        ("determinism and resume", determinism),
        ("wire protocol", wire_protocol),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- tree shape

fn enumerate_paths(catalog: &Catalog, depth: usize) -> Vec<Vec<usize>> {
    let kind = |i: usize| catalog.variants()[i].kind;
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..depth {
        out = out
            .iter()
            .flat_map(|prefix| {
                (0..catalog.len())
                    .filter(|&i| prefix.iter().all(|&p| kind(p) != kind(i)))
                    .map(move |i| {
                        let mut p = prefix.clone();
                        p.push(i);
                        p
                    })
            })
            .collect();
    }
    out
}

fn tree_shape() -> Result<String, String> {
    let start = Instant::now();
    let catalog = default_catalog();
    let tree = AugTree::build(catalog.clone());
    let layer1: Vec<_> = tree.layer_nodes(1).collect();
    ensure(layer1.len() == 15, || format!("{} layer-1 nodes", layer1.len()))?;
    for n in &layer1 {
        let side = tree.variant(n.id).unwrap().side();
        let want = if side == Side::Single { 14 } else { 13 };
        ensure(n.children.len() == want, || format!("node {} has {} children", n.id, n.children.len()))?;
    }
    let oracle: BTreeSet<Vec<usize>> = enumerate_paths(&catalog, 3).into_iter().collect();
    let got: BTreeSet<Vec<usize>> = tree
        .paths()
        .map(|p| p.iter().map(|&id| tree.node(id).unwrap().variant.unwrap()).collect())
        .collect();
    ensure(tree.leaf_count() == 2340 && oracle.len() == 2340, || {
        format!("leaves {} oracle {}", tree.leaf_count(), oracle.len())
    })?;
    ensure(got == oracle, || "path sets differ from enumeration".into())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.3}s"))?;
    Ok(format!("15 layer-1 nodes, 13/14 children, 2340 leaves match enumeration in {secs:.3}s"))
}

// ----------------------------------------------------------------- equations

fn equations() -> Result<String, String> {
    for (prev, cur) in [(0.7, 0.3), (1.9, 0.01), (0.5, 0.5)] {
        ensure(moving_average(prev, cur, 1.0) == prev, || "beta = 1 must return the previous loss".into())?;
        ensure(moving_average(prev, cur, 0.0) == cur, || "beta = 0 must return the current loss".into())?;
    }
    let fb = EpochFeedback::new(2, 0.8, Some(1.0), 0.5).map_err(|e| e.to_string())?;
    let v = fb.per_visit_value();
    ensure((v - 1.125).abs() <= 1e-12, || format!("per-visit value {v}"))?;
    ensure((per_visit_value(0.9, 0.8) - 1.125f64).abs() <= 1e-12, || "per_visit_value".into())?;
    let u = uct(1.9, 2.0, 8.0, 0.0, 1.414, 0.0);
    ensure((u - 2.392f64).abs() <= 1e-3, || format!("uct {u}"))?;
    let sym = softmax(&[0.4, 0.4], 1.0);
    ensure(sym == vec![0.5, 0.5], || format!("symmetric softmax {sym:?}"))?;
    let p = softmax(&[2.0f64, 1.0], 1.0);
    ensure((p[0] - 0.731).abs() <= 1e-3 && (p[1] - 0.269).abs() <= 1e-3, || format!("softmax {p:?}"))?;
    Ok(format!("identities exact, value {v}, uct {u:.4}, softmax ({:.4}, {:.4})", p[0], p[1]))
}

// ------------------------------------------------------------------- pruning

fn single_node_catalog() -> Catalog {
    let base = default_catalog();
    Catalog::new(vec![base.variants()[6]], base.roots().to_vec()).unwrap()
}

fn pruning() -> Result<String, String> {
    let params = PolicyParams {
        k_uct: vec![1],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut prunes = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(2..40);
        let mut l: f64 = rng.random_range(0.2..2.0);
        let losses: Vec<f64> = (0..len)
            .map(|_| {
                l = (l + rng.random_range(-0.1..0.1)).max(0.01);
                l
            })
            .collect();
        let mut tree = AugTree::with_depth(single_node_catalog(), 1).unwrap();
        let mut got = None;
        let mut prev = None;
        for (i, &loss) in losses.iter().enumerate() {
            let epoch = i as u64 + 1;
            let fb = EpochFeedback::new(epoch, loss, prev, params.beta).unwrap();
            let out = update_path(&mut tree, &AugPath { nodes: vec![NodeId(1)], epoch }, &fb, &params).unwrap();
            prev = Some(loss);
            if out.prune.is_some() {
                got = Some(epoch);
                break;
            }
        }
        let diffs: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
        let want = (5..=diffs.len()).find_map(|end| (diffs[end - 5..end].iter().sum::<f64>() > 0.0).then_some(end as u64 + 1));
        if got != want {
            mismatches += 1;
        }
        prunes += got.is_some() as usize;
    }
    ensure(mismatches == 0, || format!("{mismatches} of 10000 streams disagree with the window-sum oracle"))?;

    // whole-engine runs: one subtree per epoch at most, pruned nodes never return
    let mut engine_prunes = 0;
    for seed in 0..40 {
        let mut engine = Engine::new(RunConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gone: HashSet<NodeId> = HashSet::new();
        for _ in 0..200 {
            let proposal = engine.propose().unwrap();
            if let Some(op) = proposal.path.iter().find(|op| gone.contains(&op.node.unwrap())) {
                return Err(format!("seed {seed}: pruned node {} reappeared", op.node.unwrap()));
            }
            let before = engine.tree().node_count();
            let record = engine.feedback(rng.random_range(0.3..1.0)).unwrap().clone();
            ensure(record.prunes.len() <= 1, || format!("seed {seed}: {} prunes in one epoch", record.prunes.len()))?;
            if let Some(p) = record.prunes.first() {
                ensure(before - engine.tree().node_count() == p.removed_nodes, || "removed more than one subtree".into())?;
                engine_prunes += 1;
                // every descendant is gone too
                for id in (0..engine.tree().slot_count() as u32).map(NodeId) {
                    if !engine.tree().contains(id) {
                        gone.insert(id);
                    }
                }
            }
        }
    }
    Ok(format!(
        "10000 streams, 0 mismatches ({prunes} prunes); 40 engine runs with {engine_prunes} prunes, none reappearing"
    ))
}

// ------------------------------------------------------------------ sampling

fn distinct_kind_catalog(n: usize) -> Catalog {
    let base = default_catalog();
    let mut picked: Vec<OpVariant> = Vec::new();
    for v in base.variants() {
        if picked.len() < n && picked.iter().all(|p| p.kind != v.kind) {
            picked.push(*v);
        }
    }
    Catalog::new(picked, base.roots().to_vec()).unwrap()
}

fn pin(tree: &AugTree, stats: &[(NodeId, u64, f64)]) -> AugTree {
    let mut doc = serde_json::to_value(tree).unwrap();
    for node in doc["nodes"].as_array_mut().unwrap() {
        let id = node["id"].as_u64().unwrap() as u32;
        if let Some(&(_, n, q)) = stats.iter().find(|s| s.0 .0 == id) {
            node["visit_count"] = n.into();
            node["q_sum"] = q.into();
        }
    }
    serde_json::from_value(doc).unwrap()
}

fn frequencies(tree: &AugTree, parent: NodeId, params: &PolicyParams) -> Vec<f64> {
    let children = &tree.node(parent).unwrap().children;
    let mut counts = vec![0usize; children.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let (c, _) = sample_child(tree, parent, params, &mut rng).unwrap();
        counts[children.iter().position(|&x| x == c).unwrap()] += 1;
    }
    counts.iter().map(|&c| c as f64 / 10_000.0).collect()
}

fn analytic(stats: &[(f64, f64, f64)], parent: f64, p: &PolicyParams) -> Vec<f64> {
    // (q_sum, visits, communication term) per child
    let scores: Vec<f64> = stats
        .iter()
        .map(|&(q, n, s)| q / n + p.c1 * (parent.ln() / n).sqrt() + p.c2 * s)
        .collect();
    let w: Vec<f64> = scores.iter().map(|s| (s / p.tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn within(freq: &[f64], want: &[f64]) -> Result<f64, String> {
    let worst = freq.iter().zip(want).map(|(f, w)| (f - w).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.02, || format!("draws {freq:?} vs analytic {want:?}"))?;
    Ok(worst)
}

fn sampling() -> Result<String, String> {
    // two children under the root
    let params = PolicyParams {
        k_uct: vec![1],
        ..Default::default()
    };
    let tree = pin(
        &AugTree::with_depth(distinct_kind_catalog(2), 1).unwrap(),
        &[(NodeId(0), 10, 10.0), (NodeId(1), 4, 5.2), (NodeId(2), 6, 5.4)],
    );
    let (mode, _) = child_distribution(&tree, NodeId::ROOT, &params).unwrap();
    ensure(mode == SampleMode::Uct, || format!("mode {mode:?}"))?;
    let want = analytic(&[(5.2, 4.0, 1.3), (5.4, 6.0, 0.9)], 10.0, &params);
    let w2 = within(&frequencies(&tree, NodeId::ROOT, &params), &want)?;

    // five children of a first-layer node, one with a visited peer
    let params5 = PolicyParams {
        k_uct: vec![1, 1],
        tau: 0.5,
        ..Default::default()
    };
    let base = AugTree::with_depth(distinct_kind_catalog(6), 2).unwrap();
    let parent = NodeId(1);
    let children = base.node(parent).unwrap().children.clone();
    let stats = [(3.6, 3.0), (4.5, 5.0), (2.1, 2.0), (7.7, 7.0), (3.2, 4.0)];
    let mut pins = vec![(parent, 21, 21.0)];
    pins.extend(children.iter().zip(&stats).map(|(&c, &(q, n))| (c, n as u64, q)));
    let v0 = base.node(children[0]).unwrap().variant;
    let peer = base.layer_nodes(2).find(|n| n.variant == v0 && n.parent != Some(parent)).unwrap().id;
    pins.push((peer, 2, 3.0));
    let tree5 = pin(&base, &pins);
    let comm: Vec<(f64, f64, f64)> = stats
        .iter()
        .enumerate()
        .map(|(i, &(q, n))| {
            let own = q / n;
            let s = if i == 0 { 0.5 * own + 0.5 * 1.5 } else { own };
            (q, n, s)
        })
        .collect();
    let want5 = analytic(&comm, 21.0, &params5);
    let w5 = within(&frequencies(&tree5, parent, &params5), &want5)?;

    // below the layer threshold every child is equally likely
    let full = pin(&AugTree::build(default_catalog()), &[(NodeId(0), 20, 20.0), (NodeId(3), 20, 30.0)]);
    let (mode, _) = child_distribution(&full, NodeId::ROOT, &PolicyParams::default()).unwrap();
    ensure(mode == SampleMode::Random, || format!("mode {mode:?}"))?;
    let wr = within(&frequencies(&full, NodeId::ROOT, &PolicyParams::default()), &[1.0 / 15.0; 15])?;
    Ok(format!(
        "max deviation: 2-child {w2:.4}, 5-child {w5:.4}, random phase {wr:.4} (limit 0.02)"
    ))
}

// ------------------------------------------------------------------- kernels

fn kernel_invariants() -> Result<String, String> {
    let start = Instant::now();
    let shape = [16, 32, 32];
    let vol = Volume::<f64>::from_fn(shape, |z, y, x| {
        (0.3 * z as f64).sin() + 0.5 * (0.2 * y as f64).cos() + x as f64 / 32.0 + 2.0
    })
    .unwrap();
    let catalog = default_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_identity: f64 = 0.0;
    for v in catalog.variants() {
        let m = match v.kind {
            OpKind::ContrastAdjustment
            | OpKind::GammaTransform
            | OpKind::BrightnessTransform
            | OpKind::SimulateLowRes
            | OpKind::Scale => 1.0,
            _ => 0.0,
        };
        let (out, _) = apply_with_magnitude(&vol, v, m, &mut rng).map_err(|e| e.to_string())?;
        worst_identity = worst_identity.max(out.max_abs_diff(&vol));
    }
    ensure(worst_identity <= 1e-6, || format!("identity error {worst_identity}"))?;
    for mask in 0..8u8 {
        let axes = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        ensure(flip(&flip(&vol, axes), axes) == vol, || format!("mirror {axes:?} is not an involution"))?;
    }
    let flat = Volume::<f64>::filled([100, 100, 100], 0.5).unwrap();
    let noisy = kernels::gaussian_noise(&flat, 0.05, 3);
    let n = noisy.len() as f64;
    let mean = noisy.voxels().iter().sum::<f64>() / n;
    let var = noisy.voxels().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rel = (var / 0.05 - 1.0).abs();
    ensure(rel < 0.05, || format!("noise variance {var} vs 0.05"))?;
    for v in catalog.variants() {
        for _ in 0..3 {
            let (out, _) = apply(&vol, v, &mut rng).map_err(|e| e.to_string())?;
            ensure(out.shape() == shape && out.is_finite(), || format!("{:?} changed shape", v.kind))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "identity error {worst_identity:.1e}, noise variance off by {:.2}%, 15 variants keep (16, 32, 32), {secs:.2}s",
        rel * 100.0
    ))
}

// ------------------------------------------------------------------ efficacy

fn efficacy() -> Result<String, String> {
    let start = Instant::now();
    let catalog = default_catalog();
    let helpful = [
        (OpKind::ContrastAdjustment, Side::Left),
        (OpKind::GaussianBlur, Side::Right),
        (OpKind::ElasticTransform, Side::Single),
    ];
    let utilities: Vec<Utility> = catalog
        .variants()
        .iter()
        .map(|v| Utility {
            op: v.kind,
            side: v.side(),
            u: if helpful.contains(&(v.kind, v.side())) { -0.1 } else { 0.05 },
        })
        .collect();
    let seeds: Vec<u64> = (0..10).collect();
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let land = SyntheticLandscape {
                sigma: 0.01,
                seed: derive_seed(seed, SeedStream::Landscape),
                utilities: utilities.clone(),
                ..Default::default()
            };
            let cfg = |policy| RunConfig {
                epochs: 200,
                policy,
                seed,
                params: PolicyParams::default(),
                ..Default::default()
            };
            let tree_run = run(cfg(Policy::DDAug), &mut land.clone(), &mut ()).unwrap();
            let uniform = run(cfg(Policy::UniformSample), &mut land.clone(), &mut ()).unwrap();
            let neutral = (181..=200).map(|t| land.neutral_loss(t)).sum::<f64>() / 20.0;
            let tree = tree_run.final_tree.as_ref().unwrap();
            let layer1 = |good: bool| {
                tree.prune_log()
                    .iter()
                    .filter(|p| p.layer == 1 && helpful.contains(&(p.variant.op, p.variant.side)) == good)
                    .count()
            };
            let exhausted = tree_run.records.iter().position(|r| r.degraded).map(|i| i + 1);
            (tree_run.tail_mean(20), uniform.tail_mean(20), neutral, layer1(false), layer1(true), exhausted)
        })
        .collect();
    let beats_uniform = results.iter().filter(|r| r.0 < r.1).count();
    let beats_neutral = results.iter().filter(|r| r.0 < r.2).count();
    let harmful_pruned = results.iter().filter(|r| r.3 > 0).count();
    let helpful_pruned = results.iter().filter(|r| r.4 > 0).count();
    let exhausted: Vec<usize> = results.iter().filter_map(|r| r.5).collect();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "beats UniformSample {beats_uniform}/10 (need 8), beats neutral curve {beats_neutral}/10 (need 8), \
         harmful layer-1 prunes in {harmful_pruned}/10 (need 7); helpful layer-1 nodes pruned in {helpful_pruned}/10, \
         tree exhausted in {}/10 runs (epochs {:?}); {secs:.1}s",
        exhausted.len(),
        exhausted
    );
    let ok = beats_uniform >= 8 && beats_neutral >= 8 && harmful_pruned >= 7 && secs < 60.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// --------------------------------------------------------------- determinism

fn search(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .arg("search")
        .args(args)
        .current_dir(dir)
        .env_remove("AUGSEARCH_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = ConfigDoc {
        epochs: 200,
        seed: 31,
        checkpoint_every: 100,
        evaluator: EvaluatorSpec::Synthetic(SyntheticSpec {
            sigma: 0.01,
            ..Default::default()
        }),
        ..Default::default()
    };
    fs::write(dir.path().join("run.toml"), doc.to_toml()).map_err(|e| e.to_string())?;
    search(dir.path(), &["--config", "run.toml", "--out", "a"])?;
    search(dir.path(), &["--config", "run.toml", "--out", "b"])?;
    search(dir.path(), &["--config", "run.toml", "--resume", "a/checkpoints/epoch-000100.json", "--out", "r"])?;
    let read = |p: &str| fs::read(dir.path().join(p)).map_err(|e| format!("{p}: {e}"));
    let log_a = read("a/epochs.ndjson")?;
    ensure(log_a == read("b/epochs.ndjson")?, || "repeated runs wrote different epoch logs".into())?;
    ensure(log_a == read("r/epochs.ndjson")?, || "resumed run diverged from the uninterrupted log".into())?;
    ensure(read("a/report.json")? == read("r/report.json")?, || "resumed report differs".into())?;
    ensure(read("a/checkpoints/epoch-000200.json")? == read("r/checkpoints/epoch-000200.json")?, || {
        "final checkpoints differ".into()
    })?;
    Ok(format!(
        "two runs byte-identical ({} log bytes); resume at epoch 100 matches the 200-epoch run exactly",
        log_a.len()
    ))
}

// ---------------------------------------------------------------------- wire

fn wire_protocol() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = ConfigDoc {
        evaluator: EvaluatorSpec::Synthetic(SyntheticSpec {
            sigma: 0.01,
            seed: Some(77),
            utilities: vec![Utility {
                op: OpKind::Scale,
                side: Side::Left,
                u: -0.1,
            }],
            ..Default::default()
        }),
        ..Default::default()
    };
    let cfg = dir.path().join("trainer.toml");
    fs::write(&cfg, doc.to_toml()).map_err(|e| e.to_string())?;
    let EvaluatorSpec::Synthetic(spec) = &doc.evaluator else { unreachable!() };
    let local = spec.landscape(0);

    let mut cmd = Command::new(BIN);
    cmd.arg("trainer").arg("--config").arg(&cfg);
    let mut remote = TrainerProcess::spawn_command(cmd).map_err(|e| e.to_string())?;
    let config = RunConfig {
        epochs: 200,
        seed: 5,
        ..Default::default()
    };
    let over_wire = run(config.clone(), &mut remote, &mut ()).map_err(|e| format!("wire run: {e}"))?;
    remote.finish().map_err(|e| e.to_string())?;
    let in_process = run(config, &mut local.clone(), &mut ()).map_err(|e| e.to_string())?;
    ensure(over_wire.records.len() == 200, || format!("{} epochs", over_wire.records.len()))?;
    ensure(over_wire.records == in_process.records, || "wire losses differ from the in-process landscape".into())?;

    let catalog = default_catalog();
    let path = [catalog.variants()[0]];
    let mismatch = "read l; echo '{\"type\":\"loss\",\"epoch\":6,\"value\":0.5}'; read l";
    let mut t = TrainerProcess::spawn(mismatch).map_err(|e| e.to_string())?;
    let got = t.evaluate(7, catalog.roots(), &path);
    ensure(matches!(got, Err(EvalError::EpochMismatch { expected: 7, got: 6 })), || {
        format!("mismatch injection gave {got:?}")
    })?;
    let mut t = TrainerProcess::spawn("read l; exit 0").map_err(|e| e.to_string())?;
    let got = t.evaluate(1, catalog.roots(), &path);
    ensure(matches!(got, Err(EvalError::TrainerGone(_))), || format!("close injection gave {got:?}"))?;
    let mut t = TrainerProcess::spawn("read l; echo 'garbage'; read l").map_err(|e| e.to_string())?;
    let got = t.evaluate(1, catalog.roots(), &path);
    ensure(matches!(got, Err(EvalError::Protocol(_))), || format!("malformed reply gave {got:?}"))?;
    Ok("200 epochs bit-exact over a trainer process; mismatch, close and malformed replies rejected".into())
}
