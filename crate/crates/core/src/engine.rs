//! Per-epoch search loop, baseline policies and checkpointing.
//!
//! The engine is a small state machine. Between epochs it holds the path
//! planned for the next epoch ([`Engine::propose`] hands it out); after the
//! trainer reports a loss, [`Engine::feedback`] updates and prunes the tree
//! and plans the following path. Checkpoints can only be taken between
//! epochs. [`Engine::run_to`] drives the loop against an [`Evaluator`].

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{EvalError, Evaluator};
use crate::policy::{self, EpochFeedback, PolicyError, PolicyParams};
use crate::search_space::{default_catalog, sample_magnitude, Catalog, OpKind, OpVariant, Side, VariantKey};
use crate::tree::{AugPath, AugTree, NodeId, PruneEvent, TreeError, DEFAULT_DEPTH};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Online tree search.
    #[serde(rename = "ddaug", alias = "DDAug")]
    DDAug,
    /// No searched augmentation; root operations only.
    #[serde(rename = "noda", alias = "NoDA")]
    NoDA,
    /// The same configured sequence every epoch.
    #[serde(rename = "fixed_sequential", alias = "fixed", alias = "FixedSequential")]
    FixedSequential,
    /// A uniformly random valid path every epoch.
    #[serde(rename = "uniform_sample", alias = "uniform", alias = "UniformSample")]
    UniformSample,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::DDAug, Policy::NoDA, Policy::FixedSequential, Policy::UniformSample];

    pub fn label(self) -> &'static str {
        match self {
            Policy::DDAug => "DDAug",
            Policy::NoDA => "NoDA",
            Policy::FixedSequential => "FixedSequential",
            Policy::UniformSample => "UniformSample",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ddaug" | "tree" => Ok(Policy::DDAug),
            "noda" | "none" => Ok(Policy::NoDA),
            "fixed" | "fixed_sequential" | "fixedsequential" => Ok(Policy::FixedSequential),
            "uniform" | "uniform_sample" | "uniformsample" => Ok(Policy::UniformSample),
            other => Err(format!(
                "unknown policy `{other}` (expected ddaug, noda, fixed or uniform)"
            )),
        }
    }
}

/// Independent random streams split from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Policy = 0,
    Magnitude = 1,
    Landscape = 2,
}

pub fn stream_rng(master: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}

/// A 64-bit seed for a consumer that owns its own generator.
pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    stream_rng(master, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: u64,
    pub policy: Policy,
    pub params: PolicyParams,
    pub seed: u64,
    pub depth: usize,
    pub catalog: Catalog,
    /// Sequence for the fixed baseline; empty means one variant per operation.
    pub fixed_sequence: Vec<VariantKey>,
    /// Checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            policy: Policy::DDAug,
            params: PolicyParams::default(),
            seed: 0,
            depth: DEFAULT_DEPTH,
            catalog: default_catalog(),
            fixed_sequence: Vec::new(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.epochs == 0 {
            return Err(EngineError::Config("epochs must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(EngineError::Config("depth must be >= 1".into()));
        }
        self.params.validate_for_depth(self.depth)?;
        for key in &self.fixed_sequence {
            if self.catalog.index_of(*key).is_none() {
                return Err(EngineError::Config(format!("fixed_sequence entry {key} is not in the catalog")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} called out of order")]
    OutOfOrder(&'static str),
    #[error("proposed path repeats operation {0}")]
    InvariantViolation(OpKind),
    #[error("checkpoint version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("evaluator failed at epoch {epoch}: {cause}")]
    EvaluatorFailure { epoch: u64, cause: EvalError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// The path planned for one epoch: catalog indices, plus tree nodes for tree search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub epoch: u64,
    pub nodes: Vec<NodeId>,
    pub variants: Vec<usize>,
}

/// One operation of a proposal with a magnitude drawn for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedOp {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    pub op: OpKind,
    pub side: Side,
    pub range: [f64; 2],
    pub magnitude: f64,
}

/// What the trainer should run for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub epoch: u64,
    pub root_ops: Vec<ProposedOp>,
    pub path: Vec<ProposedOp>,
}

impl Proposal {
    pub fn root_variants(&self) -> Vec<OpVariant> {
        self.root_ops.iter().map(ProposedOp::variant).collect()
    }

    pub fn path_variants(&self) -> Vec<OpVariant> {
        self.path.iter().map(ProposedOp::variant).collect()
    }
}

impl ProposedOp {
    pub fn variant(&self) -> OpVariant {
        OpVariant::new(self.op, self.range[0], self.range[1], self.side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStat {
    pub node: NodeId,
    pub visits: u64,
    pub q_mean: f64,
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub policy: Policy,
    pub path: Vec<ProposedOp>,
    pub loss: f64,
    pub l_ma: f64,
    pub value: f64,
    pub l_node: Option<f64>,
    /// Statistics of the path nodes after the update (tree search only).
    pub nodes: Vec<NodeStat>,
    pub prunes: Vec<PruneEvent>,
    /// Set once tree search has fallen back to the empty path.
    pub degraded: bool,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: u64,
    pub loss: f64,
    pub path: Vec<ProposedOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub seed: u64,
    pub epochs: u64,
    pub records: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
    pub final_tree: Option<AugTree>,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the last `n` completed epochs.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len().saturating_sub(k)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full engine state between epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub tree: AugTree,
    pub policy_rng: RngState,
    pub magnitude_rng: RngState,
    pub next: PlannedPath,
    pub prev_loss: Option<f64>,
    pub degraded: bool,
    pub records: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints always serialize")
    }

    /// Parses a checkpoint, checking the version before the body.
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe =
            serde_json::from_str(text).map_err(|e| EngineError::CorruptCheckpoint(e.to_string()))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(EngineError::VersionMismatch {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| EngineError::CorruptCheckpoint(e.to_string()))
    }
}

enum Phase {
    /// Between epochs; holds the path for the next epoch.
    Ready(PlannedPath),
    /// A proposal is out; waiting for its loss.
    Awaiting(PlannedPath, Proposal),
}

/// Receives log records and checkpoints as a run progresses.
pub trait RunObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_checkpoint(&mut self, _epoch: u64, _checkpoint: &Checkpoint) {}
}

impl RunObserver for () {}

pub struct Engine {
    config: RunConfig,
    tree: AugTree,
    fixed: Vec<usize>,
    policy_rng: ChaCha8Rng,
    magnitude_rng: ChaCha8Rng,
    phase: Phase,
    prev_loss: Option<f64>,
    degraded: bool,
    records: Vec<EpochRecord>,
}

impl Engine {
    pub fn new(config: RunConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let tree = AugTree::with_depth(config.catalog.clone(), config.depth)?;
        let mut engine = Self {
            fixed: fixed_indices(&config),
            tree,
            policy_rng: stream_rng(config.seed, SeedStream::Policy),
            magnitude_rng: stream_rng(config.seed, SeedStream::Magnitude),
            phase: Phase::Ready(PlannedPath {
                epoch: 1,
                nodes: Vec::new(),
                variants: Vec::new(),
            }),
            prev_loss: None,
            degraded: false,
            records: Vec::new(),
            config,
        };
        let first = match engine.config.policy {
            Policy::DDAug => {
                let nodes = engine.tree.leftmost_path()?;
                engine.tree_plan(1, nodes)?
            }
            _ => engine.baseline_plan(1),
        };
        engine.phase = Phase::Ready(first);
        Ok(engine)
    }

    pub fn restore(checkpoint: Checkpoint) -> Result<Self, EngineError> {
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(EngineError::VersionMismatch {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        checkpoint.config.validate()?;
        let corrupt = |m: &str| EngineError::CorruptCheckpoint(m.into());
        if checkpoint.next.epoch != checkpoint.records.len() as u64 + 1 {
            return Err(corrupt("next epoch does not follow the recorded epochs"));
        }
        if checkpoint.tree.depth() != checkpoint.config.depth || *checkpoint.tree.catalog() != checkpoint.config.catalog {
            return Err(corrupt("tree does not match config"));
        }
        if checkpoint.next.nodes.iter().any(|&n| !checkpoint.tree.contains(n)) {
            return Err(corrupt("planned path references a pruned node"));
        }
        if checkpoint.next.variants.iter().any(|&v| v >= checkpoint.config.catalog.len()) {
            return Err(corrupt("planned path references an unknown variant"));
        }
        Ok(Self {
            fixed: fixed_indices(&checkpoint.config),
            tree: checkpoint.tree,
            policy_rng: checkpoint.policy_rng.restore(),
            magnitude_rng: checkpoint.magnitude_rng.restore(),
            phase: Phase::Ready(checkpoint.next),
            prev_loss: checkpoint.prev_loss,
            degraded: checkpoint.degraded,
            records: checkpoint.records,
            config: checkpoint.config,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, EngineError> {
        let Phase::Ready(next) = &self.phase else {
            return Err(EngineError::OutOfOrder("checkpoint"));
        };
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tree: self.tree.clone(),
            policy_rng: RngState::capture(&self.policy_rng),
            magnitude_rng: RngState::capture(&self.magnitude_rng),
            next: next.clone(),
            prev_loss: self.prev_loss,
            degraded: self.degraded,
            records: self.records.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn tree(&self) -> &AugTree {
        &self.tree
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    /// Epoch the next proposal (or the outstanding one) is for.
    pub fn current_epoch(&self) -> u64 {
        match &self.phase {
            Phase::Ready(p) | Phase::Awaiting(p, _) => p.epoch,
        }
    }

    /// Hands out the planned path for the next epoch with fresh magnitudes.
    pub fn propose(&mut self) -> Result<Proposal, EngineError> {
        let Phase::Ready(plan) = &self.phase else {
            return Err(EngineError::OutOfOrder("propose"));
        };
        let plan = plan.clone();
        let catalog = &self.config.catalog;
        for (i, &v) in plan.variants.iter().enumerate() {
            let kind = catalog.variants()[v].kind;
            if plan.variants[..i].iter().any(|&p| catalog.variants()[p].kind == kind) {
                return Err(EngineError::InvariantViolation(kind));
            }
        }
        let rng = &mut self.magnitude_rng;
        let mut draw = |node: Option<NodeId>, v: &OpVariant| ProposedOp {
            node,
            op: v.kind,
            side: v.side(),
            range: [v.range.lo, v.range.hi],
            magnitude: sample_magnitude(v, rng),
        };
        let root_ops = catalog.roots().iter().map(|v| draw(None, v)).collect();
        let path = plan
            .variants
            .iter()
            .enumerate()
            .map(|(i, &v)| draw(plan.nodes.get(i).copied(), &catalog.variants()[v]))
            .collect();
        let proposal = Proposal {
            epoch: plan.epoch,
            root_ops,
            path,
        };
        self.phase = Phase::Awaiting(plan, proposal.clone());
        Ok(proposal)
    }

    /// Consumes the loss of the outstanding proposal: update, prune, plan next.
    pub fn feedback(&mut self, loss: f64) -> Result<&EpochRecord, EngineError> {
        if !matches!(self.phase, Phase::Awaiting(..)) {
            return Err(EngineError::OutOfOrder("feedback"));
        }
        let fb = EpochFeedback::new(self.current_epoch(), loss, self.prev_loss, self.config.params.beta)?;
        let Phase::Awaiting(plan, proposal) = std::mem::replace(
            &mut self.phase,
            Phase::Ready(PlannedPath {
                epoch: 0,
                nodes: Vec::new(),
                variants: Vec::new(),
            }),
        ) else {
            unreachable!("checked above");
        };

        let mut prunes = Vec::new();
        let mut nodes = Vec::new();
        if self.config.policy == Policy::DDAug && !plan.nodes.is_empty() {
            let path = AugPath {
                nodes: plan.nodes.clone(),
                epoch: plan.epoch,
            };
            let outcome = policy::update_path(&mut self.tree, &path, &fb, &self.config.params)?;
            for id in &outcome.updated {
                if let Ok(n) = self.tree.node(*id) {
                    nodes.push(NodeStat {
                        node: n.id,
                        visits: n.visit_count,
                        q_mean: n.q_mean().unwrap_or(0.0),
                    });
                }
            }
            prunes.extend(outcome.prune);
        }

        let next_epoch = plan.epoch + 1;
        let next = match self.config.policy {
            Policy::DDAug if !self.degraded => {
                match policy::select_path(&self.tree, &self.config.params, &mut self.policy_rng) {
                    Ok(nodes) => self.tree_plan(next_epoch, nodes)?,
                    Err(PolicyError::EmptyTree) => {
                        log::warn!(
                            "tree exhausted by pruning after epoch {}; continuing without searched augmentation",
                            plan.epoch
                        );
                        self.degraded = true;
                        PlannedPath {
                            epoch: next_epoch,
                            nodes: Vec::new(),
                            variants: Vec::new(),
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Policy::DDAug => PlannedPath {
                epoch: next_epoch,
                nodes: Vec::new(),
                variants: Vec::new(),
            },
            _ => self.baseline_plan(next_epoch),
        };

        self.records.push(EpochRecord {
            epoch: plan.epoch,
            policy: self.config.policy,
            path: proposal.path,
            loss,
            l_ma: fb.l_ma,
            value: fb.per_visit_value(),
            l_node: fb.l_node,
            nodes,
            prunes,
            degraded: self.degraded,
        });
        self.prev_loss = Some(loss);
        self.phase = Phase::Ready(next);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs epochs until `epochs` have completed.
    pub fn run_to<E: Evaluator + ?Sized>(
        &mut self,
        epochs: u64,
        evaluator: &mut E,
        observer: &mut dyn RunObserver,
    ) -> Result<(), EngineError> {
        while (self.records.len() as u64) < epochs {
            let proposal = self.propose()?;
            let roots = proposal.root_variants();
            let path = proposal.path_variants();
            let loss = match evaluator.evaluate(proposal.epoch, &roots, &path) {
                Ok(l) => l,
                Err(cause) => {
                    // put the proposal back so the engine stays checkpointable
                    if let Phase::Awaiting(plan, _) = std::mem::replace(
                        &mut self.phase,
                        Phase::Ready(PlannedPath {
                            epoch: 0,
                            nodes: Vec::new(),
                            variants: Vec::new(),
                        }),
                    ) {
                        self.phase = Phase::Ready(plan);
                    }
                    return Err(EngineError::EvaluatorFailure {
                        epoch: proposal.epoch,
                        cause,
                    });
                }
            };
            let record = self.feedback(loss)?;
            observer.on_epoch(record);
            let done = self.records.len() as u64;
            let every = self.config.checkpoint_every;
            if every > 0 && done % every == 0 {
                let cp = self.checkpoint()?;
                observer.on_checkpoint(done, &cp);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> RunReport {
        let best = self
            .records
            .iter()
            .min_by(|a, b| a.loss.total_cmp(&b.loss))
            .map(|r| BestEpoch {
                epoch: r.epoch,
                loss: r.loss,
                path: r.path.clone(),
            });
        RunReport {
            policy: self.config.policy,
            seed: self.config.seed,
            epochs: self.records.len() as u64,
            records: self.records.clone(),
            best,
            final_tree: (self.config.policy == Policy::DDAug).then(|| self.tree.clone()),
            failure: None,
            wall_clock_secs: 0.0,
        }
    }

    fn tree_plan(&self, epoch: u64, nodes: Vec<NodeId>) -> Result<PlannedPath, EngineError> {
        let variants = nodes
            .iter()
            .map(|&id| {
                self.tree
                    .node(id)?
                    .variant
                    .ok_or(TreeError::UnknownNode(id))
            })
            .collect::<Result<_, _>>()?;
        Ok(PlannedPath { epoch, nodes, variants })
    }

    fn baseline_plan(&mut self, epoch: u64) -> PlannedPath {
        let variants = match self.config.policy {
            Policy::NoDA | Policy::DDAug => Vec::new(),
            Policy::FixedSequential => self.fixed.clone(),
            Policy::UniformSample => uniform_path(&self.config.catalog, self.config.depth, &mut self.policy_rng),
        };
        PlannedPath {
            epoch,
            nodes: Vec::new(),
            variants,
        }
    }
}

fn fixed_indices(config: &RunConfig) -> Vec<usize> {
    if config.fixed_sequence.is_empty() {
        // first variant of every operation kind, in catalog order
        let mut seen = Vec::new();
        config
            .catalog
            .variants()
            .iter()
            .enumerate()
            .filter(|(_, v)| {
                let fresh = !seen.contains(&v.kind);
                seen.push(v.kind);
                fresh
            })
            .map(|(i, _)| i)
            .collect()
    } else {
        config
            .fixed_sequence
            .iter()
            .filter_map(|k| config.catalog.index_of(*k))
            .collect()
    }
}

/// Uniform draw over ordered sequences of `depth` variants with distinct
/// operation kinds (rejection sampling over independent uniform picks).
pub fn uniform_path<R: Rng + ?Sized>(catalog: &Catalog, depth: usize, rng: &mut R) -> Vec<usize> {
    let mut kinds: Vec<OpKind> = catalog.variants().iter().map(|v| v.kind).collect();
    kinds.sort();
    kinds.dedup();
    let len = depth.min(kinds.len());
    loop {
        let pick: Vec<usize> = (0..len).map(|_| rng.random_range(0..catalog.len())).collect();
        let distinct = pick.iter().enumerate().all(|(i, &a)| {
            pick[..i]
                .iter()
                .all(|&b| catalog.variants()[a].kind != catalog.variants()[b].kind)
        });
        if distinct {
            return pick;
        }
    }
}

/// Error from [`run`]: what went wrong plus the report up to that point.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunError {
    pub error: EngineError,
    pub partial: Box<RunReport>,
}

/// Builds an engine from `config` and runs it to `config.epochs`.
pub fn run<E: Evaluator + ?Sized>(
    config: RunConfig,
    evaluator: &mut E,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let epochs = config.epochs;
    let mut engine = Engine::new(config).map_err(|error| RunError {
        error,
        partial: Box::new(RunReport {
            policy: Policy::NoDA,
            seed: 0,
            epochs: 0,
            records: Vec::new(),
            best: None,
            final_tree: None,
            failure: None,
            wall_clock_secs: 0.0,
        }),
    })?;
    resume(&mut engine, epochs, evaluator, observer, started)
}

/// Continues `engine` until `epochs` have completed.
pub fn resume<E: Evaluator + ?Sized>(
    engine: &mut Engine,
    epochs: u64,
    evaluator: &mut E,
    observer: &mut dyn RunObserver,
    started: Instant,
) -> Result<RunReport, RunError> {
    let result = engine.run_to(epochs, evaluator, observer);
    let mut report = engine.report();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => Ok(report),
        Err(error) => {
            report.failure = Some(error.to_string());
            Err(RunError {
                error,
                partial: Box::new(report),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{ScriptedEvaluator, SyntheticLandscape};

    fn cfg(policy: Policy, epochs: u64) -> RunConfig {
        RunConfig {
            epochs,
            policy,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn first_epoch_uses_leftmost_path() {
        let mut land = SyntheticLandscape::default();
        let report = run(cfg(Policy::DDAug, 1), &mut land, &mut ()).unwrap();
        let tree = AugTree::build(default_catalog());
        let leftmost = tree.leftmost_path().unwrap();
        let got: Vec<_> = report.records[0].path.iter().map(|p| p.node.unwrap()).collect();
        assert_eq!(got, leftmost);
    }

    #[test]
    fn noda_follows_neutral_curve() {
        let mut land = SyntheticLandscape {
            base_loss: 1.3,
            decay: 0.97,
            ..Default::default()
        };
        let report = run(cfg(Policy::NoDA, 30), &mut land.clone(), &mut ()).unwrap();
        for r in &report.records {
            assert!(r.path.is_empty());
            assert_eq!(r.loss, land.neutral_loss(r.epoch));
        }
        assert_eq!(land.evaluate(3, &[], &[]).unwrap(), 1.3 * 0.97f64.powi(3));
    }

    #[test]
    fn propose_feedback_must_alternate() {
        let mut engine = Engine::new(cfg(Policy::DDAug, 5)).unwrap();
        assert!(matches!(engine.feedback(1.0), Err(EngineError::OutOfOrder("feedback"))));
        engine.propose().unwrap();
        assert!(matches!(engine.propose(), Err(EngineError::OutOfOrder("propose"))));
        assert!(matches!(engine.checkpoint(), Err(EngineError::OutOfOrder("checkpoint"))));
        assert!(matches!(
            engine.feedback(f64::NAN),
            Err(EngineError::Policy(PolicyError::InvalidLoss(_)))
        ));
        engine.feedback(0.9).unwrap();
        assert_eq!(engine.current_epoch(), 2);
    }

    #[test]
    fn fixed_sequence_default_has_one_variant_per_kind() {
        let report = run(cfg(Policy::FixedSequential, 2), &mut SyntheticLandscape::default(), &mut ()).unwrap();
        assert_eq!(report.records[0].path.len(), 10);
        assert_eq!(report.records[0].path, {
            let mut p = report.records[1].path.clone();
            for (a, b) in p.iter_mut().zip(&report.records[0].path) {
                a.magnitude = b.magnitude;
            }
            p
        });
    }

    #[test]
    fn uniform_paths_have_distinct_kinds() {
        let catalog = default_catalog();
        let mut rng = stream_rng(3, SeedStream::Policy);
        for _ in 0..500 {
            let p = uniform_path(&catalog, 3, &mut rng);
            assert_eq!(p.len(), 3);
            let k: Vec<_> = p.iter().map(|&i| catalog.variants()[i].kind).collect();
            assert!(k[0] != k[1] && k[0] != k[2] && k[1] != k[2]);
        }
    }

    #[test]
    fn evaluator_failure_returns_partial_report() {
        let mut scripted = ScriptedEvaluator {
            losses: vec![1.0, 0.9, 0.8],
        };
        let err = run(cfg(Policy::DDAug, 10), &mut scripted, &mut ()).unwrap_err();
        assert!(matches!(err.error, EngineError::EvaluatorFailure { epoch: 4, .. }));
        assert_eq!(err.partial.records.len(), 3);
        assert!(err.partial.failure.is_some());
    }

    #[test]
    fn exhausted_tree_degrades_to_empty_path() {
        // a rising loss curve prunes something every few epochs
        let losses: Vec<f64> = (0..400).map(|i| 1.0 + i as f64 * 0.01).collect();
        let mut config = cfg(Policy::DDAug, 400);
        config.catalog = Catalog::new(
            default_catalog().variants()[..3].to_vec(),
            default_catalog().roots().to_vec(),
        )
        .unwrap();
        let report = run(config, &mut ScriptedEvaluator { losses }, &mut ()).unwrap();
        let last = report.records.last().unwrap();
        assert!(last.degraded);
        assert!(last.path.is_empty());
        assert!(report.final_tree.unwrap().is_empty());
    }

    #[test]
    fn checkpoint_version_checked() {
        let engine = Engine::new(cfg(Policy::DDAug, 5)).unwrap();
        let mut cp = engine.checkpoint().unwrap();
        cp.version = 99;
        let text = cp.to_json();
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(EngineError::VersionMismatch { found: 99, .. })
        ));
        assert!(matches!(
            Checkpoint::from_json("{\"version\":1,\"config\":5}"),
            Err(EngineError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!("uniform".parse::<Policy>().unwrap(), Policy::UniformSample);
        assert_eq!("DDAug".parse::<Policy>().unwrap(), Policy::DDAug);
        assert_eq!("NoDA".parse::<Policy>().unwrap(), Policy::NoDA);
        assert!("moreda".parse::<Policy>().is_err());
        assert_eq!(serde_json::to_string(&Policy::UniformSample).unwrap(), "\"uniform_sample\"");
    }
}
