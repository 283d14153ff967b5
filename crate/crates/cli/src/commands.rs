use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use augsearch::engine::{self, Checkpoint, Engine, EngineError, EpochRecord, RunObserver, RunReport};
use augsearch::evaluator::{serve_synthetic, SyntheticLandscape};
use augsearch::io::{read_nifti, read_volume, write_nifti, write_volume};
use augsearch::{AugTree, Policy, Scalar, Volume};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigDoc, ConfigError, EvaluatorSpec};
use crate::{exit, Command, CompareArgs, ConvertArgs, InspectArgs, Precision, RunOverrides, SearchArgs, TrainerArgs};

/// An error together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::new(exit::FAILURE, error)
    }
}

impl From<io::Error> for Failure {
    fn from(error: io::Error) -> Self {
        Self::new(exit::FAILURE, error)
    }
}

impl From<ConfigError> for Failure {
    fn from(error: ConfigError) -> Self {
        let code = match error {
            ConfigError::Io(_) => exit::FAILURE,
            _ => exit::CONFIG,
        };
        Self::new(code, error)
    }
}

impl From<EngineError> for Failure {
    fn from(error: EngineError) -> Self {
        let code = match &error {
            EngineError::Config(_) | EngineError::Policy(augsearch::PolicyError::InvalidParam { .. }) => {
                exit::CONFIG
            }
            EngineError::EvaluatorFailure { .. } => exit::EVALUATOR,
            EngineError::VersionMismatch { .. } | EngineError::CorruptCheckpoint(_) => exit::CHECKPOINT,
            _ => exit::FAILURE,
        };
        Self::new(code, error)
    }
}

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Search(args) => search(args),
        Command::Compare(args) => compare(args),
        Command::Inspect(args) => inspect(args),
        Command::Convert(args) => convert(args),
        Command::Trainer(args) => trainer(args),
    }
}

/// Loads the run document and applies command-line overrides.
pub fn resolve_config(run: &RunOverrides) -> Result<ConfigDoc, Failure> {
    let mut doc = match &run.config {
        Some(path) => ConfigDoc::load(path)?,
        None => ConfigDoc::default(),
    };
    if let Some(e) = run.epochs {
        doc.epochs = e;
    }
    if let Some(cmd) = &run.trainer_cmd {
        doc.evaluator = EvaluatorSpec::Process { command: cmd.clone() };
    }
    if let Some(addr) = &run.trainer_addr {
        doc.evaluator = EvaluatorSpec::Tcp { address: addr.clone() };
    }
    Ok(doc)
}

/// File names inside a search output directory.
pub mod layout {
    pub const CONFIG: &str = "config.toml";
    pub const EPOCH_LOG: &str = "epochs.ndjson";
    pub const REPORT: &str = "report.json";
    pub const TIMING: &str = "timing.json";
    pub const CHECKPOINTS: &str = "checkpoints";

    pub fn checkpoint_name(epoch: u64) -> String {
        format!("epoch-{epoch:06}.json")
    }
}

struct FileObserver {
    log: BufWriter<File>,
    checkpoint_dir: PathBuf,
    error: Option<io::Error>,
}

impl FileObserver {
    fn write_record(&mut self, record: &EpochRecord) -> io::Result<()> {
        writeln!(self.log, "{}", record.to_line())?;
        self.log.flush()
    }
}

impl RunObserver for FileObserver {
    fn on_epoch(&mut self, record: &EpochRecord) {
        if self.error.is_none() {
            self.error = self.write_record(record).err();
        }
    }

    fn on_checkpoint(&mut self, epoch: u64, checkpoint: &Checkpoint) {
        if self.error.is_some() {
            return;
        }
        let path = self.checkpoint_dir.join(layout::checkpoint_name(epoch));
        self.error = fs::write(path, checkpoint.to_json()).err();
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Checkpoint::from_json(&text)
        .map_err(|e| Failure::new(exit::CHECKPOINT, anyhow!(e).context(format!("{}", path.display()))))
}

fn search(args: SearchArgs) -> Result<(), Failure> {
    let mut doc = resolve_config(&args.run)?;
    if let Some(p) = args.policy {
        doc.policy = p;
    }
    if let Some(s) = args.seed {
        doc.seed = s;
    }

    let started = Instant::now();
    let mut engine = match &args.resume {
        Some(path) => {
            let cp = read_checkpoint(path)?;
            // the checkpoint's run settings win; only the horizon may be extended
            let epochs = args.run.epochs.unwrap_or(doc.epochs.max(cp.config.epochs));
            doc.epochs = epochs;
            doc.policy = cp.config.policy;
            doc.seed = cp.config.seed;
            doc.depth = cp.config.depth;
            doc.params = cp.config.params.clone();
            doc.checkpoint_every = cp.config.checkpoint_every;
            doc.fixed_sequence = cp.config.fixed_sequence.clone();
            doc.catalog = Some(cp.config.catalog.clone());
            doc.validate()?;
            Engine::restore(cp)?
        }
        None => {
            doc.validate()?;
            Engine::new(doc.run_config())?
        }
    };

    fs::create_dir_all(args.out.join(layout::CHECKPOINTS))
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    fs::write(args.out.join(layout::CONFIG), doc.to_toml())?;
    let mut observer = FileObserver {
        log: BufWriter::new(File::create(args.out.join(layout::EPOCH_LOG))?),
        checkpoint_dir: args.out.join(layout::CHECKPOINTS),
        error: None,
    };
    // a resumed log starts with the epochs already in the checkpoint
    for record in engine.records() {
        observer.write_record(record)?;
    }

    let mut evaluator = doc
        .build_evaluator()
        .map_err(|e| Failure::new(exit::EVALUATOR, anyhow!(e).context("cannot start evaluator")))?;
    let outcome = engine::resume(&mut engine, doc.epochs, evaluator.as_mut(), &mut observer, started);
    drop(evaluator);
    if let Some(e) = observer.error.take() {
        return Err(Failure::new(exit::FAILURE, anyhow!(e).context("cannot write run output")));
    }
    let (report, failure) = match outcome {
        Ok(report) => (report, None),
        Err(e) => (*e.partial, Some(e.error)),
    };
    write_report(&args.out, &report)?;
    print_summary(&report);
    match failure {
        None => Ok(()),
        Some(e) => Err(e.into()),
    }
}

fn write_report(out: &Path, report: &RunReport) -> io::Result<()> {
    let text = serde_json::to_string_pretty(report).expect("reports always serialize");
    fs::write(out.join(layout::REPORT), text + "\n")?;
    let timing = serde_json::json!({ "wall_clock_secs": report.wall_clock_secs });
    fs::write(out.join(layout::TIMING), timing.to_string() + "\n")
}

fn print_summary(report: &RunReport) {
    println!("policy {} seed {}: {} epochs", report.policy, report.seed, report.epochs);
    if let Some(best) = &report.best {
        println!("best loss {:.6} at epoch {} via {}", best.loss, best.epoch, describe_ops(&best.path));
    }
    if let Some(tree) = &report.final_tree {
        println!("prunes: {}, remaining leaves: {}", tree.prune_log().len(), tree.leaf_count());
    }
    if let Some(f) = &report.failure {
        println!("stopped early: {f}");
    }
}

fn describe_ops(path: &[augsearch::engine::ProposedOp]) -> String {
    if path.is_empty() {
        return "(no searched ops)".into();
    }
    path.iter()
        .map(|p| format!("{}[{:?}]", p.op, p.side))
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Parses `N`, `A..B` or `a,b,c`.
pub fn parse_seeds(spec: &str) -> anyhow::Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {spec}");
        }
        return Ok((a..b).collect());
    }
    if spec.contains(',') {
        return spec
            .split(',')
            .map(|s| s.trim().parse().map_err(Into::into))
            .collect();
    }
    let n: u64 = spec.parse().with_context(|| format!("bad seed spec `{spec}`"))?;
    if n == 0 {
        bail!("seed count must be >= 1");
    }
    Ok((0..n).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub policy: Policy,
    pub seed: u64,
    pub final_loss: f64,
    pub epochs: u64,
    pub prunes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    /// Seeds where this policy had the strictly lowest final loss.
    pub wins: usize,
    pub seeds: usize,
}

/// Runs every (policy, seed) pair on the synthetic landscape of `doc`.
pub fn compare_runs(doc: &ConfigDoc, policies: &[Policy], seeds: &[u64], tail: usize) -> Result<Vec<CompareRow>, Failure> {
    if !matches!(doc.evaluator, EvaluatorSpec::Synthetic(_)) {
        return Err(Failure::new(exit::CONFIG, anyhow!("compare needs a synthetic evaluator")));
    }
    let jobs: Vec<(Policy, u64)> = policies.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    jobs.par_iter()
        .map(|&(policy, seed)| {
            let mut d = doc.clone();
            d.policy = policy;
            d.seed = seed;
            let mut evaluator = d.build_evaluator().map_err(|e| Failure::new(exit::EVALUATOR, e))?;
            let report = engine::run(d.run_config(), evaluator.as_mut(), &mut ()).map_err(|e| Failure::from(e.error))?;
            Ok(CompareRow {
                policy,
                seed,
                final_loss: report.tail_mean(tail),
                epochs: report.epochs,
                prunes: report.final_tree.as_ref().map_or(0, |t| t.prune_log().len()),
            })
        })
        .collect()
}

pub fn summarize(rows: &[CompareRow], policies: &[Policy], seeds: &[u64]) -> Vec<PolicySummary> {
    let loss = |p: Policy, s: u64| rows.iter().find(|r| r.policy == p && r.seed == s).map(|r| r.final_loss);
    policies
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = seeds.iter().filter_map(|&s| loss(p, s)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64;
            let wins = seeds
                .iter()
                .filter(|&&s| {
                    let Some(mine) = loss(p, s) else { return false };
                    policies
                        .iter()
                        .filter(|&&q| q != p)
                        .all(|&q| loss(q, s).is_some_and(|other| mine < other))
                })
                .count();
            PolicySummary {
                policy: p,
                mean_final_loss: mean,
                std_final_loss: var.sqrt(),
                wins,
                seeds: vals.len(),
            }
        })
        .collect()
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    let doc = resolve_config(&args.run)?;
    doc.validate()?;
    let seeds = parse_seeds(&args.seeds).map_err(|e| Failure::new(exit::CONFIG, e))?;
    if args.policy.is_empty() {
        return Err(Failure::new(exit::CONFIG, anyhow!("no policies given")));
    }
    if args.tail == 0 {
        return Err(Failure::new(exit::CONFIG, anyhow!("--tail must be >= 1")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Failure::new(exit::FAILURE, e))?;
    let started = Instant::now();
    let rows = pool.install(|| compare_runs(&doc, &args.policy, &seeds, args.tail))?;
    let summary = summarize(&rows, &args.policy, &seeds);

    println!(
        "{} seeds, {} epochs, mean loss over the final {} epochs",
        seeds.len(),
        doc.epochs,
        args.tail.min(doc.epochs as usize)
    );
    println!("{:<16} {:>12} {:>12} {:>8}", "policy", "mean", "std", "wins");
    for s in &summary {
        println!(
            "{:<16} {:>12.6} {:>12.6} {:>5}/{}",
            s.policy.label(),
            s.mean_final_loss,
            s.std_final_loss,
            s.wins,
            s.seeds
        );
    }
    if let EvaluatorSpec::Synthetic(spec) = &doc.evaluator {
        let land = spec.landscape(0);
        let k = args.tail.min(doc.epochs as usize) as u64;
        let neutral = (doc.epochs - k + 1..=doc.epochs).map(|t| land.neutral_loss(t)).sum::<f64>() / k as f64;
        println!("{:<16} {:>12.6}", "neutral curve", neutral);
    }
    println!("elapsed {:.2}s", started.elapsed().as_secs_f64());

    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let body = serde_json::json!({ "runs": rows, "summary": summary });
        fs::write(out.join("compare.json"), serde_json::to_string_pretty(&body).expect("serializable") + "\n")?;
    }
    Ok(())
}

enum Inspected {
    Checkpoint(Box<Checkpoint>),
    Report(Box<RunReport>),
    Log(Vec<EpochRecord>),
}

fn load_inspected(path: &Path) -> Result<Inspected, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Inspected::Log(Vec::new()));
    }
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if value.get("version").is_some() && value.get("tree").is_some() {
            return Ok(Inspected::Checkpoint(Box::new(read_checkpoint(path)?)));
        }
        if value.get("records").is_some() {
            let report = serde_json::from_value(value)
                .map_err(|e| Failure::new(exit::CHECKPOINT, anyhow!("corrupt report: {e}")))?;
            return Ok(Inspected::Report(Box::new(report)));
        }
    }
    let mut records = Vec::new();
    for (i, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::new(exit::CHECKPOINT, anyhow!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(Inspected::Log(records))
}

fn inspect(args: InspectArgs) -> Result<(), Failure> {
    match inspect_to(&args, &mut io::stdout().lock()) {
        Err(f) if f.error.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => Ok(()),
        other => other,
    }
}

fn inspect_to(args: &InspectArgs, out: &mut impl Write) -> Result<(), Failure> {
    match load_inspected(&args.path)? {
        Inspected::Checkpoint(cp) => {
            writeln!(out, "checkpoint v{} ({} policy, seed {})", cp.version, cp.config.policy, cp.config.seed)?;
            writeln!(out, "next epoch {}", cp.next.epoch)?;
            describe_records(out, &cp.records)?;
            describe_tree(out, &cp.tree, args.top)?;
        }
        Inspected::Report(report) => {
            writeln!(out, "report ({} policy, seed {})", report.policy, report.seed)?;
            describe_records(out, &report.records)?;
            if let Some(tree) = &report.final_tree {
                describe_tree(out, tree, args.top)?;
            }
        }
        Inspected::Log(records) => describe_records(out, &records)?,
    }
    Ok(())
}

pub fn describe_records(out: &mut impl Write, records: &[EpochRecord]) -> io::Result<()> {
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        return writeln!(out, "no epochs recorded");
    };
    writeln!(out, "epochs {}..={} ({} recorded)", first.epoch, last.epoch, records.len())?;
    let best = records.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).expect("non-empty");
    writeln!(out, "final loss {:.6}, best {:.6} at epoch {}", last.loss, best.loss, best.epoch)?;
    if let Some(r) = records.iter().find(|r| r.degraded) {
        writeln!(out, "search space exhausted; no searched ops from epoch {}", r.epoch + 1)?;
    }
    let prunes: Vec<_> = records.iter().flat_map(|r| &r.prunes).collect();
    writeln!(out, "prune events: {}", prunes.len())?;
    for p in prunes {
        writeln!(
            out,
            "  epoch {:>4}  node {:>5}  layer {}  {} {:?}  window sum {:+.6}  removed {} nodes / {} leaves",
            p.epoch, p.node.0, p.layer, p.variant.op, p.variant.side, p.window_sum, p.removed_nodes, p.removed_leaves
        )?;
    }
    Ok(())
}

pub fn describe_tree(out: &mut impl Write, tree: &AugTree, top: usize) -> io::Result<()> {
    let sizes = tree.layer_sizes();
    writeln!(out, "tree depth {}, nodes per layer {:?}, leaves {}", tree.depth(), sizes, tree.leaf_count())?;
    writeln!(out, "visit histogram (visits: nodes per layer)")?;
    const BUCKETS: [(u64, u64, &str); 6] =
        [(0, 0, "0"), (1, 1, "1"), (2, 3, "2-3"), (4, 7, "4-7"), (8, 15, "8-15"), (16, u64::MAX, "16+")];
    for layer in 1..=tree.depth() as u8 {
        let counts: Vec<String> = BUCKETS
            .iter()
            .map(|&(lo, hi, label)| {
                let n = tree
                    .layer_nodes(layer)
                    .filter(|n| n.visit_count >= lo && n.visit_count <= hi)
                    .count();
                format!("{label}:{n}")
            })
            .collect();
        writeln!(out, "  layer {layer}: {}", counts.join(" "))?;
    }
    let mut ranked: Vec<(f64, u64, Vec<augsearch::NodeId>)> = tree
        .paths()
        .filter_map(|p| {
            let leaf = tree.node(*p.last()?).ok()?;
            Some((leaf.q_mean()?, leaf.visit_count, p))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    writeln!(out, "top {} visited paths by mean value", top.min(ranked.len()))?;
    for (q, visits, path) in ranked.into_iter().take(top) {
        let ops: Vec<String> = path
            .iter()
            .filter_map(|&id| tree.variant(id).ok())
            .map(|v| format!("{}[{:?}]", v.kind, v.side()))
            .collect();
        writeln!(out, "  {q:.4} ({visits} visits)  {}", ops.join(" -> "))?;
    }
    Ok(())
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii")
}

fn convert(args: ConvertArgs) -> Result<(), Failure> {
    match args.precision {
        Precision::F32 => convert_as::<f32>(&args.input, &args.output),
        Precision::F64 => convert_as::<f64>(&args.input, &args.output),
    }
}

fn convert_as<T: Scalar>(input: &Path, output: &Path) -> Result<(), Failure> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("cannot open {}", input.display()))?);
    let volume: Volume<T> = if is_nifti(input) {
        read_nifti(reader)
    } else {
        read_volume(reader)
    }
    .with_context(|| format!("cannot read {}", input.display()))?;
    let mut writer = BufWriter::new(File::create(output).with_context(|| format!("cannot create {}", output.display()))?);
    if is_nifti(output) {
        write_nifti(&volume, &mut writer)
    } else {
        write_volume(&volume, &mut writer)
    }
    .with_context(|| format!("cannot write {}", output.display()))?;
    writer.flush()?;
    let [z, y, x] = volume.shape();
    println!("{} -> {} ({z}x{y}x{x})", input.display(), output.display());
    Ok(())
}

fn trainer(args: TrainerArgs) -> Result<(), Failure> {
    let doc = match &args.config {
        Some(p) => ConfigDoc::load(p)?,
        None => ConfigDoc::default(),
    };
    let EvaluatorSpec::Synthetic(spec) = &doc.evaluator else {
        return Err(Failure::new(exit::CONFIG, anyhow!("trainer serves only a synthetic evaluator")));
    };
    let landscape: SyntheticLandscape = spec.landscape(args.seed.unwrap_or(doc.seed));
    landscape.validate().map_err(|e| Failure::new(exit::CONFIG, anyhow!(e)))?;
    let served = match &args.listen {
        None => serve_synthetic(&landscape, io::stdin().lock(), io::stdout().lock()),
        Some(addr) => {
            let listener = std::net::TcpListener::bind(addr).with_context(|| format!("cannot bind {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            let (stream, _) = listener.accept()?;
            serve_synthetic(&landscape, BufReader::new(stream.try_clone()?), stream)
        }
    }
    .map_err(|e| Failure::new(exit::EVALUATOR, e))?;
    log::info!("served {served} epochs");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5..8").unwrap(), vec![5, 6, 7]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("8..5").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn wins_need_strict_minimum() {
        let row = |policy, seed, final_loss| CompareRow {
            policy,
            seed,
            final_loss,
            epochs: 1,
            prunes: 0,
        };
        let rows = vec![
            row(Policy::DDAug, 0, 1.0),
            row(Policy::NoDA, 0, 2.0),
            row(Policy::DDAug, 1, 2.0),
            row(Policy::NoDA, 1, 2.0),
        ];
        let s = summarize(&rows, &[Policy::DDAug, Policy::NoDA], &[0, 1]);
        assert_eq!((s[0].wins, s[1].wins), (1, 0));
        assert_eq!(s[0].mean_final_loss, 1.5);
    }

    #[test]
    fn empty_log_message() {
        let mut buf = Vec::new();
        describe_records(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "no epochs recorded\n");
    }
}
