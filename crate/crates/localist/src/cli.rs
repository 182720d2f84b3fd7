//! Pipeline commands behind the `localist` binary: data generation,
//! training with optional rule watching, dial sweeps, bound reports, and
//! rule verification. Every command writes a manifest listing its output
//! files with checksums; identical inputs reproduce identical checksums.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 divergence.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{bound_rows, evaluate_dataset, init_anchor_aligned, AttentionModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::objective::{estimate_c_prime, DialSettings};
use crate::partition::{
    build_partition, partition_checksum, partition_from_json, partition_to_json, sha256_hex,
    BlockPartition, EmbeddingTable, PartitionSpec,
};
use crate::rules::{
    compile, constraints_to_json, parse_rules, Calibration, CompilePolicy, CompiledConstraint,
    DeltaPolicy,
};
use crate::taskgen::{dataset_from_jsonl, dataset_to_jsonl, generate, PointerSample, TaskConfig};
use crate::trainer::{
    hot_reload, init_state, load_checkpoint, log_to_jsonl, resume, ConstraintSource, LogEntry,
    Regime, TrainStatus, TrainerConfig,
};
use crate::verifier::{compliance_report, verdicts_from_evals, verdicts_to_jsonl};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
pub struct CliConfig {
    pub partition: Option<PartitionTable>,
    pub task: Option<TaskTable>,
    pub model: Option<ModelTable>,
    pub trainer: Option<TrainerTable>,
    #[serde(default)]
    pub compile: CompileTable,
    #[serde(default)]
    pub verify: VerifyTable,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PartitionTable {
    pub blocks: usize,
    pub anchors_per_block: usize,
    pub fillers_per_block: usize,
    pub d_per_block: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TaskTable {
    pub sequence_length: usize,
    pub blocks_present_per_sample: usize,
    #[serde(default = "one")]
    pub redundancy_k: usize,
    #[serde(default)]
    pub distractors: usize,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelTable {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    #[serde(default = "default_init_margin")]
    pub init_margin: f64,
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
    #[serde(default = "default_value_scale")]
    pub value_scale: f64,
    #[serde(default = "default_readout_scale")]
    pub readout_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_init_margin() -> f64 {
    2.8
}
fn default_init_noise() -> f64 {
    0.01
}
fn default_value_scale() -> f64 {
    0.2
}
fn default_readout_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
pub struct TrainerTable {
    pub step_size: f64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint_every: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_preset")]
    pub preset: String,
}

fn default_eval_samples() -> usize {
    256
}
fn default_preset() -> String {
    "localist".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CompileTable {
    pub safety_factor: f64,
    pub floor: f64,
    pub delta_low: f64,
    pub delta_medium: f64,
    pub delta_high: f64,
    pub calibration_samples: usize,
}

impl Default for CompileTable {
    fn default() -> Self {
        CompileTable {
            safety_factor: 10.0,
            floor: 0.0,
            delta_low: 0.5,
            delta_medium: 1.0,
            delta_high: 2.0,
            calibration_samples: 64,
        }
    }
}

impl CompileTable {
    fn delta_policy(&self) -> DeltaPolicy {
        DeltaPolicy {
            low: self.delta_low,
            medium: self.delta_medium,
            high: self.delta_high,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct VerifyTable {
    pub target_rate: f64,
}

impl Default for VerifyTable {
    fn default() -> Self {
        VerifyTable { target_rate: 0.95 }
    }
}

pub fn load_config(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("config parse error: {e}")))
}

impl CliConfig {
    fn partition_table(&self) -> Result<&PartitionTable> {
        self.partition
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config is missing the [partition] table".into()))
    }

    fn task_table(&self) -> Result<&TaskTable> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config is missing the [task] table".into()))
    }

    fn model_table(&self) -> Result<&ModelTable> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config is missing the [model] table".into()))
    }

    fn trainer_table(&self) -> Result<&TrainerTable> {
        self.trainer
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config is missing the [trainer] table".into()))
    }
}

impl TaskTable {
    fn to_task_config(&self, seed: u64) -> TaskConfig {
        TaskConfig {
            sequence_length: self.sequence_length,
            blocks_present_per_sample: self.blocks_present_per_sample,
            redundancy_k: self.redundancy_k,
            distractors: self.distractors,
            samples: self.samples,
            seed,
        }
    }
}

impl ModelTable {
    fn to_model_config(&self, tau: f64) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            tau,
            init_margin: self.init_margin,
            init_noise: self.init_noise,
            value_scale: self.value_scale,
            readout_scale: self.readout_scale,
        }
    }
}

impl TrainerTable {
    fn to_trainer_config(&self, regime: Regime, seed: u64) -> TrainerConfig {
        TrainerConfig {
            step_size: self.step_size,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            checkpoint_every: self.checkpoint_every,
            eval_samples: self.eval_samples,
            regime_preset: regime,
            dial: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests and file plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

/// Every command's receipt: what ran, against which config, and the exact
/// bytes it produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<String>,
    pub config_checksum: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dial: Option<DialSettings>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunManifest {
    fn new(command: &str, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_path: None,
            config_checksum: None,
            seed: None,
            out_dir: out_dir.display().to_string(),
            dial: None,
            artifacts: Vec::new(),
        }
    }

    fn with_config(mut self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        self.config_path = Some(path.display().to_string());
        self.config_checksum = Some(sha256_hex(&bytes));
        Ok(self)
    }
}

struct OutputWriter {
    out_dir: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl OutputWriter {
    fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(OutputWriter { out_dir: out_dir.to_path_buf(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.artifacts.push(ArtifactEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.artifacts = self.artifacts;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.out_dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Out-dir resolution: explicit flag, then LOCALIST_OUT, then ./out.
pub fn resolve_out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os("LOCALIST_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Load a gen output directory and verify the dataset belongs to the
/// partition it sits beside.
pub fn load_data_dir(dir: &Path) -> Result<(BlockPartition, EmbeddingTable, TaskConfig, Vec<PointerSample>, String)> {
    let partition_text = std::fs::read_to_string(dir.join("partition.json"))?;
    let (partition, embeddings) = partition_from_json(&partition_text)?;
    let checksum = partition_checksum(&partition, &embeddings);
    let dataset_text = std::fs::read_to_string(dir.join("dataset.jsonl"))?;
    let (task, header_checksum, dataset) = dataset_from_jsonl(&dataset_text)?;
    if header_checksum != checksum {
        return Err(Error::ChecksumMismatch(format!(
            "dataset was generated against partition {header_checksum}, directory holds {checksum}"
        )));
    }
    Ok((partition, embeddings, task, dataset, checksum))
}

fn report_error(err: &Error) -> i32 {
    eprintln!("error: {err}");
    err.exit_code()
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub struct GenArgs<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
}

pub fn cmd_gen(args: &GenArgs) -> i32 {
    match run_gen(args) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let config = load_config(args.config)?;
    let ptab = config.partition_table()?;
    let ttab = config.task_table()?;
    let partition_seed = args.seed.unwrap_or(ptab.seed);
    let task_seed = args
        .seed
        .map(|s| RngState::derive_seed(s, 1))
        .unwrap_or(ttab.seed);
    let spec = PartitionSpec {
        blocks: ptab.blocks,
        anchors_per_block: ptab.anchors_per_block,
        fillers_per_block: ptab.fillers_per_block,
        d_per_block: ptab.d_per_block,
    };
    let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(partition_seed))?;
    let task = ttab.to_task_config(task_seed);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;
    let checksum = partition_checksum(&partition, &embeddings);

    let mut writer = OutputWriter::new(args.out)?;
    writer.write("partition.json", &partition_to_json(&partition, &embeddings))?;
    writer.write("dataset.jsonl", &dataset_to_jsonl(&task, &checksum, &dataset))?;
    let mut manifest = RunManifest::new("gen", args.out).with_config(args.config)?;
    manifest.seed = Some(partition_seed);
    writer.finish(manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub preset: Option<&'a str>,
    pub rules: Option<&'a Path>,
    pub watch_rules: bool,
    pub seed: Option<u64>,
}

/// Re-reads a rules file at checkpoint boundaries, recompiling whenever
/// the content hash changes. Touching the file without changing bytes
/// injects nothing.
struct RulesFileWatcher {
    path: PathBuf,
    last_hash: Option<String>,
    partition: BlockPartition,
    calibration: Calibration,
    policy: CompilePolicy,
}

impl RulesFileWatcher {
    fn compile_current(&mut self) -> Vec<CompiledConstraint> {
        let Ok(text) = std::fs::read_to_string(&self.path) else {
            return Vec::new();
        };
        let hash = sha256_hex(text.as_bytes());
        if self.last_hash.as_deref() == Some(hash.as_str()) {
            return Vec::new();
        }
        self.last_hash = Some(hash);
        match parse_rules(&text) {
            Ok(rules) => {
                let mut constraints = Vec::new();
                for rule in &rules {
                    match compile(rule, &self.partition, &self.calibration, &self.policy) {
                        Ok(c) => constraints.push(c),
                        Err(e) => eprintln!("warning: rule '{}' not compiled: {e}", rule.id),
                    }
                }
                constraints
            }
            Err(e) => {
                eprintln!("warning: rules file not reloaded: {e}");
                Vec::new()
            }
        }
    }
}

impl ConstraintSource for RulesFileWatcher {
    fn poll(&mut self, _step: u64) -> Vec<CompiledConstraint> {
        self.compile_current()
    }
}

/// Measure per-block c_prime on a calibration batch, floored away from
/// zero so the threshold formula stays defined.
pub fn calibrate(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    tau: f64,
) -> Result<Calibration> {
    let mut c_prime = std::collections::BTreeMap::new();
    for block in partition.block_ids() {
        let est = estimate_c_prime(model, batch, partition, embeddings, block)?;
        c_prime.insert(block.clone(), est.c_prime.max(1e-9));
    }
    Ok(Calibration { c_prime, tau })
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    match run_train(args) {
        Ok(status) => match status {
            TrainStatus::Completed => 0,
            TrainStatus::Diverged { .. } => 3,
        },
        Err(e) => report_error(&e),
    }
}

fn run_train(args: &TrainArgs) -> Result<TrainStatus> {
    let config = load_config(args.config)?;
    let mtab = config.model_table()?;
    let ttab = config.trainer_table()?;
    let (partition, embeddings, _task, dataset, _checksum) = load_data_dir(args.data)?;

    let regime = Regime::parse(args.preset.unwrap_or(&ttab.preset))?;
    let trainer_seed = args.seed.unwrap_or(ttab.seed);
    let model_seed = args
        .seed
        .map(|s| RngState::derive_seed(s, 2))
        .unwrap_or(mtab.seed);
    let trainer_config = ttab.to_trainer_config(regime, trainer_seed);
    let dial = trainer_config.effective_dial(mtab.heads, partition.p())?;
    let model_config = mtab.to_model_config(dial.tau);
    let model = init_anchor_aligned(&model_config, &partition, &embeddings, &mut RngState::from_seed(model_seed))?;

    let mut state = init_state(&trainer_config, model, &partition, &embeddings)?;
    let preset_dial_snapshot = state.dial.clone();
    let mut log: Vec<LogEntry> = Vec::new();

    // compile any initial rules against the starting model and inject at
    // the step-0 boundary; a bad rules file at startup is an input error,
    // while later reload failures only warn so the run stays alive
    let calibration_batch = &dataset[..config.compile.calibration_samples.min(dataset.len())];
    let mut watcher = match args.rules {
        Some(path) => {
            let calibration = calibrate(&state.model, calibration_batch, &partition, &embeddings, state.dial.tau)?;
            let mut policy = CompilePolicy::all_heads(mtab.heads);
            policy.safety_factor = config.compile.safety_factor;
            policy.floor = config.compile.floor;
            policy.delta_policy = config.compile.delta_policy();
            let text = std::fs::read_to_string(path)?;
            let rules = parse_rules(&text)?;
            let initial: Vec<CompiledConstraint> = rules
                .iter()
                .map(|rule| compile(rule, &partition, &calibration, &policy))
                .collect::<Result<_>>()?;
            if !initial.is_empty() {
                let events = hot_reload(&mut state, &initial, &partition, trainer_config.checkpoint_every)?;
                log.extend(events);
            }
            Some(RulesFileWatcher {
                path: path.to_path_buf(),
                last_hash: Some(sha256_hex(text.as_bytes())),
                partition: partition.clone(),
                calibration,
                policy,
            })
        }
        None => None,
    };

    let mut writer = OutputWriter::new(args.out)?;
    let mut status = TrainStatus::Completed;
    while state.step < trainer_config.steps {
        let chunk = trainer_config
            .checkpoint_every
            .min(trainer_config.steps - state.step);
        let source: Option<&mut dyn ConstraintSource> = if args.watch_rules {
            watcher.as_mut().map(|w| w as &mut dyn ConstraintSource)
        } else {
            None
        };
        let outcome = resume(state, &trainer_config, &dataset, &partition, &embeddings, source, chunk)?;
        state = outcome.state;
        log.extend(outcome.log);
        if state.step % trainer_config.checkpoint_every == 0 {
            let name = format!("checkpoints/step_{:06}.json", state.step);
            writer.write(&name, &crate::trainer::checkpoint_to_json(&state))?;
        }
        if let TrainStatus::Diverged { step, loss } = outcome.status {
            status = TrainStatus::Diverged { step, loss };
            eprintln!("error: training diverged at step {step} (loss {loss})");
            break;
        }
    }

    writer.write("metrics.jsonl", &log_to_jsonl(&log))?;
    writer.write("checkpoint_final.json", &crate::trainer::checkpoint_to_json(&state))?;
    let mut manifest = RunManifest::new("train", args.out).with_config(args.config)?;
    manifest.seed = Some(trainer_seed);
    manifest.dial = Some(preset_dial_snapshot);
    writer.finish(manifest)?;
    Ok(status)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub struct SweepArgs<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub alphas: Option<Vec<f64>>,
    pub taus: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub tau: f64,
    pub delta_measured_min: f64,
    pub delta_measured_mean: f64,
    pub entropy_mean: f64,
    pub fidelity_mean: f64,
    pub off_block_mass: f64,
    pub off_block_groups_zero: bool,
    pub kkt_violations: usize,
    pub status: String,
}

pub fn cmd_sweep(args: &SweepArgs) -> i32 {
    match run_sweep(args) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn default_alphas(regime: Regime) -> Vec<f64> {
    match regime {
        Regime::Localist => vec![10.0],
        Regime::Distributed => vec![0.01],
        // intermediate mode spans alpha in [0.1, 5]
        Regime::Intermediate => vec![0.1, 0.5, 1.0, 2.0, 5.0],
        Regime::Custom => vec![0.01, 0.1, 1.0, 10.0],
    }
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let config = load_config(args.config)?;
    let ptab = config.partition_table()?;
    let ttab = config.task_table()?;
    let mtab = config.model_table()?;
    let trtab = config.trainer_table()?;
    let regime = Regime::parse(&trtab.preset)?;
    let base_dial = crate::trainer::preset_dial(
        if regime == Regime::Custom { Regime::Intermediate } else { regime },
        mtab.heads,
        ptab.blocks,
    )?;

    let spec = PartitionSpec {
        blocks: ptab.blocks,
        anchors_per_block: ptab.anchors_per_block,
        fillers_per_block: ptab.fillers_per_block,
        d_per_block: ptab.d_per_block,
    };
    let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(ptab.seed))?;
    let task = ttab.to_task_config(ttab.seed);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;

    let alphas = args.alphas.clone().unwrap_or_else(|| default_alphas(regime));
    let taus = args.taus.clone().unwrap_or_else(|| vec![base_dial.tau]);
    if alphas.is_empty() || taus.is_empty() {
        return Err(Error::InvalidParameter("sweep grid must be nonempty".into()));
    }
    // deduplicate grid points
    let mut seen: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut grid: Vec<(f64, f64)> = Vec::new();
    for &alpha in &alphas {
        for &tau in &taus {
            if seen.insert((alpha.to_bits(), tau.to_bits())) {
                grid.push((alpha, tau));
            } else {
                eprintln!("warning: duplicate grid point (alpha={alpha}, tau={tau}) skipped");
            }
        }
    }

    let base_seed = args.seed.unwrap_or(trtab.seed);
    let mut rows = Vec::new();
    for &(alpha, tau) in &grid {
        let stream = alpha.to_bits() ^ tau.to_bits().rotate_left(17);
        let run_seed = RngState::derive_seed(base_seed, stream);
        let row = sweep_point(
            &partition, &embeddings, &dataset, mtab, trtab, &base_dial, alpha, tau, run_seed,
        )?;
        rows.push(row);
    }

    let mut csv = String::from(
        "alpha,tau,delta_measured_min,delta_measured_mean,entropy_mean,fidelity_mean,off_block_mass,off_block_groups_zero,kkt_violations,status\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.tau,
            r.delta_measured_min,
            r.delta_measured_mean,
            r.entropy_mean,
            r.fidelity_mean,
            r.off_block_mass,
            r.off_block_groups_zero,
            r.kkt_violations,
            r.status
        );
    }
    let mut writer = OutputWriter::new(args.out)?;
    writer.write("sweep.csv", &csv)?;
    let mut manifest = RunManifest::new("sweep", args.out).with_config(args.config)?;
    manifest.seed = Some(base_seed);
    writer.finish(manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep_point(
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dataset: &[PointerSample],
    mtab: &ModelTable,
    trtab: &TrainerTable,
    base_dial: &DialSettings,
    alpha: f64,
    tau: f64,
    run_seed: u64,
) -> Result<SweepRow> {
    let mut dial = base_dial.clone();
    dial.tau = tau;
    for (h, row) in dial.alpha.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = if dial.designated[h] == Some(b) { 0.0 } else { alpha };
        }
    }
    let trainer_config = TrainerConfig {
        step_size: trtab.step_size,
        steps: trtab.steps,
        batch_size: trtab.batch_size,
        seed: run_seed,
        checkpoint_every: trtab.checkpoint_every,
        eval_samples: trtab.eval_samples,
        regime_preset: Regime::Custom,
        dial: Some(dial),
    };
    let model_config = mtab.to_model_config(tau);
    let model = init_anchor_aligned(
        &model_config,
        partition,
        embeddings,
        &mut RngState::from_seed(RngState::derive_seed(run_seed, 2)),
    )?;
    let outcome = crate::trainer::train(&trainer_config, model, dataset, partition, embeddings, None)?;
    if let TrainStatus::Diverged { .. } = outcome.status {
        return Ok(SweepRow {
            alpha,
            tau,
            delta_measured_min: f64::NAN,
            delta_measured_mean: f64::NAN,
            entropy_mean: f64::NAN,
            fidelity_mean: f64::NAN,
            off_block_mass: f64::NAN,
            off_block_groups_zero: false,
            kkt_violations: 0,
            status: "diverged".to_string(),
        });
    }
    let record = crate::trainer::evaluate_metrics(&outcome.state, &trainer_config, dataset, partition, embeddings)?;
    Ok(SweepRow {
        alpha,
        tau,
        delta_measured_min: record.margin_active_min,
        delta_measured_mean: record.margin_active_mean,
        entropy_mean: record.entropy_active_mean,
        fidelity_mean: record.fidelity_active_mean,
        off_block_mass: record.leakage_mean,
        off_block_groups_zero: record.off_designated_groups_zero,
        kkt_violations: record.kkt_zero_violated,
        status: "ok".to_string(),
    })
}

// ---------------------------------------------------------------------------
// check-bounds
// ---------------------------------------------------------------------------

pub struct CheckBoundsArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub delta: Option<f64>,
}

pub fn cmd_check_bounds(args: &CheckBoundsArgs) -> i32 {
    match run_check_bounds(args) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => report_error(&e),
    }
}

fn run_check_bounds(args: &CheckBoundsArgs) -> Result<bool> {
    let (partition, embeddings, _task, dataset, checksum) = load_data_dir(args.data)?;
    let state = load_checkpoint(args.model, Some(&checksum))?;
    let designations = state.dial.designations();
    let evals = evaluate_dataset(&state.model, &dataset, &partition, &embeddings, Some(&designations))?;
    let deltas: Vec<f64> = match args.delta {
        Some(d) => vec![d; partition.p()],
        None => state.dial.delta_target.clone(),
    };
    let rows = bound_rows(&evals, &deltas, state.model.tau());

    let mut csv = String::from(
        "sample,head,h_t,log_anchor_count,cor1_bound,cor1_pass,fidelity,cor2_bound,cor2_pass,per_key_ratio,step4_bound,step4_per_key_pass,step4_block_sum_pass,margin,premise_ok\n",
    );
    let mut all_pass = true;
    for r in &rows {
        if r.premise_ok && !r.step4_per_key_pass {
            all_pass = false;
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.sample_index,
            r.head,
            r.h_t,
            r.log_anchor_count,
            r.cor1_bound,
            r.cor1_pass,
            r.fidelity,
            r.cor2_bound,
            r.cor2_pass,
            r.per_key_ratio,
            r.step4_bound,
            r.step4_per_key_pass,
            r.step4_block_sum_pass,
            r.margin,
            r.premise_ok
        );
    }
    let mut writer = OutputWriter::new(args.out)?;
    writer.write("bounds.csv", &csv)?;
    let manifest = RunManifest::new("check-bounds", args.out);
    writer.finish(manifest)?;
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub struct VerifyArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub rules: &'a Path,
    pub out: &'a Path,
    pub target_rate: Option<f64>,
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    match run_verify(args) {
        Ok(all_meet) => {
            if all_meet {
                0
            } else {
                1
            }
        }
        Err(e) => report_error(&e),
    }
}

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let rules_text = std::fs::read_to_string(args.rules)?;
    let rules = parse_rules(&rules_text)?;
    let (partition, embeddings, _task, dataset, checksum) = load_data_dir(args.data)?;
    let state = load_checkpoint(args.model, Some(&checksum))?;
    let designations = state.dial.designations();
    let evals = evaluate_dataset(&state.model, &dataset, &partition, &embeddings, Some(&designations))?;
    let verdicts = verdicts_from_evals(&evals, &dataset, &rules, &partition)?;
    let report = compliance_report(&verdicts, (0, dataset.len() as u64))?;
    let target = args.target_rate.unwrap_or(0.95);
    let all_meet = report.per_rule.iter().all(|r| r.rate >= target);

    let mut writer = OutputWriter::new(args.out)?;
    writer.write("verdicts.jsonl", &verdicts_to_jsonl(&verdicts))?;
    writer.write(
        "compliance.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let manifest = RunManifest::new("verify", args.out);
    writer.finish(manifest)?;
    Ok(all_meet)
}

// ---------------------------------------------------------------------------
// compile-rules
// ---------------------------------------------------------------------------

pub struct CompileRulesArgs<'a> {
    pub config: &'a Path,
    pub rules: &'a Path,
    pub data: &'a Path,
    pub model: Option<&'a Path>,
    pub out: &'a Path,
    pub tau: Option<f64>,
}

pub fn cmd_compile_rules(args: &CompileRulesArgs) -> i32 {
    match run_compile_rules(args) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn run_compile_rules(args: &CompileRulesArgs) -> Result<()> {
    let config = load_config(args.config)?;
    let rules_text = std::fs::read_to_string(args.rules)?;
    let rules = parse_rules(&rules_text)?;
    let (partition, embeddings, _task, dataset, checksum) = load_data_dir(args.data)?;

    let (model, tau, heads) = match args.model {
        Some(path) => {
            let state = load_checkpoint(path, Some(&checksum))?;
            let tau = args.tau.unwrap_or(state.dial.tau);
            let heads = state.model.heads();
            (state.model, tau, heads)
        }
        None => {
            let mtab = config.model_table()?;
            let regime = config
                .trainer
                .as_ref()
                .map(|t| Regime::parse(&t.preset))
                .transpose()?
                .unwrap_or(Regime::Localist);
            let dial = crate::trainer::preset_dial(regime, mtab.heads, partition.p())?;
            let tau = args.tau.unwrap_or(dial.tau);
            let model_config = mtab.to_model_config(tau);
            let model = init_anchor_aligned(
                &model_config,
                &partition,
                &embeddings,
                &mut RngState::from_seed(mtab.seed),
            )?;
            (model, tau, mtab.heads)
        }
    };
    let batch = &dataset[..config.compile.calibration_samples.min(dataset.len())];
    let calibration = calibrate(&model, batch, &partition, &embeddings, tau)?;
    let mut policy = CompilePolicy::all_heads(heads);
    policy.safety_factor = config.compile.safety_factor;
    policy.floor = config.compile.floor;
    policy.delta_policy = config.compile.delta_policy();

    let mut constraints = Vec::new();
    for rule in &rules {
        constraints.push(compile(rule, &partition, &calibration, &policy)?);
    }
    let mut writer = OutputWriter::new(args.out)?;
    writer.write("constraints.json", &constraints_to_json(&constraints))?;
    writer.write(
        "calibration.json",
        &serde_json::to_string_pretty(&calibration).expect("calibration serializes"),
    )?;
    let manifest = RunManifest::new("compile-rules", args.out).with_config(args.config)?;
    writer.finish(manifest)?;
    Ok(())
}
