//! Deterministic proximal-gradient training: forward step on the smooth
//! objective, block soft-threshold on the grouped Q/K rows, metrics at
//! checkpoint boundaries, constraint injection without restart, and
//! lossless checkpointing.
//!
//! Everything a run does is a function of (config, dataset, partition,
//! seed): batches are drawn from the run's own rng stream, metrics carry
//! step stamps rather than wall time, and checkpoints capture the rng
//! words exactly, so a resumed run reproduces the original bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{evaluate_dataset, AttentionModel, HeadWeights};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::objective::{kkt_check, loss_and_grad, prox_group, DialSettings, LossBreakdown};
use crate::partition::{BlockPartition, EmbeddingTable};
use crate::rules::CompiledConstraint;
use crate::taskgen::PointerSample;

/// The locality regimes; presets expand to the dial values below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Localist,
    Distributed,
    Intermediate,
    Custom,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "localist" => Ok(Regime::Localist),
            "distributed" => Ok(Regime::Distributed),
            "intermediate" => Ok(Regime::Intermediate),
            "custom" => Ok(Regime::Custom),
            other => Err(Error::InvalidParameter(format!("unknown regime preset '{other}'"))),
        }
    }
}

/// Expand a regime preset into dial settings. Heads take designated blocks
/// round-robin; the preset's alpha lands on every off-designated group and
/// designated groups are exempt, which is what makes "off-block groups go
/// to zero" a well-defined, testable outcome.
pub fn preset_dial(regime: Regime, heads: usize, blocks: usize) -> Result<DialSettings> {
    let (alpha, tau, delta) = match regime {
        Regime::Localist => (10.0, 0.1, 2.0),
        Regime::Distributed => (0.01, 1.0, 0.1),
        Regime::Intermediate => (1.0, 0.5, 1.0),
        Regime::Custom => {
            return Err(Error::InvalidParameter(
                "custom regime needs explicit dial settings".into(),
            ))
        }
    };
    let designated: Vec<Option<usize>> = (0..heads).map(|h| Some(h % blocks)).collect();
    let alpha_matrix: Vec<Vec<f64>> = (0..heads)
        .map(|h| {
            (0..blocks)
                .map(|b| if designated[h] == Some(b) { 0.0 } else { alpha })
                .collect()
        })
        .collect();
    Ok(DialSettings {
        alpha: alpha_matrix,
        beta: 1e-4,
        tau,
        delta_target: vec![delta; blocks],
        designated,
    })
}

/// Training-loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub step_size: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Leading slice of the dataset used for checkpoint metrics.
    pub eval_samples: usize,
    pub regime_preset: Regime,
    /// Explicit dial; required for the custom regime, overrides the preset
    /// otherwise.
    pub dial: Option<DialSettings>,
}

impl TrainerConfig {
    pub fn effective_dial(&self, heads: usize, blocks: usize) -> Result<DialSettings> {
        let dial = match (&self.dial, self.regime_preset) {
            (Some(dial), _) => dial.clone(),
            (None, regime) => preset_dial(regime, heads, blocks)?,
        };
        dial.validate(heads, blocks)?;
        Ok(dial)
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidParameter("step_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidParameter("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-head metric means over the eval slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub entropy_mean: f64,
    pub fidelity_mean: f64,
    pub margin_mean: f64,
    pub margin_min: f64,
}

/// One checkpoint's measurements. "Active" means the (query, head) pairs
/// whose head is designated to the query's governing block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub entropy_active_mean: f64,
    pub fidelity_active_mean: f64,
    pub margin_active_mean: f64,
    pub margin_active_min: f64,
    /// Mean off-governing-block mass over every (query, head).
    pub leakage_mean: f64,
    /// Same leakage split by the query's governing block.
    pub leakage_by_governing_block: Vec<f64>,
    /// Readout accuracy split by the query's governing block.
    pub compliance_by_governing_block: Vec<f64>,
    pub per_head: Vec<HeadMetrics>,
    pub kkt_zero_violated: usize,
    pub exact_zero_groups: usize,
    pub off_designated_groups_zero: bool,
    /// Fraction of eval queries whose argmax readout equals the label.
    pub compliance: f64,
}

/// Stream entries: metrics records interleaved with injection events, all
/// step-stamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LogEntry {
    Metrics(MetricsRecord),
    Injection(InjectionEvent),
    InjectionRejected(RejectionEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    pub step: u64,
    pub rule_id: String,
    pub rule_version: u64,
    pub target_block: String,
    pub delta: f64,
    pub affected_heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionEvent {
    pub step: u64,
    pub rule_id: String,
    pub reason: String,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: AttentionModel,
    pub dial: DialSettings,
    pub step: u64,
    pub rng: RngState,
    pub metrics_cursor: u64,
    pub partition_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TrainStatus {
    Completed,
    Diverged { step: u64, loss: f64 },
}

pub struct TrainOutcome {
    pub state: TrainingState,
    pub log: Vec<LogEntry>,
    pub status: TrainStatus,
}

/// Source of compiled constraints, polled only at checkpoint boundaries.
pub trait ConstraintSource {
    fn poll(&mut self, step: u64) -> Vec<CompiledConstraint>;
}

/// Feed with a fixed injection schedule; used by tests and examples.
pub struct ScheduledConstraints {
    schedule: Vec<(u64, Vec<CompiledConstraint>)>,
}

impl ScheduledConstraints {
    pub fn new(mut schedule: Vec<(u64, Vec<CompiledConstraint>)>) -> Self {
        schedule.sort_by_key(|(step, _)| *step);
        ScheduledConstraints { schedule }
    }
}

impl ConstraintSource for ScheduledConstraints {
    fn poll(&mut self, step: u64) -> Vec<CompiledConstraint> {
        let mut due = Vec::new();
        self.schedule.retain(|(at, constraints)| {
            if *at <= step {
                due.extend(constraints.clone());
                false
            } else {
                true
            }
        });
        due
    }
}

/// Fresh training state at step 0: dial expanded from the config, the
/// model's temperature set from the dial, rng seeded, nothing stepped yet.
pub fn init_state(
    config: &TrainerConfig,
    model: AttentionModel,
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
) -> Result<TrainingState> {
    config.validate()?;
    let dial = config.effective_dial(model.heads(), partition.p())?;
    let mut model = model;
    model.set_tau(dial.tau)?;
    Ok(TrainingState {
        model,
        dial,
        step: 0,
        rng: RngState::from_seed(config.seed),
        metrics_cursor: 0,
        partition_checksum: crate::partition::partition_checksum(partition, embeddings),
    })
}

/// Start a fresh run from an initial model.
pub fn train(
    config: &TrainerConfig,
    model: AttentionModel,
    dataset: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    source: Option<&mut dyn ConstraintSource>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("train: empty dataset".into()));
    }
    let mut state = init_state(config, model, partition, embeddings)?;
    let mut log = Vec::new();
    let status = run_steps(
        &mut state,
        config,
        dataset,
        partition,
        embeddings,
        source,
        config.steps,
        &mut log,
    )?;
    Ok(TrainOutcome { state, log, status })
}

/// Continue a (possibly reloaded) run for `additional_steps` more steps.
pub fn resume(
    mut state: TrainingState,
    config: &TrainerConfig,
    dataset: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    source: Option<&mut dyn ConstraintSource>,
    additional_steps: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let expected = crate::partition::partition_checksum(partition, embeddings);
    if expected != state.partition_checksum {
        return Err(Error::ChecksumMismatch(format!(
            "checkpoint was trained against partition {} but the loaded partition is {expected}",
            state.partition_checksum
        )));
    }
    let mut log = Vec::new();
    let status = run_steps(
        &mut state,
        config,
        dataset,
        partition,
        embeddings,
        source,
        additional_steps,
        &mut log,
    )?;
    Ok(TrainOutcome { state, log, status })
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    state: &mut TrainingState,
    config: &TrainerConfig,
    dataset: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    mut source: Option<&mut dyn ConstraintSource>,
    steps: u64,
    log: &mut Vec<LogEntry>,
) -> Result<TrainStatus> {
    let groups: Vec<(usize, usize)> = partition.slices().iter().map(|s| (s.start, s.end)).collect();
    let until = state.step + steps;
    while state.step < until {
        // deterministic batch draw from the run's own stream
        let batch: Vec<PointerSample> = (0..config.batch_size.min(dataset.len()))
            .map(|_| dataset[state.rng.next_below(dataset.len() as u64) as usize].clone())
            .collect();
        let (breakdown, grads) =
            loss_and_grad(&state.model, &batch, partition, embeddings, &state.dial)?;
        // divergence guard reads the task loss: the group penalty is a dial
        // setting and may be legitimately enormous
        if !breakdown.total.is_finite() || breakdown.task_loss > 1e6 {
            return Ok(TrainStatus::Diverged { step: state.step, loss: breakdown.task_loss });
        }
        for h in 0..state.model.heads() {
            let thresholds: Vec<f64> = state.dial.alpha[h]
                .iter()
                .map(|a| a * config.step_size)
                .collect();
            let head = state.model.head_mut(h);
            head.w_q.add_scaled(&grads.w_q[h], -config.step_size);
            head.w_k.add_scaled(&grads.w_k[h], -config.step_size);
            head.w_v.add_scaled(&grads.w_v[h], -config.step_size);
            head.w_q = prox_group(&head.w_q, &groups, &thresholds)?;
            head.w_k = prox_group(&head.w_k, &groups, &thresholds)?;
        }
        state
            .model
            .readout_mut()
            .add_scaled(&grads.readout, -config.step_size);
        state.step += 1;

        if state.step % config.checkpoint_every == 0 {
            let record = evaluate_metrics(state, config, dataset, partition, embeddings)?;
            log.push(LogEntry::Metrics(record));
            state.metrics_cursor += 1;
            if let Some(src) = source.as_mut() {
                let constraints = src.poll(state.step);
                if !constraints.is_empty() {
                    let events =
                        hot_reload(state, &constraints, partition, config.checkpoint_every)?;
                    log.extend(events);
                }
            }
        }
    }
    Ok(TrainStatus::Completed)
}

/// Measure one checkpoint on the leading eval slice of the dataset.
pub fn evaluate_metrics(
    state: &TrainingState,
    config: &TrainerConfig,
    dataset: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
) -> Result<MetricsRecord> {
    let eval = &dataset[..config.eval_samples.min(dataset.len()).max(1)];
    let designations = state.dial.designations();
    let evals = evaluate_dataset(&state.model, eval, partition, embeddings, Some(&designations))?;
    let loss = crate::objective::loss(&state.model, eval, partition, embeddings, &state.dial)?;

    let mut active = MeanAcc::default();
    let mut active_margin_min = f64::INFINITY;
    let mut leak = MeanAcc::default();
    let mut leak_by_block: Vec<MeanAcc> = vec![MeanAcc::default(); partition.p()];
    let mut correct_by_block: Vec<(usize, usize)> = vec![(0, 0); partition.p()];
    let mut per_head: Vec<(MeanAcc, f64)> = vec![(MeanAcc::default(), f64::INFINITY); state.model.heads()];
    let mut correct = 0usize;
    for eval in &evals {
        if eval.predicted == eval.label {
            correct += 1;
            correct_by_block[eval.governing_block].0 += 1;
        }
        correct_by_block[eval.governing_block].1 += 1;
        for obs in &eval.heads {
            leak.push3(obs.off_block_mass, 0.0, 0.0);
            leak_by_block[eval.governing_block].push3(obs.off_block_mass, 0.0, 0.0);
            let (acc, min_margin) = &mut per_head[obs.head];
            acc.push3(obs.entropy, obs.fidelity, obs.margin);
            *min_margin = min_margin.min(obs.margin);
            if obs.active {
                active.push3(obs.entropy, obs.fidelity, obs.margin);
                active_margin_min = active_margin_min.min(obs.margin);
            }
        }
    }
    let kkt = kkt_check(&state.model, eval, partition, embeddings, &state.dial, 1e-6)?;
    let (zero_groups, off_zero) = group_zero_summary(&state.model, partition, &designations);
    Ok(MetricsRecord {
        step: state.step,
        loss,
        entropy_active_mean: active.mean(0),
        fidelity_active_mean: active.mean(1),
        margin_active_mean: active.mean(2),
        margin_active_min: if active_margin_min.is_finite() { active_margin_min } else { 0.0 },
        leakage_mean: leak.mean(0),
        leakage_by_governing_block: leak_by_block.iter().map(|acc| acc.mean(0)).collect(),
        compliance_by_governing_block: correct_by_block
            .iter()
            .map(|&(ok, total)| if total == 0 { 0.0 } else { ok as f64 / total as f64 })
            .collect(),
        per_head: per_head
            .into_iter()
            .map(|(acc, min_margin)| HeadMetrics {
                entropy_mean: acc.mean(0),
                fidelity_mean: acc.mean(1),
                margin_mean: acc.mean(2),
                margin_min: if min_margin.is_finite() { min_margin } else { 0.0 },
            })
            .collect(),
        kkt_zero_violated: kkt.zero_violated(),
        exact_zero_groups: zero_groups,
        off_designated_groups_zero: off_zero,
        compliance: correct as f64 / evals.len() as f64,
    })
}

#[derive(Default, Clone)]
struct MeanAcc {
    sums: [f64; 3],
    count: usize,
}

impl MeanAcc {
    fn push3(&mut self, a: f64, b: f64, c: f64) {
        self.sums[0] += a;
        self.sums[1] += b;
        self.sums[2] += c;
        self.count += 1;
    }

    fn mean(&self, idx: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sums[idx] / self.count as f64
        }
    }
}

/// Count exactly-zero (head, block, projection) groups and whether every
/// off-designated group is zero.
pub fn group_zero_summary(
    model: &AttentionModel,
    partition: &BlockPartition,
    designations: &[usize],
) -> (usize, bool) {
    let mut zero_groups = 0usize;
    let mut off_zero = true;
    for h in 0..model.heads() {
        for b in 0..partition.p() {
            let slice = partition.slice(b);
            for w in [&model.head(h).w_q, &model.head(h).w_k] {
                let norm = w.frobenius_rows(slice.start, slice.end);
                if norm == 0.0 {
                    zero_groups += 1;
                } else if designations.get(h) != Some(&b) {
                    off_zero = false;
                }
            }
        }
    }
    (zero_groups, off_zero)
}

/// Inference-time dial application: a new snapshot with the dial's
/// temperature; weights untouched. Subsequent training, prox thresholds,
/// and bound checks read the dial itself.
pub fn apply_dial(model: &AttentionModel, dial: &DialSettings) -> Result<AttentionModel> {
    if !(dial.tau > 0.0) {
        return Err(Error::InvalidParameter(format!("dial tau must be positive, got {}", dial.tau)));
    }
    let mut out = model.clone();
    out.set_tau(dial.tau)?;
    Ok(out)
}

/// Apply compiled constraints to a paused run. Only dial parameters move:
/// the step counter, rng stream, and weights are untouched. A constraint
/// naming an unknown block or head is rejected whole, leaving the state
/// unchanged, with the rejection logged.
pub fn hot_reload(
    state: &mut TrainingState,
    constraints: &[CompiledConstraint],
    partition: &BlockPartition,
    checkpoint_every: u64,
) -> Result<Vec<LogEntry>> {
    if state.step % checkpoint_every != 0 {
        return Err(Error::InvalidParameter(format!(
            "hot_reload may only run at a checkpoint boundary (step {} with cadence {checkpoint_every})",
            state.step
        )));
    }
    let mut events = Vec::new();
    for constraint in constraints {
        match validate_constraint(constraint, partition, state.model.heads()) {
            Ok(target_idx) => {
                for update in &constraint.alpha_updates {
                    let b = partition.block_index(&update.block).expect("validated");
                    state.dial.alpha[update.head][b] = update.alpha;
                }
                state.dial.delta_target[target_idx] = constraint.delta;
                events.push(LogEntry::Injection(InjectionEvent {
                    step: state.step,
                    rule_id: constraint.rule_id.clone(),
                    rule_version: constraint.rule_version,
                    target_block: constraint.target_block.clone(),
                    delta: constraint.delta,
                    affected_heads: constraint.affected_heads.clone(),
                }));
            }
            Err(reason) => {
                events.push(LogEntry::InjectionRejected(RejectionEvent {
                    step: state.step,
                    rule_id: constraint.rule_id.clone(),
                    reason,
                }));
            }
        }
    }
    Ok(events)
}

fn validate_constraint(
    constraint: &CompiledConstraint,
    partition: &BlockPartition,
    heads: usize,
) -> std::result::Result<usize, String> {
    let target_idx = partition
        .block_index(&constraint.target_block)
        .map_err(|_| format!("unknown target block '{}'", constraint.target_block))?;
    for update in &constraint.alpha_updates {
        if update.head >= heads {
            return Err(format!("head {} out of range (model has {heads})", update.head));
        }
        if partition.block_index(&update.block).is_err() {
            return Err(format!("unknown block '{}'", update.block));
        }
        if !update.alpha.is_finite() || update.alpha < 0.0 {
            return Err(format!("alpha update for block '{}' is invalid", update.block));
        }
    }
    for &head in &constraint.affected_heads {
        if head >= heads {
            return Err(format!("affected head {head} out of range"));
        }
    }
    Ok(target_idx)
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: versioned JSON, matrices as nested arrays with
// every float printed to 17 significant digits so reload is bit-exact.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_SCHEMA: &str = "localist.checkpoint";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        return "1e999".to_string();
    }
    if v == f64::NEG_INFINITY {
        return "-1e999".to_string();
    }
    format!("{v:.16e}")
}

fn write_f64_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

fn write_matrix(out: &mut String, m: &Matrix) {
    out.push('[');
    for r in 0..m.rows() {
        if r > 0 {
            out.push(',');
        }
        write_f64_array(out, m.row(r));
    }
    out.push(']');
}

/// Render a checkpoint document.
pub fn checkpoint_to_json(state: &TrainingState) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"schema\":\"{CHECKPOINT_SCHEMA}\",\"version\":{CHECKPOINT_SCHEMA_VERSION},\"step\":{},\"metrics_cursor\":{},\"partition_checksum\":\"{}\",",
        state.step, state.metrics_cursor, state.partition_checksum
    );
    let rng = serde_json::to_string(&state.rng).expect("rng serializes");
    let _ = write!(out, "\"rng\":{rng},");
    // dial: floats at 17 digits
    out.push_str("\"dial\":{\"alpha\":[");
    for (h, row) in state.dial.alpha.iter().enumerate() {
        if h > 0 {
            out.push(',');
        }
        write_f64_array(&mut out, row);
    }
    let _ = write!(out, "],\"beta\":{},\"tau\":{},", fmt_f64(state.dial.beta), fmt_f64(state.dial.tau));
    out.push_str("\"delta_target\":");
    write_f64_array(&mut out, &state.dial.delta_target);
    out.push_str(",\"designated\":[");
    for (h, d) in state.dial.designated.iter().enumerate() {
        if h > 0 {
            out.push(',');
        }
        match d {
            Some(b) => {
                let _ = write!(out, "{b}");
            }
            None => out.push_str("null"),
        }
    }
    out.push_str("]},");
    // model
    let _ = write!(out, "\"model\":{{\"tau\":{},\"heads\":[", fmt_f64(state.model.tau()));
    for h in 0..state.model.heads() {
        if h > 0 {
            out.push(',');
        }
        let head = state.model.head(h);
        out.push_str("{\"w_q\":");
        write_matrix(&mut out, &head.w_q);
        out.push_str(",\"w_k\":");
        write_matrix(&mut out, &head.w_k);
        out.push_str(",\"w_v\":");
        write_matrix(&mut out, &head.w_v);
        out.push('}');
    }
    out.push_str("],\"readout\":");
    write_matrix(&mut out, state.model.readout());
    out.push_str("}}");
    out
}

#[derive(Deserialize)]
struct CheckpointDoc {
    schema: String,
    version: u32,
    step: u64,
    metrics_cursor: u64,
    partition_checksum: String,
    rng: RngState,
    dial: DialSettings,
    model: ModelDoc,
}

#[derive(Deserialize)]
struct ModelDoc {
    tau: f64,
    heads: Vec<HeadDoc>,
    readout: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct HeadDoc {
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
}

pub fn checkpoint_from_json(text: &str) -> Result<TrainingState> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.schema != CHECKPOINT_SCHEMA {
        return Err(Error::InvalidInput(format!(
            "expected schema '{CHECKPOINT_SCHEMA}', found '{}'",
            doc.schema
        )));
    }
    if doc.version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint version {}",
            doc.version
        )));
    }
    let heads: Vec<HeadWeights> = doc
        .model
        .heads
        .into_iter()
        .map(|h| {
            Ok(HeadWeights {
                w_q: Matrix::from_rows(h.w_q)?,
                w_k: Matrix::from_rows(h.w_k)?,
                w_v: Matrix::from_rows(h.w_v)?,
            })
        })
        .collect::<Result<_>>()?;
    let readout = Matrix::from_rows(doc.model.readout)?;
    let model = AttentionModel::from_parts(heads, readout, doc.model.tau)?;
    Ok(TrainingState {
        model,
        dial: doc.dial,
        step: doc.step,
        rng: doc.rng,
        metrics_cursor: doc.metrics_cursor,
        partition_checksum: doc.partition_checksum,
    })
}

pub fn save_checkpoint(state: &TrainingState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(state))?;
    Ok(())
}

/// Load a checkpoint; with an expected partition checksum it refuses a
/// mismatched file. A corrupt file fails cleanly with no partial state.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_checksum: Option<&str>) -> Result<TrainingState> {
    let text = std::fs::read_to_string(path)?;
    let state = checkpoint_from_json(&text)?;
    if let Some(expected) = expected_checksum {
        if expected != state.partition_checksum {
            return Err(Error::ChecksumMismatch(format!(
                "checkpoint was trained against partition {}, expected {expected}",
                state.partition_checksum
            )));
        }
    }
    Ok(state)
}

/// Serialize a training log as JSON lines.
pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<LogEntry>> {
    let mut log = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        log.push(serde_json::from_str(line)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{init_anchor_aligned, ModelConfig};
    use crate::partition::{build_partition, PartitionSpec};
    use crate::rules::{AlphaUpdate, CompiledConstraint};
    use crate::taskgen::{generate, TaskConfig};

    fn fixture() -> (
        BlockPartition,
        EmbeddingTable,
        Vec<PointerSample>,
        AttentionModel,
        TrainerConfig,
    ) {
        let spec = PartitionSpec {
            blocks: 2,
            anchors_per_block: 1,
            fillers_per_block: 2,
            d_per_block: 4,
        };
        let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(1)).unwrap();
        let task = TaskConfig {
            sequence_length: 5,
            blocks_present_per_sample: 2,
            redundancy_k: 1,
            distractors: 1,
            samples: 40,
            seed: 2,
        };
        let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
        let model_cfg = ModelConfig {
            heads: 2,
            d_k: 4,
            d_v: 3,
            tau: 1.0,
            init_margin: 1.0,
            init_noise: 0.05,
            value_scale: 0.3,
            readout_scale: 0.2,
        };
        let model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(3)).unwrap();
        let config = TrainerConfig {
            step_size: 0.05,
            steps: 30,
            batch_size: 8,
            seed: 4,
            checkpoint_every: 10,
            eval_samples: 20,
            regime_preset: Regime::Distributed,
            dial: None,
        };
        (partition, embeddings, dataset, model, config)
    }

    #[test]
    fn presets_match_regime_values() {
        let localist = preset_dial(Regime::Localist, 4, 4).unwrap();
        assert_eq!(localist.tau, 0.1);
        assert_eq!(localist.delta_target, vec![2.0; 4]);
        for h in 0..4 {
            for b in 0..4 {
                let expected = if b == h % 4 { 0.0 } else { 10.0 };
                assert_eq!(localist.alpha[h][b], expected);
            }
        }
        let distributed = preset_dial(Regime::Distributed, 2, 4).unwrap();
        assert_eq!(distributed.tau, 1.0);
        assert_eq!(distributed.delta_target, vec![0.1; 4]);
        assert_eq!(distributed.alpha[0][1], 0.01);
        let intermediate = preset_dial(Regime::Intermediate, 2, 4).unwrap();
        assert!(intermediate.alpha[0][1] >= 0.1 && intermediate.alpha[0][1] <= 5.0);
        assert!(preset_dial(Regime::Custom, 2, 2).is_err());
    }

    #[test]
    fn zero_steps_returns_model_unchanged() {
        let (partition, embeddings, dataset, model, mut config) = fixture();
        config.steps = 0;
        let before = model.clone();
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        // tau is set from the dial; weights must be untouched
        for h in 0..before.heads() {
            assert_eq!(outcome.state.model.head(h).w_q, before.head(h).w_q);
            assert_eq!(outcome.state.model.head(h).w_k, before.head(h).w_k);
        }
        assert_eq!(outcome.state.step, 0);
        assert!(outcome.log.is_empty());
    }

    #[test]
    fn astronomical_alpha_zeroes_everything_in_one_step() {
        let (partition, embeddings, dataset, model, mut config) = fixture();
        config.steps = 1;
        config.regime_preset = Regime::Custom;
        config.dial = Some(DialSettings {
            alpha: vec![vec![1e9; 2]; 2],
            beta: 1e-4,
            tau: 1.0,
            delta_target: vec![0.1; 2],
            designated: vec![None; 2],
        });
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        for h in 0..2 {
            assert_eq!(crate::numerics::frobenius(&outcome.state.model.head(h).w_q), 0.0);
            assert_eq!(crate::numerics::frobenius(&outcome.state.model.head(h).w_k), 0.0);
        }
    }

    #[test]
    fn runaway_step_size_reports_divergence() {
        let (partition, embeddings, dataset, model, mut config) = fixture();
        config.step_size = 1e4;
        config.steps = 50;
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        match outcome.status {
            TrainStatus::Diverged { step, .. } => {
                // the last state is still returned for inspection
                assert!(step < 50);
                assert_eq!(outcome.state.step, step);
            }
            TrainStatus::Completed => panic!("a 1e4 step size must diverge"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (partition, embeddings, dataset, model, config) = fixture();
        let a = train(&config, model.clone(), &dataset, &partition, &embeddings, None).unwrap();
        let b = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        assert_eq!(log_to_jsonl(&a.log), log_to_jsonl(&b.log));
        assert_eq!(a.state.model, b.state.model);
        assert_eq!(a.state.rng, b.state.rng);
    }

    #[test]
    fn apply_dial_is_idempotent_and_pure() {
        let (.., model, config) = fixture();
        let dial = config.effective_dial(2, 2).unwrap();
        let once = apply_dial(&model, &dial).unwrap();
        let twice = apply_dial(&once, &dial).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.tau(), dial.tau);
        // weights untouched
        assert_eq!(once.head(0).w_q, model.head(0).w_q);
        let mut bad = dial.clone();
        bad.tau = 0.0;
        assert!(apply_dial(&model, &bad).is_err());
    }

    #[test]
    fn lower_tau_never_raises_entropy() {
        let (partition, embeddings, dataset, model, config) = fixture();
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        let designations = outcome.state.dial.designations();
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.1] {
            let mut dial = outcome.state.dial.clone();
            dial.tau = tau;
            let model = apply_dial(&outcome.state.model, &dial).unwrap();
            let evals = evaluate_dataset(&model, &dataset[..20], &partition, &embeddings, Some(&designations)).unwrap();
            let mut acc = 0.0;
            let mut count = 0usize;
            for e in &evals {
                for o in &e.heads {
                    if o.active {
                        acc += o.entropy;
                        count += 1;
                    }
                }
            }
            let mean = acc / count as f64;
            assert!(mean <= prev + 1e-12, "entropy rose from {prev} to {mean} at tau {tau}");
            prev = mean;
        }
    }

    #[test]
    fn hot_reload_applies_and_rejects() {
        let (partition, embeddings, dataset, model, config) = fixture();
        let mut outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        let state = &mut outcome.state;
        // empty list: state unchanged
        let before = state.dial.clone();
        let events = hot_reload(state, &[], &partition, config.checkpoint_every).unwrap();
        assert!(events.is_empty());
        assert_eq!(state.dial, before);
        // a real constraint lands on the dial and logs an event
        let constraint = CompiledConstraint {
            rule_id: "r1".into(),
            rule_version: 1,
            affected_heads: vec![0],
            target_block: "b1".into(),
            delta: 2.0,
            alpha_updates: vec![AlphaUpdate { head: 0, block: "b0".into(), alpha: 10.0 }],
            tau: state.dial.tau,
        };
        let step_before = state.step;
        let rng_before = state.rng.clone();
        let weights_before = state.model.head(0).w_q.clone();
        let events = hot_reload(state, &[constraint], &partition, config.checkpoint_every).unwrap();
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0], LogEntry::Injection(_)));
        assert_eq!(state.dial.alpha[0][0], 10.0);
        assert_eq!(state.dial.delta_target[1], 2.0);
        assert_eq!(state.step, step_before);
        assert_eq!(state.rng, rng_before);
        assert_eq!(state.model.head(0).w_q, weights_before);
        // unknown block: rejected whole, dial untouched
        let dial_before = state.dial.clone();
        let bad = CompiledConstraint {
            rule_id: "r2".into(),
            rule_version: 1,
            affected_heads: vec![0],
            target_block: "nope".into(),
            delta: 1.0,
            alpha_updates: vec![],
            tau: state.dial.tau,
        };
        let events = hot_reload(state, &[bad], &partition, config.checkpoint_every).unwrap();
        assert!(matches!(events[0], LogEntry::InjectionRejected(_)));
        assert_eq!(state.dial, dial_before);
        // off-boundary calls are refused
        state.step += 1;
        assert!(hot_reload(state, &[], &partition, config.checkpoint_every).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (partition, embeddings, dataset, model, config) = fixture();
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        save_checkpoint(&outcome.state, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(&outcome.state.partition_checksum)).unwrap();
        assert_eq!(loaded, outcome.state);
        // checksum mismatch refuses
        assert!(matches!(
            load_checkpoint(&path, Some("deadbeef")),
            Err(Error::ChecksumMismatch(_))
        ));
        // corrupt file: clean error
        std::fs::write(&path, "{\"schema\":\"localist.checkpoint\",...garbage").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn split_run_reproduces_uninterrupted_run() {
        let (partition, embeddings, dataset, model, mut config) = fixture();
        config.steps = 30;
        let full = train(&config, model.clone(), &dataset, &partition, &embeddings, None).unwrap();

        let mut half_config = config.clone();
        half_config.steps = 15;
        let first = train(&half_config, model, &dataset, &partition, &embeddings, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.json");
        save_checkpoint(&first.state, &path).unwrap();
        let reloaded = load_checkpoint(&path, None).unwrap();
        let second = resume(reloaded, &config, &dataset, &partition, &embeddings, None, 15).unwrap();

        let mut combined = first.log.clone();
        combined.extend(second.log.clone());
        assert_eq!(log_to_jsonl(&full.log), log_to_jsonl(&combined));
        assert_eq!(full.state, second.state);
    }

    #[test]
    fn scheduled_feed_injects_at_boundary() {
        let (partition, embeddings, dataset, model, mut config) = fixture();
        config.steps = 20;
        let constraint = CompiledConstraint {
            rule_id: "r1".into(),
            rule_version: 1,
            affected_heads: vec![0, 1],
            target_block: "b0".into(),
            delta: 2.0,
            alpha_updates: vec![
                AlphaUpdate { head: 0, block: "b1".into(), alpha: 5.0 },
                AlphaUpdate { head: 1, block: "b1".into(), alpha: 5.0 },
            ],
            tau: 1.0,
        };
        let mut feed = ScheduledConstraints::new(vec![(10, vec![constraint])]);
        let outcome = train(&config, model, &dataset, &partition, &embeddings, Some(&mut feed)).unwrap();
        let injection_steps: Vec<u64> = outcome
            .log
            .iter()
            .filter_map(|e| match e {
                LogEntry::Injection(ev) => Some(ev.step),
                _ => None,
            })
            .collect();
        assert_eq!(injection_steps, vec![10]);
        assert_eq!(outcome.state.dial.alpha[0][1], 5.0);
        // next prox steps use the new threshold: group b1 on head 0 is gone
        let slice = partition.slice(1);
        assert_eq!(outcome.state.model.head(0).w_q.frobenius_rows(slice.start, slice.end), 0.0);
    }
}
