//! Synthetic block-pointer retrieval task.
//!
//! Each sample shows one anchor per present block plus filler distractors;
//! a per-block trigger token is the query, and the answer is the identity
//! of the governing block's anchor in the sequence. Labels are decidable by
//! an exact symbolic scan, which is what makes rule compliance checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{BlockPartition, TokenId};
use crate::numerics::RngState;

/// One retrieval query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerSample {
    pub tokens: Vec<TokenId>,
    pub query_index: usize,
    /// Block label the query's governing rule points at.
    pub governing_block: String,
    /// Positions holding the correct anchor (all k copies).
    pub target_span: Vec<usize>,
    /// Token id of the correct anchor.
    pub label: TokenId,
}

impl PointerSample {
    pub fn governing_block_index(&self, partition: &BlockPartition) -> Result<usize> {
        partition.block_index(&self.governing_block)
    }
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub sequence_length: usize,
    pub blocks_present_per_sample: usize,
    /// Redundancy factor: copies of the correct anchor per sample.
    pub redundancy_k: usize,
    /// Filler distractors beyond what padding requires.
    pub distractors: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Generate a deterministic dataset.
///
/// Layout per sample: k copies of the governing block's anchor, one anchor
/// for each other present block, the governing block's trigger token, and
/// filler distractors from the present non-governing blocks; leftover slots
/// are padded with more fillers so every sequence has exactly
/// `sequence_length` tokens. Positions are shuffled uniformly.
pub fn generate(
    config: &TaskConfig,
    partition: &BlockPartition,
    rng: &mut RngState,
) -> Result<Vec<PointerSample>> {
    if partition.p() < 2 {
        return Err(Error::Infeasible("task needs at least 2 blocks".into()));
    }
    if config.redundancy_k == 0 {
        return Err(Error::InvalidParameter("redundancy_k must be at least 1".into()));
    }
    if config.blocks_present_per_sample == 0 || config.blocks_present_per_sample > partition.p() {
        return Err(Error::InvalidParameter(format!(
            "blocks_present_per_sample must be in 1..={}",
            partition.p()
        )));
    }
    let required = config.redundancy_k + (config.blocks_present_per_sample - 1) + 1;
    if config.sequence_length < required + config.distractors {
        return Err(Error::Infeasible(format!(
            "sequence_length {} cannot fit {} required tokens plus {} distractors",
            config.sequence_length, required, config.distractors
        )));
    }
    let mut dataset = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        dataset.push(generate_sample(config, partition, rng)?);
    }
    Ok(dataset)
}

fn generate_sample(
    config: &TaskConfig,
    partition: &BlockPartition,
    rng: &mut RngState,
) -> Result<PointerSample> {
    let p = partition.p();
    let governing = rng.next_below(p as u64) as usize;
    let trigger = partition.trigger(governing).ok_or_else(|| {
        Error::Infeasible(format!(
            "block '{}' has no trigger token; build the partition with at least one filler per block",
            partition.block_label(governing)
        ))
    })?;

    // present blocks: the governing one plus a uniform draw of others
    let mut others: Vec<usize> = (0..p).filter(|&b| b != governing).collect();
    rng.shuffle(&mut others);
    others.truncate(config.blocks_present_per_sample - 1);

    let mut tokens: Vec<TokenId> = Vec::with_capacity(config.sequence_length);
    let anchors = partition.anchors(governing);
    let label = anchors[rng.next_below(anchors.len() as u64) as usize];
    for _ in 0..config.redundancy_k {
        tokens.push(label);
    }
    for &b in &others {
        let anchors = partition.anchors(b);
        tokens.push(anchors[rng.next_below(anchors.len() as u64) as usize]);
    }
    tokens.push(trigger);

    // distractors + padding, drawn from the present non-governing blocks
    let filler_count = config.sequence_length - tokens.len();
    if filler_count > 0 {
        let mut pool: Vec<TokenId> = Vec::new();
        for &b in &others {
            pool.extend(partition.distractor_fillers(b));
        }
        if pool.is_empty() {
            return Err(Error::Infeasible(
                "no distractor fillers available in the present non-governing blocks".into(),
            ));
        }
        for _ in 0..filler_count {
            tokens.push(pool[rng.next_below(pool.len() as u64) as usize]);
        }
    }

    rng.shuffle(&mut tokens);
    let query_index = tokens
        .iter()
        .position(|&t| t == trigger)
        .expect("trigger token was placed");
    let target_span: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == label)
        .map(|(i, _)| i)
        .collect();
    debug_assert_eq!(target_span.len(), config.redundancy_k);
    Ok(PointerSample {
        tokens,
        query_index,
        governing_block: partition.block_label(governing).to_string(),
        target_span,
        label,
    })
}

/// The symbolic label oracle: scan the sequence, keep the governing block's
/// anchors, and return the unique identity found.
pub fn oracle_label(sample: &PointerSample, partition: &BlockPartition) -> Result<TokenId> {
    let governing = sample.governing_block_index(partition)?;
    let mut found: Option<TokenId> = None;
    for &t in &sample.tokens {
        if partition.token_block(t) == governing && partition.is_anchor(t) {
            match found {
                None => found = Some(t),
                Some(prev) if prev == t => {}
                Some(prev) => {
                    return Err(Error::InvalidInput(format!(
                        "sample holds two distinct governing-block anchors ({prev} and {t})"
                    )))
                }
            }
        }
    }
    found.ok_or_else(|| Error::InvalidInput("sample holds no governing-block anchor".into()))
}

/// Exact dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    /// Per-block governing counts, indexed like the partition's blocks.
    pub block_frequency: Vec<usize>,
    pub mean_target_span: f64,
    /// (label token, count), sorted by token id.
    pub label_distribution: Vec<(TokenId, usize)>,
}

pub fn dataset_stats(dataset: &[PointerSample], partition: &BlockPartition) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset_stats: empty dataset".into()));
    }
    let mut block_frequency = vec![0usize; partition.p()];
    let mut labels: std::collections::BTreeMap<TokenId, usize> = Default::default();
    let mut span_total = 0usize;
    for sample in dataset {
        let b = sample.governing_block_index(partition)?;
        block_frequency[b] += 1;
        span_total += sample.target_span.len();
        *labels.entry(sample.label).or_insert(0) += 1;
    }
    Ok(DatasetStats {
        block_frequency,
        mean_target_span: span_total as f64 / dataset.len() as f64,
        label_distribution: labels.into_iter().collect(),
    })
}

pub const DATASET_SCHEMA: &str = "localist.dataset";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
    config: TaskConfig,
    partition_checksum: String,
}

/// JSON lines: a header carrying the config and partition checksum, then
/// one sample per line.
pub fn dataset_to_jsonl(
    config: &TaskConfig,
    partition_checksum: &str,
    dataset: &[PointerSample],
) -> String {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_SCHEMA_VERSION,
        config: config.clone(),
        partition_checksum: partition_checksum.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for sample in dataset {
        out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn dataset_from_jsonl(text: &str) -> Result<(TaskConfig, String, Vec<PointerSample>)> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty dataset file".into()))?;
    let header: DatasetHeader = serde_json::from_str(header_line)?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::InvalidInput(format!(
            "expected schema '{DATASET_SCHEMA}', found '{}'",
            header.schema
        )));
    }
    let mut dataset = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        dataset.push(serde_json::from_str(line)?);
    }
    Ok((header.config, header.partition_checksum, dataset))
}
