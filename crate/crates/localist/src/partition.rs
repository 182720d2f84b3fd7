//! Block structure over the embedding dimension: semantic blocks with
//! disjoint feature slices, designed anchor tokens, filler tokens, and the
//! empirical margin / covariance estimates the bound suites consume.
//!
//! Blocks partition the embedding dimension, so the per-block weight groups
//! of W_Q / W_K are exactly the rows indexed by a block's feature slice.
//! That makes "zero outside a single block" an exact, testable condition.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionModel;
use crate::error::{Error, Result};
use crate::numerics::{dot, spectral_norm, Matrix, RngState};
use crate::taskgen::PointerSample;

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Anchor,
    Filler,
}

/// Half-open index range over the embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlice {
    pub start: usize,
    pub end: usize,
}

impl FeatureSlice {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The p semantic blocks, their feature slices, anchor sets, and the
/// token -> block map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    block_ids: Vec<String>,
    feature_slices: Vec<FeatureSlice>,
    anchors: Vec<Vec<TokenId>>,
    /// Designated query token per block (one of the block's fillers).
    triggers: Vec<Option<TokenId>>,
    token_block: Vec<usize>,
    token_kind: Vec<TokenKind>,
    d: usize,
}

impl BlockPartition {
    pub fn p(&self) -> usize {
        self.block_ids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vocab_len(&self) -> usize {
        self.token_block.len()
    }

    pub fn block_ids(&self) -> &[String] {
        &self.block_ids
    }

    pub fn block_label(&self, idx: usize) -> &str {
        &self.block_ids[idx]
    }

    pub fn block_index(&self, label: &str) -> Result<usize> {
        self.block_ids
            .iter()
            .position(|b| b == label)
            .ok_or_else(|| Error::NotFound(format!("block '{label}'")))
    }

    pub fn slice(&self, block: usize) -> FeatureSlice {
        self.feature_slices[block]
    }

    pub fn slices(&self) -> &[FeatureSlice] {
        &self.feature_slices
    }

    pub fn anchors(&self, block: usize) -> &[TokenId] {
        &self.anchors[block]
    }

    pub fn trigger(&self, block: usize) -> Option<TokenId> {
        self.triggers[block]
    }

    pub fn token_block(&self, token: TokenId) -> usize {
        self.token_block[token]
    }

    pub fn token_kind(&self, token: TokenId) -> TokenKind {
        self.token_kind[token]
    }

    pub fn is_anchor(&self, token: TokenId) -> bool {
        self.token_kind[token] == TokenKind::Anchor
    }

    /// Non-trigger filler tokens of a block, usable as distractors.
    pub fn distractor_fillers(&self, block: usize) -> Vec<TokenId> {
        (0..self.vocab_len())
            .filter(|&t| {
                self.token_block[t] == block
                    && self.token_kind[t] == TokenKind::Filler
                    && self.triggers[block] != Some(t)
            })
            .collect()
    }

    /// Token class label used by the rule DSL's `when class "..."` clause.
    pub fn token_class(&self, token: TokenId) -> String {
        let block = &self.block_ids[self.token_block[token]];
        match self.token_kind[token] {
            TokenKind::Anchor => format!("anchor:{block}"),
            TokenKind::Filler => {
                if self.triggers[self.token_block[token]] == Some(token) {
                    format!("trigger:{block}")
                } else {
                    format!("filler:{block}")
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let mut covered = 0usize;
        for (i, s) in self.feature_slices.iter().enumerate() {
            if s.start != covered {
                return Err(Error::InvalidInput(format!(
                    "feature slices must be contiguous; block {i} starts at {} not {covered}",
                    s.start
                )));
            }
            if s.is_empty() {
                return Err(Error::InvalidInput(format!("block {i} has an empty slice")));
            }
            covered = s.end;
        }
        if covered != self.d {
            return Err(Error::InvalidInput(format!(
                "feature slices cover [0, {covered}) but d = {}",
                self.d
            )));
        }
        for (b, anchors) in self.anchors.iter().enumerate() {
            if anchors.is_empty() {
                return Err(Error::InvalidInput(format!("block {b} has no anchors")));
            }
            for &a in anchors {
                if self.token_block[a] != b {
                    return Err(Error::InvalidInput(format!(
                        "anchor token {a} listed under block {b} but maps to block {}",
                        self.token_block[a]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed token embeddings, block-structured: a token's vector is zero
/// outside its block's feature slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    d: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vector(&self, token: TokenId) -> &[f64] {
        &self.vectors[token]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Stack a token sequence into an n x d matrix.
    pub fn embed_sequence(&self, tokens: &[TokenId]) -> Matrix {
        Matrix::from_fn(tokens.len(), self.d, |r, c| self.vectors[tokens[r]][c])
    }

    fn push_copy_of(&mut self, token: TokenId) -> TokenId {
        self.vectors.push(self.vectors[token].clone());
        self.vectors.len() - 1
    }
}

/// Layout counts for `build_partition`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub blocks: usize,
    pub anchors_per_block: usize,
    pub fillers_per_block: usize,
    pub d_per_block: usize,
}

/// Build the block layout and its designed embeddings.
///
/// Anchors within a block are an orthonormal set inside the block's slice
/// (pairwise cosine exactly 0), anchors across blocks have disjoint support
/// (dot exactly 0), and fillers are random unit vectors in-slice,
/// orthogonalized against the block's anchors when the slice has room.
/// The last filler of each block is designated as the block's trigger.
pub fn build_partition(spec: PartitionSpec, rng: &mut RngState) -> Result<(BlockPartition, EmbeddingTable)> {
    if spec.blocks == 0 || spec.anchors_per_block == 0 || spec.d_per_block == 0 {
        return Err(Error::InvalidParameter(
            "blocks, anchors_per_block, and d_per_block must all be at least 1".into(),
        ));
    }
    if spec.d_per_block < spec.anchors_per_block {
        return Err(Error::Infeasible(format!(
            "cannot fit {} mutually orthogonal anchors in a {}-dimensional block slice",
            spec.anchors_per_block, spec.d_per_block
        )));
    }
    let d = spec.blocks * spec.d_per_block;
    let mut block_ids = Vec::new();
    let mut feature_slices = Vec::new();
    let mut anchors = Vec::new();
    let mut triggers = Vec::new();
    let mut token_block = Vec::new();
    let mut token_kind = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();

    for b in 0..spec.blocks {
        block_ids.push(format!("b{b}"));
        let start = b * spec.d_per_block;
        let end = start + spec.d_per_block;
        feature_slices.push(FeatureSlice { start, end });

        // Orthonormal anchor directions inside the slice.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut block_anchors = Vec::new();
        for _ in 0..spec.anchors_per_block {
            let v = orthonormal_draw(rng, spec.d_per_block, &basis)?;
            basis.push(v.clone());
            let tid = vectors.len();
            vectors.push(place_in_slice(&v, start, d));
            token_block.push(b);
            token_kind.push(TokenKind::Anchor);
            block_anchors.push(tid);
        }
        anchors.push(block_anchors);

        // Fillers: unit vectors, kept off the anchor directions when the
        // slice has spare dimensions.
        let orthogonalize = spec.d_per_block > spec.anchors_per_block;
        let mut trigger = None;
        for f in 0..spec.fillers_per_block {
            let v = if orthogonalize {
                orthonormal_draw_against(rng, spec.d_per_block, &basis)?
            } else {
                unit_draw(rng, spec.d_per_block)?
            };
            let tid = vectors.len();
            vectors.push(place_in_slice(&v, start, d));
            token_block.push(b);
            token_kind.push(TokenKind::Filler);
            if f + 1 == spec.fillers_per_block {
                trigger = Some(tid);
            }
        }
        triggers.push(trigger);
    }

    let partition = BlockPartition {
        block_ids,
        feature_slices,
        anchors,
        triggers,
        token_block,
        token_kind,
        d,
    };
    partition.validate()?;
    Ok((partition, EmbeddingTable { d, vectors }))
}

fn place_in_slice(v: &[f64], start: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    out[start..start + v.len()].copy_from_slice(v);
    out
}

fn unit_draw(rng: &mut RngState, dim: usize) -> Result<Vec<f64>> {
    for _ in 0..64 {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Err(Error::NumericFailure("could not draw a unit vector".into()))
}

/// Draw a unit vector orthogonal to `basis` (Gram-Schmidt), extending the
/// basis: used for anchors.
fn orthonormal_draw(rng: &mut RngState, dim: usize, basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    orthonormal_draw_against(rng, dim, basis)
}

/// Draw a unit vector orthogonal to `against` without requiring it to join
/// an orthonormal basis.
fn orthonormal_draw_against(rng: &mut RngState, dim: usize, against: &[Vec<f64>]) -> Result<Vec<f64>> {
    for _ in 0..64 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        for u in against {
            let proj = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Err(Error::NumericFailure(
        "could not draw a vector orthogonal to the existing set".into(),
    ))
}

/// Geometry scores for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorScore {
    pub token: TokenId,
    pub block: String,
    /// Mean pairwise distance to same-block anchors (0 when alone).
    pub within_block_spread: f64,
    /// Min distance to any other-block anchor (infinite when p = 1).
    pub between_block_min_distance: f64,
}

pub fn score_anchors(partition: &BlockPartition, embeddings: &EmbeddingTable) -> Vec<AnchorScore> {
    let mut scores = Vec::new();
    for b in 0..partition.p() {
        for &a in partition.anchors(b) {
            let va = embeddings.vector(a);
            let mut spread = 0.0;
            let mut pairs = 0usize;
            for &other in partition.anchors(b) {
                if other == a {
                    continue;
                }
                spread += distance(va, embeddings.vector(other));
                pairs += 1;
            }
            let within = if pairs > 0 { spread / pairs as f64 } else { 0.0 };
            let mut between = f64::INFINITY;
            for ob in 0..partition.p() {
                if ob == b {
                    continue;
                }
                for &other in partition.anchors(ob) {
                    between = between.min(distance(va, embeddings.vector(other)));
                }
            }
            scores.push(AnchorScore {
                token: a,
                block: partition.block_label(b).to_string(),
                within_block_spread: within,
                between_block_min_distance: between,
            });
        }
    }
    scores
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Spectral norm of the uncentered second moment (1/n) sum x x^T over the
/// block's tokens, computed on the block's slice.
pub fn block_cov_norm(
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    block: &str,
) -> Result<f64> {
    let b = partition.block_index(block)?;
    let slice = partition.slice(b);
    let tokens: Vec<TokenId> = (0..partition.vocab_len())
        .filter(|&t| partition.token_block(t) == b)
        .collect();
    if tokens.is_empty() {
        return Err(Error::InvalidInput(format!("block '{block}' has no tokens")));
    }
    let di = slice.len();
    let mut second = Matrix::zeros(di, di);
    for &t in &tokens {
        let x = &embeddings.vector(t)[slice.start..slice.end];
        for i in 0..di {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..di {
                second.set(i, j, second.at(i, j) + x[i] * x[j]);
            }
        }
    }
    second.scale(1.0 / tokens.len() as f64);
    spectral_norm(&second, 1e-10)
}

/// Grow a block's anchor list from m to k*m by exact copies under fresh
/// token ids; every other block is untouched.
pub fn duplicate_anchors(
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    block: &str,
    k: usize,
) -> Result<(BlockPartition, EmbeddingTable)> {
    if k == 0 {
        return Err(Error::InvalidParameter("redundancy factor k must be at least 1".into()));
    }
    let b = partition.block_index(block)?;
    let mut partition = partition.clone();
    let mut embeddings = embeddings.clone();
    let originals = partition.anchors[b].clone();
    for _copy in 1..k {
        for &a in &originals {
            let tid = embeddings.push_copy_of(a);
            partition.token_block.push(b);
            partition.token_kind.push(TokenKind::Anchor);
            partition.anchors[b].push(tid);
        }
    }
    partition.validate()?;
    Ok((partition, embeddings))
}

/// Per-head empirical margin summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginEstimate {
    pub head: usize,
    pub mean_margin: f64,
    pub min_margin: f64,
    pub per_query_margins: Vec<f64>,
}

/// Per-query logit margin: best correct-block key minus the best key from
/// any other block, on raw q.k logits (no temperature).
pub fn estimate_margin(
    model: &AttentionModel,
    dataset: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
) -> Result<Vec<MarginEstimate>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("estimate_margin: empty dataset".into()));
    }
    let mut estimates = Vec::new();
    for h in 0..model.heads() {
        let mut margins = Vec::new();
        for sample in dataset {
            let x = embeddings.embed_sequence(&sample.tokens);
            let governing = sample.governing_block_index(partition)?;
            if let Some(m) = query_margin(model, h, &x, &sample.tokens, sample.query_index, governing, partition) {
                margins.push(m);
            }
        }
        if margins.is_empty() {
            return Err(Error::InvalidInput(
                "estimate_margin: no query had keys from more than one block".into(),
            ));
        }
        let mean = margins.iter().sum::<f64>() / margins.len() as f64;
        let min = margins.iter().cloned().fold(f64::INFINITY, f64::min);
        estimates.push(MarginEstimate {
            head: h,
            mean_margin: mean,
            min_margin: min,
            per_query_margins: margins,
        });
    }
    Ok(estimates)
}

/// Margin of one logit row: best correct-block key minus the best key from
/// any other block. A difference of logits, so adding a constant to every
/// key's logit leaves it unchanged. None when only one side has keys.
pub fn row_margin(logits: &[f64], key_blocks: &[usize], governing: usize) -> Option<f64> {
    let mut best_correct = f64::NEG_INFINITY;
    let mut best_wrong = f64::NEG_INFINITY;
    for (&logit, &block) in logits.iter().zip(key_blocks) {
        if block == governing {
            best_correct = best_correct.max(logit);
        } else {
            best_wrong = best_wrong.max(logit);
        }
    }
    if best_correct.is_finite() && best_wrong.is_finite() {
        Some(best_correct - best_wrong)
    } else {
        None
    }
}

/// Margin for a single query row of a model; None when every key is in the
/// governing block (no competitor exists).
pub fn query_margin(
    model: &AttentionModel,
    head: usize,
    x: &Matrix,
    tokens: &[TokenId],
    query_index: usize,
    governing: usize,
    partition: &BlockPartition,
) -> Option<f64> {
    let q = model.query_vector(head, x, query_index);
    let logits: Vec<f64> = (0..tokens.len())
        .map(|j| dot(&q, &model.key_vector(head, x, j)))
        .collect();
    let blocks: Vec<usize> = tokens.iter().map(|&t| partition.token_block(t)).collect();
    row_margin(&logits, &blocks, governing)
}

/// Versioned on-disk document bundling the partition and its embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub schema: String,
    pub version: u32,
    pub p: usize,
    pub d: usize,
    pub partition: BlockPartition,
    pub embeddings: EmbeddingTable,
}

pub const PARTITION_SCHEMA: &str = "localist.partition";
pub const PARTITION_SCHEMA_VERSION: u32 = 1;

pub fn to_document(partition: &BlockPartition, embeddings: &EmbeddingTable) -> PartitionDocument {
    PartitionDocument {
        schema: PARTITION_SCHEMA.to_string(),
        version: PARTITION_SCHEMA_VERSION,
        p: partition.p(),
        d: partition.d(),
        partition: partition.clone(),
        embeddings: embeddings.clone(),
    }
}

pub fn partition_to_json(partition: &BlockPartition, embeddings: &EmbeddingTable) -> String {
    serde_json::to_string_pretty(&to_document(partition, embeddings)).expect("partition serializes")
}

pub fn partition_from_json(text: &str) -> Result<(BlockPartition, EmbeddingTable)> {
    let doc: PartitionDocument = serde_json::from_str(text)?;
    if doc.schema != PARTITION_SCHEMA {
        return Err(Error::InvalidInput(format!(
            "expected schema '{PARTITION_SCHEMA}', found '{}'",
            doc.schema
        )));
    }
    if doc.version != PARTITION_SCHEMA_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported partition schema version {}",
            doc.version
        )));
    }
    doc.partition.validate()?;
    Ok((doc.partition, doc.embeddings))
}

/// Stable identity of a partition + embedding pair, recorded in dataset
/// headers and checkpoints so stale artifacts are refused.
pub fn partition_checksum(partition: &BlockPartition, embeddings: &EmbeddingTable) -> String {
    sha256_hex(partition_to_json(partition, embeddings).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
