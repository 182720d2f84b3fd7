//! Single-layer multi-head softmax attention plus the observables the
//! bound suites measure: attention entropy, pointer fidelity, per-block
//! leakage, and concentration verdicts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_rows, Matrix, RngState};
use crate::partition::{BlockPartition, EmbeddingTable, TokenId};
use crate::taskgen::PointerSample;

/// Per-head projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// One attention layer (H heads) with a linear readout over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel {
    heads: Vec<HeadWeights>,
    readout: Matrix,
    tau: f64,
}

impl AttentionModel {
    pub fn from_parts(heads: Vec<HeadWeights>, readout: Matrix, tau: f64) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidInput("model needs at least one head".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        let d = heads[0].w_q.rows();
        let d_k = heads[0].w_q.cols();
        let d_v = heads[0].w_v.cols();
        for (h, head) in heads.iter().enumerate() {
            let ok = head.w_q.rows() == d
                && head.w_k.rows() == d
                && head.w_v.rows() == d
                && head.w_q.cols() == d_k
                && head.w_k.cols() == d_k
                && head.w_v.cols() == d_v;
            if !ok {
                return Err(Error::InvalidInput(format!("head {h} has inconsistent dimensions")));
            }
            if !(head.w_q.is_finite() && head.w_k.is_finite() && head.w_v.is_finite()) {
                return Err(Error::InvalidInput(format!("head {h} has non-finite weights")));
            }
        }
        if readout.rows() != heads.len() * d_v {
            return Err(Error::InvalidInput(format!(
                "readout expects {} rows, got {}",
                heads.len() * d_v,
                readout.rows()
            )));
        }
        if !readout.is_finite() {
            return Err(Error::InvalidInput("readout has non-finite weights".into()));
        }
        Ok(AttentionModel { heads, readout, tau })
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].w_v.cols()
    }

    pub fn vocab(&self) -> usize {
        self.readout.cols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn head(&self, h: usize) -> &HeadWeights {
        &self.heads[h]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut HeadWeights {
        &mut self.heads[h]
    }

    pub fn readout(&self) -> &Matrix {
        &self.readout
    }

    pub fn readout_mut(&mut self) -> &mut Matrix {
        &mut self.readout
    }

    /// Raw query vector x_row . W_Q (no temperature).
    pub fn query_vector(&self, h: usize, x: &Matrix, row: usize) -> Vec<f64> {
        project_row(x.row(row), &self.heads[h].w_q)
    }

    /// Raw key vector x_row . W_K (no temperature).
    pub fn key_vector(&self, h: usize, x: &Matrix, row: usize) -> Vec<f64> {
        project_row(x.row(row), &self.heads[h].w_k)
    }

    /// Full forward pass over an embedded token sequence.
    pub fn forward(&self, x: &Matrix, tokens: &[TokenId]) -> Result<AttentionTrace> {
        if x.rows() == 0 {
            return Err(Error::InvalidInput("forward: empty sequence".into()));
        }
        if x.cols() != self.d() {
            return Err(Error::InvalidInput(format!(
                "forward: embedding dim {} does not match model d {}",
                x.cols(),
                self.d()
            )));
        }
        if tokens.len() != x.rows() {
            return Err(Error::InvalidInput("forward: token/embedding length mismatch".into()));
        }
        let n = x.rows();
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        let mut contexts = Vec::with_capacity(self.heads.len());
        let mut concat = Matrix::zeros(n, self.heads.len() * self.d_v());
        for (h, head) in self.heads.iter().enumerate() {
            let q = x.matmul(&head.w_q);
            let k = x.matmul(&head.w_k);
            let v = x.matmul(&head.w_v);
            let mut s = q.matmul_transpose(&k);
            let w = softmax_rows(&s, self.tau)?;
            s.scale(1.0 / self.tau);
            let ctx = w.matmul(&v);
            for r in 0..n {
                for c in 0..self.d_v() {
                    concat.set(r, h * self.d_v() + c, ctx.at(r, c));
                }
            }
            logits.push(s);
            weights.push(w);
            contexts.push(ctx);
        }
        let output_logits = concat.matmul(&self.readout);
        Ok(AttentionTrace {
            tokens: tokens.to_vec(),
            logits,
            weights,
            contexts,
            output_logits,
        })
    }
}

fn project_row(row: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in row.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// Everything the forward pass produced, kept for inspection and export.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub tokens: Vec<TokenId>,
    /// Per head: QK^T / tau.
    pub logits: Vec<Matrix>,
    /// Per head: softmax of the logits; rows sum to 1.
    pub weights: Vec<Matrix>,
    /// Per head: weights . V.
    pub contexts: Vec<Matrix>,
    /// Readout logits over the vocabulary, one row per position.
    pub output_logits: Matrix,
}

impl AttentionTrace {
    /// Argmax over the vocabulary at a position; ties break to the lowest
    /// token id so results are deterministic.
    pub fn predicted_token(&self, row: usize) -> TokenId {
        let logits = self.output_logits.row(row);
        let mut best = 0usize;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = j;
            }
        }
        best
    }

    /// JSON export with weights rounded to 12 significant digits.
    pub fn to_json(&self) -> String {
        let per_head: Vec<Vec<Vec<f64>>> = self
            .weights
            .iter()
            .map(|w| {
                (0..w.rows())
                    .map(|r| w.row(r).iter().map(|&v| round_sig(v, 12)).collect())
                    .collect()
            })
            .collect();
        let doc = serde_json::json!({
            "schema": "localist.trace",
            "version": 1,
            "tokens": self.tokens,
            "weights": per_head,
        });
        serde_json::to_string(&doc).expect("trace serializes")
    }
}

fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let scale = digits - 1 - v.abs().log10().floor() as i32;
    let factor = 10f64.powi(scale);
    (v * factor).round() / factor
}

/// Natural-log entropy of an attention row; 0 log 0 is 0.
pub fn entropy(weights_row: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &w in weights_row {
        if w < -1e-12 {
            return Err(Error::InvalidInput(format!("negative attention weight {w}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("attention row sums to {sum}, not 1")));
    }
    let mut h = 0.0;
    for &w in weights_row {
        if w > 0.0 {
            h -= w * w.ln();
        }
    }
    Ok(h)
}

/// Attention mass on the target span; a rule span is nonempty by
/// construction, so an empty target set is an input error.
pub fn fidelity(weights_row: &[f64], targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("fidelity: empty target set".into()));
    }
    let mut mass = 0.0;
    for &t in targets {
        if t >= weights_row.len() {
            return Err(Error::InvalidInput(format!(
                "fidelity: target position {t} outside row of length {}",
                weights_row.len()
            )));
        }
        mass += weights_row[t];
    }
    Ok(mass)
}

/// Per-block attention mass for one query row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Leakage {
    /// Mass per block, indexed like the partition's blocks.
    pub per_block_mass: Vec<f64>,
    /// 1 - mass on the correct block.
    pub off_block_total: f64,
    /// max over wrong-block keys of weight / max over correct-block keys.
    pub max_wrong_key_ratio: f64,
}

pub fn leakage(
    weights_row: &[f64],
    tokens: &[TokenId],
    partition: &BlockPartition,
    correct_block: usize,
) -> Result<Leakage> {
    if correct_block >= partition.p() {
        return Err(Error::NotFound(format!("block index {correct_block}")));
    }
    if weights_row.len() != tokens.len() {
        return Err(Error::InvalidInput("leakage: weights/tokens length mismatch".into()));
    }
    let mut per_block = vec![0.0; partition.p()];
    let mut max_correct = 0.0f64;
    let mut max_wrong = 0.0f64;
    for (&w, &tok) in weights_row.iter().zip(tokens) {
        let b = partition.token_block(tok);
        per_block[b] += w;
        if b == correct_block {
            max_correct = max_correct.max(w);
        } else {
            max_wrong = max_wrong.max(w);
        }
    }
    let ratio = if max_correct > 0.0 {
        max_wrong / max_correct
    } else if max_wrong > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(Leakage {
        off_block_total: 1.0 - per_block[correct_block],
        per_block_mass: per_block,
        max_wrong_key_ratio: ratio,
    })
}

/// Concentration verdict for one query row: the per-key ratio form of the
/// margin bound, with the block-sum form reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationVerdict {
    pub query: usize,
    pub max_wrong_key_ratio: f64,
    pub bound: f64,
    pub per_key_pass: bool,
    /// max over wrong blocks of the block's total attention mass.
    pub max_wrong_block_mass: f64,
    pub block_sum_pass: bool,
}

/// Check every query row of a trace head against e^(-delta/tau).
pub fn check_concentration(
    trace: &AttentionTrace,
    partition: &BlockPartition,
    head: usize,
    correct_block: usize,
    delta: f64,
    tau: f64,
) -> Result<Vec<ConcentrationVerdict>> {
    if delta < 0.0 {
        return Err(Error::InvalidParameter("delta must be nonnegative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("tau must be positive".into()));
    }
    let bound = (-delta / tau).exp();
    let weights = &trace.weights[head];
    let mut verdicts = Vec::with_capacity(weights.rows());
    for r in 0..weights.rows() {
        let leak = leakage(weights.row(r), &trace.tokens, partition, correct_block)?;
        let max_wrong_block_mass = leak
            .per_block_mass
            .iter()
            .enumerate()
            .filter(|(b, _)| *b != correct_block)
            .map(|(_, &m)| m)
            .fold(0.0f64, f64::max);
        verdicts.push(ConcentrationVerdict {
            query: r,
            max_wrong_key_ratio: leak.max_wrong_key_ratio,
            bound,
            per_key_pass: leak.max_wrong_key_ratio <= bound * (1.0 + 1e-9),
            max_wrong_block_mass,
            block_sum_pass: max_wrong_block_mass <= bound * (1.0 + 1e-9),
        });
    }
    Ok(verdicts)
}

/// Model shape and initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tau: f64,
    /// Designed logit margin at initialization (raw q.k units).
    pub init_margin: f64,
    pub init_noise: f64,
    pub value_scale: f64,
    pub readout_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            d_k: 8,
            d_v: 6,
            tau: 1.0,
            init_margin: 2.8,
            init_noise: 0.01,
            value_scale: 0.2,
            readout_scale: 0.1,
        }
    }
}

/// Anchor-aligned initialization: per block, the trigger direction maps to
/// a block-specific query direction and the anchor mean maps to the same
/// direction as keys, so every query starts with the designed logit margin
/// over off-block and filler keys. This realizes the margin assumption as a
/// property of the initial model; all bound checks still measure margins.
pub fn init_anchor_aligned(
    config: &ModelConfig,
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    rng: &mut RngState,
) -> Result<AttentionModel> {
    if config.d_k < partition.p() {
        return Err(Error::InvalidParameter(format!(
            "d_k = {} must be at least the block count p = {} for block-distinct key directions",
            config.d_k,
            partition.p()
        )));
    }
    let d = partition.d();
    let scale = config.init_margin.sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for _ in 0..config.heads {
        let mut w_q = Matrix::zeros(d, config.d_k);
        let mut w_k = Matrix::zeros(d, config.d_k);
        for b in 0..partition.p() {
            let slice = partition.slice(b);
            let dir = b % config.d_k;
            // Query direction: the block's trigger when present, else its
            // first anchor.
            let query_token = partition.trigger(b).unwrap_or(partition.anchors(b)[0]);
            let qv = embeddings.vector(query_token);
            for r in slice.start..slice.end {
                w_q.set(r, dir, scale * qv[r]);
            }
            // Key direction: normalized anchor mean, so every anchor of the
            // block keys onto the same direction.
            let mut mean = vec![0.0; slice.len()];
            for &a in partition.anchors(b) {
                let av = embeddings.vector(a);
                for (m, &v) in mean.iter_mut().zip(&av[slice.start..slice.end]) {
                    *m += v;
                }
            }
            let norm = dot(&mean, &mean).sqrt();
            if norm > 0.0 {
                for r in slice.start..slice.end {
                    w_k.set(r, dir, scale * mean[r - slice.start] / norm);
                }
            }
        }
        if config.init_noise > 0.0 {
            let nq = rng.normal_matrix(d, config.d_k, config.init_noise);
            let nk = rng.normal_matrix(d, config.d_k, config.init_noise);
            w_q.add_scaled(&nq, 1.0);
            w_k.add_scaled(&nk, 1.0);
        }
        let w_v = rng.normal_matrix(d, config.d_v, config.value_scale);
        heads.push(HeadWeights { w_q, w_k, w_v });
    }
    let readout = rng.normal_matrix(
        config.heads * config.d_v,
        embeddings.len(),
        config.readout_scale,
    );
    AttentionModel::from_parts(heads, readout, config.tau)
}

/// Hand-built reference model that attends one-hot on each block's anchors
/// and reads the attended token's identity out exactly. Used as the known
/// -good fixture in verification tests.
pub fn oracle_model(partition: &BlockPartition, embeddings: &EmbeddingTable, heads: usize) -> Result<AttentionModel> {
    let d = partition.d();
    let config = ModelConfig {
        heads,
        d_k: partition.p().max(2),
        d_v: d,
        tau: 1.0,
        init_margin: 4000.0,
        init_noise: 0.0,
        value_scale: 0.0,
        readout_scale: 0.0,
    };
    let mut rng = RngState::from_seed(0);
    let mut model = init_anchor_aligned(&config, partition, embeddings, &mut rng)?;
    for h in 0..heads {
        let head = model.head_mut(h);
        head.w_v = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
    }
    let vocab = embeddings.len();
    let readout = Matrix::from_fn(heads * d, vocab, |r, tok| {
        let dim = r % d;
        embeddings.vector(tok)[dim] / heads as f64
    });
    *model.readout_mut() = readout;
    Ok(model)
}

/// Per-(query, head) observables for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryObservables {
    pub head: usize,
    pub entropy: f64,
    pub fidelity: f64,
    /// Measured min per-key margin: best correct-block key logit minus the
    /// best other-block key logit, raw q.k units.
    pub margin: f64,
    /// Number of keys outside the governing block.
    pub n_off: usize,
    /// In-sequence target span size.
    pub target_count: usize,
    pub off_block_mass: f64,
    pub max_wrong_key_ratio: f64,
    /// max over wrong blocks of that block's summed mass.
    pub max_wrong_block_mass: f64,
    /// Whether this head's designated block is the query's governing block.
    pub active: bool,
}

/// Evaluation record for one sample: readout prediction plus per-head rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleEval {
    pub sample_index: usize,
    pub predicted: TokenId,
    pub label: TokenId,
    pub governing_block: usize,
    pub heads: Vec<QueryObservables>,
}

/// Run the model over a dataset and collect the observables every report
/// consumes. `designations` marks which head serves which block (the dial's
/// designated blocks); heads without a designation match every query.
pub fn evaluate_dataset(
    model: &AttentionModel,
    samples: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    designations: Option<&[usize]>,
) -> Result<Vec<SampleEval>> {
    let mut evals = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let governing = sample.governing_block_index(partition)?;
        let x = embeddings.embed_sequence(&sample.tokens);
        let trace = model.forward(&x, &sample.tokens)?;
        let n_off = sample
            .tokens
            .iter()
            .filter(|&&t| partition.token_block(t) != governing)
            .count();
        let mut heads = Vec::with_capacity(model.heads());
        for h in 0..model.heads() {
            let row = trace.weights[h].row(sample.query_index);
            let h_t = entropy(row)?;
            let fid = fidelity(row, &sample.target_span)?;
            let leak = leakage(row, &sample.tokens, partition, governing)?;
            let margin = crate::partition::query_margin(
                model,
                h,
                &x,
                &sample.tokens,
                sample.query_index,
                governing,
                partition,
            )
            .unwrap_or(f64::NEG_INFINITY);
            let max_wrong_block_mass = leak
                .per_block_mass
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != governing)
                .map(|(_, &m)| m)
                .fold(0.0f64, f64::max);
            let active = designations.map(|d| d[h] == governing).unwrap_or(true);
            heads.push(QueryObservables {
                head: h,
                entropy: h_t,
                fidelity: fid,
                margin,
                n_off,
                target_count: sample.target_span.len(),
                off_block_mass: leak.off_block_total,
                max_wrong_key_ratio: leak.max_wrong_key_ratio,
                max_wrong_block_mass,
                active,
            });
        }
        evals.push(SampleEval {
            sample_index: idx,
            predicted: trace.predicted_token(sample.query_index),
            label: sample.label,
            governing_block: governing,
            heads,
        });
    }
    Ok(evals)
}

/// One row of the bound report: entropy and fidelity corollaries plus both
/// forms of the concentration bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub sample_index: usize,
    pub head: usize,
    pub h_t: f64,
    pub log_anchor_count: f64,
    pub cor1_bound: f64,
    pub cor1_pass: bool,
    pub fidelity: f64,
    pub cor2_bound: f64,
    pub cor2_pass: bool,
    pub per_key_ratio: f64,
    pub step4_bound: f64,
    pub step4_per_key_pass: bool,
    pub step4_block_sum_pass: bool,
    pub margin: f64,
    /// Measured min margin meets the configured delta.
    pub premise_ok: bool,
}

/// Evaluate the entropy and fidelity bounds at a configured margin per governing
/// block and the per-key concentration bound at each query's measured
/// margin.
pub fn bound_rows(evals: &[SampleEval], deltas_per_block: &[f64], tau: f64) -> Vec<BoundRow> {
    let mut rows = Vec::new();
    for eval in evals {
        let delta = deltas_per_block[eval.governing_block];
        let e_term = (-delta / tau).exp();
        for obs in &eval.heads {
            let log_anchor_count = (obs.target_count as f64).ln();
            let cor1_bound = log_anchor_count + obs.n_off as f64 / std::f64::consts::E * e_term;
            let cor2_bound = 1.0 - obs.n_off as f64 * e_term;
            let measured = obs.margin.max(0.0);
            let step4_bound = (-measured / tau).exp();
            rows.push(BoundRow {
                sample_index: eval.sample_index,
                head: obs.head,
                h_t: obs.entropy,
                log_anchor_count,
                cor1_bound,
                cor1_pass: obs.entropy <= cor1_bound + 1e-12,
                fidelity: obs.fidelity,
                cor2_bound,
                cor2_pass: obs.fidelity >= cor2_bound - 1e-12,
                per_key_ratio: obs.max_wrong_key_ratio,
                step4_bound,
                step4_per_key_pass: obs.max_wrong_key_ratio <= step4_bound * (1.0 + 1e-9),
                step4_block_sum_pass: obs.max_wrong_block_mass <= step4_bound * (1.0 + 1e-9),
                margin: obs.margin,
                premise_ok: obs.margin >= delta,
            });
        }
    }
    rows
}
