//! The training objective: task cross-entropy plus per-head, per-block
//! group penalties on the grouped Q/K rows and a ridge on the value
//! projections. Hand-derived analytic gradients for the smooth part, the
//! block soft-threshold proximal step for the nonsmooth part, the penalty
//! threshold formula, and KKT verification.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionModel;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::partition::{block_cov_norm, BlockPartition, EmbeddingTable};
use crate::taskgen::PointerSample;

/// The locality dial state: per-head, per-block penalty coefficients, the
/// value ridge, the temperature, and per-block margin targets. Each head
/// may carry a designated block whose group is exempt from its penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialSettings {
    /// alpha[head][block]: group sparsity coefficient.
    pub alpha: Vec<Vec<f64>>,
    pub beta: f64,
    pub tau: f64,
    /// Margin target per block.
    pub delta_target: Vec<f64>,
    /// Designated block per head (its rows are the head's home group).
    pub designated: Vec<Option<usize>>,
}

impl DialSettings {
    pub fn validate(&self, heads: usize, blocks: usize) -> Result<()> {
        if self.alpha.len() != heads {
            return Err(Error::InvalidInput(format!(
                "dial has {} alpha rows for {} heads",
                self.alpha.len(),
                heads
            )));
        }
        for (h, row) in self.alpha.iter().enumerate() {
            if row.len() != blocks {
                return Err(Error::InvalidInput(format!(
                    "dial alpha row {h} has {} entries for {} blocks",
                    row.len(),
                    blocks
                )));
            }
            if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(Error::InvalidInput(format!("dial alpha row {h} has invalid entries")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!("dial tau must be positive, got {}", self.tau)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidParameter(format!("dial beta must be nonnegative, got {}", self.beta)));
        }
        if self.designated.len() != heads {
            return Err(Error::InvalidInput("dial designated list does not match head count".into()));
        }
        if let Some(b) = self.designated.iter().flatten().find(|&&b| b >= blocks) {
            return Err(Error::InvalidInput(format!("designated block {b} out of range")));
        }
        Ok(())
    }

    /// Designated blocks, defaulting missing entries to round-robin.
    pub fn designations(&self) -> Vec<usize> {
        let blocks = self.alpha.first().map_or(1, |r| r.len().max(1));
        self.designated
            .iter()
            .enumerate()
            .map(|(h, d)| d.unwrap_or(h % blocks))
            .collect()
    }
}

/// Additive pieces of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub group_penalty: f64,
    pub value_penalty: f64,
    pub total: f64,
}

/// Gradients of the smooth objective (task loss + value ridge).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub readout: Matrix,
}

struct HeadForward {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

fn head_forward(model: &AttentionModel, h: usize, x: &Matrix) -> Result<HeadForward> {
    let head = model.head(h);
    let q = x.matmul(&head.w_q);
    let k = x.matmul(&head.w_k);
    let v = x.matmul(&head.w_v);
    let raw = q.matmul_transpose(&k);
    let weights = crate::numerics::softmax_rows(&raw, model.tau())?;
    Ok(HeadForward { q, k, v, weights })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Full objective value.
pub fn loss(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dial: &DialSettings,
) -> Result<LossBreakdown> {
    let (breakdown, _) = evaluate(model, batch, partition, embeddings, dial, false)?;
    Ok(breakdown)
}

/// Analytic gradients of the smooth part (task loss + value ridge). The
/// nonsmooth group penalty is handled by `prox_group`, never by gradients.
pub fn grad_smooth(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dial: &DialSettings,
) -> Result<Gradients> {
    let (_, grads) = evaluate(model, batch, partition, embeddings, dial, true)?;
    Ok(grads.expect("gradients requested"))
}

/// One pass producing both the loss value and the smooth gradients.
pub fn loss_and_grad(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dial: &DialSettings,
) -> Result<(LossBreakdown, Gradients)> {
    let (breakdown, grads) = evaluate(model, batch, partition, embeddings, dial, true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

fn evaluate(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dial: &DialSettings,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    dial.validate(model.heads(), partition.p())?;
    if embeddings.d() != model.d() {
        return Err(Error::InvalidInput(format!(
            "embedding dim {} does not match model d {}",
            embeddings.d(),
            model.d()
        )));
    }
    let heads = model.heads();
    let d_v = model.d_v();
    let vocab = model.vocab();
    let scale = 1.0 / batch.len() as f64;
    let mut task_loss = 0.0;
    let mut grads = if with_grad {
        Some(Gradients {
            w_q: (0..heads).map(|_| Matrix::zeros(model.d(), model.d_k())).collect(),
            w_k: (0..heads).map(|_| Matrix::zeros(model.d(), model.d_k())).collect(),
            w_v: (0..heads).map(|_| Matrix::zeros(model.d(), d_v)).collect(),
            readout: Matrix::zeros(heads * d_v, vocab),
        })
    } else {
        None
    };

    for sample in batch {
        if sample.label >= vocab {
            return Err(Error::InvalidInput(format!(
                "label token {} outside vocab of size {vocab}",
                sample.label
            )));
        }
        let x = embeddings.embed_sequence(&sample.tokens);
        let t = sample.query_index;
        let mut forwards = Vec::with_capacity(heads);
        let mut concat_t = vec![0.0; heads * d_v];
        for h in 0..heads {
            let fwd = head_forward(model, h, &x)?;
            let ctx_row: Vec<f64> = (0..d_v)
                .map(|c| {
                    (0..x.rows())
                        .map(|j| fwd.weights.at(t, j) * fwd.v.at(j, c))
                        .sum()
                })
                .collect();
            concat_t[h * d_v..(h + 1) * d_v].copy_from_slice(&ctx_row);
            forwards.push(fwd);
        }
        // readout logits at the query position
        let z: Vec<f64> = (0..vocab)
            .map(|c| {
                (0..heads * d_v)
                    .map(|r| concat_t[r] * model.readout().at(r, c))
                    .sum()
            })
            .collect();
        let lse = log_sum_exp(&z);
        task_loss += scale * (lse - z[sample.label]);

        let Some(grads) = grads.as_mut() else { continue };
        // dz = (softmax(z) - onehot(label)) / B
        let mut dz: Vec<f64> = z.iter().map(|&v| (v - lse).exp() * scale).collect();
        dz[sample.label] -= scale;
        // readout gradient and context backprop
        let mut dconcat = vec![0.0; heads * d_v];
        for r in 0..heads * d_v
        {
            let cr = concat_t[r];
            let row = model.readout().row(r);
            let grow = grads.readout.row_mut(r);
            let mut acc = 0.0;
            for c in 0..vocab {
                grow[c] += cr * dz[c];
                acc += row[c] * dz[c];
            }
            dconcat[r] = acc;
        }
        let n = x.rows();
        for h in 0..heads {
            let fwd = &forwards[h];
            let dctx = &dconcat[h * d_v..(h + 1) * d_v];
            // g_j = dL/d alpha_{t->j}
            let mut g = vec![0.0; n];
            for j in 0..n {
                g[j] = dot(dctx, fwd.v.row(j));
            }
            // value path: dV[j] = a_{t,j} * dctx, dW_v += x_j^T dV[j]
            let a_row = fwd.weights.row(t);
            for j in 0..n {
                let aj = a_row[j];
                if aj == 0.0 {
                    continue;
                }
                let xj = x.row(j);
                let gv = &mut grads.w_v[h];
                for (r, &xr) in xj.iter().enumerate() {
                    if xr == 0.0 {
                        continue;
                    }
                    for c in 0..d_v {
                        gv.set(r, c, gv.at(r, c) + xr * aj * dctx[c]);
                    }
                }
            }
            // softmax backward on the query row:
            // dS_raw[t,j] = (1/tau) a_j (g_j - sum_l a_l g_l)
            let g_bar: f64 = (0..n).map(|j| a_row[j] * g[j]).sum();
            let ds: Vec<f64> = (0..n)
                .map(|j| a_row[j] * (g[j] - g_bar) / model.tau())
                .collect();
            // dq_t = sum_j dS[j] k_j ; dW_q += x_t^T dq_t
            let d_k = model.d_k();
            let mut dq = vec![0.0; d_k];
            for j in 0..n {
                if ds[j] == 0.0 {
                    continue;
                }
                for (c, &kc) in fwd.k.row(j).iter().enumerate() {
                    dq[c] += ds[j] * kc;
                }
            }
            let xt = x.row(t);
            let gq = &mut grads.w_q[h];
            for (r, &xr) in xt.iter().enumerate() {
                if xr == 0.0 {
                    continue;
                }
                for c in 0..d_k {
                    gq.set(r, c, gq.at(r, c) + xr * dq[c]);
                }
            }
            // dk_j = dS[j] q_t ; dW_k += sum_j x_j^T dk_j
            let qt = fwd.q.row(t);
            let gk = &mut grads.w_k[h];
            for j in 0..n {
                if ds[j] == 0.0 {
                    continue;
                }
                let xj = x.row(j);
                for (r, &xr) in xj.iter().enumerate() {
                    if xr == 0.0 {
                        continue;
                    }
                    for c in 0..d_k {
                        gk.set(r, c, gk.at(r, c) + xr * ds[j] * qt[c]);
                    }
                }
            }
        }
    }

    // value ridge contributes to both the loss and the smooth gradient
    let mut value_penalty = 0.0;
    for h in 0..heads {
        let w_v = &model.head(h).w_v;
        value_penalty += dial.beta * w_v.entries().iter().map(|v| v * v).sum::<f64>();
        if let Some(grads) = grads.as_mut() {
            grads.w_v[h].add_scaled(w_v, 2.0 * dial.beta);
        }
    }
    let mut group_penalty = 0.0;
    for h in 0..heads {
        for b in 0..partition.p() {
            let slice = partition.slice(b);
            let nq = model.head(h).w_q.frobenius_rows(slice.start, slice.end);
            let nk = model.head(h).w_k.frobenius_rows(slice.start, slice.end);
            group_penalty += dial.alpha[h][b] * (nq + nk);
        }
    }
    let breakdown = LossBreakdown {
        task_loss,
        group_penalty,
        value_penalty,
        total: task_loss + group_penalty + value_penalty,
    };
    Ok((breakdown, grads))
}

/// Max absolute gap between the assembled query gradient and the
/// rearranged form (1/tau) sum_j g_j a_j (k_j - kbar) with kbar the
/// attention-weighted key mean, over every sample and head in the batch.
pub fn softmax_gradient_identity_gap(
    model: &AttentionModel,
    batch: &[PointerSample],
    embeddings: &EmbeddingTable,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d_v = model.d_v();
    let vocab = model.vocab();
    let mut max_gap = 0.0f64;
    for sample in batch {
        let x = embeddings.embed_sequence(&sample.tokens);
        let t = sample.query_index;
        let n = x.rows();
        let mut forwards = Vec::with_capacity(model.heads());
        let mut concat_t = vec![0.0; model.heads() * d_v];
        for h in 0..model.heads() {
            let fwd = head_forward(model, h, &x)?;
            for c in 0..d_v {
                concat_t[h * d_v + c] = (0..n).map(|j| fwd.weights.at(t, j) * fwd.v.at(j, c)).sum();
            }
            forwards.push(fwd);
        }
        let z: Vec<f64> = (0..vocab)
            .map(|c| (0..concat_t.len()).map(|r| concat_t[r] * model.readout().at(r, c)).sum())
            .collect();
        let lse = log_sum_exp(&z);
        let mut dz: Vec<f64> = z.iter().map(|&v| (v - lse).exp()).collect();
        dz[sample.label] -= 1.0;
        for h in 0..model.heads() {
            let fwd = &forwards[h];
            let dctx: Vec<f64> = (0..d_v)
                .map(|c| (0..vocab).map(|v| model.readout().at(h * d_v + c, v) * dz[v]).sum())
                .collect();
            let a_row = fwd.weights.row(t);
            let g: Vec<f64> = (0..n).map(|j| dot(&dctx, fwd.v.row(j))).collect();
            // route 1: through the softmax Jacobian
            let g_bar: f64 = (0..n).map(|j| a_row[j] * g[j]).sum();
            let mut direct = vec![0.0; model.d_k()];
            for j in 0..n {
                let ds = a_row[j] * (g[j] - g_bar) / model.tau();
                for (c, &kc) in fwd.k.row(j).iter().enumerate() {
                    direct[c] += ds * kc;
                }
            }
            // route 2: (1/tau) sum_j g_j a_j (k_j - kbar)
            let mut k_bar = vec![0.0; model.d_k()];
            for j in 0..n {
                for (c, &kc) in fwd.k.row(j).iter().enumerate() {
                    k_bar[c] += a_row[j] * kc;
                }
            }
            for c in 0..model.d_k() {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g[j] * a_row[j] * (fwd.k.at(j, c) - k_bar[c]);
                }
                let rearranged = acc / model.tau();
                max_gap = max_gap.max((direct[c] - rearranged).abs());
            }
        }
    }
    Ok(max_gap)
}

/// Block soft-threshold: per group g with threshold t, zero the group when
/// its Frobenius norm is at most t, otherwise shrink it by (1 - t / norm).
pub fn prox_group(w: &Matrix, groups: &[(usize, usize)], thresholds: &[f64]) -> Result<Matrix> {
    if groups.len() != thresholds.len() {
        return Err(Error::InvalidParameter("one threshold per group required".into()));
    }
    if thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::InvalidParameter("thresholds must be nonnegative".into()));
    }
    let mut sorted: Vec<(usize, usize)> = groups.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(Error::InvalidParameter(format!(
                "overlapping groups {:?} and {:?}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(&(_, end)) = sorted.last() {
        if end > w.rows() {
            return Err(Error::InvalidParameter("group extends past the matrix rows".into()));
        }
    }
    let mut out = w.clone();
    for (&(r0, r1), &t) in groups.iter().zip(thresholds) {
        let norm = out.frobenius_rows(r0, r1);
        if norm <= t {
            out.zero_rows(r0, r1);
        } else {
            out.scale_rows(r0, r1, 1.0 - t / norm);
        }
    }
    Ok(out)
}

/// The penalty threshold (c_prime / tau) e^(-delta / tau): the smallest
/// group coefficient guaranteeing an off-block group vanishes at a
/// minimizer under the margin assumption.
pub fn threshold_lambda(c_prime: f64, tau: f64, delta: f64) -> Result<f64> {
    if !(c_prime > 0.0) {
        return Err(Error::InvalidParameter(format!("c_prime must be positive, got {c_prime}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    if delta < 0.0 {
        return Err(Error::InvalidParameter(format!("delta must be nonnegative, got {delta}")));
    }
    Ok(c_prime / tau * (-delta / tau).exp())
}

/// Empirical constants for the threshold formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CPrimeEstimate {
    /// max over queries and keys of |dL/d alpha_{t->j}| on the batch.
    pub c: f64,
    /// c * |X_i| * block covariance norm.
    pub c_prime: f64,
}

pub fn estimate_c_prime(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    block: &str,
) -> Result<CPrimeEstimate> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let b = partition.block_index(block)?;
    let c = max_attention_partial(model, batch, embeddings)?;
    let block_size = (0..partition.vocab_len())
        .filter(|&t| partition.token_block(t) == b)
        .count();
    let cov = block_cov_norm(partition, embeddings, block)?;
    Ok(CPrimeEstimate {
        c,
        c_prime: c * block_size as f64 * cov,
    })
}

/// max |dL/d alpha_{t->j}| over the batch, per-sample losses (no batch mean).
fn max_attention_partial(
    model: &AttentionModel,
    batch: &[PointerSample],
    embeddings: &EmbeddingTable,
) -> Result<f64> {
    let d_v = model.d_v();
    let vocab = model.vocab();
    let mut c_max = 0.0f64;
    for sample in batch {
        let x = embeddings.embed_sequence(&sample.tokens);
        let t = sample.query_index;
        let n = x.rows();
        let mut forwards = Vec::with_capacity(model.heads());
        let mut concat_t = vec![0.0; model.heads() * d_v];
        for h in 0..model.heads() {
            let fwd = head_forward(model, h, &x)?;
            for c in 0..d_v {
                concat_t[h * d_v + c] = (0..n).map(|j| fwd.weights.at(t, j) * fwd.v.at(j, c)).sum();
            }
            forwards.push(fwd);
        }
        let z: Vec<f64> = (0..vocab)
            .map(|c| (0..concat_t.len()).map(|r| concat_t[r] * model.readout().at(r, c)).sum())
            .collect();
        let lse = log_sum_exp(&z);
        let mut dz: Vec<f64> = z.iter().map(|&v| (v - lse).exp()).collect();
        dz[sample.label] -= 1.0;
        for h in 0..model.heads() {
            let fwd = &forwards[h];
            let dctx: Vec<f64> = (0..d_v)
                .map(|c| (0..vocab).map(|v| model.readout().at(h * d_v + c, v) * dz[v]).sum())
                .collect();
            for j in 0..n {
                c_max = c_max.max(dot(&dctx, fwd.v.row(j)).abs());
            }
        }
    }
    Ok(c_max)
}

/// Cross-block gradient bound: actual Frobenius norm of
/// the task-loss gradient on the block's W_Q rows (queries governed by
/// other blocks only) against (c_prime / tau) times the measured attention
/// mass on the block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossBlockBound {
    pub actual_grad_norm: f64,
    pub bound: f64,
}

pub fn cross_block_grad_bound(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    block: &str,
    tau: f64,
) -> Result<CrossBlockBound> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("tau must be positive".into()));
    }
    let b = partition.block_index(block)?;
    let filtered: Vec<PointerSample> = batch
        .iter()
        .filter(|s| s.governing_block_index(partition).map(|g| g != b).unwrap_or(false))
        .cloned()
        .collect();
    if filtered.is_empty() {
        return Ok(CrossBlockBound { actual_grad_norm: 0.0, bound: 0.0 });
    }
    // task-only gradient (beta = 0, alpha = 0)
    let dial = DialSettings {
        alpha: vec![vec![0.0; partition.p()]; model.heads()],
        beta: 0.0,
        tau: model.tau(),
        delta_target: vec![0.0; partition.p()],
        designated: vec![None; model.heads()],
    };
    let grads = grad_smooth(model, &filtered, partition, embeddings, &dial)?;
    let slice = partition.slice(b);
    let mut actual = 0.0f64;
    for h in 0..model.heads() {
        actual = actual.max(grads.w_q[h].frobenius_rows(slice.start, slice.end));
    }
    // measured attention mass on the block, maxed over queries and heads
    let mut max_mass = 0.0f64;
    for sample in &filtered {
        let x = embeddings.embed_sequence(&sample.tokens);
        for h in 0..model.heads() {
            let fwd = head_forward(model, h, &x)?;
            let mass: f64 = sample
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, &tok)| partition.token_block(tok) == b)
                .map(|(j, _)| fwd.weights.at(sample.query_index, j))
                .sum();
            max_mass = max_mass.max(mass);
        }
    }
    let est = estimate_c_prime(model, &filtered, partition, embeddings, block)?;
    Ok(CrossBlockBound {
        actual_grad_norm: actual,
        bound: est.c_prime / tau * max_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KktStatus {
    ZeroSatisfied,
    ZeroViolated,
    Active,
}

/// One (head, block, projection) group in the KKT report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktEntry {
    pub head: usize,
    pub block: String,
    pub projection: Projection,
    pub group_norm: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub status: KktStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub tol: f64,
    pub entries: Vec<KktEntry>,
}

impl KktReport {
    pub fn zero_violated(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == KktStatus::ZeroViolated)
            .count()
    }

    pub fn exact_zero_groups(&self) -> usize {
        self.entries.iter().filter(|e| e.group_norm == 0.0).count()
    }
}

/// Verify the stationarity condition for group sparsity: a zeroed group is
/// satisfied when its smooth-gradient norm does not exceed its penalty
/// coefficient (plus tolerance); nonzero groups are reported as active.
pub fn kkt_check(
    model: &AttentionModel,
    batch: &[PointerSample],
    partition: &BlockPartition,
    embeddings: &EmbeddingTable,
    dial: &DialSettings,
    tol: f64,
) -> Result<KktReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("kkt tolerance must be positive".into()));
    }
    let grads = grad_smooth(model, batch, partition, embeddings, dial)?;
    let mut entries = Vec::new();
    for h in 0..model.heads() {
        for b in 0..partition.p() {
            let slice = partition.slice(b);
            for (projection, w, g) in [
                (Projection::Q, &model.head(h).w_q, &grads.w_q[h]),
                (Projection::K, &model.head(h).w_k, &grads.w_k[h]),
            ] {
                let group_norm = w.frobenius_rows(slice.start, slice.end);
                let grad_norm = g.frobenius_rows(slice.start, slice.end);
                let alpha = dial.alpha[h][b];
                let status = if group_norm == 0.0 {
                    if grad_norm <= alpha + tol {
                        KktStatus::ZeroSatisfied
                    } else {
                        KktStatus::ZeroViolated
                    }
                } else {
                    KktStatus::Active
                };
                entries.push(KktEntry {
                    head: h,
                    block: partition.block_label(b).to_string(),
                    projection,
                    group_norm,
                    grad_norm,
                    alpha,
                    status,
                });
            }
        }
    }
    Ok(KktReport { tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{init_anchor_aligned, ModelConfig};
    use crate::numerics::{grad_check, RngState};
    use crate::partition::{build_partition, PartitionSpec};
    use crate::taskgen::{generate, TaskConfig};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "left {a}, right {b}, tol {tol}");
    }

    fn small_instance(seed: u64) -> (
        BlockPartition,
        EmbeddingTable,
        Vec<PointerSample>,
        AttentionModel,
        DialSettings,
    ) {
        let spec = PartitionSpec {
            blocks: 2,
            anchors_per_block: 1,
            fillers_per_block: 2,
            d_per_block: 4,
        };
        let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(seed)).unwrap();
        let config = TaskConfig {
            sequence_length: 5,
            blocks_present_per_sample: 2,
            redundancy_k: 1,
            distractors: 1,
            samples: 6,
            seed,
        };
        let batch = generate(&config, &partition, &mut RngState::from_seed(seed ^ 1)).unwrap();
        let model_cfg = ModelConfig {
            heads: 2,
            d_k: 3,
            d_v: 3,
            tau: 0.9,
            init_margin: 0.8,
            init_noise: 0.15,
            value_scale: 0.4,
            readout_scale: 0.3,
        };
        let model =
            init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(seed ^ 2)).unwrap();
        let dial = DialSettings {
            alpha: vec![vec![0.7, 0.3], vec![0.2, 0.5]],
            beta: 1e-3,
            tau: 0.9,
            delta_target: vec![1.0, 1.0],
            designated: vec![Some(0), Some(1)],
        };
        (partition, embeddings, batch, model, dial)
    }

    #[test]
    fn loss_breakdown_sums() {
        let (partition, embeddings, batch, model, dial) = small_instance(3);
        let breakdown = loss(&model, &batch, &partition, &embeddings, &dial).unwrap();
        approx(
            breakdown.total,
            breakdown.task_loss + breakdown.group_penalty + breakdown.value_penalty,
            1e-10,
        );
        // alpha = beta = 0 leaves only the task loss
        let free = DialSettings {
            alpha: vec![vec![0.0; 2]; 2],
            beta: 0.0,
            ..dial.clone()
        };
        let b2 = loss(&model, &batch, &partition, &embeddings, &free).unwrap();
        approx(b2.total, b2.task_loss, 0.0);
        assert_eq!(b2.group_penalty, 0.0);
        assert_eq!(b2.value_penalty, 0.0);
    }

    #[test]
    fn zero_weights_zero_penalties() {
        let (partition, embeddings, batch, mut model, dial) = small_instance(4);
        for h in 0..model.heads() {
            let head = model.head_mut(h);
            head.w_q = Matrix::zeros(8, 3);
            head.w_k = Matrix::zeros(8, 3);
            head.w_v = Matrix::zeros(8, 3);
        }
        let b = loss(&model, &batch, &partition, &embeddings, &dial).unwrap();
        assert_eq!(b.group_penalty, 0.0);
        assert_eq!(b.value_penalty, 0.0);
    }

    #[test]
    fn group_penalty_single_group_contribution() {
        // W_Q block-0 group with Frobenius norm 2 under alpha 3, everything
        // else zero: penalty contribution is 6.
        let (partition, embeddings, batch, mut model, mut dial) = small_instance(5);
        for h in 0..model.heads() {
            let head = model.head_mut(h);
            head.w_q = Matrix::zeros(8, 3);
            head.w_k = Matrix::zeros(8, 3);
            head.w_v = Matrix::zeros(8, 3);
        }
        model.head_mut(0).w_q.set(0, 0, 2.0);
        dial.alpha = vec![vec![3.0, 0.0], vec![0.0, 0.0]];
        dial.beta = 0.0;
        let b = loss(&model, &batch, &partition, &embeddings, &dial).unwrap();
        approx(b.group_penalty, 6.0, 1e-12);
    }

    #[test]
    fn smooth_gradients_match_finite_differences() {
        for seed in [11u64, 12, 13] {
            let (partition, embeddings, batch, model, dial) = small_instance(seed);
            let grads = grad_smooth(&model, &batch, &partition, &embeddings, &dial).unwrap();
            // check every parameter matrix against central differences of the
            // smooth objective (task + value ridge)
            let smooth = |m: &AttentionModel| {
                let b = loss(m, &batch, &partition, &embeddings, &dial).unwrap();
                b.task_loss + b.value_penalty
            };
            for h in 0..model.heads() {
                for (which, analytic) in [(0, &grads.w_q[h]), (1, &grads.w_k[h]), (2, &grads.w_v[h])] {
                    let at = match which {
                        0 => model.head(h).w_q.clone(),
                        1 => model.head(h).w_k.clone(),
                        _ => model.head(h).w_v.clone(),
                    };
                    let err = grad_check(
                        &mut |m: &Matrix| {
                            let mut probe = model.clone();
                            match which {
                                0 => probe.head_mut(h).w_q = m.clone(),
                                1 => probe.head_mut(h).w_k = m.clone(),
                                _ => probe.head_mut(h).w_v = m.clone(),
                            }
                            smooth(&probe)
                        },
                        analytic,
                        &at,
                        1e-5,
                    )
                    .unwrap();
                    assert!(err <= 1e-5, "seed {seed} head {h} matrix {which}: rel err {err}");
                }
            }
            let err = grad_check(
                &mut |m: &Matrix| {
                    let mut probe = model.clone();
                    *probe.readout_mut() = m.clone();
                    smooth(&probe)
                },
                &grads.readout,
                &model.readout().clone(),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5, "seed {seed} readout: rel err {err}");
        }
    }

    #[test]
    fn softmax_gradient_identity_holds() {
        let (_, embeddings, batch, model, _) = small_instance(21);
        let gap = softmax_gradient_identity_gap(&model, &batch, &embeddings).unwrap();
        assert!(gap <= 1e-9, "identity gap {gap}");
    }

    #[test]
    fn stationary_point_has_tiny_gradient() {
        // an oracle model with a decisive readout fits the task exactly;
        // scaling the readout drives the softmax onto the label and the
        // task gradient on W_Q below 1e-8
        let spec = PartitionSpec {
            blocks: 2,
            anchors_per_block: 1,
            fillers_per_block: 2,
            d_per_block: 4,
        };
        let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(31)).unwrap();
        let config = TaskConfig {
            sequence_length: 4,
            blocks_present_per_sample: 2,
            redundancy_k: 1,
            distractors: 0,
            samples: 8,
            seed: 32,
        };
        let batch = generate(&config, &partition, &mut RngState::from_seed(config.seed)).unwrap();
        let mut model = crate::attention::oracle_model(&partition, &embeddings, 1).unwrap();
        model.readout_mut().scale(80.0);
        let dial = DialSettings {
            alpha: vec![vec![0.0; 2]; 1],
            beta: 0.0,
            tau: model.tau(),
            delta_target: vec![0.0; 2],
            designated: vec![None],
        };
        let grads = grad_smooth(&model, &batch, &partition, &embeddings, &dial).unwrap();
        let norm = crate::numerics::frobenius(&grads.w_q[0]);
        assert!(norm <= 1e-8, "stationary W_Q gradient norm {norm}");
    }

    #[test]
    fn prox_group_examples() {
        let mut w = Matrix::zeros(4, 2);
        w.set(0, 0, 0.3);
        w.set(1, 1, 0.4); // group [0,2) has norm 0.5
        w.set(2, 0, 2.0); // group [2,4) has norm 2
        let groups = [(0usize, 2usize), (2, 4)];
        let out = prox_group(&w, &groups, &[1.0, 1.0]).unwrap();
        assert_eq!(out.frobenius_rows(0, 2), 0.0);
        approx(out.frobenius_rows(2, 4), 1.0, 1e-12);
        approx(out.at(2, 0), 1.0, 1e-12);
        // threshold 0 is the identity
        let same = prox_group(&w, &groups, &[0.0, 0.0]).unwrap();
        assert_eq!(same, w);
        // infinite threshold zeroes everything
        let zeroed = prox_group(&w, &groups, &[f64::INFINITY, f64::INFINITY]).unwrap();
        assert!(zeroed.entries().iter().all(|&v| v == 0.0));
        // overlapping groups are rejected
        assert!(prox_group(&w, &[(0, 3), (2, 4)], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn prox_group_subgradient_optimality() {
        // zero groups have input norm <= threshold; survivors satisfy
        // w_out = w_in - t * w_out / ||w_out||
        let mut rng = RngState::from_seed(41);
        for _ in 0..200 {
            let w = rng.normal_matrix(6, 3, 1.0);
            let t = rng.next_f64() * 3.0;
            let groups = [(0usize, 3usize), (3, 6)];
            let out = prox_group(&w, &groups, &[t, t]).unwrap();
            for &(r0, r1) in &groups {
                let out_norm = out.frobenius_rows(r0, r1);
                let in_norm = w.frobenius_rows(r0, r1);
                if out_norm == 0.0 {
                    assert!(in_norm <= t + 1e-9);
                } else {
                    for r in r0..r1 {
                        for c in 0..3 {
                            let lhs = out.at(r, c);
                            let rhs = w.at(r, c) - t * out.at(r, c) / out_norm;
                            approx(lhs, rhs, 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_lambda_examples() {
        approx(threshold_lambda(1.0, 1.0, 0.0).unwrap(), 1.0, 0.0);
        approx(threshold_lambda(5.0, 0.5, 1.0).unwrap(), 10.0 * (-2.0f64).exp(), 1e-12);
        approx(threshold_lambda(1.0, 0.1, 2.0).unwrap(), 10.0 * (-20.0f64).exp(), 1e-20);
        assert!(threshold_lambda(0.0, 1.0, 0.0).is_err());
        assert!(threshold_lambda(1.0, 0.0, 0.0).is_err());
        assert!(threshold_lambda(1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn threshold_lambda_decreasing_in_delta() {
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let delta = i as f64 * 0.25;
            let lambda = threshold_lambda(2.0, 0.7, delta).unwrap();
            assert!(lambda < prev);
            prev = lambda;
        }
    }

    #[test]
    fn c_prime_estimate_zero_gradient_batch() {
        let spec = PartitionSpec {
            blocks: 2,
            anchors_per_block: 1,
            fillers_per_block: 2,
            d_per_block: 4,
        };
        let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(51)).unwrap();
        let config = TaskConfig {
            sequence_length: 4,
            blocks_present_per_sample: 2,
            redundancy_k: 1,
            distractors: 0,
            samples: 4,
            seed: 52,
        };
        let batch = generate(&config, &partition, &mut RngState::from_seed(config.seed)).unwrap();
        // zero readout: every attention partial is exactly 0
        let mut model = crate::attention::oracle_model(&partition, &embeddings, 1).unwrap();
        model.readout_mut().scale(0.0);
        let est = estimate_c_prime(&model, &batch, &partition, &embeddings, "b0").unwrap();
        assert_eq!(est.c, 0.0);
        assert_eq!(est.c_prime, 0.0);
    }

    #[test]
    fn c_prime_is_product_of_parts() {
        let (partition, embeddings, batch, model, _) = small_instance(61);
        let est = estimate_c_prime(&model, &batch, &partition, &embeddings, "b1").unwrap();
        let cov = block_cov_norm(&partition, &embeddings, "b1").unwrap();
        let block_size = 3.0; // 1 anchor + 2 fillers
        approx(est.c_prime, est.c * block_size * cov, 1e-12);
        assert!(est.c > 0.0);
    }

    #[test]
    fn cross_block_bound_holds_on_random_instances() {
        for seed in [71u64, 72, 73] {
            let (partition, embeddings, batch, model, _) = small_instance(seed);
            for block in ["b0", "b1"] {
                let r = cross_block_grad_bound(&model, &batch, &partition, &embeddings, block, 0.9).unwrap();
                assert!(
                    r.actual_grad_norm <= r.bound + 1e-12,
                    "seed {seed} block {block}: actual {} > bound {}",
                    r.actual_grad_norm,
                    r.bound
                );
            }
        }
    }

    #[test]
    fn cross_block_bound_empty_filter() {
        let (partition, embeddings, batch, model, _) = small_instance(81);
        // restrict the batch to block-0 queries; the b0 filter then keeps nothing
        let b0_only: Vec<PointerSample> = batch
            .iter()
            .filter(|s| s.governing_block == "b0")
            .cloned()
            .collect();
        if b0_only.is_empty() {
            return;
        }
        let r = cross_block_grad_bound(&model, &b0_only, &partition, &embeddings, "b0", 0.9).unwrap();
        assert_eq!(r.bound, 0.0);
        assert!(r.actual_grad_norm <= 1e-9);
    }

    #[test]
    fn kkt_statuses() {
        let (partition, embeddings, batch, mut model, mut dial) = small_instance(91);
        // zero out head 0's block-1 groups and set alpha generously
        let slice = partition.slice(1);
        model.head_mut(0).w_q.zero_rows(slice.start, slice.end);
        model.head_mut(0).w_k.zero_rows(slice.start, slice.end);
        dial.alpha[0][1] = 1e6;
        let report = kkt_check(&model, &batch, &partition, &embeddings, &dial, 1e-6).unwrap();
        let entry = report
            .entries
            .iter()
            .find(|e| e.head == 0 && e.block == "b1" && e.projection == Projection::Q)
            .unwrap();
        assert_eq!(entry.status, KktStatus::ZeroSatisfied);
        assert_eq!(entry.group_norm, 0.0);
        // with a tiny alpha the same group is violated (gradient is nonzero)
        dial.alpha[0][1] = 0.0;
        let report = kkt_check(&model, &batch, &partition, &embeddings, &dial, 1e-9).unwrap();
        let entry = report
            .entries
            .iter()
            .find(|e| e.head == 0 && e.block == "b1" && e.projection == Projection::Q)
            .unwrap();
        assert!(
            entry.status == KktStatus::ZeroViolated || entry.grad_norm <= 1e-9,
            "group with zero alpha and nonzero gradient must be flagged"
        );
        // nonzero groups report as active
        let active = report
            .entries
            .iter()
            .find(|e| e.head == 1 && e.block == "b1")
            .unwrap();
        assert_eq!(active.status, KktStatus::Active);
    }

    #[test]
    fn loss_decreases_under_small_prox_steps() {
        let (partition, embeddings, batch, mut model, dial) = small_instance(101);
        let step = 0.01;
        let mut prev = loss(&model, &batch, &partition, &embeddings, &dial).unwrap().total;
        let groups: Vec<(usize, usize)> = partition.slices().iter().map(|s| (s.start, s.end)).collect();
        for _ in 0..40 {
            let grads = grad_smooth(&model, &batch, &partition, &embeddings, &dial).unwrap();
            for h in 0..model.heads() {
                let thresholds: Vec<f64> = dial.alpha[h].iter().map(|a| a * step).collect();
                let head = model.head_mut(h);
                head.w_q.add_scaled(&grads.w_q[h], -step);
                head.w_k.add_scaled(&grads.w_k[h], -step);
                head.w_v.add_scaled(&grads.w_v[h], -step);
                head.w_q = prox_group(&head.w_q, &groups, &thresholds).unwrap();
                head.w_k = prox_group(&head.w_k, &groups, &thresholds).unwrap();
            }
            model.readout_mut().add_scaled(&grads.readout, -step);
            let now = loss(&model, &batch, &partition, &embeddings, &dial).unwrap().total;
            assert!(now <= prev + 1e-9, "loss rose from {prev} to {now}");
            prev = now;
        }
    }
}
