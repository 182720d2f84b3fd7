//! The optimization core: block soft-thresholding, the penalty threshold
//! formula, empirical C' estimation, and a KKT report.
//!
//! Run with: `cargo run --example prox_and_threshold`

use localist::attention::{init_anchor_aligned, ModelConfig};
use localist::numerics::{Matrix, RngState};
use localist::objective::{
    estimate_c_prime, kkt_check, prox_group, threshold_lambda, DialSettings, KktStatus,
};
use localist::partition::{build_partition, PartitionSpec};
use localist::taskgen::{generate, TaskConfig};

fn main() -> localist::Result<()> {
    println!("=== Block soft-threshold ===");
    let mut w = Matrix::zeros(4, 2);
    w.set(0, 0, 0.3);
    w.set(1, 1, 0.4); // rows 0..2 have norm 0.5
    w.set(2, 0, 2.0); // rows 2..4 have norm 2.0
    let groups = [(0usize, 2usize), (2, 4)];
    let out = prox_group(&w, &groups, &[1.0, 1.0])?;
    println!("group norms 0.5 and 2.0 under threshold 1.0:");
    println!("  -> {} and {} (weak group zeroed, strong group shrunk)",
        out.frobenius_rows(0, 2), out.frobenius_rows(2, 4));

    println!("\n=== Threshold formula lambda = (C'/tau) e^(-delta/tau) ===");
    println!("{:<8} {:<8} {:<12}", "tau", "delta", "lambda(C'=1)");
    for (tau, delta) in [(1.0, 0.0), (0.5, 1.0), (0.1, 2.0), (1.0, 2.0)] {
        println!("{tau:<8} {delta:<8} {:<12.6e}", threshold_lambda(1.0, tau, delta)?);
    }

    // a small instance for C' and the KKT report
    let spec = PartitionSpec {
        blocks: 3,
        anchors_per_block: 1,
        fillers_per_block: 2,
        d_per_block: 5,
    };
    let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(21))?;
    let task = TaskConfig {
        sequence_length: 6,
        blocks_present_per_sample: 3,
        redundancy_k: 1,
        distractors: 1,
        samples: 64,
        seed: 22,
    };
    let batch = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;
    let model_cfg = ModelConfig {
        heads: 3,
        d_k: 4,
        d_v: 4,
        tau: 1.0,
        init_margin: 1.5,
        init_noise: 0.05,
        value_scale: 0.3,
        readout_scale: 0.2,
    };
    let mut model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(23))?;

    println!("\n=== Empirical C' per block ===");
    for block in partition.block_ids() {
        let est = estimate_c_prime(&model, &batch, &partition, &embeddings, block)?;
        println!(
            "  {block}: C = {:.4}, C' = C x |X| x cov = {:.4}, lambda(tau=1, delta=1.5) = {:.5}",
            est.c,
            est.c_prime,
            threshold_lambda(est.c_prime.max(1e-12), 1.0, 1.5)?
        );
    }

    println!("\n=== KKT report after zeroing one group ===");
    let slice = partition.slice(2);
    model.head_mut(0).w_q.zero_rows(slice.start, slice.end);
    model.head_mut(0).w_k.zero_rows(slice.start, slice.end);
    let dial = DialSettings {
        alpha: vec![vec![0.5; 3]; 3],
        beta: 1e-4,
        tau: 1.0,
        delta_target: vec![1.0; 3],
        designated: vec![Some(0), Some(1), Some(2)],
    };
    let report = kkt_check(&model, &batch, &partition, &embeddings, &dial, 1e-6)?;
    for entry in report.entries.iter().filter(|e| e.head == 0) {
        let status = match entry.status {
            KktStatus::ZeroSatisfied => "zero-satisfied",
            KktStatus::ZeroViolated => "zero-violated",
            KktStatus::Active => "active",
        };
        println!(
            "  head 0, block {}, {:?}: ||W|| = {:.4}, ||grad|| = {:.4}, alpha = {}, {status}",
            entry.block, entry.projection, entry.group_norm, entry.grad_norm, entry.alpha
        );
    }
    println!("zero-violated entries: {}", report.zero_violated());
    Ok(())
}
