//! The observables the bound suites measure: attention entropy, pointer
//! fidelity, per-block leakage, and concentration verdicts, over a range
//! of temperatures on one fixed trace.
//!
//! Run with: `cargo run --example attention_observables`

use localist::attention::{check_concentration, entropy, fidelity, leakage, oracle_model};
use localist::numerics::RngState;
use localist::partition::{build_partition, PartitionSpec};
use localist::taskgen::{generate, TaskConfig};
use localist::trainer::apply_dial;

fn main() -> localist::Result<()> {
    let spec = PartitionSpec {
        blocks: 4,
        anchors_per_block: 1,
        fillers_per_block: 2,
        d_per_block: 6,
    };
    let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(3))?;
    let task = TaskConfig {
        sequence_length: 8,
        blocks_present_per_sample: 4,
        redundancy_k: 1,
        distractors: 2,
        samples: 4,
        seed: 5,
    };
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;
    let sample = &dataset[0];
    let governing = sample.governing_block_index(&partition)?;
    println!(
        "sample 0: governing block {}, query at {}, targets {:?}",
        sample.governing_block, sample.query_index, sample.target_span
    );

    // a reference model that keys every block's trigger onto its anchors
    let model = oracle_model(&partition, &embeddings, 1)?;
    let x = embeddings.embed_sequence(&sample.tokens);

    println!("\ntau      entropy    fidelity   off-block   wrong/best ratio");
    for tau in [4.0, 2.0, 1.0, 0.5, 0.25] {
        let mut dial = localist::objective::DialSettings {
            alpha: vec![vec![0.0; partition.p()]; 1],
            beta: 0.0,
            tau,
            delta_target: vec![0.0; partition.p()],
            designated: vec![None],
        };
        dial.tau = tau;
        let model = apply_dial(&model, &dial)?;
        let trace = model.forward(&x, &sample.tokens)?;
        let row = trace.weights[0].row(sample.query_index);
        let h = entropy(row)?;
        let f = fidelity(row, &sample.target_span)?;
        let leak = leakage(row, &sample.tokens, &partition, governing)?;
        println!(
            "{tau:<8} {h:<10.6} {f:<10.6} {:<11.6} {:.3e}",
            leak.off_block_total, leak.max_wrong_key_ratio
        );
    }

    // concentration verdicts at a margin/temperature pair
    let model = {
        let dial = localist::objective::DialSettings {
            alpha: vec![vec![0.0; partition.p()]; 1],
            beta: 0.0,
            tau: 0.5,
            delta_target: vec![0.0; partition.p()],
            designated: vec![None],
        };
        apply_dial(&model, &dial)?
    };
    let trace = model.forward(&x, &sample.tokens)?;
    let verdicts = check_concentration(&trace, &partition, 0, governing, 2.0, 0.5)?;
    let v = &verdicts[sample.query_index];
    println!("\nconcentration at delta=2.0, tau=0.5 for the query row:");
    println!(
        "  per-key ratio {:.3e} vs bound {:.3e}: per-key pass {}, block-sum pass {}",
        v.max_wrong_key_ratio, v.bound, v.per_key_pass, v.block_sum_pass
    );
    println!("\ntrace export preview: {}...", &trace.to_json()[..72.min(trace.to_json().len())]);
    Ok(())
}
