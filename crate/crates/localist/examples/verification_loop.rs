//! The closed verification loop: check outputs against active rules,
//! strengthen the margin target of any rule missing its compliance target,
//! bump its store version, recompile, hot reload, and keep training.
//!
//! Run with: `cargo run --example verification_loop`

use localist::attention::{evaluate_dataset, init_anchor_aligned, ModelConfig};
use localist::cli::calibrate;
use localist::numerics::RngState;
use localist::partition::{build_partition, PartitionSpec};
use localist::rules::{compile, CompilePolicy, Criticality, Rule, RuleStore};
use localist::taskgen::{generate, TaskConfig};
use localist::trainer::{hot_reload, init_state, resume, Regime, TrainerConfig};
use localist::verifier::{compliance_report, strengthen, verdicts_from_evals, StrengthenOutcome, StrengthenPolicy};

fn main() -> localist::Result<()> {
    let spec = PartitionSpec {
        blocks: 4,
        anchors_per_block: 1,
        fillers_per_block: 3,
        d_per_block: 6,
    };
    let (partition, embeddings) = build_partition(spec, &mut RngState::from_seed(7))?;
    let task = TaskConfig {
        sequence_length: 8,
        blocks_present_per_sample: 4,
        redundancy_k: 1,
        distractors: 2,
        samples: 512,
        seed: 11,
    };
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;
    let model_cfg = ModelConfig {
        heads: 4,
        d_k: 8,
        d_v: 6,
        tau: 1.0,
        init_margin: 2.8,
        init_noise: 0.01,
        value_scale: 0.2,
        readout_scale: 0.1,
    };
    let model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(13))?;
    let config = TrainerConfig {
        step_size: 0.05,
        steps: 0, // driven round by round below
        batch_size: 64,
        seed: 17,
        checkpoint_every: 20,
        eval_samples: 256,
        regime_preset: Regime::Distributed,
        dial: None,
    };

    // one medium-criticality rule per block, held in the versioned store
    let mut store = RuleStore::in_memory();
    for b in 0..4 {
        store.put(
            Rule::new(format!("r{b}"), 1, Criticality::Medium, format!("trigger:b{b}"), format!("b{b}")),
            None,
        )?;
    }
    let calibration = calibrate(&model, &dataset[..64], &partition, &embeddings, 1.0)?;
    // scope each rule to the head designated to its target block; rules
    // compiled for every head would fight each other's penalties
    let policy_for = |target: usize| {
        let mut policy = CompilePolicy::all_heads(4);
        policy.affected_heads = Some(vec![target]);
        policy.floor = 1.0;
        policy
    };
    let strengthen_policy = StrengthenPolicy::default();

    let mut state = init_state(&config, model, &partition, &embeddings)?;
    println!("round  step  per-rule compliance                     strengthened (new delta)");
    for round in 0..6 {
        // train one segment
        let outcome = resume(state, &config, &dataset, &partition, &embeddings, None, 20)?;
        state = outcome.state;

        // verify against the active rules
        let rules: Vec<Rule> = store.list().into_iter().cloned().collect();
        let designations = state.dial.designations();
        let evals = evaluate_dataset(&state.model, &dataset[..256], &partition, &embeddings, Some(&designations))?;
        let verdicts = verdicts_from_evals(&evals, &dataset[..256], &rules, &partition)?;
        let report = compliance_report(&verdicts, (state.step - 20, state.step))?;
        let rates: Vec<String> = report
            .per_rule
            .iter()
            .map(|r| format!("{}={:.2}", r.rule_id, r.rate))
            .collect();

        // strengthen violating rules and reload the recompiled constraints
        let mut strengthened = Vec::new();
        let mut constraints = Vec::new();
        for rule in &rules {
            match strengthen(rule, &report, &strengthen_policy) {
                StrengthenOutcome::Updated(updated) => {
                    let stored = store.put(updated, Some(rule.version))?;
                    strengthened.push(format!("{} (delta {:.2})", stored.id, stored.delta_override.unwrap()));
                    let target = partition.block_index(&stored.target_block)?;
                    constraints.push(compile(&stored, &partition, &calibration, &policy_for(target))?);
                }
                StrengthenOutcome::Saturated => {
                    strengthened.push(format!("{} saturated", rule.id));
                }
                StrengthenOutcome::NoChange => {}
            }
        }
        if !constraints.is_empty() {
            hot_reload(&mut state, &constraints, &partition, config.checkpoint_every)?;
        }
        println!(
            "{round:<6} {:<5} {:<40} {}",
            state.step,
            rates.join(" "),
            if strengthened.is_empty() { "none".to_string() } else { strengthened.join(", ") }
        );
    }
    println!("\nrule versions after the loop:");
    for rule in store.list() {
        println!(
            "  {}: version {}, margin target {:?}",
            rule.id, rule.version, rule.delta_override
        );
    }
    Ok(())
}
