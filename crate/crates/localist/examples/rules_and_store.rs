//! The rule layer: DSL parsing and rendering, the versioned store with
//! optimistic concurrency and tombstones, and compilation into dial
//! updates through the threshold formula.
//!
//! Run with: `cargo run --example rules_and_store`

use localist::numerics::RngState;
use localist::partition::{build_partition, PartitionSpec};
use localist::rules::{
    compile, parse_rules, render_rule, Calibration, CompilePolicy, Criticality, Rule, RuleStore,
};

fn main() -> localist::Result<()> {
    println!("=== DSL ===");
    let text = r#"
# safety rules for the demo partition
rule interactions priority 10 criticality high {
    when class "trigger:b0" then attend block "b0";
}
rule dosage priority 5 criticality medium {
    when class "trigger:b1" then attend block "b1";
}
"#;
    let rules = parse_rules(text)?;
    for rule in &rules {
        println!("parsed: {}", render_rule(rule));
    }
    // a syntax error reports its exact position and what was expected
    let broken = "rule x priority 1 criticality high { when class \"a\" then attend block \"b\" }";
    match parse_rules(broken) {
        Err(e) => println!("\nbroken input -> {e}"),
        Ok(_) => unreachable!(),
    }

    println!("\n=== Versioned store ===");
    let mut store = RuleStore::in_memory();
    let stored = store.put(rules[0].clone(), None)?;
    println!("put '{}' -> version {}", stored.id, stored.version);
    let mut update = stored.clone();
    update.priority = 20;
    let v2 = store.put(update, Some(1))?;
    println!("update from base 1 -> version {}", v2.version);
    // a second writer holding the stale base version conflicts
    let mut stale = stored.clone();
    stale.priority = 99;
    match store.put(stale, Some(1)) {
        Err(e) => println!("stale write -> {e}"),
        Ok(_) => unreachable!(),
    }
    println!(
        "history: versions {:?}, latest priority {}",
        store.versions("interactions")?.iter().map(|r| r.version).collect::<Vec<_>>(),
        store.get("interactions", None)?.priority
    );
    store.put(rules[1].clone(), None)?;
    store.delete("dosage")?;
    println!(
        "after tombstoning 'dosage': list = {:?}, version 1 still readable: {}",
        store.list().iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        store.get("dosage", Some(1)).is_ok()
    );

    println!("\n=== Compilation to dial updates ===");
    let spec = PartitionSpec {
        blocks: 3,
        anchors_per_block: 1,
        fillers_per_block: 2,
        d_per_block: 4,
    };
    let (partition, _embeddings) = build_partition(spec, &mut RngState::from_seed(1))?;
    let rule = Rule::new("guard", 1, Criticality::High, "trigger:b2", "b2");
    let calibration = Calibration {
        c_prime: partition.block_ids().iter().map(|b| (b.clone(), 0.4)).collect(),
        tau: 0.5,
    };
    let mut policy = CompilePolicy::all_heads(2);
    policy.floor = 1.0;
    let constraint = compile(&rule, &partition, &calibration, &policy)?;
    println!(
        "rule '{}' (criticality {} -> delta {}) compiles to:",
        constraint.rule_id, rule.criticality, constraint.delta
    );
    for update in &constraint.alpha_updates {
        println!("  head {} block {}: alpha = {:.4}", update.head, update.block, update.alpha);
    }
    println!("(alpha = max(safety x lambda, floor); the target block itself is exempt)");
    Ok(())
}
