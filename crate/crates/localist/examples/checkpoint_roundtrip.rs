//! Checkpoint determinism: a saved and reloaded run continues bit-for-bit
//! identically to the uninterrupted one, and stale or corrupt files are
//! refused.
//!
//! Run with: `cargo run --example checkpoint_roundtrip`

use localist::attention::{init_anchor_aligned, ModelConfig};
use localist::numerics::RngState;
use localist::partition::{build_partition, PartitionSpec};
use localist::taskgen::{generate, TaskConfig};
use localist::trainer::{load_checkpoint, log_to_jsonl, resume, save_checkpoint, train, Regime, TrainerConfig};

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
        samples: 256,
        seed: 11,
    };
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed))?;
    let model_cfg = ModelConfig {
        heads: 4,
        d_k: 8,
        d_v: 6,
        tau: 0.1,
        init_margin: 2.8,
        init_noise: 0.01,
        value_scale: 0.2,
        readout_scale: 0.1,
    };
    let model = || {
        init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(13)).unwrap()
    };
    let config = |steps| TrainerConfig {
        step_size: 0.05,
        steps,
        batch_size: 64,
        seed: 17,
        checkpoint_every: 10,
        eval_samples: 128,
        regime_preset: Regime::Localist,
        dial: None,
    };

    // one uninterrupted 100-step run
    let full = train(&config(100), model(), &dataset, &partition, &embeddings, None)?;

    // 50 steps, save, reload, 50 more
    let first = train(&config(50), model(), &dataset, &partition, &embeddings, None)?;
    let dir = std::env::temp_dir().join("localist_checkpoint_demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("half.json");
    save_checkpoint(&first.state, &path)?;
    println!("saved checkpoint at step {} ({} bytes, 17-digit decimals)", first.state.step,
        std::fs::metadata(&path)?.len());

    let reloaded = load_checkpoint(&path, Some(&first.state.partition_checksum))?;
    println!("reloaded state equals saved state: {}", reloaded == first.state);
    let second = resume(reloaded, &config(100), &dataset, &partition, &embeddings, None, 50)?;

    let mut combined = first.log.clone();
    combined.extend(second.log.clone());
    println!(
        "metrics byte-identical (100 vs 50+save+load+50): {}",
        log_to_jsonl(&full.log) == log_to_jsonl(&combined)
    );
    println!("final models identical: {}", full.state == second.state);

    // a checkpoint from a different partition is refused
    match load_checkpoint(&path, Some("0000000000000000")) {
        Err(e) => println!("stale partition checksum -> {e}"),
        Ok(_) => unreachable!(),
    }
    // corrupt bytes are refused with no partial state
    std::fs::write(&path, "{\"schema\":\"localist.checkpoint\",\"version\":")?;
    match load_checkpoint(&path, None) {
        Err(_) => println!("corrupt file -> refused cleanly"),
        Ok(_) => unreachable!(),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
