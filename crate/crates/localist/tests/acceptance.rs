//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line. Run with `cargo test --test acceptance -- --nocapture` to see
//! every line; tests share the heavier trained fixtures.

use std::sync::OnceLock;

use localist::attention::{
    bound_rows, evaluate_dataset, init_anchor_aligned, AttentionModel, ModelConfig, SampleEval,
};
use localist::numerics::{grad_check, Matrix, RngState};
use localist::objective::{
    estimate_c_prime, loss, prox_group, softmax_gradient_identity_gap, threshold_lambda, DialSettings,
};
use localist::partition::{build_partition, estimate_margin, BlockPartition, EmbeddingTable, PartitionSpec};
use localist::rules::{
    compile, parse_rules, render_rules, CompilePolicy, Criticality, Rule, RuleStore,
};
use localist::taskgen::{generate, PointerSample, TaskConfig};
use localist::trainer::{
    evaluate_metrics, load_checkpoint, log_to_jsonl, resume, save_checkpoint, train, LogEntry,
    Regime, ScheduledConstraints, TrainerConfig, TrainingState,
};
use localist::verifier::{compliance_report, verdicts_from_evals};

const PARTITION_SEED: u64 = 7;
const TASK_SEED: u64 = 11;
const MODEL_SEED: u64 = 13;
const TRAIN_SEED: u64 = 17;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn desk_partition() -> (BlockPartition, EmbeddingTable) {
    let spec = PartitionSpec {
        blocks: 4,
        anchors_per_block: 1,
        fillers_per_block: 3,
        d_per_block: 6,
    };
    build_partition(spec, &mut RngState::from_seed(PARTITION_SEED)).unwrap()
}

fn desk_task(sequence_length: usize, redundancy_k: usize) -> TaskConfig {
    TaskConfig {
        sequence_length,
        blocks_present_per_sample: 4,
        redundancy_k,
        distractors: 2,
        samples: 512,
        seed: TASK_SEED,
    }
}

fn desk_model_config(tau: f64) -> ModelConfig {
    ModelConfig {
        heads: 4,
        d_k: 8,
        d_v: 6,
        tau,
        init_margin: 2.8,
        init_noise: 0.01,
        value_scale: 0.2,
        readout_scale: 0.1,
    }
}

fn desk_trainer(regime: Regime, steps: u64) -> TrainerConfig {
    TrainerConfig {
        step_size: 0.05,
        steps,
        batch_size: 64,
        seed: TRAIN_SEED,
        checkpoint_every: 20,
        eval_samples: 256,
        regime_preset: regime,
        dial: None,
    }
}

/// The shared localist run backing criteria 3, 5, 6, 7, and 12.
struct LocalistFixture {
    partition: BlockPartition,
    embeddings: EmbeddingTable,
    dataset: Vec<PointerSample>,
    state: TrainingState,
    evals: Vec<SampleEval>,
}

fn localist_fixture() -> &'static LocalistFixture {
    static FIXTURE: OnceLock<LocalistFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (partition, embeddings) = desk_partition();
        let task = desk_task(8, 1);
        let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
        let config = desk_trainer(Regime::Localist, 400);
        let model = init_anchor_aligned(
            &desk_model_config(0.1),
            &partition,
            &embeddings,
            &mut RngState::from_seed(MODEL_SEED),
        )
        .unwrap();
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        let designations = outcome.state.dial.designations();
        let evals = evaluate_dataset(
            &outcome.state.model,
            &dataset[..256],
            &partition,
            &embeddings,
            Some(&designations),
        )
        .unwrap();
        LocalistFixture {
            partition,
            embeddings,
            dataset,
            state: outcome.state,
            evals,
        }
    })
}

fn random_instance(seed: u64) -> (
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
    let task = TaskConfig {
        sequence_length: 5,
        blocks_present_per_sample: 2,
        redundancy_k: 1,
        distractors: 1,
        samples: 6,
        seed: seed ^ 0x5bd1,
    };
    let batch = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
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
    let model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(seed ^ 0xf00d)).unwrap();
    let dial = DialSettings {
        alpha: vec![vec![0.0; 2]; 2],
        beta: 1e-3,
        tau: 0.9,
        delta_target: vec![0.5; 2],
        designated: vec![Some(0), Some(1)],
    };
    (partition, embeddings, batch, model, dial)
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut seed = 100u64;
    while checked < 20 {
        assert!(seed < 200, "could not find 20 oracle-valid instances");
        let (partition, embeddings, batch, model, dial) = random_instance(seed);
        seed += 1;
        let grads = localist::objective::grad_smooth(&model, &batch, &partition, &embeddings, &dial).unwrap();
        // central differences resolve a coordinate to 1e-5 relative only
        // when its gradient clears the f64 cancellation floor; redraw
        // instances with nonzero coordinates under 2e-6
        let mut oracle_valid = true;
        for h in 0..model.heads() {
            for g in [&grads.w_q[h], &grads.w_k[h], &grads.w_v[h]] {
                if g.entries().iter().any(|&v| v != 0.0 && v.abs() < 2e-6) {
                    oracle_valid = false;
                }
            }
        }
        if grads.readout.entries().iter().any(|&v| v != 0.0 && v.abs() < 2e-6) {
            oracle_valid = false;
        }
        if !oracle_valid {
            continue;
        }
        checked += 1;
        let smooth = |m: &AttentionModel| {
            let b = loss(m, &batch, &partition, &embeddings, &dial).unwrap();
            b.task_loss + b.value_penalty
        };
        for h in 0..model.heads() {
            for (which, analytic) in [(0usize, &grads.w_q[h]), (1, &grads.w_k[h]), (2, &grads.w_v[h])] {
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
                worst = worst.max(err);
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
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    report(
        "01 gradient correctness",
        worst <= 1e-5 && elapsed.as_secs() < 30,
        &format!("max rel err {worst:.2e} <= 1e-5 over 20 instances in {elapsed:?}"),
    );
}

#[test]
fn criterion_02_softmax_gradient_identity() {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (_, embeddings, batch, model, _) = random_instance(seed + 300);
        let gap = softmax_gradient_identity_gap(&model, &batch, &embeddings).unwrap();
        worst = worst.max(gap);
    }
    report(
        "02 softmax gradient identity",
        worst <= 1e-9,
        &format!("max abs deviation {worst:.2e} <= 1e-9"),
    );
}

#[test]
fn criterion_03_exact_localization() {
    let fx = localist_fixture();
    // the preset must be the published localist setting
    let dial = &fx.state.dial;
    let preset_ok = dial.tau == 0.1
        && dial.delta_target.iter().all(|&d| d == 2.0)
        && dial
            .alpha
            .iter()
            .enumerate()
            .all(|(h, row)| row.iter().enumerate().all(|(b, &a)| {
                if dial.designated[h] == Some(b) { a == 0.0 } else { a == 10.0 }
            }));
    let designations = dial.designations();
    let mut off_block_norms_zero = true;
    for h in 0..fx.state.model.heads() {
        for b in 0..fx.partition.p() {
            if designations[h] == b {
                continue;
            }
            let slice = fx.partition.slice(b);
            let nq = fx.state.model.head(h).w_q.frobenius_rows(slice.start, slice.end);
            let nk = fx.state.model.head(h).w_k.frobenius_rows(slice.start, slice.end);
            if nq != 0.0 || nk != 0.0 {
                off_block_norms_zero = false;
            }
        }
    }
    let kkt = localist::objective::kkt_check(
        &fx.state.model,
        &fx.dataset[..256],
        &fx.partition,
        &fx.embeddings,
        dial,
        1e-6,
    )
    .unwrap();
    report(
        "03 exact localization",
        preset_ok && off_block_norms_zero && kkt.zero_violated() == 0,
        &format!(
            "preset honored: {preset_ok}; every off-block group norm exactly 0: {off_block_norms_zero}; kkt zero-violated = {}",
            kkt.zero_violated()
        ),
    );
}

#[test]
fn criterion_04_threshold_formula_behavior() {
    let (partition, embeddings) = desk_partition();
    let task = desk_task(8, 1);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
    let tau = 1.0;
    let model_cfg = desk_model_config(tau);
    let init_model =
        init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(MODEL_SEED)).unwrap();

    // estimate lambda from the designed margin and measured C' at the start
    let batch = &dataset[..64];
    let margins = estimate_margin(&init_model, batch, &partition, &embeddings).unwrap();
    let delta_hat = margins
        .iter()
        .map(|m| m.mean_margin)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let mut lambda_hat = 0.0f64;
    for block in partition.block_ids() {
        let est = estimate_c_prime(&init_model, batch, &partition, &embeddings, block).unwrap();
        lambda_hat = lambda_hat.max(threshold_lambda(est.c_prime.max(1e-12), tau, delta_hat).unwrap());
    }

    let mut zero_counts = Vec::new();
    let mut off_zero_flags = Vec::new();
    for factor in [0.1, 1.0, 10.0] {
        let alpha = factor * lambda_hat;
        let designated: Vec<Option<usize>> = (0..4).map(|h| Some(h % 4)).collect();
        let dial = DialSettings {
            alpha: (0..4)
                .map(|h| (0..4).map(|b| if designated[h] == Some(b) { 0.0 } else { alpha }).collect())
                .collect(),
            beta: 1e-4,
            tau,
            delta_target: vec![delta_hat; 4],
            designated,
        };
        let mut config = desk_trainer(Regime::Custom, 600);
        config.checkpoint_every = 100;
        config.dial = Some(dial);
        let model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(MODEL_SEED)).unwrap();
        let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
        let record = evaluate_metrics(&outcome.state, &config, &dataset, &partition, &embeddings).unwrap();
        zero_counts.push(record.exact_zero_groups);
        off_zero_flags.push(record.off_designated_groups_zero);
    }
    let monotone = zero_counts[0] <= zero_counts[1] && zero_counts[1] <= zero_counts[2];
    report(
        "04 threshold formula behavior",
        off_zero_flags[2] && !off_zero_flags[0] && monotone,
        &format!(
            "lambda_hat {lambda_hat:.4} (delta_hat {delta_hat:.3}); zero groups at 0.1x/1x/10x = {zero_counts:?}; 10x all-off-zero {}, 0.1x not zeroed {}",
            off_zero_flags[2], !off_zero_flags[0]
        ),
    );
}

#[test]
fn criterion_05_per_key_concentration_bound() {
    let fx = localist_fixture();
    let rows = bound_rows(&fx.evals, &fx.state.dial.delta_target, fx.state.model.tau());
    let eligible: Vec<_> = rows.iter().filter(|r| r.margin >= 0.0).collect();
    let per_key_fail = eligible.iter().filter(|r| !r.step4_per_key_pass).count();
    let block_sum_pass = eligible.iter().filter(|r| r.step4_block_sum_pass).count();
    report(
        "05 per-key concentration bound",
        !eligible.is_empty() && per_key_fail == 0,
        &format!(
            "{} rows with margin >= 0: per-key failures {per_key_fail}; block-sum form holds on {block_sum_pass}/{} (reported, not gated)",
            eligible.len(),
            eligible.len()
        ),
    );
}

#[test]
fn criterion_06_entropy_upper_bound() {
    let fx = localist_fixture();
    let rows = bound_rows(&fx.evals, &fx.state.dial.delta_target, fx.state.model.tau());
    let premise: Vec<_> = rows.iter().filter(|r| r.premise_ok).collect();
    let violations = premise.iter().filter(|r| !r.cor1_pass).count();
    let mean_h = premise.iter().map(|r| r.h_t).sum::<f64>() / premise.len().max(1) as f64;
    report(
        "06 entropy upper bound",
        !premise.is_empty() && violations == 0 && mean_h <= 0.01,
        &format!(
            "{} premise rows, {violations} violations, mean H_t {mean_h:.3e} <= 0.01 nats",
            premise.len()
        ),
    );
}

#[test]
fn criterion_07_fidelity_lower_bound() {
    let fx = localist_fixture();
    let rows = bound_rows(&fx.evals, &fx.state.dial.delta_target, fx.state.model.tau());
    let premise: Vec<_> = rows.iter().filter(|r| r.premise_ok).collect();
    let violations = premise.iter().filter(|r| !r.cor2_pass).count();
    let mean_f = premise.iter().map(|r| r.fidelity).sum::<f64>() / premise.len().max(1) as f64;
    report(
        "07 fidelity lower bound",
        !premise.is_empty() && violations == 0 && mean_f >= 0.99,
        &format!(
            "{} premise rows, {violations} violations, mean fidelity {mean_f:.6} >= 0.99",
            premise.len()
        ),
    );
}

fn redundancy_run(k: usize) -> (f64, f64) {
    let (partition, embeddings) = desk_partition();
    let task = desk_task(10, k);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
    let config = desk_trainer(Regime::Localist, 400);
    let model = init_anchor_aligned(
        &desk_model_config(0.1),
        &partition,
        &embeddings,
        &mut RngState::from_seed(MODEL_SEED),
    )
    .unwrap();
    let outcome = train(&config, model, &dataset, &partition, &embeddings, None).unwrap();
    let designations = outcome.state.dial.designations();
    let evals = evaluate_dataset(&outcome.state.model, &dataset[..256], &partition, &embeddings, Some(&designations)).unwrap();
    let mut h = 0.0;
    let mut f = 0.0;
    let mut n = 0usize;
    for e in &evals {
        for o in &e.heads {
            if o.active {
                h += o.entropy;
                f += o.fidelity;
                n += 1;
            }
        }
    }
    (h / n as f64, f / n as f64)
}

#[test]
fn criterion_08_redundancy_tradeoff() {
    let (h1, f1) = redundancy_run(1);
    let (h3, f3) = redundancy_run(3);
    let dh = h3 - h1;
    let df = (f3 - f1).abs();
    let ln3 = 3.0f64.ln();
    report(
        "08 redundancy trade-off",
        (dh - ln3).abs() <= 0.15 && df <= 0.01,
        &format!("entropy shift {dh:.4} within log 3 = {ln3:.4} +/- 0.15; fidelity change {df:.4} <= 0.01"),
    );
}

#[test]
fn criterion_09_prox_correctness() {
    let mut rng = RngState::from_seed(909);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    while checked < 1000 {
        let w = rng.normal_matrix(6, 3, 1.2);
        let t = rng.next_f64() * 2.5;
        let groups = [(0usize, 3usize), (3, 6)];
        let out = prox_group(&w, &groups, &[t, t]).unwrap();
        for &(r0, r1) in &groups {
            let out_norm = out.frobenius_rows(r0, r1);
            if out_norm == 0.0 {
                let residual = (w.frobenius_rows(r0, r1) - t).max(0.0);
                worst = worst.max(residual);
            } else {
                for r in r0..r1 {
                    for c in 0..3 {
                        let lhs = out.at(r, c);
                        let rhs = w.at(r, c) - t * out.at(r, c) / out_norm;
                        worst = worst.max((lhs - rhs).abs());
                    }
                }
            }
            checked += 1;
        }
    }
    // exact identity at threshold 0, exact zeroing at infinity
    let mut exact = true;
    for _ in 0..20 {
        let w = rng.normal_matrix(4, 2, 1.0);
        let groups = [(0usize, 2usize), (2, 4)];
        let same = prox_group(&w, &groups, &[0.0, 0.0]).unwrap();
        exact &= same == w;
        let zeroed = prox_group(&w, &groups, &[f64::INFINITY, f64::INFINITY]).unwrap();
        exact &= zeroed.entries().iter().all(|&v| v == 0.0);
    }
    report(
        "09 prox correctness",
        worst <= 1e-9 && exact,
        &format!("subgradient residual {worst:.2e} <= 1e-9 over {checked} groups; 0/inf thresholds exact: {exact}"),
    );
}

fn hot_reload_run() -> (Vec<LogEntry>, TrainingState, BlockPartition, EmbeddingTable, Vec<PointerSample>, Rule) {
    let (partition, embeddings) = desk_partition();
    let task = desk_task(8, 1);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
    let model_cfg = desk_model_config(1.0);
    let model = init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(MODEL_SEED)).unwrap();
    // compile a high-criticality rule against the starting model
    let rule = Rule::new("safety", 1, Criticality::High, "trigger:b2", "b2");
    let calibration = localist::cli::calibrate(&model, &dataset[..64], &partition, &embeddings, 1.0).unwrap();
    let mut policy = CompilePolicy::all_heads(4);
    policy.floor = 5.0;
    let constraint = compile(&rule, &partition, &calibration, &policy).unwrap();
    let mut feed = ScheduledConstraints::new(vec![(200, vec![constraint])]);
    let config = desk_trainer(Regime::Distributed, 400);
    let outcome = train(&config, model, &dataset, &partition, &embeddings, Some(&mut feed)).unwrap();
    (outcome.log, outcome.state, partition, embeddings, dataset, rule)
}

#[test]
fn criterion_10_hot_reload_end_to_end() {
    let (log, state, partition, embeddings, dataset, rule) = hot_reload_run();
    // (a) the injection event sits on a checkpoint boundary
    let injection_step = log
        .iter()
        .find_map(|e| match e {
            LogEntry::Injection(ev) => Some(ev.step),
            _ => None,
        })
        .expect("an injection event");
    let at_boundary = injection_step % 20 == 0 && injection_step == 200;
    // (b) governed-query leakage strictly decreasing across the next 3 checkpoints
    let target = partition.block_index(&rule.target_block).unwrap();
    let mut post: Vec<f64> = Vec::new();
    for entry in &log {
        if let LogEntry::Metrics(m) = entry {
            if m.step > injection_step && post.len() < 3 {
                post.push(m.leakage_by_governing_block[target]);
            }
        }
    }
    let strictly_decreasing = post.len() == 3 && post[0] > post[1] && post[1] > post[2];
    // (c) final compliance for the injected rule
    let designations = state.dial.designations();
    let evals = evaluate_dataset(&state.model, &dataset, &partition, &embeddings, Some(&designations)).unwrap();
    let verdicts = verdicts_from_evals(&evals, &dataset, std::slice::from_ref(&rule), &partition).unwrap();
    let report_c = compliance_report(&verdicts, (0, 400)).unwrap();
    let rate = report_c.rate_for(&rule.id).unwrap_or(0.0);
    // (d) determinism: the whole thing reproduces bit for bit
    let (log2, ..) = hot_reload_run();
    let reproduced = log_to_jsonl(&log) == log_to_jsonl(&log2);
    report(
        "10 hot reload end-to-end",
        at_boundary && strictly_decreasing && rate >= 0.95 && reproduced,
        &format!(
            "injection at step {injection_step} (boundary {at_boundary}); governed leakage {post:?} strictly decreasing {strictly_decreasing}; rule compliance {rate:.4} >= 0.95; deterministic re-run {reproduced}"
        ),
    );
}

#[test]
fn criterion_11_checkpoint_determinism() {
    let (partition, embeddings) = desk_partition();
    let task = desk_task(8, 1);
    let dataset = generate(&task, &partition, &mut RngState::from_seed(task.seed)).unwrap();
    let model_cfg = desk_model_config(0.1);
    let model = || {
        init_anchor_aligned(&model_cfg, &partition, &embeddings, &mut RngState::from_seed(MODEL_SEED)).unwrap()
    };
    let full_config = desk_trainer(Regime::Localist, 100);
    let full = train(&full_config, model(), &dataset, &partition, &embeddings, None).unwrap();

    let half_config = desk_trainer(Regime::Localist, 50);
    let first = train(&half_config, model(), &dataset, &partition, &embeddings, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.json");
    save_checkpoint(&first.state, &path).unwrap();
    let reloaded = load_checkpoint(&path, Some(&first.state.partition_checksum)).unwrap();
    let second = resume(reloaded, &full_config, &dataset, &partition, &embeddings, None, 50).unwrap();

    let mut combined = first.log.clone();
    combined.extend(second.log.clone());
    let identical = log_to_jsonl(&full.log) == log_to_jsonl(&combined) && full.state == second.state;
    report(
        "11 checkpoint determinism",
        identical,
        "100-step metrics byte-identical to 50 + save + load + 50",
    );
}

#[test]
fn criterion_12_dial_monotonicity_at_inference() {
    let fx = localist_fixture();
    let designations = fx.state.dial.designations();
    let mut entropies = Vec::new();
    let mut fidelities = Vec::new();
    for tau in [1.0, 0.5, 0.1] {
        let mut dial = fx.state.dial.clone();
        dial.tau = tau;
        let model = localist::trainer::apply_dial(&fx.state.model, &dial).unwrap();
        let evals = evaluate_dataset(&model, &fx.dataset[..256], &fx.partition, &fx.embeddings, Some(&designations)).unwrap();
        let mut h = 0.0;
        let mut f = 0.0;
        let mut n = 0usize;
        for e in &evals {
            for o in &e.heads {
                if o.active {
                    h += o.entropy;
                    f += o.fidelity;
                    n += 1;
                }
            }
        }
        entropies.push(h / n as f64);
        fidelities.push(f / n as f64);
    }
    let entropy_monotone = entropies[0] >= entropies[1] && entropies[1] >= entropies[2];
    let fidelity_monotone = fidelities[0] <= fidelities[1] && fidelities[1] <= fidelities[2];
    report(
        "12 dial monotonicity at inference",
        entropy_monotone && fidelity_monotone,
        &format!("entropy {entropies:?} non-increasing; fidelity {fidelities:?} non-decreasing"),
    );
}

#[test]
fn criterion_13_rule_store_and_dsl() {
    // optimistic concurrency
    let mut store = RuleStore::in_memory();
    let stored = store.put(Rule::new("r1", 1, Criticality::High, "trigger:b0", "b0"), None).unwrap();
    let mut w1 = stored.clone();
    w1.priority = 2;
    let mut w2 = stored.clone();
    w2.priority = 3;
    store.put(w1, Some(1)).unwrap();
    let conflict = store.put(w2, Some(1)).is_err();
    // history immutability: versions stay 1..n with their original bodies
    let mut rule = store.get("r1", None).unwrap().clone();
    for i in 0..4 {
        rule.priority = 10 + i;
        rule = store.put(rule.clone(), Some(rule.version)).unwrap();
    }
    let versions = store.versions("r1").unwrap();
    let contiguous = versions.iter().enumerate().all(|(i, v)| v.version == i as u64 + 1);
    let immutable = store.get("r1", Some(1)).unwrap().priority == 1
        && store.get("r1", Some(2)).unwrap().priority == 2;
    // 50-rule DSL round trip
    let corpus: Vec<Rule> = (0..50)
        .map(|i| {
            let crit = match i % 3 {
                0 => Criticality::Low,
                1 => Criticality::Medium,
                _ => Criticality::High,
            };
            Rule::new(format!("rule_{i}"), i as i64, crit, format!("trigger:b{}", i % 4), format!("b{}", i % 4))
        })
        .collect();
    let parsed = parse_rules(&render_rules(&corpus)).unwrap();
    let round_trip = parsed.len() == 50
        && corpus.iter().zip(&parsed).all(|(a, b)| a.same_body(b));
    report(
        "13 rule store and DSL",
        conflict && contiguous && immutable && round_trip,
        &format!("conflict detected {conflict}; history contiguous {contiguous} and immutable {immutable}; 50-rule round trip {round_trip}"),
    );
}
