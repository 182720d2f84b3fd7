//! The verification loop: symbolically check model outputs against active
//! rules, aggregate compliance, and strengthen margins when violations
//! exceed the policy threshold. Strengthened rules recompile to higher
//! penalties and re-enter the trainer through hot reload.

use serde::Serialize;

use crate::attention::{fidelity, AttentionTrace, SampleEval};
use crate::error::{Error, Result};
use crate::partition::{BlockPartition, TokenId};
use crate::rules::Rule;
use crate::taskgen::PointerSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    Compliant,
    Violated,
    SkippedNoRule,
}

/// One sample checked against the active rule set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub sample_index: usize,
    pub rule_id: Option<String>,
    pub status: VerdictStatus,
    pub predicted: TokenId,
    pub expected: TokenId,
    /// Block of the predicted token, for violation patterns.
    pub predicted_block: String,
    /// Mean over heads of attention mass on the target span.
    pub attention_fidelity: f64,
}

/// The rule governing a query token: highest priority first, then lowest
/// id, among rules whose trigger class matches.
pub fn governing_rule<'r>(rules: &'r [Rule], trigger_class: &str) -> Option<&'r Rule> {
    rules
        .iter()
        .filter(|r| r.trigger_class == trigger_class)
        .min_by(|a, b| b.priority.cmp(&a.priority).then(a.id.cmp(&b.id)))
}

/// Check one model output against the active rules. Samples whose query
/// class no rule covers come back as skipped-no-rule.
pub fn check_output(
    sample: &PointerSample,
    sample_index: usize,
    model_output: TokenId,
    trace: &AttentionTrace,
    rules: &[Rule],
    partition: &BlockPartition,
) -> Result<Verdict> {
    let query_class = partition.token_class(sample.tokens[sample.query_index]);
    let rule = governing_rule(rules, &query_class);
    let mut fid = 0.0;
    for weights in &trace.weights {
        fid += fidelity(weights.row(sample.query_index), &sample.target_span)?;
    }
    fid /= trace.weights.len() as f64;
    let predicted_block = partition
        .block_label(partition.token_block(model_output))
        .to_string();
    let status = match rule {
        None => VerdictStatus::SkippedNoRule,
        Some(_) if model_output == sample.label => VerdictStatus::Compliant,
        Some(_) => VerdictStatus::Violated,
    };
    Ok(Verdict {
        sample_index,
        rule_id: rule.map(|r| r.id.clone()),
        status,
        predicted: model_output,
        expected: sample.label,
        predicted_block,
        attention_fidelity: fid,
    })
}

/// Batch path over precomputed evaluations: same verdicts as repeated
/// `check_output` without a second forward pass.
pub fn verdicts_from_evals(
    evals: &[SampleEval],
    samples: &[PointerSample],
    rules: &[Rule],
    partition: &BlockPartition,
) -> Result<Vec<Verdict>> {
    if evals.len() != samples.len() {
        return Err(Error::InvalidInput("evals and samples must align".into()));
    }
    let mut verdicts = Vec::with_capacity(evals.len());
    for (eval, sample) in evals.iter().zip(samples) {
        let query_class = partition.token_class(sample.tokens[sample.query_index]);
        let rule = governing_rule(rules, &query_class);
        let fid = eval.heads.iter().map(|h| h.fidelity).sum::<f64>() / eval.heads.len() as f64;
        let status = match rule {
            None => VerdictStatus::SkippedNoRule,
            Some(_) if eval.predicted == eval.label => VerdictStatus::Compliant,
            Some(_) => VerdictStatus::Violated,
        };
        verdicts.push(Verdict {
            sample_index: eval.sample_index,
            rule_id: rule.map(|r| r.id.clone()),
            status,
            predicted: eval.predicted,
            expected: eval.label,
            predicted_block: partition
                .block_label(partition.token_block(eval.predicted))
                .to_string(),
            attention_fidelity: fid,
        });
    }
    Ok(verdicts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleCompliance {
    pub rule_id: String,
    pub checked: u64,
    pub violated: u64,
    pub rate: f64,
}

/// Compliance counts per rule plus violation patterns keyed by the block
/// of the wrongly predicted token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub window: (u64, u64),
    pub per_rule: Vec<RuleCompliance>,
    pub violation_patterns: Vec<(String, u64)>,
}

impl ComplianceReport {
    pub fn rate_for(&self, rule_id: &str) -> Option<f64> {
        self.per_rule.iter().find(|r| r.rule_id == rule_id).map(|r| r.rate)
    }
}

pub fn compliance_report(verdicts: &[Verdict], window: (u64, u64)) -> Result<ComplianceReport> {
    if verdicts.is_empty() {
        return Err(Error::InvalidInput("compliance_report: no verdicts".into()));
    }
    let mut per_rule: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    let mut patterns: std::collections::BTreeMap<String, u64> = Default::default();
    for v in verdicts {
        let Some(rule_id) = &v.rule_id else { continue };
        let entry = per_rule.entry(rule_id.clone()).or_insert((0, 0));
        entry.0 += 1;
        if v.status == VerdictStatus::Violated {
            entry.1 += 1;
            *patterns.entry(v.predicted_block.clone()).or_insert(0) += 1;
        }
    }
    Ok(ComplianceReport {
        window,
        per_rule: per_rule
            .into_iter()
            .map(|(rule_id, (checked, violated))| RuleCompliance {
                rule_id,
                checked,
                violated,
                rate: if checked > 0 { 1.0 - violated as f64 / checked as f64 } else { 1.0 },
            })
            .collect(),
        violation_patterns: patterns.into_iter().collect(),
    })
}

/// Margin-strengthening policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrengthenPolicy {
    pub target_rate: f64,
    pub delta_multiplier: f64,
    pub delta_cap: f64,
    /// Criticality -> base delta, for rules that have never been
    /// strengthened.
    pub delta_policy: crate::rules::DeltaPolicy,
}

impl Default for StrengthenPolicy {
    fn default() -> Self {
        StrengthenPolicy {
            target_rate: 0.95,
            delta_multiplier: 1.5,
            delta_cap: 4.0,
            delta_policy: crate::rules::DeltaPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrengthenOutcome {
    /// Updated rule body, ready for a store put (which bumps the version)
    /// and a recompile + hot reload.
    Updated(Rule),
    NoChange,
    /// Delta already at the cap with the rate still below target.
    Saturated,
}

/// Raise a rule's margin target when its compliance rate misses the
/// policy target. Delta never decreases and converges to the cap in at
/// most ceil(log(cap/delta0) / log(multiplier)) applications.
pub fn strengthen(rule: &Rule, report: &ComplianceReport, policy: &StrengthenPolicy) -> StrengthenOutcome {
    let Some(rate) = report.rate_for(&rule.id) else {
        return StrengthenOutcome::NoChange;
    };
    if rate >= policy.target_rate {
        return StrengthenOutcome::NoChange;
    }
    let current = rule
        .delta_override
        .unwrap_or_else(|| policy.delta_policy.delta_for(rule.criticality));
    if current >= policy.delta_cap {
        return StrengthenOutcome::Saturated;
    }
    let mut updated = rule.clone();
    updated.delta_override = Some((current * policy.delta_multiplier).min(policy.delta_cap));
    StrengthenOutcome::Updated(updated)
}

/// Fold a report's counts into a rule's stored compliance stats.
pub fn record_compliance(mut rule: Rule, report: &ComplianceReport) -> Rule {
    if let Some(r) = report.per_rule.iter().find(|r| r.rule_id == rule.id) {
        rule.compliance.checked += r.checked;
        rule.compliance.violated += r.violated;
    }
    rule
}

pub fn verdicts_to_jsonl(verdicts: &[Verdict]) -> String {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        out.push('\n');
    }
    out
}
