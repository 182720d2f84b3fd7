//! Symbolic rules: a minimal DSL, a versioned append-only store with
//! optimistic concurrency, and the compiler that turns a rule into dial
//! updates through the penalty threshold formula.
//!
//! Grammar, one statement per rule, `#` comments:
//!
//! ```text
//! rule <id> priority <int> criticality <low|medium|high> {
//!     when class "<label>" then attend block "<block-id>";
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::threshold_lambda;
use crate::partition::BlockPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Low,
    Medium,
    High,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criticality::Low => write!(f, "low"),
            Criticality::Medium => write!(f, "medium"),
            Criticality::High => write!(f, "high"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComplianceStats {
    pub checked: u64,
    pub violated: u64,
}

impl ComplianceStats {
    pub fn rate(&self) -> Option<f64> {
        if self.checked == 0 {
            None
        } else {
            Some(1.0 - self.violated as f64 / self.checked as f64)
        }
    }
}

/// A stored symbolic rule. The DSL covers id, priority, criticality,
/// trigger class, and target block; version, timestamps, compliance stats,
/// and any strengthened margin target are store-side metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub version: u64,
    pub priority: i64,
    pub criticality: Criticality,
    pub trigger_class: String,
    pub target_block: String,
    /// Milliseconds since the epoch; 0 for rules parsed from files.
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(default)]
    pub compliance: ComplianceStats,
    /// Margin target raised by the verification loop; overrides the
    /// criticality-derived delta when set.
    #[serde(default)]
    pub delta_override: Option<f64>,
}

impl Rule {
    pub fn new(
        id: impl Into<String>,
        priority: i64,
        criticality: Criticality,
        trigger_class: impl Into<String>,
        target_block: impl Into<String>,
    ) -> Self {
        Rule {
            id: id.into(),
            version: 1,
            priority,
            criticality,
            trigger_class: trigger_class.into(),
            target_block: target_block.into(),
            created_at: 0,
            updated_at: 0,
            compliance: ComplianceStats::default(),
            delta_override: None,
        }
    }

    /// Equality on the DSL-expressible fields only.
    pub fn same_body(&self, other: &Rule) -> bool {
        self.id == other.id
            && self.priority == other.priority
            && self.criticality == other.criticality
            && self.trigger_class == other.trigger_class
            && self.target_block == other.target_block
    }
}

// ---------------------------------------------------------------------------
// DSL parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Int(i64),
    Str(String),
    LBrace,
    RBrace,
    Semi,
    Eof,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Ident(s) => format!("'{s}'"),
            Token::Int(v) => format!("integer {v}"),
            Token::Str(s) => format!("string \"{s}\""),
            Token::LBrace => "'{'".to_string(),
            Token::RBrace => "'}'".to_string(),
            Token::Semi => "';'".to_string(),
            Token::Eof => "end of input".to_string(),
        }
    }
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer { chars: text.chars().peekable(), line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error(&self, expected: &str, found: String) -> Error {
        Error::Parse {
            line: self.line,
            col: self.col,
            expected: expected.to_string(),
            found,
        }
    }

    fn next_token(&mut self) -> Result<(Token, usize, usize)> {
        loop {
            match self.chars.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('#') => {
                    while let Some(&c) = self.chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
        let (line, col) = (self.line, self.col);
        let Some(&c) = self.chars.peek() else {
            return Ok((Token::Eof, line, col));
        };
        let token = match c {
            '{' => {
                self.bump();
                Token::LBrace
            }
            '}' => {
                self.bump();
                Token::RBrace
            }
            ';' => {
                self.bump();
                Token::Semi
            }
            '"' => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some('"') => break,
                        Some('\n') | None => {
                            return Err(self.error("closing '\"'", "end of line".to_string()))
                        }
                        Some(c) => s.push(c),
                    }
                }
                Token::Str(s)
            }
            c if c.is_ascii_digit() || c == '-' => {
                let mut s = String::new();
                s.push(self.bump().unwrap());
                while let Some(&c) = self.chars.peek() {
                    if c.is_ascii_digit() {
                        s.push(self.bump().unwrap());
                    } else {
                        break;
                    }
                }
                let v = s
                    .parse::<i64>()
                    .map_err(|_| self.error("integer", format!("'{s}'")))?;
                Token::Int(v)
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_alphanumeric() || c == '_' || c == '-' || c == ':' {
                        s.push(self.bump().unwrap());
                    } else {
                        break;
                    }
                }
                Token::Ident(s)
            }
            other => return Err(self.error("a token", format!("'{other}'"))),
        };
        Ok((token, line, col))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    current: (Token, usize, usize),
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Result<Self> {
        let mut lexer = Lexer::new(text);
        let current = lexer.next_token()?;
        Ok(Parser { lexer, current })
    }

    fn advance(&mut self) -> Result<Token> {
        let next = self.lexer.next_token()?;
        Ok(std::mem::replace(&mut self.current, next).0)
    }

    fn error_here(&self, expected: &str) -> Error {
        Error::Parse {
            line: self.current.1,
            col: self.current.2,
            expected: expected.to_string(),
            found: self.current.0.describe(),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        match &self.current.0 {
            Token::Ident(s) if s == kw => {
                self.advance()?;
                Ok(())
            }
            _ => Err(self.error_here(&format!("'{kw}'"))),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String> {
        match &self.current.0 {
            Token::Ident(s) => {
                let s = s.clone();
                self.advance()?;
                Ok(s)
            }
            _ => Err(self.error_here(what)),
        }
    }

    fn expect_int(&mut self) -> Result<i64> {
        match self.current.0 {
            Token::Int(v) => {
                self.advance()?;
                Ok(v)
            }
            _ => Err(self.error_here("integer")),
        }
    }

    fn expect_string(&mut self, what: &str) -> Result<String> {
        match &self.current.0 {
            Token::Str(s) => {
                let s = s.clone();
                self.advance()?;
                Ok(s)
            }
            _ => Err(self.error_here(what)),
        }
    }

    fn expect_token(&mut self, token: Token, what: &str) -> Result<()> {
        if self.current.0 == token {
            self.advance()?;
            Ok(())
        } else {
            Err(self.error_here(what))
        }
    }

    fn parse_rule(&mut self) -> Result<Rule> {
        self.expect_keyword("rule")?;
        let id = self.expect_ident("rule id")?;
        self.expect_keyword("priority")?;
        let priority = self.expect_int()?;
        self.expect_keyword("criticality")?;
        let (crit_line, crit_col) = (self.current.1, self.current.2);
        let crit_word = self.expect_ident("'low', 'medium', or 'high'")?;
        let criticality = match crit_word.as_str() {
            "low" => Criticality::Low,
            "medium" => Criticality::Medium,
            "high" => Criticality::High,
            other => {
                return Err(Error::Parse {
                    line: crit_line,
                    col: crit_col,
                    expected: "'low', 'medium', or 'high'".to_string(),
                    found: format!("'{other}'"),
                })
            }
        };
        self.expect_token(Token::LBrace, "'{'")?;
        self.expect_keyword("when")?;
        self.expect_keyword("class")?;
        let trigger_class = self.expect_string("class label string")?;
        self.expect_keyword("then")?;
        self.expect_keyword("attend")?;
        self.expect_keyword("block")?;
        let target_block = self.expect_string("block id string")?;
        self.expect_token(Token::Semi, "';'")?;
        self.expect_token(Token::RBrace, "'}'")?;
        Ok(Rule::new(id, priority, criticality, trigger_class, target_block))
    }
}

/// Parse a `.rules` file into rules in file order.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>> {
    let mut parser = Parser::new(text)?;
    let mut rules: Vec<Rule> = Vec::new();
    while parser.current.0 != Token::Eof {
        let rule = parser.parse_rule()?;
        if rules.iter().any(|r| r.id == rule.id) {
            return Err(Error::InvalidInput(format!("duplicate rule id '{}' in file", rule.id)));
        }
        rules.push(rule);
    }
    Ok(rules)
}

/// Render a rule back to its DSL statement. `parse_rules(render_rules(..))`
/// round-trips the DSL-expressible fields.
pub fn render_rule(rule: &Rule) -> String {
    format!(
        "rule {} priority {} criticality {} {{ when class \"{}\" then attend block \"{}\"; }}",
        rule.id, rule.priority, rule.criticality, rule.trigger_class, rule.target_block
    )
}

pub fn render_rules(rules: &[Rule]) -> String {
    let mut out = String::new();
    for rule in rules {
        out.push_str(&render_rule(rule));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Versioned store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    op: String,
    id: String,
    version: u64,
    timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rule: Option<Rule>,
}

/// Append-only journal with an in-memory index: every version of every rule
/// is retained, puts use optimistic concurrency, deletes are tombstones.
#[derive(Debug)]
pub struct RuleStore {
    path: Option<PathBuf>,
    history: BTreeMap<String, Vec<Rule>>,
    deleted: BTreeMap<String, bool>,
}

fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RuleStore {
    pub fn in_memory() -> Self {
        RuleStore { path: None, history: BTreeMap::new(), deleted: BTreeMap::new() }
    }

    /// Open (or create) a journal file and rebuild the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = RuleStore {
            path: Some(path.clone()),
            history: BTreeMap::new(),
            deleted: BTreeMap::new(),
        };
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry = serde_json::from_str(line)?;
                store.apply(entry)?;
            }
        }
        Ok(store)
    }

    fn apply(&mut self, entry: JournalEntry) -> Result<()> {
        match entry.op.as_str() {
            "put" => {
                let rule = entry
                    .rule
                    .ok_or_else(|| Error::InvalidInput("journal put without rule".into()))?;
                let versions = self.history.entry(entry.id.clone()).or_default();
                if rule.version != versions.len() as u64 + 1 {
                    return Err(Error::InvalidInput(format!(
                        "journal for '{}' is not contiguous at version {}",
                        entry.id, rule.version
                    )));
                }
                versions.push(rule);
                self.deleted.insert(entry.id, false);
            }
            "delete" => {
                self.deleted.insert(entry.id, true);
            }
            other => {
                return Err(Error::InvalidInput(format!("unknown journal op '{other}'")));
            }
        }
        Ok(())
    }

    fn append(&self, entry: &JournalEntry) -> Result<()> {
        if let Some(path) = &self.path {
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(entry)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Insert or update. New ids need `base_version` None; updates must name
    /// the version they were read at, and a stale base is a conflict that
    /// leaves the store unchanged.
    pub fn put(&mut self, mut rule: Rule, base_version: Option<u64>) -> Result<Rule> {
        let current = self.history.get(&rule.id).map(|v| v.len() as u64).unwrap_or(0);
        match base_version {
            None if current == 0 => {}
            None => {
                return Err(Error::Conflict { id: rule.id, expected: 0, actual: current });
            }
            Some(base) if base == current && current > 0 => {}
            Some(base) => {
                return Err(Error::Conflict { id: rule.id, expected: base, actual: current });
            }
        }
        let now = now_millis();
        rule.version = current + 1;
        rule.updated_at = now;
        if current == 0 {
            rule.created_at = now;
        } else {
            rule.created_at = self.history[&rule.id][0].created_at;
        }
        let entry = JournalEntry {
            op: "put".to_string(),
            id: rule.id.clone(),
            version: rule.version,
            timestamp: now,
            rule: Some(rule.clone()),
        };
        self.append(&entry)?;
        self.history.entry(rule.id.clone()).or_default().push(rule.clone());
        self.deleted.insert(rule.id.clone(), false);
        Ok(rule)
    }

    /// Latest version by default, or a specific historical version.
    pub fn get(&self, id: &str, version: Option<u64>) -> Result<&Rule> {
        let versions = self
            .history
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("rule '{id}'")))?;
        match version {
            Some(v) => versions
                .get(v.saturating_sub(1) as usize)
                .filter(|r| r.version == v)
                .ok_or_else(|| Error::NotFound(format!("rule '{id}' version {v}"))),
            None => {
                if self.deleted.get(id).copied().unwrap_or(false) {
                    return Err(Error::NotFound(format!("rule '{id}' (deleted)")));
                }
                Ok(versions.last().expect("non-empty history"))
            }
        }
    }

    /// Latest non-deleted rules, ordered by id.
    pub fn list(&self) -> Vec<&Rule> {
        self.history
            .iter()
            .filter(|(id, _)| !self.deleted.get(*id).copied().unwrap_or(false))
            .map(|(_, versions)| versions.last().expect("non-empty history"))
            .collect()
    }

    /// Tombstone a rule; history stays readable through explicit versions.
    pub fn delete(&mut self, id: &str) -> Result<()> {
        if !self.history.contains_key(id) || self.deleted.get(id).copied().unwrap_or(false) {
            return Err(Error::NotFound(format!("rule '{id}'")));
        }
        let entry = JournalEntry {
            op: "delete".to_string(),
            id: id.to_string(),
            version: self.history[id].len() as u64,
            timestamp: now_millis(),
            rule: None,
        };
        self.append(&entry)?;
        self.deleted.insert(id.to_string(), true);
        Ok(())
    }

    pub fn versions(&self, id: &str) -> Result<&[Rule]> {
        self.history
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::NotFound(format!("rule '{id}'")))
    }
}

// ---------------------------------------------------------------------------
// Constraint compiler
// ---------------------------------------------------------------------------

/// Criticality -> margin target map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPolicy {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Default for DeltaPolicy {
    fn default() -> Self {
        DeltaPolicy { low: 0.5, medium: 1.0, high: 2.0 }
    }
}

impl DeltaPolicy {
    pub fn delta_for(&self, criticality: Criticality) -> f64 {
        match criticality {
            Criticality::Low => self.low,
            Criticality::Medium => self.medium,
            Criticality::High => self.high,
        }
    }
}

/// Compilation policy: which heads a rule touches and how far above the
/// theoretical threshold the emitted penalties sit. The threshold formula
/// is a lower bound that can be numerically tiny, so penalties take
/// max(safety_factor * lambda, floor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilePolicy {
    pub heads: usize,
    /// Heads the rule governs; None means every head.
    pub affected_heads: Option<Vec<usize>>,
    pub delta_policy: DeltaPolicy,
    pub safety_factor: f64,
    pub floor: f64,
}

impl CompilePolicy {
    pub fn all_heads(heads: usize) -> Self {
        CompilePolicy {
            heads,
            affected_heads: None,
            delta_policy: DeltaPolicy::default(),
            safety_factor: 10.0,
            floor: 0.0,
        }
    }
}

/// Per-block threshold inputs measured on a calibration batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// c_prime per block id.
    pub c_prime: BTreeMap<String, f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaUpdate {
    pub head: usize,
    pub block: String,
    pub alpha: f64,
}

/// A rule lowered to dial updates: the margin target and the off-target
/// penalty coefficients that establish the localization premise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledConstraint {
    pub rule_id: String,
    pub rule_version: u64,
    pub affected_heads: Vec<usize>,
    pub target_block: String,
    pub delta: f64,
    pub alpha_updates: Vec<AlphaUpdate>,
    pub tau: f64,
}

pub fn compile(
    rule: &Rule,
    partition: &BlockPartition,
    calibration: &Calibration,
    policy: &CompilePolicy,
) -> Result<CompiledConstraint> {
    if partition.block_index(&rule.target_block).is_err() {
        return Err(Error::Compile {
            rule: rule.id.clone(),
            reason: format!("unknown target block '{}'", rule.target_block),
        });
    }
    if policy.safety_factor < 1.0 {
        return Err(Error::Compile {
            rule: rule.id.clone(),
            reason: "safety factor below 1 would compile penalties under the threshold".into(),
        });
    }
    let delta = rule
        .delta_override
        .unwrap_or_else(|| policy.delta_policy.delta_for(rule.criticality));
    let affected: Vec<usize> = match &policy.affected_heads {
        Some(list) => list.clone(),
        None => (0..policy.heads).collect(),
    };
    let mut alpha_updates = Vec::new();
    for block in partition.block_ids() {
        if block == &rule.target_block {
            continue;
        }
        let c_prime = *calibration.c_prime.get(block).ok_or_else(|| Error::Compile {
            rule: rule.id.clone(),
            reason: format!("calibration has no c_prime for block '{block}'"),
        })?;
        if !(c_prime > 0.0) {
            return Err(Error::Compile {
                rule: rule.id.clone(),
                reason: format!("calibration c_prime for block '{block}' must be positive"),
            });
        }
        let lambda = threshold_lambda(c_prime, calibration.tau, delta)?;
        let alpha = (policy.safety_factor * lambda).max(policy.floor);
        for &head in &affected {
            alpha_updates.push(AlphaUpdate { head, block: block.clone(), alpha });
        }
    }
    Ok(CompiledConstraint {
        rule_id: rule.id.clone(),
        rule_version: rule.version,
        affected_heads: affected,
        target_block: rule.target_block.clone(),
        delta,
        alpha_updates,
        tau: calibration.tau,
    })
}

pub fn constraints_to_json(constraints: &[CompiledConstraint]) -> String {
    serde_json::to_string_pretty(constraints).expect("constraints serialize")
}

pub fn constraints_from_json(text: &str) -> Result<Vec<CompiledConstraint>> {
    Ok(serde_json::from_str(text)?)
}
