//! Cleaning filters: minimum duration, golden-question rules and removal of
//! interaction-space trials.
//!
//! Golden rules are predicates over per-trace aggregates, e.g.
//! `count(tap) >= 1 AND last(time_slider.value) > 0.5`. Supported aggregates
//! are `count` (frames with a nonzero value), `max`, `min`, `any` (1 if any
//! frame is nonzero) and `last`. Predicates combine comparisons with `AND`,
//! `OR`, `NOT` and parentheses.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureSchema, SessionTrace, Space};

pub const DEFAULT_MIN_DURATION_S: f64 = 2.0;

/// Splits traces into those spanning at least `threshold_s` seconds and the rest.
pub fn filter_min_duration(
    traces: Vec<SessionTrace>,
    threshold_s: f64,
) -> (Vec<SessionTrace>, Vec<SessionTrace>) {
    traces
        .into_iter()
        .partition(|t| !t.frames.is_empty() && t.duration() >= threshold_s)
}

pub fn exclude_interaction_tasks(traces: Vec<SessionTrace>) -> Vec<SessionTrace> {
    traces
        .into_iter()
        .filter(|t| t.label.map_or(true, |l| l.space() != Space::Interaction))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Aggregate {
    Count,
    Max,
    Min,
    Any,
    Last,
}

impl Aggregate {
    fn parse(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "count" => Aggregate::Count,
            "max" => Aggregate::Max,
            "min" => Aggregate::Min,
            "any" => Aggregate::Any,
            "last" => Aggregate::Last,
            _ => return None,
        })
    }

    fn eval(self, trace: &SessionTrace, feature: usize) -> f64 {
        let values = trace.frames.iter().map(|f| f.values[feature]);
        match self {
            Aggregate::Count => values.filter(|v| *v != 0.0).count() as f64,
            Aggregate::Max => values.fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Min => values.fold(f64::INFINITY, f64::min),
            Aggregate::Any => {
                let mut values = values;
                f64::from(u8::from(values.any(|v| v != 0.0)))
            }
            Aggregate::Last => values.last().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Compare {
        agg: Aggregate,
        feature: usize,
        op: CmpOp,
        value: f64,
    },
    Truthy {
        agg: Aggregate,
        feature: usize,
    },
}

impl Expr {
    fn eval(&self, trace: &SessionTrace) -> bool {
        match self {
            Expr::And(a, b) => a.eval(trace) && b.eval(trace),
            Expr::Or(a, b) => a.eval(trace) || b.eval(trace),
            Expr::Not(a) => !a.eval(trace),
            Expr::Truthy { agg, feature } => agg.eval(trace, *feature) != 0.0,
            Expr::Compare {
                agg,
                feature,
                op,
                value,
            } => {
                let lhs = agg.eval(trace, *feature);
                match op {
                    CmpOp::Lt => lhs < *value,
                    CmpOp::Le => lhs <= *value,
                    CmpOp::Gt => lhs > *value,
                    CmpOp::Ge => lhs >= *value,
                    CmpOp::Eq => lhs == *value,
                    CmpOp::Ne => lhs != *value,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Op(CmpOp),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> std::result::Result<Vec<Token>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push(Token::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Token::RParen);
            i += 1;
        } else if "<>=!".contains(c) {
            let two = chars.get(i + 1) == Some(&'=');
            let op = match (c, two) {
                ('<', true) => CmpOp::Le,
                ('<', false) => CmpOp::Lt,
                ('>', true) => CmpOp::Ge,
                ('>', false) => CmpOp::Gt,
                ('=', true) => CmpOp::Eq,
                ('!', true) => CmpOp::Ne,
                _ => return Err(format!("unexpected `{c}`")),
            };
            out.push(Token::Op(op));
            i += if two { 2 } else { 1 };
        } else if c.is_ascii_digit() || c == '-' || c == '.' {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || chars[i] == '-' && matches!(chars[i - 1], 'e' | 'E')) {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse().map_err(|_| format!("bad number `{text}`"))?;
            out.push(Token::Number(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || "_.".contains(chars[i])) {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else {
            return Err(format!("unexpected `{c}`"));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    schema: &'a FeatureSchema,
}

impl Parser<'_> {
    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.tokens.get(self.pos), Some(Token::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> std::result::Result<Expr, ParseFail> {
        let mut lhs = self.conjunction()?;
        while self.peek_keyword("or") {
            self.pos += 1;
            lhs = Expr::Or(Box::new(lhs), Box::new(self.conjunction()?));
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> std::result::Result<Expr, ParseFail> {
        let mut lhs = self.atom()?;
        while self.peek_keyword("and") {
            self.pos += 1;
            lhs = Expr::And(Box::new(lhs), Box::new(self.atom()?));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> std::result::Result<Expr, ParseFail> {
        if self.peek_keyword("not") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.atom()?)));
        }
        match self.next() {
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(ParseFail::Syntax("expected `)`".into())),
                }
            }
            Some(Token::Ident(name)) => {
                let agg = Aggregate::parse(&name)
                    .ok_or_else(|| ParseFail::Syntax(format!("unknown aggregate `{name}`")))?;
                if self.next() != Some(Token::LParen) {
                    return Err(ParseFail::Syntax(format!("expected `(` after {name}")));
                }
                let feature_name = match self.next() {
                    Some(Token::Ident(f)) => f,
                    _ => return Err(ParseFail::Syntax("expected a feature name".into())),
                };
                let feature = self
                    .schema
                    .index_of(&feature_name)
                    .ok_or(ParseFail::Unknown(feature_name))?;
                if self.next() != Some(Token::RParen) {
                    return Err(ParseFail::Syntax("expected `)`".into()));
                }
                if let Some(Token::Op(op)) = self.tokens.get(self.pos).cloned() {
                    self.pos += 1;
                    match self.next() {
                        Some(Token::Number(value)) => Ok(Expr::Compare {
                            agg,
                            feature,
                            op,
                            value,
                        }),
                        _ => Err(ParseFail::Syntax("expected a number".into())),
                    }
                } else {
                    Ok(Expr::Truthy { agg, feature })
                }
            }
            other => Err(ParseFail::Syntax(format!("unexpected {other:?}"))),
        }
    }
}

enum ParseFail {
    Syntax(String),
    Unknown(String),
}

/// A compiled golden-question check bound to a set of category codes.
#[derive(Debug, Clone)]
pub struct GoldenRule {
    pub label_selector: BTreeSet<i32>,
    pub predicate: String,
    expr: Expr,
}

impl GoldenRule {
    pub fn compile(
        label_selector: BTreeSet<i32>,
        predicate: &str,
        schema: &FeatureSchema,
    ) -> Result<Self> {
        let invalid = |message: String| Error::InvalidPredicate {
            predicate: predicate.to_string(),
            message,
        };
        let tokens = tokenize(predicate).map_err(invalid)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            schema,
        };
        let expr = match parser.expr() {
            Ok(e) => e,
            Err(ParseFail::Unknown(name)) => return Err(Error::UnknownFeature(name)),
            Err(ParseFail::Syntax(m)) => return Err(invalid(m)),
        };
        if parser.pos != parser.tokens.len() {
            return Err(invalid("trailing input".into()));
        }
        Ok(GoldenRule {
            label_selector,
            predicate: predicate.to_string(),
            expr,
        })
    }

    pub fn applies_to(&self, trace: &SessionTrace) -> bool {
        trace
            .label
            .is_some_and(|l| self.label_selector.contains(&l.code()))
    }

    pub fn holds(&self, trace: &SessionTrace) -> bool {
        self.expr.eval(trace)
    }
}

/// Reads a JSON object mapping category codes to predicate strings.
pub fn load_golden_rules(path: &Path, schema: &FeatureSchema) -> Result<Vec<GoldenRule>> {
    let text = std::fs::read_to_string(path)?;
    parse_golden_rules(&text, schema)
}

pub fn parse_golden_rules(json: &str, schema: &FeatureSchema) -> Result<Vec<GoldenRule>> {
    let map: BTreeMap<String, String> = serde_json::from_str(json)?;
    map.iter()
        .map(|(code, predicate)| {
            let code: i32 = code
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("golden rule key `{code}` is not a category code")))?;
            GoldenRule::compile([code].into(), predicate, schema)
        })
        .collect()
}

/// Keeps a labeled trace iff every rule selecting its label holds.
/// Returns the kept traces and the dropped ones with the first failing rule.
pub fn apply_golden_rules(
    traces: Vec<SessionTrace>,
    rules: &[GoldenRule],
) -> (Vec<SessionTrace>, Vec<(SessionTrace, String)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for trace in traces {
        match rules.iter().find(|r| r.applies_to(&trace) && !r.holds(&trace)) {
            Some(rule) => {
                let why = rule.predicate.clone();
                dropped.push((trace, why));
            }
            None => kept.push(trace),
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooShort,
    GoldenRule,
    InteractionTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub trace_id: String,
    pub kept: bool,
    pub reason: Option<DropReason>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub total_in: usize,
    pub dropped_short: usize,
    pub dropped_golden: usize,
    pub dropped_interaction: usize,
    pub kept: usize,
    pub traces: Vec<TraceOutcome>,
}

impl CleanReport {
    pub fn reconciles(&self) -> bool {
        self.total_in
            == self.dropped_short + self.dropped_golden + self.dropped_interaction + self.kept
            && self.traces.len() == self.total_in
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub min_duration_s: f64,
    pub exclude_interaction: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            min_duration_s: DEFAULT_MIN_DURATION_S,
            exclude_interaction: true,
        }
    }
}

/// Runs duration, golden and interaction filters in that order.
/// A dropped trace is attributed to the first filter it fails.
pub fn clean(
    traces: Vec<SessionTrace>,
    rules: &[GoldenRule],
    config: &CleanConfig,
) -> (Vec<SessionTrace>, CleanReport) {
    let mut report = CleanReport {
        total_in: traces.len(),
        ..CleanReport::default()
    };
    let order: Vec<String> = traces.iter().map(SessionTrace::id).collect();
    let mut outcomes: BTreeMap<String, TraceOutcome> = BTreeMap::new();
    let mut drop = |id: String, reason: DropReason, detail: Option<String>| {
        outcomes.insert(
            id.clone(),
            TraceOutcome {
                trace_id: id,
                kept: false,
                reason: Some(reason),
                detail,
            },
        );
    };

    let (long_enough, short) = filter_min_duration(traces, config.min_duration_s);
    report.dropped_short = short.len();
    for t in short {
        drop(t.id(), DropReason::TooShort, Some(format!("{:.3} s", t.duration())));
    }
    let (passed, failed) = apply_golden_rules(long_enough, rules);
    report.dropped_golden = failed.len();
    for (t, why) in failed {
        drop(t.id(), DropReason::GoldenRule, Some(why));
    }
    let before = passed.len();
    let (kept, removed): (Vec<_>, Vec<_>) = if config.exclude_interaction {
        let kept = exclude_interaction_tasks(passed.clone());
        let removed = passed
            .into_iter()
            .filter(|t| t.label.is_some_and(|l| l.space() == Space::Interaction))
            .collect();
        (kept, removed)
    } else {
        (passed, Vec::new())
    };
    report.dropped_interaction = before - kept.len();
    for t in removed {
        drop(t.id(), DropReason::InteractionTask, None);
    }
    report.kept = kept.len();
    for t in &kept {
        outcomes.insert(
            t.id(),
            TraceOutcome {
                trace_id: t.id(),
                kept: true,
                reason: None,
                detail: None,
            },
        );
    }
    report.traces = order
        .into_iter()
        .filter_map(|id| outcomes.remove(&id))
        .collect();
    (kept, report)
}
