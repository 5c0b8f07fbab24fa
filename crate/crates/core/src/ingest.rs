//! Log parsing: CSV and JSONL frame streams grouped into session traces.
//!
//! Columns are `participant_id, environment, trial_index, label_code,
//! timestamp_s` followed by the schema features in schema order. A
//! `label_code` of -1 marks an open (unlabeled) trial.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BehaviorFrame, Environment, FeatureSchema, SessionTrace, TaskLabel};

pub const META_COLUMNS: [&str; 5] = [
    "participant_id",
    "environment",
    "trial_index",
    "label_code",
    "timestamp_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl LogFormat {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") => LogFormat::Jsonl,
            _ => LogFormat::Csv,
        }
    }
}

struct RawRow {
    line: u64,
    participant: String,
    environment: String,
    trial: i64,
    label_code: i32,
    timestamp: f64,
    values: Vec<f64>,
}

pub fn parse_log<R: Read>(
    reader: R,
    format: LogFormat,
    environment: Environment,
    schema: &FeatureSchema,
) -> Result<Vec<SessionTrace>> {
    let mut builder = TraceBuilder::new(environment, schema);
    match format {
        LogFormat::Csv => parse_csv(reader, schema, &mut builder)?,
        LogFormat::Jsonl => parse_jsonl(reader, schema, &mut builder)?,
    }
    builder.finish()
}

fn parse_csv<R: Read>(reader: R, schema: &FeatureSchema, builder: &mut TraceBuilder) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<String> = META_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(schema.names().map(str::to_string))
        .collect();
    if header != expected {
        return Err(Error::SchemaMismatch(describe_mismatch(&expected, &header)));
    }
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse_err = |message: String| Error::Parse { line, message };
        let values = (0..schema.dim())
            .map(|k| {
                let raw = field(META_COLUMNS.len() + k);
                raw.parse::<f64>().map_err(|_| {
                    parse_err(format!("feature {}: `{raw}` is not a number", schema.features[k].name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        builder.push(RawRow {
            line,
            participant: field(0).to_string(),
            environment: field(1).to_string(),
            trial: field(2)
                .parse()
                .map_err(|_| parse_err(format!("trial_index `{}`", field(2))))?,
            label_code: field(3)
                .parse()
                .map_err(|_| parse_err(format!("label_code `{}`", field(3))))?,
            timestamp: field(4)
                .parse()
                .map_err(|_| parse_err(format!("timestamp_s `{}`", field(4))))?,
            values,
        })?;
    }
    Ok(())
}

fn parse_jsonl<R: Read>(reader: R, schema: &FeatureSchema, builder: &mut TraceBuilder) -> Result<()> {
    let reader = std::io::BufReader::new(reader);
    for (k, line) in reader.lines().enumerate() {
        let line_no = k as u64 + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let expected = META_COLUMNS.len() + schema.dim();
        let missing: Vec<&str> = META_COLUMNS
            .iter()
            .copied()
            .chain(schema.names())
            .filter(|k| !obj.contains_key(*k))
            .collect();
        if !missing.is_empty() || obj.len() != expected {
            let extra: Vec<&str> = obj
                .keys()
                .map(String::as_str)
                .filter(|k| !META_COLUMNS.contains(k) && schema.index_of(k).is_none())
                .collect();
            return Err(Error::SchemaMismatch(format!(
                "line {line_no}: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let num = |key: &str| -> Result<f64> {
            obj[key]
                .as_f64()
                .ok_or_else(|| parse_err(format!("{key} is not a number")))
        };
        let int = |key: &str| -> Result<i64> {
            obj[key]
                .as_i64()
                .ok_or_else(|| parse_err(format!("{key} is not an integer")))
        };
        let text_field = |key: &str| -> String {
            match &obj[key] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            }
        };
        let values = schema.names().map(num).collect::<Result<Vec<_>>>()?;
        builder.push(RawRow {
            line: line_no,
            participant: text_field("participant_id"),
            environment: text_field("environment"),
            trial: int("trial_index")?,
            label_code: int("label_code")? as i32,
            timestamp: num("timestamp_s")?,
            values,
        })?;
    }
    Ok(())
}

fn describe_mismatch(expected: &[String], actual: &[String]) -> String {
    let missing: Vec<&String> = expected.iter().filter(|e| !actual.contains(e)).collect();
    let extra: Vec<&String> = actual.iter().filter(|a| !expected.contains(a)).collect();
    if missing.is_empty() && extra.is_empty() {
        "columns are out of order".to_string()
    } else {
        format!("missing columns {missing:?}, unexpected columns {extra:?}")
    }
}

struct TraceBuilder<'a> {
    environment: Environment,
    schema: &'a FeatureSchema,
    index: HashMap<(String, i64), usize>,
    traces: Vec<SessionTrace>,
}

impl<'a> TraceBuilder<'a> {
    fn new(environment: Environment, schema: &'a FeatureSchema) -> Self {
        TraceBuilder {
            environment,
            schema,
            index: HashMap::new(),
            traces: Vec::new(),
        }
    }

    fn push(&mut self, row: RawRow) -> Result<()> {
        let env: Environment = row.environment.parse().map_err(|_| Error::Parse {
            line: row.line,
            message: format!("unknown environment `{}`", row.environment),
        })?;
        if env != self.environment {
            return Err(Error::SchemaMismatch(format!(
                "line {}: row is from the {} environment, expected {}",
                row.line,
                env.name(),
                self.environment.name()
            )));
        }
        let label = match row.label_code {
            -1 => None,
            code => Some(TaskLabel::from_code(code).map_err(|e| Error::Parse {
                line: row.line,
                message: e.to_string(),
            })?),
        };
        self.schema
            .validate_values(&row.values)
            .map_err(|e| Error::Parse {
                line: row.line,
                message: e.to_string(),
            })?;
        let key = (row.participant.clone(), row.trial);
        let slot = match self.index.get(&key) {
            Some(&slot) => slot,
            None => {
                self.traces.push(SessionTrace {
                    participant_id: row.participant,
                    environment: self.environment,
                    trial_index: row.trial,
                    label,
                    frames: Vec::new(),
                    sample_rate_hint: self.environment.sample_rate(),
                });
                self.index.insert(key, self.traces.len() - 1);
                self.traces.len() - 1
            }
        };
        let trace = &mut self.traces[slot];
        if trace.label != label {
            return Err(Error::Parse {
                line: row.line,
                message: format!("label changes within trial {}", trace.id()),
            });
        }
        if let Some(prev) = trace.frames.last() {
            if row.timestamp < prev.timestamp {
                return Err(Error::NonMonotonicTime {
                    line: row.line,
                    trial: trace.id(),
                    previous: prev.timestamp,
                    time: row.timestamp,
                });
            }
        }
        trace.frames.push(BehaviorFrame {
            timestamp: row.timestamp,
            values: row.values,
        });
        Ok(())
    }

    fn finish(self) -> Result<Vec<SessionTrace>> {
        for t in &self.traces {
            if t.frames.is_empty() {
                return Err(Error::EmptyTrial(t.id()));
            }
        }
        Ok(self.traces)
    }
}

pub fn write_csv<W: Write>(writer: W, schema: &FeatureSchema, traces: &[SessionTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = META_COLUMNS.iter().copied().chain(schema.names()).collect();
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for trace in traces {
        for frame in &trace.frames {
            row.clear();
            row.push(trace.participant_id.clone());
            row.push(trace.environment.name().to_string());
            row.push(trace.trial_index.to_string());
            row.push(trace.label_code().to_string());
            row.push(frame.timestamp.to_string());
            row.extend(frame.values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(
    mut writer: W,
    schema: &FeatureSchema,
    traces: &[SessionTrace],
) -> Result<()> {
    for trace in traces {
        for frame in &trace.frames {
            let mut obj = serde_json::Map::new();
            obj.insert("participant_id".into(), trace.participant_id.clone().into());
            obj.insert("environment".into(), trace.environment.name().into());
            obj.insert("trial_index".into(), trace.trial_index.into());
            obj.insert("label_code".into(), trace.label_code().into());
            obj.insert("timestamp_s".into(), frame.timestamp.into());
            for (name, &v) in schema.names().zip(&frame.values) {
                obj.insert(name.to_string(), v.into());
            }
            serde_json::to_writer(&mut writer, &obj)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// A span of a trial to discard, e.g. time spent answering questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionInterval {
    pub participant_id: String,
    pub trial_index: i64,
    pub t_start_s: f64,
    pub t_end_s: f64,
}

pub fn read_exclusions<R: Read>(reader: R) -> Result<Vec<ExclusionInterval>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let interval: ExclusionInterval = row?;
        if interval.t_end_s < interval.t_start_s {
            return Err(Error::InvalidConfig(format!(
                "exclusion interval for {}/{} ends before it starts",
                interval.participant_id, interval.trial_index
            )));
        }
        out.push(interval);
    }
    Ok(out)
}

/// Drops frames whose timestamp falls inside any matching interval (inclusive).
/// Traces left without frames are kept empty; the duration filter removes them.
pub fn apply_exclusions(traces: &mut [SessionTrace], intervals: &[ExclusionInterval]) {
    for trace in traces.iter_mut() {
        let spans: Vec<&ExclusionInterval> = intervals
            .iter()
            .filter(|iv| iv.participant_id == trace.participant_id && iv.trial_index == trace.trial_index)
            .collect();
        if spans.is_empty() {
            continue;
        }
        trace.frames.retain(|f| {
            !spans
                .iter()
                .any(|iv| f.timestamp >= iv.t_start_s && f.timestamp <= iv.t_end_s)
        });
    }
}
