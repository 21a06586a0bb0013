//! CSV encodings of traces, access logs, rule tables and metric tables.
//!
//! Times are written as seconds with nine decimals and latencies as
//! milliseconds with six, so both round-trip to the nanosecond.

use std::path::Path;

use cachepeer_core::cache::{AccessLog, AccessLogRecord, ContentId, Outcome};
use cachepeer_core::ids::{CacheId, DestinationId, ObjectKey, TenantId};
use cachepeer_core::interception::{FlowRule, RuleAction, RuleTable};
use cachepeer_core::peering::{IcpKind, Verdict};
use cachepeer_core::report::ServedBy;
use cachepeer_core::sim::{IcpTraceRecord, RequestRecord};
use cachepeer_core::time::{SimDuration, SimTime};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub fn format_secs(t: SimTime) -> String {
    let ns = t.as_nanos();
    format!("{}.{:09}", ns / 1_000_000_000, ns % 1_000_000_000)
}

pub fn format_millis(d: SimDuration) -> String {
    let ns = d.as_nanos();
    format!("{}.{:06}", ns / 1_000_000, ns % 1_000_000)
}

/// Parses a non-negative decimal with at most `scale` fractional digits
/// into integer units of `10^-scale`.
fn parse_fixed(s: &str, scale: u32) -> Option<u64> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() || frac.len() > scale as usize || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let unit = 10u64.pow(scale);
    let int: u64 = int.parse().ok()?;
    let frac_val: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().ok()?
    };
    let frac_ns = frac_val * 10u64.pow(scale - frac.len() as u32);
    int.checked_mul(unit)?.checked_add(frac_ns)
}

pub fn parse_secs(s: &str) -> Option<SimTime> {
    parse_fixed(s.trim(), 9).map(SimTime::from_nanos)
}

pub fn parse_millis(s: &str) -> Option<SimDuration> {
    parse_fixed(s.trim(), 6).map(SimDuration::from_nanos)
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("writing to memory cannot fail")
}

fn write_row<I, S>(w: &mut csv::Writer<Vec<u8>>, row: I)
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).expect("writing to memory cannot fail");
}

/// Reads every data row, checking the header against `columns`.
fn read_rows<T>(
    path: &Path,
    text: &str,
    columns: &[&str],
    mut parse: impl FnMut(&csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| CliError::parse(path, e.to_string()))?
        .clone();
    if header.iter().ne(columns.iter().copied()) {
        return Err(CliError::parse(
            path,
            format!("line 1: expected header `{}`", columns.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::parse(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(parse(&rec).map_err(|m| CliError::parse(path, format!("line {line}: {m}")))?);
    }
    Ok(out)
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, name: &str) -> Result<&'r str, String> {
    rec.get(i).ok_or_else(|| format!("missing column `{name}`"))
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, String> {
    let v = field(rec, i, name)?;
    v.trim()
        .parse()
        .map_err(|_| format!("bad `{name}` value `{v}`"))
}

fn time(rec: &csv::StringRecord, i: usize, name: &str) -> Result<SimTime, String> {
    let v = field(rec, i, name)?;
    parse_secs(v).ok_or_else(|| format!("bad `{name}` value `{v}`"))
}

fn boolean(rec: &csv::StringRecord, i: usize, name: &str) -> Result<bool, String> {
    match field(rec, i, name)? {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(format!("bad `{name}` value `{v}`")),
    }
}

fn parsed<T>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
    f: impl Fn(&str) -> Option<T>,
) -> Result<T, String> {
    let v = field(rec, i, name)?;
    f(v).ok_or_else(|| format!("bad `{name}` value `{v}`"))
}

/// One line of the per-request trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequestRow {
    pub time: SimTime,
    pub tenant: TenantId,
    pub object_key: ObjectKey,
    pub served_by: ServedBy,
    pub latency: SimDuration,
    pub vi_traversals: u32,
}

impl From<&RequestRecord> for RequestRow {
    fn from(r: &RequestRecord) -> Self {
        Self {
            time: r.issued_at,
            tenant: r.tenant,
            object_key: r.content.key,
            served_by: r.served_by,
            latency: r.latency(),
            vi_traversals: r.vi_traversals,
        }
    }
}

pub const REQUEST_COLUMNS: [&str; 6] = [
    "time",
    "tenant",
    "objectKey",
    "servedBy",
    "latencyMs",
    "viTraversals",
];

pub fn requests_csv(rows: impl IntoIterator<Item = RequestRow>) -> Vec<u8> {
    let mut w = writer();
    write_row(&mut w, REQUEST_COLUMNS);
    for r in rows {
        write_row(
            &mut w,
            [
                format_secs(r.time),
                r.tenant.0.to_string(),
                r.object_key.0.to_string(),
                r.served_by.as_str().to_string(),
                format_millis(r.latency),
                r.vi_traversals.to_string(),
            ],
        );
    }
    finish(w)
}

pub fn parse_requests(path: &Path, text: &str) -> Result<Vec<RequestRow>, CliError> {
    read_rows(path, text, &REQUEST_COLUMNS, |rec| {
        Ok(RequestRow {
            time: time(rec, 0, "time")?,
            tenant: TenantId(num(rec, 1, "tenant")?),
            object_key: ObjectKey(num(rec, 2, "objectKey")?),
            served_by: parsed(rec, 3, "servedBy", ServedBy::parse)?,
            latency: parsed(rec, 4, "latencyMs", parse_millis)?,
            vi_traversals: num(rec, 5, "viTraversals")?,
        })
    })
}

pub const ICP_COLUMNS: [&str; 8] = [
    "time",
    "kind",
    "requestId",
    "sender",
    "receiver",
    "contentKey",
    "destination",
    "verdict",
];

pub fn icp_csv(rows: &[IcpTraceRecord]) -> Vec<u8> {
    let mut w = writer();
    write_row(&mut w, ICP_COLUMNS);
    for r in rows {
        write_row(
            &mut w,
            [
                format_secs(r.time),
                r.kind.as_str().to_string(),
                r.request_id.to_string(),
                r.sender.0.to_string(),
                r.receiver.0.to_string(),
                r.content.key.0.to_string(),
                r.content.destination.0.to_string(),
                r.verdict.as_str().to_string(),
            ],
        );
    }
    finish(w)
}

pub fn parse_icp(path: &Path, text: &str) -> Result<Vec<IcpTraceRecord>, CliError> {
    read_rows(path, text, &ICP_COLUMNS, |rec| {
        Ok(IcpTraceRecord {
            time: time(rec, 0, "time")?,
            kind: parsed(rec, 1, "kind", IcpKind::parse)?,
            request_id: num(rec, 2, "requestId")?,
            sender: CacheId(num(rec, 3, "sender")?),
            receiver: CacheId(num(rec, 4, "receiver")?),
            content: ContentId::new(num(rec, 5, "contentKey")?, num(rec, 6, "destination")?),
            verdict: parsed(rec, 7, "verdict", Verdict::parse)?,
        })
    })
}

pub const ACCESS_LOG_COLUMNS: [&str; 5] =
    ["time", "objectKey", "destination", "outcome", "cacheable"];

pub fn access_log_csv(log: &AccessLog) -> Vec<u8> {
    let mut w = writer();
    write_row(&mut w, ACCESS_LOG_COLUMNS);
    for r in log.records() {
        write_row(
            &mut w,
            [
                format_secs(r.time),
                r.content.key.0.to_string(),
                r.content.destination.0.to_string(),
                r.outcome.as_str().to_string(),
                r.cacheable.to_string(),
            ],
        );
    }
    finish(w)
}

/// Parses an access log; records must be in non-decreasing time order.
pub fn parse_access_log(path: &Path, text: &str) -> Result<AccessLog, CliError> {
    let mut log = AccessLog::new();
    let mut line = 1;
    let records = read_rows(path, text, &ACCESS_LOG_COLUMNS, |rec| {
        line = rec.position().map_or(line, |p| p.line());
        Ok((
            line,
            AccessLogRecord {
                time: time(rec, 0, "time")?,
                content: ContentId::new(num(rec, 1, "objectKey")?, num(rec, 2, "destination")?),
                outcome: parsed(rec, 3, "outcome", Outcome::parse)?,
                cacheable: boolean(rec, 4, "cacheable")?,
            },
        ))
    })?;
    for (line, r) in records {
        log.append(r).map_err(|e| {
            CliError::parse(
                path,
                format!(
                    "line {line}: time {} precedes {}",
                    format_secs(e.record),
                    format_secs(e.last)
                ),
            )
        })?;
    }
    Ok(log)
}

pub const RULE_COLUMNS: [&str; 4] = ["tenant", "destination", "action", "priority"];

pub fn rules_csv<'a>(tables: impl IntoIterator<Item = &'a RuleTable>) -> Vec<u8> {
    let mut w = writer();
    write_row(&mut w, RULE_COLUMNS);
    for t in tables {
        for r in t.rules() {
            write_row(
                &mut w,
                [
                    t.tenant.0.to_string(),
                    r.destination.0.to_string(),
                    r.action.as_str().to_string(),
                    r.priority.to_string(),
                ],
            );
        }
    }
    finish(w)
}

/// Parses a rule CSV into one table per tenant, in tenant order.
pub fn parse_rules(path: &Path, text: &str) -> Result<Vec<RuleTable>, CliError> {
    let rows = read_rows(path, text, &RULE_COLUMNS, |rec| {
        Ok((
            TenantId(num(rec, 0, "tenant")?),
            FlowRule {
                destination: DestinationId(num(rec, 1, "destination")?),
                action: parsed(rec, 2, "action", RuleAction::parse)?,
                priority: num(rec, 3, "priority")?,
            },
        ))
    })?;
    let mut tables: std::collections::BTreeMap<TenantId, RuleTable> = Default::default();
    for (t, rule) in rows {
        tables
            .entry(t)
            .or_insert_with(|| RuleTable::new(t))
            .install(rule);
    }
    Ok(tables.into_values().collect())
}

/// A table with one row per scope (e.g. `global`, `t0`) and one column per
/// field of `T`. `T` must serialize as a flat struct of scalars.
pub fn table_csv<T: Serialize>(rows: &[(String, &T)]) -> Vec<u8> {
    let mut w = writer();
    let objects: Vec<Map<String, Value>> = rows
        .iter()
        .map(
            |(_, v)| match serde_json::to_value(v).expect("serializable") {
                Value::Object(m) => m,
                other => panic!("table rows must be structs, got {other}"),
            },
        )
        .collect();
    let mut header = vec!["scope".to_string()];
    if let Some(first) = objects.first() {
        header.extend(first.keys().cloned());
    }
    write_row(&mut w, &header);
    for ((scope, _), obj) in rows.iter().zip(&objects) {
        let mut row = vec![scope.clone()];
        for key in &header[1..] {
            row.push(match &obj[key] {
                Value::Null => String::new(),
                Value::String(s) => s.clone(),
                v => v.to_string(),
            });
        }
        write_row(&mut w, &row);
    }
    finish(w)
}

pub fn parse_table<T: DeserializeOwned>(
    path: &Path,
    text: &str,
) -> Result<Vec<(String, T)>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| CliError::parse(path, e.to_string()))?
        .clone();
    if header.get(0) != Some("scope") {
        return Err(CliError::parse(
            path,
            "line 1: first column must be `scope`",
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::parse(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut obj = Map::new();
        for (name, v) in header.iter().zip(rec.iter()).skip(1) {
            let value = if v.is_empty() {
                Value::Null
            } else {
                serde_json::from_str::<Value>(v)
                    .ok()
                    .filter(|x| x.is_number() || x.is_boolean())
                    .unwrap_or_else(|| Value::String(v.to_string()))
            };
            obj.insert(name.to_string(), value);
        }
        let row: T = serde_json::from_value(Value::Object(obj))
            .map_err(|e| CliError::parse(path, format!("line {line}: {e}")))?;
        out.push((rec[0].to_string(), row));
    }
    Ok(out)
}
