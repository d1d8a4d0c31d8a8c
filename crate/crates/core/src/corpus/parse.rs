use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Session, SessionDataset, SplitTag, UserRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl LogFormat {
    /// Guesses from a file extension; `.jsonl`/`.json` mean JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json" | "ndjson") => LogFormat::Jsonl,
            _ => LogFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLog {
    pub dataset: SessionDataset,
    pub rows: usize,
    pub row_errors: Vec<RowError>,
    /// Users dropped for having fewer than two sessions.
    pub excluded_users: usize,
}

struct Event {
    user: String,
    session: String,
    ts: i64,
    page: String,
}

const MAX_BAD_FRACTION: f64 = 0.10;

/// Parses an event log into per-user records.
///
/// Malformed rows are collected in `row_errors`; the call only fails when
/// more than 10% of rows are malformed.
pub fn parse_log(reader: impl Read, format: LogFormat) -> Result<ParsedLog> {
    let (events, rows, row_errors) = match format {
        LogFormat::Csv => read_csv(reader)?,
        LogFormat::Jsonl => read_jsonl(reader)?,
    };
    if rows > 0 && row_errors.len() as f64 > MAX_BAD_FRACTION * rows as f64 {
        let first = &row_errors[0];
        return Err(Error::TooManyBadRows {
            bad: row_errors.len(),
            total: rows,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }

    let mut users: BTreeMap<String, BTreeMap<String, Vec<(i64, String)>>> = BTreeMap::new();
    for e in events {
        users
            .entry(e.user)
            .or_default()
            .entry(e.session)
            .or_default()
            .push((e.ts, e.page));
    }

    let mut records = Vec::new();
    let mut excluded_users = 0;
    for (user, sessions) in users {
        let mut ordered: Vec<(i64, String, Vec<String>)> = sessions
            .into_iter()
            .map(|(sid, mut evs)| {
                evs.sort();
                let ts = evs[0].0;
                (ts, sid, evs.into_iter().map(|(_, p)| p).collect())
            })
            .collect();
        ordered.sort();
        let sessions = ordered.into_iter().map(|(ts, _, pages)| Session::new(pages, ts)).collect();
        match UserRecord::from_sessions(user, sessions) {
            Some(r) => records.push(r),
            None => excluded_users += 1,
        }
    }
    Ok(ParsedLog {
        dataset: SessionDataset::new(records, SplitTag::All),
        rows,
        row_errors,
        excluded_users,
    })
}

type Rows = (Vec<Event>, usize, Vec<RowError>);

fn check_event(user: &str, session: &str, page: &str) -> std::result::Result<(), String> {
    if user.is_empty() {
        return Err("empty user_id".into());
    }
    if session.is_empty() {
        return Err("empty session_id".into());
    }
    if page.is_empty() {
        return Err("empty page name".into());
    }
    Ok(())
}

fn read_csv(reader: impl Read) -> Result<Rows> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Malformed(format!("CSV header lacks column `{name}`")))
    };
    let (cu, cs, ct, cp) = (col("user_id")?, col("session_id")?, col("timestamp")?, col("page")?);
    let width = headers.len();

    let mut events = Vec::new();
    let mut errors = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(rows + 1, |p| p.line() as usize);
                errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if rec.len() != width {
            errors.push(RowError {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
            continue;
        }
        let (user, session, page) = (rec[cu].trim(), rec[cs].trim(), rec[cp].trim());
        let parsed = check_event(user, session, page).and_then(|()| {
            rec[ct]
                .trim()
                .parse::<i64>()
                .map_err(|_| format!("timestamp `{}` is not an integer", &rec[ct]))
        });
        match parsed {
            Ok(ts) => events.push(Event {
                user: user.to_string(),
                session: session.to_string(),
                ts,
                page: page.to_string(),
            }),
            Err(message) => errors.push(RowError { line, message }),
        }
    }
    Ok((events, rows, errors))
}

fn id_field(v: &Value, key: &str) -> std::result::Result<String, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(format!("`{key}` has unsupported type: {other}")),
        None => Err(format!("missing `{key}`")),
    }
}

fn parse_json_event(text: &str) -> std::result::Result<Event, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let user = id_field(&v, "user_id")?;
    let session = id_field(&v, "session_id")?;
    let ts = match v.get("timestamp") {
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| format!("timestamp `{n}` is not an integer"))?,
        Some(Value::String(s)) => s.parse().map_err(|_| format!("timestamp `{s}` is not an integer"))?,
        _ => return Err("missing or invalid `timestamp`".into()),
    };
    let page = match v.get("page") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err("missing or invalid `page`".into()),
    };
    check_event(&user, &session, &page)?;
    Ok(Event {
        user,
        session,
        ts,
        page,
    })
}

fn read_jsonl(reader: impl Read) -> Result<Rows> {
    let mut events = Vec::new();
    let mut errors = Vec::new();
    let mut rows = 0;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        match parse_json_event(&line) {
            Ok(e) => events.push(e),
            Err(message) => errors.push(RowError { line: i + 1, message }),
        }
    }
    Ok((events, rows, errors))
}

/// Linear-interpolation percentile (the `numpy.percentile` default).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSummary {
    pub length_threshold: f64,
    pub dropped_short: usize,
    pub dropped_long: usize,
    pub removed_users: usize,
    pub kept_users: usize,
}

/// Drops sessions shorter than `min_len` or longer than the
/// `max_len_percentile`-th percentile of all session lengths, then drops
/// users left with fewer than two sessions.
pub fn filter_sessions(
    dataset: &SessionDataset,
    min_len: usize,
    max_len_percentile: f64,
) -> Result<(SessionDataset, FilterSummary)> {
    if !(max_len_percentile > 0.0 && max_len_percentile <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must be in (0, 100], got {max_len_percentile}"
        )));
    }
    let lengths: Vec<f64> = dataset
        .records
        .iter()
        .flat_map(UserRecord::sessions)
        .map(|s| s.len() as f64)
        .collect();
    let threshold = percentile(&lengths, max_len_percentile).ok_or(Error::EmptyDataset("session filtering"))?;

    let mut summary = FilterSummary {
        length_threshold: threshold,
        dropped_short: 0,
        dropped_long: 0,
        removed_users: 0,
        kept_users: 0,
    };
    let mut records = Vec::new();
    for r in &dataset.records {
        let mut kept = Vec::new();
        for s in r.sessions() {
            if s.len() < min_len || s.is_empty() {
                summary.dropped_short += 1;
            } else if s.len() as f64 > threshold {
                summary.dropped_long += 1;
            } else {
                kept.push(s.clone());
            }
        }
        match UserRecord::from_sessions(r.user_id.clone(), kept) {
            Some(rec) => records.push(rec),
            None => summary.removed_users += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset("session filtering"));
    }
    summary.kept_users = records.len();
    Ok((SessionDataset::new(records, dataset.split), summary))
}
