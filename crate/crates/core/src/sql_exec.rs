//! Completion-to-SQL extraction, sandboxed read-only execution and outcome
//! canonicalization.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::limits::Limit;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::promptgen::PromptDesignId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Result sets larger than this are reported as runtime errors.
pub const MAX_RESULT_ROWS: usize = 1_000_000;

const PROGRESS_OPS: i32 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<ValueRef<'_>> for Scalar {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Scalar::Null,
            ValueRef::Integer(i) => Scalar::Integer(i),
            ValueRef::Real(f) => Scalar::Real(f),
            ValueRef::Text(t) => Scalar::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Scalar::Blob(b.to_vec()),
        }
    }
}

pub type Row = Vec<Scalar>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Syntax,
    Runtime,
    Timeout,
    EmptySql,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Syntax => "syntax",
            Self::Runtime => "runtime",
            Self::Timeout => "timeout",
            Self::EmptySql => "empty_sql",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionOutcome {
    Success {
        rows: Vec<Row>,
        elapsed: Duration,
    },
    Error {
        kind: ErrorKind,
        message: String,
        elapsed: Duration,
    },
}

impl ExecutionOutcome {
    pub fn error(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self::Error {
            kind,
            message: message.into(),
            elapsed: Duration::ZERO,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Self::Success { .. })
    }

    pub fn rows(&self) -> Option<&[Row]> {
        match self {
            Self::Success { rows, .. } => Some(rows),
            Self::Error { .. } => None,
        }
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self {
            Self::Error { kind, .. } => Some(*kind),
            Self::Success { .. } => None,
        }
    }

    pub fn elapsed(&self) -> Duration {
        match self {
            Self::Success { elapsed, .. } | Self::Error { elapsed, .. } => *elapsed,
        }
    }

    /// `"success"` or the error kind name.
    pub fn kind_str(&self) -> &'static str {
        match self {
            Self::Success { .. } => "success",
            Self::Error { kind, .. } => kind.as_str(),
        }
    }
}

/// Opaque key identifying a canonical success outcome.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutcomeKey(pub String);

impl fmt::Display for OutcomeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pulls a single SQL statement out of raw completion text.
///
/// Takes the body of the first code fence if there is one, trims it and cuts
/// at the first semicolon outside quotes. Prompts of the baseline design end
/// in `SELECT`, so their completions get that keyword restored.
pub fn extract_sql(completion: &str, design: PromptDesignId) -> String {
    let body = fenced_body(completion).unwrap_or(completion);
    let sql = truncate_at_semicolon(body.trim()).trim();
    if sql.is_empty() {
        return String::new();
    }
    if design == PromptDesignId::BaselineDefault && !starts_with_query_keyword(sql) {
        format!("SELECT {sql}")
    } else {
        sql.to_string()
    }
}

fn starts_with_query_keyword(sql: &str) -> bool {
    let word: String = sql
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    word == "SELECT" || word == "WITH"
}

fn fenced_body(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // skip the info string (e.g. `sql`) up to the end of the fence line
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    Some(match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    })
}

fn truncate_at_semicolon(sql: &str) -> &str {
    let mut quote: Option<char> = None;
    for (i, c) in sql.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' | '`' => quote = Some(c),
                '[' => quote = Some(']'),
                ';' => return &sql[..i],
                _ => {}
            },
        }
    }
    sql
}

/// Executes `sql` read-only against the database at `db_path`.
///
/// All failures are folded into the returned outcome. The statement runs on a
/// fresh read-only connection; anything that is not a read-only statement is
/// rejected before stepping.
pub fn execute(sql: &str, db_path: &Path, timeout: Duration) -> ExecutionOutcome {
    let start = Instant::now();
    let fail = |kind, message: String| ExecutionOutcome::Error {
        kind,
        message,
        elapsed: start.elapsed(),
    };
    if sql.trim().is_empty() {
        return fail(ErrorKind::EmptySql, "empty statement".into());
    }

    let conn = match open_sandboxed(db_path) {
        Ok(c) => c,
        Err(e) => return fail(ErrorKind::Runtime, format!("cannot open database: {e}")),
    };
    let deadline = start + timeout;
    if let Err(e) = conn.progress_handler(PROGRESS_OPS, Some(move || Instant::now() >= deadline)) {
        return fail(ErrorKind::Runtime, format!("cannot install timeout: {e}"));
    }

    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => return fail(classify(&e), e.to_string()),
    };
    if !is_query(sql) {
        return fail(ErrorKind::Runtime, "only SELECT queries are permitted".into());
    }
    if !stmt.readonly() {
        return fail(ErrorKind::Runtime, "write statements are not permitted".into());
    }
    let width = stmt.column_count();
    let mut rows = Vec::new();
    let mut cursor = match stmt.query([]) {
        Ok(c) => c,
        Err(e) => return fail(classify(&e), e.to_string()),
    };
    loop {
        match cursor.next() {
            Ok(Some(row)) => {
                let mut out = Vec::with_capacity(width);
                for i in 0..width {
                    match row.get_ref(i) {
                        Ok(v) => out.push(Scalar::from(v)),
                        Err(e) => return fail(ErrorKind::Runtime, e.to_string()),
                    }
                }
                rows.push(out);
                if rows.len() > MAX_RESULT_ROWS {
                    return fail(ErrorKind::Runtime, "result set too large".into());
                }
            }
            Ok(None) => break,
            Err(e) => return fail(classify(&e), e.to_string()),
        }
    }
    ExecutionOutcome::Success {
        rows,
        elapsed: start.elapsed(),
    }
}

fn open_sandboxed(db_path: &Path) -> rusqlite::Result<Connection> {
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.set_limit(Limit::SQLITE_LIMIT_ATTACHED, 0)?;
    conn.pragma_update(None, "query_only", true)?;
    Ok(conn)
}

fn classify(err: &rusqlite::Error) -> ErrorKind {
    if let rusqlite::Error::SqliteFailure(f, _) = err {
        if f.code == ErrorCode::OperationInterrupted {
            return ErrorKind::Timeout;
        }
    }
    let msg = err.to_string();
    if msg.contains("interrupted") {
        ErrorKind::Timeout
    } else if ["syntax error", "incomplete input", "unrecognized token"]
        .iter()
        .any(|m| msg.contains(m))
    {
        ErrorKind::Syntax
    } else {
        ErrorKind::Runtime
    }
}

/// First keyword is SELECT, WITH or VALUES (after parentheses and comments).
fn is_query(sql: &str) -> bool {
    top_level_first_word(sql).is_some_and(|w| ["SELECT", "WITH", "VALUES"].iter().any(|k| w.eq_ignore_ascii_case(k)))
}

fn top_level_first_word(sql: &str) -> Option<String> {
    let mut rest = sql.trim_start();
    loop {
        if let Some(r) = rest.strip_prefix('(') {
            rest = r.trim_start();
        } else if let Some(r) = rest.strip_prefix("--") {
            rest = r.split_once('\n').map_or("", |(_, after)| after).trim_start();
        } else if let Some(r) = rest.strip_prefix("/*") {
            rest = r.split_once("*/").map_or("", |(_, after)| after).trim_start();
        } else {
            break;
        }
    }
    let word: String = rest.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
    (!word.is_empty()).then_some(word)
}

/// Canonical serialization token for one scalar. Numbers of either storage
/// class share a fixed six-decimal form so `1`, `1.0` and `1.0000004` agree.
pub fn scalar_token(v: &Scalar) -> String {
    match v {
        Scalar::Null => "null".to_string(),
        Scalar::Integer(i) => number_token(*i as f64),
        Scalar::Real(f) => number_token(*f),
        Scalar::Text(t) => format!("t:{t}"),
        Scalar::Blob(b) => format!("b:{}", hex::encode(b)),
    }
}

fn number_token(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "n:0.000000".to_string()
    } else {
        format!("n:{s}")
    }
}

fn row_line(row: &[Scalar]) -> String {
    let tokens: Vec<String> = row.iter().map(scalar_token).collect();
    serde_json::to_string(&tokens).expect("string vectors always serialize")
}

/// Stable key of a success outcome; `None` for errors. Without order
/// sensitivity the rows are compared as a multiset.
pub fn canonical_key(outcome: &ExecutionOutcome, order_sensitive: bool) -> Option<OutcomeKey> {
    let rows = outcome.rows()?;
    let mut lines: Vec<String> = rows.iter().map(|r| row_line(r)).collect();
    if !order_sensitive {
        lines.sort();
    }
    let mut hasher = Sha256::new();
    for l in &lines {
        hasher.update(l.as_bytes());
        hasher.update(b"\n");
    }
    Some(OutcomeKey(hex::encode(hasher.finalize())))
}

/// True iff the top-level statement (outside subqueries, string literals
/// and comments) has an `ORDER BY`.
pub fn is_order_sensitive(sql: &str) -> bool {
    let words = top_level_words(sql);
    words
        .windows(2)
        .any(|w| w[0].eq_ignore_ascii_case("ORDER") && w[1].eq_ignore_ascii_case("BY"))
}

fn top_level_words(sql: &str) -> Vec<String> {
    let chars: Vec<char> = sql.chars().collect();
    let mut words = Vec::new();
    let mut depth = 0i32;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\'' | '"' | '`' | '[' => {
                let close = if c == '[' { ']' } else { c };
                i += 1;
                while i < chars.len() && chars[i] != close {
                    i += 1;
                }
                // quoted tokens break word adjacency
                if depth == 0 {
                    words.push(String::new());
                }
            }
            '-' if chars.get(i + 1) == Some(&'-') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '/' if chars.get(i + 1) == Some(&'*') => {
                i += 2;
                while i + 1 < chars.len() && !(chars[i] == '*' && chars[i + 1] == '/') {
                    i += 1;
                }
                i += 1;
            }
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c.is_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                if depth == 0 {
                    words.push(chars[start..i].iter().collect());
                }
                continue;
            }
            c if c.is_whitespace() => {}
            _ => {
                if depth == 0 {
                    words.push(String::new());
                }
            }
        }
        i += 1;
    }
    words
}
