//! Question-relevant cell values for prompt construction.
//!
//! Every text column is scanned and each distinct value is scored against the
//! question with a longest-common-substring ratio. Values at or above
//! [`MATCH_THRESHOLD`] are kept, best first, up to a per-column cap.

use std::path::PathBuf;

use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

use crate::catalog::{quote_ident, ColumnType, DatabaseCatalog};

pub const MATCH_THRESHOLD: f64 = 0.85;
pub const DEFAULT_MAX_PER_COLUMN: usize = 3;
/// Distinct values scanned per column, in row order.
pub const SCAN_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("database unreadable: {path}: {source}")]
    DbUnreadable {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("max_per_column must be at least 1")]
    ZeroCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatch {
    pub table_name: String,
    pub column_name: String,
    pub value: String,
    pub score: f64,
}

/// `|LCS(lower(question), lower(value))| / |lower(value)|`, where LCS is the
/// longest common contiguous substring, measured in characters.
pub fn score_match(question: &str, value: &str) -> f64 {
    let q: Vec<char> = question.to_lowercase().chars().collect();
    let v: Vec<char> = value.to_lowercase().chars().collect();
    if v.is_empty() {
        return 0.0;
    }
    longest_common_substring(&q, &v) as f64 / v.len() as f64
}

fn longest_common_substring(a: &[char], b: &[char]) -> usize {
    // rolling DP row over b
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

pub fn link_values(
    question: &str,
    catalog: &DatabaseCatalog,
    max_per_column: usize,
) -> Result<Vec<ValueMatch>, LinkError> {
    if max_per_column == 0 {
        return Err(LinkError::ZeroCap);
    }
    let unreadable = |source| LinkError::DbUnreadable {
        path: catalog.db_path.clone(),
        source,
    };
    let conn = Connection::open_with_flags(
        &catalog.db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(unreadable)?;

    let mut out = Vec::new();
    for table in &catalog.tables {
        for column in table.columns.iter().filter(|c| c.data_type == ColumnType::Text) {
            let values = distinct_values(&conn, &table.name, &column.name).map_err(unreadable)?;
            let mut scored: Vec<(f64, String)> = values
                .into_iter()
                .filter(|v| !v.trim().is_empty())
                .map(|v| (score_match(question, &v), v))
                .filter(|(s, _)| *s >= MATCH_THRESHOLD)
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            scored.dedup_by(|a, b| a.1 == b.1);
            out.extend(scored.into_iter().take(max_per_column).map(|(score, value)| ValueMatch {
                table_name: table.name.clone(),
                column_name: column.name.clone(),
                value,
                score,
            }));
        }
    }
    Ok(out)
}

fn distinct_values(conn: &Connection, table: &str, column: &str) -> rusqlite::Result<Vec<String>> {
    let sql = format!(
        "SELECT DISTINCT CAST({col} AS TEXT) FROM {tab} WHERE {col} IS NOT NULL LIMIT {SCAN_CAP}",
        col = quote_ident(column),
        tab = quote_ident(table),
    );
    let mut stmt = conn.prepare(&sql)?;
    let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
    rows.collect()
}
