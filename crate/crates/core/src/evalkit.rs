//! Execution accuracy (EX) and a simplified test-suite accuracy (TS).
//!
//! TS here is not the distilled suite of the original benchmark tooling: each
//! suite database is produced by a schema-respecting fuzzer that keeps primary
//! keys unique and foreign keys referentially intact, and mixes values sampled
//! from the original database with random ones. Reports label it
//! "TS (simplified)".

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::types::Value;
use rusqlite::{params_from_iter, Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{
    db_file_path, introspect, load_catalogs, load_examples, quote_ident, CatalogError, CatalogSet, ColumnRef,
    ColumnType, DatabaseCatalog, ForeignKey,
};
use crate::sql_exec::{canonical_key, execute, is_order_sensitive, DEFAULT_TIMEOUT};

pub const TS_LABEL: &str = "TS (simplified)";
pub const DEFAULT_SUITE_COUNT: usize = 10;
pub const DEFAULT_ROWS_PER_TABLE: usize = 50;
/// Distinct original values kept per column for sampling.
const ORIGINAL_SAMPLE_CAP: usize = 1_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold SQL failed to execute for `{example_id}`: {message}")]
    GoldExecutionFailed { example_id: String, message: String },
    #[error("no prediction for example `{0}`")]
    MissingPrediction(String),
    #[error("suite generation failed: {0}")]
    GenerationFailed(String),
    #[error("malformed prediction file at line {line}: {message}")]
    MalformedPredictions { line: usize, message: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub suite_count: usize,
    pub rows_per_table: usize,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            suite_count: DEFAULT_SUITE_COUNT,
            rows_per_table: DEFAULT_ROWS_PER_TABLE,
            seed: 0,
        }
    }
}

/// Result of comparing a prediction with gold on one database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchOutcome {
    Match(bool),
    GoldFailed(String),
}

/// Compares pred and gold on one database file. The gold query decides
/// whether row order matters.
pub fn match_on(pred_sql: &str, gold_sql: &str, db_path: &Path, timeout: Duration) -> MatchOutcome {
    let gold = execute(gold_sql, db_path, timeout);
    if let crate::sql_exec::ExecutionOutcome::Error { message, .. } = &gold {
        return MatchOutcome::GoldFailed(message.clone());
    }
    let ordered = is_order_sensitive(gold_sql);
    let pred = execute(pred_sql, db_path, timeout);
    match canonical_key(&pred, ordered) {
        Some(k) => MatchOutcome::Match(Some(k) == canonical_key(&gold, ordered)),
        None => MatchOutcome::Match(false),
    }
}

/// EX on the catalog's own database.
pub fn exec_match(pred_sql: &str, gold_sql: &str, catalog: &DatabaseCatalog) -> Result<bool, EvalError> {
    match match_on(pred_sql, gold_sql, &catalog.db_path, DEFAULT_TIMEOUT) {
        MatchOutcome::Match(m) => Ok(m),
        MatchOutcome::GoldFailed(message) => Err(EvalError::GoldExecutionFailed {
            example_id: catalog.db_id.clone(),
            message,
        }),
    }
}

/// A generated suite database and the foreign keys it could not honour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteDb {
    pub path: PathBuf,
    pub suite_index: usize,
    /// Foreign keys dropped to break reference cycles (reported, not fatal).
    pub broken_edges: Vec<ForeignKey>,
}

fn suite_rng(catalog: &DatabaseCatalog, spec: &SuiteSpec, suite_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(catalog.db_id.as_bytes());
    h.update(spec.seed.to_le_bytes());
    h.update((suite_index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Tables ordered parents-first. When only cycles remain, the lowest-index
/// table is taken and its unresolved incoming edges are dropped.
fn population_order(catalog: &DatabaseCatalog) -> (Vec<usize>, Vec<ForeignKey>) {
    let n = catalog.tables.len();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut broken = Vec::new();
    while order.len() < n {
        let ready = (0..n).find(|&t| {
            !done[t]
                && catalog
                    .foreign_keys
                    .iter()
                    .filter(|fk| fk.child.table == t)
                    .all(|fk| done[fk.parent.table] && fk.parent.table != t)
        });
        let next = match ready {
            Some(t) => t,
            None => {
                let t = (0..n).find(|&t| !done[t]).expect("some table remains");
                broken.extend(
                    catalog
                        .foreign_keys
                        .iter()
                        .filter(|fk| fk.child.table == t && (!done[fk.parent.table] || fk.parent.table == t))
                        .copied(),
                );
                log::warn!("schema cycle in `{}`: dropped constraints into table {t}", catalog.db_id);
                t
            }
        };
        done[next] = true;
        order.push(next);
    }
    (order, broken)
}

struct ColumnProfile {
    values: Vec<Value>,
    range: Option<(f64, f64)>,
    all_integer: bool,
}

fn profile_column(conn: &Connection, table: &str, column: &str) -> rusqlite::Result<ColumnProfile> {
    let sql = format!(
        "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL LIMIT {ORIGINAL_SAMPLE_CAP}",
        c = quote_ident(column),
        t = quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let values: Vec<Value> = stmt.query_map([], |r| r.get::<_, Value>(0))?.collect::<Result<_, _>>()?;
    let mut range: Option<(f64, f64)> = None;
    let mut all_integer = true;
    for v in &values {
        let x = match v {
            Value::Integer(i) => *i as f64,
            Value::Real(f) => {
                all_integer &= f.fract() == 0.0;
                *f
            }
            Value::Text(s) => match s.trim().parse::<f64>() {
                Ok(f) if f.is_finite() => {
                    all_integer &= f.fract() == 0.0;
                    f
                }
                _ => continue,
            },
            _ => continue,
        };
        range = Some(match range {
            Some((lo, hi)) => (lo.min(x), hi.max(x)),
            None => (x, x),
        });
    }
    Ok(ColumnProfile {
        values,
        range,
        all_integer,
    })
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=8);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn random_value(ty: ColumnType, profile: &ColumnProfile, rng: &mut ChaCha8Rng) -> Value {
    match ty {
        ColumnType::Number => match profile.range {
            Some((lo, hi)) if profile.all_integer => Value::Integer(rng.random_range(lo as i64..=hi as i64)),
            Some((lo, hi)) if hi > lo => Value::Real((rng.random_range(lo..=hi) * 100.0).round() / 100.0),
            Some((lo, _)) => Value::Real(lo),
            None => Value::Integer(rng.random_range(-1000..=1000)),
        },
        ColumnType::Time => Value::Text(format!(
            "{:04}-{:02}-{:02}",
            rng.random_range(1990..=2030),
            rng.random_range(1..=12),
            rng.random_range(1..=28)
        )),
        ColumnType::Boolean => Value::Integer(rng.random_range(0..=1)),
        ColumnType::Text | ColumnType::Others => {
            let words = rng.random_range(1..=3);
            Value::Text((0..words).map(|_| random_word(rng)).collect::<Vec<_>>().join(" "))
        }
    }
}

/// Half the time an original value, otherwise a fresh random one.
fn mixed_value(ty: ColumnType, profile: &ColumnProfile, rng: &mut ChaCha8Rng) -> Value {
    if !profile.values.is_empty() && rng.random_bool(0.5) {
        profile.values[rng.random_range(0..profile.values.len())].clone()
    } else {
        random_value(ty, profile, rng)
    }
}

fn unique_values(ty: ColumnType, profile: &ColumnProfile, n: usize, rng: &mut ChaCha8Rng) -> Vec<Value> {
    if ty == ColumnType::Number {
        let (lo, hi) = match profile.range {
            Some((lo, hi)) => (lo.floor() as i64, hi.ceil() as i64),
            None => (1, 1),
        };
        let hi = hi.max(lo + 2 * n as i64);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let v = rng.random_range(lo..=hi);
            if seen.insert(v) {
                out.push(Value::Integer(v));
            }
        }
        return out;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        let mut v = match mixed_value(ty, profile, rng) {
            Value::Text(s) => s,
            Value::Integer(i) => i.to_string(),
            Value::Real(f) => f.to_string(),
            other => format!("{other:?}"),
        };
        if seen.contains(&v) {
            misses += 1;
            if misses < 20 {
                continue;
            }
            v = format!("{v}_{}", out.len());
            if seen.contains(&v) {
                continue;
            }
        }
        misses = 0;
        seen.insert(v.clone());
        out.push(Value::Text(v));
    }
    out
}

fn read_column(conn: &Connection, table: &str, column: &str) -> rusqlite::Result<Vec<Value>> {
    let sql = format!(
        "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY rowid",
        c = quote_ident(column),
        t = quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let rows = stmt.query_map([], |r| r.get::<_, Value>(0))?;
    rows.collect()
}

/// Writes a fresh database with the catalog's schema, filled with fuzzed rows.
/// Output bytes depend only on `(catalog, spec.seed, suite_index)`.
pub fn generate_suite_db(
    catalog: &DatabaseCatalog,
    spec: &SuiteSpec,
    suite_index: usize,
    out_dir: &Path,
) -> Result<SuiteDb, EvalError> {
    let fail = |what: &str, e: rusqlite::Error| EvalError::GenerationFailed(format!("{}: {what}: {e}", catalog.db_id));
    let dir = out_dir.join(&catalog.db_id);
    fs::create_dir_all(&dir).map_err(|source| EvalError::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join(format!("suite_{}_{suite_index}.sqlite", spec.seed));
    if path.exists() {
        fs::remove_file(&path).map_err(|source| EvalError::Io {
            path: path.clone(),
            source,
        })?;
    }

    let original = Connection::open_with_flags(&catalog.db_path, OpenFlags::SQLITE_OPEN_READ_ONLY)
        .map_err(|e| fail("open original", e))?;
    let ddl: Vec<String> = original
        .prepare(
            "SELECT sql FROM sqlite_master WHERE sql IS NOT NULL AND name NOT LIKE 'sqlite_%' \
             AND type IN ('table', 'index', 'view') ORDER BY CASE type WHEN 'table' THEN 0 WHEN 'index' THEN 1 ELSE 2 END, rowid",
        )
        .and_then(|mut s| s.query_map([], |r| r.get(0))?.collect())
        .map_err(|e| fail("read schema", e))?;

    let mut profiles: HashMap<ColumnRef, ColumnProfile> = HashMap::new();
    for (ti, t) in catalog.tables.iter().enumerate() {
        for (ci, c) in t.columns.iter().enumerate() {
            let p = profile_column(&original, &t.name, &c.name).map_err(|e| fail("profile column", e))?;
            profiles.insert(ColumnRef::new(ti, ci), p);
        }
    }
    drop(original);

    let mut conn = Connection::open(&path).map_err(|e| fail("create suite", e))?;
    // referential integrity is maintained by construction; enforcement would
    // reject the rows of deliberately dropped (cycle-breaking) edges
    conn.execute_batch("PRAGMA foreign_keys = OFF")
        .map_err(|e| fail("configure suite", e))?;
    for stmt in &ddl {
        conn.execute_batch(stmt).map_err(|e| fail("apply schema", e))?;
    }

    let mut rng = suite_rng(catalog, spec, suite_index);
    let (order, broken) = population_order(catalog);
    for ti in order {
        let table = &catalog.tables[ti];
        let mut n = spec.rows_per_table;
        let mut columns: Vec<Vec<Value>> = Vec::with_capacity(table.columns.len());
        for (ci, col) in table.columns.iter().enumerate() {
            let r = ColumnRef::new(ti, ci);
            let profile = &profiles[&r];
            let is_pk = catalog.is_primary_key(r);
            let fk = catalog
                .foreign_keys
                .iter()
                .find(|fk| fk.child == r && !broken.contains(fk));
            let values = match fk {
                Some(fk) => {
                    let (pt, pc) = catalog.names(fk.parent);
                    let mut parents = read_column(&conn, pt, pc).map_err(|e| fail("read parent keys", e))?;
                    if is_pk {
                        parents.shuffle(&mut rng);
                        parents.truncate(n);
                        n = n.min(parents.len());
                        parents
                    } else if parents.is_empty() {
                        vec![Value::Null; n]
                    } else {
                        (0..n).map(|_| parents[rng.random_range(0..parents.len())].clone()).collect()
                    }
                }
                None if is_pk => unique_values(col.data_type, profile, n, &mut rng),
                None => (0..n).map(|_| mixed_value(col.data_type, profile, &mut rng)).collect(),
            };
            columns.push(values);
        }

        let names: Vec<String> = table.columns.iter().map(|c| quote_ident(&c.name)).collect();
        let placeholders = vec!["?"; names.len()].join(", ");
        let sql = format!(
            "INSERT OR IGNORE INTO {} ({}) VALUES ({placeholders})",
            quote_ident(&table.name),
            names.join(", ")
        );
        let tx = conn.transaction().map_err(|e| fail("begin", e))?;
        {
            let mut stmt = tx.prepare(&sql).map_err(|e| fail("prepare insert", e))?;
            for row in 0..n {
                stmt.execute(params_from_iter(columns.iter().map(|c| &c[row])))
                    .map_err(|e| fail("insert", e))?;
            }
        }
        tx.commit().map_err(|e| fail("commit", e))?;
    }
    conn.close().map_err(|(_, e)| fail("close", e))?;
    Ok(SuiteDb {
        path,
        suite_index,
        broken_edges: broken,
    })
}

/// Generates each suite database once and hands out shared paths afterwards.
pub struct SuiteCache {
    dir: PathBuf,
    generated: Mutex<HashMap<(String, u64, usize), SuiteDb>>,
}

impl SuiteCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            generated: Mutex::new(HashMap::new()),
        }
    }

    pub fn suite(&self, catalog: &DatabaseCatalog, spec: &SuiteSpec, suite_index: usize) -> Result<SuiteDb, EvalError> {
        let key = (catalog.db_id.clone(), spec.seed, suite_index);
        let mut map = self.generated.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = map.get(&key) {
            return Ok(s.clone());
        }
        let suite = generate_suite_db(catalog, spec, suite_index, &self.dir)?;
        map.insert(key, suite.clone());
        Ok(suite)
    }
}

/// EX on the original database and on every generated suite. Suites are
/// numbered from 1; the original database plays suite 0.
pub fn ts_match(
    pred_sql: &str,
    gold_sql: &str,
    catalog: &DatabaseCatalog,
    spec: &SuiteSpec,
    suites: &SuiteCache,
) -> Result<bool, EvalError> {
    if !exec_match(pred_sql, gold_sql, catalog)? {
        return Ok(false);
    }
    for i in 1..=spec.suite_count {
        let suite = suites.suite(catalog, spec, i)?;
        match match_on(pred_sql, gold_sql, &suite.path, DEFAULT_TIMEOUT) {
            MatchOutcome::Match(true) => {}
            MatchOutcome::Match(false) => return Ok(false),
            // gold broken on fuzzed data says nothing about pred
            MatchOutcome::GoldFailed(_) => {}
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub sql: String,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let file = fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| EvalError::MalformedPredictions {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionScore {
    pub example_id: String,
    pub db_id: String,
    pub ex: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<bool>,
    /// Execution error kind of the prediction on the original database, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedQuestion {
    pub example_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalCounts {
    pub total: usize,
    pub scored: usize,
    pub ex_correct: usize,
    pub ts_correct: usize,
    pub pred_errors: BTreeMap<String, usize>,
    pub gold_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionScore>,
    pub excluded: Vec<ExcludedQuestion>,
    pub ex_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts_accuracy: Option<f64>,
    pub ts_label: &'static str,
    pub counts: EvalCounts,
}

impl EvalReport {
    /// Lines printed at the end of an evaluation run.
    pub fn summary(&self) -> String {
        let mut s = format!("EX: {:.4}\n", self.ex_accuracy);
        if let Some(ts) = self.ts_accuracy {
            s.push_str(&format!("{TS_LABEL}: {ts:.4}\n"));
        }
        s.push_str(&format!(
            "scored: {} of {} (gold failures: {})\n",
            self.counts.scored, self.counts.total, self.counts.gold_failures
        ));
        s
    }
}

/// Where catalogs for evaluation come from.
pub enum CatalogSource<'a> {
    Manifest(&'a Path),
    /// Read schemas straight from each database file.
    Introspect,
}

pub struct EvalOptions<'a> {
    pub catalogs: CatalogSource<'a>,
    pub suite: Option<SuiteSpec>,
    /// Directory for generated suite databases.
    pub work_dir: PathBuf,
}

pub fn evaluate_file(
    pred_path: &Path,
    dataset_path: &Path,
    db_dir: &Path,
    options: &EvalOptions<'_>,
) -> Result<EvalReport, EvalError> {
    let examples = load_examples(dataset_path)?;
    let predictions: HashMap<String, String> = read_predictions(pred_path)?
        .into_iter()
        .map(|p| (p.example_id, p.sql))
        .collect();
    if let Some(missing) = examples.iter().find(|e| !predictions.contains_key(&e.example_id)) {
        return Err(EvalError::MissingPrediction(missing.example_id.clone()));
    }

    let catalogs = match options.catalogs {
        CatalogSource::Manifest(path) => CatalogSet::new(load_catalogs(path, db_dir)?),
        CatalogSource::Introspect => {
            let mut ids: Vec<&str> = examples.iter().map(|e| e.db_id.as_str()).collect();
            ids.sort();
            ids.dedup();
            CatalogSet::new(
                ids.into_iter()
                    .map(|id| introspect(id, &db_file_path(db_dir, id)))
                    .collect::<Result<_, _>>()?,
            )
        }
    };
    catalogs.check_examples(&examples)?;
    let suites = SuiteCache::new(&options.work_dir);

    let mut per_question = Vec::new();
    let mut excluded = Vec::new();
    let mut counts = EvalCounts {
        total: examples.len(),
        ..Default::default()
    };
    for example in &examples {
        let catalog = catalogs.require(&example.db_id)?;
        let pred = &predictions[&example.example_id];
        let Some(gold) = example.gold_sql.as_deref() else {
            counts.gold_failures += 1;
            excluded.push(ExcludedQuestion {
                example_id: example.example_id.clone(),
                reason: "no gold SQL".into(),
            });
            continue;
        };
        let ex = match match_on(pred, gold, &catalog.db_path, DEFAULT_TIMEOUT) {
            MatchOutcome::Match(m) => m,
            MatchOutcome::GoldFailed(message) => {
                counts.gold_failures += 1;
                excluded.push(ExcludedQuestion {
                    example_id: example.example_id.clone(),
                    reason: message,
                });
                continue;
            }
        };
        let pred_error = execute(pred, &catalog.db_path, DEFAULT_TIMEOUT)
            .error_kind()
            .map(|k| k.as_str().to_string());
        if let Some(kind) = &pred_error {
            *counts.pred_errors.entry(kind.clone()).or_default() += 1;
        }
        let ts = match &options.suite {
            Some(spec) if ex => Some(ts_match(pred, gold, catalog, spec, &suites)?),
            Some(_) => Some(false),
            None => None,
        };
        counts.scored += 1;
        counts.ex_correct += ex as usize;
        counts.ts_correct += ts.unwrap_or(false) as usize;
        per_question.push(QuestionScore {
            example_id: example.example_id.clone(),
            db_id: example.db_id.clone(),
            ex,
            ts,
            pred_error,
        });
    }

    let ratio = |k: usize| if counts.scored == 0 { 0.0 } else { k as f64 / counts.scored as f64 };
    Ok(EvalReport {
        ex_accuracy: ratio(counts.ex_correct),
        ts_accuracy: options.suite.map(|_| ratio(counts.ts_correct)),
        ts_label: TS_LABEL,
        per_question,
        excluded,
        counts,
    })
}
