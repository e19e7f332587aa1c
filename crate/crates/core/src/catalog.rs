//! Database catalogs and evaluation examples in Spider's on-disk layout.
//!
//! A catalog carries the schema (tables with typed columns), primary keys,
//! foreign keys and the path of the concrete SQLite file. Catalogs are
//! immutable after load.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("missing database file for `{0}`")]
    MissingDbFile(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("key index {index} out of range in `{db_id}`")]
    KeyIndexOutOfRange { db_id: String, index: i64 },
    #[error("malformed dataset: {0}")]
    MalformedDataset(String),
    #[error("unknown db_id `{0}`")]
    UnknownDbId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sqlite error on {path}: {source}")]
    Sqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Number,
    Text,
    Time,
    Boolean,
    Others,
}

impl ColumnType {
    /// Maps a Spider type string; anything unrecognized becomes `Others`.
    pub fn parse(raw: &str) -> Self {
        match raw.trim().to_ascii_lowercase().as_str() {
            "number" => Self::Number,
            "text" => Self::Text,
            "time" => Self::Time,
            "boolean" => Self::Boolean,
            _ => Self::Others,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Number => "number",
            Self::Text => "text",
            Self::Time => "time",
            Self::Boolean => "boolean",
            Self::Others => "others",
        }
    }

    /// Type of a column declared in SQLite DDL, following SQLite's affinity rules loosely.
    pub fn from_declared(decl: &str) -> Self {
        let d = decl.to_ascii_uppercase();
        if d.contains("BOOL") {
            Self::Boolean
        } else if d.contains("DATE") || d.contains("TIME") || d.contains("YEAR") {
            Self::Time
        } else if d.contains("CHAR") || d.contains("TEXT") || d.contains("CLOB") {
            Self::Text
        } else if ["INT", "REAL", "NUM", "DEC", "FLOA", "DOUB"]
            .iter()
            .any(|k| d.contains(k))
        {
            Self::Number
        } else {
            Self::Others
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    /// Original casing.
    pub name: String,
    pub data_type: ColumnType,
    /// Spider global column index (`*` occupies index 0).
    pub ordinal: usize,
}

impl ColumnSchema {
    pub fn normalized_name(&self) -> String {
        self.name.to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
}

impl TableSchema {
    pub fn normalized_name(&self) -> String {
        self.name.to_lowercase()
    }
}

/// (table index, column index within that table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub table: usize,
    pub column: usize,
}

impl ColumnRef {
    pub fn new(table: usize, column: usize) -> Self {
        Self { table, column }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ForeignKey {
    pub child: ColumnRef,
    pub parent: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatabaseCatalog {
    pub db_id: String,
    pub tables: Vec<TableSchema>,
    pub primary_keys: Vec<ColumnRef>,
    pub foreign_keys: Vec<ForeignKey>,
    pub db_path: PathBuf,
}

impl DatabaseCatalog {
    pub fn table(&self, idx: usize) -> Option<&TableSchema> {
        self.tables.get(idx)
    }

    pub fn column(&self, r: ColumnRef) -> Option<&ColumnSchema> {
        self.tables.get(r.table).and_then(|t| t.columns.get(r.column))
    }

    /// `(table name, column name)` for a reference that is known to resolve.
    pub fn names(&self, r: ColumnRef) -> (&str, &str) {
        let t = &self.tables[r.table];
        (&t.name, &t.columns[r.column].name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn is_primary_key(&self, r: ColumnRef) -> bool {
        self.primary_keys.contains(&r)
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Serializes back into a Spider manifest entry.
    pub fn to_manifest(&self) -> ManifestEntry {
        let mut column_names_original = vec![(-1, "*".to_string())];
        let mut column_types = vec!["text".to_string()];
        let mut global = BTreeMap::new();
        for (ti, t) in self.tables.iter().enumerate() {
            for (ci, c) in t.columns.iter().enumerate() {
                global.insert(ColumnRef::new(ti, ci), column_names_original.len() as i64);
                column_names_original.push((ti as i64, c.name.clone()));
                column_types.push(c.data_type.as_str().to_string());
            }
        }
        ManifestEntry {
            db_id: self.db_id.clone(),
            table_names: self.tables.iter().map(|t| t.normalized_name()).collect(),
            table_names_original: self.tables.iter().map(|t| t.name.clone()).collect(),
            column_names: column_names_original
                .iter()
                .map(|(t, n)| (*t, n.to_lowercase()))
                .collect(),
            column_names_original,
            column_types,
            primary_keys: self
                .primary_keys
                .iter()
                .map(|r| PrimaryKeyEntry::Single(global[r]))
                .collect(),
            foreign_keys: self
                .foreign_keys
                .iter()
                .map(|fk| (global[&fk.child], global[&fk.parent]))
                .collect(),
        }
    }
}

/// One record of a Spider `tables.json` manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub db_id: String,
    pub table_names_original: Vec<String>,
    #[serde(default)]
    pub table_names: Vec<String>,
    pub column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    pub column_names: Vec<(i64, String)>,
    pub column_types: Vec<String>,
    pub primary_keys: Vec<PrimaryKeyEntry>,
    pub foreign_keys: Vec<(i64, i64)>,
}

/// Spider lists primary keys either as a single global index or as a
/// composite group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrimaryKeyEntry {
    Single(i64),
    Composite(Vec<i64>),
}

/// Conventional database location: `<db_dir>/<db_id>/<db_id>.sqlite`.
pub fn db_file_path(db_dir: &Path, db_id: &str) -> PathBuf {
    db_dir.join(db_id).join(format!("{db_id}.sqlite"))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_catalogs(manifest_path: &Path, db_dir: &Path) -> Result<Vec<DatabaseCatalog>> {
    let raw = read_file(manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&raw)
        .map_err(|e| CatalogError::MalformedManifest(e.to_string()))?;
    entries
        .into_iter()
        .map(|entry| {
            let path = db_file_path(db_dir, &entry.db_id);
            let catalog = catalog_from_manifest(&entry, path)?;
            if !catalog.db_path.is_file() {
                return Err(CatalogError::MissingDbFile(catalog.db_id));
            }
            Ok(catalog)
        })
        .collect()
}

/// Builds a catalog from a manifest entry, enforcing every structural
/// invariant. Does not touch the filesystem.
pub fn catalog_from_manifest(entry: &ManifestEntry, db_path: PathBuf) -> Result<DatabaseCatalog> {
    let db_id = entry.db_id.clone();
    let malformed = |msg: String| CatalogError::MalformedManifest(format!("{db_id}: {msg}"));
    if db_id.is_empty() {
        return Err(CatalogError::MalformedManifest("empty db_id".into()));
    }
    if entry.column_types.len() != entry.column_names_original.len() {
        return Err(malformed(format!(
            "{} column names but {} column types",
            entry.column_names_original.len(),
            entry.column_types.len()
        )));
    }

    let mut tables: Vec<TableSchema> = entry
        .table_names_original
        .iter()
        .map(|n| TableSchema {
            name: n.clone(),
            columns: Vec::new(),
        })
        .collect();
    // global index -> ColumnRef
    let mut by_global: Vec<Option<ColumnRef>> = Vec::with_capacity(entry.column_names_original.len());
    for (ordinal, ((table_idx, name), ty)) in entry
        .column_names_original
        .iter()
        .zip(&entry.column_types)
        .enumerate()
    {
        if *table_idx < 0 {
            by_global.push(None);
            continue;
        }
        let ti = *table_idx as usize;
        let table = tables
            .get_mut(ti)
            .ok_or_else(|| malformed(format!("column `{name}` cites missing table {table_idx}")))?;
        if name.is_empty() {
            return Err(malformed(format!("empty column name in table `{}`", table.name)));
        }
        by_global.push(Some(ColumnRef::new(ti, table.columns.len())));
        table.columns.push(ColumnSchema {
            name: name.clone(),
            data_type: ColumnType::parse(ty),
            ordinal,
        });
    }

    let mut seen_tables = HashSet::new();
    for t in &tables {
        if t.name.is_empty() {
            return Err(malformed("empty table name".into()));
        }
        if !seen_tables.insert(t.name.to_lowercase()) {
            return Err(malformed(format!("duplicate table name `{}`", t.name)));
        }
        if t.columns.is_empty() {
            return Err(malformed(format!("table `{}` has no columns", t.name)));
        }
        let mut seen = HashSet::new();
        for c in &t.columns {
            if !seen.insert(c.name.to_lowercase()) {
                return Err(malformed(format!("duplicate column `{}` in `{}`", c.name, t.name)));
            }
        }
    }

    let resolve = |index: i64| -> Result<ColumnRef> {
        usize::try_from(index)
            .ok()
            .and_then(|i| by_global.get(i).copied().flatten())
            .ok_or(CatalogError::KeyIndexOutOfRange {
                db_id: db_id.clone(),
                index,
            })
    };

    let mut primary_keys = Vec::new();
    for pk in &entry.primary_keys {
        let group = match pk {
            PrimaryKeyEntry::Single(i) => vec![*i],
            PrimaryKeyEntry::Composite(v) => v.clone(),
        };
        for idx in group {
            let r = resolve(idx)?;
            if primary_keys.contains(&r) {
                return Err(malformed(format!("duplicate primary key entry {idx}")));
            }
            primary_keys.push(r);
        }
    }
    let foreign_keys = entry
        .foreign_keys
        .iter()
        .map(|(c, p)| {
            Ok(ForeignKey {
                child: resolve(*c)?,
                parent: resolve(*p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DatabaseCatalog {
        db_id: db_id.clone(),
        tables,
        primary_keys,
        foreign_keys,
        db_path,
    })
}

/// Writes catalogs as a Spider manifest.
pub fn write_manifest(path: &Path, catalogs: &[DatabaseCatalog]) -> Result<()> {
    let entries: Vec<ManifestEntry> = catalogs.iter().map(|c| c.to_manifest()).collect();
    let body = serde_json::to_string_pretty(&entries)
        .map_err(|e| CatalogError::MalformedManifest(e.to_string()))?;
    fs::write(path, body).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Derives a catalog straight from a SQLite file. Used when no manifest is
/// available; column ordinals follow the same `*`-first global numbering.
pub fn introspect(db_id: &str, db_path: &Path) -> Result<DatabaseCatalog> {
    let sqlite = |source| CatalogError::Sqlite {
        path: db_path.to_path_buf(),
        source,
    };
    if !db_path.is_file() {
        return Err(CatalogError::MissingDbFile(db_id.to_string()));
    }
    let conn = Connection::open_with_flags(db_path, OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(sqlite)?;
    let names: Vec<String> = {
        let mut stmt = conn
            .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
            .map_err(sqlite)?;
        let rows = stmt.query_map([], |r| r.get(0)).map_err(sqlite)?;
        rows.collect::<Result<_, _>>().map_err(sqlite)?
    };

    let mut tables = Vec::new();
    let mut primary_keys = Vec::new();
    let mut ordinal = 1;
    for (ti, name) in names.iter().enumerate() {
        let mut stmt = conn
            .prepare(&format!("PRAGMA table_info({})", quote_ident(name)))
            .map_err(sqlite)?;
        let cols: Vec<(String, String, i64)> = stmt
            .query_map([], |r| Ok((r.get(1)?, r.get::<_, Option<String>>(2)?.unwrap_or_default(), r.get(5)?)))
            .map_err(sqlite)?
            .collect::<Result<_, _>>()
            .map_err(sqlite)?;
        let mut pk: Vec<(i64, usize)> = Vec::new();
        let mut columns = Vec::new();
        for (ci, (cname, decl, pk_pos)) in cols.into_iter().enumerate() {
            if pk_pos > 0 {
                pk.push((pk_pos, ci));
            }
            columns.push(ColumnSchema {
                name: cname,
                data_type: ColumnType::from_declared(&decl),
                ordinal,
            });
            ordinal += 1;
        }
        pk.sort();
        primary_keys.extend(pk.into_iter().map(|(_, ci)| ColumnRef::new(ti, ci)));
        tables.push(TableSchema {
            name: name.clone(),
            columns,
        });
    }

    let mut foreign_keys = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut stmt = conn
            .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(name)))
            .map_err(sqlite)?;
        let fks: Vec<(String, String, Option<String>)> = stmt
            .query_map([], |r| Ok((r.get(2)?, r.get(3)?, r.get(4)?)))
            .map_err(sqlite)?
            .collect::<Result<_, _>>()
            .map_err(sqlite)?;
        for (parent_table, from, to) in fks {
            let Some(pti) = tables.iter().position(|t| t.name.eq_ignore_ascii_case(&parent_table)) else {
                continue;
            };
            let Some(cci) = find_column(&tables[ti], &from) else {
                continue;
            };
            let pci = match to {
                Some(to) => find_column(&tables[pti], &to),
                None => primary_keys.iter().find(|r| r.table == pti).map(|r| r.column),
            };
            if let Some(pci) = pci {
                foreign_keys.push(ForeignKey {
                    child: ColumnRef::new(ti, cci),
                    parent: ColumnRef::new(pti, pci),
                });
            }
        }
    }

    Ok(DatabaseCatalog {
        db_id: db_id.to_string(),
        tables,
        primary_keys,
        foreign_keys,
        db_path: db_path.to_path_buf(),
    })
}

fn find_column(table: &TableSchema, name: &str) -> Option<usize> {
    table.columns.iter().position(|c| c.name.eq_ignore_ascii_case(name))
}

/// Double-quoted SQL identifier.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "VIOLATION: {v}")?;
        }
        Ok(())
    }
}

/// Checks every catalog invariant and cross-checks the schema against the
/// concrete database file. Never fails; problems become report entries.
pub fn validate_catalog(catalog: &DatabaseCatalog) -> ValidationReport {
    let mut out = Vec::new();
    let mut seen_tables = HashSet::new();
    for t in &catalog.tables {
        if t.name.is_empty() {
            out.push("empty table name".to_string());
        }
        if !seen_tables.insert(t.name.to_lowercase()) {
            out.push(format!("duplicate table name `{}`", t.name));
        }
        if t.columns.is_empty() {
            out.push(format!("table `{}` has no columns", t.name));
        }
        let mut seen = HashSet::new();
        for c in &t.columns {
            if c.name.is_empty() {
                out.push(format!("empty column name in table `{}`", t.name));
            }
            if !seen.insert(c.name.to_lowercase()) {
                out.push(format!("duplicate column name `{}` in table `{}`", c.name, t.name));
            }
        }
    }

    let mut seen_pk = HashSet::new();
    for pk in &catalog.primary_keys {
        if catalog.column(*pk).is_none() {
            out.push(format!("primary key ({}, {}) does not resolve", pk.table, pk.column));
        } else if !seen_pk.insert(*pk) {
            out.push(format!("duplicate primary key entry ({}, {})", pk.table, pk.column));
        }
    }
    for fk in &catalog.foreign_keys {
        for (role, r) in [("child", fk.child), ("parent", fk.parent)] {
            if catalog.column(r).is_none() {
                out.push(format!("foreign key {role} ({}, {}) does not resolve", r.table, r.column));
            }
        }
    }

    match Connection::open_with_flags(&catalog.db_path, OpenFlags::SQLITE_OPEN_READ_ONLY) {
        Ok(conn) => cross_check(catalog, &conn, &mut out),
        Err(e) => out.push(format!("database file unreadable: {e}")),
    }
    ValidationReport { violations: out }
}

fn cross_check(catalog: &DatabaseCatalog, conn: &Connection, out: &mut Vec<String>) {
    for t in &catalog.tables {
        let sql = format!("PRAGMA table_info({})", quote_ident(&t.name));
        let cols: Result<Vec<String>, _> = conn
            .prepare(&sql)
            .and_then(|mut s| s.query_map([], |r| r.get::<_, String>(1))?.collect());
        match cols {
            Ok(cols) if cols.is_empty() => out.push(format!("table not found in database: `{}`", t.name)),
            Ok(cols) => {
                for c in &t.columns {
                    if !cols.iter().any(|n| n.eq_ignore_ascii_case(&c.name)) {
                        out.push(format!("column not found in database: `{}`.`{}`", t.name, c.name));
                    }
                }
            }
            Err(e) => out.push(format!("cannot inspect table `{}`: {e}", t.name)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExampleItem {
    pub example_id: String,
    pub question: String,
    pub gold_sql: Option<String>,
    pub db_id: String,
}

#[derive(Deserialize)]
struct DatasetRecord {
    question: Option<String>,
    query: Option<String>,
    db_id: Option<String>,
    example_id: Option<String>,
}

/// Six-digit zero-padded dataset position.
pub fn default_example_id(position: usize) -> String {
    format!("{position:06}")
}

pub fn load_examples(dataset_path: &Path) -> Result<Vec<ExampleItem>> {
    let raw = read_file(dataset_path)?;
    let records: Vec<DatasetRecord> =
        serde_json::from_str(&raw).map_err(|e| CatalogError::MalformedDataset(e.to_string()))?;
    records
        .into_iter()
        .enumerate()
        .map(|(pos, r)| {
            let question = r
                .question
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| CatalogError::MalformedDataset(format!("record {pos}: missing question")))?;
            let db_id = r
                .db_id
                .ok_or_else(|| CatalogError::MalformedDataset(format!("record {pos}: missing db_id")))?;
            Ok(ExampleItem {
                example_id: r.example_id.unwrap_or_else(|| default_example_id(pos)),
                question,
                gold_sql: r.query,
                db_id,
            })
        })
        .collect()
}

/// Catalogs indexed by `db_id`, keeping manifest order available.
#[derive(Debug, Clone, Default)]
pub struct CatalogSet {
    order: Vec<String>,
    by_id: BTreeMap<String, DatabaseCatalog>,
}

impl CatalogSet {
    pub fn new(catalogs: Vec<DatabaseCatalog>) -> Self {
        let mut set = Self::default();
        for c in catalogs {
            set.order.push(c.db_id.clone());
            set.by_id.insert(c.db_id.clone(), c);
        }
        set
    }

    pub fn get(&self, db_id: &str) -> Option<&DatabaseCatalog> {
        self.by_id.get(db_id)
    }

    pub fn require(&self, db_id: &str) -> Result<&DatabaseCatalog> {
        self.get(db_id)
            .ok_or_else(|| CatalogError::UnknownDbId(db_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatabaseCatalog> {
        self.order.iter().map(|id| &self.by_id[id])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Fails with `UnknownDbId` for the first example whose database is not loaded.
    pub fn check_examples(&self, examples: &[ExampleItem]) -> Result<()> {
        match examples.iter().find(|e| self.get(&e.db_id).is_none()) {
            Some(e) => Err(CatalogError::UnknownDbId(e.db_id.clone())),
            None => Ok(()),
        }
    }
}
