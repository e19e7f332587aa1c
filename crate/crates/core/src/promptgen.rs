//! Prompt designs.
//!
//! Three serializations of a (question, database) pair are registered:
//! `concise` linearizes the schema with inline values, `verbose` describes it
//! in sentences, and `baseline_default` is the bare table listing used for
//! comparison runs. Output text is frozen byte-for-byte by golden files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{DatabaseCatalog, ExampleItem};
use crate::content_linker::ValueMatch;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown prompt design `{0}`")]
    UnknownDesign(String),
    #[error("catalog `{0}` has no tables")]
    CatalogEmpty(String),
    #[error("demonstration `{0}` has no gold SQL")]
    DemoWithoutGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptDesignId {
    Concise,
    Verbose,
    BaselineDefault,
}

impl PromptDesignId {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Concise => "concise",
            Self::Verbose => "verbose",
            Self::BaselineDefault => "baseline_default",
        }
    }

    /// Text every rendered prompt of this design ends with.
    pub fn elicitation_suffix(self) -> &'static str {
        match self {
            Self::Concise => "[SQL]: ",
            Self::Verbose => "The corresponding SQL is: ",
            Self::BaselineDefault => "SELECT",
        }
    }
}

impl fmt::Display for PromptDesignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptDesignId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        list_designs()
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| PromptError::UnknownDesign(s.to_string()))
    }
}

pub fn list_designs() -> [PromptDesignId; 3] {
    [
        PromptDesignId::Concise,
        PromptDesignId::Verbose,
        PromptDesignId::BaselineDefault,
    ]
}

/// One worked example placed ahead of the test question.
#[derive(Debug, Clone)]
pub struct Demo {
    pub example: ExampleItem,
    pub catalog: DatabaseCatalog,
    pub matches: Vec<ValueMatch>,
}

#[derive(Debug, Clone, Default)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
}

impl DemoSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn shots(&self) -> usize {
        self.demos.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub design: PromptDesignId,
    pub question_id: String,
    pub content_hash: String,
}

/// Hex SHA-256 of the prompt text.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

const PREAMBLE: &str = "This is a task converting text into SQL statement. We will first given the dataset schema and then ask a question in text. You are asked to generate SQL statement.\n Here is the test question to be anwered: ";

pub fn render(
    design: PromptDesignId,
    question: &ExampleItem,
    catalog: &DatabaseCatalog,
    matches: &[ValueMatch],
    demos: &DemoSet,
) -> Result<RenderedPrompt, PromptError> {
    let mut text = String::new();
    for demo in &demos.demos {
        let gold = demo
            .example
            .gold_sql
            .as_deref()
            .filter(|g| !g.trim().is_empty())
            .ok_or_else(|| PromptError::DemoWithoutGold(demo.example.example_id.clone()))?;
        text.push_str(&render_block(design, &demo.example.question, &demo.catalog, &demo.matches)?);
        text.push_str(&demo_answer(design, gold));
        text.push_str("\n\n");
    }
    text.push_str(&render_block(design, &question.question, catalog, matches)?);
    Ok(RenderedPrompt {
        content_hash: content_hash(&text),
        text,
        design,
        question_id: question.example_id.clone(),
    })
}

/// The gold SQL as it continues a demo prompt. Baseline prompts already end
/// in `SELECT`, so the keyword is not repeated.
fn demo_answer(design: PromptDesignId, gold: &str) -> String {
    let gold = gold.trim();
    match design {
        PromptDesignId::BaselineDefault => {
            if gold.len() >= 6 && gold[..6].eq_ignore_ascii_case("SELECT") {
                gold[6..].to_string()
            } else {
                format!(" {gold}")
            }
        }
        _ => gold.to_string(),
    }
}

fn render_block(
    design: PromptDesignId,
    question: &str,
    catalog: &DatabaseCatalog,
    matches: &[ValueMatch],
) -> Result<String, PromptError> {
    if catalog.tables.is_empty() {
        return Err(PromptError::CatalogEmpty(catalog.db_id.clone()));
    }
    Ok(match design {
        PromptDesignId::Concise => concise(question, catalog, matches),
        PromptDesignId::Verbose => verbose(question, catalog, matches),
        PromptDesignId::BaselineDefault => baseline(question, catalog),
    })
}

fn values_for<'a>(matches: &'a [ValueMatch], table: &str, column: &str) -> Vec<&'a str> {
    matches
        .iter()
        .filter(|m| m.table_name.eq_ignore_ascii_case(table) && m.column_name.eq_ignore_ascii_case(column))
        .map(|m| m.value.as_str())
        .collect()
}

/// Linearized schema: `| db | table : col , col ( v1 , v2 ) | ...`.
pub fn concise_schema_block(catalog: &DatabaseCatalog, matches: &[ValueMatch]) -> String {
    let tables: Vec<String> = catalog
        .tables
        .iter()
        .map(|t| {
            let cols: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let values = values_for(matches, &t.name, &c.name);
                    if values.is_empty() {
                        c.normalized_name()
                    } else {
                        format!("{} ( {} )", c.normalized_name(), values.join(" , "))
                    }
                })
                .collect();
            format!("{} : {}", t.normalized_name(), cols.join(" , "))
        })
        .collect();
    format!("| {} | {}", catalog.db_id, tables.join(" | "))
}

fn concise(question: &str, catalog: &DatabaseCatalog, matches: &[ValueMatch]) -> String {
    let column_types: Vec<String> = catalog
        .tables
        .iter()
        .flat_map(|t| {
            t.columns
                .iter()
                .map(move |c| format!("{} : {} ({})", t.normalized_name(), c.normalized_name(), c.data_type))
        })
        .collect();
    let lower = |r| {
        let (t, c) = catalog.names(r);
        format!("{} : {}", t.to_lowercase(), c.to_lowercase())
    };
    let pks: Vec<String> = catalog.primary_keys.iter().map(|r| lower(*r)).collect();
    let fks: Vec<String> = catalog
        .foreign_keys
        .iter()
        .map(|fk| format!("{} equals {}", lower(fk.child), lower(fk.parent)))
        .collect();

    let mut s = String::from(PREAMBLE);
    s.push_str("Convert text to SQL:\n [Schema (values)]: ");
    s.push_str(&concise_schema_block(catalog, matches));
    s.push_str(";\n [Column names (type)]: ");
    s.push_str(&column_types.join(" | "));
    s.push_str(";\n [Primary Keys]: ");
    s.push_str(&pks.join(" | "));
    s.push_str(";\n [Foreign Keys]: ");
    s.push_str(&fks.join(" | "));
    s.push_str("\n [Q]: ");
    s.push_str(question);
    s.push_str(";\n [SQL]: ");
    s
}

fn verbose(question: &str, catalog: &DatabaseCatalog, matches: &[ValueMatch]) -> String {
    let key = |r| {
        let (t, c) = catalog.names(r);
        format!("{} from Table {}", c.to_lowercase(), t)
    };
    let names: Vec<&str> = catalog.tables.iter().map(|t| t.name.as_str()).collect();

    let mut s = String::from(PREAMBLE);
    s.push_str("Let us take a question and turn it into a SQL statement about database tables. ");
    s.push_str(&format!(
        "There are {} tables. Their titles are: {}. ",
        names.len(),
        names.join(", ")
    ));
    for (i, t) in catalog.tables.iter().enumerate() {
        let cols: Vec<String> = t
            .columns
            .iter()
            .map(|c| format!("{} (Type is {})", c.name, c.data_type))
            .collect();
        s.push_str(&format!(
            "Table {} is {}, and its column names and types are: {}. ",
            i + 1,
            t.name,
            cols.join(", ")
        ));
    }
    if !catalog.primary_keys.is_empty() {
        let pks: Vec<String> = catalog.primary_keys.iter().map(|r| key(*r)).collect();
        s.push_str(&format!("The primary keys are: {}. ", pks.join(", ")));
    }
    if !catalog.foreign_keys.is_empty() {
        let fks: Vec<String> = catalog
            .foreign_keys
            .iter()
            .map(|fk| format!("{} is equivalent with {}", key(fk.child), key(fk.parent)))
            .collect();
        s.push_str(&format!(
            "The foreign keys are: {}. Use foreign keys to join Tables. ",
            fks.join(", ")
        ));
    }
    let mut entries = Vec::new();
    for t in &catalog.tables {
        for c in &t.columns {
            let values = values_for(matches, &t.name, &c.name);
            if !values.is_empty() {
                entries.push(format!(
                    "Table {} Column {} have values: {}; ",
                    t.name,
                    c.normalized_name(),
                    values.join(", ")
                ));
            }
        }
    }
    if !entries.is_empty() {
        s.push_str("Columns with relevant values: ");
        s.push_str(&entries.concat());
        s.push_str(" Only use columns with relevant values to generate SQL.  ");
    }
    s.push_str("Let us take a text question and turn it into a SQL statement about database tables. The question is: ");
    s.push_str(question);
    s.push_str(" The corresponding SQL is: ");
    s
}

fn baseline(question: &str, catalog: &DatabaseCatalog) -> String {
    let tables: Vec<String> = catalog
        .tables
        .iter()
        .map(|t| {
            let cols: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
            format!("{}({})", t.name, cols.join(", "))
        })
        .collect();
    format!(
        "Complete sqlite SQL query only and with no explanation Sqlite SQL tables, with their properties: {}.  {} SELECT",
        tables.join("; "),
        question
    )
}
