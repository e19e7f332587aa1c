#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqlprompt_core::catalog::{load_catalogs, load_examples, CatalogSet, ExampleItem};
use sqlprompt_core::content_linker::link_values;
use sqlprompt_core::llm_gateway::ScriptRecord;
use sqlprompt_core::promptgen::{render, DemoSet, PromptDesignId};
use sqlprompt_testkit::{materialize, Fixture};
use tempfile::TempDir;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sqlprompt"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("running sqlprompt")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A materialized fixture with a run config pointing at a scripted backend.
pub struct Workspace {
    pub dir: TempDir,
    pub fixture: Fixture,
    pub config: PathBuf,
}

impl Workspace {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn output(&self) -> PathBuf {
        self.root().join("out").join("pred.jsonl")
    }

    pub fn cache(&self) -> PathBuf {
        self.root().join("cache")
    }

    pub fn config_str(&self) -> &str {
        self.config.to_str().unwrap()
    }
}

/// Two arms over one scripted model: concise with 4 samples, verbose with 2.
pub const ARMS: &str = r#"
[[arms]]
model_id = "m"
design = "concise"
samples = 4
temperature = 0.5

[[arms]]
model_id = "m"
design = "verbose"
samples = 2
temperature = 0.5
"#;

/// Builds a workspace over `dataset` (a fixture file name) whose scripts give
/// each example the completions returned by `script`.
pub fn workspace(dataset: &str, script: impl Fn(&ExampleItem, PromptDesignId) -> Vec<String>) -> Workspace {
    let dir = TempDir::new().unwrap();
    let fixture = materialize(&dir.path().join("fx")).unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            r#"seed = 7
db_dir = "fx/database"
manifest = "fx/tables.json"
dataset = "fx/{dataset}"
output = "out/pred.jsonl"
cache_dir = "cache"
fan_out = 4
demo_source = "fx/demos.json"

[backends.m]
kind = "scripted"
dir = "scripts"
{ARMS}"#
        ),
    )
    .unwrap();

    let catalogs = CatalogSet::new(load_catalogs(&fixture.tables, &fixture.db_dir).unwrap());
    let examples = load_examples(&fixture.root.join(dataset)).unwrap();
    let scripts = dir.path().join("scripts");
    fs::create_dir_all(&scripts).unwrap();
    let mut records = Vec::new();
    for example in &examples {
        let catalog = catalogs.require(&example.db_id).unwrap();
        let matches = link_values(&example.question, catalog, 3).unwrap();
        for design in [PromptDesignId::Concise, PromptDesignId::Verbose] {
            let prompt = render(design, example, catalog, &matches, &DemoSet::empty()).unwrap();
            records.push(ScriptRecord {
                prompt_hash: prompt.content_hash,
                completions: script(example, design),
            });
        }
    }
    fs::write(scripts.join("all.json"), serde_json::to_string_pretty(&records).unwrap()).unwrap();
    Workspace { dir, fixture, config }
}

/// Gold wins every vote: concise gives it twice next to a wrong answer and an
/// error, verbose wraps it in a fenced block next to a syntax error.
pub fn gold_majority(example: &ExampleItem, design: PromptDesignId) -> Vec<String> {
    let gold = example.gold_sql.clone().unwrap();
    match design {
        PromptDesignId::Concise => vec![gold.clone(), "SELECT 1".into(), gold, "SELECT nope FROM nowhere".into()],
        _ => vec![format!("```sql\n{gold};\n```"), "SELEC broken".into()],
    }
}
