use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use sqlprompt_core::catalog::{
    load_catalogs, load_examples, validate_catalog, CatalogSet, ExampleItem, ValidationReport,
};
use sqlprompt_core::consistency::{audit_records, AuditRecord, Pipeline, FALLBACK_SQL};
use sqlprompt_core::content_linker::link_values;
use sqlprompt_core::evalkit::{evaluate_file, CatalogSource, EvalOptions, EvalReport, Prediction, SuiteSpec};
use sqlprompt_core::llm_gateway::{cache_clear, cache_stats, CacheStats};
use sqlprompt_core::promptgen::{render, Demo, DemoSet, PromptDesignId};

use crate::config::RunConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictSummary {
    pub questions: usize,
    pub tie_broken: usize,
    pub all_filtered: usize,
    /// Questions whose pipeline failed outright and fell back.
    pub failed: usize,
}

impl std::fmt::Display for PredictSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "questions: {}", self.questions)?;
        writeln!(f, "tie-broken: {}", self.tie_broken)?;
        writeln!(f, "all-filtered: {}", self.all_filtered)?;
        write!(f, "failed: {}", self.failed)
    }
}

struct QuestionResult {
    sql: String,
    tie_broken: bool,
    all_filtered: bool,
    failed: bool,
    audit: Vec<AuditRecord>,
}

/// Demonstrations from `demo_source`, each with its own catalog and linked values.
pub fn load_demos(config: &RunConfig, catalogs: &CatalogSet) -> Result<Vec<Demo>> {
    let Some(path) = &config.demo_source else {
        return Ok(Vec::new());
    };
    load_examples(path)?
        .into_iter()
        .map(|example| {
            if example.gold_sql.as_deref().is_none_or(|g| g.trim().is_empty()) {
                bail!("demonstration `{}` has no gold SQL", example.example_id);
            }
            let catalog = catalogs.require(&example.db_id)?.clone();
            let matches = link_values(&example.question, &catalog, config.max_values_per_column)?;
            Ok(Demo {
                example,
                catalog,
                matches,
            })
        })
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    file.write_all(&buf)?;
    Ok(())
}

/// Runs every dataset question and writes one prediction line per question,
/// in dataset order.
pub fn predict(config: &RunConfig, audit: bool) -> Result<PredictSummary> {
    let catalogs = CatalogSet::new(load_catalogs(&config.manifest, &config.db_dir)?);
    let examples = load_examples(&config.dataset)?;
    catalogs.check_examples(&examples)?;
    let demos = load_demos(config, &catalogs)?;
    let gateway = config.gateway()?;
    let pipeline = Pipeline {
        gateway: &gateway,
        demo_pool: &demos,
        max_values_per_column: config.max_values_per_column,
        timeout: config.timeout(),
    };
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(config.fan_out)
        .build()
        .context("building worker pool")?;

    let done = AtomicUsize::new(0);
    let total = examples.len();
    let run = |example: &ExampleItem| -> QuestionResult {
        let catalog = catalogs.require(&example.db_id).expect("checked above");
        let result = match pipeline.run_question(example, catalog, &config.arms, config.seed) {
            Ok((selection, pool)) => QuestionResult {
                audit: audit_records(&pool, &selection),
                all_filtered: selection.selected_sql.is_none(),
                tie_broken: selection.tie_broken,
                sql: selection.selected_sql.unwrap_or_else(|| FALLBACK_SQL.to_string()),
                failed: false,
            },
            Err(e) => {
                log::warn!("{}: {e}; writing fallback prediction", example.example_id);
                QuestionResult {
                    sql: FALLBACK_SQL.to_string(),
                    tie_broken: false,
                    all_filtered: false,
                    failed: true,
                    audit: Vec::new(),
                }
            }
        };
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        log::info!("[{n}/{total}] {}", example.example_id);
        result
    };
    let results: Vec<QuestionResult> = threads.install(|| examples.par_iter().map(run).collect());

    write_jsonl(
        &config.output,
        examples.iter().zip(&results).map(|(e, r)| Prediction {
            example_id: e.example_id.clone(),
            sql: r.sql.clone(),
        }),
    )?;
    if audit || config.audit {
        write_jsonl(&config.audit_path(), results.iter().flat_map(|r| r.audit.iter()))?;
    }
    Ok(PredictSummary {
        questions: results.len(),
        tie_broken: results.iter().filter(|r| r.tie_broken).count(),
        all_filtered: results.iter().filter(|r| r.all_filtered).count(),
        failed: results.iter().filter(|r| r.failed).count(),
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub pred: PathBuf,
    pub dataset: PathBuf,
    pub db_dir: PathBuf,
    pub tables: Option<PathBuf>,
    pub suite: Option<SuiteSpec>,
    pub report: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl EvaluateArgs {
    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| with_suffix(&self.pred, ".eval.json"))
    }
}

/// Scores a prediction file and writes the per-question report as JSON.
pub fn evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let options = EvalOptions {
        catalogs: match &args.tables {
            Some(p) => CatalogSource::Manifest(p),
            None => CatalogSource::Introspect,
        },
        suite: args.suite,
        work_dir: args
            .work_dir
            .clone()
            .unwrap_or_else(|| with_suffix(&args.pred, ".suites")),
    };
    let report = evaluate_file(&args.pred, &args.dataset, &args.db_dir, &options)?;
    let path = args.report_path();
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

/// The exact prompt text the pipeline would send for one example.
pub fn show_prompt(config: &RunConfig, example_id: &str, design: &str, shots: usize) -> Result<String> {
    let design: PromptDesignId = design.parse()?;
    let catalogs = CatalogSet::new(load_catalogs(&config.manifest, &config.db_dir)?);
    let example = load_examples(&config.dataset)?
        .into_iter()
        .find(|e| e.example_id == example_id)
        .ok_or_else(|| anyhow!("unknown example `{example_id}`"))?;
    let catalog = catalogs.require(&example.db_id)?;
    let matches = link_values(&example.question, catalog, config.max_values_per_column)?;
    let mut pool = load_demos(config, &catalogs)?;
    if shots > pool.len() {
        bail!("{shots} demonstrations requested, {} available", pool.len());
    }
    pool.truncate(shots);
    let prompt = render(design, &example, catalog, &matches, &DemoSet { demos: pool })?;
    Ok(prompt.text)
}

pub fn cache_stats_text(dir: &Path) -> Result<String> {
    let CacheStats { entries, bytes } =
        cache_stats(dir).with_context(|| format!("reading cache {}", dir.display()))?;
    Ok(format!("entries: {entries}\nbytes: {bytes}"))
}

pub fn cache_clear_dir(dir: &Path) -> Result<()> {
    cache_clear(dir).with_context(|| format!("clearing cache {}", dir.display()))
}

/// Checks every manifest entry against its database file.
pub fn validate(manifest: &Path, db_dir: &Path) -> Result<Vec<(String, ValidationReport)>> {
    Ok(load_catalogs(manifest, db_dir)?
        .iter()
        .map(|c| (c.db_id.clone(), validate_catalog(c)))
        .collect())
}
