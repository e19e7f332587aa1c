//! Execution-based consistency selection over a mixed candidate pool.
//!
//! For each question every configured arm renders its prompt, samples its
//! completions and executes them. The concatenated pool is stripped of
//! execution errors and the SQL whose (order-insensitive) result agrees with
//! the most other candidates is selected. Ties go to the group holding the
//! earliest pool position, so arm order in the configuration matters.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{DatabaseCatalog, ExampleItem};
use crate::content_linker::{link_values, LinkError, DEFAULT_MAX_PER_COLUMN};
use crate::llm_gateway::{Gateway, GatewayError, ModelArm};
use crate::promptgen::{render, Demo, DemoSet, PromptError};
use crate::sql_exec::{canonical_key, execute, extract_sql, ErrorKind, ExecutionOutcome, OutcomeKey, DEFAULT_TIMEOUT};

/// Marker prefix on the error message of candidates whose sample never arrived.
pub const FAILED_SAMPLE_MARKER: &str = "failed sample";

/// Prediction emitted when no candidate survives filtering.
pub const FALLBACK_SQL: &str = "SELECT NULL";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("arm {arm} needs {needed} demonstrations starting at {offset}, only {available} available")]
    NotEnoughDemos {
        arm: String,
        needed: usize,
        offset: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sql: String,
    pub arm: ModelArm,
    pub sample_index: usize,
    pub outcome: ExecutionOutcome,
    pub pool_position: usize,
}

impl Candidate {
    pub fn vote_key(&self) -> Option<OutcomeKey> {
        canonical_key(&self.outcome, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub question_id: String,
    pub candidates: Vec<Candidate>,
    pub arms: Vec<ModelArm>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionResult {
    pub selected_sql: Option<String>,
    pub selected_position: Option<usize>,
    pub winning_key: Option<OutcomeKey>,
    pub tallies: BTreeMap<OutcomeKey, usize>,
    pub filtered_error_count: usize,
    pub total_candidates: usize,
    pub tie_broken: bool,
}

/// Keeps success outcomes only; order and positions are preserved.
pub fn filter_errors(pool: &CandidatePool) -> CandidatePool {
    CandidatePool {
        question_id: pool.question_id.clone(),
        candidates: pool
            .candidates
            .iter()
            .filter(|c| c.outcome.is_success())
            .cloned()
            .collect(),
        arms: pool.arms.clone(),
    }
}

/// Majority vote over execution outcomes of the error-free candidates.
pub fn select_by_consistency(pool: &CandidatePool) -> SelectionResult {
    let keyed: Vec<(OutcomeKey, &Candidate)> = pool
        .candidates
        .iter()
        .filter_map(|c| c.vote_key().map(|k| (k, c)))
        .collect();
    let mut result = vote(keyed);
    result.total_candidates = pool.len();
    result.filtered_error_count = pool.len() - result.tallies.values().sum::<usize>();
    result
}

/// Synthetic key shared by every error outcome when filtering is disabled.
pub const ERROR_VOTE_KEY: &str = "error";

/// Ablation: vote without dropping errors first; all errors form one group.
pub fn select_without_filtering(pool: &CandidatePool) -> SelectionResult {
    let keyed: Vec<(OutcomeKey, &Candidate)> = pool
        .candidates
        .iter()
        .map(|c| (c.vote_key().unwrap_or_else(|| OutcomeKey(ERROR_VOTE_KEY.into())), c))
        .collect();
    let mut result = vote(keyed);
    result.total_candidates = pool.len();
    result
}

struct Group<'a> {
    count: usize,
    first: &'a Candidate,
}

fn vote(keyed: Vec<(OutcomeKey, &Candidate)>) -> SelectionResult {
    let mut groups: BTreeMap<OutcomeKey, Group<'_>> = BTreeMap::new();
    for (key, cand) in keyed {
        groups
            .entry(key)
            .and_modify(|g| {
                g.count += 1;
                if cand.pool_position < g.first.pool_position {
                    g.first = cand;
                }
            })
            .or_insert(Group { count: 1, first: cand });
    }
    let tallies: BTreeMap<OutcomeKey, usize> = groups.iter().map(|(k, g)| (k.clone(), g.count)).collect();
    let Some(best) = groups.values().map(|g| g.count).max() else {
        return SelectionResult::default();
    };
    let leaders: Vec<(&OutcomeKey, &Group<'_>)> = groups.iter().filter(|(_, g)| g.count == best).collect();
    let (key, group) = leaders
        .iter()
        .min_by_key(|(_, g)| g.first.pool_position)
        .expect("at least one group has the maximum count");
    SelectionResult {
        selected_sql: Some(group.first.sql.clone()),
        selected_position: Some(group.first.pool_position),
        winning_key: Some((*key).clone()),
        tie_broken: leaders.len() > 1,
        tallies,
        filtered_error_count: 0,
        total_candidates: 0,
    }
}

/// Everything besides the arms that a question run needs.
pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    /// Demonstrations that few-shot arms draw from, in order.
    pub demo_pool: &'a [Demo],
    pub max_values_per_column: usize,
    pub timeout: Duration,
}

impl<'a> Pipeline<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self {
            gateway,
            demo_pool: &[],
            max_values_per_column: DEFAULT_MAX_PER_COLUMN,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_demos(mut self, demos: &'a [Demo]) -> Self {
        self.demo_pool = demos;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn demos_for(&self, arm: &ModelArm) -> Result<DemoSet, PipelineError> {
        let end = arm.demo_offset + arm.shots;
        if end > self.demo_pool.len() {
            return Err(PipelineError::NotEnoughDemos {
                arm: arm.descriptor(),
                needed: arm.shots,
                offset: arm.demo_offset,
                available: self.demo_pool.len(),
            });
        }
        Ok(DemoSet {
            demos: self.demo_pool[arm.demo_offset..end].to_vec(),
        })
    }

    /// Renders, samples and executes every arm in configuration order. No
    /// filtering happens here.
    pub fn build_pool(
        &self,
        question: &ExampleItem,
        catalog: &DatabaseCatalog,
        arms: &[ModelArm],
        seed: u64,
    ) -> Result<CandidatePool, PipelineError> {
        let mut pool = CandidatePool {
            question_id: question.example_id.clone(),
            candidates: Vec::new(),
            arms: arms.to_vec(),
        };
        if arms.is_empty() {
            return Ok(pool);
        }
        let matches = link_values(&question.question, catalog, self.max_values_per_column)?;
        for arm in arms {
            let demos = self.demos_for(arm)?;
            let prompt = render(arm.design, question, catalog, &matches, &demos)?;
            for completion in self.gateway.sample(arm, &prompt, seed)? {
                let (sql, outcome) = match &completion.text {
                    Ok(text) => {
                        let sql = extract_sql(text, arm.design);
                        let outcome = execute(&sql, &catalog.db_path, self.timeout);
                        (sql, outcome)
                    }
                    Err(e) => (
                        String::new(),
                        ExecutionOutcome::error(ErrorKind::Runtime, format!("{FAILED_SAMPLE_MARKER}: {e}")),
                    ),
                };
                let pool_position = pool.candidates.len();
                pool.candidates.push(Candidate {
                    sql,
                    arm: arm.clone(),
                    sample_index: completion.sample_index,
                    outcome,
                    pool_position,
                });
            }
        }
        Ok(pool)
    }

    /// Build, filter, vote. The unfiltered pool is returned for auditing.
    pub fn run_question(
        &self,
        question: &ExampleItem,
        catalog: &DatabaseCatalog,
        arms: &[ModelArm],
        seed: u64,
    ) -> Result<(SelectionResult, CandidatePool), PipelineError> {
        let pool = self.build_pool(question, catalog, arms, seed)?;
        let result = select_by_consistency(&filter_errors(&pool));
        let result = SelectionResult {
            filtered_error_count: pool.len() - result.tallies.values().sum::<usize>(),
            total_candidates: pool.len(),
            ..result
        };
        Ok((result, pool))
    }
}

/// One line of the per-candidate audit log.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AuditRecord {
    pub question_id: String,
    pub pool_position: usize,
    pub arm: String,
    pub sample_index: usize,
    pub sql: String,
    pub outcome: &'static str,
    pub outcome_key: Option<String>,
    pub selected: bool,
}

pub fn audit_records(pool: &CandidatePool, result: &SelectionResult) -> Vec<AuditRecord> {
    pool.candidates
        .iter()
        .map(|c| AuditRecord {
            question_id: pool.question_id.clone(),
            pool_position: c.pool_position,
            arm: c.arm.descriptor(),
            sample_index: c.sample_index,
            sql: c.sql.clone(),
            outcome: c.outcome.kind_str(),
            outcome_key: c.vote_key().map(|k| k.0),
            selected: result.selected_position == Some(c.pool_position),
        })
        .collect()
}
