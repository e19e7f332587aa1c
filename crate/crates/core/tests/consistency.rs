mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use sqlprompt_core::consistency::{
    audit_records, filter_errors, select_by_consistency, select_without_filtering, Candidate, CandidatePool, Pipeline,
    FAILED_SAMPLE_MARKER,
};
use sqlprompt_core::content_linker::link_values;
use sqlprompt_core::llm_gateway::{Gateway, ModelArm, ScriptRecord, ScriptedBackend};
use sqlprompt_core::promptgen::{render, DemoSet, PromptDesignId};
use sqlprompt_core::sql_exec::{canonical_key, ErrorKind, ExecutionOutcome, Scalar};

/// `Some(k)` is a success whose single cell is `k`; `None` is an error.
fn pool(outcomes: &[Option<i64>]) -> CandidatePool {
    let arm = ModelArm::new("m", PromptDesignId::Concise);
    CandidatePool {
        question_id: "q".into(),
        candidates: outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| Candidate {
                sql: format!("SELECT {i}"),
                arm: arm.clone(),
                sample_index: i,
                outcome: match o {
                    Some(k) => ExecutionOutcome::Success {
                        rows: vec![vec![Scalar::Integer(*k)]],
                        elapsed: Duration::ZERO,
                    },
                    None => ExecutionOutcome::error(ErrorKind::Runtime, "boom"),
                },
                pool_position: i,
            })
            .collect(),
        arms: vec![arm],
    }
}

/// Quadratic reference: count agreement of every success with every other.
fn oracle(outcomes: &[Option<i64>]) -> Option<(usize, bool)> {
    let ok: Vec<(usize, i64)> = outcomes.iter().enumerate().filter_map(|(i, o)| o.map(|k| (i, k))).collect();
    let counts: Vec<usize> = ok.iter().map(|(_, k)| ok.iter().filter(|(_, k2)| k2 == k).count()).collect();
    let best = *counts.iter().max()?;
    let winners: Vec<(usize, i64)> = ok
        .iter()
        .zip(&counts)
        .filter(|(_, c)| **c == best)
        .map(|(x, _)| *x)
        .collect();
    let keys: BTreeSet<i64> = winners.iter().map(|(_, k)| *k).collect();
    Some((winners[0].0, keys.len() > 1))
}

fn pools() -> impl Strategy<Value = Vec<Option<i64>>> {
    prop::collection::vec(prop::option::weighted(0.8, 0i64..5), 0..=40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn vote_matches_quadratic_oracle(outcomes in pools()) {
        let result = select_by_consistency(&filter_errors(&pool(&outcomes)));
        match oracle(&outcomes) {
            None => {
                prop_assert_eq!(result.selected_sql, None);
                prop_assert!(!result.tie_broken);
            }
            Some((pos, tie)) => {
                prop_assert_eq!(result.selected_position, Some(pos));
                prop_assert_eq!(result.selected_sql, Some(format!("SELECT {pos}")));
                prop_assert_eq!(result.tie_broken, tie);
            }
        }
        let successes = outcomes.iter().filter(|o| o.is_some()).count();
        prop_assert_eq!(result.tallies.values().sum::<usize>(), successes);
    }

    #[test]
    fn errors_never_change_the_filtered_winner(outcomes in pools(), inserts in prop::collection::vec(0usize..41, 0..10)) {
        let base = select_by_consistency(&filter_errors(&pool(&outcomes)));
        let winner_value = base.selected_position.map(|p| outcomes[p]);
        let mut noisy = outcomes.clone();
        for at in inserts {
            noisy.insert(at.min(noisy.len()), None);
        }
        let with_errors = select_by_consistency(&filter_errors(&pool(&noisy)));
        prop_assert_eq!(&base.winning_key, &with_errors.winning_key);
        prop_assert_eq!(winner_value, with_errors.selected_position.map(|p| noisy[p]));
        // voting straight on the noisy pool skips the errors too, and counts them
        let direct = select_by_consistency(&pool(&noisy));
        prop_assert_eq!(direct.winning_key, with_errors.winning_key);
        prop_assert_eq!(direct.filtered_error_count, noisy.len() - outcomes.iter().filter(|o| o.is_some()).count());
    }

    #[test]
    fn strict_majorities_survive_reordering(outcomes in pools(), rot in 0usize..40) {
        let base = select_by_consistency(&filter_errors(&pool(&outcomes)));
        prop_assume!(!base.tie_broken);
        let mut moved = outcomes.clone();
        if !moved.is_empty() {
            let k = rot % moved.len();
            moved.rotate_left(k);
            moved.reverse();
        }
        let again = select_by_consistency(&filter_errors(&pool(&moved)));
        prop_assert_eq!(base.winning_key, again.winning_key);
        prop_assert!(!again.tie_broken);
    }
}

#[test]
fn unfiltered_ablation_lets_errors_win() {
    let outcomes = [None, None, None, Some(1), Some(1)];
    let filtered = select_by_consistency(&filter_errors(&pool(&outcomes)));
    assert_eq!(filtered.selected_position, Some(3));
    let raw = select_without_filtering(&pool(&outcomes));
    assert_eq!(raw.selected_position, Some(0));
    assert_eq!(raw.tallies.values().sum::<usize>(), 5);
}

#[test]
fn audit_marks_exactly_the_selected_candidate() {
    let p = pool(&[Some(1), None, Some(2), Some(2)]);
    let r = select_by_consistency(&filter_errors(&p));
    let audit = audit_records(&p, &r);
    assert_eq!(audit.len(), 4);
    assert_eq!(audit.iter().filter(|a| a.selected).count(), 1);
    assert!(audit[2].selected);
    assert_eq!(audit[1].outcome, "runtime");
    assert_eq!(audit[1].outcome_key, None);
    assert_eq!(audit[0].arm, "m/concise/0-shot");
    assert_eq!(audit[2].outcome_key, audit[3].outcome_key);
}

#[test]
fn pipeline_pools_arms_in_configured_order() {
    let env = common::env();
    let q = &env.dev[3];
    let catalog = env.catalogs.require(&q.db_id).unwrap();
    let matches = link_values(&q.question, catalog, 3).unwrap();
    let hash = |d| render(d, q, catalog, &matches, &DemoSet::empty()).unwrap().content_hash;
    let good = "SELECT Name FROM singer ORDER BY Net_Worth_Millions DESC LIMIT 1";
    let scripts = ScriptedBackend::new([
        ScriptRecord {
            prompt_hash: hash(PromptDesignId::Concise),
            completions: vec![good.into(), "SELECT nope FROM singer".into()],
        },
        ScriptRecord {
            prompt_hash: hash(PromptDesignId::Verbose),
            completions: vec!["```sql\nSELECT Name FROM singer ORDER BY Net_Worth_Millions DESC LIMIT 1;\n```".into()],
        },
    ]);
    let mut gateway = Gateway::new();
    gateway.register_backend("m", Arc::new(scripts)).unwrap();
    let arms = [
        ModelArm::new("m", PromptDesignId::Concise).with_samples(4),
        ModelArm::new("m", PromptDesignId::Verbose).with_samples(2),
        ModelArm::new("m", PromptDesignId::BaselineDefault).with_samples(1),
    ];
    let pipeline = Pipeline::new(&gateway);
    let (result, pool) = pipeline.run_question(q, catalog, &arms, 0).unwrap();

    assert_eq!(pool.len(), 7);
    let positions: Vec<usize> = pool.candidates.iter().map(|c| c.pool_position).collect();
    assert_eq!(positions, (0..7).collect::<Vec<_>>());
    let designs: Vec<PromptDesignId> = pool.candidates.iter().map(|c| c.arm.design).collect();
    assert_eq!(designs[..4], [PromptDesignId::Concise; 4]);
    assert_eq!(designs[4..6], [PromptDesignId::Verbose; 2]);
    // the baseline arm has no script: its only sample failed
    match &pool.candidates[6].outcome {
        ExecutionOutcome::Error { message, .. } => assert!(message.starts_with(FAILED_SAMPLE_MARKER)),
        other => panic!("{other:?}"),
    }
    assert_eq!(result.selected_sql.as_deref(), Some(good));
    assert_eq!(result.selected_position, Some(0));
    assert_eq!(result.total_candidates, 7);
    assert_eq!(result.filtered_error_count, 3);
    assert_eq!(result.tallies.values().copied().collect::<Vec<_>>(), [4]);
    let winner = canonical_key(&pool.candidates[4].outcome, false);
    assert_eq!(result.winning_key, winner);
}

#[test]
fn few_shot_arm_without_enough_demos_is_an_error() {
    let env = common::env();
    let gateway = Gateway::new();
    let arm = ModelArm::new("m", PromptDesignId::Concise).with_shots(2);
    let q = &env.dev[2];
    let err = Pipeline::new(&gateway)
        .build_pool(q, env.catalogs.require(&q.db_id).unwrap(), &[arm], 0)
        .unwrap_err();
    assert!(err.to_string().contains("needs 2 demonstrations"), "{err}");
}
