mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rusqlite::Connection;
use sqlprompt_core::catalog::{quote_ident, ColumnType};
use sqlprompt_core::content_linker::{link_values, score_match, LinkError, ValueMatch, MATCH_THRESHOLD};

/// Cubic reference: try every substring of the value against the question.
fn naive_score(question: &str, value: &str) -> f64 {
    let q: String = question.to_lowercase();
    let v: Vec<char> = value.to_lowercase().chars().collect();
    if v.is_empty() {
        return 0.0;
    }
    let mut best = 0;
    for i in 0..v.len() {
        for j in i + 1..=v.len() {
            let sub: String = v[i..j].iter().collect();
            if j - i > best && q.contains(&sub) {
                best = j - i;
            }
        }
    }
    best as f64 / v.len() as f64
}

fn key(m: &ValueMatch) -> (String, String) {
    (m.table_name.clone(), m.column_name.clone())
}

#[test]
fn matches_brute_force_over_fixture_values() {
    let env = common::env();
    for example in &env.dev {
        let catalog = env.catalogs.require(&example.db_id).unwrap();
        let conn = Connection::open(&catalog.db_path).unwrap();
        let mut expected: Vec<ValueMatch> = Vec::new();
        for t in &catalog.tables {
            for c in t.columns.iter().filter(|c| c.data_type == ColumnType::Text) {
                let sql = format!("SELECT {} FROM {}", quote_ident(&c.name), quote_ident(&t.name));
                let mut stmt = conn.prepare(&sql).unwrap();
                let mut values: Vec<String> = stmt
                    .query_map([], |r| r.get::<_, Option<String>>(0))
                    .unwrap()
                    .filter_map(|v| v.unwrap())
                    .filter(|v| !v.trim().is_empty())
                    .collect();
                values.sort();
                values.dedup();
                let mut scored: Vec<(f64, String)> = values
                    .into_iter()
                    .map(|v| (naive_score(&example.question, &v), v))
                    .filter(|(s, _)| *s >= MATCH_THRESHOLD)
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                expected.extend(scored.into_iter().take(3).map(|(score, value)| ValueMatch {
                    table_name: t.name.clone(),
                    column_name: c.name.clone(),
                    value,
                    score,
                }));
            }
        }
        let got = link_values(&example.question, catalog, 3).unwrap();
        assert_eq!(got, expected, "question {}", example.example_id);
    }
}

#[test]
fn car_example_links_the_expected_values() {
    let env = common::env();
    let catalog = env.catalogs.require("car_1").unwrap();
    let got = link_values(&env.dev[0].question, catalog, 3).unwrap();
    let flat: Vec<(&str, &str, &str)> = got
        .iter()
        .map(|m| (m.table_name.as_str(), m.column_name.as_str(), m.value.as_str()))
        .collect();
    assert_eq!(
        flat,
        vec![
            ("car_makers", "Maker", "amc"),
            ("model_list", "Model", "amc"),
            ("car_names", "Model", "amc"),
            ("car_names", "Make", "amc hornet"),
            ("car_names", "Make", "amc hornet sportabout (sw)"),
        ]
    );
}

#[test]
fn smaller_caps_give_per_column_prefixes() {
    let env = common::env();
    for example in &env.dev {
        let catalog = env.catalogs.require(&example.db_id).unwrap();
        let group = |k| {
            let mut by: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
            for m in link_values(&example.question, catalog, k).unwrap() {
                by.entry(key(&m)).or_default().push(m.value);
            }
            by
        };
        let wide = group(5);
        for k in 1..5 {
            let narrow = group(k);
            for (col, vals) in &narrow {
                assert!(vals.len() <= k);
                assert_eq!(vals[..], wide[col][..vals.len()]);
            }
        }
    }
}

#[test]
fn zero_cap_and_missing_file_are_errors() {
    let env = common::env();
    let mut catalog = env.catalogs.require("singer").unwrap().clone();
    assert!(matches!(link_values("q", &catalog, 0), Err(LinkError::ZeroCap)));
    catalog.db_path = env.fixture.root.join("nope.sqlite");
    assert!(matches!(link_values("q", &catalog, 3), Err(LinkError::DbUnreadable { .. })));
}

proptest! {
    #[test]
    fn score_agrees_with_reference(q in "[a-cA-C ]{0,16}", v in "[a-cA-C ]{0,8}") {
        let s = score_match(&q, &v);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - naive_score(&q, &v)).abs() < 1e-12);
    }

    #[test]
    fn embedded_values_score_one(pre in "[a-z ]{0,10}", v in "[a-z]{1,10}", post in "[a-z ]{0,10}") {
        let q = format!("{pre}{}{post}", v.to_uppercase());
        prop_assert_eq!(score_match(&q, &v), 1.0);
    }
}
