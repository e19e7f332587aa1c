mod common;

use std::fs;

use rusqlite::Connection;
use sqlprompt_core::catalog::{quote_ident, DatabaseCatalog};
use sqlprompt_core::evalkit::{
    evaluate_file, exec_match, generate_suite_db, match_on, ts_match, CatalogSource, EvalError, EvalOptions,
    MatchOutcome, Prediction, SuiteCache, SuiteSpec,
};
use sqlprompt_core::sql_exec::DEFAULT_TIMEOUT;
use tempfile::TempDir;

/// (gold, generated, published EX bit, bit on the singer fixture).
const SINGER_PAIRS: [(&str, &str, bool, bool); 10] = [
    (
        "SELECT Name FROM singer WHERE Birth_Year  =  1948 OR Birth_Year  =  1949",
        "SELECT name FROM singer WHERE birth_year = 1948 OR birth_year = 1949",
        true,
        true,
    ),
    (
        "SELECT Name FROM singer ORDER BY Net_Worth_Millions DESC LIMIT 1",
        "SELECT T1.name FROM singer AS T1 ORDER BY T1.net_worth_millions Desc LIMIT 1",
        true,
        true,
    ),
    (
        "SELECT Name FROM singer ORDER BY Net_Worth_Millions DESC LIMIT 1",
        "SELECT T1.name FROM singer AS T1 JOIN song AS T2 ON T1.singer_id  =  T2.singer_id ORDER BY T1.net_worth_millions Desc LIMIT 1",
        true,
        true,
    ),
    (
        "SELECT Citizenship FROM singer GROUP BY Citizenship ORDER BY COUNT(*) DESC LIMIT 1",
        "SELECT citizenship FROM singer GROUP BY citizenship ORDER BY count(*) DESC LIMIT 1",
        true,
        true,
    ),
    (
        "SELECT Citizenship ,  max(Net_Worth_Millions) FROM singer GROUP BY Citizenship",
        "SELECT T1.citizenship ,  max(T1.net_worth_millions) FROM singer AS T1 GROUP BY T1.citizenship",
        true,
        true,
    ),
    (
        "SELECT T2.Title ,  T1.Name FROM singer AS T1 JOIN song AS T2 ON T1.Singer_ID  =  T2.Singer_ID",
        "SELECT T1.title ,  T2.name FROM song AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id",
        true,
        true,
    ),
    // Result rows are compared as a multiset: the singer with two qualifying
    // songs appears twice without DISTINCT, so this pair does not match here.
    (
        "SELECT DISTINCT T1.Name FROM singer AS T1 JOIN song AS T2 ON T1.Singer_ID  =  T2.Singer_ID WHERE T2.Sales  >  300000",
        "SELECT T1.name FROM singer AS T1 JOIN song AS T2 ON T1.singer_id = T2.singer_id WHERE T2.sales  >  300000",
        true,
        false,
    ),
    (
        "SELECT Name FROM singer WHERE Singer_ID NOT IN (SELECT Singer_ID FROM song)",
        "SELECT name FROM singer WHERE singer_id NOT IN ( SELECT singer_id FROM song )",
        true,
        true,
    ),
    (
        "SELECT Name FROM singer WHERE Singer_ID NOT IN (SELECT Singer_ID FROM song)",
        "SELECT T1.name FROM singer AS T1 JOIN song AS T2 ON T1.singer_id = T2.singer_id WHERE T2.singer_id IS NULL",
        false,
        false,
    ),
    (
        "SELECT Citizenship FROM singer WHERE Birth_Year  <  1945 INTERSECT SELECT Citizenship FROM singer WHERE Birth_Year  >  1955",
        "SELECT T1.citizenship FROM singer AS T1 JOIN song AS T2 ON T1.singer_id  =  T2.singer_id WHERE T1.birth_year  <  1945 INTERSECT SELECT T1.citizenship FROM singer AS T1 JOIN song AS T2 ON T1.singer_id  =  T2.singer_id WHERE T1.birth_year  >  1955",
        false,
        false,
    ),
];

#[test]
fn published_singer_pairs() {
    let env = common::env();
    let singer = env.catalogs.require("singer").unwrap();
    let mut agree = 0;
    for (gold, pred, published, pinned) in SINGER_PAIRS {
        let got = exec_match(pred, gold, singer).unwrap();
        assert_eq!(got, pinned, "{pred}");
        agree += (got == published) as usize;
    }
    assert_eq!(agree, 9);
}

#[test]
fn gold_failure_is_an_error_not_a_mismatch() {
    let env = common::env();
    let singer = env.catalogs.require("singer").unwrap();
    assert!(matches!(
        exec_match("SELECT 1", "SELECT nope FROM singer", singer),
        Err(EvalError::GoldExecutionFailed { .. })
    ));
    assert!(!exec_match("SELECT nope FROM singer", "SELECT 1", singer).unwrap());
}

const TS_GOLD: &str = "SELECT Name FROM singer WHERE Birth_Year  =  1948 OR Birth_Year  =  1949";
const TS_PRED: &str = "SELECT Name FROM singer WHERE Singer_ID IN (2, 3)";

#[test]
fn suites_catch_data_coincidences() {
    let env = common::env();
    let singer = env.catalogs.require("singer").unwrap();
    let work = TempDir::new().unwrap();
    let spec = SuiteSpec {
        seed: 11,
        ..SuiteSpec::default()
    };
    let suites = SuiteCache::new(work.path());
    assert!(exec_match(TS_PRED, TS_GOLD, singer).unwrap());
    assert!(!ts_match(TS_PRED, TS_GOLD, singer, &spec, &suites).unwrap());
    assert!(ts_match(SINGER_PAIRS[0].1, TS_GOLD, singer, &spec, &suites).unwrap());
}

fn violations(catalog: &DatabaseCatalog, path: &std::path::Path, skip: &[sqlprompt_core::catalog::ForeignKey]) -> Vec<String> {
    let conn = Connection::open(path).unwrap();
    let count = |sql: &str| conn.query_row(sql, [], |r| r.get::<_, i64>(0)).unwrap();
    let mut out = Vec::new();
    for pk in &catalog.primary_keys {
        let (t, c) = catalog.names(*pk);
        let (t, c) = (quote_ident(t), quote_ident(c));
        let dupes = count(&format!("SELECT count({c}) - count(DISTINCT {c}) FROM {t}"));
        let nulls = count(&format!("SELECT count(*) FROM {t} WHERE {c} IS NULL"));
        if dupes != 0 || nulls != 0 {
            out.push(format!("pk {t}.{c}: {dupes} duplicates, {nulls} nulls"));
        }
    }
    for fk in catalog.foreign_keys.iter().filter(|fk| !skip.contains(fk)) {
        let (ct, cc) = catalog.names(fk.child);
        let (pt, pc) = catalog.names(fk.parent);
        let orphans = count(&format!(
            "SELECT count(*) FROM {ct} WHERE {cc} IS NOT NULL AND {cc} NOT IN (SELECT {pc} FROM {pt} WHERE {pc} IS NOT NULL)",
            ct = quote_ident(ct),
            cc = quote_ident(cc),
            pt = quote_ident(pt),
            pc = quote_ident(pc)
        ));
        if orphans != 0 {
            out.push(format!("fk {ct}.{cc} -> {pt}.{pc}: {orphans} orphans"));
        }
    }
    out
}

#[test]
fn generated_suites_keep_keys_intact_and_are_reproducible() {
    let env = common::env();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let spec = SuiteSpec {
        suite_count: 3,
        rows_per_table: 30,
        seed: 5,
    };
    for catalog in env.catalogs.iter() {
        for i in 1..=spec.suite_count {
            let sa = generate_suite_db(catalog, &spec, i, a.path()).unwrap();
            let sb = generate_suite_db(catalog, &spec, i, b.path()).unwrap();
            assert!(sa.broken_edges.is_empty(), "{}", catalog.db_id);
            assert_eq!(fs::read(&sa.path).unwrap(), fs::read(&sb.path).unwrap(), "{} suite {i}", catalog.db_id);
            let v = violations(catalog, &sa.path, &sa.broken_edges);
            assert!(v.is_empty(), "{} suite {i}: {v:?}", catalog.db_id);

            // every table got rows and the schema text is unchanged
            let conn = Connection::open(&sa.path).unwrap();
            for t in &catalog.tables {
                let n: i64 = conn
                    .query_row(&format!("SELECT count(*) FROM {}", quote_ident(&t.name)), [], |r| r.get(0))
                    .unwrap();
                assert!(n > 0, "{}.{} is empty", catalog.db_id, t.name);
            }
            let schema = |p: &std::path::Path| -> Vec<String> {
                Connection::open(p)
                    .unwrap()
                    .prepare("SELECT sql FROM sqlite_master WHERE sql IS NOT NULL ORDER BY name")
                    .unwrap()
                    .query_map([], |r| r.get(0))
                    .unwrap()
                    .map(Result::unwrap)
                    .collect()
            };
            assert_eq!(schema(&sa.path), schema(&catalog.db_path));
        }
        // regenerating over an existing file gives the same bytes
        let again = generate_suite_db(catalog, &spec, 1, a.path()).unwrap();
        let other = b.path().join(&catalog.db_id).join("suite_5_1.sqlite");
        assert_eq!(fs::read(&again.path).unwrap(), fs::read(other).unwrap());
    }
}

#[test]
fn different_seeds_give_different_suites() {
    let env = common::env();
    let dir = TempDir::new().unwrap();
    let singer = env.catalogs.require("singer").unwrap();
    let s1 = generate_suite_db(singer, &SuiteSpec { seed: 1, ..Default::default() }, 1, dir.path()).unwrap();
    let s2 = generate_suite_db(singer, &SuiteSpec { seed: 2, ..Default::default() }, 1, dir.path()).unwrap();
    assert_ne!(fs::read(s1.path).unwrap(), fs::read(s2.path).unwrap());
}

#[test]
fn self_referencing_keys_are_reported_as_broken() {
    let dir = TempDir::new().unwrap();
    let db = dir.path().join("db").join("loop").join("loop.sqlite");
    fs::create_dir_all(db.parent().unwrap()).unwrap();
    Connection::open(&db)
        .unwrap()
        .execute_batch(
            "CREATE TABLE emp (id INTEGER PRIMARY KEY, boss INTEGER, name TEXT, FOREIGN KEY (boss) REFERENCES emp(id));
             INSERT INTO emp VALUES (1, NULL, 'ann'), (2, 1, 'bo');",
        )
        .unwrap();
    let catalog = sqlprompt_core::catalog::introspect("loop", &db).unwrap();
    let suite = generate_suite_db(&catalog, &SuiteSpec::default(), 1, &dir.path().join("suites")).unwrap();
    assert_eq!(suite.broken_edges, catalog.foreign_keys);
    assert!(violations(&catalog, &suite.path, &suite.broken_edges).is_empty());
}

fn write_preds(path: &std::path::Path, preds: &[(String, String)]) {
    let body: String = preds
        .iter()
        .map(|(id, sql)| {
            serde_json::to_string(&Prediction {
                example_id: id.clone(),
                sql: sql.clone(),
            })
            .unwrap()
                + "\n"
        })
        .collect();
    fs::write(path, body).unwrap();
}

#[test]
fn seven_of_ten_and_ts_never_exceeds_ex() {
    let env = common::env();
    let dir = TempDir::new().unwrap();
    let pred_path = dir.path().join("pred.jsonl");
    let mut preds: Vec<(String, String)> = env
        .dev
        .iter()
        .map(|e| (e.example_id.clone(), e.gold_sql.clone().unwrap()))
        .collect();
    preds[1].1 = "SELECT count(*) FROM countries".into();
    preds[4].1 = "SELECT nope".into();
    preds[7].1 = SINGER_PAIRS[9].1.into();
    write_preds(&pred_path, &preds);

    let report = evaluate_file(
        &pred_path,
        &env.fixture.dev,
        &env.fixture.db_dir,
        &EvalOptions {
            catalogs: CatalogSource::Manifest(&env.fixture.tables),
            suite: Some(SuiteSpec::default()),
            work_dir: dir.path().join("suites"),
        },
    )
    .unwrap();
    assert_eq!(report.ex_accuracy, 0.7);
    assert!(report.ts_accuracy.unwrap() <= report.ex_accuracy);
    assert!(report.summary().starts_with("EX: 0.7000\nTS (simplified): "));
    assert_eq!(report.counts.pred_errors.get("syntax").copied().unwrap_or(0) + report.counts.pred_errors.get("runtime").copied().unwrap_or(0), 1);
    for q in &report.per_question {
        assert!(!q.ts.unwrap() || q.ex, "{}", q.example_id);
    }

    // schemas read straight from the files score the same
    let introspected = evaluate_file(
        &pred_path,
        &env.fixture.dev,
        &env.fixture.db_dir,
        &EvalOptions {
            catalogs: CatalogSource::Introspect,
            suite: None,
            work_dir: dir.path().join("unused"),
        },
    )
    .unwrap();
    assert_eq!(introspected.ex_accuracy, 0.7);
    assert_eq!(introspected.ts_accuracy, None);
}

#[test]
fn missing_prediction_and_broken_gold() {
    let env = common::env();
    let dir = TempDir::new().unwrap();
    let pred_path = dir.path().join("pred.jsonl");
    write_preds(&pred_path, &[("000000".into(), "SELECT 1".into())]);
    let options = EvalOptions {
        catalogs: CatalogSource::Introspect,
        suite: None,
        work_dir: dir.path().join("w"),
    };
    assert!(matches!(
        evaluate_file(&pred_path, &env.fixture.dev, &env.fixture.db_dir, &options),
        Err(EvalError::MissingPrediction(id)) if id == "000001"
    ));

    let dataset = dir.path().join("broken.json");
    fs::write(
        &dataset,
        r#"[{"db_id": "singer", "question": "a", "query": "SELECT Name FROM singer"},
            {"db_id": "singer", "question": "b", "query": "SELECT nope FROM singer"}]"#,
    )
    .unwrap();
    write_preds(
        &pred_path,
        &[("000000".into(), "SELECT Name FROM singer".into()), ("000001".into(), "SELECT 1".into())],
    );
    let report = evaluate_file(&pred_path, &dataset, &env.fixture.db_dir, &options).unwrap();
    assert_eq!(report.counts.gold_failures, 1);
    assert_eq!(report.counts.scored, 1);
    assert_eq!(report.ex_accuracy, 1.0);
    assert_eq!(report.excluded[0].example_id, "000001");
}

#[test]
fn order_matters_only_when_gold_orders() {
    let env = common::env();
    let path = env.fixture.db_path("singer");
    let asc = "SELECT Name FROM singer ORDER BY Birth_Year";
    let desc = "SELECT Name FROM singer ORDER BY Birth_Year DESC";
    assert_eq!(match_on(desc, asc, &path, DEFAULT_TIMEOUT), MatchOutcome::Match(false));
    assert_eq!(match_on(desc, "SELECT Name FROM singer", &path, DEFAULT_TIMEOUT), MatchOutcome::Match(true));
}
