#![allow(dead_code)]

use sqlprompt_core::catalog::{load_catalogs, load_examples, CatalogSet, ExampleItem};
use sqlprompt_testkit::{materialize, Fixture};
use tempfile::TempDir;

pub struct Env {
    pub _dir: TempDir,
    pub fixture: Fixture,
    pub catalogs: CatalogSet,
    pub dev: Vec<ExampleItem>,
}

pub fn env() -> Env {
    let dir = TempDir::new().unwrap();
    let fixture = materialize(dir.path()).unwrap();
    let catalogs = CatalogSet::new(load_catalogs(&fixture.tables, &fixture.db_dir).unwrap());
    let dev = load_examples(&fixture.dev).unwrap();
    Env {
        _dir: dir,
        fixture,
        catalogs,
        dev,
    }
}
