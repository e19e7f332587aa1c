//! Materializes the checked-in Spider-style fixtures (`testdata/spider`) into a
//! scratch directory, building one SQLite file per database from its SQL script.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub const FIXTURE_DBS: [&str; 3] = ["car_1", "singer", "real_estate_properties"];

/// Root of the repository `testdata/` directory.
pub fn testdata_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata")
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub tables: PathBuf,
    pub dev: PathBuf,
    pub dev_mini: PathBuf,
    pub demos: PathBuf,
    pub db_dir: PathBuf,
}

impl Fixture {
    pub fn db_path(&self, db_id: &str) -> PathBuf {
        self.db_dir.join(db_id).join(format!("{db_id}.sqlite"))
    }
}

/// Copies the JSON fixtures into `dest` and builds `dest/database/<db>/<db>.sqlite`.
pub fn materialize(dest: &Path) -> io::Result<Fixture> {
    let src = testdata_dir().join("spider");
    fs::create_dir_all(dest)?;
    for name in ["tables.json", "dev.json", "dev_mini.json", "demos.json"] {
        fs::copy(src.join(name), dest.join(name))?;
    }
    let db_dir = dest.join("database");
    for db_id in FIXTURE_DBS {
        let script = fs::read_to_string(src.join("database").join(db_id).join(format!("{db_id}.sql")))?;
        let dir = db_dir.join(db_id);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{db_id}.sqlite"));
        if path.exists() {
            fs::remove_file(&path)?;
        }
        build_db(&path, &script).map_err(io::Error::other)?;
    }
    Ok(Fixture {
        root: dest.to_path_buf(),
        tables: dest.join("tables.json"),
        dev: dest.join("dev.json"),
        dev_mini: dest.join("dev_mini.json"),
        demos: dest.join("demos.json"),
        db_dir,
    })
}

/// Builds a database file at `path` from an SQL script.
pub fn build_db(path: &Path, script: &str) -> rusqlite::Result<()> {
    let conn = rusqlite::Connection::open(path)?;
    conn.execute_batch(script)?;
    conn.close().map_err(|(_, e)| e)
}
