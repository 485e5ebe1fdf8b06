//! Regenerates `fixtures/replay/*.json` from the scripted backend.
//!
//! Usage: `build-fixtures [--check] [FIXTURES_DIR]`

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use lensaudit_fixtures::{build_case_study, build_corpus, fixtures_dir, write_all, CASE_STUDY, CORPUS};

fn main() -> Result<()> {
    let mut check = false;
    let mut dir = None;
    for arg in std::env::args().skip(1) {
        match arg.as_str() {
            "--check" => check = true,
            other => dir = Some(PathBuf::from(other)),
        }
    }
    let dir = dir.unwrap_or_else(fixtures_dir);
    if !check {
        write_all(&dir).map_err(anyhow::Error::msg)?;
        println!(
            "wrote {} and {}",
            dir.join(CORPUS).display(),
            dir.join(CASE_STUDY).display()
        );
        return Ok(());
    }
    let stores = [
        (CORPUS, build_corpus(&dir).map_err(anyhow::Error::msg)?),
        (CASE_STUDY, build_case_study(&dir).map_err(anyhow::Error::msg)?),
    ];
    for (name, store) in stores {
        let path = dir.join(name);
        let on_disk = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        if on_disk != store.to_json() {
            bail!("{} is stale; rerun build-fixtures", path.display());
        }
    }
    println!("fixtures up to date");
    Ok(())
}
