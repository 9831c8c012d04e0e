#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hybridq_core::generation::{FixtureSet, MockProvider};
use hybridq_core::{EngineConfig, PlanMode, ProviderConfig};

pub fn toy_source() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../suites/toy")
}

fn copy_dir(from: &Path, to: &Path, skip: &dyn Fn(&Path) -> bool) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        if skip(&path) {
            continue;
        }
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target, skip);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}

fn is_database(p: &Path) -> bool {
    p.extension()
        .is_some_and(|x| x == "db" || x == "db-building" || x == "db-journal")
}

/// Copies the shipped toy suite without its database files, so loading it
/// rebuilds both databases from source.
pub fn toy_copy() -> (tempfile::TempDir, PathBuf) {
    toy_copy_without(&[])
}

/// Like `toy_copy`, also leaving out the named top-level entries.
pub fn toy_copy_without(names: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let source = toy_source();
    copy_dir(&source, &root, &|p| {
        is_database(p) || (p.parent() == Some(source.as_path()) && names.iter().any(|n| p.file_name().unwrap() == *n))
    });
    (dir, root)
}

pub fn mock(fixtures: FixtureSet) -> MockProvider {
    MockProvider::new(fixtures, "mock", 3000)
}

pub fn engine_config(k: usize, mode: PlanMode) -> EngineConfig {
    EngineConfig { provider: ProviderConfig::default(), mode, k }
}
