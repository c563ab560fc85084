use std::fs;
use std::path::{Path, PathBuf};

use qcache::cache::QuantizedKvCache;

use super::simulate::{simulate_decode, SimulationSpec};
use crate::report::Table;
use crate::{BenchError, Result};

/// The cache left after the simulation's prefill and decode steps, without
/// the shadow run.
pub fn build_cache(spec: &SimulationSpec) -> Result<QuantizedKvCache> {
    let report = simulate_decode(&SimulationSpec {
        shadow: false,
        tolerance: None,
        ..*spec
    })?;
    if let Some(v) = report.violations.first() {
        return Err(BenchError::verification(v.clone()));
    }
    Ok(report.cache)
}

/// Snapshot files sorted by name with their contents.
pub fn snapshot_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            out.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?));
        }
    }
    out.sort();
    Ok(out)
}

fn file_table(files: &[(String, Vec<u8>)]) -> Table {
    let mut t = Table::new("Snapshot files", &["file", "bytes"]);
    for (name, data) in files {
        t.push(vec![name.clone(), data.len().to_string()]);
    }
    t
}

/// Writes `cache` into `dir` and lists the files written.
pub fn dump(cache: &QuantizedKvCache, dir: &Path) -> Result<Table> {
    cache.dump(dir)?;
    Ok(file_table(&snapshot_files(dir)?))
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub path: PathBuf,
    pub cache: QuantizedKvCache,
    /// Files whose re-dumped bytes differ from the originals.
    pub mismatches: Vec<String>,
    pub files: Table,
}

impl LoadReport {
    pub fn violations(&self) -> Vec<String> {
        self.mismatches
            .iter()
            .map(|f| format!("{f} differs after load and re-dump"))
            .collect()
    }

    pub fn table(&self) -> Table {
        let l = self.cache.layout();
        let mut t = Table::new("Loaded cache", &["metric", "value"]);
        for (k, v) in [
            ("tokens", l.total_tokens),
            ("sink", l.sink),
            ("k_middle", l.k_middle),
            ("v_middle", l.v_middle),
            ("k_recent", l.k_recent),
            ("v_recent", l.v_recent),
            ("packed_bytes", self.cache.packed_bytes()),
            ("window_bytes", self.cache.full_precision_bytes()),
            ("mismatched_files", self.mismatches.len()),
        ] {
            t.push(vec![k.to_string(), v.to_string()]);
        }
        t
    }
}

/// Loads the snapshot in `dir`, dumps it again into a temporary directory
/// and compares the two byte for byte.
pub fn load(dir: &Path) -> Result<LoadReport> {
    let cache = QuantizedKvCache::load(dir)?;
    let original = snapshot_files(dir)?;
    let tmp = tempfile::tempdir()?;
    cache.dump(tmp.path())?;
    let again = snapshot_files(tmp.path())?;
    let mut mismatches: Vec<String> = original
        .iter()
        .filter(|(name, data)| again.iter().find(|(n, _)| n == name).map(|(_, d)| d) != Some(data))
        .map(|(name, _)| name.clone())
        .collect();
    mismatches.extend(
        again
            .iter()
            .filter(|(n, _)| !original.iter().any(|(o, _)| o == n))
            .map(|(n, _)| n.clone()),
    );
    Ok(LoadReport {
        path: dir.to_path_buf(),
        cache,
        mismatches,
        files: file_table(&original),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use qcache::attention::{AttentionConfig, ModelDims};
    use qcache::quant::{QuantConfig, QuantMode};

    fn spec() -> SimulationSpec {
        let mut attention = AttentionConfig::default();
        attention.cache.quant = QuantConfig::new(2, 32, QuantMode::Hybrid).unwrap();
        attention.cache.windows.w_sink = 8;
        attention.cache.windows.w_recent = 32;
        SimulationSpec {
            dims: ModelDims::new(64, 2).unwrap(),
            attention,
            prefill_len: 100,
            decode_steps: 40,
            seed: 11,
            shadow: true,
            tolerance: None,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let cache = build_cache(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = dump(&cache, dir.path()).unwrap();
        // manifest, two packed middles, four windows with sidecars
        assert_eq!(t.rows.len(), 11);
        let r = load(dir.path()).unwrap();
        assert!(r.mismatches.is_empty());
        assert_eq!(r.cache, cache);
    }

    #[test]
    fn corrupted_magic_is_an_error() {
        let cache = build_cache(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump(&cache, dir.path()).unwrap();
        let p = dir.path().join("k_hat.iqkv");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
