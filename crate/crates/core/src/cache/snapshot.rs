//! Cache snapshots: a directory holding `manifest.json`, the two packed
//! middles as `k_hat.iqkv`/`v_hat.iqkv`, and the four full-precision windows
//! as tensor files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::quant::{GroupingAxis, PackedMatrix};
use crate::tensor::{read_tensor, write_tensor};
use crate::{Error, Result};

use super::{CacheConfig, QuantizedKvCache};

pub const SNAPSHOT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const K_HAT: &str = "k_hat.iqkv";
const V_HAT: &str = "v_hat.iqkv";
const WINDOWS: [&str; 4] = ["k_sink.bin", "v_sink.bin", "k_recent.bin", "v_recent.bin"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub version: u32,
    pub width: usize,
    pub total_tokens: usize,
    pub config: CacheConfig,
}

impl QuantizedKvCache {
    /// Writes a snapshot into `dir`, creating it if needed.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = SnapshotManifest {
            version: SNAPSHOT_VERSION,
            width: self.d,
            total_tokens: self.total_tokens,
            config: self.cfg,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        self.k_hat.write_to(dir.join(K_HAT))?;
        self.v_hat.write_to(dir.join(V_HAT))?;
        for (name, m) in WINDOWS
            .iter()
            .zip([&self.k_sink, &self.v_sink, &self.k_recent, &self.v_recent])
        {
            write_tensor(dir.join(name), m)?;
        }
        Ok(())
    }

    /// Reads a snapshot written by [`dump`](Self::dump) and re-checks every
    /// cache invariant.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: SnapshotManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        manifest.config.validate(manifest.width)?;
        let k_hat = PackedMatrix::read_from(dir.join(K_HAT))?;
        let v_hat = PackedMatrix::read_from(dir.join(V_HAT))?;
        for m in [&k_hat, &v_hat] {
            if m.axis() != GroupingAxis::Inner || *m.config() != manifest.config.quant {
                return Err(Error::format("packed partition layout disagrees with the manifest"));
            }
        }
        let [k_sink, v_sink, k_recent, v_recent] = WINDOWS.map(|n| read_tensor(dir.join(n)));
        let cache = Self {
            cfg: manifest.config,
            d: manifest.width,
            k_sink: k_sink?,
            v_sink: v_sink?,
            k_hat,
            v_hat,
            k_recent: k_recent?,
            v_recent: v_recent?,
            total_tokens: manifest.total_tokens,
        };
        for m in [&cache.k_sink, &cache.v_sink, &cache.k_recent, &cache.v_recent] {
            if m.cols() != cache.d {
                return Err(Error::format("window width disagrees with the manifest"));
            }
        }
        if cache.k_hat.cols() != cache.d || cache.v_hat.rows() != cache.d {
            return Err(Error::format("packed partition width disagrees with the manifest"));
        }
        cache
            .check_invariants()
            .map_err(|e| Error::format(format!("inconsistent snapshot: {e}")))?;
        Ok(cache)
    }
}
