//! Persistent memo table for radial moments.
//!
//! The on-disk format is JSON lines: a header `{"version": ...}` followed by one record per
//! moment.  Records that fail to parse are skipped with a warning.  Writes go to a temporary
//! file in the same directory which is then renamed over the target, so concurrent processes
//! never observe a torn file; each flush merges with what is already on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{radial_uncached, MomentResult, QuadConfig};
use crate::error::{Error, Result};
use crate::weights::ReinhardtWeight;

pub const CACHE_VERSION: &str = "bergman-lab-moments/1";

/// Identifies one radial moment; radii are compared bitwise.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MomentKey {
    pub weight_hash: String,
    pub m: u32,
    pub alpha: Vec<u32>,
    pub lower: Vec<u64>,
    pub upper: Vec<u64>,
}

impl MomentKey {
    pub fn new(w: &ReinhardtWeight, m: u32, alpha: &[u32], lower: &[f64], upper: &[f64]) -> Self {
        MomentKey {
            weight_hash: w.canonical_hash(),
            m,
            alpha: alpha.to_vec(),
            lower: lower.iter().map(|x| x.to_bits()).collect(),
            upper: upper.iter().map(|x| x.to_bits()).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    weight_hash: String,
    weight: ReinhardtWeight,
    m: u32,
    alpha: Vec<u32>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    ln_value: f64,
    rel_err: f64,
    evaluations: usize,
    precision_reached: bool,
}

impl Record {
    fn key(&self) -> MomentKey {
        MomentKey {
            weight_hash: self.weight_hash.clone(),
            m: self.m,
            alpha: self.alpha.clone(),
            lower: self.lower.iter().map(|x| x.to_bits()).collect(),
            upper: self.upper.iter().map(|x| x.to_bits()).collect(),
        }
    }

    fn result(&self) -> MomentResult {
        MomentResult {
            ln_value: self.ln_value,
            rel_err: self.rel_err,
            evaluations: self.evaluations,
            precision_reached: self.precision_reached,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
}

/// Thread-safe moment cache, optionally backed by a file.
#[derive(Default)]
pub struct MomentCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<MomentKey, Record>>,
    skipped: Mutex<usize>,
}

/// Outcome of a cache verification pass.
#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub total: usize,
    pub sampled: usize,
    pub matched: usize,
    pub worst_rel_diff: f64,
}

impl VerifyReport {
    pub fn all_matched(&self) -> bool {
        self.matched == self.sampled
    }
}

impl MomentCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or prepares to create) the cache file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let cache = MomentCache { path: Some(path.clone()), ..Default::default() };
        if path.exists() {
            let (records, skipped) = read_records(&path)?;
            let mut map = cache.entries.lock().unwrap();
            for r in records {
                map.insert(r.key(), r);
            }
            drop(map);
            *cache.skipped.lock().unwrap() = skipped;
        }
        Ok(cache)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of unreadable records dropped while loading.
    pub fn skipped_on_load(&self) -> usize {
        *self.skipped.lock().unwrap()
    }

    pub fn get(&self, key: &MomentKey) -> Option<MomentResult> {
        self.entries.lock().unwrap().get(key).map(|r| r.result())
    }

    /// Inserting the same key twice keeps the first value.
    pub fn insert(&self, key: MomentKey, w: &ReinhardtWeight, r: MomentResult) {
        let mut map = self.entries.lock().unwrap();
        map.entry(key.clone()).or_insert_with(|| Record {
            weight_hash: key.weight_hash,
            weight: w.clone(),
            m: key.m,
            alpha: key.alpha,
            lower: key.lower.iter().map(|&b| f64::from_bits(b)).collect(),
            upper: key.upper.iter().map(|&b| f64::from_bits(b)).collect(),
            ln_value: r.ln_value,
            rel_err: r.rel_err,
            evaluations: r.evaluations,
            precision_reached: r.precision_reached,
        });
    }

    /// Summary lines `weight_hash m alpha lower upper value` sorted by key.
    pub fn list(&self) -> Vec<String> {
        let map = self.entries.lock().unwrap();
        let sorted: BTreeMap<&MomentKey, &Record> = map.iter().collect();
        sorted
            .values()
            .map(|r| {
                format!(
                    "{} m={} alpha={:?} lower={:?} upper={:?} ln_value={} rel_err={:e}",
                    &r.weight_hash[..12],
                    r.m,
                    r.alpha,
                    r.lower,
                    r.upper,
                    r.ln_value,
                    r.rel_err
                )
            })
            .collect()
    }

    /// Removes every entry and deletes the backing file.
    pub fn purge(&self) -> Result<()> {
        self.entries.lock().unwrap().clear();
        if let Some(p) = &self.path {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }

    /// Writes all entries, merged with the current file contents, via an atomic rename.
    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if path.exists() {
            let (records, _) = read_records(path)?;
            let mut map = self.entries.lock().unwrap();
            for r in records {
                map.entry(r.key()).or_insert(r);
            }
        }
        let map = self.entries.lock().unwrap();
        let sorted: BTreeMap<&MomentKey, &Record> = map.iter().collect();
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("cache"),
            std::process::id()
        ));
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut f, &Header { version: CACHE_VERSION.into() })?;
            f.write_all(b"\n")?;
            for r in sorted.values() {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Recomputes a deterministic sample of `fraction` of the entries (at least one) and
    /// compares against the stored values.
    pub fn verify(&self, fraction: f64, tol: f64, cfg: &QuadConfig, seed: u64) -> Result<VerifyReport> {
        let map = self.entries.lock().unwrap();
        let mut keys: Vec<&MomentKey> = map.keys().collect();
        keys.sort();
        let total = keys.len();
        if total == 0 {
            return Ok(VerifyReport { total, sampled: 0, matched: 0, worst_rel_diff: 0.0 });
        }
        let want = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Partial Fisher-Yates shuffle.
        for i in 0..want {
            let j = rng.random_range(i..total);
            keys.swap(i, j);
        }
        let mut matched = 0;
        let mut worst: f64 = 0.0;
        for key in &keys[..want] {
            let rec = &map[*key];
            let fresh = radial_uncached(&rec.weight, rec.m, &rec.alpha, &rec.lower, &rec.upper, cfg)?;
            let diff = (fresh.ln_value - rec.ln_value).exp_m1().abs();
            worst = worst.max(diff);
            if diff <= tol {
                matched += 1;
            }
        }
        Ok(VerifyReport { total, sampled: want, matched, worst_rel_diff: worst })
    }
}

fn read_records(path: &Path) -> Result<(Vec<Record>, usize)> {
    let f = fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Ok((vec![], 0)),
    };
    match serde_json::from_str::<Header>(&header) {
        Ok(h) if h.version == CACHE_VERSION => {}
        _ => {
            log::warn!("ignoring moment cache {} with unknown version header", path.display());
            return Ok((vec![], 0));
        }
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) if r.weight.canonical_hash() == r.weight_hash => out.push(r),
            Ok(_) => {
                log::warn!("cache record {} has a mismatched weight hash; skipped", i + 2);
                skipped += 1;
            }
            Err(e) => {
                log::warn!("cache record {} is corrupt ({e}); skipped", i + 2);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

impl std::fmt::Debug for MomentCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentCache").field("path", &self.path).field("len", &self.len()).finish()
    }
}

/// Fails with a configuration error when `path` exists but is not a readable cache.
pub fn check_readable(path: &Path) -> Result<()> {
    if path.exists() && path.is_dir() {
        return Err(Error::Config(format!("cache path {} is a directory", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::MomentEngine;
    use crate::weights::RadialProfile;
    use std::sync::Arc;

    fn weight() -> ReinhardtWeight {
        ReinhardtWeight::tensor(vec![RadialProfile::gaussian()])
    }

    #[test]
    fn roundtrip_and_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moments.jsonl");
        let cache = Arc::new(MomentCache::open(&path).unwrap());
        let engine = MomentEngine::with_cache(QuadConfig::default(), cache.clone());
        let w = weight();
        let a = engine.moment_nd(&w, 4, &[3], &[1.0]).unwrap();
        engine.moment_nd(&w, 4, &[4], &[1.0]).unwrap();
        cache.flush().unwrap();

        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();

        let reopened = MomentCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.skipped_on_load(), 1);
        let key = MomentKey::new(&w, 4, &[3], &[0.0], &[1.0]);
        assert_eq!(reopened.get(&key).unwrap().ln_value.to_bits(), (a.ln_value - (2.0 * std::f64::consts::PI).ln()).to_bits());
        let report = reopened.verify(1.0, 1e-10, &QuadConfig::default(), 1).unwrap();
        assert!(report.all_matched());
    }

    #[test]
    fn concurrent_inserts_are_idempotent() {
        let cache = Arc::new(MomentCache::in_memory());
        let w = weight();
        std::thread::scope(|s| {
            for _ in 0..8 {
                let cache = cache.clone();
                let w = w.clone();
                s.spawn(move || {
                    let engine = MomentEngine::with_cache(QuadConfig::default(), cache);
                    for k in 0..10 {
                        engine.moment_nd(&w, 2, &[k], &[1.0]).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 10);
    }

    #[test]
    fn unknown_version_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"version\":\"other\"}\n").unwrap();
        assert!(MomentCache::open(&path).unwrap().is_empty());
    }
}
