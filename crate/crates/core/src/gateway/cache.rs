use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub cache_key: String,
    pub model_id: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub created: DateTime<Utc>,
}

#[derive(Default)]
struct State {
    entries: HashMap<String, CachedResponse>,
    order: BTreeMap<String, Vec<String>>,
    dirty: BTreeSet<String>,
    pending: usize,
}

/// Response cache persisted as one JSONL file per model under `dir`.
///
/// Files are rewritten through a temp file and rename, so a reader never
/// sees a partially written cache.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    state: Mutex<State>,
}

const FLUSH_EVERY: usize = 32;

pub fn file_stem(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            state: Mutex::new(State::default()),
        }
    }

    /// Open (or create) a cache directory and load every `*.jsonl` in it.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut state = State::default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            for line in BufReader::new(fs::File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CachedResponse = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}: {e}", path.display()),
                    )
                })?;
                if !state.entries.contains_key(&entry.cache_key) {
                    state
                        .order
                        .entry(entry.model_id.clone())
                        .or_default()
                        .push(entry.cache_key.clone());
                    state.entries.insert(entry.cache_key.clone(), entry);
                }
            }
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            state: Mutex::new(state),
        })
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        self.state.lock().unwrap().entries.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a response. The first write for a key wins.
    pub fn put(&self, entry: CachedResponse) -> std::io::Result<()> {
        let should_flush = {
            let mut st = self.state.lock().unwrap();
            if st.entries.contains_key(&entry.cache_key) {
                return Ok(());
            }
            st.order
                .entry(entry.model_id.clone())
                .or_default()
                .push(entry.cache_key.clone());
            st.dirty.insert(entry.model_id.clone());
            st.entries.insert(entry.cache_key.clone(), entry);
            st.pending += 1;
            st.pending >= FLUSH_EVERY
        };
        if should_flush {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&self) -> std::io::Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut st = self.state.lock().unwrap();
        let dirty = std::mem::take(&mut st.dirty);
        for model in dirty {
            let mut buf = Vec::new();
            for key in &st.order[&model] {
                serde_json::to_writer(&mut buf, &st.entries[key]).expect("entry serializes");
                buf.push(b'\n');
            }
            write_atomic(&dir.join(format!("{}.jsonl", file_stem(&model))), &buf)?;
        }
        st.pending = 0;
        Ok(())
    }
}

impl Drop for ResponseCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("failed to flush response cache: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, model: &str, text: &str) -> CachedResponse {
        CachedResponse {
            cache_key: key.into(),
            model_id: model.into(),
            raw_text: text.into(),
            latency_ms: 3,
            created: Utc::now(),
        }
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = ResponseCache::open(dir.path()).unwrap();
            c.put(entry("k1", "llama3:8b", "one")).unwrap();
            c.put(entry("k2", "llama3:8b", "two")).unwrap();
            c.put(entry("k1", "llama3:8b", "ignored")).unwrap();
            c.flush().unwrap();
        }
        assert!(dir.path().join("llama3_8b.jsonl").exists());
        let c = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("k1").unwrap().raw_text, "one");
    }
}
