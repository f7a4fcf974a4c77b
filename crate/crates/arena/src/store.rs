//! Submission persistence. Every mutation goes through one lock, so writes
//! are serialized and a claim can never hand the same job to two workers.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::model::{Status, Submission};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("idempotency key {key:?} already names a different request ({id})")]
    KeyConflict { key: String, id: String },
    #[error("unknown submission {0}")]
    NotFound(String),
    #[error("submission {id} cannot go from {from:?} to {to:?}")]
    Transition { id: String, from: Status, to: Status },
    #[error("submission {id} is leased to another worker")]
    Lease { id: String },
    #[error("submission {id}: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Debug)]
pub enum Inserted {
    Created(Submission),
    /// An earlier request with the same idempotency key and payload.
    Existing(Submission),
}

pub trait Store: Send + Sync {
    fn insert(&self, sub: Submission) -> Result<Inserted, StoreError>;
    fn get(&self, id: &str) -> Result<Option<Submission>, StoreError>;
    fn list(&self) -> Result<Vec<Submission>, StoreError>;
    /// Lease the oldest runnable submission to `lease` and move it out of
    /// the queue. Runnable means queued, or in flight under some other lease
    /// (left behind by a process that died).
    fn claim(&self, lease: &str) -> Result<Option<Submission>, StoreError>;
    /// Replace a record. The caller must hold its lease and may only move the
    /// status forward.
    fn update(&self, sub: &Submission) -> Result<(), StoreError>;
}

#[derive(Default)]
struct Records {
    subs: HashMap<String, Submission>,
    by_key: HashMap<String, String>,
}

impl Records {
    fn add(&mut self, sub: Submission) {
        if let Some(key) = &sub.idempotency_key {
            self.by_key.insert(key.clone(), sub.id.clone());
        }
        self.subs.insert(sub.id.clone(), sub);
    }

    fn check_insert(&self, sub: &Submission) -> Result<Option<Submission>, StoreError> {
        if let Some(key) = &sub.idempotency_key {
            if let Some(id) = self.by_key.get(key) {
                let prev = &self.subs[id];
                return if prev.same_request(sub) {
                    Ok(Some(prev.clone()))
                } else {
                    Err(StoreError::KeyConflict {
                        key: key.clone(),
                        id: id.clone(),
                    })
                };
            }
        }
        if self.subs.contains_key(&sub.id) {
            return Err(StoreError::Invalid {
                id: sub.id.clone(),
                reason: "id already in use".into(),
            });
        }
        Ok(None)
    }

    fn next_claim(&self, lease: &str) -> Option<Submission> {
        let mut sub = self
            .subs
            .values()
            .filter(|s| match s.status {
                Status::Queued => true,
                Status::Training | Status::Evaluating => s.lease.as_deref() != Some(lease),
                Status::Scored | Status::Failed => false,
            })
            .min_by(|a, b| a.submitted_at.cmp(&b.submitted_at).then_with(|| a.id.cmp(&b.id)))?
            .clone();
        if sub.status == Status::Queued {
            let next = if sub.checkpoint.is_some() {
                Status::Evaluating
            } else {
                Status::Training
            };
            sub.set_status(next);
        }
        sub.lease = Some(lease.to_string());
        Some(sub)
    }

    fn check_update(&self, sub: &Submission) -> Result<(), StoreError> {
        let old = self.subs.get(&sub.id).ok_or_else(|| StoreError::NotFound(sub.id.clone()))?;
        if old.lease.is_none() || old.lease != sub.lease {
            return Err(StoreError::Lease { id: sub.id.clone() });
        }
        if !old.status.can_become(sub.status) {
            return Err(StoreError::Transition {
                id: sub.id.clone(),
                from: old.status,
                to: sub.status,
            });
        }
        if sub.score.is_some() != (sub.status == Status::Scored) {
            return Err(StoreError::Invalid {
                id: sub.id.clone(),
                reason: "a score is present exactly when scored".into(),
            });
        }
        if old.config.get() != sub.config.get() || old.submitted_at != sub.submitted_at || old.checkpoint != sub.checkpoint
        {
            return Err(StoreError::Invalid {
                id: sub.id.clone(),
                reason: "the submitted request is immutable".into(),
            });
        }
        Ok(())
    }
}

fn lock(m: &Mutex<Records>) -> MutexGuard<'_, Records> {
    // A panic mid-update never leaves Records half-written: every change is
    // a single insert after all checks passed.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Volatile store for tests and throwaway servers.
#[derive(Default)]
pub struct MemoryStore {
    records: Mutex<Records>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Store for MemoryStore {
    fn insert(&self, sub: Submission) -> Result<Inserted, StoreError> {
        let mut r = lock(&self.records);
        if let Some(prev) = r.check_insert(&sub)? {
            return Ok(Inserted::Existing(prev));
        }
        r.add(sub.clone());
        Ok(Inserted::Created(sub))
    }

    fn get(&self, id: &str) -> Result<Option<Submission>, StoreError> {
        Ok(lock(&self.records).subs.get(id).cloned())
    }

    fn list(&self) -> Result<Vec<Submission>, StoreError> {
        Ok(lock(&self.records).subs.values().cloned().collect())
    }

    fn claim(&self, lease: &str) -> Result<Option<Submission>, StoreError> {
        let mut r = lock(&self.records);
        let Some(sub) = r.next_claim(lease) else { return Ok(None) };
        r.add(sub.clone());
        Ok(Some(sub))
    }

    fn update(&self, sub: &Submission) -> Result<(), StoreError> {
        let mut r = lock(&self.records);
        r.check_update(sub)?;
        r.add(sub.clone());
        Ok(())
    }
}

/// One `<id>.json` file per submission, replaced atomically on every change.
/// The directory is the source of truth; the in-memory copy is a cache
/// loaded at open.
pub struct JsonDirStore {
    dir: PathBuf,
    records: Mutex<Records>,
}

impl JsonDirStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut records = Records::default();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.ends_with(".tmp") {
                // Interrupted write; the previous version is still in place.
                fs::remove_file(&path)?;
                continue;
            }
            if !name.ends_with(".json") {
                continue;
            }
            let bytes = fs::read(&path)?;
            let sub: Submission = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            records.add(sub);
        }
        Ok(Self {
            dir,
            records: Mutex::new(records),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn persist(&self, sub: &Submission) -> Result<(), StoreError> {
        let path = self.dir.join(format!("{}.json", sub.id));
        let tmp = self.dir.join(format!("{}.json.tmp", sub.id));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(sub).expect("submission serializes"))?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path)?;
        if let Ok(d) = fs::File::open(&self.dir) {
            // Directory fsync is unsupported on some platforms; best effort.
            let _ = d.sync_all();
        }
        Ok(())
    }
}

impl Store for JsonDirStore {
    fn insert(&self, sub: Submission) -> Result<Inserted, StoreError> {
        let mut r = lock(&self.records);
        if let Some(prev) = r.check_insert(&sub)? {
            return Ok(Inserted::Existing(prev));
        }
        self.persist(&sub)?;
        r.add(sub.clone());
        Ok(Inserted::Created(sub))
    }

    fn get(&self, id: &str) -> Result<Option<Submission>, StoreError> {
        Ok(lock(&self.records).subs.get(id).cloned())
    }

    fn list(&self) -> Result<Vec<Submission>, StoreError> {
        Ok(lock(&self.records).subs.values().cloned().collect())
    }

    fn claim(&self, lease: &str) -> Result<Option<Submission>, StoreError> {
        let mut r = lock(&self.records);
        let Some(sub) = r.next_claim(lease) else { return Ok(None) };
        self.persist(&sub)?;
        r.add(sub.clone());
        Ok(Some(sub))
    }

    fn update(&self, sub: &Submission) -> Result<(), StoreError> {
        let mut r = lock(&self.records);
        r.check_update(sub)?;
        self.persist(sub)?;
        r.add(sub.clone());
        Ok(())
    }
}
