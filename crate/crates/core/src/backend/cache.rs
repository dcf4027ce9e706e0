//! Append-only on-disk response store.
//!
//! `responses.log` holds records of `hash (32 bytes) | len (u64 LE) | bytes`.
//! `responses.idx` holds `hash | offset (u64 LE) | len (u64 LE)` entries and is
//! rebuilt from the log whenever it is missing or does not cover the log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::Serialize;

use super::{BackendError, RequestHash};

const LOG_FILE: &str = "responses.log";
const INDEX_FILE: &str = "responses.idx";
const HEADER_LEN: u64 = 32 + 8;
const INDEX_ENTRY_LEN: usize = 32 + 8 + 8;

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: u64,
    len: u64,
}

struct Files {
    log: File,
    index: File,
    end: u64,
}

enum Storage {
    Disk { dir: PathBuf, files: Mutex<Files> },
    Memory(RwLock<HashMap<RequestHash, Vec<u8>>>),
}

/// Content-addressed response cache. Many readers, one writer at a time.
pub struct ScoreCache {
    index: RwLock<HashMap<RequestHash, Slot>>,
    storage: Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub log_bytes: u64,
    pub directory: Option<PathBuf>,
}

impl ScoreCache {
    /// Process-local cache with no backing files.
    pub fn in_memory() -> Self {
        ScoreCache {
            index: RwLock::new(HashMap::new()),
            storage: Storage::Memory(RwLock::new(HashMap::new())),
        }
    }

    pub fn exists(dir: impl AsRef<Path>) -> bool {
        dir.as_ref().join(LOG_FILE).is_file()
    }

    /// Open (creating if needed) the cache in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let idx_path = dir.join(INDEX_FILE);
        let mut log = OpenOptions::new().read(true).append(true).create(true).open(&log_path)?;
        let end = log.metadata()?.len();

        let index = match read_index(&idx_path, end)? {
            Some(index) => index,
            None => {
                let index = scan_log(&mut log, end)?;
                write_index(&idx_path, &index)?;
                index
            }
        };
        let index_file = OpenOptions::new().append(true).create(true).open(&idx_path)?;

        Ok(ScoreCache {
            index: RwLock::new(index),
            storage: Storage::Disk { dir, files: Mutex::new(Files { log, index: index_file, end }) },
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, hash: &RequestHash) -> bool {
        self.index.read().unwrap().contains_key(hash)
    }

    pub fn get(&self, hash: &RequestHash) -> Result<Option<Vec<u8>>, BackendError> {
        let slot = match self.index.read().unwrap().get(hash) {
            Some(s) => *s,
            None => return Ok(None),
        };
        match &self.storage {
            Storage::Memory(map) => Ok(map.read().unwrap().get(hash).cloned()),
            Storage::Disk { files, .. } => {
                let mut files = files.lock().unwrap();
                let mut buf = vec![0u8; slot.len as usize];
                files.log.seek(SeekFrom::Start(slot.offset))?;
                files.log.read_exact(&mut buf)?;
                Ok(Some(buf))
            }
        }
    }

    /// Store `bytes` under `hash`. Returns `false` when the identical record
    /// was already present; a different body for a known hash is an error.
    pub fn put(&self, hash: &RequestHash, bytes: &[u8]) -> Result<bool, BackendError> {
        if let Some(existing) = self.get(hash)? {
            return if existing == bytes { Ok(false) } else { Err(BackendError::CacheConflict(*hash)) };
        }
        match &self.storage {
            Storage::Memory(map) => {
                let mut map = map.write().unwrap();
                let mut index = self.index.write().unwrap();
                if index.contains_key(hash) {
                    return Ok(false);
                }
                map.insert(*hash, bytes.to_vec());
                index.insert(*hash, Slot { offset: 0, len: bytes.len() as u64 });
                Ok(true)
            }
            Storage::Disk { files, .. } => {
                let mut files = files.lock().unwrap();
                // another writer may have won the race
                if let Some(slot) = self.index.read().unwrap().get(hash).copied() {
                    let mut buf = vec![0u8; slot.len as usize];
                    files.log.seek(SeekFrom::Start(slot.offset))?;
                    files.log.read_exact(&mut buf)?;
                    return if buf == bytes { Ok(false) } else { Err(BackendError::CacheConflict(*hash)) };
                }
                let mut record = Vec::with_capacity(HEADER_LEN as usize + bytes.len());
                record.extend_from_slice(&hash.0);
                record.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                record.extend_from_slice(bytes);
                files.log.write_all(&record)?;
                let slot = Slot { offset: files.end + HEADER_LEN, len: bytes.len() as u64 };
                files.end += record.len() as u64;
                files.index.write_all(&index_entry(hash, slot))?;
                self.index.write().unwrap().insert(*hash, slot);
                Ok(true)
            }
        }
    }

    pub fn stats(&self) -> CacheStats {
        let entries = self.len();
        match &self.storage {
            Storage::Memory(map) => CacheStats {
                entries,
                log_bytes: map.read().unwrap().values().map(|v| v.len() as u64 + HEADER_LEN).sum(),
                directory: None,
            },
            Storage::Disk { dir, files } => {
                CacheStats { entries, log_bytes: files.lock().unwrap().end, directory: Some(dir.clone()) }
            }
        }
    }
}

fn index_entry(hash: &RequestHash, slot: Slot) -> [u8; INDEX_ENTRY_LEN] {
    let mut e = [0u8; INDEX_ENTRY_LEN];
    e[..32].copy_from_slice(&hash.0);
    e[32..40].copy_from_slice(&slot.offset.to_le_bytes());
    e[40..].copy_from_slice(&slot.len.to_le_bytes());
    e
}

fn read_index(path: &Path, log_len: u64) -> io::Result<Option<HashMap<RequestHash, Slot>>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    if bytes.len() % INDEX_ENTRY_LEN != 0 {
        return Ok(None);
    }
    let mut index = HashMap::new();
    let mut covered = 0u64;
    for chunk in bytes.chunks_exact(INDEX_ENTRY_LEN) {
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&chunk[..32]);
        let offset = u64::from_le_bytes(chunk[32..40].try_into().unwrap());
        let len = u64::from_le_bytes(chunk[40..].try_into().unwrap());
        covered = covered.max(offset + len);
        index.insert(RequestHash(hash), Slot { offset, len });
    }
    Ok((covered == log_len).then_some(index))
}

fn scan_log(log: &mut File, end: u64) -> io::Result<HashMap<RequestHash, Slot>> {
    log.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&*log);
    let mut index = HashMap::new();
    let mut pos = 0u64;
    while pos < end {
        let mut header = [0u8; HEADER_LEN as usize];
        reader.read_exact(&mut header)?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&header[..32]);
        let len = u64::from_le_bytes(header[32..].try_into().unwrap());
        let offset = pos + HEADER_LEN;
        if offset + len > end {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated cache record"));
        }
        io::copy(&mut (&mut reader).take(len), &mut io::sink())?;
        index.insert(RequestHash(hash), Slot { offset, len });
        pos = offset + len;
    }
    Ok(index)
}

fn write_index(path: &Path, index: &HashMap<RequestHash, Slot>) -> io::Result<()> {
    let mut entries: Vec<_> = index.iter().collect();
    entries.sort_by_key(|(_, slot)| slot.offset);
    let mut w = BufWriter::new(File::create(path)?);
    for (hash, slot) in entries {
        w.write_all(&index_entry(hash, *slot))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(b: u8) -> RequestHash {
        RequestHash([b; 32])
    }

    #[test]
    fn put_get_roundtrip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert!(cache.put(&h(1), b"{\"x\":1}").unwrap());
        assert!(!cache.put(&h(1), b"{\"x\":1}").unwrap());
        assert_eq!(cache.get(&h(1)).unwrap().unwrap(), b"{\"x\":1}");
        assert!(matches!(cache.put(&h(1), b"{}"), Err(BackendError::CacheConflict(_))));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn reopen_uses_index_or_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ScoreCache::open(dir.path()).unwrap();
            cache.put(&h(1), b"one").unwrap();
            cache.put(&h(2), b"second").unwrap();
        }
        let log = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.len() as u64, 2 * HEADER_LEN + 3 + 6);
        assert_eq!(&log[32..40], &3u64.to_le_bytes());

        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.get(&h(2)).unwrap().unwrap(), b"second");
        drop(cache);

        std::fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get(&h(1)).unwrap().unwrap(), b"one");
        assert!(dir.path().join(INDEX_FILE).exists());
    }

    #[test]
    fn stale_index_is_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ScoreCache::open(dir.path()).unwrap();
            cache.put(&h(1), b"one").unwrap();
        }
        std::fs::write(dir.path().join(INDEX_FILE), b"").unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn concurrent_writers_keep_one_record_per_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let cache = &cache;
                s.spawn(move || {
                    for i in 0..50u8 {
                        cache.put(&h(i), &[i, 0]).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 50);
        assert_eq!(cache.stats().log_bytes, 50 * (HEADER_LEN + 2));
    }

    #[test]
    fn memory_cache() {
        let cache = ScoreCache::in_memory();
        cache.put(&h(9), b"v").unwrap();
        assert_eq!(cache.get(&h(9)).unwrap().unwrap(), b"v");
        assert_eq!(cache.stats().directory, None);
    }
}
