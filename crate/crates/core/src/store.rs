//! Append-only event journal with sync marking and retention compaction.
//!
//! File layout, little-endian:
//!
//! ```text
//! header   "SXPJ" u16 version (1)
//! record   u32 body length, u32 crc32(body), body
//! body     u8 tag, then
//!            1 append:      u64 seq, i64 appended_at_ms, payload (UTF-8, rest of body)
//!            2 mark synced: u64 seq, i64 synced_at_ms
//!            3 watermark:   u64 next seq (written first by compaction)
//! ```
//!
//! On open, records are replayed until the first one that is short or fails
//! its checksum; everything from there on is a torn tail and is truncated.
//! Compaction writes a fresh image and swaps it in atomically.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"SXPJ";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 6;
pub const DEFAULT_RETENTION_DAYS: i64 = 28;

const TAG_APPEND: u8 = 1;
const TAG_SYNCED: u8 = 2;
const TAG_WATERMARK: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("not a journal file")]
    BadMagic,
    #[error("unsupported journal version {0}")]
    Version(u16),
    #[error("payload is not valid UTF-8 at seq {0}")]
    Payload(u64),
}

/// Byte store under a journal.
pub trait Storage: Send {
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    /// Appends and makes the bytes durable before returning.
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn truncate(&mut self, len: u64) -> io::Result<()>;
    /// Replaces the whole content atomically.
    fn replace(&mut self, bytes: &[u8]) -> io::Result<()>;
}

pub struct FileStorage {
    path: PathBuf,
}

impl FileStorage {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileStorage { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Storage for FileStorage {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        match File::open(&self.path) {
            Ok(mut f) => {
                let mut buf = Vec::new();
                f.read_to_end(&mut buf)?;
                Ok(buf)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(bytes)?;
        f.sync_data()
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        let f = OpenOptions::new().write(true).open(&self.path)?;
        f.set_len(len)?;
        f.sync_data()
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)
    }
}

/// In-memory storage that can be told to crash after a byte budget: the
/// write that crosses the budget lands partially and every later call
/// fails. Replacement is all-or-nothing, like a rename.
#[derive(Clone, Default)]
pub struct MemStorage {
    inner: Arc<Mutex<MemInner>>,
}

#[derive(Default)]
struct MemInner {
    data: Vec<u8>,
    budget: Option<usize>,
    crashed: bool,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bytes(data: Vec<u8>) -> Self {
        MemStorage {
            inner: Arc::new(Mutex::new(MemInner {
                data,
                budget: None,
                crashed: false,
            })),
        }
    }

    /// Crash once `bytes` more bytes have been written.
    pub fn crash_after(&self, bytes: usize) {
        self.inner.lock().expect("storage lock").budget = Some(bytes);
    }

    pub fn crashed(&self) -> bool {
        self.inner.lock().expect("storage lock").crashed
    }

    /// What a restarted process would find.
    pub fn image(&self) -> Vec<u8> {
        self.inner.lock().expect("storage lock").data.clone()
    }
}

fn crash_error() -> io::Error {
    io::Error::new(io::ErrorKind::Other, "injected crash")
}

impl Storage for MemStorage {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let s = self.inner.lock().expect("storage lock");
        if s.crashed {
            return Err(crash_error());
        }
        Ok(s.data.clone())
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut s = self.inner.lock().expect("storage lock");
        if s.crashed {
            return Err(crash_error());
        }
        match s.budget {
            Some(b) if b < bytes.len() => {
                s.data.extend_from_slice(&bytes[..b]);
                s.budget = Some(0);
                s.crashed = true;
                Err(crash_error())
            }
            Some(b) => {
                s.budget = Some(b - bytes.len());
                s.data.extend_from_slice(bytes);
                Ok(())
            }
            None => {
                s.data.extend_from_slice(bytes);
                Ok(())
            }
        }
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        let mut s = self.inner.lock().expect("storage lock");
        if s.crashed {
            return Err(crash_error());
        }
        s.data.truncate(len as usize);
        Ok(())
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut s = self.inner.lock().expect("storage lock");
        if s.crashed {
            return Err(crash_error());
        }
        match s.budget {
            Some(b) if b < bytes.len() => {
                s.budget = Some(0);
                s.crashed = true;
                Err(crash_error())
            }
            Some(b) => {
                s.budget = Some(b - bytes.len());
                s.data = bytes.to_vec();
                Ok(())
            }
            None => {
                s.data = bytes.to_vec();
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub appended_at: DateTime<Utc>,
    pub payload: String,
    pub synced: bool,
    pub synced_at: Option<DateTime<Utc>>,
}

enum Record {
    Append {
        seq: u64,
        at: i64,
        payload: Vec<u8>,
    },
    Synced {
        seq: u64,
        at: i64,
    },
    Watermark {
        next: u64,
    },
}

fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn encode(rec: &Record) -> Vec<u8> {
    let mut b = Vec::new();
    match rec {
        Record::Append { seq, at, payload } => {
            b.push(TAG_APPEND);
            b.extend_from_slice(&seq.to_le_bytes());
            b.extend_from_slice(&at.to_le_bytes());
            b.extend_from_slice(payload);
        }
        Record::Synced { seq, at } => {
            b.push(TAG_SYNCED);
            b.extend_from_slice(&seq.to_le_bytes());
            b.extend_from_slice(&at.to_le_bytes());
        }
        Record::Watermark { next } => {
            b.push(TAG_WATERMARK);
            b.extend_from_slice(&next.to_le_bytes());
        }
    }
    frame(&b)
}

fn decode(body: &[u8]) -> Option<Record> {
    let u64_at = |o: usize| body.get(o..o + 8).map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")));
    match *body.first()? {
        TAG_APPEND => Some(Record::Append {
            seq: u64_at(1)?,
            at: u64_at(9)? as i64,
            payload: body.get(17..)?.to_vec(),
        }),
        TAG_SYNCED if body.len() == 17 => Some(Record::Synced {
            seq: u64_at(1)?,
            at: u64_at(9)? as i64,
        }),
        TAG_WATERMARK if body.len() == 9 => Some(Record::Watermark { next: u64_at(1)? }),
        _ => None,
    }
}

fn header() -> Vec<u8> {
    let mut h = MAGIC.to_vec();
    h.extend_from_slice(&VERSION.to_le_bytes());
    h
}

fn ms(t: DateTime<Utc>) -> i64 {
    t.timestamp_millis()
}

fn from_ms(v: i64) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(v).single().unwrap_or_default()
}

pub struct Journal<S: Storage> {
    storage: S,
    entries: BTreeMap<u64, JournalEntry>,
    next_seq: u64,
    len: u64,
    /// Bytes dropped from a torn tail when the journal was opened.
    pub recovered_tail: u64,
}

impl Journal<FileStorage> {
    pub fn open_path(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Journal::open(FileStorage::new(path))
    }
}

impl<S: Storage> Journal<S> {
    pub fn open(mut storage: S) -> Result<Self, StoreError> {
        let buf = storage.read_all()?;
        let mut j = Journal {
            storage,
            entries: BTreeMap::new(),
            next_seq: 1,
            len: 0,
            recovered_tail: 0,
        };
        if buf.len() < HEADER_LEN {
            // empty or a header torn mid-write
            if !buf.is_empty() && !MAGIC.starts_with(&buf[..buf.len().min(4)]) {
                return Err(StoreError::BadMagic);
            }
            j.storage.replace(&header())?;
            j.len = HEADER_LEN as u64;
            return Ok(j);
        }
        if &buf[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let mut pos = HEADER_LEN;
        while pos + 8 <= buf.len() {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            let crc = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().expect("4 bytes"));
            let Some(body) = buf.get(pos + 8..pos + 8 + len) else {
                break;
            };
            if crc32fast::hash(body) != crc {
                break;
            }
            let Some(rec) = decode(body) else {
                break;
            };
            j.apply(rec)?;
            pos += 8 + len;
        }
        if pos < buf.len() {
            j.recovered_tail = (buf.len() - pos) as u64;
            j.storage.truncate(pos as u64)?;
        }
        j.len = pos as u64;
        Ok(j)
    }

    fn apply(&mut self, rec: Record) -> Result<(), StoreError> {
        match rec {
            Record::Append { seq, at, payload } => {
                let payload = String::from_utf8(payload).map_err(|_| StoreError::Payload(seq))?;
                self.entries.insert(
                    seq,
                    JournalEntry {
                        seq,
                        appended_at: from_ms(at),
                        payload,
                        synced: false,
                        synced_at: None,
                    },
                );
                self.next_seq = self.next_seq.max(seq + 1);
            }
            Record::Synced { seq, at } => {
                if let Some(e) = self.entries.get_mut(&seq) {
                    if !e.synced {
                        e.synced = true;
                        e.synced_at = Some(from_ms(at));
                    }
                }
            }
            Record::Watermark { next } => self.next_seq = self.next_seq.max(next),
        }
        Ok(())
    }

    fn write(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        match self.storage.append(bytes) {
            Ok(()) => {
                self.len += bytes.len() as u64;
                Ok(())
            }
            Err(e) => {
                // best effort: drop whatever part of the record landed
                let _ = self.storage.truncate(self.len);
                Err(e.into())
            }
        }
    }

    /// Durably appends `payload`; returns its sequence number.
    pub fn append(&mut self, payload: &str, now: DateTime<Utc>) -> Result<u64, StoreError> {
        let seq = self.next_seq;
        let rec = Record::Append {
            seq,
            at: ms(now),
            payload: payload.as_bytes().to_vec(),
        };
        self.write(&encode(&rec))?;
        self.apply(rec)?;
        Ok(seq)
    }

    pub fn mark_synced(&mut self, seq: u64, now: DateTime<Utc>) -> Result<bool, StoreError> {
        match self.entries.get(&seq) {
            Some(e) if !e.synced => {}
            _ => return Ok(false),
        }
        let rec = Record::Synced { seq, at: ms(now) };
        self.write(&encode(&rec))?;
        self.apply(rec)?;
        Ok(true)
    }

    pub fn entries(&self) -> impl Iterator<Item = &JournalEntry> {
        self.entries.values()
    }

    pub fn get(&self, seq: u64) -> Option<&JournalEntry> {
        self.entries.get(&seq)
    }

    pub fn unsynced(&self) -> Vec<&JournalEntry> {
        self.entries.values().filter(|e| !e.synced).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Sends unsynced entries in order until the peer fails; marks exactly
    /// the acknowledged ones.
    pub fn sync_cycle(
        &mut self,
        peer: &mut dyn Acknowledger,
        now: DateTime<Utc>,
        retry: &mut RetryState,
    ) -> SyncReport {
        let pending: Vec<(u64, String)> = self
            .unsynced()
            .into_iter()
            .map(|e| (e.seq, e.payload.clone()))
            .collect();
        let mut report = SyncReport {
            attempted: 0,
            acked: Vec::new(),
            error: None,
            next_interval_s: 0,
        };
        for (seq, payload) in pending {
            report.attempted += 1;
            if let Err(e) = peer.deliver(seq, &payload) {
                report.error = Some(e.to_string());
                break;
            }
            match self.mark_synced(seq, now) {
                Ok(_) => report.acked.push(seq),
                Err(e) => {
                    report.error = Some(e.to_string());
                    break;
                }
            }
        }
        report.next_interval_s = if report.error.is_some() {
            retry.on_failure()
        } else {
            retry.on_success()
        };
        report
    }

    /// Drops entries synced more than `retention` before `now`. Unsynced
    /// entries are always kept.
    pub fn compact(&mut self, retention: Duration, now: DateTime<Utc>) -> Result<usize, StoreError> {
        let cutoff = now - retention;
        let doomed: Vec<u64> = self
            .entries
            .values()
            .filter(|e| e.synced && e.synced_at.is_some_and(|t| t < cutoff))
            .map(|e| e.seq)
            .collect();
        if doomed.is_empty() {
            return Ok(0);
        }
        let mut image = header();
        image.extend(encode(&Record::Watermark { next: self.next_seq }));
        for e in self.entries.values().filter(|e| !doomed.contains(&e.seq)) {
            image.extend(encode(&Record::Append {
                seq: e.seq,
                at: ms(e.appended_at),
                payload: e.payload.as_bytes().to_vec(),
            }));
            if let Some(t) = e.synced_at {
                image.extend(encode(&Record::Synced { seq: e.seq, at: ms(t) }));
            }
        }
        self.storage.replace(&image)?;
        self.len = image.len() as u64;
        for s in &doomed {
            self.entries.remove(s);
        }
        Ok(doomed.len())
    }

    pub fn into_storage(self) -> S {
        self.storage
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub attempted: usize,
    pub acked: Vec<u64>,
    pub error: Option<String>,
    /// Seconds until the next sync attempt.
    pub next_interval_s: u64,
}

/// Sync interval that shrinks on failure so a flaky link is checked more
/// often, and returns to the base on success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryState {
    pub base_interval_s: u64,
    pub min_interval_s: u64,
    /// Divisor applied to the interval after each failure.
    pub shrink: f64,
    pub current_s: u64,
}

impl Default for RetryState {
    fn default() -> Self {
        RetryState {
            base_interval_s: 3600,
            min_interval_s: 60,
            shrink: 2.0,
            current_s: 3600,
        }
    }
}

impl RetryState {
    pub fn on_failure(&mut self) -> u64 {
        let next = (self.current_s as f64 / self.shrink.max(1.0)).floor() as u64;
        self.current_s = next.max(self.min_interval_s);
        self.current_s
    }

    pub fn on_success(&mut self) -> u64 {
        self.current_s = self.base_interval_s;
        self.current_s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AckError {
    #[error("peer unavailable")]
    Unavailable,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Remote end of the sync contract. Delivery of an already-received seq
/// must succeed without storing it twice.
pub trait Acknowledger {
    fn deliver(&mut self, seq: u64, payload: &str) -> Result<(), AckError>;
}

/// In-process peer for tests; can fail after a number of deliveries.
#[derive(Debug, Default, Clone)]
pub struct MemoryPeer {
    pub received: BTreeMap<u64, String>,
    pub deliveries: HashMap<u64, usize>,
    /// Deliveries left before the peer starts failing; `None` never fails.
    pub fail_after: Option<usize>,
}

impl Acknowledger for MemoryPeer {
    fn deliver(&mut self, seq: u64, payload: &str) -> Result<(), AckError> {
        if let Some(n) = self.fail_after.as_mut() {
            if *n == 0 {
                return Err(AckError::Unavailable);
            }
            *n -= 1;
        }
        *self.deliveries.entry(seq).or_default() += 1;
        self.received.entry(seq).or_insert_with(|| payload.to_string());
        Ok(())
    }
}

/// Drops each payload as `<seq>.json` in a directory.
pub struct FileDropPeer {
    pub dir: PathBuf,
}

impl Acknowledger for FileDropPeer {
    fn deliver(&mut self, seq: u64, payload: &str) -> Result<(), AckError> {
        if !self.dir.is_dir() {
            return Err(AckError::Unavailable);
        }
        let path = self.dir.join(format!("{seq:020}.json"));
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{seq:020}.tmp"));
        std::fs::write(&tmp, payload)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
