//! Append-only behavior event log.
//!
//! Events live in a single append-only file of length-prefixed records plus an
//! in-memory index of per-name positions, rebuilt by a full scan on open.
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! u32  record length (bytes that follow this field)
//! u64  event_id
//! i64  timestamp_ms
//! u16  name length
//! [u8] name (UTF-8)
//! [u8] payload (remaining bytes of the record)
//! ```
//!
//! A truncated trailing record is dropped (and the file truncated) on open.
//! Anything else that fails to parse is reported as corruption.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use crate::payload;

const RECORD_FIXED_LEN: usize = 8 + 8 + 2;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("timestamp {got} is older than the last appended timestamp {last}")]
    OutOfOrderTimestamp { last: i64, got: i64 },
    #[error("event name must be non-empty")]
    EmptyEventName,
    #[error("event name exceeds {} bytes", u16::MAX)]
    NameTooLong,
    #[error(transparent)]
    MalformedPayload(#[from] payload::PayloadError),
    #[error("invalid time window ({start_ms}, {end_ms}]")]
    InvalidWindow { start_ms: i64, end_ms: i64 },
    #[error("corrupt log record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

/// One logged user interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorEvent {
    pub event_id: u64,
    pub event_name: Arc<str>,
    pub timestamp_ms: i64,
    pub payload: Vec<u8>,
}

impl BehaviorEvent {
    /// Position of the event in the log's total order.
    pub fn position(&self) -> (i64, u64) {
        (self.timestamp_ms, self.event_id)
    }
}

/// Half-open time window `(start_ms, end_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    start_ms: i64,
    end_ms: i64,
}

impl TimeWindow {
    pub fn new(start_ms: i64, end_ms: i64) -> Result<Self, LogError> {
        if start_ms >= end_ms {
            return Err(LogError::InvalidWindow { start_ms, end_ms });
        }
        Ok(Self { start_ms, end_ms })
    }

    /// The window of length `range_s` seconds ending at `end_ms`.
    pub fn trailing(end_ms: i64, range_s: u64) -> Result<Self, LogError> {
        let len = i64::try_from(range_s.saturating_mul(1000)).unwrap_or(i64::MAX);
        Self::new(end_ms.saturating_sub(len), end_ms)
    }

    pub fn start_ms(&self) -> i64 {
        self.start_ms
    }

    pub fn end_ms(&self) -> i64 {
        self.end_ms
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts > self.start_ms && ts <= self.end_ms
    }
}

/// Read access shared by the writer handle and reader handles.
pub trait EventQuery {
    /// Events named `event_name` with timestamp in `window`, ascending by
    /// `(timestamp_ms, event_id)`.
    fn query(&self, event_name: &str, window: TimeWindow) -> Result<Vec<BehaviorEvent>, LogError>;

    /// Events named `event_name` strictly after position
    /// `(after_ts_ms, after_event_id)` with timestamp at most `end_ms`.
    fn query_since(
        &self,
        event_name: &str,
        after_ts_ms: i64,
        after_event_id: u64,
        end_ms: i64,
    ) -> Result<Vec<BehaviorEvent>, LogError>;
}

#[derive(Debug, Default)]
struct Index {
    events: Vec<BehaviorEvent>,
    by_name: HashMap<Arc<str>, Vec<usize>>,
}

impl Index {
    fn push(&mut self, event: BehaviorEvent) {
        let slot = self.events.len();
        match self.by_name.get_mut(&event.event_name) {
            Some(v) => v.push(slot),
            None => {
                self.by_name.insert(event.event_name.clone(), vec![slot]);
            }
        }
        self.events.push(event);
    }

    fn intern(&self, name: &str) -> Arc<str> {
        match self.by_name.get_key_value(name) {
            Some((k, _)) => k.clone(),
            None => Arc::from(name),
        }
    }

    fn last_timestamp(&self) -> Option<i64> {
        self.events.last().map(|e| e.timestamp_ms)
    }

    fn next_id(&self) -> u64 {
        self.events.last().map_or(1, |e| e.event_id + 1)
    }

    /// Events of `name` with position in `(after, (end_ms, MAX)]`.
    fn range_after(&self, name: &str, after: (i64, u64), end_ms: i64) -> Vec<BehaviorEvent> {
        let Some(slots) = self.by_name.get(name) else {
            return Vec::new();
        };
        let first = slots.partition_point(|&i| self.events[i].position() <= after);
        slots[first..]
            .iter()
            .map(|&i| &self.events[i])
            .take_while(|e| e.timestamp_ms <= end_ms)
            .cloned()
            .collect()
    }
}

/// Cloneable read-only handle onto a log.
#[derive(Debug, Clone)]
pub struct LogReader {
    index: Arc<RwLock<Index>>,
}

impl EventQuery for LogReader {
    fn query(&self, event_name: &str, window: TimeWindow) -> Result<Vec<BehaviorEvent>, LogError> {
        let index = self.index.read().expect("log index lock poisoned");
        Ok(index.range_after(event_name, (window.start_ms, u64::MAX), window.end_ms))
    }

    fn query_since(
        &self,
        event_name: &str,
        after_ts_ms: i64,
        after_event_id: u64,
        end_ms: i64,
    ) -> Result<Vec<BehaviorEvent>, LogError> {
        let index = self.index.read().expect("log index lock poisoned");
        Ok(index.range_after(event_name, (after_ts_ms, after_event_id), end_ms))
    }
}

impl LogReader {
    pub fn len(&self) -> usize {
        self.index
            .read()
            .expect("log index lock poisoned")
            .events
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct event names, sorted.
    pub fn event_names(&self) -> Vec<String> {
        let index = self.index.read().expect("log index lock poisoned");
        let mut names: Vec<String> = index.by_name.keys().map(|k| k.to_string()).collect();
        names.sort();
        names
    }

    /// Timestamps of the first and last events.
    pub fn time_bounds(&self) -> Option<(i64, i64)> {
        let index = self.index.read().expect("log index lock poisoned");
        Some((
            index.events.first()?.timestamp_ms,
            index.events.last()?.timestamp_ms,
        ))
    }

    /// Up to `limit` most recent events of one name.
    pub fn sample(&self, event_name: &str, limit: usize) -> Vec<BehaviorEvent> {
        let index = self.index.read().expect("log index lock poisoned");
        let Some(slots) = index.by_name.get(event_name) else {
            return Vec::new();
        };
        let from = slots.len().saturating_sub(limit);
        slots[from..]
            .iter()
            .map(|&i| index.events[i].clone())
            .collect()
    }

    /// Visits every event in append order.
    pub fn for_each(&self, f: impl FnMut(&BehaviorEvent)) {
        let index = self.index.read().expect("log index lock poisoned");
        index.events.iter().for_each(f);
    }
}

/// The writable log handle. Single writer; hand out [`LogReader`]s for
/// concurrent reads.
#[derive(Debug)]
pub struct EventLog {
    file: Option<File>,
    validate_payloads: bool,
    reader: LogReader,
}

impl EventLog {
    /// A log that is never persisted.
    pub fn in_memory() -> Self {
        Self {
            file: None,
            validate_payloads: true,
            reader: LogReader {
                index: Arc::default(),
            },
        }
    }

    /// Opens or creates the log file at `path`, rebuilding the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (index, valid_len) = scan(&bytes)?;
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64)?;
            file.sync_all()?;
        }
        Ok(Self {
            file: Some(file),
            validate_payloads: true,
            reader: LogReader {
                index: Arc::new(RwLock::new(index)),
            },
        })
    }

    /// Toggles payload validation on append (enabled by default).
    pub fn set_validate_payloads(&mut self, on: bool) {
        self.validate_payloads = on;
    }

    pub fn reader(&self) -> LogReader {
        self.reader.clone()
    }

    pub fn append(
        &mut self,
        event_name: &str,
        timestamp_ms: i64,
        payload: &[u8],
    ) -> Result<u64, LogError> {
        if event_name.is_empty() {
            return Err(LogError::EmptyEventName);
        }
        if event_name.len() > u16::MAX as usize {
            return Err(LogError::NameTooLong);
        }
        if self.validate_payloads {
            payload::decode(payload)?;
        }
        let (event_id, name) = {
            let index = self.reader.index.read().expect("log index lock poisoned");
            if let Some(last) = index.last_timestamp() {
                if timestamp_ms < last {
                    return Err(LogError::OutOfOrderTimestamp {
                        last,
                        got: timestamp_ms,
                    });
                }
            }
            (index.next_id(), index.intern(event_name))
        };
        let event = BehaviorEvent {
            event_id,
            event_name: name,
            timestamp_ms,
            payload: payload.to_vec(),
        };
        if let Some(file) = self.file.as_mut() {
            file.write_all(&encode_record(&event))?;
        }
        self.reader
            .index
            .write()
            .expect("log index lock poisoned")
            .push(event);
        Ok(event_id)
    }

    /// Flushes appended records to stable storage.
    pub fn sync(&mut self) -> Result<(), LogError> {
        if let Some(file) = self.file.as_mut() {
            file.sync_all()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.reader.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reader.is_empty()
    }
}

impl EventQuery for EventLog {
    fn query(&self, event_name: &str, window: TimeWindow) -> Result<Vec<BehaviorEvent>, LogError> {
        self.reader.query(event_name, window)
    }

    fn query_since(
        &self,
        event_name: &str,
        after_ts_ms: i64,
        after_event_id: u64,
        end_ms: i64,
    ) -> Result<Vec<BehaviorEvent>, LogError> {
        self.reader
            .query_since(event_name, after_ts_ms, after_event_id, end_ms)
    }
}

fn encode_record(e: &BehaviorEvent) -> Vec<u8> {
    let body_len = RECORD_FIXED_LEN + e.event_name.len() + e.payload.len();
    let mut buf = Vec::with_capacity(4 + body_len);
    buf.extend_from_slice(&(body_len as u32).to_le_bytes());
    buf.extend_from_slice(&e.event_id.to_le_bytes());
    buf.extend_from_slice(&e.timestamp_ms.to_le_bytes());
    buf.extend_from_slice(&(e.event_name.len() as u16).to_le_bytes());
    buf.extend_from_slice(e.event_name.as_bytes());
    buf.extend_from_slice(&e.payload);
    buf
}

/// Parses all complete records; returns the index and the byte length of the
/// valid prefix.
fn scan(bytes: &[u8]) -> Result<(Index, usize), LogError> {
    let mut index = Index::default();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            break;
        }
        let body_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() < 4 + body_len {
            break;
        }
        let corrupt = |reason: &str| LogError::Corrupt {
            offset: pos as u64,
            reason: reason.to_string(),
        };
        let body = &rest[4..4 + body_len];
        if body.len() < RECORD_FIXED_LEN {
            return Err(corrupt("record shorter than fixed header"));
        }
        let event_id = u64::from_le_bytes(body[..8].try_into().unwrap());
        let timestamp_ms = i64::from_le_bytes(body[8..16].try_into().unwrap());
        let name_len = u16::from_le_bytes(body[16..18].try_into().unwrap()) as usize;
        if name_len == 0 || RECORD_FIXED_LEN + name_len > body.len() {
            return Err(corrupt("bad name length"));
        }
        let name = std::str::from_utf8(&body[18..18 + name_len])
            .map_err(|_| corrupt("event name is not UTF-8"))?;
        if event_id != index.next_id() {
            return Err(corrupt("non-sequential event id"));
        }
        if index
            .last_timestamp()
            .is_some_and(|last| timestamp_ms < last)
        {
            return Err(corrupt("timestamp regression"));
        }
        let event_name = index.intern(name);
        index.push(BehaviorEvent {
            event_id,
            event_name,
            timestamp_ms,
            payload: body[18 + name_len..].to_vec(),
        });
        pos += 4 + body_len;
    }
    Ok((index, pos))
}
