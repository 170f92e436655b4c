//! Append-only journal.
//!
//! One JSON object per line, `\n` terminated. Each line is the compact
//! serialization of an [`EventRecord`] with a trailing `crc32` field holding
//! the CRC-32 of that serialization without the `crc32` field. Every server
//! run writes its own segment `events-<startup ms>.jsonl`; replay reads the
//! segments in startup order.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use tracing::{error, warn};
use uuid::Uuid;

use super::{ClientEvent, EventLogError, EventRecord, EventSource, EventTypeRegistry, Payload};
use crate::clock::Clock;
use crate::session::SessionId;

pub const JOURNAL_PREFIX: &str = "events-";
const JOURNAL_SUFFIX: &str = ".jsonl";

pub fn segment_file_name(startup_ms: i64) -> String {
    format!("{JOURNAL_PREFIX}{startup_ms}{JOURNAL_SUFFIX}")
}

fn segment_startup_ms(name: &str) -> Option<i64> {
    name.strip_prefix(JOURNAL_PREFIX)?
        .strip_suffix(JOURNAL_SUFFIX)?
        .parse()
        .ok()
}

/// Serializes a record into its journal line, newline included.
pub(crate) fn encode_line(record: &EventRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(record).expect("event records always serialize");
    let crc = crc32fast::hash(&line);
    debug_assert_eq!(line.last(), Some(&b'}'));
    line.pop();
    line.extend_from_slice(format!(",\"crc32\":{crc}}}\n").as_bytes());
    line
}

/// Parses one journal line (newline included) and verifies it is exactly the
/// canonical encoding of the record it carries.
pub(crate) fn decode_line(line: &[u8]) -> Result<EventRecord, String> {
    let mut value: serde_json::Value =
        serde_json::from_slice(line).map_err(|e| format!("malformed json: {e}"))?;
    let object = value
        .as_object_mut()
        .ok_or_else(|| "record is not a json object".to_owned())?;
    let stored_crc = object
        .remove("crc32")
        .and_then(|v| v.as_u64())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| "missing or invalid crc32 field".to_owned())?;
    let record: EventRecord =
        serde_json::from_value(value).map_err(|e| format!("invalid record: {e}"))?;
    let canonical = serde_json::to_vec(&record).expect("event records always serialize");
    if crc32fast::hash(&canonical) != stored_crc {
        return Err("checksum mismatch".to_owned());
    }
    if encode_line(&record) != line {
        return Err("record is not in canonical form".to_owned());
    }
    Ok(record)
}

/// Result of reading a journal directory.
#[derive(Debug, Default, Clone)]
pub struct Replay {
    /// Every fully written record, in `server_seq` order.
    pub records: Vec<EventRecord>,
    /// Partially written trailing records that were skipped.
    pub torn_records: usize,
    pub segments: Vec<PathBuf>,
}

impl Replay {
    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.server_seq)
    }
}

/// Reads every journal segment in `data_dir`.
///
/// A damaged final line of a segment is a torn write and is skipped; damage
/// anywhere else is reported as [`EventLogError::CorruptJournal`].
pub fn replay_journal(data_dir: &Path) -> Result<Replay, EventLogError> {
    let mut segments = Vec::new();
    for entry in fs::read_dir(data_dir).map_err(|e| EventLogError::io(data_dir, e))? {
        let entry = entry.map_err(|e| EventLogError::io(data_dir, e))?;
        let name = entry.file_name();
        if let Some(ms) = name.to_str().and_then(segment_startup_ms) {
            segments.push((ms, entry.path()));
        }
    }
    segments.sort();

    let mut replay = Replay::default();
    for (_, path) in segments {
        let bytes = fs::read(&path).map_err(|e| EventLogError::io(&path, e))?;
        replay.torn_records += read_segment(&path, &bytes, &mut replay.records)?;
        replay.segments.push(path);
    }

    for pair in replay.records.windows(2) {
        if pair[1].server_seq <= pair[0].server_seq {
            return Err(EventLogError::CorruptJournal {
                path: data_dir.to_path_buf(),
                line: 0,
                reason: format!(
                    "server_seq {} follows {}",
                    pair[1].server_seq, pair[0].server_seq
                ),
            });
        }
    }
    if replay.torn_records > 0 {
        warn!(torn = replay.torn_records, "skipped torn journal records");
    }
    Ok(replay)
}

fn read_segment(
    path: &Path,
    bytes: &[u8],
    out: &mut Vec<EventRecord>,
) -> Result<usize, EventLogError> {
    let mut pieces: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    let terminated = bytes.last() == Some(&b'\n');
    if terminated || bytes.is_empty() {
        // split leaves an empty piece after the final newline
        pieces.pop();
    }
    let count = pieces.len();
    let mut line = Vec::new();
    for (i, piece) in pieces.into_iter().enumerate() {
        let is_final = i + 1 == count;
        if is_final && !terminated {
            return Ok(1);
        }
        line.clear();
        line.extend_from_slice(piece);
        line.push(b'\n');
        match decode_line(&line) {
            Ok(record) => out.push(record),
            Err(_) if is_final => return Ok(1),
            Err(reason) => {
                return Err(EventLogError::CorruptJournal {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason,
                })
            }
        }
    }
    Ok(0)
}

struct Writer {
    path: PathBuf,
    file: File,
    len: u64,
    next_seq: u64,
    last_t_server_ms: i64,
    records: Vec<EventRecord>,
}

struct Draft {
    type_name: String,
    source: EventSource,
    t_client_ms: Option<i64>,
    payload: Payload,
}

/// The event journal of one server run.
///
/// Appends are serialized by a single lock: sequence assignment, the write
/// and the `fsync` happen together, so journal order is `server_seq` order.
pub struct EventLog {
    registry: EventTypeRegistry,
    clock: Arc<dyn Clock>,
    writer: Mutex<Writer>,
}

impl EventLog {
    /// Replays what is already in `data_dir` and starts a fresh segment.
    pub fn open(
        data_dir: &Path,
        registry: EventTypeRegistry,
        clock: Arc<dyn Clock>,
    ) -> Result<(Self, Replay), EventLogError> {
        fs::create_dir_all(data_dir).map_err(|e| EventLogError::io(data_dir, e))?;
        let replay = replay_journal(data_dir)?;

        let mut startup_ms = clock.now_ms();
        let (path, file) = loop {
            let path = data_dir.join(segment_file_name(startup_ms));
            match OpenOptions::new().append(true).create_new(true).open(&path) {
                Ok(file) => break (path, file),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => startup_ms += 1,
                Err(e) => return Err(EventLogError::io(&path, e)),
            }
        };
        // make the new directory entry durable
        File::open(data_dir)
            .and_then(|d| d.sync_all())
            .map_err(|e| EventLogError::io(data_dir, e))?;

        let writer = Writer {
            path,
            file,
            len: 0,
            next_seq: replay.last_seq() + 1,
            last_t_server_ms: i64::MIN,
            records: replay.records.clone(),
        };
        Ok((
            Self {
                registry,
                clock,
                writer: Mutex::new(writer),
            },
            replay,
        ))
    }

    pub fn registry(&self) -> &EventTypeRegistry {
        &self.registry
    }

    pub fn segment_path(&self) -> PathBuf {
        self.lock().path.clone()
    }

    /// Sequence number of the most recent record, 0 when the journal is empty.
    pub fn head_seq(&self) -> u64 {
        self.lock().next_seq - 1
    }

    /// All records, including those replayed at startup, in journal order.
    pub fn snapshot(&self) -> Vec<EventRecord> {
        self.lock().records.clone()
    }

    /// Journals an event observed by the server.
    pub fn emit_server(
        &self,
        session_id: &SessionId,
        type_name: &str,
        payload: Payload,
    ) -> Result<EventRecord, EventLogError> {
        if !self.registry.contains(type_name) {
            error!(type_name, "server emitted an unregistered event type");
            return Err(EventLogError::UnregisteredEventType {
                index: 0,
                type_name: type_name.to_owned(),
            });
        }
        let mut records = self.append(
            session_id,
            vec![Draft {
                type_name: type_name.to_owned(),
                source: EventSource::Server,
                t_client_ms: None,
                payload,
            }],
        )?;
        Ok(records.remove(0))
    }

    /// Validates and journals a batch of client events atomically.
    pub fn ingest_client(
        &self,
        session_id: &SessionId,
        batch: Vec<ClientEvent>,
    ) -> Result<Vec<EventRecord>, EventLogError> {
        self.registry.validate_batch(&batch)?;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let drafts = batch
            .into_iter()
            .map(|e| Draft {
                type_name: e.type_name,
                source: EventSource::Client,
                t_client_ms: Some(e.t_client_ms),
                payload: e.payload,
            })
            .collect();
        self.append(session_id, drafts)
    }

    fn lock(&self) -> MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(PoisonError::into_inner)
    }

    fn append(
        &self,
        session_id: &SessionId,
        drafts: Vec<Draft>,
    ) -> Result<Vec<EventRecord>, EventLogError> {
        let mut w = self.lock();
        let t_server_ms = self.clock.now_ms().max(w.last_t_server_ms);
        let records: Vec<EventRecord> = drafts
            .into_iter()
            .zip(w.next_seq..)
            .map(|(d, server_seq)| EventRecord {
                event_id: Uuid::new_v4().simple().to_string(),
                session_id: session_id.clone(),
                type_name: d.type_name,
                source: d.source,
                t_client_ms: d.t_client_ms,
                t_server_ms,
                server_seq,
                payload: d.payload,
            })
            .collect();

        let mut buf = Vec::new();
        for record in &records {
            buf.extend_from_slice(&encode_line(record));
        }
        let written = w.file.write_all(&buf).and_then(|_| w.file.sync_data());
        if let Err(e) = written {
            let len = w.len;
            if let Err(trunc) = w.file.set_len(len) {
                error!(error = %trunc, "could not roll back partial journal append");
            }
            return Err(EventLogError::io(&w.path, e));
        }

        w.len += buf.len() as u64;
        w.next_seq += records.len() as u64;
        w.last_t_server_ms = t_server_ms;
        w.records.extend(records.iter().cloned());
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::eventlog::types;
    use crate::payload;

    fn sid(s: &str) -> SessionId {
        SessionId::from(s.to_owned())
    }

    fn open(dir: &Path, clock: Arc<ManualClock>) -> (EventLog, Replay) {
        EventLog::open(dir, EventTypeRegistry::with_builtins(), clock).unwrap()
    }

    #[test]
    fn line_layout_is_exact() {
        let record = EventRecord {
            event_id: "e1".into(),
            session_id: sid("s1"),
            type_name: "message_sent".into(),
            source: EventSource::Server,
            t_client_ms: None,
            t_server_ms: 1000,
            server_seq: 7,
            payload: payload! { "text" => "hi", "seq" => 1u64 },
        };
        let line = String::from_utf8(encode_line(&record)).unwrap();
        let body = r#"{"event_id":"e1","session_id":"s1","type_name":"message_sent","source":"server","t_server_ms":1000,"server_seq":7,"payload":{"seq":1,"text":"hi"}"#;
        let crc = crc32fast::hash(format!("{body}}}").as_bytes());
        assert_eq!(line, format!("{body},\"crc32\":{crc}}}\n"));
        assert_eq!(decode_line(line.as_bytes()).unwrap(), record);
    }

    #[test]
    fn client_records_keep_both_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(5_000));
        let (log, _) = open(dir.path(), clock);
        let records = log
            .ingest_client(
                &sid("s"),
                vec![ClientEvent {
                    type_name: types::DISPLAY_START.into(),
                    t_client_ms: 4_990,
                    payload: payload! { "message_id" => "m1" },
                }],
            )
            .unwrap();
        assert_eq!(records[0].t_client_ms, Some(4_990));
        assert_eq!(records[0].t_server_ms, 5_000);
        let server = log
            .emit_server(&sid("s"), types::SESSION_END, payload! {})
            .unwrap();
        assert_eq!(server.t_client_ms, None);
        assert_eq!(server.source, EventSource::Server);
    }

    #[test]
    fn seq_is_gapless_and_time_never_goes_back() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(10_000));
        let (log, _) = open(dir.path(), clock.clone());
        let a = log
            .emit_server(&sid("a"), types::SESSION_START, payload! {})
            .unwrap();
        clock.set(9_000);
        let b = log
            .emit_server(&sid("b"), types::SESSION_START, payload! {})
            .unwrap();
        assert_eq!((a.server_seq, b.server_seq), (1, 2));
        assert!(b.t_server_ms >= a.t_server_ms);
        assert_eq!(log.head_seq(), 2);
    }

    #[test]
    fn rejected_batch_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = open(dir.path(), Arc::new(ManualClock::new(1)));
        log.emit_server(&sid("a"), types::SESSION_START, payload! {})
            .unwrap();
        let before = fs::read(log.segment_path()).unwrap();
        let err = log
            .ingest_client(
                &sid("a"),
                vec![
                    ClientEvent {
                        type_name: types::BUBBLE_HOVER_START.into(),
                        t_client_ms: 1,
                        payload: payload! { "message_id" => "m" },
                    },
                    ClientEvent {
                        type_name: "typo_evt".into(),
                        t_client_ms: 2,
                        payload: payload! {},
                    },
                ],
            )
            .unwrap_err();
        assert_eq!(err.code(), "UnregisteredEventType");
        assert_eq!(fs::read(log.segment_path()).unwrap(), before);
        assert_eq!(log.head_seq(), 1);
    }

    #[test]
    fn unregistered_server_emission_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = open(dir.path(), Arc::new(ManualClock::new(1)));
        assert!(log.emit_server(&sid("a"), "nope", payload! {}).is_err());
    }

    #[test]
    fn reopen_continues_sequence_in_a_new_segment() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(100));
        {
            let (log, _) = open(dir.path(), clock.clone());
            for _ in 0..3 {
                log.emit_server(&sid("a"), types::MESSAGE_SENT, payload! {})
                    .unwrap();
            }
        }
        // same startup millisecond: the segment name must not collide
        let (log, replay) = open(dir.path(), clock);
        assert_eq!(replay.records.len(), 3);
        let r = log
            .emit_server(&sid("a"), types::SESSION_END, payload! {})
            .unwrap();
        assert_eq!(r.server_seq, 4);
        let replay = replay_journal(dir.path()).unwrap();
        assert_eq!(replay.segments.len(), 2);
        assert_eq!(
            replay
                .records
                .iter()
                .map(|r| r.server_seq)
                .collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
    }

    #[test]
    fn empty_dir_replays_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let replay = replay_journal(dir.path()).unwrap();
        assert!(replay.records.is_empty());
        assert_eq!(replay.torn_records, 0);
    }

    #[test]
    fn missing_dir_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = replay_journal(&dir.path().join("absent")).unwrap_err();
        assert_eq!(err.code(), "IoError");
    }

    #[test]
    fn interior_damage_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let (log, _) = open(dir.path(), Arc::new(ManualClock::new(1)));
            for _ in 0..3 {
                log.emit_server(&sid("a"), types::MESSAGE_SENT, payload! { "text" => "abc" })
                    .unwrap();
            }
            log.segment_path()
        };
        let text = fs::read_to_string(&path).unwrap();
        let damaged = text.replacen("abc", "abd", 1);
        fs::write(&path, damaged).unwrap();
        let err = replay_journal(dir.path()).unwrap_err();
        assert!(
            matches!(err, EventLogError::CorruptJournal { line: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn damaged_final_line_is_torn() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let (log, _) = open(dir.path(), Arc::new(ManualClock::new(1)));
            for _ in 0..3 {
                log.emit_server(&sid("a"), types::MESSAGE_SENT, payload! { "text" => "abc" })
                    .unwrap();
            }
            log.segment_path()
        };
        let text = fs::read_to_string(&path).unwrap();
        let idx = text.rfind("abc").unwrap();
        let mut damaged = text.clone();
        damaged.replace_range(idx..idx + 3, "xyz");
        fs::write(&path, damaged).unwrap();
        let replay = replay_journal(dir.path()).unwrap();
        assert_eq!(replay.records.len(), 2);
        assert_eq!(replay.torn_records, 1);
    }
}
