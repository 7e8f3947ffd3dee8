//! Parsing of CERT-style multi-source log files into a single time-ordered
//! stream of normalized events, joined against a user-attribute directory.
//!
//! Input files are assumed individually sorted by timestamp; the merged stream
//! is produced by a k-way merge over per-file cursors so memory stays constant
//! in stream length. An out-of-order record inside a file aborts the stream.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_CATEGORIES: usize = 6;
pub const CATEGORY_NAMES: [&str; N_CATEGORIES] =
    ["role", "project", "functional_unit", "department", "team", "supervisor"];

pub const DATE_FORMAT: &str = "%m/%d/%Y %H:%M:%S";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: u64, message: String },
    #[error("{path}: header missing required column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: out-of-order timestamp {found} after {previous}")]
    OutOfOrder { path: PathBuf, line: u64, found: String, previous: String },
    #[error("directory file {path}: {message}")]
    Directory { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Logon,
    Device,
    File,
    Http,
    Email,
}

impl Source {
    pub const ALL: [Source; 5] = [Source::Logon, Source::Device, Source::File, Source::Http, Source::Email];

    pub fn name(&self) -> &'static str {
        match self {
            Source::Logon => "logon",
            Source::Device => "device",
            Source::File => "file",
            Source::Http => "http",
            Source::Email => "email",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Logon,
    Logoff,
    Connect,
    Disconnect,
    FileOpen,
    FileWrite,
    FileCopy,
    FileDelete,
    HttpVisit,
    HttpDownload,
    HttpUpload,
    EmailSend,
    EmailView,
}

impl Action {
    pub fn source(&self) -> Source {
        match self {
            Action::Logon | Action::Logoff => Source::Logon,
            Action::Connect | Action::Disconnect => Source::Device,
            Action::FileOpen | Action::FileWrite | Action::FileCopy | Action::FileDelete => Source::File,
            Action::HttpVisit | Action::HttpDownload | Action::HttpUpload => Source::Http,
            Action::EmailSend | Action::EmailView => Source::Email,
        }
    }

    pub fn activity_label(&self) -> &'static str {
        match self {
            Action::Logon => "Logon",
            Action::Logoff => "Logoff",
            Action::Connect => "Connect",
            Action::Disconnect => "Disconnect",
            Action::FileOpen => "File Open",
            Action::FileWrite => "File Write",
            Action::FileCopy => "File Copy",
            Action::FileDelete => "File Delete",
            Action::HttpVisit => "WWW Visit",
            Action::HttpDownload => "WWW Download",
            Action::HttpUpload => "WWW Upload",
            Action::EmailSend => "Send",
            Action::EmailView => "View",
        }
    }

    fn parse(source: Source, label: &str) -> Option<Action> {
        let a = match (source, label) {
            (Source::Logon, "Logon") => Action::Logon,
            (Source::Logon, "Logoff") => Action::Logoff,
            (Source::Device, "Connect") => Action::Connect,
            (Source::Device, "Disconnect") => Action::Disconnect,
            (Source::File, "File Open") => Action::FileOpen,
            (Source::File, "File Write") => Action::FileWrite,
            (Source::File, "File Copy") => Action::FileCopy,
            (Source::File, "File Delete") => Action::FileDelete,
            (Source::Http, "WWW Visit") => Action::HttpVisit,
            (Source::Http, "WWW Download") => Action::HttpDownload,
            (Source::Http, "WWW Upload") => Action::HttpUpload,
            (Source::Email, "Send") => Action::EmailSend,
            (Source::Email, "View") => Action::EmailView,
            _ => return None,
        };
        Some(a)
    }
}

/// Source-specific fields carried alongside the common envelope.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventAttrs {
    pub filename: Option<String>,
    pub to_removable: bool,
    pub from_removable: bool,
    pub decoy: bool,
    pub url: Option<String>,
    pub content_len: usize,
    pub recipients: Vec<String>,
    pub attachments: u32,
    pub file_tree_entries: usize,
}

/// One parsed log line, normalized to the common envelope and already joined
/// against the attribute directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub source: Source,
    pub timestamp: NaiveDateTime,
    pub user_id: String,
    pub pc_id: String,
    pub action: Action,
    pub attrs: EventAttrs,
    /// Resolved categorical ids (role, project, functional_unit, department,
    /// team, supervisor); the UNKNOWN id for users missing from the directory.
    pub attr_ids: [u32; N_CATEGORIES],
}

/// Per-category value registry built from the directory file. Dense ids are
/// assigned by sorted order of distinct values so they do not depend on row
/// order. Users absent from the directory resolve to a reserved UNKNOWN id
/// equal to the category's cardinality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeRegistry {
    /// Sorted distinct values per category.
    pub values: [Vec<String>; N_CATEGORIES],
    /// user_id -> resolved ids.
    pub users: std::collections::HashMap<String, [u32; N_CATEGORIES]>,
}

impl AttributeRegistry {
    pub fn cardinality(&self, category: usize) -> usize {
        self.values[category].len()
    }

    pub fn unknown_ids(&self) -> [u32; N_CATEGORIES] {
        let mut ids = [0u32; N_CATEGORIES];
        for (c, id) in ids.iter_mut().enumerate() {
            *id = self.cardinality(c) as u32;
        }
        ids
    }

    pub fn lookup(&self, user_id: &str) -> Option<[u32; N_CATEGORIES]> {
        self.users.get(user_id).copied()
    }
}

/// Multi-valued "projects" entries are reduced to the first listed project.
pub fn load_directory(path: &Path) -> Result<AttributeRegistry, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Directory { path: path.to_path_buf(), message: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn { path: path.to_path_buf(), column: name.to_string() })
    };
    let user_col = col("user_id")?;
    let cat_cols = [
        col("role")?,
        col("projects")?,
        col("functional_unit")?,
        col("department")?,
        col("team")?,
        col("supervisor")?,
    ];

    let mut rows: Vec<(String, [String; N_CATEGORIES])> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| IngestError::Directory { path: path.to_path_buf(), message: format!("row {}: {}", i + 2, e) })?;
        let get = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let mut vals: [String; N_CATEGORIES] = Default::default();
        for (k, &c) in cat_cols.iter().enumerate() {
            let mut v = get(c);
            if k == 1 {
                // projects may hold a ';'-separated list; take the first
                if let Some(first) = v.split(';').next() {
                    v = first.trim().to_string();
                }
            }
            vals[k] = v;
        }
        rows.push((get(user_col), vals));
    }

    let mut values: [Vec<String>; N_CATEGORIES] = Default::default();
    for c in 0..N_CATEGORIES {
        let mut set: Vec<String> = rows.iter().map(|(_, v)| v[c].clone()).collect();
        set.sort();
        set.dedup();
        values[c] = set;
    }
    let mut users = std::collections::HashMap::new();
    for (user, vals) in rows {
        let mut ids = [0u32; N_CATEGORIES];
        for c in 0..N_CATEGORIES {
            ids[c] = values[c].binary_search(&vals[c]).unwrap() as u32;
        }
        users.insert(user, ids);
    }
    Ok(AttributeRegistry { values, users })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorMode {
    Skip,
    Abort,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub error_mode: ErrorMode,
    /// Filenames known to be decoys (CERT ships these in a side file).
    pub decoy_files: HashSet<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { error_mode: ErrorMode::Skip, decoy_files: HashSet::new() }
    }
}

struct FileCursor {
    source: Source,
    path: PathBuf,
    reader: csv::StringRecordsIntoIter<File>,
    columns: SourceColumns,
    line: u64,
    last_ts: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, Default)]
struct SourceColumns {
    date: usize,
    user: usize,
    pc: usize,
    activity: usize,
    filename: Option<usize>,
    to_removable: Option<usize>,
    from_removable: Option<usize>,
    url: Option<usize>,
    content: Option<usize>,
    to: Option<usize>,
    cc: Option<usize>,
    bcc: Option<usize>,
    attachments: Option<usize>,
    file_tree: Option<usize>,
}

fn required(headers: &csv::StringRecord, path: &Path, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::MissingColumn { path: path.to_path_buf(), column: name.to_string() })
}

fn optional(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn resolve_columns(source: Source, headers: &csv::StringRecord, path: &Path) -> Result<SourceColumns, IngestError> {
    let mut cols = SourceColumns {
        date: required(headers, path, "date")?,
        user: required(headers, path, "user")?,
        pc: required(headers, path, "pc")?,
        activity: required(headers, path, "activity")?,
        ..Default::default()
    };
    match source {
        Source::Logon => {}
        Source::Device => {
            cols.file_tree = optional(headers, "file_tree");
        }
        Source::File => {
            cols.filename = Some(required(headers, path, "filename")?);
            cols.to_removable = Some(required(headers, path, "to_removable_media")?);
            cols.from_removable = Some(required(headers, path, "from_removable_media")?);
            cols.content = optional(headers, "content");
        }
        Source::Http => {
            cols.url = Some(required(headers, path, "url")?);
            cols.content = optional(headers, "content");
        }
        Source::Email => {
            cols.to = Some(required(headers, path, "to")?);
            cols.cc = optional(headers, "cc");
            cols.bcc = optional(headers, "bcc");
            cols.attachments = Some(required(headers, path, "attachments")?);
            cols.content = optional(headers, "content");
        }
    }
    Ok(cols)
}

fn parse_bool(s: &str) -> bool {
    matches!(s.trim(), "True" | "true" | "TRUE" | "1")
}

fn split_recipients(field: &str) -> Vec<String> {
    field
        .split(';')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

fn parse_record(
    source: Source,
    cols: &SourceColumns,
    record: &csv::StringRecord,
    path: &Path,
    line: u64,
    options: &IngestOptions,
) -> Result<(NaiveDateTime, String, String, Action, EventAttrs), IngestError> {
    let malformed = |message: String| IngestError::Malformed { path: path.to_path_buf(), line, message };
    let get = |i: usize| record.get(i).unwrap_or("");
    let ts = NaiveDateTime::parse_from_str(get(cols.date), DATE_FORMAT)
        .map_err(|e| malformed(format!("bad date '{}': {}", get(cols.date), e)))?;
    let user = get(cols.user).to_string();
    if user.is_empty() {
        return Err(malformed("empty user field".into()));
    }
    let pc = get(cols.pc).to_string();
    let activity = get(cols.activity);
    let action = Action::parse(source, activity)
        .ok_or_else(|| malformed(format!("unknown {} activity '{}'", source.name(), activity)))?;

    let mut attrs = EventAttrs::default();
    match source {
        Source::Logon => {}
        Source::Device => {
            if let Some(c) = cols.file_tree {
                attrs.file_tree_entries = get(c).split(';').filter(|s| !s.trim().is_empty()).count();
            }
        }
        Source::File => {
            let filename = get(cols.filename.unwrap()).to_string();
            attrs.decoy = options.decoy_files.contains(&filename);
            attrs.filename = Some(filename);
            attrs.to_removable = parse_bool(get(cols.to_removable.unwrap()));
            attrs.from_removable = parse_bool(get(cols.from_removable.unwrap()));
            if let Some(c) = cols.content {
                attrs.content_len = get(c).len();
            }
        }
        Source::Http => {
            attrs.url = Some(get(cols.url.unwrap()).to_string());
            if let Some(c) = cols.content {
                attrs.content_len = get(c).len();
            }
        }
        Source::Email => {
            let mut rcpts = split_recipients(get(cols.to.unwrap()));
            if let Some(c) = cols.cc {
                rcpts.extend(split_recipients(get(c)));
            }
            if let Some(c) = cols.bcc {
                rcpts.extend(split_recipients(get(c)));
            }
            attrs.recipients = rcpts;
            attrs.attachments = get(cols.attachments.unwrap()).trim().parse().unwrap_or(0);
            if let Some(c) = cols.content {
                attrs.content_len = get(c).len();
            }
        }
    }
    Ok((ts, user, pc, action, attrs))
}

struct HeapEntry {
    record: EventRecord,
    cursor: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.record.timestamp == other.record.timestamp && self.cursor == other.cursor
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for ascending timestamps.
        other
            .record
            .timestamp
            .cmp(&self.record.timestamp)
            .then_with(|| other.cursor.cmp(&self.cursor))
    }
}

/// Merged, timestamp-ordered event stream over any subset of the five sources.
pub struct EventStream {
    cursors: Vec<FileCursor>,
    heap: BinaryHeap<HeapEntry>,
    registry: AttributeRegistry,
    unknown_ids: [u32; N_CATEGORIES],
    options: IngestOptions,
    pub skipped_records: u64,
    pub unknown_users: u64,
    started: bool,
    failed: bool,
}

impl EventStream {
    /// Open the given `(source, path)` files plus the directory file and
    /// return a single merged iterator.
    pub fn open(
        files: &[(Source, PathBuf)],
        directory: &Path,
        options: IngestOptions,
    ) -> Result<EventStream, IngestError> {
        let registry = load_directory(directory)?;
        Self::open_with_registry(files, registry, options)
    }

    pub fn open_with_registry(
        files: &[(Source, PathBuf)],
        registry: AttributeRegistry,
        options: IngestOptions,
    ) -> Result<EventStream, IngestError> {
        let mut cursors = Vec::new();
        for (source, path) in files {
            let file = File::open(path).map_err(|e| IngestError::Io { path: path.clone(), source: e })?;
            let mut reader = csv::Reader::from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| IngestError::Malformed { path: path.clone(), line: 1, message: e.to_string() })?
                .clone();
            let columns = resolve_columns(*source, &headers, path)?;
            cursors.push(FileCursor {
                source: *source,
                path: path.clone(),
                reader: reader.into_records(),
                columns,
                line: 1,
                last_ts: None,
            });
        }
        let unknown_ids = registry.unknown_ids();
        let mut stream = EventStream {
            cursors,
            heap: BinaryHeap::new(),
            registry,
            unknown_ids,
            options,
            skipped_records: 0,
            unknown_users: 0,
            started: false,
            failed: false,
        };
        stream.started = true;
        for i in 0..stream.cursors.len() {
            if let Some(err) = stream.refill(i) {
                return Err(err);
            }
        }
        Ok(stream)
    }

    pub fn registry(&self) -> &AttributeRegistry {
        &self.registry
    }

    /// Advance cursor `i` to its next well-formed record and push it on the heap.
    /// Returns a fatal error, if any.
    fn refill(&mut self, i: usize) -> Option<IngestError> {
        loop {
            let cursor = &mut self.cursors[i];
            let raw = match cursor.reader.next() {
                None => return None,
                Some(Ok(r)) => r,
                Some(Err(e)) => {
                    cursor.line += 1;
                    let err = IngestError::Malformed {
                        path: cursor.path.clone(),
                        line: cursor.line,
                        message: e.to_string(),
                    };
                    match self.options.error_mode {
                        ErrorMode::Skip => {
                            self.skipped_records += 1;
                            continue;
                        }
                        ErrorMode::Abort => return Some(err),
                    }
                }
            };
            cursor.line += 1;
            match parse_record(cursor.source, &cursor.columns, &raw, &cursor.path, cursor.line, &self.options) {
                Ok((ts, user, pc, action, attrs)) => {
                    if let Some(prev) = cursor.last_ts {
                        if ts < prev {
                            return Some(IngestError::OutOfOrder {
                                path: cursor.path.clone(),
                                line: cursor.line,
                                found: ts.format(DATE_FORMAT).to_string(),
                                previous: prev.format(DATE_FORMAT).to_string(),
                            });
                        }
                    }
                    cursor.last_ts = Some(ts);
                    let attr_ids = match self.registry.lookup(&user) {
                        Some(ids) => ids,
                        None => {
                            self.unknown_users += 1;
                            self.unknown_ids
                        }
                    };
                    let record = EventRecord {
                        source: cursor.source,
                        timestamp: ts,
                        user_id: user,
                        pc_id: pc,
                        action,
                        attrs,
                        attr_ids,
                    };
                    self.heap.push(HeapEntry { record, cursor: i });
                    return None;
                }
                Err(err) => match self.options.error_mode {
                    ErrorMode::Skip => {
                        self.skipped_records += 1;
                        continue;
                    }
                    ErrorMode::Abort => return Some(err),
                },
            }
        }
    }
}

impl Iterator for EventStream {
    type Item = Result<EventRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let entry = self.heap.pop()?;
        if let Some(err) = self.refill(entry.cursor) {
            self.failed = true;
            return Some(Err(err));
        }
        Some(Ok(entry.record))
    }
}

pub fn is_weekday(ts: &NaiveDateTime) -> bool {
    !matches!(ts.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Drop records falling on Saturday or Sunday.
pub fn weekday_filter<I>(stream: I) -> impl Iterator<Item = Result<EventRecord, IngestError>>
where
    I: Iterator<Item = Result<EventRecord, IngestError>>,
{
    stream.filter(|item| match item {
        Ok(r) => is_weekday(&r.timestamp),
        Err(_) => true,
    })
}

/// Guess a file's source from its name (logon.csv, device.csv, ...).
pub fn source_from_path(path: &Path) -> Option<Source> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    Source::ALL.into_iter().find(|s| stem.contains(s.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn write_file(dir: &TempDir, name: &str, content: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn directory_csv() -> &'static str {
        "employee_name,user_id,email,role,projects,business_unit,functional_unit,department,team,supervisor\n\
         Ann A,U1,a@x.com,Engineer,P1;P2,BU1,FU1,D1,T1,Boss\n\
         Bob B,U2,b@x.com,Analyst,P2,BU1,FU2,D2,T2,Boss\n"
    }

    #[test]
    fn merges_interleaved_files_in_timestamp_order() {
        let dir = TempDir::new().unwrap();
        let logon = write_file(
            &dir,
            "logon.csv",
            "id,date,user,pc,activity\n\
             a1,01/04/2010 08:00:00,U1,PC1,Logon\n\
             a2,01/04/2010 12:00:00,U1,PC1,Logoff\n",
        );
        let device = write_file(
            &dir,
            "device.csv",
            "id,date,user,pc,file_tree,activity\n\
             b1,01/04/2010 09:00:00,U2,PC2,R:\\,Connect\n\
             b2,01/04/2010 13:00:00,U2,PC2,R:\\,Disconnect\n",
        );
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let stream = EventStream::open(
            &[(Source::Logon, logon), (Source::Device, device)],
            &directory,
            IngestOptions::default(),
        )
        .unwrap();
        let records: Vec<_> = stream.map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 4);
        for pair in records.windows(2) {
            assert!(pair[0].timestamp <= pair[1].timestamp);
        }
        assert_eq!(records[0].action, Action::Logon);
        assert_eq!(records[1].action, Action::Connect);
    }

    #[test]
    fn empty_file_set_is_empty_iterator() {
        let dir = TempDir::new().unwrap();
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let stream = EventStream::open(&[], &directory, IngestOptions::default()).unwrap();
        assert_eq!(stream.count(), 0);
    }

    #[test]
    fn malformed_line_skipped_and_counted() {
        let dir = TempDir::new().unwrap();
        let logon = write_file(
            &dir,
            "logon.csv",
            "id,date,user,pc,activity\n\
             a1,01/04/2010 08:00:00,U1,PC1,Logon\n\
             a2,not-a-date,U1,PC1,Logon\n\
             a3,01/04/2010 12:00:00,U1,PC1,Logoff\n",
        );
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let mut stream =
            EventStream::open(&[(Source::Logon, logon)], &directory, IngestOptions::default()).unwrap();
        let mut n = 0;
        while let Some(item) = stream.next() {
            item.unwrap();
            n += 1;
        }
        assert_eq!(n, 2);
        assert_eq!(stream.skipped_records, 1);
    }

    #[test]
    fn malformed_line_aborts_in_abort_mode() {
        let dir = TempDir::new().unwrap();
        let logon = write_file(
            &dir,
            "logon.csv",
            "id,date,user,pc,activity\n\
             a2,not-a-date,U1,PC1,Logon\n",
        );
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let options = IngestOptions { error_mode: ErrorMode::Abort, ..Default::default() };
        let err = match EventStream::open(&[(Source::Logon, logon)], &directory, options) {
            Err(e) => e,
            Ok(_) => panic!("expected abort"),
        };
        assert!(err.to_string().contains("logon.csv:2"));
    }

    #[test]
    fn out_of_order_within_file_aborts() {
        let dir = TempDir::new().unwrap();
        let logon = write_file(
            &dir,
            "logon.csv",
            "id,date,user,pc,activity\n\
             a1,01/04/2010 12:00:00,U1,PC1,Logon\n\
             a2,01/04/2010 08:00:00,U1,PC1,Logoff\n",
        );
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let stream =
            EventStream::open(&[(Source::Logon, logon)], &directory, IngestOptions::default()).unwrap();
        let results: Vec<_> = stream.collect();
        assert!(results.iter().any(|r| matches!(r, Err(IngestError::OutOfOrder { .. }))));
    }

    #[test]
    fn unknown_user_gets_unknown_ids() {
        let dir = TempDir::new().unwrap();
        let logon = write_file(
            &dir,
            "logon.csv",
            "id,date,user,pc,activity\n\
             a1,01/04/2010 08:00:00,U9,PC1,Logon\n",
        );
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let mut stream =
            EventStream::open(&[(Source::Logon, logon)], &directory, IngestOptions::default()).unwrap();
        let record = stream.next().unwrap().unwrap();
        let unknown = stream.registry().unknown_ids();
        assert_eq!(record.attr_ids, unknown);
        assert_eq!(stream.unknown_users, 1);
    }

    #[test]
    fn directory_ids_are_sorted_dense() {
        let dir = TempDir::new().unwrap();
        let directory = write_file(&dir, "LDAP.csv", directory_csv());
        let registry = load_directory(&directory).unwrap();
        // "Analyst" < "Engineer" so U2 gets role id 0.
        assert_eq!(registry.lookup("U2").unwrap()[0], 0);
        assert_eq!(registry.lookup("U1").unwrap()[0], 1);
        // projects reduces to first entry: U1 -> P1.
        assert_eq!(registry.values[1], vec!["P1".to_string(), "P2".to_string()]);
        assert_eq!(registry.lookup("U1").unwrap()[1], 0);
    }

    #[test]
    fn weekday_filter_drops_weekends() {
        // 01/02/2010 is a Saturday, 01/06/2010 a Wednesday.
        let sat = NaiveDateTime::parse_from_str("01/02/2010 10:00:00", DATE_FORMAT).unwrap();
        let wed = NaiveDateTime::parse_from_str("01/06/2010 10:00:00", DATE_FORMAT).unwrap();
        assert!(!is_weekday(&sat));
        assert!(is_weekday(&wed));
    }

    #[test]
    fn weekday_filter_keeps_five_of_seven() {
        // 7 consecutive days starting Monday 01/04/2010.
        let mut kept = 0;
        for d in 4..11 {
            let ts = NaiveDateTime::parse_from_str(&format!("01/{d:02}/2010 10:00:00"), DATE_FORMAT).unwrap();
            if is_weekday(&ts) {
                kept += 1;
            }
        }
        assert_eq!(kept, 5);
    }
}
