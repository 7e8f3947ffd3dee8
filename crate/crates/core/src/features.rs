//! Aggregation of the event stream into per-user per-day feature vectors:
//! counts of qualified activities per intra-day time window, plus six
//! categorical attribute ids.
//!
//! The activity taxonomy is data-driven config. The shipped default defines
//! 4 six-hour windows x 102 descriptors = 408 count features. "Common vs
//! uncommon" qualifiers resolve against causal per-user frequency tables: an
//! entity is common for a user once seen at least `common_k` times before.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{NaiveDate, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{Action, EventRecord, Source, CATEGORY_NAMES, N_CATEGORIES};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema has no time windows")]
    NoWindows,
    #[error("time windows must be ordered, non-overlapping and cover the day: {0}")]
    BadWindows(String),
    #[error("duplicate descriptor '{0}'")]
    DuplicateDescriptor(String),
    #[error("schema has no descriptors")]
    NoDescriptors,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Half-open intra-day interval `[start_minute, end_minute)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_minute: u32,
    pub end_minute: u32,
}

impl TimeWindow {
    pub fn label(&self) -> String {
        format!(
            "{:02}:{:02}\u{2013}{:02}:{:02}",
            self.start_minute / 60,
            self.start_minute % 60,
            self.end_minute / 60,
            self.end_minute % 60
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonnessQual {
    #[default]
    Any,
    /// Seen >= common_k times before this event.
    Common,
    /// Not common (includes never seen).
    Uncommon,
    /// Never seen before this event.
    New,
    /// Seen before, but fewer than common_k times.
    Seen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovableQual {
    #[default]
    Any,
    None,
    To,
    From,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagQual {
    #[default]
    Any,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeQual {
    #[default]
    Any,
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipientsQual {
    #[default]
    Any,
    Single,
    Multiple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeQual {
    #[default]
    Any,
    Shallow,
    Deep,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// One countable activity: a conjunction of source, action and qualifier flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub name: String,
    pub source: Source,
    pub action: Action,
    #[serde(default, skip_serializing_if = "is_default")]
    pub removable: RemovableQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub decoy: FlagQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub attachments: FlagQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub commonness: CommonnessQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub size: SizeQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub recipients: RecipientsQual,
    #[serde(default, skip_serializing_if = "is_default")]
    pub tree: TreeQual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    /// Distinct known values; the reserved UNKNOWN id equals this cardinality,
    /// so heads and embeddings size themselves to cardinality + 1.
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// An entity is common for a user once seen at least this many times before.
    pub common_k: u32,
    /// Http/email content length at or above which an event counts as "large".
    pub large_content_len: usize,
    /// Device file_tree entry count at or above which a tree counts as "deep".
    pub deep_tree_entries: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { common_k: 5, large_content_len: 300, deep_tree_entries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub time_windows: Vec<TimeWindow>,
    pub descriptors: Vec<Descriptor>,
    pub categorical_specs: Vec<CategoricalSpec>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl FeatureSchema {
    pub fn count_dim(&self) -> usize {
        self.time_windows.len() * self.descriptors.len()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.time_windows.is_empty() {
            return Err(SchemaError::NoWindows);
        }
        if self.descriptors.is_empty() {
            return Err(SchemaError::NoDescriptors);
        }
        let mut cursor = 0u32;
        for w in &self.time_windows {
            if w.start_minute != cursor || w.end_minute <= w.start_minute {
                return Err(SchemaError::BadWindows(format!(
                    "window {}..{} (expected start {})",
                    w.start_minute, w.end_minute, cursor
                )));
            }
            cursor = w.end_minute;
        }
        if cursor != 24 * 60 {
            return Err(SchemaError::BadWindows(format!("windows end at minute {cursor}, not 1440")));
        }
        let mut names: Vec<&str> = self.descriptors.iter().map(|d| d.name.as_str()).collect();
        names.sort();
        for pair in names.windows(2) {
            if pair[0] == pair[1] {
                return Err(SchemaError::DuplicateDescriptor(pair[0].to_string()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureSchema, SchemaError> {
        let text = std::fs::read_to_string(path)?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Stable digest of the schema contents, recorded in run manifests and
    /// checkpoints.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn window_of_minute(&self, minute: u32) -> Option<usize> {
        self.time_windows.iter().position(|w| minute >= w.start_minute && minute < w.end_minute)
    }

    pub fn index_of(&self, window: usize, descriptor: usize) -> usize {
        window * self.descriptors.len() + descriptor
    }

    pub fn decode_index(&self, index: usize) -> Option<(usize, usize)> {
        if index >= self.count_dim() {
            return None;
        }
        Some((index / self.descriptors.len(), index % self.descriptors.len()))
    }

    /// Human label for a count-feature index, e.g.
    /// "12:00–18:00 | uncommon non-decoy file copy from removable media".
    pub fn label_of(&self, index: usize) -> Option<String> {
        let (w, d) = self.decode_index(index)?;
        Some(format!("{} | {}", self.time_windows[w].label(), self.descriptors[d].name))
    }

    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        let (win, name) = label.split_once(" | ")?;
        let w = self.time_windows.iter().position(|t| t.label() == win)?;
        let d = self.descriptors.iter().position(|t| t.name == name)?;
        Some(self.index_of(w, d))
    }

    /// The full enterprise configuration: 4 six-hour windows x 102 descriptors
    /// spanning the five sources, with the Table 1 categorical cardinalities.
    pub fn enterprise_default() -> FeatureSchema {
        FeatureSchema {
            time_windows: six_hour_windows(),
            descriptors: enterprise_descriptors(),
            categorical_specs: vec![
                CategoricalSpec { name: "role".into(), cardinality: 46 },
                CategoricalSpec { name: "project".into(), cardinality: 366 },
                CategoricalSpec { name: "functional_unit".into(), cardinality: 11 },
                CategoricalSpec { name: "department".into(), cardinality: 23 },
                CategoricalSpec { name: "team".into(), cardinality: 90 },
                CategoricalSpec { name: "supervisor".into(), cardinality: 246 },
            ],
            thresholds: Thresholds::default(),
        }
    }

    /// Small history-free taxonomy used by the synthetic generator: no
    /// commonness qualifiers, so classification is stateless and raw-log
    /// round trips are exact.
    pub fn synth_default(categorical_cardinalities: &[usize; N_CATEGORIES]) -> FeatureSchema {
        FeatureSchema {
            time_windows: six_hour_windows(),
            descriptors: synth_descriptors(),
            categorical_specs: CATEGORY_NAMES
                .iter()
                .zip(categorical_cardinalities)
                .map(|(name, &cardinality)| CategoricalSpec { name: (*name).into(), cardinality })
                .collect(),
            thresholds: Thresholds::default(),
        }
    }
}

fn six_hour_windows() -> Vec<TimeWindow> {
    (0..4).map(|i| TimeWindow { start_minute: i * 360, end_minute: (i + 1) * 360 }).collect()
}

fn enterprise_descriptors() -> Vec<Descriptor> {
    let mut out = Vec::new();
    let base = |name: String, source: Source, action: Action| Descriptor {
        name,
        source,
        action,
        removable: RemovableQual::Any,
        decoy: FlagQual::Any,
        attachments: FlagQual::Any,
        commonness: CommonnessQual::Any,
        size: SizeQual::Any,
        recipients: RecipientsQual::Any,
        tree: TreeQual::Any,
    };

    // Logon: 2 actions x {new, seen, common} pc = 6
    for action in [Action::Logon, Action::Logoff] {
        for (comm, tag) in [
            (CommonnessQual::New, "new"),
            (CommonnessQual::Seen, "infrequent"),
            (CommonnessQual::Common, "common"),
        ] {
            let verb = if action == Action::Logon { "logon to" } else { "logoff from" };
            let mut d = base(format!("{verb} {tag} pc"), Source::Logon, action);
            d.commonness = comm;
            out.push(d);
        }
    }

    // Device: 2 actions x {common, uncommon} pc x {shallow, deep} tree = 8
    for action in [Action::Connect, Action::Disconnect] {
        for (comm, ctag) in [(CommonnessQual::Common, "common"), (CommonnessQual::Uncommon, "uncommon")] {
            for (tree, ttag) in [(TreeQual::Shallow, "shallow"), (TreeQual::Deep, "deep")] {
                let verb = if action == Action::Connect { "device connect" } else { "device disconnect" };
                let mut d = base(format!("{verb} at {ctag} pc, {ttag} file tree"), Source::Device, action);
                d.commonness = comm;
                d.tree = tree;
                out.push(d);
            }
        }
    }

    // File: 4 actions x 4 removable x 2 decoy x 2 commonness = 64
    for (action, averb) in [
        (Action::FileOpen, "file open"),
        (Action::FileWrite, "file write"),
        (Action::FileCopy, "file copy"),
        (Action::FileDelete, "file delete"),
    ] {
        for (removable, rtag) in [
            (RemovableQual::None, "on local disk"),
            (RemovableQual::To, "to removable media"),
            (RemovableQual::From, "from removable media"),
            (RemovableQual::Both, "between removable media"),
        ] {
            for (decoy, dtag) in [(FlagQual::No, "non-decoy"), (FlagQual::Yes, "decoy")] {
                for (comm, ctag) in [(CommonnessQual::Common, "common"), (CommonnessQual::Uncommon, "uncommon")] {
                    let mut d = base(format!("{ctag} {dtag} {averb} {rtag}"), Source::File, action);
                    d.removable = removable;
                    d.decoy = decoy;
                    d.commonness = comm;
                    out.push(d);
                }
            }
        }
    }

    // Http: 3 actions x {common, uncommon} domain x {small, large} = 12
    for (action, averb) in [
        (Action::HttpVisit, "www visit"),
        (Action::HttpDownload, "www download"),
        (Action::HttpUpload, "www upload"),
    ] {
        for (comm, ctag) in [(CommonnessQual::Common, "common"), (CommonnessQual::Uncommon, "uncommon")] {
            for (size, stag) in [(SizeQual::Small, "small"), (SizeQual::Large, "large")] {
                let mut d = base(format!("{stag} {averb} at {ctag} domain"), Source::Http, action);
                d.commonness = comm;
                d.size = size;
                out.push(d);
            }
        }
    }

    // Email send: {with, without} attachments x {common, uncommon} recipients
    // x {single, multiple} recipients = 8; view: 4. Total 12.
    for (attach, atag) in [(FlagQual::Yes, "with attachments"), (FlagQual::No, "without attachments")] {
        for (comm, ctag) in [(CommonnessQual::Common, "common"), (CommonnessQual::Uncommon, "uncommon")] {
            for (rcpt, rtag) in [(RecipientsQual::Single, "a single"), (RecipientsQual::Multiple, "multiple")] {
                let mut d = base(
                    format!("email sent {atag} to {rtag} {ctag} recipient(s)"),
                    Source::Email,
                    Action::EmailSend,
                );
                d.attachments = attach;
                d.commonness = comm;
                d.recipients = rcpt;
                out.push(d);
            }
            let mut d = base(
                format!("email viewed {atag} from {ctag} correspondent(s)"),
                Source::Email,
                Action::EmailView,
            );
            d.attachments = attach;
            d.commonness = comm;
            out.push(d);
        }
    }

    debug_assert_eq!(out.len(), 102);
    out
}

fn synth_descriptors() -> Vec<Descriptor> {
    let mut out = Vec::new();
    let base = |name: String, source: Source, action: Action| Descriptor {
        name,
        source,
        action,
        removable: RemovableQual::Any,
        decoy: FlagQual::Any,
        attachments: FlagQual::Any,
        commonness: CommonnessQual::Any,
        size: SizeQual::Any,
        recipients: RecipientsQual::Any,
        tree: TreeQual::Any,
    };
    out.push(base("logon".into(), Source::Logon, Action::Logon));
    out.push(base("logoff".into(), Source::Logon, Action::Logoff));
    out.push(base("device connect".into(), Source::Device, Action::Connect));
    out.push(base("device disconnect".into(), Source::Device, Action::Disconnect));
    for (action, averb) in [
        (Action::FileOpen, "file open"),
        (Action::FileWrite, "file write"),
        (Action::FileCopy, "file copy"),
        (Action::FileDelete, "file delete"),
    ] {
        for (removable, rtag) in [
            (RemovableQual::None, "on local disk"),
            (RemovableQual::To, "to removable media"),
            (RemovableQual::From, "from removable media"),
        ] {
            let mut d = base(format!("{averb} {rtag}"), Source::File, action);
            d.removable = removable;
            out.push(d);
        }
    }
    out.push(base("www visit".into(), Source::Http, Action::HttpVisit));
    out.push(base("www download".into(), Source::Http, Action::HttpDownload));
    out.push(base("www upload".into(), Source::Http, Action::HttpUpload));
    for (attach, atag) in [(FlagQual::Yes, "with attachments"), (FlagQual::No, "without attachments")] {
        let mut d = base(format!("email sent {atag}"), Source::Email, Action::EmailSend);
        d.attachments = attach;
        out.push(d);
        let mut d = base(format!("email viewed {atag}"), Source::Email, Action::EmailView);
        d.attachments = attach;
        out.push(d);
    }
    debug_assert_eq!(out.len(), 23);
    out
}

/// How familiar the event's key entity (pc, filename, domain, recipient set)
/// is to this user, judged on history strictly before the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityStatus {
    New,
    Seen,
    Common,
}

fn qual_matches(d: &Descriptor, e: &EventRecord, status: EntityStatus, t: &Thresholds) -> bool {
    if d.source != e.source || d.action != e.action {
        return false;
    }
    let a = &e.attrs;
    let removable_ok = match d.removable {
        RemovableQual::Any => true,
        RemovableQual::None => !a.to_removable && !a.from_removable,
        RemovableQual::To => a.to_removable && !a.from_removable,
        RemovableQual::From => a.from_removable && !a.to_removable,
        RemovableQual::Both => a.to_removable && a.from_removable,
    };
    let decoy_ok = match d.decoy {
        FlagQual::Any => true,
        FlagQual::Yes => a.decoy,
        FlagQual::No => !a.decoy,
    };
    let attach_ok = match d.attachments {
        FlagQual::Any => true,
        FlagQual::Yes => a.attachments > 0,
        FlagQual::No => a.attachments == 0,
    };
    let comm_ok = match d.commonness {
        CommonnessQual::Any => true,
        CommonnessQual::Common => status == EntityStatus::Common,
        CommonnessQual::Uncommon => status != EntityStatus::Common,
        CommonnessQual::New => status == EntityStatus::New,
        CommonnessQual::Seen => status == EntityStatus::Seen,
    };
    let size_ok = match d.size {
        SizeQual::Any => true,
        SizeQual::Large => a.content_len >= t.large_content_len,
        SizeQual::Small => a.content_len < t.large_content_len,
    };
    let rcpt_ok = match d.recipients {
        RecipientsQual::Any => true,
        RecipientsQual::Single => a.recipients.len() <= 1,
        RecipientsQual::Multiple => a.recipients.len() > 1,
    };
    let tree_ok = match d.tree {
        TreeQual::Any => true,
        TreeQual::Deep => a.file_tree_entries >= t.deep_tree_entries,
        TreeQual::Shallow => a.file_tree_entries < t.deep_tree_entries,
    };
    removable_ok && decoy_ok && attach_ok && comm_ok && size_ok && rcpt_ok && tree_ok
}

/// Map an event to its count-feature index, or None when no descriptor
/// matches. Descriptors are evaluated in config order; first match wins.
pub fn classify_event(e: &EventRecord, schema: &FeatureSchema, status: EntityStatus) -> Option<usize> {
    let minute = e.timestamp.time().hour() * 60 + e.timestamp.time().minute();
    let window = schema.window_of_minute(minute)?;
    let desc = schema.descriptors.iter().position(|d| qual_matches(d, e, status, &schema.thresholds))?;
    Some(schema.index_of(window, desc))
}

pub fn http_domain(url: &str) -> &str {
    let rest = url.split_once("://").map(|(_, r)| r).unwrap_or(url);
    rest.split('/').next().unwrap_or(rest)
}

/// Per-user entity frequency tables, keyed with a kind prefix so pcs,
/// filenames, domains and recipients never collide.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct PopularityTables {
    counts: HashMap<String, HashMap<String, u32>>,
}

impl PopularityTables {
    fn seen_count(&self, user: &str, key: &str) -> u32 {
        self.counts.get(user).and_then(|m| m.get(key)).copied().unwrap_or(0)
    }

    fn bump(&mut self, user: &str, key: String) {
        *self.counts.entry(user.to_string()).or_default().entry(key).or_insert(0) += 1;
    }

    fn status_of(count: u32, common_k: u32) -> EntityStatus {
        if count == 0 {
            EntityStatus::New
        } else if count >= common_k {
            EntityStatus::Common
        } else {
            EntityStatus::Seen
        }
    }

    /// Judge the event's entity on history before it, then record the sighting.
    pub fn judge_and_update(&mut self, e: &EventRecord, common_k: u32) -> EntityStatus {
        match e.source {
            Source::Logon | Source::Device => {
                let key = format!("pc:{}", e.pc_id);
                let status = Self::status_of(self.seen_count(&e.user_id, &key), common_k);
                self.bump(&e.user_id, key);
                status
            }
            Source::File => {
                let name = e.attrs.filename.as_deref().unwrap_or("");
                let key = format!("file:{name}");
                let status = Self::status_of(self.seen_count(&e.user_id, &key), common_k);
                self.bump(&e.user_id, key);
                status
            }
            Source::Http => {
                let domain = e.attrs.url.as_deref().map(http_domain).unwrap_or("");
                let key = format!("url:{domain}");
                let status = Self::status_of(self.seen_count(&e.user_id, &key), common_k);
                self.bump(&e.user_id, key);
                status
            }
            Source::Email => {
                // The recipient set is common only when every recipient is.
                let mut all_common = !e.attrs.recipients.is_empty();
                for r in &e.attrs.recipients {
                    let key = format!("rcpt:{r}");
                    if Self::status_of(self.seen_count(&e.user_id, &key), common_k) != EntityStatus::Common {
                        all_common = false;
                    }
                    self.bump(&e.user_id, key);
                }
                if all_common {
                    EntityStatus::Common
                } else {
                    EntityStatus::Seen
                }
            }
        }
    }
}

/// One user's activity counts and categorical ids for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDayVector {
    pub user_id: String,
    /// Calendar days since the first day of the stream. Days with no events at
    /// all (e.g. filtered weekends) leave gaps.
    pub day_index: i64,
    pub counts: Vec<u32>,
    pub categoricals: [u32; N_CATEGORIES],
}

/// Streaming day aggregator. Owns the popularity tables; emits one vector per
/// known user at each day boundary (zero vectors for users inactive that day,
/// once they have appeared). Memory is O(known users), constant in stream
/// length.
pub struct Aggregator {
    schema: FeatureSchema,
    start_date: Option<NaiveDate>,
    current_date: Option<NaiveDate>,
    today: BTreeMap<String, Vec<u32>>,
    known_users: BTreeMap<String, [u32; N_CATEGORIES]>,
    popularity: PopularityTables,
    pub classified_events: u64,
    pub total_events: u64,
}

impl Aggregator {
    pub fn new(schema: FeatureSchema) -> Self {
        Aggregator {
            schema,
            start_date: None,
            current_date: None,
            today: BTreeMap::new(),
            known_users: BTreeMap::new(),
            popularity: PopularityTables::default(),
            classified_events: 0,
            total_events: 0,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn emit_day(&mut self) -> (i64, Vec<UserDayVector>) {
        let date = self.current_date.expect("emit with no current day");
        let day_index = (date - self.start_date.unwrap()).num_days();
        let today = std::mem::take(&mut self.today);
        let dim = self.schema.count_dim();
        let mut out = Vec::with_capacity(self.known_users.len());
        for (user, cats) in &self.known_users {
            let counts = today.get(user).cloned().unwrap_or_else(|| vec![0; dim]);
            out.push(UserDayVector {
                user_id: user.clone(),
                day_index,
                counts,
                categoricals: *cats,
            });
        }
        (day_index, out)
    }

    /// Feed one event (timestamps must be non-decreasing). Returns the
    /// finished previous day when this event crosses a day boundary.
    pub fn push(&mut self, e: &EventRecord) -> Option<(i64, Vec<UserDayVector>)> {
        let date = e.timestamp.date();
        let mut emitted = None;
        match self.current_date {
            None => {
                self.start_date = Some(date);
                self.current_date = Some(date);
            }
            Some(current) => {
                if date > current {
                    emitted = Some(self.emit_day());
                    self.current_date = Some(date);
                } else {
                    debug_assert!(date == current, "events must arrive in timestamp order");
                }
            }
        }

        self.total_events += 1;
        self.known_users.entry(e.user_id.clone()).or_insert(e.attr_ids);
        let status = self.popularity.judge_and_update(e, self.schema.thresholds.common_k);
        if let Some(index) = classify_event(e, &self.schema, status) {
            let dim = self.schema.count_dim();
            let counts = self.today.entry(e.user_id.clone()).or_insert_with(|| vec![0; dim]);
            counts[index] += 1;
            self.classified_events += 1;
        } else {
            // still mark the user active today so a vector is emitted
            let dim = self.schema.count_dim();
            self.today.entry(e.user_id.clone()).or_insert_with(|| vec![0; dim]);
        }
        emitted
    }

    /// Flush the trailing day at end of stream.
    pub fn finish(&mut self) -> Option<(i64, Vec<UserDayVector>)> {
        self.current_date?;
        let out = self.emit_day();
        self.current_date = None;
        Some(out)
    }
}

/// Feature CSV header: user,day,f0..f{n-1},<category names>.
pub fn write_feature_csv<W: std::io::Write>(
    writer: W,
    schema: &FeatureSchema,
    days: &[(i64, Vec<UserDayVector>)],
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["user".to_string(), "day".to_string()];
    header.extend((0..schema.count_dim()).map(|i| format!("f{i}")));
    header.extend(schema.categorical_specs.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for (_, vectors) in days {
        for v in vectors {
            let mut row = vec![v.user_id.clone(), v.day_index.to_string()];
            row.extend(v.counts.iter().map(|c| c.to_string()));
            row.extend(v.categoricals.iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

/// Read vectors back, grouped by day in file order.
pub fn read_feature_csv<R: std::io::Read>(
    reader: R,
    count_dim: usize,
) -> Result<Vec<(i64, Vec<UserDayVector>)>, Box<dyn std::error::Error>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let expected = 2 + count_dim + N_CATEGORIES;
    if headers.len() != expected {
        return Err(format!("feature csv has {} columns, expected {}", headers.len(), expected).into());
    }
    let mut days: Vec<(i64, Vec<UserDayVector>)> = Vec::new();
    for record in r.records() {
        let record = record?;
        let user_id = record.get(0).unwrap_or("").to_string();
        let day_index: i64 = record.get(1).unwrap_or("").parse()?;
        let mut counts = Vec::with_capacity(count_dim);
        for i in 0..count_dim {
            counts.push(record.get(2 + i).unwrap_or("0").parse()?);
        }
        let mut categoricals = [0u32; N_CATEGORIES];
        for (c, slot) in categoricals.iter_mut().enumerate() {
            *slot = record.get(2 + count_dim + c).unwrap_or("0").parse()?;
        }
        let v = UserDayVector { user_id, day_index, counts, categoricals };
        match days.last_mut() {
            Some((day, vs)) if *day == v.day_index => vs.push(v),
            _ => days.push((v.day_index, vec![v])),
        }
    }
    Ok(days)
}
