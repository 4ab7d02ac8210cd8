//! Event and trace data model, the tab-separated log format, and relevance
//! classification of events.
//!
//! A log file holds one event per line:
//!
//! ```text
//! student  seq  timestamp  kind  action  error_class  corrective
//! ```
//!
//! separated by tabs. `kind` is one of `do`, `try`, `fail`; `error_class` is
//! one of `none`, `dependency`, `incompatibility`, `world`, `other`;
//! `corrective` is `0` or `1`. The timestamp is seconds since the epoch and may
//! be `-` for events other than a student's first and last. Lines starting with
//! `#` are comments, except the completion directive
//!
//! ```text
//! #@complete  student
//! ```
//!
//! which marks that the student finished the assignment. Students without the
//! directive are treated as having abandoned it.

mod generate;

pub use generate::{generate_cohort, ErrorProfile, LabeledLog, ProfileEntry, ProtocolSpec};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefix of the completion directive line.
pub const COMPLETE_DIRECTIVE: &str = "#@complete";

/// Name of a protocol action, e.g. `"A3"` or `"AC"`.
///
/// Identifiers are non-empty and contain no whitespace or any of `,;:=|#`,
/// which are reserved by the log and model formats.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActionId(Arc<str>);

impl ActionId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Config("action id must be non-empty".into()));
        }
        if let Some(c) = id
            .chars()
            .find(|c| c.is_whitespace() || ",;:=|#".contains(*c))
        {
            return Err(Error::Config(format!(
                "action id {id:?} contains reserved character {c:?}"
            )));
        }
        Ok(ActionId(Arc::from(id)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ActionId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        ActionId::new(s)
    }
}

impl From<ActionId> for String {
    fn from(a: ActionId) -> String {
        a.0.to_string()
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    /// A valid action.
    Do,
    /// An attempted action blocked by the tutor.
    Try,
    /// An error detected by the tutor when validating an unblocked action.
    Fail,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Do => "do",
            EventKind::Try => "try",
            EventKind::Fail => "fail",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "do" => Ok(EventKind::Do),
            "try" => Ok(EventKind::Try),
            "fail" => Ok(EventKind::Fail),
            _ => Err(format!("unknown event kind {s:?}")),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    None,
    Dependency,
    Incompatibility,
    /// Failures handling objects in the virtual world.
    World,
    /// Pedagogically minor errors, such as repeating an action already done.
    Other,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 5] = [
        ErrorClass::None,
        ErrorClass::Dependency,
        ErrorClass::Incompatibility,
        ErrorClass::World,
        ErrorClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::None => "none",
            ErrorClass::Dependency => "dependency",
            ErrorClass::Incompatibility => "incompatibility",
            ErrorClass::World => "world",
            ErrorClass::Other => "other",
        }
    }
}

impl FromStr for ErrorClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ErrorClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error class {s:?}"))
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One logged student event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub student: String,
    pub seq: u64,
    pub timestamp: Option<f64>,
    pub kind: EventKind,
    pub action: ActionId,
    pub error_class: ErrorClass,
    /// Set on a right action that repairs an earlier relevant error.
    pub corrective: bool,
}

impl EventRecord {
    pub fn new(student: &str, seq: u64, kind: EventKind, action: ActionId) -> Self {
        let error_class = match kind {
            EventKind::Do => ErrorClass::None,
            EventKind::Try | EventKind::Fail => ErrorClass::Dependency,
        };
        EventRecord {
            student: student.to_string(),
            seq,
            timestamp: None,
            kind,
            action,
            error_class,
            corrective: false,
        }
    }

    pub fn with_class(mut self, class: ErrorClass) -> Self {
        self.error_class = class;
        self
    }

    pub fn at(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn corrective(mut self) -> Self {
        self.corrective = true;
        self
    }

    fn write_line(&self, out: &mut String) {
        use std::fmt::Write;
        let ts = match self.timestamp {
            Some(t) => t.to_string(),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.student,
            self.seq,
            ts,
            self.kind,
            self.action,
            self.error_class,
            u8::from(self.corrective)
        );
    }
}

/// The chronologically ordered events of one student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentLog {
    pub student: String,
    pub events: Vec<EventRecord>,
    /// Whether the student reached the end of the assignment.
    pub completed: bool,
}

impl StudentLog {
    pub fn new(student: impl Into<String>, events: Vec<EventRecord>, completed: bool) -> Self {
        StudentLog {
            student: student.into(),
            events,
            completed,
        }
    }

    /// Seconds between the first and last event, or `None` when the log is
    /// incomplete or those timestamps are missing.
    pub fn total_time(&self) -> Option<f64> {
        if !self.completed {
            return None;
        }
        self.elapsed()
    }

    /// Seconds between the first event and the latest timestamped event,
    /// regardless of completion.
    pub fn elapsed(&self) -> Option<f64> {
        let first = self.events.first()?.timestamp?;
        let last = self.events.iter().rev().find_map(|e| e.timestamp)?;
        Some(last - first)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The first `n` events as an incomplete log.
    pub fn prefix(&self, n: usize) -> StudentLog {
        StudentLog {
            student: self.student.clone(),
            events: self.events[..n.min(self.events.len())].to_vec(),
            completed: false,
        }
    }
}

/// Parses a log file into one [`StudentLog`] per student, in order of first
/// appearance.
pub fn parse_logs(content: &str) -> Result<Vec<StudentLog>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_student: HashMap<String, (Vec<EventRecord>, bool)> = HashMap::new();
    let mut completed_markers: Vec<(usize, String)> = Vec::new();

    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(COMPLETE_DIRECTIVE) {
            let student = rest.trim();
            if student.is_empty() {
                return Err(Error::parse(
                    line_no,
                    "completion directive without student id",
                ));
            }
            completed_markers.push((line_no, student.to_string()));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let record = parse_record(line_no, line)?;
        let entry = by_student.entry(record.student.clone()).or_insert_with(|| {
            order.push(record.student.clone());
            (Vec::new(), false)
        });
        if let Some(prev) = entry.0.last() {
            if record.seq <= prev.seq {
                return Err(Error::Integrity(format!(
                    "student {}: sequence number {} at line {} does not follow {}",
                    record.student, record.seq, line_no, prev.seq
                )));
            }
        }
        entry.0.push(record);
    }

    for (line_no, student) in completed_markers {
        match by_student.get_mut(&student) {
            Some(entry) => entry.1 = true,
            None => {
                return Err(Error::parse(
                    line_no,
                    format!("completion directive for unknown student {student:?}"),
                ))
            }
        }
    }

    let mut logs = Vec::with_capacity(order.len());
    for student in order {
        let (events, completed) = by_student.remove(&student).expect("student registered");
        let first_ok = events.first().is_none_or(|e| e.timestamp.is_some());
        let last_ok = events.last().is_none_or(|e| e.timestamp.is_some());
        if !first_ok || !last_ok {
            return Err(Error::Integrity(format!(
                "student {student}: first and last events must carry timestamps"
            )));
        }
        logs.push(StudentLog {
            student,
            events,
            completed,
        });
    }
    Ok(logs)
}

fn parse_record(line_no: usize, line: &str) -> Result<EventRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(Error::parse(
            line_no,
            format!("expected 7 tab-separated fields, found {}", fields.len()),
        ));
    }
    let student = fields[0].trim();
    if student.is_empty() || student.chars().any(char::is_whitespace) {
        return Err(Error::parse(line_no, "invalid student id"));
    }
    let seq: u64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| Error::parse(line_no, format!("invalid sequence number {:?}", fields[1])))?;
    let timestamp = match fields[2].trim() {
        "-" | "" => None,
        t => {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::parse(line_no, format!("invalid timestamp {t:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, format!("invalid timestamp {t:?}")));
            }
            Some(v)
        }
    };
    let kind: EventKind = fields[3]
        .trim()
        .parse()
        .map_err(|m| Error::parse(line_no, m))?;
    let action =
        ActionId::new(fields[4].trim()).map_err(|e| Error::parse(line_no, e.to_string()))?;
    let error_class: ErrorClass = fields[5]
        .trim()
        .parse()
        .map_err(|m| Error::parse(line_no, m))?;
    let corrective = match fields[6].trim() {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::parse(
                line_no,
                format!("corrective flag must be 0 or 1, found {other:?}"),
            ))
        }
    };
    if corrective && kind != EventKind::Do {
        return Err(Error::parse(line_no, "only do events can be corrective"));
    }
    if kind != EventKind::Do && error_class == ErrorClass::None {
        return Err(Error::parse(
            line_no,
            format!("{kind} event requires an error class"),
        ));
    }
    Ok(EventRecord {
        student: student.to_string(),
        seq,
        timestamp,
        kind,
        action,
        error_class,
        corrective,
    })
}

/// Serializes logs in the format read by [`parse_logs`].
pub fn write_logs(logs: &[StudentLog]) -> String {
    let mut out =
        String::from("# student\tseq\ttimestamp\tkind\taction\terror_class\tcorrective\n");
    for log in logs {
        for e in &log.events {
            e.write_line(&mut out);
        }
        if log.completed {
            out.push_str(COMPLETE_DIRECTIVE);
            out.push('\t');
            out.push_str(&log.student);
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relevance {
    Correct,
    IrrelevantError,
    RelevantError,
    Ignored,
}

/// Which actions carry no pedagogical weight, and whether to keep them as
/// right actions or drop them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    #[serde(default)]
    pub irrelevant_actions: BTreeSet<ActionId>,
    #[serde(default)]
    pub keep_irrelevant_as_correct: bool,
}

pub fn classify_relevance(e: &EventRecord, config: &RelevanceConfig) -> Relevance {
    if config.irrelevant_actions.contains(&e.action) {
        return if config.keep_irrelevant_as_correct {
            Relevance::Correct
        } else {
            Relevance::Ignored
        };
    }
    match e.kind {
        EventKind::Do => Relevance::Correct,
        EventKind::Try => Relevance::IrrelevantError,
        EventKind::Fail => Relevance::RelevantError,
    }
}

impl RelevanceConfig {
    pub fn is_empty(&self) -> bool {
        self.irrelevant_actions.is_empty()
    }

    /// The event as it enters the model: `None` when ignored, rewritten as
    /// a plain right action when kept as correct.
    pub fn apply_event(&self, e: &EventRecord) -> Option<EventRecord> {
        match classify_relevance(e, self) {
            Relevance::Ignored => None,
            Relevance::Correct if self.irrelevant_actions.contains(&e.action) => {
                let mut e = e.clone();
                e.kind = EventKind::Do;
                e.error_class = ErrorClass::None;
                e.corrective = false;
                Some(e)
            }
            _ => Some(e.clone()),
        }
    }

    /// Applies [`apply_event`](Self::apply_event) to every event.
    pub fn apply(&self, log: &StudentLog) -> StudentLog {
        if self.is_empty() {
            return log.clone();
        }
        let events = log
            .events
            .iter()
            .filter_map(|e| self.apply_event(e))
            .collect();
        StudentLog {
            student: log.student.clone(),
            events,
            completed: log.completed,
        }
    }
}
