//! Small hand-built cohorts and an event shorthand used across the test
//! suites and documentation.
//!
//! Shorthand events are written `"<kind> <action> [<class>]"`, e.g. `"do A"`,
//! `"try 3"`, `"fail AC incompatibility"`, `"do* 5"` (corrective). Error events
//! default to the `dependency` class.

use crate::eventlog::{ActionId, ErrorClass, EventKind, EventRecord, StudentLog};

/// Parses one shorthand event. Panics on malformed input.
pub fn ev(student: &str, seq: u64, shorthand: &str) -> EventRecord {
    let mut parts = shorthand.split_whitespace();
    let head = parts.next().expect("event kind");
    let (kind, corrective) = match head.strip_suffix('*') {
        Some(k) => (k, true),
        None => (head, false),
    };
    let kind: EventKind = kind.parse().expect("event kind");
    let action = ActionId::new(parts.next().expect("action")).expect("action id");
    let error_class = match parts.next() {
        Some(c) => c.parse().expect("error class"),
        None if kind == EventKind::Do => ErrorClass::None,
        None => ErrorClass::Dependency,
    };
    EventRecord {
        student: student.to_string(),
        seq,
        timestamp: Some(1000.0 + 10.0 * seq as f64),
        kind,
        action,
        error_class,
        corrective,
    }
}

/// A completed log with one event every ten seconds.
pub fn log(student: &str, events: &[&str]) -> StudentLog {
    let events = events
        .iter()
        .enumerate()
        .map(|(i, s)| ev(student, i as u64, s))
        .collect();
    StudentLog::new(student, events, true)
}

/// Three students over actions A, B, C:
///
/// * `s1`: do A, do B, do C
/// * `s2`: do A, try C, try C, do B, do C (600 s long)
/// * `s3`: do A, do C, fail B
pub fn tiny3() -> Vec<StudentLog> {
    let mut s2 = log("s2", &["do A", "try C", "try C", "do B", "do C"]);
    for (i, e) in s2.events.iter_mut().enumerate() {
        e.timestamp = Some(1000.0 + 150.0 * i as f64);
    }
    vec![
        log("s1", &["do A", "do B", "do C"]),
        s2,
        log("s3", &["do A", "do C", "fail B"]),
    ]
}

/// Fifty students on the protocol 1, 2, {3, 4}, 5, 6, 7 with distractor AC.
///
/// * 20 students attempt action 3 right after action 1; before doing 2 they
///   repeat that attempt 0 (1 student), 1 (3), 2 (2) or 3 (14) extra times.
/// * 40 students do 3 before 4, ten do 4 before 3.
/// * 35 students do 6 instead of 5 (`do 6 → fail 5`): 28 of the 3-first
///   group and 7 of the 4-first group. Thirty of them then add casein
///   (`do AC → do 7 → fail AC`); the other five just do 7.
/// * Three students do 7 instead of 5 (`do 7 → fail 5 → fail 6`).
/// * Two 4-first students try 4 again after 3 (an already-performed error).
/// * The remaining students finish 5, 6, 7 correctly.
pub fn figure3() -> Vec<StudentLog> {
    (0..50).map(figure3_student).collect()
}

fn figure3_student(i: usize) -> StudentLog {
    let mut e: Vec<&str> = vec!["do 1"];
    let extra = match i {
        0 => Some(0),
        1..=3 => Some(1),
        4..=5 => Some(2),
        6..=19 => Some(3),
        _ => None,
    };
    if let Some(extra) = extra {
        e.extend(std::iter::repeat_n("try 3", extra + 1));
    }
    e.push("do 2");
    if i < 40 {
        e.extend(["do 3", "do 4"]);
    } else {
        e.extend(["do 4", "do 3"]);
        if (47..49).contains(&i) {
            e.push("try 4 other");
        }
    }
    let red5 = i < 28 || (40..47).contains(&i);
    if red5 {
        e.extend(["do 6", "fail 5"]);
        if i < 42 {
            e.extend(["do AC", "do 7", "fail AC incompatibility"]);
        } else {
            e.push("do 7");
        }
    } else if (28..31).contains(&i) {
        e.extend(["do 7", "fail 5", "fail 6"]);
    } else {
        e.extend(["do 5", "do 6", "do 7"]);
    }
    log(&format!("f{i:02}"), &e)
}
