//! Synthetic cohort generator.
//!
//! Each student walks the protocol order (commuting blocks shuffled per
//! student) and, at every step where its profile is active, may:
//!
//! * perform a distractor action, which the tutor flags with a deferred
//!   `fail` right after the next required action;
//! * attempt the next non-commuting action too early, producing one `try`
//!   plus a geometric number of repeats before the right `do`;
//! * skip one or more required actions, producing the later `do` followed by
//!   one `fail` per skipped action.
//!
//! Students may abandon the assignment, in which case the log ends early and
//! carries no completion marker.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionId, ErrorClass, EventKind, EventRecord, StudentLog};
use crate::error::{Error, Result};

const BASE_TIMESTAMP: f64 = 1_600_000_000.0;
const MAX_REPEATS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub actions: Vec<ActionId>,
    #[serde(default)]
    pub commuting_groups: Vec<Vec<ActionId>>,
    #[serde(default)]
    pub distractors: Vec<ActionId>,
    /// Profiles used by the `gen` subcommand; ignored by [`generate_cohort`].
    #[serde(default)]
    pub profiles: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    #[serde(flatten)]
    pub profile: ErrorProfile,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub name: String,
    #[serde(default)]
    pub p_premature: f64,
    #[serde(default)]
    pub p_skip: f64,
    #[serde(default)]
    pub p_distractor: f64,
    /// Success probability of the geometric repeat count; 1 means never repeat.
    #[serde(default = "one")]
    pub repeat_geom: f64,
    #[serde(default)]
    pub p_abandon: f64,
    /// 1-based protocol steps where errors may be injected; all when absent.
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}

impl ErrorProfile {
    pub fn clean(name: &str) -> Self {
        ErrorProfile {
            name: name.to_string(),
            p_premature: 0.0,
            p_skip: 0.0,
            p_distractor: 0.0,
            repeat_geom: 1.0,
            p_abandon: 0.0,
            steps: None,
        }
    }

    fn validate(&self) -> Result<()> {
        for (label, p) in [
            ("p_premature", self.p_premature),
            ("p_skip", self.p_skip),
            ("p_distractor", self.p_distractor),
            ("p_abandon", self.p_abandon),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "profile {}: {label} = {p} is outside [0, 1]",
                    self.name
                )));
            }
        }
        if !(self.repeat_geom > 0.0 && self.repeat_geom <= 1.0) {
            return Err(Error::Config(format!(
                "profile {}: repeat_geom = {} is outside (0, 1]",
                self.name, self.repeat_geom
            )));
        }
        Ok(())
    }

    fn active(&self, step: usize) -> bool {
        self.steps.as_ref().is_none_or(|s| s.contains(&step))
    }
}

/// A generated log with the name of the profile that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLog {
    pub log: StudentLog,
    pub label: String,
}

impl ProtocolSpec {
    pub fn new(actions: &[&str]) -> Result<Self> {
        Ok(ProtocolSpec {
            actions: actions
                .iter()
                .map(|a| ActionId::new(*a))
                .collect::<Result<_>>()?,
            commuting_groups: Vec::new(),
            distractors: Vec::new(),
            profiles: Vec::new(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ProtocolSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("protocol document: {e}")))?;
        spec.validate()?;
        for entry in &spec.profiles {
            entry.profile.validate()?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Config("protocol has no actions".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.actions {
            if !seen.insert(a) {
                return Err(Error::Config(format!("action {a} listed twice")));
            }
        }
        let mut grouped = std::collections::BTreeSet::new();
        for group in &self.commuting_groups {
            if group.len() < 2 {
                return Err(Error::Config(
                    "commuting group needs at least two actions".into(),
                ));
            }
            let mut positions = Vec::with_capacity(group.len());
            for a in group {
                if !grouped.insert(a) {
                    return Err(Error::Config(format!(
                        "action {a} is in two commuting groups"
                    )));
                }
                let pos = self.actions.iter().position(|x| x == a).ok_or_else(|| {
                    Error::Config(format!("commuting action {a} not in protocol"))
                })?;
                positions.push(pos);
            }
            positions.sort_unstable();
            if positions.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::Config(
                    "commuting group is not a contiguous block".into(),
                ));
            }
        }
        for d in &self.distractors {
            if self.actions.contains(d) {
                return Err(Error::Config(format!(
                    "distractor {d} is also a protocol action"
                )));
            }
        }
        Ok(())
    }

    fn group_of(&self, a: &ActionId) -> Option<usize> {
        self.commuting_groups.iter().position(|g| g.contains(a))
    }

    fn commute(&self, a: &ActionId, b: &ActionId) -> bool {
        matches!((self.group_of(a), self.group_of(b)), (Some(x), Some(y)) if x == y)
    }

    fn student_order(&self, rng: &mut ChaCha8Rng) -> Vec<ActionId> {
        let mut order = self.actions.clone();
        for group in &self.commuting_groups {
            let start = order
                .iter()
                .position(|a| group.contains(a))
                .expect("validated");
            order[start..start + group.len()].shuffle(rng);
        }
        order
    }
}

/// Generates `count` students per profile. Student ids are `s000`, `s001`, …
/// in generation order; the output is fully determined by the inputs and seed.
pub fn generate_cohort(
    protocol: &ProtocolSpec,
    profiles: &[(ErrorProfile, usize)],
    seed: u64,
) -> Result<Vec<LabeledLog>> {
    protocol.validate()?;
    for (profile, count) in profiles {
        profile.validate()?;
        if *count == 0 {
            return Err(Error::Config(format!(
                "profile {} has zero students",
                profile.name
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (profile, count) in profiles {
        for _ in 0..*count {
            let id = format!("s{:03}", out.len());
            let log = generate_student(protocol, profile, &id, &mut rng);
            out.push(LabeledLog {
                log,
                label: profile.name.clone(),
            });
        }
    }
    Ok(out)
}

struct Emitter<'a> {
    student: &'a str,
    events: Vec<EventRecord>,
    clock: f64,
}

impl Emitter<'_> {
    fn emit(
        &mut self,
        rng: &mut ChaCha8Rng,
        kind: EventKind,
        action: &ActionId,
        class: ErrorClass,
    ) {
        let dt = match kind {
            EventKind::Do => rng.gen_range(5..=60),
            EventKind::Try | EventKind::Fail => rng.gen_range(2..=10),
        };
        self.clock += f64::from(dt);
        let seq = self.events.len() as u64;
        self.events.push(EventRecord {
            student: self.student.to_string(),
            seq,
            timestamp: Some(self.clock),
            kind,
            action: action.clone(),
            error_class: class,
            corrective: false,
        });
    }
}

fn generate_student(
    protocol: &ProtocolSpec,
    profile: &ErrorProfile,
    student: &str,
    rng: &mut ChaCha8Rng,
) -> StudentLog {
    let order = protocol.student_order(rng);
    let n = order.len();
    let abandon_at = if n > 1 && rng.gen_bool(profile.p_abandon) {
        Some(rng.gen_range(1..n))
    } else {
        None
    };
    let start = BASE_TIMESTAMP + f64::from(rng.gen_range(0u32..30 * 86_400));
    let mut em = Emitter {
        student,
        events: Vec::new(),
        clock: start,
    };

    let mut i = 0;
    while i < n {
        if abandon_at.is_some_and(|stop| i >= stop) {
            break;
        }
        let step = i + 1;
        let active = profile.active(step);

        let mut pending_distractor = None;
        if active && !protocol.distractors.is_empty() && rng.gen_bool(profile.p_distractor) {
            let d = protocol.distractors[rng.gen_range(0..protocol.distractors.len())].clone();
            em.emit(rng, EventKind::Do, &d, ErrorClass::None);
            pending_distractor = Some(d);
        }

        if active && rng.gen_bool(profile.p_premature) {
            if let Some(target) = order[i + 1..]
                .iter()
                .find(|a| !protocol.commute(a, &order[i]))
            {
                let repeats = geometric(rng, profile.repeat_geom);
                for _ in 0..=repeats {
                    em.emit(rng, EventKind::Try, target, ErrorClass::Dependency);
                }
            }
        }

        let mut skipped = Vec::new();
        let mut j = i;
        while j + 1 < n
            && profile.active(j + 1)
            && !protocol.commute(&order[j], &order[j + 1])
            && rng.gen_bool(profile.p_skip)
        {
            skipped.push(order[j].clone());
            j += 1;
        }

        em.emit(rng, EventKind::Do, &order[j], ErrorClass::None);
        if let Some(d) = pending_distractor {
            em.emit(rng, EventKind::Fail, &d, ErrorClass::Incompatibility);
        }
        for s in &skipped {
            em.emit(rng, EventKind::Fail, s, ErrorClass::Dependency);
        }
        i = j + 1;
    }

    let completed = i >= n;
    StudentLog::new(student, em.events, completed)
}

fn geometric(rng: &mut ChaCha8Rng, p: f64) -> u32 {
    let mut k = 0;
    while k < MAX_REPEATS && !rng.gen_bool(p) {
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::{parse_logs, write_logs};

    fn protocol() -> ProtocolSpec {
        let mut p = ProtocolSpec::new(&["1", "2", "3", "4", "5", "6", "7"]).unwrap();
        p.commuting_groups = vec![vec![
            ActionId::new("3").unwrap(),
            ActionId::new("4").unwrap(),
        ]];
        p.distractors = vec![ActionId::new("AC").unwrap()];
        p
    }

    #[test]
    fn clean_profile_follows_protocol() {
        let p = ProtocolSpec::new(&["A", "B", "C", "D"]).unwrap();
        let cohort = generate_cohort(&p, &[(ErrorProfile::clean("ok"), 5)], 3).unwrap();
        assert_eq!(cohort.len(), 5);
        for l in &cohort {
            let actions: Vec<_> = l.log.events.iter().map(|e| e.action.as_str()).collect();
            assert_eq!(actions, ["A", "B", "C", "D"]);
            assert!(l.log.events.iter().all(|e| e.kind == EventKind::Do));
            assert!(l.log.completed);
        }
    }

    #[test]
    fn premature_at_step_two_emits_exactly_one_try() {
        let p = ProtocolSpec::new(&["A", "B", "C", "D"]).unwrap();
        let mut prof = ErrorProfile::clean("early");
        prof.p_premature = 1.0;
        prof.steps = Some(vec![2]);
        let cohort = generate_cohort(&p, &[(prof, 20)], 11).unwrap();
        for l in &cohort {
            let sig: Vec<_> = l
                .log
                .events
                .iter()
                .map(|e| format!("{} {}", e.kind, e.action))
                .collect();
            assert_eq!(sig, ["do A", "try C", "do B", "do C", "do D"]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut prof = ErrorProfile::clean("mixed");
        prof.p_premature = 0.3;
        prof.p_skip = 0.2;
        prof.p_distractor = 0.1;
        prof.repeat_geom = 0.5;
        prof.p_abandon = 0.2;
        let run = |seed| {
            let c = generate_cohort(&protocol(), &[(prof.clone(), 30)], seed).unwrap();
            write_logs(&c.into_iter().map(|l| l.log).collect::<Vec<_>>())
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn skip_and_distractor_shapes() {
        let mut prof = ErrorProfile::clean("x");
        prof.p_skip = 1.0;
        prof.steps = Some(vec![5, 6]);
        let c = generate_cohort(&protocol(), &[(prof, 3)], 1).unwrap();
        for l in &c {
            let tail: Vec<_> = l.log.events[4..]
                .iter()
                .map(|e| format!("{} {}", e.kind, e.action))
                .collect();
            assert_eq!(tail, ["do 7", "fail 5", "fail 6"]);
        }

        let mut prof = ErrorProfile::clean("y");
        prof.p_distractor = 1.0;
        prof.steps = Some(vec![3]);
        let c = generate_cohort(&protocol(), &[(prof, 3)], 1).unwrap();
        for l in &c {
            let e = &l.log.events;
            assert_eq!(e[2].action.as_str(), "AC");
            assert_eq!(e[4].kind, EventKind::Fail);
            assert_eq!(e[4].action.as_str(), "AC");
            assert_eq!(e[4].error_class, ErrorClass::Incompatibility);
        }
    }

    #[test]
    fn empty_protocol_is_rejected() {
        let p = ProtocolSpec {
            actions: vec![],
            commuting_groups: vec![],
            distractors: vec![],
            profiles: vec![],
        };
        assert!(matches!(
            generate_cohort(&p, &[(ErrorProfile::clean("a"), 1)], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generated_logs_survive_the_file_format() {
        let mut prof = ErrorProfile::clean("mixed");
        prof.p_premature = 0.4;
        prof.p_abandon = 0.3;
        prof.repeat_geom = 0.4;
        let logs: Vec<_> = generate_cohort(&protocol(), &[(prof, 25)], 5)
            .unwrap()
            .into_iter()
            .map(|l| l.log)
            .collect();
        assert_eq!(parse_logs(&write_logs(&logs)).unwrap(), logs);
    }

    #[test]
    fn protocol_toml_schema() {
        let text = r#"
actions = ["1", "2", "3", "4", "5"]
commuting_groups = [["3", "4"]]
distractors = ["AC"]

[[profiles]]
name = "careful"
count = 10
p_premature = 0.05

[[profiles]]
name = "sloppy"
count = 5
p_skip = 0.3
repeat_geom = 0.5
"#;
        let p = ProtocolSpec::from_toml(text).unwrap();
        assert_eq!(p.profiles.len(), 2);
        assert_eq!(p.profiles[1].profile.repeat_geom, 0.5);
        assert_eq!(p.profiles[0].profile.repeat_geom, 1.0);
        assert!(ProtocolSpec::from_toml(
            "actions = [\"1\", \"2\"]\ncommuting_groups = [[\"1\", \"3\"]]"
        )
        .is_err());
    }
}
