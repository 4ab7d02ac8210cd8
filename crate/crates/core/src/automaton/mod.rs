//! The extended automaton: zoned states carrying student counts, normal
//! transitions carrying a count, and vector transitions (out of blocked-attempt
//! states) carrying one count per number of extra repeats before leaving.
//!
//! States are identified by a [`SituationKey`]. Replaying a student's events
//! from the initial state yields a path whose keys strictly grow (completed
//! actions, then unrepaired errors, then the run of blocked attempts), so the
//! graph is acyclic and every student visits a state at most once.

mod dot;
pub(crate) mod text;

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::FxHashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::eventlog::{ActionId, ErrorClass, EventKind, EventRecord, StudentLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Zone {
    /// White states: valid sequences of actions.
    Correct,
    /// Yellow states: attempts blocked by the tutor.
    IrrelevantError,
    /// Red states: errors that affect the final result.
    RelevantError,
    /// Orange states: right actions taken while a relevant error is unrepaired.
    ConsequentError,
}

impl Zone {
    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Correct => "correct",
            Zone::IrrelevantError => "irrelevant",
            Zone::RelevantError => "relevant",
            Zone::ConsequentError => "consequent",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Zone::Correct => "white",
            Zone::IrrelevantError => "yellow",
            Zone::RelevantError => "red",
            Zone::ConsequentError => "orange",
        }
    }

    pub(crate) fn parse(s: &str) -> Option<Zone> {
        [
            Zone::Correct,
            Zone::IrrelevantError,
            Zone::RelevantError,
            Zone::ConsequentError,
        ]
        .into_iter()
        .find(|z| z.as_str() == s)
    }

    /// Whether the state stems directly from an error event.
    pub fn is_error(self) -> bool {
        matches!(self, Zone::IrrelevantError | Zone::RelevantError)
    }
}

/// What a transition or state records about the event that produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventSignature {
    pub kind: EventKind,
    pub action: ActionId,
    pub error_class: ErrorClass,
    pub corrective: bool,
}

impl EventSignature {
    pub fn of(e: &EventRecord) -> Self {
        EventSignature {
            kind: e.kind,
            action: e.action.clone(),
            error_class: e.error_class,
            corrective: e.corrective,
        }
    }
}

impl fmt::Display for EventSignature {
    /// Human-readable form: `do 3`, `try 3`, `fail AC`, `do* 5` for a
    /// corrective action.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let star = if self.corrective { "*" } else { "" };
        write!(f, "{}{} {}", self.kind, star, self.action)
    }
}

/// Canonical identity of a situation reached by a student.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SituationKey {
    done: Vec<ActionId>,
    unrepaired: Vec<EventSignature>,
    last: EventSignature,
    burst: u32,
    /// Order-independent hash of `done`, kept up to date by `after`.
    done_hash: u64,
}

impl Hash for SituationKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.done_hash.hash(state);
        self.done.len().hash(state);
        self.unrepaired.hash(state);
        self.last.hash(state);
        self.burst.hash(state);
    }
}

fn action_hash(a: &ActionId) -> u64 {
    let mut h = rustc_hash::FxHasher::default();
    a.as_str().hash(&mut h);
    h.finish()
}

impl SituationKey {
    /// `done` must be sorted.
    pub fn new(
        done: Vec<ActionId>,
        unrepaired: Vec<EventSignature>,
        last: EventSignature,
        burst: u32,
    ) -> Self {
        debug_assert!(done.windows(2).all(|w| w[0] <= w[1]));
        let done_hash = done.iter().map(action_hash).fold(0u64, u64::wrapping_add);
        SituationKey {
            done,
            unrepaired,
            last,
            burst,
            done_hash,
        }
    }

    /// Correctly completed actions, sorted, with multiplicity.
    pub fn done(&self) -> &[ActionId] {
        &self.done
    }

    /// Relevant errors not yet repaired, in order of occurrence.
    pub fn unrepaired(&self) -> &[EventSignature] {
        &self.unrepaired
    }

    pub fn last(&self) -> &EventSignature {
        &self.last
    }

    /// Number of distinct blocked attempts in the current run of `try`
    /// events; zero for any other last event.
    pub fn burst(&self) -> u32 {
        self.burst
    }

    /// The situation after `sig`, starting from `prev` (`None` = initial).
    pub fn after(prev: Option<&SituationKey>, sig: &EventSignature) -> SituationKey {
        let (mut done, mut unrepaired, burst, mut done_hash) = match prev {
            Some(k) => (k.done.clone(), k.unrepaired.clone(), k.burst, k.done_hash),
            None => (Vec::new(), Vec::new(), 0, 0),
        };
        let burst = match sig.kind {
            EventKind::Try => burst + 1,
            EventKind::Fail => {
                unrepaired.push(sig.clone());
                0
            }
            EventKind::Do => {
                let pos = done.partition_point(|a| a <= &sig.action);
                done.insert(pos, sig.action.clone());
                done_hash = done_hash.wrapping_add(action_hash(&sig.action));
                if sig.corrective && !unrepaired.is_empty() {
                    let before = unrepaired.len();
                    unrepaired.retain(|u| u.action != sig.action);
                    if unrepaired.len() == before {
                        unrepaired.remove(0);
                    }
                }
                0
            }
        };
        SituationKey {
            done,
            unrepaired,
            last: sig.clone(),
            burst,
            done_hash,
        }
    }

    /// Whether `sig` repeats the blocked attempt that produced this situation.
    pub fn is_repeat(&self, sig: &EventSignature) -> bool {
        sig.kind == EventKind::Try && self.last == *sig
    }

    pub fn zone(&self) -> Zone {
        match self.last.kind {
            EventKind::Try => Zone::IrrelevantError,
            EventKind::Fail => Zone::RelevantError,
            EventKind::Do if self.unrepaired.is_empty() => Zone::Correct,
            EventKind::Do => Zone::ConsequentError,
        }
    }
}

/// Folds consecutive identical blocked attempts into one visit.
///
/// `push` returns the repeat run to attach to the event (the number of extra
/// repeats of the attempt that preceded it), or `None` when the event is such
/// a repeat and must not be applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepeatTracker {
    last: Option<EventSignature>,
    run: u32,
}

impl RepeatTracker {
    pub fn push(&mut self, sig: &EventSignature) -> Option<u32> {
        if sig.kind == EventKind::Try && self.last.as_ref() == Some(sig) {
            self.run += 1;
            return None;
        }
        let run = std::mem::take(&mut self.run);
        self.last = Some(sig.clone());
        Some(run)
    }

    /// Repeats of the latest blocked attempt not yet attached to an exit.
    pub fn pending(&self) -> u32 {
        self.run
    }
}

/// The events of a log that advance the automaton, each with its repeat run.
pub fn collapsed_steps(events: &[EventRecord]) -> Vec<(&EventRecord, u32)> {
    let mut tracker = RepeatTracker::default();
    events
        .iter()
        .filter_map(|e| tracker.push(&EventSignature::of(e)).map(|run| (e, run)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub u32);

impl StateId {
    pub const INITIAL: StateId = StateId(0);
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub id: StateId,
    /// `None` only for the initial state.
    pub key: Option<SituationKey>,
    pub zone: Zone,
    pub gamma: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frequency {
    Normal(u64),
    /// Index `i` counts students who left after `i` extra repeats.
    Vector(Vec<u64>),
}

impl Frequency {
    pub fn total(&self) -> u64 {
        match self {
            Frequency::Normal(n) => *n,
            Frequency::Vector(v) => v.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub src: StateId,
    pub dst: StateId,
    pub sig: EventSignature,
    pub freq: Frequency,
}

impl Transition {
    pub fn is_vector(&self) -> bool {
        matches!(self.freq, Frequency::Vector(_))
    }
}

#[derive(Debug, Clone)]
pub struct ExtendedAutomaton {
    states: BTreeMap<StateId, State>,
    transitions: BTreeMap<(StateId, EventSignature), Transition>,
    index: FxHashMap<SituationKey, StateId>,
    cohort_size: u64,
    next_id: u32,
}

impl Default for ExtendedAutomaton {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ExtendedAutomaton {
    /// Structural equality up to state numbering.
    fn eq(&self, other: &Self) -> bool {
        self.to_text() == other.to_text()
    }
}

impl ExtendedAutomaton {
    /// An automaton holding only the initial state and no students.
    pub fn new() -> Self {
        let mut states = BTreeMap::new();
        states.insert(
            StateId::INITIAL,
            State {
                id: StateId::INITIAL,
                key: None,
                zone: Zone::Correct,
                gamma: 0,
            },
        );
        ExtendedAutomaton {
            states,
            transitions: BTreeMap::new(),
            index: FxHashMap::default(),
            cohort_size: 0,
            next_id: 1,
        }
    }

    /// Builds the automaton of a cohort and numbers its states canonically.
    pub fn build(logs: &[StudentLog]) -> Self {
        let mut a = ExtendedAutomaton::new();
        for log in logs {
            a.apply_log(log);
        }
        a.canonicalize();
        a
    }

    pub fn cohort_size(&self) -> u64 {
        self.cohort_size
    }

    pub fn state(&self, id: StateId) -> Option<&State> {
        self.states.get(&id)
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.states.values()
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.values()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn transition(&self, src: StateId, sig: &EventSignature) -> Option<&Transition> {
        self.transitions.get(&(src, sig.clone()))
    }

    /// Outgoing transitions of `src`, ordered by signature.
    pub fn outgoing(&self, src: StateId) -> impl Iterator<Item = &Transition> {
        let lo = (src, min_signature());
        self.transitions
            .range(lo..)
            .take_while(move |((s, _), _)| *s == src)
            .map(|(_, t)| t)
    }

    pub fn lookup(&self, key: &SituationKey) -> Option<StateId> {
        self.index.get(key).copied()
    }

    /// Registers a new student starting at the initial state.
    pub fn begin_student(&mut self) -> StateId {
        self.cohort_size += 1;
        self.states
            .get_mut(&StateId::INITIAL)
            .expect("initial state")
            .gamma += 1;
        StateId::INITIAL
    }

    /// Applies one event at `current` and returns the state reached.
    ///
    /// `repeat_run` is the number of extra repeats of the blocked attempt that
    /// led to `current`; it indexes the exit vector when `current` is a
    /// blocked-attempt state and is ignored otherwise. An event repeating
    /// that attempt leaves the automaton unchanged.
    pub fn add_event(
        &mut self,
        current: StateId,
        e: &EventRecord,
        repeat_run: u32,
    ) -> Result<StateId> {
        self.add_signature(current, &EventSignature::of(e), repeat_run)
    }

    pub fn add_signature(
        &mut self,
        current: StateId,
        sig: &EventSignature,
        repeat_run: u32,
    ) -> Result<StateId> {
        let src = self
            .states
            .get(&current)
            .ok_or_else(|| Error::Integrity(format!("state {current} is not in the automaton")))?;
        if src.key.as_ref().is_some_and(|k| k.is_repeat(sig)) {
            return Ok(current);
        }
        let src_zone = src.zone;
        let dst = match self.transitions.get(&(current, sig.clone())) {
            Some(t) => {
                let id = t.dst;
                self.states.get_mut(&id).expect("transition target").gamma += 1;
                id
            }
            None => {
                let key = SituationKey::after(src.key.as_ref(), sig);
                self.enter(key)
            }
        };
        let vector = src_zone == Zone::IrrelevantError;
        let t = self
            .transitions
            .entry((current, sig.clone()))
            .or_insert_with(|| Transition {
                src: current,
                dst,
                sig: sig.clone(),
                freq: if vector {
                    Frequency::Vector(Vec::new())
                } else {
                    Frequency::Normal(0)
                },
            });
        debug_assert_eq!(t.dst, dst);
        match &mut t.freq {
            Frequency::Normal(n) => *n += 1,
            Frequency::Vector(v) => {
                let i = repeat_run as usize;
                if v.len() <= i {
                    v.resize(i + 1, 0);
                }
                v[i] += 1;
            }
        }
        Ok(dst)
    }

    /// Counts one more student in the state for `key`, creating it if new.
    fn enter(&mut self, key: SituationKey) -> StateId {
        match self.index.get(&key) {
            Some(&id) => {
                self.states.get_mut(&id).expect("indexed state").gamma += 1;
                id
            }
            None => {
                let id = StateId(self.next_id);
                self.next_id += 1;
                self.states.insert(
                    id,
                    State {
                        id,
                        zone: key.zone(),
                        key: Some(key.clone()),
                        gamma: 1,
                    },
                );
                self.index.insert(key, id);
                id
            }
        }
    }

    /// Adds one student's log and returns the visited states, starting with
    /// the initial state.
    pub fn apply_log(&mut self, log: &StudentLog) -> Vec<StateId> {
        let mut current = self.begin_student();
        let mut trace = vec![current];
        for (e, run) in collapsed_steps(&log.events) {
            current = self
                .add_event(current, e, run)
                .expect("current state is always valid while applying");
            trace.push(current);
        }
        trace
    }

    /// States visited by `log` without modifying the automaton.
    pub fn trace(&self, log: &StudentLog) -> Result<Vec<StateId>> {
        Ok(self.path(log)?.into_iter().map(|(s, _)| s).collect())
    }

    /// States visited by `log`, each with the transition key and repeat run
    /// used to enter it (`None` for the initial state).
    fn path(
        &self,
        log: &StudentLog,
    ) -> Result<Vec<(StateId, Option<(StateId, EventSignature, u32)>)>> {
        let mut current = StateId::INITIAL;
        let mut path = vec![(current, None)];
        for (e, run) in collapsed_steps(&log.events) {
            let sig = EventSignature::of(e);
            let dst = match self.transitions.get(&(current, sig.clone())) {
                Some(t) => t.dst,
                None => {
                    return Err(Error::Integrity(format!(
                        "student {}: no transition {} (seq {}) out of state {}",
                        log.student, sig, e.seq, current
                    )))
                }
            };
            path.push((dst, Some((current, sig, run))));
            current = dst;
        }
        Ok(path)
    }

    /// Exact inverse of [`apply_log`](Self::apply_log). Fails without
    /// modifying the automaton if the log's contribution is not present.
    pub fn remove_log(&mut self, log: &StudentLog) -> Result<Vec<StateId>> {
        if self.cohort_size == 0 {
            return Err(Error::Integrity(format!(
                "student {}: automaton has no students to remove",
                log.student
            )));
        }
        let path = self.path(log)?;
        for (state, via) in &path[1..] {
            if self.states[state].gamma == 0 {
                return Err(Error::Integrity(format!(
                    "state {state} count would go below zero"
                )));
            }
            let (src, sig, run) = via.as_ref().expect("non-initial step");
            let t = &self.transitions[&(*src, sig.clone())];
            let available = match &t.freq {
                Frequency::Normal(n) => *n,
                Frequency::Vector(v) => v.get(*run as usize).copied().unwrap_or(0),
            };
            if available == 0 {
                return Err(Error::Integrity(format!(
                    "student {}: transition {} out of state {} count would go below zero",
                    log.student, sig, src
                )));
            }
        }

        self.cohort_size -= 1;
        self.states
            .get_mut(&StateId::INITIAL)
            .expect("initial")
            .gamma -= 1;
        for (state, via) in &path[1..] {
            let (src, sig, run) = via.as_ref().expect("non-initial step");
            let tkey = (*src, sig.clone());
            let t = self.transitions.get_mut(&tkey).expect("checked");
            let empty = match &mut t.freq {
                Frequency::Normal(n) => {
                    *n -= 1;
                    *n == 0
                }
                Frequency::Vector(v) => {
                    v[*run as usize] -= 1;
                    while v.last() == Some(&0) {
                        v.pop();
                    }
                    v.is_empty()
                }
            };
            if empty {
                self.transitions.remove(&tkey);
            }
            let s = self.states.get_mut(state).expect("checked");
            s.gamma -= 1;
            if s.gamma == 0 {
                let s = self.states.remove(state).expect("present");
                self.index.remove(s.key.as_ref().expect("non-initial"));
            }
        }
        Ok(path.into_iter().map(|(s, _)| s).collect())
    }

    /// γ(s) over the cohort size.
    pub fn support(&self, s: StateId) -> Result<f64> {
        let state = self
            .states
            .get(&s)
            .ok_or_else(|| Error::Domain(format!("state {s} is not in the automaton")))?;
        if self.cohort_size == 0 {
            return Err(Error::Undefined(
                "support of a state in an empty automaton".into(),
            ));
        }
        Ok(state.gamma as f64 / self.cohort_size as f64)
    }

    /// φ(t) over γ of the source state; vector transitions use the sum of
    /// their vector.
    pub fn confidence(&self, t: &Transition) -> f64 {
        let gamma = self.states.get(&t.src).map_or(0, |s| s.gamma);
        if gamma == 0 {
            return 0.0;
        }
        t.freq.total() as f64 / gamma as f64
    }

    /// Renumbers states breadth-first from the initial state, visiting
    /// outgoing transitions in signature order. Returns old → new ids.
    pub fn canonicalize(&mut self) -> BTreeMap<StateId, StateId> {
        let order = self.bfs_order();
        let map: BTreeMap<StateId, StateId> = order
            .iter()
            .enumerate()
            .map(|(i, old)| (*old, StateId(i as u32)))
            .collect();
        let mut states = BTreeMap::new();
        for (old, mut s) in std::mem::take(&mut self.states) {
            let new = map[&old];
            s.id = new;
            states.insert(new, s);
        }
        for v in self.index.values_mut() {
            *v = map[v];
        }
        let mut transitions = BTreeMap::new();
        for ((src, sig), mut t) in std::mem::take(&mut self.transitions) {
            t.src = map[&src];
            t.dst = map[&t.dst];
            transitions.insert((map[&src], sig), t);
        }
        self.states = states;
        self.transitions = transitions;
        self.next_id = self.states.len() as u32;
        map
    }

    fn bfs_order(&self) -> Vec<StateId> {
        let mut seen = std::collections::HashSet::new();
        let mut order = Vec::with_capacity(self.states.len());
        let mut queue = VecDeque::from([StateId::INITIAL]);
        seen.insert(StateId::INITIAL);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for t in self.outgoing(s) {
                if seen.insert(t.dst) {
                    queue.push_back(t.dst);
                }
            }
        }
        debug_assert_eq!(order.len(), self.states.len(), "unreachable states");
        order
    }

    /// Students whose trace ends at `s`.
    pub fn terminating(&self, s: StateId) -> u64 {
        let gamma = self.states.get(&s).map_or(0, |st| st.gamma);
        let out: u64 = self.outgoing(s).map(|t| t.freq.total()).sum();
        gamma.saturating_sub(out)
    }
}

fn min_signature() -> EventSignature {
    static MIN: std::sync::OnceLock<EventSignature> = std::sync::OnceLock::new();
    MIN.get_or_init(|| EventSignature {
        kind: EventKind::Do,
        action: ActionId::new("\u{0}").unwrap_or_else(|_| unreachable!()),
        error_class: ErrorClass::None,
        corrective: false,
    })
    .clone()
}

pub use dot::export_dot;
pub use text::{parse_automaton, write_automaton};
