//! Queries for the tutor: what students usually do next, which errors are
//! likely soon, and where students get stuck.

use std::collections::{BTreeMap, HashMap};

use rustc_hash::FxHashMap;
use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::automaton::{EventSignature, ExtendedAutomaton, Frequency, StateId, Zone};
use crate::error::{Error, Result};
use crate::eventlog::StudentLog;

/// Per-transition confidences out of `s`, in signature order. The shortfall
/// from 1 is the share of students whose log ends at `s`.
pub fn next_distribution(a: &ExtendedAutomaton, s: StateId) -> Vec<(EventSignature, f64)> {
    a.outgoing(s)
        .map(|t| (t.sig.clone(), a.confidence(t)))
        .collect()
}

/// Student counts for pairs (s, e) where e is a relevant-error state the
/// student visits after s.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReachTable {
    counts: FxHashMap<(StateId, StateId), u64>,
}

impl ReachTable {
    pub fn count(&self, s: StateId, e: StateId) -> u64 {
        self.counts.get(&(s, e)).copied().unwrap_or(0)
    }

    /// count(s, e) / γ(s); zero for unknown states.
    pub fn probability(&self, a: &ExtendedAutomaton, s: StateId, e: StateId) -> f64 {
        match a.state(s) {
            Some(st) if st.gamma > 0 => self.count(s, e) as f64 / st.gamma as f64,
            _ => 0.0,
        }
    }

    /// Entries ordered by (s, e).
    pub fn iter(&self) -> impl Iterator<Item = (StateId, StateId, u64)> {
        let mut v: Vec<(StateId, StateId, u64)> =
            self.counts.iter().map(|((s, e), c)| (*s, *e, *c)).collect();
        v.sort_unstable();
        v.into_iter()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub(crate) fn insert(&mut self, s: StateId, e: StateId, count: u64) {
        if count > 0 {
            self.counts.insert((s, e), count);
        }
    }

    fn pairs(a: &ExtendedAutomaton, trace: &[StateId]) -> Vec<(StateId, StateId)> {
        let mut out = Vec::new();
        for (j, e) in trace.iter().enumerate() {
            if a.state(*e).map(|s| s.zone) == Some(Zone::RelevantError) {
                out.extend(trace[..j].iter().map(|s| (*s, *e)));
            }
        }
        out
    }

    /// Counts one student's visited states.
    pub fn add_trace(&mut self, a: &ExtendedAutomaton, trace: &[StateId]) {
        for p in Self::pairs(a, trace) {
            *self.counts.entry(p).or_default() += 1;
        }
    }

    /// Counts a newly reached state `new` of a student who already visited
    /// `earlier`.
    pub fn add_step(&mut self, a: &ExtendedAutomaton, earlier: &[StateId], new: StateId) {
        if a.state(new).map(|s| s.zone) == Some(Zone::RelevantError) {
            for s in earlier {
                *self.counts.entry((*s, new)).or_default() += 1;
            }
        }
    }

    /// Inverse of [`add_trace`](Self::add_trace); call before the states
    /// are removed from the automaton.
    pub fn remove_trace(&mut self, a: &ExtendedAutomaton, trace: &[StateId]) -> Result<()> {
        let pairs = Self::pairs(a, trace);
        if let Some((s, e)) = pairs
            .iter()
            .find(|p| self.counts.get(p).copied().unwrap_or(0) == 0)
        {
            return Err(Error::Integrity(format!(
                "reach count ({s}, {e}) would go below zero"
            )));
        }
        for p in pairs {
            let c = self.counts.get_mut(&p).expect("checked");
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&p);
            }
        }
        Ok(())
    }

    /// Same table with state ids renamed through `map`.
    pub fn renumbered(&self, map: &BTreeMap<StateId, StateId>) -> ReachTable {
        ReachTable {
            counts: self
                .counts
                .iter()
                .map(|((s, e), c)| ((map[s], map[e]), *c))
                .collect(),
        }
    }
}

/// Exact reach counts from replaying the logs that built `a`.
pub fn compute_reach_table(a: &ExtendedAutomaton, logs: &[StudentLog]) -> Result<ReachTable> {
    if logs.len() as u64 != a.cohort_size() {
        return Err(Error::Integrity(format!(
            "{} logs given for an automaton of {} students",
            logs.len(),
            a.cohort_size()
        )));
    }
    let mut table = ReachTable::default();
    for log in logs {
        table.add_trace(a, &a.trace(log)?);
    }
    Ok(table)
}

/// Share of the students entering blocked-attempt state `s` who repeat the
/// attempt at least `r` extra times before leaving.
pub fn flounder_risk(a: &ExtendedAutomaton, s: StateId, r: u32) -> Result<f64> {
    let state = a
        .state(s)
        .ok_or_else(|| Error::Domain(format!("state {s} is not in the automaton")))?;
    if state.zone != Zone::IrrelevantError {
        return Err(Error::Domain(format!(
            "state {s} is a {} state, not a blocked attempt",
            state.zone.as_str()
        )));
    }
    if r == 0 {
        return Ok(1.0);
    }
    let repeated: u64 = a
        .outgoing(s)
        .filter_map(|t| match &t.freq {
            Frequency::Vector(v) => Some(v.iter().skip(r as usize).sum::<u64>()),
            Frequency::Normal(_) => None,
        })
        .sum();
    Ok(repeated as f64 / state.gamma as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintPolicy {
    pub min_confidence: f64,
    pub min_support: f64,
    pub min_reach: f64,
    pub flounder_repeats: u32,
    pub flounder_prob: f64,
}

impl Default for HintPolicy {
    fn default() -> Self {
        HintPolicy {
            min_confidence: 0.3,
            min_support: 0.1,
            min_reach: 0.5,
            flounder_repeats: 3,
            flounder_prob: 0.5,
        }
    }
}

impl HintPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_confidence", self.min_confidence),
            ("min_support", self.min_support),
            ("min_reach", self.min_reach),
            ("flounder_prob", self.flounder_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{name} must be within [0, 1], got {v}"
                )));
            }
        }
        if self.flounder_repeats == 0 {
            return Err(Error::Config("flounder_repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PredictionKind {
    Direct,
    Indirect,
    Flounder,
}

impl PredictionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionKind::Direct => "direct",
            PredictionKind::Indirect => "indirect",
            PredictionKind::Flounder => "flounder",
        }
    }
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A place where a hint may help.
///
/// `state` is where the student is; `signature` is the risky event (the
/// error reached, or the repeated attempt); `target` is the state that event
/// leads to. Indirect predictions carry one most probable path from `state`
/// to `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub state: StateId,
    pub kind: PredictionKind,
    pub signature: EventSignature,
    pub probability: f64,
    pub target: StateId,
    pub witness: Vec<StateId>,
}

/// Most probable path to `target` from every state that can reach it, by
/// product of confidences. Ties go to the first transition in signature order.
fn best_paths(a: &ExtendedAutomaton, target: StateId) -> HashMap<StateId, (f64, Option<StateId>)> {
    fn visit(
        a: &ExtendedAutomaton,
        s: StateId,
        target: StateId,
        memo: &mut HashMap<StateId, Option<(f64, Option<StateId>)>>,
    ) -> Option<(f64, Option<StateId>)> {
        if let Some(v) = memo.get(&s) {
            return *v;
        }
        let result = if s == target {
            Some((1.0, None))
        } else {
            let mut best: Option<(f64, Option<StateId>)> = None;
            for t in a.outgoing(s) {
                if let Some((p, _)) = visit(a, t.dst, target, memo) {
                    let q = a.confidence(t) * p;
                    if best.is_none_or(|(b, _)| q > b) {
                        best = Some((q, Some(t.dst)));
                    }
                }
            }
            best
        };
        memo.insert(s, result);
        result
    }
    let mut memo = HashMap::new();
    let ids: Vec<StateId> = a.states().map(|s| s.id).collect();
    for s in ids {
        visit(a, s, target, &mut memo);
    }
    memo.into_iter()
        .filter_map(|(s, v)| v.map(|v| (s, v)))
        .collect()
}

fn witness(paths: &HashMap<StateId, (f64, Option<StateId>)>, from: StateId) -> Vec<StateId> {
    let mut out = vec![from];
    let mut cur = from;
    while let Some((_, Some(next))) = paths.get(&cur) {
        out.push(*next);
        cur = *next;
    }
    out
}

/// Every place the policy says deserves a hint, ordered by state, then
/// signature, kind and target.
pub fn hint_triggers(
    a: &ExtendedAutomaton,
    reach: &ReachTable,
    policy: &HintPolicy,
) -> Vec<Prediction> {
    let mut out = Vec::new();
    let support = |s: StateId| a.support(s).unwrap_or(0.0);

    for t in a.transitions() {
        let dst_zone = a.state(t.dst).map(|s| s.zone);
        if !dst_zone.is_some_and(Zone::is_error) {
            continue;
        }
        let conf = a.confidence(t);
        if conf >= policy.min_confidence && support(t.src) >= policy.min_support {
            out.push(Prediction {
                state: t.src,
                kind: PredictionKind::Direct,
                signature: t.sig.clone(),
                probability: conf,
                target: t.dst,
                witness: vec![t.src, t.dst],
            });
        }
    }

    let mut by_target: BTreeMap<StateId, Vec<(StateId, f64)>> = BTreeMap::new();
    for (s, e, _) in reach.iter() {
        let p = reach.probability(a, s, e);
        if p >= policy.min_reach && support(e) >= policy.min_support {
            by_target.entry(e).or_default().push((s, p));
        }
    }
    for (e, sources) in by_target {
        let paths = best_paths(a, e);
        let sig = a
            .state(e)
            .and_then(|st| st.key.as_ref())
            .map(|k| k.last().clone())
            .expect("relevant-error state has a key");
        for (s, p) in sources {
            out.push(Prediction {
                state: s,
                kind: PredictionKind::Indirect,
                signature: sig.clone(),
                probability: p,
                target: e,
                witness: witness(&paths, s),
            });
        }
    }

    for s in a.states().filter(|s| s.zone == Zone::IrrelevantError) {
        let risk = flounder_risk(a, s.id, policy.flounder_repeats).expect("blocked-attempt state");
        if risk >= policy.flounder_prob {
            out.push(Prediction {
                state: s.id,
                kind: PredictionKind::Flounder,
                signature: s.key.as_ref().expect("non-initial").last().clone(),
                probability: risk,
                target: s.id,
                witness: vec![s.id],
            });
        }
    }

    out.sort_by(|x, y| {
        (x.state, &x.signature, x.kind, x.target).cmp(&(y.state, &y.signature, y.kind, y.target))
    });
    out
}

/// Tab-separated table of predictions.
pub fn format_predictions(predictions: &[Prediction]) -> String {
    let mut out = String::from("state\tkind\tsignature\tprobability\ttarget\twitness\n");
    for p in predictions {
        let path: Vec<String> = p.witness.iter().map(|s| format!("s{s}")).collect();
        let _ = writeln!(
            out,
            "s{}\t{}\t{}\t{:.4}\ts{}\t{}",
            p.state,
            p.kind,
            p.signature,
            p.probability,
            p.target,
            path.join(" > ")
        );
    }
    out
}
