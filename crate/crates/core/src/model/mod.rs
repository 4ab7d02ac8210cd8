//! The collective student model: one automaton per cluster of students, kept
//! up to date while new students work and reclassified at checkpoints.

mod persist;
mod shared;

pub use persist::{load_model, save_model, SCHEMA_VERSION};
pub use shared::SharedModel;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::automaton::{EventSignature, ExtendedAutomaton, RepeatTracker, StateId};
use crate::clustering::{
    partial_features, ClusterModel as Fitted, Clustering, ErrorWeights, FeatureKind, Method,
};
use crate::error::{Error, Result};
use crate::eventlog::{ActionId, EventKind, EventRecord, RelevanceConfig, StudentLog};
use crate::prediction::ReachTable;

/// Where a live student may be moved to a better-fitting cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    /// Right after the student first performs this action.
    ProtocolStep(ActionId),
    /// After this fraction of the cluster's average completion time.
    TimeFraction(f64),
}

impl FromStr for Checkpoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "checkpoint {s:?} is not step:<action> or time:<fraction>"
            ))
        };
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "step" => Ok(Checkpoint::ProtocolStep(ActionId::new(value)?)),
            "time" => {
                let f: f64 = value.parse().map_err(|_| bad())?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "time checkpoint {f} must be within (0, 1]"
                    )));
                }
                Ok(Checkpoint::TimeFraction(f))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Checkpoint::ProtocolStep(a) => write!(f, "step:{a}"),
            Checkpoint::TimeFraction(r) => write!(f, "time:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub method: Method,
    pub feature: Option<FeatureKind>,
    pub weights: ErrorWeights,
    pub k_max: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub relevance: RelevanceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            method: Method::None,
            feature: None,
            weights: ErrorWeights::default(),
            k_max: crate::clustering::DEFAULT_K_MAX,
            checkpoints: Vec::new(),
            relevance: RelevanceConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(method: Method, feature: Option<FeatureKind>) -> Self {
        ModelConfig {
            method,
            feature,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    /// Latest event timestamp in the training logs.
    pub built_at: f64,
}

/// One cluster's automaton with the logs that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub automaton: ExtendedAutomaton,
    pub members: BTreeMap<String, StudentLog>,
    pub reach: ReachTable,
}

impl Cluster {
    pub fn from_logs(logs: Vec<StudentLog>) -> Result<Cluster> {
        let mut automaton = ExtendedAutomaton::new();
        let traces: Vec<Vec<StateId>> = logs.iter().map(|l| automaton.apply_log(l)).collect();
        let map = automaton.canonicalize();
        let mut reach = ReachTable::default();
        for t in traces {
            let t: Vec<StateId> = t.iter().map(|s| map[s]).collect();
            reach.add_trace(&automaton, &t);
        }
        Ok(Cluster {
            automaton,
            reach,
            members: logs.into_iter().map(|l| (l.student.clone(), l)).collect(),
        })
    }

    /// Mean completion time of finished members other than `exclude`.
    pub fn average_total_time(&self, exclude: &str) -> Option<f64> {
        let times: Vec<f64> = self
            .members
            .values()
            .filter(|l| l.student != exclude)
            .filter_map(StudentLog::total_time)
            .collect();
        (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
    }

    fn add_member(&mut self, log: StudentLog) -> Vec<StateId> {
        let trace = self.automaton.apply_log(&log);
        self.reach.add_trace(&self.automaton, &trace);
        self.members.insert(log.student.clone(), log);
        trace
    }

    fn remove_member(&mut self, student: &str) -> Result<StudentLog> {
        let log = self.members.get(student).ok_or_else(|| {
            Error::Integrity(format!("student {student} is not a member of this cluster"))
        })?;
        let trace = self.automaton.trace(log)?;
        self.reach.remove_trace(&self.automaton, &trace)?;
        self.automaton.remove_log(log)?;
        Ok(self.members.remove(student).expect("checked"))
    }
}

/// A student working live against the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveSession {
    pub student: String,
    pub cluster: usize,
    pub state: StateId,
    /// States visited so far, starting at the initial state.
    pub trace: Vec<StateId>,
    /// Events applied so far, after relevance filtering.
    pub prefix: StudentLog,
    tracker: RepeatTracker,
    reached: BTreeSet<usize>,
}

impl LiveSession {
    fn new(student: &str, cluster: usize) -> Self {
        LiveSession {
            student: student.to_string(),
            cluster,
            state: StateId::INITIAL,
            trace: vec![StateId::INITIAL],
            prefix: StudentLog::new(student, Vec::new(), false),
            tracker: RepeatTracker::default(),
            reached: BTreeSet::new(),
        }
    }

    /// Extra repeats of the current blocked attempt so far.
    pub fn pending_repeats(&self) -> u32 {
        self.tracker.pending()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveModel {
    pub clustering: Clustering,
    pub clusters: Vec<Cluster>,
    pub config: ModelConfig,
    pub provenance: Provenance,
}

/// Clusters the logs and builds one automaton per cluster.
pub fn build_model(
    logs: &[StudentLog],
    config: &ModelConfig,
    seed: u64,
) -> Result<CollectiveModel> {
    let logs: Vec<StudentLog> = logs.iter().map(|l| config.relevance.apply(l)).collect();
    let clustering = Clustering::fit(
        &logs,
        config.method,
        config.feature,
        &config.weights,
        config.k_max,
        seed,
    )?;
    let mut groups: Vec<Vec<StudentLog>> = vec![Vec::new(); clustering.k];
    for log in &logs {
        groups[clustering.assignment[&log.student]].push(log.clone());
    }
    let clusters = groups
        .into_iter()
        .map(Cluster::from_logs)
        .collect::<Result<Vec<_>>>()?;
    let built_at = logs
        .iter()
        .flat_map(|l| l.events.iter().filter_map(|e| e.timestamp))
        .fold(0.0, f64::max);
    Ok(CollectiveModel {
        clustering,
        clusters,
        config: config.clone(),
        provenance: Provenance { seed, built_at },
    })
}

fn begin(cluster: &mut Cluster, student: &str, index: usize) -> LiveSession {
    cluster.automaton.begin_student();
    cluster.members.insert(
        student.to_string(),
        StudentLog::new(student, Vec::new(), false),
    );
    LiveSession::new(student, index)
}

fn observe_in(
    cluster: &mut Cluster,
    relevance: &RelevanceConfig,
    session: &mut LiveSession,
    e: &EventRecord,
) -> Result<()> {
    let Some(e) = relevance.apply_event(e) else {
        return Ok(());
    };
    if e.student != session.student {
        return Err(Error::Integrity(format!(
            "event of student {} observed in the session of {}",
            e.student, session.student
        )));
    }
    if let Some(last) = session.prefix.events.last() {
        if e.seq <= last.seq {
            return Err(Error::Integrity(format!(
                "student {}: sequence number {} does not follow {}",
                e.student, e.seq, last.seq
            )));
        }
    }
    let member = cluster.members.get_mut(&session.student).ok_or_else(|| {
        Error::Integrity(format!(
            "student {} has no open session here",
            session.student
        ))
    })?;
    if let Some(run) = session.tracker.push(&EventSignature::of(&e)) {
        let next = cluster.automaton.add_event(session.state, &e, run)?;
        if next != session.state {
            cluster
                .reach
                .add_step(&cluster.automaton, &session.trace, next);
            session.trace.push(next);
            session.state = next;
        }
    }
    member.events.push(e.clone());
    session.prefix.events.push(e);
    Ok(())
}

fn move_between(
    src: &mut Cluster,
    dst: &mut Cluster,
    dst_index: usize,
    session: &mut LiveSession,
) -> Result<()> {
    let log = src.remove_member(&session.student)?;
    let trace = dst.add_member(log);
    session.state = *trace.last().expect("trace starts at the initial state");
    session.trace = trace;
    session.cluster = dst_index;
    Ok(())
}

/// Number of leading events of `log` up to checkpoint `cp`, or `None` if the
/// log has not reached it. `limit` is the time checkpoint in seconds.
fn excerpt_len(cp: &Checkpoint, log: &StudentLog, limit: Option<f64>) -> Option<usize> {
    match cp {
        Checkpoint::ProtocolStep(a) => log
            .events
            .iter()
            .position(|e| e.kind == EventKind::Do && &e.action == a)
            .map(|p| p + 1),
        Checkpoint::TimeFraction(_) => {
            let limit = limit?;
            let t0 = log.events.first()?.timestamp?;
            if log.elapsed()? < limit {
                return None;
            }
            let mut n = 0;
            for e in &log.events {
                match e.timestamp {
                    Some(t) if t - t0 > limit => break,
                    _ => n += 1,
                }
            }
            Some(n)
        }
    }
}

/// Checkpoints the session has newly reached, given the current cluster's
/// average completion time.
fn newly_reached(config: &ModelConfig, session: &LiveSession, average: Option<f64>) -> Vec<usize> {
    config
        .checkpoints
        .iter()
        .enumerate()
        .filter(|(i, _)| !session.reached.contains(i))
        .filter(|(_, cp)| {
            let limit = match cp {
                Checkpoint::TimeFraction(f) => average.map(|a| a * f),
                _ => None,
            };
            excerpt_len(cp, &session.prefix, limit).is_some()
        })
        .map(|(i, _)| i)
        .collect()
}

/// What a cluster looks like at a checkpoint: `None` if none of its other
/// members reached it, otherwise the normalized centroid of their excerpts
/// (empty for methods without centroids).
fn excerpt_summary(
    clustering: &Clustering,
    cp: &Checkpoint,
    limit: Option<f64>,
    cluster: &Cluster,
    exclude: &str,
) -> Option<Vec<f64>> {
    let excerpts: Vec<StudentLog> = cluster
        .members
        .values()
        .filter(|l| l.student != exclude)
        .filter_map(|l| excerpt_len(cp, l, limit).map(|n| l.prefix(n)))
        .collect();
    if excerpts.is_empty() {
        return None;
    }
    let (Some(kind), Some((norm, _))) = (clustering.feature, clustering.centroids()) else {
        return Some(Vec::new());
    };
    let dims = norm.mean.len();
    let mut sum = vec![0.0; dims];
    for x in &excerpts {
        for (s, v) in sum
            .iter_mut()
            .zip(partial_features(kind, x, &clustering.weights).values)
        {
            *s += v;
        }
    }
    let mean: Vec<f64> = sum.into_iter().map(|s| s / excerpts.len() as f64).collect();
    Some(norm.apply(&mean))
}

/// Best cluster for a partial log among the clusters with a summary; ties
/// and the absence of candidates keep `current`.
fn best_for_prefix(
    clustering: &Clustering,
    prefix: &StudentLog,
    current: usize,
    summaries: &[Option<Vec<f64>>],
) -> usize {
    let candidates: Vec<(usize, &Vec<f64>)> = summaries
        .iter()
        .enumerate()
        .filter_map(|(c, s)| s.as_ref().map(|s| (c, s)))
        .collect();
    if candidates.is_empty() {
        return current;
    }
    let score = |c: usize, centroid: &Vec<f64>| -> f64 {
        match (
            &clustering.model,
            clustering.feature,
            clustering.centroids(),
        ) {
            (Fitted::Markov(m), _, _) => {
                m.components[c].weight.ln() + m.log_likelihood(c, prefix, false)
            }
            (_, Some(kind), Some((norm, _))) => {
                let x = norm.apply(&partial_features(kind, prefix, &clustering.weights).values);
                -crate::clustering::sq_dist(&x, centroid)
            }
            _ => 0.0,
        }
    };
    let current_score = candidates
        .iter()
        .find(|(c, _)| *c == current)
        .map(|(c, s)| score(*c, s));
    let mut best = current;
    let mut best_score = current_score.unwrap_or(f64::NEG_INFINITY);
    for (c, s) in candidates {
        let v = score(c, s);
        if v > best_score {
            best = c;
            best_score = v;
        }
    }
    best
}

impl CollectiveModel {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Clusters holding a log for `student`; exactly one for every known
    /// student.
    pub fn clusters_of(&self, student: &str) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|c| self.clusters[*c].members.contains_key(student))
            .collect()
    }

    /// Opens a session in the default cluster at the initial state.
    pub fn start_session(&mut self, student: &str) -> Result<LiveSession> {
        if !self.clusters_of(student).is_empty() {
            return Err(Error::Config(format!(
                "student {student} is already in the model"
            )));
        }
        let c = self.clustering.default_cluster();
        self.clustering.assignment.insert(student.to_string(), c);
        Ok(begin(&mut self.clusters[c], student, c))
    }

    /// Adds one event of the session's student to its cluster automaton.
    pub fn observe(&mut self, session: &mut LiveSession, e: &EventRecord) -> Result<()> {
        observe_in(
            &mut self.clusters[session.cluster],
            &self.config.relevance,
            session,
            e,
        )
    }

    /// Marks the session's student as having finished the assignment.
    pub fn complete_session(&mut self, session: &mut LiveSession) -> Result<()> {
        let member = self.clusters[session.cluster]
            .members
            .get_mut(&session.student)
            .ok_or_else(|| {
                Error::Integrity(format!("student {} has no open session", session.student))
            })?;
        member.completed = true;
        session.prefix.completed = true;
        Ok(())
    }

    /// At a newly reached checkpoint, moves the student to the cluster whose
    /// members looked most like them at the same checkpoint. Returns whether
    /// the student moved.
    pub fn maybe_reclassify(&mut self, session: &mut LiveSession) -> Result<bool> {
        let current = session.cluster;
        let average = self.clusters[current].average_total_time(&session.student);
        let reached = newly_reached(&self.config, session, average);
        let Some(&cp_index) = reached.last() else {
            return Ok(false);
        };
        session.reached.extend(reached);
        let cp = &self.config.checkpoints[cp_index];
        let limit = match cp {
            Checkpoint::TimeFraction(f) => average.map(|a| a * f),
            _ => None,
        };
        let summaries: Vec<Option<Vec<f64>>> = self
            .clusters
            .iter()
            .map(|c| excerpt_summary(&self.clustering, cp, limit, c, &session.student))
            .collect();
        let best = best_for_prefix(&self.clustering, &session.prefix, current, &summaries);
        if best == current {
            return Ok(false);
        }
        let (src, dst) = if current < best {
            let (lo, hi) = self.clusters.split_at_mut(best);
            (&mut lo[current], &mut hi[0])
        } else {
            let (lo, hi) = self.clusters.split_at_mut(current);
            (&mut hi[0], &mut lo[best])
        };
        move_between(src, dst, best, session)?;
        self.clustering
            .assignment
            .insert(session.student.clone(), best);
        Ok(true)
    }

    /// Checks the structural invariants tying clusters, automata and the
    /// assignment together.
    pub fn check(&self) -> Result<()> {
        if self.clusters.len() != self.clustering.k {
            return Err(Error::Integrity(
                "cluster count differs from clustering k".into(),
            ));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.automaton.cohort_size() != c.members.len() as u64 {
                return Err(Error::Integrity(format!(
                    "cluster {i}: cohort size differs from member count"
                )));
            }
            for s in c.members.keys() {
                if self.clustering.assignment.get(s) != Some(&i) {
                    return Err(Error::Integrity(format!("student {s} is misassigned")));
                }
            }
        }
        Ok(())
    }
}
