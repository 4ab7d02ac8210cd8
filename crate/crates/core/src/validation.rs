//! How well a model predicts students it has not seen.
//!
//! A test log is replayed through the automaton of its best-fitting cluster.
//! Each step scores 1 minus the share of students who did the same thing at
//! the same place; steps the model has never seen score 1. A filter on
//! state support and transition confidence restricts scoring to the
//! frequent part of the model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::automaton::{
    collapsed_steps, EventSignature, ExtendedAutomaton, Frequency, SituationKey, StateId,
    Transition,
};
use crate::clustering::{FeatureKind, Method};
use crate::error::{Error, Result};
use crate::eventlog::{EventKind, StudentLog};
use crate::model::{build_model, CollectiveModel, ModelConfig};

pub const DEFAULT_SPLITS: usize = 150;
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubmodelFilter {
    pub support: f64,
    pub confidence: f64,
}

impl SubmodelFilter {
    pub const ALL: SubmodelFilter = SubmodelFilter {
        support: 0.0,
        confidence: 0.0,
    };

    pub fn new(support: f64, confidence: f64) -> Result<Self> {
        for v in [support, confidence] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "filter threshold {v} must be non-negative"
                )));
            }
        }
        Ok(SubmodelFilter {
            support,
            confidence,
        })
    }
}

/// Support thresholds by confidence thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub supports: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            supports: DEFAULT_THRESHOLDS.to_vec(),
            confidences: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl Grid {
    /// Parses `supports:confidences`, each a comma-separated list, e.g.
    /// `0,0.5:0,0.9`.
    pub fn parse(s: &str) -> Result<Grid> {
        let (sup, conf) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid {s:?} is not supports:confidences")))?;
        let list = |x: &str| -> Result<Vec<f64>> {
            x.split(',')
                .map(|v| {
                    let f: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid threshold {v:?}")))?;
                    SubmodelFilter::new(f, 0.0)?;
                    Ok(f)
                })
                .collect()
        };
        let grid = Grid {
            supports: list(sup)?,
            confidences: list(conf)?,
        };
        Ok(grid)
    }

    pub fn cells(&self) -> Vec<SubmodelFilter> {
        self.supports
            .iter()
            .flat_map(|s| {
                self.confidences.iter().map(move |c| SubmodelFilter {
                    support: *s,
                    confidence: *c,
                })
            })
            .collect()
    }
}

/// Which formula scores a matched step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Normal,
    /// Leaving a blocked attempt without repeating it.
    FirstExit,
    /// Leaving a blocked attempt after repeating it.
    RepeatedExit,
}

/// Error of one step taken from `s` along `t`. `dst_support` is the support
/// of the state `t` leads to; `None` for either means the step is not in the
/// model.
pub fn event_error(
    a: &ExtendedAutomaton,
    t: Option<&Transition>,
    exited_first_time: Option<bool>,
    filter: &SubmodelFilter,
) -> f64 {
    let Some(t) = t else {
        return 1.0;
    };
    let Ok(dst_support) = a.support(t.dst) else {
        return 1.0;
    };
    let Some(base) = base_error(a, t, exited_first_time) else {
        return 1.0;
    };
    if dst_support >= filter.support && a.confidence(t) >= filter.confidence {
        base
    } else {
        0.0
    }
}

fn base_error(
    a: &ExtendedAutomaton,
    t: &Transition,
    exited_first_time: Option<bool>,
) -> Option<f64> {
    let gamma = a.state(t.src)?.gamma as f64;
    if gamma == 0.0 {
        return None;
    }
    let share = match (&t.freq, exited_first_time) {
        (Frequency::Normal(n), _) => *n as f64,
        (Frequency::Vector(v), Some(false)) => v.iter().skip(1).sum::<u64>() as f64,
        (Frequency::Vector(v), _) => v.first().copied().unwrap_or(0) as f64,
    };
    Some(1.0 - share / gamma)
}

/// Where a step started: a model state, or a situation the model lacks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Context {
    State(StateId),
    Temporary(Option<SituationKey>),
}

/// Identity of a step across students of one test set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId {
    pub cluster: usize,
    pub context: Context,
    pub signature: EventSignature,
    pub branch: Branch,
}

/// One replayed step before a filter is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEvent {
    pub id: EventId,
    /// (support of the reached state, confidence, error) when the step is
    /// in the model.
    pub matched: Option<(f64, f64, f64)>,
}

impl ScoredEvent {
    pub fn error(&self, filter: &SubmodelFilter) -> f64 {
        match self.matched {
            None => 1.0,
            Some((sup, conf, e)) if sup >= filter.support && conf >= filter.confidence => e,
            Some(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub events: Vec<(EventId, f64)>,
    pub temporary_states: usize,
    pub mean: Option<f64>,
}

/// Replays `log` through `a`, creating temporary situations for unseen
/// steps and resuming as soon as a step lands on a known situation.
pub fn score_events(
    a: &ExtendedAutomaton,
    cluster: usize,
    log: &StudentLog,
) -> (Vec<ScoredEvent>, usize) {
    // The situation key is only tracked while outside the model.
    let mut key: Option<SituationKey> = None;
    let mut current: Option<StateId> = Some(StateId::INITIAL);
    let mut temporaries = 0;
    let mut out = Vec::new();
    for (e, run) in collapsed_steps(&log.events) {
        let sig = EventSignature::of(e);
        let src_is_yellow = current
            .and_then(|s| a.state(s))
            .is_some_and(|s| s.zone == crate::automaton::Zone::IrrelevantError);
        let branch = if !src_is_yellow {
            Branch::Normal
        } else if run == 0 {
            Branch::FirstExit
        } else {
            Branch::RepeatedExit
        };
        let context = match current {
            Some(s) => Context::State(s),
            None => Context::Temporary(key.clone()),
        };
        let t = current.and_then(|s| a.transition(s, &sig));
        let dst = match t {
            Some(t) => Some(t.dst),
            None => {
                let prev = match current {
                    Some(s) => a.state(s).and_then(|st| st.key.clone()),
                    None => key.take(),
                };
                let next = SituationKey::after(prev.as_ref(), &sig);
                let dst = a.lookup(&next);
                if dst.is_none() {
                    temporaries += 1;
                    key = Some(next);
                }
                dst
            }
        };
        let matched = t.and_then(|t| {
            let sup = a.support(t.dst).ok()?;
            let e = base_error(
                a,
                t,
                (branch != Branch::Normal).then_some(branch == Branch::FirstExit),
            )?;
            Some((sup, a.confidence(t), e))
        });
        out.push(ScoredEvent {
            id: EventId {
                cluster,
                context,
                signature: sig,
                branch,
            },
            matched,
        });
        current = dst;
    }
    (out, temporaries)
}

fn pick_cluster(m: &CollectiveModel, log: &StudentLog) -> usize {
    m.clustering.assign_log(log).min(m.clusters.len() - 1)
}

/// Replays a log against the model's best-fitting cluster.
pub fn align(m: &CollectiveModel, log: &StudentLog, filter: &SubmodelFilter) -> AlignmentResult {
    let log = m.config.relevance.apply(log);
    let c = pick_cluster(m, &log);
    let (scored, temporary_states) = score_events(&m.clusters[c].automaton, c, &log);
    let events: Vec<(EventId, f64)> = scored
        .iter()
        .map(|s| (s.id.clone(), s.error(filter)))
        .collect();
    let mean = mean_error(&events).ok();
    AlignmentResult {
        events,
        temporary_states,
        mean,
    }
}

/// Mean over distinct events, each weighted by how many times it occurs.
pub fn mean_error(events: &[(EventId, f64)]) -> Result<f64> {
    let mut groups: BTreeMap<&EventId, (f64, u64)> = BTreeMap::new();
    for (id, e) in events {
        groups.entry(id).or_insert((*e, 0)).1 += 1;
    }
    let n: u64 = groups.values().map(|(_, n)| n).sum();
    if n == 0 {
        return Err(Error::Undefined("mean error of an empty test set".into()));
    }
    Ok(groups.values().map(|(e, n)| e * *n as f64).sum::<f64>() / n as f64)
}

/// Mean error of a test set at every grid cell; `None` when the test set
/// has no events.
pub fn grid_errors(m: &CollectiveModel, tests: &[StudentLog], grid: &Grid) -> Option<Vec<f64>> {
    let mut scored = Vec::new();
    for log in tests {
        let log = m.config.relevance.apply(log);
        let c = pick_cluster(m, &log);
        scored.extend(score_events(&m.clusters[c].automaton, c, &log).0);
    }
    if scored.is_empty() {
        return None;
    }
    // Identical events share the error of their first occurrence.
    let mut groups: BTreeMap<&EventId, (usize, u64)> = BTreeMap::new();
    for (i, s) in scored.iter().enumerate() {
        groups.entry(&s.id).or_insert((i, 0)).1 += 1;
    }
    let n = scored.len() as f64;
    Some(
        grid.cells()
            .iter()
            .map(|f| {
                groups
                    .values()
                    .map(|(i, c)| scored[*i].error(f) * *c as f64)
                    .sum::<f64>()
                    / n
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub method: Method,
    pub feature: Option<FeatureKind>,
    /// Most frequent cluster count across splits.
    pub k: usize,
    pub n_splits: usize,
    pub seed: u64,
    pub grid: Grid,
    /// `cells[i][j]` is the mean error at support `grid.supports[i]` and
    /// confidence `grid.confidences[j]`.
    pub cells: Vec<Vec<f64>>,
}

fn feature_tag(f: Option<FeatureKind>) -> &'static str {
    f.map_or("-", FeatureKind::as_str)
}

impl GridReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method\t{}", self.method);
        let _ = writeln!(out, "feature\t{}", feature_tag(self.feature));
        let _ = writeln!(out, "clusters\t{}", self.k);
        let _ = writeln!(out, "splits\t{}", self.n_splits);
        let _ = writeln!(out, "seed\t{}", self.seed);
        out.push_str("support\\confidence");
        for c in &self.grid.confidences {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (s, row) in self.grid.supports.iter().zip(&self.cells) {
            let _ = write!(out, "{s}");
            for v in row {
                let _ = write!(out, "\t{v:.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,method,k,support");
        for c in &self.grid.confidences {
            let _ = write!(out, ",conf_{c}");
        }
        out.push('\n');
        for (s, row) in self.grid.supports.iter().zip(&self.cells) {
            let _ = write!(
                out,
                "{},{},{},{s}",
                feature_tag(self.feature),
                self.method,
                self.k
            );
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, support: f64, confidence: f64) -> Option<f64> {
        let i = self.grid.supports.iter().position(|s| *s == support)?;
        let j = self
            .grid
            .confidences
            .iter()
            .position(|c| *c == confidence)?;
        Some(self.cells[i][j])
    }
}

/// Repeated 90/10 validation. Each split builds a model on 90% of the
/// students and scores the rest at every grid cell; cells average over
/// splits. Splits run in parallel on the current rayon pool.
pub fn cross_validate(
    logs: &[StudentLog],
    config: &ModelConfig,
    grid: &Grid,
    n_splits: usize,
    seed: u64,
) -> Result<GridReport> {
    if logs.len() < 10 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 10 logs, got {}",
            logs.len()
        )));
    }
    if n_splits == 0 || grid.supports.is_empty() || grid.confidences.is_empty() {
        return Err(Error::Config(
            "need at least one split and one grid cell".into(),
        ));
    }
    let test_size = logs.len().div_ceil(10);
    let results: Vec<Result<(usize, Option<Vec<f64>>)>> = (0..n_splits)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut order: Vec<usize> = (0..logs.len()).collect();
            order.shuffle(&mut rng);
            let (test_idx, train_idx) = order.split_at(test_size);
            let train: Vec<StudentLog> = train_idx.iter().map(|j| logs[*j].clone()).collect();
            let test: Vec<StudentLog> = test_idx.iter().map(|j| logs[*j].clone()).collect();
            let m = build_model(&train, config, rng.gen())?;
            Ok((m.k(), grid_errors(&m, &test, grid)))
        })
        .collect();

    let cells_n = grid.supports.len() * grid.confidences.len();
    let mut sums = vec![0.0; cells_n];
    let mut counted = 0usize;
    let mut ks: BTreeMap<usize, usize> = BTreeMap::new();
    for r in results {
        let (k, errors) = r?;
        *ks.entry(k).or_default() += 1;
        if let Some(errors) = errors {
            counted += 1;
            for (s, e) in sums.iter_mut().zip(errors) {
                *s += e;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Undefined("no split had a test event".into()));
    }
    let k = ks
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| *k)
        .expect("at least one split");
    let cells = sums
        .chunks(grid.confidences.len())
        .map(|row| row.iter().map(|s| s / counted as f64).collect())
        .collect();
    Ok(GridReport {
        method: config.method,
        feature: config.feature,
        k,
        n_splits,
        seed,
        grid: grid.clone(),
        cells,
    })
}

/// Per-cluster frequencies of relevant errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorByCluster {
    pub errors: Vec<EventSignature>,
    pub cluster_sizes: Vec<usize>,
    /// `frequencies[i][c]`: share of cluster `c` members who made error `i`.
    pub frequencies: Vec<Vec<f64>>,
    /// Population variance of each error's frequencies across clusters.
    pub variances: Vec<f64>,
    /// Mean frequency over the selected errors, per cluster.
    pub averages: Vec<f64>,
}

fn made_errors(log: &StudentLog) -> BTreeSet<EventSignature> {
    log.events
        .iter()
        .filter(|e| e.kind == EventKind::Fail)
        .map(EventSignature::of)
        .collect()
}

/// The `n` relevant errors made by the most students, ties in signature
/// order.
pub fn top_errors<'a>(
    logs: impl IntoIterator<Item = &'a StudentLog>,
    n: usize,
) -> Vec<EventSignature> {
    let mut counts: BTreeMap<EventSignature, usize> = BTreeMap::new();
    for l in logs {
        for e in made_errors(l) {
            *counts.entry(e).or_default() += 1;
        }
    }
    let mut v: Vec<(EventSignature, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(s, _)| s).collect()
}

fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Error frequencies for an arbitrary grouping of logs.
pub fn error_by_cluster(groups: &[Vec<&StudentLog>], errors: &[EventSignature]) -> ErrorByCluster {
    let made: Vec<Vec<BTreeSet<EventSignature>>> = groups
        .iter()
        .map(|g| g.iter().map(|l| made_errors(l)).collect())
        .collect();
    let frequencies: Vec<Vec<f64>> = errors
        .iter()
        .map(|err| {
            made.iter()
                .map(|g| {
                    if g.is_empty() {
                        0.0
                    } else {
                        g.iter().filter(|s| s.contains(err)).count() as f64 / g.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    let variances = frequencies.iter().map(|f| variance(f)).collect();
    let averages = (0..groups.len())
        .map(|c| {
            if errors.is_empty() {
                0.0
            } else {
                frequencies.iter().map(|f| f[c]).sum::<f64>() / errors.len() as f64
            }
        })
        .collect();
    ErrorByCluster {
        errors: errors.to_vec(),
        cluster_sizes: groups.iter().map(Vec::len).collect(),
        frequencies,
        variances,
        averages,
    }
}

/// Frequencies of the model's `top` most common relevant errors in each
/// cluster.
pub fn error_by_cluster_report(m: &CollectiveModel, top: usize) -> ErrorByCluster {
    let errors = top_errors(m.clusters.iter().flat_map(|c| c.members.values()), top);
    let groups: Vec<Vec<&StudentLog>> = m
        .clusters
        .iter()
        .map(|c| c.members.values().collect())
        .collect();
    error_by_cluster(&groups, &errors)
}

impl ErrorByCluster {
    pub fn mean_variance(&self) -> f64 {
        if self.variances.is_empty() {
            0.0
        } else {
            self.variances.iter().sum::<f64>() / self.variances.len() as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("error");
        for (c, n) in self.cluster_sizes.iter().enumerate() {
            let _ = write!(out, "\tcluster {c} (n={n})");
        }
        out.push_str("\tvariance\n");
        for ((e, f), v) in self
            .errors
            .iter()
            .zip(&self.frequencies)
            .zip(&self.variances)
        {
            let _ = write!(out, "{e}");
            for x in f {
                let _ = write!(out, "\t{x:.3}");
            }
            let _ = writeln!(out, "\t{v:.4}");
        }
        out.push_str("average");
        for a in &self.averages {
            let _ = write!(out, "\t{a:.3}");
        }
        let _ = writeln!(out, "\t{:.4}", self.mean_variance());
        out
    }
}
