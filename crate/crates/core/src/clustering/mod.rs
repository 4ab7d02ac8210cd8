//! Grouping students before building per-group automata.
//!
//! Vector methods ([`Method::XMeans`], [`Method::Em`]) cluster one feature
//! vector per student, z-scored per dimension. [`Method::Sequence`] fits a
//! mixture of first-order Markov chains over event signatures.
//! [`Method::None`] puts everybody in one group.

mod gmm;
mod kmeans;
mod markov;

pub use gmm::GaussianMixture;
pub use markov::{MarkovComponent, MarkovMixture};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{
    classify_relevance, ErrorClass, EventKind, Relevance, RelevanceConfig, StudentLog,
};

/// Time charged to students who did not finish, in seconds.
pub const INCOMPLETE_PENALTY_SECS: f64 = 86_400.0;

pub const DEFAULT_K_MAX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    XMeans,
    Em,
    Sequence,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::XMeans, Method::Em, Method::Sequence];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::XMeans => "xmeans",
            Method::Em => "em",
            Method::Sequence => "sequence",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Method::XMeans | Method::Em)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown clustering method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Weighted error count.
    Errors,
    /// Weighted error count and total time.
    ErrorsTime,
    /// Counts of right actions, blocked attempts and relevant errors.
    EventsByZone,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [
        FeatureKind::Errors,
        FeatureKind::ErrorsTime,
        FeatureKind::EventsByZone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Errors => "errors",
            FeatureKind::ErrorsTime => "errors-time",
            FeatureKind::EventsByZone => "events-by-zone",
        }
    }

    pub fn dims(self) -> usize {
        match self {
            FeatureKind::Errors => 1,
            FeatureKind::ErrorsTime => 2,
            FeatureKind::EventsByZone => 3,
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature function {s:?}")))
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-class weights of the error coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorWeights(BTreeMap<ErrorClass, f64>);

impl Default for ErrorWeights {
    fn default() -> Self {
        ErrorWeights(BTreeMap::from([
            (ErrorClass::Dependency, 1.0),
            (ErrorClass::Incompatibility, 1.0),
            (ErrorClass::World, 0.5),
            (ErrorClass::Other, 0.25),
        ]))
    }
}

impl ErrorWeights {
    pub fn new(weights: impl IntoIterator<Item = (ErrorClass, f64)>) -> Result<Self> {
        let w = ErrorWeights(weights.into_iter().collect());
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "error weights must be finite and non-negative".into(),
            ));
        }
        if !self.0.values().any(|w| *w > 0.0) {
            return Err(Error::Config(
                "at least one error weight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, class: ErrorClass) -> f64 {
        self.0.get(&class).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ErrorClass, f64)> + '_ {
        self.0.iter().map(|(c, w)| (*c, *w))
    }

    /// Overrides from `class=weight` pairs separated by commas.
    pub fn parse_overrides(&self, spec: &str) -> Result<Self> {
        let mut w = self.clone();
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (class, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("weight {part:?} is not class=value")))?;
            let class: ErrorClass = class.trim().parse().map_err(Error::Config)?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid weight {value:?}")))?;
            w.0.insert(class, value);
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

fn error_coefficient(log: &StudentLog, w: &ErrorWeights) -> f64 {
    log.events
        .iter()
        .filter(|e| e.kind != EventKind::Do)
        .map(|e| w.get(e.error_class))
        .sum()
}

pub fn feature_errors(log: &StudentLog, w: &ErrorWeights) -> FeatureVector {
    FeatureVector {
        values: vec![error_coefficient(log, w)],
    }
}

/// Error coefficient and total time; unfinished logs are charged
/// [`INCOMPLETE_PENALTY_SECS`].
pub fn feature_errors_time(log: &StudentLog, w: &ErrorWeights) -> FeatureVector {
    let time = log.total_time().unwrap_or(INCOMPLETE_PENALTY_SECS);
    FeatureVector {
        values: vec![error_coefficient(log, w), time],
    }
}

pub fn feature_events_by_zone(log: &StudentLog) -> FeatureVector {
    let cfg = RelevanceConfig::default();
    let mut counts = [0.0; 3];
    for e in &log.events {
        match classify_relevance(e, &cfg) {
            Relevance::Correct => counts[0] += 1.0,
            Relevance::IrrelevantError => counts[1] += 1.0,
            Relevance::RelevantError => counts[2] += 1.0,
            Relevance::Ignored => {}
        }
    }
    FeatureVector {
        values: counts.to_vec(),
    }
}

pub fn features(kind: FeatureKind, log: &StudentLog, w: &ErrorWeights) -> FeatureVector {
    match kind {
        FeatureKind::Errors => feature_errors(log, w),
        FeatureKind::ErrorsTime => feature_errors_time(log, w),
        FeatureKind::EventsByZone => feature_events_by_zone(log),
    }
}

/// Features of a log in progress: time is the elapsed time so far rather
/// than the completion time or penalty.
pub fn partial_features(kind: FeatureKind, log: &StudentLog, w: &ErrorWeights) -> FeatureVector {
    match kind {
        FeatureKind::ErrorsTime => FeatureVector {
            values: vec![error_coefficient(log, w), log.elapsed().unwrap_or(0.0)],
        },
        _ => features(kind, log, w),
    }
}

/// Per-dimension z-score parameters. Constant dimensions get a unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(vectors: &[Vec<f64>]) -> Self {
        let dims = vectors.first().map_or(0, Vec::len);
        let n = vectors.len().max(1) as f64;
        let mut mean = vec![0.0; dims];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; dims];
        for v in vectors {
            for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClusterModel {
    /// Everyone in one cluster.
    Single,
    /// Centroids in normalized space.
    Centroids {
        normalization: Normalization,
        centroids: Vec<Vec<f64>>,
    },
    /// Diagonal Gaussian mixture in normalized space; its means act as
    /// centroids.
    Gaussian {
        normalization: Normalization,
        mixture: GaussianMixture,
    },
    Markov(MarkovMixture),
}

/// A fitted grouping of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub method: Method,
    pub feature: Option<FeatureKind>,
    pub weights: ErrorWeights,
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub model: ClusterModel,
}

/// Index of the nearest point, ties to the lowest index.
pub(crate) fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Clustering {
    /// Fits `method` to the logs. Vector methods require a feature function;
    /// the sequence method must not be given one.
    pub fn fit(
        logs: &[StudentLog],
        method: Method,
        feature: Option<FeatureKind>,
        weights: &ErrorWeights,
        k_max: usize,
        seed: u64,
    ) -> Result<Clustering> {
        if logs.is_empty() {
            return Err(Error::Config("cannot cluster an empty cohort".into()));
        }
        if k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        weights.validate()?;
        match (method, feature) {
            (Method::XMeans | Method::Em, None) => {
                return Err(Error::Config(format!(
                    "method {method} needs a feature function"
                )))
            }
            (Method::Sequence, Some(f)) => {
                return Err(Error::Config(format!(
                    "sequence clustering works on event sequences, not {f} vectors"
                )))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, labels) = match method {
            Method::None => (ClusterModel::Single, vec![0; logs.len()]),
            Method::XMeans | Method::Em => {
                let kind = feature.expect("checked");
                let raw: Vec<Vec<f64>> = logs
                    .iter()
                    .map(|l| features(kind, l, weights).values)
                    .collect();
                let normalization = Normalization::fit(&raw);
                let points: Vec<Vec<f64>> = raw.iter().map(|v| normalization.apply(v)).collect();
                if method == Method::XMeans {
                    let (centroids, labels) = kmeans::xmeans(&points, k_max, &mut rng);
                    (
                        ClusterModel::Centroids {
                            normalization,
                            centroids,
                        },
                        labels,
                    )
                } else {
                    let (mixture, labels) = gmm::em_cluster(&points, k_max, &mut rng);
                    (
                        ClusterModel::Gaussian {
                            normalization,
                            mixture,
                        },
                        labels,
                    )
                }
            }
            Method::Sequence => {
                let (mixture, labels) = markov::sequence_cluster(logs, k_max, &mut rng);
                (ClusterModel::Markov(mixture), labels)
            }
        };
        let k = labels.iter().max().map_or(1, |m| m + 1);
        let assignment = logs
            .iter()
            .zip(labels)
            .map(|(l, c)| (l.student.clone(), c))
            .collect::<BTreeMap<_, _>>();
        if assignment.len() != logs.len() {
            return Err(Error::Config(
                "student ids must be unique within a cohort".into(),
            ));
        }
        Ok(Clustering {
            method,
            feature,
            weights: weights.clone(),
            k,
            assignment,
            model,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for c in self.assignment.values() {
            sizes[*c] += 1;
        }
        sizes
    }

    /// Centroids in normalized space, for vector methods.
    pub fn centroids(&self) -> Option<(&Normalization, &[Vec<f64>])> {
        match &self.model {
            ClusterModel::Centroids {
                normalization,
                centroids,
            } => Some((normalization, centroids)),
            ClusterModel::Gaussian {
                normalization,
                mixture,
            } => Some((normalization, &mixture.means)),
            _ => None,
        }
    }

    /// Nearest centroid to a raw (unnormalized) feature vector.
    pub fn assign_vector(&self, raw: &FeatureVector) -> usize {
        match self.centroids() {
            Some((norm, centroids)) => nearest(centroids, &norm.apply(&raw.values)),
            None => 0,
        }
    }

    /// Best cluster for a finished log.
    pub fn assign_log(&self, log: &StudentLog) -> usize {
        match (&self.model, self.feature) {
            (ClusterModel::Markov(m), _) => m.assign(log, true),
            (ClusterModel::Single, _) => 0,
            (_, Some(kind)) => self.assign_vector(&features(kind, log, &self.weights)),
            (_, None) => 0,
        }
    }

    /// Cluster for a student who has not started: the centroid nearest the
    /// mean of the training attributes, or the heaviest chain component.
    pub fn default_cluster(&self) -> usize {
        match &self.model {
            ClusterModel::Single => 0,
            ClusterModel::Markov(m) => m.heaviest(),
            _ => {
                let (norm, centroids) = self.centroids().expect("vector model");
                nearest(centroids, &vec![0.0; norm.mean.len()])
            }
        }
    }
}
