use std::sync::{Mutex, MutexGuard};

use super::{
    begin, best_for_prefix, excerpt_summary, move_between, newly_reached, observe_in, Checkpoint,
    Cluster, CollectiveModel, LiveSession, ModelConfig, Provenance,
};
use crate::clustering::Clustering;
use crate::error::{Error, Result};
use crate::eventlog::EventRecord;

/// A model serving many live students at once.
///
/// Each cluster sits behind its own lock, so students in different clusters
/// never wait for each other. Moving a student locks the source and the
/// destination in index order.
#[derive(Debug)]
pub struct SharedModel {
    clustering: Mutex<Clustering>,
    clusters: Vec<Mutex<Cluster>>,
    config: ModelConfig,
    provenance: Provenance,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl SharedModel {
    pub fn new(m: CollectiveModel) -> Self {
        SharedModel {
            clustering: Mutex::new(m.clustering),
            clusters: m.clusters.into_iter().map(Mutex::new).collect(),
            config: m.config,
            provenance: m.provenance,
        }
    }

    pub fn into_inner(self) -> CollectiveModel {
        CollectiveModel {
            clustering: self
                .clustering
                .into_inner()
                .unwrap_or_else(|p| p.into_inner()),
            clusters: self
                .clusters
                .into_iter()
                .map(|c| c.into_inner().unwrap_or_else(|p| p.into_inner()))
                .collect(),
            config: self.config,
            provenance: self.provenance,
        }
    }

    pub fn start_session(&self, student: &str) -> Result<LiveSession> {
        let mut clustering = lock(&self.clustering);
        if clustering.assignment.contains_key(student) {
            return Err(Error::Config(format!(
                "student {student} is already in the model"
            )));
        }
        let c = clustering.default_cluster();
        clustering.assignment.insert(student.to_string(), c);
        let mut cluster = lock(&self.clusters[c]);
        Ok(begin(&mut cluster, student, c))
    }

    pub fn observe(&self, session: &mut LiveSession, e: &EventRecord) -> Result<()> {
        let mut cluster = lock(&self.clusters[session.cluster]);
        observe_in(&mut cluster, &self.config.relevance, session, e)
    }

    pub fn maybe_reclassify(&self, session: &mut LiveSession) -> Result<bool> {
        let current = session.cluster;
        let average = lock(&self.clusters[current]).average_total_time(&session.student);
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
        let clustering = lock(&self.clustering).clone();
        let summaries: Vec<Option<Vec<f64>>> = self
            .clusters
            .iter()
            .map(|c| excerpt_summary(&clustering, cp, limit, &lock(c), &session.student))
            .collect();
        let best = best_for_prefix(&clustering, &session.prefix, current, &summaries);
        if best == current {
            return Ok(false);
        }
        let (lo, hi) = (current.min(best), current.max(best));
        let mut first = lock(&self.clusters[lo]);
        let mut second = lock(&self.clusters[hi]);
        if current == lo {
            move_between(&mut first, &mut second, best, session)?;
        } else {
            move_between(&mut second, &mut first, best, session)?;
        }
        lock(&self.clustering)
            .assignment
            .insert(session.student.clone(), best);
        Ok(true)
    }
}
