//! Mixtures of first-order Markov chains over event signatures.
//!
//! Symbols are the signatures seen in training plus `END`, which closes every
//! finished sequence, and `UNKNOWN`, which stands for anything unseen. Fitting
//! is MAP expectation maximization with a tiny symmetric Dirichlet
//! pseudocount, which keeps every probability positive.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::automaton::EventSignature;
use crate::eventlog::StudentLog;

pub(crate) const PSEUDOCOUNT: f64 = 1e-6;
const MAX_ITER: usize = 200;
const TOLERANCE: f64 = 1e-8;
const RESTARTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovComponent {
    pub weight: f64,
    /// Start distribution over symbols.
    pub initial: Vec<f64>,
    /// Row-stochastic transition matrix over symbols.
    pub transitions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovMixture {
    pub alphabet: Vec<EventSignature>,
    pub components: Vec<MarkovComponent>,
}

/// Sufficient statistics of one encoded sequence.
#[derive(Debug, Clone)]
pub(crate) struct Sequence {
    first: usize,
    pairs: Vec<(usize, usize, f64)>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MarkovMixture {
    pub fn symbols(&self) -> usize {
        self.alphabet.len() + 2
    }

    pub fn end(&self) -> usize {
        self.alphabet.len()
    }

    pub fn unknown(&self) -> usize {
        self.alphabet.len() + 1
    }

    fn symbol(&self, sig: &EventSignature) -> usize {
        self.alphabet.binary_search(sig).unwrap_or(self.unknown())
    }

    /// `complete` appends `END`; prefixes of unfinished work leave it off.
    pub(crate) fn encode(&self, log: &StudentLog, complete: bool) -> Sequence {
        let mut syms: Vec<usize> = log
            .events
            .iter()
            .map(|e| self.symbol(&EventSignature::of(e)))
            .collect();
        if complete || syms.is_empty() {
            syms.push(self.end());
        }
        let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for w in syms.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1.0;
        }
        Sequence {
            first: syms[0],
            pairs: counts.into_iter().map(|((a, b), c)| (a, b, c)).collect(),
        }
    }

    fn seq_log_likelihood(&self, c: usize, s: &Sequence) -> f64 {
        let comp = &self.components[c];
        comp.initial[s.first].ln()
            + s.pairs
                .iter()
                .map(|(a, b, n)| n * comp.transitions[*a][*b].ln())
                .sum::<f64>()
    }

    pub fn log_likelihood(&self, component: usize, log: &StudentLog, complete: bool) -> f64 {
        self.seq_log_likelihood(component, &self.encode(log, complete))
    }

    /// Component with the largest posterior, ties to the lowest index.
    pub fn assign(&self, log: &StudentLog, complete: bool) -> usize {
        let s = self.encode(log, complete);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (c, comp) in self.components.iter().enumerate() {
            let v = comp.weight.ln() + self.seq_log_likelihood(c, &s);
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        best
    }

    /// Component with the largest weight, ties to the lowest index.
    pub fn heaviest(&self) -> usize {
        let mut best = 0;
        for (c, comp) in self.components.iter().enumerate() {
            if comp.weight > self.components[best].weight {
                best = c;
            }
        }
        best
    }

    fn posteriors(&self, seqs: &[Sequence]) -> (Vec<Vec<f64>>, f64) {
        let mut ll = 0.0;
        let resp = seqs
            .iter()
            .map(|s| {
                let j: Vec<f64> = (0..self.components.len())
                    .map(|c| self.components[c].weight.ln() + self.seq_log_likelihood(c, s))
                    .collect();
                let z = log_sum_exp(&j);
                ll += z;
                j.into_iter().map(|v| (v - z).exp()).collect()
            })
            .collect();
        (resp, ll)
    }

    fn m_step(&mut self, seqs: &[Sequence], resp: &[Vec<f64>]) {
        let s = self.symbols();
        let k = self.components.len();
        let n = seqs.len() as f64;
        for c in 0..k {
            let nc: f64 = resp.iter().map(|r| r[c]).sum();
            let mut init = vec![PSEUDOCOUNT; s];
            let mut trans = vec![vec![PSEUDOCOUNT; s]; s];
            for (seq, r) in seqs.iter().zip(resp) {
                init[seq.first] += r[c];
                for (a, b, cnt) in &seq.pairs {
                    trans[*a][*b] += r[c] * cnt;
                }
            }
            normalize(&mut init);
            trans.iter_mut().for_each(|row| normalize(row));
            self.components[c] = MarkovComponent {
                weight: (nc + PSEUDOCOUNT) / (n + k as f64 * PSEUDOCOUNT),
                initial: init,
                transitions: trans,
            };
        }
    }

    /// Log of the Dirichlet prior density up to a constant.
    fn log_prior(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight.ln()
                    + c.initial.iter().map(|p| p.ln()).sum::<f64>()
                    + c.transitions.iter().flatten().map(|p| p.ln()).sum::<f64>()
            })
            .sum::<f64>()
            * PSEUDOCOUNT
    }
}

fn normalize(v: &mut [f64]) {
    let t: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= t);
}

pub(crate) struct Fit {
    pub mixture: MarkovMixture,
    pub log_likelihood: f64,
    /// Penalized objective after each iteration.
    pub objective: Vec<f64>,
}

/// One EM run from a random hard partition.
pub(crate) fn fit_once<R: Rng>(
    alphabet: &[EventSignature],
    seqs: &[Sequence],
    k: usize,
    rng: &mut R,
) -> Fit {
    let s = alphabet.len() + 2;
    let empty = MarkovComponent {
        weight: 1.0 / k as f64,
        initial: vec![1.0 / s as f64; s],
        transitions: vec![vec![1.0 / s as f64; s]; s],
    };
    let mut m = MarkovMixture {
        alphabet: alphabet.to_vec(),
        components: vec![empty; k],
    };
    let mut labels: Vec<usize> = (0..seqs.len()).map(|i| i % k).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let mut resp: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| (0..k).map(|c| if c == *l { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut objective = Vec::new();
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        m.m_step(seqs, &resp);
        let (r, l) = m.posteriors(seqs);
        resp = r;
        ll = l;
        let obj = l + m.log_prior();
        let done = objective
            .last()
            .is_some_and(|prev: &f64| obj - prev < TOLERANCE * prev.abs().max(1.0));
        objective.push(obj);
        if done {
            break;
        }
    }
    Fit {
        mixture: m,
        log_likelihood: ll,
        objective,
    }
}

/// Free parameters counted over the transitions the data can inform.
fn effective_parameters(seqs: &[Sequence], k: usize) -> f64 {
    let firsts: BTreeSet<usize> = seqs.iter().map(|s| s.first).collect();
    let pairs: BTreeSet<(usize, usize)> = seqs
        .iter()
        .flat_map(|s| s.pairs.iter().map(|(a, b, _)| (*a, *b)))
        .collect();
    let rows: BTreeSet<usize> = pairs.iter().map(|(a, _)| *a).collect();
    let per = (pairs.len() - rows.len() + firsts.len() - 1) as f64;
    k as f64 * per + (k - 1) as f64
}

pub(crate) fn alphabet(logs: &[StudentLog]) -> Vec<EventSignature> {
    let set: BTreeSet<EventSignature> = logs
        .iter()
        .flat_map(|l| l.events.iter().map(EventSignature::of))
        .collect();
    set.into_iter().collect()
}

/// Picks the number of components by BIC, stopping after two sizes fail to
/// beat the best. Components are numbered by their first member.
pub(crate) fn sequence_cluster<R: Rng>(
    logs: &[StudentLog],
    k_max: usize,
    rng: &mut R,
) -> (MarkovMixture, Vec<usize>) {
    let alphabet = alphabet(logs);
    let probe = MarkovMixture {
        alphabet: alphabet.clone(),
        components: Vec::new(),
    };
    let seqs: Vec<Sequence> = logs.iter().map(|l| probe.encode(l, l.completed)).collect();
    let n = seqs.len() as f64;
    let mut best: Option<(f64, MarkovMixture)> = None;
    let mut misses = 0;
    for k in 1..=k_max.min(logs.len()) {
        let fit = (0..if k == 1 { 1 } else { RESTARTS })
            .map(|_| fit_once(&alphabet, &seqs, k, rng))
            .max_by(|a, b| {
                a.objective
                    .last()
                    .unwrap()
                    .total_cmp(b.objective.last().unwrap())
            })
            .expect("at least one restart");
        let bic = fit.log_likelihood - effective_parameters(&seqs, k) / 2.0 * n.ln();
        if best.as_ref().is_none_or(|(b, _)| bic > *b) {
            best = Some((bic, fit.mixture));
            misses = 0;
        } else {
            misses += 1;
            if misses == 2 {
                break;
            }
        }
    }
    let mixture = best.expect("k = 1 always fits").1;
    let (resp, _) = mixture.posteriors(&seqs);
    let labels: Vec<usize> = resp
        .iter()
        .map(|r| {
            let mut b = 0;
            for (c, v) in r.iter().enumerate() {
                if *v > r[b] {
                    b = c;
                }
            }
            b
        })
        .collect();
    let mut order = Vec::new();
    for l in &labels {
        if !order.contains(l) {
            order.push(*l);
        }
    }
    let total: f64 = order.iter().map(|c| mixture.components[*c].weight).sum();
    let components = order
        .iter()
        .map(|c| {
            let mut comp = mixture.components[*c].clone();
            comp.weight /= total;
            comp
        })
        .collect();
    let labels = labels
        .iter()
        .map(|l| order.iter().position(|o| o == l).unwrap())
        .collect();
    (
        MarkovMixture {
            alphabet,
            components,
        },
        labels,
    )
}
