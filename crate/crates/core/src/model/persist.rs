//! Model files.
//!
//! ```text
//! csm-model	1
//! checksum	1a2b3c4d
//! [meta]
//! ...
//! [clustering]
//! ...
//! [cluster 0 automaton]
//! ...
//! [cluster 0 members]
//! ...
//! [cluster 0 reach]
//! ...
//! ```
//!
//! The checksum is the CRC-32 of everything after the checksum line. Floats
//! are written in their shortest round-trip form, so saving a loaded model
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{Checkpoint, Cluster, CollectiveModel, ModelConfig, Provenance};
use crate::automaton::text::{decode_sig, encode_sig};
use crate::automaton::{parse_automaton, write_automaton, StateId};
use crate::clustering::{
    ClusterModel, Clustering, ErrorWeights, GaussianMixture, MarkovComponent, MarkovMixture,
    Method, Normalization,
};
use crate::error::{Error, Result};
use crate::eventlog::{parse_logs, write_logs, ActionId, ErrorClass, StudentLog};
use crate::prediction::{compute_reach_table, ReachTable};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "csm-model";

fn floats(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn save_model(m: &CollectiveModel) -> String {
    let mut body = String::new();
    write_meta(&mut body, &m.config, &m.provenance);
    write_clustering(&mut body, &m.clustering);
    for (i, c) in m.clusters.iter().enumerate() {
        let _ = writeln!(body, "[cluster {i} automaton]");
        body.push_str(&write_automaton(&c.automaton));
        let _ = writeln!(body, "[cluster {i} members]");
        for s in c.members.keys() {
            let _ = writeln!(body, "member\t{s}");
        }
        let logs: Vec<StudentLog> = c.members.values().cloned().collect();
        body.push_str(&write_logs(&logs));
        let _ = writeln!(body, "[cluster {i} reach]");
        let ids = c.automaton.canonical_ids();
        for (s, e, n) in c.reach.renumbered(&ids).iter() {
            let _ = writeln!(body, "reach\t{s}\t{e}\t{n}");
        }
    }
    format!(
        "{MAGIC}\t{SCHEMA_VERSION}\nchecksum\t{:08x}\n{body}",
        crc32fast::hash(body.as_bytes())
    )
}

fn write_meta(out: &mut String, config: &ModelConfig, p: &Provenance) {
    out.push_str("[meta]\n");
    let _ = writeln!(out, "seed\t{}", p.seed);
    let _ = writeln!(out, "built_at\t{}", p.built_at);
    let _ = writeln!(out, "method\t{}", config.method);
    let _ = writeln!(
        out,
        "feature\t{}",
        config.feature.map_or("-".to_string(), |f| f.to_string())
    );
    let _ = writeln!(out, "k_max\t{}", config.k_max);
    for (class, w) in config.weights.iter() {
        let _ = writeln!(out, "weight\t{class}\t{w}");
    }
    for cp in &config.checkpoints {
        let _ = writeln!(out, "checkpoint\t{cp}");
    }
    for a in &config.relevance.irrelevant_actions {
        let _ = writeln!(out, "irrelevant\t{a}");
    }
    let _ = writeln!(
        out,
        "keep_irrelevant_as_correct\t{}",
        u8::from(config.relevance.keep_irrelevant_as_correct)
    );
}

fn write_normalization(out: &mut String, n: &Normalization) {
    let _ = writeln!(out, "norm_mean\t{}", floats(&n.mean));
    let _ = writeln!(out, "norm_std\t{}", floats(&n.std));
}

fn write_clustering(out: &mut String, c: &Clustering) {
    out.push_str("[clustering]\n");
    let _ = writeln!(out, "k\t{}", c.k);
    for (s, k) in &c.assignment {
        let _ = writeln!(out, "assign\t{s}\t{k}");
    }
    match &c.model {
        ClusterModel::Single => out.push_str("model\tsingle\n"),
        ClusterModel::Centroids {
            normalization,
            centroids,
        } => {
            out.push_str("model\tcentroids\n");
            write_normalization(out, normalization);
            for x in centroids {
                let _ = writeln!(out, "centroid\t{}", floats(x));
            }
        }
        ClusterModel::Gaussian {
            normalization,
            mixture,
        } => {
            out.push_str("model\tgaussian\n");
            write_normalization(out, normalization);
            for i in 0..mixture.weights.len() {
                let _ = writeln!(
                    out,
                    "component\t{}\t{}\t{}",
                    mixture.weights[i],
                    floats(&mixture.means[i]),
                    floats(&mixture.variances[i])
                );
            }
        }
        ClusterModel::Markov(m) => {
            out.push_str("model\tmarkov\n");
            for s in &m.alphabet {
                let _ = writeln!(out, "symbol\t{}", encode_sig(s));
            }
            for (i, comp) in m.components.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "chain\t{i}\t{}\t{}",
                    comp.weight,
                    floats(&comp.initial)
                );
                for (a, row) in comp.transitions.iter().enumerate() {
                    let _ = writeln!(out, "row\t{i}\t{a}\t{}", floats(row));
                }
            }
        }
    }
}

/// A section of a model file: header and `(line number, line)` pairs.
struct Section<'a> {
    header: &'a str,
    lines: Vec<(usize, &'a str)>,
}

fn is_header(line: &str) -> bool {
    let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) else {
        return false;
    };
    match inner {
        "meta" | "clustering" => true,
        _ => {
            let parts: Vec<&str> = inner.split(' ').collect();
            parts.len() == 3
                && parts[0] == "cluster"
                && parts[1].parse::<usize>().is_ok()
                && matches!(parts[2], "automaton" | "members" | "reach")
        }
    }
}

fn parse_float(line_no: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|f| f.is_finite())
        .ok_or_else(|| Error::parse(line_no, format!("invalid number {s:?}")))
}

fn parse_floats(line_no: usize, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_float(line_no, x)).collect()
}

fn fields(line_no: usize, line: &str, n: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::parse(line_no, format!("expected {n} fields")));
    }
    Ok(f)
}

pub fn load_model(text: &str) -> Result<CollectiveModel> {
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().unwrap_or("").trim_end_matches('\n');
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.strip_prefix('\t'))
        .ok_or_else(|| Error::Load("not a model file".into()))?;
    let found: u32 = version
        .parse()
        .map_err(|_| Error::Load(format!("invalid schema version {version:?}")))?;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let second = lines.next().unwrap_or("").trim_end_matches('\n');
    let stored = second
        .strip_prefix("checksum\t")
        .and_then(|c| u32::from_str_radix(c, 16).ok())
        .ok_or_else(|| Error::Load("missing checksum".into()))?;
    let body_start = first.len() + second.len() + 2;
    let body = text.get(body_start..).unwrap_or("");
    let computed = crc32fast::hash(body.as_bytes());
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut sections: Vec<Section> = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 3;
        if is_header(line) {
            sections.push(Section {
                header: line,
                lines: Vec::new(),
            });
        } else if let Some(s) = sections.last_mut() {
            s.lines.push((line_no, line));
        } else if !line.is_empty() {
            return Err(Error::parse(line_no, "content before the first section"));
        }
    }
    let mut it = sections.into_iter();
    let meta = it
        .next()
        .filter(|s| s.header == "[meta]")
        .ok_or_else(|| Error::Load("missing [meta]".into()))?;
    let (config, provenance) = read_meta(&meta)?;
    let cl = it
        .next()
        .filter(|s| s.header == "[clustering]")
        .ok_or_else(|| Error::Load("missing [clustering]".into()))?;
    let clustering = read_clustering(&cl, &config)?;

    let rest: Vec<Section> = it.collect();
    if rest.len() != 3 * clustering.k {
        return Err(Error::Load(format!(
            "expected {} cluster sections",
            3 * clustering.k
        )));
    }
    let mut clusters = Vec::new();
    for (i, chunk) in rest.chunks(3).enumerate() {
        for (s, kind) in chunk.iter().zip(["automaton", "members", "reach"]) {
            if s.header != format!("[cluster {i} {kind}]") {
                return Err(Error::Load(format!("unexpected section {}", s.header)));
            }
        }
        clusters.push(read_cluster(i, &chunk[0], &chunk[1], &chunk[2])?);
    }
    let m = CollectiveModel {
        clustering,
        clusters,
        config,
        provenance,
    };
    m.check().map_err(|e| Error::Load(e.to_string()))?;
    Ok(m)
}

fn read_meta(s: &Section) -> Result<(ModelConfig, Provenance)> {
    let mut config = ModelConfig::default();
    let mut weights = Vec::new();
    let mut seed = None;
    let mut built_at = None;
    for (n, line) in &s.lines {
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(*n, "expected key and value"))?;
        let bad = |m: &str| Error::parse(*n, m.to_string());
        match key {
            "seed" => seed = Some(value.parse().map_err(|_| bad("invalid seed"))?),
            "built_at" => built_at = Some(parse_float(*n, value)?),
            "method" => config.method = value.parse()?,
            "feature" => {
                config.feature = if value == "-" {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "k_max" => config.k_max = value.parse().map_err(|_| bad("invalid k_max"))?,
            "weight" => {
                let (c, w) = value
                    .split_once('\t')
                    .ok_or_else(|| bad("expected class and weight"))?;
                let class: ErrorClass = c.parse().map_err(|e: String| bad(&e))?;
                weights.push((class, parse_float(*n, w)?));
            }
            "checkpoint" => config.checkpoints.push(value.parse::<Checkpoint>()?),
            "irrelevant" => {
                config
                    .relevance
                    .irrelevant_actions
                    .insert(ActionId::new(value)?);
            }
            "keep_irrelevant_as_correct" => {
                config.relevance.keep_irrelevant_as_correct = match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("expected 0 or 1")),
                }
            }
            _ => return Err(bad("unknown meta field")),
        }
    }
    config.weights = ErrorWeights::new(weights)?;
    Ok((
        config,
        Provenance {
            seed: seed.ok_or_else(|| Error::Load("missing seed".into()))?,
            built_at: built_at.ok_or_else(|| Error::Load("missing built_at".into()))?,
        },
    ))
}

fn read_clustering(s: &Section, config: &ModelConfig) -> Result<Clustering> {
    let mut k = None;
    let mut assignment = BTreeMap::new();
    let mut kind = None;
    let (mut mean, mut std) = (None, None);
    let mut centroids = Vec::new();
    let mut gaussian = GaussianMixture {
        weights: Vec::new(),
        means: Vec::new(),
        variances: Vec::new(),
    };
    let mut alphabet = Vec::new();
    let mut chains: Vec<MarkovComponent> = Vec::new();
    for (n, line) in &s.lines {
        let n = *n;
        let bad = |m: &str| Error::parse(n, m.to_string());
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "k" if f.len() == 2 => k = Some(f[1].parse::<usize>().map_err(|_| bad("invalid k"))?),
            "assign" if f.len() == 3 => {
                let c: usize = f[2].parse().map_err(|_| bad("invalid cluster index"))?;
                if assignment.insert(f[1].to_string(), c).is_some() {
                    return Err(bad("duplicate assignment"));
                }
            }
            "model" if f.len() == 2 => kind = Some(f[1].to_string()),
            "norm_mean" if f.len() == 2 => mean = Some(parse_floats(n, f[1])?),
            "norm_std" if f.len() == 2 => std = Some(parse_floats(n, f[1])?),
            "centroid" if f.len() == 2 => centroids.push(parse_floats(n, f[1])?),
            "component" if f.len() == 4 => {
                gaussian.weights.push(parse_float(n, f[1])?);
                gaussian.means.push(parse_floats(n, f[2])?);
                gaussian.variances.push(parse_floats(n, f[3])?);
            }
            "symbol" if f.len() == 2 => {
                alphabet.push(decode_sig(f[1]).ok_or_else(|| bad("invalid signature"))?)
            }
            "chain" if f.len() == 4 => {
                if f[1].parse::<usize>().ok() != Some(chains.len()) {
                    return Err(bad("chains out of order"));
                }
                chains.push(MarkovComponent {
                    weight: parse_float(n, f[2])?,
                    initial: parse_floats(n, f[3])?,
                    transitions: Vec::new(),
                });
            }
            "row" if f.len() == 4 => {
                let c: usize = f[1].parse().map_err(|_| bad("invalid chain index"))?;
                let a: usize = f[2].parse().map_err(|_| bad("invalid row index"))?;
                let chain = chains
                    .get_mut(c)
                    .ok_or_else(|| bad("row for unknown chain"))?;
                if chain.transitions.len() != a {
                    return Err(bad("rows out of order"));
                }
                chain.transitions.push(parse_floats(n, f[3])?);
            }
            _ => return Err(bad("unrecognized clustering record")),
        }
    }
    let k = k.ok_or_else(|| Error::Load("clustering lacks k".into()))?;
    let normalization = || -> Result<Normalization> {
        match (mean.clone(), std.clone()) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Normalization { mean, std }),
            _ => Err(Error::Load("missing or inconsistent normalization".into())),
        }
    };
    let model = match kind.as_deref() {
        Some("single") => ClusterModel::Single,
        Some("centroids") => ClusterModel::Centroids {
            normalization: normalization()?,
            centroids,
        },
        Some("gaussian") => ClusterModel::Gaussian {
            normalization: normalization()?,
            mixture: gaussian,
        },
        Some("markov") => {
            let symbols = alphabet.len() + 2;
            let ok = chains.iter().all(|c| {
                c.initial.len() == symbols
                    && c.transitions.len() == symbols
                    && c.transitions.iter().all(|r| r.len() == symbols)
            });
            if !ok {
                return Err(Error::Load(
                    "Markov chain dimensions do not match the alphabet".into(),
                ));
            }
            ClusterModel::Markov(MarkovMixture {
                alphabet,
                components: chains,
            })
        }
        _ => return Err(Error::Load("missing clustering model".into())),
    };
    let expected_k = match (&model, config.method) {
        (ClusterModel::Single, Method::None) => 1,
        (ClusterModel::Centroids { centroids, .. }, Method::XMeans) => centroids.len(),
        (ClusterModel::Gaussian { mixture, .. }, Method::Em) => mixture.means.len(),
        (ClusterModel::Markov(m), Method::Sequence) => m.components.len(),
        _ => {
            return Err(Error::Load(
                "clustering model does not match the method".into(),
            ))
        }
    };
    if expected_k != k || assignment.values().any(|c| *c >= k) {
        return Err(Error::Load("cluster count is inconsistent".into()));
    }
    Ok(Clustering {
        method: config.method,
        feature: config.feature,
        weights: config.weights.clone(),
        k,
        assignment,
        model,
    })
}

fn read_cluster(
    i: usize,
    automaton: &Section,
    members: &Section,
    reach: &Section,
) -> Result<Cluster> {
    let text: String = automaton
        .lines
        .iter()
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    let automaton =
        parse_automaton(&text).map_err(|e| Error::Load(format!("cluster {i} automaton: {e}")))?;

    let mut ids = Vec::new();
    let mut log_text = String::new();
    for (_, line) in &members.lines {
        match line.strip_prefix("member\t") {
            Some(id) => ids.push(id.to_string()),
            None => {
                log_text.push_str(line);
                log_text.push('\n');
            }
        }
    }
    let mut logs: BTreeMap<String, StudentLog> = parse_logs(&log_text)
        .map_err(|e| Error::Load(format!("cluster {i} members: {e}")))?
        .into_iter()
        .map(|l| (l.student.clone(), l))
        .collect();
    let mut registry = BTreeMap::new();
    for id in ids {
        let log = logs
            .remove(&id)
            .unwrap_or_else(|| StudentLog::new(id.clone(), Vec::new(), false));
        registry.insert(id, log);
    }
    if !logs.is_empty() {
        return Err(Error::Load(format!(
            "cluster {i}: logs of unlisted members"
        )));
    }

    let mut table = ReachTable::default();
    for (n, line) in &reach.lines {
        let f = fields(*n, line, 4)?;
        if f[0] != "reach" {
            return Err(Error::parse(*n, "expected a reach record"));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::parse(*n, "invalid reach record"))
        };
        let count = f[3]
            .parse::<u64>()
            .map_err(|_| Error::parse(*n, "invalid reach count"))?;
        table.insert(StateId(parse(f[1])?), StateId(parse(f[2])?), count);
    }
    let member_logs: Vec<StudentLog> = registry.values().cloned().collect();
    let recomputed = compute_reach_table(&automaton, &member_logs).map_err(|e| {
        Error::Load(format!(
            "cluster {i}: members do not match the automaton: {e}"
        ))
    })?;
    if recomputed != table {
        return Err(Error::Load(format!(
            "cluster {i}: reach table does not match the members"
        )));
    }
    let rebuilt = crate::automaton::ExtendedAutomaton::build(&member_logs);
    if rebuilt != automaton {
        return Err(Error::Load(format!(
            "cluster {i}: automaton does not match the members"
        )));
    }
    Ok(Cluster {
        automaton,
        members: registry,
        reach: table,
    })
}
