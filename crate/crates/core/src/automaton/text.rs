//! Line-oriented text form of an automaton.
//!
//! ```text
//! cohort_size  3
//! state   0  correct     3  -
//! state   1  correct     3  done=A|unrepaired=|last=do:A:none:0|burst=0
//! normal  0  1  do:A:none:0  3
//! vector  4  2  do:B:none:0  0,1
//! ```
//!
//! Fields are tab-separated. States are numbered breadth-first from the
//! initial state, so two automata with the same structure and counts have
//! identical text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use super::{
    EventSignature, ExtendedAutomaton, Frequency, SituationKey, State, StateId, Transition, Zone,
};
use crate::error::{Error, Result};
use crate::eventlog::ActionId;

impl ExtendedAutomaton {
    /// Canonical text form; see [`write_automaton`].
    pub fn to_text(&self) -> String {
        write_automaton(self)
    }

    /// Canonical state numbering without mutating the automaton.
    pub fn canonical_ids(&self) -> BTreeMap<StateId, StateId> {
        self.bfs_order()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, StateId(i as u32)))
            .collect()
    }
}

pub fn write_automaton(a: &ExtendedAutomaton) -> String {
    let ids = a.canonical_ids();
    let mut by_new: Vec<&State> = a.states().collect();
    by_new.sort_by_key(|s| ids[&s.id]);

    let mut out = String::new();
    let _ = writeln!(out, "cohort_size\t{}", a.cohort_size());
    for s in &by_new {
        let key = s.key.as_ref().map_or_else(|| "-".to_string(), encode_key);
        let _ = writeln!(
            out,
            "state\t{}\t{}\t{}\t{}",
            ids[&s.id],
            s.zone.as_str(),
            s.gamma,
            key
        );
    }
    let mut transitions: Vec<&Transition> = a.transitions().collect();
    transitions.sort_by(|x, y| (ids[&x.src], &x.sig).cmp(&(ids[&y.src], &y.sig)));
    for t in transitions {
        match &t.freq {
            Frequency::Normal(n) => {
                let _ = writeln!(
                    out,
                    "normal\t{}\t{}\t{}\t{}",
                    ids[&t.src],
                    ids[&t.dst],
                    encode_sig(&t.sig),
                    n
                );
            }
            Frequency::Vector(v) => {
                let cells: Vec<String> = v.iter().map(u64::to_string).collect();
                let _ = writeln!(
                    out,
                    "vector\t{}\t{}\t{}\t{}",
                    ids[&t.src],
                    ids[&t.dst],
                    encode_sig(&t.sig),
                    cells.join(",")
                );
            }
        }
    }
    out
}

/// Parses the output of [`write_automaton`], checking that every key and
/// transition is consistent with the situation rules.
pub fn parse_automaton(text: &str) -> Result<ExtendedAutomaton> {
    let mut a = ExtendedAutomaton::new();
    a.states.clear();
    let mut cohort = None;
    let mut max_id = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::parse(line_no, m.to_string());
        match f[0] {
            "cohort_size" if f.len() == 2 => {
                cohort = Some(
                    f[1].parse::<u64>()
                        .map_err(|_| bad("invalid cohort size"))?,
                );
            }
            "state" if f.len() == 5 => {
                let id = StateId(f[1].parse().map_err(|_| bad("invalid state id"))?);
                let zone = Zone::parse(f[2]).ok_or_else(|| bad("invalid zone"))?;
                let gamma: u64 = f[3].parse().map_err(|_| bad("invalid gamma"))?;
                let key = if f[4] == "-" {
                    None
                } else {
                    Some(decode_key(f[4]).ok_or_else(|| bad("invalid situation key"))?)
                };
                if (id == StateId::INITIAL) != key.is_none() {
                    return Err(bad("only the initial state has no key"));
                }
                if let Some(k) = &key {
                    if k.zone() != zone {
                        return Err(bad("zone does not match situation key"));
                    }
                    if a.index.insert(k.clone(), id).is_some() {
                        return Err(bad("duplicate situation key"));
                    }
                }
                if a.states
                    .insert(
                        id,
                        State {
                            id,
                            key,
                            zone,
                            gamma,
                        },
                    )
                    .is_some()
                {
                    return Err(bad("duplicate state id"));
                }
                max_id = max_id.max(id.0);
            }
            kind @ ("normal" | "vector") if f.len() == 5 => {
                let src = StateId(f[1].parse().map_err(|_| bad("invalid source id"))?);
                let dst = StateId(f[2].parse().map_err(|_| bad("invalid target id"))?);
                let sig = decode_sig(f[3]).ok_or_else(|| bad("invalid event signature"))?;
                let freq = if kind == "normal" {
                    Frequency::Normal(f[4].parse().map_err(|_| bad("invalid frequency"))?)
                } else {
                    Frequency::Vector(
                        f[4].split(',')
                            .map(|c| c.parse::<u64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("invalid frequency vector"))?,
                    )
                };
                let src_state = a
                    .states
                    .get(&src)
                    .ok_or_else(|| bad("unknown source state"))?;
                let dst_state = a
                    .states
                    .get(&dst)
                    .ok_or_else(|| bad("unknown target state"))?;
                if (src_state.zone == Zone::IrrelevantError) != (kind == "vector") {
                    return Err(bad("vector transitions must leave blocked-attempt states"));
                }
                let expected = SituationKey::after(src_state.key.as_ref(), &sig);
                if dst_state.key.as_ref() != Some(&expected) {
                    return Err(bad("transition target does not match its event"));
                }
                if a.transitions
                    .insert(
                        (src, sig.clone()),
                        Transition {
                            src,
                            dst,
                            sig,
                            freq,
                        },
                    )
                    .is_some()
                {
                    return Err(bad("duplicate transition"));
                }
            }
            _ => return Err(bad("unrecognized automaton record")),
        }
    }
    a.cohort_size = cohort.ok_or_else(|| Error::Load("automaton lacks cohort_size".into()))?;
    match a.states.get(&StateId::INITIAL) {
        Some(s) if s.gamma == a.cohort_size => {}
        _ => {
            return Err(Error::Load(
                "initial state missing or inconsistent with cohort size".into(),
            ))
        }
    }
    a.next_id = max_id + 1;
    Ok(a)
}

pub(crate) fn encode_sig(s: &EventSignature) -> String {
    format!(
        "{}:{}:{}:{}",
        s.kind,
        s.action,
        s.error_class,
        u8::from(s.corrective)
    )
}

pub(crate) fn decode_sig(s: &str) -> Option<EventSignature> {
    let mut parts = s.split(':');
    let kind = parts.next()?.parse().ok()?;
    let action = ActionId::new(parts.next()?).ok()?;
    let error_class = parts.next()?.parse().ok()?;
    let corrective = match parts.next()? {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    if parts.next().is_some() {
        return None;
    }
    Some(EventSignature {
        kind,
        action,
        error_class,
        corrective,
    })
}

pub(crate) fn encode_key(k: &SituationKey) -> String {
    let done: Vec<&str> = k.done().iter().map(ActionId::as_str).collect();
    let unrepaired: Vec<String> = k.unrepaired().iter().map(encode_sig).collect();
    format!(
        "done={}|unrepaired={}|last={}|burst={}",
        done.join(","),
        unrepaired.join(","),
        encode_sig(k.last()),
        k.burst()
    )
}

pub(crate) fn decode_key(s: &str) -> Option<SituationKey> {
    let fields: HashMap<&str, &str> = s.split('|').filter_map(|p| p.split_once('=')).collect();
    if fields.len() != 4 {
        return None;
    }
    let list = |v: &str| -> Vec<String> {
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(',').map(str::to_string).collect()
        }
    };
    let done = list(fields.get("done")?)
        .into_iter()
        .map(ActionId::new)
        .collect::<Result<Vec<_>>>()
        .ok()?;
    if done.windows(2).any(|w| w[0] > w[1]) {
        return None;
    }
    let unrepaired = list(fields.get("unrepaired")?)
        .iter()
        .map(|x| decode_sig(x))
        .collect::<Option<Vec<_>>>()?;
    Some(SituationKey::new(
        done,
        unrepaired,
        decode_sig(fields.get("last")?)?,
        fields.get("burst")?.parse().ok()?,
    ))
}
