use std::fmt::Write;

use super::{ExtendedAutomaton, Frequency, State, Transition};

/// Graphviz rendering. States show their support and edges their confidence
/// as percentages; vector edges also list their per-repeat counts.
pub fn export_dot(a: &ExtendedAutomaton) -> String {
    let ids = a.canonical_ids();
    let mut states: Vec<&State> = a.states().collect();
    states.sort_by_key(|s| ids[&s.id]);
    let cohort = a.cohort_size();

    let mut out = String::new();
    out.push_str("digraph automaton {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [shape=circle, style=filled, fontname=\"Helvetica\"];\n");
    for s in &states {
        let name = match &s.key {
            None => "start".to_string(),
            Some(k) => k.last().to_string(),
        };
        let _ = writeln!(
            out,
            "  s{} [label=\"{}\\n{}\", fillcolor={}];",
            ids[&s.id],
            name,
            percent(s.gamma, cohort),
            s.zone.color()
        );
    }
    let mut transitions: Vec<&Transition> = a.transitions().collect();
    transitions.sort_by(|x, y| (ids[&x.src], &x.sig).cmp(&(ids[&y.src], &y.sig)));
    for t in transitions {
        let gamma = a.state(t.src).map_or(0, |s| s.gamma);
        let label = match &t.freq {
            Frequency::Normal(n) => format!("{} / {}", t.sig, percent(*n, gamma)),
            Frequency::Vector(v) => {
                let cells: Vec<String> = v.iter().map(|c| percent(*c, gamma)).collect();
                format!("{} / [{}]", t.sig, cells.join(", "))
            }
        };
        let style = if t.is_vector() { ", style=bold" } else { "" };
        let _ = writeln!(
            out,
            "  s{} -> s{} [label=\"{}\"{}];",
            ids[&t.src], ids[&t.dst], label, style
        );
    }
    out.push_str("}\n");
    out
}

/// `n / d` as a percentage with at most one decimal, e.g. `40%`, `33.3%`.
fn percent(n: u64, d: u64) -> String {
    if d == 0 {
        return "-".to_string();
    }
    let tenths = (n as f64 * 1000.0 / d as f64).round() as u64;
    if tenths.is_multiple_of(10) {
        format!("{}%", tenths / 10)
    } else {
        format!("{}.{}%", tenths / 10, tenths % 10)
    }
}
