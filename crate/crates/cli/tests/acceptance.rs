//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs with its own harness so the lines always reach the terminal:
//! `cargo test -p csm-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use csm::automaton::{ExtendedAutomaton, Frequency, StateId};
use csm::clustering::{FeatureKind, Method};
use csm::eventlog::{
    generate_cohort, ActionId, ErrorClass, ErrorProfile, EventKind, EventRecord, ProtocolSpec,
    StudentLog,
};
use csm::fixtures::figure3;
use csm::model::{build_model, Cluster, ModelConfig};
use csm::prediction::flounder_risk;
use csm::validation::{align, cross_validate, grid_errors, mean_error, Grid, SubmodelFilter};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Brute-force model of the situation graph, written from the definitions.

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Sig {
    kind: EventKind,
    action: String,
    class: ErrorClass,
    corrective: bool,
}

impl Sig {
    fn of(e: &EventRecord) -> Sig {
        Sig {
            kind: e.kind,
            action: e.action.as_str().to_string(),
            class: e.error_class,
            corrective: e.corrective,
        }
    }

    fn text(&self) -> String {
        format!("{} {}", self.kind, self.action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Key {
    done: Vec<String>,
    unrepaired: Vec<Sig>,
    last: Sig,
    burst: u32,
}

fn next_key(prev: Option<&Key>, s: &Sig) -> Key {
    let mut done = prev.map(|k| k.done.clone()).unwrap_or_default();
    let mut unrepaired = prev.map(|k| k.unrepaired.clone()).unwrap_or_default();
    let mut burst = 0;
    match s.kind {
        EventKind::Try => burst = prev.map_or(0, |k| k.burst) + 1,
        EventKind::Fail => unrepaired.push(s.clone()),
        EventKind::Do => {
            done.push(s.action.clone());
            done.sort();
            if s.corrective && !unrepaired.is_empty() {
                match unrepaired.iter().position(|u| u.action == s.action) {
                    Some(_) => unrepaired.retain(|u| u.action != s.action),
                    None => {
                        unrepaired.remove(0);
                    }
                }
            }
        }
    }
    Key {
        done,
        unrepaired,
        last: s.clone(),
        burst,
    }
}

fn lib_key(a: &ExtendedAutomaton, s: StateId) -> Option<Key> {
    let k = a.state(s)?.key.as_ref()?;
    let conv = |e: &csm::automaton::EventSignature| Sig {
        kind: e.kind,
        action: e.action.as_str().to_string(),
        class: e.error_class,
        corrective: e.corrective,
    };
    Some(Key {
        done: k.done().iter().map(|a| a.as_str().to_string()).collect(),
        unrepaired: k.unrepaired().iter().map(conv).collect(),
        last: conv(k.last()),
        burst: k.burst(),
    })
}

/// One walked step: source situation (`None` = start), event, extra repeats
/// of the blocked attempt just left, reached situation.
struct Step {
    src: Option<Key>,
    sig: Sig,
    run: u32,
    dst: Key,
}

fn walk(log: &StudentLog) -> Vec<Step> {
    let mut out: Vec<Step> = Vec::new();
    let mut run = 0;
    for e in &log.events {
        let sig = Sig::of(e);
        if let Some(prev) = out.last() {
            if sig.kind == EventKind::Try && prev.sig == sig {
                run += 1;
                continue;
            }
        }
        let src = out.last().map(|s| s.dst.clone());
        let dst = next_key(src.as_ref(), &sig);
        out.push(Step { src, sig, run, dst });
        run = 0;
    }
    out
}

fn is_yellow(k: &Option<Key>) -> bool {
    k.as_ref().is_some_and(|k| k.last.kind == EventKind::Try)
}

#[derive(Default)]
struct Counts {
    n: u64,
    gamma: BTreeMap<Option<Key>, u64>,
    phi: BTreeMap<(Option<Key>, Sig), BTreeMap<u32, u64>>,
    dst: BTreeMap<(Option<Key>, Sig), Key>,
    reach: BTreeMap<(Option<Key>, Key), u64>,
}

impl Counts {
    fn of(logs: &[StudentLog]) -> Counts {
        let mut c = Counts {
            n: logs.len() as u64,
            ..Counts::default()
        };
        for log in logs {
            let steps = walk(log);
            let mut visited: Vec<Option<Key>> = vec![None];
            visited.extend(steps.iter().map(|s| Some(s.dst.clone())));
            for k in visited.iter().collect::<BTreeSet<_>>() {
                *c.gamma.entry(k.clone()).or_default() += 1;
            }
            for s in &steps {
                let run = if is_yellow(&s.src) { s.run } else { 0 };
                *c.phi
                    .entry((s.src.clone(), s.sig.clone()))
                    .or_default()
                    .entry(run)
                    .or_default() += 1;
                c.dst.insert((s.src.clone(), s.sig.clone()), s.dst.clone());
            }
            let mut pairs = BTreeSet::new();
            for (j, e) in visited.iter().enumerate() {
                if let Some(e) = e.as_ref().filter(|e| e.last.kind == EventKind::Fail) {
                    for s in &visited[..j] {
                        pairs.insert((s.clone(), e.clone()));
                    }
                }
            }
            for p in pairs {
                *c.reach.entry(p).or_default() += 1;
            }
        }
        c
    }

    fn phi_total(&self, src: &Option<Key>, sig: &Sig) -> u64 {
        self.phi
            .get(&(src.clone(), sig.clone()))
            .map_or(0, |v| v.values().sum())
    }

    fn phi_vector(&self, src: &Option<Key>, sig: &Sig) -> Vec<u64> {
        let Some(v) = self.phi.get(&(src.clone(), sig.clone())) else {
            return Vec::new();
        };
        let len = v.keys().max().map_or(0, |m| *m as usize + 1);
        let mut out = vec![0; len];
        for (i, n) in v {
            out[*i as usize] = *n;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Random cohorts over a small alphabet so that students share situations.

fn random_log(rng: &mut ChaCha8Rng, student: &str, max_events: usize) -> StudentLog {
    let actions = ["A", "B", "C", "D"];
    let len = rng.gen_range(0..=max_events);
    let mut events: Vec<EventRecord> = Vec::with_capacity(len);
    for seq in 0..len as u64 {
        let repeat = events
            .last()
            .filter(|e| e.kind == EventKind::Try && rng.gen_bool(0.4))
            .cloned();
        let e = match repeat {
            Some(mut e) => {
                e.seq = seq;
                e
            }
            None => {
                let action = ActionId::new(actions[rng.gen_range(0..actions.len())]).unwrap();
                let roll: f64 = rng.gen();
                let e = EventRecord::new(student, seq, EventKind::Do, action.clone());
                if roll < 0.5 {
                    if rng.gen_bool(0.2) {
                        e.corrective()
                    } else {
                        e
                    }
                } else if roll < 0.8 {
                    EventRecord::new(student, seq, EventKind::Try, action)
                        .with_class(ErrorClass::Dependency)
                } else {
                    let class = if rng.gen_bool(0.5) {
                        ErrorClass::Dependency
                    } else {
                        ErrorClass::Incompatibility
                    };
                    EventRecord::new(student, seq, EventKind::Fail, action).with_class(class)
                }
            }
        };
        events.push(e.at(1000.0 + 7.0 * seq as f64));
    }
    StudentLog::new(student, events, rng.gen_bool(0.7))
}

fn random_cohort(
    seed: u64,
    min_students: usize,
    max_students: usize,
    max_events: usize,
) -> Vec<StudentLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(min_students..=max_students);
    (0..n)
        .map(|i| random_log(&mut rng, &format!("r{i:02}"), max_events))
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Figure-3 fixture

fn collapsed(log: &StudentLog) -> Vec<String> {
    walk(log).iter().map(|s| s.sig.text()).collect()
}

fn has_window(seq: &[String], w: &[&str]) -> bool {
    seq.windows(w.len())
        .any(|x| x.iter().zip(w).all(|(a, b)| a == b))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let logs = figure3();
    let seqs: Vec<Vec<String>> = logs.iter().map(collapsed).collect();
    let raw: Vec<Vec<String>> = logs
        .iter()
        .map(|l| {
            l.events
                .iter()
                .map(|e| format!("{} {}", e.kind, e.action))
                .collect()
        })
        .collect();
    let n = logs.len() as f64;
    let count = |pred: &dyn Fn(usize) -> bool| (0..logs.len()).filter(|i| pred(*i)).count() as f64;

    // Plain counting over the raw logs.
    let state1 = count(&|i| seqs[i].first().map(String::as_str) == Some("do 1"));
    let yellow2 = count(&|i| seqs[i].starts_with(&["do 1".to_string(), "try 3".to_string()]));
    let oracle_conf = yellow2 / state1;
    let oracle_red5 = count(&|i| has_window(&seqs[i], &["do 6", "fail 5"])) / n;
    let white2 = count(&|i| seqs[i].iter().any(|s| s == "do 2"));
    let oracle_reach_ac =
        count(&|i| seqs[i].iter().any(|s| s == "do 2") && seqs[i].iter().any(|s| s == "fail AC"))
            / white2;
    let three_first = |i: usize| {
        let p3 = seqs[i].iter().position(|s| s == "do 3");
        let p4 = seqs[i].iter().position(|s| s == "do 4");
        matches!((p3, p4), (Some(a), Some(b)) if a < b)
    };
    let oracle_reach_5 = count(&|i| three_first(i) && has_window(&seqs[i], &["do 6", "fail 5"]))
        / count(&|i| three_first(i));
    let repeats = |i: usize| {
        raw[i]
            .iter()
            .filter(|s| *s == "try 3")
            .count()
            .saturating_sub(1)
    };
    let in_yellow = |i: usize| raw[i].iter().any(|s| s == "try 3");
    let oracle_flounder = count(&|i| in_yellow(i) && repeats(i) >= 3) / yellow2;
    let oracle_v0 = count(&|i| in_yellow(i) && repeats(i) == 0) / yellow2;
    let oracle_v1 = count(&|i| in_yellow(i) && repeats(i) == 1) / yellow2;

    let expected = [
        ("confidence(try 3)", oracle_conf, 0.40),
        ("support(red 5)", oracle_red5, 0.70),
        ("reach(white 2, red AC)", oracle_reach_ac, 0.60),
        ("reach(white 3, red 5)", oracle_reach_5, 0.70),
        ("flounder_risk(yellow 2, 3)", oracle_flounder, 0.70),
        ("exit share after 0 repeats", oracle_v0, 0.05),
        ("exit share after 1 repeat", oracle_v1, 0.15),
    ];
    for (name, got, want) in expected {
        ensure(got == want, || {
            format!("fixture oracle {name} = {got}, expected {want}")
        })?;
    }

    // The same values read off the built model.
    let c = Cluster::from_logs(logs.clone()).map_err(|e| e.to_string())?;
    let a = &c.automaton;
    let go = |s: StateId, text: &str| -> Result<StateId, String> {
        a.outgoing(s)
            .find(|t| format!("{} {}", t.sig.kind, t.sig.action) == text)
            .map(|t| t.dst)
            .ok_or_else(|| format!("no transition {text} from {s}"))
    };
    let s1 = go(StateId::INITIAL, "do 1")?;
    let t_try = a
        .outgoing(s1)
        .find(|t| t.sig.kind == EventKind::Try)
        .ok_or("no try out of state 1")?;
    let y2 = t_try.dst;
    let w2 = go(y2, "do 2")?;
    ensure(go(s1, "do 2")? == w2, || {
        "white 2 is not shared by both paths".into()
    })?;
    let w3 = go(w2, "do 3")?;
    let red5 = go(go(go(w3, "do 4")?, "do 6")?, "fail 5")?;
    let red_ac = go(go(go(red5, "do AC")?, "do 7")?, "fail AC")?;
    let exits: Vec<u64> = a
        .outgoing(y2)
        .filter_map(|t| match &t.freq {
            Frequency::Vector(v) => Some(v.clone()),
            Frequency::Normal(_) => None,
        })
        .flatten()
        .collect();
    ensure(a.outgoing(y2).all(|t| t.is_vector()), || {
        "yellow 2 exits are not vectors".into()
    })?;
    let gamma_y = a.state(y2).unwrap().gamma as f64;
    let vec = &a.outgoing(y2).find(|t| t.is_vector()).unwrap().freq;
    let v = match vec {
        Frequency::Vector(v) => v.clone(),
        Frequency::Normal(_) => unreachable!(),
    };
    let got = [
        ("confidence(try 3)", a.confidence(t_try), oracle_conf),
        ("support(red 5)", a.support(red5).unwrap(), oracle_red5),
        (
            "reach(white 2, red AC)",
            c.reach.probability(a, w2, red_ac),
            oracle_reach_ac,
        ),
        (
            "reach(white 3, red 5)",
            c.reach.probability(a, w3, red5),
            oracle_reach_5,
        ),
        (
            "flounder_risk(yellow 2, 3)",
            flounder_risk(a, y2, 3).unwrap(),
            oracle_flounder,
        ),
        (
            "exit share after 0 repeats",
            v[0] as f64 / gamma_y,
            oracle_v0,
        ),
        (
            "exit share after 1 repeat",
            v[1] as f64 / gamma_y,
            oracle_v1,
        ),
    ];
    for (name, model, oracle) in got {
        ensure(model == oracle, || {
            format!("model {name} = {model}, oracle {oracle}")
        })?;
    }
    ensure(exits.iter().sum::<u64>() as f64 == gamma_y, || {
        "exit vector does not cover yellow 2".into()
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.3}s"))?;
    Ok(format!(
        "7 values exact against the counting oracle, {:.0} ms",
        secs * 1000.0
    ))
}

// ---------------------------------------------------------------------------
// 2. Counting oracle

fn compare_counts(logs: &[StudentLog]) -> Result<usize, String> {
    let c = Cluster::from_logs(logs.to_vec()).map_err(|e| e.to_string())?;
    let a = &c.automaton;
    let o = Counts::of(logs);
    let n = o.n as f64;
    let ids: BTreeMap<Option<Key>, StateId> =
        a.states().map(|s| (lib_key(a, s.id), s.id)).collect();
    let keys: BTreeSet<&Option<Key>> = o.gamma.keys().collect();
    ensure(ids.keys().collect::<BTreeSet<_>>() == keys, || {
        "state sets differ".into()
    })?;
    let mut checked = 0;
    for (k, g) in &o.gamma {
        let s = ids[k];
        let state = a.state(s).unwrap();
        ensure(state.gamma == *g, || {
            format!("gamma {k:?}: {} vs {g}", state.gamma)
        })?;
        if k.is_some() {
            let sup = a.support(s).map_err(|e| e.to_string())?;
            ensure(sup == *g as f64 / n, || format!("support {k:?}"))?;
        }
        checked += 2;
    }
    ensure(a.transition_count() == o.phi.len(), || {
        "transition counts differ".into()
    })?;
    for (src, sig) in o.phi.keys() {
        let t = a
            .outgoing(ids[src])
            .find(|t| {
                Sig {
                    kind: t.sig.kind,
                    action: t.sig.action.as_str().to_string(),
                    class: t.sig.error_class,
                    corrective: t.sig.corrective,
                } == *sig
            })
            .ok_or_else(|| format!("missing transition {sig:?}"))?;
        ensure(
            ids[&Some(o.dst[&(src.clone(), sig.clone())].clone())] == t.dst,
            || "wrong target".into(),
        )?;
        let total = o.phi_total(src, sig);
        match &t.freq {
            Frequency::Vector(v) => {
                ensure(is_yellow(src), || {
                    "vector transition out of a non-yellow state".into()
                })?;
                ensure(*v == o.phi_vector(src, sig), || {
                    format!("phi_vec {v:?} vs {:?}", o.phi_vector(src, sig))
                })?;
            }
            Frequency::Normal(f) => {
                ensure(!is_yellow(src), || {
                    "normal transition out of a yellow state".into()
                })?;
                ensure(*f == total, || format!("phi {f} vs {total}"))?;
            }
        }
        let conf = total as f64 / o.gamma[src] as f64;
        ensure(a.confidence(t) == conf, || "confidence".into())?;
        checked += 2;
    }
    let lib_reach: BTreeMap<(StateId, StateId), u64> =
        c.reach.iter().map(|(s, e, n)| ((s, e), n)).collect();
    let oracle_reach: BTreeMap<(StateId, StateId), u64> = o
        .reach
        .iter()
        .map(|((s, e), n)| ((ids[s], ids[&Some(e.clone())]), *n))
        .collect();
    ensure(lib_reach == oracle_reach, || "reach tables differ".into())?;
    for ((s, e), n) in &oracle_reach {
        let want = *n as f64 / a.state(*s).unwrap().gamma as f64;
        ensure(c.reach.probability(a, *s, *e) == want, || {
            "reach probability".into()
        })?;
        checked += 1;
    }
    Ok(checked)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..200 {
        let logs = random_cohort(seed, 1, 15, 40);
        checked += compare_counts(&logs).map_err(|e| format!("cohort {seed}: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("200 cohorts, {checked} values equal, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 3. Inverse and streaming laws

fn criterion_3() -> Outcome {
    let start = Instant::now();
    for seed in 0..100 {
        let logs = random_cohort(10_000 + seed, 2, 15, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = ExtendedAutomaton::build(&logs);
        let text = all.to_text();

        let mut a = all.clone();
        let extra = random_log(&mut rng, "extra", 40);
        a.apply_log(&extra);
        a.remove_log(&extra)
            .map_err(|e| format!("cohort {seed}: {e}"))?;
        ensure(a.to_text() == text, || {
            format!("cohort {seed}: apply/remove changed the automaton")
        })?;

        let j = rng.gen_range(0..logs.len());
        let mut a = all.clone();
        a.remove_log(&logs[j]).map_err(|e| e.to_string())?;
        let mut rest = logs.clone();
        rest.remove(j);
        ensure(
            a.to_text() == ExtendedAutomaton::build(&rest).to_text(),
            || format!("cohort {seed}: removing a member differs from rebuilding"),
        )?;

        let (last, head) = logs.split_last().unwrap();
        let config = ModelConfig::default();
        let batch = build_model(&logs, &config, 0).map_err(|e| e.to_string())?;
        let mut live = build_model(head, &config, 0).map_err(|e| e.to_string())?;
        let mut session = live
            .start_session(&last.student)
            .map_err(|e| e.to_string())?;
        for e in &last.events {
            live.observe(&mut session, e).map_err(|e| e.to_string())?;
        }
        if last.completed {
            live.complete_session(&mut session)
                .map_err(|e| e.to_string())?;
        }
        let (b, l) = (&batch.clusters[0], &live.clusters[0]);
        ensure(b.automaton.to_text() == l.automaton.to_text(), || {
            format!("cohort {seed}: streaming automaton differs")
        })?;
        let map = l.automaton.canonical_ids();
        let bmap = b.automaton.canonical_ids();
        let lr: Vec<_> = l.reach.renumbered(&map).iter().collect();
        let br: Vec<_> = b.reach.renumbered(&bmap).iter().collect();
        ensure(lr == br, || {
            format!("cohort {seed}: streaming reach differs")
        })?;
        ensure(b.members == l.members, || {
            format!("cohort {seed}: streaming members differ")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("100 cohorts, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 4. Validation oracle

/// Error of every step of `test` against counts from the training logs.
fn oracle_errors(train: &Counts, test: &StudentLog, s: f64, c: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut current: Option<Option<Key>> = Some(None);
    for step in walk(test) {
        let in_model = current.is_some();
        let src = step.src.clone();
        let known = in_model && train.phi.contains_key(&(src.clone(), step.sig.clone()));
        let e = if !known {
            1.0
        } else {
            let gamma = train.gamma[&src] as f64;
            let total = train.phi_total(&src, &step.sig);
            let share = if !is_yellow(&src) {
                total
            } else if step.run == 0 {
                train
                    .phi_vector(&src, &step.sig)
                    .first()
                    .copied()
                    .unwrap_or(0)
            } else {
                train.phi_vector(&src, &step.sig).iter().skip(1).sum()
            };
            let dst = &train.dst[&(src.clone(), step.sig.clone())];
            let support = train.gamma[&Some(dst.clone())] as f64 / train.n as f64;
            let confidence = total as f64 / gamma;
            if support >= s && confidence >= c {
                1.0 - share as f64 / gamma
            } else {
                0.0
            }
        };
        out.push(e);
        let dst = Some(step.dst.clone());
        current = train.gamma.contains_key(&dst).then_some(dst);
    }
    out
}

fn criterion_4() -> Outcome {
    let filters = [
        (0.0, 0.0),
        (0.1, 0.25),
        (0.25, 0.1),
        (0.5, 0.5),
        (0.9, 0.9),
        (1.01, 1.01),
    ];
    let grid = Grid {
        supports: filters.iter().map(|f| f.0).collect(),
        confidences: filters.iter().map(|f| f.1).collect(),
    };
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let logs = random_cohort(20_000 + seed, 2, 10, 30);
        let n_test = 1 + (seed as usize % 2).min(logs.len() - 2);
        let (train, test) = logs.split_at(logs.len() - n_test);
        let m = build_model(train, &ModelConfig::default(), 0).map_err(|e| e.to_string())?;
        let counts = Counts::of(train);
        for (si, s) in grid.supports.iter().enumerate() {
            for (ci, c) in grid.confidences.iter().enumerate() {
                let f = SubmodelFilter::new(*s, *c).map_err(|e| e.to_string())?;
                let mut events = Vec::new();
                let mut oracle = Vec::new();
                for log in test {
                    let got = align(&m, log, &f);
                    let want = oracle_errors(&counts, log, *s, *c);
                    let errs: Vec<f64> = got.events.iter().map(|(_, e)| *e).collect();
                    ensure(errs == want, || {
                        format!("cohort {seed} ({s},{c}): {errs:?} vs {want:?}")
                    })?;
                    events.extend(got.events);
                    oracle.extend(want);
                }
                if oracle.is_empty() {
                    continue;
                }
                let want = oracle.iter().sum::<f64>() / oracle.len() as f64;
                let got = mean_error(&events).map_err(|e| e.to_string())?;
                let cell = grid_errors(&m, test, &grid).unwrap()[si * grid.confidences.len() + ci];
                worst = worst.max((got - want).abs()).max((cell - want).abs());
                compared += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("mean error off by {worst:e}"))?;

    let mut self_checked = 0;
    for seed in 0..50 {
        let log = random_log(&mut ChaCha8Rng::seed_from_u64(seed), "solo", 40);
        if log.is_empty() {
            continue;
        }
        let m = build_model(std::slice::from_ref(&log), &ModelConfig::default(), 0)
            .map_err(|e| e.to_string())?;
        let r = align(&m, &log, &SubmodelFilter::ALL);
        ensure(r.mean == Some(0.0), || {
            format!("self-validation of log {seed} gave {:?}", r.mean)
        })?;
        self_checked += 1;
    }
    Ok(format!(
        "{compared} filtered means, per-step errors identical, max |mean diff| {worst:e}; {self_checked} self-validations at 0"
    ))
}

// ---------------------------------------------------------------------------
// 5. Grid harness

fn protocol_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/protocol.toml")
}

fn protocol() -> ProtocolSpec {
    ProtocolSpec::from_toml(&std::fs::read_to_string(protocol_path()).unwrap()).unwrap()
}

fn profiles(p: &ProtocolSpec, counts: &[usize]) -> Vec<(ErrorProfile, usize)> {
    p.profiles
        .iter()
        .zip(counts)
        .map(|(e, n)| (e.profile.clone(), *n))
        .collect()
}

fn criterion_5() -> Outcome {
    let p = protocol();
    let logs: Vec<StudentLog> = generate_cohort(&p, &profiles(&p, &[43, 42]), 1)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|l| l.log)
        .collect();
    let events: usize = logs.iter().map(StudentLog::len).sum();
    let grid = Grid::default();
    let mut configs = vec![(Method::None, None), (Method::Sequence, None)];
    for m in [Method::XMeans, Method::Em] {
        configs.extend(FeatureKind::ALL.iter().map(|f| (m, Some(*f))));
    }
    let start = Instant::now();
    let mut ks = Vec::new();
    for (method, feature) in &configs {
        let r = cross_validate(&logs, &ModelConfig::new(*method, *feature), &grid, 150, 1)
            .map_err(|e| e.to_string())?;
        for row in &r.cells {
            for v in row {
                ensure((0.0..=1.0).contains(v), || {
                    format!("{} cell {v} outside [0,1]", method.as_str())
                })?;
            }
        }
        ks.push(format!(
            "{}{}={}",
            method.as_str(),
            feature.map_or(String::new(), |f| format!("/{}", f.as_str())),
            r.k
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("grid runs took {secs:.1}s"))?;

    let mut common = ErrorProfile::clean("common");
    common.p_premature = 0.02;
    common.p_skip = 0.02;
    common.p_distractor = 0.02;
    let common_logs: Vec<StudentLog> = generate_cohort(&p, &[(common, 85)], 1)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|l| l.log)
        .collect();
    let r = cross_validate(&common_logs, &ModelConfig::default(), &grid, 150, 1)
        .map_err(|e| e.to_string())?;
    let (lo, hi) = (r.cell(0.9, 0.9).unwrap(), r.cell(0.0, 0.0).unwrap());
    ensure(lo <= hi, || {
        format!("common cohort: cell(0.9,0.9) {lo} > cell(0,0) {hi}")
    })?;
    Ok(format!(
        "85 students / {events} events, {} configs x 150 splits in {secs:.1}s [{}]; common cohort {lo:.4} <= {hi:.4}",
        configs.len(),
        ks.join(" ")
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. Clustering recovery and error-by-cluster discrimination

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *rows.entry(*x).or_default() += 1;
        *cols.entry(*y).or_default() += 1;
    }
    let index: f64 = table.values().map(|n| choose2(*n)).sum();
    let sa: f64 = rows.values().map(|n| choose2(*n)).sum();
    let sb: f64 = cols.values().map(|n| choose2(*n)).sum();
    let expected = sa * sb / choose2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

struct Recovered {
    seed: u64,
    ari: f64,
    logs: Vec<StudentLog>,
    groups: Vec<Vec<String>>,
}

fn recovery_cohorts() -> Result<(Vec<Recovered>, f64), String> {
    let p = protocol();
    let start = Instant::now();
    let mut out = Vec::new();
    for seed in 0..10 {
        let cohort =
            generate_cohort(&p, &profiles(&p, &[40, 40]), seed).map_err(|e| e.to_string())?;
        let logs: Vec<StudentLog> = cohort.iter().map(|l| l.log.clone()).collect();
        let config = ModelConfig::new(Method::XMeans, Some(FeatureKind::EventsByZone));
        let m = build_model(&logs, &config, seed).map_err(|e| e.to_string())?;
        let truth: Vec<usize> = cohort
            .iter()
            .map(|l| usize::from(l.label != "careful"))
            .collect();
        let found: Vec<usize> = logs
            .iter()
            .map(|l| m.clustering.assignment[&l.student])
            .collect();
        let groups = m
            .clusters
            .iter()
            .map(|c| c.members.keys().cloned().collect())
            .collect();
        out.push(Recovered {
            seed,
            ari: adjusted_rand(&truth, &found),
            logs,
            groups,
        });
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

fn criterion_6(runs: &[Recovered], secs: f64) -> Outcome {
    let good = runs.iter().filter(|r| r.ari >= 0.9).count();
    let aris: Vec<String> = runs
        .iter()
        .map(|r| format!("{}:{:.3}", r.seed, r.ari))
        .collect();
    let detail = format!(
        "ARI >= 0.9 on {good}/10 seeds [{}], {secs:.2}s",
        aris.join(" ")
    );
    ensure(good >= 9 && secs < 10.0, || detail.clone())?;
    Ok(detail)
}

fn fail_signatures(log: &StudentLog) -> BTreeSet<Sig> {
    log.events
        .iter()
        .filter(|e| e.kind == EventKind::Fail)
        .map(Sig::of)
        .collect()
}

/// Mean over `errors` of the population variance of their per-group
/// frequencies.
fn across_group_variance(groups: &[Vec<&BTreeSet<Sig>>], errors: &[Sig]) -> f64 {
    let mut total = 0.0;
    for err in errors {
        let f: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|s| s.contains(err)).count() as f64 / g.len() as f64)
            .collect();
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        total += f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f.len() as f64;
    }
    total / errors.len() as f64
}

fn criterion_7(runs: &[Recovered]) -> Outcome {
    let mut wins = 0;
    let mut comparisons = 0;
    for r in runs {
        let made: BTreeMap<&str, BTreeSet<Sig>> = r
            .logs
            .iter()
            .map(|l| (l.student.as_str(), fail_signatures(l)))
            .collect();
        let mut counts: BTreeMap<&Sig, usize> = BTreeMap::new();
        for s in made.values().flatten() {
            *counts.entry(s).or_default() += 1;
        }
        let mut ranked: Vec<(&Sig, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let top: Vec<Sig> = ranked.iter().take(10).map(|(s, _)| (*s).clone()).collect();

        let model_groups: Vec<Vec<&BTreeSet<Sig>>> = r
            .groups
            .iter()
            .map(|g| g.iter().map(|s| &made[s.as_str()]).collect())
            .collect();
        let observed = across_group_variance(&model_groups, &top);
        let sizes: Vec<usize> = r.groups.iter().map(Vec::len).collect();
        let mut everyone: Vec<&BTreeSet<Sig>> = made.values().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + r.seed);
        for _ in 0..100 {
            everyone.shuffle(&mut rng);
            let mut rest = everyone.as_slice();
            let mut random_groups = Vec::new();
            for n in &sizes {
                let (g, tail) = rest.split_at(*n);
                random_groups.push(g.to_vec());
                rest = tail;
            }
            if observed > across_group_variance(&random_groups, &top) {
                wins += 1;
            }
            comparisons += 1;
        }
    }
    let share = wins as f64 / comparisons as f64;
    let detail = format!(
        "clustered variance higher in {wins}/{comparisons} comparisons ({:.1}%)",
        share * 100.0
    );
    ensure(share >= 0.95, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. CLI determinism

fn csm(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csm"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "csm {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out.stdout)
}

/// Runs every pipeline in `dir` and returns each output by name.
fn pipelines(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let protocol = protocol_path();
    let protocol = protocol.to_str().unwrap();
    let mut out = BTreeMap::new();
    let mut run = |name: &str, args: &[&str]| -> Result<Vec<u8>, String> {
        let bytes = csm(dir, args)?;
        out.insert(name.to_string(), bytes.clone());
        Ok(bytes)
    };
    run(
        "gen",
        &[
            "gen",
            "--protocol",
            protocol,
            "--students",
            "30",
            "--seed",
            "5",
            "-o",
            "logs.tsv",
            "--labels",
            "labels.tsv",
        ],
    )?;
    let fresh = run(
        "gen-stdout",
        &[
            "gen",
            "--protocol",
            protocol,
            "--students",
            "12",
            "--seed",
            "6",
        ],
    )?;
    let fresh = String::from_utf8_lossy(&fresh)
        .replace("\ns", "\nn")
        .replace("\ts", "\tn");
    std::fs::write(dir.join("new.tsv"), fresh).map_err(|e| e.to_string())?;
    for (tag, method, feature) in [
        ("none", "none", None),
        ("sequence", "sequence", None),
        ("xmeans", "xmeans", Some("events-by-zone")),
        ("em", "em", Some("errors-time")),
    ] {
        let model = format!("{tag}.model");
        let mut args = vec![
            "build", "--logs", "logs.tsv", "--method", method, "--seed", "9", "-o", &model,
        ];
        if let Some(f) = feature {
            args.extend(["--feature", f]);
        }
        args.extend(["--checkpoint", "step:A20", "--checkpoint", "time:0.5"]);
        run(&format!("build-{tag}"), &args)?;
        run(&format!("validate-{tag}"), &{
            let mut v = vec![
                "validate", "--logs", "logs.tsv", "--method", method, "--splits", "12", "--seed",
                "4",
            ];
            if let Some(f) = feature {
                v.extend(["--feature", f]);
            }
            v
        })?;
        run(
            &format!("score-{tag}"),
            &[
                "validate", "--logs", "new.tsv", "--model", &model, "--format", "csv",
            ],
        )?;
        run(&format!("predict-{tag}"), &["predict", "--model", &model])?;
        run(
            &format!("prefix-{tag}"),
            &[
                "predict",
                "--model",
                &model,
                "--prefix",
                "new.tsv",
                "--student",
                "n003",
            ],
        )?;
        let saved = format!("{tag}-moved.model");
        run(
            &format!("reclassify-{tag}"),
            &[
                "reclassify",
                "--model",
                &model,
                "--logs",
                "new.tsv",
                "--save",
                &saved,
            ],
        )?;
        run(
            &format!("report-{tag}"),
            &["report-clusters", "--model", &model],
        )?;
        run(
            &format!("dot-{tag}"),
            &["export-dot", "--model", &saved, "--cluster", "0"],
        )?;
    }
    run(
        "validate-jobs-1",
        &[
            "validate",
            "--logs",
            "logs.tsv",
            "--method",
            "em",
            "--feature",
            "errors",
            "--splits",
            "12",
            "--jobs",
            "1",
        ],
    )?;
    run(
        "validate-jobs-3",
        &[
            "validate",
            "--logs",
            "logs.tsv",
            "--method",
            "em",
            "--feature",
            "errors",
            "--splits",
            "12",
            "--jobs",
            "3",
        ],
    )?;
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| e.to_string())?;
        out.insert(
            format!("file:{}", f.file_name().unwrap().to_string_lossy()),
            bytes,
        );
    }
    Ok(out)
}

fn criterion_8() -> Outcome {
    let root = std::env::temp_dir().join(format!("csm-acceptance-{}", std::process::id()));
    let first = pipelines(&root.join("a"));
    let second = pipelines(&root.join("b"));
    let _ = std::fs::remove_dir_all(&root);
    let (first, second) = (first?, second?);
    ensure(first.keys().eq(second.keys()), || {
        "runs produced different file sets".into()
    })?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, || {
            format!("{name} differs between runs")
        })?;
    }
    ensure(first["validate-jobs-1"] == first["validate-jobs-3"], || {
        "validate output depends on --jobs".into()
    })?;
    Ok(format!(
        "{} outputs byte-identical across two runs",
        first.len()
    ))
}

// ---------------------------------------------------------------------------

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // Bare criterion numbers select a subset; other arguments are ignored.
    let picked: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| picked.is_empty() || picked.contains(&n);

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let simple: [(u32, &str, fn() -> Outcome); 5] = [
        (1, "1 figure-3 fixture", criterion_1),
        (2, "2 counting oracle", criterion_2),
        (3, "3 inverse and streaming laws", criterion_3),
        (4, "4 validation oracle", criterion_4),
        (5, "5 grid harness", criterion_5),
    ];
    for (n, name, f) in simple {
        if want(n) {
            results.push((name, guarded(f)));
        }
    }
    if want(6) || want(7) {
        match guarded(recovery_cohorts) {
            Ok((runs, secs)) => {
                if want(6) {
                    results.push((
                        "6 clustering recovery",
                        guarded(|| criterion_6(&runs, secs)),
                    ));
                }
                if want(7) {
                    results.push((
                        "7 error-by-cluster discrimination",
                        guarded(|| criterion_7(&runs)),
                    ));
                }
            }
            Err(e) => {
                results.push(("6 clustering recovery", Err(e.clone())));
                results.push(("7 error-by-cluster discrimination", Err(e)));
            }
        }
    }
    if want(8) {
        results.push(("8 CLI determinism", guarded(criterion_8)));
    }

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
