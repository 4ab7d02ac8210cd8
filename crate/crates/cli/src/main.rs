use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use csm::automaton::export_dot;
use csm::clustering::{ErrorWeights, FeatureKind, Method};
use csm::eventlog::{generate_cohort, parse_logs, write_logs, ActionId, ProtocolSpec, StudentLog};
use csm::model::{build_model, load_model, save_model, Checkpoint, CollectiveModel, ModelConfig};
use csm::prediction::{format_predictions, hint_triggers, next_distribution, HintPolicy};
use csm::validation::{
    cross_validate, error_by_cluster_report, grid_errors, Grid, GridReport, DEFAULT_SPLITS,
};

const DEFAULT_SEED: u64 = 1;

/// Collective student models mined from tutoring event logs.
#[derive(Parser, Debug)]
#[command(name = "csm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort from a protocol document
    Gen(GenArgs),
    /// Cluster students and build a model file
    Build(BuildArgs),
    /// Measure prediction error over a support/confidence grid
    Validate(ValidateArgs),
    /// Print hint triggers, or the outlook for a student's partial log
    Predict(PredictArgs),
    /// Stream logs through a model with checkpoint reclassification
    Reclassify(ReclassifyArgs),
    /// Tabulate the most common relevant errors per cluster
    ReportClusters(ReportArgs),
    /// Write a cluster automaton as Graphviz DOT
    ExportDot(DotArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Protocol document (TOML) with actions, commuting groups, distractors and profiles
    #[arg(long)]
    protocol: PathBuf,
    /// Total students, shared among the profiles in proportion to their counts
    #[arg(long)]
    students: Option<usize>,
    /// Random seed; equal seeds give identical output
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Also write `student<TAB>profile` lines to this file
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Clustering method: none, xmeans, em or sequence
    #[arg(long, value_parser = parse_method, default_value = "none")]
    method: Method,
    /// Feature for xmeans and em: errors, errors-time or events-by-zone
    #[arg(long, value_parser = parse_feature)]
    feature: Option<FeatureKind>,
    /// Error-class weight overrides, e.g. `world=1,other=0`
    #[arg(long, value_parser = parse_weights)]
    weights: Option<ErrorWeights>,
    /// Largest number of clusters considered
    #[arg(long, default_value_t = csm::clustering::DEFAULT_K_MAX)]
    k_max: usize,
    /// Reclassification checkpoint, `step:<action>` or `time:<fraction>`; repeatable
    #[arg(long = "checkpoint", value_parser = parse_checkpoint)]
    checkpoints: Vec<Checkpoint>,
    /// Action with no pedagogical weight; repeatable
    #[arg(long = "ignore-action")]
    ignore_actions: Vec<String>,
    /// Keep ignored actions as right actions instead of dropping them
    #[arg(long)]
    keep_ignored: bool,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Event log file
    #[arg(long)]
    logs: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Random seed; equal seeds give identical output
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Event log file
    #[arg(long)]
    logs: PathBuf,
    /// Score the logs against this model instead of cross-validating
    #[arg(long, conflicts_with_all = ["method", "feature", "weights", "k_max", "checkpoints", "ignore_actions", "keep_ignored", "splits"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ModelArgs,
    /// Thresholds as `supports:confidences`, each comma-separated
    #[arg(long, value_parser = parse_grid, default_value = "0,0.1,0.25,0.5,0.75,0.9:0,0.1,0.25,0.5,0.75,0.9")]
    grid: Grid,
    /// Number of random 90/10 splits
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    splits: usize,
    /// Random seed; equal seeds give identical output
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads; the output does not depend on it
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct PolicyArgs {
    /// Smallest transition confidence that triggers a hint
    #[arg(long, default_value_t = HintPolicy::default().min_confidence)]
    min_confidence: f64,
    /// Smallest state support considered
    #[arg(long, default_value_t = HintPolicy::default().min_support)]
    min_support: f64,
    /// Smallest probability of later reaching an error that triggers a hint
    #[arg(long, default_value_t = HintPolicy::default().min_reach)]
    min_reach: f64,
    /// Repeats of a blocked attempt that count as floundering
    #[arg(long, default_value_t = HintPolicy::default().flounder_repeats)]
    flounder_repeats: u32,
    /// Smallest floundering probability that triggers a hint
    #[arg(long, default_value_t = HintPolicy::default().flounder_prob)]
    flounder_prob: f64,
}

impl PolicyArgs {
    fn policy(&self) -> Result<HintPolicy> {
        let p = HintPolicy {
            min_confidence: self.min_confidence,
            min_support: self.min_support,
            min_reach: self.min_reach,
            flounder_repeats: self.flounder_repeats,
            flounder_prob: self.flounder_prob,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model file written by `build`
    #[arg(long)]
    model: PathBuf,
    /// Log file with the partial log of one student
    #[arg(long)]
    prefix: Option<PathBuf>,
    /// Student to take from the prefix file when it holds several
    #[arg(long, requires = "prefix")]
    student: Option<String>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReclassifyArgs {
    /// Model file written by `build`
    #[arg(long)]
    model: PathBuf,
    /// Logs of students new to the model
    #[arg(long)]
    logs: PathBuf,
    /// Write the updated model here
    #[arg(long)]
    save: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Model file written by `build`
    #[arg(long)]
    model: PathBuf,
    /// Number of errors to tabulate
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DotArgs {
    /// Model file written by `build`
    #[arg(long)]
    model: PathBuf,
    /// Index of the cluster to draw
    #[arg(long, default_value_t = 0)]
    cluster: usize,
    /// Output file; standard output when absent
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: csm::Error| e.to_string())
}

fn parse_feature(s: &str) -> std::result::Result<FeatureKind, String> {
    s.parse().map_err(|e: csm::Error| e.to_string())
}

fn parse_weights(s: &str) -> std::result::Result<ErrorWeights, String> {
    ErrorWeights::default()
        .parse_overrides(s)
        .map_err(|e| e.to_string())
}

fn parse_checkpoint(s: &str) -> std::result::Result<Checkpoint, String> {
    s.parse().map_err(|e: csm::Error| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    Grid::parse(s).map_err(|e| e.to_string())
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.method, self.feature);
        if let Some(w) = &self.weights {
            c.weights = w.clone();
        }
        c.k_max = self.k_max;
        c.checkpoints = self.checkpoints.clone();
        for a in &self.ignore_actions {
            c.relevance
                .irrelevant_actions
                .insert(ActionId::new(a.as_str())?);
        }
        c.relevance.keep_irrelevant_as_correct = self.keep_ignored;
        Ok(c)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_logs(path: &Path) -> Result<Vec<StudentLog>> {
    parse_logs(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_model(path: &Path) -> Result<CollectiveModel> {
    load_model(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            match stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
            {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
                    Err(e).context("cannot write to stdout")
                }
                _ => Ok(()),
            }
        }
    }
}

/// Splits `total` among `counts` in proportion, largest remainders first.
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    let mut shares: Vec<usize> = counts.iter().map(|c| c * total / sum).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|i| std::cmp::Reverse((counts[*i] * total) % sum));
    let left = total - shares.iter().sum::<usize>();
    for i in order.into_iter().take(left) {
        shares[i] += 1;
    }
    shares
}

fn gen(a: &GenArgs) -> Result<()> {
    let protocol = ProtocolSpec::from_toml(&read(&a.protocol)?)?;
    let mut profiles: Vec<_> = protocol
        .profiles
        .iter()
        .map(|p| (p.profile.clone(), p.count))
        .collect();
    if profiles.is_empty() {
        profiles.push((
            csm::eventlog::ErrorProfile::clean("clean"),
            a.students.unwrap_or(1),
        ));
    } else if let Some(n) = a.students {
        let counts: Vec<usize> = profiles.iter().map(|p| p.1).collect();
        for (p, n) in profiles.iter_mut().zip(apportion(&counts, n)) {
            p.1 = n;
        }
        profiles.retain(|p| p.1 > 0);
    }
    if profiles.is_empty() {
        bail!("no students to generate");
    }
    let cohort = generate_cohort(&protocol, &profiles, a.seed)?;
    if let Some(path) = &a.labels {
        let labels: String = cohort
            .iter()
            .map(|l| format!("{}\t{}\n", l.log.student, l.label))
            .collect();
        emit(Some(path), &labels)?;
    }
    let logs: Vec<StudentLog> = cohort.into_iter().map(|l| l.log).collect();
    emit(a.out.as_deref(), &write_logs(&logs))
}

fn build(a: &BuildArgs) -> Result<()> {
    let logs = read_logs(&a.logs)?;
    let m = build_model(&logs, &a.model.config()?, a.seed)?;
    emit(a.out.as_deref(), &save_model(&m))
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let logs = read_logs(&a.logs)?;
    let report = match &a.model {
        Some(path) => {
            let m = read_model(path)?;
            let errors = grid_errors(&m, &logs, &a.grid).context("the logs contain no events")?;
            GridReport {
                method: m.config.method,
                feature: m.config.feature,
                k: m.k(),
                n_splits: 0,
                seed: m.provenance.seed,
                cells: errors
                    .chunks(a.grid.confidences.len())
                    .map(<[f64]>::to_vec)
                    .collect(),
                grid: a.grid.clone(),
            }
        }
        None => {
            let config = a.config.config()?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(j) = a.jobs {
                if j == 0 {
                    bail!("--jobs must be at least 1");
                }
                pool = pool.num_threads(j);
            }
            pool.build()?
                .install(|| cross_validate(&logs, &config, &a.grid, a.splits, a.seed))?
        }
    };
    let text = match a.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv(),
    };
    emit(a.out.as_deref(), &text)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let policy = a.policy.policy()?;
    let mut m = read_model(&a.model)?;
    let mut out = String::new();
    let Some(prefix) = &a.prefix else {
        for (i, c) in m.clusters.iter().enumerate() {
            out.push_str(&format!("# cluster {i}\n"));
            out.push_str(&format_predictions(&hint_triggers(
                &c.automaton,
                &c.reach,
                &policy,
            )));
        }
        return emit(a.out.as_deref(), &out);
    };
    let logs = read_logs(prefix)?;
    let log = match &a.student {
        Some(s) => logs
            .iter()
            .find(|l| &l.student == s)
            .with_context(|| format!("student {s} is not in the prefix file"))?,
        None if logs.len() == 1 => &logs[0],
        None => bail!(
            "the prefix file holds {} students; pick one with --student",
            logs.len()
        ),
    };
    let mut session = m.start_session(&log.student)?;
    for e in &log.events {
        m.observe(&mut session, e)?;
        m.maybe_reclassify(&mut session)?;
    }
    let c = &m.clusters[session.cluster];
    out.push_str(&format!(
        "cluster\t{}\nstate\t{}\n",
        session.cluster, session.state
    ));
    if session.pending_repeats() > 0 {
        out.push_str(&format!("repeats\t{}\n", session.pending_repeats()));
    }
    out.push_str("\nsignature\tprobability\n");
    for (sig, p) in next_distribution(&c.automaton, session.state) {
        out.push_str(&format!("{sig}\t{p:.4}\n"));
    }
    out.push('\n');
    let here: Vec<_> = hint_triggers(&c.automaton, &c.reach, &policy)
        .into_iter()
        .filter(|p| p.state == session.state)
        .collect();
    out.push_str(&format_predictions(&here));
    emit(a.out.as_deref(), &out)
}

fn reclassify(a: &ReclassifyArgs) -> Result<()> {
    let mut m = read_model(&a.model)?;
    let logs = read_logs(&a.logs)?;
    let mut out = String::from("student\tstart\tend\tmoves\n");
    for log in &logs {
        let mut session = m.start_session(&log.student)?;
        let start = session.cluster;
        let mut moves = 0;
        for e in &log.events {
            m.observe(&mut session, e)?;
            if m.maybe_reclassify(&mut session)? {
                moves += 1;
            }
        }
        if log.completed {
            m.complete_session(&mut session)?;
        }
        out.push_str(&format!(
            "{}\t{start}\t{}\t{moves}\n",
            log.student, session.cluster
        ));
    }
    m.check()?;
    if let Some(path) = &a.save {
        emit(Some(path), &save_model(&m))?;
    }
    emit(a.out.as_deref(), &out)
}

fn report_clusters(a: &ReportArgs) -> Result<()> {
    let m = read_model(&a.model)?;
    emit(
        a.out.as_deref(),
        &error_by_cluster_report(&m, a.top).to_text(),
    )
}

fn export(a: &DotArgs) -> Result<()> {
    let m = read_model(&a.model)?;
    let Some(c) = m.clusters.get(a.cluster) else {
        bail!(
            "cluster {} does not exist; the model has {}",
            a.cluster,
            m.k()
        );
    };
    emit(a.out.as_deref(), &export_dot(&c.automaton))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Build(a) => build(a),
        Command::Validate(a) => validate(a),
        Command::Predict(a) => predict(a),
        Command::Reclassify(a) => reclassify(a),
        Command::ReportClusters(a) => report_clusters(a),
        Command::ExportDot(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
