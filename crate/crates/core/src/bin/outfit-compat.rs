//! Command-line front end: data generation, rule mining, training,
//! evaluation and retrieval. Reports go to stdout as JSON and to stderr as
//! a table; failures exit with a per-category code.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use outfit_compat::catalog::{load_catalog, load_pairs, SplitFractions};
use outfit_compat::dataset::Dataset;
use outfit_compat::eval::{
    evaluate_auc, mrr_retrieval, per_rule_eval, pop_baseline, rand_baseline, CandidateScorer, QuerySplit,
    StudentScorer, TeacherScorer, TripletScorer,
};
use outfit_compat::rules::{format_candidates, mine_rules, parse_rules, Lexicon, RuleSet};
use outfit_compat::synth::{gen_synthetic, SynthConfig};
use outfit_compat::trainer::{
    load_checkpoint, resume, save_checkpoint, train_with_observer, Checkpoint, EpochRecord, Selection, TrainConfig,
    TrainMode,
};
use outfit_compat::{Error, Result};

#[derive(Parser)]
#[command(name = "outfit-compat", version, about = "Rule-guided top/bottom compatibility modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog with planted rules.
    GenSynthetic(GenArgs),
    /// Mine candidate rules from attribute co-occurrence in training pairs.
    MineRules(MineArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Triplet AUC on the held-out test pairs.
    Evaluate(EvalArgs),
    /// Mean reciprocal rank of held-out bottoms among sampled candidates.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Item catalog (JSON lines).
    #[arg(long)]
    items: PathBuf,
    /// Positive pairs (CSV with header top_id,bottom_id).
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the default file names.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    n_tops: Option<usize>,
    #[arg(long)]
    n_bottoms: Option<usize>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct MineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Attribute vocabulary (TOML, `attribute = [values]`).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Write the candidates here instead of only reporting them.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    bottom_n: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Akd,
    Dbpr,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
    /// Continue this checkpoint for `--epochs` more epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also append the per-epoch log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long)]
    rho_alpha: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<Objective>,
    /// Return the last epoch instead of the best validation epoch.
    #[arg(long)]
    last: bool,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    /// Student scores.
    P,
    /// Teacher-projected scores.
    Q,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Scorer {
    Model,
    Pop,
    Rand,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Score with a baseline instead of the trained model.
    #[arg(long, value_enum)]
    scorer: Option<Scorer>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    split: Option<QuerySplit>,
    #[arg(long)]
    t_candidates: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    synth: Option<SynthConfig>,
    train: Option<TrainConfig>,
    mine: MineConfig,
    eval: EvalConfig,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MineConfig {
    lexicon: Option<PathBuf>,
    top_n: usize,
    bottom_n: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            lexicon: None,
            top_n: 3,
            bottom_n: 3,
        }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    checkpoint: Option<PathBuf>,
    mode: Mode,
    scorer: Scorer,
    negatives: usize,
    split: QuerySplit,
    t_candidates: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            mode: Mode::P,
            scorer: Scorer::Model,
            negatives: 3,
            split: QuerySplit::All,
            t_candidates: 10,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })
}

/// JSON report plus rows for the stderr table.
struct Report {
    json: Value,
    rows: Vec<(String, String)>,
}

fn row(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn print_table(title: &str, rows: &[(String, String)]) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{title}");
    for (k, v) in rows {
        let _ = writeln!(err, "  {k:<width$}  {v}");
    }
}

fn rules_or_empty(path: Option<&Path>) -> Result<RuleSet> {
    path.map_or_else(|| Ok(RuleSet::default()), parse_rules)
}

fn load_dataset(data: &DataArgs, rules: Option<&Path>, seed: u64) -> Result<Dataset> {
    let catalog = load_catalog(&data.items)?;
    let pairs = load_pairs(&data.pairs, &catalog)?;
    let rules = rules_or_empty(rules)?;
    Dataset::split(catalog, &pairs, rules, SplitFractions::default(), seed)
}

fn gen(args: GenArgs) -> Result<Report> {
    let file = load_config(args.common.config.as_deref())?;
    let mut cfg = file.synth.unwrap_or_default();
    if let Some(s) = args.common.seed.or(file.seed) {
        cfg.seed = s;
    }
    cfg.n_tops = args.n_tops.unwrap_or(cfg.n_tops);
    cfg.n_bottoms = args.n_bottoms.unwrap_or(cfg.n_bottoms);
    cfg.n_pairs = args.n_pairs.unwrap_or(cfg.n_pairs);
    cfg.noise = args.noise.unwrap_or(cfg.noise);
    let data = gen_synthetic(&cfg)?;
    data.write(&args.out)?;
    // Explicit paths override the defaults inside `--out`.
    let moves = [
        (args.items, "items.jsonl"),
        (args.pairs, "pairs.csv"),
        (args.rules, "rules.txt"),
    ];
    let mut files = serde_json::Map::new();
    for (target, name) in moves {
        let from = args.out.join(name);
        let to = match target {
            Some(t) => {
                std::fs::rename(&from, &t).map_err(|e| Error::Io { path: t.clone(), source: e })?;
                t
            }
            None => from,
        };
        files.insert(name.to_string(), json!(to.display().to_string()));
    }
    files.insert("lexicon.toml".into(), json!(args.out.join("lexicon.toml").display().to_string()));
    Ok(Report {
        rows: vec![
            row("tops", data.catalog.num_tops()),
            row("bottoms", data.catalog.num_bottoms()),
            row("pairs", data.pairs.len()),
            row("rules", data.rules.len()),
            row("seed", cfg.seed),
        ],
        json: json!({
            "command": "gen-synthetic",
            "tops": data.catalog.num_tops(),
            "bottoms": data.catalog.num_bottoms(),
            "pairs": data.pairs.len(),
            "rules": data.rules.to_text().lines().collect::<Vec<_>>(),
            "seed": cfg.seed,
            "files": files,
        }),
    })
}

fn mine(args: MineArgs) -> Result<Report> {
    let file = load_config(args.common.config.as_deref())?;
    let seed = args.common.seed.or(file.seed).unwrap_or(0);
    let ds = load_dataset(&args.data, None, seed)?;
    let lexicon_path = args
        .lexicon
        .or(file.mine.lexicon)
        .ok_or_else(|| Error::RejectedInput("mining needs --lexicon".into()))?;
    let lexicon = Lexicon::load(&lexicon_path)?;
    let top_n = args.top_n.unwrap_or(file.mine.top_n);
    let bottom_n = args.bottom_n.unwrap_or(file.mine.bottom_n);
    let candidates = mine_rules(&ds.catalog, &ds.train, &lexicon, top_n, bottom_n)?;
    let text = format_candidates(&candidates);
    if let Some(path) = &args.rules {
        std::fs::write(path, &text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let mut rows = vec![row("training pairs", ds.train.len())];
    rows.extend(candidates.iter().map(|c| (c.rule.to_string(), format!("count={}", c.count))));
    Ok(Report {
        rows,
        json: json!({
            "command": "mine-rules",
            "training_pairs": ds.train.len(),
            "seed": seed,
            "candidates": candidates
                .iter()
                .map(|c| json!({"rule": c.rule.to_string(), "count": c.count}))
                .collect::<Vec<_>>(),
        }),
    })
}

fn train_cmd(args: TrainArgs) -> Result<Report> {
    let file = load_config(args.common.config.as_deref())?;
    let mut cfg = file.train.unwrap_or_default();
    if let Some(s) = args.common.seed.or(file.seed) {
        cfg.seed = s;
    }
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.rho_max = args.rho_max.unwrap_or(cfg.rho_max);
    cfg.rho_alpha = args.rho_alpha.unwrap_or(cfg.rho_alpha);
    cfg.c = args.c.unwrap_or(cfg.c);
    cfg.lambda_reg = args.lambda.unwrap_or(cfg.lambda_reg);
    cfg.learning_rate = args.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = args.batch.unwrap_or(cfg.batch_size);
    match args.objective {
        Some(Objective::Akd) => cfg.mode = TrainMode::Akd,
        Some(Objective::Dbpr) => cfg.mode = TrainMode::Dbpr,
        None => {}
    }
    if args.last {
        cfg.selection = Selection::Last;
    }

    let (ds, start) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (load_dataset(&args.data, args.rules.as_deref(), ckpt.config.seed)?, Some(ckpt))
        }
        None => {
            cfg.validate()?;
            (load_dataset(&args.data, args.rules.as_deref(), cfg.seed)?, None)
        }
    };

    const HEADER: &str = "epoch\tloss\ttrain_auc\tvalid_auc\trho";
    let mut log_file = match &args.log {
        Some(p) => {
            let io = |source| Error::Io { path: p.clone(), source };
            let mut f = std::fs::File::create(p).map_err(io)?;
            writeln!(f, "{HEADER}").map_err(io)?;
            Some(f)
        }
        None => None,
    };
    let mut observer = |r: &EpochRecord, _: &_, _: &_| {
        let line = r.log_line();
        eprintln!("{line}");
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    };
    eprintln!("{HEADER}");

    let outcome = match start {
        Some(ckpt) => {
            let extra = args.epochs.unwrap_or(1);
            resume(&ds.catalog, &ds.train, &ds.valid, &ds.rules, ckpt, extra, &mut observer)?
        }
        None => train_with_observer(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg, &mut observer)?,
    };
    let ckpt = outcome.selected();
    save_checkpoint(&ckpt, &args.checkpoint)?;
    let last = ckpt.history.last().cloned();
    let best_valid = ckpt.history.get(ckpt.epoch.saturating_sub(1)).and_then(|r| r.valid_auc);
    Ok(Report {
        rows: vec![
            row("objective", format!("{:?}", ckpt.config.mode).to_lowercase()),
            row("split", format!("{} / {} / {}", ds.train.len(), ds.valid.len(), ds.test.len())),
            row("rules", ds.rules.len()),
            row("epochs run", ckpt.history.len()),
            row("selected epoch", ckpt.epoch),
            row("selected valid auc", best_valid.map_or("n/a".into(), |v| format!("{v:.4}"))),
            row("checkpoint", args.checkpoint.display()),
        ],
        json: json!({
            "command": "train",
            "objective": ckpt.config.mode,
            "split": ds.sizes(),
            "rules": ds.rules.len(),
            "selected_epoch": ckpt.epoch,
            "selected_valid_auc": best_valid,
            "final": last,
            "history": ckpt.history,
            "checkpoint": args.checkpoint.display().to_string(),
        }),
    })
}

/// Resolved scorer inputs shared by `evaluate` and `retrieve`.
struct Scoring {
    ds: Dataset,
    ckpt: Option<Checkpoint>,
    mode: Mode,
    scorer: Scorer,
    file: FileConfig,
}

fn scoring(m: &ModelArgs) -> Result<Scoring> {
    let file = load_config(m.common.config.as_deref())?;
    let scorer = m.scorer.unwrap_or(file.eval.scorer);
    let mode = m.mode.unwrap_or(file.eval.mode);
    let ckpt_path = m.checkpoint.clone().or_else(|| file.eval.checkpoint.clone());
    let ckpt = match (scorer, ckpt_path) {
        // Same default as `train --checkpoint`.
        (Scorer::Model, None) => Some(load_checkpoint("checkpoint.json")?),
        (_, Some(p)) => Some(load_checkpoint(p)?),
        (_, None) => None,
    };
    // The split must match training, so the checkpoint's seed wins.
    let seed = ckpt
        .as_ref()
        .map(|c| c.config.seed)
        .or(m.common.seed)
        .or(file.seed)
        .unwrap_or(0);
    let ds = load_dataset(&m.data, m.rules.as_deref(), seed)?;
    if mode == Mode::Q && scorer == Scorer::Model && ds.rules.is_empty() {
        return Err(Error::RejectedInput("q mode needs --rules".into()));
    }
    Ok(Scoring {
        ds,
        ckpt,
        mode,
        scorer,
        file,
    })
}

enum Built<'a> {
    Student(StudentScorer),
    Teacher(TeacherScorer<'a>),
    Pop(outfit_compat::eval::PopScorer),
    Rand(outfit_compat::eval::RandScorer),
}

impl Built<'_> {
    fn triplet(&self) -> &dyn TripletScorer {
        match self {
            Built::Student(s) => s,
            Built::Teacher(s) => s,
            Built::Pop(s) => s,
            Built::Rand(s) => s,
        }
    }

    fn candidate(&self) -> &dyn CandidateScorer {
        match self {
            Built::Student(s) => s,
            Built::Teacher(s) => s,
            Built::Pop(s) => s,
            Built::Rand(s) => s,
        }
    }
}

fn build(s: &Scoring) -> Result<(Built<'_>, String)> {
    Ok(match (s.scorer, s.mode) {
        (Scorer::Pop, _) => (Built::Pop(pop_baseline(&s.ds.train)), "pop".into()),
        (Scorer::Rand, _) => (Built::Rand(rand_baseline(s.ds.seed)), "rand".into()),
        (Scorer::Model, Mode::P) => {
            let ck = s.ckpt.as_ref().expect("checked in scoring");
            (Built::Student(StudentScorer::new(&ck.student, &s.ds.catalog)?), "model-p".into())
        }
        (Scorer::Model, Mode::Q) => {
            let ck = s.ckpt.as_ref().expect("checked in scoring");
            let t = TeacherScorer::new(&ck.student, &ck.attention, &s.ds.rules, &s.ds.catalog, ck.config.c)?;
            (Built::Teacher(t), "model-q".into())
        }
    })
}

fn evaluate(args: EvalArgs) -> Result<Report> {
    let s = scoring(&args.model)?;
    let (built, label) = build(&s)?;
    let triplets = s.ds.test_triplets(s.file.eval.negatives)?;
    let mut report = evaluate_auc(built.triplet(), &triplets)?;
    if !s.ds.rules.is_empty() {
        report.per_rule = Some(per_rule_eval(built.triplet(), &s.ds.rules, &s.ds.catalog, &triplets)?);
    }
    let mut rows = vec![
        row("scorer", &label),
        row("test triplets", report.n_triplets),
        row("auc", format!("{:.4}", report.auc)),
    ];
    if let Some(per_rule) = &report.per_rule {
        for (id, auc) in per_rule {
            let rule = s.ds.rules.get(*id).map(|r| r.to_string()).unwrap_or_default();
            rows.push(row(&format!("rule {id} ({rule})"), format!("{auc:.4}")));
        }
    }
    Ok(Report {
        rows,
        json: json!({
            "command": "evaluate",
            "scorer": label,
            "report": report,
        }),
    })
}

fn retrieve(args: RetrieveArgs) -> Result<Report> {
    let s = scoring(&args.model)?;
    let (built, label) = build(&s)?;
    let split = args.split.unwrap_or(s.file.eval.split);
    let t = args.t_candidates.unwrap_or(s.file.eval.t_candidates);
    let known = s.ds.known();
    let report = mrr_retrieval(built.candidate(), &s.ds.catalog, &s.ds.test, &s.ds.train, &known, t, s.ds.seed, split)?;
    let note = (label == "model-q").then_some("q-mode candidate score: sum of teacher win probability over head-to-head triplets (our convention)");
    let mut rows = vec![
        row("scorer", &label),
        row("split", format!("{split:?}").to_lowercase()),
        row("candidates", t),
        row("queries", report.n_queries),
        row("mrr", format!("{:.4}", report.mrr)),
    ];
    if let Some(n) = note {
        rows.push(row("note", n));
    }
    Ok(Report {
        rows,
        json: json!({
            "command": "retrieve",
            "scorer": label,
            "report": report,
            "note": note,
        }),
    })
}

fn run(cli: Cli) -> Result<(&'static str, Report)> {
    Ok(match cli.command {
        Command::GenSynthetic(a) => ("gen-synthetic", gen(a)?),
        Command::MineRules(a) => ("mine-rules", mine(a)?),
        Command::Train(a) => ("train", train_cmd(a)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a)?),
        Command::Retrieve(a) => ("retrieve", retrieve(a)?),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((title, report)) => {
            print_table(title, &report.rows);
            println!("{}", serde_json::to_string_pretty(&report.json).expect("reports serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            println!("{}", json!({"error": {"category": e.category(), "message": e.to_string()}}));
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
