use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ksvqe::metrics::{rank_accuracy, read_pairs, RankAccuracy};
use ksvqe::plot::{self, PlotKind};
use ksvqe::subjective::{clean, read_ratings_csv, write_mos_csv, write_ratings_csv, CleaningOptions};
use ksvqe::trainer::{load_checkpoint, report_from_predictions, train, EvalReport, Profile, TrainConfig, Trainer};
use ksvqe::worksim::{check_trends, generate_corpus, read_corpus, write_corpus, Corpus, CorpusManifest, Split, WorksimConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Cli, Command, GlobalOpts, ProfileArg, SplitArg};

/// Largest tolerated fraction of malformed rows in a ratings CSV.
const MAX_MALFORMED: f64 = 0.01;

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ksvqe::Error> for CliError {
    fn from(e: ksvqe::Error) -> Self {
        match e {
            ksvqe::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Reads an input file; a missing file is a usage error.
fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    fs::read(path).map_err(|e| io_err(path, e))
}

fn hash(v: &Value) -> CliResult<String> {
    Ok(ksvqe::config_hash(v)?)
}

fn file_digest(bytes: &[u8]) -> String {
    ksvqe::config_hash(&bytes.to_vec()).expect("bytes serialize")
}

/// Overlays `patch` on `base`; keys absent from `base` are rejected so
/// typos do not pass silently.
fn merge(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}.{k}");
                let slot = b.get_mut(k).ok_or_else(|| usage(format!("unknown config key {here}")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn config_section(g: &GlobalOpts, section: &str) -> CliResult<Option<Value>> {
    let Some(path) = &g.config else { return Ok(None) };
    let bytes = read_input(path)?;
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let obj = v.as_object().ok_or_else(|| usage("config file must hold a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "worksim" && *k != "train") {
        return Err(usage(format!("unknown config section {k:?} (expected worksim or train)")));
    }
    Ok(obj.get(section).cloned())
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: T, patch: Option<Value>, section: &str) -> CliResult<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut v, &patch, section)?;
    serde_json::from_value(v).map_err(|e| usage(format!("config section {section}: {e}")))
}

fn worksim_config(g: &GlobalOpts) -> CliResult<WorksimConfig> {
    overlay(WorksimConfig::default(), config_section(g, "worksim")?, "worksim")
}

fn train_config(g: &GlobalOpts) -> CliResult<TrainConfig> {
    let profile = match g.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut cfg = overlay(TrainConfig::for_profile(profile), config_section(g, "train")?, "train")?;
    cfg.seed = g.seed;
    cfg.logistic_plcc |= g.logistic_plcc;
    Ok(cfg)
}

fn load_corpus(g: &GlobalOpts, dir: &Option<PathBuf>) -> CliResult<(PathBuf, Corpus)> {
    let dir = dir.clone().unwrap_or_else(|| g.out.join("corpus"));
    if !dir.join("manifest.json").exists() {
        return Err(usage(format!("no corpus manifest in {} (run gen-data first)", dir.display())));
    }
    let corpus = read_corpus(&dir)?;
    Ok((dir, corpus))
}

fn rank_metrics(metrics: &mut BTreeMap<String, f64>, rank: &Option<RankAccuracy>) {
    if let Some(r) = rank {
        for (name, c) in [("all", &r.all), ("homogeneous", &r.homogeneous), ("non_homogeneous", &r.non_homogeneous)] {
            if let Some(a) = c.accuracy {
                metrics.insert(format!("rank_accuracy_{name}"), a);
            }
        }
    }
}

fn eval_metrics(e: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::from([("srocc".to_string(), e.srocc), ("plcc".to_string(), e.plcc), ("n".to_string(), e.n as f64)]);
    rank_metrics(&mut m, &e.rank);
    m
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(cli: &Cli) -> CliResult<RunReport> {
    let t0 = Instant::now();
    let g = &cli.global;
    let (name, config_hash, metrics, artifacts, dir) = match &cli.command {
        Command::GenData { n_refs, clips_per_ref, localized } => gen_data(g, *n_refs, *clips_per_ref, *localized)?,
        Command::Train { corpus, epochs } => cmd_train(g, corpus, *epochs)?,
        Command::Eval { corpus, checkpoint, oracle, split } => cmd_eval(g, corpus, checkpoint, *oracle, *split)?,
        Command::CleanScores { ratings, gate_threshold } => clean_scores(g, ratings, *gate_threshold)?,
        Command::Plot { kind, report, output } => cmd_plot(g, *kind, report, output)?,
        Command::RankEval { predictions, pairs } => rank_eval(g, predictions, pairs)?,
    };
    let mut report = RunReport {
        command: name.to_string(),
        config_hash,
        seed: g.seed,
        metrics,
        artifacts,
        wall_time_s: 0.0,
    };
    let path = dir.join("run_report.json");
    report.artifacts.push(path.clone());
    report.wall_time_s = t0.elapsed().as_secs_f64();
    write_file(&path, to_json(&report)?)?;
    Ok(report)
}

type Outcome = (&'static str, String, BTreeMap<String, f64>, Vec<PathBuf>, PathBuf);

fn gen_data(g: &GlobalOpts, n_refs: Option<usize>, clips_per_ref: Option<usize>, localized: bool) -> CliResult<Outcome> {
    let mut cfg = worksim_config(g)?;
    if let Some(n) = n_refs {
        cfg.n_refs = n;
    }
    if let Some(n) = clips_per_ref {
        cfg.clips_per_ref = n;
    }
    cfg.localized |= localized;
    cfg.validate()?;
    let corpus = generate_corpus(&cfg, g.seed)?;
    let dir = g.out.join("corpus");
    create_dir(&dir)?;
    let manifest_path = write_corpus(&dir, &corpus)?;
    let trends = check_trends(&corpus.manifest);
    if !trends.holds() {
        log::warn!("workflow trends do not hold on this corpus: {trends:?}");
    }
    let m = &corpus.manifest;
    let metrics = BTreeMap::from([
        ("clips".to_string(), m.clips.len() as f64),
        ("references".to_string(), m.references.len() as f64),
        ("train_clips".to_string(), m.split(Split::Train).len() as f64),
        ("test_clips".to_string(), m.split(Split::Test).len() as f64),
        ("rank_pairs".to_string(), corpus.pairs.len() as f64),
        ("trends_hold".to_string(), if trends.holds() { 1.0 } else { 0.0 }),
    ]);
    let h = hash(&json!({ "command": "gen-data", "seed": g.seed, "worksim": cfg }))?;
    let artifacts = vec![manifest_path, dir.join(&m.pairs_file), dir.join("clips")];
    Ok(("gen-data", h, metrics, artifacts, dir))
}

fn cmd_train(g: &GlobalOpts, corpus: &Option<PathBuf>, epochs: Option<usize>) -> CliResult<Outcome> {
    let mut cfg = train_config(g)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let (corpus_dir, corpus) = load_corpus(g, corpus)?;
    let dir = g.out.join("train");
    create_dir(&dir)?;
    fs::write(dir.join("config.json"), to_json(&cfg)?).map_err(|e| io_err(&dir, e))?;
    let outcome = train(&cfg, &corpus, Some(&dir))?;
    let mut metrics = eval_metrics(&outcome.final_eval);
    metrics.insert("steps".into(), outcome.steps as f64);
    if let Some(last) = outcome.logs.last() {
        metrics.insert("final_train_loss".into(), last.train_loss);
    }
    let manifest_digest = file_digest(&read_input(&corpus_dir.join("manifest.json"))?);
    let h = hash(&json!({ "command": "train", "train": cfg, "corpus": manifest_digest }))?;
    let artifacts = ["config.json", "log.jsonl", "checkpoint.kvt", "eval.json"].iter().map(|f| dir.join(f)).collect();
    Ok(("train", h, metrics, artifacts, dir))
}

fn cmd_eval(g: &GlobalOpts, corpus: &Option<PathBuf>, checkpoint: &Option<PathBuf>, oracle: bool, split: SplitArg) -> CliResult<Outcome> {
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let (corpus_dir, corpus) = load_corpus(g, corpus)?;
    let manifest_digest = file_digest(&read_input(&corpus_dir.join("manifest.json"))?);
    let dir = g.out.join("eval");
    create_dir(&dir)?;
    let mut artifacts = vec![dir.join("eval.json")];
    let (report, h) = if oracle {
        let clips = corpus.manifest.split(split);
        let ids: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
        let mos: Vec<f64> = clips.iter().map(|c| c.pseudo_mos).collect();
        let r = report_from_predictions(split, &ids, &mos, &mos, &corpus.pairs, g.logistic_plcc)?;
        (r, hash(&json!({ "command": "eval", "oracle": true, "split": split, "corpus": manifest_digest }))?)
    } else {
        let ckpt = checkpoint.clone().unwrap_or_else(|| g.out.join("train").join("checkpoint.kvt"));
        if !ckpt.exists() {
            return Err(usage(format!("checkpoint {} does not exist", ckpt.display())));
        }
        let (model, _) = load_checkpoint(&ckpt)?;
        let mut cfg = train_config(g)?;
        cfg.model = model.config.clone();
        let mut trainer = Trainer::new(cfg.clone(), &corpus)?;
        trainer.load_parameters(&ckpt)?;
        let r = trainer.evaluate(split)?;
        let idx: Vec<usize> = match split {
            Split::Test => trainer.test_indices().to_vec(),
            Split::Train => trainer.train_indices().to_vec(),
        };
        let traces = trainer.selection_traces(&idx)?;
        if !traces.is_empty() {
            let p = dir.join("traces.json");
            write_file(&p, to_json(&traces)?)?;
            artifacts.push(p);
        }
        let ck = file_digest(&read_input(&ckpt)?);
        (r, hash(&json!({ "command": "eval", "train": cfg, "split": split, "corpus": manifest_digest, "checkpoint": ck }))?)
    };
    write_file(&artifacts[0], to_json(&report)?)?;
    Ok(("eval", h, eval_metrics(&report), artifacts, dir))
}

fn clean_scores(g: &GlobalOpts, ratings: &Path, gate_threshold: f64) -> CliResult<Outcome> {
    let bytes = read_input(ratings)?;
    let (rm, row_errors, rows) = read_ratings_csv(bytes.as_slice())?;
    if rows == 0 {
        return Err(usage(format!("{} has no rating rows", ratings.display())));
    }
    let dir = g.out.join("clean");
    create_dir(&dir)?;
    let errors_path = dir.join("row_errors.json");
    write_file(&errors_path, to_json(&row_errors)?)?;
    for e in &row_errors {
        log::warn!("{}:{}: {}", ratings.display(), e.line, e.message);
    }
    let malformed = row_errors.len() as f64 / rows as f64;
    if malformed > MAX_MALFORMED {
        return Err(CliError::Runtime(format!(
            "{} of {rows} rows malformed ({:.1}% > {:.0}%); see {}",
            row_errors.len(),
            100.0 * malformed,
            100.0 * MAX_MALFORMED,
            errors_path.display()
        )));
    }
    let options = CleaningOptions { gate_threshold, strict_bt500: g.strict_bt500 };
    let (cleaned, report) = clean(&rm, options)?;
    for r in &report.removals {
        log::info!("removed {} from {} for {} (interval {:.4}..{:.4})", r.score, r.observer, r.video, r.lower, r.upper);
    }
    let removed = report.screened_out + report.removals.len();
    if report.input_ratings != report.kept_ratings + removed {
        return Err(CliError::Runtime(format!(
            "rating counts do not reconcile: {} in, {} kept, {removed} removed",
            report.input_ratings, report.kept_ratings
        )));
    }
    let (cleaned_path, mos_path, screening_path) = (dir.join("cleaned.csv"), dir.join("mos.csv"), dir.join("screening.json"));
    let mut buf = Vec::new();
    write_ratings_csv(&mut buf, &cleaned)?;
    write_file(&cleaned_path, &buf)?;
    buf.clear();
    write_mos_csv(&mut buf, &report.mos)?;
    write_file(&mos_path, &buf)?;
    write_file(&screening_path, to_json(&report)?)?;
    let metrics = BTreeMap::from([
        ("rows".to_string(), rows as f64),
        ("malformed_rows".to_string(), row_errors.len() as f64),
        ("input_ratings".to_string(), report.input_ratings as f64),
        ("kept_ratings".to_string(), report.kept_ratings as f64),
        ("screened_out".to_string(), report.screened_out as f64),
        ("ci_removed".to_string(), report.removals.len() as f64),
        ("rejected_observers".to_string(), report.rejected_observers.len() as f64),
        ("gate_flagged".to_string(), report.gate.iter().filter(|r| r.flagged).count() as f64),
    ]);
    let h = hash(&json!({ "command": "clean-scores", "options": options, "input": file_digest(&bytes) }))?;
    Ok(("clean-scores", h, metrics, vec![cleaned_path, mos_path, screening_path, errors_path], dir))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_plot(g: &GlobalOpts, kind: PlotKind, report: &Path, output: &Option<PathBuf>) -> CliResult<Outcome> {
    let path = if report.is_dir() { report.join("manifest.json") } else { report.to_path_buf() };
    let bytes = read_input(&path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(usage(format!("{} is empty", path.display())));
    }
    let img = match kind {
        PlotKind::Scatter => plot::scatter(&parse_json::<EvalReport>(&path, &bytes)?)?,
        PlotKind::MosHist => plot::mos_histogram(&parse_json::<CorpusManifest>(&path, &bytes)?, 16)?,
        PlotKind::QpTrend => plot::qp_trend(&parse_json::<CorpusManifest>(&path, &bytes)?)?,
        PlotKind::SelectionMap => plot::selection_map(&parse_json::<Vec<ksvqe::qrs::SelectionTrace>>(&path, &bytes)?)?,
    };
    let dir = g.out.join("plots");
    let out = output.clone().unwrap_or_else(|| dir.join(format!("{kind}.png")));
    write_file(&out, plot::encode_png(&img)?)?;
    let metrics = BTreeMap::from([("width".to_string(), img.width() as f64), ("height".to_string(), img.height() as f64)]);
    let h = hash(&json!({ "command": "plot", "kind": kind.name(), "input": file_digest(&bytes) }))?;
    Ok(("plot", h, metrics, vec![out], dir))
}

fn rank_eval(g: &GlobalOpts, predictions: &Path, pairs: &Option<PathBuf>) -> CliResult<Outcome> {
    let bytes = read_input(predictions)?;
    let value: Value = parse_json(predictions, &bytes)?;
    let map: BTreeMap<String, f64> = match value.get("predictions") {
        Some(p) => serde_json::from_value(p.clone()),
        None => serde_json::from_value(value),
    }
    .map_err(|e| usage(format!("{}: expected an evaluation report or a clip→score map ({e})", predictions.display())))?;
    let pairs_path = pairs.clone().unwrap_or_else(|| g.out.join("corpus").join("pairs.csv"));
    let pair_bytes = read_input(&pairs_path)?;
    let pairs = read_pairs(&pairs_path)?;
    if pairs.is_empty() {
        return Err(usage(format!("{} has no pairs", pairs_path.display())));
    }
    let lookup: HashMap<String, f64> = map.into_iter().collect();
    let acc = rank_accuracy(&pairs, &lookup)?;
    let dir = g.out.join("rank");
    let out = dir.join("rank_accuracy.json");
    write_file(&out, to_json(&acc)?)?;
    let mut metrics = BTreeMap::from([("pairs".to_string(), pairs.len() as f64)]);
    rank_metrics(&mut metrics, &Some(acc));
    let h = hash(&json!({ "command": "rank-eval", "predictions": file_digest(&bytes), "pairs": file_digest(&pair_bytes) }))?;
    Ok(("rank-eval", h, metrics, vec![out], dir))
}
