//! Command implementations behind the `cqvqa` binary.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cqvqa_core::checkpoint;
use cqvqa_core::data::{self, DatasetDims, SyntheticSpec};
use cqvqa_core::metrics::{ablation_table, evaluate};
use cqvqa_core::train::train;
use cqvqa_core::{
    build_answer_space, Dataset, EmbeddingTable, Error, ErrorKind, EvalReport, Model, ModelKind,
    Precision, Result, RunConfig, Scalar,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "cqvqa",
    version,
    about = "Categorize-then-answer visual question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic, linearly separable dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSONL log.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled manifest.
    Eval(EvalArgs),
    /// Answer one record of a manifest.
    Predict(PredictArgs),
    /// Train the hierarchical model and the flat baseline and compare them.
    Ablate(TrainArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long, default_value_t = 3)]
    pub answers_per: usize,
    /// Samples in each category.
    #[arg(long, default_value_t = 200)]
    pub samples_per: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub d_v: usize,
    #[arg(long, default_value_t = 8)]
    pub d_w: usize,
    #[arg(long, default_value_t = 6)]
    pub n_w: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens_per: usize,
    #[arg(long, default_value_t = 2.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Storage width of features and embeddings.
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    /// Also write a stratified train.jsonl / val.jsonl pair with this validation share.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

/// Flags shared by every configurable command; each maps onto a config key.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile: paper or desk.
    #[arg(long)]
    pub profile: Option<String>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Compute precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Training manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Held-out manifest scored after training.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub period: Option<usize>,
    /// teacher_forced or predicted.
    #[arg(long)]
    pub routing: Option<String>,
    /// Training log (JSONL); defaults to the checkpoint path plus `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Train the flat baseline instead of the hierarchical model.
    #[arg(long)]
    pub flat: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Labelled manifest to score.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record index within the manifest.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Print a JSON object instead of text.
    #[arg(long)]
    pub json: bool,
}

fn push<V: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<V>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        push(&mut out, "profile", &self.profile);
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        push(&mut out, "seed", &self.seed);
        push(&mut out, "batch", &self.batch);
        push(&mut out, "precision", &self.precision);
        push(&mut out, "checkpoint", &path_str(&self.checkpoint));
        push(&mut out, "report", &path_str(&self.report));
        Ok(out)
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut pairs = self.pairs()?;
        pairs.extend(extra);
        RunConfig::resolve(self.config.as_deref(), &pairs)
    }
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut extra = Vec::new();
        push(&mut extra, "train_manifest", &path_str(&self.manifest));
        push(&mut extra, "val_manifest", &path_str(&self.val));
        push(&mut extra, "epochs", &self.epochs);
        push(&mut extra, "lr0", &self.lr0);
        push(&mut extra, "decay", &self.decay);
        push(&mut extra, "period", &self.period);
        push(&mut extra, "routing", &self.routing);
        push(&mut extra, "log", &path_str(&self.log));
        self.common.resolve(extra)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run(
    args: impl IntoIterator<Item = OsString>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a, out, err),
        Command::Train(a) => {
            let cfg = a.resolve()?;
            echo(&cfg, err)?;
            let kind = if a.flat {
                ModelKind::Flat
            } else {
                ModelKind::Hierarchical
            };
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, kind, out),
                Precision::F64 => cmd_train::<f64>(&cfg, kind, out),
            }
        }
        Command::Eval(a) => {
            let mut extra = Vec::new();
            push(&mut extra, "val_manifest", &path_str(&a.manifest));
            let cfg = a.common.resolve(extra)?;
            echo(&cfg, err)?;
            match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&cfg, out),
                Precision::F64 => cmd_eval::<f64>(&cfg, out),
            }
        }
        Command::Predict(a) => {
            let mut extra = Vec::new();
            push(&mut extra, "val_manifest", &path_str(&a.manifest));
            let cfg = a.common.resolve(extra)?;
            echo(&cfg, err)?;
            match cfg.precision {
                Precision::F32 => cmd_predict::<f32>(&cfg, a.index, a.json, out),
                Precision::F64 => cmd_predict::<f64>(&cfg, a.index, a.json, out),
            }
        }
        Command::Ablate(a) => {
            let cfg = a.resolve()?;
            echo(&cfg, err)?;
            match cfg.precision {
                Precision::F32 => cmd_ablate::<f32>(&cfg, out),
                Precision::F64 => cmd_ablate::<f64>(&cfg, out),
            }
        }
    }
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into()))
        .collect();
    json!({ "config": map })
}

fn echo(cfg: &RunConfig, err: &mut dyn Write) -> Result<()> {
    writeln!(err, "{}", config_json(cfg)).map_err(|e| Error::io("<stderr>", e))
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        n_c: a.categories,
        answers_per_category: vec![a.answers_per; a.categories],
        samples_per_category: a.samples_per,
        dims: DatasetDims {
            k: a.k,
            d_v: a.d_v,
            d_w: a.d_w,
            n_w: a.n_w,
        },
        tokens_per_category: a.tokens_per,
        margin: a.margin,
        noise: a.noise,
        seed: a.seed,
    };
    writeln!(err, "{}", json!({ "synthetic": spec })).map_err(|e| Error::io("<stderr>", e))?;
    let mut synthetic = data::generate_synthetic(&spec)?;
    let manifest_path = synthetic.write(&a.out, a.precision)?;
    writeln!(
        out,
        "wrote {} records ({} categories × {} answers × {} samples) to {}",
        synthetic.manifest.records.len(),
        a.categories,
        a.answers_per,
        a.samples_per,
        manifest_path.display()
    )
    .map_err(stdout_err)?;
    if let Some(v) = a.val_fraction {
        let (train_m, val_m) = data::split(&synthetic.manifest, (1.0 - v, v), a.seed)?;
        train_m.save(&a.out.join("train.jsonl"))?;
        val_m.save(&a.out.join("val.jsonl"))?;
        writeln!(
            out,
            "split {} train / {} val records",
            train_m.records.len(),
            val_m.records.len()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given")))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from("cqvqa.ckpt"))
}

fn load_data<T: Scalar>(path: &Path) -> Result<(Dataset<T>, EmbeddingTable<T>)> {
    let manifest = data::load_manifest(path)?;
    let emb = EmbeddingTable::load(&manifest.embedding_path())?;
    if emb.dim() != manifest.dims().d_w {
        return Err(Error::DimensionMismatch {
            what: format!("embedding width in {}", manifest.embedding_path().display()),
            expected: manifest.dims().d_w,
            found: emb.dim(),
        });
    }
    Ok((Dataset::from_manifest(&manifest)?, emb))
}

/// Errors unless the data's sizes match the configured model sizes.
fn check_dims(cfg: &RunConfig, data: &DatasetDims, n_c: usize) -> Result<()> {
    checkpoint::check_compatible(&cfg.dims, data)?;
    if cfg.dims.n_c != n_c {
        return Err(Error::DimensionMismatch {
            what: "category count n_c (set n_c to match the manifest)".into(),
            expected: cfg.dims.n_c,
            found: n_c,
        });
    }
    Ok(())
}

struct Trained<T> {
    model: Model<T>,
    emb: EmbeddingTable<T>,
    train: Dataset<T>,
}

fn fit<T: Scalar>(
    cfg: &RunConfig,
    kind: ModelKind,
    mut on_line: impl FnMut(&str) -> Result<()>,
) -> Result<Trained<T>> {
    let path = required(&cfg.train_manifest, "training manifest (--manifest)")?;
    let (train_set, emb) = load_data::<T>(path)?;
    check_dims(cfg, &train_set.dims, train_set.categories.len())?;
    let space = build_answer_space(
        &train_set.categories,
        train_set
            .samples
            .iter()
            .map(|s| (s.category, s.answer.as_str())),
    )?;
    let mut model = Model::init(cfg.dims, space, kind, cfg.seed)?;
    let mut write_err = None;
    train(
        &mut model,
        &emb,
        &train_set.samples,
        &cfg.train_config(),
        |log| {
            let line = serde_json::to_string(log).expect("log serializes");
            if let Err(e) = on_line(&line) {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok(Trained {
        model,
        emb,
        train: train_set,
    })
}

/// Scores on the validation manifest when one is configured, else on the training data.
fn score<T: Scalar>(cfg: &RunConfig, t: &Trained<T>) -> Result<(String, EvalReport)> {
    match &cfg.val_manifest {
        Some(p) => {
            let (val, emb) = load_data::<T>(p)?;
            checkpoint::check_compatible(&t.model.dims, &val.dims)?;
            let r = evaluate(&t.model, &emb, &val.categories, &val.samples, cfg.batch)?;
            Ok(("val".into(), r))
        }
        None => {
            let r = evaluate(
                &t.model,
                &t.emb,
                &t.train.categories,
                &t.train.samples,
                cfg.batch,
            )?;
            Ok(("train".into(), r))
        }
    }
}

pub fn cmd_train<T: Scalar>(cfg: &RunConfig, kind: ModelKind, out: &mut dyn Write) -> Result<()> {
    let ckpt = checkpoint_path(cfg);
    let log_path = cfg.log.clone().unwrap_or_else(|| {
        let mut s = ckpt.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", config_json(cfg)).map_err(io)?;
    let trained = fit::<T>(cfg, kind, |line| {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))
    })?;
    log.flush().map_err(io)?;
    checkpoint::save(&trained.model, &ckpt, cfg.precision)?;
    let (split, report) = score(cfg, &trained)?;
    writeln!(
        out,
        "trained {} epochs; {split} overall {:.2}%{}; checkpoint {}; log {}",
        cfg.epochs,
        report.overall,
        report
            .category_accuracy
            .map(|c| format!(", category {c:.2}%"))
            .unwrap_or_default(),
        ckpt.display(),
        log_path.display()
    )
    .map_err(stdout_err)?;
    Ok(())
}

fn load_checkpoint<T: Scalar>(cfg: &RunConfig) -> Result<Model<T>> {
    checkpoint::load(&checkpoint_path(cfg))
}

fn eval_manifest(cfg: &RunConfig) -> Result<&Path> {
    cfg.val_manifest
        .as_deref()
        .or(cfg.train_manifest.as_deref())
        .ok_or_else(|| Error::Config("no manifest given (--manifest)".into()))
}

fn write_report(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_eval<T: Scalar>(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint::<T>(cfg)?;
    let (data, emb) = load_data::<T>(eval_manifest(cfg)?)?;
    checkpoint::check_compatible(&model.dims, &data.dims)?;
    let report = evaluate(&model, &emb, &data.categories, &data.samples, cfg.batch)?;
    write!(out, "{}", report.table()).map_err(stdout_err)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    match &cfg.report {
        Some(p) => write_report(p, &value)?,
        None => writeln!(out, "{value}").map_err(stdout_err)?,
    }
    Ok(())
}

pub fn cmd_predict<T: Scalar>(
    cfg: &RunConfig,
    index: usize,
    as_json: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_checkpoint::<T>(cfg)?;
    let (data, emb) = load_data::<T>(eval_manifest(cfg)?)?;
    checkpoint::check_compatible(&model.dims, &data.dims)?;
    let sample = data.samples.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "record {index} out of range ({} records)",
            data.len()
        ))
    })?;
    let p = model.predict(&emb, sample)?;
    let f = |v: T| v.to_f64().expect("float");
    let candidates: Vec<usize> = match p.category {
        Some(r) => model.space.subset(r).to_vec(),
        None => (0..model.space.len()).collect(),
    };
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .zip(&p.answer_probs)
        .map(|(&a, &pr)| (a, f(pr)))
        .collect();
    // Stable sort keeps the lower answer id first on equal probability.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(5);
    let category = p.category.map(|r| model.space.categories()[r].clone());
    let p_q: Option<Vec<f64>> = p.p_q.as_ref().map(|v| v.iter().map(|&x| f(x)).collect());
    let answer = model.space.answer(p.answer);
    if as_json {
        let top: Vec<_> = ranked
            .iter()
            .map(|&(a, pr)| json!({ "answer": model.space.answer(a), "probability": pr }))
            .collect();
        let value = json!({
            "category": category,
            "answer": answer,
            "p_q": p_q,
            "top5": top,
        });
        writeln!(out, "{value}").map_err(stdout_err)?;
        return Ok(());
    }
    let mut text = String::new();
    text.push_str(&format!(
        "category: {}\n",
        category.as_deref().unwrap_or("-")
    ));
    text.push_str(&format!("answer: {answer}\n"));
    if let Some(p_q) = &p_q {
        text.push_str("p_q:\n");
        for (name, v) in model.space.categories().iter().zip(p_q) {
            text.push_str(&format!("  {name:<20} {v:.6}\n"));
        }
    }
    text.push_str("top-5:\n");
    for (a, pr) in &ranked {
        text.push_str(&format!("  {:<20} {pr:.6}\n", model.space.answer(*a)));
    }
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

pub fn cmd_ablate<T: Scalar>(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let flat = fit::<T>(cfg, ModelKind::Flat, |_| Ok(()))?;
    let hier = fit::<T>(cfg, ModelKind::Hierarchical, |_| Ok(()))?;
    let (split, baseline) = score(cfg, &flat)?;
    let (_, cq) = score(cfg, &hier)?;
    writeln!(out, "scored on {split} split").map_err(stdout_err)?;
    write!(out, "{}", ablation_table(&baseline, &cq)).map_err(stdout_err)?;
    if let Some(p) = &cfg.report {
        write_report(
            p,
            &json!({ "split": split, "baseline": baseline, "cq_vqa": cq }),
        )?;
    }
    Ok(())
}
