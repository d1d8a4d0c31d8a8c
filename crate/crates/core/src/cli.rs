//! Command-line entry point. Every subcommand writes only inside `--out`
//! and echoes its effective configuration there as `config.toml`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cluster::adjusted_rand_index;
use crate::config::RunConfig;
use crate::corpus::{
    filter_sessions, parse_log, split_train_test, LogFormat, PopulationSpec, SessionDataset, SplitTag, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    composite, evaluate, generated_tokens, kl_diagnostic, random_assignment, report_svg, write_composite_csv,
    write_report_csv, write_user_csv, EvaluationReport, MetricsReport, WinRule,
};
use crate::parallel::par_map;
use crate::predictor::{write_curves, Example};
use crate::train::{
    kmeans_baseline, pretrain_shared, train_hetlm, validation_split, write_epoch_log, write_step_log, ClusterModel,
    TrainData,
};

#[derive(Debug, Parser)]
#[command(name = "hetlm", version, about = "Clusterwise small language models over browsing sessions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-scale hyperparameter defaults.
    Full,
    /// Small learning-rate/epoch settings for the synthetic population.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings when no `--config` is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long = "k-init", global = true)]
    k_init: Option<usize>,
    /// Epochs of the stage the subcommand runs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a clickstream log (CSV or JSONL) into a dataset directory.
    Ingest {
        #[arg(long)]
        log: PathBuf,
    },
    /// Draw a synthetic population of disjoint Markov groups.
    Synth,
    /// Train one shared predictor on all training users.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fixed k-means clusters with one finetuned predictor each.
    KmeansTrain {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        /// Number of clusters (overrides `kmeans_k`).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Joint selector and per-cluster predictor training.
    HetlmTrain {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `pretrain`; pretrains inline when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Save the model after every epoch.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Generate a next session for every user of a split.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Generate and score; writes `report.json` plus the `--format` extras.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also compute the within-cluster KL diagnostic against a random
        /// assignment of the same sizes.
        #[arg(long)]
        kl: bool,
    },
    /// Composite win rates of a candidate report against a baseline.
    Compare {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Count equal values as wins.
        #[arg(long)]
        count_ties: bool,
    },
    /// Time generation for one or more models.
    Bench {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Re-emit an evaluation report as CSV, JSON or SVG.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}

fn resolve_config(c: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match (&c.config, c.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Desk)) => RunConfig::desk_scale(),
        (None, _) => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.alpha {
        cfg.train.alpha = a;
    }
    if let Some(b) = c.beta {
        cfg.train.beta = b;
    }
    if let Some(k) = c.k_init {
        cfg.train.k_init = k;
    }
    if let Some(w) = c.workers {
        cfg.workers = w.max(1);
    }
    cfg.eval.workers = cfg.workers;
    if let Some(e) = c.epochs {
        match command {
            Command::Pretrain { .. } => cfg.pretrain.epochs = e,
            Command::KmeansTrain { .. } => cfg.finetune.epochs = e,
            _ => cfg.train.epochs = e,
        }
    }
    if let Command::KmeansTrain { k: Some(k), .. } = command {
        cfg.kmeans_k = *k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let out = cli
        .common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
    cfg.echo(&out)?;
    let format = cli.common.format;
    match cli.command {
        Command::Ingest { log } => ingest(&cfg, &log, &out),
        Command::Synth => synth(&cfg, &out),
        Command::Pretrain { data } => pretrain_cmd(&cfg, &data, &out),
        Command::KmeansTrain { data, pretrained, .. } => kmeans_cmd(&cfg, &data, &pretrained, &out),
        Command::HetlmTrain {
            data,
            pretrained,
            checkpoints,
        } => hetlm_cmd(&cfg, &data, pretrained.as_deref(), checkpoints, &out),
        Command::Generate { model, data, split } => generate_cmd(&cfg, &model, &data, split, format, &out),
        Command::Evaluate { model, data, split, kl } => evaluate_cmd(&cfg, &model, &data, split, kl, format, &out),
        Command::Compare {
            candidate,
            baseline,
            count_ties,
        } => compare_cmd(&candidate, &baseline, count_ties, format, &out),
        Command::Bench { model, data, samples } => bench_cmd(&cfg, &model, &data, samples, &out),
        Command::Report { input } => report_cmd(&input, format, &out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?))
}

/// A dataset directory: `train.jsonl`, `test.jsonl`, `vocab.json`, and for
/// synthetic data `groups.json`.
struct DataDir {
    train: SessionDataset,
    test: SessionDataset,
    vocab: Vocabulary,
    groups: Option<BTreeMap<String, usize>>,
}

impl DataDir {
    fn load(dir: &Path) -> Result<Self> {
        let groups_path = dir.join("groups.json");
        let groups = if groups_path.exists() {
            let text = fs::read_to_string(&groups_path).map_err(|e| Error::file(&groups_path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(DataDir {
            train: SessionDataset::load_jsonl(&dir.join("train.jsonl"), SplitTag::Train)?,
            test: SessionDataset::load_jsonl(&dir.join("test.jsonl"), SplitTag::Test)?,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            groups,
        })
    }

    fn split(&self, s: Split) -> &SessionDataset {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn labels(&self, ds: &SessionDataset) -> Option<Vec<usize>> {
        let g = self.groups.as_ref()?;
        ds.records.iter().map(|r| g.get(&r.user_id).copied()).collect()
    }
}

fn write_data_dir(
    cfg: &RunConfig,
    dataset: &SessionDataset,
    out: &Path,
) -> Result<(SessionDataset, SessionDataset, Vocabulary)> {
    let (train, test) = split_train_test(dataset, cfg.corpus.test_fraction, cfg.seed)?;
    let vocab = Vocabulary::build(&train)?;
    train.save_jsonl(&out.join("train.jsonl"))?;
    test.save_jsonl(&out.join("test.jsonl"))?;
    vocab.save(&out.join("vocab.json"))?;
    Ok((train, test, vocab))
}

fn ingest(cfg: &RunConfig, log: &Path, out: &Path) -> Result<()> {
    let file = File::open(log).map_err(|e| Error::file(log, e))?;
    let parsed = parse_log(std::io::BufReader::new(file), LogFormat::from_path(log))?;
    let (filtered, summary) = filter_sessions(
        &parsed.dataset,
        cfg.corpus.min_session_len,
        cfg.corpus.length_percentile,
    )?;
    let (train, test, vocab) = write_data_dir(cfg, &filtered, out)?;
    write_json(
        &out.join("ingest.json"),
        &serde_json::json!({
            "rows": parsed.rows,
            "bad_rows": parsed.row_errors.len(),
            "row_errors": parsed.row_errors.iter().take(20).collect::<Vec<_>>(),
            "excluded_users": parsed.excluded_users,
            "filter": summary,
            "train_users": train.len(),
            "test_users": test.len(),
            "vocab_size": vocab.size(),
            "test_unk_rate": test.unk_rate(&vocab),
            "train_hash": train.content_hash(),
            "test_hash": test.content_hash(),
        }),
    )
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    let spec = PopulationSpec::disjoint(s.groups, s.pages_per_group, s.users_per_group, s.population_seed);
    let output = spec.synthesize(cfg.seed)?;
    let (train, test, vocab) = write_data_dir(cfg, &output.dataset, out)?;
    write_json(&out.join("groups.json"), &output.groups)?;
    write_json(
        &out.join("synth.json"),
        &serde_json::json!({
            "groups": s.groups,
            "distinct_pages": spec.distinct_pages(),
            "train_users": train.len(),
            "test_users": test.len(),
            "vocab_size": vocab.size(),
            "train_hash": train.content_hash(),
            "test_hash": test.content_hash(),
        }),
    )
}

fn pretrain_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let d = DataDir::load(data)?;
    let td = TrainData {
        vocab: &d.vocab,
        encoder: cfg.encoder,
        train: &d.train,
        validation: None,
    };
    let outcome = pretrain_shared(&td, cfg.predictor, &cfg.pretrain, cfg.seed)?;
    write_curves(&outcome.history, create(&out.join("curves.csv"))?)?;
    let model = ClusterModel::single("single", cfg.encoder, d.vocab.clone(), outcome.predictor);
    model.save(&out.join("model"))?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "seed": cfg.seed,
            "params": model.predictors[0].num_params(),
            "epochs": outcome.history.len(),
            "final": outcome.history.last(),
            "diverged": outcome.diverged,
        }),
    )?;
    if let Some((epoch, step)) = outcome.diverged {
        return Err(Error::Diverged { epoch, step });
    }
    Ok(())
}

fn load_pretrained(dir: &Path) -> Result<ClusterModel> {
    let p = dir.join("model");
    ClusterModel::load(if p.exists() { &p } else { dir })
}

fn kmeans_cmd(cfg: &RunConfig, data: &Path, pretrained: &Path, out: &Path) -> Result<()> {
    let d = DataDir::load(data)?;
    let shared = load_pretrained(pretrained)?;
    let td = TrainData {
        vocab: &d.vocab,
        encoder: cfg.encoder,
        train: &d.train,
        validation: None,
    };
    let base = kmeans_baseline(&shared.predictors[0], &td, cfg.kmeans_k, &cfg.finetune, cfg.seed, cfg.workers)?;
    base.model.save(&out.join("model"))?;
    write_assignments(&d.train, &base.kmeans.labels, &out.join("assignments.csv"))?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "seed": cfg.seed,
            "k": cfg.kmeans_k,
            "sse": base.kmeans.sse(),
            "iterations": base.kmeans.iterations,
            "counts": base.kmeans.counts(),
            "ari": d.labels(&d.train).map(|l| adjusted_rand_index(&l, &base.kmeans.labels)),
            "final_step_loss": base.step_losses.iter().map(|s| s.last().copied()).collect::<Vec<_>>(),
        }),
    )
}

fn write_assignments(ds: &SessionDataset, labels: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["user_id", "cluster"])?;
    for (r, l) in ds.records.iter().zip(labels) {
        w.write_record([r.user_id.clone(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn hetlm_cmd(cfg: &RunConfig, data: &Path, pretrained: Option<&Path>, checkpoints: bool, out: &Path) -> Result<()> {
    let d = DataDir::load(data)?;
    let (train, val) = validation_split(&d.train, cfg.pretrain.validation_fraction, cfg.seed)?;
    let td = TrainData {
        vocab: &d.vocab,
        encoder: cfg.encoder,
        train: &train,
        validation: val.as_ref(),
    };
    let shared = match pretrained {
        Some(p) => load_pretrained(p)?.predictors.remove(0),
        None => {
            let o = pretrain_shared(&td, cfg.predictor, &cfg.pretrain, cfg.seed)?;
            write_curves(&o.history, create(&out.join("pretrain_curves.csv"))?)?;
            if let Some((epoch, step)) = o.diverged {
                return Err(Error::Diverged { epoch, step });
            }
            o.predictor
        }
    };
    let ckpt = out.join("checkpoints");
    let run = train_hetlm(
        &shared,
        &td,
        &cfg.train,
        cfg.seed,
        cfg.workers,
        checkpoints.then_some(ckpt.as_path()),
    )?;
    run.model.save(&out.join("model"))?;
    write_step_log(&run.steps, create(&out.join("steps.csv"))?)?;
    write_epoch_log(&run.epochs, create(&out.join("epochs.csv"))?)?;
    write_json(&out.join("clusters.json"), &run.state.report())?;
    let assigned = run.assignments(&train)?;
    write_assignments(&train, &assigned, &out.join("assignments.csv"))?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "seed": cfg.seed,
            "k_init": cfg.train.k_init,
            "effective_k": run.state.effective_k(),
            "selector_agreement": run.selector_agreement,
            "kmeans_ari": d.labels(&train).map(|l| adjusted_rand_index(&l, &run.kmeans.labels)),
            "ari": d.labels(&train).map(|l| adjusted_rand_index(&l, &assigned)),
            "epochs": run.epochs,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct Generation {
    user_id: String,
    cluster: usize,
    generated: Vec<String>,
}

fn generate_cmd(cfg: &RunConfig, model: &Path, data: &Path, split: Split, format: Format, out: &Path) -> Result<()> {
    let m = ClusterModel::load(model)?;
    let d = DataDir::load(data)?;
    let ds = d.split(split);
    let examples = m.examples(ds)?;
    let routes = m.route(ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let gens = par_map(&idx, cfg.workers, |&i| {
        let ids = m.predictors[routes[i]].generate(&examples[i].input, &cfg.eval.generate)?;
        Ok::<_, Error>(Generation {
            user_id: ds.records[i].user_id.clone(),
            cluster: routes[i],
            generated: generated_tokens(&ids, &m.vocab),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(create(&out.join("generations.csv"))?);
            w.write_record(["user_id", "cluster", "generated"])?;
            for g in &gens {
                w.write_record([g.user_id.clone(), g.cluster.to_string(), g.generated.join(" ")])?;
            }
            w.flush()?;
        }
        _ => {
            let mut text = String::new();
            for g in &gens {
                text.push_str(&serde_json::to_string(g)?);
                text.push('\n');
            }
            let path = out.join("generations.jsonl");
            fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        }
    }
    Ok(())
}

fn evaluate_cmd(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    split: Split,
    kl: bool,
    format: Format,
    out: &Path,
) -> Result<()> {
    let m = ClusterModel::load(model)?;
    let d = DataDir::load(data)?;
    let ds = d.split(split);
    let report = evaluate(&m, ds, &cfg.eval)?;
    write_json(&out.join("report.json"), &report)?;
    emit_report(&report, format, out)?;
    if kl {
        let ex: Vec<Example> = m.examples(ds)?;
        let routes = m.route(ds)?;
        let random = random_assignment(&routes, cfg.seed);
        write_json(
            &out.join("kl.json"),
            &serde_json::json!({
                "learned": kl_diagnostic(&m, &ex, &routes, cfg.workers)?,
                "random_same_sizes": kl_diagnostic(&m, &ex, &random, cfg.workers)?,
            }),
        )?;
    }
    Ok(())
}

fn emit_report(report: &EvaluationReport, format: Format, out: &Path) -> Result<()> {
    match format {
        Format::Json => Ok(()),
        Format::Csv => {
            write_report_csv(report, create(&out.join("report.csv"))?)?;
            write_user_csv(&report.users, create(&out.join("users.csv"))?)
        }
        Format::Svg => {
            let path = out.join("report.svg");
            fs::write(&path, report_svg(report)).map_err(|e| Error::file(&path, e))
        }
    }
}

/// Reads either an evaluation report (its `combined` row is used) or a flat
/// JSON object of metric name to value.
fn read_metric_row(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(c) = value.get("combined") {
        let m: MetricsReport = serde_json::from_value(c.clone())?;
        return Ok(m.as_map());
    }
    Ok(serde_json::from_value(value)?)
}

fn compare_cmd(candidate: &Path, baseline: &Path, count_ties: bool, format: Format, out: &Path) -> Result<()> {
    let rule = if count_ties { WinRule::TiesCount } else { WinRule::Strict };
    let scores = composite(&read_metric_row(candidate)?, &read_metric_row(baseline)?, rule)?;
    match format {
        Format::Csv => write_composite_csv(&scores, create(&out.join("composite.csv"))?),
        _ => write_json(&out.join("composite.json"), &scores),
    }
}

fn bench_cmd(cfg: &RunConfig, models: &[PathBuf], data: &Path, samples: usize, out: &Path) -> Result<()> {
    let d = DataDir::load(data)?;
    let n = samples.min(d.test.len());
    let subset = SessionDataset::new(d.test.records[..n].to_vec(), SplitTag::Test);
    let mut w = csv::Writer::from_writer(create(&out.join("bench.csv"))?);
    w.write_record(["model", "params", "samples", "wall_seconds"])?;
    for path in models {
        let m = ClusterModel::load(path)?;
        let examples = m.examples(&subset)?;
        let start = Instant::now();
        let routes = m.route(&subset)?;
        for (ex, &k) in examples.iter().zip(&routes) {
            m.predictors[k].generate(&ex.input, &cfg.eval.generate)?;
        }
        let secs = start.elapsed().as_secs_f64();
        let params: usize = m.predictors.iter().map(|p| p.num_params()).sum();
        w.write_record([m.name.clone(), params.to_string(), n.to_string(), format!("{secs:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

fn report_cmd(input: &Path, format: Format, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::file(input, e))?;
    let report: EvaluationReport = serde_json::from_str(&text)?;
    match format {
        Format::Json => write_json(&out.join("report.json"), &report),
        other => emit_report(&report, other, out),
    }
}
