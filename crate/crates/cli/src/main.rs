//! `finegrain`: synthesize, curate, train, evaluate and report.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use finegrain_autodiff::{primitive_suite, Checkpoint};
use finegrain_core::curation::{curate_corpus, read_qa_shard, Task};
use finegrain_core::eval::{emit_report, eval_bbox2caption, eval_caption2bbox, read_report, EvalReport};
use finegrain_core::synth::{gen_corpus, gen_scene, record_seed};
use finegrain_core::trainer::{
    attach_images, load_samples, loss_grad_check, run_stage, trace_csv, EmaTeacher, StageConfig, StageInit,
    TrainSample,
};
use finegrain_core::vlm::Vlm;

use config::{config_error, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "finegrain", version, about = "Region-level vision-language pretraining at desk scale")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic component; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the file. 0 uses one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    B2c,
    C2b,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-world corpus (PNG images plus JSONL records).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Trailing scenes routed to heldout-*.jsonl; overrides the file.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Filter raw records and emit region QA shards plus stats.json.
    Curate {
        /// Input JSONL files or glob patterns.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage (0 = decoder warm-up, 1 = pretraining, 2 = adaptation).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        stage: u8,
        /// Directory of curated qa-*.jsonl shards.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path, or `fresh`.
        #[arg(long)]
        init: String,
        /// With `--init fresh`: take decoder weights from this checkpoint.
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Output checkpoint; `.stageN` is appended when missing.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the stage's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Held-out QA directory for periodic evaluation (every `eval_every` steps).
        #[arg(long)]
        eval_set: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a QA shard (or directory of shards).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        set: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-check every primitive and the full stage-1 loss.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Random parameter coordinates probed on the full loss.
        #[arg(long, default_value_t = 20)]
        coords: usize,
    },
    /// Merge loss traces and eval reports into one summary JSON.
    Report {
        #[arg(long = "trace", num_args = 0..)]
        traces: Vec<PathBuf>,
        #[arg(long = "eval", num_args = 0..)]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed check that is not an error in the run itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CheckFailed(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() || is_core_config(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_core_config(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<finegrain_core::Error>(), Some(finegrain_core::Error::Config(_)))
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth { n, out, holdout } => {
            if let Some(h) = holdout {
                cfg.synth.holdout = h;
            }
            cfg.validate()?;
            let shards = gen_corpus(n, cfg.seed, &out, &cfg.synth)?;
            cfg.echo(&out.join("config.toml"))?;
            println!("wrote {n} scenes in {} shard(s) to {}", shards.len(), out.display());
        }
        Command::Curate { inputs, out } => {
            let paths = expand_inputs(&inputs)?;
            let stats = curate_corpus(&paths, &cfg.curation, &out)?;
            cfg.echo(&out.join("config.toml"))?;
            println!(
                "records {}/{} accepted, regions {}/{} accepted, QA samples {:?}",
                stats.records_accepted,
                stats.records_in,
                stats.regions_accepted,
                stats.regions_in,
                stats.qa_samples_emitted_by_task
            );
        }
        Command::Train {
            stage,
            corpus,
            init,
            decoder,
            out,
            steps,
            eval_set,
        } => train(&mut cfg, stage, &corpus, &init, decoder.as_deref(), &out, steps, eval_set.as_deref())?,
        Command::Eval { ckpt, set, task, out } => {
            let model = Vlm::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let samples = load_eval_set(&set)?;
            let metric = match task {
                EvalTask::B2c => eval_bbox2caption(&model, &samples, cfg.eval.max_new)?,
                EvalTask::C2b => eval_caption2bbox(&model, &samples, cfg.eval.tau, cfg.eval.max_new)?,
            };
            let tag = match task {
                EvalTask::B2c => "b2c",
                EvalTask::C2b => "c2b",
            };
            println!("{tag} {} = {:.6} over {} samples", metric.metric, metric.value, metric.samples);
            let mut report = EvalReport::default();
            report.tasks.insert(tag.to_string(), metric);
            emit_report(&report, &out)?;
            cfg.echo(&sibling(&out, "config.toml"))?;
        }
        Command::Gradcheck { eps, coords } => gradcheck(&cfg, eps, coords)?,
        Command::Report { traces, evals, out } => report(&traces, &evals, &out)?,
    }
    Ok(())
}

fn expand_inputs(patterns: &[String]) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pattern in patterns {
        let mut matched: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| config_error(format!("bad glob {pattern}: {e}")))?
            .collect::<Result<_, _>>()?;
        if matched.is_empty() {
            return Err(config_error(format!("no input matches {pattern}")));
        }
        matched.sort();
        paths.extend(matched);
    }
    Ok(paths)
}

/// `path` with its file name replaced by `<file name>.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.{suffix}"))
}

fn load_eval_set(set: &Path) -> anyhow::Result<Vec<TrainSample>> {
    if set.is_dir() {
        return Ok(load_samples(set)?);
    }
    let base = set.parent().unwrap_or(Path::new("."));
    Ok(attach_images(read_qa_shard(set)?, base)?)
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &mut RunConfig,
    stage: u8,
    corpus: &Path,
    init: &str,
    decoder: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    eval_set: Option<&Path>,
) -> anyhow::Result<()> {
    if let Some(s) = steps {
        cfg.stage_mut(stage).steps = s;
    }
    cfg.validate()?;
    let stage_cfg: StageConfig = cfg.stage(stage).clone();
    let init = match (init, decoder) {
        ("fresh", None) => StageInit::Fresh {
            vlm: cfg.model.clone(),
            seed: stage_cfg.seed,
        },
        ("fresh", Some(d)) => StageInit::WarmDecoder {
            decoder: Checkpoint::load(d)?,
            seed: stage_cfg.seed,
        },
        (_, Some(_)) => return Err(config_error("--decoder only applies with --init fresh")),
        (path, None) => StageInit::Checkpoint(Checkpoint::load(path)?),
    };
    let samples = load_samples(corpus)?;
    let held = eval_set.map(load_samples).transpose()?;
    let (max_new, tau) = (cfg.eval.max_new, cfg.eval.tau);
    let evaluator = |m: &Vlm| -> finegrain_core::Result<f64> {
        let held = held.as_deref().expect("evaluator only built with an eval set");
        if stage == 2 {
            Ok(eval_caption2bbox(m, held, tau, max_new)?.value)
        } else {
            Ok(eval_bbox2caption(m, held, max_new)?.value)
        }
    };
    let eval_ref: Option<&dyn Fn(&Vlm) -> finegrain_core::Result<f64>> = held.as_ref().map(|_| &evaluator as _);
    let output = run_stage(&stage_cfg, &samples, init, eval_ref)?;

    let suffix = format!(".stage{stage}");
    let ckpt_path = if out.to_string_lossy().ends_with(&suffix) {
        out.to_path_buf()
    } else {
        PathBuf::from(format!("{}{suffix}", out.display()))
    };
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    output.checkpoint.save(&ckpt_path)?;
    std::fs::write(sibling(&ckpt_path, "trace.csv"), trace_csv(&output.state.trace))?;
    if !output.curve.is_empty() {
        let report = EvalReport {
            curve: output.curve.clone(),
            ..EvalReport::default()
        };
        std::fs::write(sibling(&ckpt_path, "curve.csv"), report.curve_csv())?;
    }
    cfg.echo(&sibling(&ckpt_path, "config.toml"))?;
    let last = output.state.trace.last();
    println!(
        "stage {stage}: {} steps, {} samples ({} outside the task mix); final l_caption {} -> {}",
        output.state.step,
        samples.len(),
        output.skipped,
        last.map_or("n/a".into(), |l| format!("{:.6}", l.l_caption)),
        ckpt_path.display()
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig, eps: f64, coords: usize) -> anyhow::Result<()> {
    let mut failures = Vec::new();
    let prims = primitive_suite(eps)?;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &prims {
        let w = worst.entry(r.name).or_default();
        *w = w.max(r.max_rel_err);
    }
    for (name, err) in &worst {
        let ok = *err <= 1e-5;
        println!("{:<24} {:>10.3e} {}", name, err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    }
    let stage1 = StageConfig {
        batch_size: 1,
        ..cfg.stage1.clone()
    };
    let mut model = Vlm::init(cfg.model.clone(), cfg.stage1.seed)?;
    model.set_trainable(stage1.trainable());
    let teacher = EmaTeacher::from_student(&Vlm::init(cfg.model.clone(), cfg.stage1.seed ^ 1)?);
    let (record, image) = gen_scene(record_seed(cfg.seed, 0), "probe", &cfg.synth);
    let sample = finegrain_core::curation::reformat(&record)?
        .into_iter()
        .find(|s| s.task == Task::Bbox2Caption)
        .ok_or_else(|| anyhow!("probe scene produced no region sample"))?;
    let batch = [TrainSample {
        sample,
        image: std::sync::Arc::new(image),
    }];
    let err = loss_grad_check(&mut model, &teacher, &stage1, &batch, coords, eps, cfg.seed)?;
    let ok = err <= 1e-4;
    println!("{:<24} {:>10.3e} {}", "stage1_loss", err, if ok { "ok" } else { "FAIL" });
    if !ok {
        failures.push("stage1_loss".into());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", failures.join(", "))).into())
    }
}

fn read_trace(path: &Path) -> anyhow::Result<Vec<[f64; 4]>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let vals: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}: malformed trace row", path.display(), i + 1))?;
        let row: [f64; 4] = vals
            .try_into()
            .map_err(|_| anyhow!("{}:{}: expected 4 columns", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn report(traces: &[PathBuf], evals: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut summary = serde_json::Map::new();
    let mut stages = serde_json::Map::new();
    for path in traces {
        let rows = read_trace(path)?;
        let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
            continue;
        };
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        stages.insert(
            name,
            serde_json::json!({
                "steps": last[0] as u64,
                "l_caption_first": round6(first[1]),
                "l_caption_last": round6(last[1]),
                "l_distill_first": round6(first[2]),
                "l_distill_last": round6(last[2]),
                "l_total_last": round6(last[3]),
            }),
        );
    }
    summary.insert("training".into(), stages.into());
    let mut reports = serde_json::Map::new();
    for path in evals {
        let r = read_report(path)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let tasks: serde_json::Map<String, serde_json::Value> = r
            .tasks
            .iter()
            .map(|(k, m)| {
                (
                    k.clone(),
                    serde_json::json!({"metric": m.metric, "value": round6(m.value), "samples": m.samples, "parse_failures": m.parse_failures}),
                )
            })
            .collect();
        reports.insert(name, tasks.into());
    }
    summary.insert("evaluation".into(), reports.into());
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(summary))?;
    text.push('\n');
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}
