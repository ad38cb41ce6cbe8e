mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use merge_gate_core::analysis::{
    compute_reduction_curve, delta_grid, eval_model, pearson, per_sample_bpb_increase, write_curve_csv, EvalReport, MacsConfig,
};
use merge_gate_core::control::{train_loop, BatchSource, DatasetSource, TaskSource};
use merge_gate_core::data::{byte_of, collate, read_ndjson, write_ndjson, Task, TaskExample, BOS_ID, EOS_ID, PAD_ID};
use merge_gate_core::model::{DeletionMode, ForwardOptions, Model, ModelConfig};
use serde::Serialize;
use serde_json::json;

use config::{ExperimentConfig, ResolvedRun};

#[derive(Parser)]
#[command(name = "merge-gate", version, about = "Train and analyse byte-level models with a learned deletion gate")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated task examples as ndjson.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Train one model, or one per swept gate layer.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Print the resolved runs and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// ndjson examples; without it, held-out examples come from the config task.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "hard")]
        mode: DeletionMode,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        timing_runs: usize,
    },
    /// Tabulate MACs against the deletion ratio.
    AnalyzeMacs {
        #[command(flatten)]
        common: Common,
        /// Derive sizes from a checkpoint's model config instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `max:step` or a comma-separated list of ratios.
        #[arg(long, default_value = "0.9:0.05")]
        grid: String,
        /// Encoder and decoder lengths used with `--checkpoint`.
        #[arg(long, default_value_t = 64)]
        n_e: usize,
        #[arg(long, default_value_t = 64)]
        n_d: usize,
    },
    /// Dump per-token gate values and deletions.
    InspectGates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn parse_mode(s: &str) -> Result<DeletionMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode {s:?}; expected none, soft or hard"))
}

const HOLDOUT_OFFSET: u64 = 0x5eed_0000_0000;

/// Seed of the held-out examples for a run seeded with `seed`.
fn holdout_seed(seed: u64) -> u64 {
    seed.wrapping_add(HOLDOUT_OFFSET)
}

fn threads() -> Result<usize> {
    match std::env::var("MERGE_GATE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("MERGE_GATE_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn generate_data(common: &Common, count: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let out = match (&common.out, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("data.ndjson"),
        (None, None) => bail!("--out is required"),
    };
    let task = Task::load(&cfg.task)?;
    let examples = task.examples(cfg.seed, 0, count)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_ndjson(&out, &examples).with_context(|| format!("writing {}", out.display()))?;
    write_json(&sidecar(&out), &json!({ "task": cfg.task, "seed": cfg.seed, "count": count }))?;
    log::info!("wrote {count} examples to {}", out.display());
    Ok(())
}

fn eval_row(step: usize, r: &EvalReport) -> String {
    format!("{step},{},{},{},{},{}", r.token_acc, r.seq_acc, r.seq_len_reduction, r.ce, r.bpb)
}

fn train_one(run: &ResolvedRun, resume: bool) -> Result<()> {
    fs::create_dir_all(&run.out_dir)?;
    write_json(&run.out_dir.join("resolved_config.json"), run)?;
    let task = Task::load(&run.task)?;
    let mut model = Model::<f32>::new(run.model.clone(), run.seed)?;
    let source: Box<dyn BatchSource> = match &run.dataset {
        Some(p) => Box::new(DatasetSource { examples: read_ndjson(p)? }),
        None => Box::new(TaskSource { task: task.clone(), seed: run.seed }),
    };
    let held_out = match &run.eval {
        Some(e) => task.examples(holdout_seed(run.seed), 0, e.count)?,
        None => Vec::new(),
    };
    let settings = run.eval.clone().unwrap_or_default();
    let eval_path = run.out_dir.join("eval.csv");
    let mut eval_log = if run.eval.is_some() && run.train.eval_every > 0 {
        let keep = if resume && eval_path.exists() { fs::read_to_string(&eval_path)? } else { String::new() };
        let mut f = fs::File::create(&eval_path)?;
        if keep.is_empty() {
            writeln!(f, "step,token_acc,seq_acc,seq_len_reduction,ce,bpb")?;
        } else {
            f.write_all(keep.as_bytes())?;
        }
        Some(f)
    } else {
        None
    };
    let mut hook = |m: &Model<f32>, step: usize| -> merge_gate_core::Result<()> {
        if let Some(f) = eval_log.as_mut() {
            let r = eval_model(m, &held_out, settings.mode, settings.batch_size, 1)?;
            writeln!(f, "{}", eval_row(step, &r))?;
            log::info!("eval at {step}: token {:.2}% seq {:.2}% reduction {:.2}%", r.token_acc, r.seq_acc, r.seq_len_reduction);
        }
        Ok(())
    };
    let summary = train_loop(&mut model, source.as_ref(), &run.train, Some(&run.out_dir), resume, Some(&mut hook))?;
    write_json(
        &run.out_dir.join("summary.json"),
        &json!({
            "steps_run": summary.steps_run,
            "final_step": summary.final_step,
            "skipped_steps": summary.skipped_steps,
            "data_exhausted": summary.data_exhausted,
            "last": summary.last,
        }),
    )?;
    if let Some(e) = &run.eval {
        let report = eval_model(&model, &held_out, e.mode, e.batch_size, e.timing_runs)?;
        write_json(&run.out_dir.join("eval.json"), &report)?;
        log::info!(
            "{}: token {:.2}% seq {:.2}% reduction {:.2}%",
            run.out_dir.display(),
            report.token_acc,
            report.seq_acc,
            report.seq_len_reduction
        );
    }
    Ok(())
}

fn train(common: &Common, resume: bool, dry_run: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.clone().or_else(|| cfg.out_dir.clone()).context("--out or out_dir is required")?;
    let runs = cfg.resolve(&out)?;
    if dry_run {
        println!("{}", serde_json::to_string_pretty(&runs)?);
        return Ok(());
    }
    if runs.len() > 1 {
        write_json(&out.join("resolved_config.json"), &runs)?;
    }
    let workers = threads()?.min(runs.len());
    log::info!("{} run(s) on {workers} thread(s)", runs.len());
    let errors: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let runs = &runs;
                s.spawn(move || {
                    runs.iter()
                        .skip(w)
                        .step_by(workers)
                        .filter_map(|r| train_one(r, resume).err().map(|e| format!("{}: {e:#}", r.out_dir.display())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap_or_else(|_| vec!["worker panicked".into()])).collect()
    });
    if !errors.is_empty() {
        bail!("{}", errors.join("\n"));
    }
    Ok(())
}

fn eval_examples(common: &Common, dataset: Option<&Path>, count: usize) -> Result<(Vec<TaskExample>, serde_json::Value)> {
    match dataset {
        Some(p) => Ok((read_ndjson(p).with_context(|| format!("reading {}", p.display()))?, json!({ "dataset": p }))),
        None => {
            let cfg = load_config(common).context("either --dataset or --config is needed")?;
            let seed = holdout_seed(cfg.seed);
            let ex = Task::load(&cfg.task)?.examples(seed, 0, count)?;
            Ok((ex, json!({ "task": cfg.task, "holdout_seed": seed, "count": count })))
        }
    }
}

fn check_vocab(model: &ModelConfig, examples: &[TaskExample]) -> Result<()> {
    let top = examples.iter().flat_map(|e| e.input.iter().chain(&e.target)).max().copied().unwrap_or(0);
    if top >= model.vocab_size {
        bail!("dataset token {top} is outside the checkpoint vocabulary of {}", model.vocab_size);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    common: &Common,
    checkpoint: &Path,
    dataset: Option<&Path>,
    mode: DeletionMode,
    count: usize,
    batch_size: usize,
    timing_runs: usize,
) -> Result<()> {
    let model = Model::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (examples, source) = eval_examples(common, dataset, count)?;
    check_vocab(&model.cfg, &examples)?;
    let report = eval_model(&model, &examples, mode, batch_size, timing_runs)?;
    let out = common.out.clone().unwrap_or_else(|| checkpoint.join("eval"));
    fs::create_dir_all(&out)?;
    write_json(
        &out.join("eval_config.json"),
        &json!({ "checkpoint": checkpoint, "source": source, "mode": mode, "batch_size": batch_size, "timing_runs": timing_runs }),
    )?;
    write_json(&out.join("eval.json"), &report)?;
    let mut csv = String::from("metric,value\n");
    let flat = serde_json::to_value(&report)?;
    for (k, v) in flat.as_object().into_iter().flatten() {
        if v.is_number() || v.is_string() {
            csv.push_str(&format!("{k},{}\n", v.as_str().map_or_else(|| v.to_string(), str::to_owned)));
        }
    }
    fs::write(out.join("eval.csv"), csv)?;
    if mode != DeletionMode::None && model.cfg.baseline.is_gated() {
        let pairs = per_sample_bpb_increase(&model, &examples, mode, batch_size)?;
        let mut text = String::from("bpb_increase_pct,seq_len_reduction_pct\n");
        for (a, b) in &pairs {
            text.push_str(&format!("{a},{b}\n"));
        }
        fs::write(out.join("per_sample.csv"), text)?;
        write_json(&out.join("correlation.json"), &json!({ "pearson": pearson(&pairs) }))?;
    }
    println!(
        "token_acc {:.3}  seq_acc {:.3}  reduction {:.3}%  bpb {:.4}  divergence {}",
        report.token_acc,
        report.seq_acc,
        report.seq_len_reduction,
        report.bpb,
        report.soft_hard_divergence.map_or("n/a".into(), |d| format!("{d:.3e}"))
    );
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if let Some((max, step)) = spec.split_once(':') {
        let (max, step): (f64, f64) = (max.trim().parse()?, step.trim().parse()?);
        if !(step > 0.0) || !(0.0..=1.0).contains(&max) {
            bail!("grid {spec:?} needs 0 <= max <= 1 and step > 0");
        }
        return Ok(delta_grid(max, step));
    }
    spec.split(',').map(|s| s.trim().parse::<f64>().with_context(|| format!("bad ratio {s:?}"))).collect()
}

fn analyze_macs(common: &Common, checkpoint: Option<&Path>, grid: &str, n_e: usize, n_d: usize) -> Result<()> {
    let base = match (checkpoint, &common.config) {
        (Some(_), Some(_)) => bail!("give either --checkpoint or --config, not both"),
        (Some(dir), None) => {
            let m: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
            MacsConfig {
                n_e,
                n_d,
                d_model: m.d_model,
                d_ff: m.d_ff,
                l_e: m.encoder_layers,
                l_d: m.decoder_layers,
                l_g: m.gate_layer,
                delta: 0.0,
            }
        }
        (None, Some(p)) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, None) => MacsConfig::small(),
    };
    let grid = parse_grid(grid)?;
    let rows = compute_reduction_curve(&base, &grid)?;
    match &common.out {
        Some(out) => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_curve_csv(out, &rows)?;
            write_json(&sidecar(out), &json!({ "macs": base, "grid": grid }))?;
        }
        None => {
            println!("delta,encoder_macs,decoder_macs,reduction");
            for r in &rows {
                println!("{},{},{},{}", r.delta, r.encoder, r.decoder, r.reduction);
            }
        }
    }
    Ok(())
}

fn show(id: usize) -> String {
    match (id, byte_of(id)) {
        (PAD_ID, _) => "<pad>".into(),
        (EOS_ID, _) => "</s>".into(),
        (BOS_ID, _) => "<s>".into(),
        (_, Some(b)) if b.is_ascii_graphic() || b == b' ' => (b as char).to_string(),
        (_, Some(b)) => format!("\\x{b:02x}"),
        _ => format!("<{id}>"),
    }
}

fn inspect_gates(common: &Common, checkpoint: &Path, dataset: Option<&Path>, count: usize) -> Result<()> {
    let model = Model::<f32>::load(checkpoint)?;
    if !model.cfg.baseline.is_gated() {
        bail!("checkpoint uses a pooling reducer; it has no per-token gate");
    }
    let (mut examples, _) = eval_examples(common, dataset, count)?;
    examples.truncate(count);
    if examples.is_empty() {
        bail!("no examples to inspect");
    }
    check_vocab(&model.cfg, &examples)?;
    let batch = collate(&examples)?;
    let (_, f) = model.run(&batch, &ForwardOptions::new(DeletionMode::Soft))?;
    let gate = f.enc.gate.context("forward pass produced no gate")?;
    let mut lines = String::new();
    for b in 0..batch.batch {
        let n = batch.enc_len;
        let tokens: Vec<_> = (0..n)
            .filter(|&i| batch.enc_valid[b * n + i])
            .map(|i| json!({ "token": show(batch.enc_ids[b * n + i]), "gate": gate.values[b * n + i], "kept": gate.keep[b * n + i] }))
            .collect();
        let kept: String = (0..n).filter(|&i| gate.keep[b * n + i]).map(|i| show(batch.enc_ids[b * n + i])).collect();
        let rec = json!({
            "index": b,
            "kept_text": kept,
            "kept": gate.kept_count[b],
            "valid": gate.valid_count[b],
            "tokens": tokens,
        });
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
        eprintln!("{:>3} kept {:>3}/{:<3} {}", b, gate.kept_count[b], gate.valid_count[b], kept);
    }
    match &common.out {
        Some(p) => fs::write(p, lines).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Command::GenerateData { common, count } => generate_data(common, *count),
        Command::Train { common, resume, dry_run } => train(common, *resume, *dry_run),
        Command::Eval { common, checkpoint, dataset, mode, count, batch_size, timing_runs } => {
            eval(common, checkpoint, dataset.as_deref(), *mode, *count, *batch_size, *timing_runs)
        }
        Command::AnalyzeMacs { common, checkpoint, grid, n_e, n_d } => analyze_macs(common, checkpoint.as_deref(), grid, *n_e, *n_d),
        Command::InspectGates { common, checkpoint, dataset, count } => inspect_gates(common, checkpoint, dataset.as_deref(), *count),
    }
}
