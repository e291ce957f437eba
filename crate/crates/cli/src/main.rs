//! `mmfm`: data generation, training, evaluation, relevancy, and reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::CliConfig;
use mmfm::analysis;
use mmfm::data::{
    gen_benchmark, gen_instruction_corpus, gen_pretrain_corpus, gen_vision_corpus, read_corpus, write_corpus,
    BenchmarkName, BenchmarkSpec, CorpusKind, Sample, Tokenizer,
};
use mmfm::eval::evaluate_to_dir;
use mmfm::model::{LmPreset, VisionVariant};
use mmfm::relevancy::{compare_runs, focus_stats, relevancy_for, render_overlay, save_trace};
use mmfm::train::{
    build_vision_cache, measure_throughput, run_ablation_matrix, run_cell, Cell, Checkpoint, MatrixIndex, ThroughputReport,
    Workload, STAGE2_FILE,
};

#[derive(Parser, Debug)]
#[command(name = "mmfm", version, about = "Desk-scale multimodal model ablation lab")]
struct Cli {
    /// Runs directory (overrides the config file).
    #[arg(long, global = true, env = "MMFM_RUNS_ROOT")]
    runs_root: Option<PathBuf>,
    /// TOML file merged over the shipped desk presets.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every seed (init, data, order, vision, benchmark).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Pretrain,
    Instruct,
    Benchmark,
    Vision,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural corpus or benchmark to disk.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        /// Benchmark name for --kind benchmark.
        #[arg(long)]
        name: Option<BenchmarkName>,
        /// Task mix for --kind instruct, e.g. `caption:0.5,count:0.5`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and cache a vision tower.
    PretrainVision {
        #[arg(long)]
        variant: VisionVariant,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train one ablation cell (resumes if partially done).
    Train {
        #[arg(long)]
        lm: LmPreset,
        #[arg(long)]
        vision: VisionVariant,
        #[arg(long, action = clap::ArgAction::Set)]
        pretrain_connector: bool,
        #[command(flatten)]
        steps: StepFlags,
    },
    /// Train all eight cells, skipping finished ones.
    Ablate {
        #[command(flatten)]
        steps: StepFlags,
    },
    /// Score runs on benchmarks; records go to <run>/eval/.
    Eval {
        #[command(flatten)]
        runs: RunSelection,
        /// Benchmark to score; all three when omitted.
        #[arg(long)]
        benchmark: Option<BenchmarkName>,
        /// Items per benchmark (generated with the eval seed).
        #[arg(long)]
        n: Option<usize>,
        /// Read items from a corpus written by gen-data instead.
        #[arg(long, conflicts_with = "benchmark")]
        data: Option<PathBuf>,
    },
    /// Relevancy heatmap for one item, optionally against a second run.
    Relevancy {
        #[arg(long)]
        run: String,
        #[arg(long)]
        against: Option<String>,
        #[arg(long, default_value = "toy-pope")]
        benchmark: BenchmarkName,
        #[arg(long)]
        item: u64,
        /// `first` or a 0-based index into the generated answer.
        #[arg(long, default_value = "first")]
        token: String,
        /// Use unnormalized per-layer updates.
        #[arg(long)]
        no_normalize: bool,
        /// Also write the attention trace for offline re-propagation.
        #[arg(long)]
        dump_trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-benchmark effect models over all eval records.
    Analyze {
        #[arg(long)]
        interactions: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the results table from eval summaries.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare training and generation speed of the language presets.
    BenchSpeed {
        #[arg(long, value_delimiter = ',', default_value = "S,L")]
        presets: Vec<LmPreset>,
        #[arg(long)]
        measured_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct StepFlags {
    #[arg(long)]
    steps_stage1: Option<usize>,
    #[arg(long)]
    steps_stage2: Option<usize>,
}

#[derive(clap::Args, Debug)]
#[group(required = true, multiple = false)]
struct RunSelection {
    #[arg(long)]
    run: Option<String>,
    /// Every run in the matrix index.
    #[arg(long)]
    all: bool,
}

struct Ctx {
    cfg: CliConfig,
    root: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let root = cli.runs_root.clone().unwrap_or_else(|| cfg.paths.runs_root.clone());
    let ctx = Ctx { cfg, root };
    match cli.command {
        Command::GenData { kind, n, name, mix, out } => gen_data(&ctx, kind, n, name, mix, out),
        Command::PretrainVision { variant, steps } => {
            let mut pc = ctx.cfg.vision_pretrain();
            if let Some(s) = steps {
                pc.steps = s;
            }
            let v = &ctx.cfg.vision;
            let h = build_vision_cache(&ctx.root, variant, v.corpus_size, v.corpus_seed, &pc)?;
            log::info!(
                "vision {}: loss {:?} -> {:?}",
                variant.as_str(),
                h.report.initial_loss(),
                h.report.final_loss()
            );
            println!("{}", mmfm::train::vision_cache_path(&ctx.root, variant).display());
            Ok(())
        }
        Command::Train { lm, vision, pretrain_connector, steps } => {
            let base = base_with(&ctx.cfg, &steps)?;
            let out = run_cell(&ctx.root, &base, Cell { lm, vision, pretrain: pretrain_connector })?;
            println!("{}", out.run_dir.display());
            Ok(())
        }
        Command::Ablate { steps } => {
            let base = base_with(&ctx.cfg, &steps)?;
            for out in run_ablation_matrix(&ctx.root, &base, None)? {
                println!("{}\t{} steps", out.run_dir.display(), out.trained_steps);
            }
            Ok(())
        }
        Command::Eval { runs, benchmark, n, data } => eval(&ctx, runs, benchmark, n, data),
        Command::Relevancy { run, against, benchmark, item, token, no_normalize, dump_trace, out } => {
            relevancy(&ctx, &run, against.as_deref(), benchmark, item, &token, !no_normalize, dump_trace, out)
        }
        Command::Analyze { interactions, out } => {
            let out = out.unwrap_or_else(|| ctx.root.join("analysis"));
            let report = analysis::analyze(&ctx.root, &out, interactions)?;
            for e in &report.estimates {
                let terms: Vec<String> = e.terms.iter().map(|t| format!("{}={:+.3}±{:.3}", t.name, t.beta, 1.96 * t.se)).collect();
                eprintln!("{} (n={}): {}", e.benchmark, e.n, terms.join(" "));
            }
            println!("{}", out.join("effects.json").display());
            Ok(())
        }
        Command::Report { out } => {
            let out = out.unwrap_or_else(|| ctx.root.join("analysis"));
            print!("{}", analysis::report(&ctx.root, &out)?);
            Ok(())
        }
        Command::BenchSpeed { presets, measured_steps, out } => bench_speed(&ctx, &presets, measured_steps, out),
    }
}

fn base_with(cfg: &CliConfig, steps: &StepFlags) -> Result<mmfm::train::BaseManifest> {
    let mut base = cfg.base_manifest()?;
    if let Some(s) = steps.steps_stage1 {
        base.hyperparams.steps_stage1 = s;
    }
    if let Some(s) = steps.steps_stage2 {
        base.hyperparams.steps_stage2 = s;
    }
    Ok(base)
}

fn gen_data(ctx: &Ctx, kind: Kind, n: usize, name: Option<BenchmarkName>, mix: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let seed = ctx.cfg.seeds.data;
    let (ck, label, samples, bench, mix) = match kind {
        Kind::Pretrain => (CorpusKind::Pretrain, "pretrain".to_string(), gen_pretrain_corpus(n, seed)?, None, None),
        Kind::Vision => (CorpusKind::Vision, "vision".to_string(), gen_vision_corpus(n, seed)?, None, None),
        Kind::Instruct => {
            let mix = match mix {
                Some(m) => mmfm::data::TaskMix::parse(&m)?,
                None => ctx.cfg.mix()?,
            };
            (CorpusKind::Instruct, "instruct".to_string(), gen_instruction_corpus(n, seed, &mix)?, None, Some(mix))
        }
        Kind::Benchmark => {
            let name = name.context("--kind benchmark needs --name")?;
            let samples = gen_benchmark(&BenchmarkSpec { name, size: n, seed })?;
            (CorpusKind::Benchmark, name.as_str().to_string(), samples, Some(name), None)
        }
    };
    let dir = out.unwrap_or_else(|| ctx.cfg.paths.data_dir.join(format!("{label}-n{n}-s{seed}")));
    let manifest = write_corpus(&dir, ck, bench, seed, mix, &samples)?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_run(ctx: &Ctx, run_id: &str) -> Result<(PathBuf, Checkpoint)> {
    let dir = ctx.root.join(run_id);
    let path = dir.join(STAGE2_FILE);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((dir, ck))
}

fn benchmark_items(ctx: &Ctx, name: BenchmarkName, n: Option<usize>) -> Result<Vec<Sample>> {
    let size = n.unwrap_or(ctx.cfg.eval.items);
    Ok(gen_benchmark(&BenchmarkSpec { name, size, seed: ctx.cfg.eval.seed })?)
}

fn eval(ctx: &Ctx, runs: RunSelection, benchmark: Option<BenchmarkName>, n: Option<usize>, data: Option<PathBuf>) -> Result<()> {
    let ids: Vec<String> = match runs.run {
        Some(id) => vec![id],
        None => MatrixIndex::load(&ctx.root)?.runs.into_iter().map(|e| e.run_id).collect(),
    };
    if ids.is_empty() {
        bail!("no runs under {}", ctx.root.display());
    }
    let suites: Vec<(BenchmarkName, Vec<Sample>)> = match data {
        Some(dir) => {
            let (m, samples) = read_corpus(&dir)?;
            let name = m.benchmark.with_context(|| format!("{} is not a benchmark corpus", dir.display()))?;
            vec![(name, samples)]
        }
        None => {
            let names = benchmark.map_or(BenchmarkName::ALL.to_vec(), |b| vec![b]);
            names.into_iter().map(|b| Ok((b, benchmark_items(ctx, b, n)?))).collect::<Result<_>>()?
        }
    };
    for id in ids {
        let (dir, ck) = load_run(ctx, &id)?;
        let tok = Tokenizer::new(ck.manifest.vocab_size)?;
        for (name, items) in &suites {
            let s = evaluate_to_dir(&ck, &tok, *name, items, &dir)?;
            let extra = s.f1.map(|f| format!(" f1 {f:.3}")).unwrap_or_default();
            println!("{id}\t{name}\tacc {:.3}{extra}\tn {}", s.accuracy, s.n_items);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn relevancy(
    ctx: &Ctx,
    run: &str,
    against: Option<&str>,
    benchmark: BenchmarkName,
    item_id: u64,
    token: &str,
    normalize: bool,
    dump_trace: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let position = match token {
        "first" => 0,
        t => t.parse::<usize>().with_context(|| format!("--token must be `first` or an index, got {t:?}"))?,
    };
    let items = benchmark_items(ctx, benchmark, None)?;
    let item = items
        .iter()
        .find(|s| s.id == item_id)
        .with_context(|| format!("{benchmark} has no item {item_id} (items 0..{})", items.len()))?;
    let (dir, ck) = load_run(ctx, run)?;
    let out = out.unwrap_or_else(|| dir.join("relevancy"));
    fs::create_dir_all(&out)?;
    if let Some(other) = against {
        let (_, ck_b) = load_run(ctx, other)?;
        let cmp = compare_runs(&ck, &ck_b, item, position, normalize, &out)?;
        println!("{}", serde_json::to_string_pretty(&cmp)?);
        return Ok(());
    }
    let model = ck.model()?;
    let tok = Tokenizer::new(ck.manifest.vocab_size)?;
    let (trace, map, heat) = relevancy_for(&model, &tok, item, position, normalize)?;
    let stem = format!("{benchmark}-{item_id}-t{position}");
    render_overlay(&item.scene.render(), &heat, &out.join(format!("{stem}.png")))?;
    if dump_trace {
        save_trace(&trace, &out.join(format!("{stem}.trace")))?;
    }
    #[derive(Serialize)]
    struct Stats<'a> {
        run_id: &'a str,
        item_id: u64,
        question: &'a str,
        generated: String,
        target_token: String,
        normalized: bool,
        degenerate: bool,
        heatmap: &'a [f64],
        #[serde(flatten)]
        stats: mmfm::relevancy::FocusStats,
    }
    let stats = Stats {
        run_id: run,
        item_id,
        question: &item.question,
        generated: tok.decode(&trace.generated),
        target_token: tok.word(trace.target_token),
        normalized: normalize,
        degenerate: heat.degenerate,
        heatmap: &heat.values,
        stats: focus_stats(&map),
    };
    let json = serde_json::to_string_pretty(&stats)?;
    fs::write(out.join(format!("{stem}.json")), &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct SpeedReport {
    reports: Vec<ThroughputReport>,
    /// Large over small preset, when both were measured.
    train_ratio: Option<f64>,
    inference_ratio: Option<f64>,
}

fn bench_speed(ctx: &Ctx, presets: &[LmPreset], measured: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut w = Workload { vocab_size: ctx.cfg.model.vocab_size, seed: ctx.cfg.seeds.init, ..Default::default() };
    if let Some(m) = measured {
        w.measured_steps = m;
    }
    let reports = presets.iter().map(|&p| measure_throughput(p, &w)).collect::<Result<Vec<_>, _>>()?;
    let find = |p: LmPreset| reports.iter().find(|r| r.preset == p);
    let (train_ratio, inference_ratio) = match (find(LmPreset::S), find(LmPreset::L)) {
        (Some(s), Some(l)) => {
            (Some(l.steps_per_second / s.steps_per_second), Some(l.tokens_per_second / s.tokens_per_second))
        }
        _ => (None, None),
    };
    let report = SpeedReport { reports, train_ratio, inference_ratio };
    let path = out.unwrap_or_else(|| ctx.root.join("bench").join("throughput.json"));
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}
