//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p mmfm-cli --test acceptance` runs all nine; pass criterion
//! numbers after `--` to run a subset. Expensive artifacts (the reference run,
//! the overfit probe, the multi-seed matrices) are cached under
//! `target/tmp/acceptance/<source fingerprint>` so unchanged sources reuse them.
//! Set `MMFM_ACCEPTANCE_ROOT` to put the cache elsewhere.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use mmfm::analysis::{fit_effects, render_results_table, ResultsTable, TableRow, Z95};
use mmfm::data::{gen_benchmark, gen_instruction_corpus, BenchmarkName, BenchmarkSpec, TaskMix, Tokenizer};
use mmfm::eval::{evaluate_to_dir, EvalRecord};
use mmfm::hashing::sha256_hex;
use mmfm::model::{Component, LmPreset, VisionPretrainConfig, VisionVariant};
use mmfm::numeric::gradcheck::{primitive_suite, TOLERANCE};
use mmfm::numeric::Rng;
use mmfm::relevancy::{layer_contribution, propagate, AttentionTrace, LayerTrace, Layout};
use mmfm::train::{
    answer_accuracy, build_vision_cache, init_checkpoint, load_vision_cache, manifest_for, measure_throughput,
    read_train_log, run_ablation_matrix, run_cell, stage2_finetune, BaseManifest, Cell, Checkpoint, DataSpec,
    Hyperparams, LogEvent, Seeds, Workload, STAGE1_FILE, STAGE2_FILE,
};
use serde::{Deserialize, Serialize};

const GRAD_TRIALS: u64 = 10;
const GRAD_BUDGET_SECS: f64 = 60.0;
const RELEVANCY_TOL: f64 = 1e-10;
const RELEVANCY_FIXTURES: usize = 500;
const OLS_TOL: f64 = 1e-8;
const OLS_FITS: usize = 200;
const MC_SEED: u64 = 7;
const MC_N: u64 = 10_000;
const MC_PLANTED: f64 = -0.1;
const OVERFIT_SAMPLES: usize = 64;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_CHECK_EVERY: usize = 100;
const REFERENCE_SEED: u64 = 17;
const REFERENCE_POPE_ITEMS: usize = 500;
const REFERENCE_POPE_MIN: f64 = 0.75;
const MAJORITY_BASELINE: f64 = 0.5;
// The accuracy floor sits strictly above the majority baseline.
const _: () = assert!(REFERENCE_POPE_MIN > MAJORITY_BASELINE);
const REFERENCE_BUDGET_SECS: f64 = 30.0 * 60.0;
const DIRECTION_SEEDS: [u64; 3] = [17, 18, 19];
const DIRECTION_POPE_ITEMS: usize = 200;

type Outcome = Result<String, String>;

fn fail<E: Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: u8,
    name: &'static str,
    gated: bool,
    run: fn(&Path) -> Outcome,
}

fn main() -> ExitCode {
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "gradient suite", gated: true, run: gradient_suite },
        Criterion { id: 2, name: "freeze invariants", gated: true, run: freeze_invariants },
        Criterion { id: 3, name: "relevancy oracle", gated: true, run: relevancy_oracle },
        Criterion { id: 4, name: "OLS oracle", gated: true, run: ols_oracle },
        Criterion { id: 5, name: "table rendering", gated: true, run: table_rendering },
        Criterion { id: 6, name: "training sanity", gated: true, run: training_sanity },
        Criterion { id: 7, name: "throughput direction", gated: true, run: throughput_direction },
        Criterion { id: 8, name: "end-to-end determinism", gated: true, run: determinism },
        Criterion { id: 9, name: "directional ablation (soft)", gated: false, run: directional_ablation },
    ];
    let cache = cache_root();
    if let Err(e) = fs::create_dir_all(&cache) {
        eprintln!("cannot create {}: {e}", cache.display());
        return ExitCode::FAILURE;
    }
    println!("acceptance cache: {}", cache.display());
    let mut gated_failures = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| (c.run)(&cache))).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match (&out, c.gated) {
            (Ok(d), _) => ("PASS", d.clone()),
            (Err(e), true) => {
                gated_failures += 1;
                ("FAIL", e.clone())
            }
            (Err(e), false) => ("SOFT-FAIL", format!("{e} (reported, not gated)")),
        };
        println!("criterion {} [{tag}] {}: {detail} ({secs:.1}s)", c.id, c.name);
    }
    if gated_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// Hash of the library sources and shipped presets, so cached runs are
/// rebuilt whenever the code that produced them changes.
fn source_fingerprint() -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = Vec::new();
    walk(&here.join("../core/src"), &mut files);
    walk(&here.join("../../configs"), &mut files);
    files.sort();
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(f.strip_prefix(here).unwrap_or(&f).to_string_lossy().as_bytes());
        bytes.extend(fs::read(&f).unwrap_or_default());
    }
    sha256_hex(&bytes)
}

fn cache_root() -> PathBuf {
    match std::env::var_os("MMFM_ACCEPTANCE_ROOT") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&source_fingerprint()[..16]),
    }
}

fn ensure_vision(root: &Path, variant: VisionVariant, corpus_size: usize, corpus_seed: u64, cfg: &VisionPretrainConfig) -> Result<(), String> {
    if let Ok((h, _)) = load_vision_cache(root, variant) {
        if h.corpus_size == corpus_size && h.corpus_seed == corpus_seed && h.pretrain == *cfg {
            return Ok(());
        }
    }
    build_vision_cache(root, variant, corpus_size, corpus_seed, cfg).map_err(fail)?;
    Ok(())
}

// 1 ----------------------------------------------------------------------

fn gradient_suite(_: &Path) -> Outcome {
    let start = Instant::now();
    let checks = primitive_suite(GRAD_TRIALS);
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<String> =
        checks.iter().filter(|c| !(c.worst < TOLERANCE) || c.trials < GRAD_TRIALS).map(|c| format!("{} {:.2e}", c.op, c.worst)).collect();
    if !bad.is_empty() {
        return Err(format!("above {TOLERANCE:e}: {}", bad.join(", ")));
    }
    if secs >= GRAD_BUDGET_SECS {
        return Err(format!("suite took {secs:.1}s, budget {GRAD_BUDGET_SECS}s"));
    }
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    Ok(format!("{} primitives x {GRAD_TRIALS} instances, worst relative error {worst:.2e} < {TOLERANCE:e}", checks.len()))
}

// 2 ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
struct Hashes {
    vision: String,
    connector: String,
    language: String,
}

fn hashes_by_stage(events: &[LogEvent]) -> BTreeMap<&'static str, Hashes> {
    events
        .iter()
        .filter_map(|e| match e {
            LogEvent::Hashes { stage, vision, connector, language } => Some((
                stage.as_str(),
                Hashes { vision: vision.clone(), connector: connector.clone(), language: language.clone() },
            )),
            LogEvent::Step(_) => None,
        })
        .collect()
}

fn freeze_invariants(_: &Path) -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let root = tmp.path();
    let vcfg = VisionPretrainConfig { steps: 2, batch_size: 4, ..VisionPretrainConfig::default() };
    for v in [VisionVariant::A, VisionVariant::B] {
        ensure_vision(root, v, 16, 3, &vcfg)?;
    }
    let base = BaseManifest {
        vocab_size: 512,
        seeds: Seeds::all(3),
        hyperparams: Hyperparams { batch_size: 4, steps_stage1: 4, steps_stage2: 4, ..Hyperparams::default() },
        data: DataSpec { pretrain_size: 24, instruct_size: 24, mix: TaskMix::default() },
    };
    let outcomes = run_ablation_matrix(root, &base, None).map_err(fail)?;
    if outcomes.len() != 8 {
        return Err(format!("expected 8 cells, ran {}", outcomes.len()));
    }
    let instruct = gen_instruction_corpus(base.data.instruct_size, base.seeds.data, &base.data.mix).map_err(fail)?;
    for out in &outcomes {
        let cell = out.manifest.cell();
        let label = cell.label();
        let log = read_train_log(&out.run_dir).map_err(fail)?;
        let h = hashes_by_stage(&log);
        let (init, s2) = match (h.get("init"), h.get("stage2")) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(format!("{label}: train log lacks init or stage-2 hashes")),
        };
        // Independent recomputation of the init state from the manifest.
        let (vh, vision) = load_vision_cache(root, cell.vision).map_err(fail)?;
        let fresh = init_checkpoint(&out.manifest, &vision).map_err(fail)?;
        if fresh.component_hash(Component::Connector) != init.connector || vh.hash != init.vision {
            return Err(format!("{label}: logged init hashes do not match a fresh init"));
        }
        let final_ck = Checkpoint::load(&out.run_dir.join(STAGE2_FILE)).map_err(fail)?;
        if final_ck.component_hash(Component::Vision) != init.vision || s2.vision != init.vision {
            return Err(format!("{label}: stage 2 changed the vision tower"));
        }
        if cell.pretrain {
            let s1 = h.get("stage1").ok_or(format!("{label}: no stage-1 hashes"))?;
            if s1.vision != init.vision || s1.language != init.language {
                return Err(format!("{label}: stage 1 changed a frozen tower"));
            }
            if s1.connector == init.connector {
                return Err(format!("{label}: stage 1 did not move the connector"));
            }
            let ck1 = Checkpoint::load(&out.run_dir.join(STAGE1_FILE)).map_err(fail)?;
            if ck1.component_hash(Component::Connector) != s1.connector {
                return Err(format!("{label}: stage-1 checkpoint differs from its log"));
            }
        } else {
            if h.contains_key("stage1") || out.run_dir.join(STAGE1_FILE).exists() {
                return Err(format!("{label}: skip-pretrain run has a stage 1"));
            }
            // Stage 2 is deterministic, so replaying it from the fresh init
            // reproduces the logged result only if the run started there.
            let replay = stage2_finetune(&fresh, &instruct, &mut |_, _| ControlFlow::Continue(())).map_err(fail)?;
            if replay.component_hash(Component::Connector) != s2.connector {
                return Err(format!("{label}: stage 2 did not start from the init connector"));
            }
        }
    }
    Ok("8 cells: stage 1 keeps vision+LM hashes, stage 2 keeps vision, skip cells start stage 2 at init".into())
}

// 3 ----------------------------------------------------------------------

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

/// R = (I + Ā_L) ··· (I + Ā_1), with Ā built entry by entry.
fn product_expansion(t: &AttentionTrace, normalize: bool) -> Vec<f64> {
    let n = t.n;
    let mut r = identity(n);
    for l in &t.layers {
        let mut bar = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..l.heads).map(|h| l.attention[h * n * n + i * n + j] * l.gradient[h * n * n + i * n + j]).sum();
                bar[i * n + j] = (s / l.heads as f64).max(0.0);
            }
            let row = &mut bar[i * n..(i + 1) * n];
            let total: f64 = row.iter().sum();
            if normalize && total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let mut step = identity(n);
        step.iter_mut().zip(&bar).for_each(|(s, b)| *s += b);
        r = (0..n * n).map(|ij| (0..n).map(|k| step[(ij / n) * n + k] * r[k * n + ij % n]).sum()).collect();
    }
    r
}

fn random_trace(rng: &mut Rng, zero_gradients: bool) -> AttentionTrace {
    let layers = 1 + rng.below(3);
    let heads = 1 + rng.below(3);
    let grid = 1 + rng.below(2);
    let n = (grid * grid + rng.below(3)).clamp(2, 6);
    let text = n - grid * grid;
    let layers = (0..layers)
        .map(|_| {
            let mut attention: Vec<f64> = (0..heads * n * n).map(|_| rng.uniform()).collect();
            for row in attention.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let gradient = (0..heads * n * n).map(|_| if zero_gradients { 0.0 } else { rng.range(-2.0, 2.0) }).collect();
            LayerTrace { heads, attention, gradient }
        })
        .collect();
    AttentionTrace {
        n,
        layers,
        layout: Layout { grid, text_tokens: vec![0; text] },
        target_row: n - 1,
        target_token: 0,
        generated_position: 0,
        generated: vec![0],
    }
}

fn relevancy_oracle(_: &Path) -> Outcome {
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for k in 0..RELEVANCY_FIXTURES {
        let t = random_trace(&mut rng, false);
        for normalize in [false, true] {
            let got = propagate(&t, normalize).map_err(fail)?;
            for (x, y) in got.r.iter().zip(product_expansion(&t, normalize)) {
                worst = worst.max((x - y).abs());
            }
            for l in &t.layers {
                if let Some(v) = layer_contribution(l, t.n, normalize).iter().find(|&&v| !(v >= 0.0)) {
                    return Err(format!("fixture {k}: negative contribution {v}"));
                }
            }
        }
        let z = random_trace(&mut rng, true);
        if propagate(&z, true).map_err(fail)?.r != identity(z.n) {
            return Err(format!("fixture {k}: zero gradients did not give R = I"));
        }
    }
    if worst >= RELEVANCY_TOL {
        return Err(format!("max deviation from the product expansion {worst:e}"));
    }
    Ok(format!("{RELEVANCY_FIXTURES} fixtures, max deviation {worst:.1e} < {RELEVANCY_TOL:e}, zero gradients give I, all contributions >= 0"))
}

// 4 ----------------------------------------------------------------------

fn record(bench: BenchmarkName, item: u64, run: &str, flags: [u8; 3], correct: u8) -> EvalRecord {
    EvalRecord {
        run_id: run.into(),
        benchmark: bench,
        item_id: item,
        predicted: String::new(),
        gold: String::new(),
        correct,
        skip_pretrain: flags[0],
        dino_like: flags[1],
        large_lm: flags[2],
    }
}

fn regressor(r: &EvalRecord, name: &str) -> f64 {
    name.split(':')
        .map(|part| match part {
            "intercept" => 1.0,
            "skip_pretrain" => r.skip_pretrain as f64,
            "dino_like" => r.dino_like as f64,
            "large_lm" => r.large_lm as f64,
            other => panic!("unknown term {other}"),
        })
        .product()
}

/// Solves (XᵀX)β = Xᵀy and inverts XᵀX by Gauss-Jordan elimination.
fn normal_equations(recs: &[&EvalRecord], names: &[String]) -> (Vec<f64>, Vec<f64>) {
    let p = names.len();
    let x: Vec<Vec<f64>> = recs.iter().map(|r| names.iter().map(|n| regressor(r, n)).collect()).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.correct as f64).collect();
    let mut a: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| x.iter().map(|row| row[i] * row[j]).sum()).collect()).collect();
    let mut inv: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| (i == j) as u8 as f64).collect()).collect();
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..p {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in (0..p).filter(|&i| i != c) {
            let f = a[i][c];
            for j in 0..p {
                a[i][j] -= f * a[c][j];
                inv[i][j] -= f * inv[c][j];
            }
        }
    }
    let xty: Vec<f64> = (0..p).map(|i| x.iter().zip(&y).map(|(row, v)| row[i] * v).sum()).collect();
    let beta: Vec<f64> = (0..p).map(|i| (0..p).map(|j| inv[i][j] * xty[j]).sum()).collect();
    let rss: f64 = x.iter().zip(&y).map(|(row, v)| (v - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()).powi(2)).sum();
    let s2 = rss / (recs.len() - p) as f64;
    (beta, (0..p).map(|i| (s2 * inv[i][i]).sqrt()).collect())
}

fn ols_oracle(_: &Path) -> Outcome {
    let mut rng = Rng::new(11);
    let cells: Vec<[u8; 3]> = (0..8u8).map(|c| [c & 1, (c >> 1) & 1, (c >> 2) & 1]).collect();
    let mut worst = 0.0f64;
    for fit in 0..OLS_FITS {
        let p: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let mut recs = Vec::new();
        for bench in [BenchmarkName::ToyPope, BenchmarkName::ToyGqa] {
            let extra = rng.below(60);
            for i in 0..16 + extra {
                let c = if i < 16 { i % 8 } else { rng.below(8) };
                recs.push(record(bench, i as u64, &format!("r{c}"), cells[c], (rng.uniform() < p[c]) as u8));
            }
        }
        let interactions = fit % 2 == 1;
        for est in fit_effects(&recs, interactions).map_err(fail)? {
            let group: Vec<&EvalRecord> = recs.iter().filter(|r| r.benchmark == est.benchmark).collect();
            let names: Vec<String> = est.terms.iter().map(|t| t.name.clone()).collect();
            let (beta, se) = normal_equations(&group, &names);
            for (t, (b, s)) in est.terms.iter().zip(beta.iter().zip(&se)) {
                worst = worst.max((t.beta - b).abs()).max((t.se - s).abs());
            }
        }
    }
    if worst >= OLS_TOL {
        return Err(format!("max deviation from the normal equations {worst:e}"));
    }

    let mut rng = Rng::new(MC_SEED);
    let recs: Vec<EvalRecord> = (0..MC_N)
        .map(|i| {
            let flags = [(rng.uniform() < 0.5) as u8, (rng.uniform() < 0.5) as u8, (rng.uniform() < 0.5) as u8];
            let p = 0.6 + MC_PLANTED * flags[0] as f64;
            record(BenchmarkName::ToyPope, i, "mc", flags, (rng.uniform() < p) as u8)
        })
        .collect();
    let est = fit_effects(&recs, false).map_err(fail)?;
    let skip = est[0].term("skip_pretrain").ok_or("no skip_pretrain term")?;
    if !(skip.ci_low <= MC_PLANTED && MC_PLANTED <= skip.ci_high) || (skip.ci_high - skip.beta - Z95 * skip.se).abs() > 1e-12 {
        return Err(format!("planted {MC_PLANTED} outside [{:.4}, {:.4}]", skip.ci_low, skip.ci_high));
    }
    Ok(format!(
        "{OLS_FITS} random designs within {worst:.1e} of the normal equations; planted {MC_PLANTED} estimated {:.4} [{:.4}, {:.4}]",
        skip.beta, skip.ci_low, skip.ci_high
    ))
}

// 5 ----------------------------------------------------------------------

fn published_table() -> ResultsTable {
    let v = |xs: [f64; 9]| xs.into_iter().map(Some).collect::<Vec<_>>();
    let row = |l: &str, vis: &str, pre: &str, values: Vec<Option<f64>>, reference: bool| TableRow {
        labels: vec![l.into(), vis.into(), pre.into()],
        values,
        reference,
    };
    let mut phi = v([0.0, 0.0, 1335.0, 28.9, 0.0, 0.850, 71.4, 0.0, 0.684]);
    for i in [0, 1, 4, 7] {
        phi[i] = None;
    }
    ResultsTable {
        label_headers: vec!["Language".into(), "Vision".into(), "Pretrain".into()],
        columns: ["GQA", "MME Cog.", "MME Per.", "MM-Vet", "POPE Acc.", "POPE F1", "VQAv2", "MMVP", "SQA-Img"]
            .map(String::from)
            .to_vec(),
        decimals: vec![3, 0, 0, 1, 3, 3, 1, 3, 3],
        rows: vec![
            row("gemma-2b-it", "CLIP", "Yes", v([0.531, 236.0, 1130.0, 17.7, 0.850, 0.839, 70.7, 0.287, 0.564]), false),
            row("gemma-2b-it", "CLIP", "No", v([0.481, 249.0, 935.0, 13.1, 0.784, 0.762, 61.7, 0.180, 0.549]), false),
            row("gemma-2b-it", "DinoV2", "Yes", v([0.587, 307.0, 1133.0, 19.1, 0.853, 0.838, 71.4, 0.227, 0.555]), false),
            row("gemma-2b-it", "DinoV2", "No", v([0.501, 309.0, 959.0, 14.5, 0.793, 0.772, 61.7, 0.180, 0.568]), false),
            row("gemma-7b-it", "CLIP", "Yes", v([0.472, 254.0, 895.0, 18.2, 0.848, 0.829, 68.7, 0.327, 0.625]), false),
            row("gemma-7b-it", "CLIP", "No", v([0.472, 278.0, 857.0, 19.1, 0.782, 0.734, 65.1, 0.240, 0.636]), false),
            row("gemma-7b-it", "DinoV2", "Yes", v([0.519, 257.0, 1021.0, 14.3, 0.794, 0.762, 65.2, 0.327, 0.628]), false),
            row("gemma-7b-it", "DinoV2", "No", v([0.459, 226.0, 771.0, 12.2, 0.693, 0.567, 57.4, 0.267, 0.598]), false),
            row("Phi-2b", "CLIP", "Yes", phi, true),
            row("Llama-2-7b", "CLIP", "Yes", v([0.620, 348.0, 1511.0, 30.6, 0.850, 0.859, 78.5, 46.1, 0.704]), true),
        ],
    }
}

/// Bold cells of the published table as (row, column).
const PUBLISHED_BOLD: [(usize, usize); 10] = [(0, 5), (2, 0), (2, 2), (2, 3), (2, 4), (2, 6), (3, 1), (4, 7), (5, 8), (6, 7)];
/// MM-Vet 19.1 is repeated in the (7B, CLIP, No) row; the tie rule bolds it too.
const TIE_EXTRA: (usize, usize) = (5, 3);

fn table_rendering(_: &Path) -> Outcome {
    let t = published_table();
    let bold = t.highlights().map_err(fail)?;
    let ours: Vec<(usize, usize)> =
        (0..bold.len()).flat_map(|r| (0..t.columns.len()).map(move |c| (r, c))).filter(|&(r, c)| bold[r][c]).collect();
    let mut want = PUBLISHED_BOLD.to_vec();
    want.push(TIE_EXTRA);
    want.sort();
    if ours != want {
        return Err(format!("highlights {ours:?}, expected {want:?}"));
    }
    let md = render_results_table(&t).map_err(fail)?;
    for needle in ["| gemma-2b-it | DinoV2 | Yes | **0.587** |", "| **0.327** |"] {
        if !md.contains(needle) {
            return Err(format!("rendered table lacks {needle:?}"));
        }
    }
    if md.matches("**0.327**").count() != 2 {
        return Err("MMVP 0.327 is not bold twice".into());
    }
    Ok("GQA 0.587 bold at (2B, DinoV2, pretrain), MMVP 0.327 bold twice, all published highlights reproduced; MM-Vet 19.1 tie also bolds (7B, CLIP, No)".into())
}

// 6 ----------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Cached<T> {
    value: T,
    seconds: f64,
}

fn cached<T: Serialize + for<'de> Deserialize<'de>>(path: &Path, make: impl FnOnce() -> Result<T, String>) -> Result<Cached<T>, String> {
    if let Ok(bytes) = fs::read(path) {
        if let Ok(c) = serde_json::from_slice(&bytes) {
            return Ok(c);
        }
    }
    let start = Instant::now();
    let value = make()?;
    let c = Cached { value, seconds: start.elapsed().as_secs_f64() };
    fs::write(path, serde_json::to_vec_pretty(&c).map_err(fail)?).map_err(fail)?;
    Ok(c)
}

fn reference_root(cache: &Path) -> Result<PathBuf, String> {
    let root = cache.join("reference");
    ensure_vision(&root, VisionVariant::A, 4000, REFERENCE_SEED, &VisionPretrainConfig::default())?;
    Ok(root)
}

/// (steps taken, train accuracy reached)
fn overfit(root: &Path) -> Result<(usize, f64), String> {
    let base = BaseManifest {
        hyperparams: Hyperparams { steps_stage2: OVERFIT_MAX_STEPS, ..Hyperparams::default() },
        data: DataSpec { instruct_size: OVERFIT_SAMPLES, ..DataSpec::default() },
        ..BaseManifest::default()
    };
    let cell = Cell { lm: LmPreset::S, vision: VisionVariant::A, pretrain: false };
    let (vh, vision) = load_vision_cache(root, VisionVariant::A).map_err(fail)?;
    let manifest = manifest_for(&base, cell, &vh.hash);
    let init = init_checkpoint(&manifest, &vision).map_err(fail)?;
    let corpus = gen_instruction_corpus(OVERFIT_SAMPLES, base.seeds.data, &base.data.mix).map_err(fail)?;
    // Captions run longer than benchmark answers; leave room for the longest
    // one plus its end-of-answer marker.
    let tok = Tokenizer::new(base.vocab_size).map_err(fail)?;
    let mut budget = 0;
    for s in &corpus {
        budget = budget.max(s.gold_answer_ids(&tok).map_err(fail)?.len() + 1);
    }
    let mut reached = (OVERFIT_MAX_STEPS, 0.0);
    let mut error = None;
    stage2_finetune(&init, &corpus, &mut |rec, model| {
        let step = rec.step + 1;
        if !step.is_multiple_of(OVERFIT_CHECK_EVERY) && step != OVERFIT_MAX_STEPS {
            return ControlFlow::Continue(());
        }
        match answer_accuracy(model, &corpus, budget) {
            Ok(acc) => {
                reached = (step, acc);
                if acc >= OVERFIT_TARGET {
                    return ControlFlow::Break(());
                }
                ControlFlow::Continue(())
            }
            Err(e) => {
                error = Some(e.to_string());
                ControlFlow::Break(())
            }
        }
    })
    .map_err(fail)?;
    match error {
        Some(e) => Err(e),
        None => Ok(reached),
    }
}

fn training_sanity(cache: &Path) -> Outcome {
    let root = reference_root(cache)?;
    let fit = cached(&cache.join("overfit.json"), || overfit(&root))?;
    let (steps, acc) = fit.value;
    let overfit_line = format!("overfit {OVERFIT_SAMPLES} samples to {acc:.3} in {steps} steps");

    let reference = cached(&cache.join("reference.json"), || {
        let base = BaseManifest { seeds: Seeds::all(REFERENCE_SEED), ..BaseManifest::default() };
        let out = run_cell(&root, &base, Cell { lm: LmPreset::S, vision: VisionVariant::A, pretrain: true }).map_err(fail)?;
        let ck = Checkpoint::load(&out.run_dir.join(STAGE2_FILE)).map_err(fail)?;
        let tok = Tokenizer::new(base.vocab_size).map_err(fail)?;
        let items = gen_benchmark(&BenchmarkSpec { name: BenchmarkName::ToyPope, size: REFERENCE_POPE_ITEMS, seed: REFERENCE_SEED })
            .map_err(fail)?;
        let summary = evaluate_to_dir(&ck, &tok, BenchmarkName::ToyPope, &items, &out.run_dir).map_err(fail)?;
        Ok(summary.accuracy)
    })?;
    // The cached seconds include vision pretraining for a cold cache.
    let pope = reference.value;
    let minutes = reference.seconds / 60.0;
    let over = if reference.seconds > REFERENCE_BUDGET_SECS { ", over the 30 min target on this machine" } else { "" };
    let reference_line = format!("reference (S, A, pretrain) toy-POPE accuracy {pope:.3} in {minutes:.0} min{over}");

    let detail = format!("{overfit_line}; {reference_line}");
    if acc < OVERFIT_TARGET {
        return Err(format!("{detail}; overfit target {OVERFIT_TARGET} missed"));
    }
    if !(pope >= REFERENCE_POPE_MIN) {
        return Err(format!("{detail}; toy-POPE target {REFERENCE_POPE_MIN} missed"));
    }
    Ok(detail)
}

// 7 ----------------------------------------------------------------------

fn throughput_direction(_: &Path) -> Outcome {
    let w = Workload::default();
    let s = measure_throughput(LmPreset::S, &w).map_err(fail)?;
    let l = measure_throughput(LmPreset::L, &w).map_err(fail)?;
    let train = l.steps_per_second / s.steps_per_second;
    let infer = l.tokens_per_second / s.tokens_per_second;
    if !(train < 1.0 && infer < 1.0) {
        return Err(format!("L/S ratios train {train:.3}, inference {infer:.3}; both should be < 1"));
    }
    Ok(format!(
        "S {:.2} steps/s {:.1} tok/s, L {:.2} steps/s {:.1} tok/s; L/S train {train:.3}, inference {infer:.3}",
        s.steps_per_second, s.tokens_per_second, l.steps_per_second, l.tokens_per_second
    ))
}

// 8 ----------------------------------------------------------------------

const SMOKE_CONFIG: &str = "\
[data]
pretrain_size = 64
instruct_size = 64
[train]
batch_size = 4
steps_stage1 = 25
steps_stage2 = 25
[vision]
corpus_size = 32
steps = 5
batch_size = 4
";

fn mmfm(root: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmfm"))
        .args(["--config", root.join("smoke.toml").to_str().unwrap(), "--seed", "5"])
        .args(args)
        .env("MMFM_RUNS_ROOT", root.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fail)?;
    if !out.status.success() {
        return Err(format!("mmfm {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

fn smoke_pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fs::write(root.join("smoke.toml"), SMOKE_CONFIG).map_err(fail)?;
    let data = root.join("pope");
    mmfm(root, &["gen-data", "--kind", "benchmark", "--name", "toy-pope", "--n", "20", "--out", data.to_str().unwrap()])?;
    mmfm(root, &["pretrain-vision", "--variant", "A"])?;
    mmfm(root, &["pretrain-vision", "--variant", "B"])?;
    mmfm(root, &["ablate"])?;
    mmfm(root, &["eval", "--all", "--data", data.to_str().unwrap()])?;
    mmfm(root, &["analyze"])?;

    fn collect(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                collect(&p, base, out);
            } else if p.extension().is_some_and(|x| x == "jsonl") && p.parent().is_some_and(|d| d.ends_with("eval"))
                || p.ends_with("analysis/effects.json")
            {
                out.insert(p.strip_prefix(base).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap_or_default());
            }
        }
    }
    let mut files = BTreeMap::new();
    collect(root, root, &mut files);
    Ok(files)
}

fn determinism(_: &Path) -> Outcome {
    let a = tempfile::tempdir().map_err(fail)?;
    let b = tempfile::tempdir().map_err(fail)?;
    let fa = smoke_pipeline(a.path())?;
    let fb = smoke_pipeline(b.path())?;
    let records = fa.keys().filter(|k| k.ends_with(".jsonl")).count();
    if records != 8 || !fa.keys().any(|k| k.ends_with("effects.json")) {
        return Err(format!("expected 8 record files and effects.json, found {:?}", fa.keys().collect::<Vec<_>>()));
    }
    if fa.keys().ne(fb.keys()) {
        return Err("the two executions wrote different files".into());
    }
    if let Some(k) = fa.keys().find(|k| fa[*k] != fb[*k]) {
        return Err(format!("{k} differs between executions"));
    }
    Ok(format!("gen, ablate (8 cells x 50 steps), eval, analyze twice: {records} record files and effects.json byte-identical"))
}

// 9 ----------------------------------------------------------------------

/// Mean toy-POPE F1 of (pretrained cells, skipped cells) for one seed.
fn seed_f1(root: &Path, seed: u64) -> Result<(f64, f64), String> {
    let vcfg = VisionPretrainConfig { steps: 100, batch_size: 16, seed, ..VisionPretrainConfig::default() };
    for v in [VisionVariant::A, VisionVariant::B] {
        ensure_vision(root, v, 1000, seed, &vcfg)?;
    }
    let base = BaseManifest {
        vocab_size: 512,
        seeds: Seeds::all(seed),
        hyperparams: Hyperparams { batch_size: 4, steps_stage1: 50, steps_stage2: 250, ..Hyperparams::default() },
        data: DataSpec { pretrain_size: 1000, instruct_size: 2000, mix: TaskMix::default() },
    };
    let tok = Tokenizer::new(base.vocab_size).map_err(fail)?;
    let items = gen_benchmark(&BenchmarkSpec { name: BenchmarkName::ToyPope, size: DIRECTION_POPE_ITEMS, seed }).map_err(fail)?;
    let (mut pre, mut skip) = (Vec::new(), Vec::new());
    for out in run_ablation_matrix(root, &base, None).map_err(fail)? {
        let ck = Checkpoint::load(&out.run_dir.join(STAGE2_FILE)).map_err(fail)?;
        let s = evaluate_to_dir(&ck, &tok, BenchmarkName::ToyPope, &items, &out.run_dir).map_err(fail)?;
        let f1 = s.f1.ok_or("toy-pope summary has no F1")?;
        if out.manifest.pretrain_connector { pre.push(f1) } else { skip.push(f1) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&pre), mean(&skip)))
}

fn directional_ablation(cache: &Path) -> Outcome {
    let mut per_seed = Vec::new();
    for seed in DIRECTION_SEEDS {
        let root = cache.join(format!("direction-seed{seed}"));
        fs::create_dir_all(&root).map_err(fail)?;
        per_seed.push(cached(&root.join("f1.json"), || seed_f1(&root, seed))?.value);
    }
    let gaps: Vec<f64> = per_seed.iter().map(|(p, s)| p - s).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let sd = (gaps.iter().map(|g| (g - mean_gap).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt();
    let pre = per_seed.iter().map(|p| p.0).sum::<f64>() / per_seed.len() as f64;
    let skip = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
    let detail = format!(
        "seeds {DIRECTION_SEEDS:?}: pretrain F1 {pre:.3} vs skip {skip:.3}; per-seed gaps {:?}, sd {sd:.3}",
        gaps.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
    );
    if pre >= skip {
        Ok(detail)
    } else {
        Err(detail)
    }
}
