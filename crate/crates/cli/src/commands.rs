//! Subcommand implementations. Each returns data for programmatic use and
//! writes its files; printing is left to the binary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use datprl_core::data::{Domain, SyntheticSample, TaskKind};
use datprl_core::nn::Ctx;
use datprl_core::tensor::{cosine, Tape};
use datprl_core::trainer::{identity_metrics, AuditEntry, CellMetrics, Checkpoint, StepRecord, Trainer};
use datprl_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const CONFIG_FILE: &str = "config.resolved";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const EVAL_HISTORY_FILE: &str = "eval.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const AUDIT_FILE: &str = "grad_audit.csv";
pub const ANALYTICS_DIR: &str = "analytics";

/// Rel. error allowed by the once-per-run gradient audit.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(error: Error) -> CliError {
    CliError { code: EXIT_USAGE, error }
}

fn runtime(error: Error) -> CliError {
    CliError { code: EXIT_RUNTIME, error }
}

fn io_at(path: &Path, e: std::io::Error) -> CliError {
    runtime(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    runtime(Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Reads the config file (defaults when `None`), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides).map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    Ok(cfg)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv(path: &Path, cells: &[CellMetrics]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = std::iter::once(["domain", "task", "psnr_db", "ssim", "n"].map(String::from)).chain(cells.iter().map(|c| {
        [
            c.domain.to_string(),
            c.task.to_string(),
            fmt_f(c.psnr_db),
            fmt_f(c.ssim),
            c.n.to_string(),
        ]
    }));
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_at(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_at(path, e))
}

pub fn format_metrics(cells: &[CellMetrics]) -> String {
    let mut s = format!("{:<10} {:<12} {:>9} {:>8} {:>4}\n", "domain", "task", "psnr_db", "ssim", "n");
    for c in cells {
        s += &format!(
            "{:<10} {:<12} {:>9.3} {:>8.4} {:>4}\n",
            c.domain.as_str(),
            c.task.as_str(),
            c.psnr_db,
            c.ssim,
            c.n
        );
    }
    s
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<StepRecord>,
    pub metrics: Vec<CellMetrics>,
    pub baseline: Vec<CellMetrics>,
    pub audit: Vec<AuditEntry>,
}

fn write_audit(path: &Path, audit: &[AuditEntry]) -> CliResult<()> {
    let header = ["param", "index", "analytic", "numeric", "scale", "rel_err", "pass"].map(String::from);
    let rows: Vec<Vec<String>> = audit
        .iter()
        .map(|a| {
            vec![
                a.param.clone(),
                a.index.to_string(),
                format!("{:e}", a.analytic),
                format!("{:e}", a.numeric),
                format!("{:e}", a.scale),
                format!("{:e}", a.rel_err),
                (a.rel_err <= AUDIT_TOLERANCE).to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Keeps the first `steps` lines of a history file (used when resuming).
fn truncate_history(path: &Path, steps: usize) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| io_at(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .take(steps)
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_at(path, e))?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_at(path, e))
}

/// Drops eval records newer than `step`.
fn truncate_eval_history(path: &Path, step: usize) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s as usize <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| io_at(path, e))
}

/// Trains from scratch, or continues from the run directory's checkpoint
/// when `resume` is set and one exists.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> CliResult<TrainOutcome> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| io_at(&dir, e))?;
    let canonical = cfg.to_canonical();
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, &canonical).map_err(|e| io_at(&cfg_path, e))?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let hist_path = dir.join(HISTORY_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
        let t = Trainer::from_checkpoint(cfg.train.clone(), &ckpt).map_err(usage)?;
        truncate_history(&hist_path, t.step())?;
        truncate_eval_history(&dir.join(EVAL_HISTORY_FILE), t.step())?;
        log::info!("resuming {} at step {}", dir.display(), t.step());
        t
    } else {
        fs::write(&hist_path, "").map_err(|e| io_at(&hist_path, e))?;
        let eval_path = dir.join(EVAL_HISTORY_FILE);
        if eval_path.exists() {
            fs::remove_file(&eval_path).map_err(|e| io_at(&eval_path, e))?;
        }
        Trainer::new(cfg.train.clone()).map_err(usage)?
    };

    let hist_file = fs::OpenOptions::new()
        .append(true)
        .open(&hist_path)
        .map_err(|e| io_at(&hist_path, e))?;
    let mut hist = BufWriter::new(hist_file);
    let eval_path = dir.join(EVAL_HISTORY_FILE);
    let eval_set = trainer.eval_set().map_err(runtime)?;
    let mut records = Vec::new();
    let mut audit = Vec::new();
    let do_audit = cfg.grad_audit && trainer.step() == 0;
    let every = cfg.train.eval_every;

    let mut on_step = |t: &Trainer, rec: &StepRecord| -> datprl_core::Result<()> {
        serde_json::to_writer(&mut hist, rec).map_err(|e| Error::Io(e.into()))?;
        hist.write_all(b"\n")?;
        if rec.step % 100 == 0 {
            log::info!("step {} loss {:.5} lr {:.3e}", rec.step, rec.total, rec.lr);
        }
        if every > 0 && rec.step % every == 0 {
            let cells = t.evaluate(&eval_set)?;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&eval_path)?;
            let line = serde_json::json!({ "step": rec.step, "cells": cells });
            writeln!(f, "{line}")?;
        }
        records.push(rec.clone());
        Ok(())
    };
    if do_audit {
        trainer.run(1, &mut on_step).map_err(runtime)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(7);
        let n = cfg.train.data.roster.len();
        let batch = trainer
            .suite
            .balanced_batch(n, cfg.train.data.train_size, &mut rng)
            .map_err(runtime)?;
        audit = trainer.gradient_audit(&batch, 1e-6, &mut rng).map_err(runtime)?;
        for a in audit.iter().filter(|a| a.rel_err > AUDIT_TOLERANCE) {
            log::warn!("gradient audit: {} [{}] rel err {:.3e}", a.param, a.index, a.rel_err);
        }
        write_audit(&dir.join(AUDIT_FILE), &audit)?;
    }
    trainer.run(cfg.train.steps, &mut on_step).map_err(runtime)?;
    hist.flush().map_err(|e| io_at(&hist_path, e))?;
    drop(hist);

    trainer.checkpoint(&canonical).save(&ckpt_path).map_err(runtime)?;
    let metrics = trainer.evaluate(&eval_set).map_err(runtime)?;
    let baseline = identity_metrics(&eval_set).map_err(runtime)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &metrics)?;
    write_metrics_csv(&dir.join(BASELINE_FILE), &baseline)?;
    Ok(TrainOutcome {
        run_dir: dir,
        records,
        metrics,
        baseline,
        audit,
    })
}

/// Loads a checkpoint together with its embedded config plus overrides.
pub fn load_checkpoint(path: &Path, overrides: &[String]) -> CliResult<(RunConfig, Trainer)> {
    if !path.exists() {
        return Err(usage(Error::Checkpoint(format!("{} does not exist", path.display()))));
    }
    let ckpt = Checkpoint::load(path).map_err(runtime)?;
    let mut cfg = RunConfig::parse(&ckpt.config).map_err(runtime)?;
    cfg.apply_overrides(overrides).map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    let trainer = Trainer::from_checkpoint(cfg.train.clone(), &ckpt).map_err(usage)?;
    Ok((cfg, trainer))
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

/// Per-cell metrics on the seeded eval set, written as CSV.
pub fn cmd_eval(checkpoint: &Path, overrides: &[String], csv_out: Option<&Path>) -> CliResult<Vec<CellMetrics>> {
    let (_, trainer) = load_checkpoint(checkpoint, overrides)?;
    let samples = trainer.eval_set().map_err(runtime)?;
    let metrics = trainer.evaluate(&samples).map_err(runtime)?;
    let out = csv_out.map_or_else(|| sibling(checkpoint, METRICS_FILE), Path::to_path_buf);
    write_metrics_csv(&out, &metrics)?;
    Ok(metrics)
}

/// Selection counts per (domain, task) cell for one pool.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionHistogram {
    pub domain: Domain,
    pub task: TaskKind,
    pub samples: usize,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub task_selection: Vec<SelectionHistogram>,
    pub domain_selection: Vec<SelectionHistogram>,
    pub task_value_cosine: Vec<Vec<f64>>,
    pub domain_value_cosine: Vec<Vec<f64>>,
    pub gates: Vec<(usize, f64)>,
    /// Mean cosine between token-pooled `PR_d` and each anchor, rows per domain in roster order.
    pub anchor_cosine: Vec<(Domain, Vec<(Domain, f64)>)>,
    /// Per-cell pairwise cosine of the fused representation across samples.
    pub pr_similarity: Vec<(Domain, TaskKind, Vec<Vec<f64>>)>,
    pub files: Vec<PathBuf>,
}

struct SampleTrace {
    domain: Domain,
    task: TaskKind,
    task_sel: Option<Vec<usize>>,
    domain_sel: Option<Vec<usize>>,
    pooled_pr_d: Option<Vec<f64>>,
    pr_dt: Option<Vec<f64>>,
}

fn trace(trainer: &Trainer, s: &SyntheticSample) -> datprl_core::Result<SampleTrace> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &trainer.model.store);
    let out = trainer.model.forward(ctx, tape.constant(s.lq.clone())?)?;
    let pooled_pr_d = match out.pr_domain {
        Some(pr) => Some(pr.mean_axis(0)?.value().data().to_vec()),
        None => None,
    };
    Ok(SampleTrace {
        domain: s.domain,
        task: s.task,
        task_sel: out.diagnostics.task_selection.map(|x| x.indices),
        domain_sel: out.diagnostics.domain_selection.map(|x| x.indices),
        pooled_pr_d,
        pr_dt: out.pr_dt.map(|p| p.value().data().to_vec()),
    })
}

fn cosine_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| if i == j { 1.0 } else { cosine(a, b) })
                .collect()
        })
        .collect()
}

fn matrix_rows(m: &[Vec<f64>]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = std::iter::once("row".to_string())
        .chain((0..m.len()).map(|j| format!("c{j}")))
        .collect();
    let rows = m
        .iter()
        .enumerate()
        .map(|(i, r)| std::iter::once(i.to_string()).chain(r.iter().map(|v| fmt_f(*v))).collect())
        .collect();
    (header, rows)
}

/// Writes selection histograms, value-cosine matrices, gate values, anchor
/// cosines and per-cell representation similarity matrices.
pub fn cmd_analyze(checkpoint: &Path, overrides: &[String], out_dir: Option<&Path>) -> CliResult<Analysis> {
    let (cfg, trainer) = load_checkpoint(checkpoint, overrides)?;
    let out = out_dir.map_or_else(|| sibling(checkpoint, ANALYTICS_DIR), Path::to_path_buf);
    fs::create_dir_all(&out).map_err(|e| io_at(&out, e))?;
    let samples = trainer.eval_set().map_err(runtime)?;
    let traces: Vec<SampleTrace> = samples
        .iter()
        .map(|s| trace(&trainer, s))
        .collect::<datprl_core::Result<_>>()
        .map_err(runtime)?;
    let cells = trainer.suite.cells();
    let model = &trainer.model;
    let mut files = Vec::new();

    let histograms = |pool_size: usize, pick: &dyn Fn(&SampleTrace) -> Option<&Vec<usize>>| -> Vec<SelectionHistogram> {
        cells
            .iter()
            .map(|&(d, t)| {
                let mut h = SelectionHistogram {
                    domain: d,
                    task: t,
                    samples: 0,
                    counts: vec![0; pool_size],
                };
                for tr in traces.iter().filter(|tr| tr.domain == d && tr.task == t) {
                    h.samples += 1;
                    for &i in pick(tr).into_iter().flatten() {
                        h.counts[i] += 1;
                    }
                }
                h
            })
            .collect()
    };
    let mut task_selection = Vec::new();
    let mut domain_selection = Vec::new();
    let mut task_value_cosine = Vec::new();
    let mut domain_value_cosine = Vec::new();
    for (label, branch) in [("task", &model.task), ("domain", &model.domain)] {
        let Some(b) = branch else { continue };
        let n = b.pool.size;
        let hist = histograms(n, &|tr| if label == "task" { tr.task_sel.as_ref() } else { tr.domain_sel.as_ref() });
        let header: Vec<String> = ["domain", "task", "samples"]
            .map(String::from)
            .into_iter()
            .chain((0..n).map(|i| format!("p{i}")))
            .collect();
        let rows: Vec<Vec<String>> = hist
            .iter()
            .map(|h| {
                [h.domain.to_string(), h.task.to_string(), h.samples.to_string()]
                    .into_iter()
                    .chain(h.counts.iter().map(|c| c.to_string()))
                    .collect()
            })
            .collect();
        let p = out.join(format!("selection_{label}.csv"));
        write_rows(&p, &header, &rows)?;
        files.push(p);

        let values = model.store.value(b.pool.values);
        let width = values.numel() / n;
        let flat: Vec<Vec<f64>> = values.data().chunks(width).map(<[f64]>::to_vec).collect();
        let m = cosine_matrix(&flat);
        let (header, rows) = matrix_rows(&m);
        let p = out.join(format!("value_cosine_{label}.csv"));
        write_rows(&p, &header, &rows)?;
        files.push(p);
        if label == "task" {
            task_selection = hist;
            task_value_cosine = m;
        } else {
            domain_selection = hist;
            domain_value_cosine = m;
        }
    }

    let gates: Vec<(usize, f64)> = model.sites.iter().map(|s| s.channels).zip(model.gate_values()).collect();
    let p = out.join("gates.csv");
    let rows: Vec<Vec<String>> = gates
        .iter()
        .enumerate()
        .map(|(i, (c, a))| vec![i.to_string(), c.to_string(), fmt_f(*a)])
        .collect();
    write_rows(&p, &["site", "channels", "alpha"].map(String::from), &rows)?;
    files.push(p);

    let mut anchor_cosine = Vec::new();
    if model.domain.is_some() {
        let domains: Vec<Domain> = cfg.train.data.roster.iter().map(|(d, _)| *d).collect();
        for &d in &domains {
            let pooled: Vec<&Vec<f64>> = traces
                .iter()
                .filter(|t| t.domain == d)
                .filter_map(|t| t.pooled_pr_d.as_ref())
                .collect();
            let row: Vec<(Domain, f64)> = domains
                .iter()
                .map(|&a| {
                    let anchor = trainer.suite.oracle.anchor(a);
                    let mean = pooled.iter().map(|v| cosine(v, anchor)).sum::<f64>() / pooled.len().max(1) as f64;
                    (a, mean)
                })
                .collect();
            anchor_cosine.push((d, row));
        }
        let header: Vec<String> = std::iter::once("domain".to_string())
            .chain(domains.iter().map(|a| format!("anchor_{a}")))
            .collect();
        let rows: Vec<Vec<String>> = anchor_cosine
            .iter()
            .map(|(d, r)| std::iter::once(d.to_string()).chain(r.iter().map(|(_, v)| fmt_f(*v))).collect())
            .collect();
        let p = out.join("anchor_cosine.csv");
        write_rows(&p, &header, &rows)?;
        files.push(p);
    }

    let mut pr_similarity = Vec::new();
    for &(d, t) in &cells {
        let reps: Vec<Vec<f64>> = traces
            .iter()
            .filter(|tr| tr.domain == d && tr.task == t)
            .filter_map(|tr| tr.pr_dt.clone())
            .collect();
        if reps.is_empty() {
            continue;
        }
        let m = cosine_matrix(&reps);
        let (header, rows) = matrix_rows(&m);
        let p = out.join(format!("pr_similarity_{d}_{t}.csv"));
        write_rows(&p, &header, &rows)?;
        files.push(p);
        pr_similarity.push((d, t, m));
    }

    Ok(Analysis {
        task_selection,
        domain_selection,
        task_value_cosine,
        domain_value_cosine,
        gates,
        anchor_cosine,
        pr_similarity,
        files,
    })
}

pub fn cmd_gradcheck(opts: &GradcheckOptions) -> CliResult<GradcheckReport> {
    run_gradcheck(opts).map_err(runtime)
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut s = format!(
        "{:<16} {:>7} {:>12} {:>10}  {:<6} worst\n",
        "component", "checks", "max_rel_err", "tolerance", "status"
    );
    for c in &report.components {
        s += &format!(
            "{:<16} {:>7} {:>12.3e} {:>10.1e}  {:<6} {}\n",
            c.name,
            c.checks,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" },
            c.worst
        );
        let ops: Vec<String> = c.ops.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s += &format!("    ops: {}\n", ops.join(" "));
    }
    s
}
