//! Run directories: one lifelong run per paradigm and seed, checkpointed
//! after every task, with per-run reports and an experiment summary.
//!
//! ```text
//! <dir>/config.toml   resolved configuration
//! <dir>/config.hash   fingerprint of config.toml
//! <dir>/metrics.csv   one row per finished run
//! <dir>/summary.csv   mean and std over seeds
//! <dir>/runs/<id>/    task-<k>.ckpt, metrics.csv, curves.csv, success.json, skill_usage.csv
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{fingerprint, ExperimentConfig, ParadigmConfig, ParadigmKind};
use crate::env::{make_suite, TaskSpec};
use crate::error::{Error, Result};
use crate::harness::{train_multitask, Learner};
use crate::metrics::{
    emit_report, metrics_csv, parse_metrics_csv, summarize, summary_csv, MetricsReport, RunMetrics, SummaryRow,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config.hash";

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub id: String,
    pub label: String,
    pub paradigm: ParadigmConfig,
    pub seed: u64,
}

/// Paradigm label with ablation suffixes, e.g. `er-no-codebook`.
pub fn paradigm_label(cfg: &ExperimentConfig, p: &ParadigmConfig) -> String {
    let mut s = p.kind.to_string();
    let a = cfg.model.ablate;
    for (on, name) in [(a.codebook, "codebook"), (a.adapters, "adapters"), (a.hierarchy, "hierarchy")] {
        if on {
            s.push_str("-no-");
            s.push_str(name);
        }
    }
    s
}

pub fn suite_label(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.suite.kind, cfg.suite.n_tasks)
}

pub fn run_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for (i, p) in cfg.paradigms.iter().enumerate() {
        let repeated = cfg.paradigms.iter().filter(|q| q.kind == p.kind).count() > 1;
        let label = paradigm_label(cfg, p);
        let stem = if repeated { format!("{label}-{i}") } else { label.clone() };
        for &seed in &cfg.seeds {
            out.push(RunSpec {
                id: format!("{stem}-seed{seed}"),
                label: stem.clone(),
                paradigm: p.clone(),
                seed,
            });
        }
    }
    out
}

pub fn tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    make_suite(cfg.suite.kind, cfg.suite.n_tasks, cfg.suite.seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub metrics: Vec<RunMetrics>,
    pub summary: Vec<SummaryRow>,
}

fn ckpt_path(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join(format!("task-{k}.ckpt"))
}

/// Highest-numbered checkpoint in `run_dir`, if any.
fn latest_checkpoint(run_dir: &Path, n_tasks: usize) -> Option<PathBuf> {
    (0..n_tasks).rev().map(|k| ckpt_path(run_dir, k)).find(|p| p.is_file())
}

/// Train one run to completion, continuing from its newest checkpoint.
/// A run whose report already exists is read back instead.
pub fn run_one(cfg: &ExperimentConfig, spec: &RunSpec, run_dir: &Path) -> Result<RunMetrics> {
    let report = run_dir.join("metrics.csv");
    if report.is_file() {
        let mut rows = parse_metrics_csv(&std::fs::read_to_string(&report)?)?;
        if rows.len() != 1 {
            return Err(Error::Data(format!("{} should hold one row", report.display())));
        }
        return Ok(rows.remove(0));
    }
    std::fs::create_dir_all(run_dir)?;
    let tasks = tasks(cfg)?;
    let n = tasks.len();
    let suite = suite_label(cfg);
    if spec.paradigm.kind == ParadigmKind::Multitask {
        return run_multitask(cfg, spec, run_dir, &tasks, suite);
    }
    let mut learner = match latest_checkpoint(run_dir, n) {
        Some(p) => checkpoint::load(&p, &cfg.model, &cfg.train, &spec.paradigm, tasks)?,
        None => Learner::new(&cfg.model, &cfg.train, &spec.paradigm, tasks, spec.seed)?,
    };
    if learner.seed != spec.seed {
        return Err(Error::Checkpoint(format!("{} was written for another seed", run_dir.display())));
    }
    for k in learner.completed..n {
        learner.train_task(k)?;
        checkpoint::save(&learner, &ckpt_path(run_dir, k))?;
    }
    let m = MetricsReport::compute(&learner.record)?;
    let row = RunMetrics {
        paradigm: spec.label.clone(),
        suite,
        seed: spec.seed,
        fwt: m.fwt,
        nbt: m.nbt,
        auc: m.auc,
    };
    let subsets: Vec<usize> = (0..learner.policy.codebook.subsets.len()).collect();
    emit_report(
        run_dir,
        &row,
        &learner.record,
        &learner.usage,
        cfg.model.skills_per_task,
        &subsets,
    )?;
    Ok(row)
}

/// Multitask has no task sequence, so the transfer metrics are left empty
/// and the per-task success curves go to `multitask.csv`.
fn run_multitask(cfg: &ExperimentConfig, spec: &RunSpec, run_dir: &Path, tasks: &[TaskSpec], suite: String) -> Result<RunMetrics> {
    let (_, out) = train_multitask(&cfg.model, &cfg.train, tasks, spec.seed)?;
    let mut csv = String::from("epoch,eval_task,success\n");
    for (e, row) in cfg.train.eval_points().iter().zip(&out.curves) {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{e},{j},{v:.17e}");
        }
    }
    let _ = writeln!(csv, "# best mean success {:.17e} at epoch {}", out.best_mean, cfg.train.eval_points()[out.best_point]);
    std::fs::write(run_dir.join("multitask.csv"), csv)?;
    let row = RunMetrics {
        paradigm: spec.label.clone(),
        suite,
        seed: spec.seed,
        fwt: f64::NAN,
        nbt: f64::NAN,
        auc: f64::NAN,
    };
    std::fs::write(run_dir.join("metrics.csv"), metrics_csv(std::slice::from_ref(&row)))?;
    Ok(row)
}

/// Start a fresh experiment in `dir`. An existing experiment directory is
/// never touched; use [`resume`] to continue one.
/// `on_run` is called after each run finishes or is found complete.
pub fn run(cfg: &ExperimentConfig, dir: &Path, on_run: impl FnMut(&RunSpec, &RunMetrics)) -> Result<Outcome> {
    cfg.validate()?;
    if dir.join(HASH_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds an experiment; resume it or choose another output directory",
            dir.display()
        )));
    }
    let text = cfg.to_toml()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), &text)?;
    std::fs::write(dir.join(HASH_FILE), format!("{:016x}\n", fingerprint(&text)))?;
    execute(cfg, dir, on_run)
}

fn execute(cfg: &ExperimentConfig, dir: &Path, mut on_run: impl FnMut(&RunSpec, &RunMetrics)) -> Result<Outcome> {
    let mut rows = Vec::new();
    for spec in run_specs(cfg) {
        let row = run_one(cfg, &spec, &dir.join("runs").join(&spec.id))?;
        on_run(&spec, &row);
        rows.push(row);
    }
    let summary = summarize(&rows);
    let (m, s) = (metrics_csv(&rows), summary_csv(&summary));
    // A finished experiment is read back, not rewritten.
    for (name, body) in [("metrics.csv", m), ("summary.csv", s)] {
        let path = dir.join(name);
        if std::fs::read_to_string(&path).ok().as_deref() != Some(body.as_str()) {
            std::fs::write(path, body)?;
        }
    }
    Ok(Outcome {
        dir: dir.to_path_buf(),
        metrics: rows,
        summary,
    })
}

/// Reload the configuration snapshot in `dir`, check it against its hash,
/// and finish any incomplete runs. A complete experiment is left untouched.
pub fn resume(dir: &Path, on_run: impl FnMut(&RunSpec, &RunMetrics)) -> Result<Outcome> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cfg_path.display())))?;
    let stored = std::fs::read_to_string(dir.join(HASH_FILE))
        .map_err(|e| Error::Config(format!("missing {HASH_FILE} in {}: {e}", dir.display())))?;
    if stored.trim() != format!("{:016x}", fingerprint(&text)) {
        return Err(Error::Config(format!("{} does not match its recorded hash", cfg_path.display())));
    }
    let cfg = ExperimentConfig::from_toml(&text)?;
    execute(&cfg, dir, on_run)
}

pub const COMPARE_HEADER: &str =
    "suite,experiment,paradigm,n_seeds,fwt_mean,fwt_std,nbt_mean,nbt_std,auc_mean,auc_std,d_fwt,d_nbt,d_auc";

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub experiment: String,
    pub summary: SummaryRow,
    /// Mean differences against the same paradigm in the first directory.
    pub delta: Option<[f64; 3]>,
}

/// Join the metrics of several experiment directories, per suite. Deltas
/// are taken against the first directory. Suites not present in every
/// directory are dropped; no shared suite at all is an error.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if dirs.is_empty() {
        return Err(Error::Config("compare needs at least one directory".into()));
    }
    let mut per_dir: Vec<(String, Vec<SummaryRow>)> = Vec::new();
    for d in dirs {
        let name = match std::fs::read_to_string(d.join(CONFIG_FILE)) {
            Ok(t) => ExperimentConfig::from_toml(&t)?.name,
            Err(_) => d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let path = d.join("metrics.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        per_dir.push((name, summarize(&parse_metrics_csv(&text)?)));
    }
    let mut suites: Vec<String> = Vec::new();
    for r in &per_dir[0].1 {
        if !suites.contains(&r.suite) {
            suites.push(r.suite.clone());
        }
    }
    let present: Vec<BTreeSet<&str>> = per_dir
        .iter()
        .map(|(_, rows)| rows.iter().map(|r| r.suite.as_str()).collect())
        .collect();
    suites.retain(|s| present.iter().all(|p| p.contains(s.as_str())));
    if suites.is_empty() {
        return Err(Error::Data("the directories share no suite; nothing to compare".into()));
    }
    let means = |r: &SummaryRow| [r.fwt.0, r.nbt.0, r.auc.0];
    let mut out = Vec::new();
    for suite in &suites {
        for (name, rows) in &per_dir {
            for r in rows.iter().filter(|r| &r.suite == suite) {
                let base = per_dir[0].1.iter().find(|b| &b.suite == suite && b.paradigm == r.paradigm);
                let delta = base.map(|b| {
                    let (x, y) = (means(r), means(b));
                    [x[0] - y[0], x[1] - y[1], x[2] - y[2]]
                });
                out.push(CompareRow {
                    experiment: name.clone(),
                    summary: r.clone(),
                    delta,
                });
            }
        }
    }
    Ok(out)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.17e}") };
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        let d = r.delta.map(|d| d.map(f)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.suite,
            r.experiment,
            s.paradigm,
            s.n_seeds,
            f(s.fwt.0),
            f(s.fwt.1),
            f(s.nbt.0),
            f(s.nbt.1),
            f(s.auc.0),
            f(s.auc.1),
            d[0],
            d[1],
            d[2]
        );
    }
    out
}
