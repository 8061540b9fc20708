//! Success tensor, transfer metrics and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `c[i][j][e]`: success on task `j` after training tasks `0..=i`, `e` eval
/// points into task `i`. Only `j <= i` exists; off-diagonal entries are
/// usually filled at `e_i*` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub eval_points: Vec<usize>,
    pub c: Vec<Vec<Vec<Option<f64>>>>,
}

impl SuccessRecord {
    pub fn new(n_tasks: usize, eval_points: Vec<usize>) -> Self {
        let e = eval_points.len();
        SuccessRecord {
            c: (0..n_tasks).map(|i| vec![vec![None; e]; i + 1]).collect(),
            eval_points,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.c.len()
    }

    pub fn set(&mut self, i: usize, j: usize, e: usize, value: f64) -> Result<()> {
        if j > i || i >= self.c.len() || e >= self.eval_points.len() {
            return Err(Error::contract(format!("record index ({i}, {j}, {e}) out of range")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Data(format!("success rate {value} outside [0, 1]")));
        }
        self.c[i][j][e] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize, e: usize) -> Option<f64> {
        self.c.get(i)?.get(j)?.get(e).copied().flatten()
    }

    /// Diagonal curve of task `i`.
    pub fn curve(&self, i: usize) -> Result<Vec<f64>> {
        let missing: Vec<usize> = (0..self.eval_points.len()).filter(|&e| self.c[i][i][e].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing c[{i}][{i}] at eval indices {missing:?}")));
        }
        Ok(self.c[i][i].iter().map(|v| v.unwrap()).collect())
    }

    /// `(c_ii, e_i*)` with the earliest maximum.
    pub fn best(&self, i: usize) -> Result<(f64, usize)> {
        let curve = self.curve(i)?;
        Ok(curve
            .iter()
            .enumerate()
            .fold((f64::NEG_INFINITY, 0), |(bv, be), (e, &v)| if v > bv { (v, e) } else { (bv, be) }))
    }

    /// `c_ij` for `j < i` (read at `e_i*`) or `c_ii`.
    pub fn final_value(&self, i: usize, j: usize) -> Result<f64> {
        let (best, e) = self.best(i)?;
        if i == j {
            return Ok(best);
        }
        self.get(i, j, e)
            .ok_or_else(|| Error::Data(format!("missing c[{i}][{j}] at eval index {e}")))
    }

    /// Copy with every diagonal curve held at its best after `e*`.
    pub fn clamped(&self) -> Result<SuccessRecord> {
        let mut out = self.clone();
        for i in 0..self.n_tasks() {
            let (best, e_star) = self.best(i)?;
            for e in e_star..self.eval_points.len() {
                out.c[i][i][e] = Some(best);
            }
        }
        Ok(out)
    }

    pub fn is_complete(&self) -> bool {
        (0..self.n_tasks()).all(|i| (0..i).all(|j| self.final_value(i, j).is_ok()) && self.curve(i).is_ok())
    }

    /// Every entry multiplied by `s`.
    pub fn scaled(&self, s: f64) -> SuccessRecord {
        let mut out = self.clone();
        for v in out.c.iter_mut().flatten().flatten().flatten() {
            *v *= s;
        }
        out
    }
}

/// `FWT_k` on the clamped curve.
pub fn fwt_per_task(record: &SuccessRecord) -> Result<Vec<f64>> {
    let r = record.clamped()?;
    (0..r.n_tasks())
        .map(|k| Ok(r.curve(k)?.iter().sum::<f64>() / r.eval_points.len() as f64))
        .collect()
}

pub fn fwt(record: &SuccessRecord) -> Result<f64> {
    let per = fwt_per_task(record)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Negative backward transfer. The `k = K` term has no later tasks and
/// counts as zero.
pub fn nbt(record: &SuccessRecord) -> Result<f64> {
    let r = record.clamped()?;
    let big_k = r.n_tasks();
    let mut total = 0.0;
    for k in 0..big_k.saturating_sub(1) {
        let ckk = r.final_value(k, k)?;
        let mut s = 0.0;
        for q in k + 1..big_k {
            s += ckk - r.final_value(q, k)?;
        }
        // 1-based k' = k + 1, so K - k' = big_k - k - 1
        total += s / (big_k * (big_k - k - 1)) as f64;
    }
    Ok(total)
}

pub fn auc(record: &SuccessRecord) -> Result<f64> {
    let r = record.clamped()?;
    let big_k = r.n_tasks();
    let per = fwt_per_task(&r)?;
    let mut total = 0.0;
    for k in 0..big_k {
        let mut s = per[k];
        for q in k + 1..big_k {
            s += r.final_value(q, k)?;
        }
        total += s / (big_k * (big_k - k)) as f64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    pub fwt_per_task: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(record: &SuccessRecord) -> Result<Self> {
        Ok(MetricsReport {
            fwt: fwt(record)?,
            nbt: nbt(record)?,
            auc: auc(record)?,
            fwt_per_task: fwt_per_task(record)?,
        })
    }
}

/// Selection counts per codebook row, keyed by `(trained_upto, eval_task)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<UsageEntry>", from = "Vec<UsageEntry>")]
pub struct UsageLog {
    pub counts: BTreeMap<(usize, usize), Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct UsageEntry {
    trained_task: usize,
    eval_task: usize,
    counts: Vec<u64>,
}

impl From<UsageLog> for Vec<UsageEntry> {
    fn from(log: UsageLog) -> Self {
        log.counts
            .into_iter()
            .map(|((trained_task, eval_task), counts)| UsageEntry {
                trained_task,
                eval_task,
                counts,
            })
            .collect()
    }
}

impl From<Vec<UsageEntry>> for UsageLog {
    fn from(v: Vec<UsageEntry>) -> Self {
        UsageLog {
            counts: v.into_iter().map(|e| ((e.trained_task, e.eval_task), e.counts)).collect(),
        }
    }
}

impl UsageLog {
    pub fn add(&mut self, trained_upto: usize, eval_task: usize, counts: &[u64]) {
        let entry = self.counts.entry((trained_upto, eval_task)).or_default();
        if entry.len() < counts.len() {
            entry.resize(counts.len(), 0);
        }
        for (a, b) in entry.iter_mut().zip(counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkillUsageRow {
    pub row: usize,
    pub source_task: usize,
    pub count: u64,
}

/// Top `n` rows by count (ties to the lower row), with the task whose subset
/// owns each row.
pub fn skill_usage(counts: &[u64], per_task: usize, subset_tasks: &[usize], n: usize) -> Result<Vec<SkillUsageRow>> {
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Data("empty skill usage log".into()));
    }
    let mut rows: Vec<SkillUsageRow> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(row, &count)| SkillUsageRow {
            row,
            source_task: subset_tasks[row / per_task],
            count,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.row.cmp(&b.row)));
    rows.truncate(n);
    Ok(rows)
}

/// One run's outcome, as written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub paradigm: String,
    pub suite: String,
    pub seed: u64,
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
}

pub const METRICS_HEADER: &str = "paradigm,suite,seed,fwt,nbt,auc";
pub const SUMMARY_HEADER: &str = "paradigm,suite,n_seeds,fwt_mean,fwt_std,nbt_mean,nbt_std,auc_mean,auc_std";

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.17e}")
    }
}

fn parse_f(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Data(format!("bad number `{s}`")))
}

pub fn metrics_csv(rows: &[RunMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.paradigm, r.suite, r.seed, fmt_f(r.fwt), fmt_f(r.nbt), fmt_f(r.auc));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RunMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data("metrics file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Data(format!("malformed metrics row `{l}`")));
            }
            Ok(RunMetrics {
                paradigm: f[0].into(),
                suite: f[1].into(),
                seed: f[2].parse().map_err(|_| Error::Data(format!("bad seed `{}`", f[2])))?,
                fwt: parse_f(f[3])?,
                nbt: parse_f(f[4])?,
                auc: parse_f(f[5])?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation, ignoring NaN entries.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub paradigm: String,
    pub suite: String,
    pub n_seeds: usize,
    pub fwt: (f64, f64),
    pub nbt: (f64, f64),
    pub auc: (f64, f64),
}

/// Group by `(paradigm, suite)` in first-seen order.
pub fn summarize(rows: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.paradigm.clone(), r.suite.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(p, s)| {
            let g: Vec<&RunMetrics> = rows.iter().filter(|r| r.paradigm == p && r.suite == s).collect();
            let col = |f: fn(&RunMetrics) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                n_seeds: g.len(),
                fwt: col(|r| r.fwt),
                nbt: col(|r| r.nbt),
                auc: col(|r| r.auc),
                paradigm: p,
                suite: s,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.paradigm,
            r.suite,
            r.n_seeds,
            fmt_f(r.fwt.0),
            fmt_f(r.fwt.1),
            fmt_f(r.nbt.0),
            fmt_f(r.nbt.1),
            fmt_f(r.auc.0),
            fmt_f(r.auc.1)
        );
    }
    out
}

/// `curves.csv`: one row per `(trained task, eval task, epoch)` present in
/// the clamped record.
pub fn curves_csv(record: &SuccessRecord) -> Result<String> {
    let r = record.clamped()?;
    let mut out = String::from("trained_task,eval_task,epoch,success\n");
    for (i, rows) in r.c.iter().enumerate() {
        for (j, vals) in rows.iter().enumerate() {
            for (e, v) in vals.iter().enumerate() {
                if let Some(v) = v {
                    let _ = writeln!(out, "{i},{j},{},{}", r.eval_points[e], fmt_f(*v));
                }
            }
        }
    }
    Ok(out)
}

/// `skill_usage.csv`: per `(trained task, eval task)`, every used row with
/// its source subset and count, ranked.
pub fn usage_csv(log: &UsageLog, per_task: usize, subset_tasks: &[usize]) -> Result<String> {
    let mut out = String::from("trained_task,eval_task,rank,row,source_task,count\n");
    for (&(i, j), counts) in &log.counts {
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        for (rank, r) in skill_usage(counts, per_task, subset_tasks, usize::MAX)?.iter().enumerate() {
            let _ = writeln!(out, "{i},{j},{rank},{},{},{}", r.row, r.source_task, r.count);
        }
    }
    Ok(out)
}

/// Write `metrics.csv`, `curves.csv`, `success.json` and `skill_usage.csv`
/// for one run into `dir`.
pub fn emit_report(
    dir: &Path,
    metrics: &RunMetrics,
    record: &SuccessRecord,
    usage: &UsageLog,
    per_task: usize,
    subset_tasks: &[usize],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(std::slice::from_ref(metrics)))?;
    std::fs::write(dir.join("curves.csv"), curves_csv(record)?)?;
    std::fs::write(dir.join("success.json"), serde_json::to_string_pretty(record)?)?;
    std::fs::write(dir.join("skill_usage.csv"), usage_csv(usage, per_task, subset_tasks)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(k: usize, e: usize, v: f64) -> SuccessRecord {
        let mut r = SuccessRecord::new(k, (0..e).map(|x| 5 * x).collect());
        for i in 0..k {
            for j in 0..=i {
                for x in 0..e {
                    r.set(i, j, x, v).unwrap();
                }
            }
        }
        r
    }

    #[test]
    fn saturated_and_empty() {
        let one = full(4, 3, 1.0);
        assert_eq!((fwt(&one).unwrap(), nbt(&one).unwrap(), auc(&one).unwrap()), (1.0, 0.0, 1.0));
        let zero = full(4, 3, 0.0);
        assert_eq!((fwt(&zero).unwrap(), nbt(&zero).unwrap(), auc(&zero).unwrap()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_task_fwt_by_hand() {
        let mut r = SuccessRecord::new(2, vec![0, 5, 10]);
        for (e, v) in [0.0, 0.5, 1.0].into_iter().enumerate() {
            r.set(0, 0, e, v).unwrap();
        }
        for (e, v) in [0.0, 0.0, 0.6].into_iter().enumerate() {
            r.set(1, 1, e, v).unwrap();
        }
        r.set(1, 0, 2, 0.7).unwrap();
        assert!((fwt(&r).unwrap() - 2.1 / 6.0).abs() <= 1e-12);
        // k = 1 term: (1.0 - 0.7) / (2 * 1)
        assert!((nbt(&r).unwrap() - 0.15).abs() <= 1e-12);
        // (0.5 + 0.7) / 4 + 0.2 / 2
        assert!((auc(&r).unwrap() - 0.4).abs() <= 1e-12);
    }

    #[test]
    fn backward_improvement_is_negative() {
        let mut r = full(2, 2, 0.5);
        r.set(1, 0, 0, 0.9).unwrap();
        assert!(nbt(&r).unwrap() < 0.0);
    }

    #[test]
    fn single_task_auc_is_fwt() {
        let mut r = SuccessRecord::new(1, vec![0, 5, 10]);
        for (e, v) in [0.1, 0.6, 0.3].into_iter().enumerate() {
            r.set(0, 0, e, v).unwrap();
        }
        assert!((auc(&r).unwrap() - fwt(&r).unwrap()).abs() <= 1e-15);
        // clamped curve is (0.1, 0.6, 0.6)
        assert!((fwt(&r).unwrap() - 1.3 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn missing_entries_are_reported() {
        let mut r = SuccessRecord::new(2, vec![0, 5]);
        r.set(0, 0, 0, 0.2).unwrap();
        let err = fwt(&r).unwrap_err().to_string();
        assert!(err.contains("c[0][0]") && err.contains("[1]"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_rates() {
        let mut r = SuccessRecord::new(2, vec![0]);
        assert!(r.set(0, 0, 0, 1.5).is_err());
        assert!(r.set(0, 1, 0, 0.5).is_err());
    }

    #[test]
    fn usage_ranking_and_attribution() {
        let rows = skill_usage(&[3, 0, 7, 7, 1, 2], 2, &[0, 1, 2], 3).unwrap();
        let got: Vec<(usize, usize, u64)> = rows.iter().map(|r| (r.row, r.source_task, r.count)).collect();
        assert_eq!(got, vec![(2, 1, 7), (3, 1, 7), (0, 0, 3)]);
        assert!(skill_usage(&[0, 0], 2, &[0], 3).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            RunMetrics { paradigm: "er".into(), suite: "goal".into(), seed: 0, fwt: 0.1 + 0.2, nbt: -1e-17, auc: 1.0 / 3.0 },
            RunMetrics { paradigm: "multitask".into(), suite: "goal".into(), seed: 1, fwt: f64::NAN, nbt: f64::NAN, auc: 0.5 },
        ];
        let back = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].fwt.is_nan() && back[1].auc == 0.5);
    }

    #[test]
    fn summary_mean_std() {
        let mk = |seed, auc| RunMetrics { paradigm: "er".into(), suite: "goal".into(), seed, fwt: 0.5, nbt: 0.0, auc };
        let s = summarize(&[mk(0, 0.2), mk(1, 0.4), mk(2, 0.6)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].auc.0 - 0.4).abs() < 1e-15 && (s[0].auc.1 - 0.2).abs() < 1e-15);
        assert_eq!(s[0].fwt.1, 0.0);
    }
}
