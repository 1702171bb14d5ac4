//! Classification, ranking and CWE metrics, threshold sweeps and averaging
//! over repeated runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identifier::Prediction;

pub const DEFAULT_PR_INTERVAL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no rows to evaluate")]
    EmptyRows,
    #[error("only one class present")]
    SingleClass,
    #[error("no rows with a positive truth label")]
    NoPositiveRows,
    #[error("PR interval {0} outside (0, 1)")]
    InvalidInterval(f64),
    #[error("expected {expected} runs, found {found}")]
    RunCount { expected: usize, found: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub ir_id: String,
    pub p_yes: f64,
    pub truth_vul: bool,
    pub truth_cwe: Option<String>,
    pub pred_cwe: Option<String>,
    pub latency_seconds: f64,
}

/// Ground truth for one IR. Canonical IR lines parse directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    #[serde(alias = "ir_id")]
    pub id: String,
    #[serde(default)]
    pub label_vul: Option<bool>,
    #[serde(default)]
    pub cwe_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Undefined when a run has a single class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// Undefined without positive truth rows.
    pub macro_p: Option<f64>,
    pub macro_r: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mean_latency: f64,
    pub n_runs: usize,
    pub theta_out: f64,
    pub n_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub theta: f64,
    pub precision: f64,
    pub recall: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(rows: &[ScoredLabel], theta_out: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in rows {
        match (r.p_yes >= theta_out, r.truth_vul) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Precision, recall and F1 with every 0/0 read as 0.
pub fn classification_metrics(rows: &[ScoredLabel], theta_out: f64) -> (f64, f64, f64) {
    let c = confusion(rows, theta_out);
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    (p, r, harmonic(p, r))
}

fn class_counts(rows: &[ScoredLabel]) -> Result<(usize, usize), EvalError> {
    let pos = rows.iter().filter(|r| r.truth_vul).count();
    let neg = rows.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((pos, neg))
}

/// Rank-sum statistic with midranks for ties.
pub fn auroc(rows: &[ScoredLabel]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(rows)?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].p_yes.total_cmp(&rows[b].p_yes));
    let mut ranks = vec![0.0; rows.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && rows[order[j + 1]].p_yes == rows[order[i]].p_yes {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = rows.iter().zip(&ranks).filter(|(r, _)| r.truth_vul).map(|(_, k)| k).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Step-wise area under the PR curve, one step per distinct score.
pub fn auprc(rows: &[ScoredLabel]) -> Result<f64, EvalError> {
    let (pos, _) = class_counts(rows)?;
    let mut sorted: Vec<&ScoredLabel> = rows.iter().collect();
    sorted.sort_by(|a, b| b.p_yes.total_cmp(&a.p_yes));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut area, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].p_yes;
        while i < sorted.len() && sorted[i].p_yes == s {
            if sorted[i].truth_vul {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Ok(area)
}

/// Grid thetas 0, interval, 2·interval, … up to 1, rounded to 10 decimals so
/// that e.g. 11 × 0.05 lands on 0.55 exactly.
pub fn theta_grid(interval: f64) -> Result<Vec<f64>, EvalError> {
    if !(interval > 0.0 && interval < 1.0) {
        return Err(EvalError::InvalidInterval(interval));
    }
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let t = ((k as f64 * interval) * 1e10).round() / 1e10;
        if t > 1.0 + 1e-12 {
            break;
        }
        out.push(t.min(1.0));
        k += 1;
    }
    Ok(out)
}

pub fn pr_curve(rows: &[ScoredLabel], interval: f64) -> Result<Vec<PrPoint>, EvalError> {
    Ok(theta_grid(interval)?
        .into_iter()
        .map(|theta| {
            let (precision, recall, _) = classification_metrics(rows, theta);
            PrPoint { theta, precision, recall }
        })
        .collect())
}

/// One-vs-rest precision and recall per CWE label present in the truths,
/// over positive-truth rows only; macro F1 is the harmonic mean of the two
/// averages.
pub fn macro_cwe_metrics(rows: &[ScoredLabel]) -> Result<(f64, f64, f64), EvalError> {
    let positives: Vec<&ScoredLabel> = rows.iter().filter(|r| r.truth_vul && r.truth_cwe.is_some()).collect();
    if positives.is_empty() {
        return Err(EvalError::NoPositiveRows);
    }
    let labels: BTreeSet<&str> = positives.iter().filter_map(|r| r.truth_cwe.as_deref()).collect();
    let (mut sum_p, mut sum_r) = (0.0, 0.0);
    for l in &labels {
        let truth = |r: &&&ScoredLabel| r.truth_cwe.as_deref() == Some(*l);
        let pred = |r: &&&ScoredLabel| r.pred_cwe.as_deref() == Some(*l);
        let tp = positives.iter().filter(|r| truth(r) && pred(r)).count();
        let predicted = positives.iter().filter(|r| pred(r)).count();
        let actual = positives.iter().filter(|r| truth(r)).count();
        sum_p += ratio(tp, predicted);
        sum_r += ratio(tp, actual);
    }
    let n = labels.len() as f64;
    let (mp, mr) = (sum_p / n, sum_r / n);
    Ok((mp, mr, harmonic(mp, mr)))
}

pub fn metrics_report(rows: &[ScoredLabel], theta_out: f64) -> Result<MetricsReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyRows);
    }
    let (precision, recall, f1) = classification_metrics(rows, theta_out);
    let macros = macro_cwe_metrics(rows).ok();
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        auroc: auroc(rows).ok(),
        auprc: auprc(rows).ok(),
        macro_p: macros.map(|m| m.0),
        macro_r: macros.map(|m| m.1),
        macro_f1: macros.map(|m| m.2),
        mean_latency: rows.iter().map(|r| r.latency_seconds).sum::<f64>() / rows.len() as f64,
        n_runs: 1,
        theta_out,
        n_rows: rows.len(),
    })
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Field-wise mean; optional fields average over the runs that define them.
pub fn repeated_mean(runs: &[MetricsReport]) -> Result<MetricsReport, EvalError> {
    let first = runs.first().ok_or(EvalError::EmptyRows)?;
    let n = runs.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        auroc: mean_opt(runs.iter().map(|r| r.auroc)),
        auprc: mean_opt(runs.iter().map(|r| r.auprc)),
        macro_p: mean_opt(runs.iter().map(|r| r.macro_p)),
        macro_r: mean_opt(runs.iter().map(|r| r.macro_r)),
        macro_f1: mean_opt(runs.iter().map(|r| r.macro_f1)),
        mean_latency: mean(|r| r.mean_latency),
        n_runs: runs.iter().map(|r| r.n_runs).sum(),
        theta_out: first.theta_out,
        n_rows: runs.iter().map(|r| r.n_rows).sum(),
    })
}

/// Point-wise mean of per-run curves over the same grid.
pub fn mean_curve(curves: &[Vec<PrPoint>]) -> Vec<PrPoint> {
    let Some(first) = curves.first() else { return Vec::new() };
    let n = curves.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, p)| PrPoint {
            theta: p.theta,
            precision: curves.iter().map(|c| c[i].precision).sum::<f64>() / n,
            recall: curves.iter().map(|c| c[i].recall).sum::<f64>() / n,
        })
        .collect()
}

/// Joins predictions to truths. Unscored predictions and ids without a
/// truth label are skipped with a warning.
pub fn join_rows(preds: &[Prediction], truths: &[TruthRow]) -> (Vec<ScoredLabel>, Vec<String>) {
    let by_id: HashMap<&str, &TruthRow> = truths.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for p in preds {
        let Some(p_yes) = p.p_yes else {
            warnings.push(format!("{}: unscored prediction excluded", p.ir_id));
            continue;
        };
        let Some(truth) = by_id.get(p.ir_id.as_str()) else {
            warnings.push(format!("{}: no truth row", p.ir_id));
            continue;
        };
        let Some(truth_vul) = truth.label_vul else {
            warnings.push(format!("{}: truth row has no label", p.ir_id));
            continue;
        };
        rows.push(ScoredLabel {
            ir_id: p.ir_id.clone(),
            p_yes,
            truth_vul,
            truth_cwe: truth.cwe_id.clone(),
            pred_cwe: p.cwe_id.clone(),
            latency_seconds: p.latency_seconds,
        });
    }
    (rows, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub runs: Vec<MetricsReport>,
    pub curve: Vec<PrPoint>,
    pub warnings: Vec<String>,
}

/// Groups predictions by run, scores each run and averages.
pub fn evaluate(
    preds: &[Prediction],
    truths: &[TruthRow],
    theta_out: f64,
    pr_interval: f64,
    expected_runs: Option<usize>,
) -> Result<Evaluation, EvalError> {
    let mut by_run: BTreeMap<u32, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_run.entry(p.run).or_default().push(p.clone());
    }
    if let Some(expected) = expected_runs {
        if by_run.len() != expected {
            return Err(EvalError::RunCount { expected, found: by_run.len() });
        }
    }
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for (run, ps) in &by_run {
        let (rows, w) = join_rows(ps, truths);
        warnings.extend(w.into_iter().map(|w| format!("run {run}: {w}")));
        runs.push(metrics_report(&rows, theta_out)?);
        curves.push(pr_curve(&rows, pr_interval)?);
    }
    if runs.is_empty() {
        return Err(EvalError::EmptyRows);
    }
    Ok(Evaluation { report: repeated_mean(&runs)?, runs, curve: mean_curve(&curves), warnings })
}

/// CSV with a `# config_hash=` comment line ahead of the header.
pub fn write_curve_csv(path: &Path, curve: &[PrPoint], config_hash: &str) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["theta", "precision", "recall"])?;
    for p in curve {
        w.write_record([p.theta.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<(Option<String>, Vec<PrPoint>), EvalError> {
    let text = std::fs::read_to_string(path)?;
    let hash = text.lines().next().and_then(|l| l.strip_prefix("# config_hash=")).map(str::to_string);
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        out.push(PrPoint { theta: num(0), precision: num(1), recall: num(2) });
    }
    Ok((hash, out))
}
