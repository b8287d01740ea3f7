//! Statistical analysis of a study: per-method summaries,
//! baseline-normalized comparison, best/median/worst rows, and the
//! bootstrap variability-vs-session-count curves with their
//! derivative-convergence criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::mix_seed;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::Method;
use crate::trainer::{SessionRecord, SessionStatus};

/// Aggregate statistics of one method's best-checkpoint values. Stds are
/// sample standard deviations (n-1 denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_sessions: usize,
    pub mse_sigma_mean: f64,
    pub mse_sigma_std: f64,
    pub iteration_mean: f64,
    pub iteration_std: f64,
    pub mse_equil_mean: f64,
    pub mse_equil_std: f64,
}

/// Ratios of a method's means to the baseline's. Full precision here;
/// 2-decimal rounding happens only at display time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub method: Method,
    pub mse_sigma_ratio: f64,
    pub mse_equil_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmwRow {
    pub label: String,
    pub session_seed: u64,
    pub iteration: usize,
    pub mse_sigma: f64,
    pub mse_equil: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCurve {
    pub metric: String,
    pub sample_sizes: Vec<usize>,
    pub avg_std: Vec<f64>,
    /// First differences; `derivative[i]` is the step from
    /// `sample_sizes[i]` to `sample_sizes[i+1]`.
    pub derivative: Vec<f64>,
    pub resamples: usize,
    pub converged_at: Option<usize>,
}

/// Sorted-accumulation mean/std so results are exactly permutation
/// invariant.
fn mean_std_sorted(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn completed_bests(records: &[SessionRecord]) -> Vec<&SessionRecord> {
    records
        .iter()
        .filter(|r| matches!(r.status, SessionStatus::Completed) && r.best.is_some())
        .collect()
}

pub fn summarize_method(records: &[SessionRecord]) -> Result<MethodSummary> {
    let done = completed_bests(records);
    if done.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need >= 2 completed sessions, have {}",
            done.len()
        )));
    }
    let method = done[0].method;
    if done.iter().any(|r| r.method != method) {
        return Err(Error::Usage("records mix training methods".into()));
    }
    let sigmas: Vec<f64> = done.iter().map(|r| r.best.unwrap().mse_sigma).collect();
    let equils: Vec<f64> = done.iter().map(|r| r.best.unwrap().mse_equil).collect();
    let iters: Vec<f64> = done
        .iter()
        .map(|r| r.best.unwrap().iteration as f64)
        .collect();
    let (sm, ss) = mean_std_sorted(&sigmas);
    let (im, is) = mean_std_sorted(&iters);
    let (em, es) = mean_std_sorted(&equils);
    Ok(MethodSummary {
        method,
        n_sessions: done.len(),
        mse_sigma_mean: sm,
        mse_sigma_std: ss,
        iteration_mean: im,
        iteration_std: is,
        mse_equil_mean: em,
        mse_equil_std: es,
    })
}

pub fn normalize_to_baseline(
    summaries: &[MethodSummary],
    baseline: &MethodSummary,
) -> Result<Vec<NormalizedRow>> {
    if baseline.mse_sigma_mean <= 0.0 || baseline.mse_equil_mean <= 0.0 {
        return Err(Error::Usage(
            "baseline means must be positive to normalize".into(),
        ));
    }
    Ok(summaries
        .iter()
        .map(|s| NormalizedRow {
            method: s.method,
            mse_sigma_ratio: s.mse_sigma_mean / baseline.mse_sigma_mean,
            mse_equil_ratio: s.mse_equil_mean / baseline.mse_equil_mean,
        })
        .collect())
}

/// Best, median, and worst rows by best mse_sigma. Even counts take the
/// better-performing of the two middle sessions.
pub fn best_median_worst(records: &[SessionRecord]) -> Result<[BmwRow; 3]> {
    let mut done = completed_bests(records);
    if done.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need >= 3 completed sessions, have {}",
            done.len()
        )));
    }
    done.sort_by(|a, b| {
        a.best
            .unwrap()
            .mse_sigma
            .total_cmp(&b.best.unwrap().mse_sigma)
    });
    let row = |label: &str, r: &SessionRecord| {
        let b = r.best.unwrap();
        BmwRow {
            label: label.into(),
            session_seed: r.session_seed,
            iteration: b.iteration,
            mse_sigma: b.mse_sigma,
            mse_equil: b.mse_equil,
        }
    };
    let n = done.len();
    let median_idx = if n % 2 == 1 { n / 2 } else { n / 2 - 1 };
    Ok([
        row("best", done[0]),
        row("median", done[median_idx]),
        row("worst", done[n - 1]),
    ])
}

/// Bootstrap the sample-std-vs-session-count curve. Resample `b` draws its
/// indices from an independent stream seeded by (rng_seed, b); sample size
/// `s` uses the first `s` draws of that stream, so successive sizes share
/// their randomness and the curve's first differences are low-noise.
pub fn bootstrap_variation(
    metric: &str,
    values: &[f64],
    max_size: usize,
    resamples: usize,
    rng_seed: u64,
) -> Result<BootstrapCurve> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(
            "bootstrap needs >= 2 values".into(),
        ));
    }
    if max_size < 2 || resamples == 0 {
        return Err(Error::Usage(
            "bootstrap needs max_size >= 2 and resamples >= 1".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DataIntegrity {
            context: "bootstrap_variation values".into(),
        });
    }
    let n = values.len();
    let sizes: Vec<usize> = (2..=max_size).collect();

    // per-resample prefix stds via Welford; parallel across resamples,
    // reduced in fixed order for determinism
    let per_resample: Vec<Vec<f64>> = exec::map_indexed(resamples, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, b as u64));
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut stds = Vec::with_capacity(sizes.len());
        for k in 1..=max_size {
            let x = values[rng.gen_range(0..n)];
            let delta = x - mean;
            mean += delta / k as f64;
            m2 += delta * (x - mean);
            if k >= 2 {
                stds.push((m2 / (k - 1) as f64).sqrt());
            }
        }
        stds
    });

    let mut avg_std = vec![0.0; sizes.len()];
    for stds in &per_resample {
        for (acc, s) in avg_std.iter_mut().zip(stds) {
            *acc += s;
        }
    }
    for v in avg_std.iter_mut() {
        *v /= resamples as f64;
    }
    let derivative: Vec<f64> = avg_std.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(BootstrapCurve {
        metric: metric.into(),
        sample_sizes: sizes,
        avg_std,
        derivative,
        resamples,
        converged_at: None,
    })
}

/// Smallest sample size where |derivative| stays below `epsilon` for
/// `window` consecutive steps.
pub fn convergence_index(
    curve: &BootstrapCurve,
    epsilon: f64,
    window: usize,
) -> Option<usize> {
    if window == 0 || curve.derivative.len() < window {
        return None;
    }
    for i in 0..=(curve.derivative.len() - window) {
        if curve.derivative[i..i + window]
            .iter()
            .all(|d| d.abs() < epsilon)
        {
            return Some(curve.sample_sizes[i]);
        }
    }
    None
}

/// Knobs of the statistical analysis, echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub resamples: usize,
    /// Convergence epsilon as a fraction of the curve's max avg_std.
    pub epsilon_fraction: f64,
    pub window: usize,
    pub bootstrap_seed: u64,
    /// Documented denominator convention for all stds in the report.
    pub std_denominator: String,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            epsilon_fraction: 0.0015,
            window: 3,
            bootstrap_seed: 0,
            std_denominator: "n-1".into(),
        }
    }
}

/// Epsilon for [`convergence_index`] derived from a curve per the
/// configured fraction of its max avg_std.
pub fn epsilon_for(curve: &BootstrapCurve, cfg: &AnalysisConfig) -> f64 {
    let max = curve.avg_std.iter().cloned().fold(0.0f64, f64::max);
    cfg.epsilon_fraction * max
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub analysis: AnalysisConfig,
    pub summaries: Vec<MethodSummary>,
    pub normalized: Vec<NormalizedRow>,
    pub best_median_worst: BTreeMap<String, Vec<BmwRow>>,
    /// Curves keyed "<method>/<metric>".
    pub bootstrap: BTreeMap<String, BootstrapCurve>,
    pub convergence: BTreeMap<String, Option<usize>>,
    pub aborted_sessions: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

/// Full statistical analysis of one study's records, grouped by method.
pub fn analyze_study(
    records: &[(Method, Vec<SessionRecord>)],
    cfg: &AnalysisConfig,
) -> Result<StudyReport> {
    let mut summaries = Vec::new();
    let mut bmw = BTreeMap::new();
    let mut bootstrap = BTreeMap::new();
    let mut convergence = BTreeMap::new();
    let mut aborted = BTreeMap::new();
    for (mi, (method, recs)) in records.iter().enumerate() {
        let summary = summarize_method(recs)?;
        if summary.method != *method {
            return Err(Error::Usage(format!(
                "records under {} trained with {}",
                method.slug(),
                summary.method.slug()
            )));
        }
        summaries.push(summary);
        bmw.insert(method.slug().to_string(), best_median_worst(recs)?.to_vec());
        aborted.insert(
            method.slug().to_string(),
            crate::trainer::aborted_count(recs),
        );
        let done = completed_bests(recs);
        for (metric_i, metric) in ["mse_sigma", "mse_equil"].into_iter().enumerate() {
            let values: Vec<f64> = done
                .iter()
                .map(|r| {
                    let b = r.best.unwrap();
                    if metric == "mse_sigma" {
                        b.mse_sigma
                    } else {
                        b.mse_equil
                    }
                })
                .collect();
            let seed = mix_seed(cfg.bootstrap_seed, (mi * 2 + metric_i) as u64);
            let mut curve =
                bootstrap_variation(metric, &values, values.len(), cfg.resamples, seed)?;
            let eps = epsilon_for(&curve, cfg);
            curve.converged_at = convergence_index(&curve, eps, cfg.window);
            let key = format!("{}/{}", method.slug(), metric);
            convergence.insert(key.clone(), curve.converged_at);
            bootstrap.insert(key, curve);
        }
    }
    let baseline = summaries
        .iter()
        .find(|s| s.method == Method::Baseline)
        .copied();
    let mut notes = Vec::new();
    let normalized = match baseline {
        Some(b) => normalize_to_baseline(&summaries, &b)?,
        None => {
            notes.push("no baseline method in study; normalized table omitted".into());
            Vec::new()
        }
    };
    Ok(StudyReport {
        analysis: cfg.clone(),
        summaries,
        normalized,
        best_median_worst: bmw,
        bootstrap,
        convergence,
        aborted_sessions: aborted,
        notes,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Write `summary.csv`, `normalized.csv`, `bmw.csv`,
/// `bootstrap_<metric>.csv`, and `report.json` into `dir`. Deterministic:
/// no timestamps or wall-clock fields.
pub fn write_report(dir: &Path, report: &StudyReport) -> Result<()> {
    fs::create_dir_all(dir)?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "method",
        "n_sessions",
        "mse_sigma_mean",
        "mse_sigma_std",
        "iteration_mean",
        "iteration_std",
        "mse_equil_mean",
        "mse_equil_std",
    ])
    .map_err(csv_err(&path))?;
    for s in &report.summaries {
        w.write_record([
            s.method.slug().to_string(),
            s.n_sessions.to_string(),
            format!("{:e}", s.mse_sigma_mean),
            format!("{:e}", s.mse_sigma_std),
            format!("{:e}", s.iteration_mean),
            format!("{:e}", s.iteration_std),
            format!("{:e}", s.mse_equil_mean),
            format!("{:e}", s.mse_equil_std),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush()?;

    // no baseline -> no normalized.csv; the omission is noted in report.json
    if !report.normalized.is_empty() {
        let path = dir.join("normalized.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["method", "mse_sigma_ratio", "mse_equil_ratio"])
            .map_err(csv_err(&path))?;
        for r in &report.normalized {
            // Table 2 convention: 2-decimal display rounding
            w.write_record([
                r.method.slug().to_string(),
                format!("{:.2}", r.mse_sigma_ratio),
                format!("{:.2}", r.mse_equil_ratio),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush()?;
    }

    let path = dir.join("bmw.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "method",
        "label",
        "session_seed",
        "iteration",
        "mse_sigma",
        "mse_equil",
    ])
    .map_err(csv_err(&path))?;
    for (method, rows) in &report.best_median_worst {
        for r in rows {
            w.write_record([
                method.clone(),
                r.label.clone(),
                r.session_seed.to_string(),
                r.iteration.to_string(),
                format!("{:e}", r.mse_sigma),
                format!("{:e}", r.mse_equil),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush()?;

    for metric in ["mse_sigma", "mse_equil"] {
        let path = dir.join(format!("bootstrap_{metric}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["method", "size", "avg_std", "derivative"])
            .map_err(csv_err(&path))?;
        for (key, curve) in &report.bootstrap {
            let Some(method) = key.strip_suffix(&format!("/{metric}")) else {
                continue;
            };
            for (i, (&size, &avg)) in curve
                .sample_sizes
                .iter()
                .zip(&curve.avg_std)
                .enumerate()
            {
                let d = curve
                    .derivative
                    .get(i)
                    .map(|d| format!("{d:e}"))
                    .unwrap_or_default();
                w.write_record([
                    method.to_string(),
                    size.to_string(),
                    format!("{avg:e}"),
                    d,
                ])
                .map_err(csv_err(&path))?;
            }
        }
        w.flush()?;
    }

    let path = dir.join("report.json");
    let bytes = serde_json::to_vec_pretty(report).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    fs::write(&path, bytes)?;
    Ok(())
}
