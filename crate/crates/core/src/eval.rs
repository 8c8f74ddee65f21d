//! Metrics, the label-propagation baseline, ablation and step-ratio
//! sweeps, and machine-readable result emission.
//!
//! Sources are the positive class (value 0 in indicator vectors). The
//! source rate is around 5%, so accuracy alone is dominated by the
//! majority class; reports always carry F1 next to it.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Split};
use crate::diffusion::StageConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::pipeline::{localize, DecodeRule, LocalizeOptions, TrainedBundle, Variant};
use crate::seeds;

/// Confusion counts and the derived rates for one or more episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub re: f64,
    pub pr: f64,
    pub f1: f64,
    pub acc: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1_from_pr_re(pr: f64, re: f64) -> f64 {
    if pr + re > 0.0 {
        2.0 * pr * re / (pr + re)
    } else {
        0.0
    }
}

/// Confusion-matrix metrics with sources (value 0) as the positive class.
/// The ground truth must be exactly binary.
pub fn compute_metrics(predicted: &BTreeSet<u32>, truth: &[f64]) -> Result<MetricsReport> {
    if truth.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParam("ground-truth indicator must be binary".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (v, &t) in truth.iter().enumerate() {
        let pred_source = predicted.contains(&(v as u32));
        let true_source = t == 0.0;
        match (pred_source, true_source) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let pr = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let re = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let acc = (tp + tn) as f64 / truth.len() as f64;
    Ok(MetricsReport { re, pr, f1: f1_from_pr_re(pr, re), acc, tp, fp, fn_, tn })
}

/// Unweighted mean of per-episode rates; confusion counts are summed.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    if reports.is_empty() {
        return MetricsReport::default();
    }
    let n = reports.len() as f64;
    MetricsReport {
        re: reports.iter().map(|r| r.re).sum::<f64>() / n,
        pr: reports.iter().map(|r| r.pr).sum::<f64>() / n,
        f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
        acc: reports.iter().map(|r| r.acc).sum::<f64>() / n,
        tp: reports.iter().map(|r| r.tp).sum(),
        fp: reports.iter().map(|r| r.fp).sum(),
        fn_: reports.iter().map(|r| r.fn_).sum(),
        tn: reports.iter().map(|r| r.tn).sum(),
    }
}

/// Label-propagation scores: fixed-point iteration of
/// `e <- alpha * S * e + (1 - alpha) * b` on the symmetric-normalized
/// adjacency, `b = +1` on affected nodes and `-1` elsewhere.
pub fn lpsi_scores(
    graph: &Graph,
    observation: &[f64],
    alpha: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    if observation.len() != graph.node_count() {
        return Err(Error::DimMismatch("observation length vs graph".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidParam("alpha must lie in (0,1)".into()));
    }
    if observation.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParam("observation must be binary".into()));
    }
    let n = graph.node_count();
    let b: Vec<f64> = observation.iter().map(|&o| if o == 0.0 { 1.0 } else { -1.0 }).collect();
    let inv_sqrt_deg: Vec<f64> = (0..n as u32)
        .map(|v| {
            let d = graph.degree(v);
            if d > 0 {
                1.0 / (d as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut e = b.clone();
    let mut next = vec![0.0; n];
    let tol = 1e-10;
    for _ in 0..max_iters {
        for v in 0..n {
            let mut acc = 0.0;
            for u in graph.neighbors(v as u32) {
                acc += inv_sqrt_deg[v] * inv_sqrt_deg[u as usize] * e[u as usize];
            }
            next[v] = alpha * acc + (1.0 - alpha) * b[v];
        }
        let delta = e
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        std::mem::swap(&mut e, &mut next);
        if delta < tol {
            return Ok(e);
        }
    }
    let residual = {
        let mut r = 0.0f64;
        for v in 0..n {
            let mut acc = 0.0;
            for u in graph.neighbors(v as u32) {
                acc += inv_sqrt_deg[v] * inv_sqrt_deg[u as usize] * e[u as usize];
            }
            r = r.max((e[v] - (alpha * acc + (1.0 - alpha) * b[v])).abs());
        }
        r
    };
    Err(Error::NonConvergence { residual, iters: max_iters })
}

/// Label-propagation baseline: converged scores decoded as local maxima
/// over the graph.
pub fn lpsi_baseline(
    graph: &Graph,
    observation: &[f64],
    alpha: f64,
    max_iters: usize,
) -> Result<BTreeSet<u32>> {
    let e = lpsi_scores(graph, observation, alpha, max_iters)?;
    let mut out = BTreeSet::new();
    for v in 0..graph.node_count() as u32 {
        let ev = e[v as usize];
        if graph.neighbors(v).all(|u| ev > e[u as usize]) && observation[v as usize] == 0.0 {
            out.insert(v);
        }
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// One evaluated configuration of a sweep or ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub id: String,
    pub t1: usize,
    pub t2: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub per_episode: Vec<MetricsReport>,
    /// Total fine-stage sampling wall time over the evaluated episodes,
    /// seconds; absent when timing is disabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_wall_secs: Option<f64>,
}

/// Evaluate one variant over a dataset split. Episodes run in parallel
/// with per-episode derived seeds, so results are identical regardless of
/// the worker count.
pub fn evaluate_split(
    bundle: &TrainedBundle,
    dataset: &DatasetBundle,
    split: Split,
    variant: Variant,
    stages: StageConfig,
    decode: DecodeRule,
    seed: u64,
) -> Result<SweepResult> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyDataset(format!("no episodes in split {split:?}")));
    }
    let outputs: Vec<Result<(MetricsReport, f64)>> = indices
        .par_iter()
        .map(|&idx| {
            let y: Vec<f64> = dataset.observation(idx);
            let truth: Vec<f64> = dataset.indicator(idx)?;
            let opts = LocalizeOptions {
                variant,
                stages,
                seed: seeds::derive_indexed(seed, "episode-eval", dataset.episodes[idx].id as u64),
                decode,
                fraction: bundle.config.episodes.source_fraction,
                renoise_init: bundle.config.renoise_init,
                guidance_mode: bundle.config.guidance_mode,
            };
            let out = localize(bundle, &y, &dataset.episodes[idx].cascade, &opts)?;
            Ok((compute_metrics(&out.predicted, &truth)?, out.fine_secs))
        })
        .collect();
    let mut per_episode = Vec::with_capacity(outputs.len());
    let mut fine_secs = 0.0;
    for o in outputs {
        let (m, secs) = o?;
        per_episode.push(m);
        fine_secs += secs;
    }
    Ok(SweepResult {
        id: variant.label().to_string(),
        t1: stages.t1,
        t2: stages.t2,
        seed,
        metrics: aggregate(&per_episode),
        per_episode,
        fine_wall_secs: Some(fine_secs),
    })
}

/// Run the ablation table: the full model plus the four single-change
/// variants, all under the same total step budget.
pub fn run_ablations(
    bundle: &TrainedBundle,
    dataset: &DatasetBundle,
    split: Split,
    total_steps: usize,
    seed: u64,
) -> Result<Vec<SweepResult>> {
    let t2 = bundle.config.stages.t2.min(total_steps.saturating_sub(1)).max(1);
    let shared = StageConfig { t1: total_steps - t2, t2 };
    let variants = [
        (Variant::Full, shared, bundle.config.decode),
        (Variant::CoarseOnly, StageConfig { t1: total_steps, t2: 0 }, bundle.config.decode),
        (Variant::FineOnly, StageConfig { t1: 0, t2: total_steps }, DecodeRule::TopFraction),
        (Variant::NoPositional, shared, bundle.config.decode),
        (Variant::NoNoiseModel, shared, bundle.config.decode),
    ];
    let mut out = Vec::with_capacity(variants.len());
    for (variant, stages, decode) in variants {
        out.push(evaluate_split(bundle, dataset, split, variant, stages, decode, seed)?);
    }
    Ok(out)
}

/// Sweep the fine-to-coarse step ratio at a constant total step budget.
/// Ratios whose fine budget rounds outside `0..total` are skipped.
pub fn sweep_ratio(
    bundle: &TrainedBundle,
    dataset: &DatasetBundle,
    split: Split,
    ratios: &[f64],
    total_steps: usize,
    seed: u64,
) -> Result<Vec<SweepResult>> {
    let mut out = Vec::new();
    for &ratio in ratios {
        if !(0.0..1.0).contains(&ratio) {
            continue;
        }
        let t2 = (total_steps as f64 * ratio / (1.0 + ratio)).round() as usize;
        if t2 >= total_steps {
            continue;
        }
        let stages = StageConfig { t1: total_steps - t2, t2 };
        let variant = if t2 == 0 { Variant::CoarseOnly } else { Variant::Full };
        let mut res = evaluate_split(
            bundle,
            dataset,
            split,
            variant,
            stages,
            bundle.config.decode,
            seed,
        )?;
        res.id = format!("ratio_{ratio}");
        out.push(res);
    }
    Ok(out)
}

/// Structured result file: configuration hash, seeds, and every row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub rows: Vec<SweepResult>,
}

/// Write `results.csv` (one row per configuration and metric, stable
/// column order) and `results.json` (full report). Deterministic bytes
/// given the inputs.
pub fn emit_results(report: &ResultsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("config,seed,metric,value\n");
    for row in &report.rows {
        let mut push = |metric: &str, value: f64| {
            csv.push_str(&format!("{},{},{},{}\n", row.id, row.seed, metric, value));
        };
        push("RE", row.metrics.re);
        push("PR", row.metrics.pr);
        push("F1", row.metrics.f1);
        push("ACC", row.metrics.acc);
        if let Some(secs) = row.fine_wall_secs {
            push("fine_wall_secs", secs);
        }
    }
    std::fs::write(dir.join("results.csv"), csv)?;
    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(dir.join("results.json"), json)?;
    Ok(())
}
