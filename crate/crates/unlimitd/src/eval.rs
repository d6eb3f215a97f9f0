//! Evaluation protocol: MSE-versus-K curves with confidence intervals,
//! NLL-scored out-of-distribution detection summarized by AUC-ROC,
//! posterior-uncertainty curves, and report emission (CSV, JSON, SVG).
//!
//! Tasks are drawn from per-index seeded streams, so results do not depend on
//! evaluation order or thread count, and every K in a sweep sees the same
//! held-out tasks.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::LoadedModel;
use crate::diffnet::{vectorize_outputs, BatchInputs};
use crate::error::{Error, Result};
use crate::gp::{self, GaussianTaskPrior};
use crate::maml::MamlModel;
use crate::mixture::{self, MixtureModel};
use crate::taskgen::{domains, sample_inputs, sample_task, substream, TaskKind, TaskSpec};

mod plot;

/// A model's answer for one task: predictive mean over the queries, the
/// posterior covariance when the model is probabilistic, and the identified
/// cluster when it is a mixture.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
    pub cluster: Option<usize>,
}

/// What the evaluation protocol needs from a model.
pub trait Model: Sync {
    fn predict(
        &self,
        xc: &BatchInputs,
        yc: &DVector<f64>,
        xq: &BatchInputs,
    ) -> Result<Prediction>;

    /// NLL of the context batch under the model's prior, the OoD score.
    /// `None` for models without a likelihood.
    fn context_nll(&self, xc: &BatchInputs, yc: &DVector<f64>) -> Option<Result<f64>>;

    /// Prior predictive std at the given inputs (observation noise included),
    /// when the model has one.
    fn prior_std(&self, xq: &BatchInputs) -> Option<Result<DVector<f64>>>;
}

impl Model for GaussianTaskPrior {
    fn predict(&self, xc: &BatchInputs, yc: &DVector<f64>, xq: &BatchInputs) -> Result<Prediction> {
        let post = gp::posterior_predictive(self, xc, yc, xq)?;
        Ok(Prediction {
            mean: post.mean,
            cov: Some(post.cov),
            cluster: None,
        })
    }

    fn context_nll(&self, xc: &BatchInputs, yc: &DVector<f64>) -> Option<Result<f64>> {
        Some(gp::nll(self, xc, yc))
    }

    fn prior_std(&self, xq: &BatchInputs) -> Option<Result<DVector<f64>>> {
        Some(gp::prior_predictive(self, xq).map(|p| p.std_diag()))
    }
}

impl Model for MixtureModel {
    fn predict(&self, xc: &BatchInputs, yc: &DVector<f64>, xq: &BatchInputs) -> Result<Prediction> {
        let j = mixture::infer_cluster(self, xc, yc)?;
        let post = gp::posterior_predictive(&self.cluster_prior(j), xc, yc, xq)?;
        Ok(Prediction {
            mean: post.mean,
            cov: Some(post.cov),
            cluster: Some(j),
        })
    }

    fn context_nll(&self, xc: &BatchInputs, yc: &DVector<f64>) -> Option<Result<f64>> {
        Some(mixture::mixture_nll(self, xc, yc))
    }

    fn prior_std(&self, _xq: &BatchInputs) -> Option<Result<DVector<f64>>> {
        // The mixture prior is not one Gaussian; there is no single std curve.
        None
    }
}

impl Model for MamlModel {
    fn predict(&self, xc: &BatchInputs, yc: &DVector<f64>, xq: &BatchInputs) -> Result<Prediction> {
        let pred = MamlModel::predict(self, xc, yc, xq)?;
        Ok(Prediction {
            mean: vectorize_outputs(&pred),
            cov: None,
            cluster: None,
        })
    }

    fn context_nll(&self, _xc: &BatchInputs, _yc: &DVector<f64>) -> Option<Result<f64>> {
        None
    }

    fn prior_std(&self, _xq: &BatchInputs) -> Option<Result<DVector<f64>>> {
        None
    }
}

impl Model for LoadedModel {
    fn predict(&self, xc: &BatchInputs, yc: &DVector<f64>, xq: &BatchInputs) -> Result<Prediction> {
        match self {
            LoadedModel::Gp(m) => m.predict(xc, yc, xq),
            LoadedModel::Mixture(m) => m.predict(xc, yc, xq),
            LoadedModel::Maml(m) => Model::predict(m, xc, yc, xq),
        }
    }

    fn context_nll(&self, xc: &BatchInputs, yc: &DVector<f64>) -> Option<Result<f64>> {
        match self {
            LoadedModel::Gp(m) => m.context_nll(xc, yc),
            LoadedModel::Mixture(m) => m.context_nll(xc, yc),
            LoadedModel::Maml(m) => m.context_nll(xc, yc),
        }
    }

    fn prior_std(&self, xq: &BatchInputs) -> Option<Result<DVector<f64>>> {
        match self {
            LoadedModel::Gp(m) => m.prior_std(xq),
            LoadedModel::Mixture(m) => m.prior_std(xq),
            LoadedModel::Maml(m) => m.prior_std(xq),
        }
    }
}

fn task_for_index(kinds: &[TaskKind], seed: u64, index: usize) -> TaskSpec {
    let mut rng = substream(seed, domains::EVAL_TASK, index as u64);
    sample_task(kinds[index % kinds.len()], &mut rng)
}

fn queries_for_index(
    task: &TaskSpec,
    seed: u64,
    index: usize,
    n_query: usize,
) -> Result<(BatchInputs, DVector<f64>)> {
    let mut rng = substream(seed, domains::EVAL_QUERY, index as u64);
    let xs = sample_inputs(n_query, &mut rng);
    let truths = DVector::from_vec(task.eval_batch(&xs));
    Ok((BatchInputs::from_scalars(&xs)?, truths))
}

fn context_for_index(
    task: &TaskSpec,
    seed: u64,
    domain_inputs: u64,
    index: u64,
    k: usize,
    noise_std: f64,
) -> Result<(BatchInputs, DVector<f64>)> {
    let mut input_rng = substream(seed, domain_inputs, 2 * index);
    let mut noise_rng = substream(seed, domain_inputs, 2 * index + 1);
    crate::taskgen::sample_context(task, k, noise_std, &mut input_rng, &mut noise_rng)
}

/// Mean and half-width of the 95% interval (`1.96 sd / sqrt(n)`); a single
/// sample gets a zero interval by convention.
pub(crate) fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// One point of the MSE-versus-K curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub k: usize,
    pub mean: f64,
    pub ci95: f64,
}

/// Few-shot prediction error: for each K, draws `n_tasks` held-out tasks with
/// K noisy context points and `n_query` clean queries, and reports the mean
/// and ci95 of the per-task query MSE. The same tasks and queries are reused
/// across the K sweep so the curve is paired.
pub fn mse_eval<M: Model + ?Sized>(
    model: &M,
    kinds: &[TaskKind],
    k_list: &[usize],
    n_tasks: usize,
    n_query: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<MsePoint>> {
    check_eval_args(kinds, k_list, n_tasks)?;
    if n_query == 0 {
        return Err(Error::InvalidConfig("query count must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(k_list.len());
    for (kidx, &k) in k_list.iter().enumerate() {
        let mses: Vec<Result<f64>> = (0..n_tasks)
            .into_par_iter()
            .map(|i| {
                let task = task_for_index(kinds, seed, i);
                let (xq, truth) = queries_for_index(&task, seed, i, n_query)?;
                let ctx_index = (i * k_list.len() + kidx) as u64;
                let (xc, yc) =
                    context_for_index(&task, seed, domains::EVAL_CONTEXT, ctx_index, k, noise_std)?;
                let pred = model.predict(&xc, &yc, &xq)?;
                Ok((pred.mean - truth).norm_squared() / n_query as f64)
            })
            .collect();
        let mses = mses.into_iter().collect::<Result<Vec<f64>>>()?;
        let (mean, ci95) = mean_ci95(&mses);
        points.push(MsePoint { k, mean, ci95 });
    }
    Ok(points)
}

/// AUC-ROC of NLL-based OoD detection at context size `k`: `n_each`
/// in-distribution and `n_each` OoD tasks are scored by their context NLL,
/// OoD being the positive class.
pub fn ood_auc<M: Model + ?Sized>(
    model: &M,
    in_kinds: &[TaskKind],
    ood_kinds: &[TaskKind],
    k: usize,
    n_each: usize,
    noise_std: f64,
    seed: u64,
) -> Result<f64> {
    check_eval_args(in_kinds, &[k.max(1)], n_each)?;
    if ood_kinds.is_empty() {
        return Err(Error::InvalidConfig("no OoD clusters given".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("context size must be >= 1".into()));
    }
    let score = |kinds: &[TaskKind], tag: u64, i: usize| -> Result<f64> {
        let mut task_rng = substream(seed, domains::OOD_TASK, (i as u64) << 1 | tag);
        let task = sample_task(kinds[i % kinds.len()], &mut task_rng);
        let (xc, yc) = context_for_index(
            &task,
            seed,
            domains::OOD_CONTEXT,
            (i as u64) << 1 | tag,
            k,
            noise_std,
        )?;
        model
            .context_nll(&xc, &yc)
            .ok_or_else(|| {
                Error::Unsupported("this model has no likelihood to score OoD data with".into())
            })?
    };
    let in_scores: Vec<Result<f64>> = (0..n_each)
        .into_par_iter()
        .map(|i| score(in_kinds, 0, i))
        .collect();
    let ood_scores: Vec<Result<f64>> = (0..n_each)
        .into_par_iter()
        .map(|i| score(ood_kinds, 1, i))
        .collect();
    let in_scores = in_scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let ood_scores = ood_scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(auc_from_scores(&in_scores, &ood_scores))
}

/// Mann-Whitney AUC with midrank tie handling: the probability that a random
/// positive (OoD) score ranks above a random negative one, counting ties as
/// one half. Depends on the scores only through their ranks.
pub fn auc_from_scores(negative: &[f64], positive: &[f64]) -> f64 {
    assert!(
        !negative.is_empty() && !positive.is_empty(),
        "AUC needs at least one score on each side"
    );
    let mut all: Vec<(f64, bool)> = negative
        .iter()
        .map(|&s| (s, false))
        .chain(positive.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        // 1-based midrank of the tie group [start, end).
        let midrank = (start + 1 + end) as f64 / 2.0;
        for item in &all[start..end] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }
    let n_pos = positive.len() as f64;
    let n_neg = negative.len() as f64;
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Mean posterior std at the queries, per K. `k = 0` is the prior convention:
/// the prior predictive std (with observation noise) instead of a posterior.
/// Point predictors are rejected.
pub fn uncertainty_curve<M: Model + ?Sized>(
    model: &M,
    kinds: &[TaskKind],
    k_list: &[usize],
    n_tasks: usize,
    n_query: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_eval_args(kinds, &[1], n_tasks)?;
    if k_list.is_empty() || n_query == 0 {
        return Err(Error::InvalidConfig("need at least one K and one query".into()));
    }
    let mut out = Vec::with_capacity(k_list.len());
    for (kidx, &k) in k_list.iter().enumerate() {
        let stds: Vec<Result<f64>> = (0..n_tasks)
            .into_par_iter()
            .map(|i| {
                let task = task_for_index(kinds, seed, i);
                let (xq, _) = queries_for_index(&task, seed, i, n_query)?;
                if k == 0 {
                    let std = model.prior_std(&xq).ok_or_else(|| {
                        Error::Unsupported(
                            "this model has no prior predictive uncertainty".into(),
                        )
                    })??;
                    return Ok(std.mean());
                }
                let ctx_index = (i * k_list.len() + kidx) as u64;
                let (xc, yc) =
                    context_for_index(&task, seed, domains::EVAL_CONTEXT, ctx_index, k, noise_std)?;
                let pred = model.predict(&xc, &yc, &xq)?;
                let cov = pred.cov.ok_or_else(|| {
                    Error::Unsupported("point predictors have no posterior uncertainty".into())
                })?;
                let mean_std = cov
                    .diagonal()
                    .iter()
                    .map(|&v| v.max(0.0).sqrt())
                    .sum::<f64>()
                    / n_query as f64;
                Ok(mean_std)
            })
            .collect();
        let stds = stds.into_iter().collect::<Result<Vec<f64>>>()?;
        out.push((k, stds.iter().sum::<f64>() / n_tasks as f64));
    }
    Ok(out)
}

fn check_eval_args(kinds: &[TaskKind], k_list: &[usize], n_tasks: usize) -> Result<()> {
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("no task clusters given".into()));
    }
    if k_list.is_empty() {
        return Err(Error::InvalidConfig("empty K list".into()));
    }
    if n_tasks == 0 {
        return Err(Error::InvalidConfig("task count must be >= 1".into()));
    }
    Ok(())
}

/// One row of the report: whichever metrics were computed at this K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRecord {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci95_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_posterior_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Human-readable model identity (variant, structure).
    pub model: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub n_query: usize,
    pub n_each: usize,
    /// Hash of the resolved run manifest the report belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    /// Set when any interval was computed from a single sample.
    #[serde(default)]
    pub degenerate_ci: bool,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

fn report_version() -> u32 {
    REPORT_FORMAT_VERSION
}

/// The full evaluation result: metadata plus per-K records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default = "report_version")]
    pub version: u32,
    pub meta: ReportMeta,
    pub records: Vec<KRecord>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "report format version {} is not supported",
                self.version
            )));
        }
        if self.records.is_empty() {
            return Err(Error::InvalidConfig(
                "a report needs at least one K record".into(),
            ));
        }
        for w in self.records.windows(2) {
            if w[1].k <= w[0].k {
                return Err(Error::InvalidConfig("K values must be strictly increasing".into()));
            }
        }
        for r in &self.records {
            if let Some(auc) = r.auc {
                if !(0.0..=1.0).contains(&auc) {
                    return Err(Error::InvalidConfig(format!("AUC {auc} outside [0, 1]")));
                }
            }
            if let Some(ci) = r.ci95_mse {
                if ci < 0.0 {
                    return Err(Error::InvalidConfig("negative confidence interval".into()));
                }
            }
        }
        Ok(())
    }
}

const CSV_HEADER: &str = "metric,K,value,ci95,model,seed";

/// Writes `<stem>.csv` and `<stem>.json` (and `<stem>_mse.svg` /
/// `<stem>_auc.svg` when requested and applicable) into `dir`, returning the
/// paths written. Validation runs first, so an empty report never produces
/// files.
pub fn write_report(
    report: &EvalReport,
    dir: &Path,
    stem: &str,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    report.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &report.records {
        let mut push_row = |metric: &str, value: f64, ci: Option<f64>| {
            let ci_text = ci.map(|c| c.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{metric},{},{},{},{},{}\n",
                r.k, value, ci_text, report.meta.model, report.meta.seed
            ));
        };
        if let Some(v) = r.mean_mse {
            push_row("mse", v, r.ci95_mse);
        }
        if let Some(v) = r.auc {
            push_row("auc", v, None);
        }
        if let Some(v) = r.mean_posterior_std {
            push_row("posterior_std", v, None);
        }
    }
    std::fs::write(&csv_path, csv).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", csv_path.display()),
        ))
    })?;
    written.push(csv_path);

    let json_path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    written.push(json_path);

    if svg {
        let mse_points: Vec<(f64, f64)> = report
            .records
            .iter()
            .filter_map(|r| r.mean_mse.map(|v| (r.k as f64, v)))
            .collect();
        if !mse_points.is_empty() {
            let path = dir.join(format!("{stem}_mse.svg"));
            let doc = plot::line_plot(
                "mean query MSE vs context size",
                "K",
                "MSE",
                &[plot::Series {
                    label: &report.meta.model,
                    points: &mse_points,
                }],
                report.meta.manifest_hash.as_deref(),
            );
            std::fs::write(&path, doc)?;
            written.push(path);
        }
        let auc_points: Vec<(f64, f64)> = report
            .records
            .iter()
            .filter_map(|r| r.auc.map(|v| (r.k as f64, v)))
            .collect();
        if !auc_points.is_empty() {
            let path = dir.join(format!("{stem}_auc.svg"));
            let doc = plot::line_plot(
                "OoD detection AUC vs context size",
                "K",
                "AUC",
                &[plot::Series {
                    label: &report.meta.model,
                    points: &auc_points,
                }],
                report.meta.manifest_hash.as_deref(),
            );
            std::fs::write(&path, doc)?;
            written.push(path);
        }
    }
    Ok(written)
}
