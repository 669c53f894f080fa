//! Weight disentanglement, loss landscapes, normalized scores, the one-step
//! kernel identity of tangent models, and fusion reports.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, value_and_grad};
use crate::error::{contract, Error, Result};
use crate::finetune::{cross_entropy_loss, LossFn, Optimizer};
use crate::fusion::Algorithm;
use crate::io::{csv_error, fmt17, metadata_line, parse_metadata_line};
use crate::model::{LogitsFn, Mode, Model};
use crate::params::ParamTree;
use crate::task_vector::TaskVector;
use crate::tasks::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Points per axis.
    pub resolution: usize,
    /// Task index pairs examined by the disentanglement and landscape grids.
    pub task_pairs: Vec<(usize, usize)>,
    pub ntk_eta: f64,
    /// Largest batch for which explicit Jacobians are assembled.
    pub ntk_max_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            lambda_min: -1.0,
            lambda_max: 2.0,
            resolution: 21,
            task_pairs: vec![(0, 1), (0, 2), (1, 2)],
            ntk_eta: 1e-3,
            ntk_max_samples: 64,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || !(self.lambda_min < self.lambda_max) {
            return Err(Error::Spec("grid needs resolution >= 2 and lambda_min < lambda_max".into()));
        }
        if self.task_pairs.iter().any(|(a, b)| a == b) {
            return Err(Error::Spec("task pairs must name two different tasks".into()));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        linspace(self.lambda_min, self.lambda_max, self.resolution)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

fn disagreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

fn check_pair(model: &Model, nu1: &TaskVector, nu2: &TaskVector, d1: &Dataset, d2: &Dataset) -> Result<()> {
    if nu1.mode != nu2.mode || nu1.mode != model.mode() {
        return Err(contract("task vectors and model must share a mode"));
    }
    model.init().ensure_congruent(&nu1.delta, "disentanglement")?;
    model.init().ensure_congruent(&nu2.delta, "disentanglement")?;
    if d1.is_empty() || d2.is_empty() {
        return Err(contract("disentanglement needs non-empty evaluation sets"));
    }
    Ok(())
}

fn combined(model: &Model, nu1: &TaskVector, nu2: &TaskVector, l1: f64, l2: f64) -> Result<ParamTree> {
    // Summing the two scaled deltas first keeps the result symmetric in the pair.
    let delta = nu1.delta.scale(l1).add(&nu2.delta.scale(l2))?;
    model.init().add(&delta)
}

/// Summed prediction disagreement between each single-vector model and the
/// combined model, on that vector's task data. Lies in `[0, 2]`.
pub fn disentanglement_error(
    model: &Model,
    nu1: &TaskVector,
    nu2: &TaskVector,
    lambda1: f64,
    lambda2: f64,
    eval_sets: (&Dataset, &Dataset),
) -> Result<f64> {
    let (d1, d2) = eval_sets;
    check_pair(model, nu1, nu2, d1, d2)?;
    let single1 = model.predict(&model.init().add(&nu1.delta.scale(lambda1))?, &d1.x)?;
    let single2 = model.predict(&model.init().add(&nu2.delta.scale(lambda2))?, &d2.x)?;
    let both = combined(model, nu1, nu2, lambda1, lambda2)?;
    Ok(disagreement(&single1, &model.predict(&both, &d1.x)?) + disagreement(&single2, &model.predict(&both, &d2.x)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisentanglementGrid {
    pub lambda1_axis: Vec<f64>,
    pub lambda2_axis: Vec<f64>,
    /// `ξ / 2`, indexed `[i1][i2]`.
    pub xi: Vec<Vec<f64>>,
    /// `ξ` in `[0, 2]`.
    pub xi_raw: Vec<Vec<f64>>,
    pub mode: Mode,
    pub task_pair: (String, String),
}

impl DisentanglementGrid {
    /// Fraction of cells whose stored `ξ / 2` is below `threshold`.
    pub fn area_below(&self, threshold: f64) -> f64 {
        let cells = self.xi.iter().flatten();
        let n = self.xi.len() * self.lambda2_axis.len();
        cells.filter(|&&v| v < threshold).count() as f64 / n as f64
    }
}

/// [`disentanglement_error`] on the grid `axis × axis`.
pub fn disentanglement_grid(
    model: &Model,
    nu1: &TaskVector,
    nu2: &TaskVector,
    axis: &[f64],
    eval_sets: (&Dataset, &Dataset),
) -> Result<DisentanglementGrid> {
    let (d1, d2) = eval_sets;
    check_pair(model, nu1, nu2, d1, d2)?;
    if axis.len() < 2 {
        return Err(contract("grid resolution must be at least 2"));
    }
    let singles = |nu: &TaskVector, d: &Dataset| -> Result<Vec<Vec<usize>>> {
        axis.par_iter().map(|&l| model.predict(&model.init().add(&nu.delta.scale(l))?, &d.x)).collect()
    };
    let s1 = singles(nu1, d1)?;
    let s2 = singles(nu2, d2)?;
    let xi_raw = axis
        .par_iter()
        .enumerate()
        .map(|(i, &l1)| {
            axis.iter()
                .enumerate()
                .map(|(j, &l2)| {
                    let both = combined(model, nu1, nu2, l1, l2)?;
                    Ok(disagreement(&s1[i], &model.predict(&both, &d1.x)?)
                        + disagreement(&s2[j], &model.predict(&both, &d2.x)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DisentanglementGrid {
        lambda1_axis: axis.to_vec(),
        lambda2_axis: axis.to_vec(),
        xi: xi_raw.iter().map(|r| r.iter().map(|v| v / 2.0).collect()).collect(),
        xi_raw,
        mode: model.mode(),
        task_pair: (nu1.task_id.clone(), nu2.task_id.clone()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub lambda1_axis: Vec<f64>,
    pub lambda2_axis: Vec<f64>,
    /// Summed mean cross-entropy over both tasks, indexed `[i1][i2]`.
    pub loss: Vec<Vec<f64>>,
    pub mode: Mode,
}

/// Joint loss along the plane `p0 + λ1 (p1 − p0) + λ2 (p2 − p0)` with
/// `p0 = model.init()`. Computed in the affine form
/// `(1 − λ1 − λ2) p0 + λ1 p1 + λ2 p2` so the corners reproduce the endpoint
/// models exactly.
pub fn loss_landscape_grid(
    model: &Model,
    p1: &ParamTree,
    p2: &ParamTree,
    axis1: &[f64],
    axis2: &[f64],
    eval_sets: (&Dataset, &Dataset),
) -> Result<LandscapeGrid> {
    let p0 = model.init();
    p0.ensure_congruent(p1, "loss landscape")?;
    p0.ensure_congruent(p2, "loss landscape")?;
    let (d1, d2) = eval_sets;
    if d1.is_empty() || d2.is_empty() || axis1.is_empty() || axis2.is_empty() {
        return Err(contract("loss landscape needs non-empty axes and evaluation sets"));
    }
    let (f0, f1, f2) = (p0.flatten(), p1.flatten(), p2.flatten());
    let layout = p0.layout();
    let loss = axis1
        .par_iter()
        .map(|&l1| {
            axis2
                .iter()
                .map(|&l2| {
                    let c0 = 1.0 - l1 - l2;
                    let p: Vec<f64> = (0..f0.len()).map(|i| c0 * f0[i] + l1 * f1[i] + l2 * f2[i]).collect();
                    let t = ParamTree::from_flat(&layout, &p)?;
                    joint_loss(model, &t, d1, d2)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid { lambda1_axis: axis1.to_vec(), lambda2_axis: axis2.to_vec(), loss, mode: model.mode() })
}

/// Mean cross-entropy on `d1` plus mean cross-entropy on `d2`.
pub fn joint_loss(model: &Model, p: &ParamTree, d1: &Dataset, d2: &Dataset) -> Result<f64> {
    Ok(cross_entropy_loss(&model.logits(p, &d1.x)?, &d1.y)? + cross_entropy_loss(&model.logits(p, &d2.x)?, &d2.y)?)
}

pub fn normalized_score(absolute: f64, single_task: f64) -> Result<f64> {
    if !(single_task > 0.0) {
        return Err(contract(format!("single-task score {single_task} is not positive")));
    }
    Ok(absolute / single_task)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtkCheck {
    /// `−η E_j[K(x, x_j) ∇_f L(x_j)]`, row-major over the batch.
    pub predicted: Vec<f64>,
    /// Tangent-model outputs after one full-batch SGD step minus before.
    pub observed: Vec<f64>,
    pub relative_error: f64,
}

/// Compare the observed one-step change of a tangent model with the kernel
/// prediction, at the expansion point and on the batch `data`.
pub fn ntk_one_step_check(
    model: &Model,
    data: &Dataset,
    eta: f64,
    optimizer: &Optimizer,
    max_samples: usize,
) -> Result<NtkCheck> {
    if !model.mode().is_linearized() {
        return Err(contract(format!("the kernel identity needs a linearized mode, got {}", model.mode())));
    }
    if !matches!(optimizer, Optimizer::Sgd) {
        return Err(contract("the kernel identity holds for plain SGD only"));
    }
    if data.is_empty() {
        return Err(contract("empty batch"));
    }
    if data.len() > max_samples {
        return Err(Error::Resource(format!(
            "{} samples exceed the explicit-Jacobian cap of {max_samples}",
            data.len()
        )));
    }
    let (n, c) = (data.len(), model.spec().num_classes);
    let p0 = model.init_flat();

    let (_, g) = value_and_grad(&LossFn { model, data }, p0)?;
    let p1: Vec<f64> = p0.iter().zip(&g).map(|(p, d)| p - eta * d).collect();
    let before = model.logits_flat(p0, &data.x);
    let after = model.logits_flat(&p1, &data.x);
    let observed: Vec<f64> = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();

    let jac: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = Tensor::matrix(1, data.x.cols(), data.x.row(i).to_vec())?;
            autodiff::jacobian(&LogitsFn { net: model.network(), x: &xi }, p0)
        })
        .collect::<Result<_>>()?;
    // ∇_f of each sample's cross-entropy: softmax minus one-hot.
    let dl: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let row = before.row(j);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            (0..c).map(|k| e[k] / s - if k == data.y[j] { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut predicted = vec![0.0; n * c];
    for i in 0..n {
        for a in 0..c {
            let mut acc = 0.0;
            for j in 0..n {
                for b in 0..c {
                    acc += dot(&jac[i][a], &jac[j][b]) * dl[j][b];
                }
            }
            predicted[i * c + a] = -eta * acc / n as f64;
        }
    }
    let diff = predicted.iter().zip(&observed).map(|(p, o)| (p - o).powi(2)).sum::<f64>().sqrt();
    let scale = observed.iter().map(|o| o * o).sum::<f64>().sqrt();
    let relative_error = if diff == 0.0 { 0.0 } else { diff / scale };
    Ok(NtkCheck { predicted, observed, relative_error })
}

/// Score of a merged model on one of its tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub absolute: f64,
    pub single_task: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub subset: Vec<String>,
    pub scores: Vec<TaskScore>,
}

impl SubsetResult {
    pub fn average_normalized(&self) -> f64 {
        self.scores.iter().map(|s| s.normalized).sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: Algorithm,
    pub mode: Mode,
    /// Subset size, or `None` for all subsets together.
    pub subset_size: Option<usize>,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub rows: Vec<ReportRow>,
}

impl FusionReport {
    pub fn overall(&self, algorithm: Algorithm, mode: Mode) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.mode == mode && r.subset_size.is_none())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± population std of subset-average normalized scores per
/// (algorithm, mode), overall and per subset size.
pub fn aggregate_report(results: &[SubsetResult]) -> Result<FusionReport> {
    if results.is_empty() {
        return Err(contract("no subset results to aggregate"));
    }
    let mut groups: BTreeMap<(Algorithm, Mode, Option<usize>), Vec<f64>> = BTreeMap::new();
    for r in results {
        let s = r.average_normalized();
        groups.entry((r.algorithm, r.mode, None)).or_default().push(s);
        groups.entry((r.algorithm, r.mode, Some(r.subset.len()))).or_default().push(s);
    }
    let rows = groups
        .into_iter()
        .map(|((algorithm, mode, subset_size), v)| {
            let (mean, std) = mean_std(&v);
            ReportRow { algorithm, mode, subset_size, count: v.len(), mean, std }
        })
        .collect();
    Ok(FusionReport { rows })
}

/// One row per (subset, task).
pub fn write_subset_results<W: Write>(
    results: &[SubsetResult],
    meta: &BTreeMap<String, String>,
    mut out: W,
) -> Result<()> {
    writeln!(out, "{}", metadata_line("tanmerge-fusion v1", meta))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algorithm", "mode", "subset", "task", "absolute", "single_task", "normalized"])
        .map_err(csv_error)?;
    for r in results {
        let subset = r.subset.join(";");
        for s in &r.scores {
            w.write_record([
                r.algorithm.name(),
                r.mode.name(),
                &subset,
                &s.task,
                &fmt17(s.absolute),
                &fmt17(s.single_task),
                &fmt17(s.normalized),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_subset_results<R: BufRead>(mut input: R) -> Result<(Vec<SubsetResult>, BTreeMap<String, String>)> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let meta = parse_metadata_line(first.trim_end(), "tanmerge-fusion v1")?;
    let mut results: Vec<SubsetResult> = Vec::new();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
    for rec in csv::Reader::from_reader(input).records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != 7 {
            return Err(Error::Format("fusion results need 7 columns".into()));
        }
        let algorithm: Algorithm = rec[0].parse().map_err(|e: Error| Error::Format(e.to_string()))?;
        let mode: Mode = rec[1].parse().map_err(|e: Error| Error::Format(e.to_string()))?;
        let subset: Vec<String> = rec[2].split(';').map(str::to_string).collect();
        let score = TaskScore {
            task: rec[3].to_string(),
            absolute: num(&rec[4])?,
            single_task: num(&rec[5])?,
            normalized: num(&rec[6])?,
        };
        match results.last_mut() {
            Some(r) if r.algorithm == algorithm && r.mode == mode && r.subset == subset => r.scores.push(score),
            _ => results.push(SubsetResult { algorithm, mode, subset, scores: vec![score] }),
        }
    }
    Ok((results, meta))
}

pub fn write_report_csv<W: Write>(report: &FusionReport, meta: &BTreeMap<String, String>, mut out: W) -> Result<()> {
    writeln!(out, "{}", metadata_line("tanmerge-report v1", meta))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algorithm", "mode", "subset_size", "count", "mean", "std"]).map_err(csv_error)?;
    for r in &report.rows {
        let size = r.subset_size.map_or("all".to_string(), |s| s.to_string());
        w.write_record([r.algorithm.name(), r.mode.name(), &size, &r.count.to_string(), &fmt17(r.mean), &fmt17(r.std)])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table of the overall rows plus one column per subset size.
pub fn render_report(report: &FusionReport) -> String {
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = report.rows.iter().filter_map(|r| r.subset_size).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut out = format!("{:<16} {:<12} {:>14}", "algorithm", "mode", "all");
    for s in &sizes {
        out.push_str(&format!(" {:>14}", format!("size {s}")));
    }
    out.push('\n');
    for r in report.rows.iter().filter(|r| r.subset_size.is_none()) {
        out.push_str(&format!("{:<16} {:<12} {:>14}", r.algorithm.name(), r.mode.name(), cell(r)));
        for s in &sizes {
            let c = report
                .rows
                .iter()
                .find(|x| x.algorithm == r.algorithm && x.mode == r.mode && x.subset_size == Some(*s))
                .map_or("-".to_string(), cell);
            out.push_str(&format!(" {c:>14}"));
        }
        out.push('\n');
    }
    out
}

fn cell(r: &ReportRow) -> String {
    format!("{:.3}±{:.3}", r.mean, r.std)
}

/// Square grid CSV: first row is `λ1\λ2` then the λ2 axis; each later row
/// starts with its λ1 value.
pub fn write_grid_csv<W: Write>(
    tag: &str,
    axis1: &[f64],
    axis2: &[f64],
    values: &[Vec<f64>],
    meta: &BTreeMap<String, String>,
    mut out: W,
) -> Result<()> {
    writeln!(out, "{}", metadata_line(tag, meta))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lambda1\\lambda2".to_string()];
    header.extend(axis2.iter().map(|&v| fmt17(v)));
    w.write_record(&header).map_err(csv_error)?;
    for (l1, row) in axis1.iter().zip(values) {
        let mut rec = vec![fmt17(*l1)];
        rec.extend(row.iter().map(|&v| fmt17(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// NTK check as `index,predicted,observed` rows.
pub fn write_ntk_csv<W: Write>(check: &NtkCheck, meta: &BTreeMap<String, String>, mut out: W) -> Result<()> {
    let mut meta = meta.clone();
    meta.insert("relative_error".into(), fmt17(check.relative_error));
    writeln!(out, "{}", metadata_line("tanmerge-ntk v1", &meta))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "predicted", "observed"]).map_err(csv_error)?;
    for (i, (p, o)) in check.predicted.iter().zip(&check.observed).enumerate() {
        w.write_record([i.to_string(), fmt17(*p), fmt17(*o)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
