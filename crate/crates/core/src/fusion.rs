//! Model fusion: simple averaging, task arithmetic, TIES merging and LoraHub,
//! with hyperparameter selection on validation data.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::finetune::{cross_entropy_loss, evaluate, Checkpoint};
use crate::model::{Mode, Model};
use crate::params::ParamTree;
use crate::seeds;
use crate::task_vector::{check_family, compute_task_vector, linear_combine, order_free_sum, TaskVector};
use crate::tasks::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SimpleAverage,
    TaskArithmetic,
    TiesMerging,
    Lorahub,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] =
        [Algorithm::SimpleAverage, Algorithm::TaskArithmetic, Algorithm::TiesMerging, Algorithm::Lorahub];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SimpleAverage => "simple_average",
            Algorithm::TaskArithmetic => "task_arithmetic",
            Algorithm::TiesMerging => "ties_merging",
            Algorithm::Lorahub => "lorahub",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown fusion algorithm {s:?}")))
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Scaling factors tried by task arithmetic.
    pub lambda_grid: Vec<f64>,
    /// Fractions of coordinates kept by TIES trimming.
    pub ties_k_grid: Vec<f64>,
    /// Scaling factors tried by TIES merging.
    pub ties_lambda_grid: Vec<f64>,
    pub lorahub_alpha: f64,
    /// Objective evaluations allowed after the initial simplex.
    pub lorahub_max_steps: usize,
    /// Validation samples per task in the LoraHub objective.
    pub lorahub_fewshot: usize,
    /// Normalize LoraHub weights to sum to one before combining.
    pub lorahub_sum_to_one: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_grid: grid(20),
            ties_k_grid: vec![0.25, 0.5, 0.75, 1.0],
            ties_lambda_grid: vec![0.25, 0.5, 0.75, 1.0],
            lorahub_alpha: 0.05,
            lorahub_max_steps: 40,
            lorahub_fewshot: 32,
            lorahub_sum_to_one: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |g: &[f64]| !g.is_empty() && g.iter().all(|v| v.is_finite());
        if !finite(&self.lambda_grid) || !finite(&self.ties_lambda_grid) {
            return Err(Error::Spec("lambda grids must be non-empty and finite".into()));
        }
        if self.ties_k_grid.is_empty() || self.ties_k_grid.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::Spec("ties k values must lie in (0, 1]".into()));
        }
        if !(self.lorahub_alpha >= 0.0) || self.lorahub_fewshot == 0 {
            return Err(Error::Spec("lorahub needs alpha >= 0 and a non-empty few-shot set".into()));
        }
        Ok(())
    }
}

/// How a merged model was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub task_ids: Vec<String>,
    pub lambda: Option<f64>,
    pub k: Option<f64>,
    pub weights: Option<Vec<f64>>,
    /// Mean validation accuracy over the merged tasks.
    pub validation_accuracy: Option<f64>,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedModel {
    pub mode: Mode,
    pub trainable: ParamTree,
    pub provenance: Provenance,
}

fn ids(vectors: &[&TaskVector]) -> Vec<String> {
    vectors.iter().map(|v| v.task_id.clone()).collect()
}

fn check_base(initial: &ParamTree, vectors: &[&TaskVector]) -> Result<()> {
    check_family(vectors)?;
    initial.ensure_congruent(&vectors[0].delta, "fusion base")
}

/// Coordinatewise mean of the fine-tuned parameters.
pub fn simple_average(checkpoints: &[&Checkpoint]) -> Result<MergedModel> {
    if checkpoints.len() < 2 {
        return Err(contract("simple averaging needs at least two checkpoints"));
    }
    let vectors = checkpoints.iter().map(|c| compute_task_vector(c)).collect::<Result<Vec<_>>>()?;
    check_family(&vectors.iter().collect::<Vec<_>>())?;
    let flats: Vec<Vec<f64>> = checkpoints.iter().map(|c| c.trained.flatten()).collect();
    let n = flats.len() as f64;
    let mut buf = vec![0.0; flats.len()];
    let mean: Vec<f64> = (0..flats[0].len())
        .map(|j| {
            for (b, f) in buf.iter_mut().zip(&flats) {
                *b = f[j];
            }
            order_free_sum(&mut buf) / n
        })
        .collect();
    Ok(MergedModel {
        mode: checkpoints[0].mode(),
        trainable: ParamTree::from_flat(&checkpoints[0].trained.layout(), &mean)?,
        provenance: Provenance {
            algorithm: Algorithm::SimpleAverage,
            task_ids: checkpoints.iter().map(|c| c.task_id.clone()).collect(),
            lambda: None,
            k: None,
            weights: None,
            validation_accuracy: None,
            candidates: 1,
        },
    })
}

/// `initial + λ Σ ν_i`.
pub fn task_arithmetic(initial: &ParamTree, vectors: &[&TaskVector], lambda: f64) -> Result<MergedModel> {
    check_base(initial, vectors)?;
    let sum = linear_combine(vectors, &vec![1.0; vectors.len()])?;
    Ok(MergedModel {
        mode: vectors[0].mode,
        trainable: initial.add(&sum.delta.scale(lambda))?,
        provenance: Provenance {
            algorithm: Algorithm::TaskArithmetic,
            task_ids: ids(vectors),
            lambda: Some(lambda),
            k: None,
            weights: None,
            validation_accuracy: None,
            candidates: 1,
        },
    })
}

/// Number of coordinates TIES keeps out of `d` at fraction `k`.
pub fn trim_count(k: f64, d: usize) -> usize {
    // The small offset keeps exact products such as 0.25 · 8 from rounding up.
    ((k * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Trim, elect and disjoint-merge, returning the merged direction (before
/// scaling by λ).
pub fn ties_direction(vectors: &[&TaskVector], k: f64) -> Result<Vec<f64>> {
    check_family(vectors)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(contract(format!("ties k must lie in (0, 1], got {k}")));
    }
    let flats: Vec<Vec<f64>> = vectors.iter().map(|v| v.delta.flatten()).collect();
    let d = flats[0].len();
    let keep = trim_count(k, d);

    // Global top-`keep` magnitudes per vector; equal magnitudes go to the lower index.
    let trimmed: Vec<Vec<f64>> = flats
        .iter()
        .map(|f| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| f[b].abs().total_cmp(&f[a].abs()).then(a.cmp(&b)));
            let mut t = vec![0.0; d];
            for &i in &idx[..keep] {
                t[i] = f[i];
            }
            t
        })
        .collect();

    let mut buf = Vec::with_capacity(trimmed.len());
    let merged = (0..d)
        .map(|j| {
            buf.clear();
            buf.extend(trimmed.iter().map(|t| t[j]));
            let total = order_free_sum(&mut buf);
            if total == 0.0 {
                return 0.0;
            }
            buf.retain(|&v| v != 0.0 && (v > 0.0) == (total > 0.0));
            let n = buf.len() as f64;
            order_free_sum(&mut buf) / n
        })
        .collect();
    Ok(merged)
}

/// `initial + λ · ties_direction(vectors, k)`.
pub fn ties_merge(initial: &ParamTree, vectors: &[&TaskVector], k: f64, lambda: f64) -> Result<MergedModel> {
    check_base(initial, vectors)?;
    let dir = ties_direction(vectors, k)?;
    let delta = ParamTree::from_flat(&initial.layout(), &dir)?;
    Ok(MergedModel {
        mode: vectors[0].mode,
        trainable: initial.add(&delta.scale(lambda))?,
        provenance: Provenance {
            algorithm: Algorithm::TiesMerging,
            task_ids: ids(vectors),
            lambda: Some(lambda),
            k: Some(k),
            weights: None,
            validation_accuracy: None,
            candidates: 1,
        },
    })
}

/// Result of a derivative-free minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Nelder-Mead with a seeded initial simplex around `x0`. Performs the
/// `n + 1` simplex evaluations plus at most `max_steps` further ones.
/// Non-finite objective values are treated as `+∞`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], max_steps: usize, seed: u64) -> Minimum {
    let n = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        let step: f64 = rng.random_range(0.25..0.5);
        x[i] += if rng.random_bool(0.5) { step } else { -step };
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let budget = n + 1 + max_steps;
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };

    while evals < budget && n > 0 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let (worst, fw) = simplex[n].clone();
        let reflected = lerp(&centroid, &worst, -1.0);
        let fr = eval(&reflected, &mut evals);
        if fr < simplex[0].1 {
            if evals < budget {
                let expanded = lerp(&centroid, &worst, -2.0);
                let fe = eval(&expanded, &mut evals);
                simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            } else {
                simplex[n] = (reflected, fr);
            }
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else if evals < budget {
            let (target, ft) = if fr < fw { (&reflected, fr) } else { (&worst, fw) };
            let contracted = lerp(&centroid, target, 0.5);
            let fc = eval(&contracted, &mut evals);
            if fc < ft {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    if evals >= budget {
                        break;
                    }
                    let x = lerp(&best, &vertex.0, 0.5);
                    let v = eval(&x, &mut evals);
                    *vertex = (x, v);
                }
            }
        }
    }
    let (x, value) = simplex.into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    Minimum { x, value, evaluations: evals }
}

/// Seeded few-shot sample of `per_task` rows from each validation set.
pub fn fewshot_set(val_sets: &[&Dataset], per_task: usize, seed: u64) -> Result<Dataset> {
    let parts: Vec<Dataset> = val_sets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "lorahub-fewshot", i as u64));
            let take = per_task.min(d.len());
            let mut idx = rand::seq::index::sample(&mut rng, d.len(), take).into_vec();
            idx.sort_unstable();
            d.select(&idx)
        })
        .collect();
    Dataset::concat(&parts.iter().collect::<Vec<_>>())
}

/// LoraHub weights: minimize few-shot cross-entropy of `initial + Σ w_i ν_i`
/// plus `alpha · Σ |w_i|`, starting from uniform weights.
pub fn lorahub_optimize(
    model: &Model,
    vectors: &[&TaskVector],
    fewshot: &Dataset,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<(Vec<f64>, Minimum)> {
    check_base(model.init(), vectors)?;
    let n = vectors.len();
    let objective = |w: &[f64]| -> f64 {
        let eff = effective_weights(w, cfg.lorahub_sum_to_one);
        let Some(eff) = eff else { return f64::INFINITY };
        let Ok(combo) = linear_combine(vectors, &eff) else { return f64::INFINITY };
        let Ok(p) = model.init().add(&combo.delta) else { return f64::INFINITY };
        let Ok(logits) = model.logits(&p, &fewshot.x) else { return f64::INFINITY };
        let ce = cross_entropy_loss(&logits, &fewshot.y).unwrap_or(f64::INFINITY);
        ce + cfg.lorahub_alpha * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let min = nelder_mead(objective, &vec![1.0 / n as f64; n], cfg.lorahub_max_steps, seed);
    let w = effective_weights(&min.x, cfg.lorahub_sum_to_one).unwrap_or_else(|| min.x.clone());
    Ok((w, min))
}

fn effective_weights(w: &[f64], sum_to_one: bool) -> Option<Vec<f64>> {
    if !sum_to_one {
        return Some(w.to_vec());
    }
    let s: f64 = w.iter().sum();
    (s.abs() > 1e-12).then(|| w.iter().map(|v| v / s).collect())
}

/// All subsets of `0..n` with at least two elements, by size and then
/// lexicographically.
pub fn enumerate_subsets(n: usize) -> Vec<Vec<usize>> {
    (2..=n).flat_map(|size| (0..n).combinations(size)).collect()
}

/// Mean accuracy over the given validation sets.
pub fn mean_accuracy(model: &Model, trainable: &ParamTree, sets: &[&Dataset]) -> Result<f64> {
    let accs = sets.iter().map(|d| evaluate(model, trainable, d)).collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Index of the first maximum.
fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn sorted(g: &[f64]) -> Vec<f64> {
    let mut g = g.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Merge `checkpoints` with `algorithm`, choosing hyperparameters by mean
/// validation accuracy over `val_sets` (one per checkpoint, same order).
/// Ties go to the smaller λ, then the smaller k.
pub fn sweep_and_select(
    model: &Model,
    algorithm: Algorithm,
    checkpoints: &[&Checkpoint],
    val_sets: &[&Dataset],
    cfg: &FusionConfig,
    seed: u64,
) -> Result<MergedModel> {
    cfg.validate()?;
    if checkpoints.len() < 2 {
        return Err(contract("fusion needs at least two checkpoints"));
    }
    if val_sets.len() != checkpoints.len() {
        return Err(contract("one validation set per checkpoint is required"));
    }
    let theta_digest = model.theta0().digest();
    let init_digest = model.init().digest();
    for c in checkpoints {
        if c.mode() != model.mode() {
            return Err(contract(format!("checkpoint {} is {} but the model is {}", c.task_id, c.mode(), model.mode())));
        }
        if c.theta0_digest != theta_digest || c.initial.digest() != init_digest {
            return Err(contract(format!("checkpoint {} was not trained from this model", c.task_id)));
        }
    }
    let vectors = checkpoints.iter().map(|c| compute_task_vector(c)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TaskVector> = vectors.iter().collect();
    let init = model.init();

    let mut merged = match algorithm {
        Algorithm::SimpleAverage => simple_average(checkpoints)?,
        Algorithm::TaskArithmetic => {
            let lambdas = sorted(&cfg.lambda_grid);
            let sum = linear_combine(&refs, &vec![1.0; refs.len()])?;
            let scores = lambdas
                .par_iter()
                .map(|&l| mean_accuracy(model, &init.add(&sum.delta.scale(l))?, val_sets))
                .collect::<Result<Vec<_>>>()?;
            let mut m = task_arithmetic(init, &refs, lambdas[first_argmax(&scores)])?;
            m.provenance.candidates = lambdas.len();
            m
        }
        Algorithm::TiesMerging => {
            let ks = sorted(&cfg.ties_k_grid);
            let lambdas = sorted(&cfg.ties_lambda_grid);
            let dirs = ks
                .par_iter()
                .map(|&k| ParamTree::from_flat(&init.layout(), &ties_direction(&refs, k)?))
                .collect::<Result<Vec<_>>>()?;
            let combos: Vec<(usize, usize)> = (0..lambdas.len()).cartesian_product(0..ks.len()).collect();
            let scores = combos
                .par_iter()
                .map(|&(li, ki)| mean_accuracy(model, &init.add(&dirs[ki].scale(lambdas[li]))?, val_sets))
                .collect::<Result<Vec<_>>>()?;
            let (li, ki) = combos[first_argmax(&scores)];
            let mut m = ties_merge(init, &refs, ks[ki], lambdas[li])?;
            m.provenance.candidates = combos.len();
            m
        }
        Algorithm::Lorahub => {
            let few = fewshot_set(val_sets, cfg.lorahub_fewshot, seed)?;
            let (w, min) = lorahub_optimize(model, &refs, &few, cfg, seeds::derive(seed, "lorahub-simplex", 0))?;
            let combo = linear_combine(&refs, &w)?;
            MergedModel {
                mode: model.mode(),
                trainable: init.add(&combo.delta)?,
                provenance: Provenance {
                    algorithm: Algorithm::Lorahub,
                    task_ids: ids(&refs),
                    lambda: None,
                    k: None,
                    weights: Some(w),
                    validation_accuracy: None,
                    candidates: min.evaluations,
                },
            }
        }
    };
    merged.provenance.validation_accuracy = Some(mean_accuracy(model, &merged.trainable, val_sets)?);
    Ok(merged)
}

/// Rebuild a merged model from its provenance record without searching:
/// the recorded hyperparameters are applied directly to `checkpoints`,
/// which must be given in `provenance.task_ids` order.
pub fn replay(checkpoints: &[&Checkpoint], provenance: &Provenance) -> Result<MergedModel> {
    let got: Vec<&str> = checkpoints.iter().map(|c| c.task_id.as_str()).collect();
    if got != provenance.task_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(contract(format!("replay expects tasks {:?}, got {got:?}", provenance.task_ids)));
    }
    let first = checkpoints.first().ok_or_else(|| contract("nothing to replay"))?;
    if checkpoints.iter().any(|c| c.initial.digest() != first.initial.digest()) {
        return Err(contract("checkpoints start from different initial parameters"));
    }
    let vectors = checkpoints.iter().map(|c| compute_task_vector(c)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TaskVector> = vectors.iter().collect();
    let init = &first.initial;
    let need = |v: Option<f64>, what: &str| v.ok_or_else(|| contract(format!("provenance lacks {what}")));
    let mut merged = match provenance.algorithm {
        Algorithm::SimpleAverage => simple_average(checkpoints)?,
        Algorithm::TaskArithmetic => task_arithmetic(init, &refs, need(provenance.lambda, "lambda")?)?,
        Algorithm::TiesMerging => {
            ties_merge(init, &refs, need(provenance.k, "k")?, need(provenance.lambda, "lambda")?)?
        }
        Algorithm::Lorahub => {
            let w = provenance.weights.as_ref().ok_or_else(|| contract("provenance lacks weights"))?;
            MergedModel {
                mode: first.mode(),
                trainable: init.add(&linear_combine(&refs, w)?.delta)?,
                provenance: provenance.clone(),
            }
        }
    };
    merged.provenance = provenance.clone();
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tv(id: &str, vals: &[f64]) -> TaskVector {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        TaskVector { delta: t, mode: Mode::Lora, task_id: id.into() }
    }

    #[test]
    fn default_grids() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.lambda_grid.len(), 21);
        assert_eq!(cfg.lambda_grid[1], 0.05);
        assert_eq!(cfg.lambda_grid[20], 1.0);
        assert_eq!(cfg.ties_k_grid.len() * cfg.ties_lambda_grid.len(), 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn ties_hand_example() {
        let a = tv("a", &[3.0, -1.0, 0.5, 2.0]);
        let b = tv("b", &[-2.0, -4.0, 0.1, 1.0]);
        // Keep two per vector: a -> {3, 2}, b -> {-2, -4}.
        // Sums: 1, -4, 0, 2. Means of agreeing entries: 3, -4, 0, 2.
        assert_eq!(ties_direction(&[&a, &b], 0.5).unwrap(), vec![3.0, -4.0, 0.0, 2.0]);
    }

    #[test]
    fn ties_sign_tie_gives_zero() {
        let a = tv("a", &[1.0, 2.0]);
        let b = tv("b", &[-1.0, 2.0]);
        assert_eq!(ties_direction(&[&a, &b], 1.0).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn trim_count_is_exact_on_round_products() {
        assert_eq!(trim_count(0.25, 8), 2);
        assert_eq!(trim_count(0.75, 4), 3);
        assert_eq!(trim_count(0.3, 10), 3);
        assert_eq!(trim_count(0.01, 10), 1);
        assert_eq!(trim_count(1.0, 7), 7);
    }

    #[test]
    fn subsets_are_ordered() {
        assert_eq!(enumerate_subsets(7).len(), 120);
        let s4 = enumerate_subsets(4);
        assert_eq!(s4.len(), 11);
        assert_eq!(s4[0], vec![0, 1]);
        assert_eq!(s4[5], vec![2, 3]);
        assert_eq!(s4[6], vec![0, 1, 2]);
        assert_eq!(s4[10], vec![0, 1, 2, 3]);
    }

    #[test]
    fn nelder_mead_minimizes_a_quadratic_within_budget() {
        let mut calls = 0;
        let m = nelder_mead(
            |x| {
                calls += 1;
                (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2)
            },
            &[0.0, 0.0],
            200,
            1,
        );
        assert!(m.value < 1e-6, "{m:?}");
        assert!(m.evaluations <= 203);
        assert_eq!(calls, m.evaluations);
    }

    #[test]
    fn nelder_mead_skips_nan() {
        let m = nelder_mead(|x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.3).powi(2) }, &[0.5], 30, 0);
        assert!(m.value.is_finite() && m.x[0] >= 0.0);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ties".parse::<Algorithm>().is_err());
    }
}
