//! Task-specific fine-tuning under any of the four paradigms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamFunction};
use crate::error::{contract, Error, Result};
use crate::model::{argmax_rows, Mode, Model, ModelSpec};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::tasks::{Dataset, Task};
use crate::tensor::Tensor;

/// Mean cross-entropy of `logits[batch × C]` against integer labels, at any
/// scalar type. Labels are assumed valid.
pub fn cross_entropy_generic<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> S {
    let mut total = S::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        // Shift by the (constant) row max for stability.
        let m = row.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
        let shift = S::constant(m);
        let exps: Vec<S> = row.iter().map(|&z| (z - shift).exp()).collect();
        total = total + (S::sum(&exps).ln() + shift - row[y]);
    }
    total / S::constant(labels.len() as f64)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if labels.is_empty() {
        return Err(contract("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

pub fn cross_entropy_loss(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(cross_entropy_generic(logits, labels))
}

/// Batch loss as a function of the flat trainable vector, through the model's
/// mode (nonlinear or tangent).
pub struct LossFn<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
}

impl ParamFunction for LossFn<'_> {
    fn num_params(&self) -> usize {
        self.model.init_flat().len()
    }

    fn eval<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        let logits = self.model.logits_flat(p, &self.data.x);
        vec![cross_entropy_generic(&logits, &self.data.y)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Seeds the mini-batch order only; initialization has its own seed.
    pub shuffle_seed: u64,
    /// Validation accuracy is logged every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: Optimizer::adam(),
            shuffle_seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(contract("steps and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    /// Present on evaluation steps only.
    pub val_accuracy: Option<f64>,
}

/// A fine-tuned model: initial and trained trainable trees plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub task_id: String,
    /// Seed the backbone (and adapters) were built from.
    pub model_seed: u64,
    pub theta0_digest: String,
    pub initial: ParamTree,
    pub trained: ParamTree,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        self.spec.mode
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// One optimizer update of `p` in place.
fn apply_update(opt: &Optimizer, state: &mut Option<Adam>, lr: f64, p: &mut [f64], g: &[f64]) {
    match *opt {
        Optimizer::Sgd => {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let s = state.get_or_insert_with(|| Adam { m: vec![0.0; p.len()], v: vec![0.0; p.len()], t: 0 });
            s.t += 1;
            let c1 = 1.0 - beta1.powi(s.t);
            let c2 = 1.0 - beta2.powi(s.t);
            for i in 0..p.len() {
                s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g[i];
                s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = s.m[i] / c1;
                let vh = s.v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss and gradient of `model` on `data` at flat parameters `p`.
pub fn loss_and_grad(model: &Model, data: &Dataset, p: &[f64]) -> Result<(f64, Vec<f64>)> {
    autodiff::value_and_grad(&LossFn { model, data }, p)
}

/// Fine-tune `init_trainable` on `task` and return a checkpoint plus the
/// per-step metrics log.
pub fn finetune_with_log(
    model: &Model,
    model_seed: u64,
    init_trainable: &ParamTree,
    task: &Task,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<MetricRow>)> {
    config.validate()?;
    model.check_trainable(init_trainable)?;
    if task.train.is_empty() || task.val.is_empty() {
        return Err(contract(format!("task {} has an empty split", task.id)));
    }
    let n = task.train.len();
    let bs = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let layout = init_trainable.layout();
    let mut p = init_trainable.flatten();
    let mut opt_state = None;
    let mut log = Vec::with_capacity(config.steps);
    let mut last_loss = f64::NAN;
    for step in 0..config.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = task.train.select(&order[cursor..cursor + bs]);
        cursor += bs;
        let (loss, g) = loss_and_grad(model, &batch, &p)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        apply_update(&config.optimizer, &mut opt_state, config.learning_rate, &mut p, &g);
        last_loss = loss;
        let eval_now = config.eval_every > 0 && (step + 1) % config.eval_every == 0 || step + 1 == config.steps;
        let val_accuracy = if eval_now {
            let trained = ParamTree::from_flat(&layout, &p)?;
            Some(evaluate(model, &trained, &task.val)?)
        } else {
            None
        };
        log.push(MetricRow { step, train_loss: loss, val_accuracy });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: config.steps, loss: last_loss });
    }
    let trained = ParamTree::from_flat(&layout, &p)?;
    let val_accuracy = log.last().and_then(|r| r.val_accuracy).unwrap_or(f64::NAN);
    let ckpt = Checkpoint {
        spec: model.spec().clone(),
        task_id: task.id.clone(),
        model_seed,
        theta0_digest: model.theta0().digest(),
        initial: init_trainable.clone(),
        trained,
        train_loss: last_loss,
        val_accuracy,
    };
    Ok((ckpt, log))
}

pub fn finetune(
    model: &Model,
    model_seed: u64,
    init_trainable: &ParamTree,
    task: &Task,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    Ok(finetune_with_log(model, model_seed, init_trainable, task, config)?.0)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &Model, trainable: &ParamTree, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("evaluation on an empty dataset"));
    }
    let pred = argmax_rows(&model.logits(trainable, &data.x)?);
    let correct = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}
