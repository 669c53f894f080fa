//! Run configuration and the in-memory experiment pipeline shared by the
//! command-line tool and the test suites.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{aggregate_report, normalized_score, AnalysisConfig, FusionReport, SubsetResult, TaskScore};
use crate::error::{contract, Error, Result};
use crate::finetune::{evaluate, finetune_with_log, Checkpoint, MetricRow, TrainConfig};
use crate::fusion::{enumerate_subsets, sweep_and_select, Algorithm, FusionConfig, MergedModel};
use crate::model::{Mode, Model, ModelSpec};
use crate::seeds;
use crate::tasks::{make_task_suite, SuiteConfig, TaskSuite};

/// Training configuration for each mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainByMode {
    pub full_ft: TrainConfig,
    pub full_linear: TrainConfig,
    pub lora: TrainConfig,
    pub llora: TrainConfig,
}

impl Default for TrainByMode {
    fn default() -> Self {
        let t = TrainConfig::default();
        // The tangent adapter's Jacobian is proportional to the small A init,
        // so it needs a larger step to move the same distance in function space.
        let llora = TrainConfig { learning_rate: 0.1, ..t.clone() };
        TrainByMode { full_ft: t.clone(), full_linear: t.clone(), lora: t, llora }
    }
}

impl TrainByMode {
    pub fn get(&self, mode: Mode) -> &TrainConfig {
        match mode {
            Mode::FullFt => &self.full_ft,
            Mode::FullLinear => &self.full_linear,
            Mode::Lora => &self.lora,
            Mode::Llora => &self.llora,
        }
    }
}

/// Everything a run depends on. `out_dir` is where artifacts go and is left
/// out of the serialized (resolved) form and of the digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub suite: SuiteConfig,
    /// Architecture; the `mode` field is overridden per run.
    pub model: ModelSpec,
    pub train: TrainByMode,
    pub fusion: FusionConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            suite: SuiteConfig::default(),
            model: ModelSpec::default(),
            train: TrainByMode::default(),
            fusion: FusionConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.input_dim != self.suite.input_dim || self.model.num_classes != self.suite.num_classes {
            return Err(Error::Spec("model and suite disagree on input_dim or num_classes".into()));
        }
        for mode in Mode::ALL {
            self.model.with_mode(mode).validate()?;
            self.train.get(mode).validate()?;
        }
        self.fusion.validate()?;
        self.analysis.validate()?;
        if let Some(&(a, b)) = self.analysis.task_pairs.iter().find(|(a, b)| a.max(b) >= &self.suite.n_tasks) {
            return Err(Error::Spec(format!("task pair ({a}, {b}) is out of range")));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_json`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan { master: self.seed }
    }

    pub fn spec(&self, mode: Mode) -> ModelSpec {
        self.model.with_mode(mode)
    }
}

/// Sub-seeds fanned out from the master seed with [`seeds::derive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
}

impl SeedPlan {
    pub fn suite(&self) -> u64 {
        seeds::derive(self.master, "suite", 0)
    }

    /// Shared by all modes so they start from the same backbone.
    pub fn model(&self) -> u64 {
        seeds::derive(self.master, "model", 0)
    }

    /// Mini-batch order for task `task`; the same across modes.
    pub fn shuffle(&self, task: usize) -> u64 {
        seeds::derive(self.master, "shuffle", task as u64)
    }

    pub fn fusion(&self, subset_index: usize) -> u64 {
        seeds::derive(self.master, "fusion", subset_index as u64)
    }

    /// `(stage, seed)` pairs for documentation in the resolved config.
    pub fn describe(&self, n_tasks: usize) -> Vec<(String, u64)> {
        let mut v = vec![("suite".to_string(), self.suite()), ("model".to_string(), self.model())];
        v.extend((0..n_tasks).map(|t| (format!("shuffle.task{t}"), self.shuffle(t))));
        v
    }
}

pub fn generate_suite(cfg: &RunConfig) -> Result<TaskSuite> {
    make_task_suite(&cfg.suite, cfg.seeds().suite())
}

pub fn build_model(cfg: &RunConfig, mode: Mode) -> Result<Model> {
    Model::build(&cfg.spec(mode), cfg.seeds().model())
}

/// Fine-tune one task; returns the checkpoint and its metrics log.
pub fn finetune_task(
    cfg: &RunConfig,
    model: &Model,
    suite: &TaskSuite,
    task: usize,
) -> Result<(Checkpoint, Vec<MetricRow>)> {
    let t = suite.tasks.get(task).ok_or_else(|| contract(format!("no task with index {task}")))?;
    let mut train = cfg.train.get(model.mode()).clone();
    train.shuffle_seed = cfg.seeds().shuffle(task);
    finetune_with_log(model, cfg.seeds().model(), model.init(), t, &train)
}

/// Fine-tune every task of the suite under `model`'s mode, in parallel.
pub fn finetune_all(cfg: &RunConfig, model: &Model, suite: &TaskSuite) -> Result<Vec<(Checkpoint, Vec<MetricRow>)>> {
    (0..suite.tasks.len()).into_par_iter().map(|t| finetune_task(cfg, model, suite, t)).collect()
}

/// Test accuracy of each single-task checkpoint.
pub fn single_task_scores(model: &Model, ckpts: &[Checkpoint], suite: &TaskSuite) -> Result<Vec<f64>> {
    ckpts
        .iter()
        .zip(&suite.tasks)
        .map(|(c, t)| evaluate(model, &c.trained, &t.test))
        .collect()
}

/// Merge the checkpoints in `subset` and score the result on each task's
/// test split against the single-task scores.
pub fn fuse_subset(
    cfg: &RunConfig,
    model: &Model,
    ckpts: &[Checkpoint],
    suite: &TaskSuite,
    single: &[f64],
    algorithm: Algorithm,
    subset: &[usize],
    subset_index: usize,
) -> Result<(MergedModel, SubsetResult)> {
    let picked: Vec<&Checkpoint> = subset.iter().map(|&i| &ckpts[i]).collect();
    let vals: Vec<_> = subset.iter().map(|&i| &suite.tasks[i].val).collect();
    let merged = sweep_and_select(model, algorithm, &picked, &vals, &cfg.fusion, cfg.seeds().fusion(subset_index))?;
    let scores = subset
        .iter()
        .map(|&i| {
            let t = &suite.tasks[i];
            let absolute = evaluate(model, &merged.trainable, &t.test)?;
            Ok(TaskScore {
                task: t.id.clone(),
                absolute,
                single_task: single[i],
                normalized: normalized_score(absolute, single[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = SubsetResult {
        algorithm,
        mode: model.mode(),
        subset: subset.iter().map(|&i| suite.tasks[i].id.clone()).collect(),
        scores,
    };
    Ok((merged, result))
}

/// All subsets of size ≥ 2, in enumeration order.
pub fn fuse_all_subsets(
    cfg: &RunConfig,
    model: &Model,
    ckpts: &[Checkpoint],
    suite: &TaskSuite,
    algorithm: Algorithm,
) -> Result<Vec<(MergedModel, SubsetResult)>> {
    let single = single_task_scores(model, ckpts, suite)?;
    enumerate_subsets(ckpts.len())
        .par_iter()
        .enumerate()
        .map(|(i, s)| fuse_subset(cfg, model, ckpts, suite, &single, algorithm, s, i))
        .collect()
}

/// Everything a full in-memory run produces.
pub struct PipelineOutput {
    pub suite: TaskSuite,
    /// Per mode, in [`Mode::ALL`] order: the model and its checkpoints.
    pub runs: Vec<(Model, Vec<Checkpoint>)>,
    pub results: Vec<SubsetResult>,
    pub report: FusionReport,
}

impl PipelineOutput {
    pub fn run(&self, mode: Mode) -> &(Model, Vec<Checkpoint>) {
        &self.runs[Mode::ALL.iter().position(|&m| m == mode).unwrap()]
    }
}

/// Generate, fine-tune under `modes`, fuse every subset with `algorithms`
/// and aggregate.
pub fn run_pipeline(cfg: &RunConfig, modes: &[Mode], algorithms: &[Algorithm]) -> Result<PipelineOutput> {
    cfg.validate()?;
    let suite = generate_suite(cfg)?;
    let runs = Mode::ALL
        .par_iter()
        .map(|&mode| {
            let model = build_model(cfg, mode)?;
            let ckpts = if modes.contains(&mode) {
                finetune_all(cfg, &model, &suite)?.into_iter().map(|(c, _)| c).collect()
            } else {
                Vec::new()
            };
            Ok((model, ckpts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for (model, ckpts) in runs.iter().filter(|(_, c)| !c.is_empty()) {
        for &alg in algorithms {
            results.extend(fuse_all_subsets(cfg, model, ckpts, &suite, alg)?.into_iter().map(|(_, r)| r));
        }
    }
    let report = aggregate_report(&results)?;
    Ok(PipelineOutput { suite, runs, results, report })
}
