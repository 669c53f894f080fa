//! Deterministic families of related synthetic classification tasks.
//!
//! Every task labels its inputs with the argmax of a random one-hidden-layer
//! tanh teacher, `V · tanh(W x + c)`. Teacher weights mix a component shared
//! by all tasks with a task-specific one,
//!
//! ```text
//! W_t = sqrt(overlap) · W_common + sqrt(1 − overlap) · W_own(t)
//! ```
//!
//! so `overlap = 1` gives identical label functions and `overlap = 0`
//! independent ones. Inputs are standard Gaussian draws offset by a
//! task-specific mean `μ_t` of norm ≈ `input_shift`, which gives each task its
//! own input region. The teacher reads inputs relative to that region,
//! `y = teacher(x − μ_t)`, so every region sees all classes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::io::{csv_error, fmt17, metadata_line, parse_metadata_line};
use crate::model::argmax_rows;
use crate::params::ParamTree;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor<f64>, y: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(contract(format!(
                "dataset inputs of shape {:?} with {} labels",
                x.shape(),
                y.len()
            )));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Tensor::matrix(idx.len(), d, data).expect("selected rows"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| contract("concatenating zero datasets"))?;
        let d = first.input_dim();
        let mut data = Vec::new();
        let mut y = Vec::new();
        for p in parts {
            if p.input_dim() != d {
                return Err(contract("concatenating datasets of different input width"));
            }
            data.extend_from_slice(p.x.data());
            y.extend_from_slice(&p.y);
        }
        Dataset::new(Tensor::matrix(y.len(), d, data)?, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Generator weights (`hidden.weight`, `hidden.bias`, `readout.weight`);
    /// absent for suites read back from disk.
    pub teacher: Option<ParamTree>,
    /// Mean of this task's input distribution.
    pub input_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub task_overlap: f64,
    pub input_shift: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_tasks: 4,
            input_dim: 16,
            num_classes: 3,
            train_size: 512,
            val_size: 256,
            test_size: 256,
            task_overlap: 0.3,
            input_shift: 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl TaskSuite {
    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }
}

const MAX_LABEL_RETRIES: u64 = 10;

pub fn task_id(i: usize) -> String {
    format!("task{i}")
}

fn teacher_hidden(input_dim: usize) -> usize {
    2 * input_dim
}

fn gaussian_tree(input_dim: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> ParamTree {
    let w = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("std");
    let c = Normal::new(0.0, 0.1).expect("std");
    let v = Normal::new(0.0, 1.0).expect("std");
    let mut t = ParamTree::new();
    t.insert("hidden.weight", Tensor::from_fn(vec![hidden, input_dim], |_| w.sample(rng)));
    t.insert("hidden.bias", Tensor::from_fn(vec![hidden], |_| c.sample(rng)));
    // Equal-norm class rows keep the classes roughly balanced.
    let mut readout: Vec<f64> = (0..classes * hidden).map(|_| v.sample(rng)).collect();
    for row in readout.chunks_exact_mut(hidden) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x *= (hidden as f64).sqrt() / norm);
    }
    t.insert("readout.weight", Tensor::matrix(classes, hidden, readout).expect("readout shape"));
    t
}

/// Labels assigned by a teacher to each row of `x`.
pub fn teacher_labels(teacher: &ParamTree, x: &Tensor<f64>) -> Result<Vec<usize>> {
    let get = |p: &str| teacher.get(p).ok_or_else(|| contract(format!("teacher lacks {p}")));
    let h = x.matmul_t(get("hidden.weight")?)?.add_row(get("hidden.bias")?.data())?.tanh();
    Ok(argmax_rows(&h.matmul_t(get("readout.weight")?)?))
}

/// Labels of task inputs `x` for a teacher centred on `mean`.
pub fn task_labels(teacher: &ParamTree, mean: &[f64], x: &Tensor<f64>) -> Result<Vec<usize>> {
    if mean.len() != x.cols() {
        return Err(contract(format!("mean of length {} for inputs of width {}", mean.len(), x.cols())));
    }
    let d = mean.len();
    let centred = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] - mean[i % d]);
    teacher_labels(teacher, &centred)
}

fn sample_inputs(n: usize, mean: &[f64], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = mean.len();
    let z = Normal::new(0.0, 1.0).expect("std");
    Tensor::from_fn(vec![n, d], |i| mean[i % d] + z.sample(rng))
}

fn covers_all_classes(y: &[usize], classes: usize) -> bool {
    let mut seen = vec![false; classes];
    for &c in y {
        seen[c] = true;
    }
    seen.into_iter().all(|s| s)
}

pub fn make_task_suite(cfg: &SuiteConfig, seed: u64) -> Result<TaskSuite> {
    if cfg.n_tasks < 2 {
        return Err(Error::Generation(format!("need at least 2 tasks, got {}", cfg.n_tasks)));
    }
    if cfg.num_classes < 2 || cfg.input_dim == 0 {
        return Err(Error::Generation("need input_dim ≥ 1 and num_classes ≥ 2".into()));
    }
    let smallest = cfg.train_size.min(cfg.val_size).min(cfg.test_size);
    if smallest < cfg.num_classes {
        return Err(Error::Generation(format!(
            "split of {smallest} samples cannot cover {} classes",
            cfg.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.task_overlap) {
        return Err(Error::Generation(format!("task_overlap {} outside [0, 1]", cfg.task_overlap)));
    }
    let hidden = teacher_hidden(cfg.input_dim);
    let common = gaussian_tree(
        cfg.input_dim,
        hidden,
        cfg.num_classes,
        &mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, "teacher-common", 0)),
    );
    let (a, b) = (cfg.task_overlap.sqrt(), (1.0 - cfg.task_overlap).sqrt());
    let shift = Normal::new(0.0, cfg.input_shift / (cfg.input_dim as f64).sqrt())
        .map_err(|e| Error::Generation(format!("input_shift: {e}")))?;

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "inputs", t as u64));
        let mean: Vec<f64> = (0..cfg.input_dim).map(|_| shift.sample(&mut rng)).collect();
        let xs = [
            sample_inputs(cfg.train_size, &mean, &mut rng),
            sample_inputs(cfg.val_size, &mean, &mut rng),
            sample_inputs(cfg.test_size, &mean, &mut rng),
        ];
        let mut found = None;
        for attempt in 0..=MAX_LABEL_RETRIES {
            let mut trng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "teacher", (t as u64) << 8 | attempt));
            let own = gaussian_tree(cfg.input_dim, hidden, cfg.num_classes, &mut trng);
            let teacher = common.zip_map(&own, |c, o| a * c + b * o)?;
            let ys = xs.iter().map(|x| task_labels(&teacher, &mean, x)).collect::<Result<Vec<_>>>()?;
            if ys.iter().all(|y| covers_all_classes(y, cfg.num_classes)) {
                found = Some((teacher, ys));
                break;
            }
        }
        let (teacher, mut ys) = found.ok_or_else(|| {
            Error::Generation(format!(
                "task {t}: some split misses a class after {MAX_LABEL_RETRIES} relabeling attempts"
            ))
        })?;
        let [xtr, xva, xte] = xs;
        let yte = ys.pop().expect("three splits");
        let yva = ys.pop().expect("three splits");
        let ytr = ys.pop().expect("three splits");
        tasks.push(Task {
            id: task_id(t),
            train: Dataset::new(xtr, ytr)?,
            val: Dataset::new(xva, yva)?,
            test: Dataset::new(xte, yte)?,
            teacher: Some(teacher),
            input_mean: mean,
        });
    }
    Ok(TaskSuite { tasks, seed })
}

const SUITE_TAG: &str = "tanmerge-task v1";

/// Write one task as CSV: a metadata comment line, a header, then one sample
/// per row (`split,index,label,x0,x1,...`).
pub fn write_task<W: Write>(
    task: &Task,
    num_classes: usize,
    seed: u64,
    extra: &BTreeMap<String, String>,
    out: W,
) -> Result<()> {
    let mut out = out;
    let mut meta = extra.clone();
    meta.insert("task".into(), task.id.clone());
    meta.insert("input_dim".into(), task.train.input_dim().to_string());
    meta.insert("num_classes".into(), num_classes.to_string());
    meta.insert("seed".into(), seed.to_string());
    meta.insert(
        "input_mean".into(),
        task.input_mean.iter().map(|&v| fmt17(v)).collect::<Vec<_>>().join(";"),
    );
    writeln!(out, "{}", metadata_line(SUITE_TAG, &meta))?;
    let mut w = csv::Writer::from_writer(out);
    let d = task.train.input_dim();
    let mut header = vec!["split".to_string(), "index".into(), "label".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (name, ds) in [("train", &task.train), ("val", &task.val), ("test", &task.test)] {
        for i in 0..ds.len() {
            let mut rec = vec![name.to_string(), i.to_string(), ds.y[i].to_string()];
            rec.extend(ds.x.row(i).iter().map(|&v| fmt17(v)));
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a task written by [`write_task`]. Returns the task and its metadata.
pub fn read_task<R: BufRead>(mut input: R) -> Result<(Task, BTreeMap<String, String>)> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let meta = parse_metadata_line(first.trim_end(), SUITE_TAG)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("task header lacks {k}")));
    let d: usize = field("input_dim")?.parse().map_err(|_| Error::Format("bad input_dim".into()))?;
    let classes: usize = field("num_classes")?.parse().map_err(|_| Error::Format("bad num_classes".into()))?;
    let input_mean = field("input_mean")?
        .split(';')
        .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad input mean {s:?}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut splits: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    let mut r = csv::Reader::from_reader(input);
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != d + 3 {
            return Err(Error::Format(format!("row with {} fields, expected {}", rec.len(), d + 3)));
        }
        let label: usize = rec[2].parse().map_err(|_| Error::Format(format!("bad label {:?}", &rec[2])))?;
        if label >= classes {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        let entry = splits.entry(rec[0].to_string()).or_default();
        for v in rec.iter().skip(3) {
            entry.0.push(v.parse().map_err(|_| Error::Format(format!("bad value {v:?}")))?);
        }
        entry.1.push(label);
    }
    let mut take = |name: &str| -> Result<Dataset> {
        let (x, y) = splits.remove(name).ok_or_else(|| Error::Format(format!("missing {name} split")))?;
        Dataset::new(Tensor::matrix(y.len(), d, x)?, y)
    };
    let task = Task {
        id: field("task")?.clone(),
        train: take("train")?,
        val: take("val")?,
        test: take("test")?,
        teacher: None,
        input_mean,
    };
    Ok((task, meta))
}
