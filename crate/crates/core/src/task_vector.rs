//! Task vectors: deltas of the trainable parameters, and their geometry.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{contract, Error, Result};
use crate::finetune::Checkpoint;
use crate::io::{csv_error, fmt17, metadata_line};
use crate::model::{Mode, ModelSpec};
use crate::params::ParamTree;

/// `ν = trained − initial` over a mode's trainable set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub delta: ParamTree,
    pub mode: Mode,
    pub task_id: String,
}

impl TaskVector {
    pub fn norm(&self) -> f64 {
        self.delta.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_compatible(&self, other: &TaskVector) -> bool {
        self.mode == other.mode && self.delta.is_congruent(&other.delta)
    }

    fn ensure_compatible(&self, other: &TaskVector) -> Result<()> {
        if self.mode != other.mode {
            return Err(contract(format!(
                "task vectors from modes {} and {} cannot be combined",
                self.mode, other.mode
            )));
        }
        self.delta.ensure_congruent(&other.delta, "task vectors")
    }
}

pub fn compute_task_vector(ck: &Checkpoint) -> Result<TaskVector> {
    Ok(TaskVector {
        delta: ck.trained.sub(&ck.initial)?,
        mode: ck.mode(),
        task_id: ck.task_id.clone(),
    })
}

/// Sum that does not depend on the order of `values`.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Ensure all vectors share a mode and a key set.
pub(crate) fn check_family(vectors: &[&TaskVector]) -> Result<()> {
    let first = vectors.first().ok_or_else(|| contract("empty list of task vectors"))?;
    vectors.iter().skip(1).try_for_each(|v| first.ensure_compatible(v))
}

/// Elementwise `Σ w_i ν_i`.
pub fn linear_combine(vectors: &[&TaskVector], weights: &[f64]) -> Result<TaskVector> {
    check_family(vectors)?;
    if weights.len() != vectors.len() {
        return Err(contract(format!("{} weights for {} vectors", weights.len(), vectors.len())));
    }
    let flats: Vec<Vec<f64>> = vectors.iter().map(|v| v.delta.flatten()).collect();
    let mut buf = vec![0.0; flats.len()];
    let combined: Vec<f64> = (0..flats[0].len())
        .map(|j| {
            for (b, (f, w)) in buf.iter_mut().zip(flats.iter().zip(weights)) {
                *b = w * f[j];
            }
            order_free_sum(&mut buf)
        })
        .collect();
    Ok(TaskVector {
        delta: ParamTree::from_flat(&vectors[0].delta.layout(), &combined)?,
        mode: vectors[0].mode,
        task_id: vectors.iter().map(|v| v.task_id.as_str()).collect::<Vec<_>>().join("+"),
    })
}

/// Cosine of two flattened trees with identical key sets.
pub fn cosine_trees(a: &ParamTree, b: &ParamTree) -> Result<f64> {
    a.ensure_congruent(b, "cosine similarity")?;
    let (x, y) = (a.flatten(), b.flatten());
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm vector".into()));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &TaskVector, b: &TaskVector) -> Result<f64> {
    a.ensure_compatible(b)?;
    cosine_trees(&a.delta, &b.delta).map_err(|e| match e {
        Error::UndefinedSimilarity(_) => Error::UndefinedSimilarity(format!(
            "task vector {} or {} has zero norm",
            a.task_id, b.task_id
        )),
        other => other,
    })
}

/// Pairwise cosine matrix with an exact unit diagonal and exact symmetry.
pub fn similarity_matrix(vectors: &[&TaskVector]) -> Result<Vec<Vec<f64>>> {
    if vectors.len() < 2 {
        return Err(contract("similarity matrix needs at least two vectors"));
    }
    let n = vectors.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        if vectors[i].norm() == 0.0 {
            return Err(Error::UndefinedSimilarity(format!("task vector {} has zero norm", vectors[i].task_id)));
        }
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine_similarity(vectors[i], vectors[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Mean absolute off-diagonal entry.
pub fn mean_abs_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                total += v.abs();
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Embed a task vector into the joint `(θ, φ)` space of `spec`: the block the
/// mode does not train is zero-filled. Paths are prefixed `theta.` / `phi.`.
pub fn embed_joint(v: &TaskVector, spec: &ModelSpec) -> Result<ParamTree> {
    let zeros = |layout: &crate::params::Layout| ParamTree::from_flat(layout, &vec![0.0; layout.num_values()]);
    let theta_layout = spec.backbone_layout();
    let phi_layout = spec.with_mode(Mode::Lora).trainable_layout();
    let (theta, phi) = if v.mode.is_peft() {
        if v.delta.layout() != phi_layout {
            return Err(contract("adapter task vector does not match the spec"));
        }
        (zeros(&theta_layout)?, v.delta.clone())
    } else {
        if v.delta.layout() != theta_layout {
            return Err(contract("backbone task vector does not match the spec"));
        }
        (v.delta.clone(), zeros(&phi_layout)?)
    };
    theta.prefixed("theta.").merged_with(&phi.prefixed("phi."))
}

/// Square CSV with a task-id header row and column.
pub fn write_similarity_csv<W: Write>(
    ids: &[String],
    m: &[Vec<f64>],
    meta: &BTreeMap<String, String>,
    mut out: W,
) -> Result<()> {
    writeln!(out, "{}", metadata_line("tanmerge-similarity v1", meta))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(csv_error)?;
    for (id, row) in ids.iter().zip(m) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|&v| fmt17(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
