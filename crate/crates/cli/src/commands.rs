use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tanmerge::analysis::{
    aggregate_report, disentanglement_grid, loss_landscape_grid, ntk_one_step_check, read_subset_results,
    render_report, write_grid_csv, write_ntk_csv, write_report_csv, write_subset_results,
};
use tanmerge::checkpoint::{encode, read_checkpoint, write_metrics};
use tanmerge::finetune::{Checkpoint, Optimizer};
use tanmerge::fusion::{enumerate_subsets, replay as replay_merge, Algorithm, MergedModel, Provenance};
use tanmerge::io::fmt17;
use tanmerge::pipeline::{build_model, finetune_task, fuse_subset, generate_suite, single_task_scores};
use tanmerge::task_vector::{compute_task_vector, similarity_matrix, write_similarity_csv, TaskVector};
use tanmerge::tasks::write_task;
use tanmerge::{Error, Mode, Model, Result};

use crate::workspace::{create, open, Workspace};

pub fn gen_tasks(ws: &Workspace) -> Result<()> {
    ws.write_resolved()?;
    let suite = generate_suite(&ws.cfg)?;
    for task in &suite.tasks {
        let path = ws.task_path(&task.id);
        create(&path, |w| write_task(task, ws.cfg.suite.num_classes, suite.seed, &ws.meta(), w))?;
    }
    println!("wrote {} tasks to {}", suite.tasks.len(), ws.root.join("tasks").display());
    Ok(())
}

fn modes_or_all(modes: &[Mode]) -> Vec<Mode> {
    if modes.is_empty() {
        Mode::ALL.to_vec()
    } else {
        modes.to_vec()
    }
}

pub fn finetune(ws: &Workspace, modes: &[Mode], tasks: &[String]) -> Result<()> {
    ws.write_resolved()?;
    let suite = ws.load_suite()?;
    let ids = if tasks.is_empty() { ws.task_ids() } else { tasks.to_vec() };
    let idx = ids.iter().map(|id| ws.task_index(id)).collect::<Result<Vec<_>>>()?;
    for mode in modes_or_all(modes) {
        let model = build_model(&ws.cfg, mode)?;
        let trained: Vec<_> = {
            use rayon::prelude::*;
            idx.par_iter().map(|&t| finetune_task(&ws.cfg, &model, &suite, t)).collect::<Result<_>>()?
        };
        for (ck, log) in &trained {
            let bytes = encode(ck, &ws.meta())?;
            create(&ws.checkpoint_path(mode, &ck.task_id), |w| Ok(w.write_all(&bytes)?))?;
            create(&ws.metrics_path(mode, &ck.task_id), |w| write_metrics(log, &ws.meta(), w))?;
            println!("{mode:<12} {:<8} val_accuracy {:.4}", ck.task_id, ck.val_accuracy);
        }
    }
    Ok(())
}

/// Sidecar describing how a merged checkpoint was produced.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceRecord {
    config_digest: String,
    mode: Mode,
    subset_index: usize,
    trainable_digest: String,
    provenance: Provenance,
}

fn subset_name(ids: &[String]) -> String {
    ids.join("+")
}

fn write_merged(ws: &Workspace, model: &Model, merged: &MergedModel, subset_index: usize) -> Result<PathBuf> {
    let p = &merged.provenance;
    let dir = ws.fused_dir(model.mode(), p.algorithm);
    let name = subset_name(&p.task_ids);
    let ck = Checkpoint {
        spec: model.spec().clone(),
        task_id: name.clone(),
        model_seed: ws.cfg.seeds().model(),
        theta0_digest: model.theta0().digest(),
        initial: model.init().clone(),
        trained: merged.trainable.clone(),
        train_loss: f64::NAN,
        val_accuracy: p.validation_accuracy.unwrap_or(f64::NAN),
    };
    let mut meta = ws.meta();
    meta.insert("algorithm".into(), p.algorithm.name().into());
    let bytes = encode(&ck, &meta)?;
    create(&dir.join(format!("{name}.ckpt")), |w| Ok(w.write_all(&bytes)?))?;
    let record = ProvenanceRecord {
        config_digest: ws.digest.clone(),
        mode: model.mode(),
        subset_index,
        trainable_digest: merged.trainable.digest(),
        provenance: p.clone(),
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    let prov = dir.join(format!("{name}.provenance.json"));
    create(&prov, |w| Ok(writeln!(w, "{json}")?))?;
    Ok(dir.join(name))
}

pub fn fuse(ws: &Workspace, modes: &[Mode], algorithms: &[Algorithm], all: bool, tasks: &[String]) -> Result<()> {
    let n = ws.cfg.suite.n_tasks;
    let all_subsets = enumerate_subsets(n);
    let picked: Vec<usize> = if all {
        (0..all_subsets.len()).collect()
    } else {
        let mut idx = tasks.iter().map(|id| ws.task_index(id)).collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        if idx.len() < 2 {
            return Err(Error::Contract("pass --all-subsets or at least two distinct --task ids".into()));
        }
        vec![all_subsets.iter().position(|s| *s == idx).expect("every subset of size >= 2 is enumerated")]
    };
    let algorithms = if algorithms.is_empty() { Algorithm::ALL.to_vec() } else { algorithms.to_vec() };
    ws.write_resolved()?;
    let suite = ws.load_suite()?;
    for mode in ws.trained_modes(modes)? {
        let model = build_model(&ws.cfg, mode)?;
        let ckpts = ws.load_checkpoints(&model)?;
        let single = single_task_scores(&model, &ckpts, &suite)?;
        for &alg in &algorithms {
            let done: Vec<_> = {
                use rayon::prelude::*;
                picked
                    .par_iter()
                    .map(|&i| fuse_subset(&ws.cfg, &model, &ckpts, &suite, &single, alg, &all_subsets[i], i))
                    .collect::<Result<_>>()?
            };
            for (&i, (merged, result)) in picked.iter().zip(&done) {
                let stem = write_merged(ws, &model, merged, i)?;
                let scores = stem.with_extension("scores.csv");
                create(&scores, |w| write_subset_results(std::slice::from_ref(result), &ws.meta(), w))?;
            }
            let mean = done.iter().map(|(_, r)| r.average_normalized()).sum::<f64>() / done.len() as f64;
            println!("{mode:<12} {alg:<16} {} subsets, mean normalized score {mean:.4}", done.len());
        }
    }
    Ok(())
}

pub fn replay(ws: &Workspace, path: &Path) -> Result<()> {
    let record: ProvenanceRecord = serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if record.config_digest != ws.digest {
        return Err(Error::Contract(format!("{} was written under a different config", path.display())));
    }
    let model = build_model(&ws.cfg, record.mode)?;
    let ckpts = record
        .provenance
        .task_ids
        .iter()
        .map(|id| ws.load_checkpoint(&model, id))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let merged = replay_merge(&refs, &record.provenance)?;
    let got = merged.trainable.digest();
    if got != record.trainable_digest {
        return Err(Error::Contract(format!("replay produced {got}, record says {}", record.trainable_digest)));
    }
    let stored = path.with_file_name(format!("{}.ckpt", subset_name(&record.provenance.task_ids)));
    if stored.exists() {
        let (ck, meta) = read_checkpoint(&stored)?;
        ws.check(&meta, &stored)?;
        if ck.trained.digest() != got {
            return Err(Error::Contract(format!("{} does not match its provenance", stored.display())));
        }
    }
    println!("replay ok: {got}");
    Ok(())
}

fn task_vectors(ws: &Workspace, model: &Model) -> Result<Vec<TaskVector>> {
    ws.load_checkpoints(model)?.iter().map(compute_task_vector).collect()
}

pub fn similarity(ws: &Workspace, modes: &[Mode]) -> Result<()> {
    ws.write_resolved()?;
    for mode in ws.trained_modes(modes)? {
        let model = build_model(&ws.cfg, mode)?;
        let tv = task_vectors(ws, &model)?;
        let m = similarity_matrix(&tv.iter().collect::<Vec<_>>())?;
        let ids: Vec<String> = tv.iter().map(|v| v.task_id.clone()).collect();
        let mut meta = ws.meta();
        meta.insert("mode".into(), mode.name().into());
        create(&ws.analysis_dir(mode).join("similarity.csv"), |w| write_similarity_csv(&ids, &m, &meta, w))?;
        println!("{mode:<12} similarity {}x{}", ids.len(), ids.len());
    }
    Ok(())
}

fn pair_meta(ws: &Workspace, mode: Mode, a: &str, b: &str) -> BTreeMap<String, String> {
    let mut meta = ws.meta();
    meta.insert("mode".into(), mode.name().into());
    meta.insert("task_pair".into(), format!("{a};{b}"));
    meta
}

pub fn disentangle(ws: &Workspace, modes: &[Mode]) -> Result<()> {
    ws.write_resolved()?;
    let suite = ws.load_suite()?;
    let axis = ws.cfg.analysis.axis();
    for mode in ws.trained_modes(modes)? {
        let model = build_model(&ws.cfg, mode)?;
        let tv = task_vectors(ws, &model)?;
        for &(a, b) in &ws.cfg.analysis.task_pairs {
            let sets = (&suite.tasks[a].test, &suite.tasks[b].test);
            let grid = disentanglement_grid(&model, &tv[a], &tv[b], &axis, sets)?;
            let (ia, ib) = (&suite.tasks[a].id, &suite.tasks[b].id);
            let mut meta = pair_meta(ws, mode, ia, ib);
            let area = grid.area_below(0.1);
            meta.insert("area_below_0.1".into(), fmt17(area));
            let path = ws.analysis_dir(mode).join(format!("disentangle.{ia}-{ib}.csv"));
            create(&path, |w| write_grid_csv("tanmerge-disentangle v1", &axis, &axis, &grid.xi, &meta, w))?;
            println!("{mode:<12} disentangle {ia}-{ib} area(xi/2 < 0.1) {area:.4}");
        }
    }
    Ok(())
}

pub fn landscape(ws: &Workspace, modes: &[Mode]) -> Result<()> {
    ws.write_resolved()?;
    let suite = ws.load_suite()?;
    let axis = ws.cfg.analysis.axis();
    for mode in ws.trained_modes(modes)? {
        let model = build_model(&ws.cfg, mode)?;
        let ckpts = ws.load_checkpoints(&model)?;
        for &(a, b) in &ws.cfg.analysis.task_pairs {
            let sets = (&suite.tasks[a].test, &suite.tasks[b].test);
            let grid = loss_landscape_grid(&model, &ckpts[a].trained, &ckpts[b].trained, &axis, &axis, sets)?;
            let (ia, ib) = (&suite.tasks[a].id, &suite.tasks[b].id);
            let meta = pair_meta(ws, mode, ia, ib);
            let path = ws.analysis_dir(mode).join(format!("landscape.{ia}-{ib}.csv"));
            create(&path, |w| write_grid_csv("tanmerge-landscape v1", &axis, &axis, &grid.loss, &meta, w))?;
            println!("{mode:<12} landscape {ia}-{ib}");
        }
    }
    Ok(())
}

pub fn ntk(ws: &Workspace, modes: &[Mode]) -> Result<()> {
    ws.write_resolved()?;
    let suite = ws.load_suite()?;
    let modes = if modes.is_empty() {
        Mode::ALL.into_iter().filter(|m| m.is_linearized()).collect()
    } else {
        modes.to_vec()
    };
    let cap = ws.cfg.analysis.ntk_max_samples;
    let train = &suite.tasks[0].train;
    let batch = train.select(&(0..cap.min(train.len())).collect::<Vec<_>>());
    for mode in modes {
        let model = build_model(&ws.cfg, mode)?;
        let check = ntk_one_step_check(&model, &batch, ws.cfg.analysis.ntk_eta, &Optimizer::Sgd, cap)?;
        let mut meta = ws.meta();
        meta.insert("mode".into(), mode.name().into());
        meta.insert("eta".into(), fmt17(ws.cfg.analysis.ntk_eta));
        create(&ws.analysis_dir(mode).join("ntk.csv"), |w| write_ntk_csv(&check, &meta, w))?;
        println!("{mode:<12} ntk relative error {:.3e}", check.relative_error);
    }
    Ok(())
}

/// Every `*.scores.csv` under `fused/`, in sorted path order.
fn score_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.join("fused")];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_string_lossy().ends_with(".scores.csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn report(ws: &Workspace) -> Result<()> {
    let files = score_files(&ws.root)?;
    if files.is_empty() {
        return Err(Error::Contract(format!("no fusion scores under {}; run fuse first", ws.root.display())));
    }
    let mut results = Vec::new();
    for path in &files {
        let (r, meta) = read_subset_results(BufReader::new(open(path)?))?;
        ws.check(&meta, path)?;
        results.extend(r);
    }
    let report = aggregate_report(&results)?;
    ws.write_resolved()?;
    create(&ws.root.join("report.csv"), |w| write_report_csv(&report, &ws.meta(), w))?;
    let table = render_report(&report);
    create(&ws.root.join("report.txt"), |w| {
        writeln!(w, "# {} = {}", crate::workspace::DIGEST_KEY, ws.digest)?;
        Ok(w.write_all(table.as_bytes())?)
    })?;
    print!("{table}");
    Ok(())
}

pub fn run_all(ws: &Workspace) -> Result<()> {
    gen_tasks(ws)?;
    finetune(ws, &[], &[])?;
    fuse(ws, &[], &[], true, &[])?;
    similarity(ws, &[])?;
    disentangle(ws, &[])?;
    landscape(ws, &[])?;
    ntk(ws, &[])?;
    report(ws)
}
