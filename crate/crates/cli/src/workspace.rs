//! Output-directory layout, config resolution and digest checks.
//!
//! ```text
//! resolved_config.toml
//! tasks/<task>.csv
//! checkpoints/<mode>/<task>.ckpt, <task>.metrics.csv
//! fused/<mode>/<algorithm>/<subset>.ckpt, .provenance.json, .scores.csv
//! analysis/<mode>/similarity.csv, disentangle.<a>-<b>.csv, landscape.<a>-<b>.csv, ntk.csv
//! report.csv, report.txt
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use tanmerge::checkpoint::read_checkpoint;
use tanmerge::finetune::Checkpoint;
use tanmerge::fusion::Algorithm;
use tanmerge::pipeline::RunConfig;
use tanmerge::tasks::{read_task, task_id, TaskSuite};
use tanmerge::{Error, Mode, Model, Result};

pub const DIGEST_KEY: &str = "config_digest";

pub struct Workspace {
    pub cfg: RunConfig,
    pub digest: String,
    pub root: PathBuf,
}

impl Workspace {
    pub fn open(config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Contract(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Contract(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out_dir = o;
        }
        cfg.validate()?;
        Ok(Workspace { digest: cfg.digest(), root: cfg.out_dir.clone(), cfg })
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([(DIGEST_KEY.to_string(), self.digest.clone())])
    }

    /// Reject inputs written under a different configuration.
    pub fn check(&self, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
        match meta.get(DIGEST_KEY) {
            Some(d) if *d == self.digest => Ok(()),
            Some(d) => Err(Error::Contract(format!(
                "{} was written under config {d}, current config is {}",
                path.display(),
                self.digest
            ))),
            None => Err(Error::Contract(format!("{} carries no config digest", path.display()))),
        }
    }

    pub fn task_ids(&self) -> Vec<String> {
        (0..self.cfg.suite.n_tasks).map(task_id).collect()
    }

    pub fn task_index(&self, id: &str) -> Result<usize> {
        self.task_ids()
            .iter()
            .position(|t| t == id)
            .ok_or_else(|| Error::Contract(format!("unknown task {id:?}")))
    }

    pub fn task_path(&self, id: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{id}.csv"))
    }

    pub fn checkpoint_dir(&self, mode: Mode) -> PathBuf {
        self.root.join("checkpoints").join(mode.name())
    }

    pub fn checkpoint_path(&self, mode: Mode, id: &str) -> PathBuf {
        self.checkpoint_dir(mode).join(format!("{id}.ckpt"))
    }

    pub fn metrics_path(&self, mode: Mode, id: &str) -> PathBuf {
        self.checkpoint_dir(mode).join(format!("{id}.metrics.csv"))
    }

    pub fn fused_dir(&self, mode: Mode, alg: Algorithm) -> PathBuf {
        self.root.join("fused").join(mode.name()).join(alg.name())
    }

    pub fn analysis_dir(&self, mode: Mode) -> PathBuf {
        self.root.join("analysis").join(mode.name())
    }

    /// Write `resolved_config.toml`: the effective configuration with the
    /// digest and seed table as leading comments.
    pub fn write_resolved(&self) -> Result<()> {
        let body = toml::to_string(&self.cfg).map_err(|e| Error::Format(format!("config: {e}")))?;
        let seeds = self.cfg.seeds();
        let mut head = format!("# tanmerge resolved configuration\n# {DIGEST_KEY} = {}\n", self.digest);
        head.push_str(&format!("# sub-seeds derived from master seed {}:\n", seeds.master));
        for (stage, s) in seeds.describe(self.cfg.suite.n_tasks) {
            head.push_str(&format!("#   {stage} = {s}\n"));
        }
        head.push_str("#   fusion of subset i = derive(master, \"fusion\", i)\n\n");
        create(&self.root.join("resolved_config.toml"), |w| Ok(w.write_all((head + &body).as_bytes())?))
    }

    pub fn load_suite(&self) -> Result<TaskSuite> {
        let tasks = self
            .task_ids()
            .iter()
            .map(|id| {
                let path = self.task_path(id);
                let (task, meta) = read_task(BufReader::new(open(&path)?))?;
                self.check(&meta, &path)?;
                if task.id != *id {
                    return Err(Error::Format(format!("{} holds task {}", path.display(), task.id)));
                }
                Ok(task)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSuite { tasks, seed: self.cfg.seeds().suite() })
    }

    pub fn load_checkpoint(&self, model: &Model, id: &str) -> Result<Checkpoint> {
        let path = self.checkpoint_path(model.mode(), id);
        let (ck, meta) = read_checkpoint(&path)?;
        self.check(&meta, &path)?;
        if ck.mode() != model.mode() || ck.task_id != id {
            return Err(Error::Format(format!("{} holds {} / {}", path.display(), ck.mode(), ck.task_id)));
        }
        Ok(ck)
    }

    pub fn load_checkpoints(&self, model: &Model) -> Result<Vec<Checkpoint>> {
        self.task_ids().iter().map(|id| self.load_checkpoint(model, id)).collect()
    }

    /// `requested`, or every mode that has a checkpoint directory.
    pub fn trained_modes(&self, requested: &[Mode]) -> Result<Vec<Mode>> {
        if !requested.is_empty() {
            return Ok(requested.to_vec());
        }
        let found: Vec<Mode> = Mode::ALL.into_iter().filter(|&m| self.checkpoint_dir(m).is_dir()).collect();
        if found.is_empty() {
            return Err(Error::Contract(format!("no checkpoints under {}; run finetune first", self.root.display())));
        }
        Ok(found)
    }
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Contract(format!("cannot open {}: {e}", path.display())))
}

/// Create `path` (and its parent directories) and hand a buffered writer to `f`.
pub fn create(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Contract(format!("cannot create {}: {e}", dir.display())))?;
    }
    let file = File::create(path).map_err(|e| Error::Contract(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
