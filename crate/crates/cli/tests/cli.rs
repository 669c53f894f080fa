use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tanmerge::analysis::{joint_loss, read_subset_results};
use tanmerge::checkpoint::read_checkpoint;
use tanmerge::finetune::evaluate;
use tanmerge::pipeline::{build_model, generate_suite, RunConfig};
use tanmerge::tasks::read_task;
use tanmerge::Mode;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[suite]
n_tasks = 3
train_size = 64
val_size = 32
test_size = 32
[model]
input_dim = 16
hidden_dims = [8]
num_classes = 3
lora_rank = 2
lora_alpha = 2.0
mode = "lora"
[train.full_ft]
steps = 20
[train.full_linear]
steps = 20
[train.lora]
steps = 20
[train.llora]
steps = 20
learning_rate = 0.1
[analysis]
resolution = 4
"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new(config: &str) -> Env {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, config).unwrap();
        Env { config: path, dir }
    }

    fn small() -> Env {
        Env::new(SMALL)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tanmerge"));
        cmd.arg("--config").arg(&self.config).arg("--out").arg(self.out(out)).args(args);
        cmd.output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn cfg(&self, out: &str) -> RunConfig {
        let mut cfg: RunConfig = toml::from_str(&fs::read_to_string(&self.config).unwrap()).unwrap();
        cfg.out_dir = self.out(out);
        cfg
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn count_with_suffix(dir: &Path, suffix: &str) -> usize {
    files(dir).keys().filter(|p| p.to_string_lossy().ends_with(suffix)).count()
}

#[test]
fn gen_tasks_is_deterministic_and_writes_one_file_per_task() {
    let env = Env::new("[suite]\nn_tasks = 4\ntrain_size = 64\nval_size = 32\ntest_size = 32\n");
    env.ok("a", &["gen-tasks"]);
    env.ok("b", &["gen-tasks"]);
    let a = files(&env.out("a").join("tasks"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, files(&env.out("b").join("tasks")));
}

#[test]
fn exported_suite_evaluates_like_the_generated_one() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "lora", "--task", "task1"]);
    let cfg = env.cfg("o");
    let suite = generate_suite(&cfg).unwrap();
    let model = build_model(&cfg, Mode::Lora).unwrap();
    let (ck, _) = read_checkpoint(&env.out("o").join("checkpoints/lora/task1.ckpt")).unwrap();
    let f = fs::File::open(env.out("o").join("tasks/task1.csv")).unwrap();
    let (task, _) = read_task(BufReader::new(f)).unwrap();
    for (a, b) in [(&task.train, &suite.tasks[1].train), (&task.test, &suite.tasks[1].test)] {
        assert_eq!(evaluate(&model, &ck.trained, a).unwrap(), evaluate(&model, &ck.trained, b).unwrap());
    }
}

#[test]
fn finetune_writes_one_checkpoint_per_mode_and_task_and_reruns_identically() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune"]);
    let first = files(&env.out("o").join("checkpoints"));
    assert_eq!(count_with_suffix(&env.out("o").join("checkpoints"), ".ckpt"), 4 * 3);
    assert_eq!(count_with_suffix(&env.out("o").join("checkpoints"), ".metrics.csv"), 4 * 3);
    env.ok("o", &["finetune"]);
    assert_eq!(first, files(&env.out("o").join("checkpoints")));
}

#[test]
fn llora_checkpoint_beats_chance() {
    let env = Env::new("[suite]\ntrain_size = 256\nval_size = 128\ntest_size = 128\n");
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "llora", "--task", "task0"]);
    let cfg = env.cfg("o");
    let suite = generate_suite(&cfg).unwrap();
    let model = build_model(&cfg, Mode::Llora).unwrap();
    let (ck, _) = read_checkpoint(&env.out("o").join("checkpoints/llora/task0.ckpt")).unwrap();
    let acc = evaluate(&model, &ck.trained, &suite.tasks[0].test).unwrap();
    assert!(acc > 0.45, "accuracy {acc}");
}

#[test]
fn all_subsets_of_seven_tasks_gives_120_merges() {
    let env = Env::new(&SMALL.replace("n_tasks = 3", "n_tasks = 7").replace("steps = 20", "steps = 2"));
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "lora"]);
    env.ok("o", &["fuse", "--mode", "lora", "--algorithm", "simple_average", "--all-subsets"]);
    let dir = env.out("o").join("fused/lora/simple_average");
    assert_eq!(count_with_suffix(&dir, ".ckpt"), 120);
    assert_eq!(count_with_suffix(&dir, ".provenance.json"), 120);
}

#[test]
fn single_pair_gives_one_merge_and_every_algorithm_replays_exactly() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "llora"]);
    env.ok("o", &["fuse", "--mode", "llora", "--task", "task2", "--task", "task0"]);
    for alg in ["simple_average", "task_arithmetic", "ties_merging", "lorahub"] {
        let dir = env.out("o").join("fused/llora").join(alg);
        assert_eq!(count_with_suffix(&dir, ".ckpt"), 1);
        let prov = dir.join("task0+task2.provenance.json");
        let stdout = env.ok("o", &["fuse", "--replay", prov.to_str().unwrap()]);
        assert!(stdout.starts_with("replay ok"));
    }
}

#[test]
fn tampered_provenance_fails_replay() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "lora"]);
    env.ok("o", &["fuse", "--mode", "lora", "--algorithm", "task_arithmetic", "--task", "task0", "--task", "task1"]);
    let prov = env.out("o").join("fused/lora/task_arithmetic/task0+task1.provenance.json");
    let text = fs::read_to_string(&prov).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let l = v["provenance"]["lambda"].as_f64().unwrap();
    v["provenance"]["lambda"] = serde_json::json!(l + 0.01);
    fs::write(&prov, v.to_string()).unwrap();
    let o = env.run("o", &["fuse", "--replay", prov.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analysis_outputs_have_the_documented_shapes() {
    let env = Env::new(&SMALL.replace("resolution = 4", "resolution = 21"));
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "lora"]);
    env.ok("o", &["analyze", "similarity"]);
    env.ok("o", &["analyze", "disentangle"]);
    let sim = fs::read_to_string(env.out("o").join("analysis/lora/similarity.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sim.lines().skip(2).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 4);
        assert_eq!(r[i + 1].parse::<f64>().unwrap(), 1.0);
    }
    let grid = fs::read_to_string(env.out("o").join("analysis/lora/disentangle.task0-task1.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(lines.len(), 22);
    assert!(lines.iter().all(|l| l.split(',').count() == 22));
}

#[test]
fn landscape_corners_match_direct_evaluation() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "full_ft"]);
    env.ok("o", &["analyze", "landscape", "--mode", "full_ft"]);
    let cfg = env.cfg("o");
    let suite = generate_suite(&cfg).unwrap();
    let model = build_model(&cfg, Mode::FullFt).unwrap();
    let ck = |id: &str| read_checkpoint(&env.out("o").join(format!("checkpoints/full_ft/{id}.ckpt"))).unwrap().0;
    let (p1, p2) = (ck("task0").trained, ck("task1").trained);
    let text = fs::read_to_string(env.out("o").join("analysis/full_ft/landscape.task0-task1.csv")).unwrap();
    let grid: Vec<Vec<f64>> =
        text.lines().skip(2).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    // axis is [-1, 0, 1, 2]
    let (d1, d2) = (&suite.tasks[0].test, &suite.tasks[1].test);
    assert_eq!(grid[1][1], joint_loss(&model, model.init(), d1, d2).unwrap());
    assert_eq!(grid[2][1], joint_loss(&model, &p1, d1, d2).unwrap());
    assert_eq!(grid[1][2], joint_loss(&model, &p2, d1, d2).unwrap());
}

#[test]
fn ntk_check_passes_for_linearized_modes() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    let stdout = env.ok("o", &["analyze", "ntk"]);
    assert_eq!(stdout.lines().count(), 2);
    for mode in ["full_linear", "llora"] {
        let text = fs::read_to_string(env.out("o").join(format!("analysis/{mode}/ntk.csv"))).unwrap();
        let err: f64 = text
            .lines()
            .next()
            .unwrap()
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("relative_error="))
            .unwrap()
            .parse()
            .unwrap();
        assert!(err <= 1e-6, "{mode}: {err}");
    }
    assert_eq!(env.run("o", &["analyze", "ntk", "--mode", "lora"]).status.code(), Some(1));
}

#[test]
fn report_matches_recomputation_from_subset_files() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    env.ok("o", &["finetune", "--mode", "lora"]);
    env.ok("o", &["fuse", "--mode", "lora", "--algorithm", "task_arithmetic", "--all-subsets"]);
    env.ok("o", &["report"]);
    let dir = env.out("o").join("fused/lora/task_arithmetic");
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (p, bytes) in files(&dir) {
        if p.to_string_lossy().ends_with(".scores.csv") {
            let (r, _) = read_subset_results(bytes.as_slice()).unwrap();
            let avg = r[0].scores.iter().map(|s| s.normalized).sum::<f64>() / r[0].scores.len() as f64;
            by_size.entry(r[0].subset.len()).or_default().push(avg);
        }
    }
    let all: Vec<f64> = by_size.values().flatten().copied().collect();
    let report = fs::read_to_string(env.out("o").join("report.csv")).unwrap();
    let rows: Vec<Vec<String>> =
        report.lines().skip(2).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
    };
    for row in rows {
        let vals: Vec<f64> = match row[2].as_str() {
            "all" => all.clone(),
            s => by_size[&s.parse::<usize>().unwrap()].clone(),
        };
        let (m, s) = stats(&vals);
        assert_eq!(row[3].parse::<usize>().unwrap(), vals.len());
        assert!((row[4].parse::<f64>().unwrap() - m).abs() < 1e-12);
        assert!((row[5].parse::<f64>().unwrap() - s).abs() < 1e-12);
        if vals.len() == 1 {
            assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn full_runs_are_byte_identical_across_output_directories() {
    let env = Env::small();
    env.ok("a", &["run"]);
    env.ok("b", &["--jobs", "1", "run"]);
    let a = files(&env.out("a"));
    assert!(a.len() > 100);
    assert_eq!(a, files(&env.out("b")));
}

#[test]
fn inputs_from_another_config_are_rejected() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    let o = env.run("o", &["--seed", "99", "finetune", "--mode", "lora"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn config_errors_exit_with_one() {
    let env = Env::new("seed = 1\nunknown_key = 2\n");
    assert_eq!(env.run("o", &["gen-tasks"]).status.code(), Some(1));
    let env = Env::new("[model]\nlora_rank = 9\n");
    assert_eq!(env.run("o", &["gen-tasks"]).status.code(), Some(1));
    let env = Env::small();
    assert_eq!(env.run("o", &["fuse", "--all-subsets"]).status.code(), Some(1));
    assert_eq!(env.run("o", &["no-such-command"]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let env = Env::new(&SMALL.replace("[train.full_ft]\nsteps = 20", "[train.full_ft]\nsteps = 20\nlearning_rate = 1e307\noptimizer = { kind = \"sgd\" }"));
    env.ok("o", &["gen-tasks"]);
    let o = env.run("o", &["finetune", "--mode", "full_ft", "--task", "task0"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resolved_config_round_trips_and_lists_seeds() {
    let env = Env::small();
    env.ok("o", &["gen-tasks"]);
    let text = fs::read_to_string(env.out("o").join("resolved_config.toml")).unwrap();
    let cfg: RunConfig = toml::from_str(&text).unwrap();
    let mut expected = env.cfg("o");
    expected.out_dir = cfg.out_dir.clone();
    assert_eq!(cfg, expected);
    assert!(text.contains(&format!("config_digest = {}", expected.digest())));
    assert!(text.contains("shuffle.task2"));
}
