use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tanmerge::analysis::{
    aggregate_report, disentanglement_error, disentanglement_grid, joint_loss, loss_landscape_grid,
    normalized_score, ntk_one_step_check, SubsetResult, TaskScore,
};
use tanmerge::autodiff::jvp;
use tanmerge::finetune::{evaluate, finetune, finetune_with_log, Optimizer, TrainConfig};
use tanmerge::fusion::Algorithm;
use tanmerge::model::LogitsFn;
use tanmerge::task_vector::TaskVector;
use tanmerge::tasks::{make_task_suite, Dataset, SuiteConfig, TaskSuite};
use tanmerge::{Mode, Model, ModelSpec, ParamTree, Tensor};

fn suite(dim: usize) -> TaskSuite {
    let cfg = SuiteConfig {
        n_tasks: 2,
        input_dim: dim,
        num_classes: 3,
        train_size: 64,
        val_size: 32,
        test_size: 48,
        ..SuiteConfig::default()
    };
    make_task_suite(&cfg, 11).unwrap()
}

fn small(mode: Mode) -> Model {
    let spec = ModelSpec { input_dim: 4, hidden_dims: vec![6], lora_rank: 2, mode, ..ModelSpec::default() };
    Model::build(&spec, 2).unwrap()
}

fn random_vector(model: &Model, id: &str, scale: f64, seed: u64) -> TaskVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.init().layout();
    let v: Vec<f64> = (0..layout.num_values()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    TaskVector { delta: ParamTree::from_flat(&layout, &v).unwrap(), mode: model.mode(), task_id: id.into() }
}

fn zero_vector(model: &Model, id: &str) -> TaskVector {
    TaskVector { delta: model.init().zeros_like(), mode: model.mode(), task_id: id.into() }
}

fn rows(x: &[f64], cols: usize, y: Vec<usize>) -> Dataset {
    Dataset::new(Tensor::matrix(x.len() / cols, cols, x.to_vec()).unwrap(), y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn xi_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000, l1 in -1.0..2.0f64, l2 in -1.0..2.0f64) {
        let model = small(Mode::Llora);
        let ts = suite(4);
        let (a, b) = (random_vector(&model, "a", 2.0, s1), random_vector(&model, "b", 2.0, s2));
        let (d1, d2) = (&ts.tasks[0].test, &ts.tasks[1].test);
        let xi = disentanglement_error(&model, &a, &b, l1, l2, (d1, d2)).unwrap();
        let swapped = disentanglement_error(&model, &b, &a, l2, l1, (d2, d1)).unwrap();
        prop_assert_eq!(xi, swapped);
        prop_assert!((0.0..=2.0).contains(&xi));
    }

    #[test]
    fn jvp_is_linear_in_direction(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let model = small(Mode::FullFt);
        let ts = suite(4);
        let f = LogitsFn { net: model.network(), x: &ts.tasks[0].val.x };
        let p0 = model.init_flat();
        let d1 = random_vector(&model, "d1", 1.0, seed).delta.flatten();
        let d2 = random_vector(&model, "d2", 1.0, seed + 1).delta.flatten();
        let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let (_, j1) = jvp(&f, p0, &d1).unwrap();
        let (_, j2) = jvp(&f, p0, &d2).unwrap();
        let (_, jm) = jvp(&f, p0, &mix).unwrap();
        for i in 0..jm.len() {
            prop_assert!((jm[i] - (a * j1[i] + b * j2[i])).abs() <= 1e-10);
        }
    }
}

#[test]
fn xi_vanishes_at_zero_scale_and_for_zero_vectors() {
    let model = small(Mode::Llora);
    let ts = suite(4);
    let (d1, d2) = (&ts.tasks[0].test, &ts.tasks[1].test);
    let a = random_vector(&model, "a", 3.0, 1);
    let b = random_vector(&model, "b", 3.0, 2);
    let zero = zero_vector(&model, "z");
    assert_eq!(disentanglement_error(&model, &a, &b, 0.0, 0.0, (d1, d2)).unwrap(), 0.0);
    let grid = disentanglement_grid(&model, &zero, &zero_vector(&model, "y"), &[-1.0, 0.0, 1.0], (d1, d2)).unwrap();
    assert!(grid.xi.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn xi_by_hand_on_a_two_class_line() {
    // logits = [x, -x] + bias; the second vector lifts class 1 by 2.5.
    let spec = ModelSpec { input_dim: 1, hidden_dims: vec![], num_classes: 2, mode: Mode::FullFt, ..ModelSpec::default() };
    let init: ParamTree = [
        ("layer0.weight".to_string(), Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()),
        ("layer0.bias".to_string(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()),
    ]
    .into_iter()
    .collect();
    let model = Model::new(&spec, &init, &init).unwrap();
    let nu1 = TaskVector { delta: init.zeros_like(), mode: Mode::FullFt, task_id: "a".into() };
    let mut delta = init.zeros_like();
    delta.insert("layer0.bias", Tensor::new(vec![2], vec![0.0, 2.5]).unwrap());
    let nu2 = TaskVector { delta, mode: Mode::FullFt, task_id: "b".into() };
    let data = rows(&[-2.0, -1.0, 1.0, 2.0], 1, vec![1, 1, 0, 0]);
    // Only x = 1 on the first task changes its prediction.
    let xi = disentanglement_error(&model, &nu1, &nu2, 1.0, 1.0, (&data, &data)).unwrap();
    assert_eq!(xi, 0.25);
}

#[test]
fn resolution_two_grid_equals_direct_calls() {
    let model = small(Mode::Lora);
    let ts = suite(4);
    let (d1, d2) = (&ts.tasks[0].test, &ts.tasks[1].test);
    let a = random_vector(&model, "a", 2.0, 3);
    let b = random_vector(&model, "b", 2.0, 4);
    let axis = [-1.0, 2.0];
    let grid = disentanglement_grid(&model, &a, &b, &axis, (d1, d2)).unwrap();
    for (i, &l1) in axis.iter().enumerate() {
        for (j, &l2) in axis.iter().enumerate() {
            let direct = disentanglement_error(&model, &a, &b, l1, l2, (d1, d2)).unwrap();
            assert_eq!(grid.xi_raw[i][j], direct);
            assert_eq!(grid.xi[i][j], direct / 2.0);
        }
    }
}

#[test]
fn disjoint_adapter_directions_do_not_interfere() {
    // Inputs of the two tasks live on disjoint coordinates, and each rank-one
    // adapter direction reads only its own task's coordinates.
    let spec = ModelSpec { input_dim: 4, hidden_dims: vec![5], num_classes: 3, lora_rank: 2, mode: Mode::Llora, ..ModelSpec::default() };
    let model = Model::build(&spec, 9).unwrap();
    let mut phi0 = model.init().clone();
    phi0.insert("layer0.lora_a", Tensor::matrix(2, 4, vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, -0.5]).unwrap());
    let model = Model::new(&spec, model.theta0(), &phi0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut block = |col: usize| {
        let mut d = phi0.zeros_like();
        let b: Vec<f64> = (0..10).map(|i| if i % 2 == col { 3.0 * rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        d.insert("layer0.lora_b", Tensor::matrix(5, 2, b).unwrap());
        d
    };
    let nu1 = TaskVector { delta: block(0), mode: Mode::Llora, task_id: "a".into() };
    let nu2 = TaskVector { delta: block(1), mode: Mode::Llora, task_id: "b".into() };
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    for _ in 0..40 {
        x1.extend([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0, 0.0]);
        x2.extend([0.0, 0.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
    }
    let (d1, d2) = (rows(&x1, 4, vec![0; 40]), rows(&x2, 4, vec![0; 40]));
    let axis: Vec<f64> = (0..7).map(|i| -1.0 + 0.5 * i as f64).collect();
    let grid = disentanglement_grid(&model, &nu1, &nu2, &axis, (&d1, &d2)).unwrap();
    assert!(grid.xi_raw.iter().flatten().all(|&v| v < 0.05), "{:?}", grid.xi_raw);
}

#[test]
fn landscape_matches_direct_evaluation() {
    let model = small(Mode::FullFt);
    let ts = suite(4);
    let (d1, d2) = (&ts.tasks[0].test, &ts.tasks[1].test);
    let p1 = model.init().add(&random_vector(&model, "a", 0.5, 5).delta).unwrap();
    let p2 = model.init().add(&random_vector(&model, "b", 0.5, 6).delta).unwrap();
    let axis = [-1.0, 0.5, 2.0];
    let grid = loss_landscape_grid(&model, &p1, &p2, &axis, &axis, (d1, d2)).unwrap();
    let (f0, f1, f2) = (model.init().flatten(), p1.flatten(), p2.flatten());
    for (i, &l1) in axis.iter().enumerate() {
        for (j, &l2) in axis.iter().enumerate() {
            let p: Vec<f64> = (0..f0.len()).map(|k| f0[k] + l1 * (f1[k] - f0[k]) + l2 * (f2[k] - f0[k])).collect();
            let t = ParamTree::from_flat(&model.init().layout(), &p).unwrap();
            let direct = joint_loss(&model, &t, d1, d2).unwrap();
            assert!((grid.loss[i][j] - direct).abs() <= 1e-9 * direct.max(1.0));
        }
    }
    let flat = loss_landscape_grid(&model, model.init(), model.init(), &axis, &axis, (d1, d2)).unwrap();
    let c = flat.loss[0][0];
    assert!(flat.loss.iter().flatten().all(|&v| (v - c).abs() <= 1e-12 * c));
}

#[test]
fn normalized_scores_by_hand() {
    assert!((normalized_score(0.45, 0.9).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(normalized_score(0.8, 0.8).unwrap(), 1.0);
    assert!(normalized_score(0.5, 0.0).is_err());
}

#[test]
fn report_mean_and_population_std() {
    let result = |subset: &[&str], n: f64| SubsetResult {
        algorithm: Algorithm::TaskArithmetic,
        mode: Mode::Llora,
        subset: subset.iter().map(|s| s.to_string()).collect(),
        scores: vec![TaskScore { task: subset[0].into(), absolute: n, single_task: 1.0, normalized: n }],
    };
    let report = aggregate_report(&[result(&["a", "b"], 0.6), result(&["a", "c"], 0.8)]).unwrap();
    let row = report.overall(Algorithm::TaskArithmetic, Mode::Llora).unwrap();
    assert!((row.mean - 0.7).abs() < 1e-12 && (row.std - 0.1).abs() < 1e-12);
    let single = aggregate_report(&[result(&["a", "b"], 0.6)]).unwrap();
    assert_eq!(single.overall(Algorithm::TaskArithmetic, Mode::Llora).unwrap().std, 0.0);
}

#[test]
fn ntk_zero_step_and_linear_model() {
    let ts = suite(4);
    let batch = &ts.tasks[0].train.select(&(0..16).collect::<Vec<_>>());
    let check = ntk_one_step_check(&small(Mode::Llora), batch, 0.0, &Optimizer::Sgd, 64).unwrap();
    assert!(check.predicted.iter().chain(&check.observed).all(|&v| v == 0.0));

    let spec = ModelSpec { input_dim: 4, hidden_dims: vec![], mode: Mode::FullLinear, ..ModelSpec::default() };
    let linear = Model::build(&spec, 1).unwrap();
    let check = ntk_one_step_check(&linear, batch, 0.1, &Optimizer::Sgd, 64).unwrap();
    assert!(check.relative_error <= 1e-9, "{}", check.relative_error);
}

#[test]
fn adapter_training_leaves_backbone_untouched() {
    let model = small(Mode::Lora);
    let before = model.theta0().clone();
    let ck = finetune(&model, 2, model.init(), &suite(4).tasks[0], &TrainConfig { steps: 20, ..TrainConfig::default() }).unwrap();
    assert_eq!(model.theta0(), &before);
    assert_eq!(ck.theta0_digest, before.digest());
    assert_ne!(ck.trained, ck.initial);
}

#[test]
fn linear_network_trains_identically_in_both_full_modes() {
    let ts = suite(4);
    let spec = ModelSpec { input_dim: 4, hidden_dims: vec![], mode: Mode::FullFt, ..ModelSpec::default() };
    let full = Model::build(&spec, 3).unwrap();
    let lin = Model::build(&spec.with_mode(Mode::FullLinear), 3).unwrap();
    let cfg = TrainConfig { steps: 40, batch_size: 16, learning_rate: 0.05, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
    let (a, la) = finetune_with_log(&full, 3, full.init(), &ts.tasks[0], &cfg).unwrap();
    let (b, lb) = finetune_with_log(&lin, 3, lin.init(), &ts.tasks[0], &cfg).unwrap();
    for (x, y) in la.iter().zip(&lb) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-9);
    }
    for (x, y) in a.trained.flatten().iter().zip(b.trained.flatten()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn random_model_scores_chance_on_random_labels() {
    let model = small(Mode::FullFt);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 6000;
    let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let acc = evaluate(&model, model.init(), &rows(&x, 4, y)).unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 0.03, "{acc}");
}
