//! MLP classifier with low-rank adapters, under the four fine-tuning
//! paradigms.
//!
//! Parameter paths are `layer{i}.weight` (`out × in`), `layer{i}.bias`,
//! `layer{i}.lora_a` (`r × in`) and `layer{i}.lora_b` (`out × r`). The
//! adapted weight of a layer is `W0 + (alpha / r) · B · A`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamFunction};
use crate::error::{contract, Error, Result};
use crate::params::{Layout, ParamTree};
use crate::scalar::Scalar;
use crate::seeds;
use crate::tensor::Tensor;

/// Which parameters are trained, and whether the model is used through its
/// first-order expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// All backbone weights, nonlinear.
    FullFt,
    /// All backbone weights, tangent model.
    FullLinear,
    /// Adapters only, nonlinear.
    Lora,
    /// Adapters only, tangent model over the adapters.
    Llora,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::FullFt, Mode::FullLinear, Mode::Lora, Mode::Llora];

    pub fn is_peft(self) -> bool {
        matches!(self, Mode::Lora | Mode::Llora)
    }

    pub fn is_linearized(self) -> bool {
        matches!(self, Mode::FullLinear | Mode::Llora)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::FullFt => "full_ft",
            Mode::FullLinear => "full_linear",
            Mode::Lora => "lora",
            Mode::Llora => "llora",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full_ft" | "fullft" | "full" => Ok(Mode::FullFt),
            "full_linear" | "fulllinear" => Ok(Mode::FullLinear),
            "lora" => Ok(Mode::Lora),
            "llora" | "l_lora" => Ok(Mode::Llora),
            _ => Err(contract(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Standard deviation of the Gaussian adapter init `A`.
    #[serde(default = "default_lora_init_std")]
    pub lora_init_std: f64,
    pub mode: Mode,
}

fn default_lora_init_std() -> f64 {
    0.02
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 16,
            hidden_dims: vec![64, 64],
            num_classes: 3,
            lora_rank: 3,
            lora_alpha: 2.0,
            lora_init_std: default_lora_init_std(),
            mode: Mode::Lora,
        }
    }
}

impl ModelSpec {
    pub fn with_mode(&self, mode: Mode) -> Self {
        ModelSpec { mode, ..self.clone() }
    }

    /// `(in, out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.lora_init_std >= 0.0 && self.lora_init_std.is_finite()) {
            return bad(format!("lora_init_std must be finite and non-negative, got {}", self.lora_init_std));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be positive".into());
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if self.mode.is_peft() {
            for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
                if self.lora_rank > fan_in.min(fan_out) {
                    return bad(format!(
                        "lora_rank {} exceeds min(in, out) = {} of layer {i}",
                        self.lora_rank,
                        fan_in.min(fan_out)
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn backbone_layout(&self) -> Layout {
        let mut t = ParamTree::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            t.insert(weight_path(i), Tensor::zeros(vec![fan_out, fan_in]));
            t.insert(bias_path(i), Tensor::zeros(vec![fan_out]));
        }
        t.layout()
    }

    /// Layout of the parameters this spec's mode trains.
    pub fn trainable_layout(&self) -> Layout {
        if !self.mode.is_peft() {
            return self.backbone_layout();
        }
        let r = self.lora_rank;
        let mut t = ParamTree::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            t.insert(lora_a_path(i), Tensor::zeros(vec![r, fan_in]));
            t.insert(lora_b_path(i), Tensor::zeros(vec![fan_out, r]));
        }
        t.layout()
    }
}

fn weight_path(i: usize) -> String {
    format!("layer{i}.weight")
}
fn bias_path(i: usize) -> String {
    format!("layer{i}.bias")
}
fn lora_a_path(i: usize) -> String {
    format!("layer{i}.lora_a")
}
fn lora_b_path(i: usize) -> String {
    format!("layer{i}.lora_b")
}

/// Seeded backbone and the mode's initial trainable parameters.
///
/// The backbone depends only on `seed` and the layer widths, so every mode
/// built from the same seed shares the same frozen weights (and the two
/// adapter modes share the same adapter initialization).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(ParamTree, ParamTree)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta0 = ParamTree::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        theta0.insert(weight_path(i), Tensor::from_fn(vec![fan_out, fan_in], |_| normal.sample(&mut rng)));
        theta0.insert(bias_path(i), Tensor::from_fn(vec![fan_out], |_| normal.sample(&mut rng)));
    }
    if !spec.mode.is_peft() {
        return Ok((theta0.clone(), theta0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "lora-init", 0));
    let normal = Normal::new(0.0, spec.lora_init_std).expect("valid std");
    let r = spec.lora_rank;
    let mut phi0 = ParamTree::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        phi0.insert(lora_a_path(i), Tensor::from_fn(vec![r, fan_in], |_| normal.sample(&mut rng)));
        phi0.insert(lora_b_path(i), Tensor::zeros(vec![fan_out, r]));
    }
    Ok((theta0, phi0))
}

#[derive(Clone, Debug)]
struct LayerPlan {
    fan_in: usize,
    fan_out: usize,
    /// Frozen weight and bias; used directly in adapter modes.
    w0: Vec<f64>,
    b0: Vec<f64>,
    /// Offsets into the flat trainable vector.
    weight: usize,
    bias: usize,
    lora_a: usize,
    lora_b: usize,
}

/// The nonlinear network `f_θ0(x; φ)` for one spec and frozen backbone.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    theta0: ParamTree,
    layout: Layout,
    plan: Vec<LayerPlan>,
}

impl Network {
    pub fn new(spec: &ModelSpec, theta0: &ParamTree) -> Result<Self> {
        spec.validate()?;
        if theta0.layout() != spec.backbone_layout() {
            return Err(contract("backbone parameters do not match the model spec"));
        }
        let layout = spec.trainable_layout();
        let off = |p: String| layout.offset(&p).unwrap_or(usize::MAX);
        let plan = spec
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| LayerPlan {
                fan_in,
                fan_out,
                w0: theta0.get(&weight_path(i)).expect("checked layout").data().to_vec(),
                b0: theta0.get(&bias_path(i)).expect("checked layout").data().to_vec(),
                weight: off(weight_path(i)),
                bias: off(bias_path(i)),
                lora_a: off(lora_a_path(i)),
                lora_b: off(lora_b_path(i)),
            })
            .collect();
        Ok(Network { spec: spec.clone(), theta0: theta0.clone(), layout, plan })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn theta0(&self) -> &ParamTree {
        &self.theta0
    }

    pub fn trainable_layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_trainable(&self) -> usize {
        self.layout.num_values()
    }

    /// Logits for a flat trainable vector at any scalar type.
    pub fn logits_generic<S: Scalar>(&self, p: &[S], x: &Tensor<f64>) -> Tensor<S> {
        debug_assert_eq!(p.len(), self.num_trainable());
        let mut h: Tensor<S> = x.lift();
        let last = self.plan.len() - 1;
        for (i, l) in self.plan.iter().enumerate() {
            let (w, b): (Tensor<S>, Vec<S>) = if self.spec.mode.is_peft() {
                let r = self.spec.lora_rank;
                let a = slice_matrix(p, l.lora_a, r, l.fan_in);
                let bm = slice_matrix(p, l.lora_b, l.fan_out, r);
                let delta = bm.matmul(&a).expect("adapter shapes").scale(S::constant(self.spec.lora_scale()));
                let w0 = Tensor::matrix(l.fan_out, l.fan_in, l.w0.iter().map(|&v| S::constant(v)).collect())
                    .expect("backbone shape");
                (w0.add(&delta).expect("adapter shapes"), l.b0.iter().map(|&v| S::constant(v)).collect())
            } else {
                (
                    slice_matrix(p, l.weight, l.fan_out, l.fan_in),
                    p[l.bias..l.bias + l.fan_out].to_vec(),
                )
            };
            let z = h.matmul_t(&w).expect("layer shapes").add_row(&b).expect("bias shape");
            h = if i == last { z } else { z.tanh() };
        }
        h
    }

    fn check_input(&self, x: &Tensor<f64>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(crate::error::dimension(format!(
                "input of shape {:?} for input_dim {}",
                x.shape(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn check_trainable(&self, t: &ParamTree) -> Result<()> {
        if t.layout() != self.layout {
            return Err(contract(format!(
                "trainable parameters are not congruent with the {} trainable set",
                self.spec.mode
            )));
        }
        Ok(())
    }

    /// Nonlinear forward pass.
    pub fn forward(&self, trainable: &ParamTree, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_trainable(trainable)?;
        self.check_input(x)?;
        Ok(self.logits_generic(&trainable.flatten(), x))
    }

    /// Tangent-model forward pass around `lin.phi0()`.
    pub fn forward_linearized(&self, lin: &LinearizedState, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_trainable(lin.phi0())?;
        self.check_trainable(&lin.phi)?;
        self.check_input(x)?;
        let f = LogitsFn { net: self, x };
        let out = autodiff::linearize(&f, &lin.phi0().flatten(), &lin.phi.flatten())?;
        Ok(Tensor::matrix(x.rows(), self.spec.num_classes, out)?)
    }
}

fn slice_matrix<S: Scalar>(p: &[S], off: usize, rows: usize, cols: usize) -> Tensor<S> {
    Tensor::matrix(rows, cols, p[off..off + rows * cols].to_vec()).expect("layout offsets")
}

/// Flattened logits of a fixed batch as a function of the trainable vector.
pub struct LogitsFn<'a> {
    pub net: &'a Network,
    pub x: &'a Tensor<f64>,
}

impl ParamFunction for LogitsFn<'_> {
    fn num_params(&self) -> usize {
        self.net.num_trainable()
    }

    fn eval<S: Scalar>(&self, params: &[S]) -> Vec<S> {
        self.net.logits_generic(params, self.x).into_data()
    }
}

/// Trainable parameters of a tangent model together with the frozen
/// expansion point.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedState {
    phi0: ParamTree,
    pub phi: ParamTree,
}

impl LinearizedState {
    /// Wrap at `phi0`; the current parameters start equal to it.
    pub fn new(phi0: ParamTree) -> Self {
        LinearizedState { phi: phi0.clone(), phi0 }
    }

    pub fn with_phi(phi0: ParamTree, phi: ParamTree) -> Result<Self> {
        phi0.ensure_congruent(&phi, "linearized state")?;
        Ok(LinearizedState { phi0, phi })
    }

    pub fn phi0(&self) -> &ParamTree {
        &self.phi0
    }
}

/// Nonlinear forward pass of `spec`'s network.
pub fn forward(spec: &ModelSpec, theta0: &ParamTree, trainable: &ParamTree, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    Network::new(spec, theta0)?.forward(trainable, x)
}

/// Tangent-model forward pass; only valid for the linearized modes.
pub fn forward_linearized(
    spec: &ModelSpec,
    theta0: &ParamTree,
    lin: &LinearizedState,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    if !spec.mode.is_linearized() {
        return Err(contract(format!("mode {} is not a linearized mode", spec.mode)));
    }
    Network::new(spec, theta0)?.forward_linearized(lin, x)
}

/// A network plus the initial trainable parameters: everything needed to
/// evaluate any trainable tree under the spec's mode.
#[derive(Clone, Debug)]
pub struct Model {
    net: Network,
    init: ParamTree,
    init_flat: Vec<f64>,
}

impl Model {
    pub fn new(spec: &ModelSpec, theta0: &ParamTree, init: &ParamTree) -> Result<Self> {
        let net = Network::new(spec, theta0)?;
        net.check_trainable(init)?;
        Ok(Model { init_flat: init.flatten(), init: init.clone(), net })
    }

    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let (theta0, init) = build_model(spec, seed)?;
        Self::new(spec, &theta0, &init)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn spec(&self) -> &ModelSpec {
        self.net.spec()
    }

    pub fn mode(&self) -> Mode {
        self.net.spec.mode
    }

    pub fn theta0(&self) -> &ParamTree {
        self.net.theta0()
    }

    /// Initial trainable parameters (φ0, or θ0 for the full modes).
    pub fn init(&self) -> &ParamTree {
        &self.init
    }

    pub fn init_flat(&self) -> &[f64] {
        &self.init_flat
    }

    pub fn check_trainable(&self, t: &ParamTree) -> Result<()> {
        self.net.check_trainable(t)
    }

    /// Mode-aware logits for a flat trainable vector.
    pub fn logits_flat<S: Scalar>(&self, p: &[S], x: &Tensor<f64>) -> Tensor<S> {
        if self.mode().is_linearized() {
            let f = LogitsFn { net: &self.net, x };
            let out = autodiff::linearized_eval(&f, &self.init_flat, p);
            Tensor::matrix(x.rows(), self.spec().num_classes, out).expect("logit shape")
        } else {
            self.net.logits_generic(p, x)
        }
    }

    pub fn logits(&self, trainable: &ParamTree, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.net.check_trainable(trainable)?;
        self.net.check_input(x)?;
        Ok(self.logits_flat(&trainable.flatten(), x))
    }

    pub fn predict(&self, trainable: &ParamTree, x: &Tensor<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(trainable, x)?))
    }
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(vec![rows, dim], |_| n.sample(&mut rng))
    }

    fn perturbed(t: &ParamTree, seed: u64, eps: f64) -> ParamTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, eps).unwrap();
        t.map(|v| v + n.sample(&mut rng))
    }

    #[test]
    fn adapters_are_identity_at_init() {
        let spec = ModelSpec::default();
        let (theta0, phi0) = build_model(&spec, 3).unwrap();
        let x = batch(5, 16, 1);
        let with_adapters = forward(&spec, &theta0, &phi0, &x).unwrap();
        let full = spec.with_mode(Mode::FullFt);
        let backbone = forward(&full, &theta0, &theta0, &x).unwrap();
        for (a, b) in with_adapters.data().iter().zip(backbone.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::default();
        assert_eq!(build_model(&spec, 11).unwrap(), build_model(&spec, 11).unwrap());
        assert_ne!(build_model(&spec, 11).unwrap().0, build_model(&spec, 12).unwrap().0);
    }

    #[test]
    fn modes_share_backbone() {
        let spec = ModelSpec::default();
        let base = build_model(&spec.with_mode(Mode::FullFt), 5).unwrap().0;
        for m in Mode::ALL {
            assert_eq!(build_model(&spec.with_mode(m), 5).unwrap().0, base);
        }
    }

    #[test]
    fn lora_parameter_count_by_hand() {
        // 4→6→3 with r=2: layer0 2·(4+6) = 20, layer1 2·(6+3) = 18.
        let spec = ModelSpec { input_dim: 4, hidden_dims: vec![6], num_classes: 3, lora_rank: 2, ..ModelSpec::default() };
        let (_, phi0) = build_model(&spec, 0).unwrap();
        assert_eq!(phi0.num_values(), 38);
        assert!(phi0.get("layer1.lora_b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_exceeding_layer_is_rejected() {
        let spec = ModelSpec { lora_rank: 4, ..ModelSpec::default() };
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
        // Full modes have no adapters, so the rank is irrelevant.
        assert!(build_model(&spec.with_mode(Mode::FullFt), 0).is_ok());
    }

    #[test]
    fn identical_rows_identical_logits() {
        let spec = ModelSpec::default();
        let (theta0, phi0) = build_model(&spec, 2).unwrap();
        let phi = perturbed(&phi0, 9, 0.1);
        let row = batch(1, 16, 4).into_data();
        let x = Tensor::matrix(2, 16, [row.clone(), row].concat()).unwrap();
        let out = forward(&spec, &theta0, &phi, &x).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn hand_set_single_layer() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            lora_rank: 1,
            lora_alpha: 1.0,
            mode: Mode::FullFt,
            ..ModelSpec::default()
        };
        let mut theta = ParamTree::new();
        theta.insert("layer0.weight", Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        theta.insert("layer0.bias", Tensor::new(vec![2], vec![0.25, -0.5]).unwrap());
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let out = forward(&spec, &theta, &theta, &x).unwrap();
        assert_eq!(out.data(), &[3.0 + 8.0 + 0.25, -3.0 + 2.0 - 0.5]);
    }

    #[test]
    fn incongruent_trainable_is_rejected() {
        let spec = ModelSpec::default();
        let (theta0, _) = build_model(&spec, 0).unwrap();
        let x = batch(1, 16, 0);
        assert!(matches!(forward(&spec, &theta0, &theta0, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn tangent_model_is_exact_at_expansion_point() {
        let spec = ModelSpec::default().with_mode(Mode::Llora);
        let (theta0, phi0) = build_model(&spec, 8).unwrap();
        // Move the expansion point off the B = 0 corner so the check is not trivial.
        let phi0 = perturbed(&phi0, 3, 0.2);
        let x = batch(4, 16, 2);
        let lin = LinearizedState::new(phi0.clone());
        let a = forward_linearized(&spec, &theta0, &lin, &x).unwrap();
        let b = forward(&spec, &theta0, &phi0, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonlinearized_mode_rejects_tangent_forward() {
        let spec = ModelSpec::default();
        let (theta0, phi0) = build_model(&spec, 0).unwrap();
        let lin = LinearizedState::new(phi0);
        assert!(forward_linearized(&spec, &theta0, &lin, &batch(1, 16, 0)).is_err());
    }

    #[test]
    fn linear_network_is_its_own_tangent_model() {
        let spec = ModelSpec {
            input_dim: 3,
            hidden_dims: vec![],
            num_classes: 2,
            lora_rank: 1,
            lora_alpha: 1.0,
            mode: Mode::FullLinear,
            ..ModelSpec::default()
        };
        let (theta0, init) = build_model(&spec, 1).unwrap();
        let theta = perturbed(&init, 5, 0.5);
        let x = batch(3, 3, 6);
        let lin = LinearizedState::with_phi(init, theta.clone()).unwrap();
        let a = forward_linearized(&spec, &theta0, &lin, &x).unwrap();
        let b = forward(&spec, &theta0, &theta, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let t = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }
}
