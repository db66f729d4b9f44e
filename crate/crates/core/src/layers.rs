//! Dense layers, activations and batch normalization, plus the parameter
//! store and SGD optimizer that every module owns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GradientMap, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Projector,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

/// Ordered, uniquely named parameters of one module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Build(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Graph leaves created for a [`ParamSet`] during one forward pass.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
}

impl ParamBinding {
    pub fn new(params: &ParamSet) -> Self {
        ParamBinding {
            vars: vec![None; params.len()],
        }
    }

    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.param(params.value(id).clone()))
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Per-parameter adjoints in ParamSet order; unbound parameters get zeros.
    pub fn collect(&self, params: &ParamSet, grads: &GradientMap) -> Vec<Matrix> {
        params
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, sqrt(2/in)), for layers feeding a relu.
    He,
    /// N(0, sqrt(1/in)), for layers feeding a tanh or nothing.
    Xavier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { out: usize },
    BatchNorm,
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_size: usize,
    pub out_size: usize,
    pub init: InitScheme,
}

impl DenseLayer {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        group: ParamGroup,
        in_size: usize,
        out_size: usize,
        init: InitScheme,
        rng: &mut RngState,
    ) -> Result<Self> {
        let std = match init {
            InitScheme::He => (2.0 / in_size as f64).sqrt(),
            InitScheme::Xavier => (1.0 / in_size as f64).sqrt(),
        };
        let weight = params.add(format!("{prefix}.weight"), group, rng.normal(in_size, out_size, 0.0, std))?;
        let bias = params.add(format!("{prefix}.bias"), group, Matrix::zeros(1, out_size))?;
        Ok(DenseLayer {
            weight,
            bias,
            in_size,
            out_size,
            init,
        })
    }

    /// `x W + b`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, bind: &mut ParamBinding, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_size {
            return Err(Error::shape(
                "dense_forward",
                format!("input has {} columns, layer expects {}", g.value(x).cols(), self.in_size),
            ));
        }
        let w = bind.bind(g, params, self.weight);
        let b = bind.bind(g, params, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; optionally fold them into the
    /// running estimates.
    Train { track_stats: bool },
    /// Normalize with the running estimates.
    Eval,
}

impl BnMode {
    pub const TRAIN: BnMode = BnMode::Train { track_stats: true };
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub momentum: f64,
    pub eps: f64,
    prefix: String,
}

impl BatchNorm1d {
    pub fn new(params: &mut ParamSet, prefix: &str, group: ParamGroup, width: usize) -> Result<Self> {
        let gamma = params.add(format!("{prefix}.gamma"), group, Matrix::ones(1, width))?;
        let beta = params.add(format!("{prefix}.beta"), group, Matrix::zeros(1, width))?;
        Ok(BatchNorm1d {
            gamma,
            beta,
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::ones(1, width),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            prefix: prefix.to_string(),
        })
    }

    pub fn width(&self) -> usize {
        self.running_mean.cols()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses only the running estimates.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let (n, c) = g.value(x).shape();
        if c != self.width() {
            return Err(Error::shape(
                "batchnorm_forward",
                format!("input has {c} columns, layer expects {}", self.width()),
            ));
        }
        let gamma = bind.bind(g, params, self.gamma);
        let beta = bind.bind(g, params, self.beta);
        let xhat = if let BnMode::Train { track_stats } = mode {
            if n < 2 {
                return Err(Error::domain(
                    "batchnorm_forward",
                    "train mode needs at least 2 rows",
                ));
            }
            let mu = g.mean_columns(x)?;
            let xc = g.sub(x, mu)?;
            let sq = g.square(xc)?;
            let var = g.mean_columns(sq)?;
            let shifted = g.offset(var, self.eps)?;
            let std = g.sqrt(shifted)?;

            if track_stats {
                let unbias = n as f64 / (n as f64 - 1.0);
                let m = self.momentum;
                let batch_mean = g.value(mu).clone();
                let batch_var = g.value(var).clone();
                self.running_mean = self.running_mean.zip_map(&batch_mean, |r, b| (1.0 - m) * r + m * b);
                self.running_var = self
                    .running_var
                    .zip_map(&batch_var, |r, b| (1.0 - m) * r + m * b * unbias);
            }

            g.div(xc, std)?
        } else {
            let mu = g.constant(self.running_mean.clone());
            let std = g.constant(self.running_var.map(|v| (v + self.eps).sqrt()));
            let xc = g.sub(x, mu)?;
            g.div(xc, std)?
        };
        let scaled = g.hadamard(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNorm1d),
    Relu,
    Tanh,
}

/// A feed-forward sequence of layers whose parameters live in a shared
/// [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Stack {
    pub layers: Vec<Layer>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Stack {
    pub fn identity(width: usize) -> Self {
        Stack {
            layers: Vec::new(),
            in_width: width,
            out_width: width,
        }
    }

    /// Dense weights use He init when the next activation is relu and
    /// Xavier-like init otherwise.
    pub fn build(
        specs: &[LayerSpec],
        in_width: usize,
        params: &mut ParamSet,
        prefix: &str,
        group: ParamGroup,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut width = in_width;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let layer = match *spec {
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Build(format!("{name}: dense layer with zero outputs")));
                    }
                    let next_act = specs[i + 1..]
                        .iter()
                        .find(|s| matches!(s, LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Dense { .. }));
                    let init = match next_act {
                        Some(LayerSpec::Relu) => InitScheme::He,
                        _ => InitScheme::Xavier,
                    };
                    let d = DenseLayer::new(params, &name, group, width, out, init, rng)?;
                    width = out;
                    Layer::Dense(d)
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm1d::new(params, &name, group, width)?),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
            };
            layers.push(layer);
        }
        Ok(Stack {
            layers,
            in_width,
            out_width: width,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        bind: &mut ParamBinding,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(g, params, bind, h)?,
                Layer::BatchNorm(bn) => bn.forward(g, params, bind, h, mode)?,
                Layer::Relu => g.relu(h)?,
                Layer::Tanh => g.tanh(h)?,
            };
        }
        Ok(h)
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm1d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm1d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "sgd needs lr > 0, momentum in [0,1), weight_decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum; one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Self {
        Sgd {
            config,
            velocity: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    /// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{} is {:?}, gradient is {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
            let pv = p.value.data_mut();
            for ((w, &dg), vel) in pv.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = momentum * *vel + dg + weight_decay * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Stand-alone form of one SGD update.
pub fn sgd_step(
    params: &mut ParamSet,
    opt: &mut Sgd,
    grads: &[Matrix],
) -> Result<()> {
    opt.step(params, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl From<&Matrix> for TensorRecord {
    fn from(m: &Matrix) -> Self {
        TensorRecord {
            shape: [m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }
}

impl TensorRecord {
    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.shape[0], self.shape[1], self.values.clone())
    }
}

/// JSON checkpoint: `{ "<name>": { "shape": [r, c], "values": [...] } }`,
/// row-major, keys sorted. Floats are written in shortest round-trip form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.insert(name.into(), m.into());
    }

    pub fn get(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::domain("checkpoint", format!("missing tensor {name}")))?
            .to_matrix()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parameters and batch-norm running statistics of one set of stacks.
pub fn checkpoint_of(params: &ParamSet, stacks: &[&Stack], prefix: &str) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for p in params.iter() {
        ck.insert(format!("{prefix}{}", p.name), &p.value);
    }
    for s in stacks {
        for bn in s.batchnorms() {
            ck.insert(format!("{prefix}{}.running_mean", bn.prefix), &bn.running_mean);
            ck.insert(format!("{prefix}{}.running_var", bn.prefix), &bn.running_var);
        }
    }
    ck
}

/// Inverse of [`checkpoint_of`]; shapes must match exactly.
pub fn restore_from(
    ck: &Checkpoint,
    params: &mut ParamSet,
    stacks: &mut [&mut Stack],
    prefix: &str,
) -> Result<()> {
    for p in params.iter_mut() {
        let m = ck.get(&format!("{prefix}{}", p.name))?;
        if m.shape() != p.value.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{} stored as {:?}, expected {:?}", p.name, m.shape(), p.value.shape()),
            ));
        }
        p.value = m;
    }
    for s in stacks.iter_mut() {
        for bn in s.batchnorms_mut() {
            bn.running_mean = ck.get(&format!("{prefix}{}.running_mean", bn.prefix))?;
            bn.running_var = ck.get(&format!("{prefix}{}.running_var", bn.prefix))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;

    fn dense_fixture(w: Matrix, b: Matrix) -> (ParamSet, DenseLayer) {
        let mut ps = ParamSet::new();
        let (i, o) = w.shape();
        let weight = ps.add("w", ParamGroup::Encoder, w).unwrap();
        let bias = ps.add("b", ParamGroup::Encoder, b).unwrap();
        (
            ps,
            DenseLayer {
                weight,
                bias,
                in_size: i,
                out_size: o,
                init: InitScheme::Xavier,
            },
        )
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let (ps, d) = dense_fixture(Matrix::identity(3), Matrix::zeros(1, 3));
        let mut g = Graph::new();
        let xm = RngState::new(1).normal(4, 3, 0.0, 1.0);
        let x = g.constant(xm.clone());
        let mut bind = ParamBinding::new(&ps);
        let y = d.forward(&mut g, &ps, &mut bind, x).unwrap();
        assert_eq!(g.value(y), &xm);

        let (ps, d) = dense_fixture(Matrix::from_rows(&[[1.0], [1.0]]), Matrix::scalar(0.5));
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[[1.0, 1.0]]));
        let mut bind = ParamBinding::new(&ps);
        let y = d.forward(&mut g, &ps, &mut bind, x).unwrap();
        assert_eq!(g.value(y), &Matrix::scalar(2.5));

        let mut g = Graph::new();
        let bad = g.constant(Matrix::zeros(1, 3));
        assert!(d.forward(&mut g, &ps, &mut ParamBinding::new(&ps), bad).is_err());
    }

    #[test]
    fn dense_weight_gradient_is_xt_ones() {
        let mut rng = RngState::new(2);
        let (ps, d) = dense_fixture(rng.normal(3, 2, 0.0, 1.0), rng.normal(1, 2, 0.0, 1.0));
        let xm = rng.normal(5, 3, 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(xm.clone());
        let mut bind = ParamBinding::new(&ps);
        let y = d.forward(&mut g, &ps, &mut bind, x).unwrap();
        let root = g.sum_all(y).unwrap();
        let grads = g.backward(root).unwrap();
        let w = bind.var(d.weight).unwrap();
        let expected = xm.transpose().matmul(&Matrix::ones(5, 2)).unwrap();
        assert!(grads.get(w).unwrap().max_abs_diff(&expected) < 1e-12);
        assert!(fd_check(&g, root, w, 1e-4).unwrap() < 1e-4);
        assert!(fd_check(&g, root, bind.var(d.bias).unwrap(), 1e-4).unwrap() < 1e-4);
    }

    fn bn_run(bn: &mut BatchNorm1d, ps: &ParamSet, x: &Matrix, train: bool) -> Result<Matrix> {
        let mode = if train { BnMode::TRAIN } else { BnMode::Eval };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut bind = ParamBinding::new(ps);
        let y = bn.forward(&mut g, ps, &mut bind, xv, mode)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", ParamGroup::Projector, 2).unwrap();
        let x = RngState::new(3).normal(200, 2, 5.0, 2.0);
        let y = bn_run(&mut bn, &ps, &x, true).unwrap();
        let (m, s) = y.column_mean_std().unwrap();
        for j in 0..2 {
            assert!(m.get(0, j).abs() <= 1e-6);
            assert!((s.get(0, j) - 1.0).abs() <= 1e-3);
        }
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchnorm_zero_scale_and_errors() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", ParamGroup::Projector, 3).unwrap();
        for p in ps.iter_mut() {
            if p.name.ends_with("gamma") {
                p.value = Matrix::zeros(1, 3);
            } else {
                p.value = Matrix::filled(1, 3, 7.0);
            }
        }
        let x = RngState::new(4).normal(5, 3, 0.0, 1.0);
        let y = bn_run(&mut bn, &ps, &x, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(matches!(
            bn_run(&mut bn, &ps, &Matrix::zeros(1, 3), true),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn batchnorm_eval_is_batch_independent() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", ParamGroup::Projector, 3).unwrap();
        let mut rng = RngState::new(5);
        for _ in 0..5 {
            bn_run(&mut bn, &ps, &rng.normal(8, 3, 1.0, 3.0), true).unwrap();
        }
        let probe = rng.normal(4, 3, 0.0, 1.0);
        let first = bn_run(&mut bn, &ps, &probe, false).unwrap();
        let _ = bn_run(&mut bn, &ps, &rng.normal(9, 3, -4.0, 1.0), false).unwrap();
        let again = bn_run(&mut bn, &ps, &probe, false).unwrap();
        assert_eq!(first, again);
        let row = bn_run(&mut bn, &ps, &probe.select_rows(&[2]), false).unwrap();
        assert_eq!(row.row(0), first.row(2));
    }

    #[test]
    fn batchnorm_gradients_pass_fd() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", ParamGroup::Projector, 3).unwrap();
        let mut rng = RngState::new(6);
        for p in ps.iter_mut() {
            p.value = rng.normal(1, 3, 1.0, 0.5);
        }
        let mut g = Graph::new();
        let x = g.param(rng.normal(6, 3, 0.0, 1.0));
        let mut bind = ParamBinding::new(&ps);
        let y = bn.forward(&mut g, &ps, &mut bind, x, BnMode::TRAIN).unwrap();
        let t = g.tanh(y).unwrap();
        let sq = g.square(t).unwrap();
        let root = g.sum_all(sq).unwrap();
        assert!(fd_check(&g, root, x, 1e-5).unwrap() < 1e-4);
        assert!(fd_check(&g, root, bind.var(bn.gamma).unwrap(), 1e-5).unwrap() < 1e-4);
        assert!(fd_check(&g, root, bind.var(bn.beta).unwrap(), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn init_contract() {
        let specs = [
            LayerSpec::Dense { out: 1000 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Tanh,
        ];
        let build = |seed| {
            let mut ps = ParamSet::new();
            let s = Stack::build(&specs, 100, &mut ps, "enc", ParamGroup::Encoder, &mut RngState::new(seed)).unwrap();
            (ps, s)
        };
        let (ps, stack) = build(7);
        assert_eq!(ps, build(7).0);
        assert_eq!(stack.out_width, 4);
        for p in ps.iter().filter(|p| p.name.ends_with("bias") || p.name.ends_with("beta")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
        let w = &ps.by_name("enc.0.weight").unwrap().value;
        let mean = w.sum() / w.len() as f64;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let he = (2.0f64 / 100.0).sqrt();
        assert!((sd - he).abs() < 0.1 * he, "sd {sd}");
        match &stack.layers[2] {
            Layer::Dense(d) => assert_eq!(d.init, InitScheme::Xavier),
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_contract() {
        let mut ps = ParamSet::new();
        ps.add("w", ParamGroup::Encoder, Matrix::scalar(1.0)).unwrap();
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &ps,
        );
        sgd_step(&mut ps, &mut opt, &[Matrix::scalar(0.0)]).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.item(), 1.0);
        sgd_step(&mut ps, &mut opt, &[Matrix::scalar(0.5)]).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.item(), 0.95);
        assert!(opt.step(&mut ps, &[Matrix::zeros(2, 1)]).is_err());
        assert!(opt.step(&mut ps, &[]).is_err());
    }

    #[test]
    fn sgd_minimizes_quadratic_bowl() {
        let mut ps = ParamSet::new();
        ps.add("w", ParamGroup::Encoder, Matrix::scalar(1.0)).unwrap();
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &ps,
        );
        for _ in 0..100 {
            let w = ps.iter().next().unwrap().value.item();
            opt.step(&mut ps, &[Matrix::scalar(2.0 * w)]).unwrap();
        }
        assert!(ps.iter().next().unwrap().value.item().abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let specs = [LayerSpec::Dense { out: 5 }, LayerSpec::BatchNorm, LayerSpec::Relu];
        let mut ps = ParamSet::new();
        let mut stack = Stack::build(&specs, 3, &mut ps, "p", ParamGroup::Projector, &mut RngState::new(8)).unwrap();
        stack.batchnorms_mut().next().unwrap().running_mean = RngState::new(9).normal(1, 5, 0.0, 1.0);
        let ck = checkpoint_of(&ps, &[&stack], "m0.");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);

        let mut ps2 = ParamSet::new();
        let mut stack2 = Stack::build(&specs, 3, &mut ps2, "p", ParamGroup::Projector, &mut RngState::new(99)).unwrap();
        restore_from(&loaded, &mut ps2, &mut [&mut stack2], "m0.").unwrap();
        assert_eq!(ps2, ps);
        assert_eq!(
            stack2.batchnorms().next().unwrap().running_mean,
            stack.batchnorms().next().unwrap().running_mean
        );
    }
}
