//! Stacks of decoupled modules (encoder, projector, classifier) trained either
//! with per-module local objectives and truncated gradients, or end to end
//! with a single cross-entropy at the output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    checkpoint_of, restore_from, BnMode, Checkpoint, LayerSpec, ParamBinding, ParamGroup, ParamSet, Sgd, SgdConfig,
    Stack,
};
use crate::losses::{cross_entropy_loss, local_loss, module_total, LossBreakdown, LossConfig};
use crate::tensor::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Deinforeg,
    Bp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectorSpec {
    Identity,
    /// Dense-BN-relu, dense-BN-relu, dense.
    Mlp { hidden: usize, out: usize },
}

impl ProjectorSpec {
    fn layers(&self) -> Vec<LayerSpec> {
        match *self {
            ProjectorSpec::Identity => Vec::new(),
            ProjectorSpec::Mlp { hidden, out } => vec![
                LayerSpec::Dense { out: hidden },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { out: hidden },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { out },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub encoder: Vec<LayerSpec>,
    pub projector: ProjectorSpec,
    pub classifier: Vec<LayerSpec>,
    #[serde(default)]
    pub loss: LossConfig,
}

impl ModuleSpec {
    /// Tanh-then-dense head.
    pub fn tanh_classifier(classes: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::Tanh, LayerSpec::Dense { out: classes }]
    }

    /// BN-relu-dense head.
    pub fn relu_bn_classifier(classes: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::BatchNorm, LayerSpec::Relu, LayerSpec::Dense { out: classes }]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub classes: usize,
    pub mode: TrainingMode,
    pub modules: Vec<ModuleSpec>,
}

impl NetworkSpec {
    /// `depth` modules, each one dense layer of `width` followed by the
    /// activation (plus BN before relu).
    pub fn mlp(
        input_width: usize,
        classes: usize,
        depth: usize,
        width: usize,
        activation: Activation,
        projector: ProjectorSpec,
        loss: LossConfig,
        mode: TrainingMode,
    ) -> Self {
        let encoder = match activation {
            Activation::Tanh => vec![LayerSpec::Dense { out: width }, LayerSpec::Tanh],
            Activation::Relu => vec![LayerSpec::Dense { out: width }, LayerSpec::BatchNorm, LayerSpec::Relu],
        };
        let classifier = match activation {
            Activation::Tanh => ModuleSpec::tanh_classifier(classes),
            Activation::Relu => ModuleSpec::relu_bn_classifier(classes),
        };
        NetworkSpec {
            input_width,
            classes,
            mode,
            modules: (0..depth)
                .map(|_| ModuleSpec {
                    encoder: encoder.clone(),
                    projector: projector.clone(),
                    classifier: classifier.clone(),
                    loss,
                })
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.modules.len()
    }

    /// Checks widths chain across every boundary without allocating
    /// parameters.
    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Build("network needs at least one module".into()));
        }
        if self.classes < 2 {
            return Err(Error::Build(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_width == 0 {
            return Err(Error::Build("input width must be positive".into()));
        }
        let out_width = |specs: &[LayerSpec], w: usize| {
            specs.iter().fold(w, |w, s| match s {
                LayerSpec::Dense { out } => *out,
                _ => w,
            })
        };
        let mut width = self.input_width;
        for (l, m) in self.modules.iter().enumerate() {
            m.loss.validate().map_err(|e| Error::Build(format!("module {l}: {e}")))?;
            for s in m.encoder.iter().chain(&m.classifier) {
                if matches!(s, LayerSpec::Dense { out: 0 }) {
                    return Err(Error::Build(format!("module {l}: dense layer with zero outputs")));
                }
            }
            width = out_width(&m.encoder, width);
            if width == 0 {
                return Err(Error::Build(format!("module {l}: encoder -> projector boundary has width 0")));
            }
            let proj = out_width(&m.projector.layers(), width);
            if let ProjectorSpec::Mlp { hidden, out } = m.projector {
                if hidden == 0 || out == 0 {
                    return Err(Error::Build(format!("module {l}: projector widths must be positive")));
                }
            }
            let logits = out_width(&m.classifier, proj);
            if !m.classifier.iter().any(|s| matches!(s, LayerSpec::Dense { .. })) || logits != self.classes {
                return Err(Error::Build(format!(
                    "module {l}: classifier -> output boundary emits {logits} logits, network has {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

/// Per-module outcome of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub losses: LossBreakdown,
    /// Mean |adjoint| over encoder parameters.
    pub encoder_grad: f64,
    /// Batch accuracy of this module's classifier.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub modules: Vec<ModuleReport>,
    /// Batch accuracy of the final classifier.
    pub accuracy: f64,
}

impl TrainStepReport {
    pub fn encoder_grads(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.encoder_grad).collect()
    }
}

/// One encoder / projector / classifier trio with its own parameters and
/// optimizer state.
#[derive(Clone, Debug)]
pub struct Block {
    pub index: usize,
    pub encoder: Stack,
    pub projector: Stack,
    pub classifier: Stack,
    pub params: ParamSet,
    pub optimizer: Sgd,
    pub loss: LossConfig,
}

/// Graph state between a module's forward and its backward.
#[derive(Debug)]
pub struct EncodedBatch {
    graph: Graph,
    bind: ParamBinding,
    encoded: Var,
}

impl EncodedBatch {
    /// The encoder output, detached from this module's graph.
    pub fn output(&self) -> &Matrix {
        self.graph.value(self.encoded)
    }
}

fn accuracy(logits: &Matrix, labels: &Matrix) -> f64 {
    let pred = logits.argmax_rows();
    let truth = labels.argmax_rows();
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len().max(1) as f64
}

fn mean_abs(params: &ParamSet, grads: &[Matrix], group: ParamGroup) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in params.iter().zip(grads) {
        if p.group == group {
            sum += g.data().iter().map(|v| v.abs()).sum::<f64>();
            count += g.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

impl Block {
    fn build(index: usize, spec: &ModuleSpec, in_width: usize, sgd: SgdConfig, rng: &mut RngState) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder = Stack::build(&spec.encoder, in_width, &mut params, "encoder", ParamGroup::Encoder, rng)?;
        let projector = Stack::build(
            &spec.projector.layers(),
            encoder.out_width,
            &mut params,
            "projector",
            ParamGroup::Projector,
            rng,
        )?;
        let classifier = Stack::build(
            &spec.classifier,
            projector.out_width,
            &mut params,
            "classifier",
            ParamGroup::Classifier,
            rng,
        )?;
        let optimizer = Sgd::new(sgd, &params);
        Ok(Block {
            index,
            encoder,
            projector,
            classifier,
            params,
            optimizer,
            loss: spec.loss,
        })
    }

    pub fn in_width(&self) -> usize {
        self.encoder.in_width
    }

    pub fn out_width(&self) -> usize {
        self.encoder.out_width
    }

    /// Runs the encoder on `input` in train mode. The input is a constant
    /// leaf, so nothing upstream of this module can receive an adjoint.
    pub fn encode_train(&mut self, input: &Matrix) -> Result<EncodedBatch> {
        let mut graph = Graph::new();
        let mut bind = ParamBinding::new(&self.params);
        let x = graph.constant(input.clone());
        let encoded = self.encoder.forward(&mut graph, &self.params, &mut bind, x, BnMode::TRAIN)?;
        Ok(EncodedBatch { graph, bind, encoded })
    }

    /// Builds the module's losses on top of an encoded batch. Returns the
    /// per-parameter gradients of the module total.
    ///
    /// Local-loss adjoints reach the projector and the encoder. The
    /// classifier sees the projector applied to a detached copy of the
    /// encoder output, so cross-entropy adjoints stop at the projector.
    fn local_gradients(
        &mut self,
        state: &mut EncodedBatch,
        labels: &Matrix,
        track_stats: bool,
    ) -> Result<(Vec<Matrix>, ModuleReport)> {
        let EncodedBatch { graph: g, bind, encoded } = state;
        let cfg = self.loss;
        let train = BnMode::Train { track_stats };
        let projected = self.projector.forward(g, &self.params, bind, *encoded, train)?;
        let local = local_loss(g, projected, labels, &cfg)?;

        let cut = g.detach(*encoded)?;
        // The second projector pass sees the same batch; stats are folded once.
        let projected_ce = if self.projector.layers.is_empty() {
            cut
        } else {
            self.projector
                .forward(g, &self.params, bind, cut, BnMode::Train { track_stats: false })?
        };
        let logits = self.classifier.forward(g, &self.params, bind, projected_ce, train)?;
        let ce = cross_entropy_loss(g, logits, labels)?;
        let total = module_total(g, local.total, ce, &cfg)?;

        let grads = bind.collect(&self.params, &g.backward(total)?);
        let report = ModuleReport {
            losses: local.breakdown(g, ce, total),
            encoder_grad: mean_abs(&self.params, &grads, ParamGroup::Encoder),
            accuracy: accuracy(g.value(logits), labels),
        };
        Ok((grads, report))
    }

    /// Local losses, backward and one optimizer step for an encoded batch.
    pub fn finish_train(&mut self, mut state: EncodedBatch, labels: &Matrix) -> Result<ModuleReport> {
        let (grads, report) = self.local_gradients(&mut state, labels, true)?;
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(report)
    }

    /// One decoupled step: returns the encoder output (computed before the
    /// update) and the module report.
    pub fn train_step(&mut self, input: &Matrix, labels: &Matrix) -> Result<(Matrix, ModuleReport)> {
        let state = self.encode_train(input)?;
        let out = state.output().clone();
        let report = self.finish_train(state, labels)?;
        Ok((out, report))
    }

    pub fn encoder_params(&self) -> impl Iterator<Item = &crate::layers::Param> {
        self.params.iter().filter(|p| p.group == ParamGroup::Encoder)
    }

    fn encode_eval(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut bind = ParamBinding::new(&self.params);
        self.encoder.forward(g, &self.params, &mut bind, x, BnMode::Eval)
    }

    fn head_eval(&mut self, g: &mut Graph, h: Var) -> Result<Var> {
        let mut bind = ParamBinding::new(&self.params);
        let p = self.projector.forward(g, &self.params, &mut bind, h, BnMode::Eval)?;
        self.classifier.forward(g, &self.params, &mut bind, p, BnMode::Eval)
    }

    fn checkpoint(&self) -> Checkpoint {
        checkpoint_of(
            &self.params,
            &[&self.encoder, &self.projector, &self.classifier],
            &format!("module{}.", self.index),
        )
    }
}

/// Graph with every module's losses built on one tape and detach points
/// between modules. Used to inspect gradient flow; training itself runs
/// each module on its own tape.
pub struct JointGraph {
    pub graph: Graph,
    pub bindings: Vec<ParamBinding>,
    pub module_totals: Vec<Var>,
    pub cross_entropies: Vec<Var>,
    pub local_totals: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    spec: NetworkSpec,
    sgd: SgdConfig,
    tensors: Checkpoint,
}

impl Network {
    /// Module `l` draws its initial parameters from its own stream of the
    /// seed, so a module's initialization does not depend on the depth or
    /// the training mode.
    pub fn build(spec: &NetworkSpec, sgd: SgdConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        sgd.validate()?;
        let root = RngState::new(seed);
        let mut width = spec.input_width;
        let mut blocks = Vec::with_capacity(spec.depth());
        for (l, m) in spec.modules.iter().enumerate() {
            let block = Block::build(l, m, width, sgd, &mut root.fork(l as u64))?;
            width = block.out_width();
            blocks.push(block);
        }
        Ok(Network {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn mode(&self) -> TrainingMode {
        self.spec.mode
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn train_step(&mut self, x: &Matrix, y: &Matrix) -> Result<TrainStepReport> {
        match self.mode() {
            TrainingMode::Deinforeg => self.train_step_deinforeg(x, y),
            TrainingMode::Bp => self.train_step_bp(x, y),
        }
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_width || y.cols() != self.spec.classes || x.rows() != y.rows() {
            return Err(Error::shape(
                "train_step",
                format!(
                    "features {:?} / labels {:?} for a network of width {} and {} classes",
                    x.shape(),
                    y.shape(),
                    self.spec.input_width,
                    self.spec.classes
                ),
            ));
        }
        Ok(())
    }

    /// Each module trains on the detached output of the previous one.
    pub fn train_step_deinforeg(&mut self, x: &Matrix, y: &Matrix) -> Result<TrainStepReport> {
        if self.mode() != TrainingMode::Deinforeg {
            return Err(Error::domain("train_step_deinforeg", "network is in bp mode"));
        }
        self.check_batch(x, y)?;
        let mut input = x.clone();
        let mut modules = Vec::with_capacity(self.depth());
        for block in &mut self.blocks {
            let (out, report) = block.train_step(&input, y)?;
            modules.push(report);
            input = out;
        }
        let accuracy = modules.last().map_or(0.0, |m| m.accuracy);
        Ok(TrainStepReport { modules, accuracy })
    }

    /// Builds the end-to-end graph: all encoders, then the final module's
    /// projector and classifier, with one cross-entropy at the output.
    fn bp_graph(&mut self, x: &Matrix, y: &Matrix, track_stats: bool) -> Result<(Graph, Vec<ParamBinding>, Var, Var)> {
        let mode = BnMode::Train { track_stats };
        let mut g = Graph::new();
        let mut binds: Vec<ParamBinding> = self.blocks.iter().map(|b| ParamBinding::new(&b.params)).collect();
        let mut h = g.constant(x.clone());
        for (block, bind) in self.blocks.iter_mut().zip(&mut binds) {
            h = block.encoder.forward(&mut g, &block.params, bind, h, mode)?;
        }
        let last = self.blocks.last_mut().expect("validated non-empty");
        let bind = binds.last_mut().expect("validated non-empty");
        let p = last.projector.forward(&mut g, &last.params, bind, h, mode)?;
        let logits = last.classifier.forward(&mut g, &last.params, bind, p, mode)?;
        let ce = cross_entropy_loss(&mut g, logits, y)?;
        Ok((g, binds, logits, ce))
    }

    pub fn train_step_bp(&mut self, x: &Matrix, y: &Matrix) -> Result<TrainStepReport> {
        if self.mode() != TrainingMode::Bp {
            return Err(Error::domain("train_step_bp", "network is in deinforeg mode"));
        }
        self.check_batch(x, y)?;
        let (g, binds, logits, ce) = self.bp_graph(x, y, true)?;
        let grads = g.backward(ce)?;
        let acc = accuracy(g.value(logits), y);
        let ce_value = g.value(ce).item();
        let depth = self.depth();
        let mut modules = Vec::with_capacity(depth);
        for (l, (block, bind)) in self.blocks.iter_mut().zip(&binds).enumerate() {
            let gs = bind.collect(&block.params, &grads);
            let mut report = ModuleReport {
                encoder_grad: mean_abs(&block.params, &gs, ParamGroup::Encoder),
                ..Default::default()
            };
            if l + 1 == depth {
                report.losses.cross_entropy = ce_value;
                report.losses.module_total = ce_value;
                report.accuracy = acc;
            }
            block.optimizer.step(&mut block.params, &gs)?;
            modules.push(report);
        }
        Ok(TrainStepReport { modules, accuracy: acc })
    }

    /// Final-module logits with every batch norm in eval mode.
    pub fn logits(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for block in &mut self.blocks {
            h = block.encode_eval(&mut g, h)?;
        }
        let last = self.blocks.last_mut().expect("validated non-empty");
        let out = last.head_eval(&mut g, h)?;
        Ok(g.value(out).clone())
    }

    /// Argmax of the final classifier; ties go to the lowest class index.
    pub fn predict(&mut self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Classification accuracy of every module's own classifier, eval mode.
    pub fn module_accuracies(&mut self, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        let mut out = Vec::with_capacity(self.depth());
        for block in &mut self.blocks {
            h = block.encode_eval(&mut g, h)?;
            let logits = block.head_eval(&mut g, h)?;
            let pred = g.value(logits).argmax_rows();
            let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
            out.push(hits as f64 / labels.len().max(1) as f64);
        }
        Ok(out)
    }

    /// Projected embeddings of the final module after row normalization,
    /// eval mode.
    pub fn final_embeddings(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for block in &mut self.blocks {
            h = block.encode_eval(&mut g, h)?;
        }
        let last = self.blocks.last_mut().expect("validated non-empty");
        let mut bind = ParamBinding::new(&last.params);
        let p = last.projector.forward(&mut g, &last.params, &mut bind, h, BnMode::Eval)?;
        Ok(g.value(p).row_l2_normalize(last.loss.eps_norm))
    }

    /// Per-module gradients of the training objective without stepping or
    /// touching batch-norm running statistics.
    pub fn gradients(&mut self, x: &Matrix, y: &Matrix) -> Result<Vec<Vec<Matrix>>> {
        self.check_batch(x, y)?;
        match self.mode() {
            TrainingMode::Bp => {
                let (g, binds, _, ce) = self.bp_graph(x, y, false)?;
                let grads = g.backward(ce)?;
                Ok(self
                    .blocks
                    .iter()
                    .zip(&binds)
                    .map(|(b, bind)| bind.collect(&b.params, &grads))
                    .collect())
            }
            TrainingMode::Deinforeg => {
                let mut input = x.clone();
                let mut out = Vec::with_capacity(self.depth());
                for block in &mut self.blocks {
                    let mut graph = Graph::new();
                    let mut bind = ParamBinding::new(&block.params);
                    let xin = graph.constant(input.clone());
                    let encoded = block.encoder.forward(
                        &mut graph,
                        &block.params,
                        &mut bind,
                        xin,
                        BnMode::Train { track_stats: false },
                    )?;
                    let mut state = EncodedBatch { graph, bind, encoded };
                    let (grads, _) = block.local_gradients(&mut state, y, false)?;
                    input = state.output().clone();
                    out.push(grads);
                }
                Ok(out)
            }
        }
    }

    /// Mean |adjoint| over encoder parameters per module, averaged over the
    /// given batches. Projector and classifier parameters are excluded.
    pub fn encoder_gradient_profile(&mut self, batches: &[(Matrix, Matrix)]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.depth()];
        for (x, y) in batches {
            let grads = self.gradients(x, y)?;
            for ((a, block), gs) in acc.iter_mut().zip(&self.blocks).zip(&grads) {
                *a += mean_abs(&block.params, gs, ParamGroup::Encoder);
            }
        }
        let n = batches.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Every module's losses on one tape, with a detach between consecutive
    /// modules. Batch-norm running statistics are left untouched.
    pub fn joint_graph(&mut self, x: &Matrix, y: &Matrix) -> Result<JointGraph> {
        self.check_batch(x, y)?;
        let mode = BnMode::Train { track_stats: false };
        let mut g = Graph::new();
        let mut bindings = Vec::with_capacity(self.depth());
        let (mut module_totals, mut cross_entropies, mut local_totals) = (vec![], vec![], vec![]);
        let mut h = g.constant(x.clone());
        for (l, block) in self.blocks.iter_mut().enumerate() {
            let mut bind = ParamBinding::new(&block.params);
            let input = if l == 0 { h } else { g.detach(h)? };
            let encoded = block.encoder.forward(&mut g, &block.params, &mut bind, input, mode)?;
            let projected = block.projector.forward(&mut g, &block.params, &mut bind, encoded, mode)?;
            let local = local_loss(&mut g, projected, y, &block.loss)?;
            let cut = g.detach(encoded)?;
            let projected_ce = if block.projector.layers.is_empty() {
                cut
            } else {
                block.projector.forward(&mut g, &block.params, &mut bind, cut, mode)?
            };
            let logits = block.classifier.forward(&mut g, &block.params, &mut bind, projected_ce, mode)?;
            let ce = cross_entropy_loss(&mut g, logits, y)?;
            let total = module_total(&mut g, local.total, ce, &block.loss)?;
            bindings.push(bind);
            module_totals.push(total);
            cross_entropies.push(ce);
            local_totals.push(local.total);
            h = encoded;
        }
        Ok(JointGraph {
            graph: g,
            bindings,
            module_totals,
            cross_entropies,
            local_totals,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for b in &self.blocks {
            ck.tensors.extend(b.checkpoint().tensors);
        }
        ck
    }

    /// Bitwise comparison of all parameters and running statistics.
    pub fn same_state(&self, other: &Network) -> bool {
        let a = self.checkpoint();
        let b = other.checkpoint();
        a.tensors.len() == b.tensors.len()
            && a.tensors.iter().zip(&b.tensors).all(|((ka, va), (kb, vb))| {
                ka == kb
                    && va.shape == vb.shape
                    && va
                        .values
                        .iter()
                        .zip(&vb.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Writes the spec, optimizer settings and all tensors as one JSON
    /// document.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = NetworkFile {
            spec: self.spec.clone(),
            sgd: self.blocks[0].optimizer.config,
            tensors: self.checkpoint(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetworkFile = serde_json::from_str(&text)?;
        let mut net = Network::build(&file.spec, file.sgd, 0)?;
        for b in &mut net.blocks {
            let prefix = format!("module{}.", b.index);
            let Block {
                params,
                encoder,
                projector,
                classifier,
                ..
            } = b;
            restore_from(&file.tensors, params, &mut [encoder, projector, classifier], &prefix)?;
        }
        Ok(net)
    }
}
