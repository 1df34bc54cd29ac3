//! One forward pass of a [`Cnmm`] recorded on a fresh [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::bank::BnId;
use super::topology::Activation;
use super::Cnmm;
use crate::autodiff::{BnMode, Graph, ParamId, RunningStats, Var};
use crate::error::{Error, Result};
use crate::mixture::{logistic_noise, open_uniform, TransitionTable};
use crate::tensor::Tensor;

/// How the gate `g` of each recurrence entry is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Binary concrete relaxation, one draw per entry per batch item.
    Concrete { temperature: f64 },
    /// Exact Bernoulli draws, one per entry per batch item.
    Hard,
    /// `g = π(t, l)`.
    Expectation,
    /// `h = a + b`, no gate.
    DeterministicSum,
}

impl GateMode {
    fn is_sampled(self) -> bool {
        matches!(self, GateMode::Concrete { .. } | GateMode::Hard)
    }

    /// The gate probability used to decide which branches are needed. Under
    /// the plain sum every unpruned entry uses both branches.
    pub fn effective_prob(self, table: &TransitionTable, t: usize, l: usize) -> f64 {
        match self {
            GateMode::DeterministicSum if t >= 2 => {
                if table.is_pruned(t, l) {
                    0.0
                } else {
                    0.5
                }
            }
            _ => table.prob(t, l),
        }
    }
}

/// Pre-drawn uniforms on (0, 1) for every free gate and batch item, so that a
/// sampled pass can be replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNoise {
    batch: usize,
    uniforms: Vec<f64>,
}

impl GateNoise {
    /// Draws in ascending `(t, l)` order, batch item fastest.
    pub fn draw<R: Rng + ?Sized>(table: &TransitionTable, batch: usize, rng: &mut R) -> Self {
        let uniforms = (0..table.num_free() * batch)
            .map(|_| open_uniform(rng))
            .collect();
        Self { batch, uniforms }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn uniforms(&self, table: &TransitionTable, t: usize, l: usize) -> Result<&[f64]> {
        let k = table.slot(t, l)?;
        self.uniforms
            .get(k * self.batch..(k + 1) * self.batch)
            .ok_or_else(|| Error::InvalidArgument("gate noise drawn for a smaller table".into()))
    }
}

/// Options for [`Pass::propagate`].
#[derive(Clone, Copy, Debug)]
pub struct Propagation<'n> {
    pub mode: GateMode,
    pub noise: Option<&'n GateNoise>,
    /// Compute only what the classifier at this step reads.
    pub exit: Option<usize>,
    /// Evaluate pruned blocks and combine them with a zero gate instead of
    /// aliasing the skip branch. Only useful for checking that pruning is exact.
    pub evaluate_pruned: bool,
}

impl Propagation<'_> {
    pub fn new(mode: GateMode) -> Self {
        Self {
            mode,
            noise: None,
            exit: None,
            evaluate_pruned: false,
        }
    }
}

/// A gate applied during propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub t: usize,
    pub l: usize,
    pub values: Vec<f64>,
}

/// The triangular array `h[t][l]` of one propagation.
#[derive(Clone, Debug)]
pub struct PropagationState {
    h: Vec<Vec<Option<Var>>>,
    pub gates: Vec<GateRecord>,
}

impl PropagationState {
    /// `h[t][l]`, if it was computed; `h(0, 0)` is the stem output.
    pub fn h(&self, t: usize, l: usize) -> Option<Var> {
        self.h.get(t).and_then(|row| row.get(l)).copied().flatten()
    }
}

/// Which entries `(t, l)` a propagation must compute so that `h[exit][T]` is
/// available. Entry `(t, l)` reads `f_{t-1}^l(h[t-1][t-1])` when its gate can be
/// non-zero and `h[t-1][l]` when it can be below one.
pub fn required_entries(
    table: &TransitionTable,
    mode: GateMode,
    exit: Option<usize>,
    evaluate_pruned: bool,
) -> Vec<Vec<bool>> {
    let steps = table.steps();
    let mut need = vec![vec![false; steps + 1]; steps + 1];
    let Some(exit) = exit else {
        for (t, row) in need.iter_mut().enumerate().skip(1) {
            row[t..].iter_mut().for_each(|n| *n = true);
        }
        return need;
    };
    need[exit][steps] = true;
    for t in (2..=exit).rev() {
        for l in t..=steps {
            if !need[t][l] {
                continue;
            }
            let p = branch_prob(table, mode, evaluate_pruned, t, l);
            if p > 0.0 {
                need[t - 1][t - 1] = true;
            }
            if p < 1.0 {
                need[t - 1][l] = true;
            }
        }
    }
    need
}

fn branch_prob(
    table: &TransitionTable,
    mode: GateMode,
    evaluate_pruned: bool,
    t: usize,
    l: usize,
) -> f64 {
    if evaluate_pruned && t >= 2 && table.is_pruned(t, l) {
        0.5
    } else {
        mode.effective_prob(table, t, l)
    }
}

/// Forward state: the graph, parameter bindings and pending batch-norm updates.
pub struct Pass<'m> {
    model: &'m Cnmm,
    pub graph: Graph,
    train: bool,
    params: HashMap<ParamId, Var>,
    logits: BTreeMap<(usize, usize), Var>,
    bn_updates: Vec<(BnId, RunningStats)>,
    prefix_cache: HashMap<(usize, Var), Var>,
    evaluations: BTreeMap<(usize, usize), usize>,
}

/// What a finished pass hands back to the model for the update.
pub struct Binding {
    pub(crate) params: HashMap<ParamId, Var>,
    pub(crate) logits: BTreeMap<(usize, usize), Var>,
    pub(crate) bn_updates: Vec<(BnId, RunningStats)>,
}

impl<'m> Pass<'m> {
    /// `train` selects batch statistics in every batch-norm layer.
    pub fn new(model: &'m Cnmm, train: bool) -> Self {
        Self {
            model,
            graph: Graph::new(),
            train,
            params: HashMap::new(),
            logits: BTreeMap::new(),
            bn_updates: Vec::new(),
            prefix_cache: HashMap::new(),
            evaluations: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &'m Cnmm {
        self.model
    }

    /// Number of times each block `f_i^j` was evaluated.
    pub fn evaluations(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.evaluations
    }

    pub fn input(&mut self, images: &Tensor) -> Var {
        self.graph.leaf(images.clone())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.graph.leaf(self.model.params.get(id).value.clone());
        self.params.insert(id, v);
        v
    }

    pub fn logit(&mut self, t: usize, l: usize) -> Result<Var> {
        if let Some(&v) = self.logits.get(&(t, l)) {
            return Ok(v);
        }
        let value = self.model.table.logit(t, l)?;
        let v = self.graph.leaf(Tensor::new(vec![1], vec![value])?);
        self.logits.insert((t, l), v);
        Ok(v)
    }

    fn bn(&mut self, x: Var, id: BnId) -> Result<Var> {
        let layer = &self.model.norms[id.0];
        let (gamma, beta) = (self.param(layer.gamma), self.param(layer.beta));
        let eps = self.model.bn_eps;
        if self.train {
            let mut stats = layer.stats.clone();
            let y = self.graph.batch_norm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    stats: &mut stats,
                    momentum: self.model.bn_momentum,
                },
                eps,
            )?;
            self.bn_updates.push((id, stats));
            Ok(y)
        } else {
            self.graph
                .batch_norm(x, gamma, beta, BnMode::Eval(&layer.stats), eps)
        }
    }

    fn act(&mut self, x: Var) -> Result<Var> {
        match self.model.topology.activation {
            Activation::Relu => self.graph.relu(x),
            Activation::Identity => Ok(x),
        }
    }

    /// `h_0` from a batch of images `[n, c, H, W]`.
    pub fn stem(&mut self, x: Var) -> Result<Var> {
        let topo = &self.model.topology;
        let shape = self.graph.value(x).shape();
        let (h, w) = topo.input_extent();
        if shape.len() != 4 || shape[1] != topo.input_channels || shape[2] != h || shape[3] != w {
            return Err(Error::Shape {
                op: "stem",
                detail: format!(
                    "expected [n, {}, {h}, {w}] images, got {shape:?}",
                    topo.input_channels
                ),
            });
        }
        self.graph.set_context("stem");
        let stem = &self.model.bank.stem;
        let w1 = self.param(stem.conv);
        let y = self.graph.conv2d(x, w1, 1, 1)?;
        let y = self.bn(y, stem.bn1)?;
        let y = self.act(y)?;
        let w2 = self.param(stem.proj);
        let y = self.graph.conv2d(y, w2, 1, 0)?;
        self.bn(y, stem.bn2)
    }

    fn prefix(&mut self, i: usize, x: Var) -> Result<Var> {
        if let Some(&p) = self.prefix_cache.get(&(i, x)) {
            return Ok(p);
        }
        let pre = &self.model.bank.prefixes[i];
        let y = self.bn(x, pre.bn)?;
        let y = self.act(y)?;
        let dw = self.param(pre.depthwise);
        let y = self.graph.depthwise_conv2d(y, dw, 1, 1)?;
        let pw = self.param(pre.pointwise);
        let y = self.graph.conv2d(y, pw, 1, 0)?;
        self.prefix_cache.insert((i, x), y);
        Ok(y)
    }

    /// `f_i^j(x)`; the prefix is shared across targets for the same input.
    pub fn apply(&mut self, i: usize, j: usize, x: Var) -> Result<Var> {
        if i >= j || j > self.model.topology.steps {
            return Err(Error::InvalidArgument(format!("no block f_{i}^{j}")));
        }
        self.graph.set_context(format!("f_{i}^{j}"));
        *self.evaluations.entry((i, j)).or_default() += 1;
        let mut y = self.prefix(i, x)?;
        let suf = self.model.bank.suffix(i, j);
        for _ in 0..suf.pools {
            y = self.graph.avg_pool2(y)?;
        }
        let y = self.bn(y, suf.bn1)?;
        let y = self.act(y)?;
        let w = self.param(suf.conv);
        let y = self.graph.conv2d(y, w, 1, 0)?;
        self.bn(y, suf.bn2)
    }

    /// Class logits of the classifier at step `exit` applied to `h`.
    pub fn head(&mut self, exit: usize, h: Var) -> Result<Var> {
        let idx = self.model.topology.exit_index(exit)?;
        self.graph.set_context(format!("head {exit}"));
        let head = &self.model.heads[idx];
        let y = self.bn(h, head.bn1)?;
        let y = self.act(y)?;
        let y = self.graph.global_avg_pool(y)?;
        let fc = self.param(head.fc);
        let y = self.graph.linear(y, fc, None)?;
        let y = self.bn(y, head.bn2)?;
        let (w, b) = (self.param(head.out_weight), self.param(head.out_bias));
        self.graph.linear(y, w, Some(b))
    }

    /// Runs the recurrence
    /// `h[t][l] = g * f_{t-1}^l(h[t-1][t-1]) + (1 - g) * h[t-1][l]`
    /// with `h[1][l] = f_0^l(h_0)`.
    pub fn propagate(&mut self, x: Var, opts: Propagation<'_>) -> Result<PropagationState> {
        let model = self.model;
        let table = &model.table;
        let steps = model.topology.steps;
        let mode = opts.mode;
        if let GateMode::Concrete { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "concrete temperature {temperature} must be > 0"
                )));
            }
        }
        if let Some(exit) = opts.exit {
            model.topology.exit_index(exit)?;
        }
        let batch = self.graph.value(x).shape().first().copied().unwrap_or(0);
        if mode.is_sampled() {
            match opts.noise {
                Some(n) if n.batch() == batch => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "sampled gates need noise for a batch of {batch}"
                    )))
                }
            }
        }
        let last_row = opts.exit.unwrap_or(steps);
        let need = required_entries(table, mode, opts.exit, opts.evaluate_pruned);
        let mut h = vec![vec![None; steps + 1]; steps + 1];
        let h0 = self.stem(x)?;
        h[0][0] = Some(h0);
        let mut gates = Vec::new();

        for l in 1..=steps {
            if need[1][l] {
                h[1][l] = Some(self.apply(0, l, h0)?);
            }
        }
        for t in 2..=last_row {
            for l in t..=steps {
                if !need[t][l] {
                    continue;
                }
                let p = branch_prob(table, mode, opts.evaluate_pruned, t, l);
                let skip = h[t - 1][l];
                if p == 0.0 {
                    h[t][l] = skip;
                    continue;
                }
                let src = h[t - 1][t - 1].ok_or_else(|| missing(t - 1, t - 1))?;
                self.graph.set_context(format!("h[{t}][{l}]"));
                let a = self.apply(t - 1, l, src)?;
                if p == 1.0 {
                    h[t][l] = Some(a);
                    continue;
                }
                let b = skip.ok_or_else(|| missing(t - 1, l))?;
                self.graph.set_context(format!("h[{t}][{l}]"));
                if mode == GateMode::DeterministicSum && !table.is_pruned(t, l) {
                    h[t][l] = Some(self.graph.add(a, b)?);
                    continue;
                }
                let g = self.gate(opts, t, l)?;
                gates.push(GateRecord {
                    t,
                    l,
                    values: self.graph.value(g).data().to_vec(),
                });
                h[t][l] = Some(self.graph.affine_combine(g, a, b)?);
            }
        }
        Ok(PropagationState { h, gates })
    }

    fn gate(&mut self, opts: Propagation<'_>, t: usize, l: usize) -> Result<Var> {
        let table = &self.model.table;
        if table.is_pruned(t, l) {
            return Ok(self.graph.leaf(Tensor::scalar(0.0)));
        }
        match opts.mode {
            GateMode::Expectation | GateMode::DeterministicSum => {
                let z = self.logit(t, l)?;
                self.graph.sigmoid(z)
            }
            GateMode::Concrete { temperature } => {
                let noise = opts.noise.expect("checked in propagate");
                let z: Vec<f64> = noise
                    .uniforms(table, t, l)?
                    .iter()
                    .map(|&u| logistic_noise(u))
                    .collect();
                let logit = self.logit(t, l)?;
                self.graph.concrete_gate(logit, &z, temperature)
            }
            GateMode::Hard => {
                let noise = opts.noise.expect("checked in propagate");
                let p = table.prob(t, l);
                let g: Vec<f64> = noise
                    .uniforms(table, t, l)?
                    .iter()
                    .map(|&u| if u < p { 1.0 } else { 0.0 })
                    .collect();
                let n = g.len();
                Ok(self.graph.leaf(Tensor::new(vec![n], g)?))
            }
        }
    }

    pub fn finish(self) -> (Graph, Binding) {
        (
            self.graph,
            Binding {
                params: self.params,
                logits: self.logits,
                bn_updates: self.bn_updates,
            },
        )
    }
}

fn missing(t: usize, l: usize) -> Error {
    Error::InvalidArgument(format!("h[{t}][{l}] was not computed"))
}
