//! Stochastic training of the weights and the transition logits.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::pass::{GateMode, GateNoise, Pass, Propagation};
use super::{softmax_rows, Cnmm};
use crate::autodiff::Var;
use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Builds the weighted classifier loss `sum_k w_k CE_k` on `pass`, returning
/// it with the cross-entropy of every classifier (zero-weight ones included).
pub fn exit_losses(
    pass: &mut Pass<'_>,
    images: &Tensor,
    labels: &[usize],
    opts: Propagation<'_>,
    weights: &[f64],
) -> Result<(Var, Vec<Var>)> {
    let model = pass.model();
    if weights.len() != model.topology.exits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} loss weights for {} classifiers",
            weights.len(),
            model.topology.exits.len()
        )));
    }
    let x = pass.input(images);
    let state = pass.propagate(x, opts)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut exit_vars = Vec::new();
    for (&exit, &w) in model.topology.exits.iter().zip(weights) {
        let h = state.h(exit, model.steps()).ok_or_else(|| {
            Error::InvalidArgument(format!("h[{exit}][T] missing after propagation"))
        })?;
        let z = pass.head(exit, h)?;
        let ce = pass.graph.softmax_cross_entropy(z, labels)?;
        if w > 0.0 {
            terms.push((ce, w));
        }
        exit_vars.push(ce);
    }
    let loss = pass.graph.weighted_sum(&terms)?;
    Ok((loss, exit_vars))
}

/// Training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Relaxed gate samples during training, expectations at inference.
    Sampled,
    /// Expectations during training and inference.
    Expectations,
    /// `h = a + b` everywhere, with no gates.
    DeterministicSum,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sampled => "sampled",
            Variant::Expectations => "expectations",
            Variant::DeterministicSum => "deterministic-sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Variant::Sampled),
            "expectations" => Ok(Variant::Expectations),
            "deterministic-sum" => Ok(Variant::DeterministicSum),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (sampled, expectations, deterministic-sum)"
            ))),
        }
    }
}

/// Which classifiers contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossProfile {
    /// Last classifier only.
    Single,
    /// Every classifier, the one at rank `k` of `E` weighted `k / E`.
    Anytime,
}

impl LossProfile {
    pub fn weights(self, num_exits: usize) -> Vec<f64> {
        match self {
            LossProfile::Single => {
                let mut w = vec![0.0; num_exits];
                w[num_exits - 1] = 1.0;
                w
            }
            LossProfile::Anytime => (1..=num_exits)
                .map(|k| k as f64 / num_exits as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub loss: LossProfile,
    pub temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random pad-and-crop plus horizontal flips.
    pub augment: bool,
    /// Update the transition logits along with the weights.
    pub learn_table: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sampled,
            loss: LossProfile::Anytime,
            temperature: 2.0,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            augment: false,
            learn_table: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch statistics".into());
        }
        Ok(())
    }

    pub fn train_mode(&self) -> GateMode {
        match self.variant {
            Variant::Sampled => GateMode::Concrete {
                temperature: self.temperature,
            },
            Variant::Expectations => GateMode::Expectation,
            Variant::DeterministicSum => GateMode::DeterministicSum,
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let x = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * x).cos())
}

/// SGD with heavy-ball momentum; weight decay on conv and linear weights only.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor>,
    table_velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(model: &Cnmm) -> Self {
        Self {
            velocity: model
                .params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
            table_velocity: vec![0.0; model.table.num_free()],
        }
    }

    pub fn step(
        &mut self,
        model: &mut Cnmm,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        learn_table: bool,
    ) {
        for ((_, p), v) in model.params.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let wd = if p.kind.decays() { weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let vel = v.data_mut();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                vel[k] = momentum * vel[k] + grad[k] + wd * w[k];
                w[k] -= lr * vel[k];
            }
        }
        if !learn_table {
            return;
        }
        let grads = model.table.grads().to_vec();
        let logits = model.table.logits_mut();
        for k in 0..logits.len() {
            if !logits[k].is_finite() {
                continue;
            }
            let v = &mut self.table_velocity[k];
            *v = momentum * *v + grads[k];
            logits[k] -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Cross-entropy of each classifier, in exit order.
    pub exit_losses: Vec<f64>,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub exit_losses: Vec<f64>,
    pub learning_rate: f64,
}

/// Drives training of one model over a fixed number of epochs.
pub struct Trainer {
    pub config: TrainConfig,
    sgd: Sgd,
    step: usize,
    epoch: usize,
    total_steps: usize,
    gates: ChaCha8Rng,
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
}

impl Trainer {
    /// Sets the model's variant to the configured one.
    pub fn new(config: TrainConfig, model: &mut Cnmm, train_len: usize) -> Result<Self> {
        config.validate()?;
        model.variant = config.variant;
        let per_epoch = train_len.div_ceil(config.batch_size);
        Ok(Self {
            sgd: Sgd::new(model),
            step: 0,
            epoch: 0,
            total_steps: per_epoch * config.epochs,
            gates: stream(config.seed, Stream::Gates),
            shuffle: stream(config.seed, Stream::Shuffle),
            augment: stream(config.seed, Stream::Augment),
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One SGD step on a batch.
    pub fn train_step(
        &mut self,
        model: &mut Cnmm,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<StepStats> {
        let cfg = &self.config;
        let batch = labels.len();
        let mode = cfg.train_mode();
        let noise = matches!(mode, GateMode::Concrete { .. })
            .then(|| GateNoise::draw(&model.table, batch, &mut self.gates));

        let mut pass = Pass::new(model, true);
        let mut opts = Propagation::new(mode);
        opts.noise = noise.as_ref();
        let weights = cfg.loss.weights(model.topology.exits.len());
        let (loss, exit_vars) = exit_losses(&mut pass, images, labels, opts, &weights)?;
        let value = pass.graph.value(loss).item();
        let per_exit = exit_vars
            .iter()
            .map(|&v| pass.graph.value(v).item())
            .collect();
        let grads = pass.graph.backward(loss)?;
        let (_, binding) = pass.finish();

        model.zero_grad();
        model.absorb(&grads, binding)?;
        let lr = cosine_lr(cfg.learning_rate, self.step, self.total_steps);
        self.sgd.step(
            model,
            lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.learn_table && cfg.variant != Variant::DeterministicSum,
        );
        self.step += 1;
        Ok(StepStats {
            loss: value,
            exit_losses: per_exit,
            learning_rate: lr,
        })
    }

    /// One shuffled pass over `data`. The last partial batch is dropped when it
    /// holds a single image, which batch statistics cannot normalise.
    pub fn train_epoch(&mut self, model: &mut Cnmm, data: &Dataset) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        let mut exit_totals: Vec<f64> = Vec::new();
        let mut seen = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                self.step += 1;
                continue;
            }
            let (mut images, labels) = data.batch(chunk)?;
            if self.config.augment {
                let pad = (images.shape()[2] / 8).max(1);
                augment_batch(&mut images, pad, &mut self.augment)?;
            }
            let stats = self
                .train_step(model, &images, &labels)
                .map_err(|e| Error::NonFinite {
                    op: "training",
                    context: format!(
                        "epoch {} step {} seed {}: {e}",
                        self.epoch, self.step, self.config.seed
                    ),
                })?;
            let n = labels.len() as f64;
            total += stats.loss * n;
            if exit_totals.is_empty() {
                exit_totals = vec![0.0; stats.exit_losses.len()];
            }
            for (a, b) in exit_totals.iter_mut().zip(&stats.exit_losses) {
                *a += b * n;
            }
            seen += labels.len();
            lr = stats.learning_rate;
        }
        self.epoch += 1;
        let denom = seen.max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total / denom,
            exit_losses: exit_totals.iter().map(|v| v / denom).collect(),
            learning_rate: lr,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitMetrics {
    pub exit: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy of every classifier, in inference mode.
pub fn evaluate(model: &Cnmm, data: &Dataset, batch_size: usize) -> Result<Vec<ExitMetrics>> {
    let exits = &model.topology.exits;
    let mut correct = vec![0usize; exits.len()];
    let mut loss = vec![0.0; exits.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        for (k, (_, logits)) in model.infer_all(&images)?.into_iter().enumerate() {
            let p = softmax_rows(&logits)?;
            let kk = p.shape()[1];
            for (row, &y) in p.data().chunks(kk).zip(&labels) {
                if argmax(row) == y {
                    correct[k] += 1;
                }
                loss[k] -= row[y].max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(exits
        .iter()
        .enumerate()
        .map(|(k, &exit)| ExitMetrics {
            exit,
            accuracy: correct[k] as f64 / n,
            loss: loss[k] / n,
        })
        .collect())
}

/// Index of the largest entry; the first one on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}
