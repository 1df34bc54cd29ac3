//! The mixture model: stem, shared function bank, classifiers and transition table.

mod bank;
mod pass;
mod topology;
mod train;

use std::collections::BTreeMap;

use rand::Rng;

pub use bank::{BatchNormLayer, BnId, ClassifierHead, FunctionBank, Prefix, Stem, Suffix};
pub use pass::{
    required_entries, Binding, GateMode, GateNoise, GateRecord, Pass, Propagation, PropagationState,
};
pub use topology::{Activation, Topology};
pub use train::{
    cosine_lr, evaluate, exit_losses, EpochStats, ExitMetrics, LossProfile, Sgd, StepStats,
    TrainConfig, Trainer, Variant,
};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::mixture::TransitionTable;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Cnmm {
    pub topology: Topology,
    pub params: ParamStore,
    pub norms: Vec<BatchNormLayer>,
    pub bank: FunctionBank,
    pub heads: Vec<ClassifierHead>,
    pub table: TransitionTable,
    /// Decides the inference gate mode: the plain-sum ablation propagates sums,
    /// everything else propagates expectations.
    pub variant: Variant,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

/// Output of a deterministic forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    /// FLOPs counted while running the pass, for the whole batch.
    pub flops: u64,
    pub evaluations: BTreeMap<(usize, usize), usize>,
}

/// Monte Carlo estimate of the mixture prediction.
#[derive(Clone, Debug)]
pub struct McPrediction {
    pub mean: Tensor,
    /// Standard error of each entry of `mean`.
    pub std_err: Tensor,
    pub samples: usize,
}

impl Cnmm {
    /// He-initialised model with every free gate at `π = 0.5`.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let built = bank::build(&topology, &mut stream(seed, Stream::Init))?;
        let table = TransitionTable::new(topology.steps)?;
        Ok(Self {
            topology,
            params: built.params,
            norms: built.norms,
            bank: built.bank,
            heads: built.heads,
            table,
            variant: Variant::Sampled,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        })
    }

    pub fn steps(&self) -> usize {
        self.topology.steps
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn inference_mode(&self) -> GateMode {
        match self.variant {
            Variant::DeterministicSum => GateMode::DeterministicSum,
            _ => GateMode::Expectation,
        }
    }

    /// Logits of the classifier at `exit`, computing only the blocks it needs.
    pub fn infer(&self, images: &Tensor, exit: usize) -> Result<Inference> {
        let mut pass = Pass::new(self, false);
        let x = pass.input(images);
        let mut opts = Propagation::new(self.inference_mode());
        opts.exit = Some(exit);
        let state = pass.propagate(x, opts)?;
        let h = state.h(exit, self.steps()).ok_or_else(|| {
            Error::InvalidArgument(format!("h[{exit}][T] missing after propagation"))
        })?;
        let logits = pass.head(exit, h)?;
        let evaluations = pass.evaluations().clone();
        let (graph, _) = pass.finish();
        Ok(Inference {
            logits: graph.value(logits).clone(),
            flops: graph.flops(),
            evaluations,
        })
    }

    /// Class probabilities `[n, K]` at `exit`.
    pub fn predict(&self, images: &Tensor, exit: usize) -> Result<Tensor> {
        softmax_rows(&self.infer(images, exit)?.logits)
    }

    /// Logits of every classifier from a single full propagation.
    pub fn infer_all(&self, images: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let mut pass = Pass::new(self, false);
        let x = pass.input(images);
        let state = pass.propagate(x, Propagation::new(self.inference_mode()))?;
        let mut out = Vec::with_capacity(self.topology.exits.len());
        for &exit in &self.topology.exits {
            let h = state.h(exit, self.steps()).expect("full propagation");
            let z = pass.head(exit, h)?;
            out.push((exit, pass.graph.value(z).clone()));
        }
        Ok(out)
    }

    /// Average of `samples` predictions with Bernoulli gates drawn per image.
    pub fn predict_monte_carlo<R: Rng + ?Sized>(
        &self,
        images: &Tensor,
        exit: usize,
        samples: usize,
        rng: &mut R,
    ) -> Result<McPrediction> {
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let batch = images.shape().first().copied().unwrap_or(0);
        let mut sum: Option<Vec<f64>> = None;
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut shape = Vec::new();
        for _ in 0..samples {
            let noise = GateNoise::draw(&self.table, batch, rng);
            let mut pass = Pass::new(self, false);
            let x = pass.input(images);
            let mut opts = Propagation::new(GateMode::Hard);
            opts.noise = Some(&noise);
            opts.exit = Some(exit);
            let state = pass.propagate(x, opts)?;
            let h = state.h(exit, self.steps()).expect("propagated to exit");
            let z = pass.head(exit, h)?;
            let p = softmax_rows(pass.graph.value(z))?;
            shape = p.shape().to_vec();
            match &mut sum {
                None => {
                    sum_sq = p.data().iter().map(|v| v * v).collect();
                    sum = Some(p.into_data());
                }
                Some(s) => {
                    for ((a, q), v) in s.iter_mut().zip(sum_sq.iter_mut()).zip(p.data()) {
                        *a += v;
                        *q += v * v;
                    }
                }
            }
        }
        let n = samples as f64;
        let mean: Vec<f64> = sum.expect("samples > 0").iter().map(|s| s / n).collect();
        let std_err: Vec<f64> = mean
            .iter()
            .zip(&sum_sq)
            .map(|(m, q)| {
                if samples < 2 {
                    return 0.0;
                }
                let var = ((q - n * m * m) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect();
        Ok(McPrediction {
            mean: Tensor::new(shape.clone(), mean)?,
            std_err: Tensor::new(shape, std_err)?,
            samples,
        })
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
        self.table.zero_grad();
    }

    /// Adds the gradients of a finished pass and applies its batch-norm updates.
    pub fn absorb(&mut self, grads: &Gradients, binding: Binding) -> Result<()> {
        for (id, var) in &binding.params {
            if let Some(g) = grads.get(*var) {
                self.params.get_mut(*id).grad.add_assign(g)?;
            }
        }
        for (&(t, l), var) in &binding.logits {
            if let Some(g) = grads.get(*var) {
                if !self.table.is_pruned(t, l) {
                    self.table.add_grad(t, l, g.item())?;
                }
            }
        }
        for (id, stats) in binding.bn_updates {
            self.norms[id.0].stats = stats;
        }
        Ok(())
    }
}

/// Row-wise softmax of `[n, K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(vec![n, k], out)
}

#[cfg(test)]
mod tests;
