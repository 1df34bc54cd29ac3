//! Brute-force ground truth: every member network evaluated explicitly and
//! every marginal summed over the enumerated sequences.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mixture::{
    enumerate_sequences, pairwise_marginals, sequence_log_prob, step_marginals, Sequence,
    TransitionTable,
};
use crate::model::{softmax_rows, Activation, Cnmm, GateMode, Pass, Propagation, Topology};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Largest chain length the oracle harness accepts.
pub const MAX_ORACLE_STEPS: usize = 10;

/// All `2^(T-1)` sequences with their probabilities.
#[derive(Clone, Debug)]
pub struct EnumeratedMixture {
    pub sequences: Vec<Sequence>,
    pub probs: Vec<f64>,
}

impl EnumeratedMixture {
    pub fn new(table: &TransitionTable) -> Result<Self> {
        let sequences = enumerate_sequences(table.steps())?;
        let probs = sequences
            .iter()
            .map(|s| sequence_log_prob(table, s).map(f64::exp))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences, probs })
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `p(s_t = l)` as a sum over sequences.
    pub fn step_marginals(&self) -> Vec<Vec<f64>> {
        let steps = self.sequences[0].steps();
        let mut m = vec![vec![0.0; steps + 1]; steps + 1];
        for (s, &p) in self.sequences.iter().zip(&self.probs) {
            for (t, &l) in s.as_slice().iter().enumerate() {
                m[t][l] += p;
            }
        }
        m
    }

    /// `p(s_t = l, s_{t-1} = t - 1)` as a sum over sequences.
    pub fn pairwise_marginal(&self, t: usize, l: usize) -> f64 {
        self.sequences
            .iter()
            .zip(&self.probs)
            .filter(|(s, _)| s.as_slice()[t] == l && s.as_slice()[t - 1] == t - 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// Sequences reaching `T` by step `exit`, with `p(s_{0:exit} | s_exit = T)`.
    pub fn conditional_on_exit(
        &self,
        table: &TransitionTable,
        exit: usize,
    ) -> Vec<(&Sequence, f64)> {
        let steps = table.steps();
        self.sequences
            .iter()
            .filter(|s| s.as_slice()[exit] == steps)
            .map(|s| {
                let v = s.as_slice();
                let mut lp = 0.0;
                for t in 2..=exit {
                    let (take, skip) = table.log_probs(t, v[t]);
                    lp += if v[t - 1] == t - 1 { take } else { skip };
                }
                (s, lp.exp())
            })
            .collect()
    }
}

/// Output of the single network indexed by `seq`, evaluated block by block
/// with inference-mode batch norm.
pub fn evaluate_network(model: &Cnmm, seq: &Sequence, images: &Tensor) -> Result<Tensor> {
    if seq.steps() != model.steps() {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} steps, model {}",
            seq.steps(),
            model.steps()
        )));
    }
    let mut pass = Pass::new(model, false);
    let x = pass.input(images);
    let mut h = pass.stem(x)?;
    for (i, j) in seq.functions() {
        h = pass.apply(i, j, h)?;
    }
    Ok(pass.graph.value(h).clone())
}

/// Class probabilities of the network `seq` at classifier `exit`.
pub fn network_prediction(
    model: &Cnmm,
    seq: &Sequence,
    images: &Tensor,
    exit: usize,
) -> Result<Tensor> {
    let mut pass = Pass::new(model, false);
    let x = pass.input(images);
    let mut h = pass.stem(x)?;
    for (i, j) in seq.functions() {
        h = pass.apply(i, j, h)?;
    }
    let z = pass.head(exit, h)?;
    softmax_rows(pass.graph.value(z))
}

/// `E[h[exit][T]]`: the probability-weighted sum of member-network outputs.
pub fn mixture_mean(model: &Cnmm, images: &Tensor, exit: usize) -> Result<Tensor> {
    let mix = EnumeratedMixture::new(&model.table)?;
    let mut acc: Option<Tensor> = None;
    for (seq, p) in mix.conditional_on_exit(&model.table, exit) {
        if p == 0.0 {
            continue;
        }
        let mut y = evaluate_network(model, seq, images)?;
        y.data_mut().iter_mut().for_each(|v| *v *= p);
        match &mut acc {
            None => acc = Some(y),
            Some(a) => a.add_assign(&y)?,
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("mixture has no mass".into()))
}

/// Probability-weighted average of the member networks' class probabilities.
pub fn mixture_prediction(model: &Cnmm, images: &Tensor, exit: usize) -> Result<Tensor> {
    let mix = EnumeratedMixture::new(&model.table)?;
    let mut acc: Option<Tensor> = None;
    for (seq, p) in mix.conditional_on_exit(&model.table, exit) {
        if p == 0.0 {
            continue;
        }
        let mut y = network_prediction(model, seq, images, exit)?;
        y.data_mut().iter_mut().for_each(|v| *v *= p);
        match &mut acc {
            None => acc = Some(y),
            Some(a) => a.add_assign(&y)?,
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("mixture has no mass".into()))
}

/// `h[exit][T]` from the expectation recurrence.
pub fn expected_output(model: &Cnmm, images: &Tensor, exit: usize) -> Result<Tensor> {
    let mut pass = Pass::new(model, false);
    let x = pass.input(images);
    let mut opts = Propagation::new(GateMode::Expectation);
    opts.exit = Some(exit);
    let state = pass.propagate(x, opts)?;
    let h = state.h(exit, model.steps()).expect("exit propagated");
    Ok(pass.graph.value(h).clone())
}

/// A table with logits drawn from N(0, 2^2); some entries saturated at
/// `±inf` and some pruned, to cover the degenerate cases.
pub fn random_table<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> Result<TransitionTable> {
    let mut table = TransitionTable::new(steps)?;
    let normal = Normal::new(0.0, 2.0).expect("valid");
    let entries: Vec<_> = table.free_entries().collect();
    for (t, l) in entries {
        let r: f64 = rng.random();
        if r < 0.05 {
            table.set_logit(t, l, f64::INFINITY)?;
        } else if r < 0.10 {
            table.set_logit(t, l, f64::NEG_INFINITY)?;
        } else {
            table.set_logit(t, l, normal.sample(rng))?;
            if r < 0.15 {
                table.prune(t, l)?;
            }
        }
    }
    Ok(table)
}

/// Perturbs batch-norm statistics and affine parameters so that every block
/// is a non-trivial map in inference mode.
pub fn randomize_inference_state<R: Rng + ?Sized>(model: &mut Cnmm, rng: &mut R) {
    for layer in &mut model.norms {
        for m in &mut layer.stats.mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut layer.stats.var {
            *v = rng.random_range(0.5..2.0);
        }
        for id in [layer.gamma, layer.beta] {
            let p = model.params.get_mut(id);
            for x in p.value.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Result of one harness check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Options for [`run_oracle_checks`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOptions {
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// Added to one gate probability on the fast path only; any value above
    /// the tolerances must make the report fail.
    pub fault: Option<f64>,
}

pub const MARGINAL_TOL: f64 = 1e-12;
pub const MIXTURE_MEAN_TOL: f64 = 1e-9;

/// Compares the recursions and the expectation recurrence against enumeration.
pub fn run_oracle_checks(opts: &OracleOptions) -> Result<OracleReport> {
    let steps = opts.steps;
    if !(2..=MAX_ORACLE_STEPS).contains(&steps) {
        return Err(Error::InvalidArgument(format!(
            "oracle checks need 2 <= T <= {MAX_ORACLE_STEPS}, got {steps}"
        )));
    }
    let mut rng = stream(opts.seed, Stream::Oracle);
    let mut mass = 0.0f64;
    let mut step_err = 0.0f64;
    let mut pair_err = 0.0f64;
    for _ in 0..opts.trials {
        let table = random_table(steps, &mut rng)?;
        let fast = faulted(&table, opts.fault)?;
        let mix = EnumeratedMixture::new(&table)?;
        mass = mass.max((mix.total_mass() - 1.0).abs());
        let exact = mix.step_marginals();
        for (row_f, row_e) in step_marginals(&fast).iter().zip(&exact) {
            for (a, b) in row_f.iter().zip(row_e) {
                step_err = step_err.max((a - b).abs());
            }
        }
        for ((t, l), m) in pairwise_marginals(&fast) {
            pair_err = pair_err.max((m - mix.pairwise_marginal(t, l)).abs());
        }
    }

    let linear = linear_bank_error(steps.min(6), opts, &mut rng)?;
    Ok(OracleReport {
        checks: vec![
            CheckResult {
                name: "sequence probabilities sum to one".into(),
                max_error: mass,
                tolerance: MARGINAL_TOL,
            },
            CheckResult {
                name: "step marginals match enumeration".into(),
                max_error: step_err,
                tolerance: MARGINAL_TOL,
            },
            CheckResult {
                name: "pairwise marginals match enumeration".into(),
                max_error: pair_err,
                tolerance: MARGINAL_TOL,
            },
            CheckResult {
                name: "linear-bank expectation equals mixture mean".into(),
                max_error: linear,
                tolerance: MIXTURE_MEAN_TOL,
            },
        ],
    })
}

fn faulted(table: &TransitionTable, fault: Option<f64>) -> Result<TransitionTable> {
    let mut fast = table.clone();
    let Some(delta) = fault else {
        return Ok(fast);
    };
    // (T, T) always carries the full mass of s_T = T, so any change shows up.
    let t = table.steps();
    let p = table.prob(t, t);
    let q = if p + delta <= 1.0 {
        p + delta
    } else {
        p - delta
    };
    fast.unprune_all();
    for (tt, ll) in table.free_entries() {
        if table.is_pruned(tt, ll) && (tt, ll) != (t, t) {
            fast.prune(tt, ll)?;
        }
    }
    fast.set_prob(t, t, q)?;
    Ok(fast)
}

/// Relative error between the expectation recurrence and the enumerated
/// mixture mean on a model with identity activations.
fn linear_bank_error<R: Rng + ?Sized>(
    steps: usize,
    opts: &OracleOptions,
    rng: &mut R,
) -> Result<f64> {
    let topo = Topology::chain(steps, 4, (4, 4), 3)
        .with_activation(Activation::Identity)
        .with_embed_dim(4);
    let mut model = Cnmm::new(topo, opts.seed)?;
    randomize_inference_state(&mut model, rng);
    let table = random_table(steps, rng)?;
    model.table = table.clone();
    let images = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
    let exact = mixture_mean(&model, &images, steps)?;
    model.table = faulted(&table, opts.fault)?;
    let fast = expected_output(&model, &images, steps)?;
    let scale = exact.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(fast.max_abs_diff(&exact) / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_passes_and_detects_faults() {
        let mut opts = OracleOptions {
            steps: 4,
            trials: 20,
            seed: 3,
            fault: None,
        };
        let report = run_oracle_checks(&opts).unwrap();
        assert!(report.passed(), "{report:?}");
        opts.fault = Some(1e-6);
        let report = run_oracle_checks(&opts).unwrap();
        assert!(!report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_out_of_range_lengths() {
        let opts = OracleOptions {
            steps: 11,
            trials: 1,
            seed: 0,
            fault: None,
        };
        assert!(run_oracle_checks(&opts).is_err());
    }

    #[test]
    fn conditional_exit_weights_are_normalised() {
        let mut rng = stream(5, Stream::Oracle);
        let table = random_table(5, &mut rng).unwrap();
        let mix = EnumeratedMixture::new(&table).unwrap();
        for exit in 1..=5 {
            let total: f64 = mix
                .conditional_on_exit(&table, exit)
                .iter()
                .map(|(_, p)| p)
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "exit {exit}: {total}");
        }
    }
}
