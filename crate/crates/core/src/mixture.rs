//! The distribution over network-encoding sequences.
//!
//! A sequence `s_0..s_T` with `s_0 = 0`, `s_T = T` and `s_{t-1} ∈ {t-1, s_t}`
//! names one member network: consecutive entries `(s_{t-1}, s_t)` select the
//! block `f_{s_{t-1}}^{s_t}`, identity when the two are equal. The sequence is
//! generated backwards by one Bernoulli choice per step, whose parameter
//! `π(t, l)` is the probability that `s_{t-1} = t - 1` given `s_t = l`.
//!
//! Gate indices used throughout the crate are `(t, l)` with `2 <= t <= T`
//! and `t <= l <= T`. Row `t = 1` is structural: `s_0 = 0` always, so its
//! probability is fixed at one and it is never a pruning candidate.

use rand::Rng;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// Largest chain length accepted by [`enumerate_sequences`].
pub const MAX_ENUMERATION_STEPS: usize = 20;

/// A valid network-encoding sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence(Vec<usize>);

impl Sequence {
    pub fn new(s: Vec<usize>) -> Result<Self> {
        if is_valid_sequence(&s) {
            Ok(Self(s))
        } else {
            Err(Error::InvalidSequence(s))
        }
    }

    /// The deepest chain `0, 1, ..., T`.
    pub fn chain(steps: usize) -> Self {
        Self((0..=steps).collect())
    }

    /// The single-block network `0, T, ..., T`.
    pub fn shortcut(steps: usize) -> Self {
        let mut s = vec![steps; steps + 1];
        s[0] = 0;
        Self(s)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    /// Non-identity blocks `(i, j)` applied in order.
    pub fn functions(&self) -> Vec<(usize, usize)> {
        self.0
            .windows(2)
            .filter(|w| w[0] != w[1])
            .map(|w| (w[0], w[1]))
            .collect()
    }

    /// Gates `(t, s_t)` set to one along the path, excluding the structural row.
    pub fn active_gates(&self) -> Vec<(usize, usize)> {
        (2..=self.steps())
            .filter(|&t| self.0[t - 1] == t - 1)
            .map(|t| (t, self.0[t]))
            .collect()
    }

    /// Decodes the sequence selected by a full assignment of binary gates.
    pub fn from_gates(steps: usize, mut gate: impl FnMut(usize, usize) -> bool) -> Self {
        let mut s = vec![0; steps + 1];
        s[steps] = steps;
        for t in (2..=steps).rev() {
            s[t - 1] = if gate(t, s[t]) { t - 1 } else { s[t] };
        }
        s[0] = 0;
        Self(s)
    }
}

impl std::fmt::Display for Sequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

pub fn is_valid_sequence(s: &[usize]) -> bool {
    let Some(steps) = s.len().checked_sub(1) else {
        return false;
    };
    if steps == 0 || s[0] != 0 || s[steps] != steps {
        return false;
    }
    (1..=steps).all(|t| s[t - 1] <= s[t] && (s[t - 1] == t - 1 || s[t - 1] == s[t]))
}

/// All `2^(T-1)` valid sequences in lexicographic order.
pub fn enumerate_sequences(steps: usize) -> Result<Vec<Sequence>> {
    if !(1..=MAX_ENUMERATION_STEPS).contains(&steps) {
        return Err(Error::InvalidArgument(format!(
            "enumeration needs 1 <= T <= {MAX_ENUMERATION_STEPS}, got {steps}"
        )));
    }
    let free = steps - 1;
    let mut out: Vec<Sequence> = (0u64..1 << free)
        .map(|mask| {
            // Bit (t - 2) decides the gate at step t.
            Sequence::from_gates(steps, |t, _| mask >> (t - 2) & 1 == 1)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Learnable Bernoulli parameters of the reversed Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    steps: usize,
    row_offset: Vec<usize>,
    logits: Vec<f64>,
    pruned: Vec<bool>,
    grads: Vec<f64>,
}

impl TransitionTable {
    /// A table with every free logit at zero (`π = 0.5`).
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("chain length must be >= 1".into()));
        }
        let mut row_offset = vec![0; steps + 2];
        let mut acc = 0;
        for t in 2..=steps {
            row_offset[t] = acc;
            acc += steps - t + 1;
        }
        row_offset[steps + 1] = acc;
        Ok(Self {
            steps,
            row_offset,
            logits: vec![0.0; acc],
            pruned: vec![false; acc],
            grads: vec![0.0; acc],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `T(T-1)/2`.
    pub fn num_free(&self) -> usize {
        self.logits.len()
    }

    pub fn is_structural(t: usize) -> bool {
        t == 1
    }

    /// Free entries `(t, l)` in ascending order.
    pub fn free_entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (2..=self.steps).flat_map(move |t| (t..=self.steps).map(move |l| (t, l)))
    }

    /// True when `(t, l)` names a gate, structural or free.
    pub fn contains(&self, t: usize, l: usize) -> bool {
        (1..=self.steps).contains(&t) && (t..=self.steps).contains(&l)
    }

    pub(crate) fn slot(&self, t: usize, l: usize) -> Result<usize> {
        if t >= 2 && self.contains(t, l) {
            Ok(self.row_offset[t] + (l - t))
        } else if t == 1 && self.contains(t, l) {
            Err(Error::InvalidArgument(format!(
                "gate (1, {l}) is structural and has no free parameter"
            )))
        } else {
            Err(Error::InvalidArgument(format!(
                "gate ({t}, {l}) outside the table for T = {}",
                self.steps
            )))
        }
    }

    pub fn logit(&self, t: usize, l: usize) -> Result<f64> {
        Ok(self.logits[self.slot(t, l)?])
    }

    pub fn set_logit(&mut self, t: usize, l: usize, logit: f64) -> Result<()> {
        if logit.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "NaN logit for gate ({t}, {l})"
            )));
        }
        let k = self.slot(t, l)?;
        self.logits[k] = logit;
        Ok(())
    }

    /// Sets `π(t, l) = p` through its logit; 0 and 1 map to infinite logits.
    pub fn set_prob(&mut self, t: usize, l: usize, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        self.set_logit(t, l, p.ln() - (-p).ln_1p())
    }

    pub fn is_pruned(&self, t: usize, l: usize) -> bool {
        self.slot(t, l).map(|k| self.pruned[k]).unwrap_or(false)
    }

    /// Forces `π(t, l)` to exactly zero.
    pub fn prune(&mut self, t: usize, l: usize) -> Result<()> {
        let k = self.slot(t, l)?;
        self.pruned[k] = true;
        Ok(())
    }

    pub fn unprune_all(&mut self) {
        self.pruned.iter_mut().for_each(|p| *p = false);
    }

    pub fn num_pruned(&self) -> usize {
        self.pruned.iter().filter(|p| **p).count()
    }

    /// `π(t, l)`: 1 for the structural row, 0 when pruned, else `sigmoid(logit)`.
    ///
    /// Panics if `(t, l)` is not a gate of this table.
    pub fn prob(&self, t: usize, l: usize) -> f64 {
        assert!(self.contains(t, l), "gate ({t}, {l}) outside table");
        if t == 1 {
            return 1.0;
        }
        let k = self.row_offset[t] + (l - t);
        if self.pruned[k] {
            0.0
        } else {
            sigmoid(self.logits[k])
        }
    }

    /// `(ln π, ln(1 - π))` computed from the logit without cancellation.
    pub fn log_probs(&self, t: usize, l: usize) -> (f64, f64) {
        assert!(self.contains(t, l), "gate ({t}, {l}) outside table");
        if t == 1 {
            return (0.0, f64::NEG_INFINITY);
        }
        let k = self.row_offset[t] + (l - t);
        if self.pruned[k] {
            return (f64::NEG_INFINITY, 0.0);
        }
        let x = self.logits[k];
        (-softplus(-x), -softplus(x))
    }

    pub fn grad(&self, t: usize, l: usize) -> Result<f64> {
        Ok(self.grads[self.slot(t, l)?])
    }

    pub fn add_grad(&mut self, t: usize, l: usize, g: f64) -> Result<()> {
        let k = self.slot(t, l)?;
        self.grads[k] += g;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Flat view of the free logits in ascending `(t, l)` order.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }
}

fn softplus(x: f64) -> f64 {
    if x == f64::INFINITY {
        return f64::INFINITY;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln p(s_{0:T})` under the reversed chain; `-inf` when a zero-probability transition is used.
pub fn sequence_log_prob(table: &TransitionTable, seq: &Sequence) -> Result<f64> {
    let s = seq.as_slice();
    if seq.steps() != table.steps() {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} steps, table {}",
            seq.steps(),
            table.steps()
        )));
    }
    let mut lp = 0.0;
    for t in 2..=table.steps() {
        let (take, skip) = table.log_probs(t, s[t]);
        lp += if s[t - 1] == t - 1 { take } else { skip };
    }
    Ok(lp)
}

pub fn sequence_prob(table: &TransitionTable, seq: &Sequence) -> Result<f64> {
    sequence_log_prob(table, seq).map(f64::exp)
}

/// `m[t][l] = p(s_t = l)` for `0 <= t, l <= T` (zero outside `l >= t`).
pub fn step_marginals(table: &TransitionTable) -> Vec<Vec<f64>> {
    let steps = table.steps();
    let mut m = vec![vec![0.0; steps + 1]; steps + 1];
    m[steps][steps] = 1.0;
    for t in (1..=steps).rev() {
        for l in t..=steps {
            let p = m[t][l];
            if p == 0.0 {
                continue;
            }
            let pi = table.prob(t, l);
            m[t - 1][t - 1] += pi * p;
            if pi < 1.0 {
                m[t - 1][l] += (1.0 - pi) * p;
            }
        }
    }
    m
}

/// `p(s_t = l, s_{t-1} = t - 1)`: total probability of networks using `f_{t-1}^l`.
pub fn pairwise_marginal(table: &TransitionTable, t: usize, l: usize) -> Result<f64> {
    if TransitionTable::is_structural(t) {
        return Err(Error::InvalidArgument(format!(
            "gate (1, {l}) is structural, not a pruning candidate"
        )));
    }
    table.slot(t, l)?;
    let m = step_marginals(table);
    Ok(table.prob(t, l) * m[t][l])
}

/// Pairwise marginals for every free entry, in ascending `(t, l)` order.
pub fn pairwise_marginals(table: &TransitionTable) -> Vec<((usize, usize), f64)> {
    let m = step_marginals(table);
    table
        .free_entries()
        .map(|(t, l)| ((t, l), table.prob(t, l) * m[t][l]))
        .collect()
}

/// Ancestral sample of a sequence, generated from `s_T = T` backwards.
pub fn sample_sequence<R: Rng + ?Sized>(table: &TransitionTable, rng: &mut R) -> Sequence {
    Sequence::from_gates(table.steps(), |t, l| rng.random::<f64>() < table.prob(t, l))
}

/// A drawn gate value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateSample {
    pub value: f64,
    pub t: usize,
    pub l: usize,
    pub temperature: f64,
    /// True when `value` is exactly 0 or 1 rather than a relaxed sample.
    pub hard: bool,
}

/// Uniform draw on the open interval (0, 1).
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Logistic noise `ln u - ln(1 - u)`.
pub fn logistic_noise(u: f64) -> f64 {
    u.ln() - (-u).ln_1p()
}

/// Binary concrete sample `sigmoid((logit + ln u - ln(1 - u)) / temperature)`.
pub fn concrete_sample(logit: f64, u: f64, temperature: f64) -> f64 {
    sigmoid((logit + logistic_noise(u)) / temperature)
}

/// Draws a relaxed gate; pruned entries give a hard 0 and structural ones a hard 1.
pub fn sample_concrete_gate<R: Rng + ?Sized>(
    table: &TransitionTable,
    t: usize,
    l: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<GateSample> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    if !table.contains(t, l) {
        return Err(Error::InvalidArgument(format!(
            "gate ({t}, {l}) outside table"
        )));
    }
    let hard = |value| GateSample {
        value,
        t,
        l,
        temperature,
        hard: true,
    };
    if TransitionTable::is_structural(t) {
        return Ok(hard(1.0));
    }
    if table.is_pruned(t, l) {
        return Ok(hard(0.0));
    }
    let u = open_uniform(rng);
    Ok(GateSample {
        value: concrete_sample(table.logit(t, l)?, u, temperature),
        t,
        l,
        temperature,
        hard: false,
    })
}

/// The Bernoulli parameter used in place of a sample at inference.
pub fn expected_gate(table: &TransitionTable, t: usize, l: usize) -> Result<f64> {
    if !table.contains(t, l) {
        return Err(Error::InvalidArgument(format!(
            "gate ({t}, {l}) outside table"
        )));
    }
    Ok(table.prob(t, l))
}
