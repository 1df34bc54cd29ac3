//! Marginal-based pruning, reachability of blocks from a classifier, FLOP
//! accounting and accuracy/FLOPs trade-off sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{pairwise_marginals, TransitionTable};
use crate::model::{required_entries, softmax_rows, Activation, Cnmm, GateMode, Topology};

/// One pruning decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneAction {
    pub t: usize,
    pub l: usize,
    /// `p(s_t = l, s_{t-1} = t - 1)` when the entry was chosen.
    pub marginal: f64,
    pub step_index: usize,
}

impl PruneAction {
    /// The block removed by this action.
    pub fn function(&self) -> (usize, usize) {
        (self.t - 1, self.l)
    }
}

/// Sets `π(t, l) = 0` for the live free entry with the smallest pairwise
/// marginal, ties going to the smallest `t` and then `l`.
pub fn prune_step(table: &mut TransitionTable) -> Result<PruneAction> {
    let mut best: Option<((usize, usize), f64)> = None;
    for ((t, l), m) in pairwise_marginals(table) {
        if table.prob(t, l) <= 0.0 {
            continue;
        }
        if best.is_none_or(|(_, b)| m < b) {
            best = Some(((t, l), m));
        }
    }
    let ((t, l), marginal) = best.ok_or(Error::NothingToPrune)?;
    table.prune(t, l)?;
    Ok(PruneAction {
        t,
        l,
        marginal,
        step_index: table.num_pruned() - 1,
    })
}

/// Up to `max_steps` successive [`prune_step`]s on a copy of `table`.
pub fn prune_schedule(table: &TransitionTable, max_steps: usize) -> Vec<PruneAction> {
    let mut work = table.clone();
    let mut out = Vec::new();
    for k in 0..max_steps {
        match prune_step(&mut work) {
            Ok(mut a) => {
                a.step_index = k;
                out.push(a);
            }
            Err(_) => break,
        }
    }
    out
}

/// Blocks `(i, j)` whose output reaches `h[exit][T]` under `mode`.
pub fn live_functions(
    table: &TransitionTable,
    exit: usize,
    mode: GateMode,
) -> BTreeSet<(usize, usize)> {
    let need = required_entries(table, mode, Some(exit), false);
    let steps = table.steps();
    let mut live = BTreeSet::new();
    for (t, row) in need.iter().enumerate().take(exit + 1).skip(1) {
        for l in t..=steps {
            if row[l] && (t == 1 || mode.effective_prob(table, t, l) > 0.0) {
                live.insert((t - 1, l));
            }
        }
    }
    live
}

/// Per-image cost of one operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub exit: usize,
    pub flops: u64,
    pub params: usize,
    pub live: BTreeSet<(usize, usize)>,
}

/// Per-image FLOPs and parameter count of the classifier at `exit`, counting
/// the stem, every live block, the gate combinations and the head.
///
/// Convention: a multiply-accumulate is 2 FLOPs; batch norm 2 and ReLU 1 per
/// element; pooling 1 per input element; a gated combination 3 and a sum 1
/// per element; a biased linear layer adds 1 per output.
pub fn count_flops(
    topo: &Topology,
    table: &TransitionTable,
    exit: usize,
    mode: GateMode,
) -> FlopReport {
    let relu = u64::from(topo.activation == Activation::Relu);
    let area = |t: usize| {
        let (h, w) = topo.resolution[t];
        (h * w) as u64
    };
    let ch = |t: usize| topo.channels[t] as u64;
    let mut flops = 0u64;
    let mut params = 0usize;

    let (c0, q0, a0, cin) = (ch(0), ch(0) / 4, area(0), topo.input_channels as u64);
    flops += 2 * q0 * a0 * cin * 9 + (2 + relu) * q0 * a0 + 2 * c0 * a0 * q0 + 2 * c0 * a0;
    params += (q0 * cin * 9 + 2 * q0 + c0 * q0 + 2 * c0) as usize;

    let live = live_functions(table, exit, mode);
    let sources: BTreeSet<usize> = live.iter().map(|&(i, _)| i).collect();
    for &i in &sources {
        let (c, q, a) = (ch(i), ch(i) / 4, area(i));
        flops += (2 + relu) * c * a + 2 * c * a * 9 + 2 * q * a * c;
        params += (2 * c + 9 * c + q * c) as usize;
    }
    for &(i, j) in &live {
        let q = ch(i) / 4;
        let mut r = topo.resolution[i];
        for _ in 0..topo.pool_stages(i, j) {
            flops += q * (r.0 * r.1) as u64;
            r = (r.0.div_ceil(2), r.1.div_ceil(2));
        }
        let (cj, a) = (ch(j), area(j));
        flops += (2 + relu) * q * a + 2 * cj * a * q + 2 * cj * a;
        params += (2 * q + cj * q + 2 * cj) as usize;
    }

    let need = required_entries(table, mode, Some(exit), false);
    let steps = topo.steps;
    for (t, row) in need.iter().enumerate().take(exit + 1).skip(2) {
        for l in t..=steps {
            let p = mode.effective_prob(table, t, l);
            if row[l] && p > 0.0 && p < 1.0 {
                let per = if mode == GateMode::DeterministicSum {
                    1
                } else {
                    3
                };
                flops += per * ch(l) * area(l);
            }
        }
    }

    let (c, a, e, k) = (
        ch(steps),
        area(steps),
        topo.embed_dim as u64,
        topo.num_classes as u64,
    );
    flops += (3 + relu) * c * a;
    flops += 2 * e * c + 2 * e + 2 * e * k + k;
    params += (2 * c + e * c + 2 * e + k * e + k) as usize;

    FlopReport {
        exit,
        flops,
        params,
        live,
    }
}

/// One row of a trade-off sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub prune_steps: usize,
    pub exit: usize,
    pub flops: u64,
    pub params: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy against FLOPs for every `(prune level, exit)` pair, without any
/// retraining.
///
/// Level `k` applies the first `k` actions of the pruning schedule. A level
/// whose live block set at an exit equals that of the previous reported level
/// costs the same and is skipped, so FLOPs strictly decrease with the level
/// for every exit. Rows are sorted by FLOPs, then exit, then level.
pub fn tradeoff_sweep(
    model: &Cnmm,
    data: &Dataset,
    levels: &[usize],
    exits: &[usize],
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "trade-off sweep needs a non-empty dataset".into(),
        ));
    }
    for &e in exits {
        model.topology.exit_index(e)?;
    }
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let max_level = levels.last().copied().unwrap_or(0);
    let schedule = prune_schedule(&model.table, max_level);
    let mode = model.inference_mode();
    let mut last_live: Vec<Option<BTreeSet<(usize, usize)>>> = vec![None; exits.len()];
    let mut rows = Vec::new();
    for &level in &levels {
        if level > schedule.len() {
            break;
        }
        let mut pruned = model.clone();
        for a in &schedule[..level] {
            pruned.table.prune(a.t, a.l)?;
        }
        for (k, &exit) in exits.iter().enumerate() {
            let report = count_flops(&pruned.topology, &pruned.table, exit, mode);
            if last_live[k].as_ref() == Some(&report.live) {
                continue;
            }
            let (accuracy, loss) = exit_accuracy(&pruned, data, exit, batch_size)?;
            rows.push(SweepRow {
                prune_steps: level,
                exit,
                flops: report.flops,
                params: report.params,
                accuracy,
                loss,
            });
            last_live[k] = Some(report.live);
        }
    }
    rows.sort_by_key(|r| (r.flops, r.exit, r.prune_steps));
    Ok(rows)
}

/// Accuracy and mean cross-entropy of one classifier in inference mode.
pub fn exit_accuracy(
    model: &Cnmm,
    data: &Dataset,
    exit: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let p = softmax_rows(&model.infer(&images, exit)?.logits)?;
        let k = p.shape()[1];
        for (row, &y) in p.data().chunks(k).zip(&labels) {
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += usize::from(best == y);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub const SWEEP_HEADER: &str = "prune_steps,exit_step,flops,params,accuracy,loss";

/// CSV with [`SWEEP_HEADER`], LF line endings and 9 significant digits.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.prune_steps,
            r.exit,
            r.flops,
            r.params,
            sig9(r.accuracy),
            sig9(r.loss)
        );
    }
    out
}

/// `x` with 9 significant digits.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
        .parse::<f64>()
        .map(|v| v.to_string())
        .unwrap_or_else(|_| x.to_string())
}
