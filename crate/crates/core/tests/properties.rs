//! Property tests for the mixture arithmetic, pruning and the elementwise ops.

use cnmm::autodiff::Graph;
use cnmm::mixture::{pairwise_marginals, sequence_prob, step_marginals, Sequence};
use cnmm::oracle::EnumeratedMixture;
use cnmm::prune::{count_flops, prune_step};
use cnmm::{GateMode, Tensor, Topology, TransitionTable};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn logit() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -6.0..6.0f64,
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

/// A table of `steps` steps with arbitrary logits and a random pruned subset.
fn table() -> impl Strategy<Value = TransitionTable> {
    (1usize..=7).prop_flat_map(|steps| {
        let free = steps * (steps - 1) / 2;
        (
            Just(steps),
            prop::collection::vec(logit(), free),
            prop::collection::vec(prop::bool::weighted(0.15), free),
        )
            .prop_map(|(steps, logits, pruned)| {
                let mut table = TransitionTable::new(steps).unwrap();
                let entries: Vec<_> = table.free_entries().collect();
                for (k, (t, l)) in entries.into_iter().enumerate() {
                    table.set_logit(t, l, logits[k]).unwrap();
                    if pruned[k] {
                        table.prune(t, l).unwrap();
                    }
                }
                table
            })
    })
}

proptest! {
    #[test]
    fn marginals_match_enumeration(table in table()) {
        let mix = EnumeratedMixture::new(&table).unwrap();
        prop_assert!((mix.total_mass() - 1.0).abs() < TOL);
        let fast = step_marginals(&table);
        let slow = mix.step_marginals();
        let steps = table.steps();
        for t in 0..=steps {
            let row: f64 = fast[t].iter().sum();
            prop_assert!((row - 1.0).abs() < TOL);
            for l in 0..=steps {
                prop_assert!((fast[t][l] - slow[t][l]).abs() < TOL);
            }
        }
        for ((t, l), m) in pairwise_marginals(&table) {
            prop_assert!((m - mix.pairwise_marginal(t, l)).abs() < TOL);
        }
    }

    #[test]
    fn gate_patterns_give_valid_sequences(steps in 1usize..=9, bits in any::<u64>()) {
        let seq = Sequence::from_gates(steps, |t, l| (bits >> ((t * 7 + l) % 64)) & 1 == 1);
        prop_assert!(Sequence::new(seq.as_slice().to_vec()).is_ok());
        prop_assert_eq!(seq.as_slice()[steps], steps);
        prop_assert_eq!(seq.as_slice()[0], 0);
        prop_assert_eq!(seq.functions().len(), seq.active_gates().len() + 1);
    }

    #[test]
    fn sequence_probabilities_sum_to_one(table in table()) {
        let mix = EnumeratedMixture::new(&table).unwrap();
        let total: f64 = mix.sequences.iter().map(|s| sequence_prob(&table, s).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < TOL);
    }

    #[test]
    fn pruning_preserves_normalisation(mut table in table()) {
        let before = table.num_pruned();
        match prune_step(&mut table) {
            Ok(a) => {
                prop_assert_eq!(table.num_pruned(), before + 1);
                prop_assert_eq!(table.prob(a.t, a.l), 0.0);
                let mass = EnumeratedMixture::new(&table).unwrap().total_mass();
                prop_assert!((mass - 1.0).abs() < TOL);
            }
            Err(_) => {
                prop_assert!(table.free_entries().all(|(t, l)| table.prob(t, l) <= 0.0));
            }
        }
    }

    #[test]
    fn pruning_never_raises_flops(table in table(), c in 1usize..=2, side in 2usize..=6) {
        let steps = table.steps();
        let topo = Topology::chain(steps, 4 * c, (side, side), 3);
        let mut work = table.clone();
        let before = count_flops(&topo, &work, steps, GateMode::Expectation).flops;
        if prune_step(&mut work).is_ok() {
            prop_assert!(count_flops(&topo, &work, steps, GateMode::Expectation).flops <= before);
        }
    }

    #[test]
    fn affine_combine_is_a_convex_combination(
        g in 0.0..=1.0f64,
        a in prop::collection::vec(-10.0..10.0f64, 1..16),
        shift in prop::collection::vec(-10.0..10.0f64, 16),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let n = a.len();
        let mut graph = Graph::new();
        let gv = graph.leaf(Tensor::scalar(g));
        let av = graph.leaf(Tensor::new(vec![n], a.clone()).unwrap());
        let bv = graph.leaf(Tensor::new(vec![n], b.clone()).unwrap());
        let y = graph.affine_combine(gv, av, bv).unwrap();
        for ((&y, &x), &z) in graph.value(y).data().iter().zip(&a).zip(&b) {
            prop_assert!(y >= x.min(z) - 1e-12 && y <= x.max(z) + 1e-12);
        }
    }

    #[test]
    fn tensor_length_must_match_shape(dims in prop::collection::vec(1usize..4, 1..=4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
    }
}
