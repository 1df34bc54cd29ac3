use rand::Rng;

use super::*;
use crate::mixture::Sequence;
use crate::oracle::{evaluate_network, mixture_mean, randomize_inference_state};

fn images(n: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Oracle);
    Tensor::from_fn(&[n, 3, side, side], |_| rng.random_range(0.0..1.0))
}

fn small(steps: usize, activation: Activation) -> Cnmm {
    let topo = Topology::chain(steps, 4, (4, 4), 3)
        .with_activation(activation)
        .with_embed_dim(4);
    let mut m = Cnmm::new(topo, 1).unwrap();
    randomize_inference_state(&mut m, &mut stream(2, Stream::Oracle));
    m
}

fn expectation<'m>(
    model: &'m Cnmm,
    x: &Tensor,
    opts: Propagation<'_>,
) -> (Vec<Vec<Option<Tensor>>>, Pass<'m>) {
    let mut pass = Pass::new(model, false);
    let v = pass.input(x);
    let state = pass.propagate(v, opts).unwrap();
    let t = model.steps();
    let values = (0..=t)
        .map(|i| {
            (0..=t)
                .map(|l| state.h(i, l).map(|h| pass.graph.value(h).clone()))
                .collect()
        })
        .collect();
    (values, pass)
}

#[test]
fn all_gates_open_reduce_to_the_shortcut_chain() {
    let mut model = small(4, Activation::Relu);
    for (t, l) in model.table.free_entries().collect::<Vec<_>>() {
        model.table.set_prob(t, l, 1.0).unwrap();
    }
    let x = images(2, 4, 0);
    let (h, _) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    let net = Sequence::new(vec![0, 1, 4, 4, 4]).unwrap();
    assert_eq!(
        h[2][4].as_ref().unwrap(),
        &evaluate_network(&model, &net, &x).unwrap()
    );
}

#[test]
fn degenerate_tables_pick_out_single_networks() {
    let mut rng = stream(7, Stream::Oracle);
    let x = images(2, 4, 1);
    for _ in 0..8 {
        let mut model = small(5, Activation::Relu);
        let seq = Sequence::from_gates(5, |_, _| rng.random_bool(0.5));
        for (t, l) in model.table.free_entries().collect::<Vec<_>>() {
            let take = seq.as_slice()[t] == l && seq.as_slice()[t - 1] == t - 1;
            model
                .table
                .set_prob(t, l, if take { 1.0 } else { 0.0 })
                .unwrap();
        }
        let (h, _) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
        assert_eq!(
            h[5][5].as_ref().unwrap(),
            &evaluate_network(&model, &seq, &x).unwrap(),
            "{seq}"
        );
    }
}

#[test]
fn linear_banks_propagate_the_exact_mixture_mean() {
    let mut rng = stream(11, Stream::Oracle);
    for steps in 2..=5 {
        let mut model = small(steps, Activation::Identity);
        for (t, l) in model.table.free_entries().collect::<Vec<_>>() {
            model
                .table
                .set_logit(t, l, rng.random_range(-3.0..3.0))
                .unwrap();
        }
        let x = images(2, 4, steps as u64);
        for exit in 1..=steps {
            let mut opts = Propagation::new(GateMode::Expectation);
            opts.exit = Some(exit);
            let (h, _) = expectation(&model, &x, opts);
            let fast = h[exit][steps].as_ref().unwrap();
            let exact = mixture_mean(&model, &x, exit).unwrap();
            assert!(fast.max_abs_diff(&exact) < 1e-9, "T={steps} exit={exit}");
        }
    }
}

#[test]
fn relu_banks_do_not_propagate_the_mixture_mean() {
    let model = small(3, Activation::Relu);
    let x = images(2, 4, 5);
    let (h, _) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    let exact = mixture_mean(&model, &x, 3).unwrap();
    assert!(h[3][3].as_ref().unwrap().max_abs_diff(&exact) > 1e-6);
}

#[test]
fn skipping_pruned_blocks_is_exact() {
    let mut model = small(5, Activation::Relu);
    model.table.prune(2, 3).unwrap();
    model.table.prune(4, 5).unwrap();
    model.table.set_logit(3, 5, 0.7).unwrap();
    let x = images(3, 4, 2);
    let (skipped, pass) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    assert_eq!(pass.evaluations().get(&(1, 3)), None);
    assert_eq!(pass.evaluations().get(&(3, 5)), None);
    let mut opts = Propagation::new(GateMode::Expectation);
    opts.evaluate_pruned = true;
    let (full, pass) = expectation(&model, &x, opts);
    assert_eq!(pass.evaluations().get(&(1, 3)), Some(&1));
    assert_eq!(skipped[5][5], full[5][5]);
    assert_eq!(skipped[3][4], full[3][4]);
}

#[test]
fn one_evaluation_per_block_and_shared_prefixes() {
    let model = small(4, Activation::Relu);
    let x = images(2, 4, 3);
    let (_, pass) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    assert_eq!(pass.evaluations().len(), 10);
    assert!(pass.evaluations().values().all(|&n| n == 1));
}

#[test]
fn exit_restricted_propagation_matches_full() {
    let model = small(4, Activation::Relu);
    let x = images(2, 4, 4);
    let (full, _) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    for exit in 1..=4 {
        let mut opts = Propagation::new(GateMode::Expectation);
        opts.exit = Some(exit);
        let (part, pass) = expectation(&model, &x, opts);
        assert_eq!(part[exit][4], full[exit][4]);
        let expected_blocks = exit * (exit + 1) / 2;
        assert_eq!(pass.evaluations().len(), expected_blocks, "exit {exit}");
    }
}

#[test]
fn hard_and_concrete_gates_need_noise_per_item() {
    let model = small(3, Activation::Relu);
    let x = images(2, 4, 0);
    let mut pass = Pass::new(&model, false);
    let v = pass.input(&x);
    assert!(pass.propagate(v, Propagation::new(GateMode::Hard)).is_err());
    let noise = GateNoise::draw(&model.table, 3, &mut stream(0, Stream::Gates));
    let mut opts = Propagation::new(GateMode::Hard);
    opts.noise = Some(&noise);
    assert!(pass.propagate(v, opts).is_err());
}

#[test]
fn hard_gates_follow_per_image_draws() {
    let model = small(3, Activation::Relu);
    let x = images(4, 4, 9);
    let noise = GateNoise::draw(&model.table, 4, &mut stream(3, Stream::Gates));
    let mut opts = Propagation::new(GateMode::Hard);
    opts.noise = Some(&noise);
    let (h, pass) = expectation(&model, &x, opts);
    let out = h[3][3].as_ref().unwrap();
    let per = out.len() / 4;
    for item in 0..4 {
        let seq = Sequence::from_gates(3, |t, l| {
            noise.uniforms(&model.table, t, l).unwrap()[item] < model.table.prob(t, l)
        });
        let net = evaluate_network(&model, &seq, &x).unwrap();
        assert_eq!(
            &out.data()[item * per..(item + 1) * per],
            &net.data()[item * per..(item + 1) * per]
        );
    }
    drop(pass);
}

#[test]
fn concrete_noise_is_replayable() {
    let model = small(3, Activation::Relu);
    let x = images(2, 4, 9);
    let noise = GateNoise::draw(&model.table, 2, &mut stream(3, Stream::Gates));
    let mut opts = Propagation::new(GateMode::Concrete { temperature: 2.0 });
    opts.noise = Some(&noise);
    let (a, _) = expectation(&model, &x, opts);
    let (b, _) = expectation(&model, &x, opts);
    assert_eq!(a[3][3], b[3][3]);
    opts.mode = GateMode::Concrete { temperature: 0.0 };
    let mut pass = Pass::new(&model, false);
    let v = pass.input(&x);
    assert!(pass.propagate(v, opts).is_err());
}

#[test]
fn deterministic_sum_adds_branches() {
    let mut model = small(2, Activation::Relu);
    model.variant = Variant::DeterministicSum;
    let x = images(1, 4, 6);
    let (h, _) = expectation(&model, &x, Propagation::new(GateMode::DeterministicSum));
    let a = evaluate_network(&model, &Sequence::chain(2), &x).unwrap();
    let b = evaluate_network(&model, &Sequence::shortcut(2), &x).unwrap();
    let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
    assert_eq!(h[2][2].as_ref().unwrap().data(), sum.as_slice());
}

#[test]
fn multiscale_blocks_change_shape() {
    let topo = Topology::multiscale(2, 2, 8, (8, 8), 3).with_embed_dim(8);
    let model = Cnmm::new(topo, 0).unwrap();
    let x = images(2, 8, 0);
    let (h, _) = expectation(&model, &x, Propagation::new(GateMode::Expectation));
    assert_eq!(h[1][2].as_ref().unwrap().shape(), &[2, 8, 8, 8]);
    assert_eq!(h[1][4].as_ref().unwrap().shape(), &[2, 16, 4, 4]);
    assert_eq!(h[4][4].as_ref().unwrap().shape(), &[2, 16, 4, 4]);
    let p = model.predict(&x, 2).unwrap();
    assert_eq!(p.shape(), &[2, 3]);
}

#[test]
fn untrained_predictions_are_near_uniform() {
    let model = Cnmm::new(Topology::chain(3, 8, (6, 6), 5), 0).unwrap();
    let p = model.predict(&images(3, 6, 1), 3).unwrap();
    for row in p.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (v - 0.2).abs() < 0.05), "{row:?}");
    }
}

#[test]
fn input_shape_is_checked() {
    let model = small(2, Activation::Relu);
    assert!(model.predict(&images(1, 5, 0), 2).is_err());
    assert!(model.predict(&images(1, 4, 0), 7).is_err());
}

#[test]
fn training_is_deterministic_and_learns() {
    use crate::data::{gen_synthetic, SyntheticSpec};
    let spec = SyntheticSpec {
        num_classes: 3,
        train_per_class: 16,
        test_per_class: 8,
        height: 6,
        width: 6,
        noise_sigma: 0.1,
        seed: 1,
    };
    let (train, test) = gen_synthetic(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Cnmm::new(Topology::chain(3, 8, (6, 6), 3), 5).unwrap();
        let mut trainer = Trainer::new(cfg.clone(), &mut model, train.len()).unwrap();
        let losses: Vec<f64> = (0..cfg.epochs)
            .map(|_| trainer.train_epoch(&mut model, &train).unwrap().loss)
            .collect();
        (model, losses)
    };
    let (model, losses) = run();
    let (again, losses2) = run();
    assert_eq!(losses, losses2);
    assert_eq!(model, again);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let metrics = evaluate(&model, &test, 7).unwrap();
    assert!(metrics.last().unwrap().accuracy > 0.6, "{metrics:?}");
    assert_ne!(
        model.table.logits(),
        Cnmm::new(model.topology.clone(), 5).unwrap().table.logits()
    );
}

#[test]
fn weight_decay_skips_norms_and_logits() {
    let mut model = small(2, Activation::Relu);
    let before = model.clone();
    let mut sgd = Sgd::new(&model);
    sgd.step(&mut model, 0.1, 0.9, 0.5, true);
    for ((_, p), (_, q)) in model.params.iter().zip(before.params.iter()) {
        if p.kind.decays() {
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert!((a - b * 0.95).abs() < 1e-15);
            }
        } else {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
    assert_eq!(model.table, before.table);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
    assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    assert_eq!(LossProfile::Anytime.weights(4), vec![0.25, 0.5, 0.75, 1.0]);
    assert_eq!(LossProfile::Single.weights(3), vec![0.0, 0.0, 1.0]);
}

#[test]
fn monte_carlo_with_degenerate_table_is_exact() {
    let mut model = small(3, Activation::Relu);
    for (t, l) in model.table.free_entries().collect::<Vec<_>>() {
        model.table.set_prob(t, l, 1.0).unwrap();
    }
    let x = images(2, 4, 8);
    let mc = model
        .predict_monte_carlo(&x, 3, 3, &mut stream(0, Stream::Gates))
        .unwrap();
    assert!(mc.mean.max_abs_diff(&model.predict(&x, 3).unwrap()) < 1e-15);
    assert!(mc.std_err.data().iter().all(|&s| s < 1e-9));
}
