use kerl::data::synthetic::{gen_synthetic, SyntheticConfig, SyntheticData};
use kerl::data::{Dataset, Sample, SampleInput};
use kerl::graph::{build_graph, KnowledgeGraph, Normalization};
use kerl::model::{Model, Variant};
use kerl::nn::{cross_entropy, ParamGroup};
use kerl::optim::{Adam, Sgd};
use kerl::trainer::{apply_update, pretrain_scores, train, TrainConfig, TrainInputs};
use kerl::KerlError;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> SyntheticData {
    gen_synthetic(&SyntheticConfig {
        categories: 4,
        attributes: 8,
        parts: 4,
        parts_per_category: 2,
        image_size: 32,
        train_per_class: 10,
        test_per_class: 4,
        ..Default::default()
    })
    .unwrap()
}

fn config(variant: Variant, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        epochs,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    cfg.sgd.lr = 0.05;
    cfg.model.backbone.input_size = 32;
    cfg.model.sketch.c = 32;
    cfg.model.fusion.l2_normalize = true;
    cfg
}

fn graph(d: &SyntheticData) -> KnowledgeGraph {
    build_graph(&d.train.instances(), d.train.registry.clone(), Normalization::Global)
        .unwrap()
        .0
}

#[test]
fn optimizer_routing_sends_only_ggnn_to_adam() {
    let d = data();
    let g = graph(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in Variant::ALL {
        let cfg = config(variant, 1);
        let mut model = Model::new(variant, cfg.model.clone(), 4, Some(g.clone()), &mut rng).unwrap();
        let s = &d.train.samples[0];
        let scores = [0.1, 0.2, 0.3, 0.4];
        let trace = model.forward(s, variant.uses_graph().then_some(&scores[..]), false).unwrap();
        let (_, dl) = cross_entropy(trace.logits.view(), s.label);
        let grads = model.backward(&trace, &dl).unwrap();
        let before = model.params.ggnn.clone();
        let (mut sgd, mut adam, mut scorer_sgd) = (Sgd::new(cfg.sgd).unwrap(), Adam::new(cfg.adam).unwrap(), Sgd::new(cfg.sgd).unwrap());
        apply_update(&mut model, &grads, &mut sgd, &mut adam, &mut scorer_sgd).unwrap();

        let changed = before.is_some() && before != model.params.ggnn;
        assert_eq!(changed, adam.steps() == 1, "{variant}");
        assert_eq!(adam.steps() == 1, variant.uses_graph(), "{variant}");
        let ggnn_names: Vec<String> = model
            .params
            .ggnn
            .as_ref()
            .map(|p| p.tensors().into_iter().map(|t| t.0).collect())
            .unwrap_or_default();
        for name in sgd.state_names() {
            assert!(!ggnn_names.iter().any(|n| n == name), "{variant}: SGD state for {name}");
        }
        for (name, _, _) in model.params.tensors() {
            assert_eq!(sgd.has_state(&name), !ggnn_names.contains(&name), "{variant}: {name}");
        }
    }
}

#[test]
fn same_seed_gives_identical_curves_and_loss_drops() {
    let d = data();
    let g = graph(&d);
    let base = train(
        TrainInputs {
            train: Some(&d.train),
            ..Default::default()
        },
        &config(Variant::Baseline, 4),
    )
    .unwrap();
    let scores = pretrain_scores(&base.model, &[&d.train, &d.test]).unwrap();
    for variant in Variant::ALL {
        let run = || {
            train(
                TrainInputs {
                    train: Some(&d.train),
                    eval: Some(&d.test),
                    graph: Some(&g),
                    scores: Some(&scores),
                    ..Default::default()
                },
                &config(variant, 4),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits(), "{variant}");
            assert_eq!(x.eval_loss.map(f64::to_bits), y.eval_loss.map(f64::to_bits), "{variant}");
        }
        assert_eq!(a.model.params, b.model.params);
        let first = a.history.first().unwrap().train_loss;
        let last = a.history.last().unwrap().train_loss;
        assert!(last < first, "{variant}: {first} -> {last}");
    }
}

#[test]
fn different_seeds_give_different_orders() {
    let d = data();
    let mut c1 = config(Variant::Baseline, 1);
    let a = train(TrainInputs { train: Some(&d.train), ..Default::default() }, &c1).unwrap();
    c1.seed = 4;
    let b = train(TrainInputs { train: Some(&d.train), ..Default::default() }, &c1).unwrap();
    assert_ne!(a.history[1].train_loss, b.history[1].train_loss);
}

#[test]
fn non_finite_input_aborts_with_diverged() {
    let d = data();
    let mut cfg = config(Variant::Baseline, 2);
    cfg.model.precomputed = true;
    cfg.model.feature_dim = 4;
    let mut samples: Vec<Sample> = d.train.samples.iter().take(8).cloned().collect();
    for s in &mut samples {
        s.input = SampleInput::Features(Array3::from_elem((2, 2, 4), 0.5));
    }
    if let SampleInput::Features(f) = &mut samples[5].input {
        f[[0, 0, 0]] = f64::NAN;
    }
    let ds = Dataset {
        registry: d.train.registry.clone(),
        samples,
    };
    // the initial evaluation pass already sees the bad sample
    match train(TrainInputs { train: Some(&ds), ..Default::default() }, &cfg) {
        Err(KerlError::Diverged { epoch: 0, .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on NaN features succeeded"),
    }
}
