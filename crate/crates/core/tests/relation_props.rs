mod common;

use common::{
    model_config, oracle_points, oracle_stacked, oracle_submodule, random_scene, rng, rows, silence_values,
    unit_involvement_scene,
};
use point_core::autodiff::{Tape, Tensor};
use point_core::model::{forward_baseline, forward_point, predict, ModelConfig, ModelParams, Variant};
use point_core::relation::{
    event_person_interaction, fuse_prior_importance, importance_relation, interaction_graphs,
    person_person_interaction, stacked_forward, standard_attention_relation, AttentionFn, Fusion, Normalization,
    RelationConfig, Submodule,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn apply(
    f: impl FnOnce(&mut Tape, point_core::autodiff::Var) -> point_core::Result<point_core::autodiff::Var>,
    m: &Tensor,
) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(m.clone()).unwrap();
    let out = f(&mut tape, v).unwrap();
    tape.value(out).clone()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{} vs {} (tol {:e})", x, y, tol);
    }
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop_oneof![
            Just((4usize, 1usize)),
            Just((4, 2)),
            Just((8, 1)),
            Just((8, 2)),
            Just((8, 4))
        ],
        1usize..=2,
        prop::sample::select(Fusion::ALL.to_vec()),
        prop::sample::select(AttentionFn::ALL.to_vec()),
        prop::sample::select(Normalization::ALL.to_vec()),
        any::<bool>(),
    )
        .prop_map(|((d, r), stacks, fusion, attention, normalization, include_self)| {
            let mut c = model_config(d, r, stacks, fusion, attention);
            c.relation.normalization = normalization;
            c.relation.include_self = include_self;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_matches_loop_oracle(config in config_strategy(), n in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, config.feature_dim());
        let params = ModelParams::init(&config, seed).unwrap();
        let tape_points: Vec<f64> = predict(&scene, &params, &config).unwrap().iter().map(|p| p.important).collect();
        assert_close(&tape_points, &oracle_points(&scene, &params, &config), 1e-9);

        let persons = rows(scene.persons());
        let global = scene.global().data().to_vec();
        let sub = &params.relation[0][0];
        let graphs = interaction_graphs(&scene, sub, &config.relation).unwrap();
        let oracle = oracle_submodule(&persons, &global, sub, &config.relation);
        let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().copied().collect::<Vec<_>>();
        assert_close(graphs.person_person.data(), &flat(&oracle.person_person), 1e-9);
        assert_close(graphs.event_person.data(), &oracle.event_person, 1e-9);
        assert_close(graphs.importance_interaction.data(), &flat(&oracle.interaction), 1e-9);
        assert_close(graphs.importance_relation.data(), &flat(&oracle.relation), 1e-9);
    }

    #[test]
    fn importance_relation_rows_sum_to_one(config in config_strategy(), n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, config.feature_dim());
        let mut relation = config.relation.clone();
        relation.normalization = Normalization::ImportanceRelation;
        let sub = Submodule::init(&relation, &mut r);
        let g = interaction_graphs(&scene, &sub, &relation).unwrap();
        for row in g.importance_relation.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        prop_assert!(g.person_person.data().iter().all(|&x| x >= 0.0));
        prop_assert!(g.event_person.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn standard_attention_columns_sum_to_one(n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = Tensor::from_rows(&(0..n).map(|_| common::random_vec(&mut r, n, 3.0)).collect::<Vec<_>>()).unwrap();
        let a = apply(|t, v| standard_attention_relation(t, v, true), &m);
        for i in 0..n {
            let col: f64 = (0..n).map(|j| a.at(j, i)).sum();
            prop_assert!((col - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_row_shift(n in 1usize..=6, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let base: Vec<Vec<f64>> = (0..n).map(|_| common::random_vec(&mut r, n, 3.0)).collect();
        let shifted: Vec<Vec<f64>> = base.iter().map(|row| row.iter().map(|x| x + shift).collect()).collect();
        let a = apply(|t, v| importance_relation(t, v, true), &Tensor::from_rows(&base).unwrap());
        let b = apply(|t, v| importance_relation(t, v, true), &Tensor::from_rows(&shifted).unwrap());
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn points_permute_with_persons(config in config_strategy(), n in 1usize..=7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, config.feature_dim());
        let params = ModelParams::init(&config, seed).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let before = predict(&scene, &params, &config).unwrap();
        let after = predict(&scene.permuted(&perm).unwrap(), &params, &config).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            prop_assert!((after[k].important - before[p].important).abs() <= 1e-6);
        }
    }

    #[test]
    fn interaction_graphs_transform_as_pmpt(config in config_strategy(), n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, config.feature_dim());
        let sub = Submodule::init(&config.relation, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let a = interaction_graphs(&scene, &sub, &config.relation).unwrap();
        let b = interaction_graphs(&scene.permuted(&perm).unwrap(), &sub, &config.relation).unwrap();
        for k in 0..n {
            for l in 0..n {
                prop_assert!((b.importance_relation.at(k, l) - a.importance_relation.at(perm[k], perm[l])).abs() <= 1e-9);
                prop_assert!((b.person_person.at(k, l) - a.person_person.at(perm[k], perm[l])).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn zero_value_projections_give_residual_identity(config in config_strategy(), n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, config.feature_dim());
        let mut params = ModelParams::init(&config, seed).unwrap();
        silence_values(&mut params);
        let mut tape = Tape::new();
        let vars = scene.record(&mut tape).unwrap();
        let p = params.record(&mut tape).unwrap();
        let out = stacked_forward(&mut tape, vars, &p.relation, &config.relation).unwrap();
        prop_assert_eq!(tape.value(out), scene.persons());

        let baseline = ModelConfig { variant: Variant::Baseline, ..config.clone() };
        prop_assert_eq!(
            forward_point(&scene, &params, &config).unwrap(),
            forward_baseline(&scene, &params, &baseline).unwrap()
        );
    }

    #[test]
    fn unit_event_involvement_is_neutral(config in config_strategy(), n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (scene, unit) = unit_involvement_scene(&mut r, n, config.feature_dim());
        let mut prior = config.relation.clone();
        prior.fusion = Fusion::PriorImportance;
        let mut plain = prior.clone();
        plain.fusion = Fusion::PersonOnly;
        let mut sub = Submodule::init(&prior, &mut r);
        sub.event_weight = unit;
        let a = interaction_graphs(&scene, &sub, &prior).unwrap();
        let b = interaction_graphs(&scene, &sub, &plain).unwrap();
        prop_assert!(a.event_person.data().iter().all(|&e| (e - 1.0).abs() <= 1e-12));
        prop_assert!(a.importance_relation.max_abs_diff(&b.importance_relation) <= 1e-9);

        let mut tape = Tape::new();
        let ep = tape.leaf(a.person_person.clone()).unwrap();
        let ones = tape.leaf(Tensor::filled(&[n], 1.0)).unwrap();
        let fused = fuse_prior_importance(&mut tape, ep, ones).unwrap();
        prop_assert_eq!(tape.value(fused), &a.person_person);
    }

    #[test]
    fn both_attention_functions_give_valid_graphs(n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, n, 8);
        for &attention in AttentionFn::ALL.iter() {
            let mut c = RelationConfig::new(8, 2);
            c.attention = attention;
            let sub = Submodule::init(&c, &mut r);
            let g = interaction_graphs(&scene, &sub, &c).unwrap();
            prop_assert!(g.person_person.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
            for row in g.importance_relation.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn additive_and_dot_attention_differ_somewhere() {
    let mut r = rng(11);
    let c = RelationConfig::new(4, 1);
    let sub = Submodule::init(&c, &mut r);
    let differs = (0..50).any(|_| {
        let fi = common::random_vec(&mut r, 4, 2.0);
        let fj = common::random_vec(&mut r, 4, 2.0);
        let a = person_person_interaction(&fi, &fj, &sub, AttentionFn::Additive).unwrap();
        let b = person_person_interaction(&fi, &fj, &sub, AttentionFn::ScaledDotProduct).unwrap();
        (a - b).abs() > 1e-3
    });
    assert!(differs);
}

#[test]
fn divergence_witness() {
    let m = Tensor::from_rows(&[[0.0, 1.0], [2.0, 0.0]]).unwrap();
    let e = apply(|t, v| importance_relation(t, v, true), &m);
    let a = apply(|t, v| standard_attention_relation(t, v, true), &m);
    let row = |x: f64, y: f64| 1.0 / (1.0 + (y - x).exp());
    assert_close(
        e.data(),
        &[row(0.0, 1.0), row(1.0, 0.0), row(2.0, 0.0), row(0.0, 2.0)],
        1e-12,
    );
    assert_close(e.data(), &[0.26894, 0.73106, 0.88080, 0.11920], 1e-5);
    assert_close(a.data(), &[0.11920, 0.73106, 0.88080, 0.26894], 1e-5);
    let gap = e
        .data()
        .iter()
        .zip(a.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(gap > 0.1, "{}", gap);
}

#[test]
fn single_person_relation_is_one() {
    for include_self in [true, false] {
        let m = Tensor::from_rows(&[[3.7]]).unwrap();
        assert_eq!(apply(|t, v| importance_relation(t, v, include_self), &m).data(), &[1.0]);
        assert_eq!(
            apply(|t, v| standard_attention_relation(t, v, include_self), &m).data(),
            &[1.0]
        );
    }
}

#[test]
fn equal_interactions_give_uniform_relation() {
    let m = Tensor::filled(&[5, 5], 0.3);
    let e = apply(|t, v| importance_relation(t, v, true), &m);
    assert!(e.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    let sym = Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
    let a = apply(|t, v| importance_relation(t, v, true), &sym);
    let b = apply(|t, v| standard_attention_relation(t, v, true), &sym);
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn zero_prior_gives_uniform_rows() {
    let mut tape = Tape::new();
    let ep = tape
        .leaf(Tensor::from_rows(&[[1.0, 2.0, 0.5], [3.0, 4.0, 0.0], [0.1, 0.2, 0.3]]).unwrap())
        .unwrap();
    let eg = tape.leaf(Tensor::zeros(&[3])).unwrap();
    let fused = fuse_prior_importance(&mut tape, ep, eg).unwrap();
    let e = importance_relation(&mut tape, fused, true).unwrap();
    assert!(tape.value(e).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn fusion_scales_source_rows() {
    let mut tape = Tape::new();
    let ep = tape
        .leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap())
        .unwrap();
    let eg = tape.leaf(Tensor::vector(vec![2.0, 0.5])).unwrap();
    let fused = fuse_prior_importance(&mut tape, ep, eg).unwrap();
    assert_eq!(tape.value(fused).data(), &[2.0, 4.0, 1.5, 2.0]);
}

fn identity_sub(pair_weight: Vec<f64>) -> Submodule<Tensor> {
    Submodule {
        query: Tensor::identity(2),
        key: Tensor::identity(2),
        value: Tensor::identity(2),
        global_value: None,
        pair_weight: Tensor::vector(pair_weight),
        event_weight: Tensor::vector(vec![1.0, 1.0]),
    }
}

#[test]
fn hand_evaluated_interactions() {
    let sub = identity_sub(vec![1.0, 1.0]);
    let e = person_person_interaction(&[1.0, 0.0], &[0.0, 2.0], &sub, AttentionFn::Additive).unwrap();
    assert!((e - 3.0).abs() < 1e-15);
    let cancel = person_person_interaction(&[0.4, -1.2], &[-0.4, 1.2], &sub, AttentionFn::Additive).unwrap();
    assert_eq!(cancel, 0.0);
    let zero = identity_sub(vec![0.0, 0.0]);
    assert_eq!(
        person_person_interaction(&[5.0, 1.0], &[2.0, 7.0], &zero, AttentionFn::Additive).unwrap(),
        0.0
    );

    let w = Tensor::vector(vec![1.0, -1.0]);
    assert!((event_person_interaction(&[2.0, 0.0], &[1.0, 1.0], &w).unwrap() - 2.0).abs() < 1e-15);
    assert_eq!(event_person_interaction(&[0.3, -0.8], &[-0.3, 0.8], &w).unwrap(), 0.0);
    assert_eq!(
        event_person_interaction(&[0.3, -0.8], &[1.0, 2.0], &Tensor::zeros(&[2])).unwrap(),
        0.0
    );
    assert!(person_person_interaction(&[1.0], &[1.0, 2.0], &sub, AttentionFn::Additive).is_err());
}

#[test]
fn two_stage_stack_is_composition_of_single_modules() {
    let config = model_config(4, 2, 2, Fusion::PriorImportance, AttentionFn::Additive);
    let mut r = rng(21);
    let scene = random_scene(&mut r, 3, 4);
    let params = ModelParams::init(&config, 21).unwrap();
    let persons = rows(scene.persons());
    let global = scene.global().data().to_vec();
    let first = oracle_stacked(&persons, &global, &params.relation[..1], &config.relation);
    let manual = oracle_stacked(&first, &global, &params.relation[1..], &config.relation);

    let mut tape = Tape::new();
    let vars = scene.record(&mut tape).unwrap();
    let p = params.record(&mut tape).unwrap();
    let out = stacked_forward(&mut tape, vars, &p.relation, &config.relation).unwrap();
    assert_close(tape.value(out).data(), &manual.concat(), 1e-9);

    // A silent second stage reproduces the single-stage output.
    let mut silent = params.clone();
    for sub in silent.relation[1].iter_mut() {
        sub.value = Tensor::zeros(sub.value.shape());
    }
    let mut one = config.relation.clone();
    one.stacks = 1;
    let mut tape = Tape::new();
    let vars = scene.record(&mut tape).unwrap();
    let p = silent.record(&mut tape).unwrap();
    let two = stacked_forward(&mut tape, vars, &p.relation, &config.relation).unwrap();
    let single = stacked_forward(&mut tape, vars, &p.relation[..1], &one).unwrap();
    assert_eq!(tape.value(two), tape.value(single));
}

#[test]
fn baseline_ignores_other_persons() {
    let config = ModelConfig::baseline(8);
    let params = ModelParams::init(&config, 5).unwrap();
    let mut r = rng(5);
    let scene = random_scene(&mut r, 4, 8);
    let mut moved = rows(scene.persons());
    moved[2] = common::random_vec(&mut r, 8, 3.0);
    let other = point_core::relation::SceneFeatures::new(&moved, scene.global().data()).unwrap();
    let a = predict(&scene, &params, &config).unwrap();
    let b = predict(&other, &params, &config).unwrap();
    for i in [0, 1, 3] {
        assert_eq!(a[i], b[i]);
    }
}

#[test]
fn zero_classifier_scores_one_half() {
    let config = ModelConfig::new(8);
    let mut params = ModelParams::init(&config, 1).unwrap();
    let c = &mut params.classifier;
    for t in [
        &mut c.hidden_weight,
        &mut c.hidden_bias,
        &mut c.output_weight,
        &mut c.output_bias,
    ] {
        *t = Tensor::zeros(t.shape());
    }
    let scene = random_scene(&mut rng(2), 5, 8);
    for p in predict(&scene, &params, &config).unwrap() {
        assert_eq!(p.important, 0.5);
        assert_eq!(p.unimportant, 0.5);
    }
}
