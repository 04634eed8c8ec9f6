//! Test-side oracles written independently of the tape.
#![allow(dead_code)]

use point_core::autodiff::Tensor;
use point_core::data::{generator::Layout, SceneRecord};
use point_core::model::{ModelConfig, ModelParams, Variant};
use point_core::relation::{AttentionFn, Fusion, Normalization, RelationConfig, SceneFeatures, Submodule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_scene(rng: &mut impl Rng, n: usize, d: usize) -> SceneFeatures {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d, 1.0)).collect();
    SceneFeatures::new(&rows, &random_vec(rng, d, 1.0)).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = w.dims2().unwrap();
    assert_eq!(c, x.len());
    (0..r).map(|i| (0..c).map(|k| w.at(i, k) * x[k]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over `xs` restricted to `allowed`; other entries are 0.
fn masked_softmax(xs: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = xs
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs
        .iter()
        .zip(allowed)
        .map(|(&x, &a)| if a { (x - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-submodule graphs computed with explicit loops.
pub struct OracleGraphs {
    pub person_person: Vec<Vec<f64>>,
    pub event_person: Vec<f64>,
    pub interaction: Vec<Vec<f64>>,
    pub relation: Vec<Vec<f64>>,
    pub feature: Vec<Vec<f64>>,
}

pub fn oracle_submodule(
    persons: &[Vec<f64>],
    global: &[f64],
    sub: &Submodule<Tensor>,
    cfg: &RelationConfig,
) -> OracleGraphs {
    let n = persons.len();
    let dk = cfg.feature_dim / cfg.submodules;
    let q: Vec<Vec<f64>> = persons.iter().map(|f| matvec(&sub.query, f)).collect();
    let k: Vec<Vec<f64>> = persons.iter().map(|f| matvec(&sub.key, f)).collect();
    let v: Vec<Vec<f64>> = persons.iter().map(|f| matvec(&sub.value, f)).collect();
    let wp = sub.pair_weight.data();
    let mut ep = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            let s = match cfg.attention {
                AttentionFn::Additive => (0..dk).map(|c| wp[c] * (q[i][c] + k[j][c])).sum::<f64>(),
                AttentionFn::ScaledDotProduct => dot(&q[i], &k[j]) / (dk as f64).sqrt(),
            };
            ep[j][i] = s.max(0.0);
        }
    }
    let eg: Vec<f64> = persons
        .iter()
        .map(|f| {
            let joined: Vec<f64> = f.iter().zip(global).map(|(a, b)| a + b).collect();
            dot(sub.event_weight.data(), &joined).max(0.0)
        })
        .collect();
    let mut hat = ep.clone();
    if cfg.fusion == Fusion::PriorImportance {
        for j in 0..n {
            for i in 0..n {
                hat[j][i] = ep[j][i] * eg[j];
            }
        }
    }
    let allowed = |a: usize, b: usize| cfg.include_self || a != b || n == 1;
    let mut rel = vec![vec![0.0; n]; n];
    match cfg.normalization {
        Normalization::ImportanceRelation => {
            for j in 0..n {
                let mask: Vec<bool> = (0..n).map(|i| allowed(j, i)).collect();
                rel[j] = masked_softmax(&hat[j], &mask);
            }
        }
        Normalization::StandardAttention => {
            for i in 0..n {
                let col: Vec<f64> = (0..n).map(|j| hat[j][i]).collect();
                let mask: Vec<bool> = (0..n).map(|j| allowed(j, i)).collect();
                let s = masked_softmax(&col, &mask);
                for j in 0..n {
                    rel[j][i] = s[j];
                }
            }
        }
    }
    let gv = sub.global_value.as_ref().map(|w| matvec(w, global));
    let mut feature = vec![vec![0.0; dk]; n];
    for i in 0..n {
        for c in 0..dk {
            let mut acc = 0.0;
            for j in 0..n {
                acc += rel[j][i] * v[j][c];
            }
            if let (Fusion::ExtraLink, Some(gv)) = (cfg.fusion, &gv) {
                acc += eg[i] * gv[c];
            }
            feature[i][c] = acc;
        }
    }
    OracleGraphs {
        person_person: ep,
        event_person: eg,
        interaction: hat,
        relation: rel,
        feature,
    }
}

pub fn oracle_module(
    persons: &[Vec<f64>],
    global: &[f64],
    subs: &[Submodule<Tensor>],
    cfg: &RelationConfig,
) -> Vec<Vec<f64>> {
    let parts: Vec<Vec<Vec<f64>>> = subs
        .iter()
        .map(|s| oracle_submodule(persons, global, s, cfg).feature)
        .collect();
    persons
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let concat: Vec<f64> = parts.iter().flat_map(|p| p[i].iter().copied()).collect();
            f.iter().zip(&concat).map(|(a, b)| a + b).collect()
        })
        .collect()
}

pub fn oracle_stacked(
    persons: &[Vec<f64>],
    global: &[f64],
    stages: &[Vec<Submodule<Tensor>>],
    cfg: &RelationConfig,
) -> Vec<Vec<f64>> {
    let mut x = persons.to_vec();
    for subs in stages {
        x = oracle_module(&x, global, subs, cfg);
    }
    x
}

/// Important-class probability for each person.
pub fn oracle_points(scene: &SceneFeatures, params: &ModelParams, config: &ModelConfig) -> Vec<f64> {
    let persons = rows(scene.persons());
    let global = scene.global().data().to_vec();
    let features = match config.variant {
        Variant::Point => oracle_stacked(&persons, &global, &params.relation, &config.relation),
        Variant::Baseline => persons,
    };
    let c = &params.classifier;
    features
        .iter()
        .map(|f| {
            let h: Vec<f64> = matvec(&c.hidden_weight, f)
                .iter()
                .zip(c.hidden_bias.data())
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            let z: Vec<f64> = matvec(&c.output_weight, &h)
                .iter()
                .zip(c.output_bias.data())
                .map(|(a, b)| a + b)
                .collect();
            let m = z[0].max(z[1]);
            let e0 = (z[0] - m).exp();
            let e1 = (z[1] - m).exp();
            e1 / (e0 + e1)
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Recovers the important person from stored features alone by recomputing
/// the latent affinities. `None` when no person strictly leads.
pub fn decode_important(scene: &SceneRecord, layout: Layout) -> Option<usize> {
    let pick = |f: &[f64], r: std::ops::Range<usize>| argmax(&f[r]);
    let event = pick(&scene.global_feature, layout.event_code());
    let people: Vec<(usize, usize, usize)> = scene
        .persons
        .iter()
        .map(|p| {
            (
                pick(&p.feature, layout.key()),
                pick(&p.feature, layout.query()),
                pick(&p.feature, layout.person_type()),
            )
        })
        .collect();
    let n = people.len();
    let mut affinity = vec![0usize; n];
    for &(_, query, kind) in &people {
        if kind != event {
            continue;
        }
        for (i, &(key, _, _)) in people.iter().enumerate() {
            if key == query {
                affinity[i] += 1;
            }
        }
    }
    let best = (0..n).max_by_key(|&i| affinity[i])?;
    let leaders = affinity.iter().filter(|&&a| a == affinity[best]).count();
    (leaders == 1).then_some(best)
}

/// Average precision straight from its definition: for each positive, the
/// share of positives among persons ranked at or above it.
pub fn brute_force_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ahead = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let rank = |i: usize| 1 + (0..n).filter(|&j| j != i && ahead(j, i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| relevant[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

pub fn model_config(d: usize, r: usize, stacks: usize, fusion: Fusion, attention: AttentionFn) -> ModelConfig {
    let mut c = ModelConfig::new(d);
    c.relation.submodules = r;
    c.relation.stacks = stacks;
    c.relation.fusion = fusion;
    c.relation.attention = attention;
    c
}

/// Zeroes every value projection, leaving a residual-only relation stack.
pub fn silence_values(params: &mut ModelParams) {
    for stage in params.relation.iter_mut() {
        for sub in stage.iter_mut() {
            sub.value = Tensor::zeros(sub.value.shape());
            if let Some(g) = sub.global_value.as_mut() {
                *g = Tensor::zeros(g.shape());
            }
        }
    }
}

/// A scene and event weight for which every event-person interaction is 1:
/// `w_G = e_0` and `f_i[0] = 1 - g[0]`.
pub fn unit_involvement_scene(rng: &mut impl Rng, n: usize, d: usize) -> (SceneFeatures, Tensor) {
    let global = random_vec(rng, d, 1.0);
    let persons: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut f = random_vec(rng, d, 1.0);
            f[0] = 1.0 - global[0];
            f
        })
        .collect();
    let mut unit = vec![0.0; d];
    unit[0] = 1.0;
    (SceneFeatures::new(&persons, &global).unwrap(), Tensor::vector(unit))
}
