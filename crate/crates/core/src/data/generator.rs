//! Synthetic relational scenes.
//!
//! Every person carries a *key* (a one-hot slot identity, distinct within the
//! scene), a *query* (the one-hot key of the person they look at) and a
//! one-hot *type* in `{0, 1}`:
//!
//! | coordinates           | content                               |
//! |-----------------------|---------------------------------------|
//! | `[0, S)`              | key                                   |
//! | `[S, 2S)`             | query                                 |
//! | `[2S, 2S + 2)`        | type                                  |
//! | `[2S + 2, 2S + 4)`    | event code (global feature only)      |
//! | `[2S + 4, d_f)`       | zero                                  |
//!
//! where `S` is the slot count. The scene's event `e` is one-hot in the
//! global feature. The latent affinity from `j` to `i` is 1 when `j` looks
//! at `i` and `j` has type `e`, else 0; the important person maximizes total
//! incoming affinity.
//!
//! Persons are split as evenly as possible between the two types. One focal
//! person is drawn from each type: `a` of type 1 and `b` of type 0. Type 0
//! persons look at `a` with probability `focus_prob`, type 1 persons look at
//! `b` with that probability, and everybody else looks at a uniformly chosen
//! other person. Gazes are redrawn until `a` strictly leads incoming gazes
//! from type 0 and `b` strictly leads those from type 1. Under event 0 the
//! important person is `a`, under event 1 it is `b`; the other focal person
//! is an equally prominent decoy. Gaussian noise of scale `sigma` is added to
//! every coordinate of every person and global feature.
//!
//! Keys are a random injection of slots, so a person's own key, query and
//! type are identically distributed whether or not the person is important.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{Corpus, Label, PersonRecord, SceneRecord};
use crate::error::{Error, Result};

pub const EVENT_COUNT: usize = 2;

const MAX_DRAWS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub min_persons: usize,
    pub max_persons: usize,
    pub feature_dim: usize,
    /// Number of distinct identity slots.
    pub slots: usize,
    /// Probability that a person looks at the focal person of the other type.
    pub focus_prob: f64,
    /// Standard deviation of the additive feature noise.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            min_persons: 3,
            max_persons: 8,
            feature_dim: 32,
            slots: 8,
            focus_prob: 0.8,
            sigma: 0.1,
            seed: 0,
        }
    }
}

/// Coordinate layout shared by the generator and anything decoding it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub slots: usize,
}

impl Layout {
    pub fn key(&self) -> std::ops::Range<usize> {
        0..self.slots
    }

    pub fn query(&self) -> std::ops::Range<usize> {
        self.slots..2 * self.slots
    }

    pub fn person_type(&self) -> std::ops::Range<usize> {
        2 * self.slots..2 * self.slots + 2
    }

    pub fn event_code(&self) -> std::ops::Range<usize> {
        let start = 2 * self.slots + 2;
        start..start + EVENT_COUNT
    }

    pub fn min_feature_dim(&self) -> usize {
        self.event_code().end
    }
}

impl GeneratorSpec {
    pub fn layout(&self) -> Layout {
        Layout { slots: self.slots }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_persons < 3 {
            return Err(Error::Config(format!(
                "scenes need at least 3 persons for two distinct focal persons, got min_persons = {}",
                self.min_persons
            )));
        }
        if self.max_persons < self.min_persons {
            return Err(Error::Config(format!(
                "max_persons = {} is below min_persons = {}",
                self.max_persons, self.min_persons
            )));
        }
        if self.slots < self.max_persons {
            return Err(Error::Config(format!(
                "slots = {} cannot give {} persons distinct keys",
                self.slots, self.max_persons
            )));
        }
        let need = self.layout().min_feature_dim();
        if self.feature_dim < need {
            return Err(Error::Config(format!(
                "d_f = {} is too small for {} slots (need at least {})",
                self.feature_dim, self.slots, need
            )));
        }
        if !(self.focus_prob > 0.0 && self.focus_prob <= 1.0) {
            return Err(Error::Config(format!(
                "focus_prob must lie in (0, 1], got {}",
                self.focus_prob
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be a non-negative number, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Incoming gazes per person, counting only sources of type `t`.
pub fn typed_in_degree(types: &[usize], targets: &[usize], t: usize) -> Vec<usize> {
    let mut incoming = vec![0; types.len()];
    for (j, &target) in targets.iter().enumerate() {
        if types[j] == t {
            incoming[target] += 1;
        }
    }
    incoming
}

fn strict_leader(incoming: &[usize], leader: usize) -> bool {
    (0..incoming.len()).all(|i| i == leader || incoming[i] < incoming[leader])
}

struct Gazes {
    types: Vec<usize>,
    /// `focal[t]` leads the gazes of type `t` sources.
    focal: [usize; 2],
    targets: Vec<usize>,
}

fn draw_gazes(rng: &mut ChaCha8Rng, n: usize, focus_prob: f64) -> Result<Gazes> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let zeros = if rng.random_bool(0.5) { n / 2 } else { n.div_ceil(2) };
    let mut types = vec![1; n];
    for &j in &order[..zeros] {
        types[j] = 0;
    }
    let focal = [
        order[zeros + rng.random_range(0..n - zeros)],
        order[rng.random_range(0..zeros)],
    ];
    for _ in 0..MAX_DRAWS {
        let targets: Vec<usize> = (0..n)
            .map(|j| {
                if rng.random_bool(focus_prob) {
                    focal[types[j]]
                } else {
                    let t = rng.random_range(0..n - 1);
                    t + usize::from(t >= j)
                }
            })
            .collect();
        if (0..2).all(|t| strict_leader(&typed_in_degree(&types, &targets, t), focal[t])) {
            return Ok(Gazes { types, focal, targets });
        }
    }
    Err(Error::Config(format!(
        "could not draw strict focal leaders for {} persons with focus_prob = {}",
        n, focus_prob
    )))
}

fn generate_scene(spec: &GeneratorSpec, index: u64) -> Result<SceneRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let layout = spec.layout();
    let n = rng.random_range(spec.min_persons..=spec.max_persons);
    let event = rng.random_range(0..EVENT_COUNT);
    let gazes = draw_gazes(&mut rng, n, spec.focus_prob)?;
    let mut slots: Vec<usize> = (0..spec.slots).collect();
    slots.shuffle(&mut rng);
    let keys = &slots[..n];

    let mut persons = vec![vec![0.0; spec.feature_dim]; n];
    for (j, f) in persons.iter_mut().enumerate() {
        f[layout.key().start + keys[j]] = 1.0;
        f[layout.query().start + keys[gazes.targets[j]]] = 1.0;
        f[layout.person_type().start + gazes.types[j]] = 1.0;
    }
    let mut global = vec![0.0; spec.feature_dim];
    global[layout.event_code().start + event] = 1.0;

    if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for x in persons.iter_mut().flatten().chain(global.iter_mut()) {
            *x += noise.sample(&mut rng);
        }
    }

    let important = gazes.focal[event];
    Ok(SceneRecord {
        scene_id: format!("scene-{:06}", index),
        persons: persons
            .into_iter()
            .enumerate()
            .map(|(i, feature)| PersonRecord {
                person_id: format!("p{}", i),
                feature,
                label: Some(if i == important {
                    Label::Important
                } else {
                    Label::NonImportant
                }),
            })
            .collect(),
        global_feature: global,
    })
}

/// Generates `count` labeled scenes. Scene `k` depends only on the seed and
/// `k`, so a shorter corpus is a prefix of a longer one.
pub fn generate_relational_corpus(spec: &GeneratorSpec, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let scenes = (0..count as u64)
        .into_par_iter()
        .map(|k| generate_scene(spec, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(spec.feature_dim, scenes))
}
