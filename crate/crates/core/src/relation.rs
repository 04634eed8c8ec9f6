//! Relation module: interaction graphs, importance relations and relation
//! feature aggregation.
//!
//! Orientation convention: entry `(j, i)` of every N×N matrix describes the
//! edge from source person `j` to destination person `i`. Person-person
//! interactions are out-normalized, so each row of the importance relation
//! sums to one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How the event-person graph is merged with the person-person graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Person-person graph only; the global feature is unused.
    PersonOnly,
    /// Event involvement of the source scales its outgoing interactions.
    PriorImportance,
    /// The global feature enters as an extra link into each person.
    ExtraLink,
}

/// Pairwise scoring function of the person-person interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionFn {
    Additive,
    ScaledDotProduct,
}

/// Normalization turning importance interactions into relation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Softmax over each source's outgoing edges.
    ImportanceRelation,
    /// Softmax over each destination's incoming edges.
    StandardAttention,
}

macro_rules! kebab_enum {
    ($ty:ty, $($variant:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(<$ty>::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{}', expected one of: {}",
                        stringify!($ty),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

kebab_enum!(Fusion, PersonOnly => "person-only", PriorImportance => "prior-importance", ExtraLink => "extra-link");
kebab_enum!(AttentionFn, Additive => "additive", ScaledDotProduct => "scaled-dot-product");
kebab_enum!(Normalization, ImportanceRelation => "importance-relation", StandardAttention => "standard-attention");

/// Hyperparameters of the (possibly stacked) relation module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    /// Number of parallel relation submodules per module.
    pub submodules: usize,
    /// Number of stacked relation modules.
    pub stacks: usize,
    pub feature_dim: usize,
    pub fusion: Fusion,
    pub attention: AttentionFn,
    pub normalization: Normalization,
    /// Whether the `j = i` term takes part in normalization and aggregation.
    pub include_self: bool,
}

impl RelationConfig {
    pub fn new(feature_dim: usize, submodules: usize) -> Self {
        RelationConfig {
            submodules,
            stacks: 1,
            feature_dim,
            fusion: Fusion::PriorImportance,
            attention: AttentionFn::Additive,
            normalization: Normalization::ImportanceRelation,
            include_self: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.submodules == 0 {
            return Err(Error::Config("r (submodule count) must be at least 1".into()));
        }
        if self.stacks == 0 {
            return Err(Error::Config("N_r (stacked module count) must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !self.feature_dim.is_multiple_of(self.submodules) {
            return Err(Error::Config(format!(
                "r = {} does not divide d_f = {}; choose r among the divisors of d_f",
                self.submodules, self.feature_dim
            )));
        }
        Ok(())
    }

    /// Per-submodule key/value width `d_f / r`.
    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.submodules
    }
}

/// Projections of one relation submodule.
#[derive(Clone, Debug, PartialEq)]
pub struct Submodule<T> {
    /// `d_k × d_f`, applied to the destination person.
    pub query: T,
    /// `d_k × d_f`, applied to the source person.
    pub key: T,
    /// `d_v × d_f`; the person value projection under every fusion.
    pub value: T,
    /// `d_v × d_f`; only present under [`Fusion::ExtraLink`].
    pub global_value: Option<T>,
    /// `d_k`, scores additive person-person interactions.
    pub pair_weight: T,
    /// `d_f`, scores event-person interactions.
    pub event_weight: T,
}

impl<T> Submodule<T> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Submodule<U>> {
        Ok(Submodule {
            query: f(&self.query)?,
            key: f(&self.key)?,
            value: f(&self.value)?,
            global_value: self.global_value.as_ref().map(&mut f).transpose()?,
            pair_weight: f(&self.pair_weight)?,
            event_weight: f(&self.event_weight)?,
        })
    }

    /// Fields in canonical order, paired with their names.
    pub fn fields(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![("query", &self.query), ("key", &self.key), ("value", &self.value)];
        if let Some(g) = &self.global_value {
            out.push(("global_value", g));
        }
        out.push(("pair_weight", &self.pair_weight));
        out.push(("event_weight", &self.event_weight));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.query, &mut self.key, &mut self.value];
        if let Some(g) = &mut self.global_value {
            out.push(g);
        }
        out.push(&mut self.pair_weight);
        out.push(&mut self.event_weight);
        out
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn scaled_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
    t
}

impl Submodule<Tensor> {
    pub fn init(config: &RelationConfig, rng: &mut impl Rng) -> Self {
        let (df, dk) = (config.feature_dim, config.head_dim());
        Submodule {
            query: scaled_uniform(rng, &[dk, df], df),
            key: scaled_uniform(rng, &[dk, df], df),
            value: scaled_uniform(rng, &[dk, df], df),
            global_value: (config.fusion == Fusion::ExtraLink).then(|| scaled_uniform(rng, &[dk, df], df)),
            pair_weight: scaled_uniform(rng, &[dk], dk),
            event_weight: scaled_uniform(rng, &[df], df),
        }
    }

    /// Checks projection shapes against the configuration.
    pub fn check(&self, config: &RelationConfig) -> Result<()> {
        let (df, dk) = (config.feature_dim, config.head_dim());
        let want = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                Err(Error::Config(format!(
                    "submodule {} has shape {:?}, configuration needs {:?}",
                    name,
                    t.shape(),
                    shape
                )))
            } else {
                Ok(())
            }
        };
        want("query", &self.query, &[dk, df])?;
        want("key", &self.key, &[dk, df])?;
        want("value", &self.value, &[dk, df])?;
        want("pair_weight", &self.pair_weight, &[dk])?;
        want("event_weight", &self.event_weight, &[df])?;
        match (&self.global_value, config.fusion) {
            (Some(g), Fusion::ExtraLink) => want("global_value", g, &[dk, df]),
            (None, Fusion::ExtraLink) => Err(Error::Config(
                "extra-link fusion needs a global value projection".into(),
            )),
            (Some(_), _) => Err(Error::Config(format!(
                "global value projection present but fusion is {}",
                config.fusion
            ))),
            (None, _) => Ok(()),
        }
    }
}

/// Person and global features of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    persons: Tensor,
    global: Tensor,
}

impl SceneFeatures {
    pub fn new<R: AsRef<[f64]>>(persons: &[R], global: &[f64]) -> Result<Self> {
        if persons.is_empty() {
            return Err(Error::Data("a scene needs at least one person".into()));
        }
        let persons = Tensor::from_rows(persons)?;
        let (_, d) = persons.dims2().unwrap();
        if global.len() != d {
            return Err(Error::dim(
                "scene",
                format!("person features have dimension {}, global feature {}", d, global.len()),
            ));
        }
        Ok(SceneFeatures {
            persons,
            global: Tensor::vector(global.to_vec()),
        })
    }

    pub fn person_count(&self) -> usize {
        self.persons.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.persons.shape()[1]
    }

    /// `N × d_f` matrix of person features.
    pub fn persons(&self) -> &Tensor {
        &self.persons
    }

    pub fn global(&self) -> &Tensor {
        &self.global
    }

    pub fn person(&self, i: usize) -> &[f64] {
        self.persons.row(i)
    }

    /// Reorders persons so that new position `k` holds old person `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<&[f64]> = perm.iter().map(|&p| self.person(p)).collect();
        SceneFeatures::new(&rows, self.global.data())
    }

    pub fn record(&self, tape: &mut Tape) -> Result<SceneVars> {
        Ok(SceneVars {
            persons: tape.leaf(self.persons.clone())?,
            global: tape.leaf(self.global.clone())?,
        })
    }
}

/// A scene recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SceneVars {
    pub persons: Var,
    pub global: Var,
}

/// Person-person interactions `E^p`, entry `(j, i)` from `j` to `i`.
pub fn person_person_graph(tape: &mut Tape, persons: Var, sub: &Submodule<Var>, attention: AttentionFn) -> Result<Var> {
    let q = tape.matmul_nt(persons, sub.query)?;
    let k = tape.matmul_nt(persons, sub.key)?;
    let scores = match attention {
        AttentionFn::Additive => {
            let qs = tape.matvec(q, sub.pair_weight)?;
            let ks = tape.matvec(k, sub.pair_weight)?;
            tape.outer_sum(ks, qs)?
        }
        AttentionFn::ScaledDotProduct => {
            let dk = tape.value(q).shape()[1];
            let s = tape.matmul_nt(k, q)?;
            tape.scale(s, 1.0 / (dk as f64).sqrt())?
        }
    };
    tape.relu(scores)
}

/// Event-person interactions `E^g`, one per person.
pub fn event_person_graph(tape: &mut Tape, persons: Var, global: Var, event_weight: Var) -> Result<Var> {
    let joined = tape.add_row_vector(persons, global)?;
    let s = tape.matvec(joined, event_weight)?;
    tape.relu(s)
}

/// `Ê_ji = E^p_ji · E^g_j`
pub fn fuse_prior_importance(tape: &mut Tape, person_person: Var, event_person: Var) -> Result<Var> {
    tape.scale_rows(person_person, event_person)
}

/// Softmax of each source's outgoing interactions.
pub fn importance_relation(tape: &mut Tape, interaction: Var, include_self: bool) -> Result<Var> {
    tape.softmax(interaction, Axis::Rows, !include_self)
}

/// Softmax of each destination's incoming interactions.
pub fn standard_attention_relation(tape: &mut Tape, interaction: Var, include_self: bool) -> Result<Var> {
    tape.softmax(interaction, Axis::Cols, !include_self)
}

fn normalize(tape: &mut Tape, interaction: Var, config: &RelationConfig) -> Result<Var> {
    match config.normalization {
        Normalization::ImportanceRelation => importance_relation(tape, interaction, config.include_self),
        Normalization::StandardAttention => standard_attention_relation(tape, interaction, config.include_self),
    }
}

/// `f^R_i = Σ_j E_ji (W_V f_j)`, plus `E^g_i (W_V2 f_global)` under extra-link fusion.
pub fn aggregate_relation_feature(
    tape: &mut Tape,
    relation: Var,
    scene: SceneVars,
    sub: &Submodule<Var>,
    fusion: Fusion,
    event_person: Var,
) -> Result<Var> {
    let values = tape.matmul_nt(scene.persons, sub.value)?;
    let incoming = tape.transpose(relation)?;
    let aggregated = tape.matmul(incoming, values)?;
    match (fusion, sub.global_value) {
        (Fusion::ExtraLink, Some(gv)) => {
            let global_value = tape.matvec(gv, scene.global)?;
            let link = tape.outer(event_person, global_value)?;
            tape.add(aggregated, link)
        }
        (Fusion::ExtraLink, None) => Err(Error::Config(
            "extra-link fusion needs a global value projection".into(),
        )),
        _ => Ok(aggregated),
    }
}

/// Intermediate nodes of one submodule evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SubmoduleTrace {
    pub person_person: Var,
    pub event_person: Var,
    pub interaction: Var,
    pub relation: Var,
    pub feature: Var,
}

pub fn submodule_forward(
    tape: &mut Tape,
    scene: SceneVars,
    sub: &Submodule<Var>,
    config: &RelationConfig,
) -> Result<SubmoduleTrace> {
    let person_person = person_person_graph(tape, scene.persons, sub, config.attention)?;
    let event_person = event_person_graph(tape, scene.persons, scene.global, sub.event_weight)?;
    let interaction = match config.fusion {
        Fusion::PriorImportance => fuse_prior_importance(tape, person_person, event_person)?,
        Fusion::PersonOnly | Fusion::ExtraLink => person_person,
    };
    let relation = normalize(tape, interaction, config)?;
    let feature = aggregate_relation_feature(tape, relation, scene, sub, config.fusion, event_person)?;
    Ok(SubmoduleTrace {
        person_person,
        event_person,
        interaction,
        relation,
        feature,
    })
}

/// `f^I_i = f_i + Concat[f^R1_i, ..., f^Rr_i]`
pub fn relation_module_forward(
    tape: &mut Tape,
    scene: SceneVars,
    subs: &[Submodule<Var>],
    config: &RelationConfig,
) -> Result<Var> {
    if subs.len() != config.submodules {
        return Err(Error::Config(format!(
            "relation module has {} submodules, configuration says r = {}",
            subs.len(),
            config.submodules
        )));
    }
    let mut parts = Vec::with_capacity(subs.len());
    for sub in subs {
        parts.push(submodule_forward(tape, scene, sub, config)?.feature);
    }
    let relation = tape.concat_cols(&parts)?;
    tape.add(scene.persons, relation)
}

/// Runs `N_r` relation modules in sequence. The global feature is shared by
/// every stage; event-person interactions are recomputed from each stage's
/// input.
pub fn stacked_forward(
    tape: &mut Tape,
    scene: SceneVars,
    stages: &[Vec<Submodule<Var>>],
    config: &RelationConfig,
) -> Result<Var> {
    if stages.len() != config.stacks {
        return Err(Error::Config(format!(
            "{} relation modules given, configuration says N_r = {}",
            stages.len(),
            config.stacks
        )));
    }
    let mut persons = scene.persons;
    for subs in stages {
        let stage_scene = SceneVars {
            persons,
            global: scene.global,
        };
        persons = relation_module_forward(tape, stage_scene, subs, config)?;
    }
    Ok(persons)
}

/// Materialized interaction graphs of one submodule on one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraphs {
    pub person_person: Tensor,
    pub event_person: Tensor,
    pub importance_interaction: Tensor,
    pub importance_relation: Tensor,
}

pub fn interaction_graphs(
    scene: &SceneFeatures,
    sub: &Submodule<Tensor>,
    config: &RelationConfig,
) -> Result<InteractionGraphs> {
    let mut tape = Tape::new();
    let vars = scene.record(&mut tape)?;
    let sub = sub.try_map(|t| tape.leaf(t.clone()))?;
    let trace = submodule_forward(&mut tape, vars, &sub, config)?;
    Ok(InteractionGraphs {
        person_person: tape.value(trace.person_person).clone(),
        event_person: tape.value(trace.event_person).clone(),
        importance_interaction: tape.value(trace.interaction).clone(),
        importance_relation: tape.value(trace.relation).clone(),
    })
}

/// Interaction from `source` to `destination`, `E^p` for a single pair.
pub fn person_person_interaction(
    destination: &[f64],
    source: &[f64],
    sub: &Submodule<Tensor>,
    attention: AttentionFn,
) -> Result<f64> {
    if destination.len() != source.len() {
        return Err(Error::dim(
            "person_person_interaction",
            format!("feature lengths {} and {}", destination.len(), source.len()),
        ));
    }
    let mut tape = Tape::new();
    let persons = tape.leaf(Tensor::from_rows(&[destination, source])?)?;
    let sub = sub.try_map(|t| tape.leaf(t.clone()))?;
    let graph = person_person_graph(&mut tape, persons, &sub, attention)?;
    Ok(tape.value(graph).at(1, 0))
}

/// `max{0, w_G · (f_i + f_global)}` for a single person.
pub fn event_person_interaction(person: &[f64], global: &[f64], event_weight: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let persons = tape.leaf(Tensor::from_rows(&[person])?)?;
    let global = tape.leaf(Tensor::vector(global.to_vec()))?;
    let w = tape.leaf(event_weight.clone())?;
    let eg = event_person_graph(&mut tape, persons, global, w)?;
    Ok(tape.value(eg).data()[0])
}

fn apply_square(interaction: &Tensor, f: fn(&mut Tape, Var, bool) -> Result<Var>) -> Result<Tensor> {
    match interaction.dims2() {
        Some((r, c)) if r == c => {}
        _ => {
            return Err(Error::dim(
                "relation",
                format!("expected a square matrix, got {:?}", interaction.shape()),
            ))
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(interaction.clone())?;
    let y = f(&mut tape, x, true)?;
    Ok(tape.value(y).clone())
}

/// Out-normalized importance relation of a materialized interaction matrix.
pub fn importance_relation_of(interaction: &Tensor) -> Result<Tensor> {
    apply_square(interaction, importance_relation)
}

/// In-normalized attention weights of a materialized interaction matrix.
pub fn standard_attention_of(interaction: &Tensor) -> Result<Tensor> {
    apply_square(interaction, standard_attention_relation)
}

pub fn fuse_prior_importance_of(person_person: &Tensor, event_person: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.leaf(person_person.clone())?;
    let e = tape.leaf(event_person.clone())?;
    let f = fuse_prior_importance(&mut tape, p, e)?;
    Ok(tape.value(f).clone())
}
