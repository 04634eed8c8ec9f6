//! Full importance pipeline: relation modules followed by a two-layer
//! classifier whose important-class probability is the importance point.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::relation::{scaled_uniform, stacked_forward, RelationConfig, SceneFeatures, SceneVars, Submodule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Relation modules followed by the classifier.
    Point,
    /// Classifier applied directly to person features.
    Baseline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Point => "point",
            Variant::Baseline => "baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Variant::Point),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(Error::Config(format!(
                "unknown model variant '{}', expected point or baseline",
                s
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub relation: RelationConfig,
    /// Width of the classifier's hidden layer.
    pub hidden: usize,
}

impl ModelConfig {
    /// POINT defaults for feature dimension `feature_dim`: r = 4 when it
    /// divides `feature_dim` (else 1), one module, hidden width `d_f / 2`.
    pub fn new(feature_dim: usize) -> Self {
        let r = if feature_dim.is_multiple_of(4) { 4 } else { 1 };
        ModelConfig {
            variant: Variant::Point,
            relation: RelationConfig::new(feature_dim, r),
            hidden: (feature_dim / 2).max(1),
        }
    }

    pub fn baseline(feature_dim: usize) -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            ..ModelConfig::new(feature_dim)
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.relation.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        if self.variant == Variant::Point {
            self.relation.validate()?;
        } else if self.relation.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Two affine layers `d_f -> hidden -> 2` with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub hidden_weight: T,
    pub hidden_bias: T,
    pub output_weight: T,
    pub output_bias: T,
}

/// All trainable parameters, generic over storage (`Tensor` at rest, `Var`
/// on a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `N_r` stages of `r` submodules each.
    pub relation: Vec<Vec<Submodule<T>>>,
    pub classifier: Classifier<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Params<U>> {
        let relation = self
            .relation
            .iter()
            .map(|stage| stage.iter().map(|s| s.try_map(&mut f)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let c = &self.classifier;
        Ok(Params {
            relation,
            classifier: Classifier {
                hidden_weight: f(&c.hidden_weight)?,
                hidden_bias: f(&c.hidden_bias)?,
                output_weight: f(&c.output_weight)?,
                output_bias: f(&c.output_bias)?,
            },
        })
    }

    /// Every parameter with a stable dotted name, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (s, stage) in self.relation.iter().enumerate() {
            for (h, sub) in stage.iter().enumerate() {
                for (name, t) in sub.fields() {
                    out.push((format!("relation.{}.{}.{}", s, h, name), t));
                }
            }
        }
        let c = &self.classifier;
        out.push(("classifier.hidden_weight".into(), &c.hidden_weight));
        out.push(("classifier.hidden_bias".into(), &c.hidden_bias));
        out.push(("classifier.output_weight".into(), &c.output_weight));
        out.push(("classifier.output_bias".into(), &c.output_bias));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for stage in &mut self.relation {
            for sub in stage {
                out.extend(sub.fields_mut());
            }
        }
        let c = &mut self.classifier;
        out.extend([
            &mut c.hidden_weight,
            &mut c.hidden_bias,
            &mut c.output_weight,
            &mut c.output_bias,
        ]);
        out.into_iter()
    }
}

impl ModelParams {
    /// Scaled-uniform initialization, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relation = match config.variant {
            Variant::Point => (0..config.relation.stacks)
                .map(|_| {
                    (0..config.relation.submodules)
                        .map(|_| Submodule::init(&config.relation, &mut rng))
                        .collect()
                })
                .collect(),
            Variant::Baseline => Vec::new(),
        };
        let (df, h) = (config.feature_dim(), config.hidden);
        let classifier = Classifier {
            hidden_weight: scaled_uniform(&mut rng, &[h, df], df),
            hidden_bias: scaled_uniform(&mut rng, &[h], df),
            output_weight: scaled_uniform(&mut rng, &[2, h], h),
            output_bias: scaled_uniform(&mut rng, &[2], h),
        };
        Ok(Params { relation, classifier })
    }

    /// Verifies that every tensor has the shape `config` implies.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let stages = match config.variant {
            Variant::Point => config.relation.stacks,
            Variant::Baseline => 0,
        };
        if self.relation.len() != stages {
            return Err(Error::Config(format!(
                "parameters hold {} relation modules, configuration needs {}",
                self.relation.len(),
                stages
            )));
        }
        for stage in &self.relation {
            if stage.len() != config.relation.submodules {
                return Err(Error::Config(format!(
                    "relation module holds {} submodules, configuration needs r = {}",
                    stage.len(),
                    config.relation.submodules
                )));
            }
            for sub in stage {
                sub.check(&config.relation)?;
            }
        }
        let (df, h) = (config.feature_dim(), config.hidden);
        let c = &self.classifier;
        for (name, t, shape) in [
            ("hidden_weight", &c.hidden_weight, vec![h, df]),
            ("hidden_bias", &c.hidden_bias, vec![h]),
            ("output_weight", &c.output_weight, vec![2, h]),
            ("output_bias", &c.output_bias, vec![2]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "classifier {} has shape {:?}, configuration needs {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape) -> Result<Params<Var>> {
        self.try_map(|t| tape.leaf(t.clone()))
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over the bit patterns of every parameter, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named() {
            hasher.update(name.as_bytes());
            for x in t.data() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// Probability pair produced for one person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportancePoint {
    pub important: f64,
    pub unimportant: f64,
}

fn classifier_logits(tape: &mut Tape, features: Var, c: &Classifier<Var>) -> Result<Var> {
    let h = tape.matmul_nt(features, c.hidden_weight)?;
    let h = tape.add_row_vector(h, c.hidden_bias)?;
    let h = tape.relu(h)?;
    let z = tape.matmul_nt(h, c.output_weight)?;
    tape.add_row_vector(z, c.output_bias)
}

fn check_scene(scene: &SceneFeatures, config: &ModelConfig) -> Result<()> {
    if scene.feature_dim() != config.feature_dim() {
        return Err(Error::Config(format!(
            "scene features have d_f = {}, model expects d_f = {}",
            scene.feature_dim(),
            config.feature_dim()
        )));
    }
    Ok(())
}

/// `N × 2` logits of the relation pipeline.
pub fn point_logits(tape: &mut Tape, scene: SceneVars, params: &Params<Var>, config: &ModelConfig) -> Result<Var> {
    let features = stacked_forward(tape, scene, &params.relation, &config.relation)?;
    classifier_logits(tape, features, &params.classifier)
}

/// `N × 2` logits of the relation-free baseline.
pub fn baseline_logits(tape: &mut Tape, scene: SceneVars, params: &Params<Var>) -> Result<Var> {
    classifier_logits(tape, scene.persons, &params.classifier)
}

/// Logits of whichever variant `config` selects.
pub fn logits(tape: &mut Tape, scene: SceneVars, params: &Params<Var>, config: &ModelConfig) -> Result<Var> {
    match config.variant {
        Variant::Point => point_logits(tape, scene, params, config),
        Variant::Baseline => baseline_logits(tape, scene, params),
    }
}

fn points_from_logits(tape: &mut Tape, logits: Var) -> Result<Vec<ImportancePoint>> {
    let probs = tape.softmax_rows(logits)?;
    Ok(tape
        .value(probs)
        .rows()
        .into_iter()
        .map(|r| ImportancePoint {
            unimportant: r[0],
            important: r[1],
        })
        .collect())
}

pub fn forward_point(
    scene: &SceneFeatures,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<ImportancePoint>> {
    check_scene(scene, config)?;
    let mut tape = Tape::new();
    let vars = scene.record(&mut tape)?;
    let p = params.record(&mut tape)?;
    let z = point_logits(&mut tape, vars, &p, config)?;
    points_from_logits(&mut tape, z)
}

pub fn forward_baseline(
    scene: &SceneFeatures,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<ImportancePoint>> {
    check_scene(scene, config)?;
    let mut tape = Tape::new();
    let vars = scene.record(&mut tape)?;
    let p = params.record(&mut tape)?;
    let z = baseline_logits(&mut tape, vars, &p)?;
    points_from_logits(&mut tape, z)
}

/// Importance points under the configured variant.
pub fn predict(scene: &SceneFeatures, params: &ModelParams, config: &ModelConfig) -> Result<Vec<ImportancePoint>> {
    match config.variant {
        Variant::Point => forward_point(scene, params, config),
        Variant::Baseline => forward_baseline(scene, params, config),
    }
}

fn targets(scene: &SceneFeatures, labels: &[Label]) -> Result<Vec<usize>> {
    if labels.len() != scene.person_count() {
        return Err(Error::Data(format!(
            "{} labels for a scene of {} persons",
            labels.len(),
            scene.person_count()
        )));
    }
    Ok(labels.iter().map(|l| l.class_index()).collect())
}

/// Records the mean cross-entropy of one scene; returns `(tape, loss, params)`.
pub fn record_loss(
    scene: &SceneFeatures,
    labels: &[Label],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Tape, Var, Params<Var>)> {
    check_scene(scene, config)?;
    let targets = targets(scene, labels)?;
    let mut tape = Tape::new();
    let vars = scene.record(&mut tape)?;
    let p = params.record(&mut tape)?;
    let z = logits(&mut tape, vars, &p, config)?;
    let loss = tape.cross_entropy(z, &targets)?;
    Ok((tape, loss, p))
}

/// Mean cross-entropy over the scene's persons.
pub fn loss(scene: &SceneFeatures, labels: &[Label], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let (tape, l, _) = record_loss(scene, labels, params, config)?;
    Ok(tape.value(l).item())
}

/// Loss and its gradient for every parameter, in [`Params::iter`] order.
pub fn loss_and_gradients(
    scene: &SceneFeatures,
    labels: &[Label],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let (tape, l, vars) = record_loss(scene, labels, params, config)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Index of the highest importance point; ties go to the lowest index.
pub fn select_most_important(points: &[ImportancePoint]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if best.is_none_or(|b| p.important > points[b].important) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Data("cannot select from an empty scene".into()))
}

const CHECKPOINT_FORMAT: &str = "point-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<StoredTensor>,
}

/// A model configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        self.params.check(&self.config)?;
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&stored).map_err(|e| Error::Data(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if stored.format != CHECKPOINT_FORMAT || stored.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                stored.format, stored.version
            )));
        }
        let config = stored.config;
        let mut params = ModelParams::init(&config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != stored.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, configuration implies {}",
                stored.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), stored) in params.iter_mut().zip(&names).zip(stored.tensors) {
            if &stored.name != name {
                return Err(Error::Data(format!("expected tensor {}, found {}", name, stored.name)));
            }
            if stored.shape != slot.shape() {
                return Err(Error::Data(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    name,
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(stored.shape, stored.data)?;
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::Fusion;

    fn point(p: f64) -> ImportancePoint {
        ImportancePoint {
            important: p,
            unimportant: 1.0 - p,
        }
    }

    fn scene(n: usize, d: usize, offset: f64) -> SceneFeatures {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|k| ((i * d + k) as f64 * 0.37 + offset).sin()).collect())
            .collect();
        let global: Vec<f64> = (0..d).map(|k| (k as f64 * 0.11).cos()).collect();
        SceneFeatures::new(&rows, &global).unwrap()
    }

    #[test]
    fn argmax_selection() {
        assert_eq!(select_most_important(&[point(0.2), point(0.9), point(0.4)]).unwrap(), 1);
        assert_eq!(select_most_important(&[point(0.3)]).unwrap(), 0);
        assert_eq!(select_most_important(&[point(0.5), point(0.5)]).unwrap(), 0);
        assert!(matches!(select_most_important(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn zero_values_and_classifier_give_half() {
        let config = ModelConfig::new(8);
        let mut params = ModelParams::init(&config, 3).unwrap();
        for sub in params.relation.iter_mut().flatten() {
            sub.value = Tensor::zeros(sub.value.shape());
        }
        for t in [
            &mut params.classifier.hidden_weight,
            &mut params.classifier.hidden_bias,
            &mut params.classifier.output_weight,
            &mut params.classifier.output_bias,
        ] {
            *t = Tensor::zeros(t.shape());
        }
        for p in forward_point(&scene(3, 8, 0.0), &params, &config).unwrap() {
            assert_eq!(p.important, 0.5);
        }
    }

    #[test]
    fn probabilities_pair_sum_to_one() {
        let mut config = ModelConfig::new(8);
        config.relation.fusion = Fusion::ExtraLink;
        let params = ModelParams::init(&config, 11).unwrap();
        for p in forward_point(&scene(5, 8, 0.3), &params, &config).unwrap() {
            assert!((0.0..=1.0).contains(&p.important));
            assert!((p.important + p.unimportant - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_of_uniform_predictions_is_ln2() {
        let config = ModelConfig::baseline(4);
        let mut params = ModelParams::init(&config, 0).unwrap();
        params.classifier.output_weight = Tensor::zeros(&[2, 2]);
        params.classifier.output_bias = Tensor::zeros(&[2]);
        let l = loss(
            &scene(3, 4, 0.0),
            &[Label::Important, Label::NonImportant, Label::NonImportant],
            &params,
            &config,
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_predictions_have_small_loss() {
        let config = ModelConfig::baseline(4);
        let mut params = ModelParams::init(&config, 0).unwrap();
        params.classifier.output_weight = Tensor::zeros(&[2, 2]);
        let labels = [Label::NonImportant; 2];
        let mut at = |p: f64| {
            params.classifier.output_bias = Tensor::vector(vec![(p / (1.0 - p)).ln(), 0.0]);
            loss(&scene(2, 4, 0.0), &labels, &params, &config).unwrap()
        };
        assert!((at(0.999) + 0.999f64.ln()).abs() < 1e-12);
        assert!(at(0.9995) < 1e-3);
        assert!(at(0.999999) < at(0.9995));
    }

    #[test]
    fn label_length_mismatch() {
        let config = ModelConfig::baseline(4);
        let params = ModelParams::init(&config, 0).unwrap();
        let err = loss(&scene(3, 4, 0.0), &[Label::Important], &params, &config);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn feature_dimension_mismatch_is_config_error() {
        let config = ModelConfig::new(8);
        let params = ModelParams::init(&config, 0).unwrap();
        assert!(matches!(
            forward_point(&scene(2, 4, 0.0), &params, &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut config = ModelConfig::new(8);
        config.relation.fusion = Fusion::ExtraLink;
        config.relation.stacks = 2;
        let ckpt = Checkpoint {
            params: ModelParams::init(&config, 42).unwrap(),
            config,
        };
        let text = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_json().unwrap(), text);
        let s = scene(4, 8, 1.0);
        let a = forward_point(&s, &ckpt.params, &ckpt.config).unwrap();
        let b = forward_point(&s, &back.params, &back.config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.important.to_bits(), y.important.to_bits());
        }
    }

    #[test]
    fn parameter_count_bookkeeping() {
        // five projections per submodule, six under extra-link fusion
        let mut config = ModelConfig::new(8);
        config.relation.submodules = 2;
        let params = ModelParams::init(&config, 0).unwrap();
        assert_eq!(params.relation[0][0].fields().len(), 5);
        config.relation.fusion = Fusion::ExtraLink;
        let params = ModelParams::init(&config, 0).unwrap();
        assert_eq!(params.relation[0][0].fields().len(), 6);
        assert_eq!(params.relation[0].len(), 2);
    }
}
