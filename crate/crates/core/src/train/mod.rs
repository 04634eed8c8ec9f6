//! Training loop, evaluation metrics, gradient checking and ablation sweeps.

mod gradcheck;
mod metrics;
mod sweep;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, TrialReport};
pub use metrics::{
    average_precision, evaluate_map, rank_order, rank_scene, summarize, EvalReport, RankedPerson, SceneRanking,
    ScoredScene,
};
pub use sweep::{ablation_sweep, AxisValue, SweepAxis, SweepRow, SweepTable};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tensor};
use crate::data::{Corpus, Label};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradients, ModelConfig, ModelParams};
use crate::relation::SceneFeatures;

/// A scene ready for the model, with labels.
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub scene_id: String,
    pub person_ids: Vec<String>,
    pub features: SceneFeatures,
    pub labels: Vec<Label>,
}

/// Converts a labeled corpus into model inputs.
pub fn prepare(corpus: &Corpus) -> Result<Vec<LabeledScene>> {
    corpus
        .scenes
        .iter()
        .map(|s| {
            let labels = s
                .labels()
                .ok_or_else(|| Error::Data(format!("scene {} is not fully labeled", s.scene_id)))?;
            Ok(LabeledScene {
                scene_id: s.scene_id.clone(),
                person_ids: s.persons.iter().map(|p| p.person_id.clone()).collect(),
                features: s.features()?,
                labels,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Zero freezes the parameters; the loss curve is still recorded.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Scenes per SGD step.
    pub batch_size: usize,
    pub seed: u64,
    /// Invoke the checkpoint hook every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Worker thread cap; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {}", e)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains `params` on `scenes`; see [`train_with_hook`].
pub fn train(
    scenes: &[LabeledScene],
    params: ModelParams,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_hook(scenes, params, model, config, |_, _| Ok(()))
}

/// Minibatch SGD over whole scenes. Scene gradients inside a batch are
/// computed in parallel and reduced in batch order, so results do not depend
/// on the thread count. `hook(epoch, params)` runs every
/// `checkpoint_every` epochs.
pub fn train_with_hook(
    scenes: &[LabeledScene],
    mut params: ModelParams,
    model: &ModelConfig,
    config: &TrainConfig,
    mut hook: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.check(model)?;
    if scenes.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    let pool = thread_pool(config.threads)?;
    let mut sgd = if config.learning_rate > 0.0 {
        Some(Sgd::new(config.learning_rate, config.momentum)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = pool
                .install(|| {
                    batch
                        .par_iter()
                        .map(|&k| {
                            let s = &scenes[k];
                            loss_and_gradients(&s.features, &s.labels, &params, model)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Divergence {
                        epoch,
                        detail: format!("non-finite value in {}", op),
                    },
                    other => other,
                })?;

            let mut grads: Vec<Tensor> = results[0].1.iter().map(|g| Tensor::zeros(g.shape())).collect();
            for (loss, scene_grads) in &results {
                total += loss;
                for (acc, g) in grads.iter_mut().zip(scene_grads) {
                    acc.add_assign(g);
                }
            }
            let scale = 1.0 / results.len() as f64;
            for g in &mut grads {
                g.scale_assign(scale);
            }
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "loss or gradient is not finite".into(),
                });
            }
            if let Some(sgd) = &mut sgd {
                sgd.step(params.iter_mut(), &grads)?;
            }
        }
        let mean = total / scenes.len() as f64;
        info!("epoch {:>4}  loss {:.6}", epoch, mean);
        curve.push(mean);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            hook(epoch, &params)?;
        }
    }
    Ok(TrainOutcome {
        params,
        loss_curve: curve,
    })
}

/// Loss curve as tab-separated `epoch<TAB>loss` lines with a header.
pub fn loss_curve_tsv(curve: &[f64]) -> String {
    let mut out = String::from("epoch\tloss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{}\t{}\n", i + 1, l));
    }
    out
}
