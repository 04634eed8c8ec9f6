use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardRule, Tensor};
use crate::data::Label;
use crate::error::Result;
use crate::model::{record_loss, ModelConfig, ModelParams};
use crate::relation::SceneFeatures;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor.
    pub samples_per_tensor: usize,
    /// Persons per random scene.
    pub persons: usize,
    pub seed: u64,
    /// Corrupt this backward rule; used as a negative control.
    pub fault: Option<BackwardRule>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            samples_per_tensor: 4,
            persons: 3,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub max_relative_error: f64,
    /// Name of the parameter where the maximum occurred.
    pub worst_parameter: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub trials: Vec<TrialReport>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>5} {:>14} {:>8} {:>8}  {}\n",
            "trial", "max rel err", "checked", "skipped", "worst"
        );
        for t in &self.trials {
            out.push_str(&format!(
                "{:>5} {:>14.3e} {:>8} {:>8}  {}\n",
                t.trial, t.max_relative_error, t.checked, t.skipped, t.worst_parameter
            ));
        }
        out.push_str(&format!(
            "{} (max {:.3e}, tolerance {:.0e})\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_relative_error,
            self.tolerance
        ));
        out
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches data")
}

fn random_case(
    config: &ModelConfig,
    persons: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SceneFeatures, Vec<Label>, ModelParams)> {
    let d = config.feature_dim();
    let rows: Vec<Vec<f64>> = (0..persons).map(|_| normal_tensor(rng, &[d]).into_data()).collect();
    let global = normal_tensor(rng, &[d]).into_data();
    let scene = SceneFeatures::new(&rows, &global)?;
    let important = rng.random_range(0..persons);
    let labels = (0..persons)
        .map(|i| {
            if i == important {
                Label::Important
            } else {
                Label::NonImportant
            }
        })
        .collect();
    let params = ModelParams::init(config, rng.random())?;
    Ok((scene, labels, params))
}

fn eval(
    scene: &SceneFeatures,
    labels: &[Label],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, Vec<bool>)> {
    let (tape, loss, _) = record_loss(scene, labels, params, config)?;
    Ok((tape.value(loss).item(), tape.relu_pattern()))
}

fn run_trial(config: &ModelConfig, trial: usize, options: &GradcheckOptions) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(trial as u64);
    let (scene, labels, mut params) = random_case(config, options.persons, &mut rng)?;

    let (mut tape, loss, vars) = record_loss(&scene, &labels, &params, config)?;
    if let Some(rule) = options.fault {
        tape.inject_fault(rule);
    }
    let pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();

    let mut worst = (0.0f64, String::new());
    let (mut checked, mut skipped) = (0, 0);
    for (k, name) in names.iter().enumerate() {
        let len = params.iter().nth(k).map(Tensor::len).unwrap_or(0);
        let picks = sample(&mut rng, len, options.samples_per_tensor.min(len));
        for idx in picks.iter() {
            let original = params.iter().nth(k).expect("index in range").data()[idx];
            let mut probe = |delta: f64| -> Result<(f64, Vec<bool>)> {
                params.iter_mut().nth(k).expect("index in range").data_mut()[idx] = original + delta;
                eval(&scene, &labels, &params, config)
            };
            let (plus, pattern_plus) = probe(options.step)?;
            let (minus, pattern_minus) = probe(-options.step)?;
            params.iter_mut().nth(k).expect("index in range").data_mut()[idx] = original;
            if pattern_plus != pattern || pattern_minus != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic[k].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            checked += 1;
            if rel >= worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    Ok(TrialReport {
        trial,
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        checked,
        skipped,
        passed: checked > 0 && worst.0 <= options.tolerance,
    })
}

/// Compares backpropagated gradients with central differences on `trials`
/// random scenes and parameter draws for `config`.
pub fn gradcheck(config: &ModelConfig, trials: usize, options: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let trials = (0..trials)
        .map(|t| run_trial(config, t, options))
        .collect::<Result<Vec<_>>>()?;
    let max = trials.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: options.tolerance,
        passed: trials.iter().all(|t| t.passed),
        max_relative_error: max,
        trials,
    })
}
