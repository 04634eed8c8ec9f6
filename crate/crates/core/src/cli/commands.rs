use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::cli::settings::{Settings, DEFAULT_COUNT, DEFAULT_GRADCHECK_DIM, DEFAULT_TRIALS};
use crate::cli::Command;
use crate::data::{generate_relational_corpus, load_corpus, load_unlabeled_corpus, Corpus};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelParams};
use crate::train::{
    ablation_sweep, evaluate_map, gradcheck, loss_curve_tsv, prepare, rank_scene, train_with_hook, AxisValue, SweepAxis,
};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn execute(command: Command, s: &Settings) -> Result<u8> {
    if let Some(n) = s.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // Fails harmlessly if the global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match command {
        Command::Generate(_) => generate(s),
        Command::Train(_) => train(s),
        Command::Eval(a) => eval(s, a.json),
        Command::Infer(_) => infer(s),
        Command::Gradcheck(_) => run_gradcheck(s),
        Command::Sweep(_) => sweep(s),
    }
}

fn generate(s: &Settings) -> Result<u8> {
    let out = s.require_path(&s.out, "out")?;
    let spec = s.generator_spec();
    let count = s.count.unwrap_or(DEFAULT_COUNT);
    let corpus = generate_relational_corpus(&spec, count)?;
    if corpus.is_empty() {
        warn!("generated corpus is empty");
    }
    corpus.save(&out)?;
    println!(
        "scenes {}\npersons {}\nd_f {}",
        corpus.len(),
        corpus.person_count(),
        corpus.feature_dim
    );
    Ok(0)
}

fn default_loss_curve(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.tsv")
}

fn epoch_checkpoint(checkpoint: &Path, epoch: usize) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    checkpoint.with_file_name(format!("{}.epoch-{:04}.json", stem, epoch))
}

fn train(s: &Settings) -> Result<u8> {
    let data = s.require_path(&s.train, "train")?;
    let out = s.require_path(&s.checkpoint, "checkpoint")?;
    let curve_path = s.loss_curve.clone().unwrap_or_else(|| default_loss_curve(&out));
    let train_config = s.train_config()?;
    let corpus = load_corpus(&data)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "{}: training corpus holds no scenes",
            data.display()
        )));
    }
    s.check_feature_dim(corpus.feature_dim, "the training corpus")?;
    let config = s.model_config(corpus.feature_dim)?;
    let scenes = prepare(&corpus)?;
    let params = ModelParams::init(&config, train_config.seed)?;
    info!(
        "training {} parameters on {} scenes for {} epochs",
        params.parameter_count(),
        scenes.len(),
        train_config.epochs
    );
    let outcome = train_with_hook(&scenes, params, &config, &train_config, |epoch, p| {
        let path = epoch_checkpoint(&out, epoch);
        info!("writing {}", path.display());
        Checkpoint {
            config: config.clone(),
            params: p.clone(),
        }
        .save(&path)
    })?;
    let checkpoint = Checkpoint {
        config,
        params: outcome.params,
    };
    checkpoint.save(&out)?;
    write_file(&curve_path, &loss_curve_tsv(&outcome.loss_curve))?;
    println!(
        "final_loss {}\nchecksum {}\ncheckpoint {}\nloss_curve {}",
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        checkpoint.params.checksum(),
        out.display(),
        curve_path.display()
    );
    Ok(0)
}

fn load_checkpoint(s: &Settings) -> Result<Checkpoint> {
    let path = s.require_path(&s.checkpoint, "checkpoint")?;
    let checkpoint = Checkpoint::load(&path)?;
    s.check_feature_dim(checkpoint.config.feature_dim(), "the checkpoint")?;
    Ok(checkpoint)
}

fn check_corpus(corpus: &Corpus, checkpoint: &Checkpoint) -> Result<()> {
    let model = checkpoint.config.feature_dim();
    if !corpus.is_empty() && corpus.feature_dim != model {
        return Err(Error::Config(format!(
            "checkpoint expects d_f = {} but the corpus has d_f = {}",
            model, corpus.feature_dim
        )));
    }
    Ok(())
}

fn eval(s: &Settings, json: bool) -> Result<u8> {
    let data = s.require_path(&s.data, "data")?;
    let checkpoint = load_checkpoint(s)?;
    let corpus = load_corpus(&data)?;
    check_corpus(&corpus, &checkpoint)?;
    let scenes = prepare(&corpus)?;
    let report = evaluate_map(&scenes, &checkpoint.params, &checkpoint.config, s.threads.unwrap_or(0))?;
    if let Some(path) = &s.report {
        write_file(path, &report.to_json())?;
    }
    if json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.summary_table());
    }
    Ok(0)
}

#[derive(Serialize)]
struct InferLine<'a> {
    scene_id: &'a str,
    most_important: &'a str,
    ranking: Vec<RankedOut<'a>>,
}

#[derive(Serialize)]
struct RankedOut<'a> {
    person_id: &'a str,
    point: f64,
}

fn infer(s: &Settings) -> Result<u8> {
    let data = s.require_path(&s.data, "data")?;
    let checkpoint = load_checkpoint(s)?;
    let corpus = load_unlabeled_corpus(&data)?;
    check_corpus(&corpus, &checkpoint)?;
    let mut out = String::new();
    for scene in &corpus.scenes {
        let ids: Vec<String> = scene.persons.iter().map(|p| p.person_id.clone()).collect();
        let ranked = rank_scene(&scene.features()?, &ids, &checkpoint.params, &checkpoint.config)?;
        let line = InferLine {
            scene_id: &scene.scene_id,
            most_important: &ranked[0].person_id,
            ranking: ranked
                .iter()
                .map(|r| RankedOut {
                    person_id: &r.person_id,
                    point: r.point,
                })
                .collect(),
        };
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?
        );
    }
    match &s.out {
        Some(path) => write_file(path, &out)?,
        None => print!("{}", out),
    }
    Ok(0)
}

fn run_gradcheck(s: &Settings) -> Result<u8> {
    let config = s.model_config(s.feature_dim.unwrap_or(DEFAULT_GRADCHECK_DIM))?;
    let options = s.gradcheck_options();
    if options.persons == 0 {
        return Err(Error::Config("persons must be at least 1".into()));
    }
    let report = gradcheck(&config, s.trials.unwrap_or(DEFAULT_TRIALS), &options)?;
    print!("{}", report.table());
    Ok(if report.passed { 0 } else { 1 })
}

fn sweep_values(axis: SweepAxis, values: Option<&str>) -> Result<Vec<AxisValue>> {
    match values {
        Some(list) => list.split(',').map(|v| axis.parse_value(v)).collect(),
        None => Ok(axis.all_values().unwrap_or_else(|| {
            let counts: &[usize] = if axis == SweepAxis::Submodules {
                &[1, 2, 4]
            } else {
                &[1, 2]
            };
            counts.iter().map(|&n| AxisValue::Count(n)).collect()
        })),
    }
}

fn sweep(s: &Settings) -> Result<u8> {
    let train_path = s.require_path(&s.train, "train")?;
    let test_path = s.require_path(&s.test, "test")?;
    let out = s.require_path(&s.out, "out")?;
    let axis: SweepAxis = s
        .axis
        .as_deref()
        .ok_or_else(|| Error::Usage("missing sweep axis: pass --axis or set `axis` in the config file".into()))?
        .parse()?;
    let values = sweep_values(axis, s.values.as_deref())?;
    let train_config = s.train_config()?;
    let train_corpus = load_corpus(&train_path)?;
    let test_corpus = load_corpus(&test_path)?;
    if train_corpus.is_empty() {
        return Err(Error::Data(format!(
            "{}: training corpus holds no scenes",
            train_path.display()
        )));
    }
    if !test_corpus.is_empty() && test_corpus.feature_dim != train_corpus.feature_dim {
        return Err(Error::Data(format!(
            "training corpus has d_f = {} but test corpus has d_f = {}",
            train_corpus.feature_dim, test_corpus.feature_dim
        )));
    }
    s.check_feature_dim(train_corpus.feature_dim, "the training corpus")?;
    let base = s.model_config(train_corpus.feature_dim)?;
    let name = s.corpus_name.clone().unwrap_or_else(|| {
        train_path
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("corpus")
            .to_string()
    });
    let table = ablation_sweep(
        &name,
        &prepare(&train_corpus)?,
        &prepare(&test_corpus)?,
        &base,
        &train_config,
        axis,
        &values,
        s.baseline.unwrap_or(false),
    )?;
    let text = table.render();
    write_file(&out, &text)?;
    print!("{}", text);
    Ok(0)
}
