//! The `point` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, failed gradient
//! check, I/O), 2 usage or configuration error, 3 malformed data.

mod commands;
mod settings;

pub use settings::Settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::model::Variant;
use crate::relation::{AttentionFn, Fusion, Normalization};

#[derive(Debug, Parser)]
#[command(
    name = "point",
    version,
    about = "Important-person detection with importance-relation networks"
)]
pub struct Cli {
    /// Flat TOML file whose keys mirror the long flags (`-` becomes `_`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Cap on worker threads [default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic relational corpus.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Score a labeled corpus with a checkpoint.
    Eval(EvalArgs),
    /// Rank the persons of every scene in a corpus; labels are optional.
    Infer(InferArgs),
    /// Compare backpropagated gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per value of an ablation axis and tabulate the scores.
    Sweep(SweepArgs),
}

#[derive(Debug, Default, Args)]
pub struct GeneratorFlags {
    /// Number of scenes [default: 1000].
    #[arg(long)]
    pub count: Option<usize>,
    /// Fewest persons per scene [default: 3].
    #[arg(long)]
    pub min_persons: Option<usize>,
    /// Most persons per scene [default: 8].
    #[arg(long)]
    pub max_persons: Option<usize>,
    /// Feature dimension d_f [default: 32].
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Identity slots; at least max-persons [default: 8].
    #[arg(long)]
    pub slots: Option<usize>,
    /// Probability of looking at the focal person [default: 0.8].
    #[arg(long)]
    pub focus_prob: Option<f64>,
    /// Feature noise scale [default: 0.1].
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    /// point or baseline [default: point].
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Relation submodules per module; must divide d_f [default: 4 if it divides d_f, else 1].
    #[arg(long = "r")]
    pub r: Option<usize>,
    /// Stacked relation modules [default: 1].
    #[arg(long = "n-r")]
    pub n_r: Option<usize>,
    /// person-only, prior-importance or extra-link [default: prior-importance].
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// additive or scaled-dot-product [default: additive].
    #[arg(long)]
    pub attention: Option<AttentionFn>,
    /// importance-relation or standard-attention [default: importance-relation].
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// Let each person relate to itself [default: true].
    #[arg(long)]
    pub include_self: Option<bool>,
    /// Classifier hidden width [default: d_f / 2].
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainingFlags {
    /// Passes over the training corpus [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// SGD learning rate; 0 freezes the parameters [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum in [0, 1) [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Scenes per step [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write a checkpoint every this many epochs; 0 disables [default: 0].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Corpus file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub generator: GeneratorFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled training corpus.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss curve file [default: checkpoint path with extension `loss.tsv`].
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    /// Seed for initialization and shuffling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected d_f; must match the corpus.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled corpus to score.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the full report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report instead of the summary table.
    #[arg(long)]
    pub json: bool,
    /// Expected d_f; must match the checkpoint.
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Corpus to rank; labels are ignored.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write rankings here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected d_f; must match the checkpoint.
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random scenes and parameter draws to check [default: 10].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Persons per random scene [default: 3].
    #[arg(long)]
    pub persons: Option<usize>,
    /// Feature dimension d_f [default: 8].
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Labeled training corpus.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Labeled test corpus.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Table file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// r, n-r, fusion, attention or normalization.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values [default: 1,2,4 for r, 1,2 for n-r, every method otherwise].
    #[arg(long)]
    pub values: Option<String>,
    /// Also train and report the relation-free baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Corpus label in the table [default: training file stem].
    #[arg(long)]
    pub corpus_name: Option<String>,
    /// Seed shared by every trained model [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub training: TrainingFlags,
}

impl GeneratorFlags {
    fn apply(self, s: &mut Settings) {
        s.count = self.count;
        s.min_persons = self.min_persons;
        s.max_persons = self.max_persons;
        s.feature_dim = self.feature_dim;
        s.slots = self.slots;
        s.focus_prob = self.focus_prob;
        s.sigma = self.sigma;
    }
}

impl ModelFlags {
    fn apply(self, s: &mut Settings) {
        s.variant = self.variant;
        s.r = self.r;
        s.n_r = self.n_r;
        s.fusion = self.fusion;
        s.attention = self.attention;
        s.normalization = self.normalization;
        s.include_self = self.include_self;
        s.hidden = self.hidden;
    }
}

impl TrainingFlags {
    fn apply(self, s: &mut Settings) {
        s.epochs = self.epochs;
        s.lr = self.lr;
        s.momentum = self.momentum;
        s.batch_size = self.batch_size;
        s.checkpoint_every = self.checkpoint_every;
    }
}

/// Settings given on the command line, for overlaying onto the config file.
fn flag_settings(cli_threads: Option<usize>, command: Command) -> (Settings, Command) {
    let mut s = Settings {
        threads: cli_threads,
        ..Default::default()
    };
    let command = match command {
        Command::Generate(mut a) => {
            s.out = a.out.take();
            s.seed = a.seed;
            std::mem::take(&mut a.generator).apply(&mut s);
            Command::Generate(a)
        }
        Command::Train(mut a) => {
            s.train = a.train.take();
            s.checkpoint = a.checkpoint.take();
            s.loss_curve = a.loss_curve.take();
            s.seed = a.seed;
            s.feature_dim = a.feature_dim;
            std::mem::take(&mut a.model).apply(&mut s);
            std::mem::take(&mut a.training).apply(&mut s);
            Command::Train(a)
        }
        Command::Eval(mut a) => {
            s.data = a.data.take();
            s.checkpoint = a.checkpoint.take();
            s.report = a.report.take();
            s.feature_dim = a.feature_dim;
            Command::Eval(a)
        }
        Command::Infer(mut a) => {
            s.data = a.data.take();
            s.checkpoint = a.checkpoint.take();
            s.out = a.out.take();
            s.feature_dim = a.feature_dim;
            Command::Infer(a)
        }
        Command::Gradcheck(mut a) => {
            s.trials = a.trials;
            s.persons = a.persons;
            s.feature_dim = a.feature_dim;
            s.seed = a.seed;
            std::mem::take(&mut a.model).apply(&mut s);
            Command::Gradcheck(a)
        }
        Command::Sweep(mut a) => {
            s.train = a.train.take();
            s.test = a.test.take();
            s.out = a.out.take();
            s.axis = a.axis.take();
            s.values = a.values.take();
            s.baseline = a.baseline.then_some(true);
            s.corpus_name = a.corpus_name.take();
            s.seed = a.seed;
            std::mem::take(&mut a.model).apply(&mut s);
            std::mem::take(&mut a.training).apply(&mut s);
            Command::Sweep(a)
        }
    };
    (s, command)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Parse { .. } => 3,
        Error::Divergence { .. } | Error::Io { .. } | Error::Dimension { .. } | Error::NonFinite { .. } => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let file = match cli.config.as_deref().map(Settings::load).transpose() {
        Ok(file) => file.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {}", e);
            return exit_code(&e);
        }
    };
    let (flags, command) = flag_settings(cli.threads, cli.command);
    let settings = file.overlay(flags);
    match commands::execute(command, &settings) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}
