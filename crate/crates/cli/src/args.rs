//! Command-line flags. Defaults of flags that mirror a published setting
//! say so in their help text.

use clap::{Args, Parser, Subcommand};
use etrag::corpus::{SyntheticTaskConfig, DEFAULT_MAX_INPUT_LEN};
use etrag::pipeline::ModelConfig;
use etrag::training::{Ablation, AdamWConfig, TrainConfig};
use serde::Serialize;
use std::path::PathBuf;

/// Environment variable naming the directory under which runs without
/// `--out` are written.
pub const OUT_DIR_ENV: &str = "ETRAG_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "etrag", version, about = "Retrieval-augmented relation extraction on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic task: train/dev/test JSONL plus schema.
    Gen(GenArgs),
    /// Train one model and write its best checkpoint and metric CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and score once per neighbour count.
    Sweep(SweepArgs),
    /// Compare what trained and untrained retrievers return.
    Stats(StatsArgs),
    /// List the nearest database instances of one instance.
    Retrieve(RetrieveArgs),
    /// Run every ablation over several seeds and tabulate test F1.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Stats(_) => "stats",
            Command::Retrieve(_) => "retrieve",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OutArgs {
    /// Output directory [default: $ETRAG_OUT_DIR/<command>, else runs/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl OutArgs {
    pub fn resolve(&self, command: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                root.join(command)
            }
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenArgs {
    /// Labels including the negative one.
    #[arg(long, default_value_t = 9)]
    pub n_labels: usize,
    #[arg(long, default_value_t = 40)]
    pub n_entities: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    /// Share of positive instances whose label follows the entity pair.
    #[arg(long, default_value_t = 0.9)]
    pub correlation: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0.6)]
    pub negative_fraction: f64,
    #[arg(long, default_value_t = 1.5)]
    pub facts_per_entity: f64,
    #[arg(long, default_value_t = 512)]
    pub n_train: usize,
    #[arg(long, default_value_t = 128)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 256)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

impl GenArgs {
    pub fn config(&self) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            n_labels: self.n_labels,
            n_entities: self.n_entities,
            vocab_size: self.vocab_size,
            sentence_len: (self.min_len, self.max_len),
            label_entity_correlation: self.correlation,
            noise_rate: self.noise_rate,
            negative_fraction: self.negative_fraction,
            facts_per_entity: self.facts_per_entity,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    /// Prompt instances per query [published: 10]; 0 disables retrieval.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Selection temperature.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Retriever-only updates before the generator trains [published: 300].
    #[arg(long, default_value_t = 300)]
    pub warmup_steps: usize,
    /// Database instances sampled per query during training [published: 32].
    #[arg(long, default_value_t = 32)]
    pub subset_size: usize,
    /// Largest database drawn from the training set [published: 5000].
    #[arg(long, default_value_t = 5000)]
    pub db_cap: usize,
    /// Instances per update [published: 64].
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Generator learning rate [published: 5e-4].
    #[arg(long, default_value_t = 5e-3)]
    pub lr_base: f64,
    /// Encoder and prompt projection learning rate [published: 1e-3].
    #[arg(long, default_value_t = 1e-3)]
    pub lr_other: f64,
    /// Decoupled decay on bias parameters [published: 5e-6].
    #[arg(long, default_value_t = 5e-6)]
    pub weight_decay: f64,
    /// Decay every parameter, not only biases.
    #[arg(long)]
    pub decay_all: bool,
    /// Updates between dev evaluations [published: 100].
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    /// Non-improving dev evaluations before stopping [published: 3].
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none, no-retriever-training, no-warmup, random-instances, cls-embeddings or no-retrieval.
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    /// Beam width of constrained decoding [published: 4].
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Longest verbalized input in tokens.
    #[arg(long, default_value_t = DEFAULT_MAX_INPUT_LEN)]
    pub max_input_len: usize,
}

impl TrainFlags {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            warmup_steps: self.warmup_steps,
            subset_size: self.subset_size,
            db_cap: self.db_cap,
            batch_size: self.batch_size,
            optim: AdamWConfig {
                lr_base: self.lr_base,
                lr_other: self.lr_other,
                weight_decay: self.weight_decay,
                decay_all: self.decay_all,
                ..Default::default()
            },
            tau: self.tau,
            eval_every: self.eval_every,
            patience: self.patience,
            max_steps: self.max_steps,
            seed: self.seed,
            ablation: self.ablation,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig { beam: self.beam, max_input_len: self.max_input_len, ..ModelConfig::for_vocab(vocab_size) }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    /// Directory written by `gen` (schema.json, train/dev/test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Neighbour counts to train with [published: 0,1,3,5,10,15,20].
    #[arg(long, value_delimiter = ',', default_values_t = etrag::evalx::SWEEP_KS)]
    pub ks: Vec<usize>,
    /// Trainings run at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Neighbour counts to summarise.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 10])]
    pub levels: Vec<usize>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Instance id from any split.
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Embed the instance as the database stores it, gold relation included,
    /// instead of as a query.
    #[arg(long)]
    pub as_stored: bool,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Seeds per configuration, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Configurations to run.
    #[arg(long, value_delimiter = ',', default_values_t = Ablation::ALL)]
    pub ablations: Vec<Ablation>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}
