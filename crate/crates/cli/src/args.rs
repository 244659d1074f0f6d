//! Command-line surface. Each optional flag overrides one field of the
//! loaded [`RunConfig`].

use std::path::PathBuf;

use chordjam::eval::Scenario;
use chordjam::finetune::{FinetuneConfig, KdSource, Preset};
use chordjam::reward::{RewardConfig, RewardKind};
use chordjam::seqmodel::TrainConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "chordjam", version, about = "Online chord accompaniment: corpus, training, finetuning, evaluation and live serving")]
pub struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its train/valid/test splits.
    GenCorpus(GenCorpusArgs),
    /// Train the online or offline model by maximum likelihood.
    TrainMle(TrainMleArgs),
    /// Train a contrastive or discriminative reward model.
    TrainReward(TrainRewardArgs),
    /// Finetune the online model with one of the preset objectives.
    #[command(after_help = preset_help())]
    Finetune(FinetuneArgs),
    /// Score a checkpoint (or the ground truth) on a split.
    Eval(EvalArgs),
    /// Run the primed, cold-start and perturbation benchmarks.
    AdaptBench(AdaptBenchArgs),
    /// Serve online models over a websocket.
    Serve(ServeArgs),
}

fn preset_help() -> String {
    let mut s = String::from("Presets:\n");
    for p in Preset::ALL {
        s.push_str(&format!("  {:<14}{}\n", p.name(), p.description()));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "kd")]
    Kd,
    #[value(name = "c")]
    C,
    #[value(name = "d")]
    D,
    #[value(name = "c+d")]
    CPlusD,
    #[value(name = "realchords")]
    Realchords,
    #[value(name = "realchords-m")]
    RealchordsM,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Kd => Preset::Kd,
            PresetArg::C => Preset::C,
            PresetArg::D => Preset::D,
            PresetArg::CPlusD => Preset::CPlusD,
            PresetArg::Realchords => Preset::Realchords,
            PresetArg::RealchordsM => Preset::RealchordsM,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Contrastive,
    Discriminative,
}

impl From<KindArg> for RewardKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Contrastive => RewardKind::Contrastive,
            KindArg::Discriminative => RewardKind::Discriminative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Primed,
    ColdStart,
    Perturb,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Primed => Scenario::PRIMED,
            ScenarioArg::ColdStart => Scenario::ColdStart,
            ScenarioArg::Perturb => Scenario::PERTURB,
        }
    }
}

fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.steps, self.steps);
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.warmup, self.warmup);
        set(&mut t.dropout, self.dropout);
        set(&mut t.seed, self.seed);
        set(&mut t.log_every, self.log_every);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Layers; for the offline model, both encoder and decoder.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_mult: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output directory for the split files and manifest.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub pieces: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

impl GenCorpusArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.corpus.num_pieces, self.pieces);
        set(&mut cfg.corpus.min_frames, self.min_frames);
        set(&mut cfg.corpus.max_frames, self.max_frames);
        set(&mut cfg.corpus.seed, self.seed);
        set(&mut cfg.split.seed, self.split_seed);
    }
}

#[derive(Debug, Args)]
pub struct TrainMleArgs {
    #[arg(long, required_unless_present = "offline", conflicts_with = "offline")]
    pub online: bool,
    #[arg(long)]
    pub offline: bool,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Checkpoint path [default: runs/online.ckpt or runs/offline.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines training log [default: next to the checkpoint].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

impl TrainMleArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.train.apply(&mut cfg.train);
        let m = &self.model;
        if self.offline {
            let o = &mut cfg.offline;
            set(&mut o.dim, m.dim);
            set(&mut o.encoder_layers, m.layers);
            set(&mut o.decoder_layers, m.layers);
            set(&mut o.heads, m.heads);
            set(&mut o.ff_mult, m.ff_mult);
        } else {
            let o = &mut cfg.online;
            set(&mut o.dim, m.dim);
            set(&mut o.layers, m.layers);
            set(&mut o.heads, m.heads);
            set(&mut o.ff_mult, m.ff_mult);
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainRewardArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Window length in frames.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Checkpoint path [default: runs/{kind}-{scale}.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

impl TrainRewardArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.train.apply(&mut cfg.reward_train);
        let r: &mut RewardConfig = &mut cfg.reward;
        set(&mut r.scale, self.scale);
        set(&mut r.embed_dim, self.embed_dim);
        set(&mut r.dim, self.model.dim);
        set(&mut r.layers, self.model.layers);
        set(&mut r.heads, self.model.heads);
        set(&mut r.ff_mult, self.model.ff_mult);
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub preset: PresetArg,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Online MLE checkpoint to start from.
    #[arg(long, default_value = "runs/online.ckpt")]
    pub policy: PathBuf,
    /// Offline teacher checkpoint.
    #[arg(long, default_value = "runs/offline.ckpt")]
    pub offline: PathBuf,
    /// Directory with `{kind}-{scale}.ckpt` reward models.
    #[arg(long, default_value = "runs")]
    pub rewards: PathBuf,
    /// Policy checkpoint [default: runs/{preset}.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics log [default: runs/{preset}.metrics.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub reward_coef: Option<f64>,
    /// policy, dataset, dataset+policy or dataset+policy+teacher.
    #[arg(long, value_parser = parse_kd_source)]
    pub kd_source: Option<KdSource>,
    /// Rollout sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub value_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_pieces: Option<usize>,
}

fn parse_kd_source(s: &str) -> Result<KdSource, String> {
    s.parse().map_err(|e: chordjam::Error| e.to_string())
}

impl FinetuneArgs {
    pub fn apply(&self, f: &mut FinetuneConfig) {
        set(&mut f.steps, self.steps);
        set(&mut f.beta, self.beta);
        set(&mut f.reward_coef, self.reward_coef);
        set(&mut f.kd_source, self.kd_source);
        set(&mut f.temperature, self.temperature);
        set(&mut f.policy_lr, self.lr);
        set(&mut f.value_lr, self.value_lr);
        set(&mut f.batch_size, self.batch_size);
        set(&mut f.max_frames, self.max_frames);
        set(&mut f.seed, self.seed);
        set(&mut f.eval_every, self.eval_every);
        set(&mut f.eval_pieces, self.eval_pieces);
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Online or offline checkpoint; without one the ground truth is scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Output directory [default: runs/eval/{system}].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling temperature for aggregate metrics.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Decoding temperature under --scenario.
    #[arg(long)]
    pub adapt_temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.temperature, self.temperature);
        set(&mut cfg.eval.adapt_temperature, self.adapt_temperature);
        set(&mut cfg.eval.seed, self.seed);
    }
}

#[derive(Debug, Args)]
pub struct AdaptBenchArgs {
    /// Checkpoints to compare; repeat the flag for several.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "runs/adapt")]
    pub out: PathBuf,
    /// Decoding temperature for the curves.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl AdaptBenchArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.adapt_temperature, self.temperature);
        set(&mut cfg.eval.seed, self.seed);
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Every online `*.ckpt` here is served under its file stem.
    #[arg(long, default_value = "runs")]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub tempo: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Directory for session transcripts.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
}

impl ServeArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.serve.host, self.host.clone());
        set(&mut cfg.serve.port, self.port);
        set(&mut cfg.serve.tempo, self.tempo);
        set(&mut cfg.serve.temperature, self.temperature);
    }
}
