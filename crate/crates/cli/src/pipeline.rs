//! The stages behind each command, callable without a process boundary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chordjam::checkpoint::{Checkpoint, Persist};
use chordjam::corpus::{generate_corpus, pooled_chord_silence, pooled_note_in_chord, split, Splits};
use chordjam::eval::{adaptation_benchmark, evaluate_model, recovery, score_tracks, EvalReport, Recovery, Scenario};
use chordjam::finetune::{EvalRecord, FinetuneConfig, FinetuneReport, Finetuner, Preset, RewardSource, TeacherKind};
use chordjam::reward::{
    balanced_accuracy, degradation_curve, mismatched_chords, retrieval_hits, spearman, EnsembleMember, RewardKind, RewardModel,
};
use chordjam::seqmodel::{evaluate_nll, train_mle, ChordModel, MleModel, NllReport, Pair, TrainConfig, TrainRecord};
use chordjam::symbolic::{read_corpus, write_corpus, Piece};
use chordjam::{
    AnyReward, ContrastiveModel, DiscriminativeModel, OfflineModel, OnlineModel, Real, RewardEnsemble, ValueModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];
pub const DEGRADATION_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Held-out pool size for contrastive retrieval.
pub const RETRIEVAL_POOL: usize = 64;
/// Push-test reading: recovery within this many beats to this fraction of
/// the pre-perturbation mean.
pub const RECOVERY_WINDOW: usize = 8;
pub const RECOVERY_LEVEL: f64 = 0.8;

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Line-per-record JSON writer that also echoes each record to stdout.
pub struct JsonLines {
    out: Option<BufWriter<File>>,
}

impl JsonLines {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                create_parent(p)?;
                Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
            }
            None => None,
        };
        Ok(JsonLines { out })
    }

    pub fn push<S: Serialize>(&mut self, event: &str, record: &S) -> Result<()> {
        let value = serde_json::to_value(record)?;
        let line = value.to_string();
        println!("{}", serde_json::json!({ "event": event, "record": value }));
        if let Some(out) = &mut self.out {
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some(mut out) = self.out {
            out.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pieces: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub note_in_chord: f64,
    pub chord_silence: f64,
}

pub fn split_path(data: &Path, name: &str) -> PathBuf {
    data.join(format!("{name}.jsonl"))
}

/// Generates the synthetic corpus, splits it and writes one JSON-lines file
/// per split plus `manifest.json`.
pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<CorpusManifest> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let s = split(&corpus, &cfg.split)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, pieces) in SPLIT_NAMES.iter().zip([&s.train, &s.validation, &s.test]) {
        let path = split_path(out, name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_corpus(&mut w, pieces)?;
        w.flush()?;
    }
    let manifest = CorpusManifest {
        pieces: corpus.len(),
        train: s.train.len(),
        valid: s.validation.len(),
        test: s.test.len(),
        min_frames: cfg.corpus.min_frames,
        max_frames: cfg.corpus.max_frames,
        seed: cfg.corpus.seed,
        note_in_chord: pooled_note_in_chord(&corpus),
        chord_silence: pooled_chord_silence(&corpus),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_split(data: &Path, name: &str) -> Result<Vec<Piece>> {
    let name = match name {
        "validation" | "val" => "valid",
        n => n,
    };
    if !SPLIT_NAMES.contains(&name) {
        bail!("unknown split `{name}` (train, valid, test)");
    }
    let path = split_path(data, name);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_corpus(BufReader::new(f))?)
}

pub fn read_splits(data: &Path) -> Result<Splits> {
    Ok(Splits {
        train: read_split(data, "train")?,
        validation: read_split(data, "valid")?,
        test: read_split(data, "test")?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MleKind {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleSummary {
    pub kind: MleKind,
    pub steps: usize,
    pub parameters: usize,
    /// Over the whole validation split.
    pub validation: NllReport,
    /// `validation.nll / validation.uniform_nll`.
    pub nll_ratio: f64,
    /// Wall clock; not written to artifacts, which must be reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

fn fit<M: MleModel<Real> + Persist>(
    mut model: M,
    kind: MleKind,
    splits: &Splits,
    cfg: &TrainConfig,
    out: &Path,
    log: Option<&Path>,
) -> Result<MleSummary> {
    let started = std::time::Instant::now();
    let mut lines = JsonLines::create(log)?;
    let mut failed = None;
    train_mle(&mut model, &splits.train, &splits.validation, cfg, |r: &TrainRecord| {
        if let Err(e) = lines.push("train_mle", r) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    lines.finish()?;
    let validation = evaluate_nll(&model, &splits.validation, 32)?;
    create_parent(out)?;
    model.save(out)?;
    Ok(MleSummary {
        kind,
        steps: cfg.steps,
        parameters: model.store().num_scalars(),
        nll_ratio: validation.nll / validation.uniform_nll,
        validation,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains the online or offline model by maximum likelihood and saves it.
pub fn train_mle_model(kind: MleKind, cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<MleSummary> {
    let splits = read_splits(data)?;
    let seed = cfg.train.seed;
    match kind {
        MleKind::Online => fit(OnlineModel::new(cfg.online.clone(), seed)?, kind, &splits, &cfg.train, out, log),
        MleKind::Offline => fit(OfflineModel::new(cfg.offline.clone(), seed)?, kind, &splits, &cfg.train, out, log),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub kind: RewardKind,
    pub scale: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Contrastive: correct top-1 retrievals in a pool of `pool` test pairs.
    pub retrieval_hits: Option<usize>,
    pub pool: usize,
    /// Discriminative: real test pairs against mismatched ones.
    pub balanced_accuracy: Option<f64>,
    /// Mean score at each of the degradation fractions.
    pub degradation: Vec<f64>,
    pub degradation_spearman: Option<f64>,
    /// Wall clock; not written to artifacts, which must be reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

pub fn reward_path(dir: &Path, kind: RewardKind, scale: usize) -> PathBuf {
    dir.join(format!("{}-{scale}.ckpt", kind.name()))
}

/// Held-out quality and degradation of a trained reward model on `test`.
pub fn reward_quality(model: &AnyReward, test: &[Piece], seed: u64) -> Result<RewardSummary> {
    // Cropped to a common length: the similarity matrix needs aligned pairs.
    let n = test.iter().take(RETRIEVAL_POOL).map(Piece::len).min().unwrap_or(0);
    let pool = test
        .iter()
        .take(RETRIEVAL_POOL)
        .map(|p| Piece::new(p.melody()[..n].to_vec(), p.chords()[..n].to_vec()))
        .collect::<chordjam::Result<Vec<_>>>()?;
    let pairs: Vec<Pair<'_>> = pool.iter().map(|p| (p.melody(), p.chords())).collect();
    let (hits, acc) = match model {
        AnyReward::Contrastive(m) => (Some(retrieval_hits(&m.similarity_matrix(&pairs)?)), None),
        AnyReward::Discriminative(m) => {
            let positive = m.score(&pairs)?;
            let wrong = mismatched_chords(&pool, pool.len() / 2);
            let neg_pairs: Vec<Pair<'_>> = pool.iter().zip(&wrong).map(|(p, y)| (p.melody(), y.as_slice())).collect();
            let negative = m.score(&neg_pairs)?;
            (None, Some(balanced_accuracy(&positive, &negative)))
        }
    };
    let degradation = degradation_curve(model, &pool, &DEGRADATION_FRACTIONS, seed)?;
    Ok(RewardSummary {
        kind: model.kind(),
        scale: model.scale(),
        steps: 0,
        final_loss: None,
        retrieval_hits: hits,
        pool: pool.len(),
        balanced_accuracy: acc,
        degradation_spearman: spearman(&DEGRADATION_FRACTIONS, &degradation),
        degradation,
        seconds: 0.0,
    })
}

pub fn train_reward(kind: RewardKind, cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<RewardSummary> {
    let started = std::time::Instant::now();
    let splits = read_splits(data)?;
    let mut lines = JsonLines::create(log)?;
    let mut failed = None;
    let on_log = |r: &TrainRecord| {
        if let Err(e) = lines.push("train_reward", r) {
            failed.get_or_insert(e);
        }
    };
    let seed = cfg.reward_train.seed;
    let (model, records): (AnyReward, Vec<TrainRecord>) = match kind {
        RewardKind::Contrastive => {
            let mut m = ContrastiveModel::new(cfg.reward.clone(), seed)?;
            let r = m.train(&splits.train, &cfg.reward_train, on_log)?;
            (m.into(), r)
        }
        RewardKind::Discriminative => {
            let mut m = DiscriminativeModel::new(cfg.reward.clone(), seed)?;
            let r = m.train(&splits.train, &cfg.reward_train, on_log)?;
            (m.into(), r)
        }
    };
    if let Some(e) = failed {
        return Err(e);
    }
    lines.finish()?;
    create_parent(out)?;
    model.save(out)?;
    let mut summary = reward_quality(&model, &splits.test, seed)?;
    summary.steps = cfg.reward_train.steps;
    summary.final_loss = records.last().map(|r| r.train_nll);
    summary.seconds = started.elapsed().as_secs_f64();
    Ok(summary)
}

/// Any chord model checkpoint, dispatched on its kind.
pub enum LoadedModel {
    Online(OnlineModel),
    Offline(OfflineModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        match ckpt.header.kind.as_str() {
            "online" => Ok(LoadedModel::Online(OnlineModel::from_checkpoint(&ckpt)?)),
            "offline" => Ok(LoadedModel::Offline(OfflineModel::from_checkpoint(&ckpt)?)),
            other => bail!("{} holds a `{other}` model, not a chord model", path.display()),
        }
    }

    pub fn as_chord_model(&self) -> &dyn ChordModel<Real> {
        match self {
            LoadedModel::Online(m) => m,
            LoadedModel::Offline(m) => m,
        }
    }
}

pub struct FinetunePaths<'a> {
    pub data: &'a Path,
    /// Online MLE checkpoint the policy starts from.
    pub policy: &'a Path,
    /// Offline teacher, for presets that distill from it.
    pub offline: &'a Path,
    /// Directory holding `{kind}-{scale}.ckpt` reward models.
    pub rewards: &'a Path,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub preset: Preset,
    pub config: FinetuneConfig,
    pub first: EvalRecord,
    pub last: EvalRecord,
    /// Wall clock; not written to artifacts, which must be reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

/// Finetunes the online policy under `config`, saving the policy as an
/// online checkpoint and its value model next to it.
pub fn finetune(preset: Preset, config: &FinetuneConfig, paths: &FinetunePaths<'_>) -> Result<(FinetuneSummary, FinetuneReport)> {
    let started = std::time::Instant::now();
    let splits = read_splits(paths.data)?;
    let policy = OnlineModel::load(paths.policy).with_context(|| format!("loading policy {}", paths.policy.display()))?;
    let value = ValueModel::from_online(&policy, config.seed)?;
    let teacher: Option<LoadedModel> = if config.beta > 0.0 {
        Some(match config.teacher {
            TeacherKind::OnlineMle => LoadedModel::Online(policy.clone()),
            TeacherKind::Offline => LoadedModel::load(paths.offline)?,
        })
    } else {
        None
    };
    let ensemble = if config.reward_coef > 0.0 {
        let members = preset
            .rewards()
            .into_iter()
            .map(|(kind, scale)| {
                let path = reward_path(paths.rewards, kind, scale);
                let m = AnyReward::load(&path).with_context(|| format!("loading reward model {}", path.display()))?;
                Ok(EnsembleMember::new(m))
            })
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            bail!("preset `{}` has no reward models but reward_coef > 0", preset.name());
        }
        Some(RewardEnsemble::new(members)?)
    } else {
        None
    };
    let mut ft = Finetuner::new(
        policy,
        value,
        teacher.as_ref().map(LoadedModel::as_chord_model),
        ensemble.as_ref().map(|e| e as &dyn RewardSource),
        config.clone(),
    )?;
    let mut lines = JsonLines::create(paths.log)?;
    let mut failed = None;
    let report = ft.run(&splits.train, &splits.validation, |r| {
        if let Err(e) = lines.push("finetune", r) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    lines.finish()?;
    create_parent(paths.out)?;
    ft.policy().save(paths.out)?;
    ft.value().save(paths.out.with_extension("value.ckpt"))?;
    let summary = FinetuneSummary {
        preset,
        config: config.clone(),
        first: report.evals.first().cloned().expect("run logs the initial evaluation"),
        last: report.evals.last().cloned().expect("run logs the initial evaluation"),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((summary, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub system: String,
    pub split: String,
    pub scenario: Scenario,
    pub pieces: usize,
    pub skipped: usize,
    /// Perturbation scenario only.
    pub recovery: Option<Recovery>,
}

fn csv_write(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub struct EvalRequest<'a> {
    pub data: &'a Path,
    pub split: &'a str,
    /// Scores the ground-truth chords when absent.
    pub checkpoint: Option<&'a Path>,
    pub scenario: Option<Scenario>,
    pub out: &'a Path,
}

pub enum EvalResult {
    Report(EvalReport),
    Scenario(ScenarioReport),
}

fn system_name(checkpoint: Option<&Path>) -> String {
    checkpoint
        .and_then(|p| p.file_stem())
        .map_or_else(|| "ground_truth".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Writes `report.jsonl` and either the two histogram CSVs or, under a
/// scenario, `curve.csv`.
pub fn eval(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<EvalResult> {
    let pieces = read_split(req.data, req.split)?;
    let system = system_name(req.checkpoint);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let model = req.checkpoint.map(LoadedModel::load).transpose()?;
    let mut lines = JsonLines::create(Some(&req.out.join("report.jsonl")))?;
    let result = match (req.scenario, &model) {
        (Some(_), None) => bail!("--scenario needs --checkpoint"),
        (Some(scenario), Some(m)) => {
            let r = scenario_report(m.as_chord_model(), &system, req.split, &pieces, scenario, cfg.eval.adapt_temperature, &mut rng)?;
            csv_write(&req.out.join("curve.csv"), &r.1)?;
            lines.push("eval", &r.0)?;
            EvalResult::Scenario(r.0)
        }
        (None, model) => {
            let out = match model {
                Some(m) => evaluate_model(m.as_chord_model(), &system, req.split, &pieces, cfg.eval.temperature, &mut rng)?.0,
                None => {
                    let pairs: Vec<Pair<'_>> = pieces.iter().map(|p| (p.melody(), p.chords())).collect();
                    score_tracks(&system, req.split, &pairs, &pieces)?
                }
            };
            csv_write(&req.out.join("onset_interval_histogram.csv"), &out.onset_histogram.to_csv())?;
            csv_write(&req.out.join("chord_length_histogram.csv"), &out.chord_length_histogram.to_csv())?;
            lines.push("eval", &out.report)?;
            EvalResult::Report(out.report)
        }
    };
    lines.finish()?;
    Ok(result)
}

/// Runs one adaptation scenario; returns the report and the curve CSV.
pub fn scenario_report(
    model: &dyn ChordModel<Real>,
    system: &str,
    split: &str,
    pieces: &[Piece],
    scenario: Scenario,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ScenarioReport, String)> {
    let res = adaptation_benchmark(model, pieces, scenario, temperature, rng)?;
    let rec = match scenario {
        Scenario::Perturb { beat, .. } => recovery(&res.curve, beat, RECOVERY_WINDOW, RECOVERY_LEVEL),
        _ => None,
    };
    let report = ScenarioReport {
        system: system.to_string(),
        split: split.to_string(),
        scenario,
        pieces: res.melodies.len(),
        skipped: res.skipped,
        recovery: rec,
    };
    Ok((report, res.curve.to_csv()))
}

/// Every scenario for every checkpoint: `{out}/{system}_{scenario}.csv`
/// plus one report line each in `{out}/adapt.jsonl`.
pub fn adapt_bench(cfg: &RunConfig, data: &Path, split_name: &str, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<ScenarioReport>> {
    let pieces = read_split(data, split_name)?;
    let mut lines = JsonLines::create(Some(&out.join("adapt.jsonl")))?;
    let mut reports = Vec::new();
    for path in checkpoints {
        let model = LoadedModel::load(path)?;
        let system = system_name(Some(path));
        for scenario in [Scenario::PRIMED, Scenario::ColdStart, Scenario::PERTURB] {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            let (report, curve) =
                scenario_report(model.as_chord_model(), &system, split_name, &pieces, scenario, cfg.eval.adapt_temperature, &mut rng)?;
            csv_write(&out.join(format!("{system}_{}.csv", scenario.name())), &curve)?;
            lines.push("adapt", &report)?;
            reports.push(report);
        }
    }
    lines.finish()?;
    Ok(reports)
}
