use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chordjam::finetune::Preset;
use chordjam::reward::RewardKind;
use chordjam_cli::args::{Cli, Command};
use chordjam_cli::config::RunConfig;
use chordjam_cli::pipeline::{self, EvalRequest, EvalResult, FinetunePaths, MleKind};
use chordjam_serve::{AppState, ModelRegistry, ServerConfig};
use clap::Parser;
use serde::Serialize;

fn summary<S: Serialize>(path: Option<&Path>, value: &S) -> Result<()> {
    println!("{}", serde_json::json!({ "event": "summary", "record": value }));
    if let Some(p) = path {
        pipeline::write_json(p, value)?;
    }
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(a) => {
            a.apply(&mut cfg);
            let m = pipeline::gen_corpus(&cfg, &a.out)?;
            summary(None, &m)
        }
        Command::TrainMle(a) => {
            a.apply(&mut cfg);
            let kind = if a.offline { MleKind::Offline } else { MleKind::Online };
            let name = if a.offline { "offline" } else { "online" };
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}.ckpt")));
            let log = a.log.clone().unwrap_or_else(|| sibling(&out, "log.jsonl"));
            let s = pipeline::train_mle_model(kind, &cfg, &a.data, &out, Some(&log))?;
            summary(Some(&sibling(&out, "summary.json")), &s)
        }
        Command::TrainReward(a) => {
            a.apply(&mut cfg);
            let kind = RewardKind::from(a.kind);
            let out = a
                .out
                .clone()
                .unwrap_or_else(|| pipeline::reward_path(Path::new("runs"), kind, cfg.reward.scale));
            let log = a.log.clone().unwrap_or_else(|| sibling(&out, "log.jsonl"));
            let s = pipeline::train_reward(kind, &cfg, &a.data, &out, Some(&log))?;
            summary(Some(&sibling(&out, "summary.json")), &s)
        }
        Command::Finetune(a) => {
            let preset = Preset::from(a.preset);
            let mut ft = cfg.finetune_for(preset)?;
            a.apply(&mut ft);
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}.ckpt", preset.name())));
            let log = a.log.clone().unwrap_or_else(|| sibling(&out, "metrics.jsonl"));
            let paths = FinetunePaths {
                data: &a.data,
                policy: &a.policy,
                offline: &a.offline,
                rewards: &a.rewards,
                out: &out,
                log: Some(&log),
            };
            let (s, _) = pipeline::finetune(preset, &ft, &paths)?;
            summary(Some(&sibling(&out, "summary.json")), &s)
        }
        Command::Eval(a) => {
            a.apply(&mut cfg);
            let system = a
                .checkpoint
                .as_deref()
                .and_then(Path::file_stem)
                .map_or_else(|| "ground_truth".to_string(), |s| s.to_string_lossy().into_owned());
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs/eval").join(system));
            let req = EvalRequest {
                data: &a.data,
                split: &a.split,
                checkpoint: a.checkpoint.as_deref(),
                scenario: a.scenario.map(Into::into),
                out: &out,
            };
            match pipeline::eval(&cfg, &req)? {
                EvalResult::Report(r) => summary(None, &r),
                EvalResult::Scenario(r) => summary(None, &r),
            }
        }
        Command::AdaptBench(a) => {
            a.apply(&mut cfg);
            let reports = pipeline::adapt_bench(&cfg, &a.data, &a.split, &a.checkpoint, &a.out)?;
            summary(None, &reports)
        }
        Command::Serve(a) => {
            a.apply(&mut cfg);
            let registry = ModelRegistry::load_dir(&a.model_dir).with_context(|| format!("loading models from {}", a.model_dir.display()))?;
            if registry.is_empty() {
                anyhow::bail!("no online checkpoints in {}", a.model_dir.display());
            }
            let app = AppState::new(
                registry,
                ServerConfig {
                    default_tempo: cfg.serve.tempo,
                    default_temperature: cfg.serve.temperature,
                    transcript_dir: a.transcripts.clone(),
                },
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((cfg.serve.host.as_str(), cfg.serve.port)).await?;
                tracing::info!(address = %listener.local_addr()?, "serving");
                chordjam_serve::serve(listener, app).await?;
                Ok(())
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().json().with_writer(std::io::stdout).with_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
