//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trains the desk-scale pipeline from scratch (about an hour on one core).
//! Set `ACCEPTANCE_CACHE_DIR` to keep artifacts between runs; stages found
//! there are reused and report the runtime recorded when they were built.
//! The process exits nonzero on a failed criterion only when
//! `ACCEPTANCE_STRICT` is set.

#[path = "../../core/tests/support/oracle.rs"]
#[allow(dead_code)]
mod oracle;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use chordjam::checkpoint::Persist;
use chordjam::eval::{EvalReport, Scenario};
use chordjam::finetune::{
    early_eos_penalty, kl_divergence, repetition_penalty, silence_penalty, total_reward, Penalties, PenaltyCoefficients, Preset,
};
use chordjam::gradcheck::toy_nll_gradcheck;
use chordjam::reward::RewardKind;
use chordjam::seqmodel::causality_check;
use chordjam::symbolic::{ChordQuality, ChordSymbol, ChordToken, MelodyToken, Piece};
use chordjam::OnlineModel;
use chordjam_cli::config::RunConfig;
use chordjam_cli::pipeline::{
    self, EvalRequest, EvalResult, FinetunePaths, FinetuneSummary, MleKind, MleSummary, RewardSummary, ScenarioReport,
};
use chordjam_serve::{AppState, Connection, Message, ModelRegistry, ServerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Desk-scale run: 2,000 pieces of 128 frames, dim-64 models.
const DESK: &str = r#"
[online]
dim = 64
[offline]
dim = 64
[train]
steps = 400
lr = 1e-3
batch_size = 32
log_every = 100
val_pieces = 64
[reward]
dim = 64
[reward_train]
steps = 600
lr = 3e-4
batch_size = 32
log_every = 100
[finetune]
eval_every = 100
"#;

const KD_STEPS: usize = 500;
const REALCHORDS_STEPS: usize = 1500;

struct Report {
    failures: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        self.total += 1;
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        std::io::stdout().flush().ok();
    }

    fn error(&mut self, name: &str, e: &anyhow::Error) {
        self.line(name, false, format!("error: {e:#}"));
    }
}

/// Artifact directory with per-stage result caching.
struct Stages {
    dir: PathBuf,
    timings: BTreeMap<String, f64>,
}

impl Stages {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        let timings = std::fs::read_to_string(dir.join("timings.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Ok(Stages { dir, timings })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `f` unless its result is cached; returns the result and the
    /// seconds it took when it was built.
    fn run<T: Serialize + DeserializeOwned>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<(T, f64)> {
        let cached = self.dir.join(format!("{name}.result.json"));
        if let (Ok(text), Some(secs)) = (std::fs::read_to_string(&cached), self.timings.get(name)) {
            if let Ok(v) = serde_json::from_str(&text) {
                eprintln!("acceptance: reusing stage {name}");
                return Ok((v, *secs));
            }
        }
        eprintln!("acceptance: running stage {name}");
        let started = Instant::now();
        let v = f(&self.dir)?;
        let secs = started.elapsed().as_secs_f64();
        std::fs::write(&cached, serde_json::to_string_pretty(&v)?)?;
        self.timings.insert(name.to_string(), secs);
        std::fs::write(self.dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)?)?;
        Ok((v, secs))
    }
}

fn metric_oracles(r: &mut Report) {
    let started = Instant::now();
    let bad = oracle::run_metric_oracles(2024, 200, 32);
    let secs = started.elapsed().as_secs_f64();
    r.line(
        "metric-oracles",
        bad.is_empty() && secs < 60.0,
        format!("200 instances <= 32 frames, {} mismatches, {secs:.2} s (limit 60 s){}", bad.len(), bad.first().map_or(String::new(), |b| format!("; first: {b}"))),
    );
}

fn penalty_examples(r: &mut Report) {
    let c = ChordSymbol::new(0, ChordQuality::Maj);
    let g = ChordSymbol::new(7, ChordQuality::Maj);
    let held = |s: ChordSymbol, n: usize| {
        let mut v = vec![ChordToken::On(s)];
        v.extend(std::iter::repeat_n(ChordToken::Hold(s), n - 1));
        v
    };
    let notes = |n: usize| -> Vec<MelodyToken> {
        (0..n).map(|t| if t % 4 == 0 { MelodyToken::NoteOn(64) } else { MelodyToken::NoteHold(64) }).collect()
    };
    let x = notes(64);
    let mut two = held(c, 20);
    two.extend(held(g, 20));
    let mut early = held(c, 64);
    early[..8].fill(ChordToken::Silence);
    let mut gaps = held(c, 64);
    gaps[20..30].fill(ChordToken::Silence);
    gaps[30] = ChordToken::On(c);
    let mut eos50 = held(c, 49);
    eos50.push(ChordToken::Eos);
    let mut eos_last = held(c, 63);
    eos_last.push(ChordToken::Eos);
    let cases = [
        ("repetition, held 32", repetition_penalty(&held(c, 32)), 0.0),
        ("repetition, held 40", repetition_penalty(&held(c, 40)), -8.0),
        ("repetition, two chords of 20", repetition_penalty(&two), 0.0),
        ("silence, all chorded", silence_penalty(&x, &held(c, 64)), 0.0),
        ("silence, frames 0-7 only", silence_penalty(&x, &early), 0.0),
        ("silence, 10 of 64 after frame 8", silence_penalty(&x, &gaps), -10.0),
        ("early eos, none", early_eos_penalty(&x, &held(c, 64)), 0.0),
        ("early eos, at frame 50 of 64", early_eos_penalty(&x, &eos50), -14.0),
        ("early eos, at final frame", early_eos_penalty(&x, &eos_last), 0.0),
        ("total, repetition -8 with coefficient 2", total_reward(0.0, &Penalties::of(&notes(40), &held(c, 40)), 1.0, &PenaltyCoefficients::new(2.0, 0.0, 0.0)), -16.0),
    ];
    let wrong: Vec<String> = cases.iter().filter(|(_, got, want)| got != want).map(|(n, got, want)| format!("{n}: {got} != {want}")).collect();
    r.line("penalty-examples", wrong.is_empty(), format!("{} of {} exact{}", cases.len() - wrong.len(), cases.len(), if wrong.is_empty() { String::new() } else { format!("; {}", wrong.join("; ")) }));
}

fn kl_and_gradients(r: &mut Report) {
    let p = ndarray::arr1(&[0.8f64.ln(), 0.2f64.ln()]);
    let q = ndarray::arr1(&[0.5f64.ln(), 0.5f64.ln()]);
    let want = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
    let kl_err = (kl_divergence(p.view(), q.view()) - want).abs();
    match toy_nll_gradcheck(0) {
        Ok(g) => r.line(
            "kl-and-gradients",
            kl_err <= 1e-6 && g.max_rel_error < 1e-3,
            format!(
                "two-token KL error {kl_err:.1e} (limit 1e-6); NLL gradient max relative error {:.2e} over {} entries (limit 1e-3)",
                g.max_rel_error, g.entries
            ),
        ),
        Err(e) => r.error("kl-and-gradients", &e.into()),
    }
}

fn mle(r: &mut Report, online: &(MleSummary, f64), offline: &(MleSummary, f64)) {
    let (on, off) = (&online.0, &offline.0);
    let secs = online.1 + offline.1;
    let pass = on.nll_ratio <= 0.7
        && off.nll_ratio <= 0.7
        && on.steps <= 2000
        && off.steps <= 2000
        && off.validation.chord_nll < on.validation.chord_nll
        && secs < 900.0;
    r.line(
        "mle-sanity",
        pass,
        format!(
            "{} steps; validation NLL / uniform: online {:.3}, offline {:.3} (limit 0.7); chord NLL offline {:.4} < online {:.4}; {secs:.0} s (limit 900 s)",
            on.steps, on.nll_ratio, off.nll_ratio, off.validation.chord_nll, on.validation.chord_nll
        ),
    );
}

fn causality(r: &mut Report, online: &OnlineModel, test: &[Piece]) {
    let melodies: Vec<&[MelodyToken]> = test.iter().take(100).map(Piece::melody).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    match causality_check(online, &melodies, &mut rng) {
        Ok(c) => r.line(
            "online-causality",
            c.trials == 100 && c.breaks == 0,
            format!("{} melodies, {} changed chords at or before the edited frame (tolerance 0), {} changed after it", c.trials, c.breaks, c.later_changes),
        ),
        Err(e) => r.error("online-causality", &e.into()),
    }
}

fn rewards(r: &mut Report, c: &RewardSummary, d: &RewardSummary) {
    let hits = c.retrieval_hits.unwrap_or(0);
    let acc = d.balanced_accuracy.unwrap_or(0.0);
    r.line(
        "reward-quality",
        c.pool == 64 && hits >= 10 && acc >= 0.65,
        format!("contrastive R@1 {hits}/{} (limit 10/64); discriminative balanced accuracy {acc:.3} (limit 0.65)", c.pool),
    );
    let rho = |s: &RewardSummary| s.degradation_spearman.unwrap_or(f64::NAN);
    let fmt = |s: &RewardSummary| s.degradation.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ");
    r.line(
        "reward-degradation",
        rho(c) <= -0.9 && rho(d) <= -0.9,
        format!("Spearman rho contrastive {:.2} [{}], discriminative {:.2} [{}] (limit -0.9)", rho(c), fmt(c), rho(d), fmt(d)),
    );
}

fn service_replay(r: &mut Report, online: &OnlineModel, test: &[Piece]) {
    let mut registry = ModelRegistry::new();
    registry.insert("online", online.clone(), None, serde_json::Value::Null);
    let app = AppState::new(registry, ServerConfig::default());
    let model = Arc::new(online.clone());
    let (mut sessions, mut replayed, mut violations, mut frames) = (0, 0, 0, 0);
    let mut problems = Vec::new();
    for (i, piece) in test.iter().take(12).enumerate() {
        let mut conn = Connection::new(app.clone());
        let temperature = if i % 2 == 0 { 0.0 } else { 1.0 };
        conn.handle(Message::Hello {
            model: "online".into(),
            tempo: None,
            temperature: Some(temperature),
            seed: Some(100 + i as u64),
        });
        for (t, m) in piece.melody().iter().enumerate() {
            if i % 3 == 0 && t == 64 {
                conn.handle(Message::Perturb {
                    session: None,
                    semitones: 6,
                    frame: None,
                    offset: None,
                });
            }
            conn.handle(Message::MelodyFrame {
                session: None,
                frame: t + 1,
                token: m.to_string(),
            });
            frames += 1;
        }
        conn.handle(Message::Bye {
            session: None,
            reason: None,
        });
        let Some(tr) = conn.transcript() else {
            problems.push(format!("session {i}: no transcript"));
            continue;
        };
        sessions += 1;
        match tr.replays_exactly(&model) {
            Ok(true) => replayed += 1,
            Ok(false) => problems.push(format!("session {i} diverged on replay")),
            Err(e) => problems.push(format!("session {i}: {e}")),
        }
        violations += tr.wire_order_violations().len();
    }
    r.line(
        "service-replay",
        sessions == 12 && replayed == sessions && violations == 0,
        format!(
            "{replayed}/{sessions} transcripts ({frames} frames, greedy and sampled, 4 with a tritone push) replay exactly; {violations} wire-order violations{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    );
}

fn nic(e: &EvalReport) -> f64 {
    e.note_in_chord.unwrap_or(f64::NAN)
}

fn main() {
    let mut r = Report { failures: 0, total: 0 };
    metric_oracles(&mut r);
    penalty_examples(&mut r);
    kl_and_gradients(&mut r);
    if let Err(e) = pipeline_criteria(&mut r) {
        r.error("pipeline", &e);
    }
    println!("acceptance: {}/{} criteria pass", r.total - r.failures, r.total);
    if r.failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn pipeline_criteria(r: &mut Report) -> Result<()> {
    let _tmp;
    let dir = match std::env::var_os("ACCEPTANCE_CACHE_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            _tmp = tempfile::tempdir()?;
            _tmp.path().to_path_buf()
        }
    };
    let mut st = Stages::new(dir)?;
    let cfg = RunConfig::parse(DESK)?;
    let data = st.path("data");
    st.run("corpus", |d| pipeline::gen_corpus(&cfg, &d.join("data")))?;
    let online = st.run("online", |d| pipeline::train_mle_model(MleKind::Online, &cfg, &data, &d.join("online.ckpt"), Some(&d.join("online.log.jsonl"))))?;
    let offline = st.run("offline", |d| pipeline::train_mle_model(MleKind::Offline, &cfg, &data, &d.join("offline.ckpt"), Some(&d.join("offline.log.jsonl"))))?;
    mle(r, &online, &offline);

    let test = pipeline::read_split(&data, "test")?;
    let online_model = OnlineModel::load(st.path("online.ckpt")).context("loading online model")?;
    causality(r, &online_model, &test);
    service_replay(r, &online_model, &test);

    let mut reward = |kind: RewardKind| {
        let mut c = cfg.clone();
        c.reward.scale = chordjam::symbolic::MAX_FRAMES;
        let name = format!("{}-{}", kind.name(), c.reward.scale);
        st.run(&name, |d| pipeline::train_reward(kind, &c, &data, &pipeline::reward_path(d, kind, c.reward.scale), Some(&d.join(format!("{name}.log.jsonl")))))
    };
    let c = reward(RewardKind::Contrastive)?;
    let d = reward(RewardKind::Discriminative)?;
    rewards(r, &c.0, &d.0);

    let mut finetune = |preset: Preset, steps: usize| -> Result<(FinetuneSummary, f64)> {
        let mut ft = cfg.finetune_for(preset)?;
        ft.steps = steps;
        let dir = st.dir.clone();
        let (out, log) = (dir.join(format!("{}.ckpt", preset.name())), dir.join(format!("{}.metrics.jsonl", preset.name())));
        st.run(preset.name(), |_| {
            let paths = FinetunePaths {
                data: &data,
                policy: &dir.join("online.ckpt"),
                offline: &dir.join("offline.ckpt"),
                rewards: &dir,
                out: &out,
                log: Some(&log),
            };
            Ok(pipeline::finetune(preset, &ft, &paths)?.0)
        })
    };
    let kd = finetune(Preset::Kd, KD_STEPS)?;
    let rc = finetune(Preset::Realchords, REALCHORDS_STEPS)?;

    let mut test_eval = |name: &str| -> Result<EvalReport> {
        let ckpt = st.path(&format!("{name}.ckpt"));
        let out = st.path(&format!("eval/{name}"));
        let (rep, _) = st.run(&format!("eval-{name}"), |_| {
            match pipeline::eval(&cfg, &EvalRequest { data: &data, split: "test", checkpoint: Some(&ckpt), scenario: None, out: &out })? {
                EvalResult::Report(rep) => Ok(rep),
                EvalResult::Scenario(_) => unreachable!("no scenario requested"),
            }
        })?;
        Ok(rep)
    };
    let e_online = test_eval("online")?;
    let e_kd = test_eval("kd")?;
    let e_rc = test_eval("realchords")?;

    let (first, last) = (&kd.0.first, &kd.0.last);
    let (kl0, kl1) = (first.kl.unwrap_or(f64::NAN), last.kl.unwrap_or(f64::NAN));
    let drop = 1.0 - kl1 / kl0;
    r.line(
        "kd-only",
        kd.0.config.steps == KD_STEPS && drop >= 0.3 && nic(&e_kd) > nic(&e_online),
        format!(
            "{} steps, beta {} with reward coefficient {}: validation KL {kl0:.2} -> {kl1:.2} ({:.0}% drop, limit 30%); test note-in-chord {:.2}% -> {:.2}%",
            kd.0.config.steps,
            kd.0.config.beta,
            kd.0.config.reward_coef,
            100.0 * drop,
            100.0 * nic(&e_online),
            100.0 * nic(&e_kd)
        ),
    );

    let gain = 100.0 * (nic(&e_rc) - nic(&e_online));
    let emd_ratio = e_rc.onset_interval_emd_x1000 / e_online.onset_interval_emd_x1000;
    r.line(
        "realchords",
        rc.0.config.steps <= 5000 && gain >= 5.0 && emd_ratio <= 1.5 && rc.1 < 3600.0,
        format!(
            "{} steps in {:.0} s (limit 3600 s): test note-in-chord {:.2}% -> {:.2}% ({gain:+.2} points, limit +5); onset-interval EMD x1000 {:.2} -> {:.2} (x{emd_ratio:.2}, limit x1.5)",
            rc.0.config.steps,
            rc.1,
            100.0 * nic(&e_online),
            100.0 * nic(&e_rc),
            e_online.onset_interval_emd_x1000,
            e_rc.onset_interval_emd_x1000
        ),
    );

    let mut push = |name: &str| -> Result<ScenarioReport> {
        let ckpt = st.path(&format!("{name}.ckpt"));
        let out = st.path(&format!("push/{name}"));
        Ok(st
            .run(&format!("push-{name}"), |_| {
                match pipeline::eval(&cfg, &EvalRequest { data: &data, split: "test", checkpoint: Some(&ckpt), scenario: Some(Scenario::PERTURB), out: &out })? {
                    EvalResult::Scenario(s) => Ok(s),
                    EvalResult::Report(_) => unreachable!("scenario requested"),
                }
            })?
            .0)
    };
    let p_rc = push("realchords")?;
    let p_mle = push("online")?;
    match (&p_rc.recovery, &p_mle.recovery) {
        (Some(a), Some(b)) => {
            let remainder = b.beats_after;
            r.line(
                "push-test",
                a.recovered_at.is_some() && b.beats_above == 0,
                format!(
                    "tritone at beat 17 on {} pieces: finetuned pre-mean {:.3}, reaches 80% ({:.3}) at beat {}; online MLE pre-mean {:.3}, {} of {remainder} later beats at or above its 80% ({:.3})",
                    p_rc.pieces,
                    a.pre_mean,
                    a.threshold,
                    a.recovered_at.map_or("never (within 8)".to_string(), |b| b.to_string()),
                    b.pre_mean,
                    b.beats_above,
                    b.threshold
                ),
            );
        }
        _ => r.line("push-test", false, "no pieces long enough for the perturbation scenario"),
    }
    Ok(())
}
