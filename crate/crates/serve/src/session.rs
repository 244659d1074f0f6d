//! One live accompaniment stream: the chord for frame `t` is decided and
//! emitted before the melody for frame `t` is consumed.

use std::sync::Arc;
use std::time::{Instant, SystemTime};

use chordjam::eval::{auxiliary_counts, note_in_chord};
use chordjam::seqmodel::{check_temperature, sample_index, ChordModel, GenerateOptions, OnlineState};
use chordjam::symbolic::{ChordToken, MelodyToken};
use chordjam::{OnlineModel, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{PerturbationRecord, SessionMetrics};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("expected melody frame {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("session finished: {0}")]
    Finished(&'static str),
    #[error("invalid melody token at frame {frame}: {message}")]
    InvalidToken { frame: usize, message: String },
    #[error("transposition by {offset} moves frame {frame} outside the pitch range")]
    PitchOverflow { frame: usize, offset: i32 },
    #[error(transparent)]
    Model(#[from] chordjam::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionOptions {
    pub tempo: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl SessionOptions {
    /// Sixteenth-note frame length in milliseconds.
    pub fn frame_ms(&self) -> f64 {
        60_000.0 / self.tempo / 4.0
    }
}

pub struct Session {
    id: String,
    model_id: String,
    model: Arc<OnlineModel>,
    opts: SessionOptions,
    rng: ChaCha8Rng,
    state: OnlineState<Real>,
    /// Melody as received.
    raw: Vec<MelodyToken>,
    /// Melody as consumed by the model, after transposition.
    x: Vec<MelodyToken>,
    y: Vec<ChordToken>,
    offset: i32,
    perturbations: Vec<PerturbationRecord>,
    finished: Option<&'static str>,
    step_ms: Vec<f64>,
    pub created_at: SystemTime,
}

impl Session {
    /// Opens a session and decides chord frame 1.
    pub fn new(id: String, model_id: String, model: Arc<OnlineModel>, opts: SessionOptions) -> Result<(Self, ChordToken), SessionError> {
        check_temperature(opts.temperature)?;
        if !(opts.tempo.is_finite() && opts.tempo > 0.0) {
            return Err(chordjam::Error::Config(format!("tempo {} must be positive", opts.tempo)).into());
        }
        let state = model.start(1)?;
        let mut s = Session {
            id,
            model_id,
            model,
            opts,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            state,
            raw: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
            offset: 0,
            perturbations: Vec::new(),
            finished: None,
            step_ms: Vec::new(),
            created_at: SystemTime::now(),
        };
        let first = s.emit_chord()?;
        Ok((s, first))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn options(&self) -> SessionOptions {
        self.opts
    }

    pub fn max_frames(&self) -> usize {
        self.model.config.max_frames()
    }

    /// The melody frame the session expects next (1-based).
    pub fn expected_frame(&self) -> usize {
        self.x.len() + 1
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    pub fn chords(&self) -> &[ChordToken] {
        &self.y
    }

    pub fn melody(&self) -> &[MelodyToken] {
        &self.x
    }

    fn emit_chord(&mut self) -> Result<ChordToken, SessionError> {
        let lp = self.model.state_chord_log_probs(&self.state);
        let id = sample_index(lp.row(0), self.opts.temperature, &mut self.rng);
        let tok = ChordToken::from_id(id).expect("chord id in range");
        self.y.push(tok);
        if tok == ChordToken::Eos {
            self.finished = Some("eos");
        } else {
            self.model.push_chords(&mut self.state, &[tok])?;
        }
        Ok(tok)
    }

    /// Consumes melody frame `frame` and returns the chord for the next
    /// frame, or `None` once the session has reached its frame limit. A
    /// rejected frame leaves the session unchanged.
    pub fn step(&mut self, frame: usize, token: MelodyToken) -> Result<Option<ChordToken>, SessionError> {
        if let Some(why) = self.finished {
            return Err(SessionError::Finished(why));
        }
        if frame != self.expected_frame() {
            return Err(SessionError::OutOfOrder {
                expected: self.expected_frame(),
                got: frame,
            });
        }
        if let MelodyToken::NoteHold(p) = token {
            let continues = matches!(self.raw.last(), Some(MelodyToken::NoteOn(q) | MelodyToken::NoteHold(q)) if *q == p);
            if !continues {
                return Err(SessionError::InvalidToken {
                    frame,
                    message: format!("hold of pitch {p} does not continue the previous frame"),
                });
            }
        }
        let mut consumed = token.transposed(self.offset).ok_or(SessionError::PitchOverflow { frame, offset: self.offset })?;
        // A note held across a perturbation restarts at its new pitch.
        if let MelodyToken::NoteHold(p) = consumed {
            if !matches!(self.x.last(), Some(MelodyToken::NoteOn(q) | MelodyToken::NoteHold(q)) if *q == p) {
                consumed = MelodyToken::NoteOn(p);
            }
        }
        let start = Instant::now();
        self.model.push_melody(&mut self.state, &[consumed])?;
        self.raw.push(token);
        self.x.push(consumed);
        let out = if self.x.len() >= self.max_frames() {
            self.finished = Some("frame limit reached");
            None
        } else {
            Some(self.emit_chord()?)
        };
        self.step_ms.push(start.elapsed().as_secs_f64() * 1e3);
        Ok(out)
    }

    /// Transposes every later melody frame by `semitones` on top of any
    /// earlier perturbation. A zero shift changes nothing and is not logged.
    pub fn perturb(&mut self, semitones: i32) -> PerturbationRecord {
        let record = PerturbationRecord {
            frame: self.expected_frame(),
            semitones,
            offset: self.offset + semitones,
        };
        if semitones != 0 {
            self.offset += semitones;
            self.perturbations.push(record);
        }
        record
    }

    pub fn metrics(&self) -> SessionMetrics {
        let scored = &self.y[..self.x.len().min(self.y.len())];
        let nic = note_in_chord(&self.x[..scored.len()], scored).ok().and_then(|n| n.ratio());
        let aux = auxiliary_counts([(&self.x[..scored.len()], scored)]).ok();
        let max_step_ms = self.step_ms.iter().copied().fold(0.0, f64::max);
        let mean_step_ms = if self.step_ms.is_empty() {
            0.0
        } else {
            self.step_ms.iter().sum::<f64>() / self.step_ms.len() as f64
        };
        let budget = self.opts.frame_ms();
        SessionMetrics {
            melody_frames: self.x.len(),
            chord_frames: self.y.len(),
            note_in_chord: nic,
            chord_silence: aux.and_then(|a| a.chord_silence_ratio()),
            perturbations: self.perturbations.clone(),
            finished: self.is_finished(),
            max_step_ms,
            mean_step_ms,
            deadline_misses: self.step_ms.iter().filter(|ms| **ms > budget).count(),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            session: self.id.clone(),
            model: self.model_id.clone(),
            tempo: self.opts.tempo,
            temperature: self.opts.temperature,
            seed: self.opts.seed,
            received: self.raw.iter().map(ToString::to_string).collect(),
            melody: self.x.iter().map(ToString::to_string).collect(),
            chords: self.y.iter().map(ToString::to_string).collect(),
            perturbations: self.perturbations.clone(),
            events: Vec::new(),
        }
    }
}

/// Direction of a logged wire message, from the server's side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Received,
    Sent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireEvent {
    pub direction: Direction,
    pub message: crate::protocol::Message,
    /// For received melody frames: whether the session accepted it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

/// Everything needed to replay a session offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session: String,
    pub model: String,
    pub tempo: f64,
    pub temperature: f64,
    pub seed: u64,
    pub received: Vec<String>,
    /// Melody the model consumed, after perturbations.
    pub melody: Vec<String>,
    pub chords: Vec<String>,
    pub perturbations: Vec<PerturbationRecord>,
    pub events: Vec<WireEvent>,
}

impl Transcript {
    pub fn melody_tokens(&self) -> chordjam::Result<Vec<MelodyToken>> {
        self.melody.iter().map(|t| t.parse()).collect()
    }

    pub fn chord_tokens(&self) -> chordjam::Result<Vec<ChordToken>> {
        self.chords.iter().map(|t| t.parse()).collect()
    }

    /// Re-decodes the consumed melody with the batch decoder under the
    /// session's temperature and seed, returning one chord per melody frame.
    pub fn replay(&self, model: &OnlineModel) -> chordjam::Result<Vec<ChordToken>> {
        let x = self.melody_tokens()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let opts = GenerateOptions::sampled(self.temperature);
        Ok(model.generate(&[&x], &opts, &mut rng)?.remove(0))
    }

    /// Whether the replayed chords equal the streamed ones frame for frame.
    pub fn replays_exactly(&self, model: &OnlineModel) -> chordjam::Result<bool> {
        let replayed = self.replay(model)?;
        let streamed = self.chord_tokens()?;
        Ok(streamed.len() >= replayed.len() && streamed[..replayed.len()] == replayed[..])
    }

    /// Every accepted melody frame `t` was preceded on the wire by chord
    /// frame `t`; returns the offending frames.
    pub fn wire_order_violations(&self) -> Vec<usize> {
        use crate::protocol::Message;
        let mut sent_chords = std::collections::HashSet::new();
        let mut bad = Vec::new();
        for e in &self.events {
            match (&e.direction, &e.message) {
                (Direction::Sent, Message::ChordFrame { frame, .. }) => {
                    sent_chords.insert(*frame);
                }
                (Direction::Received, Message::MelodyFrame { frame, .. }) if e.accepted == Some(true) => {
                    if !sent_chords.contains(frame) {
                        bad.push(*frame);
                    }
                }
                _ => {}
            }
        }
        bad
    }
}
