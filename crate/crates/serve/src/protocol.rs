//! JSON messages exchanged over the websocket, one per text frame.
//!
//! Frame indices are 1-based on the wire. Tokens travel in their text form
//! (`C4_on`, `G:maj_hold`, `silence`, `eos`).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// Client opens a session.
    Hello {
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tempo: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    SessionCreated {
        session: String,
        model: String,
        tempo: f64,
        temperature: f64,
        seed: u64,
        /// Wall-clock duration of one frame; also the per-step latency budget.
        frame_ms: f64,
        max_frames: usize,
    },
    ChordFrame {
        session: String,
        frame: usize,
        token: String,
    },
    MelodyFrame {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        frame: usize,
        token: String,
    },
    /// From the client: transpose later melody frames. From the server: the
    /// acknowledgment, with the first affected frame and the running offset.
    Perturb {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        semitones: i32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<i32>,
    },
    /// Empty from the client (a request); carries the report from the server.
    Metrics {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<SessionMetrics>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<usize>,
        message: String,
    },
    Bye {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl Message {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn error(session: Option<&str>, frame: Option<usize>, message: impl Into<String>) -> Self {
        Message::Error {
            session: session.map(str::to_string),
            frame,
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    /// First melody frame the new offset applies to.
    pub frame: usize,
    pub semitones: i32,
    /// Total transposition in force from `frame` on.
    pub offset: i32,
}

/// Running metrics over the frames consumed so far. Ratios are `None` while
/// undefined (nothing to score yet).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub melody_frames: usize,
    pub chord_frames: usize,
    pub note_in_chord: Option<f64>,
    pub chord_silence: Option<f64>,
    pub perturbations: Vec<PerturbationRecord>,
    pub finished: bool,
    pub max_step_ms: f64,
    pub mean_step_ms: f64,
    /// Steps slower than one frame.
    pub deadline_misses: usize,
}
