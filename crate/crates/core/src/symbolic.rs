//! Frame-based token representation of melodies and chord progressions.
//!
//! One frame is a sixteenth note. A melody frame is a note onset, the
//! continuation of the previous note, or silence; a chord frame is a chord
//! onset, a chord continuation, silence, or the end-of-sequence marker.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest piece, in frames.
pub const MAX_FRAMES: usize = 256;
/// Frames per beat (a quarter note).
pub const FRAMES_PER_BEAT: usize = 4;

const NOTE_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

fn parse_note_name(s: &str) -> Option<(u8, &str)> {
    // Longest match first so "C#" wins over "C".
    let mut best: Option<(u8, usize)> = None;
    for (pc, name) in NOTE_NAMES.iter().enumerate() {
        if s.starts_with(name) && best.is_none_or(|(_, l)| name.len() > l) {
            best = Some((pc as u8, name.len()));
        }
    }
    best.map(|(pc, l)| (pc, &s[l..]))
}

/// A set of pitch classes stored as a 12-bit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PitchClassSet(u16);

impl PitchClassSet {
    pub fn from_classes<I: IntoIterator<Item = u8>>(classes: I) -> Self {
        let mut bits = 0u16;
        for pc in classes {
            bits |= 1 << (pc % 12);
        }
        PitchClassSet(bits)
    }

    pub fn contains(self, pitch_class: u8) -> bool {
        self.0 & (1 << (pitch_class % 12)) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = u8> {
        (0u8..12).filter(move |&pc| self.contains(pc))
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordQuality {
    Maj,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Maj7,
    Min7,
    Dom7,
}

impl ChordQuality {
    pub const ALL: [ChordQuality; 9] = [
        ChordQuality::Maj,
        ChordQuality::Min,
        ChordQuality::Dim,
        ChordQuality::Aug,
        ChordQuality::Sus2,
        ChordQuality::Sus4,
        ChordQuality::Maj7,
        ChordQuality::Min7,
        ChordQuality::Dom7,
    ];

    /// Intervals above the root, in semitones.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordQuality::Maj => &[0, 4, 7],
            ChordQuality::Min => &[0, 3, 7],
            ChordQuality::Dim => &[0, 3, 6],
            ChordQuality::Aug => &[0, 4, 8],
            ChordQuality::Sus2 => &[0, 2, 7],
            ChordQuality::Sus4 => &[0, 5, 7],
            ChordQuality::Maj7 => &[0, 4, 7, 11],
            ChordQuality::Min7 => &[0, 3, 7, 10],
            ChordQuality::Dom7 => &[0, 4, 7, 10],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ChordQuality::Maj => "maj",
            ChordQuality::Min => "min",
            ChordQuality::Dim => "dim",
            ChordQuality::Aug => "aug",
            ChordQuality::Sus2 => "sus2",
            ChordQuality::Sus4 => "sus4",
            ChordQuality::Maj7 => "maj7",
            ChordQuality::Min7 => "min7",
            ChordQuality::Dom7 => "dom7",
        }
    }
}

impl FromStr for ChordQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChordQuality::ALL
            .into_iter()
            .find(|q| q.suffix() == s)
            .ok_or_else(|| Error::UnknownQuality(s.to_string()))
    }
}

/// A chord: root pitch class and quality. The vocabulary is 12 roots × 9
/// qualities; `id` is a bijection onto `0..ChordSymbol::COUNT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChordSymbol {
    root: u8,
    quality: ChordQuality,
}

impl ChordSymbol {
    pub const COUNT: usize = 12 * 9;

    pub fn new(root: u8, quality: ChordQuality) -> Self {
        ChordSymbol {
            root: root % 12,
            quality,
        }
    }

    pub fn root(self) -> u8 {
        self.root
    }

    pub fn quality(self) -> ChordQuality {
        self.quality
    }

    pub fn id(self) -> usize {
        self.root as usize * ChordQuality::ALL.len() + self.quality.index()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        (id < Self::COUNT).then(|| {
            ChordSymbol::new(
                (id / ChordQuality::ALL.len()) as u8,
                ChordQuality::ALL[id % ChordQuality::ALL.len()],
            )
        })
    }

    pub fn pitch_classes(self) -> PitchClassSet {
        chord_pitch_classes(self)
    }

    pub fn transposed(self, semitones: i32) -> Self {
        ChordSymbol::new(
            (self.root as i32 + semitones).rem_euclid(12) as u8,
            self.quality,
        )
    }
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}",
            NOTE_NAMES[self.root as usize],
            self.quality.suffix()
        )
    }
}

impl FromStr for ChordSymbol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (root, rest) = parse_note_name(s).ok_or_else(|| Error::InvalidToken(s.to_string()))?;
        Ok(ChordSymbol::new(root, rest.parse()?))
    }
}

/// Pitch classes sounding in `chord`.
pub fn chord_pitch_classes(chord: ChordSymbol) -> PitchClassSet {
    PitchClassSet::from_classes(chord.quality.intervals().iter().map(|i| chord.root + i))
}

pub fn pitch_class_name(pitch_class: u8) -> &'static str {
    NOTE_NAMES[(pitch_class % 12) as usize]
}

/// Name of a MIDI pitch using the C4 = 60 convention.
pub fn pitch_name(pitch: u8) -> String {
    format!(
        "{}{}",
        NOTE_NAMES[(pitch % 12) as usize],
        pitch as i32 / 12 - 1
    )
}

pub fn parse_pitch(s: &str) -> Result<u8> {
    let (pc, rest) = parse_note_name(s).ok_or_else(|| Error::InvalidToken(s.to_string()))?;
    let octave: i32 = rest
        .parse()
        .map_err(|_| Error::InvalidToken(s.to_string()))?;
    let pitch = (octave + 1) * 12 + pc as i32;
    if !(0..=127).contains(&pitch) {
        return Err(Error::PitchOutOfRange(pitch));
    }
    Ok(pitch as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MelodyToken {
    NoteOn(u8),
    NoteHold(u8),
    Silence,
}

impl MelodyToken {
    pub const VOCAB: usize = 128 * 2 + 1;

    pub fn pitch(self) -> Option<u8> {
        match self {
            MelodyToken::NoteOn(p) | MelodyToken::NoteHold(p) => Some(p),
            MelodyToken::Silence => None,
        }
    }

    pub fn is_silence(self) -> bool {
        self == MelodyToken::Silence
    }

    pub fn is_onset(self) -> bool {
        matches!(self, MelodyToken::NoteOn(_))
    }

    pub fn id(self) -> usize {
        match self {
            MelodyToken::NoteOn(p) => p as usize,
            MelodyToken::NoteHold(p) => 128 + p as usize,
            MelodyToken::Silence => 256,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0..128 => Some(MelodyToken::NoteOn(id as u8)),
            128..256 => Some(MelodyToken::NoteHold((id - 128) as u8)),
            256 => Some(MelodyToken::Silence),
            _ => None,
        }
    }

    /// Same token shifted by `semitones`, or `None` on pitch overflow.
    pub fn transposed(self, semitones: i32) -> Option<Self> {
        let shift = |p: u8| {
            let q = p as i32 + semitones;
            (0..=127).contains(&q).then_some(q as u8)
        };
        Some(match self {
            MelodyToken::NoteOn(p) => MelodyToken::NoteOn(shift(p)?),
            MelodyToken::NoteHold(p) => MelodyToken::NoteHold(shift(p)?),
            MelodyToken::Silence => MelodyToken::Silence,
        })
    }
}

impl fmt::Display for MelodyToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MelodyToken::NoteOn(p) => write!(f, "{}_on", pitch_name(*p)),
            MelodyToken::NoteHold(p) => write!(f, "{}_hold", pitch_name(*p)),
            MelodyToken::Silence => f.write_str("silence"),
        }
    }
}

impl FromStr for MelodyToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "silence" {
            return Ok(MelodyToken::Silence);
        }
        if let Some(p) = s.strip_suffix("_on") {
            return Ok(MelodyToken::NoteOn(parse_pitch(p)?));
        }
        if let Some(p) = s.strip_suffix("_hold") {
            return Ok(MelodyToken::NoteHold(parse_pitch(p)?));
        }
        Err(Error::InvalidToken(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChordToken {
    On(ChordSymbol),
    Hold(ChordSymbol),
    Silence,
    Eos,
}

impl ChordToken {
    pub const VOCAB: usize = ChordSymbol::COUNT * 2 + 2;
    pub const SILENCE_ID: usize = ChordSymbol::COUNT * 2;
    pub const EOS_ID: usize = ChordSymbol::COUNT * 2 + 1;

    pub fn chord(self) -> Option<ChordSymbol> {
        match self {
            ChordToken::On(c) | ChordToken::Hold(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_onset(self) -> bool {
        matches!(self, ChordToken::On(_))
    }

    pub fn id(self) -> usize {
        match self {
            ChordToken::On(c) => c.id(),
            ChordToken::Hold(c) => ChordSymbol::COUNT + c.id(),
            ChordToken::Silence => Self::SILENCE_ID,
            ChordToken::Eos => Self::EOS_ID,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        const N: usize = ChordSymbol::COUNT;
        match id {
            _ if id < N => ChordSymbol::from_id(id).map(ChordToken::On),
            _ if id < 2 * N => ChordSymbol::from_id(id - N).map(ChordToken::Hold),
            Self::SILENCE_ID => Some(ChordToken::Silence),
            Self::EOS_ID => Some(ChordToken::Eos),
            _ => None,
        }
    }

    pub fn transposed(self, semitones: i32) -> Self {
        match self {
            ChordToken::On(c) => ChordToken::On(c.transposed(semitones)),
            ChordToken::Hold(c) => ChordToken::Hold(c.transposed(semitones)),
            other => other,
        }
    }

    /// Whether this token may directly follow `prev` (None at frame 0).
    pub fn may_follow(self, prev: Option<ChordToken>) -> bool {
        match self {
            ChordToken::Hold(c) => matches!(prev, Some(ChordToken::On(p) | ChordToken::Hold(p)) if p == c),
            _ => !matches!(prev, Some(ChordToken::Eos)),
        }
    }
}

impl fmt::Display for ChordToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordToken::On(c) => write!(f, "{c}_on"),
            ChordToken::Hold(c) => write!(f, "{c}_hold"),
            ChordToken::Silence => f.write_str("silence"),
            ChordToken::Eos => f.write_str("eos"),
        }
    }
}

impl FromStr for ChordToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silence" => Ok(ChordToken::Silence),
            "eos" => Ok(ChordToken::Eos),
            _ => {
                if let Some(c) = s.strip_suffix("_on") {
                    Ok(ChordToken::On(c.parse()?))
                } else if let Some(c) = s.strip_suffix("_hold") {
                    Ok(ChordToken::Hold(c.parse()?))
                } else {
                    Err(Error::InvalidToken(s.to_string()))
                }
            }
        }
    }
}

/// Checks melody hold-continuity; returns the first offending frame.
pub fn validate_melody(melody: &[MelodyToken]) -> Result<()> {
    for (t, tok) in melody.iter().enumerate() {
        if let MelodyToken::NoteHold(p) = tok {
            let ok = t > 0 && matches!(melody[t - 1], MelodyToken::NoteOn(q) | MelodyToken::NoteHold(q) if q == *p);
            if !ok {
                return Err(Error::InvalidPiece(format!(
                    "melody hold at frame {t} does not continue pitch {p}"
                )));
            }
        }
    }
    Ok(())
}

/// Checks chord hold-continuity and EOS placement.
pub fn validate_chords(chords: &[ChordToken]) -> Result<()> {
    for (t, tok) in chords.iter().enumerate() {
        let prev = t.checked_sub(1).map(|p| chords[p]);
        if !tok.may_follow(prev) {
            return Err(Error::InvalidPiece(format!(
                "chord token {tok} at frame {t} cannot follow {}",
                prev.map_or("start".to_string(), |p| p.to_string())
            )));
        }
        if *tok == ChordToken::Eos && t + 1 != chords.len() {
            return Err(Error::InvalidPiece(format!(
                "eos at frame {t} is not the final token"
            )));
        }
    }
    Ok(())
}

/// A contiguous run of one chord: onset frame, length in frames, chord.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChordSegment {
    pub start: usize,
    pub len: usize,
    pub chord: ChordSymbol,
}

/// On+hold blocks of a chord track.
pub fn chord_segments(chords: &[ChordToken]) -> Vec<ChordSegment> {
    let mut out: Vec<ChordSegment> = Vec::new();
    for (t, tok) in chords.iter().enumerate() {
        match tok {
            ChordToken::On(c) => out.push(ChordSegment {
                start: t,
                len: 1,
                chord: *c,
            }),
            ChordToken::Hold(c) => match out.last_mut() {
                Some(seg) if seg.chord == *c && seg.start + seg.len == t => seg.len += 1,
                // Orphan hold (only in unvalidated input): treat as an onset.
                _ => out.push(ChordSegment {
                    start: t,
                    len: 1,
                    chord: *c,
                }),
            },
            _ => {}
        }
    }
    out
}

pub type PieceMeta = BTreeMap<String, serde_json::Value>;

/// Aligned melody and chord tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    melody: Vec<MelodyToken>,
    chords: Vec<ChordToken>,
    pub meta: PieceMeta,
}

impl Piece {
    pub fn new(melody: Vec<MelodyToken>, chords: Vec<ChordToken>) -> Result<Self> {
        Self::with_meta(melody, chords, PieceMeta::new())
    }

    pub fn with_meta(
        melody: Vec<MelodyToken>,
        chords: Vec<ChordToken>,
        meta: PieceMeta,
    ) -> Result<Self> {
        if melody.len() != chords.len() {
            return Err(Error::LengthMismatch {
                melody: melody.len(),
                chords: chords.len(),
            });
        }
        if melody.len() > MAX_FRAMES {
            return Err(Error::InvalidPiece(format!(
                "{} frames exceeds the {MAX_FRAMES}-frame limit",
                melody.len()
            )));
        }
        validate_melody(&melody)?;
        validate_chords(&chords)?;
        Ok(Piece {
            melody,
            chords,
            meta,
        })
    }

    pub fn melody(&self) -> &[MelodyToken] {
        &self.melody
    }

    pub fn chords(&self) -> &[ChordToken] {
        &self.chords
    }

    pub fn len(&self) -> usize {
        self.melody.len()
    }

    pub fn is_empty(&self) -> bool {
        self.melody.is_empty()
    }

    pub fn into_parts(self) -> (Vec<MelodyToken>, Vec<ChordToken>, PieceMeta) {
        (self.melody, self.chords, self.meta)
    }

    /// Frames `start..end`, with leading holds rewritten as onsets so the
    /// window is a valid piece on its own.
    pub fn window(&self, start: usize, end: usize) -> Piece {
        assert!(start <= end && end <= self.len(), "window out of range");
        let mut melody = self.melody[start..end].to_vec();
        let mut chords = self.chords[start..end].to_vec();
        if let Some(MelodyToken::NoteHold(p)) = melody.first().copied() {
            melody[0] = MelodyToken::NoteOn(p);
        }
        if let Some(ChordToken::Hold(c)) = chords.first().copied() {
            chords[0] = ChordToken::On(c);
        }
        // A trailing eos only stays final if the window reaches the end.
        if let Some(pos) = chords.iter().position(|c| *c == ChordToken::Eos) {
            if pos + 1 != chords.len() {
                chords[pos] = ChordToken::Silence;
            }
        }
        Piece {
            melody,
            chords,
            meta: self.meta.clone(),
        }
    }
}

/// A note event for [`tokenize_melody`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoteEvent {
    pub pitch: i32,
    pub onset: usize,
    pub duration: usize,
}

/// A chord event for [`tokenize_chords`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChordEvent {
    pub chord: ChordSymbol,
    pub onset: usize,
    pub duration: usize,
}

fn check_events(spans: &[(usize, usize)], total: usize) -> Result<()> {
    for (i, &(onset, duration)) in spans.iter().enumerate() {
        if duration == 0 || onset + duration > total {
            return Err(Error::EventOutOfBounds {
                onset,
                duration,
                total,
            });
        }
        if i > 0 {
            let (prev_onset, prev_len) = spans[i - 1];
            if prev_onset + prev_len > onset {
                return Err(Error::Overlap {
                    first: prev_onset,
                    first_len: prev_len,
                    second: onset,
                });
            }
        }
    }
    Ok(())
}

/// Frame tokens for sorted, non-overlapping notes.
pub fn tokenize_melody(notes: &[NoteEvent], total_frames: usize) -> Result<Vec<MelodyToken>> {
    if let Some(n) = notes.iter().find(|n| !(0..=127).contains(&n.pitch)) {
        return Err(Error::PitchOutOfRange(n.pitch));
    }
    let spans: Vec<_> = notes.iter().map(|n| (n.onset, n.duration)).collect();
    check_events(&spans, total_frames)?;
    let mut out = vec![MelodyToken::Silence; total_frames];
    for n in notes {
        let p = n.pitch as u8;
        out[n.onset] = MelodyToken::NoteOn(p);
        for tok in &mut out[n.onset + 1..n.onset + n.duration] {
            *tok = MelodyToken::NoteHold(p);
        }
    }
    Ok(out)
}

/// Frame tokens for sorted, non-overlapping chords.
pub fn tokenize_chords(chords: &[ChordEvent], total_frames: usize) -> Result<Vec<ChordToken>> {
    let spans: Vec<_> = chords.iter().map(|c| (c.onset, c.duration)).collect();
    check_events(&spans, total_frames)?;
    let mut out = vec![ChordToken::Silence; total_frames];
    for c in chords {
        out[c.onset] = ChordToken::On(c.chord);
        for tok in &mut out[c.onset + 1..c.onset + c.duration] {
            *tok = ChordToken::Hold(c.chord);
        }
    }
    Ok(out)
}

/// Joint vocabulary of the interleaved representation: chord ids first,
/// melody ids offset by [`ChordToken::VOCAB`].
pub mod joint {
    use super::{ChordToken, MelodyToken};

    pub const MELODY_OFFSET: usize = ChordToken::VOCAB;
    pub const SIZE: usize = ChordToken::VOCAB + MelodyToken::VOCAB;

    pub fn chord_id(tok: ChordToken) -> usize {
        tok.id()
    }

    pub fn melody_id(tok: MelodyToken) -> usize {
        MELODY_OFFSET + tok.id()
    }

    pub fn is_chord(id: usize) -> bool {
        id < MELODY_OFFSET
    }
}

/// Flat `y1, x1, y2, x2, ...` token ids over the joint vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterleavedSequence {
    tokens: Vec<usize>,
}

impl InterleavedSequence {
    pub fn from_ids(tokens: Vec<usize>) -> Self {
        InterleavedSequence { tokens }
    }

    pub fn ids(&self) -> &[usize] {
        &self.tokens
    }
}

pub fn interleave(piece: &Piece) -> InterleavedSequence {
    let tokens = piece
        .chords
        .iter()
        .zip(&piece.melody)
        .flat_map(|(c, m)| [joint::chord_id(*c), joint::melody_id(*m)])
        .collect();
    InterleavedSequence { tokens }
}

pub fn deinterleave(seq: &InterleavedSequence) -> Result<Piece> {
    let ids = seq.ids();
    if ids.len() % 2 != 0 {
        return Err(Error::Interleave(format!("odd length {}", ids.len())));
    }
    let mut melody = Vec::with_capacity(ids.len() / 2);
    let mut chords = Vec::with_capacity(ids.len() / 2);
    for (i, pair) in ids.chunks(2).enumerate() {
        let chord = Some(pair[0])
            .filter(|&id| joint::is_chord(id))
            .and_then(ChordToken::from_id)
            .ok_or_else(|| Error::Interleave(format!("position {} is not a chord token", 2 * i)))?;
        let note = pair[1]
            .checked_sub(joint::MELODY_OFFSET)
            .and_then(MelodyToken::from_id)
            .ok_or_else(|| {
                Error::Interleave(format!("position {} is not a melody token", 2 * i + 1))
            })?;
        chords.push(chord);
        melody.push(note);
    }
    Piece::new(melody, chords)
}

/// Shifts melody pitches by `semitones` and chord roots by the same amount
/// mod 12.
pub fn transpose(piece: &Piece, semitones: i32) -> Result<Piece> {
    let melody = piece
        .melody
        .iter()
        .enumerate()
        .map(|(frame, m)| m.transposed(semitones).ok_or(Error::TransposeOverflow { frame }))
        .collect::<Result<Vec<_>>>()?;
    let chords = piece.chords.iter().map(|c| c.transposed(semitones)).collect();
    Ok(Piece {
        melody,
        chords,
        meta: piece.meta.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct PieceRecord {
    melody: Vec<String>,
    chords: Vec<String>,
    #[serde(default)]
    meta: PieceMeta,
}

/// One JSON line for `piece` (no trailing newline).
pub fn serialize(piece: &Piece) -> String {
    let record = PieceRecord {
        melody: piece.melody.iter().map(ToString::to_string).collect(),
        chords: piece.chords.iter().map(ToString::to_string).collect(),
        meta: piece.meta.clone(),
    };
    serde_json::to_string(&record).expect("piece record serializes")
}

/// Parses one record; `line` is only used in error messages.
pub fn parse_record(text: &str, line: usize) -> Result<Piece> {
    let err = |field: &str, message: String| Error::Parse {
        line,
        field: field.to_string(),
        message,
    };
    let record: PieceRecord =
        serde_json::from_str(text).map_err(|e| err("record", e.to_string()))?;
    let melody = record
        .melody
        .iter()
        .enumerate()
        .map(|(i, s)| s.parse().map_err(|e: Error| err(&format!("melody[{i}]"), e.to_string())))
        .collect::<Result<Vec<MelodyToken>>>()?;
    let chords = record
        .chords
        .iter()
        .enumerate()
        .map(|(i, s)| s.parse().map_err(|e: Error| err(&format!("chords[{i}]"), e.to_string())))
        .collect::<Result<Vec<ChordToken>>>()?;
    Piece::with_meta(melody, chords, record.meta).map_err(|e| err("piece", e.to_string()))
}

pub fn parse(text: &str) -> Result<Piece> {
    parse_record(text, 1)
}

/// Serializes a corpus as JSON lines.
pub fn write_corpus<W: std::io::Write>(mut out: W, pieces: &[Piece]) -> Result<()> {
    for p in pieces {
        writeln!(out, "{}", serialize(p))?;
    }
    Ok(())
}

/// Reads a JSON-lines corpus, skipping blank lines.
pub fn read_corpus<R: std::io::BufRead>(input: R) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pieces.push(parse_record(&line, i + 1)?);
    }
    Ok(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(root: u8, q: ChordQuality) -> ChordSymbol {
        ChordSymbol::new(root, q)
    }

    pub(crate) fn data_example() -> Piece {
        let notes: Vec<NoteEvent> = [60, 67, 69, 65]
            .iter()
            .enumerate()
            .map(|(i, &p)| NoteEvent {
                pitch: p,
                onset: 4 * i,
                duration: 4,
            })
            .collect();
        let chords: Vec<ChordEvent> = [
            c(0, ChordQuality::Maj),
            c(7, ChordQuality::Maj),
            c(9, ChordQuality::Min),
            c(5, ChordQuality::Maj),
        ]
        .iter()
        .enumerate()
        .map(|(i, &chord)| ChordEvent {
            chord,
            onset: 4 * i,
            duration: 4,
        })
        .collect();
        Piece::new(
            tokenize_melody(&notes, 16).unwrap(),
            tokenize_chords(&chords, 16).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn melody_tokens_match_worked_example() {
        let piece = data_example();
        let names: Vec<String> = piece.melody().iter().map(ToString::to_string).collect();
        let expected = [
            "C4_on", "C4_hold", "C4_hold", "C4_hold", "G4_on", "G4_hold", "G4_hold", "G4_hold",
            "A4_on", "A4_hold", "A4_hold", "A4_hold", "F4_on", "F4_hold", "F4_hold", "F4_hold",
        ];
        assert_eq!(names, expected);
        let chords: Vec<String> = piece.chords().iter().map(ToString::to_string).collect();
        assert_eq!(chords[0], "Cmaj_on");
        assert_eq!(chords[3], "Cmaj_hold");
        assert_eq!(chords[4], "Gmaj_on");
        assert_eq!(chords[8], "Amin_on");
        assert_eq!(chords[15], "Fmaj_hold");
    }

    #[test]
    fn tokenize_edge_cases() {
        assert_eq!(tokenize_melody(&[], 4).unwrap(), vec![MelodyToken::Silence; 4]);
        let one = NoteEvent {
            pitch: 60,
            onset: 2,
            duration: 1,
        };
        assert_eq!(
            tokenize_melody(&[one], 4).unwrap(),
            vec![
                MelodyToken::Silence,
                MelodyToken::Silence,
                MelodyToken::NoteOn(60),
                MelodyToken::Silence
            ]
        );
        assert_eq!(tokenize_chords(&[], 8).unwrap(), vec![ChordToken::Silence; 8]);
        let whole = ChordEvent {
            chord: c(0, ChordQuality::Maj),
            onset: 0,
            duration: 16,
        };
        let toks = tokenize_chords(&[whole], 16).unwrap();
        assert_eq!(toks[0], ChordToken::On(whole.chord));
        assert!(toks[1..].iter().all(|t| *t == ChordToken::Hold(whole.chord)));
    }

    #[test]
    fn tokenize_rejects_overlap_and_bad_pitch() {
        let a = NoteEvent {
            pitch: 60,
            onset: 0,
            duration: 3,
        };
        let b = NoteEvent {
            pitch: 62,
            onset: 2,
            duration: 2,
        };
        match tokenize_melody(&[a, b], 8) {
            Err(Error::Overlap { first, second, .. }) => assert_eq!((first, second), (0, 2)),
            other => panic!("expected overlap, got {other:?}"),
        }
        let high = NoteEvent {
            pitch: 128,
            onset: 0,
            duration: 1,
        };
        assert!(matches!(
            tokenize_melody(&[high], 2),
            Err(Error::PitchOutOfRange(128))
        ));
        let long = NoteEvent {
            pitch: 60,
            onset: 3,
            duration: 2,
        };
        assert!(matches!(
            tokenize_melody(&[long], 4),
            Err(Error::EventOutOfBounds { .. })
        ));
    }

    #[test]
    fn chord_pitch_class_examples() {
        let set = |ch: ChordSymbol| ch.pitch_classes().iter().collect::<Vec<_>>();
        assert_eq!(set(c(0, ChordQuality::Maj)), vec![0, 4, 7]);
        assert_eq!(set(c(5, ChordQuality::Min)), vec![0, 5, 8]);
        assert_eq!(set(c(7, ChordQuality::Dom7)), vec![2, 5, 7, 11]);
        for id in 0..ChordSymbol::COUNT {
            let ch = ChordSymbol::from_id(id).unwrap();
            assert_eq!(ch.id(), id);
            let n = ch.pitch_classes().len();
            assert!(n == 3 || n == 4);
        }
        assert!(matches!(
            "Cmaj9".parse::<ChordSymbol>(),
            Err(Error::UnknownQuality(_))
        ));
    }

    #[test]
    fn interleave_definition() {
        let piece = data_example().window(0, 2);
        let seq = interleave(&piece);
        let ids = seq.ids();
        assert_eq!(ids[0], joint::chord_id(piece.chords()[0]));
        assert_eq!(ids[1], joint::melody_id(piece.melody()[0]));
        assert_eq!(ids[2], joint::chord_id(piece.chords()[1]));
        assert_eq!(ids[3], joint::melody_id(piece.melody()[1]));
        assert_eq!(deinterleave(&seq).unwrap(), piece);
        assert!(matches!(
            deinterleave(&InterleavedSequence::from_ids(vec![0, 300, 1])),
            Err(Error::Interleave(_))
        ));
    }

    #[test]
    fn transpose_examples() {
        let piece = data_example();
        let up = transpose(&piece, 6).unwrap();
        assert_eq!(up.melody()[0], MelodyToken::NoteOn(66));
        assert_eq!(up.chords()[0], ChordToken::On(c(6, ChordQuality::Maj)));
        assert_eq!(transpose(&piece, 0).unwrap(), piece);
        assert_eq!(transpose(&up, -6).unwrap(), piece);
        let top = Piece::new(vec![MelodyToken::Silence, MelodyToken::NoteOn(125)], vec![ChordToken::Silence; 2]).unwrap();
        assert!(matches!(transpose(&top, 3), Err(Error::TransposeOverflow { frame: 1 })));
    }

    #[test]
    fn record_round_trip_and_errors() {
        let piece = data_example();
        let line = serialize(&piece);
        assert_eq!(parse(&line).unwrap(), piece);
        let silent = Piece::new(vec![MelodyToken::Silence; 8], vec![ChordToken::Silence; 8]).unwrap();
        assert_eq!(parse(&serialize(&silent)).unwrap(), silent);

        let bad = r#"{"melody":["C4_on","D4_hold"],"chords":["silence","silence"]}"#;
        match parse_record(bad, 7) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 7);
                assert_eq!(field, "piece");
            }
            other => panic!("{other:?}"),
        }
        let bad_tok = r#"{"melody":["C4_on","Q4_hold"],"chords":["silence","silence"]}"#;
        match parse_record(bad_tok, 3) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "melody[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eos_must_be_final() {
        let ch = c(0, ChordQuality::Maj);
        assert!(validate_chords(&[ChordToken::On(ch), ChordToken::Eos]).is_ok());
        assert!(validate_chords(&[ChordToken::Eos, ChordToken::On(ch)]).is_err());
        assert!(validate_chords(&[ChordToken::Hold(ch)]).is_err());
    }

    #[test]
    fn window_repairs_leading_holds() {
        let piece = data_example();
        let w = piece.window(2, 10);
        assert_eq!(w.melody()[0], MelodyToken::NoteOn(60));
        assert_eq!(w.chords()[0], ChordToken::On(c(0, ChordQuality::Maj)));
        assert_eq!(w.len(), 8);
    }
}
