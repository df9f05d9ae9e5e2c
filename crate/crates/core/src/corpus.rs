//! Note metadata, SOL-style filename grammar, and corpus manifests.
//!
//! Filenames follow `Instr[+Mute]-technique-pitch-dynamics[-variant]`, e.g.
//! `Vn-ord-G4-mf-4c` or `TpC+S-flatt-G4-mf`. The technique field may itself
//! contain hyphens (`trill-maj2`), so parsing anchors on the rightmost token
//! from the dynamics vocabulary and works leftwards from there.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{write_wav, Waveform};

pub const MANIFEST_VERSION: u32 = 1;
/// Name of the manifest written next to a generated corpus.
pub const MANIFEST_FILE: &str = "manifest.json";

const INSTRUMENTS: &[(&str, &str)] = &[
    ("Acc", "Accordion"),
    ("ASax", "Alto saxophone"),
    ("BTb", "Bass tuba"),
    ("Bn", "Bassoon"),
    ("Cb", "Contrabass"),
    ("ClBb", "Clarinet in B-flat"),
    ("Fl", "Flute"),
    ("Gtr", "Guitar"),
    ("Hn", "French horn"),
    ("Hp", "Harp"),
    ("Ob", "Oboe"),
    ("TpC", "Trumpet in C"),
    ("TTbn", "Tenor trombone"),
    ("Va", "Viola"),
    ("Vc", "Cello"),
    ("Vn", "Violin"),
    // pseudo-instruments of the synthetic corpus
    ("SynA", "Synthetic A (full harmonic)"),
    ("SynB", "Synthetic B (odd harmonic)"),
];

const MUTES: &[(&str, &str)] = &[
    ("S", "Straight mute"),
    ("H", "Harmon mute"),
    ("C", "Cup mute"),
    ("W", "Wah-wah mute"),
    ("Sord", "Sordina"),
];

fn lookup(table: &'static [(&'static str, &'static str)], code: &str) -> Option<&'static str> {
    table.iter().find(|(c, _)| *c == code).map(|(_, name)| *name)
}

/// A coded entity (instrument or mute) with its display name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coded {
    pub code: String,
    pub name: String,
    /// False when the code was not found in the built-in table.
    pub known: bool,
}

impl Coded {
    fn from_table(table: &'static [(&'static str, &'static str)], code: &str) -> Self {
        match lookup(table, code) {
            Some(name) => Coded {
                code: code.to_string(),
                name: name.to_string(),
                known: true,
            },
            None => Coded {
                code: code.to_string(),
                name: code.to_string(),
                known: false,
            },
        }
    }

    pub fn instrument(code: &str) -> Self {
        Self::from_table(INSTRUMENTS, code)
    }

    pub fn mute(code: &str) -> Self {
        Self::from_table(MUTES, code)
    }
}

/// Dynamics markings, ordered from softest to loudest; compound markings last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Ppp,
    Pp,
    P,
    Mp,
    Mf,
    F,
    Ff,
    Fff,
    Fp,
    Cresc,
    Decresc,
}

impl Dynamics {
    pub const ALL: [Dynamics; 11] = [
        Dynamics::Ppp,
        Dynamics::Pp,
        Dynamics::P,
        Dynamics::Mp,
        Dynamics::Mf,
        Dynamics::F,
        Dynamics::Ff,
        Dynamics::Fff,
        Dynamics::Fp,
        Dynamics::Cresc,
        Dynamics::Decresc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dynamics::Ppp => "ppp",
            Dynamics::Pp => "pp",
            Dynamics::P => "p",
            Dynamics::Mp => "mp",
            Dynamics::Mf => "mf",
            Dynamics::F => "f",
            Dynamics::Ff => "ff",
            Dynamics::Fff => "fff",
            Dynamics::Fp => "fp",
            Dynamics::Cresc => "cresc",
            Dynamics::Decresc => "decresc",
        }
    }
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dynamics {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Dynamics::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or(())
    }
}

/// A pitch as a MIDI note number. Rendered with sharps in scientific notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pitch {
    pub midi: u8,
}

const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

impl Pitch {
    pub fn from_midi(midi: u8) -> Option<Self> {
        (midi <= 127).then_some(Pitch { midi })
    }

    /// Parse scientific pitch notation such as `G4`, `C#5`, `Bb2`.
    pub fn parse(text: &str) -> Option<Self> {
        let mut chars = text.chars();
        let letter = chars.next()?;
        let pc: i32 = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return None,
        };
        let rest = chars.as_str();
        let digits_at = rest.find(|c: char| c.is_ascii_digit())?;
        let (accidentals, octave) = rest.split_at(digits_at);
        let mut shift = 0;
        for c in accidentals.chars() {
            match c {
                '#' => shift += 1,
                'b' => shift -= 1,
                _ => return None,
            }
        }
        if accidentals.len() > 2 || octave.is_empty() || !octave.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        let octave: i32 = octave.parse().ok()?;
        let midi = (octave + 1) * 12 + pc + shift;
        (0..=127).contains(&midi).then(|| Pitch { midi: midi as u8 })
    }

    pub fn name(&self) -> String {
        let octave = self.midi as i32 / 12 - 1;
        format!("{}{}", PITCH_NAMES[self.midi as usize % 12], octave)
    }

    pub fn frequency(&self) -> f64 {
        440.0 * 2f64.powf((self.midi as f64 - 69.0) / 12.0)
    }

    /// Nearest MIDI note to a frequency in Hz.
    pub fn nearest(freq: f64) -> Option<Self> {
        if !(freq > 0.0) {
            return None;
        }
        let midi = (69.0 + 12.0 * (freq / 440.0).log2()).round();
        (0.0..=127.0)
            .contains(&midi)
            .then(|| Pitch { midi: midi as u8 })
    }
}

impl fmt::Display for Pitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteMetadata {
    pub instrument: Coded,
    pub mute: Option<Coded>,
    pub technique: String,
    pub pitch: Option<Pitch>,
    pub dynamics: Dynamics,
    pub variant: Option<String>,
}

impl NoteMetadata {
    pub fn new(instrument: &str, technique: &str, pitch: Option<Pitch>, dynamics: Dynamics) -> Self {
        NoteMetadata {
            instrument: Coded::instrument(instrument),
            mute: None,
            technique: technique.to_string(),
            pitch,
            dynamics,
            variant: None,
        }
    }

    /// True when some instrument or mute code is missing from the built-in tables.
    pub fn has_unknown_codes(&self) -> bool {
        !self.instrument.known || self.mute.as_ref().is_some_and(|m| !m.known)
    }

    /// Label of this note in a namespace.
    pub fn label(&self, namespace: Namespace) -> String {
        match namespace {
            Namespace::Instrument => self.instrument.code.clone(),
            Namespace::Technique => self.technique.clone(),
            Namespace::Mute => self
                .mute
                .as_ref()
                .map_or_else(|| "none".to_string(), |m| m.code.clone()),
            Namespace::Pitch => self.pitch.map_or_else(|| "none".to_string(), |p| p.name()),
            Namespace::Dynamics => self.dynamics.to_string(),
        }
    }

    /// Checks that the metadata can be rendered into a filename that parses back to itself.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::UnparseableStem {
                stem: render_filename(self),
                reason: reason.to_string(),
            })
        };
        let code_ok = |c: &str| !c.is_empty() && !c.contains(['-', '+', '/', '\\']);
        if !code_ok(&self.instrument.code) {
            return bad("instrument code must be non-empty without '-' or '+'");
        }
        if let Some(m) = &self.mute {
            if !code_ok(&m.code) {
                return bad("mute code must be non-empty without '-' or '+'");
            }
        }
        if self.technique.is_empty() {
            return bad("technique must be non-empty");
        }
        let tokens: Vec<&str> = self.technique.split('-').collect();
        if tokens.iter().any(|t| t.is_empty() || t.contains(['+', '/', '\\'])) {
            return bad("technique has an empty token");
        }
        if tokens.iter().any(|t| t.parse::<Dynamics>().is_ok()) {
            return bad("technique token collides with a dynamics marking");
        }
        if tokens.last().is_some_and(|t| Pitch::parse(t).is_some()) {
            return bad("technique ends with a pitch-like token");
        }
        if let Some(v) = &self.variant {
            if v.is_empty() || v.split('-').any(|t| t.is_empty() || t.parse::<Dynamics>().is_ok()) {
                return bad("variant token is empty or collides with a dynamics marking");
            }
        }
        Ok(())
    }
}

/// Label namespaces for evaluation and summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Instrument,
    Technique,
    Mute,
    Pitch,
    Dynamics,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::Instrument,
        Namespace::Technique,
        Namespace::Mute,
        Namespace::Pitch,
        Namespace::Dynamics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Instrument => "instrument",
            Namespace::Technique => "technique",
            Namespace::Mute => "mute",
            Namespace::Pitch => "pitch",
            Namespace::Dynamics => "dynamics",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Namespace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Namespace::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown namespace {s:?}")))
    }
}

/// Parses a filename stem (no extension) into note metadata.
pub fn parse_filename(stem: &str) -> Result<NoteMetadata> {
    let fail = |reason: &str| Error::UnparseableStem {
        stem: stem.to_string(),
        reason: reason.to_string(),
    };
    let tokens: Vec<&str> = stem.split('-').collect();
    if tokens.len() < 3 {
        return Err(fail("fewer than 3 fields"));
    }
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(fail("empty field"));
    }
    let dyn_at = (2..tokens.len())
        .rev()
        .find(|&i| tokens[i].parse::<Dynamics>().is_ok())
        .ok_or_else(|| fail("no dynamics marking"))?;
    let dynamics: Dynamics = tokens[dyn_at].parse().expect("checked above");

    let (pitch, technique_end) = match Pitch::parse(tokens[dyn_at - 1]) {
        Some(p) if dyn_at >= 3 => (Some(p), dyn_at - 1),
        _ => (None, dyn_at),
    };
    let technique = tokens[1..technique_end].join("-");

    let (instr_code, mute_code) = match tokens[0].split_once('+') {
        Some((i, m)) => (i, Some(m)),
        None => (tokens[0], None),
    };
    if instr_code.is_empty() || mute_code.is_some_and(|m| m.is_empty() || m.contains('+')) {
        return Err(fail("malformed instrument/mute field"));
    }
    let variant = (dyn_at + 1 < tokens.len()).then(|| tokens[dyn_at + 1..].join("-"));

    let meta = NoteMetadata {
        instrument: Coded::instrument(instr_code),
        mute: mute_code.map(Coded::mute),
        technique,
        pitch,
        dynamics,
        variant,
    };
    if meta.has_unknown_codes() {
        log::warn!("{stem}: unknown instrument or mute code, kept verbatim");
    }
    Ok(meta)
}

/// Renders metadata back into the filename grammar accepted by [`parse_filename`].
pub fn render_filename(meta: &NoteMetadata) -> String {
    let mut out = meta.instrument.code.clone();
    if let Some(m) = &meta.mute {
        out.push('+');
        out.push_str(&m.code);
    }
    out.push('-');
    out.push_str(&meta.technique);
    if let Some(p) = meta.pitch {
        out.push('-');
        out.push_str(&p.name());
    }
    out.push('-');
    out.push_str(meta.dynamics.as_str());
    if let Some(v) = &meta.variant {
        out.push('-');
        out.push_str(v);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub metadata: NoteMetadata,
    /// Seconds.
    pub duration: f64,
    pub sample_rate: u32,
    /// SHA-256 of the file contents, hex encoded.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    /// Root directory; relative roots are resolved against the manifest file's directory.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub namespaces: BTreeMap<Namespace, BTreeMap<String, usize>>,
    #[serde(default)]
    pub parse_failures: Vec<ParseFailure>,
}

impl CorpusManifest {
    pub fn from_entries(
        root: PathBuf,
        mut entries: Vec<ManifestEntry>,
        namespaces: &[Namespace],
        parse_failures: Vec<ParseFailure>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        for pair in entries.windows(2) {
            if pair[0].path == pair[1].path {
                return Err(Error::InvalidConfig(format!(
                    "duplicate manifest path {}",
                    pair[0].path.display()
                )));
            }
        }
        let mut manifest = CorpusManifest {
            version: MANIFEST_VERSION,
            root,
            entries,
            namespaces: BTreeMap::new(),
            parse_failures,
        };
        manifest.recount(namespaces);
        Ok(manifest)
    }

    /// Recomputes per-namespace class counts from the entries.
    pub fn recount(&mut self, namespaces: &[Namespace]) {
        self.namespaces = namespaces
            .iter()
            .map(|&ns| (ns, class_counts(self.entries.iter().map(|e| &e.metadata), ns)))
            .collect();
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn labels(&self, namespace: Namespace) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.metadata.label(namespace))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::MalformedArchive {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest version {}", manifest.version),
            });
        }
        if manifest.root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            manifest.root = base.join(&manifest.root);
        }
        Ok(manifest)
    }

    /// CSV of class counts for one namespace, most frequent first.
    pub fn histogram_csv(&self, namespace: Namespace) -> String {
        let counts = class_counts(self.entries.iter().map(|e| &e.metadata), namespace);
        let mut rows: Vec<(&String, &usize)> = counts.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut out = format!("{namespace},count\n");
        for (label, count) in rows {
            out.push_str(&format!("{label},{count}\n"));
        }
        out
    }
}

pub fn class_counts<'a>(
    items: impl Iterator<Item = &'a NoteMetadata>,
    namespace: Namespace,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for meta in items {
        *counts.entry(meta.label(namespace)).or_insert(0) += 1;
    }
    counts
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Recursively scans `root` for WAV files and parses their filenames.
///
/// Parse failures and unreadable headers are collected rather than fatal.
pub fn scan_corpus(root: &Path, namespaces: &[Namespace]) -> Result<CorpusManifest> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .follow_links(true)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_wav(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoAudioFound(root.to_path_buf()));
    }

    let scanned: Vec<std::result::Result<ManifestEntry, ParseFailure>> = files
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
            let failure = |reason: String| ParseFailure {
                path: rel.clone(),
                reason,
            };
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| failure("non-UTF-8 filename".into()))?;
            let metadata = parse_filename(stem).map_err(|e| failure(e.to_string()))?;
            let reader = hound::WavReader::open(path).map_err(|e| failure(e.to_string()))?;
            let spec = reader.spec();
            let duration = reader.duration() as f64 / spec.sample_rate as f64;
            let checksum = sha256_file(path).map_err(|e| failure(e.to_string()))?;
            Ok(ManifestEntry {
                path: rel,
                metadata,
                duration,
                sample_rate: spec.sample_rate,
                checksum,
            })
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for item in scanned {
        match item {
            Ok(e) => entries.push(e),
            Err(f) => failures.push(f),
        }
    }
    if entries.is_empty() {
        return Err(Error::NoAudioFound(root.to_path_buf()));
    }
    CorpusManifest::from_entries(root.to_path_buf(), entries, namespaces, failures)
}

/// Writes each note as `<render_filename>.wav` under `root` and returns the
/// manifest, which is also saved as `root/manifest.json`. Entries are sorted
/// by path, not kept in the order of `notes`.
pub fn write_corpus(
    root: &Path,
    notes: &[(Waveform, NoteMetadata)],
    namespaces: &[Namespace],
) -> Result<CorpusManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = notes
        .par_iter()
        .map(|(wave, meta)| {
            meta.validate()?;
            let rel = PathBuf::from(format!("{}.wav", render_filename(meta)));
            let path = root.join(&rel);
            write_wav(&path, wave)?;
            Ok(ManifestEntry {
                path: rel,
                metadata: meta.clone(),
                duration: wave.duration(),
                sample_rate: wave.sample_rate(),
                checksum: sha256_file(&path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // stored relative so the directory can be moved
    let mut manifest = CorpusManifest::from_entries(PathBuf::from("."), entries, namespaces, vec![])?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    manifest.root = root.to_path_buf();
    Ok(manifest)
}
