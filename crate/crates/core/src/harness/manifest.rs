//! Line-delimited JSON dataset manifests.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coattention::EmotionClass;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub utterance_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub klass: EmotionClass,
    pub v: f64,
    pub a: f64,
    pub d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_tokens: Option<Vec<usize>>,
}

impl ManifestRecord {
    pub fn vad(&self) -> [f64; 3] {
        [self.v, self.a, self.d]
    }
}

#[derive(Deserialize)]
struct RawRecord {
    audio_path: String,
    utterance_id: String,
    speaker_id: String,
    session_id: String,
    klass: String,
    v: f64,
    a: f64,
    d: f64,
    #[serde(default)]
    transcript_tokens: Option<Vec<usize>>,
}

/// Parses manifest text without touching the filesystem. Audio paths are kept
/// as written.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let klass = EmotionClass::parse(&raw.klass)
            .ok_or_else(|| parse_err(format!("unknown class label {:?}", raw.klass)))?;
        if raw.session_id.trim().is_empty() || raw.speaker_id.trim().is_empty() {
            return Err(parse_err("speaker_id and session_id must be non-empty".into()));
        }
        if ![raw.v, raw.a, raw.d].iter().all(|x| x.is_finite()) {
            return Err(parse_err("V/A/D values must be finite".into()));
        }
        if !seen.insert(raw.utterance_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate utterance_id {:?}",
                path.display(),
                raw.utterance_id
            )));
        }
        records.push(ManifestRecord {
            audio_path: raw.audio_path,
            utterance_id: raw.utterance_id,
            speaker_id: raw.speaker_id,
            session_id: raw.session_id,
            klass,
            v: raw.v,
            a: raw.a,
            d: raw.d,
            transcript_tokens: raw.transcript_tokens,
        });
    }
    Ok(records)
}

/// Reads and validates a manifest. Relative audio paths are resolved against
/// the manifest's directory and every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = parse_manifest(&text, path)?;
    if records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
        return Ok(records);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut missing = Vec::new();
    for r in &mut records {
        let resolved = resolve(base, &r.audio_path);
        if !resolved.is_file() {
            missing.push(resolved.display().to_string());
        }
        r.audio_path = resolved.to_string_lossy().into_owned();
    }
    if !missing.is_empty() {
        return Err(Error::MissingAudio(missing));
    }
    Ok(records)
}

fn resolve(base: &Path, audio: &str) -> PathBuf {
    let p = Path::new(audio);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
