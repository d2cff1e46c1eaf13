//! Synthetic emotion corpus.
//!
//! Every utterance is a harmonic voice-like carrier whose pitch level, pitch
//! slope and loudness are planted per utterance, overlaid with a short
//! sequence of pure-tone "words". Each class owns two motif words; the rest
//! are fillers. V/A/D are affine in the planted prosody parameters.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::coattention::EmotionClass;
use crate::error::{Error, Result};
use crate::harness::manifest::{write_manifest, ManifestRecord};
use crate::nn::rng_for;

pub const N_TOKENS: usize = 12;
pub const FILLER_TOKENS: [usize; 4] = [8, 9, 10, 11];
pub const WORD_SECONDS: f64 = 0.45;
pub const WORD_SLOT_SECONDS: f64 = 0.5;
pub const FIRST_WORD_AT: f64 = 0.2;

pub fn token_frequency(token: usize) -> f64 {
    500.0 + 550.0 * token as f64
}

pub fn motif(klass: EmotionClass) -> [usize; 2] {
    let c = klass.index();
    [2 * c, 2 * c + 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_utterances: usize,
    pub seed: u64,
    /// Prosody independent of class: only the words carry the label.
    pub text_only: bool,
    pub n_speakers: usize,
    pub n_sessions: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub vad_noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_utterances: 80,
            seed: 0,
            text_only: false,
            n_speakers: 10,
            n_sessions: 5,
            min_seconds: 2.4,
            max_seconds: 3.6,
            vad_noise: 0.05,
        }
    }
}

/// The hidden generating parameters of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    /// Pitch level, slope and loudness, each in [-1, 1].
    pub z_pitch: f64,
    pub z_slope: f64,
    pub z_energy: f64,
    pub f0_hz: f64,
    pub words: Vec<usize>,
    pub seconds: f64,
}

/// `(V, A, D)` as planted from the prosody parameters, before noise.
pub fn planted_vad(p: &Planted) -> [f64; 3] {
    [
        3.0 + 0.9 * p.z_slope + 0.2 * p.z_energy,
        3.0 + 1.0 * p.z_pitch + 0.3 * p.z_energy,
        3.0 + 0.8 * p.z_energy + 0.2 * p.z_pitch,
    ]
}

// Per-class prosody centres (pitch, slope, energy).
const CLASS_PROSODY: [[f64; 3]; 4] = [[0.6, -0.2, 0.7], [-0.6, -0.5, -0.6], [0.5, 0.6, 0.3], [-0.1, 0.0, -0.2]];

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub records: Vec<ManifestRecord>,
    pub planted: Vec<Planted>,
    pub audio: Vec<Waveform>,
}

/// Builds the corpus in memory.
pub fn synthesize(cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.n_utterances < 40 {
        return Err(Error::config(format!("toy corpus needs at least 40 utterances, got {}", cfg.n_utterances)));
    }
    if cfg.n_speakers == 0 || cfg.n_sessions == 0 || cfg.n_speakers % cfg.n_sessions != 0 {
        return Err(Error::config("speakers must split evenly across sessions"));
    }
    if !(cfg.min_seconds > 0.0 && cfg.min_seconds <= cfg.max_seconds) {
        return Err(Error::config("invalid utterance duration range"));
    }
    let mut rng = rng_for(cfg.seed, "toy");
    let noise = Normal::new(0.0, cfg.vad_noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let speaker_f0: Vec<f64> = (0..cfg.n_speakers).map(|_| rng.random_range(110.0..200.0)).collect();
    let per_session = cfg.n_speakers / cfg.n_sessions;

    let mut records = Vec::with_capacity(cfg.n_utterances);
    let mut planted = Vec::with_capacity(cfg.n_utterances);
    let mut audio = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let klass = EmotionClass::from_index(i % 4).expect("four classes");
        let speaker = (i / 4) % cfg.n_speakers;
        let session = speaker / per_session;
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, c: f64| (c + rng.random_range(-0.35..0.35)).clamp(-1.0, 1.0);
        let (z_pitch, z_slope, z_energy) = if cfg.text_only {
            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        } else {
            let c = CLASS_PROSODY[klass.index()];
            (jitter(&mut rng, c[0]), jitter(&mut rng, c[1]), jitter(&mut rng, c[2]))
        };
        let mut words = vec![motif(klass)[0], motif(klass)[1]];
        words.push(FILLER_TOKENS[rng.random_range(0..4)]);
        words.push(FILLER_TOKENS[rng.random_range(0..4)]);
        words.shuffle(&mut rng);
        let seconds = rng.random_range(cfg.min_seconds..=cfg.max_seconds);
        let p = Planted {
            z_pitch,
            z_slope,
            z_energy,
            f0_hz: speaker_f0[speaker] * (1.0 + 0.35 * z_pitch),
            words,
            seconds,
        };
        let samples = render(&p, &mut rng);
        let vad = planted_vad(&p);
        let id = format!("toy_{i:04}");
        records.push(ManifestRecord {
            audio_path: format!("audio/{id}.wav"),
            utterance_id: id,
            speaker_id: format!("spk{speaker:02}"),
            session_id: format!("ses{}", session + 1),
            klass,
            v: vad[0] + noise.sample(&mut rng),
            a: vad[1] + noise.sample(&mut rng),
            d: vad[2] + noise.sample(&mut rng),
            transcript_tokens: Some(p.words.iter().map(|w| w + 1).collect()),
        });
        audio.push(Waveform::new(samples, SAMPLE_RATE)?);
        planted.push(p);
    }
    Ok(ToyDataset { records, planted, audio })
}

fn render(p: &Planted, rng: &mut impl Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let n = (p.seconds * sr).round() as usize;
    let amp = 0.08 + 0.07 * (p.z_energy + 1.0);
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = p.f0_hz * (1.0 + 0.3 * p.z_slope * (t / p.seconds - 0.5));
        phase += 2.0 * PI * f0 / sr;
        let mut v = 0.0;
        for h in 1..=5 {
            v += (h as f64 * phase).sin() / h as f64;
        }
        // slow syllable-rate envelope
        let env = 0.6 + 0.4 * (2.0 * PI * 3.0 * t).sin().abs();
        let mut s = amp * env * v * 0.5 + rng.random_range(-0.003..0.003);
        for (k, &w) in p.words.iter().enumerate() {
            let start = FIRST_WORD_AT + WORD_SLOT_SECONDS * k as f64;
            let local = t - start;
            if (0.0..WORD_SECONDS).contains(&local) {
                let ramp = (local / 0.01).min((WORD_SECONDS - local) / 0.01).min(1.0);
                s += 0.2 * ramp * (2.0 * PI * token_frequency(w) * local).sin();
            }
        }
        out.push(s.clamp(-1.0, 1.0) as f32);
    }
    out
}

/// Writes `manifest.jsonl` and `audio/*.wav` under `dir`.
pub fn generate_toy_dataset(cfg: &ToyConfig, dir: &Path) -> Result<ToyDataset> {
    let data = synthesize(cfg)?;
    std::fs::create_dir_all(dir.join("audio"))?;
    for (r, w) in data.records.iter().zip(&data.audio) {
        w.write_wav(&dir.join(&r.audio_path))?;
    }
    write_manifest(&dir.join("manifest.jsonl"), &data.records)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, text_only: bool) -> ToyDataset {
        synthesize(&ToyConfig {
            n_utterances: 40,
            seed,
            text_only,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_audio() {
        let a = small(3, false);
        let b = small(3, false);
        for (x, y) in a.audio.iter().zip(&b.audio) {
            assert_eq!(x.samples(), y.samples());
        }
        assert_ne!(small(4, false).audio[0].samples(), a.audio[0].samples());
    }

    #[test]
    fn balanced_classes_speakers_and_sessions() {
        let d = small(1, false);
        let mut counts = [0usize; 4];
        for r in &d.records {
            counts[r.klass.index()] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let speakers: std::collections::BTreeSet<_> = d.records.iter().map(|r| &r.speaker_id).collect();
        let sessions: std::collections::BTreeSet<_> = d.records.iter().map(|r| &r.session_id).collect();
        assert_eq!((speakers.len(), sessions.len()), (10, 5));
    }

    #[test]
    fn transcripts_contain_the_class_motif() {
        let d = small(2, true);
        for (r, p) in d.records.iter().zip(&d.planted) {
            let t = r.transcript_tokens.as_ref().unwrap();
            for m in motif(r.klass) {
                assert!(t.contains(&(m + 1)));
            }
            assert!(t.iter().all(|&s| (1..=N_TOKENS).contains(&s)));
            let last_end = FIRST_WORD_AT + WORD_SLOT_SECONDS * 3.0 + WORD_SECONDS;
            assert!(last_end < 3.0 && last_end < p.seconds);
        }
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        assert!(synthesize(&ToyConfig {
            n_utterances: 39,
            ..ToyConfig::default()
        })
        .is_err());
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_toy_dataset(
            &ToyConfig {
                n_utterances: 40,
                ..ToyConfig::default()
            },
            dir.path(),
        )
        .unwrap();
        let loaded = crate::harness::manifest::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.len(), 40);
        let w = Waveform::read_wav(Path::new(&loaded[0].audio_path)).unwrap();
        assert_eq!(w.len(), d.audio[0].len());
    }
}
