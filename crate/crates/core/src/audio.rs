//! Waveforms, fixed-length segmentation and log-magnitude spectrograms.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENT_SAMPLES: usize = 48_000;
pub const WINDOW_SAMPLES: usize = 640;
pub const HOP_SAMPLES: usize = 160;
pub const DFT_SIZE: usize = 800;
pub const SPEC_FRAMES: usize = 300;
pub const SPEC_BINS: usize = 200;

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::input(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(Error::input("empty waveform"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::input(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// 16-bit PCM output.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// A 3 s window of an utterance, always exactly [`SEGMENT_SAMPLES`] long.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f32>,
    pub parent_id: String,
    pub index: usize,
    /// Samples that came from the utterance; the rest is zero padding.
    pub valid_len: usize,
}

impl Segment {
    pub fn new(samples: Vec<f32>, parent_id: impl Into<String>, index: usize) -> Result<Self> {
        if samples.len() != SEGMENT_SAMPLES {
            return Err(Error::input(format!(
                "segment must hold {SEGMENT_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        Ok(Self {
            valid_len: samples.len(),
            samples,
            parent_id: parent_id.into(),
            index,
        })
    }
}

/// Splits an utterance into consecutive windows; the last one is zero padded.
pub fn segment_utterance(w: &Waveform, parent_id: &str, segment_seconds: f64) -> Result<Vec<Segment>> {
    let seg_len = (segment_seconds * SAMPLE_RATE as f64).round() as usize;
    if seg_len != SEGMENT_SAMPLES {
        return Err(Error::config(format!(
            "segments of {segment_seconds} s are not supported; the encoder expects {} s",
            SEGMENT_SAMPLES as f64 / SAMPLE_RATE as f64
        )));
    }
    if w.is_empty() {
        return Err(Error::input("empty waveform"));
    }
    Ok(w.samples()
        .chunks(seg_len)
        .enumerate()
        .map(|(index, chunk)| {
            let mut samples = chunk.to_vec();
            samples.resize(seg_len, 0.0);
            Segment {
                samples,
                parent_id: parent_id.to_string(),
                index,
                valid_len: chunk.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpectrogramNormalization {
    #[default]
    None,
    /// Zero mean, unit variance over the whole image.
    PerSegment,
}

/// A 300 × 200 log-magnitude image, row-major in (time, frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    values: Vec<f32>,
}

impl SpectrogramImage {
    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != SPEC_FRAMES * SPEC_BINS {
            return Err(Error::input(format!(
                "spectrogram needs {} values, got {}",
                SPEC_FRAMES * SPEC_BINS,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite spectrogram value".into()));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (SPEC_FRAMES, SPEC_BINS)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.values[frame * SPEC_BINS + bin]
    }
}

/// Reusable spectrogram extractor (window and FFT plan are built once).
pub struct SpectrogramExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    normalization: SpectrogramNormalization,
}

impl SpectrogramExtractor {
    pub fn new(normalization: SpectrogramNormalization) -> Self {
        let n = WINDOW_SAMPLES as f64;
        let window = (0..WINDOW_SAMPLES)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1.0)).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(DFT_SIZE);
        Self {
            window,
            fft,
            normalization,
        }
    }

    pub fn compute(&self, segment: &Segment) -> Result<SpectrogramImage> {
        if segment.samples.len() != SEGMENT_SAMPLES {
            return Err(Error::input(format!(
                "segment must hold {SEGMENT_SAMPLES} samples, got {}",
                segment.samples.len()
            )));
        }
        let n_frames = raw_frame_count(SEGMENT_SAMPLES);
        let mut values = vec![0f32; SPEC_FRAMES * SPEC_BINS];
        let mut buf = vec![Complex::new(0.0f64, 0.0); DFT_SIZE];
        for f in 0..n_frames.min(SPEC_FRAMES) {
            let start = f * HOP_SAMPLES;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (c, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                c.re = segment.samples[start + i] as f64 * w;
            }
            self.fft.process(&mut buf);
            // Bins 0..400 (Nyquist dropped), averaged in adjacent pairs.
            let row = &mut values[f * SPEC_BINS..(f + 1) * SPEC_BINS];
            for (j, cell) in row.iter_mut().enumerate() {
                let a = buf[2 * j].norm().ln_1p();
                let b = buf[2 * j + 1].norm().ln_1p();
                *cell = (0.5 * (a + b)) as f32;
            }
        }
        if self.normalization == SpectrogramNormalization::PerSegment {
            let n = values.len() as f64;
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-8);
            values
                .iter_mut()
                .for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
        }
        SpectrogramImage::from_values(values)
    }
}

/// Frames produced by sliding the 640-sample window with hop 160.
pub fn raw_frame_count(len: usize) -> usize {
    if len < WINDOW_SAMPLES {
        0
    } else {
        (len - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

pub fn compute_spectrogram(segment: &Segment) -> Result<SpectrogramImage> {
    SpectrogramExtractor::new(SpectrogramNormalization::None).compute(segment)
}

const GRID_MAGIC: &[u8; 4] = b"MFSG";
const GRID_VERSION: u32 = 1;

/// Writes a real grid as: magic, version, rank, dims (u32 LE each), then f32 LE
/// values.
pub fn write_grid(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != values.len() {
        return Err(Error::input("grid dims do not match value count"));
    }
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::input(format!("{}: {msg}", path.display()));
    let u32_at = |off: usize| -> Option<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if bytes.get(..4) != Some(GRID_MAGIC.as_slice()) {
        return Err(bad("not a grid file"));
    }
    if u32_at(4) != Some(GRID_VERSION) {
        return Err(bad("unsupported grid version"));
    }
    let rank = u32_at(8).ok_or_else(|| bad("truncated header"))? as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32_at(12 + 4 * i).ok_or_else(|| bad("truncated header"))? as usize);
    }
    let start = 12 + 4 * rank;
    let n: usize = dims.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad("payload size does not match header"));
    }
    let values = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, values))
}

/// Stores a spectrogram in the cache directory under a (file, segment) key.
pub fn cache_path(cache_dir: &Path, audio_path: &str, segment_index: usize) -> std::path::PathBuf {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in audio_path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    cache_dir.join(format!("{h:016x}_{segment_index}.spec"))
}

pub fn load_or_compute_spectrogram(
    extractor: &SpectrogramExtractor,
    segment: &Segment,
    cache: Option<(&Path, &str)>,
) -> Result<SpectrogramImage> {
    if let Some((dir, key)) = cache {
        let path = cache_path(dir, key, segment.index);
        if path.exists() {
            let (dims, values) = read_grid(&path)?;
            if dims == [SPEC_FRAMES, SPEC_BINS] {
                return SpectrogramImage::from_values(values);
            }
        }
        let img = extractor.compute(segment)?;
        std::fs::create_dir_all(dir)?;
        write_grid(&path, &[SPEC_FRAMES, SPEC_BINS], img.values())?;
        return Ok(img);
    }
    extractor.compute(segment)
}
