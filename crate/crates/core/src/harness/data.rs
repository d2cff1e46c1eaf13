//! In-memory segment corpus with batching helpers.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::audio::{
    load_or_compute_spectrogram, segment_utterance, SpectrogramExtractor, SpectrogramNormalization, Waveform,
    SEGMENT_SAMPLES, SPEC_BINS, SPEC_FRAMES,
};
use crate::error::Result;
use crate::harness::manifest::{load_manifest, ManifestRecord};

#[derive(Debug, Clone)]
pub struct SegmentItem {
    pub record: usize,
    pub index: usize,
    pub samples: Vec<f32>,
    pub spectrogram: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub items: Vec<SegmentItem>,
    /// Item indices of each record's segments, in order.
    pub by_record: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn load(
        manifest: &Path,
        segment_seconds: f64,
        normalization: SpectrogramNormalization,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let audio = records
            .iter()
            .map(|r| Waveform::read_wav(Path::new(&r.audio_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_audio(records, &audio, segment_seconds, normalization, cache_dir)
    }

    pub fn from_audio(
        records: Vec<ManifestRecord>,
        audio: &[Waveform],
        segment_seconds: f64,
        normalization: SpectrogramNormalization,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let extractor = SpectrogramExtractor::new(normalization);
        let mut items = Vec::new();
        let mut by_record = Vec::with_capacity(records.len());
        for (ri, (r, w)) in records.iter().zip(audio).enumerate() {
            let key = format!("{}|{normalization:?}", r.audio_path);
            let mut mine = Vec::new();
            for seg in segment_utterance(w, &r.utterance_id, segment_seconds)? {
                let spec = load_or_compute_spectrogram(&extractor, &seg, cache_dir.map(|d| (d, key.as_str())))?;
                mine.push(items.len());
                items.push(SegmentItem {
                    record: ri,
                    index: seg.index,
                    spectrogram: spec.values().to_vec(),
                    samples: seg.samples,
                });
            }
            by_record.push(mine);
        }
        Ok(Self {
            records,
            items,
            by_record,
        })
    }

    pub fn items_of(&self, records: &[usize]) -> Vec<usize> {
        records.iter().flat_map(|&r| self.by_record[r].iter().copied()).collect()
    }

    /// `batch × samples` waveforms.
    pub fn waves(&self, items: &[usize], dtype: DType) -> Result<Tensor> {
        let mut v = Vec::with_capacity(items.len() * SEGMENT_SAMPLES);
        for &i in items {
            v.extend_from_slice(&self.items[i].samples);
        }
        Ok(Tensor::from_vec(v, (items.len(), SEGMENT_SAMPLES), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `batch × frames × bins` spectrograms.
    pub fn spectrograms(&self, items: &[usize], dtype: DType) -> Result<Tensor> {
        let mut v = Vec::with_capacity(items.len() * SPEC_FRAMES * SPEC_BINS);
        for &i in items {
            v.extend_from_slice(&self.items[i].spectrogram);
        }
        Ok(Tensor::from_vec(v, (items.len(), SPEC_FRAMES, SPEC_BINS), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn labels(&self, items: &[usize]) -> Vec<usize> {
        items.iter().map(|&i| self.records[self.items[i].record].klass.index()).collect()
    }

    /// `batch × 3` V/A/D targets.
    pub fn vad(&self, items: &[usize], dtype: DType) -> Result<Tensor> {
        let v: Vec<f64> = items
            .iter()
            .flat_map(|&i| self.records[self.items[i].record].vad())
            .collect();
        Ok(Tensor::from_vec(v, (items.len(), 3), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Transcript tokens belong to the first segment; later segments get an
    /// empty target.
    pub fn ctc_targets(&self, items: &[usize]) -> Vec<Vec<usize>> {
        items
            .iter()
            .map(|&i| {
                let it = &self.items[i];
                match (&self.records[it.record].transcript_tokens, it.index) {
                    (Some(t), 0) => t.clone(),
                    _ => Vec::new(),
                }
            })
            .collect()
    }
}
