//! Shared speech encoder: a strided 1-D convolutional front-end, frame
//! masking, and a post-norm Transformer stack that exposes every layer output.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Segment, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerNorm, Linear, ParamStore, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_channels: usize,
    pub n_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            conv_channels: 512,
            n_layers: 4,
            model_dim: 512,
            ffn_dim: 2048,
            n_heads: 8,
            max_positions: 256,
        }
    }
}

impl EncoderConfig {
    /// Same front-end geometry and depth with narrow widths, sized for CPU
    /// training on toy corpora.
    pub fn desk() -> Self {
        Self {
            conv_channels: 32,
            model_dim: 32,
            ffn_dim: 64,
            n_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.len() != self.conv_kernels.len() {
            return Err(Error::config("conv_strides and conv_kernels differ in length"));
        }
        if self.conv_strides.is_empty() || self.conv_strides.iter().chain(&self.conv_kernels).any(|&v| v == 0) {
            return Err(Error::config("conv strides and kernels must be non-empty and positive"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(Error::config("n_layers must be a positive even number"));
        }
        if self.conv_channels == 0 || self.ffn_dim == 0 {
            return Err(Error::config("conv_channels and ffn_dim must be positive"));
        }
        Ok(())
    }

    /// Output frame count of the convolutional front-end, `None` when the
    /// input is shorter than the receptive field.
    pub fn output_frames(&self, len: usize) -> Option<usize> {
        let mut l = len;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            if l < k {
                return None;
            }
            l = (l - k) / s + 1;
        }
        Some(l)
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }
}

/// A batch of frame features, `batch × frames × dim`.
#[derive(Debug, Clone)]
pub struct FrameSequence(Tensor);

impl FrameSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return Err(Error::input(format!("frame sequence must be rank 3, got {dims:?}")));
        }
        if dims[1] == 0 {
            return Err(Error::input("frame sequence has no frames"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch(), self.frames(), self.dim())
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn is_finite(&self) -> Result<bool> {
        nn::all_finite(&self.0)
    }
}

/// Masked frame positions per batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    indices: Vec<Vec<usize>>,
    frames: usize,
}

impl MaskSpec {
    pub fn new(mut indices: Vec<Vec<usize>>, frames: usize) -> Result<Self> {
        for row in &mut indices {
            if let Some(&bad) = row.iter().find(|&&i| i >= frames) {
                return Err(Error::input(format!("mask index {bad} out of range for {frames} frames")));
            }
            row.sort_unstable();
            row.dedup();
        }
        Ok(Self { indices, frames })
    }

    pub fn empty(batch: usize, frames: usize) -> Self {
        Self {
            indices: vec![Vec::new(); batch],
            frames,
        }
    }

    pub fn full(batch: usize, frames: usize) -> Self {
        Self {
            indices: vec![(0..frames).collect(); batch],
            frames,
        }
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn batch(&self) -> usize {
        self.indices.len()
    }

    pub fn masked_count(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    /// Flat `b * frames + t` positions in batch order.
    pub fn flat_positions(&self) -> Vec<usize> {
        self.indices
            .iter()
            .enumerate()
            .flat_map(|(b, row)| row.iter().map(move |&t| b * self.frames + t))
            .collect()
    }

    /// `batch × frames × 1` indicator, 1 at masked positions.
    pub fn indicator(&self, dtype: DType) -> Result<Tensor> {
        let mut m = vec![0f64; self.batch() * self.frames];
        for p in self.flat_positions() {
            m[p] = 1.0;
        }
        Ok(Tensor::from_vec(m, (self.batch(), self.frames, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Span masking: every frame starts a span with probability `mask_prob`; a
/// span covers its start and the following `span - 1` frames.
pub fn sample_mask(frames: usize, mask_prob: f64, span: usize, rng: &mut SeededRng) -> Vec<usize> {
    let span = span.max(1);
    let mask_prob = mask_prob.clamp(0.0, 1.0);
    let mut hit = vec![false; frames];
    for t in 0..frames {
        if rng.random::<f64>() < mask_prob {
            for h in hit.iter_mut().skip(t).take(span) {
                *h = true;
            }
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

pub fn sample_batch_mask(
    batch: usize,
    frames: usize,
    mask_prob: f64,
    span: usize,
    rng: &mut SeededRng,
) -> MaskSpec {
    MaskSpec {
        indices: (0..batch).map(|_| sample_mask(frames, mask_prob, span, rng)).collect(),
        frames,
    }
}

/// Replaces masked frames with `token` (a `dim` vector).
pub fn apply_mask(x: &FrameSequence, spec: &MaskSpec, token: &Tensor) -> Result<FrameSequence> {
    let (b, t, _) = x.shape();
    if spec.batch() != b || spec.frames() != t {
        return Err(Error::input(format!(
            "mask covers {}x{} frames, sequence is {b}x{t}",
            spec.batch(),
            spec.frames()
        )));
    }
    if spec.masked_count() == 0 {
        return Ok(x.clone());
    }
    let m = spec.indicator(x.tensor().dtype())?;
    let keep = (1.0 - &m)?;
    let out = x.tensor().broadcast_mul(&keep)?.add(&m.broadcast_mul(token)?)?;
    FrameSequence::new(out)
}

/// The three taps the fusion search chooses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Raw,
    Deep,
    Target,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Raw, Level::Deep, Level::Target];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Raw => "raw",
            Level::Deep => "deep",
            Level::Target => "target",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Outputs of every encoder layer. Layers are numbered from 1 as in
/// `X_e^1 .. X_e^k`.
#[derive(Debug, Clone)]
pub struct LayerTapBundle {
    taps: Vec<FrameSequence>,
}

impl LayerTapBundle {
    pub fn new(taps: Vec<FrameSequence>) -> Result<Self> {
        let Some(first) = taps.first() else {
            return Err(Error::input("tap bundle needs at least one layer"));
        };
        if taps.len() % 2 != 0 {
            return Err(Error::input("tap bundle needs an even number of layers"));
        }
        if taps.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::input("all taps must share one shape"));
        }
        Ok(Self { taps })
    }

    pub fn k(&self) -> usize {
        self.taps.len()
    }

    /// 1-based layer access.
    pub fn tap(&self, layer: usize) -> &FrameSequence {
        &self.taps[layer - 1]
    }

    pub fn taps(&self) -> &[FrameSequence] {
        &self.taps
    }

    pub fn raw(&self) -> &FrameSequence {
        self.tap(1)
    }

    pub fn deep(&self) -> &FrameSequence {
        self.tap(self.k() / 2)
    }

    pub fn target(&self) -> &FrameSequence {
        self.tap(self.k())
    }

    pub fn level(&self, level: Level) -> &FrameSequence {
        match level {
            Level::Raw => self.raw(),
            Level::Deep => self.deep(),
            Level::Target => self.target(),
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            taps: self.taps.iter().map(FrameSequence::detach).collect(),
        }
    }
}

struct ConvStage {
    weight: Tensor,
    norm: LayerNorm,
    stride: usize,
}

struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |lin: &Linear| -> Result<Tensor> {
            Ok(lin
                .forward(x)?
                .reshape((b, t, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(&self.q)?, split(&self.k)?, split(&self.v)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = nn::softmax(&scores, 3)?;
        let ctx = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.o.forward(&ctx)
    }
}

struct TransformerLayer {
    attn: SelfAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl TransformerLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&(x + self.attn.forward(x)?)?)?;
        let h = self.ff2.forward(&self.ff1.forward(&x)?.gelu_erf()?)?;
        self.norm2.forward(&(x + h)?)
    }
}

/// The speech encoder. Parameters live in a [`ParamStore`] under `prefix`.
pub struct SpeechEncoder {
    cfg: EncoderConfig,
    conv: Vec<ConvStage>,
    proj: Linear,
    mask_token: Tensor,
    positions: Tensor,
    layers: Vec<TransformerLayer>,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut conv = Vec::with_capacity(cfg.conv_strides.len());
        let mut in_ch = 1;
        for (i, (&k, &s)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
            let std = (2.0 / (in_ch * k) as f64).sqrt();
            let weight = store.get(
                &format!("{prefix}.conv.{i}.weight"),
                &[cfg.conv_channels, in_ch, k],
                Init::Normal(std),
            )?;
            let norm = LayerNorm::new(store, &format!("{prefix}.conv.{i}.norm"), cfg.conv_channels)?;
            conv.push(ConvStage { weight, norm, stride: s });
            in_ch = cfg.conv_channels;
        }
        let d = cfg.model_dim;
        let proj = Linear::new(store, &format!("{prefix}.proj"), cfg.conv_channels, d)?;
        let mask_token = store.get(&format!("{prefix}.mask_token"), &[d], Init::Uniform(1.0))?;
        let positions = store.get(
            &format!("{prefix}.positions"),
            &[cfg.max_positions, d],
            Init::Normal(0.02),
        )?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("{prefix}.layer.{l}");
            layers.push(TransformerLayer {
                attn: SelfAttention {
                    q: Linear::new(store, &format!("{p}.attn.q"), d, d)?,
                    k: Linear::new(store, &format!("{p}.attn.k"), d, d)?,
                    v: Linear::new(store, &format!("{p}.attn.v"), d, d)?,
                    o: Linear::new(store, &format!("{p}.attn.o"), d, d)?,
                    heads: cfg.n_heads,
                },
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.ffn_dim)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ffn_dim, d)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv,
            proj,
            mask_token,
            positions,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn mask_token(&self) -> &Tensor {
        &self.mask_token
    }

    /// Convolutional front-end plus projection: `batch × samples` waveforms to
    /// `batch × frames × model_dim`.
    pub fn encode_frames(&self, waves: &Tensor) -> Result<FrameSequence> {
        let (b, len) = waves.dims2()?;
        if self.cfg.output_frames(len).unwrap_or(0) == 0 {
            return Err(Error::input(format!(
                "input of {len} samples is shorter than the receptive field of {} samples",
                self.cfg.receptive_field()
            )));
        }
        let mut x = waves.reshape((b, 1, len))?;
        for stage in &self.conv {
            let y = x.conv1d(&stage.weight, 0, stage.stride, 1, 1)?;
            let y = stage.norm.forward(&y.transpose(1, 2)?)?.gelu_erf()?;
            x = y.transpose(1, 2)?;
        }
        let x = x.transpose(1, 2)?.contiguous()?;
        FrameSequence::new(self.proj.forward(&x)?)
    }

    pub fn encode_segments(&self, segments: &[&Segment], dtype: DType) -> Result<FrameSequence> {
        self.encode_frames(&segments_tensor(segments, dtype)?)
    }

    pub fn apply_mask(&self, x: &FrameSequence, spec: &MaskSpec) -> Result<FrameSequence> {
        apply_mask(x, spec, &self.mask_token)
    }

    /// Runs the Transformer stack and returns all layer outputs.
    pub fn transform_with_taps(&self, x: &FrameSequence) -> Result<LayerTapBundle> {
        let (_, t, d) = x.shape();
        if d != self.cfg.model_dim {
            return Err(Error::input(format!("expected dim {}, got {d}", self.cfg.model_dim)));
        }
        if t > self.cfg.max_positions {
            return Err(Error::input(format!(
                "{t} frames exceed max_positions {}",
                self.cfg.max_positions
            )));
        }
        let mut h = x.tensor().broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(&h)?;
            taps.push(FrameSequence::new(h.clone())?);
        }
        LayerTapBundle::new(taps)
    }

    /// Plain forward pass: last layer output.
    pub fn forward(&self, x: &FrameSequence) -> Result<FrameSequence> {
        let mut h = x.tensor().broadcast_add(&self.positions.narrow(0, 0, x.frames())?)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        FrameSequence::new(h)
    }

    /// Waveforms to taps, optionally masking the projected frames first.
    pub fn forward_waves(&self, waves: &Tensor, mask: Option<&MaskSpec>) -> Result<(FrameSequence, LayerTapBundle)> {
        let x = self.encode_frames(waves)?;
        let xt = match mask {
            Some(m) => self.apply_mask(&x, m)?,
            None => x.clone(),
        };
        let taps = self.transform_with_taps(&xt)?;
        Ok((x, taps))
    }
}

pub fn segments_tensor(segments: &[&Segment], dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(segments.len() * SEGMENT_SAMPLES);
    for s in segments {
        data.extend_from_slice(&s.samples);
    }
    let len = segments.first().map_or(SEGMENT_SAMPLES, |s| s.samples.len());
    Ok(Tensor::from_vec(data, (segments.len(), len), &Device::Cpu)?.to_dtype(dtype)?)
}

pub const CHECKPOINT_FORMAT: &str = "mfas-checkpoint-v1";

/// Metadata stored next to the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub encoder: EncoderConfig,
    pub sections: HashMap<String, String>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, info: &CheckpointInfo) -> Result<()> {
    let mut meta = info.sections.clone();
    meta.insert("format".into(), CHECKPOINT_FORMAT.into());
    meta.insert("encoder_config".into(), serde_json::to_string(&info.encoder)?);
    store.save(path, meta)
}

pub fn load_checkpoint(path: &Path, dtype: DType, seed: u64) -> Result<(ParamStore, CheckpointInfo)> {
    if !path.exists() {
        return Err(Error::state(format!("checkpoint {} does not exist", path.display())));
    }
    let (store, mut meta) = ParamStore::load(path, dtype, seed)?;
    match meta.remove("format").as_deref() {
        Some(CHECKPOINT_FORMAT) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format tag {other:?}",
                path.display()
            )))
        }
    }
    let encoder = meta
        .remove("encoder_config")
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing encoder_config", path.display())))?;
    let encoder: EncoderConfig = serde_json::from_str(&encoder)?;
    Ok((
        store,
        CheckpointInfo {
            encoder,
            sections: meta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rng_for, to_vec_f64};
    use proptest::prelude::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            conv_channels: 8,
            model_dim: 8,
            ffn_dim: 16,
            n_heads: 2,
            ..EncoderConfig::default()
        }
    }

    /// Counts conv windows by sliding them, one stage at a time.
    fn brute_force_frames(cfg: &EncoderConfig, len: usize) -> usize {
        let mut l = len;
        for (&k, &s) in cfg.conv_kernels.iter().zip(&cfg.conv_strides) {
            let mut count = 0;
            let mut start = 0;
            while start + k <= l {
                count += 1;
                start += s;
            }
            l = count;
        }
        l
    }

    #[test]
    fn default_config_matches_table_values() {
        let c = EncoderConfig::default();
        assert_eq!(c.conv_strides, vec![5, 2, 2, 2, 2, 2, 2]);
        assert_eq!(c.conv_kernels, vec![10, 3, 3, 3, 3, 2, 2]);
        assert_eq!((c.conv_channels, c.n_layers, c.model_dim, c.ffn_dim, c.n_heads), (512, 4, 512, 2048, 8));
        c.validate().unwrap();
    }

    #[test]
    fn three_seconds_gives_149_frames() {
        let c = EncoderConfig::default();
        assert_eq!(c.output_frames(48_000), Some(149));
        assert_eq!(brute_force_frames(&c, 48_000), 149);
        assert_eq!(c.receptive_field(), 400);
    }

    #[test]
    fn frame_count_grows_with_slope_one_over_320() {
        let c = EncoderConfig::default();
        let base = c.output_frames(400).unwrap();
        for n in [1usize, 10, 100, 1000] {
            assert_eq!(c.output_frames(400 + 320 * n).unwrap(), base + n);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = EncoderConfig::default();
        c.conv_kernels.pop();
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            n_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_output_shape_and_zero_input() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = SpeechEncoder::new(&mut store, "enc", &cfg).unwrap();
        let waves = Tensor::zeros((2, 48_000), DType::F32, &Device::Cpu).unwrap();
        let x = enc.encode_frames(&waves).unwrap();
        assert_eq!(x.shape(), (2, 149, 8));
        assert!(x.is_finite().unwrap());
        let short = Tensor::zeros((1, 399), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode_frames(&short), Err(Error::Input(_))));
    }

    #[test]
    fn mask_boundaries() {
        let x = FrameSequence::new(
            Tensor::arange(0f64, 12.0, &Device::Cpu).unwrap().reshape((1, 3, 4)).unwrap(),
        )
        .unwrap();
        let token = Tensor::new(&[9.0f64, 8.0, 7.0, 6.0], &Device::Cpu).unwrap();
        let none = apply_mask(&x, &MaskSpec::empty(1, 3), &token).unwrap();
        assert_eq!(to_vec_f64(none.tensor()).unwrap(), to_vec_f64(x.tensor()).unwrap());
        let all = apply_mask(&x, &MaskSpec::full(1, 3), &token).unwrap();
        assert_eq!(to_vec_f64(all.tensor()).unwrap(), [9.0, 8.0, 7.0, 6.0].repeat(3));
        let one = apply_mask(&x, &MaskSpec::new(vec![vec![1]], 3).unwrap(), &token).unwrap();
        let v = to_vec_f64(one.tensor()).unwrap();
        assert_eq!(&v[0..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&v[4..8], &[9.0, 8.0, 7.0, 6.0]);
        assert_eq!(&v[8..12], &[8.0, 9.0, 10.0, 11.0]);
        // input untouched
        assert_eq!(to_vec_f64(x.tensor()).unwrap()[4], 4.0);
        assert!(MaskSpec::new(vec![vec![3]], 3).is_err());
    }

    #[test]
    fn mask_sampling_boundaries_and_determinism() {
        let mut rng = rng_for(1, "m");
        assert!(sample_mask(50, 0.0, 10, &mut rng).is_empty());
        assert_eq!(sample_mask(50, 1.0, 1, &mut rng), (0..50).collect::<Vec<_>>());
        let a = sample_mask(200, 0.065, 10, &mut rng_for(7, "m"));
        let b = sample_mask(200, 0.065, 10, &mut rng_for(7, "m"));
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < 200));
    }

    #[test]
    fn taps_have_levels_and_match_plain_forward() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F64, 0);
        let enc = SpeechEncoder::new(&mut store, "enc", &cfg).unwrap();
        let x = FrameSequence::new(Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap()).unwrap();
        let bundle = enc.transform_with_taps(&x).unwrap();
        assert_eq!(bundle.k(), 4);
        assert!(bundle.taps().iter().all(|t| t.shape() == (2, 5, 8)));
        assert_eq!(
            to_vec_f64(bundle.deep().tensor()).unwrap(),
            to_vec_f64(bundle.tap(2).tensor()).unwrap()
        );
        let plain = enc.forward(&x).unwrap();
        assert_eq!(
            to_vec_f64(plain.tensor()).unwrap(),
            to_vec_f64(bundle.target().tensor()).unwrap()
        );
        let again = enc.transform_with_taps(&x).unwrap();
        assert_eq!(
            to_vec_f64(again.target().tensor()).unwrap(),
            to_vec_f64(bundle.target().tensor()).unwrap()
        );
    }

    #[test]
    fn mask_token_gradient_depends_on_mask() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F64, 0);
        let enc = SpeechEncoder::new(&mut store, "enc", &cfg).unwrap();
        let x = FrameSequence::new(Tensor::randn(0f64, 1.0, (1, 6, 8), &Device::Cpu).unwrap()).unwrap();
        let token = store.var("enc.mask_token").unwrap().clone();
        for (mask, expect_nonzero) in [(MaskSpec::new(vec![vec![2, 3]], 6).unwrap(), true), (MaskSpec::empty(1, 6), false)] {
            let xt = enc.apply_mask(&x, &mask).unwrap();
            let loss = enc.forward(&xt).unwrap().tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let g = grads.get(token.as_tensor()).map(|g| to_vec_f64(g).unwrap());
            let norm: f64 = g.map(|g| g.iter().map(|v| v.abs()).sum()).unwrap_or(0.0);
            assert_eq!(norm > 0.0, expect_nonzero);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F32, 4);
        SpeechEncoder::new(&mut store, "enc", &cfg).unwrap();
        let mut sections = HashMap::new();
        sections.insert("objective".into(), "continuous".into());
        let info = CheckpointInfo { encoder: cfg.clone(), sections };
        save_checkpoint(&path, &store, &info).unwrap();
        let (loaded, info2) = load_checkpoint(&path, DType::F32, 0).unwrap();
        assert_eq!(info2, info);
        assert_eq!(loaded.len(), store.len());
        let mut loaded = loaded;
        SpeechEncoder::new(&mut loaded, "enc", &cfg).unwrap();
        assert_eq!(loaded.len(), store.len());
        assert!(load_checkpoint(&dir.path().join("missing"), DType::F32, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn frame_formula_matches_brute_force(len in 0usize..100_000) {
            let c = EncoderConfig::default();
            let brute = brute_force_frames(&c, len);
            prop_assert_eq!(c.output_frames(len).unwrap_or(0), brute);
        }
    }
}
