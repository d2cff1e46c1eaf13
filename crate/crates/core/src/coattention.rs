//! Dual-stream co-attention head: spectrogram guide vectors pool two frame
//! streams into utterance vectors for classification.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameSequence;
use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Angry,
    Sad,
    Happy,
    Neutral,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 4] = [
        EmotionClass::Angry,
        EmotionClass::Sad,
        EmotionClass::Happy,
        EmotionClass::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Angry => "angry",
            EmotionClass::Sad => "sad",
            EmotionClass::Happy => "happy",
            EmotionClass::Neutral => "neutral",
        }
    }

    /// Parses a corpus label. "excited" is merged into happy.
    pub fn parse(label: &str) -> Option<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "angry" | "ang" => Some(EmotionClass::Angry),
            "sad" => Some(EmotionClass::Sad),
            "happy" | "hap" | "excited" | "exc" => Some(EmotionClass::Happy),
            "neutral" | "neu" => Some(EmotionClass::Neutral),
            _ => None,
        }
    }
}

impl std::fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub klass: EmotionClass,
    pub v: f64,
    pub a: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub n_guides: usize,
    pub mlp_hidden: Vec<usize>,
    pub n_classes: usize,
    pub with_vad_head: bool,
    pub dropout: f64,
    pub conv_channels: Vec<usize>,
    /// Spectrogram frames × bins.
    pub spectrogram: (usize, usize),
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_guides: 4,
            mlp_hidden: vec![256],
            n_classes: 4,
            with_vad_head: false,
            dropout: 0.1,
            conv_channels: vec![16, 32, 64, 64, 32],
            spectrogram: (crate::audio::SPEC_FRAMES, crate::audio::SPEC_BINS),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_guides == 0 {
            return Err(Error::config("n_guides must be at least 1"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be at least 1"));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::config("the spectrogram encoder needs at least one stage"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.feature_shape().map(|_| ())
    }

    /// Output map size (channels, height, width) of the convolution stack.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = self.spectrogram;
        for _ in &self.conv_channels {
            h = stage_out(h)?;
            w = stage_out(w)?;
        }
        Ok((*self.conv_channels.last().expect("validated"), h, w))
    }

    pub fn feature_len(&self) -> Result<usize> {
        let (c, h, w) = self.feature_shape()?;
        Ok(c * h * w)
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;

fn fit_len(len: usize) -> usize {
    len + (len - KERNEL) % STRIDE
}

fn stage_out(len: usize) -> Result<usize> {
    if len < KERNEL {
        return Err(Error::config(format!("spectrogram axis of {len} is too small for the stage stack")));
    }
    Ok((fit_len(len) - KERNEL) / STRIDE + 1)
}

// Rows offset, offset+2, ... (n of them) along `dim`. Needs offset + 2n <= len.
fn every_other(x: &Tensor, dim: usize, offset: usize, n: usize) -> Result<Tensor> {
    let mut dims = x.dims().to_vec();
    dims[dim] = n;
    let mut split = dims.clone();
    split.insert(dim + 1, 2);
    Ok(x.narrow(dim, offset, 2 * n)?.reshape(split)?.narrow(dim + 1, 0, 1)?.reshape(dims)?)
}

/// Stride-2, kernel-3 convolution as patch extraction plus one matmul. The far
/// edge is zero-padded so every kernel placement lands exactly.
fn conv_stage(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (nh, nw) = (stage_out(h)?, stage_out(w)?);
    let x = x.pad_with_zeros(2, 0, STRIDE * nh + 2 - h)?.pad_with_zeros(3, 0, STRIDE * nw + 2 - w)?;
    let mut patches = Vec::with_capacity(KERNEL * KERNEL);
    for i in 0..KERNEL {
        let rows = every_other(&x, 2, i, nh)?;
        for j in 0..KERNEL {
            patches.push(every_other(&rows, 3, j, nw)?);
        }
    }
    let p = Tensor::stack(&patches, 2)?.reshape((b, c * KERNEL * KERNEL, nh * nw))?;
    let c_out = weight.dim(0)?;
    let y = weight.reshape((c_out, c * KERNEL * KERNEL))?.broadcast_matmul(&p)?;
    Ok(y.broadcast_add(&bias.reshape((1, c_out, 1))?)?.reshape((b, c_out, nh, nw))?)
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: Tensor,
    bias: Tensor,
}

/// Convolutional stack over a spectrogram image followed by a linear map to
/// `2·N·T` guide logits.
#[derive(Clone, Debug)]
pub struct SpectrogramEncoder {
    stages: Vec<ConvStage>,
    out: Linear,
    frames: usize,
    n_guides: usize,
    spectrogram: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct GuideVectors {
    /// `batch × 2·N·T`.
    pub flat: Tensor,
    /// `batch × N × T` for the speech stream.
    pub first: Tensor,
    /// `batch × N × T` for the fused stream.
    pub second: Tensor,
}

impl SpectrogramEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, frames: usize) -> Result<Self> {
        cfg.validate()?;
        if frames == 0 {
            return Err(Error::config("frame stream must have at least one frame"));
        }
        let mut stages = Vec::with_capacity(cfg.conv_channels.len());
        let mut c_in = 1;
        for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
            let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
            let weight = store.get(&format!("{prefix}.conv{i}.weight"), &[c_out, c_in, KERNEL, KERNEL], Init::Normal(std))?;
            let bias = store.get(&format!("{prefix}.conv{i}.bias"), &[c_out], Init::Zeros)?;
            stages.push(ConvStage { weight, bias });
            c_in = c_out;
        }
        // zero guides: pooling starts as a plain frame mean
        let out = Linear::with_init(
            store,
            &format!("{prefix}.guide"),
            cfg.feature_len()?,
            2 * cfg.n_guides * frames,
            Init::Zeros,
            Init::Zeros,
        )?;
        Ok(Self {
            stages,
            out,
            frames,
            n_guides: cfg.n_guides,
            spectrogram: cfg.spectrogram,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Flattened convolution features for `batch × frames × bins` images.
    pub fn features(&self, spec: &Tensor) -> Result<Tensor> {
        let (b, h, w) = spec.dims3()?;
        if (h, w) != self.spectrogram {
            return Err(Error::input(format!(
                "spectrogram is {h}×{w}, expected {}×{}",
                self.spectrogram.0, self.spectrogram.1
            )));
        }
        let mut x = spec.reshape((b, 1, h, w))?;
        for s in &self.stages {
            x = conv_stage(&x, &s.weight, &s.bias)?.relu()?;
        }
        Ok(x.flatten_from(1)?)
    }

    pub fn encode_guides(&self, spec: &Tensor) -> Result<GuideVectors> {
        let flat = self.out.forward(&self.features(spec)?)?;
        let b = flat.dim(0)?;
        let half = self.n_guides * self.frames;
        let first = flat.narrow(1, 0, half)?.reshape((b, self.n_guides, self.frames))?;
        let second = flat.narrow(1, half, half)?.reshape((b, self.n_guides, self.frames))?;
        Ok(GuideVectors { flat, first, second })
    }
}

/// `result[n] = sum_t softmax(guide[n])_t · frames[t]`, `batch × N × D`.
pub fn coattend(guide: &Tensor, frames: &FrameSequence) -> Result<Tensor> {
    let (gb, _, gt) = guide.dims3()?;
    let (fb, ft, _) = frames.shape();
    if gt != ft || gb != fb {
        return Err(Error::input(format!(
            "guide covers {gb}×{gt} (batch×frames) but the stream is {fb}×{ft}"
        )));
    }
    let w = nn::softmax(guide, 2)?;
    Ok(w.matmul(frames.tensor())?)
}

/// Gradient-stopped view for the probe protocol.
pub fn detach_for_probe(x: &FrameSequence) -> FrameSequence {
    x.detach()
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub vad: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct CoAttentionHead {
    guides: SpectrogramEncoder,
    hidden: Vec<Linear>,
    classifier: Linear,
    vad: Option<Linear>,
    dropout: f64,
}

impl CoAttentionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, frames: usize, model_dim: usize) -> Result<Self> {
        let guides = SpectrogramEncoder::new(store, &format!("{prefix}.spec"), cfg, frames)?;
        let mut hidden = Vec::new();
        let mut d = 2 * cfg.n_guides * model_dim;
        for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{prefix}.mlp{i}"), d, h)?);
            d = h;
        }
        let classifier = Linear::new(store, &format!("{prefix}.classes"), d, cfg.n_classes)?;
        let vad = if cfg.with_vad_head {
            Some(Linear::new(store, &format!("{prefix}.vad"), d, 3)?)
        } else {
            None
        };
        Ok(Self {
            guides,
            hidden,
            classifier,
            vad,
            dropout: cfg.dropout,
        })
    }

    pub fn spectrogram_encoder(&self) -> &SpectrogramEncoder {
        &self.guides
    }

    pub fn first_layer(&self) -> Option<&Linear> {
        self.hidden.first()
    }

    /// MLP over the concatenated pooled streams. Dropout applies only when an
    /// RNG is supplied.
    pub fn classify(&self, x_e_pooled: &Tensor, x_o_pooled: &Tensor, rng: Option<&mut SeededRng>) -> Result<HeadOutput> {
        let b = x_e_pooled.dim(0)?;
        let mut h = Tensor::cat(&[x_e_pooled.reshape((b, ()))?, x_o_pooled.reshape((b, ()))?], 1)?;
        let mut rng = rng;
        for layer in &self.hidden {
            h = layer.forward(&h)?.relu()?;
            if let Some(r) = rng.as_deref_mut() {
                h = nn::dropout(&h, self.dropout, r)?;
            }
        }
        let logits = self.classifier.forward(&h)?;
        let vad = match &self.vad {
            Some(l) => Some(l.forward(&h)?),
            None => None,
        };
        Ok(HeadOutput { logits, vad })
    }

    /// Both streams must have the frame count the head was built for.
    pub fn forward(
        &self,
        spec: &Tensor,
        x_e_target: &FrameSequence,
        x_o: &FrameSequence,
        rng: Option<&mut SeededRng>,
    ) -> Result<HeadOutput> {
        for x in [x_e_target, x_o] {
            if x.frames() != self.guides.frames {
                return Err(Error::config(format!(
                    "head was built for {} frames but the stream has {}",
                    self.guides.frames,
                    x.frames()
                )));
            }
        }
        let g = self.guides.encode_guides(spec)?;
        let e = coattend(&g.first, x_e_target)?;
        let o = coattend(&g.second, x_o)?;
        self.classify(&e, &o, rng)
    }

    /// Single-stream probe: both guides pool the same stream.
    pub fn forward_single(&self, spec: &Tensor, x: &FrameSequence, rng: Option<&mut SeededRng>) -> Result<HeadOutput> {
        self.forward(spec, x, x, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, probe_tensor, project};
    use crate::nn::{rng_for, to_vec_f64};
    use candle_core::{DType, Device, Var};

    fn toy_cfg() -> HeadConfig {
        HeadConfig {
            n_guides: 2,
            mlp_hidden: vec![5],
            n_classes: 4,
            with_vad_head: true,
            dropout: 0.1,
            conv_channels: vec![2, 2],
            spectrogram: (8, 8),
        }
    }

    fn fs(shape: &[usize], seed: u64) -> FrameSequence {
        FrameSequence::new(probe_tensor(shape, seed).unwrap()).unwrap()
    }

    #[test]
    fn default_stack_matches_exact_fit_sizes() {
        let cfg = HeadConfig::default();
        assert_eq!(cfg.feature_shape().unwrap(), (32, 9, 6));
        assert_eq!(cfg.feature_len().unwrap(), 1728);
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = SpectrogramEncoder::new(&mut store, "s", &cfg, 149).unwrap();
        let spec = Tensor::zeros((1, 300, 200), DType::F32, &Device::Cpu).unwrap();
        let g = enc.encode_guides(&spec).unwrap();
        assert_eq!(g.flat.dims(), &[1, 1192]);
        assert_eq!(g.first.dims(), &[1, 4, 149]);
        assert_eq!(g.second.dims(), &[1, 4, 149]);
        let flat = to_vec_f64(&g.flat).unwrap();
        let mut joined = to_vec_f64(&g.first).unwrap();
        joined.extend(to_vec_f64(&g.second).unwrap());
        assert_eq!(flat, joined);
    }

    #[test]
    fn patch_convolution_matches_direct_convolution() {
        let x = probe_tensor(&[2, 3, 11, 8], 1).unwrap();
        let w = probe_tensor(&[4, 3, 3, 3], 2).unwrap();
        let b = probe_tensor(&[4], 3).unwrap();
        let ours = conv_stage(&x, &w, &b).unwrap();
        let direct = x
            .pad_with_zeros(3, 0, 1)
            .unwrap()
            .conv2d(&w, 0, 2, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert_eq!(ours.dims(), &[2, 4, 5, 4]);
        let a = to_vec_f64(&ours).unwrap();
        let d = to_vec_f64(&direct).unwrap();
        assert!(a.iter().zip(&d).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn zero_spectrogram_with_zero_bias_gives_zero_guides() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new(DType::F64, 0);
        let enc = SpectrogramEncoder::new(&mut store, "s", &cfg, 8).unwrap();
        store.insert("s.guide.bias", &Tensor::zeros(32, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let g = enc.encode_guides(&Tensor::zeros((1, 8, 8), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(to_vec_f64(&g.flat).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_mismatch_is_a_config_error() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new(DType::F64, 0);
        let head = CoAttentionHead::new(&mut store, "h", &cfg, 8, 4).unwrap();
        let spec = probe_tensor(&[1, 8, 8], 1).unwrap();
        let x = fs(&[1, 7, 4], 2);
        assert!(matches!(head.forward_single(&spec, &x, None), Err(Error::Config(_))));
        assert!(matches!(coattend(&probe_tensor(&[1, 2, 8], 1).unwrap(), &x), Err(Error::Input(_))));
    }

    #[test]
    fn pooling_special_cases() {
        let frames = fs(&[1, 6, 3], 4);
        let mut g = vec![0.0f64; 12];
        g[2] = 1e4;
        let guide = Tensor::from_vec(g, (1, 2, 6), &Device::Cpu).unwrap();
        let out = to_vec_f64(&coattend(&guide, &frames).unwrap()).unwrap();
        let f = to_vec_f64(frames.tensor()).unwrap();
        for d in 0..3 {
            assert!((out[d] - f[2 * 3 + d]).abs() < 1e-4);
            let mean: f64 = (0..6).map(|t| f[t * 3 + d]).sum::<f64>() / 6.0;
            assert!((out[3 + d] - mean).abs() < 1e-12);
        }

        let c = Tensor::new(&[0.5f64, -2.0, 3.0], &Device::Cpu).unwrap().reshape((1, 1, 3)).unwrap();
        let constant = FrameSequence::new(c.broadcast_as((1, 6, 3)).unwrap().contiguous().unwrap()).unwrap();
        let out = to_vec_f64(&coattend(&probe_tensor(&[1, 3, 6], 9).unwrap(), &constant).unwrap()).unwrap();
        for row in out.chunks(3) {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 2.0).abs() < 1e-12 && (row[2] - 3.0).abs() < 1e-12);
        }

        let w = nn::softmax(&probe_tensor(&[2, 3, 6], 3).unwrap(), 2).unwrap();
        assert!(to_vec_f64(&w.sum(2).unwrap()).unwrap().iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn appending_zero_weight_frames_changes_nothing() {
        let frames = fs(&[1, 5, 3], 1);
        let guide = probe_tensor(&[1, 2, 5], 2).unwrap();
        let base = coattend(&guide, &frames).unwrap();
        let extra = FrameSequence::new(Tensor::cat(&[frames.tensor(), &probe_tensor(&[1, 3, 3], 7).unwrap()], 1).unwrap()).unwrap();
        let pad = (Tensor::ones((1, 2, 3), DType::F64, &Device::Cpu).unwrap() * -1e4).unwrap();
        let longer = Tensor::cat(&[&guide, &pad], 2).unwrap();
        let out = coattend(&longer, &extra).unwrap();
        let a = to_vec_f64(&base).unwrap();
        let b = to_vec_f64(&out).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn classify_shapes_and_permutation_identity() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new(DType::F64, 3);
        let head = CoAttentionHead::new(&mut store, "h", &cfg, 8, 4).unwrap();
        let e = probe_tensor(&[2, 2, 4], 1).unwrap();
        let o = probe_tensor(&[2, 2, 4], 2).unwrap();
        let out = head.classify(&e, &o, None).unwrap();
        assert_eq!(out.logits.dims(), &[2, 4]);
        let vad = out.vad.unwrap();
        assert_eq!(vad.dims(), &[2, 3]);
        assert!(nn::all_finite(&vad).unwrap());

        let first = head.first_layer().unwrap();
        let w = &first.weight;
        let swapped_w = Tensor::cat(&[w.narrow(1, 8, 8).unwrap(), w.narrow(1, 0, 8).unwrap()], 1).unwrap();
        let mut swapped = head.clone();
        swapped.hidden[0] = Linear {
            weight: swapped_w,
            bias: first.bias.clone(),
        };
        let again = swapped.classify(&o, &e, None).unwrap();
        let a = to_vec_f64(&out.logits).unwrap();
        let b = to_vec_f64(&again.logits).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn emotion_labels_merge_excited() {
        assert_eq!(EmotionClass::parse("excited"), Some(EmotionClass::Happy));
        assert_eq!(EmotionClass::parse("Happy"), Some(EmotionClass::Happy));
        assert_eq!(EmotionClass::parse("frustrated"), None);
        for c in EmotionClass::ALL {
            assert_eq!(EmotionClass::from_index(c.index()), Some(c));
            assert_eq!(EmotionClass::parse(c.name()), Some(c));
        }
    }

    #[test]
    fn coattend_gradient_matches_finite_differences() {
        let r = gradcheck::check(&[probe_tensor(&[1, 2, 8], 1).unwrap(), probe_tensor(&[1, 8, 8], 2).unwrap()], 1e-6, |x| {
            project(&coattend(&x[0], &FrameSequence::new(x[1].clone())?)?, 5)
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-3, "{:?}", r.relative_errors);
    }

    #[test]
    fn full_head_gradient_matches_finite_differences() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new(DType::F64, 11);
        let head = CoAttentionHead::new(&mut store, "h", &cfg, 8, 4).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs = vec![
            probe_tensor(&[1, 8, 8], 1).unwrap().abs().unwrap(),
            probe_tensor(&[1, 8, 4], 2).unwrap(),
            probe_tensor(&[1, 8, 4], 3).unwrap(),
        ];
        // nonzero biases keep every ReLU away from its kink
        for (i, n) in names.iter().enumerate() {
            let t = store.var(n).unwrap().as_tensor().copy().unwrap();
            inputs.push(if n.ends_with("bias") {
                (probe_tensor(t.dims(), 100 + i as u64).unwrap() * 0.3).unwrap()
            } else {
                t
            });
        }
        let r = gradcheck::check(&inputs, 1e-6, |x| {
            let mut s = ParamStore::new(DType::F64, 0);
            for (n, t) in names.iter().zip(&x[3..]) {
                s.insert(n, t)?;
            }
            let rebuilt = rebuild(&head, &s)?;
            let out = rebuilt.forward(&x[0], &FrameSequence::new(x[1].clone())?, &FrameSequence::new(x[2].clone())?, None)?;
            Ok(project(&out.logits, 7)?.add(&project(out.vad.as_ref().unwrap(), 8)?)?)
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-3, "{:?}", r.relative_errors);
    }

    // Swaps every parameter tensor of `head` for the same-named one in `s`.
    fn rebuild(head: &CoAttentionHead, s: &ParamStore) -> Result<CoAttentionHead> {
        let t = |n: &str| s.var(n).unwrap().as_tensor().clone();
        let lin = |n: &str| Linear {
            weight: t(&format!("{n}.weight")),
            bias: Some(t(&format!("{n}.bias"))),
        };
        let mut h = head.clone();
        for (i, st) in h.guides.stages.iter_mut().enumerate() {
            st.weight = t(&format!("h.spec.conv{i}.weight"));
            st.bias = t(&format!("h.spec.conv{i}.bias"));
        }
        h.guides.out = lin("h.spec.guide");
        for (i, l) in h.hidden.iter_mut().enumerate() {
            *l = lin(&format!("h.mlp{i}"));
        }
        h.classifier = lin("h.classes");
        h.vad = Some(lin("h.vad"));
        Ok(h)
    }

    #[test]
    fn detached_probe_leaves_encoder_gradient_untouched() {
        let w = Var::from_tensor(&probe_tensor(&[4, 4], 1).unwrap()).unwrap();
        let input = probe_tensor(&[1, 8, 4], 2).unwrap();
        let x = FrameSequence::new(input.broadcast_matmul(w.as_tensor()).unwrap()).unwrap();
        let recon = x.tensor().sqr().unwrap().sum_all().unwrap();

        let cfg = toy_cfg();
        let mut store = ParamStore::new(DType::F64, 5);
        let head = CoAttentionHead::new(&mut store, "h", &cfg, 8, 4).unwrap();
        let probed = detach_for_probe(&x);
        assert_eq!(to_vec_f64(probed.tensor()).unwrap(), to_vec_f64(x.tensor()).unwrap());
        let spec = probe_tensor(&[1, 8, 8], 3).unwrap();
        let out = head.forward_single(&spec, &probed, Some(&mut rng_for(1, "drop"))).unwrap();
        let probe_loss = nn::cross_entropy(&out.logits, &[2]).unwrap();

        let only_probe = probe_loss.backward().unwrap();
        assert!(only_probe.get(w.as_tensor()).is_none());
        let g_alone = recon.backward().unwrap();
        let g_both = recon.add(&probe_loss).unwrap().backward().unwrap();
        let a = to_vec_f64(g_alone.get(w.as_tensor()).unwrap()).unwrap();
        let b = to_vec_f64(g_both.get(w.as_tensor()).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
