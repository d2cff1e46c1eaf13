//! Masked-frame reconstruction objectives.
//!
//! * quantized: Gumbel-softmax product quantizer, targets are codewords,
//!   scored with binary cross-entropy against sampled negatives;
//! * continuous: an EMA teacher encodes the unmasked frames and the mean of
//!   its last `L_c` layer outputs is regressed with MSE;
//! * CTC: a linear token head on the last layer for the toy ASR stage.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FrameSequence, LayerTapBundle, MaskSpec, SpeechEncoder};
use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore, SeededRng};

/// Codebook geometries swept in the quantized ablation, as `(books, words)`.
pub const ABLATION_CODEBOOKS: [(usize, usize); 5] = [(2, 2), (4, 2), (2, 8), (2, 12), (4, 8)];

/// Gumbel temperature annealed geometrically from `start` to `end` over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self { start: 2.0, end: 0.5 }
    }
}

impl GumbelSchedule {
    pub fn at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.start * (self.end / self.start).powf(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub n_books: usize,
    pub n_words: usize,
    pub n_negatives: usize,
    pub temperature: GumbelSchedule,
    pub diversity_weight: f64,
    /// Cosine similarities are multiplied by this before the BCE.
    pub similarity_scale: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            n_books: 2,
            n_words: 8,
            n_negatives: 10,
            temperature: GumbelSchedule::default(),
            diversity_weight: 0.1,
            similarity_scale: 10.0,
        }
    }
}

impl CodebookConfig {
    pub fn new(n_books: usize, n_words: usize) -> Self {
        Self {
            n_books,
            n_words,
            ..Self::default()
        }
    }

    /// Number of composite units, `W^B`.
    pub fn n_units(&self) -> usize {
        self.n_words.pow(self.n_books as u32)
    }

    pub fn code_dim(&self, model_dim: usize) -> usize {
        model_dim / self.n_books
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.n_books == 0 || self.n_words < 2 {
            return Err(Error::config("codebooks need at least one book of two words"));
        }
        if model_dim % self.n_books != 0 {
            return Err(Error::config(format!(
                "model_dim {model_dim} is not divisible by {} books",
                self.n_books
            )));
        }
        if self.temperature.start <= 0.0 || self.temperature.end <= 0.0 {
            return Err(Error::config("gumbel temperatures must be positive"));
        }
        Ok(())
    }
}

/// Targets for the masked frames of one batch.
#[derive(Debug, Clone)]
pub struct QuantizedTargets {
    /// `masked × model_dim` composite codewords, in [`MaskSpec::flat_positions`] order.
    pub positives: Option<Tensor>,
    /// Hard codeword index per book for every masked frame.
    pub codes: Vec<Vec<usize>>,
    /// Soft assignment probabilities averaged over all frames, `books × words`.
    pub avg_probs: Tensor,
}

pub struct GumbelQuantizer {
    cfg: CodebookConfig,
    logits: Linear,
    codebooks: Tensor,
}

impl GumbelQuantizer {
    pub fn new(store: &mut ParamStore, prefix: &str, model_dim: usize, cfg: &CodebookConfig) -> Result<Self> {
        cfg.validate(model_dim)?;
        let logits = Linear::new(store, &format!("{prefix}.logits"), model_dim, cfg.n_books * cfg.n_words)?;
        let codebooks = store.get(
            &format!("{prefix}.codebooks"),
            &[cfg.n_books, cfg.n_words, cfg.code_dim(model_dim)],
            Init::Uniform(1.0),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            logits,
            codebooks,
        })
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.cfg
    }

    pub fn codebooks(&self) -> &Tensor {
        &self.codebooks
    }

    /// Selects one codeword per book for every masked frame of `x`.
    ///
    /// With `noise` the selection is Gumbel-perturbed; the forward value is
    /// always the hard one-hot choice while gradients follow the tempered
    /// softmax (straight-through).
    pub fn quantize(
        &self,
        x: &FrameSequence,
        mask: &MaskSpec,
        temperature: f64,
        noise: Option<&mut SeededRng>,
    ) -> Result<QuantizedTargets> {
        let (b, t, d) = x.shape();
        let (nb, nw) = (self.cfg.n_books, self.cfg.n_words);
        let flat = x.tensor().reshape((b * t, d))?;
        let logits = self.logits.forward(&flat)?.reshape((b * t, nb, nw))?;
        let avg_probs = nn::softmax(&logits, 2)?.mean(0)?;
        let positions = mask.flat_positions();
        if positions.is_empty() {
            return Ok(QuantizedTargets {
                positives: None,
                codes: Vec::new(),
                avg_probs,
            });
        }
        let m = positions.len();
        let idx = Tensor::from_vec(
            positions.iter().map(|&p| p as u32).collect::<Vec<_>>(),
            m,
            &Device::Cpu,
        )?;
        let mut perturbed = logits.index_select(&idx, 0)?;
        if let Some(rng) = noise {
            let g: Vec<f64> = (0..m * nb * nw)
                .map(|_| {
                    let u: f64 = rng.random_range(1e-10..1.0);
                    -(-u.ln()).ln()
                })
                .collect();
            let g = Tensor::from_vec(g, (m, nb, nw), &Device::Cpu)?.to_dtype(perturbed.dtype())?;
            perturbed = perturbed.add(&g)?;
        }
        let soft = nn::softmax(&(perturbed.clone() / temperature)?, 2)?;
        let values = nn::to_vec_f64(&perturbed)?;
        let mut codes = Vec::with_capacity(m);
        let mut hard = vec![0f64; m * nb * nw];
        for i in 0..m {
            let mut row = Vec::with_capacity(nb);
            for book in 0..nb {
                let base = (i * nb + book) * nw;
                let best = argmax_first(&values[base..base + nw]);
                hard[base + best] = 1.0;
                row.push(best);
            }
            codes.push(row);
        }
        let hard = Tensor::from_vec(hard, (m, nb, nw), &Device::Cpu)?.to_dtype(soft.dtype())?;
        let select = (hard - soft.detach())?.add(&soft)?;
        // (books, m, words) x (books, words, code_dim) -> (books, m, code_dim)
        let q = select
            .transpose(0, 1)?
            .contiguous()?
            .matmul(&self.codebooks)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((m, d))?;
        Ok(QuantizedTargets {
            positives: Some(q),
            codes,
            avg_probs,
        })
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct QuantizedLoss {
    pub contrastive: Tensor,
    pub diversity: Tensor,
    pub total: Tensor,
    pub perplexity: f64,
}

/// Joint perplexity of the averaged codeword distribution, taken as the
/// product of per-book perplexities (at most `W^B`).
pub fn codebook_perplexity(avg_probs: &Tensor) -> Result<Tensor> {
    let p = avg_probs.clamp(1e-12, 1.0)?;
    let entropy = p.mul(&p.log()?)?.sum(1)?.neg()?;
    Ok(entropy.sum_all()?.exp()?)
}

/// Binary cross-entropy over (positive, sampled negatives) cosine logits for
/// every masked frame, plus the codebook diversity penalty.
pub fn quantized_contrastive_loss(
    x_hat: &FrameSequence,
    targets: &QuantizedTargets,
    mask: &MaskSpec,
    cfg: &CodebookConfig,
    rng: &mut SeededRng,
) -> Result<QuantizedLoss> {
    let dtype = x_hat.tensor().dtype();
    let perplexity = codebook_perplexity(&targets.avg_probs)?;
    let diversity = ((1.0 - (perplexity.clone() / cfg.n_units() as f64)?)? * cfg.diversity_weight)?;
    let perplexity_value = nn::scalar_f64(&perplexity)?;
    let positions = mask.flat_positions();
    let Some(positives) = targets.positives.as_ref().filter(|_| !positions.is_empty()) else {
        let zero = Tensor::zeros((), dtype, &Device::Cpu)?;
        return Ok(QuantizedLoss {
            total: diversity.clone(),
            contrastive: zero,
            diversity,
            perplexity: perplexity_value,
        });
    };
    let m = positions.len();
    let (b, t, d) = x_hat.shape();
    let k = cfg.n_negatives;
    let width = 1 + k;

    // Candidate rows into `positives`: column 0 is the positive.
    let mut cand = Vec::with_capacity(m * width);
    let mut weight = Vec::with_capacity(m * width);
    let mut offset = 0;
    for row in mask.indices() {
        let n = row.len();
        for j in 0..n {
            let me = offset + j;
            cand.push(me as u32);
            weight.push(1.0);
            for _ in 0..k {
                if n < 2 {
                    cand.push(me as u32);
                    weight.push(0.0);
                    continue;
                }
                let mut other = rng.random_range(0..n - 1);
                if other >= j {
                    other += 1;
                }
                let other = offset + other;
                cand.push(other as u32);
                // A negative carrying the positive's own codeword is no negative.
                weight.push(if targets.codes[other] == targets.codes[me] { 0.0 } else { 1.0 });
            }
        }
        offset += n;
    }
    let cand = Tensor::from_vec(cand, m * width, &Device::Cpu)?;
    let weight = Tensor::from_vec(weight, (m, width), &Device::Cpu)?.to_dtype(dtype)?;
    let mut label = vec![0f64; m * width];
    for i in 0..m {
        label[i * width] = 1.0;
    }
    let label = Tensor::from_vec(label, (m, width), &Device::Cpu)?.to_dtype(dtype)?;

    let pos_idx = Tensor::from_vec(
        positions.iter().map(|&p| p as u32).collect::<Vec<_>>(),
        m,
        &Device::Cpu,
    )?;
    let preds = x_hat.tensor().reshape((b * t, d))?.index_select(&pos_idx, 0)?;
    let cands = positives.index_select(&cand, 0)?.reshape((m, width, d))?;
    let cos = cosine_rows(&preds, &cands)?;
    let logits = (cos * cfg.similarity_scale)?;
    // label 1: softplus(-l); label 0: softplus(l)
    let sign = ((label.clone() * -2.0)? + 1.0)?;
    let bce = nn::softplus(&logits.mul(&sign)?)?;
    let contrastive = (bce.mul(&weight)?.sum_all()? / m as f64)?;
    let total = contrastive.add(&diversity)?;
    Ok(QuantizedLoss {
        contrastive,
        diversity,
        total,
        perplexity: perplexity_value,
    })
}

/// Cosine similarity between each `preds[i]` and every `cands[i, j]`.
fn cosine_rows(preds: &Tensor, cands: &Tensor) -> Result<Tensor> {
    let p = preds.unsqueeze(1)?;
    let dot = cands.broadcast_mul(&p)?.sum(2)?;
    let pn = (preds.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    let cn = (cands.sqr()?.sum(2)? + 1e-12)?.sqrt()?;
    Ok(dot.broadcast_div(&pn)?.div(&cn)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuousTargetConfig {
    pub n_layers: usize,
    pub ema_decay: f64,
    pub normalize_targets: bool,
}

impl Default for ContinuousTargetConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            ema_decay: 0.999,
            normalize_targets: true,
        }
    }
}

impl ContinuousTargetConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > k {
            return Err(Error::config(format!(
                "L_c = {} must lie in 1..={k}",
                self.n_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Exponential-moving-average copy of the student encoder's weights.
pub struct TeacherState {
    store: ParamStore,
    prefix: String,
    pub decay: f64,
}

impl TeacherState {
    /// Copies every student parameter whose name starts with `prefix`.
    pub fn from_student(student: &ParamStore, prefix: &str, decay: f64) -> Result<Self> {
        let mut store = ParamStore::new(student.dtype(), 0);
        for name in student.names().filter(|n| n.starts_with(prefix)) {
            let v = student.var(name).expect("name listed by store");
            store.insert(name, &v.as_tensor().copy()?)?;
        }
        Ok(Self {
            store,
            prefix: prefix.to_string(),
            decay,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Builds an encoder that reads the teacher's weights.
    pub fn encoder(&mut self, cfg: &EncoderConfig) -> Result<SpeechEncoder> {
        let before = self.store.len();
        let enc = SpeechEncoder::new(&mut self.store, &self.prefix, cfg)?;
        if self.store.len() != before {
            return Err(Error::Internal("teacher is missing encoder parameters".into()));
        }
        Ok(enc)
    }
}

/// `teacher <- tau * teacher + (1 - tau) * student`, elementwise.
pub fn update_teacher(teacher: &mut TeacherState, student: &ParamStore, tau: f64) -> Result<()> {
    for name in teacher.store.names().map(str::to_string).collect::<Vec<_>>() {
        let tv = teacher.store.var(&name).expect("listed");
        let sv = student
            .var(&name)
            .ok_or_else(|| Error::Internal(format!("student has no parameter {name}")))?;
        if tv.dims() != sv.dims() {
            return Err(Error::Internal(format!(
                "teacher/student shape mismatch for {name}: {:?} vs {:?}",
                tv.dims(),
                sv.dims()
            )));
        }
        let s = sv.as_tensor().detach();
        let new = if tau == 0.0 {
            s
        } else if tau == 1.0 {
            continue;
        } else {
            let t = tv.as_tensor().detach();
            // t + (1 - tau)(s - t): exact fixed point when s == t
            t.add(&(s.sub(&t)? * (1.0 - tau))?)?
        };
        tv.set(&new)?;
    }
    Ok(())
}

/// Mean of the teacher's last `L_c` layer outputs on unmasked frames, with
/// optional per-frame normalisation. Always detached.
pub fn continuous_targets(
    x_unmasked: &FrameSequence,
    teacher: &SpeechEncoder,
    cfg: &ContinuousTargetConfig,
) -> Result<FrameSequence> {
    let taps = teacher.transform_with_taps(&x_unmasked.detach())?;
    targets_from_taps(&taps, cfg)
}

pub fn targets_from_taps(taps: &LayerTapBundle, cfg: &ContinuousTargetConfig) -> Result<FrameSequence> {
    let k = taps.k();
    cfg.validate(k)?;
    let mut acc: Option<Tensor> = None;
    for layer in (k - cfg.n_layers + 1)..=k {
        let mut y = taps.tap(layer).tensor().detach();
        if cfg.normalize_targets {
            y = nn::normalize_last(&y, 1e-5)?;
        }
        acc = Some(match acc {
            None => y,
            Some(a) => a.add(&y)?,
        });
    }
    let mean = (acc.expect("n_layers >= 1") / cfg.n_layers as f64)?;
    FrameSequence::new(mean.detach())
}

/// Mean squared error over the masked frames only.
pub fn continuous_loss(x_hat: &FrameSequence, y: &FrameSequence, mask: &MaskSpec) -> Result<Tensor> {
    if x_hat.shape() != y.shape() {
        return Err(Error::input(format!(
            "prediction {:?} and target {:?} differ in shape",
            x_hat.shape(),
            y.shape()
        )));
    }
    let positions = mask.flat_positions();
    if positions.is_empty() {
        return Ok(Tensor::zeros((), x_hat.tensor().dtype(), &Device::Cpu)?);
    }
    let (b, t, d) = x_hat.shape();
    let idx = Tensor::from_vec(
        positions.iter().map(|&p| p as u32).collect::<Vec<_>>(),
        positions.len(),
        &Device::Cpu,
    )?;
    let p = x_hat.tensor().reshape((b * t, d))?.index_select(&idx, 0)?;
    let q = y.tensor().reshape((b * t, d))?.index_select(&idx, 0)?;
    Ok(p.sub(&q)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtcConfig {
    /// Token inventory including the blank (index 0).
    pub vocab_size: usize,
    pub head_dim: usize,
}

impl Default for CtcConfig {
    fn default() -> Self {
        Self {
            vocab_size: 13,
            head_dim: 32,
        }
    }
}

impl CtcConfig {
    pub const BLANK: usize = 0;

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("CTC vocabulary needs a blank and one symbol"));
        }
        Ok(())
    }
}

pub struct CtcHead {
    proj: Linear,
    cfg: CtcConfig,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &CtcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            proj: Linear::new(store, prefix, cfg.head_dim, cfg.vocab_size)?,
            cfg: cfg.clone(),
        })
    }

    /// `batch × frames × vocab` log-probabilities.
    pub fn log_probs(&self, frames: &FrameSequence) -> Result<Tensor> {
        nn::log_softmax(&self.proj.forward(frames.tensor())?, 2)
    }

    pub fn config(&self) -> &CtcConfig {
        &self.cfg
    }
}

/// CTC loss of the head on the last tap.
pub fn ctc_finetune_step(taps: &LayerTapBundle, targets: &[Vec<usize>], head: &CtcHead) -> Result<Tensor> {
    let lp = head.log_probs(taps.target())?;
    ctc_loss(&lp, targets, CtcConfig::BLANK)
}

/// Negative log-likelihood and its gradient with respect to the
/// log-probabilities, by the log-space forward-backward recursions.
/// `log_probs` is row-major `frames × vocab`.
pub fn ctc_nll_and_grad(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    if target.iter().any(|&s| s >= vocab || s == blank) {
        return Err(Error::input("CTC target contains blank or out-of-vocabulary symbol"));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if target.len() + repeats > frames {
        return Err(Error::input(format!(
            "CTC target of {} symbols ({repeats} repeats) does not fit in {frames} frames",
            target.len()
        )));
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &s in target {
        ext.push(s);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * vocab + k];
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if can_skip(s) {
                terms.push(prev[s - 2]);
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_sum_exp(&[alpha[last + s_len - 1], alpha[last + s_len - 2]])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::Numerical("CTC alignment probability underflowed".into()));
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = vec![next[s]];
            if s + 1 < s_len {
                terms.push(next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms.push(next[s + 2]);
            }
            beta[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }

    let mut grad = vec![0f64; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            // occupancy of (t, s), emission at t counted once
            let occ = (a + b - lp(t, ext[s]) - log_p).exp();
            grad[t * vocab + ext[s]] -= occ;
        }
    }
    Ok((-log_p, grad))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean CTC negative log-likelihood over the batch. Gradients reach
/// `log_probs` through the closed-form forward-backward derivative.
pub fn ctc_loss(log_probs: &Tensor, targets: &[Vec<usize>], blank: usize) -> Result<Tensor> {
    let (b, t, v) = log_probs.dims3()?;
    if targets.len() != b {
        return Err(Error::input(format!("{} CTC targets for batch of {b}", targets.len())));
    }
    let values = nn::to_vec_f64(log_probs)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(b * t * v);
    for (i, target) in targets.iter().enumerate() {
        let (nll, g) = ctc_nll_and_grad(&values[i * t * v..(i + 1) * t * v], t, v, target, blank)?;
        total += nll;
        grad.extend(g.into_iter().map(|x| x / b as f64));
    }
    let grad = Tensor::from_vec(grad, (b, t, v), &Device::Cpu)?.to_dtype(log_probs.dtype())?;
    let value = Tensor::new(total / b as f64, &Device::Cpu)?.to_dtype(log_probs.dtype())?;
    let linear = log_probs.mul(&grad)?.sum_all()?;
    // value in the forward pass, `grad` in the backward pass
    Ok(linear.sub(&linear.detach())?.add(&value)?)
}

/// Best-path decoding: per-frame argmax, repeats merged, blanks dropped.
pub fn greedy_decode(log_probs: &[f64], frames: usize, vocab: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frames {
        let best = argmax_first(&log_probs[t * vocab..(t + 1) * vocab]);
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn zeros_like_scalar(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}
