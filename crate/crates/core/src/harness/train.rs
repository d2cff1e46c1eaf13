//! Encoder pretraining with an optional detached emotion probe.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::coattention::{detach_for_probe, CoAttentionHead, HeadConfig};
use crate::encoder::{load_checkpoint, sample_batch_mask, save_checkpoint, CheckpointInfo, EncoderConfig, SpeechEncoder};
use crate::error::{Error, Result};
use crate::harness::config::{Objective, OptimConfig, RunConfig};
use crate::harness::cv::make_cv_plan;
use crate::harness::data::Corpus;
use crate::harness::metrics::{compute_metrics, utterance_vote, MetricsReport};
use crate::nn::{self, rng_for, ParamStore, SeededRng};
use crate::pretrain::{
    continuous_loss, continuous_targets, ctc_finetune_step, quantized_contrastive_loss, update_teacher, CodebookConfig,
    CtcHead, GumbelQuantizer, TeacherState,
};

pub const ENCODER_PREFIX: &str = "enc";

pub fn adamw(vars: Vec<candle_core::Var>, o: &OptimConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: o.lr,
            weight_decay: o.weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

pub fn ensure_finite(loss: &Tensor, what: &str) -> Result<f64> {
    let v = nn::scalar_f64(loss)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what}: loss became {v}")));
    }
    Ok(v)
}

/// Shuffled consecutive batches.
pub fn batches(items: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub perplexity: Option<f64>,
    pub probe: Option<MetricsReport>,
}

pub struct PretrainOutcome {
    pub store: ParamStore,
    pub encoder: EncoderConfig,
    pub history: Vec<PretrainEpoch>,
    pub sections: HashMap<String, String>,
}

impl PretrainOutcome {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_checkpoint(
            path,
            &self.store,
            &CheckpointInfo {
                encoder: self.encoder.clone(),
                sections: self.sections.clone(),
            },
        )
    }
}

enum ObjectiveState {
    Continuous { teacher: TeacherState, teacher_enc: SpeechEncoder },
    Quantized { quantizer: GumbelQuantizer, cfg: CodebookConfig },
    Ctc { head: CtcHead },
}

struct Probe {
    head: CoAttentionHead,
    opt: AdamW,
    rng: SeededRng,
}

/// Encoder weights only, taken from a checkpoint.
fn encoder_store(path: &Path, dtype: DType, seed: u64) -> Result<(ParamStore, EncoderConfig)> {
    let (full, info) = load_checkpoint(path, dtype, seed)?;
    let mut store = ParamStore::new(dtype, seed);
    for name in full.names().filter(|n| n.starts_with(ENCODER_PREFIX)) {
        store.insert(name, full.var(name).expect("listed").as_tensor())?;
    }
    Ok((store, info.encoder))
}

/// Trains an encoder on the configured objective over the training part of
/// the configured fold. With `probe` enabled, a co-attention head is trained
/// on the detached encoder output and evaluated on the held-out part after
/// every epoch. `max_steps` stops early (for tests).
pub fn run_pretrain(cfg: &RunConfig, corpus: &Corpus, max_steps: Option<usize>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let dtype = cfg.dtype();
    let (mut store, enc_cfg) = match &pc.init {
        Some(p) => encoder_store(p, dtype, cfg.seed)?,
        None => (ParamStore::new(dtype, cfg.seed), cfg.encoder.clone()),
    };
    enc_cfg.validate()?;
    let encoder = SpeechEncoder::new(&mut store, ENCODER_PREFIX, &enc_cfg)?;
    let mut sections = HashMap::new();
    sections.insert("objective".to_string(), format!("{:?}", pc.objective).to_lowercase());
    let mut objective = match pc.objective {
        Objective::Continuous => {
            pc.continuous.validate(enc_cfg.n_layers)?;
            sections.insert("target_layers".into(), pc.continuous.n_layers.to_string());
            let mut teacher = TeacherState::from_student(&store, ENCODER_PREFIX, pc.continuous.ema_decay)?;
            let teacher_enc = teacher.encoder(&enc_cfg)?;
            ObjectiveState::Continuous { teacher, teacher_enc }
        }
        Objective::Quantized => {
            let qc = CodebookConfig {
                n_negatives: pc.n_negatives,
                diversity_weight: pc.diversity_weight,
                ..CodebookConfig::new(pc.n_books, pc.n_words)
            };
            sections.insert("codebooks".into(), format!("{}x{}", qc.n_books, qc.n_words));
            let quantizer = GumbelQuantizer::new(&mut store, "quant", enc_cfg.model_dim, &qc)?;
            ObjectiveState::Quantized { quantizer, cfg: qc }
        }
        Objective::Ctc => {
            let cc = crate::pretrain::CtcConfig {
                head_dim: enc_cfg.model_dim,
                ..pc.ctc.clone()
            };
            ObjectiveState::Ctc {
                head: CtcHead::new(&mut store, "ctc", &cc)?,
            }
        }
    };
    let mut opt = adamw(store.vars(), &pc.optim)?;

    let plan = make_cv_plan(&corpus.records, cfg.data.cv)?;
    let fold = plan.fold(cfg.data.fold)?;
    let train_items = corpus.items_of(&fold.train);
    let frames = enc_cfg
        .output_frames(crate::audio::SEGMENT_SAMPLES)
        .ok_or_else(|| Error::config("segment is shorter than the encoder's receptive field"))?;

    let mut probe = if pc.probe {
        let mut pstore = ParamStore::new(dtype, cfg.seed ^ 0x9e37_79b9);
        let head_cfg = HeadConfig {
            with_vad_head: true,
            ..cfg.head.clone()
        };
        let head = CoAttentionHead::new(&mut pstore, "probe", &head_cfg, frames, enc_cfg.model_dim)?;
        let opt = adamw(pstore.vars(), &pc.probe_optim)?;
        Some(Probe {
            head,
            opt,
            rng: rng_for(cfg.seed, "probe-dropout"),
        })
    } else {
        None
    };

    let mut shuffle_rng = rng_for(cfg.seed, "pretrain-batches");
    let mut mask_rng = rng_for(cfg.seed, "pretrain-mask");
    let mut quant_rng = rng_for(cfg.seed, "pretrain-quantizer");
    let total_steps = pc.optim.epochs * train_items.len().div_ceil(pc.optim.batch_size);
    let mut step = 0usize;
    let mut history = Vec::new();
    'epochs: for epoch in 0..pc.optim.epochs {
        let (mut loss_sum, mut n_batches, mut ppl_sum) = (0.0, 0usize, 0.0);
        let mut stopped = false;
        for batch in batches(&train_items, pc.optim.batch_size, &mut shuffle_rng) {
            if max_steps.is_some_and(|m| step >= m) {
                if n_batches == 0 {
                    break 'epochs;
                }
                stopped = true;
                break;
            }
            let waves = corpus.waves(&batch, dtype)?;
            let x = encoder.encode_frames(&waves)?;
            let (loss, x_hat) = match &mut objective {
                ObjectiveState::Continuous { teacher_enc, .. } => {
                    let mask = sample_batch_mask(batch.len(), x.frames(), pc.mask_prob, pc.mask_span, &mut mask_rng);
                    let x_hat = encoder.forward(&encoder.apply_mask(&x, &mask)?)?;
                    let y = continuous_targets(&x, teacher_enc, &pc.continuous)?;
                    (continuous_loss(&x_hat, &y, &mask)?, x_hat)
                }
                ObjectiveState::Quantized { quantizer, cfg: qc } => {
                    let mask = sample_batch_mask(batch.len(), x.frames(), pc.mask_prob, pc.mask_span, &mut mask_rng);
                    let x_hat = encoder.forward(&encoder.apply_mask(&x, &mask)?)?;
                    let progress = step as f64 / total_steps.max(1) as f64;
                    let targets = quantizer.quantize(&x, &mask, pc.gumbel.at(progress), Some(&mut quant_rng))?;
                    let l = quantized_contrastive_loss(&x_hat, &targets, &mask, qc, &mut quant_rng)?;
                    ppl_sum += l.perplexity;
                    (l.total, x_hat)
                }
                ObjectiveState::Ctc { head } => {
                    let taps = encoder.transform_with_taps(&x)?;
                    let loss = ctc_finetune_step(&taps, &corpus.ctc_targets(&batch), head)?;
                    (loss, taps.target().clone())
                }
            };
            let value = ensure_finite(&loss, &format!("pretrain epoch {epoch} step {step}"))?;
            opt.backward_step(&loss)?;
            if let ObjectiveState::Continuous { teacher, .. } = &mut objective {
                let decay = teacher.decay;
                update_teacher(teacher, &store, decay)?;
            }
            if let Some(p) = probe.as_mut() {
                let spec = corpus.spectrograms(&batch, dtype)?;
                let out = p.head.forward_single(&spec, &detach_for_probe(&x_hat), Some(&mut p.rng))?;
                let ce = nn::cross_entropy(&out.logits, &corpus.labels(&batch))?;
                let vad = out.vad.as_ref().expect("probe has a V/A/D head");
                let mse = vad.sub(&corpus.vad(&batch, dtype)?)?.sqr()?.mean_all()?;
                let ploss = ce.add(&mse)?;
                ensure_finite(&ploss, &format!("probe epoch {epoch} step {step}"))?;
                p.opt.backward_step(&ploss)?;
            }
            loss_sum += value;
            n_batches += 1;
            step += 1;
        }
        let probe_report = match &probe {
            Some(p) => Some(evaluate_probe(&encoder, &p.head, corpus, &fold.test, pc.probe_optim.batch_size, dtype)?),
            None => None,
        };
        let quantized = matches!(objective, ObjectiveState::Quantized { .. });
        history.push(PretrainEpoch {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            perplexity: (quantized && n_batches > 0).then(|| ppl_sum / n_batches as f64),
            probe: probe_report,
        });
        log::info!("pretrain epoch {epoch}: loss {:.4}", loss_sum / n_batches.max(1) as f64);
        if stopped {
            break;
        }
    }
    Ok(PretrainOutcome {
        store,
        encoder: enc_cfg,
        history,
        sections,
    })
}

/// Utterance-level classification and V/A/D metrics of the probe on `records`,
/// reading the encoder output for unmasked input.
pub fn evaluate_probe(
    encoder: &SpeechEncoder,
    head: &CoAttentionHead,
    corpus: &Corpus,
    records: &[usize],
    batch_size: usize,
    dtype: DType,
) -> Result<MetricsReport> {
    let items = corpus.items_of(records);
    let mut logits: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut vads: HashMap<usize, Vec<f64>> = HashMap::new();
    for chunk in items.chunks(batch_size.max(1)) {
        let x_hat = encoder.forward(&encoder.encode_frames(&corpus.waves(chunk, dtype)?)?)?;
        let out = head.forward_single(&corpus.spectrograms(chunk, dtype)?, &x_hat.detach(), None)?;
        let l = nn::to_vec_f64(&out.logits)?;
        let v = nn::to_vec_f64(out.vad.as_ref().expect("probe has a V/A/D head"))?;
        let c = l.len() / chunk.len();
        for (j, &it) in chunk.iter().enumerate() {
            logits.insert(it, l[j * c..(j + 1) * c].to_vec());
            vads.insert(it, v[j * 3..(j + 1) * 3].to_vec());
        }
    }
    let (mut preds, mut labels, mut vad_pred, mut vad_true) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &r in records {
        let segs = &corpus.by_record[r];
        let (p, _) = utterance_vote(&segs.iter().map(|i| logits[i].clone()).collect::<Vec<_>>())?;
        preds.push(p);
        labels.push(corpus.records[r].klass.index());
        let mut mean = [0.0; 3];
        for i in segs {
            for k in 0..3 {
                mean[k] += vads[i][k] / segs.len() as f64;
            }
        }
        vad_pred.push(mean);
        vad_true.push(corpus.records[r].vad());
    }
    compute_metrics(&preds, &labels, Some((&vad_pred, &vad_true)))
}
