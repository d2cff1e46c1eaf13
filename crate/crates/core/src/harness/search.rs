//! Fusion search over frozen extractors, derived single-path training and
//! held-out evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, SGD};
use serde::{Deserialize, Serialize};

use crate::coattention::CoAttentionHead;
use crate::encoder::{load_checkpoint, EncoderConfig, FrameSequence, Level, SpeechEncoder};
use crate::error::{Error, Result};
use crate::fusion::{
    argmax_ops, derive_strategy, fusion_cell_forward, AlphaSnapshot, AlphaTable, FusionParams, FusionStrategy,
    OperationId, ValidationScore,
};
use crate::harness::config::RunConfig;
use crate::harness::cv::{make_cv_plan, validation_split};
use crate::harness::data::Corpus;
use crate::harness::metrics::{compute_metrics, utterance_vote, MetricsReport};
use crate::harness::train::{adamw, batches, ensure_finite, ENCODER_PREFIX};
use crate::nn::{self, rng_for, ParamStore, SeededRng};

/// Frozen extractor outputs for every corpus segment, `segments × T × D`.
#[derive(Debug, Clone)]
pub struct Features {
    pub raw: Tensor,
    pub deep: Tensor,
    pub target: Tensor,
    pub text: Tensor,
}

impl Features {
    pub fn level(&self, level: Level) -> &Tensor {
        match level {
            Level::Raw => &self.raw,
            Level::Deep => &self.deep,
            Level::Target => &self.target,
        }
    }

    pub fn frames(&self) -> usize {
        self.target.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.target.dims()[2]
    }
}

fn load_encoder(path: &Path, dtype: DType) -> Result<(SpeechEncoder, EncoderConfig)> {
    let (mut store, info) = load_checkpoint(path, dtype, 0)?;
    let enc = SpeechEncoder::new(&mut store, ENCODER_PREFIX, &info.encoder)?;
    Ok((enc, info.encoder))
}

/// Runs both frozen extractors over the whole corpus.
pub fn extract_features(cfg: &RunConfig, corpus: &Corpus) -> Result<Features> {
    let dtype = cfg.dtype();
    let (speech, sc) = load_encoder(&cfg.search.speech_checkpoint, dtype)?;
    let (text, tc) = load_encoder(&cfg.search.text_checkpoint, dtype)?;
    if sc.model_dim != tc.model_dim || sc.output_frames(48_000) != tc.output_frames(48_000) {
        return Err(Error::config("speech and text extractors produce different frame layouts"));
    }
    features_from_encoders(&speech, &text, corpus, cfg.search.optim.batch_size, dtype)
}

pub fn features_from_encoders(
    speech: &SpeechEncoder,
    text: &SpeechEncoder,
    corpus: &Corpus,
    batch_size: usize,
    dtype: DType,
) -> Result<Features> {
    let all: Vec<usize> = (0..corpus.items.len()).collect();
    let (mut raw, mut deep, mut target, mut txt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in all.chunks(batch_size.max(1)) {
        let waves = corpus.waves(chunk, dtype)?;
        let (_, taps) = speech.forward_waves(&waves, None)?;
        raw.push(taps.raw().tensor().detach());
        deep.push(taps.deep().tensor().detach());
        target.push(taps.target().tensor().detach());
        let (x_t, _) = text.forward_waves(&waves, None)?;
        txt.push(x_t.tensor().detach());
    }
    let cat = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::cat(&v, 0)?) };
    Ok(Features {
        raw: cat(raw)?,
        deep: cat(deep)?,
        target: cat(target)?,
        text: cat(txt)?,
    })
}

fn select(t: &Tensor, items: &[usize]) -> Result<FrameSequence> {
    let idx = Tensor::from_vec(items.iter().map(|&i| i as u32).collect::<Vec<_>>(), items.len(), &Device::Cpu)?;
    FrameSequence::new(t.index_select(&idx, 0)?)
}

/// How the fused stream is formed.
#[derive(Debug, Clone, Copy)]
pub enum FusionPath<'a> {
    /// Softmax mixture with the given 8-entry logit row.
    Mixture(&'a Tensor),
    Single(OperationId),
}

/// Fusion cells for every level plus the co-attention head.
pub struct FusionModel {
    pub store: ParamStore,
    pub fusion: FusionParams,
    pub head: CoAttentionHead,
}

impl FusionModel {
    /// Creates the model, reusing any parameters already present in `store`.
    pub fn new(mut store: ParamStore, cfg: &RunConfig, frames: usize, dim: usize) -> Result<Self> {
        let fusion = FusionParams::new(&mut store, "fusion", dim, &cfg.fusion)?;
        let head = CoAttentionHead::new(&mut store, "head", &cfg.head, frames, dim)?;
        Ok(Self { store, fusion, head })
    }

    pub fn logits(
        &self,
        corpus: &Corpus,
        feats: &Features,
        items: &[usize],
        level: Level,
        path: FusionPath<'_>,
        rng: Option<&mut SeededRng>,
    ) -> Result<Tensor> {
        let dtype = feats.target.dtype();
        let x_e = select(feats.level(level), items)?;
        let x_t = select(&feats.text, items)?;
        let cell = self.fusion.cell(level);
        let x_o = match path {
            FusionPath::Mixture(row) => fusion_cell_forward(&x_e, &x_t, row, cell)?,
            FusionPath::Single(op) => cell.apply(op, &x_e, &x_t)?,
        };
        let x_target = select(&feats.target, items)?;
        let spec = corpus.spectrograms(items, dtype)?;
        Ok(self.head.forward(&spec, &x_target, &x_o, rng)?.logits)
    }

    /// Utterance-level metrics over `records`.
    pub fn evaluate(
        &self,
        corpus: &Corpus,
        feats: &Features,
        records: &[usize],
        level: Level,
        path: FusionPath<'_>,
        batch_size: usize,
    ) -> Result<MetricsReport> {
        let items = corpus.items_of(records);
        let mut per_item: HashMap<usize, Vec<f64>> = HashMap::new();
        for chunk in items.chunks(batch_size.max(1)) {
            let l = nn::to_vec_f64(&self.logits(corpus, feats, chunk, level, path, None)?)?;
            let c = l.len() / chunk.len();
            for (j, &it) in chunk.iter().enumerate() {
                per_item.insert(it, l[j * c..(j + 1) * c].to_vec());
            }
        }
        let mut preds = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for &r in records {
            let segs: Vec<Vec<f64>> = corpus.by_record[r].iter().map(|i| per_item[i].clone()).collect();
            preds.push(utterance_vote(&segs)?.0);
            labels.push(corpus.records[r].klass.index());
        }
        compute_metrics(&preds, &labels, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub fold: usize,
    pub held_out_key: String,
    pub history: Vec<AlphaSnapshot>,
    pub scores: BTreeMap<Level, ValidationScore>,
    pub strategy: FusionStrategy,
}

/// Alternates model updates (adaptive optimiser, training batch) with
/// architecture updates (plain gradient descent on the logits, validation
/// batch). One level is sampled per batch and shared by both updates.
pub fn run_search(cfg: &RunConfig, corpus: &Corpus, feats: &Features) -> Result<SearchOutcome> {
    run_search_with(cfg, corpus, feats).map(|(o, _, _)| o)
}

/// As [`run_search`], also returning the trained supernet and logits.
pub fn run_search_with(cfg: &RunConfig, corpus: &Corpus, feats: &Features) -> Result<(SearchOutcome, FusionModel, AlphaTable)> {
    cfg.validate()?;
    let dtype = cfg.dtype();
    let plan = make_cv_plan(&corpus.records, cfg.data.cv)?;
    let fold = plan.fold(cfg.data.fold)?;
    let (fit, val) = validation_split(&corpus.records, &fold.train, cfg.data.val_fraction, cfg.seed);
    if val.is_empty() {
        return Err(Error::config("search needs a non-empty validation split"));
    }
    let (fit_items, val_items) = (corpus.items_of(&fit), corpus.items_of(&val));

    let model = FusionModel::new(ParamStore::new(dtype, cfg.seed), cfg, feats.frames(), feats.dim())?;
    let mut alpha_store = ParamStore::new(dtype, cfg.seed);
    let alpha = AlphaTable::new(&mut alpha_store)?;
    let mut model_opt = adamw(model.store.vars(), &cfg.search.optim)?;
    let mut alpha_opt = SGD::new(vec![alpha.var().clone()], cfg.search.alpha_lr)?;

    let mut batch_rng = rng_for(cfg.seed, "search-batches");
    let mut level_rng = rng_for(cfg.seed, "search-levels");
    let mut drop_rng = rng_for(cfg.seed, "search-dropout");
    let mut history = vec![alpha.snapshot(0)?];
    for epoch in 0..cfg.search.optim.epochs {
        let train_batches = batches(&fit_items, cfg.search.optim.batch_size, &mut batch_rng);
        let mut val_batches = batches(&val_items, cfg.search.optim.batch_size, &mut batch_rng).into_iter().cycle();
        for (step, batch) in train_batches.iter().enumerate() {
            let level = Level::ALL[rand::Rng::random_range(&mut level_rng, 0..3)];
            let what = format!("search epoch {epoch} step {step}");

            let row = alpha.row(level)?.detach();
            let logits = model.logits(corpus, feats, batch, level, FusionPath::Mixture(&row), Some(&mut drop_rng))?;
            let loss = nn::cross_entropy(&logits, &corpus.labels(batch))?;
            ensure_finite(&loss, &what)?;
            model_opt.backward_step(&loss)?;

            let vb = val_batches.next().expect("validation split is non-empty");
            let row = alpha.row(level)?;
            let logits = model.logits(corpus, feats, &vb, level, FusionPath::Mixture(&row), None)?;
            let loss = nn::cross_entropy(&logits, &corpus.labels(&vb))?;
            ensure_finite(&loss, &what)?;
            let grads = loss.backward()?;
            alpha_opt.step(&grads)?;
        }
        let snap = alpha.snapshot(epoch + 1)?;
        if snap.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("architecture logits diverged in epoch {epoch}")));
        }
        history.push(snap);
    }

    let logits = alpha.logits()?;
    let ops = argmax_ops(&logits);
    let mut scores = BTreeMap::new();
    for level in Level::ALL {
        let m = model.evaluate(corpus, feats, &val, level, FusionPath::Single(ops[&level]), cfg.search.optim.batch_size)?;
        scores.insert(level, ValidationScore { ua: m.ua, wa: m.wa });
    }
    let strategy = derive_strategy(&logits, &scores)?;
    Ok((
        SearchOutcome {
            fold: cfg.data.fold,
            held_out_key: fold.held_out_key.clone(),
            history,
            scores,
            strategy,
        },
        model,
        alpha,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub held_out_key: String,
    pub metrics: MetricsReport,
}

pub const STRATEGY_KEY: &str = "strategy";

/// Retrains the derived single-path model on a fold's training records and
/// evaluates the held-out records.
pub fn run_derive(
    cfg: &RunConfig,
    corpus: &Corpus,
    feats: &Features,
    strategy: &FusionStrategy,
    fold_index: usize,
) -> Result<(FoldReport, FusionModel)> {
    cfg.validate()?;
    let dtype = cfg.dtype();
    let plan = make_cv_plan(&corpus.records, cfg.data.cv)?;
    let fold = plan.fold(fold_index)?;
    let level = strategy.selected_level;
    let path = FusionPath::Single(strategy.selected_op());
    let model = FusionModel::new(ParamStore::new(dtype, cfg.seed ^ fold_index as u64), cfg, feats.frames(), feats.dim())?;
    let mut opt = adamw(model.store.vars(), &cfg.derive.optim)?;
    let mut batch_rng = rng_for(cfg.seed, &format!("derive-batches-{fold_index}"));
    let mut drop_rng = rng_for(cfg.seed, &format!("derive-dropout-{fold_index}"));
    let items = corpus.items_of(&fold.train);
    for epoch in 0..cfg.derive.optim.epochs {
        for (step, batch) in batches(&items, cfg.derive.optim.batch_size, &mut batch_rng).iter().enumerate() {
            let logits = model.logits(corpus, feats, batch, level, path, Some(&mut drop_rng))?;
            let loss = nn::cross_entropy(&logits, &corpus.labels(batch))?;
            ensure_finite(&loss, &format!("derive fold {fold_index} epoch {epoch} step {step}"))?;
            opt.backward_step(&loss)?;
        }
    }
    let metrics = model.evaluate(corpus, feats, &fold.test, level, path, cfg.derive.optim.batch_size)?;
    Ok((
        FoldReport {
            fold: fold_index,
            held_out_key: fold.held_out_key.clone(),
            metrics,
        },
        model,
    ))
}

pub fn save_derived(path: &Path, model: &FusionModel, strategy: &FusionStrategy) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut meta = HashMap::new();
    meta.insert(STRATEGY_KEY.to_string(), serde_json::to_string(strategy)?);
    model.store.save(path, meta)
}

/// Loads a derived model and evaluates it on a fold's held-out records.
pub fn run_eval(cfg: &RunConfig, corpus: &Corpus, feats: &Features, model_path: &Path, fold_index: usize) -> Result<FoldReport> {
    if !model_path.exists() {
        return Err(Error::state(format!("derived model {} does not exist", model_path.display())));
    }
    let (store, meta) = ParamStore::load(model_path, cfg.dtype(), cfg.seed)?;
    let strategy: FusionStrategy = serde_json::from_str(
        meta.get(STRATEGY_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no fusion strategy", model_path.display())))?,
    )?;
    let before = store.len();
    let model = FusionModel::new(store, cfg, feats.frames(), feats.dim())?;
    if model.store.len() != before {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured head/fusion layout",
            model_path.display()
        )));
    }
    let plan = make_cv_plan(&corpus.records, cfg.data.cv)?;
    let fold = plan.fold(fold_index)?;
    let metrics = model.evaluate(
        corpus,
        feats,
        &fold.test,
        strategy.selected_level,
        FusionPath::Single(strategy.selected_op()),
        cfg.derive.optim.batch_size,
    )?;
    Ok(FoldReport {
        fold: fold_index,
        held_out_key: fold.held_out_key.clone(),
        metrics,
    })
}
