//! Fusion search space: a level choice over encoder taps, the eight-operation
//! pool, the softmax-weighted mixture over it and strategy derivation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FrameSequence, LayerTapBundle, Level};
use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationId {
    Zero,
    Sum,
    Attention,
    #[serde(rename = "Attention_r")]
    AttentionR,
    #[serde(rename = "ConcatFC")]
    ConcatFc,
    #[serde(rename = "ConcatFC_r")]
    ConcatFcR,
    #[serde(rename = "ISM")]
    Ism,
    #[serde(rename = "ISM_r")]
    IsmR,
}

impl OperationId {
    pub const ALL: [OperationId; 8] = [
        OperationId::Zero,
        OperationId::Sum,
        OperationId::Attention,
        OperationId::AttentionR,
        OperationId::ConcatFc,
        OperationId::ConcatFcR,
        OperationId::Ism,
        OperationId::IsmR,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationId::Zero => "Zero",
            OperationId::Sum => "Sum",
            OperationId::Attention => "Attention",
            OperationId::AttentionR => "Attention_r",
            OperationId::ConcatFc => "ConcatFC",
            OperationId::ConcatFcR => "ConcatFC_r",
            OperationId::Ism => "ISM",
            OperationId::IsmR => "ISM_r",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name().eq_ignore_ascii_case(name))
    }

    pub fn is_reverse(self) -> bool {
        matches!(self, OperationId::AttentionR | OperationId::ConcatFcR | OperationId::IsmR)
    }

    /// The argument-swapped counterpart. Zero and Sum are symmetric and have none.
    pub fn reversed(self) -> Result<Self> {
        use OperationId::*;
        match self {
            Attention => Ok(AttentionR),
            AttentionR => Ok(Attention),
            ConcatFc => Ok(ConcatFcR),
            ConcatFcR => Ok(ConcatFc),
            Ism => Ok(IsmR),
            IsmR => Ok(Ism),
            Zero | Sum => Err(Error::config(format!("{} is symmetric and has no reverse", self.name()))),
        }
    }
}

impl std::fmt::Display for OperationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn same_shape(a: &FrameSequence, b: &FrameSequence) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn op_zero(a: &FrameSequence, b: &FrameSequence) -> Result<FrameSequence> {
    same_shape(a, b)?;
    FrameSequence::new(a.tensor().zeros_like()?)
}

pub fn op_sum(a: &FrameSequence, b: &FrameSequence) -> Result<FrameSequence> {
    same_shape(a, b)?;
    FrameSequence::new(a.tensor().add(b.tensor())?)
}

/// Attention weights `softmax(q k^T / sqrt(C))` per head, `batch × heads × T × T`.
pub fn attention_weights(a: &FrameSequence, b: &FrameSequence, heads: usize) -> Result<Tensor> {
    let (bs, t, d) = a.shape();
    let dh = d / heads;
    let q = a.tensor().reshape((bs, t, heads, dh))?.transpose(1, 2)?.contiguous()?;
    let k = b.tensor().reshape((bs, t, heads, dh))?.transpose(1, 2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    nn::softmax(&scores, 3)
}

/// Scaled dot-product attention with `a` as query and `b` as key and value.
/// With `heads > 1` the feature axis is split into equal heads.
pub fn op_attention(a: &FrameSequence, b: &FrameSequence, heads: usize) -> Result<FrameSequence> {
    same_shape(a, b)?;
    let (bs, t, d) = a.shape();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("{d} features cannot be split into {heads} heads")));
    }
    let dh = d / heads;
    let w = attention_weights(a, b, heads)?;
    let v = b.tensor().reshape((bs, t, heads, dh))?.transpose(1, 2)?.contiguous()?;
    let out = w.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bs, t, d))?;
    FrameSequence::new(out)
}

#[derive(Clone, Debug)]
pub struct ConcatFcParams {
    pub linear: Linear,
}

pub fn op_concat_fc(a: &FrameSequence, b: &FrameSequence, p: &ConcatFcParams) -> Result<FrameSequence> {
    same_shape(a, b)?;
    let cat = Tensor::cat(&[a.tensor(), b.tensor()], 2)?;
    FrameSequence::new(p.linear.forward(&cat)?.relu()?)
}

#[derive(Clone, Debug)]
pub struct IsmParams {
    /// Applied to the second argument: `H = Linear(b)`.
    pub source: Linear,
    /// Applied to the first argument inside the gate.
    pub gate: Linear,
}

/// `a + tanh(Linear(a) * H) * H` with `H = Linear(b)`.
pub fn op_ism(a: &FrameSequence, b: &FrameSequence, p: &IsmParams) -> Result<FrameSequence> {
    same_shape(a, b)?;
    let h = p.source.forward(b.tensor())?;
    let g = p.gate.forward(a.tensor())?.mul(&h)?.tanh()?;
    FrameSequence::new(a.tensor().add(&g.mul(&h)?)?)
}

#[derive(Clone, Debug)]
pub enum OpParams {
    None,
    ConcatFc(ConcatFcParams),
    Ism(IsmParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub attention_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { attention_heads: 1 }
    }
}

/// One operation pool: an independent parameter set per operation slot.
#[derive(Clone, Debug)]
pub struct FusionCell {
    params: Vec<OpParams>,
    heads: usize,
}

impl FusionCell {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, cfg: &FusionConfig) -> Result<Self> {
        let mut params = Vec::with_capacity(8);
        for op in OperationId::ALL {
            let p = format!("{prefix}.{}", op.name());
            params.push(match op {
                OperationId::ConcatFc | OperationId::ConcatFcR => OpParams::ConcatFc(ConcatFcParams {
                    linear: Linear::new(store, &p, 2 * dim, dim)?,
                }),
                OperationId::Ism | OperationId::IsmR => OpParams::Ism(IsmParams {
                    source: Linear::new(store, &format!("{p}.source"), dim, dim)?,
                    gate: Linear::new(store, &format!("{p}.gate"), dim, dim)?,
                }),
                _ => OpParams::None,
            });
        }
        Ok(Self {
            params,
            heads: cfg.attention_heads,
        })
    }

    pub fn params(&self, op: OperationId) -> &OpParams {
        &self.params[op.index()]
    }

    pub fn params_mut(&mut self, op: OperationId) -> &mut OpParams {
        &mut self.params[op.index()]
    }

    /// Applies one operation. Reverse slots swap the arguments and use their
    /// own parameters.
    pub fn apply(&self, op: OperationId, a: &FrameSequence, b: &FrameSequence) -> Result<FrameSequence> {
        let (x, y) = if op.is_reverse() { (b, a) } else { (a, b) };
        match (op, self.params(op)) {
            (OperationId::Zero, _) => op_zero(a, b),
            (OperationId::Sum, _) => op_sum(a, b),
            (OperationId::Attention | OperationId::AttentionR, _) => op_attention(x, y, self.heads),
            (OperationId::ConcatFc | OperationId::ConcatFcR, OpParams::ConcatFc(p)) => op_concat_fc(x, y, p),
            (OperationId::Ism | OperationId::IsmR, OpParams::Ism(p)) => op_ism(x, y, p),
            _ => Err(Error::Internal(format!("no parameters for {op}"))),
        }
    }

    pub fn apply_all(&self, a: &FrameSequence, b: &FrameSequence) -> Result<Vec<FrameSequence>> {
        OperationId::ALL.iter().map(|&op| self.apply(op, a, b)).collect()
    }
}

/// Applies the reverse variant of `op` (which must be Attention, ConcatFC or
/// ISM) with that reverse slot's parameters.
pub fn reverse(op: OperationId, a: &FrameSequence, b: &FrameSequence, cell: &FusionCell) -> Result<FrameSequence> {
    if op.is_reverse() {
        return Err(Error::config(format!("{op} is already a reverse operation")));
    }
    cell.apply(op.reversed()?, a, b)
}

/// One operation pool per level.
#[derive(Clone, Debug)]
pub struct FusionParams {
    cells: Vec<FusionCell>,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, cfg: &FusionConfig) -> Result<Self> {
        let cells = Level::ALL
            .iter()
            .map(|l| FusionCell::new(store, &format!("{prefix}.{}", l.name()), dim, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cells })
    }

    pub fn cell(&self, level: Level) -> &FusionCell {
        &self.cells[level.index()]
    }

    pub fn cell_mut(&mut self, level: Level) -> &mut FusionCell {
        &mut self.cells[level.index()]
    }
}

/// Architecture logits, one row of eight per level.
#[derive(Clone, Debug)]
pub struct AlphaTable {
    var: Var,
}

pub const ALPHA_PARAM: &str = "alpha";

impl AlphaTable {
    /// All-zero logits: the search starts from the uniform mixture.
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        store.get(ALPHA_PARAM, &[3, 8], Init::Zeros)?;
        Ok(Self {
            var: store.var(ALPHA_PARAM).expect("just created").clone(),
        })
    }

    pub fn from_logits(logits: &[[f64; 8]; 3], dtype: DType) -> Result<Self> {
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (3, 8), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            var: Var::from_tensor(&t)?,
        })
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn row(&self, level: Level) -> Result<Tensor> {
        Ok(self.var.as_tensor().get(level.index())?)
    }

    pub fn logits(&self) -> Result<[[f64; 8]; 3]> {
        let v = nn::to_vec_f64(self.var.as_tensor())?;
        let mut out = [[0.0; 8]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            row.copy_from_slice(&v[i * 8..(i + 1) * 8]);
        }
        Ok(out)
    }

    pub fn weights(&self) -> Result<[[f64; 8]; 3]> {
        let mut out = self.logits()?;
        for row in &mut out {
            *row = softmax8(row);
        }
        Ok(out)
    }

    pub fn set_logits(&self, logits: &[[f64; 8]; 3]) -> Result<()> {
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (3, 8), &Device::Cpu)?.to_dtype(self.var.dtype())?;
        self.var.set(&t)?;
        Ok(())
    }

    pub fn snapshot(&self, epoch: usize) -> Result<AlphaSnapshot> {
        Ok(AlphaSnapshot {
            epoch,
            levels: Level::ALL.iter().map(|l| l.name().to_string()).collect(),
            operations: OperationId::ALL.iter().map(|o| o.name().to_string()).collect(),
            logits: self.logits()?.iter().map(|r| r.to_vec()).collect(),
            weights: self.weights()?.iter().map(|r| r.to_vec()).collect(),
        })
    }
}

pub fn softmax8(row: &[f64; 8]) -> [f64; 8] {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 8];
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
    out
}

/// Labelled 3 × 8 view of the architecture weights at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub levels: Vec<String>,
    pub operations: Vec<String>,
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

/// `X_o = sum_o softmax(alpha_row)_o * o(x_e, x_t)`.
pub fn fusion_cell_forward(
    x_e: &FrameSequence,
    x_t: &FrameSequence,
    alpha_row: &Tensor,
    cell: &FusionCell,
) -> Result<FrameSequence> {
    if alpha_row.dims() != [8] {
        return Err(Error::input(format!("alpha row must have 8 entries, got {:?}", alpha_row.dims())));
    }
    let w = nn::softmax(alpha_row, 0)?;
    let mut acc: Option<Tensor> = None;
    for op in OperationId::ALL {
        let out = cell.apply(op, x_e, x_t)?;
        let term = out.tensor().broadcast_mul(&w.get(op.index())?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    FrameSequence::new(acc.expect("eight operations"))
}

/// Search samples a level uniformly; a fixed strategy always returns its level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelChoice {
    Search,
    Fixed(Level),
}

pub fn choose_level<'a>(
    bundle: &'a LayerTapBundle,
    mode: LevelChoice,
    rng: &mut SeededRng,
) -> (Level, &'a FrameSequence) {
    let level = match mode {
        LevelChoice::Search => Level::ALL[rng.random_range(0..3)],
        LevelChoice::Fixed(l) => l,
    };
    (level, bundle.level(level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStrategy {
    pub ops: BTreeMap<Level, OperationId>,
    pub selected_level: Level,
}

impl FusionStrategy {
    pub fn selected_op(&self) -> OperationId {
        self.ops[&self.selected_level]
    }

    pub fn single(level: Level, op: OperationId) -> Self {
        let ops = Level::ALL.iter().map(|&l| (l, op)).collect();
        Self {
            ops,
            selected_level: level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub ua: f64,
    pub wa: f64,
}

/// Per-level argmax of the logits; ties go to the lowest operation index.
pub fn argmax_ops(logits: &[[f64; 8]; 3]) -> BTreeMap<Level, OperationId> {
    Level::ALL
        .iter()
        .map(|&l| {
            let row = &logits[l.index()];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            (l, OperationId::ALL[best])
        })
        .collect()
}

/// Picks the argmax operation per level and the level whose derived
/// single-path model validated best (UA first, WA breaks ties).
pub fn derive_strategy(
    logits: &[[f64; 8]; 3],
    validation: &BTreeMap<Level, ValidationScore>,
) -> Result<FusionStrategy> {
    let ops = argmax_ops(logits);
    let mut best: Option<(Level, ValidationScore)> = None;
    for level in Level::ALL {
        let score = *validation
            .get(&level)
            .ok_or_else(|| Error::state(format!("no validation score for level {level}")))?;
        let better = match best {
            None => true,
            Some((_, b)) => score.ua > b.ua || (score.ua == b.ua && score.wa > b.wa),
        };
        if better {
            best = Some((level, score));
        }
    }
    Ok(FusionStrategy {
        ops,
        selected_level: best.expect("three levels").0,
    })
}
