//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};

use mfas_core::audio::{compute_spectrogram, Segment};
use mfas_core::coattention::{coattend, CoAttentionHead, HeadConfig};
use mfas_core::encoder::{EncoderConfig, FrameSequence, MaskSpec, SpeechEncoder};
use mfas_core::fusion::{fusion_cell_forward, softmax8, FusionCell, FusionConfig, OperationId};
use mfas_core::gradcheck::{self, probe_tensor, project};
use mfas_core::harness::config::{Objective, RunConfig};
use mfas_core::harness::cv::{make_cv_plan, CvStrategy};
use mfas_core::harness::data::Corpus;
use mfas_core::harness::metrics::compute_metrics;
use mfas_core::harness::search::{extract_features, run_derive, run_search};
use mfas_core::harness::toy::{synthesize, ToyConfig};
use mfas_core::harness::train::{run_pretrain, ENCODER_PREFIX};
use mfas_core::nn::{rng_for, to_vec_f64, ParamStore};
use mfas_core::pretrain::{continuous_loss, quantized_contrastive_loss, CodebookConfig, QuantizedTargets, ABLATION_CODEBOOKS};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<String, String> {
    let took = start.elapsed();
    ensure(took < limit, format!("{what} took {took:.1?}, limit {limit:?}"))?;
    Ok(format!("{took:.1?}"))
}

fn fs(x: &Tensor) -> mfas_core::Result<FrameSequence> {
    FrameSequence::new(x.clone())
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let tol = 1e-3;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, r: gradcheck::GradCheck| worst.push((name.to_string(), r.max_relative_error()));

    // quantized contrastive loss: predictions, codewords and codeword usage
    let mask = MaskSpec::new(vec![vec![0, 2, 3, 5, 6]], 8).map_err(e)?;
    let mut cb = CodebookConfig::new(2, 4);
    cb.n_negatives = 3;
    let codes: Vec<Vec<usize>> = (0..5).map(|i| vec![i % 4, (i + 1) % 4]).collect();
    let usage = probe_tensor(&[2, 4], 9).and_then(|t| Ok(((t.abs()? * 0.4)? + 0.1)?)).map_err(e)?;
    let r = gradcheck::check(
        &[probe_tensor(&[1, 8, 8], 1).map_err(e)?, probe_tensor(&[5, 8], 2).map_err(e)?, usage],
        1e-6,
        |x| {
            let targets = QuantizedTargets {
                positives: Some(x[1].clone()),
                codes: codes.clone(),
                avg_probs: x[2].clone(),
            };
            let mut rng = rng_for(0, "negatives");
            Ok(quantized_contrastive_loss(&fs(&x[0])?, &targets, &mask, &cb, &mut rng)?.total)
        },
    )
    .map_err(e)?;
    record("quantized_contrastive_loss", r);

    let r = gradcheck::check(&[probe_tensor(&[1, 8, 8], 3).map_err(e)?, probe_tensor(&[1, 8, 8], 4).map_err(e)?], 1e-6, |x| {
        continuous_loss(&fs(&x[0])?, &fs(&x[1])?, &mask)
    })
    .map_err(e)?;
    record("continuous_loss", r);

    let mut store = ParamStore::new(DType::F64, 5);
    let cell = FusionCell::new(&mut store, "cell", 8, &FusionConfig::default()).map_err(e)?;
    let ab = [probe_tensor(&[1, 8, 8], 6).map_err(e)?, probe_tensor(&[1, 8, 8], 7).map_err(e)?];
    for op in OperationId::ALL {
        let r = gradcheck::check(&ab, 1e-6, |x| project(cell.apply(op, &fs(&x[0])?, &fs(&x[1])?)?.tensor(), 8)).map_err(e)?;
        record(op.name(), r);
    }
    let mut inputs = ab.to_vec();
    inputs.push(probe_tensor(&[8], 10).map_err(e)?);
    let r = gradcheck::check(&inputs, 1e-6, |x| {
        project(fusion_cell_forward(&fs(&x[0])?, &fs(&x[1])?, &x[2], &cell)?.tensor(), 11)
    })
    .map_err(e)?;
    record("fusion_cell_forward", r);

    let r = gradcheck::check(&[probe_tensor(&[1, 2, 8], 12).map_err(e)?, probe_tensor(&[1, 8, 8], 13).map_err(e)?], 1e-6, |x| {
        project(&coattend(&x[0], &fs(&x[1])?)?, 14)
    })
    .map_err(e)?;
    record("coattend", r);

    let cfg = HeadConfig {
        n_guides: 2,
        mlp_hidden: vec![8],
        with_vad_head: true,
        conv_channels: vec![2, 2],
        spectrogram: (8, 8),
        ..HeadConfig::default()
    };
    let mut store = ParamStore::new(DType::F64, 15);
    let head = CoAttentionHead::new(&mut store, "head", &cfg, 8, 4).map_err(e)?;
    let r = gradcheck::check(&[probe_tensor(&[1, 2, 4], 16).map_err(e)?, probe_tensor(&[1, 2, 4], 17).map_err(e)?], 1e-6, |x| {
        let out = head.classify(&x[0], &x[1], None)?;
        Ok(project(&out.logits, 18)?.add(&project(out.vad.as_ref().expect("vad head"), 19)?)?)
    })
    .map_err(e)?;
    record("classify", r);

    let bad: Vec<String> = worst.iter().filter(|(_, v)| !(*v < tol)).map(|(n, v)| format!("{n}={v:.2e}")).collect();
    ensure(bad.is_empty(), format!("relative error >= {tol:e}: {}", bad.join(", ")))?;
    let max = worst.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let t = within(start, Duration::from_secs(60), "gradient suite")?;
    Ok(format!("{} checks, max relative error {max:.2e}, {t}", worst.len()))
}

fn shapes_and_counts() -> Outcome {
    let desk = EncoderConfig::desk();
    let full = EncoderConfig::default();
    ensure(full.output_frames(48_000) == Some(149), format!("full config gives {:?} frames", full.output_frames(48_000)))?;
    let mut store = ParamStore::new(DType::F32, 0);
    let enc = SpeechEncoder::new(&mut store, ENCODER_PREFIX, &desk).map_err(e)?;
    let waves = Tensor::zeros((1, 48_000), DType::F32, &Device::Cpu).map_err(e)?;
    let frames = enc.encode_frames(&waves).map_err(e)?.frames();
    ensure(frames == 149, format!("encoder produced {frames} frames"))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let seg = Segment::new((0..48_000).map(|_| rng.random_range(-0.5..0.5)).collect(), "u", 0).map_err(e)?;
    let spec = compute_spectrogram(&seg).map_err(e)?;
    ensure(spec.shape() == (300, 200), format!("spectrogram {:?}", spec.shape()))?;
    let units: Vec<usize> = ABLATION_CODEBOOKS.iter().map(|&(b, w)| CodebookConfig::new(b, w).n_units()).collect();
    let pow: Vec<usize> = ABLATION_CODEBOOKS.iter().map(|&(b, w)| w.pow(b as u32)).collect();
    ensure(units == pow && units == [4, 16, 64, 144, 4096], format!("codebook sizes {units:?}"))?;
    Ok(format!("149 frames, 300x200 spectrogram, N_q {units:?}"))
}

fn mixture_consistency() -> Outcome {
    let mut store = ParamStore::new(DType::F64, 21);
    let cell = FusionCell::new(&mut store, "cell", 8, &FusionConfig::default()).map_err(e)?;
    let a = fs(&probe_tensor(&[2, 6, 8], 22).map_err(e)?).map_err(e)?;
    let b = fs(&probe_tensor(&[2, 6, 8], 23).map_err(e)?).map_err(e)?;
    let singles: Vec<Vec<f64>> = OperationId::ALL
        .iter()
        .map(|&op| to_vec_f64(cell.apply(op, &a, &b)?.tensor()))
        .collect::<mfas_core::Result<_>>()
        .map_err(e)?;
    let mut one_hot_err: f64 = 0.0;
    for op in OperationId::ALL {
        let mut row = [0.0; 8];
        row[op.index()] = 1e4;
        let alpha = Tensor::new(&row, &Device::Cpu).map_err(e)?;
        let got = to_vec_f64(fusion_cell_forward(&a, &b, &alpha, &cell).map_err(e)?.tensor()).map_err(e)?;
        for (g, s) in got.iter().zip(&singles[op.index()]) {
            one_hot_err = one_hot_err.max((g - s).abs());
        }
    }
    ensure(one_hot_err < 1e-4, format!("one-hot mixture differs by {one_hot_err:e}"))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
    let mut mix_err: f64 = 0.0;
    for _ in 0..20 {
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = softmax8(&logits.clone().try_into().expect("eight logits"));
        let got = to_vec_f64(
            fusion_cell_forward(&a, &b, &Tensor::new(logits.as_slice(), &Device::Cpu).map_err(e)?, &cell)
                .map_err(e)?
                .tensor(),
        )
        .map_err(e)?;
        for (i, g) in got.iter().enumerate() {
            let want: f64 = (0..8).map(|o| w[o] * singles[o][i]).sum();
            mix_err = mix_err.max((g - want).abs());
        }
    }
    ensure(mix_err < 1e-6, format!("mixture differs from recombination by {mix_err:e}"))?;
    Ok(format!("one-hot max diff {one_hot_err:.1e}, mixture max diff {mix_err:.1e}"))
}

fn stop_gradient() -> Outcome {
    let toy = synthesize(&ToyConfig {
        n_utterances: 40,
        seed: 5,
        ..ToyConfig::default()
    })
    .map_err(e)?;
    let corpus = Corpus::from_audio(toy.records, &toy.audio, 3.0, Default::default(), None).map_err(e)?;
    let mut cfg = RunConfig::toy();
    cfg.seed = 5;
    let mut weights = Vec::new();
    for probe in [false, true] {
        cfg.pretrain.probe = probe;
        let out = run_pretrain(&cfg, &corpus, Some(1)).map_err(e)?;
        let snap = out.store.snapshot().map_err(e)?;
        let enc: Vec<(String, Vec<u32>)> = snap
            .into_iter()
            .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
            .map(|(n, t)| {
                let bits = t.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.to_bits()).collect();
                Ok((n, bits))
            })
            .collect::<candle_core::Result<_>>()
            .map_err(e)?;
        weights.push(enc);
    }
    ensure(!weights[0].is_empty(), "no encoder weights")?;
    ensure(weights[0] == weights[1], "encoder weights differ with the probe attached")?;
    Ok(format!("{} encoder tensors bitwise identical", weights[0].len()))
}

// ---------------------------------------------------------------------------

fn metric_oracle() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pv: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(1.0..5.0), rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)]).collect();
        let tv: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(1.0..5.0), rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)]).collect();
        let got = compute_metrics(&preds, &labels, Some((&pv, &tv))).map_err(e)?;

        let mut confusion = [[0u32; 4]; 4];
        for (p, l) in preds.iter().zip(&labels) {
            confusion[*l][*p] += 1;
        }
        let mut recalls = Vec::new();
        let mut diag = 0;
        for (c, row) in confusion.iter().enumerate() {
            let total: u32 = row.iter().sum();
            diag += row[c];
            if total > 0 {
                recalls.push(f64::from(row[c]) / f64::from(total));
            }
        }
        let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let wa = f64::from(diag) / n as f64;
        let mut sq = [0.0; 3];
        for (p, t) in pv.iter().zip(&tv) {
            for k in 0..3 {
                sq[k] += (p[k] - t[k]) * (p[k] - t[k]);
            }
        }
        let mse = sq.map(|s| s / n as f64);
        let diffs = [
            (got.ua - ua).abs(),
            (got.wa - wa).abs(),
            (got.mse_v.unwrap_or(f64::NAN) - mse[0]).abs(),
            (got.mse_a.unwrap_or(f64::NAN) - mse[1]).abs(),
            (got.mse_d.unwrap_or(f64::NAN) - mse[2]).abs(),
        ];
        for d in diffs {
            ensure(d <= 1e-12, format!("case {case}: metrics differ by {d:e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("1000 cases, max difference {worst:.1e}"))
}

fn cv_partition() -> Outcome {
    let toy = synthesize(&ToyConfig::default()).map_err(e)?;
    let all: BTreeSet<usize> = (0..toy.records.len()).collect();
    let mut parts = Vec::new();
    for (strategy, n) in [(CvStrategy::LeaveOneSession, 5), (CvStrategy::LeaveOneSpeaker, 10)] {
        let plan = make_cv_plan(&toy.records, strategy).map_err(e)?;
        ensure(plan.folds.len() == n, format!("{strategy:?}: {} folds", plan.folds.len()))?;
        let mut seen = BTreeSet::new();
        let mut keys = BTreeSet::new();
        for f in &plan.folds {
            ensure(keys.insert(f.held_out_key.clone()), format!("{strategy:?}: repeated key {}", f.held_out_key))?;
            for &r in &f.test {
                ensure(seen.insert(r), format!("{strategy:?}: record {r} held out twice"))?;
            }
            let train: BTreeSet<usize> = f.train.iter().copied().collect();
            ensure(f.test.iter().all(|r| !train.contains(r)), format!("{strategy:?}: train/test overlap"))?;
        }
        ensure(seen == all, format!("{strategy:?}: held-out sets do not cover the manifest"))?;
        parts.push(format!("{strategy:?} {n} folds"));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------

const RIGGED_SEEDS: [u64; 3] = [0, 1, 2];
const RIGGED_EXTRACTOR_EPOCHS: usize = 4;
const RIGGED_SEARCH_EPOCHS: usize = 6;
const RIGGED_DERIVE_EPOCHS: usize = 12;
const RIGGED_LR: f64 = 3e-3;

fn rigged_search() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e)?;
    let toy = synthesize(&ToyConfig {
        n_utterances: 80,
        seed: 0,
        text_only: true,
        // one segment per utterance
        max_seconds: 3.0,
        ..ToyConfig::default()
    })
    .map_err(e)?;
    let corpus = Corpus::from_audio(toy.records, &toy.audio, 3.0, Default::default(), None).map_err(e)?;

    let mut cfg = RunConfig::toy();
    cfg.pretrain.optim.epochs = RIGGED_EXTRACTOR_EPOCHS;
    for (objective, name) in [(Objective::Continuous, "speech"), (Objective::Quantized, "text")] {
        cfg.pretrain.objective = objective;
        let path = dir.path().join(format!("{name}.safetensors"));
        run_pretrain(&cfg, &corpus, None).map_err(e)?.save(&path).map_err(e)?;
    }
    cfg.search.speech_checkpoint = dir.path().join("speech.safetensors");
    cfg.search.text_checkpoint = dir.path().join("text.safetensors");
    cfg.search.optim.epochs = RIGGED_SEARCH_EPOCHS;
    cfg.search.optim.lr = RIGGED_LR;
    cfg.derive.optim.epochs = RIGGED_DERIVE_EPOCHS;
    cfg.derive.optim.lr = RIGGED_LR;
    let feats = extract_features(&cfg, &corpus).map_err(e)?;

    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in RIGGED_SEEDS {
        cfg.seed = seed;
        let s = run_search(&cfg, &corpus, &feats).map_err(e)?;
        let op = s.strategy.selected_op();
        let (report, _) = run_derive(&cfg, &corpus, &feats, &s.strategy, cfg.data.fold).map_err(e)?;
        let acc = report.metrics.wa;
        lines.push(format!("seed {seed}: {} {op} acc {acc:.3}", s.strategy.selected_level));
        if op == OperationId::Zero {
            failures.push(format!("seed {seed} derived Zero"));
        }
        if !(acc >= 0.90) {
            failures.push(format!("seed {seed} held-out accuracy {acc:.3} < 0.90"));
        }
    }
    let took = start.elapsed();
    if took >= Duration::from_secs(15 * 60) {
        failures.push(format!("took {took:.0?}, limit 15 min"));
    }
    let detail = format!("{}; {took:.0?}", lines.join("; "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} [{detail}]", failures.join(", ")))
    }
}

const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_EPOCHS: usize = 4;
const TREND_UTTERANCES: usize = 48;

fn spread(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
}

fn ablation_trend() -> Outcome {
    let start = Instant::now();
    let mut lower_at_largest = 0;
    let mut steadier = 0;
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let toy = synthesize(&ToyConfig {
            n_utterances: TREND_UTTERANCES,
            seed,
            ..ToyConfig::default()
        })
        .map_err(e)?;
        let corpus = Corpus::from_audio(toy.records, &toy.audio, 3.0, Default::default(), None).map_err(e)?;
        let mut cfg = RunConfig::toy();
        cfg.seed = seed;
        cfg.pretrain.probe = true;
        cfg.pretrain.optim.epochs = TREND_EPOCHS;
        cfg.pretrain.probe_optim.epochs = TREND_EPOCHS;
        let probe_mse = |cfg: &RunConfig| -> Result<f64, String> {
            let out = run_pretrain(cfg, &corpus, None).map_err(e)?;
            let last = out.history.last().and_then(|h| h.probe).ok_or("no probe report")?;
            last.mean_vad_mse().ok_or_else(|| "probe reported no V/A/D error".to_string())
        };
        let mut quant = Vec::new();
        for &(books, words) in &ABLATION_CODEBOOKS {
            cfg.pretrain.objective = Objective::Quantized;
            cfg.pretrain.n_books = books;
            cfg.pretrain.n_words = words;
            quant.push(probe_mse(&cfg)?);
        }
        let mut cont = Vec::new();
        for layers in 1..=cfg.encoder.n_layers {
            cfg.pretrain.objective = Objective::Continuous;
            cfg.pretrain.continuous.n_layers = layers;
            cont.push(probe_mse(&cfg)?);
        }
        if quant[quant.len() - 1] < quant[0] {
            lower_at_largest += 1;
        }
        if spread(&cont) < spread(&quant) {
            steadier += 1;
        }
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
        lines.push(format!("seed {seed}: quantized {} continuous {}", f(&quant), f(&cont)));
    }
    let took = start.elapsed();
    let detail = format!(
        "N_q=4096 below N_q=4 in {lower_at_largest}/3, continuous spread smaller in {steadier}/3; {}; {took:.0?}",
        lines.join("; ")
    );
    if lower_at_largest >= 2 && steadier >= 2 && took < Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn mfas(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mfas")).args(args).output().map_err(e)?;
    if !out.status.success() {
        return Err(format!(
            "`mfas {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let cfg = d("toy.toml");
    mfas(&["gen-toy", "--out", &d(""), "--n", "40", "--seed", "7"])?;
    mfas(&["pretrain", "-c", &cfg, "--objective", "continuous", "--epochs", "1", "--output", &d("runs/speech.safetensors")])?;
    mfas(&["pretrain", "-c", &cfg, "--objective", "quantized", "--epochs", "1", "--output", &d("runs/quantized.safetensors")])?;
    mfas(&[
        "pretrain", "-c", &cfg, "--objective", "ctc", "--epochs", "1", "--init", &d("runs/quantized.safetensors"), "--output",
        &d("runs/text.safetensors"),
    ])?;
    mfas(&["search", "-c", &cfg, "--epochs", "1"])?;
    mfas(&["derive", "-c", &cfg, "--epochs", "1", "--strategy", &d("runs/search_fold0.json")])?;
    mfas(&["eval", "-c", &cfg, "--model", &d("runs/derived_fold0.safetensors")])?;
    mfas(&["plot-grid", "--out", &d("runs/grid.svg"), &d("runs/search_fold0.json")])?;
    mfas(&["report", "--out", &d("runs/report.md"), &d("runs/derive.json"), &d("runs/eval_fold0.json")])?;
    let mut files = Vec::new();
    for name in [
        "runs/pretrain_continuous.json",
        "runs/pretrain_ctc.json",
        "runs/search_fold0.json",
        "runs/alpha_fold0.md",
        "runs/derive.json",
        "runs/eval_fold0.json",
        "runs/grid.svg",
        "runs/report.md",
    ] {
        files.push((name.to_string(), std::fs::read(dir.join(name)).map_err(|err| format!("{name}: {err}"))?));
    }
    Ok(files)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(e)?;
    let b = tempfile::tempdir().map_err(e)?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, format!("{name} differs between two runs with the same seed"))?;
    }
    let t = within(start, Duration::from_secs(10 * 60), "two pipeline runs")?;
    Ok(format!("8 commands twice, {} reports identical, {t}", first.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient_suite", gradient_suite),
        ("shape_and_count_exactness", shapes_and_counts),
        ("mixture_one_hot_consistency", mixture_consistency),
        ("stop_gradient_protocol", stop_gradient),
        ("metric_oracle", metric_oracle),
        ("cv_partition", cv_partition),
        ("end_to_end_smoke", end_to_end),
        ("rigged_search_oracle", rigged_search),
        ("ablation_trend", ablation_trend),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
