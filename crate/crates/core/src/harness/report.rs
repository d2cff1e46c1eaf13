//! Plain-text result tables.

use std::fmt::Write as _;

use crate::fusion::AlphaSnapshot;
use crate::harness::search::FoldReport;
use crate::harness::train::PretrainEpoch;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn fold_table(rows: &[FoldReport]) -> String {
    let mut s = String::from("| fold | held out | UA | WA |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", r.fold, r.held_out_key, r.metrics.ua, r.metrics.wa);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let ua = rows.iter().map(|r| r.metrics.ua).sum::<f64>() / n;
        let wa = rows.iter().map(|r| r.metrics.wa).sum::<f64>() / n;
        let _ = writeln!(s, "| mean | - | {ua:.4} | {wa:.4} |");
    }
    s
}

pub fn pretrain_table(history: &[PretrainEpoch]) -> String {
    let mut s = String::from("| epoch | loss | perplexity | UA | WA | MSE V | MSE A | MSE D |\n|---|---|---|---|---|---|---|---|\n");
    for e in history {
        let p = e.probe.as_ref();
        let _ = writeln!(
            s,
            "| {} | {:.4} | {} | {} | {} | {} | {} | {} |",
            e.epoch,
            e.loss,
            opt(e.perplexity),
            opt(p.map(|m| m.ua)),
            opt(p.map(|m| m.wa)),
            opt(p.and_then(|m| m.mse_v)),
            opt(p.and_then(|m| m.mse_a)),
            opt(p.and_then(|m| m.mse_d)),
        );
    }
    s
}

pub fn alpha_table(snap: &AlphaSnapshot) -> String {
    let mut s = format!("epoch {}\n| level |", snap.epoch);
    for o in &snap.operations {
        let _ = write!(s, " {o} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(snap.operations.len()));
    s.push('\n');
    for (level, row) in snap.levels.iter().zip(&snap.weights) {
        let _ = write!(s, "| {level} |");
        for w in row {
            let _ = write!(s, " {w:.4} |");
        }
        s.push('\n');
    }
    s
}
