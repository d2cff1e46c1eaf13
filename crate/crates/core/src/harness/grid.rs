//! Per-fold strategy grids: one 3 × 8 group per fold, rows target/deep/raw,
//! one column per operation. The argmax operation of every level is filled;
//! the selected level's operation is drawn in red.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Level;
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, OperationId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub strategy: FusionStrategy,
}

const CELL: usize = 14;
const GAP: usize = 2;
const GROUP_GAP: usize = 24;
const LABEL_H: usize = 16;
const MARGIN: usize = 10;
const GROUPS_PER_ROW: usize = 5;
const ROWS: [Level; 3] = [Level::Target, Level::Deep, Level::Raw];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fill {
    Empty,
    Chosen,
    Best,
}

impl Fill {
    fn rgb(self) -> [u8; 3] {
        match self {
            Fill::Empty => [255, 255, 255],
            Fill::Chosen => [90, 90, 90],
            Fill::Best => [214, 39, 40],
        }
    }
}

struct Layout {
    width: usize,
    height: usize,
    cells: Vec<(usize, usize, Fill)>,
    labels: Vec<(usize, usize, String)>,
}

fn group_w() -> usize {
    8 * CELL + 7 * GAP
}

fn group_h() -> usize {
    LABEL_H + 3 * CELL + 2 * GAP
}

fn layout(entries: &[GridEntry]) -> Layout {
    let cols = entries.len().min(GROUPS_PER_ROW);
    let rows = entries.len().div_ceil(GROUPS_PER_ROW);
    let width = 2 * MARGIN + cols * group_w() + (cols - 1) * GROUP_GAP;
    let height = 2 * MARGIN + rows * group_h() + (rows - 1) * GROUP_GAP;
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for (g, e) in entries.iter().enumerate() {
        let gx = MARGIN + (g % GROUPS_PER_ROW) * (group_w() + GROUP_GAP);
        let gy = MARGIN + (g / GROUPS_PER_ROW) * (group_h() + GROUP_GAP);
        labels.push((gx, gy + LABEL_H - 4, e.label.clone()));
        for (r, level) in ROWS.iter().enumerate() {
            for op in OperationId::ALL {
                let chosen = e.strategy.ops.get(level) == Some(&op);
                let fill = match (chosen, *level == e.strategy.selected_level) {
                    (true, true) => Fill::Best,
                    (true, false) => Fill::Chosen,
                    _ => Fill::Empty,
                };
                cells.push((gx + op.index() * (CELL + GAP), gy + LABEL_H + r * (CELL + GAP), fill));
            }
        }
    }
    Layout {
        width,
        height,
        cells,
        labels,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(entries: &[GridEntry]) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::input("no fold results to plot"));
    }
    let l = layout(entries);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        l.width, l.height, l.width, l.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (x, y, text) in &l.labels {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" font-family="monospace" font-size="11">{}</text>"#, escape(text));
    }
    for (x, y, fill) in &l.cells {
        let [r, g, b] = fill.rgb();
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})" stroke="black" stroke-width="1"/>"#
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_png(entries: &[GridEntry]) -> Result<image::RgbImage> {
    if entries.is_empty() {
        return Err(Error::input("no fold results to plot"));
    }
    let l = layout(entries);
    let mut img = image::RgbImage::from_pixel(l.width as u32, l.height as u32, image::Rgb([255, 255, 255]));
    for (x, y, fill) in &l.cells {
        for dy in 0..CELL {
            for dx in 0..CELL {
                let border = dx == 0 || dy == 0 || dx == CELL - 1 || dy == CELL - 1;
                let c = if border { [0, 0, 0] } else { fill.rgb() };
                img.put_pixel((x + dx) as u32, (y + dy) as u32, image::Rgb(c));
            }
        }
    }
    Ok(img)
}

/// Writes an `.svg` or `.png` grid depending on the extension.
pub fn export_strategy_grid(entries: &[GridEntry], out: &Path) -> Result<()> {
    let ext = out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("svg") => {
            let svg = render_svg(entries)?;
            std::fs::write(out, svg)?;
        }
        Some("png") => {
            let img = render_png(entries)?;
            img.save(out).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        _ => return Err(Error::config(format!("{}: grid output must end in .svg or .png", out.display()))),
    }
    Ok(())
}
