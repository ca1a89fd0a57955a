//! Static PNG output: gate bar charts, attention heatmaps and rank-list
//! grids. Drawing uses only integer pixel ops so the bytes are reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use crate::atmoe::GateRecord;
use crate::error::{DemoError, Result};
use crate::hdm::{Heatmap, Slot, N_DECOUPLED};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

/// One colour per decoupled slot.
const SLOT_COLORS: [Rgb<u8>; N_DECOUPLED] = [
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([31, 119, 180]),
    Rgb([188, 189, 34]),
    Rgb([23, 190, 207]),
    Rgb([148, 103, 189]),
    Rgb([127, 127, 127]),
];

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DemoError::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DemoError::Export(format!("{}: {e}", path.display())))
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

const BAR_W: u32 = 10;
const BAR_GAP: u32 = 2;
const PANEL_H: u32 = 100;
const PANEL_PAD: u32 = 8;
const PANELS_PER_ROW: u32 = 4;

/// Grouped bars of head-averaged gate weights, one panel per instance.
/// Bar height is proportional to weight with full panel height meaning 1.
pub fn gate_bars(records: &[GateRecord]) -> Result<RgbImage> {
    if records.is_empty() {
        return Err(DemoError::Export("no gate records to plot".into()));
    }
    let panel_w = N_DECOUPLED as u32 * (BAR_W + BAR_GAP) + BAR_GAP;
    let cols = PANELS_PER_ROW.min(records.len() as u32);
    let rows = (records.len() as u32).div_ceil(PANELS_PER_ROW);
    let mut img = RgbImage::from_pixel(
        cols * (panel_w + PANEL_PAD) + PANEL_PAD,
        rows * (PANEL_H + PANEL_PAD) + PANEL_PAD,
        WHITE,
    );
    for (i, r) in records.iter().enumerate() {
        let px = PANEL_PAD + (i as u32 % PANELS_PER_ROW) * (panel_w + PANEL_PAD);
        let py = PANEL_PAD + (i as u32 / PANELS_PER_ROW) * (PANEL_H + PANEL_PAD);
        fill_rect(&mut img, px, py + PANEL_H - 1, panel_w, 1, AXIS);
        for (e, w) in r.gate.head_average().iter().enumerate() {
            let h = bar_height(*w);
            let x = px + BAR_GAP + e as u32 * (BAR_W + BAR_GAP);
            fill_rect(&mut img, x, py + PANEL_H - 1 - h, BAR_W, h, SLOT_COLORS[e]);
        }
    }
    Ok(img)
}

/// Pixel height of a bar for weight `w` in `[0, 1]`.
pub fn bar_height(w: f64) -> u32 {
    ((w.clamp(0.0, 1.0) * (PANEL_H - 1) as f64).round()) as u32
}

/// Blue (low) to red (high) ramp.
fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    Rgb([r, g, b])
}

/// Heatmap scaled by its own maximum, `cell x cell` pixels per patch.
pub fn heatmap_image(map: &Heatmap, cell: u32) -> RgbImage {
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    let mut img = RgbImage::new(map.grid_cols as u32 * cell, map.grid_rows as u32 * cell);
    for r in 0..map.grid_rows {
        for c in 0..map.grid_cols {
            let v = map.values[r * map.grid_cols + c];
            let t = if max > 0.0 { v / max } else { 0.0 };
            fill_rect(&mut img, c as u32 * cell, r as u32 * cell, cell, cell, ramp(t));
        }
    }
    img
}

pub fn heatmap_file_name(map: &Heatmap) -> String {
    format!("inst{:03}_{}_{}.png", map.instance, map.slot.name(), map.modality.short())
}

/// One PNG per map plus `attention.json` holding the raw values.
pub fn write_heatmaps(maps: &[Heatmap], dir: &Path, cell: u32) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| DemoError::io(dir, e))?;
    let mut written = Vec::with_capacity(maps.len() + 1);
    let mut entries = Vec::with_capacity(maps.len());
    for m in maps {
        let name = heatmap_file_name(m);
        let path = dir.join(&name);
        save_png(&heatmap_image(m, cell), &path)?;
        written.push(path);
        entries.push(serde_json::json!({
            "file": name,
            "instance": m.instance,
            "slot": m.slot.name(),
            "modality": m.modality.short(),
            "grid_rows": m.grid_rows,
            "grid_cols": m.grid_cols,
            "mass": m.values.iter().sum::<f64>(),
            "values": m.values,
        }));
    }
    let sidecar = dir.join("attention.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "slots": Slot::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "maps": entries,
    }))
    .expect("json serializes");
    fs::write(&sidecar, text).map_err(|e| DemoError::io(&sidecar, e))?;
    written.push(sidecar);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Query,
    Match,
    Mismatch,
}

impl Frame {
    pub fn color(self) -> Rgb<u8> {
        match self {
            Frame::Query => Rgb([60, 60, 60]),
            Frame::Match => Rgb([0, 170, 0]),
            Frame::Mismatch => Rgb([220, 0, 0]),
        }
    }
}

const BORDER: u32 = 3;
const TILE_GAP: u32 = 4;

/// Images laid out left to right, each framed in its colour. Every tile is
/// resized (nearest neighbour) to the first image's size.
pub fn tile_row(tiles: &[(PathBuf, Frame)]) -> Result<RgbImage> {
    let mut imgs = Vec::with_capacity(tiles.len());
    for (p, _) in tiles {
        let img = image::open(p)
            .map_err(|e| DemoError::Export(format!("cannot read {}: {e}", p.display())))?
            .to_rgb8();
        imgs.push(img);
    }
    let (tw, th) = imgs.first().map(|i| i.dimensions()).ok_or_else(|| DemoError::Export("nothing to draw".into()))?;
    let cell_w = tw + 2 * BORDER;
    let n = tiles.len() as u32;
    let mut out = RgbImage::from_pixel(n * cell_w + (n + 1) * TILE_GAP, th + 2 * BORDER + 2 * TILE_GAP, WHITE);
    for (i, (img, (_, frame))) in imgs.iter().zip(tiles).enumerate() {
        let x0 = TILE_GAP + i as u32 * (cell_w + TILE_GAP);
        fill_rect(&mut out, x0, TILE_GAP, cell_w, th + 2 * BORDER, frame.color());
        let resized = if img.dimensions() == (tw, th) {
            img.clone()
        } else {
            imageops::resize(img, tw, th, imageops::FilterType::Nearest)
        };
        imageops::replace(&mut out, &resized, (x0 + BORDER) as i64, (TILE_GAP + BORDER) as i64);
    }
    Ok(out)
}
