use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;
use serde_json::json;
use trajguide::pipeline::RunConfig;
use trajguide::trajectory::{quantize_box, GridBox};

use crate::artifacts::{load_attention, png_bytes, AttentionSource, Staged};
use crate::config::read_json;
use crate::failure::{CmdResult, Failure};
use crate::Outcome;

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);
const OVERLAY: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub frame: usize,
    pub timestep: usize,
    pub source: AttentionSource,
    /// Top-left pixel of the tile.
    pub origin: [u32; 2],
    /// Overlay box in map cells.
    pub box_cells: GridBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct GridLayout {
    pub token: usize,
    pub rows: usize,
    pub cols: usize,
    /// Pixels per map cell.
    pub scale: u32,
    pub map_height: usize,
    pub map_width: usize,
    pub tiles: Vec<Tile>,
}

/// Render a (timesteps × frames) grid of one token's maps with the
/// trajectory box outlined. Each tile is normalized by its own maximum, so
/// the brightest cell of a tile is its largest attention value.
pub fn cmd_visualize(run: &Path, token: usize, frames: Option<&[usize]>, output: &Path, scale: u32) -> CmdResult<Outcome> {
    if scale == 0 {
        return Err(Failure::invalid("--scale must be positive"));
    }
    let cfg_path = run.join("config.json");
    let cfg: RunConfig = serde_json::from_value(read_json(&cfg_path)?).map_err(|e| Failure::reading(&cfg_path, e))?;
    let traj = cfg.trajectory.resolve().map_err(Failure::from_engine)?;
    let (maps, index) = load_attention(&run.join("attention.bin"))?;
    let (n_entries, n_frames, n_tokens, h, w) = maps.dim();
    if token >= n_tokens {
        return Err(Failure::invalid(format!("token {token} is out of range: the run captured {n_tokens} token maps")));
    }
    let frames: Vec<usize> = match frames {
        Some(f) => f.to_vec(),
        None => (0..n_frames).collect(),
    };
    if let Some(bad) = frames.iter().find(|&&f| f >= n_frames) {
        return Err(Failure::invalid(format!("frame {bad} is out of range: the run has {n_frames} frames")));
    }
    if frames.is_empty() {
        return Err(Failure::invalid("no frames selected"));
    }
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let (cols, rows) = (frames.len(), n_entries);
    let mut img = RgbImage::from_pixel(
        cols as u32 * (tw + GAP) + GAP,
        rows as u32 * (th + GAP) + GAP,
        BACKGROUND,
    );
    let mut tiles = Vec::with_capacity(rows * cols);
    for (row, entry) in index.entries.iter().enumerate() {
        for (col, &f) in frames.iter().enumerate() {
            let map = maps.slice(ndarray::s![row, f, token, .., ..]);
            let peak = map.fold(0.0f64, |m, &v| m.max(v));
            let origin = [GAP + col as u32 * (tw + GAP), GAP + row as u32 * (th + GAP)];
            for r in 0..h {
                for c in 0..w {
                    let g = if peak > 0.0 { (map[[r, c]] / peak * 255.0).round() as u8 } else { 0 };
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let x = origin[0] + c as u32 * scale + dx;
                            let y = origin[1] + r as u32 * scale + dy;
                            img.put_pixel(x, y, Rgb([g, g, g]));
                        }
                    }
                }
            }
            let gb = quantize_box(&traj.boxes()[f], w, h);
            outline(&mut img, origin, gb, scale);
            tiles.push(Tile {
                row,
                col,
                frame: f,
                timestep: entry.timestep,
                source: entry.source,
                origin,
                box_cells: gb,
            });
        }
    }
    let layout = GridLayout { token, rows, cols, scale, map_height: h, map_width: w, tiles };
    let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = output.file_name().ok_or_else(|| Failure::invalid("--output has no file name"))?;
    let mut staged = Staged::default();
    staged.add(name, png_bytes(&img)?);
    staged.add_json(PathBuf::from(name).with_extension("json"), &layout)?;
    let artifacts = staged.commit(dir)?;
    Ok(Outcome::new("visualize-attention", artifacts, json!({ "rows": rows, "cols": cols, "tiles": rows * cols })))
}

/// One-pixel outline on the outermost pixels of the box's cells.
fn outline(img: &mut RgbImage, origin: [u32; 2], gb: GridBox, scale: u32) {
    let x0 = origin[0] + gb.col_lo as u32 * scale;
    let x1 = origin[0] + gb.col_hi as u32 * scale - 1;
    let y0 = origin[1] + gb.row_lo as u32 * scale;
    let y1 = origin[1] + gb.row_hi as u32 * scale - 1;
    for x in x0..=x1 {
        img.put_pixel(x, y0, OVERLAY);
        img.put_pixel(x, y1, OVERLAY);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, OVERLAY);
        img.put_pixel(x1, y, OVERLAY);
    }
}
