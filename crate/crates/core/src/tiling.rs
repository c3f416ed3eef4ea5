//! Dynamic tiling and frame sampling with vision-token accounting.
//!
//! Each 448x448 tile or frame is patchified at 14 px (32x32 = 1024 tokens)
//! and 2x2 average pooled, leaving 256 tokens.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TILE_PX: u32 = 448;
pub const PATCH_PX: u32 = 14;
pub const POOL: u32 = 2;
pub const TOKENS_PER_TILE: usize = ((TILE_PX / PATCH_PX) * (TILE_PX / PATCH_PX) / (POOL * POOL)) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: u32,
    pub cols: u32,
    pub tile_px: u32,
    pub thumbnail: bool,
    pub tokens_per_tile: usize,
    pub total_tokens: usize,
}

impl TilePlan {
    pub fn tiles(&self) -> u32 {
        self.rows * self.cols
    }
}

/// Aspect mismatch of a `rows x cols` grid for a `width x height` image as
/// the exact ratio `max(a, b) / min(a, b)` with `a = cols*height`,
/// `b = rows*width`. Its logarithm is the absolute log-aspect distance.
fn mismatch(rows: u32, cols: u32, width: u32, height: u32) -> (u128, u128) {
    let a = cols as u128 * height as u128;
    let b = rows as u128 * width as u128;
    if a >= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn cmp_ratio(x: (u128, u128), y: (u128, u128)) -> Ordering {
    (x.0 * y.1).cmp(&(y.0 * x.1))
}

/// Chooses the tile grid for an image.
///
/// Candidate grids never upsample: rows are capped at `ceil(height / 448)` and
/// columns at `ceil(width / 448)`, plus the `max_tiles` budget. Among those the
/// grid with the smallest log-aspect distance wins, then the larger grid, then
/// the one with fewer rows (fewer columns for portrait images, so transposing
/// the image transposes the plan). Multi-tile plans get a thumbnail.
pub fn plan_image_tiles(width_px: u32, height_px: u32, max_tiles: u32) -> Result<TilePlan> {
    if max_tiles < 1 {
        return Err(Error::invalid("max_tiles must be at least 1"));
    }
    if width_px < 1 || height_px < 1 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {width_px}x{height_px}"
        )));
    }
    let max_rows = height_px.div_ceil(TILE_PX).min(max_tiles);
    let max_cols = width_px.div_ceil(TILE_PX).min(max_tiles);

    let mut best = (1u32, 1u32);
    for r in 1..=max_rows {
        for c in 1..=max_cols {
            if r * c > max_tiles {
                break;
            }
            let ord = cmp_ratio(
                mismatch(r, c, width_px, height_px),
                mismatch(best.0, best.1, width_px, height_px),
            )
            .then_with(|| (best.0 * best.1).cmp(&(r * c)))
            .then_with(|| {
                if width_px >= height_px {
                    r.cmp(&best.0)
                } else {
                    c.cmp(&best.1)
                }
            });
            if ord == Ordering::Less {
                best = (r, c);
            }
        }
    }
    let (rows, cols) = best;
    let thumbnail = rows * cols > 1;
    let total_tokens = (rows * cols + u32::from(thumbnail)) as usize * TOKENS_PER_TILE;
    Ok(TilePlan {
        rows,
        cols,
        tile_px: TILE_PX,
        thumbnail,
        tokens_per_tile: TOKENS_PER_TILE,
        total_tokens,
    })
}

/// Video frames carry no thumbnail.
pub fn plan_video_tokens(n_frames_used: usize) -> usize {
    n_frames_used * TOKENS_PER_TILE
}

/// Evenly spaced 0-based frame indices, `round(i * (n-1) / (k-1))` with
/// halves rounded up. A single sample takes the middle frame.
pub fn sample_frames_uniform(n_total: usize, k: usize) -> Vec<usize> {
    if n_total == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![(n_total - 1) / 2];
    }
    let span = (n_total - 1) as u128;
    let denom = (k - 1) as u128;
    (0..k as u128)
        .map(|i| ((2 * i * span + denom) / (2 * denom)) as usize)
        .collect()
}
