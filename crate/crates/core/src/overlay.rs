//! Colored box overlays marking the subject of region prompts on frames.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tiling::sample_frames_uniform;

pub const DEFAULT_THICKNESS: u32 = 4;
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

pub fn named_color(name: &str) -> Option<[u8; 3]> {
    match name.to_ascii_lowercase().as_str() {
        "red" => Some(RED),
        "blue" => Some(BLUE),
        _ => None,
    }
}

fn de_color<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[u8; 3], D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        Rgb([u8; 3]),
        Named(String),
    }
    match Spec::deserialize(d)? {
        Spec::Rgb(c) => Ok(c),
        Spec::Named(n) => named_color(&n).ok_or_else(|| serde::de::Error::custom(format!("unknown color {n:?}"))),
    }
}

/// Pixel box with exclusive right and bottom edges.
pub type PixelBox = [u32; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub track_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(deserialize_with = "de_color")]
    pub color: [u8; 3],
    /// Frame index to box; absent frames have the subject out of view.
    #[serde(default)]
    pub boxes: BTreeMap<usize, PixelBox>,
}

impl BoxTrack {
    pub fn new(track_id: impl Into<String>, color: [u8; 3]) -> Self {
        BoxTrack {
            track_id: track_id.into(),
            video_id: None,
            color,
            boxes: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, b) in &self.boxes {
            if b[0] >= b[2] || b[1] >= b[3] {
                return Err(Error::invalid(format!(
                    "track {}: frame {idx}: degenerate box {b:?}",
                    self.track_id
                )));
            }
        }
        Ok(())
    }
}

fn check_bounds(b: &PixelBox, img: &RgbImage, frame_index: usize) -> Result<()> {
    let (w, h) = img.dimensions();
    if b[0] >= b[2] || b[1] >= b[3] || b[2] > w || b[3] > h {
        return Err(Error::invalid(format!(
            "frame {frame_index}: box {b:?} is outside the {w}x{h} frame"
        )));
    }
    Ok(())
}

/// Draws the outline in place; the band is clipped to the box.
pub fn draw_box(img: &mut RgbImage, b: &PixelBox, color: [u8; 3], thickness: u32) {
    let [x0, y0, x1, y1] = *b;
    let t = thickness.max(1);
    let px = Rgb(color);
    for y in y0..y1 {
        let edge_row = y < y0.saturating_add(t) || y + t >= y1;
        for x in x0..x1 {
            if edge_row || x < x0.saturating_add(t) || x + t >= x1 {
                img.put_pixel(x, y, px);
            }
        }
    }
}

fn render_indexed(frames: &[(usize, &RgbImage)], track: &BoxTrack, thickness: u32) -> Result<Vec<RgbImage>> {
    if thickness == 0 {
        return Err(Error::invalid("thickness must be positive"));
    }
    frames
        .iter()
        .map(|&(idx, img)| {
            let mut out = img.clone();
            if let Some(b) = track.boxes.get(&idx) {
                check_bounds(b, img, idx)?;
                draw_box(&mut out, b, track.color, thickness);
            }
            Ok(out)
        })
        .collect()
}

/// Returns annotated copies; frame `i` gets the box keyed `i`.
pub fn render_overlay(frames: &[RgbImage], track: &BoxTrack, thickness: u32) -> Result<Vec<RgbImage>> {
    let indexed: Vec<(usize, &RgbImage)> = frames.iter().enumerate().collect();
    render_indexed(&indexed, track, thickness)
}

/// Draws several tracks in order; later tracks cover earlier ones.
pub fn render_tracks(frames: &[RgbImage], tracks: &[BoxTrack], thickness: u32) -> Result<Vec<RgbImage>> {
    let mut out = frames.to_vec();
    for t in tracks {
        out = render_overlay(&out, t, thickness)?;
    }
    Ok(out)
}

/// Samples `k` frames uniformly and annotates only those. Returns the
/// original frame index with each rendered frame.
pub fn select_and_render(
    frames: &[RgbImage],
    tracks: &[BoxTrack],
    k: usize,
    thickness: u32,
) -> Result<Vec<(usize, RgbImage)>> {
    let idx = sample_frames_uniform(frames.len(), k);
    let mut picked: Vec<RgbImage> = idx.iter().map(|&i| frames[i].clone()).collect();
    for t in tracks {
        let indexed: Vec<(usize, &RgbImage)> = idx.iter().copied().zip(picked.iter()).collect();
        picked = render_indexed(&indexed, t, thickness)?;
    }
    Ok(idx.into_iter().zip(picked).collect())
}

pub fn frame_path(root: &Path, video_id: &str, frame_index: usize, ext: &str) -> PathBuf {
    root.join(video_id).join(format!("{frame_index:05}.{ext}"))
}

/// Reads `*.png`/`*.ppm` frames from `dir`, ordered by the numeric file stem.
pub fn load_frames(dir: &Path) -> Result<Vec<(usize, RgbImage)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "ppm")) {
            continue;
        }
        let idx = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("{}: frame file name is not a frame index", path.display())))?;
        files.push((idx, path));
    }
    files.sort();
    files
        .into_iter()
        .map(|(idx, path)| {
            let img = image::open(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok((idx, img.to_rgb8()))
        })
        .collect()
}

pub fn save_frame(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
