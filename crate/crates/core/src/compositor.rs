//! Canvas layout, frame warping, gauge normalization, motion panoramas,
//! background reconstruction, foreground segmentation and BRE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};
use crate::nonkey::ReliabilityMap;
use crate::raster::{Mask, Raster};

/// 64 megapixels.
pub const DEFAULT_CANVAS_CAP: usize = 64_000_000;
pub const DEFAULT_TAU_FG: f64 = 0.1;

/// Maps global coordinates to raster indices: `index = global + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub ox: f64,
    pub oy: f64,
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub fn to_global(&self, x: usize, y: usize) -> Point {
        (x as f64 - self.ox, y as f64 - self.oy)
    }

    pub fn to_index(&self, p: Point) -> Point {
        (p.0 + self.ox, p.1 + self.oy)
    }
}

/// Left-composes `(mean(p_first, p_last))^-1` onto every transform. If the
/// mean is singular, anchors on the first frame instead; the flag reports
/// that fallback.
pub fn normalize_gauge(hs: &[Homography]) -> Result<(Vec<Homography>, bool)> {
    let (Some(first), Some(last)) = (hs.first(), hs.last()) else {
        return Ok((Vec::new(), false));
    };
    let (correction, fallback) = match first.elementwise_mean(last).and_then(|m| m.invert()) {
        Ok(c) => (c, false),
        Err(_) => (first.invert()?, true),
    };
    let out = hs
        .iter()
        .map(|h| correction.compose(h))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, fallback))
}

fn frame_corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Integer bounding box of all warped frame corners.
pub fn canvas_bounds(width: usize, height: usize, hs: &[Homography], cap: usize) -> Result<Canvas> {
    if hs.is_empty() {
        return Err(Error::InvalidInput("no frames to lay out".into()));
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, h) in hs.iter().enumerate() {
        for c in frame_corners(width, height) {
            let p = h.warp_point(c)?;
            x0 = x0.min(p.0);
            y0 = y0.min(p.1);
            x1 = x1.max(p.0);
            y1 = y1.max(p.1);
        }
        let cw = (x1.ceil() - x0.floor() + 1.0).max(0.0);
        let ch = (y1.ceil() - y0.floor() + 1.0).max(0.0);
        if !(cw * ch <= cap as f64) {
            return Err(Error::CanvasTooLarge {
                frame: i,
                width: cw.min(usize::MAX as f64) as usize,
                height: ch.min(usize::MAX as f64) as usize,
                cap,
            });
        }
    }
    Ok(Canvas {
        ox: -x0.floor(),
        oy: -y0.floor(),
        width: (x1.ceil() - x0.floor()) as usize + 1,
        height: (y1.ceil() - y0.floor()) as usize + 1,
    })
}

/// Inverse-warps `image` onto the canvas with bilinear sampling. Canvas
/// pixels whose preimage falls outside the source are invalid (value 0).
pub fn warp_frame(image: &Raster, h: &Homography, canvas: &Canvas) -> Result<(Raster, Mask)> {
    let inv = h.invert()?;
    let w = canvas.width;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..canvas.height)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; w];
            let mut valid = vec![false; w];
            for x in 0..w {
                if let Ok(p) = inv.warp_point(canvas.to_global(x, y)) {
                    if let Some(v) = image.sample(p.0, p.1) {
                        vals[x] = v;
                        valid[x] = true;
                    }
                }
            }
            (vals, valid)
        })
        .collect();
    let mut data = Vec::with_capacity(w * canvas.height);
    let mut mask = Vec::with_capacity(w * canvas.height);
    for (v, m) in rows {
        data.extend(v);
        mask.extend(m);
    }
    Ok((
        Raster::from_vec(w, canvas.height, data),
        Mask::from_vec(w, canvas.height, mask),
    ))
}

/// Reliability-weighted background over the canvas. Pixels that no frame
/// covers are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPlate {
    pub image: Raster,
    pub weight_sum: Raster,
    pub valid: Mask,
}

impl BackgroundPlate {
    /// Value at canvas-index coordinates if the nearest plate pixel is valid.
    pub fn sample(&self, p: Point) -> Option<f64> {
        let (xr, yr) = (p.0.round(), p.1.round());
        if xr < 0.0 || yr < 0.0 {
            return None;
        }
        let (xi, yi) = (xr as usize, yr as usize);
        if xi >= self.valid.width() || yi >= self.valid.height() || !self.valid.get(xi, yi) {
            return None;
        }
        self.image.sample(p.0, p.1)
    }
}

/// `B = sum(R * I) / sum(R)` over warped frames and their warped maps.
pub fn reconstruct_background(
    frames: &[(&Raster, &Homography, &ReliabilityMap)],
    canvas: &Canvas,
) -> Result<BackgroundPlate> {
    let n = canvas.width * canvas.height;
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (image, h, map) in frames {
        let (wi, mi) = warp_frame(image, h, canvas)?;
        let (wr, _) = warp_frame(&map.grid, h, canvas)?;
        for k in 0..n {
            if mi.data()[k] {
                let r = wr.data()[k];
                num[k] += r * wi.data()[k];
                den[k] += r;
            }
        }
    }
    let valid: Vec<bool> = den.iter().map(|&d| d > 0.0).collect();
    let image: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&a, &d)| if d > 0.0 { (a / d).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Ok(BackgroundPlate {
        image: Raster::from_vec(canvas.width, canvas.height, image),
        weight_sum: Raster::from_vec(canvas.width, canvas.height, den),
        valid: Mask::from_vec(canvas.width, canvas.height, valid),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Later frames drawn over earlier ones.
    Overlay,
    /// Each frame drawn over the background plate.
    OverBackground,
}

impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RenderMode::Overlay => "overlay",
            RenderMode::OverBackground => "over-background",
        })
    }
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlay" => Ok(RenderMode::Overlay),
            "over-background" | "over_background" => Ok(RenderMode::OverBackground),
            other => Err(Error::InvalidInput(format!("unknown render mode '{other}'"))),
        }
    }
}

/// Composites frames in temporal order, calling `on_frame` with each
/// per-frame canvas, and returns the final mosaic with its coverage.
pub fn render_panorama(
    frames: &[&Raster],
    hs: &[Homography],
    canvas: &Canvas,
    mode: RenderMode,
    plate: Option<&BackgroundPlate>,
    mut on_frame: impl FnMut(usize, &Raster, &Mask) -> Result<()>,
) -> Result<(Raster, Mask)> {
    if frames.len() != hs.len() {
        return Err(Error::InvalidInput(format!(
            "{} frames but {} transforms",
            frames.len(),
            hs.len()
        )));
    }
    let (base, base_mask) = match (mode, plate) {
        (RenderMode::OverBackground, Some(p)) => (p.image.clone(), p.valid.clone()),
        (RenderMode::OverBackground, None) => {
            return Err(Error::InvalidInput(
                "over-background rendering needs a background plate".into(),
            ))
        }
        (RenderMode::Overlay, _) => (
            Raster::new(canvas.width, canvas.height, 0.0),
            Mask::new(canvas.width, canvas.height, false),
        ),
    };
    let mut mosaic = base.clone();
    let mut coverage = base_mask.clone();
    for (i, (img, h)) in frames.iter().zip(hs).enumerate() {
        let (wi, mi) = warp_frame(img, h, canvas)?;
        if mode == RenderMode::OverBackground {
            mosaic = base.clone();
            coverage = base_mask.clone();
        }
        for k in 0..mi.data().len() {
            if mi.data()[k] {
                mosaic.data_mut()[k] = wi.data()[k];
            }
        }
        coverage = Mask::from_vec(
            canvas.width,
            canvas.height,
            coverage
                .data()
                .iter()
                .zip(mi.data())
                .map(|(&a, &b)| a || b)
                .collect(),
        );
        on_frame(i, &mosaic, &coverage)?;
    }
    Ok((mosaic, coverage))
}

/// 3x3 majority vote over in-bounds neighbors.
pub fn majority_filter(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        let (mut on, mut total) = (0, 0);
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                total += 1;
                on += mask.get(nx, ny) as usize;
            }
        }
        2 * on > total
    })
}

/// Raw threshold mask `|B - I| > tau_fg` on the frame's own pixel grid;
/// pixels landing on invalid plate regions are false.
pub fn threshold_foreground(
    frame: &Raster,
    h: &Homography,
    plate: &BackgroundPlate,
    canvas: &Canvas,
    tau_fg: f64,
) -> Mask {
    Mask::from_fn(frame.width(), frame.height(), |x, y| {
        let Ok(g) = h.warp_point((x as f64, y as f64)) else {
            return false;
        };
        plate
            .sample(canvas.to_index(g))
            .is_some_and(|b| (b - frame.get(x, y)).abs() > tau_fg)
    })
}

/// Foreground mask in frame-local pixels, optionally majority filtered.
pub fn segment_foreground(
    frame: &Raster,
    h: &Homography,
    plate: &BackgroundPlate,
    canvas: &Canvas,
    tau_fg: f64,
    majority: bool,
) -> Mask {
    let raw = threshold_foreground(frame, h, plate, canvas, tau_fg);
    if majority {
        majority_filter(&raw)
    } else {
        raw
    }
}

/// Mean absolute difference of two warped frames over their common
/// footprint, restricted to `mask` (canvas grid) when given.
pub fn bre(
    frame_i: &Raster,
    frame_j: &Raster,
    h_i: &Homography,
    h_j: &Homography,
    canvas: &Canvas,
    mask: Option<&Mask>,
) -> Result<f64> {
    let (wi, mi) = warp_frame(frame_i, h_i, canvas)?;
    let (wj, mj) = warp_frame(frame_j, h_j, canvas)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut overlap = 0usize;
    for k in 0..wi.data().len() {
        if !(mi.data()[k] && mj.data()[k]) {
            continue;
        }
        overlap += 1;
        if mask.is_some_and(|m| !m.data()[k]) {
            continue;
        }
        sum += (wi.data()[k] - wj.data()[k]).abs();
        count += 1;
    }
    if overlap == 0 {
        return Err(Error::UndefinedBre("warped frames do not intersect".into()));
    }
    if count == 0 {
        return Err(Error::UndefinedBre("background mask is empty on the intersection".into()));
    }
    Ok(sum / count as f64)
}
