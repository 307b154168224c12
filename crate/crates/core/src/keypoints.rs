//! Keypoint detection, description, scale normalization and ratio-test matching.
//!
//! The detector is a multi-scale Harris detector: corners are located as
//! spatial maxima of the finest-scale response and each is assigned the
//! scale at which its scale-normalized response peaks. Keypoints can also be
//! injected from a JSON file, bypassing detection entirely.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::raster::Raster;

pub const DESCRIPTOR_LEN: usize = 64;
pub const DEFAULT_RATIO: f64 = 0.8;
pub const DEFAULT_BUDGET: usize = 500;

/// Differentiation scales of the pyramid levels.
const LEVEL_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];
const HARRIS_K: f64 = 0.04;
/// Responses below this fraction of the frame maximum are numerical noise.
const RESPONSE_FLOOR: f64 = 1e-6;
const BORDER: usize = 4;

/// One grayscale video frame with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub image: Raster,
}

impl Frame {
    pub fn new(id: usize, image: Raster) -> Result<Self> {
        if image.width() < 16 || image.height() < 16 {
            return Err(Error::InvalidInput(format!(
                "frame {id} is {}x{}, minimum is 16x16",
                image.width(),
                image.height()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "frame {id} has pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { id, image })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub frame_id: usize,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    /// `scale` divided by the largest scale in the stack; 1 until normalized.
    pub norm_scale: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

impl Keypoint {
    pub fn pos(&self) -> Point {
        (self.x, self.y)
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` in frame-local pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point) -> bool {
        p.0 >= self.x0 && p.0 <= self.x1 && p.1 >= self.y0 && p.1 <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCandidate {
    /// Index into the source keypoint slice.
    pub src: usize,
    /// Index into the destination keypoint slice.
    pub dst: usize,
    pub distance: f64,
    /// Larger of the two directional nearest/second-nearest distance ratios.
    pub ratio: f64,
}

struct Level {
    sigma: f64,
    response: Raster,
}

fn harris_level(image: &Raster, sigma: f64) -> Level {
    let smooth = image.gaussian_blur(sigma);
    let (w, h) = (image.width(), image.height());
    let mut ixx = Raster::new(w, h, 0.0);
    let mut iyy = Raster::new(w, h, 0.0);
    let mut ixy = Raster::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (smooth.get_clamped(xi + 1, yi) - smooth.get_clamped(xi - 1, yi));
            let gy = 0.5 * (smooth.get_clamped(xi, yi + 1) - smooth.get_clamped(xi, yi - 1));
            ixx.set(x, y, gx * gx);
            iyy.set(x, y, gy * gy);
            ixy.set(x, y, gx * gy);
        }
    }
    let integration = 2.0 * sigma;
    let ixx = ixx.gaussian_blur(integration);
    let iyy = iyy.gaussian_blur(integration);
    let ixy = ixy.gaussian_blur(integration);
    let norm = sigma.powi(4);
    let data = ixx
        .data()
        .iter()
        .zip(iyy.data())
        .zip(ixy.data())
        .map(|((a, b), c)| {
            let det = a * b - c * c;
            let tr = a + b;
            norm * (det - HARRIS_K * tr * tr)
        })
        .collect();
    Level {
        sigma,
        response: Raster::from_vec(w, h, data),
    }
}

/// Strict local maximum with a deterministic tie-break: a pixel must beat
/// neighbors that precede it in raster order and at least tie those after.
fn is_local_max(r: &Raster, x: usize, y: usize) -> bool {
    let v = r.get(x, y);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let n = r.get((x as isize + dx) as usize, (y as isize + dy) as usize);
            let before = dy < 0 || (dy == 0 && dx < 0);
            if (before && n >= v) || (!before && n > v) {
                return false;
            }
        }
    }
    true
}

fn parabolic_offset(minus: f64, center: f64, plus: f64) -> f64 {
    let denom = minus - 2.0 * center + plus;
    if denom.abs() < 1e-300 {
        return 0.0;
    }
    (0.5 * (minus - plus) / denom).clamp(-0.5, 0.5)
}

/// Detects up to `max_count` corners, strongest first. Descriptors are left empty.
pub fn detect(frame: &Frame, max_count: usize) -> Vec<Keypoint> {
    let image = &frame.image;
    let (w, h) = (image.width(), image.height());
    if max_count == 0 || w <= 2 * BORDER || h <= 2 * BORDER {
        return Vec::new();
    }
    let levels: Vec<Level> = LEVEL_SIGMAS
        .iter()
        .map(|&s| harris_level(image, s))
        .collect();
    let fine = &levels[0].response;
    let peak = fine.data().iter().cloned().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let floor = RESPONSE_FLOOR * peak;

    let mut found = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = fine.get(x, y);
            if v <= floor || !is_local_max(fine, x, y) {
                continue;
            }
            let ox = parabolic_offset(fine.get(x - 1, y), v, fine.get(x + 1, y));
            let oy = parabolic_offset(fine.get(x, y - 1), v, fine.get(x, y + 1));
            // characteristic scale: level with the largest normalized response nearby
            let mut best = (levels[0].sigma, v);
            for level in &levels[1..] {
                let mut lv = f64::MIN;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        lv = lv.max(
                            level
                                .response
                                .get_clamped(x as isize + dx, y as isize + dy),
                        );
                    }
                }
                if lv > best.1 {
                    best = (level.sigma, lv);
                }
            }
            found.push(Keypoint {
                frame_id: frame.id,
                x: x as f64 + ox,
                y: y as f64 + oy,
                scale: best.0,
                norm_scale: 1.0,
                response: v,
                descriptor: Vec::new(),
            });
        }
    }
    // percentile threshold: keep the strongest `max_count`
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    found.truncate(max_count);
    found
}

/// 64-D normalized intensity patch: an 8x8 grid of block means over a
/// square patch of side `16 * scale`, each block averaging 3x3 bilinear
/// samples. Mean-subtracted and L2-normalized, so it is invariant to
/// brightness offsets and contrast gain.
pub fn describe(kp: &Keypoint, frame: &Frame) -> Vec<f64> {
    const GRID: usize = 8;
    const SUB: usize = 3;
    let image = &frame.image;
    let side = 16.0 * kp.scale;
    let block = side / GRID as f64;
    let step = block / SUB as f64;
    let mut desc = vec![0.0; DESCRIPTOR_LEN];
    for by in 0..GRID {
        for bx in 0..GRID {
            let mut acc = 0.0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = kp.x - side / 2.0 + bx as f64 * block + (sx as f64 + 0.5) * step;
                    let y = kp.y - side / 2.0 + by as f64 * block + (sy as f64 + 0.5) * step;
                    acc += image.sample_clamped(x, y);
                }
            }
            desc[by * GRID + bx] = acc / (SUB * SUB) as f64;
        }
    }
    finalize_descriptor(&mut desc);
    desc
}

/// Mean subtraction then L2 normalization; a zero vector stays zero.
pub fn finalize_descriptor(desc: &mut [f64]) {
    let mean = desc.iter().sum::<f64>() / desc.len() as f64;
    desc.iter_mut().for_each(|v| *v -= mean);
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        desc.iter_mut().for_each(|v| *v /= norm);
    } else {
        desc.iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn detect_and_describe(frame: &Frame, max_count: usize) -> Vec<Keypoint> {
    let mut kps = detect(frame, max_count);
    for kp in &mut kps {
        kp.descriptor = describe(kp, frame);
    }
    kps
}

/// Detects and describes every frame in parallel, preserving order.
pub fn detect_frames(frames: &[Frame], max_count: usize) -> Vec<Vec<Keypoint>> {
    frames
        .par_iter()
        .map(|f| detect_and_describe(f, max_count))
        .collect()
}

/// Sets `norm_scale = scale / max_scale` over the whole stack.
pub fn normalize_scales(stack: &mut [Vec<Keypoint>]) -> Result<()> {
    let max = stack
        .iter()
        .flatten()
        .map(|k| k.scale)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::EmptyKeypoints);
    }
    for kp in stack.iter_mut().flatten() {
        kp.norm_scale = if kp.scale == max { 1.0 } else { kp.scale / max };
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ratio_of(best: f64, second: f64) -> f64 {
    if second > 0.0 {
        best / second
    } else {
        1.0
    }
}

/// Nearest-neighbor ratio matching with mutual-best filtering.
///
/// The ratio test is applied in both directions, so the result is symmetric
/// in its arguments. `region` restricts the source and destination keypoints.
pub fn match_ratio(
    src: &[Keypoint],
    dst: &[Keypoint],
    ratio_threshold: f64,
    region: Option<(Rect, Rect)>,
) -> Vec<MatchCandidate> {
    let src_idx: Vec<usize> = (0..src.len())
        .filter(|&i| region.is_none_or(|(r, _)| r.contains(src[i].pos())))
        .collect();
    let dst_idx: Vec<usize> = (0..dst.len())
        .filter(|&j| region.is_none_or(|(_, r)| r.contains(dst[j].pos())))
        .collect();
    if src_idx.len() < 2 || dst_idx.len() < 2 {
        return Vec::new();
    }
    let m = dst_idx.len();
    let dist: Vec<f64> = src_idx
        .par_iter()
        .flat_map_iter(|&i| {
            dst_idx
                .iter()
                .map(move |&j| sq_dist(&src[i].descriptor, &dst[j].descriptor).sqrt())
        })
        .collect();

    // two nearest along rows (per source) and columns (per destination)
    let two_nearest = |values: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (k, d) in values {
            if d < best.1 {
                second = best.1;
                best = (k, d);
            } else if d < second {
                second = d;
            }
        }
        (best.0, best.1, second)
    };
    let row_best: Vec<(usize, f64, f64)> = (0..src_idx.len())
        .map(|a| two_nearest(&mut (0..m).map(|b| (b, dist[a * m + b]))))
        .collect();
    let col_best: Vec<(usize, f64, f64)> = (0..m)
        .map(|b| two_nearest(&mut (0..src_idx.len()).map(|a| (a, dist[a * m + b]))))
        .collect();

    let mut out = Vec::new();
    for (a, &(b, d1, d2)) in row_best.iter().enumerate() {
        let (back, _, e2) = col_best[b];
        if back != a {
            continue;
        }
        let ratio = ratio_of(d1, d2).max(ratio_of(d1, e2));
        if ratio < ratio_threshold {
            out.push(MatchCandidate {
                src: src_idx[a],
                dst: dst_idx[b],
                distance: d1,
                ratio,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

/// One frame of the keypoint file: `{frame, keypoints: [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointFrameRecord {
    pub frame: usize,
    pub keypoints: Vec<KeypointRecord>,
}

pub fn to_records(stack: &[Vec<Keypoint>]) -> Vec<KeypointFrameRecord> {
    stack
        .iter()
        .enumerate()
        .map(|(frame, kps)| KeypointFrameRecord {
            frame,
            keypoints: kps
                .iter()
                .map(|k| KeypointRecord {
                    x: k.x,
                    y: k.y,
                    scale: k.scale,
                    response: k.response,
                    descriptor: k.descriptor.clone(),
                })
                .collect(),
        })
        .collect()
}

/// Rebuilds per-frame keypoint lists, ordered by frame index. Frames absent
/// from the records get empty lists.
pub fn from_records(records: &[KeypointFrameRecord]) -> Result<Vec<Vec<Keypoint>>> {
    let count = records.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let mut stack = vec![Vec::new(); count];
    let mut desc_len = None;
    for rec in records {
        if !stack[rec.frame].is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame {} appears twice in keypoint file",
                rec.frame
            )));
        }
        for k in &rec.keypoints {
            if !(k.scale > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "frame {}: keypoint scale must be positive",
                    rec.frame
                )));
            }
            match desc_len {
                None => desc_len = Some(k.descriptor.len()),
                Some(n) if n != k.descriptor.len() => {
                    return Err(Error::InvalidInput(format!(
                        "frame {}: descriptor length {} differs from {n}",
                        rec.frame,
                        k.descriptor.len()
                    )))
                }
                _ => {}
            }
            stack[rec.frame].push(Keypoint {
                frame_id: rec.frame,
                x: k.x,
                y: k.y,
                scale: k.scale,
                norm_scale: 1.0,
                response: k.response,
                descriptor: k.descriptor.clone(),
            });
        }
    }
    Ok(stack)
}

pub fn read_keypoint_file(path: &Path) -> Result<Vec<Vec<Keypoint>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<KeypointFrameRecord> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    from_records(&records)
}

pub fn write_keypoint_file(path: &Path, stack: &[Vec<Keypoint>]) -> Result<()> {
    let text = serde_json::to_string(&to_records(stack)).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
