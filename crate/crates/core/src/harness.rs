//! Synthetic scenes with ground truth, plus gauge-free error metrics and a
//! chained pairwise baseline for drift comparisons.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{bre, canvas_bounds, Canvas, DEFAULT_CANVAS_CAP};
use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};
use crate::keypoints::{finalize_descriptor, match_ratio, Keypoint, DESCRIPTOR_LEN};
use crate::linkgraph::{pair_seed, ransac_homography, PruneConfig};
use crate::raster::{Mask, Raster};

/// Largest source texture side the generator will allocate.
const MAX_SOURCE_SIDE: usize = 8192;
const SOURCE_MARGIN: f64 = 16.0;
/// Minimum displacement of an outlier keypoint from its true position.
pub const OUTLIER_MIN_OFFSET: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    Static,
    Translation,
    Similarity,
    Homography,
    /// Vertical pan down and back up; the first and last poses coincide.
    PanReturn,
}

impl Trajectory {
    pub const ALL: [Trajectory; 5] = [
        Trajectory::Static,
        Trajectory::Translation,
        Trajectory::Similarity,
        Trajectory::Homography,
        Trajectory::PanReturn,
    ];
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trajectory::Static => "static",
            Trajectory::Translation => "translation",
            Trajectory::Similarity => "similarity",
            Trajectory::Homography => "homography",
            Trajectory::PanReturn => "pan-return",
        })
    }
}

impl FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static" => Trajectory::Static,
            "translation" => Trajectory::Translation,
            "similarity" => Trajectory::Similarity,
            "homography" => Trajectory::Homography,
            "pan-return" | "pan_return" => Trajectory::PanReturn,
            other => {
                return Err(Error::InvalidInput(format!("unknown trajectory '{other}'")))
            }
        })
    }
}

/// A rigid rectangle in frame-0 coordinates moving at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForegroundSpec {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub trajectory: Trajectory,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub outlier_frac: f64,
    pub seed: u64,
    /// Background keypoints per frame area, in points per 10 000 px^2.
    pub point_density: f64,
    /// Speed multiplier for the camera trajectory.
    pub motion: f64,
    /// Gray range of the background texture.
    pub texture_range: (f64, f64),
    pub foreground_value: f64,
    pub foreground: Vec<ForegroundSpec>,
    /// Rotation of foreground descriptors per frame, in radians. Large
    /// values keep foreground matches from surviving long time gaps.
    pub foreground_drift: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            trajectory: Trajectory::Translation,
            frames: 10,
            width: 320,
            height: 240,
            noise_sigma: 0.0,
            outlier_frac: 0.0,
            seed: 0,
            point_density: 30.0,
            motion: 1.0,
            texture_range: (0.05, 0.95),
            foreground_value: 0.95,
            foreground: Vec::new(),
            foreground_drift: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Inlier,
    Outlier,
    Foreground,
}

/// Ground-truth label of one injected keypoint. `track` identifies the
/// underlying world point; background and foreground tracks never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointLabel {
    pub track: usize,
    pub kind: LabelKind,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Background texture; `gt[i]` maps frame `i` into its pixel grid.
    pub source: Raster,
    pub gt: Vec<Homography>,
    pub frames: Vec<Raster>,
    pub keypoints: Vec<Vec<Keypoint>>,
    pub labels: Vec<Vec<KeypointLabel>>,
    /// Frame-local foreground masks.
    pub foreground_masks: Vec<Mask>,
}

/// Camera pose of frame `i` (frame to world) before shifting into the
/// source grid. Pose 0 is always the identity.
fn raw_pose(spec: &SceneSpec, i: usize) -> Homography {
    let m = spec.motion;
    let t = i as f64;
    let n = spec.frames.max(2) as f64 - 1.0;
    let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
    let about_center = |h: Homography| {
        Homography::translation(cx, cy)
            .compose(&h)
            .and_then(|h| h.compose(&Homography::translation(-cx, -cy)))
            .expect("well-conditioned pose")
    };
    match spec.trajectory {
        Trajectory::Static => Homography::identity(),
        Trajectory::Translation => Homography::translation(3.0 * m * t, 1.0 * m * t),
        Trajectory::Similarity => about_center(Homography::similarity(
            1.0 + 0.002 * m * t,
            0.004 * m * t,
            2.5 * m * t,
            -0.8 * m * t,
        )),
        Trajectory::Homography => {
            let ph = std::f64::consts::TAU * t / n.max(1.0);
            let base = about_center(
                Homography::from_row_major([
                    1.0 + 0.02 * ph.sin() * m,
                    0.01 * (0.5 * ph).sin() * m,
                    0.0,
                    -0.01 * ph.sin() * m,
                    1.0 - 0.015 * (0.5 * ph).sin() * m,
                    0.0,
                    4e-5 * ph.sin() * m,
                    -3e-5 * (0.5 * ph).sin() * m,
                    1.0,
                ])
                .expect("well-conditioned pose"),
            );
            Homography::translation(2.5 * m * t, 0.7 * m * t)
                .compose(&base)
                .expect("well-conditioned pose")
        }
        Trajectory::PanReturn => {
            if i + 1 == spec.frames {
                return Homography::identity();
            }
            let ph = std::f64::consts::TAU * t / n.max(1.0);
            let amp = 0.4 * spec.height as f64 * m;
            Homography::translation(0.08 * spec.width as f64 * m * ph.sin(), amp * 0.5 * (1.0 - ph.cos()))
        }
    }
}

fn corners(w: usize, h: usize) -> [Point; 4] {
    let (w, h) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Smooth multi-octave value noise plus random rectangles and discs,
/// rescaled to `range`.
pub fn procedural_texture(width: usize, height: usize, range: (f64, f64), seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Raster::new(width, height, 0.0);
    let mut amp = 1.0;
    for octave in 0..5 {
        let cell = 48.0 / (1 << octave) as f64;
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let grid = Raster::from_fn(gw, gh, |_, _| rng.random_range(0.0..1.0));
        for y in 0..height {
            for x in 0..width {
                let (gx, gy) = (x as f64 / cell, y as f64 / cell);
                let (fx, fy) = (gx.fract(), gy.fract());
                // smoothstep weights keep the field C1 inside cells
                let sx = fx * fx * (3.0 - 2.0 * fx);
                let sy = fy * fy * (3.0 - 2.0 * fy);
                let v = grid.sample_clamped(gx.floor() + sx, gy.floor() + sy);
                img.set(x, y, img.get(x, y) + amp * v);
            }
        }
        amp *= 0.6;
    }
    let shapes = (width * height) / 3000 + 4;
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(3.0..18.0);
        let level = rng.random_range(0.0..2.5);
        let disc = rng.random_bool(0.5);
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize).min(width - 1));
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize).min(height - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if !disc || dx * dx + dy * dy <= r * r {
                    img.set(x, y, level);
                }
            }
        }
    }
    let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in img.data_mut() {
        *v = range.0 + (range.1 - range.0) * (*v - lo) / span;
    }
    img
}

fn random_descriptor(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut d: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| normal.sample(rng)).collect();
    finalize_descriptor(&mut d);
    d
}

fn perturbed(base: &[f64], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut d: Vec<f64> = base.iter().map(|v| v + normal.sample(rng)).collect();
    finalize_descriptor(&mut d);
    d
}

/// Gaussian noise truncated at three sigma.
fn bounded_noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 3.0 * sigma {
            return v;
        }
    }
}

struct WorldPoint {
    pos: Point,
    scale: f64,
    descriptor: Vec<f64>,
}

struct ForegroundPoint {
    rect: usize,
    /// Offset from the rectangle's top-left corner.
    offset: Point,
    scale: f64,
    d0: Vec<f64>,
    d1: Vec<f64>,
}

fn rect_at(r: &ForegroundSpec, shift: Point, i: usize) -> (f64, f64, f64, f64) {
    let x0 = r.x + shift.0 + r.vx * i as f64;
    let y0 = r.y + shift.1 + r.vy * i as f64;
    (x0, y0, x0 + r.w, y0 + r.h)
}

fn in_rect(p: Point, r: (f64, f64, f64, f64)) -> bool {
    p.0 >= r.0 && p.0 < r.2 && p.1 >= r.1 && p.1 < r.3
}

/// Renders frames and emits labeled keypoint correspondences.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.frames == 0 || spec.width < 16 || spec.height < 16 {
        return Err(Error::InvalidInput("scene needs >= 1 frame of at least 16x16".into()));
    }
    if !(0.0..1.0).contains(&spec.outlier_frac) || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidInput(
            "outlier_frac must be in [0, 1) and noise_sigma >= 0".into(),
        ));
    }
    let (w, h) = (spec.width, spec.height);
    let raw: Vec<Homography> = (0..spec.frames).map(|i| raw_pose(spec, i)).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &raw {
        for c in corners(w, h) {
            let q = p.warp_point(c)?;
            x0 = x0.min(q.0);
            y0 = y0.min(q.1);
            x1 = x1.max(q.0);
            y1 = y1.max(q.1);
        }
    }
    let shift = ((SOURCE_MARGIN - x0).floor(), (SOURCE_MARGIN - y0).floor());
    let sw = (x1 + shift.0 + SOURCE_MARGIN).ceil() as usize + 1;
    let sh = (y1 + shift.1 + SOURCE_MARGIN).ceil() as usize + 1;
    if sw > MAX_SOURCE_SIDE || sh > MAX_SOURCE_SIDE {
        return Err(Error::InvalidInput(format!(
            "frame footprints need a {sw}x{sh} source, above the {MAX_SOURCE_SIDE} px limit"
        )));
    }
    let to_source = Homography::translation(shift.0, shift.1);
    let gt: Vec<Homography> = raw
        .iter()
        .map(|p| to_source.compose(p))
        .collect::<Result<_>>()?;
    let source = procedural_texture(sw, sh, spec.texture_range, spec.seed ^ 0x5EED);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_bg = ((sw * sh) as f64 * spec.point_density / 10_000.0).round() as usize;
    let world: Vec<WorldPoint> = (0..n_bg)
        .map(|_| WorldPoint {
            pos: (rng.random_range(0.0..sw as f64), rng.random_range(0.0..sh as f64)),
            scale: [1.0, 2.0, 4.0][rng.random_range(0..3)],
            descriptor: random_descriptor(&mut rng),
        })
        .collect();
    let mut fg_points = Vec::new();
    for (ri, r) in spec.foreground.iter().enumerate() {
        let n = ((r.w * r.h) * spec.point_density / 10_000.0).round().max(4.0) as usize;
        for _ in 0..n {
            fg_points.push(ForegroundPoint {
                rect: ri,
                offset: (rng.random_range(0.0..r.w), rng.random_range(0.0..r.h)),
                scale: [1.0, 2.0, 4.0][rng.random_range(0..3)],
                d0: random_descriptor(&mut rng),
                d1: random_descriptor(&mut rng),
            });
        }
    }

    // per-frame RNG streams keep generation order-independent
    let per_frame: Vec<(Raster, Mask, Vec<Keypoint>, Vec<KeypointLabel>)> = (0..spec.frames)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(spec.seed, i, usize::MAX));
            let g = &gt[i];
            let inv = g.invert()?;
            let rects: Vec<_> = spec.foreground.iter().map(|r| rect_at(r, shift, i)).collect();
            let occluded = |p: Point| rects.iter().any(|&r| in_rect(p, r));

            let mut image = Raster::new(w, h, 0.0);
            let mut fg_mask = Mask::new(w, h, false);
            for y in 0..h {
                for x in 0..w {
                    let p = g.warp_point((x as f64, y as f64))?;
                    if occluded(p) {
                        image.set(x, y, spec.foreground_value);
                        fg_mask.set(x, y, true);
                    } else {
                        image.set(x, y, source.sample_clamped(p.0, p.1));
                    }
                }
            }

            let inside = |p: Point| p.0 >= 1.0 && p.1 >= 1.0 && p.0 <= w as f64 - 2.0 && p.1 <= h as f64 - 2.0;
            let mut kps = Vec::new();
            let mut labels = Vec::new();
            let mut emit = |rng: &mut ChaCha8Rng, track: usize, truth: Point, scale: f64, desc: Vec<f64>, fg: bool| {
                let outlier = !fg && rng.random_bool(spec.outlier_frac);
                let pos = if outlier {
                    loop {
                        let p = (rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0));
                        if (p.0 - truth.0).hypot(p.1 - truth.1) >= OUTLIER_MIN_OFFSET {
                            break p;
                        }
                    }
                } else {
                    let p = (
                        truth.0 + bounded_noise(rng, spec.noise_sigma),
                        truth.1 + bounded_noise(rng, spec.noise_sigma),
                    );
                    (p.0.clamp(0.0, w as f64 - 1.0), p.1.clamp(0.0, h as f64 - 1.0))
                };
                kps.push(Keypoint {
                    frame_id: i,
                    x: pos.0,
                    y: pos.1,
                    scale,
                    norm_scale: 1.0,
                    response: 1.0,
                    descriptor: desc,
                });
                labels.push(KeypointLabel {
                    track,
                    kind: if fg {
                        LabelKind::Foreground
                    } else if outlier {
                        LabelKind::Outlier
                    } else {
                        LabelKind::Inlier
                    },
                });
            };
            for (t, wp) in world.iter().enumerate() {
                let local = inv.warp_point(wp.pos)?;
                if inside(local) && !occluded(wp.pos) {
                    let d = perturbed(&wp.descriptor, &mut rng, 0.02);
                    emit(&mut rng, t, local, wp.scale, d, false);
                }
            }
            for (t, fp) in fg_points.iter().enumerate() {
                let r = rects[fp.rect];
                let wpos = (r.0 + fp.offset.0, r.1 + fp.offset.1);
                let local = inv.warp_point(wpos)?;
                if inside(local) {
                    let th = spec.foreground_drift * i as f64;
                    let mixed: Vec<f64> = fp
                        .d0
                        .iter()
                        .zip(&fp.d1)
                        .map(|(a, b)| th.cos() * a + th.sin() * b)
                        .collect();
                    let d = perturbed(&mixed, &mut rng, 0.02);
                    emit(&mut rng, n_bg + t, local, fp.scale, d, true);
                }
            }
            Ok((image, fg_mask, kps, labels))
        })
        .collect::<Result<_>>()?;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut foreground_masks = Vec::with_capacity(spec.frames);
    let mut keypoints = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for (img, m, k, l) in per_frame {
        frames.push(img);
        foreground_masks.push(m);
        keypoints.push(k);
        labels.push(l);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        source,
        gt,
        frames,
        keypoints,
        labels,
        foreground_masks,
    })
}

/// Mean displacement of frame `j`'s corners under `p_i^-1 p_j`, recovered
/// versus ground truth. Invariant to any common left factor.
pub fn relative_corner_error(
    recovered: &[Homography],
    gt: &[Homography],
    i: usize,
    j: usize,
    width: usize,
    height: usize,
) -> Result<f64> {
    let rel_rec = recovered[i].invert()?.compose(&recovered[j])?;
    let rel_gt = gt[i].invert()?.compose(&gt[j])?;
    let mut total = 0.0;
    for c in corners(width, height) {
        let a = rel_rec.warp_point(c)?;
        let b = rel_gt.warp_point(c)?;
        total += (a.0 - b.0).hypot(a.1 - b.1);
    }
    Ok(total / 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub i: usize,
    pub j: usize,
    /// Index distance within the evaluation frame set (1 = quarter sequence).
    pub class: usize,
    pub corner_error: f64,
    pub bre: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    pub class: usize,
    pub mean_gap: f64,
    pub pairs: usize,
    pub mean_corner_error: f64,
    pub max_corner_error: f64,
    pub mean_bre: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub frames: Vec<usize>,
    pub pairs: Vec<PairEval>,
    pub by_gap: Vec<GapStat>,
    pub mean_corner_error: f64,
    pub max_corner_error: f64,
    pub mean_bre: Option<f64>,
}

/// The five-frame evaluation set: first, quarter points and last.
pub fn evaluation_frames(m: usize) -> Vec<usize> {
    let last = m.saturating_sub(1) as f64;
    let mut out: Vec<usize> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| (f * last).round() as usize)
        .collect();
    out.dedup();
    out
}

fn footprints_overlap(gt: &[Homography], i: usize, j: usize, w: usize, h: usize) -> bool {
    let Ok(rel) = gt[i].invert().and_then(|inv| inv.compose(&gt[j])) else {
        return false;
    };
    let pts: Vec<Point> = corners(w, h)
        .iter()
        .filter_map(|&c| rel.warp_point(c).ok())
        .collect();
    if pts.len() < 4 {
        return false;
    }
    let x0 = pts.iter().map(|p| p.0).fold(f64::MAX, f64::min).max(0.0);
    let x1 = pts.iter().map(|p| p.0).fold(f64::MIN, f64::max).min(w as f64 - 1.0);
    let y0 = pts.iter().map(|p| p.1).fold(f64::MAX, f64::min).max(0.0);
    let y1 = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max).min(h as f64 - 1.0);
    x1 > x0 && y1 > y0
}

/// Corner error (and BRE when frames are given) for every overlapping
/// pair of `set`, grouped by distance within the set.
pub fn error_vs_timegap(
    recovered: &[Homography],
    gt: &[Homography],
    set: &[usize],
    width: usize,
    height: usize,
    frames: Option<(&[Raster], &[Mask])>,
) -> Result<EvalResult> {
    let mut pairs = Vec::new();
    for a in 0..set.len() {
        for b in (a + 1)..set.len() {
            let (i, j) = (set[a], set[b]);
            if !footprints_overlap(gt, i, j, width, height) {
                continue;
            }
            let corner_error = relative_corner_error(recovered, gt, i, j, width, height)?;
            let bre_value = match frames {
                Some((imgs, fg)) => Some(pair_bre(recovered, imgs, fg, i, j, width, height)?),
                None => None,
            };
            pairs.push(PairEval {
                i,
                j,
                class: b - a,
                corner_error,
                bre: bre_value,
            });
        }
    }
    let mut by_gap = Vec::new();
    for class in 1..set.len() {
        let group: Vec<&PairEval> = pairs.iter().filter(|p| p.class == class).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let bres: Vec<f64> = group.iter().filter_map(|p| p.bre).collect();
        by_gap.push(GapStat {
            class,
            mean_gap: group.iter().map(|p| (p.j - p.i) as f64).sum::<f64>() / n,
            pairs: group.len(),
            mean_corner_error: group.iter().map(|p| p.corner_error).sum::<f64>() / n,
            max_corner_error: group.iter().map(|p| p.corner_error).fold(0.0, f64::max),
            mean_bre: (!bres.is_empty()).then(|| bres.iter().sum::<f64>() / bres.len() as f64),
        });
    }
    let n = pairs.len().max(1) as f64;
    let bres: Vec<f64> = pairs.iter().filter_map(|p| p.bre).collect();
    Ok(EvalResult {
        frames: set.to_vec(),
        mean_corner_error: pairs.iter().map(|p| p.corner_error).sum::<f64>() / n,
        max_corner_error: pairs.iter().map(|p| p.corner_error).fold(0.0, f64::max),
        mean_bre: (!bres.is_empty()).then(|| bres.iter().sum::<f64>() / bres.len() as f64),
        pairs,
        by_gap,
    })
}

/// BRE of a pair over the background (pixels that are foreground in
/// neither frame).
fn pair_bre(
    hs: &[Homography],
    frames: &[Raster],
    fg: &[Mask],
    i: usize,
    j: usize,
    width: usize,
    height: usize,
) -> Result<f64> {
    let canvas = canvas_bounds(width, height, &[hs[i], hs[j]], DEFAULT_CANVAS_CAP)?;
    let background = background_mask(hs, fg, &[i, j], &canvas)?;
    bre(&frames[i], &frames[j], &hs[i], &hs[j], &canvas, Some(&background))
}

/// Canvas mask that is false wherever any listed frame shows foreground.
pub fn background_mask(hs: &[Homography], fg: &[Mask], ids: &[usize], canvas: &Canvas) -> Result<Mask> {
    let mut out = Mask::new(canvas.width, canvas.height, true);
    for &i in ids {
        let as_raster = Raster::from_vec(
            fg[i].width(),
            fg[i].height(),
            fg[i].data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        );
        let (warped, valid) = crate::compositor::warp_frame(&as_raster, &hs[i], canvas)?;
        for y in 0..canvas.height {
            for x in 0..canvas.width {
                if valid.get(x, y) && warped.get(x, y) > 0.0 {
                    out.set(x, y, false);
                }
            }
        }
    }
    Ok(out)
}

/// Chained pairwise estimation: RANSAC homography between consecutive
/// frames, composed along the sequence. Pairs without a model reuse the
/// previous pose.
pub fn sequential_baseline(
    keypoints: &[Vec<Keypoint>],
    ratio: f64,
    prune: &PruneConfig,
) -> Vec<Homography> {
    let pairwise: Vec<Option<Homography>> = (1..keypoints.len().max(1))
        .into_par_iter()
        .map(|b| {
            let (ka, kb) = (&keypoints[b - 1], &keypoints[b]);
            let pairs: Vec<(Point, Point)> = match_ratio(kb, ka, ratio, None)
                .iter()
                .map(|c| (kb[c.src].pos(), ka[c.dst].pos()))
                .collect();
            ransac_homography(&pairs, prune, pair_seed(prune.seed, b - 1, b)).map(|(h, _)| h)
        })
        .collect();
    let mut out = Vec::with_capacity(keypoints.len());
    if keypoints.is_empty() {
        return out;
    }
    out.push(Homography::identity());
    for step in pairwise {
        let prev = *out.last().expect("non-empty");
        let next = step.and_then(|s| prev.compose(&s).ok()).unwrap_or(prev);
        out.push(next);
    }
    out
}
