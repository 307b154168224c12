//! Reliability maps on converged keyframes and alignment of every
//! non-keyframe to its two encompassing keyframes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_increment, solve_update, Homography, ParamDelta, Point, RegularizerMask,
    WeightedResiduals, DEFAULT_MASK,
};
use crate::keypoints::Keypoint;
use crate::linkgraph::{
    connect_pair, overlap_region, weight_from_base, ConnectParams, InitOffsets, Link,
};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonKeyConfig {
    /// T2.
    pub max_iterations: u32,
    /// tau2, on the squared increment norm.
    pub tau2: f64,
    /// Link-error gate for reliability maps, in pixels (L1).
    pub tau: f64,
    pub r: f64,
    /// Gaussian width per unit of normalized scale.
    pub c: f64,
    pub eta: f64,
    pub gamma_coeff: f64,
    pub mask: RegularizerMask,
    pub max_halvings: u32,
}

impl Default for NonKeyConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tau2: 1e-4,
            tau: 1.0,
            r: 0.7,
            c: 20.0,
            eta: 0.1,
            gamma_coeff: 0.1,
            mask: DEFAULT_MASK,
            max_halvings: 5,
        }
    }
}

/// Per-keyframe field in `[eta, 1]` over the frame's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityMap {
    pub frame_id: usize,
    pub grid: Raster,
    pub eta: f64,
}

impl ReliabilityMap {
    pub fn uniform(frame_id: usize, width: usize, height: usize, eta: f64) -> Self {
        Self {
            frame_id,
            grid: Raster::new(width, height, eta),
            eta,
        }
    }

    /// Bilinear lookup at frame-local coordinates, clamped to the grid.
    pub fn at(&self, p: Point) -> f64 {
        self.grid.sample_clamped(p.0, p.1)
    }

    /// 8-bit export: `round(255 * cell)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.grid
            .data()
            .iter()
            .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// L1 distance between the link's two warped endpoints.
pub fn link_error(link: &Link) -> f64 {
    (link.warped_a.0 - link.warped_b.0).abs() + (link.warped_a.1 - link.warped_b.1).abs()
}

/// Superposes a Gaussian of width `c * s` at the keyframe-side original
/// coordinate of every incident link with error below `tau`, then clamps
/// to `[eta, 1]`.
pub fn reliability_map<'a, I>(
    frame_id: usize,
    width: usize,
    height: usize,
    links: I,
    config: &NonKeyConfig,
) -> ReliabilityMap
where
    I: IntoIterator<Item = &'a Link>,
{
    let mut sum = Raster::new(width, height, 0.0);
    for link in links {
        if !link.alive || link_error(link) >= config.tau {
            continue;
        }
        let center = link.view(frame_id).orig;
        splat_gaussian(&mut sum, center, config.c * link.s);
    }
    let eta = config.eta;
    for v in sum.data_mut() {
        *v = v.min(1.0).max(eta);
    }
    ReliabilityMap {
        frame_id,
        grid: sum,
        eta,
    }
}

/// Adds an unnormalized Gaussian, truncated at six sigma.
fn splat_gaussian(grid: &mut Raster, center: Point, sigma: f64) {
    if !(sigma > 0.0) {
        return;
    }
    let (w, h) = (grid.width() as f64, grid.height() as f64);
    let reach = 6.0 * sigma;
    let x0 = (center.0 - reach).floor().max(0.0);
    let x1 = (center.0 + reach).ceil().min(w - 1.0);
    let y0 = (center.1 - reach).floor().max(0.0);
    let y1 = (center.1 + reach).ceil().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    // separable: exp(-(dx^2 + dy^2) k) = exp(-dx^2 k) exp(-dy^2 k)
    let gx: Vec<f64> = ((x0 as usize)..=(x1 as usize))
        .map(|x| {
            let dx = x as f64 - center.0;
            (-dx * dx * inv).exp()
        })
        .collect();
    let width = grid.width();
    let data = grid.data_mut();
    for y in (y0 as usize)..=(y1 as usize) {
        let dy = y as f64 - center.1;
        let ey = (-dy * dy * inv).exp();
        let row = &mut data[y * width + x0 as usize..=y * width + x1 as usize];
        for (v, ex) in row.iter_mut().zip(&gx) {
            *v += ex * ey;
        }
    }
}

/// One encompassing keyframe as seen by a non-keyframe.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeRef<'a> {
    pub id: usize,
    pub homography: &'a Homography,
    pub keypoints: &'a [Keypoint],
    pub map: &'a ReliabilityMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonKeyResult {
    pub frame: usize,
    #[serde(with = "homography_array")]
    pub homography: Homography,
    pub links: usize,
    pub iterations: u32,
    /// Set when the frame fell back to interpolation for lack of links.
    pub degraded: bool,
}

mod homography_array {
    use super::Homography;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(h: &Homography, s: S) -> Result<S::Ok, S::Error> {
        h.to_row_major().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Homography, D::Error> {
        let a = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_major(a).map_err(serde::de::Error::custom)
    }
}

/// Translation entries interpolated between the two keyframes, everything
/// else copied from the nearer one.
pub fn interpolate_fallback(j: usize, left: (usize, &Homography), right: (usize, &Homography)) -> Result<Homography> {
    let span = (right.0 - left.0) as f64;
    let t = if span > 0.0 { (j - left.0) as f64 / span } else { 0.0 };
    let (l, r) = (left.1.to_row_major(), right.1.to_row_major());
    let mut h = if j - left.0 <= right.0 - j { l } else { r };
    h[2] = (1.0 - t) * l[2] + t * r[2];
    h[5] = (1.0 - t) * l[5] + t * r[5];
    Homography::from_row_major(h)
}

/// Initial estimate: the nearer keyframe's homography composed with the
/// translation between the two frames' offsets.
pub fn initial_estimate(
    j: usize,
    left: KeyframeRef<'_>,
    right: KeyframeRef<'_>,
    offsets: &InitOffsets,
) -> Result<Homography> {
    let near = if j - left.id <= right.id - j { left } else { right };
    let (oj, ok) = (offsets.get(j), offsets.get(near.id));
    near.homography
        .compose(&Homography::translation(oj.0 - ok.0, oj.1 - ok.1))
}

fn sq(a: Point, b: Point) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

struct Term {
    orig: Point,
    target: Point,
    base: f64,
}

fn weighted_cost(h: &Homography, terms: &[Term], w: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for (t, w) in terms.iter().zip(w) {
        total += w * sq(h.warp_point(t.orig).ok()?, t.target);
    }
    Some(total)
}

/// Aligns non-keyframe `j` against its frozen encompassing keyframes.
#[allow(clippy::too_many_arguments)]
pub fn align_nonkeyframe(
    j: usize,
    keypoints: &[Keypoint],
    left: KeyframeRef<'_>,
    right: KeyframeRef<'_>,
    offsets: &InitOffsets,
    width: usize,
    height: usize,
    connect: &ConnectParams,
    config: &NonKeyConfig,
) -> Result<NonKeyResult> {
    if !(left.id < j && j < right.id) {
        return Err(Error::InvalidInput(format!(
            "frame {j} is not strictly between keyframes {} and {}",
            left.id, right.id
        )));
    }
    let mut terms = Vec::new();
    for k in [left, right] {
        let region = overlap_region(k.id, j, offsets, width, height);
        if region.is_none() {
            continue;
        }
        let (a, b, kps_a, kps_b) = if k.id < j {
            (k.id, j, k.keypoints, keypoints)
        } else {
            (j, k.id, keypoints, k.keypoints)
        };
        let region = if k.id < j {
            region
        } else {
            region.map(|(rk, rj)| (rj, rk))
        };
        for l in connect_pair(a, b, kps_a, kps_b, region, connect) {
            let v = l.view(k.id);
            terms.push(Term {
                orig: v.other_orig,
                target: k.homography.warp_point(v.orig)?,
                base: k.map.at(v.orig),
            });
        }
    }
    let fallback = || -> Result<NonKeyResult> {
        Ok(NonKeyResult {
            frame: j,
            homography: interpolate_fallback(j, (left.id, left.homography), (right.id, right.homography))?,
            links: terms.len(),
            iterations: 0,
            degraded: true,
        })
    };
    if terms.len() < 4 {
        return fallback();
    }

    let gamma = config.gamma_coeff * (width * height) as f64;
    let mut h = initial_estimate(j, left, right, offsets)?;
    let mut iterations = 0;
    for q in 0..config.max_iterations {
        iterations = q + 1;
        let w: Vec<f64> = terms
            .iter()
            .map(|t| weight_from_base(t.base, config.r, q))
            .collect();
        let mut warped = Vec::with_capacity(terms.len());
        for t in &terms {
            warped.push(h.warp_point(t.orig)?);
        }
        let residuals = WeightedResiduals::assemble(
            warped
                .iter()
                .zip(&terms)
                .zip(&w)
                .map(|((&p, t), &w)| (p, t.target, w)),
        );
        let dp = match solve_update(&residuals, gamma, &config.mask) {
            Ok(dp) => dp,
            Err(Error::Underconstrained { .. }) => return fallback(),
            Err(e) => return Err(e),
        };
        let before = residuals.weighted_sse();
        let mut step = dp;
        let mut applied = ParamDelta::zero();
        for _ in 0..=config.max_halvings {
            if let Ok(candidate) = apply_increment(&h, &step) {
                if weighted_cost(&candidate, &terms, &w).is_some_and(|c| c <= before) {
                    h = candidate;
                    applied = step;
                    break;
                }
            }
            step = step.scaled(0.5);
        }
        if applied.norm_squared() <= config.tau2 {
            break;
        }
    }
    Ok(NonKeyResult {
        frame: j,
        homography: h,
        links: terms.len(),
        iterations,
        degraded: false,
    })
}
