//! The dense link structure over a keyframe stack: translation
//! initialization, overlap gating, consensus pruning and link weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, Homography, Point};
use crate::keypoints::{match_ratio, Keypoint, Rect};

/// Minimum overlap, as a fraction of the frame area, for a pair to be matched.
pub const OVERLAP_GATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Backward,
    BackwardForward,
}

impl Scheme {
    /// Weight factor for links pointing to later frames.
    pub fn alpha(self) -> f64 {
        match self {
            Scheme::Backward => 0.0,
            Scheme::BackwardForward => 1.0,
        }
    }

    /// Weight factor for links pointing to earlier frames.
    pub fn beta(self) -> f64 {
        1.0
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Backward => "backward",
            Scheme::BackwardForward => "backward-forward",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Scheme::Backward),
            "backward-forward" | "backward_forward" => Ok(Scheme::BackwardForward),
            other => Err(Error::InvalidInput(format!(
                "unknown scheme '{other}', expected 'backward' or 'backward-forward'"
            ))),
        }
    }
}

/// A matched keypoint pair between frames `frame_a < frame_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub frame_a: usize,
    pub frame_b: usize,
    /// Keypoint indices within each frame's keypoint list.
    pub kp_a: usize,
    pub kp_b: usize,
    pub orig_a: Point,
    pub orig_b: Point,
    pub warped_a: Point,
    pub warped_b: Point,
    /// Weight base: the smaller normalized scale of the two keypoints.
    pub s: f64,
    pub alive: bool,
}

/// A link seen from one of its endpoint frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkView {
    pub other: usize,
    pub orig: Point,
    pub warped: Point,
    pub other_orig: Point,
    pub other_warped: Point,
    pub s: f64,
}

impl Link {
    /// Panics if `viewing` is not an endpoint.
    pub fn view(&self, viewing: usize) -> LinkView {
        if viewing == self.frame_a {
            LinkView {
                other: self.frame_b,
                orig: self.orig_a,
                warped: self.warped_a,
                other_orig: self.orig_b,
                other_warped: self.warped_b,
                s: self.s,
            }
        } else {
            assert_eq!(viewing, self.frame_b, "frame {viewing} is not an endpoint");
            LinkView {
                other: self.frame_a,
                orig: self.orig_b,
                warped: self.warped_b,
                other_orig: self.orig_a,
                other_warped: self.warped_a,
                s: self.s,
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinkGraph {
    links: Vec<Link>,
    index: BTreeMap<usize, Vec<usize>>,
}

impl LinkGraph {
    pub fn new(links: Vec<Link>) -> Self {
        let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, l) in links.iter().enumerate() {
            index.entry(l.frame_a).or_default().push(k);
            index.entry(l.frame_b).or_default().push(k);
        }
        Self { links, index }
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Indices of links incident to `frame`.
    pub fn incident(&self, frame: usize) -> &[usize] {
        self.index.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.keys().copied()
    }

    /// Re-derives warped coordinates of every link endpoint on `frame` from
    /// the stored originals.
    pub fn refresh(&mut self, frame: usize, h: &Homography) -> Result<()> {
        let Some(ids) = self.index.get(&frame) else {
            return Ok(());
        };
        for &k in ids {
            let l = &mut self.links[k];
            if l.frame_a == frame {
                l.warped_a = h.warp_point(l.orig_a)?;
            } else {
                l.warped_b = h.warp_point(l.orig_b)?;
            }
        }
        Ok(())
    }

    /// Surviving link count per unordered frame pair.
    pub fn pair_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut out = BTreeMap::new();
        for l in self.links.iter().filter(|l| l.alive) {
            *out.entry((l.frame_a, l.frame_b)).or_insert(0) += 1;
        }
        out
    }

    pub fn dump(&self) -> LinkDump {
        LinkDump {
            links: self
                .links
                .iter()
                .map(|l| LinkRecord {
                    a: l.frame_a,
                    b: l.frame_b,
                    ax: l.orig_a.0,
                    ay: l.orig_a.1,
                    bx: l.orig_b.0,
                    by: l.orig_b.1,
                    s: l.s,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub a: usize,
    pub b: usize,
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDump {
    pub links: Vec<LinkRecord>,
}

/// Per-frame translation relative to frame 0, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOffsets(pub Vec<Point>);

impl InitOffsets {
    pub fn get(&self, frame: usize) -> Point {
        self.0[frame]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Cumulative sum of per-pair translations, starting at (0, 0).
    pub fn from_pairwise(pairwise: &[Point]) -> Self {
        let mut acc = (0.0, 0.0);
        let mut out = vec![acc];
        for &(dx, dy) in pairwise {
            acc = (acc.0 + dx, acc.1 + dy);
            out.push(acc);
        }
        InitOffsets(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Inlier threshold in pixels, applied to both transfer directions.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub smooth_neighbors: usize,
    pub smooth_mad_factor: f64,
    pub smooth_slack: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            confidence: 0.995,
            max_iterations: 2000,
            seed: 0,
            smooth_neighbors: 8,
            smooth_mad_factor: 3.0,
            smooth_slack: 2.0,
        }
    }
}

/// Derives a per-pair RNG seed so that pairs can be pruned in any order.
pub fn pair_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn transfer_ok(h: &Homography, h_inv: &Homography, p: &(Point, Point), thr2: f64) -> Option<f64> {
    let f = h.warp_point(p.0).ok()?;
    let b = h_inv.warp_point(p.1).ok()?;
    let ef = (f.0 - p.1 .0).powi(2) + (f.1 - p.1 .1).powi(2);
    let eb = (b.0 - p.0 .0).powi(2) + (b.1 - p.0 .1).powi(2);
    (ef < thr2 && eb < thr2).then_some(ef + eb)
}

fn consensus(h: &Homography, pairs: &[(Point, Point)], thr2: f64) -> Option<(Vec<usize>, f64)> {
    let h_inv = h.invert().ok()?;
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for (k, p) in pairs.iter().enumerate() {
        if let Some(e) = transfer_ok(h, &h_inv, p, thr2) {
            inliers.push(k);
            cost += e;
        }
    }
    Some((inliers, cost))
}

/// Seeded RANSAC over 4-point DLT hypotheses followed by a least-squares
/// refit on the consensus set. Returns the model and inlier indices, or
/// `None` when no hypothesis gathers 4 inliers.
pub fn ransac_homography(
    pairs: &[(Point, Point)],
    cfg: &PruneConfig,
    seed: u64,
) -> Option<(Homography, Vec<usize>)> {
    let n = pairs.len();
    if n < 4 {
        return None;
    }
    let thr2 = cfg.threshold * cfg.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 4);
        let subset: Vec<(Point, Point)> = sample.iter().map(|k| pairs[k]).collect();
        let Ok(h) = dlt_homography(&subset) else {
            continue;
        };
        let Some((inl, cost)) = consensus(&h, pairs, thr2) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((_, b, c)) => inl.len() > b.len() || (inl.len() == b.len() && cost < *c),
        };
        if better {
            let w = inl.len() as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            needed = if denom < 0.0 {
                ((1.0 - cfg.confidence).ln() / denom).ceil().max(1.0) as usize
            } else {
                cfg.max_iterations
            };
            best = Some((h, inl, cost));
        }
    }
    let (mut h, mut inl, mut cost) = best?;
    if inl.len() < 4 {
        return None;
    }
    for _ in 0..3 {
        let subset: Vec<(Point, Point)> = inl.iter().map(|&k| pairs[k]).collect();
        let Ok(refit) = dlt_homography(&subset) else {
            break;
        };
        let Some((ri, rc)) = consensus(&refit, pairs, thr2) else {
            break;
        };
        if ri.len() < inl.len() || (ri.len() == inl.len() && rc >= cost) {
            break;
        }
        h = refit;
        inl = ri;
        cost = rc;
    }
    Some((h, inl))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rejects survivors whose motion vector disagrees with the median motion of
/// their spatial neighbors. Returns the retained subset of `survivors`.
pub fn smoothness_filter(
    pairs: &[(Point, Point)],
    survivors: &[usize],
    cfg: &PruneConfig,
) -> Vec<usize> {
    let k = cfg.smooth_neighbors.min(survivors.len().saturating_sub(1));
    if k == 0 {
        return survivors.to_vec();
    }
    let motion = |i: usize| {
        let (a, b) = pairs[i];
        (b.0 - a.0, b.1 - a.1)
    };
    survivors
        .iter()
        .copied()
        .filter(|&i| {
            let p = pairs[i].0;
            let mut near: Vec<(f64, usize)> = survivors
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let q = pairs[j].0;
                    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2), j)
                })
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
            let mut mx: Vec<f64> = near.iter().map(|&(_, j)| motion(j).0).collect();
            let mut my: Vec<f64> = near.iter().map(|&(_, j)| motion(j).1).collect();
            let med = (median(&mut mx), median(&mut my));
            let mut devs: Vec<f64> = near
                .iter()
                .map(|&(_, j)| {
                    let m = motion(j);
                    (m.0 - med.0).hypot(m.1 - med.1)
                })
                .collect();
            let mad = median(&mut devs);
            let m = motion(i);
            (m.0 - med.0).hypot(m.1 - med.1) <= cfg.smooth_mad_factor * mad + cfg.smooth_slack
        })
        .collect()
}

/// Consensus pruning of one frame pair's correspondences `(src, dst)`.
/// Returns surviving indices in ascending order; empty when fewer than 4
/// remain.
pub fn prune_pair(pairs: &[(Point, Point)], cfg: &PruneConfig, seed: u64) -> Vec<usize> {
    let Some((_, inliers)) = ransac_homography(pairs, cfg, seed) else {
        return Vec::new();
    };
    let kept = smoothness_filter(pairs, &inliers, cfg);
    if kept.len() < 4 {
        Vec::new()
    } else {
        kept
    }
}

/// `base^(r^q)`, with a zero base staying zero for every finite `q`.
pub fn weight_from_base(base: f64, r: f64, q: u32) -> f64 {
    if base <= 0.0 {
        0.0
    } else {
        base.powf(r.powi(q as i32)).min(1.0)
    }
}

/// Weight of `link` as seen from `viewing` at iteration `q`.
pub fn link_weight(link: &Link, viewing: usize, scheme: Scheme, r: f64, q: u32) -> f64 {
    if !link.alive {
        return 0.0;
    }
    let other = link.view(viewing).other;
    let factor = if other < viewing {
        scheme.beta()
    } else {
        scheme.alpha()
    };
    weight_from_base(factor * link.s, r, q)
}

fn candidate_pairs(
    src: &[Keypoint],
    dst: &[Keypoint],
    ratio: f64,
    region: Option<(Rect, Rect)>,
) -> (Vec<(usize, usize)>, Vec<(Point, Point)>) {
    let m = match_ratio(src, dst, ratio, region);
    let idx = m.iter().map(|c| (c.src, c.dst)).collect();
    let pts = m
        .iter()
        .map(|c| (src[c.src].pos(), dst[c.dst].pos()))
        .collect();
    (idx, pts)
}

/// Mean motion vector `a - b` of a pair's pruned matches; falls back to the
/// raw matches when pruning leaves nothing. `None` without any match.
pub fn pair_translation(pairs: &[(Point, Point)], cfg: &PruneConfig, seed: u64) -> Option<Point> {
    if pairs.is_empty() {
        return None;
    }
    let kept = prune_pair(pairs, cfg, seed);
    let used: Vec<usize> = if kept.is_empty() {
        (0..pairs.len()).collect()
    } else {
        kept
    };
    let n = used.len() as f64;
    let (sx, sy) = used.iter().fold((0.0, 0.0), |acc, &k| {
        let (a, b) = pairs[k];
        (acc.0 + a.0 - b.0, acc.1 + a.1 - b.1)
    });
    Some((sx / n, sy / n))
}

/// Translation of every frame relative to frame 0 from consecutive-pair
/// matching. Pairs without matches contribute (0, 0) and a diagnostic.
pub fn estimate_translations(
    keypoints: &[Vec<Keypoint>],
    ratio: f64,
    cfg: &PruneConfig,
) -> (InitOffsets, Vec<String>) {
    let results: Vec<Option<Point>> = (1..keypoints.len().max(1))
        .into_par_iter()
        .map(|b| {
            let (_, pts) = candidate_pairs(&keypoints[b - 1], &keypoints[b], ratio, None);
            pair_translation(&pts, cfg, pair_seed(cfg.seed, b - 1, b))
        })
        .collect();
    let mut diagnostics = Vec::new();
    let pairwise: Vec<Point> = results
        .iter()
        .enumerate()
        .map(|(k, r)| {
            r.unwrap_or_else(|| {
                diagnostics.push(format!(
                    "frames {} and {}: no matches, translation set to (0, 0)",
                    k,
                    k + 1
                ));
                (0.0, 0.0)
            })
        })
        .collect();
    if keypoints.is_empty() {
        return (InitOffsets(Vec::new()), diagnostics);
    }
    (InitOffsets::from_pairwise(&pairwise), diagnostics)
}

/// Local sub-rectangles of frames `i` and `j` that overlap when both are
/// placed at their offsets, or `None` below the overlap gate.
pub fn overlap_region(
    i: usize,
    j: usize,
    offsets: &InitOffsets,
    width: usize,
    height: usize,
) -> Option<(Rect, Rect)> {
    let (w, h) = (width as f64, height as f64);
    let (oi, oj) = (offsets.get(i), offsets.get(j));
    let x0 = oi.0.max(oj.0);
    let y0 = oi.1.max(oj.1);
    let x1 = (oi.0 + w).min(oj.0 + w);
    let y1 = (oi.1 + h).min(oj.1 + h);
    let world = Rect::new(x0, y0, x1, y1);
    if world.area() < OVERLAP_GATE * w * h || x1 <= x0 || y1 <= y0 {
        return None;
    }
    let local = |o: Point| Rect::new(x0 - o.0, y0 - o.1, x1 - o.0, y1 - o.1);
    Some((local(oi), local(oj)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectParams {
    pub ratio: f64,
    pub prune: PruneConfig,
}

impl Default for ConnectParams {
    fn default() -> Self {
        Self {
            ratio: crate::keypoints::DEFAULT_RATIO,
            prune: PruneConfig::default(),
        }
    }
}

/// Matches, gates and prunes one frame pair, returning links with warped
/// coordinates set to the originals.
pub fn connect_pair(
    a: usize,
    b: usize,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    region: Option<(Rect, Rect)>,
    params: &ConnectParams,
) -> Vec<Link> {
    let (idx, pts) = candidate_pairs(kps_a, kps_b, params.ratio, region);
    let kept = prune_pair(&pts, &params.prune, pair_seed(params.prune.seed, a, b));
    kept.into_iter()
        .map(|k| {
            let (ia, ib) = idx[k];
            let (ka, kb) = (&kps_a[ia], &kps_b[ib]);
            Link {
                frame_a: a,
                frame_b: b,
                kp_a: ia,
                kp_b: ib,
                orig_a: ka.pos(),
                orig_b: kb.pos(),
                warped_a: ka.pos(),
                warped_b: kb.pos(),
                s: ka.norm_scale.min(kb.norm_scale),
                alive: true,
            }
        })
        .collect()
}

/// Dense link graph over keyframes. `keypoints[k]` belongs to `ids[k]`.
/// Returns the graph and a diagnostic for every overlapping pair that ended
/// up without links.
pub fn connect_stack(
    ids: &[usize],
    keypoints: &[Vec<Keypoint>],
    offsets: &InitOffsets,
    width: usize,
    height: usize,
    params: &ConnectParams,
) -> (LinkGraph, Vec<String>) {
    let mut pairs = Vec::new();
    for x in 0..ids.len() {
        for y in (x + 1)..ids.len() {
            if let Some(region) = overlap_region(ids[x], ids[y], offsets, width, height) {
                pairs.push((x, y, region));
            }
        }
    }
    let per_pair: Vec<Vec<Link>> = pairs
        .par_iter()
        .map(|&(x, y, region)| {
            connect_pair(
                ids[x],
                ids[y],
                &keypoints[x],
                &keypoints[y],
                Some(region),
                params,
            )
        })
        .collect();
    let mut diagnostics = Vec::new();
    let mut links = Vec::new();
    for (&(x, y, _), l) in pairs.iter().zip(per_pair) {
        if l.is_empty() {
            diagnostics.push(format!("frames {} and {}: no surviving links", ids[x], ids[y]));
        }
        links.extend(l);
    }
    (LinkGraph::new(links), diagnostics)
}
