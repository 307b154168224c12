//! End-to-end alignment of a frame sequence from per-frame keypoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::normalize_gauge;
use crate::congeal::{congeal_keyframes, select_keyframes, AlignmentReport, FrameStack, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::keypoints::{normalize_scales, Keypoint, DEFAULT_RATIO};
use crate::linkgraph::{
    connect_stack, estimate_translations, ConnectParams, InitOffsets, LinkGraph, PruneConfig,
};
use crate::nonkey::{align_nonkeyframe, reliability_map, KeyframeRef, NonKeyConfig, NonKeyResult, ReliabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub delta_f: usize,
    pub ratio: f64,
    pub prune: PruneConfig,
    pub solver: SolverConfig,
    pub nonkey: NonKeyConfig,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            delta_f: 10,
            ratio: DEFAULT_RATIO,
            prune: PruneConfig::default(),
            solver: SolverConfig::default(),
            nonkey: NonKeyConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// Per-frame transforms before gauge normalization.
    pub raw: Vec<Homography>,
    pub normalized: Vec<Homography>,
    pub gauge_fallback: bool,
    pub keyframes: Vec<usize>,
    pub offsets: InitOffsets,
    pub report: AlignmentReport,
    /// Keyframe links after congealing.
    pub graph: LinkGraph,
    pub maps: Vec<ReliabilityMap>,
    pub nonkey: Vec<NonKeyResult>,
    pub diagnostics: Vec<String>,
}

/// Runs translation initialization, keyframe congealing, reliability maps,
/// non-keyframe alignment and gauge normalization.
pub fn align_sequence(
    mut keypoints: Vec<Vec<Keypoint>>,
    width: usize,
    height: usize,
    params: &AlignParams,
) -> Result<Alignment> {
    let m = keypoints.len();
    if m == 0 {
        return Err(Error::InvalidInput("no frames".into()));
    }
    let mut diagnostics = Vec::new();
    if m == 1 {
        return Ok(Alignment {
            raw: vec![Homography::identity()],
            normalized: vec![Homography::identity()],
            gauge_fallback: false,
            keyframes: vec![0],
            offsets: InitOffsets(vec![(0.0, 0.0)]),
            report: AlignmentReport {
                iterations: 0,
                objective: Vec::new(),
                trace: Vec::new(),
                residuals: Vec::new(),
                pair_links: Vec::new(),
                converged: true,
            },
            graph: LinkGraph::new(Vec::new()),
            maps: vec![ReliabilityMap::uniform(0, width, height, params.nonkey.eta)],
            nonkey: Vec::new(),
            diagnostics,
        });
    }
    normalize_scales(&mut keypoints)?;
    let (offsets, diag) = estimate_translations(&keypoints, params.ratio, &params.prune);
    diagnostics.extend(diag);

    let keyframes = select_keyframes(m, params.delta_f);
    let key_kps: Vec<Vec<Keypoint>> = keyframes.iter().map(|&k| keypoints[k].clone()).collect();
    let connect = ConnectParams {
        ratio: params.ratio,
        prune: params.prune,
    };
    let (graph, diag) = connect_stack(&keyframes, &key_kps, &offsets, width, height, &connect);
    diagnostics.extend(diag);
    let mut stack = FrameStack::from_offsets(keyframes.clone(), &offsets, graph, width, height)?;
    let report = congeal_keyframes(&mut stack, &params.solver)?;
    for t in &report.trace {
        for f in &t.skipped {
            diagnostics.push(format!("iteration {}: keyframe {f} under-constrained, skipped", t.q));
        }
    }

    let maps: Vec<ReliabilityMap> = keyframes
        .iter()
        .map(|&k| {
            let links = stack.graph().incident(k).iter().map(|&l| &stack.graph().links()[l]);
            reliability_map(k, width, height, links, &params.nonkey)
        })
        .collect();

    let key_h = stack.homographies().to_vec();
    let nonkey_ids: Vec<(usize, usize)> = keyframes
        .windows(2)
        .enumerate()
        .flat_map(|(seg, w)| ((w[0] + 1)..w[1]).map(move |j| (seg, j)))
        .collect();
    let nonkey: Vec<NonKeyResult> = nonkey_ids
        .par_iter()
        .map(|&(seg, j)| {
            let kref = |s: usize| KeyframeRef {
                id: keyframes[s],
                homography: &key_h[s],
                keypoints: &keypoints[keyframes[s]],
                map: &maps[s],
            };
            align_nonkeyframe(
                j,
                &keypoints[j],
                kref(seg),
                kref(seg + 1),
                &offsets,
                width,
                height,
                &connect,
                &params.nonkey,
            )
        })
        .collect::<Result<_>>()?;
    for r in nonkey.iter().filter(|r| r.degraded) {
        diagnostics.push(format!(
            "frame {}: only {} links, transform interpolated from its keyframes",
            r.frame, r.links
        ));
    }

    let mut raw = vec![Homography::identity(); m];
    for (k, h) in keyframes.iter().zip(&key_h) {
        raw[*k] = *h;
    }
    for r in &nonkey {
        raw[r.frame] = r.homography;
    }
    let (normalized, gauge_fallback) = normalize_gauge(&raw)?;
    if gauge_fallback {
        diagnostics.push("gauge mean is singular, anchored on the first frame".into());
    }
    Ok(Alignment {
        raw,
        normalized,
        gauge_fallback,
        keyframes,
        offsets,
        report,
        graph: stack.graph().clone(),
        maps,
        nonkey,
        diagnostics,
    })
}
