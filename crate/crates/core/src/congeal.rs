//! Joint keyframe alignment: keyframe selection, the stack objective and the
//! Gauss-Seidel congealing loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_increment, solve_update, Homography, ParamDelta, Point, RegularizerMask,
    WeightedResiduals, DEFAULT_MASK,
};
use crate::linkgraph::{link_weight, InitOffsets, LinkGraph, Scheme};

/// Keyframe ids `0, step, 2*step, ...` plus the last frame.
pub fn select_keyframes(m: usize, delta_f: usize) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    let step = delta_f.max(1);
    let mut ids: Vec<usize> = (0..m).step_by(step).collect();
    if *ids.last().expect("m >= 1") != m - 1 {
        ids.push(m - 1);
    }
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// gamma = gamma_coeff * width * height.
    pub gamma_coeff: f64,
    /// T1.
    pub max_iterations: u32,
    /// tau1, on the mean squared increment norm.
    pub tau: f64,
    pub r: f64,
    pub scheme: Scheme,
    pub mask: RegularizerMask,
    pub max_halvings: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma_coeff: 0.1,
            max_iterations: 300,
            tau: 5e-4,
            r: 0.7,
            scheme: Scheme::BackwardForward,
            mask: DEFAULT_MASK,
            max_halvings: 5,
        }
    }
}

impl SolverConfig {
    pub fn gamma(&self, width: usize, height: usize) -> f64 {
        self.gamma_coeff * (width * height) as f64
    }
}

/// Keyframes under joint alignment. `ids` is ascending and
/// `homographies[k]` maps frame `ids[k]` to the global coordinate.
#[derive(Debug, Clone)]
pub struct FrameStack {
    ids: Vec<usize>,
    homographies: Vec<Homography>,
    graph: LinkGraph,
    scheme: Scheme,
    r: f64,
    q: u32,
    width: usize,
    height: usize,
}

impl FrameStack {
    pub fn new(
        ids: Vec<usize>,
        homographies: Vec<Homography>,
        mut graph: LinkGraph,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if ids.len() != homographies.len() {
            return Err(Error::InvalidInput(format!(
                "{} keyframes but {} homographies",
                ids.len(),
                homographies.len()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("keyframe ids must be strictly ascending".into()));
        }
        if let Some(f) = graph.frames().find(|f| ids.binary_search(f).is_err()) {
            return Err(Error::InvalidInput(format!(
                "link graph references frame {f}, which is not a keyframe"
            )));
        }
        for (id, h) in ids.iter().zip(&homographies) {
            graph.refresh(*id, h)?;
        }
        Ok(Self {
            ids,
            homographies,
            graph,
            scheme: Scheme::BackwardForward,
            r: 0.7,
            q: 0,
            width,
            height,
        })
    }

    /// Stack initialized with pure translations from `offsets`.
    pub fn from_offsets(
        ids: Vec<usize>,
        offsets: &InitOffsets,
        graph: LinkGraph,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let hs = ids
            .iter()
            .map(|&i| {
                let (tx, ty) = offsets.get(i);
                Homography::translation(tx, ty)
            })
            .collect();
        Self::new(ids, hs, graph, width, height)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn homographies(&self) -> &[Homography] {
        &self.homographies
    }

    pub fn homography(&self, id: usize) -> Option<&Homography> {
        self.position(id).map(|k| &self.homographies[k])
    }

    pub fn graph(&self) -> &LinkGraph {
        &self.graph
    }

    pub fn iteration(&self) -> u32 {
        self.q
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sets the weight schedule used by `objective` and `frame_step`.
    pub fn set_schedule(&mut self, scheme: Scheme, r: f64, q: u32) {
        self.scheme = scheme;
        self.r = r;
        self.q = q;
    }

    fn position(&self, id: usize) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn weight(&self, link: usize, viewing: usize) -> f64 {
        link_weight(&self.graph.links()[link], viewing, self.scheme, self.r, self.q)
    }

    /// The part of the objective that depends on frame `id`'s homography:
    /// every incident link, weighted from both of its endpoint views.
    fn frame_objective(&self, id: usize) -> f64 {
        self.graph
            .incident(id)
            .iter()
            .map(|&k| {
                let v = self.graph.links()[k].view(id);
                let w = self.weight(k, id) + self.weight(k, v.other);
                w * sq(v.warped, v.other_warped)
            })
            .sum()
    }

    fn set_homography(&mut self, pos: usize, h: Homography) -> Result<()> {
        self.graph.refresh(self.ids[pos], &h)?;
        self.homographies[pos] = h;
        Ok(())
    }
}

fn sq(a: Point, b: Point) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Stack objective: each frame's weighted squared link residuals, each link
/// counted once per endpoint view under the current weights.
pub fn objective(stack: &FrameStack) -> f64 {
    stack
        .ids
        .iter()
        .map(|&i| {
            stack
                .graph
                .incident(i)
                .iter()
                .map(|&k| {
                    let v = stack.graph.links()[k].view(i);
                    stack.weight(k, i) * sq(v.warped, v.other_warped)
                })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// The increment actually applied (zero if every halving failed).
    pub applied: ParamDelta,
    pub halvings: u32,
    pub accepted: bool,
}

/// One Gauss-Newton update of keyframe `id` with all other frames fixed.
pub fn frame_step(stack: &mut FrameStack, id: usize, config: &SolverConfig) -> Result<StepOutcome> {
    let pos = stack
        .position(id)
        .ok_or_else(|| Error::InvalidInput(format!("frame {id} is not in the stack")))?;
    let residuals = WeightedResiduals::assemble(stack.graph.incident(id).iter().map(|&k| {
        let v = stack.graph.links()[k].view(id);
        (v.warped, v.other_warped, stack.weight(k, id))
    }));
    let gamma = config.gamma(stack.width, stack.height);
    let dp = solve_update(&residuals, gamma, &config.mask)?;

    let before = stack.frame_objective(id);
    let original = stack.homographies[pos];
    let mut step = dp;
    for halvings in 0..=config.max_halvings {
        if let Ok(candidate) = apply_increment(&original, &step) {
            if stack.set_homography(pos, candidate).is_ok() && stack.frame_objective(id) <= before {
                return Ok(StepOutcome {
                    applied: step,
                    halvings,
                    accepted: true,
                });
            }
        }
        step = step.scaled(0.5);
    }
    stack.set_homography(pos, original)?;
    Ok(StepOutcome {
        applied: ParamDelta::zero(),
        halvings: config.max_halvings,
        accepted: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub q: u32,
    /// Objective under iteration `q`'s weights before and after the sweep.
    pub objective_start: f64,
    pub objective_end: f64,
    pub mean_step_sq: f64,
    pub skipped: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResidual {
    pub frame: usize,
    pub links: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLinks {
    pub a: usize,
    pub b: usize,
    pub links: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub iterations: u32,
    /// Objective at the end of each iteration.
    pub objective: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub residuals: Vec<FrameResidual>,
    pub pair_links: Vec<PairLinks>,
    pub converged: bool,
}

/// Unweighted link residual statistics per frame.
pub fn residual_stats(stack: &FrameStack) -> Vec<FrameResidual> {
    stack
        .ids
        .iter()
        .map(|&i| {
            let errs: Vec<f64> = stack
                .graph
                .incident(i)
                .iter()
                .map(|&k| stack.graph.links()[k].view(i))
                .map(|v| sq(v.warped, v.other_warped).sqrt())
                .collect();
            let n = errs.len();
            FrameResidual {
                frame: i,
                links: n,
                mean: if n == 0 { 0.0 } else { errs.iter().sum::<f64>() / n as f64 },
                max: errs.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Runs the congealing loop until `q >= T1` or the mean squared increment
/// falls to `tau`. Frames with fewer than 4 weighted links are skipped for
/// the iteration; the run aborts if more than half are skipped.
pub fn congeal_keyframes(stack: &mut FrameStack, config: &SolverConfig) -> Result<AlignmentReport> {
    let mut trace = Vec::new();
    let mut converged = stack.ids.len() <= 1;
    let n = stack.ids.len();
    if n > 1 {
        let mut q = 0;
        while q < config.max_iterations {
            stack.set_schedule(config.scheme, config.r, q);
            let objective_start = objective(stack);
            let mut total = 0.0;
            let mut skipped = Vec::new();
            let mut rejected = Vec::new();
            for pos in 0..n {
                let id = stack.ids[pos];
                match frame_step(stack, id, config) {
                    Ok(out) => {
                        if !out.accepted {
                            rejected.push(id);
                        }
                        total += out.applied.norm_squared();
                    }
                    Err(Error::Underconstrained { .. }) => skipped.push(id),
                    Err(e) => return Err(e),
                }
            }
            if 2 * skipped.len() > n {
                return Err(Error::SolverAbort(format!(
                    "{} of {n} keyframes are under-constrained (frames {:?})",
                    skipped.len(),
                    skipped
                )));
            }
            let mean_step_sq = total / n as f64;
            trace.push(IterationRecord {
                q,
                objective_start,
                objective_end: objective(stack),
                mean_step_sq,
                skipped,
                rejected,
            });
            q += 1;
            if mean_step_sq <= config.tau {
                converged = true;
                break;
            }
        }
        stack.set_schedule(config.scheme, config.r, q);
    }
    let pair_links = stack
        .graph
        .pair_counts()
        .into_iter()
        .map(|((a, b), links)| PairLinks { a, b, links })
        .collect();
    Ok(AlignmentReport {
        iterations: trace.len() as u32,
        objective: trace.iter().map(|t| t.objective_end).collect(),
        trace,
        residuals: residual_stats(stack),
        pair_links,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkgraph::Link;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn link(a: usize, b: usize, pa: Point, pb: Point) -> Link {
        Link {
            frame_a: a,
            frame_b: b,
            kp_a: 0,
            kp_b: 0,
            orig_a: pa,
            orig_b: pb,
            warped_a: pa,
            warped_b: pb,
            s: 1.0,
            alive: true,
        }
    }

    /// Links between every pair of frames for world points visible in both;
    /// `gt[i]` maps frame i to world.
    fn exact_graph(gt: &[Homography], points: usize, seed: u64) -> LinkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv: Vec<Homography> = gt.iter().map(|h| h.invert().unwrap()).collect();
        let world: Vec<Point> = (0..points)
            .map(|_| (rng.random_range(-50.0..250.0), rng.random_range(-50.0..200.0)))
            .collect();
        let inside = |p: Point| p.0 >= 0.0 && p.0 < 200.0 && p.1 >= 0.0 && p.1 < 150.0;
        let mut links = Vec::new();
        for a in 0..gt.len() {
            for b in (a + 1)..gt.len() {
                for &w in &world {
                    let pa = inv[a].warp_point(w).unwrap();
                    let pb = inv[b].warp_point(w).unwrap();
                    if inside(pa) && inside(pb) {
                        links.push(link(a, b, pa, pb));
                    }
                }
            }
        }
        LinkGraph::new(links)
    }

    #[test]
    fn keyframe_selection_examples() {
        let mut expect: Vec<usize> = (0..=90).step_by(10).collect();
        expect.push(94);
        assert_eq!(select_keyframes(95, 10), expect);
        assert_eq!(select_keyframes(5, 10), vec![0, 4]);
        assert_eq!(select_keyframes(11, 10), vec![0, 10]);
        assert_eq!(select_keyframes(1, 10), vec![0]);
        assert_eq!(select_keyframes(21, 10), vec![0, 10, 20]);
    }

    #[test]
    fn objective_examples() {
        let g = LinkGraph::new(vec![link(0, 1, (0.0, 0.0), (3.0, 4.0))]);
        let mut stack = FrameStack::new(
            vec![0, 1],
            vec![Homography::identity(); 2],
            g,
            100,
            100,
        )
        .unwrap();
        assert_eq!(objective(&stack), 50.0);
        let mut l = link(0, 1, (0.0, 0.0), (3.0, 4.0));
        l.s = 0.5;
        let half = FrameStack::new(
            vec![0, 1],
            vec![Homography::identity(); 2],
            LinkGraph::new(vec![l]),
            100,
            100,
        )
        .unwrap();
        assert_eq!(2.0 * objective(&half), objective(&stack));
        stack
            .set_homography(1, Homography::translation(-3.0, -4.0))
            .unwrap();
        assert_eq!(objective(&stack), 0.0);
    }

    #[test]
    fn aligned_frame_does_not_move() {
        let gt = vec![Homography::identity(); 2];
        let mut stack =
            FrameStack::new(vec![0, 1], gt.clone(), exact_graph(&gt, 60, 1), 200, 150).unwrap();
        let out = frame_step(&mut stack, 1, &SolverConfig::default()).unwrap();
        assert!(out.applied.norm_squared() < 1e-18);
        let h = stack.homography(1).unwrap().to_row_major();
        for (a, b) in h.iter().zip(Homography::identity().to_row_major()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn translated_frame_step_reduces_residual() {
        let gt = vec![Homography::identity(), Homography::translation(5.0, 0.0)];
        let graph = exact_graph(&gt, 80, 2);
        let mut stack = FrameStack::new(
            vec![0, 1],
            vec![Homography::identity(); 2],
            graph,
            200,
            150,
        )
        .unwrap();
        let before = residual_stats(&stack)[1].mean;
        let cfg = SolverConfig {
            gamma_coeff: 1e-6,
            ..SolverConfig::default()
        };
        frame_step(&mut stack, 1, &cfg).unwrap();
        let after = residual_stats(&stack)[1].mean;
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn rotation_converges() {
        let c = (100.0, 75.0);
        let rot = Homography::translation(c.0, c.1)
            .compose(&Homography::similarity(1.0, 20f64.to_radians(), 0.0, 0.0))
            .unwrap()
            .compose(&Homography::translation(-c.0, -c.1))
            .unwrap();
        let gt = vec![Homography::identity(), rot];
        let graph = exact_graph(&gt, 150, 3);
        assert!(graph.len() >= 20);
        let mut stack = FrameStack::new(
            vec![0, 1],
            vec![Homography::identity(); 2],
            graph,
            200,
            150,
        )
        .unwrap();
        let cfg = SolverConfig {
            max_iterations: 50,
            ..SolverConfig::default()
        };
        let report = congeal_keyframes(&mut stack, &cfg).unwrap();
        assert!(report.iterations <= 50);
        let res = residual_stats(&stack);
        assert!(res[1].mean < 0.1, "mean residual {}", res[1].mean);
    }

    #[test]
    fn single_keyframe_is_trivial() {
        let mut stack = FrameStack::new(
            vec![0],
            vec![Homography::identity()],
            LinkGraph::default(),
            50,
            50,
        )
        .unwrap();
        let report = congeal_keyframes(&mut stack, &SolverConfig::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.objective.is_empty());
        assert_eq!(stack.homographies()[0], Homography::identity());
    }

    #[test]
    fn descent_per_iteration_and_report_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<Homography> = (0..4)
            .map(|k| {
                Homography::from_row_major([
                    1.0 + rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    8.0 * k as f64,
                    rng.random_range(-0.03..0.03),
                    1.0 + rng.random_range(-0.03..0.03),
                    -3.0 * k as f64,
                    rng.random_range(-1e-4..1e-4),
                    rng.random_range(-1e-4..1e-4),
                    1.0,
                ])
                .unwrap()
            })
            .collect();
        let mut graph = exact_graph(&gt, 120, 4);
        // a few gross outliers
        let mut links = graph.links().to_vec();
        for l in links.iter_mut().step_by(7) {
            l.orig_b = (l.orig_b.0 + 15.0, l.orig_b.1 - 9.0);
        }
        graph = LinkGraph::new(links);
        let offsets = InitOffsets((0..4).map(|k| (8.0 * k as f64, -3.0 * k as f64)).collect());
        let mut stack = FrameStack::from_offsets(vec![0, 1, 2, 3], &offsets, graph, 200, 150).unwrap();
        let report = congeal_keyframes(&mut stack, &SolverConfig::default()).unwrap();
        assert_eq!(report.objective.len() as u32, report.iterations);
        for t in &report.trace {
            assert!(t.objective_end <= t.objective_start + 1e-9, "{t:?}");
        }
    }

    #[test]
    fn underconstrained_majority_aborts() {
        let g = LinkGraph::new(vec![link(0, 1, (0.0, 0.0), (1.0, 1.0))]);
        let mut stack =
            FrameStack::new(vec![0, 1, 2], vec![Homography::identity(); 3], g, 50, 50).unwrap();
        assert!(matches!(
            congeal_keyframes(&mut stack, &SolverConfig::default()),
            Err(Error::SolverAbort(_))
        ));
    }

    #[test]
    fn rejects_foreign_frames() {
        let g = LinkGraph::new(vec![link(0, 7, (0.0, 0.0), (1.0, 1.0))]);
        assert!(FrameStack::new(vec![0, 1], vec![Homography::identity(); 2], g, 50, 50).is_err());
    }
}
