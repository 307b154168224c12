//! Subcommand drivers. Each reads its inputs from the paths in a
//! [`RunConfig`] and writes numbered artifacts under `out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::compositor::{
    canvas_bounds, reconstruct_background, render_panorama, segment_foreground, BackgroundPlate, Canvas,
    RenderMode,
};
use crate::config::RunConfig;
use crate::congeal::AlignmentReport;
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::harness::{error_vs_timegap, evaluation_frames, generate_scene, EvalResult, KeypointLabel, SceneSpec};
use crate::imageio::{list_frames, frame_index, numbered, read_frames, read_gray, read_mask, write_gray, write_mask};
use crate::keypoints::{detect_frames, read_keypoint_file, write_keypoint_file, Frame, Keypoint};
use crate::nonkey::{NonKeyResult, ReliabilityMap};
use crate::pipeline::align_sequence;
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRecord {
    pub frame: usize,
    #[serde(rename = "H")]
    pub h: [f64; 9],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompensateReport {
    /// The fully resolved configuration of the run.
    pub config: RunConfig,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub keyframes: Vec<usize>,
    pub gauge_fallback: bool,
    pub alignment: AlignmentReport,
    pub nonkey: Vec<NonKeyResult>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CompensateOutput {
    pub transforms: Vec<Homography>,
    pub report: CompensateReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn require(path: Option<&PathBuf>, what: &str, key: &str) -> Result<PathBuf> {
    let Some(p) = path else {
        return Err(Error::Missing {
            what: what.to_string(),
            path: PathBuf::from(format!("<{key}>")),
        });
    };
    if !p.exists() {
        return Err(Error::Missing {
            what: what.to_string(),
            path: p.clone(),
        });
    }
    Ok(p.clone())
}

fn require_file(path: PathBuf, what: &str) -> Result<PathBuf> {
    require(Some(&path), what, "")
}

pub fn write_transforms(path: &Path, hs: &[Homography]) -> Result<()> {
    let records: Vec<TransformRecord> = hs
        .iter()
        .enumerate()
        .map(|(frame, h)| TransformRecord {
            frame,
            h: h.to_row_major(),
        })
        .collect();
    write_json(path, &records)
}

/// Reads `[{frame, H}]`; frames must be numbered `0..n` in order.
pub fn read_transforms(path: &Path) -> Result<Vec<Homography>> {
    let records: Vec<TransformRecord> = read_json(path)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.frame != i {
                return Err(Error::InvalidInput(format!(
                    "{}: entry {i} is for frame {}, expected frame {i}",
                    path.display(),
                    r.frame
                )));
            }
            Homography::from_row_major(r.h).map_err(|e| {
                Error::InvalidInput(format!("{}: frame {i}: {e}", path.display()))
            })
        })
        .collect()
}

fn load_inputs(cfg: &RunConfig) -> Result<(Vec<Vec<Keypoint>>, usize, usize)> {
    if let Some(kp_path) = &cfg.keypoints {
        let kp_path = require(Some(kp_path), "keypoint file", "keypoints")?;
        let keypoints = read_keypoint_file(&kp_path)?;
        let dims = match (cfg.frame_width, cfg.frame_height, &cfg.frames) {
            (Some(w), Some(h), _) => (w, h),
            (_, _, Some(dir)) => {
                let first = list_frames(dir)?.into_iter().next().ok_or_else(|| Error::Missing {
                    what: "frame to size the keypoint frames".into(),
                    path: dir.clone(),
                })?;
                let r = read_gray(&first)?;
                (r.width(), r.height())
            }
            _ => {
                return Err(Error::InvalidInput(
                    "keypoint injection needs frame_width and frame_height or a frames directory".into(),
                ))
            }
        };
        info!("{} frames of injected keypoints", keypoints.len());
        return Ok((keypoints, dims.0, dims.1));
    }
    let dir = require(cfg.frames.as_ref(), "frames directory", "frames")?;
    let images = read_frames(&dir)?;
    let (w, h) = (images[0].width(), images[0].height());
    let frames: Vec<Frame> = images
        .into_iter()
        .enumerate()
        .map(|(i, r)| Frame::new(i, r))
        .collect::<Result<_>>()?;
    let keypoints = detect_frames(&frames, cfg.budget);
    for (i, k) in keypoints.iter().enumerate() {
        if k.is_empty() {
            warn!("frame {i}: no keypoints detected");
        }
    }
    info!("detected keypoints on {} frames of {w}x{h}", frames.len());
    Ok((keypoints, w, h))
}

/// Full alignment: writes `transforms.json` (gauge-normalized) and
/// `report.json`, plus raw transforms, reliability maps and the link dump
/// when enabled.
pub fn cmd_compensate(cfg: &RunConfig) -> Result<CompensateOutput> {
    cfg.validate().map_err(Error::InvalidInput)?;
    let (keypoints, width, height) = load_inputs(cfg)?;
    let m = keypoints.len();
    let alignment = align_sequence(keypoints, width, height, &cfg.align_params())?;
    for d in &alignment.diagnostics {
        warn!("{d}");
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_transforms(&cfg.transforms_path(), &alignment.normalized)?;
    if cfg.write_raw {
        write_transforms(&cfg.out.join("raw_transforms.json"), &alignment.raw)?;
    }
    if cfg.write_maps {
        let dir = cfg.maps_path();
        for map in &alignment.maps {
            write_gray(&numbered(&dir, "map", map.frame_id, "png"), &map.grid)?;
        }
    }
    if cfg.write_links {
        write_json(&cfg.out.join("links.json"), &alignment.graph.dump())?;
    }
    let report = CompensateReport {
        config: cfg.clone(),
        frames: m,
        width,
        height,
        keyframes: alignment.keyframes.clone(),
        gauge_fallback: alignment.gauge_fallback,
        alignment: alignment.report,
        nonkey: alignment.nonkey,
        diagnostics: alignment.diagnostics,
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(CompensateOutput {
        transforms: alignment.normalized,
        report,
    })
}

struct Sequence {
    frames: Vec<Raster>,
    hs: Vec<Homography>,
    canvas: Canvas,
}

fn load_sequence(cfg: &RunConfig) -> Result<Sequence> {
    let dir = require(cfg.frames.as_ref(), "frames directory", "frames")?;
    let tpath = require_file(cfg.transforms_path(), "transforms file (run compensate first)")?;
    let frames = read_frames(&dir)?;
    let hs = read_transforms(&tpath)?;
    if hs.len() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} holds {} transforms but {} has {} frames",
            tpath.display(),
            hs.len(),
            dir.display(),
            frames.len()
        )));
    }
    let canvas = canvas_bounds(frames[0].width(), frames[0].height(), &hs, cfg.canvas_cap)?;
    Ok(Sequence { frames, hs, canvas })
}

/// Reliability maps written by compensate; uniform maps on every frame
/// when the directory is absent.
fn load_maps(cfg: &RunConfig, m: usize, w: usize, h: usize) -> Result<Vec<ReliabilityMap>> {
    let dir = cfg.maps_path();
    if !dir.is_dir() {
        warn!("no reliability maps at {}, weighting all frames uniformly", dir.display());
        return Ok((0..m).map(|i| ReliabilityMap::uniform(i, w, h, 1.0)).collect());
    }
    let mut maps = Vec::new();
    for p in list_frames(&dir)? {
        let id = frame_index(&p).expect("listed files carry an index");
        if id >= m {
            return Err(Error::InvalidInput(format!(
                "{} names frame {id}, but the sequence has {m} frames",
                p.display()
            )));
        }
        let grid = read_gray(&p)?;
        if (grid.width(), grid.height()) != (w, h) {
            return Err(Error::InvalidInput(format!(
                "{} is {}x{}, frames are {w}x{h}",
                p.display(),
                grid.width(),
                grid.height()
            )));
        }
        let eta = cfg.eta;
        let grid = Raster::from_vec(w, h, grid.data().iter().map(|v| v.clamp(eta, 1.0)).collect());
        maps.push(ReliabilityMap { frame_id: id, grid, eta });
    }
    if maps.is_empty() {
        return Err(Error::Missing {
            what: "reliability maps".into(),
            path: dir,
        });
    }
    Ok(maps)
}

fn plate_for(cfg: &RunConfig, seq: &Sequence) -> Result<BackgroundPlate> {
    let (w, h) = (seq.frames[0].width(), seq.frames[0].height());
    let maps = load_maps(cfg, seq.frames.len(), w, h)?;
    let inputs: Vec<_> = maps
        .iter()
        .map(|m| (&seq.frames[m.frame_id], &seq.hs[m.frame_id], m))
        .collect();
    reconstruct_background(&inputs, &seq.canvas)
}

/// Motion panorama. Writes `panorama.png` and, with `write_frames`, the
/// progressive mosaic after each frame under `render/`.
pub fn cmd_render(cfg: &RunConfig) -> Result<Raster> {
    let seq = load_sequence(cfg)?;
    let plate = match cfg.render_mode {
        RenderMode::OverBackground => Some(plate_for(cfg, &seq)?),
        RenderMode::Overlay => None,
    };
    let dir = cfg.out.join("render");
    let refs: Vec<&Raster> = seq.frames.iter().collect();
    let (mosaic, _) = render_panorama(&refs, &seq.hs, &seq.canvas, cfg.render_mode, plate.as_ref(), |i, img, _| {
        if cfg.write_frames {
            write_gray(&numbered(&dir, "frame", i, "png"), img)?;
        }
        Ok(())
    })?;
    write_gray(&cfg.out.join("panorama.png"), &mosaic)?;
    Ok(mosaic)
}

/// Background plate. Writes `background.png` and `background_valid.png`.
pub fn cmd_background(cfg: &RunConfig) -> Result<BackgroundPlate> {
    let seq = load_sequence(cfg)?;
    let plate = plate_for(cfg, &seq)?;
    write_gray(&cfg.out.join("background.png"), &plate.image)?;
    write_mask(&cfg.out.join("background_valid.png"), &plate.valid)?;
    Ok(plate)
}

/// Per-frame foreground masks under `segment/`.
pub fn cmd_segment(cfg: &RunConfig) -> Result<Vec<Mask>> {
    let seq = load_sequence(cfg)?;
    let plate = plate_for(cfg, &seq)?;
    let dir = cfg.out.join("segment");
    let mut masks = Vec::with_capacity(seq.frames.len());
    for (i, (f, h)) in seq.frames.iter().zip(&seq.hs).enumerate() {
        let m = segment_foreground(f, h, &plate, &seq.canvas, cfg.tau_fg, cfg.majority_filter);
        write_mask(&numbered(&dir, "mask", i, "png"), &m)?;
        masks.push(m);
    }
    Ok(masks)
}

/// Plain-text error-versus-time-gap table.
pub fn format_eval_table(result: &EvalResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames: {:?}", result.frames);
    let _ = writeln!(s, "{:>5} {:>9} {:>5} {:>12} {:>12} {:>9}", "class", "mean_gap", "pairs", "corner_mean", "corner_max", "bre_mean");
    for g in &result.by_gap {
        let bre = g.mean_bre.map_or("-".to_string(), |b| format!("{b:.5}"));
        let _ = writeln!(
            s,
            "{:>5} {:>9.2} {:>5} {:>12.5} {:>12.5} {:>9}",
            g.class, g.mean_gap, g.pairs, g.mean_corner_error, g.max_corner_error, bre
        );
    }
    let bre = result.mean_bre.map_or("-".to_string(), |b| format!("{b:.5}"));
    let _ = writeln!(
        s,
        "  all {:>9} {:>5} {:>12.5} {:>12.5} {:>9}",
        "",
        result.pairs.len(),
        result.mean_corner_error,
        result.max_corner_error,
        bre
    );
    s
}

/// Compares transforms with ground truth on the five-frame evaluation
/// set. Writes `eval.json` and `eval.txt`. BRE is included when frames
/// are given, restricted to the background when foreground masks are too.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalResult> {
    let tpath = require_file(cfg.transforms_path(), "transforms file")?;
    let gpath = require(cfg.gt.as_ref(), "ground-truth transforms", "gt")?;
    let hs = read_transforms(&tpath)?;
    let gt = read_transforms(&gpath)?;
    if hs.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} frames in {} but {} in {}",
            hs.len(),
            tpath.display(),
            gt.len(),
            gpath.display()
        )));
    }
    let frames = match &cfg.frames {
        Some(dir) => Some(read_frames(&require(Some(dir), "frames directory", "frames")?)?),
        None => None,
    };
    let (w, h) = match (&frames, cfg.frame_width, cfg.frame_height) {
        (Some(f), _, _) => (f[0].width(), f[0].height()),
        (None, Some(w), Some(h)) => (w, h),
        _ => {
            return Err(Error::InvalidInput(
                "evaluate needs a frames directory or frame_width and frame_height".into(),
            ))
        }
    };
    let masks: Option<Vec<Mask>> = match (&frames, &cfg.masks) {
        (Some(_), Some(dir)) => {
            let dir = require(Some(dir), "foreground masks directory", "masks")?;
            Some(list_frames(&dir)?.iter().map(|p| read_mask(p)).collect::<Result<_>>()?)
        }
        (Some(f), None) => Some(f.iter().map(|r| Mask::new(r.width(), r.height(), false)).collect()),
        _ => None,
    };
    let set = evaluation_frames(hs.len());
    let imgs = match (&frames, &masks) {
        (Some(f), Some(m)) => {
            if f.len() != hs.len() || m.len() != hs.len() {
                return Err(Error::InvalidInput(format!(
                    "{} transforms, {} frames and {} masks",
                    hs.len(),
                    f.len(),
                    m.len()
                )));
            }
            Some((f.as_slice(), m.as_slice()))
        }
        _ => None,
    };
    let result = error_vs_timegap(&hs, &gt, &set, w, h, imgs)?;
    write_json(&cfg.out.join("eval.json"), &result)?;
    let table = format_eval_table(&result);
    std::fs::write(cfg.out.join("eval.txt"), &table).map_err(|e| Error::io(cfg.out.join("eval.txt"), e))?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRecord {
    frame: usize,
    labels: Vec<KeypointLabel>,
}

/// Renders a synthetic scene: `frames/`, `masks/`, `keypoints.json`,
/// `gt.json`, `labels.json` and the resolved `scene.txt`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SceneSpec> {
    let spath = require(cfg.spec.as_ref(), "scene spec", "spec")?;
    let spec = SceneSpec::from_file(&spath)?;
    let scene = generate_scene(&spec)?;
    let fdir = cfg.out.join("frames");
    let mdir = cfg.out.join("masks");
    for (i, (f, m)) in scene.frames.iter().zip(&scene.foreground_masks).enumerate() {
        write_gray(&numbered(&fdir, "frame", i, "png"), f)?;
        write_mask(&numbered(&mdir, "mask", i, "png"), m)?;
    }
    write_keypoint_file(&cfg.out.join("keypoints.json"), &scene.keypoints)?;
    write_transforms(&cfg.out.join("gt.json"), &scene.gt)?;
    let labels: Vec<LabelRecord> = scene
        .labels
        .iter()
        .enumerate()
        .map(|(frame, l)| LabelRecord {
            frame,
            labels: l.clone(),
        })
        .collect();
    write_json(&cfg.out.join("labels.json"), &labels)?;
    let scene_txt = cfg.out.join("scene.txt");
    std::fs::write(&scene_txt, spec.to_kv()).map_err(|e| Error::io(&scene_txt, e))?;
    Ok(spec)
}
