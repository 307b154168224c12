//! Run configuration and scene specs as plain-text `key=value` files.
//!
//! Blank lines and text after `#` are ignored. Keys are case-sensitive and
//! may use `-` or `_` interchangeably.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compositor::{RenderMode, DEFAULT_CANVAS_CAP, DEFAULT_TAU_FG};
use crate::congeal::SolverConfig;
use crate::error::{Error, Result};
use crate::geometry::RegularizerMask;
use crate::harness::{ForegroundSpec, SceneSpec, Trajectory};
use crate::keypoints::{DEFAULT_BUDGET, DEFAULT_RATIO};
use crate::linkgraph::{PruneConfig, Scheme};
use crate::nonkey::NonKeyConfig;
use crate::pipeline::AlignParams;

/// Every knob of a run. Defaults reproduce the published parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub delta_f: usize,
    pub scheme: Scheme,
    pub ratio: f64,
    pub seed: u64,
    pub budget: usize,

    pub gamma_coeff: f64,
    pub t1: u32,
    pub tau1: f64,
    pub r: f64,
    pub max_halvings: u32,
    pub mask: RegularizerMask,

    pub t2: u32,
    pub tau2: f64,
    pub tau: f64,
    pub c: f64,
    pub eta: f64,

    pub ransac_threshold: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub smooth_neighbors: usize,
    pub smooth_mad_factor: f64,
    pub smooth_slack: f64,

    pub tau_fg: f64,
    pub majority_filter: bool,
    pub render_mode: RenderMode,
    pub canvas_cap: usize,

    /// Directory of numbered frames.
    pub frames: Option<PathBuf>,
    /// Keypoint JSON; switches to injection mode.
    pub keypoints: Option<PathBuf>,
    /// Frame size in injection mode when no frames are given.
    pub frame_width: Option<usize>,
    pub frame_height: Option<usize>,
    /// Transforms file; defaults to `<out>/transforms.json`.
    pub transforms: Option<PathBuf>,
    /// Reliability maps directory; defaults to `<out>/maps`.
    pub maps: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub out: PathBuf,

    pub write_raw: bool,
    pub write_maps: bool,
    pub write_links: bool,
    pub write_frames: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let nonkey = NonKeyConfig::default();
        let prune = PruneConfig::default();
        Self {
            delta_f: 10,
            scheme: solver.scheme,
            ratio: DEFAULT_RATIO,
            seed: prune.seed,
            budget: DEFAULT_BUDGET,
            gamma_coeff: solver.gamma_coeff,
            t1: solver.max_iterations,
            tau1: solver.tau,
            r: solver.r,
            max_halvings: solver.max_halvings,
            mask: solver.mask,
            t2: nonkey.max_iterations,
            tau2: nonkey.tau2,
            tau: nonkey.tau,
            c: nonkey.c,
            eta: nonkey.eta,
            ransac_threshold: prune.threshold,
            ransac_confidence: prune.confidence,
            ransac_max_iterations: prune.max_iterations,
            smooth_neighbors: prune.smooth_neighbors,
            smooth_mad_factor: prune.smooth_mad_factor,
            smooth_slack: prune.smooth_slack,
            tau_fg: DEFAULT_TAU_FG,
            majority_filter: true,
            render_mode: RenderMode::Overlay,
            canvas_cap: DEFAULT_CANVAS_CAP,
            frames: None,
            keypoints: None,
            frame_width: None,
            frame_height: None,
            transforms: None,
            maps: None,
            gt: None,
            masks: None,
            spec: None,
            out: PathBuf::from("out"),
            write_raw: false,
            write_maps: true,
            write_links: false,
            write_frames: true,
        }
    }
}

fn parse<T>(value: &str) -> std::result::Result<T, String>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("bad value '{value}': {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(format!("bad boolean '{value}'")),
    }
}

fn parse_mask(value: &str) -> std::result::Result<RegularizerMask, String> {
    let bits: Vec<bool> = value
        .split(',')
        .map(|b| parse_bool(b.trim()))
        .collect::<std::result::Result<_, _>>()?;
    bits.try_into()
        .map_err(|_| format!("mask needs 8 comma-separated entries, got '{value}'"))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Splits `key=value` lines, returning `(line number, key, value)`.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected key=value, got '{line}'"),
            });
        };
        out.push((n + 1, k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl RunConfig {
    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "delta_f" => self.delta_f = parse(value)?,
            "scheme" => self.scheme = parse(value)?,
            "ratio" => self.ratio = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "budget" => self.budget = parse(value)?,
            "gamma_coeff" => self.gamma_coeff = parse(value)?,
            "t1" => self.t1 = parse(value)?,
            "tau1" => self.tau1 = parse(value)?,
            "r" => self.r = parse(value)?,
            "max_halvings" => self.max_halvings = parse(value)?,
            "mask" => self.mask = parse_mask(value)?,
            "t2" => self.t2 = parse(value)?,
            "tau2" => self.tau2 = parse(value)?,
            "tau" => self.tau = parse(value)?,
            "c" => self.c = parse(value)?,
            "eta" => self.eta = parse(value)?,
            "ransac_threshold" => self.ransac_threshold = parse(value)?,
            "ransac_confidence" => self.ransac_confidence = parse(value)?,
            "ransac_max_iterations" => self.ransac_max_iterations = parse(value)?,
            "smooth_neighbors" => self.smooth_neighbors = parse(value)?,
            "smooth_mad_factor" => self.smooth_mad_factor = parse(value)?,
            "smooth_slack" => self.smooth_slack = parse(value)?,
            "tau_fg" => self.tau_fg = parse(value)?,
            "majority_filter" => self.majority_filter = parse_bool(value)?,
            "render_mode" => self.render_mode = parse(value)?,
            "canvas_cap" => self.canvas_cap = parse(value)?,
            "frames" => self.frames = optional_path(value),
            "keypoints" => self.keypoints = optional_path(value),
            "frame_width" => self.frame_width = Some(parse(value)?),
            "frame_height" => self.frame_height = Some(parse(value)?),
            "transforms" => self.transforms = optional_path(value),
            "maps" => self.maps = optional_path(value),
            "gt" => self.gt = optional_path(value),
            "masks" => self.masks = optional_path(value),
            "spec" => self.spec = optional_path(value),
            "out" => self.out = PathBuf::from(value),
            "write_raw" => self.write_raw = parse_bool(value)?,
            "write_maps" => self.write_maps = parse_bool(value)?,
            "write_links" => self.write_links = parse_bool(value)?,
            "write_frames" => self.write_frames = parse_bool(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies every line of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (line, k, v) in parse_kv(text, path)? {
            self.set(&k, &v).map_err(|message| Error::Config {
                path: path.to_path_buf(),
                line,
                message,
            })?;
        }
        self.validate().map_err(|message| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            message,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&read_text(path)?, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("ratio", self.ratio),
            ("gamma_coeff", self.gamma_coeff),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau", self.tau),
            ("c", self.c),
            ("eta", self.eta),
            ("ransac_threshold", self.ransac_threshold),
            ("tau_fg", self.tau_fg),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(format!("r must be in (0, 1), got {}", self.r));
        }
        if self.eta > 1.0 {
            return Err(format!("eta must be at most 1, got {}", self.eta));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(format!(
                "ransac_confidence must be in (0, 1), got {}",
                self.ransac_confidence
            ));
        }
        if self.delta_f == 0 {
            return Err("delta_f must be at least 1".into());
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            gamma_coeff: self.gamma_coeff,
            max_iterations: self.t1,
            tau: self.tau1,
            r: self.r,
            scheme: self.scheme,
            mask: self.mask,
            max_halvings: self.max_halvings,
        }
    }

    pub fn nonkey(&self) -> NonKeyConfig {
        NonKeyConfig {
            max_iterations: self.t2,
            tau2: self.tau2,
            tau: self.tau,
            r: self.r,
            c: self.c,
            eta: self.eta,
            gamma_coeff: self.gamma_coeff,
            mask: self.mask,
            max_halvings: self.max_halvings,
        }
    }

    pub fn prune(&self) -> PruneConfig {
        PruneConfig {
            threshold: self.ransac_threshold,
            confidence: self.ransac_confidence,
            max_iterations: self.ransac_max_iterations,
            seed: self.seed,
            smooth_neighbors: self.smooth_neighbors,
            smooth_mad_factor: self.smooth_mad_factor,
            smooth_slack: self.smooth_slack,
        }
    }

    pub fn align_params(&self) -> AlignParams {
        AlignParams {
            delta_f: self.delta_f,
            ratio: self.ratio,
            prune: self.prune(),
            solver: self.solver(),
            nonkey: self.nonkey(),
        }
    }

    pub fn transforms_path(&self) -> PathBuf {
        self.transforms
            .clone()
            .unwrap_or_else(|| self.out.join("transforms.json"))
    }

    pub fn maps_path(&self) -> PathBuf {
        self.maps.clone().unwrap_or_else(|| self.out.join("maps"))
    }
}

impl SceneSpec {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key.replace('-', "_").as_str() {
            "trajectory" => self.trajectory = value.parse::<Trajectory>().map_err(|e| e.to_string())?,
            "frames" | "m" => self.frames = parse(value)?,
            "width" | "w" => self.width = parse(value)?,
            "height" | "h" => self.height = parse(value)?,
            "noise_sigma" => self.noise_sigma = parse(value)?,
            "outlier_frac" => self.outlier_frac = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "point_density" => self.point_density = parse(value)?,
            "motion" => self.motion = parse(value)?,
            "texture_lo" => self.texture_range.0 = parse(value)?,
            "texture_hi" => self.texture_range.1 = parse(value)?,
            "foreground_value" => self.foreground_value = parse(value)?,
            "foreground_drift" => self.foreground_drift = parse(value)?,
            "foreground" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|x| parse(x.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                let [x, y, w, h, vx, vy] = v[..] else {
                    return Err(format!("foreground needs x,y,w,h,vx,vy, got '{value}'"));
                };
                self.foreground.push(ForegroundSpec { x, y, w, h, vx, vy });
            }
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        for (line, k, v) in parse_kv(&read_text(path)?, path)? {
            spec.set(&k, &v).map_err(|message| Error::Config {
                path: path.to_path_buf(),
                line,
                message,
            })?;
        }
        Ok(spec)
    }

    /// Inverse of [`SceneSpec::from_file`].
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "trajectory={}\nframes={}\nwidth={}\nheight={}\nnoise_sigma={}\noutlier_frac={}\nseed={}\n\
             point_density={}\nmotion={}\ntexture_lo={}\ntexture_hi={}\nforeground_value={}\nforeground_drift={}\n",
            self.trajectory,
            self.frames,
            self.width,
            self.height,
            self.noise_sigma,
            self.outlier_frac,
            self.seed,
            self.point_density,
            self.motion,
            self.texture_range.0,
            self.texture_range.1,
            self.foreground_value,
            self.foreground_drift,
        );
        for f in &self.foreground {
            s.push_str(&format!("foreground={},{},{},{},{},{}\n", f.x, f.y, f.w, f.h, f.vx, f.vy));
        }
        s
    }
}
