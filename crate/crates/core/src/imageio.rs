//! Grayscale frame I/O for numbered PNG/PGM/PPM sequences.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads an image as luminance in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Raster> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(f64::from).collect(),
    ))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, img: GrayImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes `[0, 1]` values as 8-bit gray; the format follows the extension.
pub fn write_gray(path: &Path, raster: &Raster) -> Result<()> {
    let img = GrayImage::from_fn(raster.width() as u32, raster.height() as u32, |x, y| {
        Luma([to_u8(raster.get(x as usize, y as usize))])
    });
    save(path, img)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    save(path, img)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = read_gray(path)?;
    Ok(Mask::from_vec(
        r.width(),
        r.height(),
        r.data().iter().map(|&v| v >= 0.5).collect(),
    ))
}

/// Numeric index embedded in a file name: the last run of digits.
pub fn frame_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end]
        .rfind(|c: char| !c.is_ascii_digit())
        .map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

/// Image files of `dir` that carry a number, sorted by that number.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if let (true, Some(idx)) = (ext_ok, frame_index(&path)) {
            found.push((idx, path));
        }
    }
    found.sort();
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidInput(format!(
            "{} and {} carry the same frame number",
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Reads a numbered sequence; every frame must match the first in size.
pub fn read_frames(dir: &Path) -> Result<Vec<Raster>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no numbered png/pgm/ppm frames in {}",
            dir.display()
        )));
    }
    let mut frames: Vec<Raster> = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let r = read_gray(p).map_err(|e| {
            Error::InvalidInput(format!("frame {i} ({}) is unreadable: {e}", p.display()))
        })?;
        if let Some(first) = frames.first() {
            if (r.width(), r.height()) != (first.width(), first.height()) {
                return Err(Error::InvalidInput(format!(
                    "frame {i} ({}) is {}x{}, expected {}x{}",
                    p.display(),
                    r.width(),
                    r.height(),
                    first.width(),
                    first.height()
                )));
            }
        }
        frames.push(r);
    }
    Ok(frames)
}

pub fn numbered(dir: &Path, prefix: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{i:04}.{ext}"))
}
