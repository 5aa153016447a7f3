//! On-disk sequence container: a directory with `manifest.json` and one
//! little-endian `f32` row-major file per frame, plus optional clean frames,
//! ROI and ground-truth deformation fields.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::DeformationField;
use crate::noise::NoiseSpec;
use crate::Image;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub target_index: usize,
    pub intensity_range: [f64; 2],
    /// ROI file (one byte per pixel, nonzero = inside), relative to the container.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<String>,
    /// Subdirectory holding the clean frames with the same file names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_dir: Option<String>,
    /// Subdirectory holding `field_XXXX_dy.raw` / `field_XXXX_dx.raw`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

/// In-memory contents of a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub target_index: usize,
    pub clean: Option<Vec<Image>>,
    pub roi: Option<Array2<bool>>,
    pub fields: Option<Vec<DeformationField>>,
    pub noise: Option<NoiseSpec>,
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}.raw")
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path, height: usize, width: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != height * width * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for {height}x{width} f32, found {}",
                height * width * 4,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((height, width), data).expect("length checked"))
}

fn intensity_range(frames: &[Image]) -> [f64; 2] {
    let (lo, hi) = frames
        .iter()
        .flat_map(|f| f.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    [lo as f64, hi as f64]
}

impl Sequence {
    pub fn dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    pub fn manifest(&self) -> Manifest {
        let (height, width) = self.dim();
        Manifest {
            height,
            width,
            frame_count: self.frames.len(),
            target_index: self.target_index,
            intensity_range: intensity_range(&self.frames),
            roi: self.roi.as_ref().map(|_| "roi.raw".into()),
            clean_dir: self.clean.as_ref().map(|_| "clean".into()),
            fields_dir: self.fields.as_ref().map(|_| "fields".into()),
            noise: self.noise,
        }
    }

    fn check(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("sequence has no frames"));
        }
        if self.target_index >= self.frames.len() {
            return Err(Error::invalid(format!(
                "target index {} out of range for {} frames",
                self.target_index,
                self.frames.len()
            )));
        }
        let dim = self.dim();
        let frames = self.frames.iter().chain(self.clean.iter().flatten());
        if frames.clone().any(|f| f.dim() != dim) || self.roi.as_ref().is_some_and(|r| r.dim() != dim) {
            return Err(Error::shape(
                "all frames, clean frames and the ROI must share one shape",
            ));
        }
        Ok(())
    }
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    seq.check()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = seq.manifest();
    for (k, f) in seq.frames.iter().enumerate() {
        write_raw(&dir.join(frame_name(k)), f)?;
    }
    if let Some(clean) = &seq.clean {
        let sub = dir.join("clean");
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (k, f) in clean.iter().enumerate() {
            write_raw(&sub.join(frame_name(k)), f)?;
        }
    }
    if let Some(roi) = &seq.roi {
        let path = dir.join("roi.raw");
        let bytes: Vec<u8> = roi.iter().map(|&b| b as u8).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(fields) = &seq.fields {
        let sub = dir.join("fields");
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (k, u) in fields.iter().enumerate() {
            write_raw(&sub.join(format!("field_{k:04}_dy.raw")), &u.dy)?;
            write_raw(&sub.join(format!("field_{k:04}_dx.raw")), &u.dx)?;
        }
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.height == 0 || m.width == 0 || m.frame_count == 0 {
        return Err(Error::format(&path, "empty dimensions or no frames"));
    }
    if m.target_index >= m.frame_count {
        return Err(Error::format(
            &path,
            format!(
                "target_index {} out of range for {} frames",
                m.target_index, m.frame_count
            ),
        ));
    }
    Ok(m)
}

fn count_frames(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".raw") {
            n += 1;
        }
    }
    Ok(n)
}

fn read_frames(dir: &Path, m: &Manifest) -> Result<Vec<Image>> {
    let present = count_frames(dir)?;
    if present != m.frame_count {
        return Err(Error::format(
            dir,
            format!(
                "manifest lists {} frames but {present} frame files are present",
                m.frame_count
            ),
        ));
    }
    (0..m.frame_count)
        .map(|k| read_raw(&dir.join(frame_name(k)), m.height, m.width))
        .collect()
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let m = read_manifest(dir)?;
    let frames = read_frames(dir, &m)?;
    let clean = match &m.clean_dir {
        Some(sub) => Some(read_frames(&dir.join(sub), &m)?),
        None => None,
    };
    let roi = match &m.roi {
        Some(name) => {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != m.height * m.width {
                return Err(Error::format(
                    &path,
                    format!("expected {} ROI bytes, found {}", m.height * m.width, bytes.len()),
                ));
            }
            let roi = Array2::from_shape_vec((m.height, m.width), bytes.into_iter().map(|b| b != 0).collect())
                .expect("length checked");
            Some(roi)
        }
        None => None,
    };
    let fields = match &m.fields_dir {
        Some(sub) => {
            let sub = dir.join(sub);
            let read = |k: usize, c: &str| read_raw(&sub.join(format!("field_{k:04}_{c}.raw")), m.height, m.width);
            Some(
                (0..m.frame_count)
                    .map(|k| {
                        Ok(DeformationField {
                            dy: read(k, "dy")?,
                            dx: read(k, "dx")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    Ok(Sequence {
        frames,
        target_index: m.target_index,
        clean,
        roi,
        fields,
        noise: m.noise,
    })
}

/// Indices of the `n_aux` frames nearest the target: `n_aux / 2` before and
/// the rest after, in increasing order.
pub fn auxiliary_indices(frame_count: usize, target: usize, n_aux: usize) -> Result<Vec<usize>> {
    if frame_count < n_aux + 1 {
        return Err(Error::invalid(format!(
            "sequence has {frame_count} frames but n_aux = {n_aux} needs at least {}",
            n_aux + 1
        )));
    }
    let before = n_aux / 2;
    let after = n_aux - before;
    if target < before || target + after >= frame_count {
        return Err(Error::invalid(format!(
            "target frame {target} needs {before} frames before and {after} after, sequence has {frame_count}"
        )));
    }
    Ok((target - before..target).chain(target + 1..=target + after).collect())
}

/// Converts to 8 bits by clipping to [0, 1] and rounding `v * 255` half up.
pub fn to_u8(img: &Image) -> Vec<u8> {
    img.iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f64 };
            (v * 255.0 + 0.5).floor() as u8
        })
        .collect()
}

pub fn export_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, to_u8(img)).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}
