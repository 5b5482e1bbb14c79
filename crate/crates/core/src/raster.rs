//! Per-pixel rasters (intensity images, depth maps, overlap masks) and their
//! on-disk encodings.
//!
//! * depth PNG: 16-bit grayscale, millimeters, 0 = invalid
//! * mask PNG: 8-bit grayscale, 255 = overlap, 0 = non-overlap, 128 = unknown
//! * float raster: `b"VFR1"`, width u32, height u32, then `f32` samples, all
//!   little-endian, row-major

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

const RASTER_MAGIC: &[u8; 4] = b"VFR1";

/// Single-channel intensity image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn to_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = self.data[y as usize * self.width + x as usize];
                Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
            });
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Loads any PNG and converts it to luma.
    pub fn from_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Metric depth (meters) with an explicit validity mask. Invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Builds a map from raw values; non-finite and non-positive entries are invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} depth values for a {width}x{height} map",
                values.len()
            )));
        }
        let valid: Vec<bool> = values.iter().map(|z| z.is_finite() && *z > 0.0).collect();
        let data = values
            .iter()
            .zip(&valid)
            .map(|(z, ok)| if *ok { *z } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.data[i])
    }

    pub fn set(&mut self, u: usize, v: usize, z: Option<f64>) {
        let i = v * self.width + u;
        match z {
            Some(z) => {
                self.data[i] = z;
                self.valid[i] = true;
            }
            None => {
                self.data[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> Result<()> {
        check_shape(
            (self.width, self.height),
            (other.width, other.height),
            "depth maps",
        )
    }

    /// `factor`×`factor` block reduction. A block is valid only when all of its
    /// pixels are; the output is the harmonic mean, which is exact for planar
    /// surfaces since inverse depth is affine in pixel coordinates.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} depth by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = DepthMap::invalid(w, h);
        for v in 0..h {
            for u in 0..w {
                let mut inv = 0.0;
                let mut ok = true;
                'block: for dv in 0..factor {
                    for du in 0..factor {
                        match self.get(u * factor + du, v * factor + dv) {
                            Some(z) => inv += 1.0 / z,
                            None => {
                                ok = false;
                                break 'block;
                            }
                        }
                    }
                }
                if ok {
                    out.set(u, v, Some((factor * factor) as f64 / inv));
                }
            }
        }
        Ok(out)
    }

    pub fn to_png_mm(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let i = y as usize * self.width + x as usize;
                let mm = (self.data[i] * 1000.0).round();
                Luma([if self.valid[i] && mm >= 1.0 && mm <= 65535.0 {
                    mm as u16
                } else {
                    0
                }])
            });
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn from_png_mm(path: &Path) -> Result<Self> {
        let img = match open_image(path)? {
            image::DynamicImage::ImageLuma16(b) => b,
            other => {
                return Err(Error::format(
                    "depth png",
                    path,
                    format!("expected 16-bit grayscale, found {:?}", other.color()),
                ))
            }
        };
        let (w, h) = img.dimensions();
        let values = img
            .pixels()
            .map(|p| {
                if p.0[0] == 0 {
                    0.0
                } else {
                    p.0[0] as f64 / 1000.0
                }
            })
            .collect();
        Self::from_values(w as usize, h as usize, values)
    }

    pub fn to_raster(&self, path: &Path) -> Result<()> {
        write_raster(path, self.width, self.height, &self.data)
    }

    pub fn from_raster(path: &Path) -> Result<Self> {
        let (w, h, values) = read_raster(path)?;
        Self::from_values(w, h, values)
    }
}

/// Per-pixel label of a ground-truth overlap mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapLabel {
    Overlap,
    NonOverlap,
    Unknown,
}

/// Per-pixel overlap probability. Ground-truth masks carry `known = false`
/// where the label cannot be determined; predictions are known everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub known: Vec<bool>,
}

impl OverlapMask {
    pub fn constant(width: usize, height: usize, p: f64) -> Self {
        Self {
            width,
            height,
            data: vec![p; width * height],
            known: vec![true; width * height],
        }
    }

    pub fn from_labels(width: usize, height: usize, labels: &[OverlapLabel]) -> Self {
        let data = labels
            .iter()
            .map(|l| {
                if *l == OverlapLabel::Overlap {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let known = labels.iter().map(|l| *l != OverlapLabel::Unknown).collect();
        Self {
            width,
            height,
            data,
            known,
        }
    }

    pub fn label(&self, u: usize, v: usize, threshold: f64) -> OverlapLabel {
        let i = v * self.width + u;
        if !self.known[i] {
            OverlapLabel::Unknown
        } else if self.data[i] >= threshold {
            OverlapLabel::Overlap
        } else {
            OverlapLabel::NonOverlap
        }
    }

    pub fn same_shape(&self, w: usize, h: usize) -> Result<()> {
        check_shape((self.width, self.height), (w, h), "overlap mask")
    }

    /// Thresholded 8-bit encoding (255 / 0 / 128).
    pub fn to_png(&self, path: &Path, threshold: f64) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([match self.label(x as usize, y as usize, threshold) {
                    OverlapLabel::Overlap => 255,
                    OverlapLabel::NonOverlap => 0,
                    OverlapLabel::Unknown => 128,
                }])
            });
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn from_png(path: &Path) -> Result<Self> {
        let img = match open_image(path)? {
            image::DynamicImage::ImageLuma8(b) => b,
            other => {
                return Err(Error::format(
                    "mask png",
                    path,
                    format!("expected 8-bit grayscale, found {:?}", other.color()),
                ))
            }
        };
        let (w, h) = img.dimensions();
        let mut labels = Vec::with_capacity((w * h) as usize);
        for p in img.pixels() {
            labels.push(match p.0[0] {
                255 => OverlapLabel::Overlap,
                0 => OverlapLabel::NonOverlap,
                128 => OverlapLabel::Unknown,
                x => {
                    return Err(Error::format(
                        "mask png",
                        path,
                        format!("unexpected value {x}"),
                    ))
                }
            });
        }
        Ok(Self::from_labels(w as usize, h as usize, &labels))
    }

    /// Probabilities as a float raster; unknown pixels are stored as NaN.
    pub fn to_raster(&self, path: &Path) -> Result<()> {
        let values: Vec<f64> = self
            .data
            .iter()
            .zip(&self.known)
            .map(|(p, k)| if *k { *p } else { f64::NAN })
            .collect();
        write_raster(path, self.width, self.height, &values)
    }

    pub fn from_raster(path: &Path) -> Result<Self> {
        let (width, height, values) = read_raster(path)?;
        let known: Vec<bool> = values.iter().map(|p| !p.is_nan()).collect();
        let data = values
            .iter()
            .map(|p| if p.is_nan() { 0.0 } else { *p })
            .collect();
        Ok(Self {
            width,
            height,
            data,
            known,
        })
    }
}

pub(crate) fn check_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

pub fn write_raster(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    if bytes.len() < 12 || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::format("float raster", path, "bad magic"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * w * h {
        return Err(Error::format(
            "float raster",
            path,
            format!("{} payload bytes for {w}x{h}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((w, h, values))
}
