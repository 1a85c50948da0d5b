//! Images, bounding boxes, annotations, and the on-disk PGM format.
//!
//! Pixels are f64 in `[0, 1]`, row-major `[h][w][c]`. Files are binary PGM
//! (P5, 8-bit); a `c > 1` image is stored as `c` vertically concatenated
//! planes with a `# channels: c` header comment, so any PGM reader can still
//! open it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Image
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    /// Builds an image from interleaved row-major data, validating the pixel
    /// domain.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "image {}x{}x{} needs {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {} outside [0,1]", v)));
        }
        Ok(Image { h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.idx(i, j, k);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.h, self.w, self.c], self.data.clone())
            .expect("image dims are consistent by construction")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// The image after 8-bit quantization, i.e. what a PGM round trip yields.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| dequantize(quantize(v))).collect();
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

// ---------------------------------------------------------------------------
// Boxes and annotations
// ---------------------------------------------------------------------------

/// Axis-aligned box in normalized image coordinates (center, size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A ground-truth box: class 0 is a wall segment, class 1 a deliberate gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn bbox(&self) -> BBox {
        BBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "annotation with non-positive size {}x{}",
                self.w, self.h
            )));
        }
        let (x0, y0, x1, y1) = self.bbox().corners();
        if x0 < -1e-9 || y0 < -1e-9 || x1 > 1.0 + 1e-9 || y1 > 1.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "annotation box [{}, {}]x[{}, {}] extends outside the unit square",
                x0, x1, y0, y1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

/// Writes the image as binary 8-bit PGM via a temp file and atomic rename.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut header = String::from("P5\n");
    if img.c > 1 {
        header.push_str(&format!("# channels: {}\n", img.c));
    }
    header.push_str(&format!("{} {}\n255\n", img.w, img.h * img.c));

    // Planes are concatenated vertically: all of channel 0, then channel 1, ...
    let mut bytes = Vec::with_capacity(header.len() + img.numel());
    bytes.extend_from_slice(header.as_bytes());
    for k in 0..img.c {
        for i in 0..img.h {
            for j in 0..img.w {
                bytes.push(quantize(img.get(i, j, k)));
            }
        }
    }
    atomic_write(path, &bytes)
}

/// Reads a binary PGM written by [`write_pgm`] (or any 8-bit P5 file).
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pstr = path.display().to_string();
    let mut pos = 0usize;
    let mut channels = 1usize;

    fn skip_ws(bytes: &[u8], pos: &mut usize, channels: &mut usize, pstr: &str) -> Result<()> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let end = bytes[*pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|o| *pos + o)
                    .unwrap_or(bytes.len());
                let comment = String::from_utf8_lossy(&bytes[*pos..end]);
                if let Some(rest) = comment.strip_prefix("# channels:") {
                    *channels = rest
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(pstr, "bad channels comment"))?;
                }
                *pos = end;
            } else {
                return Ok(());
            }
        }
    }

    fn token(bytes: &[u8], pos: &mut usize, channels: &mut usize, pstr: &str) -> Result<usize> {
        skip_ws(bytes, pos, channels, pstr)?;
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(pstr, "malformed PGM header token"))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::parse(pstr, "not a binary PGM (missing P5 magic)"));
    }
    pos = 2;
    let w = token(&bytes, &mut pos, &mut channels, &pstr)?;
    let total_h = token(&bytes, &mut pos, &mut channels, &pstr)?;
    let maxval = token(&bytes, &mut pos, &mut channels, &pstr)?;
    if maxval != 255 {
        return Err(Error::parse(pstr, format!("unsupported maxval {}", maxval)));
    }
    pos += 1; // single whitespace byte after maxval
    if total_h % channels != 0 {
        return Err(Error::parse(
            pstr,
            format!("height {} not divisible by {} channels", total_h, channels),
        ));
    }
    let h = total_h / channels;
    let expected = w * total_h;
    if bytes.len() < pos + expected {
        return Err(Error::parse(
            pstr,
            format!("truncated pixel data: want {} bytes", expected),
        ));
    }
    let mut img = Image::zeros(h, w, channels);
    let mut cursor = pos;
    for k in 0..channels {
        for i in 0..h {
            for j in 0..w {
                img.set(i, j, k, dequantize(bytes[cursor]));
                cursor += 1;
            }
        }
    }
    Ok(img)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let pstr = path.display().to_string();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(pstr.clone(), e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(pstr.clone(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(pstr.clone(), e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(pstr, e))
}
