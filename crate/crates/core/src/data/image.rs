//! 8-bit RGB images and the netpbm formats (binary and ASCII PPM/PGM).

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{KerlError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `RGBRGB...`.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sub-image; the box must lie inside the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(KerlError::Invalid(format!(
                "crop ({x},{y},{w},{h}) outside a {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = RgbImage::new(w, h);
        for row in 0..h {
            let src = ((y + row) * self.width + x) * 3;
            out.data[row * w * 3..(row + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, w: usize, h: usize) -> RgbImage {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut out = RgbImage::new(w, h);
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let p = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, p - i0 as f64)
        };
        for y in 0..h {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..w {
                let (x0, x1, fx) = axis(x, sx, self.width);
                let mut px = [0u8; 3];
                for (ch, v) in px.iter_mut().enumerate() {
                    let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + ch] as f64;
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }

    /// `H × W × 3` tensor with values `v / 255 - 0.5`.
    pub fn to_tensor(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.height, self.width, 3), |(y, x, c)| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 255.0 - 0.5
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let bytes = std::fs::read(path).map_err(|e| KerlError::io(path, e))?;
        decode_netpbm(&bytes, path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| KerlError::io(path, e))?;
    f.write_all(bytes).map_err(|e| KerlError::io(path, e))
}

/// Writes `values` (clamped to `[0, 1]`) as an 8-bit binary PGM.
pub fn save_pgm(values: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(values: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| values[[y / factor, x / factor]])
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn word(&mut self) -> Option<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok().filter(|s| !s.is_empty())
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<usize> {
        let line = self.line();
        self.word()
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| KerlError::parse(path, line, format!("expected {what}")))
    }

    fn line(&self) -> usize {
        1 + self.bytes[..self.pos.min(self.bytes.len())].iter().filter(|&&b| b == b'\n').count()
    }
}

/// Decodes P2/P3/P5/P6; grayscale is replicated into three channels.
pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut t = Tokens { bytes, pos: 0 };
    let magic = t.word().unwrap_or("").to_string();
    let channels = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        other => return Err(KerlError::parse(path, 1, format!("unsupported image type {other:?}"))),
    };
    let width = t.number(path, "width")?;
    let height = t.number(path, "height")?;
    let maxval = t.number(path, "maximum value")?;
    if maxval == 0 || maxval > 255 {
        return Err(KerlError::parse(path, t.line(), format!("unsupported maximum value {maxval}")));
    }
    let count = width * height * channels;
    let samples: Vec<u8> = if magic == "P5" || magic == "P6" {
        // exactly one whitespace byte separates the header from the raster
        let start = t.pos + 1;
        if bytes.len() < start + count {
            return Err(KerlError::parse(path, t.line(), "raster is truncated"));
        }
        bytes[start..start + count].to_vec()
    } else {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let n = t.number(path, "sample")?;
            if n > maxval {
                return Err(KerlError::parse(path, t.line(), format!("sample {n} exceeds {maxval}")));
            }
            v.push(n as u8);
        }
        v
    };
    let rescale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval) as u8;
    let mut img = RgbImage::new(width, height);
    for p in 0..width * height {
        for c in 0..3 {
            img.data[p * 3 + c] = rescale(samples[p * channels + c % channels]);
        }
    }
    Ok(img)
}
