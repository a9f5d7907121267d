//! Float images, PFM/PPM files, tone mapping and PSNR.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::color::Rgb;
use crate::error::{Error, Result};

/// RGB image stored row-major from the top row down.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![Rgb::BLACK; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| f(*p)).collect(),
        }
    }

    fn check_same_size(&self, o: &Image) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                got: o.width * o.height,
            });
        }
        Ok(())
    }

    /// Little-endian PFM bytes with scanlines bottom to top.
    pub fn to_pfm_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(12 * self.width * self.height);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y).0 {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_pfm_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated PFM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // Exactly one whitespace byte separates the header from the data.
        pos += 1;
        let channels = match fields[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(err(format!("not a PFM file (magic {other:?})"))),
        };
        let width: usize = fields[1].parse().map_err(|_| err(format!("bad width {:?}", fields[1])))?;
        let height: usize = fields[2].parse().map_err(|_| err(format!("bad height {:?}", fields[2])))?;
        let scale: f64 = fields[3].parse().map_err(|_| err(format!("bad scale {:?}", fields[3])))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(err(format!("bad scale {scale}")));
        }
        let little = scale < 0.0;
        let needed = 4 * channels * width * height;
        let data = bytes.get(pos..pos + needed).ok_or_else(|| err(format!("expected {needed} data bytes")))?;
        let mut img = Image::new(width, height);
        let mut vals = data.chunks_exact(4).map(|b| {
            let b: [u8; 4] = b.try_into().expect("chunk of four");
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        });
        for y in (0..height).rev() {
            for x in 0..width {
                let c = if channels == 3 {
                    let r = vals.next().unwrap_or(0.0);
                    let g = vals.next().unwrap_or(0.0);
                    let b = vals.next().unwrap_or(0.0);
                    Rgb::new(r as f64, g as f64, b as f64)
                } else {
                    Rgb::splat(vals.next().unwrap_or(0.0) as f64)
                };
                img.set(x, y, c);
            }
        }
        Ok(img)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pfm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pfm_bytes(&bytes, path)
    }

    /// 8-bit binary PPM of the tone-mapped image.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            for c in tonemap(*p).0 {
                out.push((c * 255.0).round() as u8);
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn mean(&self) -> Rgb {
        let n = self.pixels.len().max(1) as f64;
        self.pixels.iter().fold(Rgb::BLACK, |a, p| a + *p) * (1.0 / n)
    }
}

/// sRGB transfer curve of a value clamped to `[0, 1]`.
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn tonemap(c: Rgb) -> Rgb {
    c.map(srgb_encode)
}

/// PSNR in dB over values clamped to `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let mut se = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for k in 0..3 {
            let d = p[k].clamp(0.0, 1.0) - q[k].clamp(0.0, 1.0);
            se += d * d;
        }
    }
    let mse = se / (3 * a.pixels.len()).max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR after tone mapping both images.
pub fn psnr_tonemapped(a: &Image, b: &Image) -> Result<f64> {
    psnr(&a.map(tonemap), &b.map(tonemap))
}
