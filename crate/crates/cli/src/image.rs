//! Binary PPM (P6) output and the panels of the evaluation strips.

use std::path::Path;

use tdpcr_core::{Error, Result};

/// Bands shown as red, green, blue.
pub const RGB_BANDS: [usize; 3] = [3, 2, 1];

const PALETTE: [[u8; 3]; 8] = [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]];

/// Row-major RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self { width, height, data: vec![v; width * height * 3] }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Panels side by side, separated by a 2-pixel white gutter.
    pub fn hstack(panels: &[Rgb]) -> Result<Rgb> {
        let h = panels.first().map_or(0, |p| p.height);
        if panels.iter().any(|p| p.height != h) {
            return Err(Error::Shape("strip panels differ in height".into()));
        }
        let gutter = 2;
        let width = panels.iter().map(|p| p.width).sum::<usize>() + gutter * panels.len().saturating_sub(1);
        let mut out = Rgb::filled(width, h, 255);
        let mut x0 = 0;
        for p in panels {
            for y in 0..h {
                let dst = (y * width + x0) * 3;
                out.data[dst..dst + p.width * 3].copy_from_slice(&p.data[y * p.width * 3..(y + 1) * p.width * 3]);
            }
            x0 += p.width + gutter;
        }
        Ok(out)
    }
}

/// Parses a P6 image written by [`Rgb::to_ppm`].
pub fn parse_ppm(bytes: &[u8]) -> Result<Rgb> {
    let bad = || Error::Data("not a binary PPM".into());
    let mut fields = Vec::new();
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
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if data.len() != width * height * 3 {
        return Err(bad());
    }
    Ok(Rgb { width, height, data })
}

/// Display stretch shared by all optical panels of one strip: per-channel 2nd and
/// 98th percentiles of the reference image.
#[derive(Clone, Copy, Debug)]
pub struct Stretch {
    lo: [f32; 3],
    hi: [f32; 3],
}

impl Stretch {
    pub fn fit(planar: &[f32], pixels: usize) -> Self {
        let mut lo = [0.0; 3];
        let mut hi = [1.0; 3];
        for (c, &b) in RGB_BANDS.iter().enumerate() {
            let mut v = planar[b * pixels..(b + 1) * pixels].to_vec();
            v.sort_by(f32::total_cmp);
            lo[c] = v[(pixels - 1) * 2 / 100];
            hi[c] = v[(pixels - 1) * 98 / 100].max(lo[c] + 1e-6);
        }
        Self { lo, hi }
    }

    pub fn render(&self, planar: &[f32], width: usize, height: usize) -> Rgb {
        let n = width * height;
        let mut data = Vec::with_capacity(n * 3);
        for p in 0..n {
            for (c, &b) in RGB_BANDS.iter().enumerate() {
                let t = (planar[b * n + p] - self.lo[c]) / (self.hi[c] - self.lo[c]);
                data.push((t.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Rgb { width, height, data }
    }
}

pub fn render_labels(labels: &[u8], width: usize, height: usize) -> Rgb {
    let data = labels.iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect();
    Rgb { width, height, data }
}

/// Values in `[0, 1]` as gray.
pub fn render_gray(values: &[f32], width: usize, height: usize) -> Rgb {
    let data = values.iter().flat_map(|&v| [(v.clamp(0.0, 1.0) * 255.0).round() as u8; 3]).collect();
    Rgb { width, height, data }
}
