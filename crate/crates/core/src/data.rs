//! Procedural multispectral/SAR scenes with land-cover labels and synthetic clouds,
//! their on-disk format, augmentation and batching.
//!
//! Every array of a scene comes from its own named random substream of the scene seed.
//! The SAR image draws only on the label, texture and speckle streams, so it does not
//! change with cloud coverage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use tdpcr_autodiff::Array;

use crate::error::{Error, Result};
use crate::rng::substream;

pub const OPTICAL_BANDS: usize = 13;
pub const SAR_BANDS: usize = 2;
pub const SCHEMA_VERSION: u32 = 1;

/// SAR normalisation window in dB.
pub const SAR_DB_RANGE: (f32, f32) = (-30.0, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub cloud_coverage: f64,
    pub speckle_looks: u32,
}

impl SceneSpec {
    pub fn new(seed: u64, size: usize, cloud_coverage: f64) -> Self {
        Self { seed, height: size, width: size, num_classes: 6, cloud_coverage, speckle_looks: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Argument(format!("scene size {}x{} must be a positive multiple of 8", self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.cloud_coverage) {
            return Err(Error::Argument(format!("cloud coverage {} outside [0, 1]", self.cloud_coverage)));
        }
        if self.speckle_looks == 0 {
            return Err(Error::Argument("speckle_looks must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes >= 255 {
            return Err(Error::Argument(format!("num_classes {} outside 1..=254", self.num_classes)));
        }
        Ok(())
    }
}

/// One scene, planar row-major: bands first, then rows, then columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub cloud_coverage: f64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub opt_cloudy: Vec<f32>,
    pub sar: Vec<f32>,
    pub opt_clear: Vec<f32>,
    pub labels: Vec<u8>,
    /// Generator-side cloud thickness; never a model input.
    pub cloud_alpha: Vec<f32>,
}

impl SampleRecord {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fraction of pixels with nonzero cloud thickness.
    pub fn measured_coverage(&self) -> f64 {
        self.cloud_alpha.iter().filter(|&&a| a > 0.0).count() as f64 / self.pixels() as f64
    }

    fn check(&self) -> Result<()> {
        let n = self.pixels();
        let sizes = [
            ("opt_cloudy", self.opt_cloudy.len(), OPTICAL_BANDS * n),
            ("sar", self.sar.len(), SAR_BANDS * n),
            ("opt_clear", self.opt_clear.len(), OPTICAL_BANDS * n),
            ("labels", self.labels.len(), n),
            ("cloud_alpha", self.cloud_alpha.len(), n),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::Data(format!("{name} has {got} values, expected {want}")));
            }
        }
        Ok(())
    }
}

/// Multi-octave value noise in `[0, 1)`: random lattice values, smoothstep-interpolated.
pub fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, base_cells: usize, octaves: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    let mut amp = 1f32;
    let mut total = 0f32;
    for o in 0..octaves {
        let cells = base_cells << o;
        let (gh, gw) = (cells + 1, cells + 1);
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>()).collect();
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = (y as f32 + 0.5) / h as f32 * cells as f32;
            let y0 = (fy as usize).min(cells - 1);
            let ty = smooth(fy - y0 as f32);
            for x in 0..w {
                let fx = (x as f32 + 0.5) / w as f32 * cells as f32;
                let x0 = (fx as usize).min(cells - 1);
                let tx = smooth(fx - x0 as f32);
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
                let bot = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
                out[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Mean reflectance per class over the 13 bands (visible, red edge, NIR, water vapour,
/// cirrus, SWIR).
pub fn spectral_library(num_classes: usize) -> Vec<[f32; OPTICAL_BANDS]> {
    let base: [[f32; OPTICAL_BANDS]; 6] = [
        // water
        [0.10, 0.09, 0.08, 0.06, 0.05, 0.04, 0.03, 0.03, 0.02, 0.01, 0.01, 0.01, 0.01],
        // forest
        [0.05, 0.05, 0.07, 0.04, 0.10, 0.30, 0.38, 0.40, 0.42, 0.12, 0.02, 0.18, 0.09],
        // cropland
        [0.08, 0.09, 0.12, 0.09, 0.17, 0.35, 0.45, 0.48, 0.50, 0.15, 0.03, 0.26, 0.15],
        // bare soil
        [0.15, 0.17, 0.21, 0.26, 0.29, 0.31, 0.33, 0.34, 0.35, 0.12, 0.03, 0.42, 0.38],
        // built-up
        [0.20, 0.21, 0.22, 0.23, 0.24, 0.25, 0.26, 0.27, 0.27, 0.10, 0.03, 0.30, 0.27],
        // snow and ice
        [0.85, 0.83, 0.80, 0.78, 0.76, 0.74, 0.72, 0.70, 0.68, 0.20, 0.05, 0.10, 0.06],
    ];
    let mut rng = substream(0, "spectral_library");
    (0..num_classes)
        .map(|k| match base.get(k) {
            Some(s) => *s,
            None => std::array::from_fn(|_| rng.gen_range(0.05..0.6)),
        })
        .collect()
}

/// Linear backscatter means (VV, VH) per class.
fn backscatter_library(num_classes: usize) -> Vec<[f32; SAR_BANDS]> {
    let base_db: [[f32; 2]; 6] = [[-22.0, -28.0], [-8.0, -14.0], [-11.0, -18.0], [-13.0, -21.0], [-3.0, -9.0], [-15.0, -24.0]];
    let mut rng = substream(0, "backscatter_library");
    (0..num_classes)
        .map(|k| {
            let db = base_db.get(k).copied().unwrap_or_else(|| [rng.gen_range(-20.0..-4.0), rng.gen_range(-26.0..-10.0)]);
            db.map(|d| 10f32.powf(d / 10.0))
        })
        .collect()
}

/// Cloud reflectance per band: bright and flat in the visible, lower in SWIR.
const CLOUD_SPECTRUM: [f32; OPTICAL_BANDS] = [0.82, 0.84, 0.85, 0.85, 0.84, 0.83, 0.82, 0.82, 0.81, 0.40, 0.30, 0.62, 0.50];

/// Width of the soft cloud edge, as a fraction of the noise range.
const CLOUD_RAMP: f32 = 0.05;

/// Min-max rescale to `[0, 1]`.
fn stretch(mut v: Vec<f32>) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let r = (hi - lo).max(1e-6);
    v.iter_mut().for_each(|x| *x = (*x - lo) / r);
    v
}

fn labels_from_fields(spec: &SceneSpec) -> Vec<u8> {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let mut rng = substream(spec.seed, "labels");
    let fields: Vec<Vec<f32>> = (0..k).map(|_| value_noise(&mut rng, h, w, 3, 3)).collect();
    (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if fields[c][p] > fields[best][p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn cloud_alpha(spec: &SceneSpec) -> Vec<f32> {
    let n = spec.height * spec.width;
    if spec.cloud_coverage == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = substream(spec.seed, "cloud");
    let noise = value_noise(&mut rng, spec.height, spec.width, 2, 4);
    let mut sorted = noise.clone();
    sorted.sort_by(f32::total_cmp);
    // threshold so that the requested fraction of pixels lies strictly above it
    let covered = ((spec.cloud_coverage * n as f64).round() as usize).min(n);
    let thr = match covered {
        c if c == n => sorted[0] - f32::EPSILON.max(sorted[0].abs() * 1e-6),
        c => sorted[n - c - 1],
    };
    let range = (sorted[n - 1] - sorted[0]).max(1e-6);
    noise.iter().map(|&v| ((v - thr) / (CLOUD_RAMP * range)).clamp(0.0, 1.0)).collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SampleRecord> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let labels = labels_from_fields(spec);

    let mut tex_rng = substream(spec.seed, "texture");
    let shared = value_noise(&mut tex_rng, h, w, 8, 3);
    let band_tex: Vec<Vec<f32>> = (0..OPTICAL_BANDS).map(|_| value_noise(&mut tex_rng, h, w, 16, 2)).collect();
    let library = spectral_library(spec.num_classes);
    let mut opt_clear = vec![0f32; OPTICAL_BANDS * n];
    for (b, plane) in opt_clear.chunks_mut(n).enumerate() {
        for p in 0..n {
            let mean = library[labels[p] as usize][b];
            let v = mean * (0.8 + 0.4 * shared[p]) + 0.04 * (band_tex[b][p] - 0.5);
            plane[p] = v.clamp(0.0, 1.0);
        }
    }

    let mut sar_rng = substream(spec.seed, "speckle");
    let looks = spec.speckle_looks as f32;
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Argument(e.to_string()))?;
    let backscatter = backscatter_library(spec.num_classes);
    let (lo, hi) = SAR_DB_RANGE;
    let mut sar = vec![0f32; SAR_BANDS * n];
    for (b, plane) in sar.chunks_mut(n).enumerate() {
        for p in 0..n {
            let sigma = backscatter[labels[p] as usize][b] * (0.7 + 0.6 * shared[p]);
            let db = 10.0 * (sigma * gamma.sample(&mut sar_rng)).max(1e-12).log10();
            plane[p] = ((db - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }

    let alpha = cloud_alpha(spec);
    let mut cloud_rng = substream(spec.seed, "cloud_texture");
    let cloud_tex = stretch(value_noise(&mut cloud_rng, h, w, 16, 2));
    let mut opt_cloudy = opt_clear.clone();
    for (b, plane) in opt_cloudy.chunks_mut(n).enumerate() {
        for p in 0..n {
            let a = alpha[p];
            if a == 0.0 {
                continue;
            }
            let cloud = CLOUD_SPECTRUM[b] * (0.55 + 0.5 * cloud_tex[p]);
            let haze = 0.15 * a * (1.0 - a);
            plane[p] = ((1.0 - a) * plane[p] + a * cloud + haze).clamp(0.0, 1.0);
        }
    }

    Ok(SampleRecord {
        seed: spec.seed,
        cloud_coverage: spec.cloud_coverage,
        height: h,
        width: w,
        num_classes: spec.num_classes,
        opt_cloudy,
        sar,
        opt_clear,
        labels,
        cloud_alpha: alpha,
    })
}

fn remap_planes<T: Copy>(src: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, map: impl Fn(usize, usize) -> usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in src.chunks(h * w).take(planes) {
        for y in 0..oh {
            for x in 0..ow {
                out.push(plane[map(y, x)]);
            }
        }
    }
    out
}

/// Applies the same pixel remapping to every array of a sample.
fn remap(s: &SampleRecord, oh: usize, ow: usize, map: impl Fn(usize, usize) -> usize + Copy) -> SampleRecord {
    let (h, w) = (s.height, s.width);
    SampleRecord {
        height: oh,
        width: ow,
        opt_cloudy: remap_planes(&s.opt_cloudy, OPTICAL_BANDS, h, w, oh, ow, map),
        sar: remap_planes(&s.sar, SAR_BANDS, h, w, oh, ow, map),
        opt_clear: remap_planes(&s.opt_clear, OPTICAL_BANDS, h, w, oh, ow, map),
        labels: remap_planes(&s.labels, 1, h, w, oh, ow, map),
        cloud_alpha: remap_planes(&s.cloud_alpha, 1, h, w, oh, ow, map),
        ..s.clone()
    }
}

pub fn flip_horizontal(s: &SampleRecord) -> SampleRecord {
    let w = s.width;
    remap(s, s.height, w, move |y, x| y * w + (w - 1 - x))
}

pub fn flip_vertical(s: &SampleRecord) -> SampleRecord {
    let (h, w) = (s.height, s.width);
    remap(s, h, w, move |y, x| (h - 1 - y) * w + x)
}

pub fn crop(s: &SampleRecord, top: usize, left: usize, ch: usize, cw: usize) -> Result<SampleRecord> {
    if ch == 0 || cw == 0 || top + ch > s.height || left + cw > s.width {
        return Err(Error::Argument(format!("crop {ch}x{cw} at ({top},{left}) exceeds {}x{}", s.height, s.width)));
    }
    let w = s.width;
    Ok(remap(s, ch, cw, move |y, x| (top + y) * w + left + x))
}

/// A uniformly placed `ch × cw` window.
pub fn random_crop(s: &SampleRecord, seed: u64, ch: usize, cw: usize) -> Result<SampleRecord> {
    if ch > s.height || cw > s.width {
        return Err(Error::Argument(format!("crop {ch}x{cw} larger than sample {}x{}", s.height, s.width)));
    }
    let mut rng = substream(seed, "crop");
    let top = rng.gen_range(0..=s.height - ch);
    let left = rng.gen_range(0..=s.width - cw);
    crop(s, top, left, ch, cw)
}

/// Random flips and a random `crop`-sized window (whole image when `None`).
pub fn augment(s: &SampleRecord, seed: u64, crop_size: Option<(usize, usize)>) -> Result<SampleRecord> {
    let mut rng = substream(seed, "augment");
    let (ch, cw) = crop_size.unwrap_or((s.height, s.width));
    if ch > s.height || cw > s.width {
        return Err(Error::Argument(format!("crop {ch}x{cw} larger than sample {}x{}", s.height, s.width)));
    }
    let top = rng.gen_range(0..=s.height - ch);
    let left = rng.gen_range(0..=s.width - cw);
    let mut out = crop(s, top, left, ch, cw)?;
    if rng.gen_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if rng.gen_bool(0.5) {
        out = flip_vertical(&out);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub schema_version: u32,
    pub endianness: String,
    pub seed: u64,
    pub coverage: f64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

const ARRAY_NAMES: [&str; 5] = ["opt_cloudy", "sar", "opt_clear", "labels", "cloud_alpha"];

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn write_sample(s: &SampleRecord, dir: &Path) -> Result<()> {
    s.check()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (s.height, s.width);
    let entry = |name: &str, dtype: &str, shape: Vec<usize>| (name.to_string(), ArrayEntry { file: format!("{name}.raw"), dtype: dtype.into(), shape });
    let manifest = SampleManifest {
        schema_version: SCHEMA_VERSION,
        endianness: "little".into(),
        seed: s.seed,
        coverage: s.cloud_coverage,
        num_classes: s.num_classes,
        height: h,
        width: w,
        arrays: BTreeMap::from([
            entry("opt_cloudy", "f32", vec![OPTICAL_BANDS, h, w]),
            entry("sar", "f32", vec![SAR_BANDS, h, w]),
            entry("opt_clear", "f32", vec![OPTICAL_BANDS, h, w]),
            entry("labels", "u8", vec![h, w]),
            entry("cloud_alpha", "f32", vec![h, w]),
        ]),
    };
    let blobs: [Vec<u8>; 5] = [f32_bytes(&s.opt_cloudy), f32_bytes(&s.sar), f32_bytes(&s.opt_clear), s.labels.clone(), f32_bytes(&s.cloud_alpha)];
    for (name, blob) in ARRAY_NAMES.iter().zip(blobs) {
        let path = dir.join(format!("{name}.raw"));
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: SampleManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!("unsupported schema version {}", m.schema_version)));
    }
    let big = match m.endianness.as_str() {
        "little" => false,
        "big" => true,
        other => return Err(Error::Data(format!("unknown endianness '{other}'"))),
    };
    let read = |name: &str, dtype: &str, shape: &[usize]| -> Result<Vec<u8>> {
        let e = m.arrays.get(name).ok_or_else(|| Error::Data(format!("manifest lacks array '{name}'")))?;
        if e.dtype != dtype || e.shape != shape {
            return Err(Error::Data(format!("array '{name}' declared {} {:?}, expected {dtype} {shape:?}", e.dtype, e.shape)));
        }
        if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with("..") {
            return Err(Error::Data(format!("array file '{}' must be a plain file name", e.file)));
        }
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        let width = if dtype == "f32" { 4 } else { 1 };
        let want = shape.iter().product::<usize>() * width;
        if bytes.len() != want {
            return Err(Error::Data(format!("{} holds {} bytes, expected {want}", p.display(), bytes.len())));
        }
        Ok(bytes)
    };
    let floats = |bytes: Vec<u8>| -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| {
                let c: [u8; 4] = c.try_into().expect("chunk of 4");
                if big {
                    f32::from_be_bytes(c)
                } else {
                    f32::from_le_bytes(c)
                }
            })
            .collect()
    };
    let (h, w) = (m.height, m.width);
    let s = SampleRecord {
        seed: m.seed,
        cloud_coverage: m.coverage,
        height: h,
        width: w,
        num_classes: m.num_classes,
        opt_cloudy: floats(read("opt_cloudy", "f32", &[OPTICAL_BANDS, h, w])?),
        sar: floats(read("sar", "f32", &[SAR_BANDS, h, w])?),
        opt_clear: floats(read("opt_clear", "f32", &[OPTICAL_BANDS, h, w])?),
        labels: read("labels", "u8", &[h, w])?,
        cloud_alpha: floats(read("cloud_alpha", "f32", &[h, w])?),
    };
    if let Some(bad) = s.labels.iter().find(|&&l| l as usize >= s.num_classes) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", s.num_classes)));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Scene seeds of different splits come from disjoint intervals.
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Per-scene coverage is drawn uniformly from this interval.
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub speckle_looks: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, size: 256, num_classes: 6, train: 512, val: 64, test: 64, coverage_min: 0.2, coverage_max: 0.8, speckle_looks: 4 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage_min) || !(self.coverage_min..=1.0).contains(&self.coverage_max) {
            return Err(Error::Config(format!("coverage interval [{}, {}] invalid", self.coverage_min, self.coverage_max)));
        }
        SceneSpec { seed: 0, height: self.size, width: self.size, num_classes: self.num_classes, cloud_coverage: 0.0, speckle_looks: self.speckle_looks }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn scene_spec(&self, split: Split, index: usize) -> SceneSpec {
        let seed = self.seed.wrapping_mul(1 << 42).wrapping_add(split.seed_offset()).wrapping_add(index as u64);
        let coverage = substream(seed, "coverage").gen_range(self.coverage_min..=self.coverage_max);
        SceneSpec { seed, height: self.size, width: self.size, num_classes: self.num_classes, cloud_coverage: coverage, speckle_looks: self.speckle_looks }
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        (0..self.count(split)).map(|i| generate_scene(&self.scene_spec(split, i))).collect()
    }

    pub fn sample_dir(root: &Path, split: Split, index: usize) -> PathBuf {
        root.join(split.name()).join(format!("{index:06}"))
    }

    /// Writes every split under `root/<split>/<index>` with a `root/<split>/split.json`
    /// listing each scene's seed and coverage.
    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for split in Split::ALL {
            let dir = root.join(split.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut scenes = Vec::new();
            for i in 0..self.count(split) {
                let spec = self.scene_spec(split, i);
                write_sample(&generate_scene(&spec)?, &Self::sample_dir(root, split, i))?;
                scenes.push(SplitEntry { index: i, seed: spec.seed, cloud_coverage: spec.cloud_coverage });
            }
            let path = dir.join("split.json");
            let manifest = SplitManifest { split, scenes };
            fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(|e| Error::io(&path, e))?;
        }
        let path = root.join("dataset.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("config serialises")).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub index: usize,
    pub seed: u64,
    pub cloud_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub scenes: Vec<SplitEntry>,
}

pub fn read_split_manifest(root: &Path, split: Split) -> Result<SplitManifest> {
    let path = root.join(split.name()).join("split.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads every sample of one split written by [`DatasetConfig::write`]. A split
/// directory without samples yields an empty list.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let dir = root.join(split.name());
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_sample(p)).collect()
}

/// Stacked batch tensors: `[B, 13, H, W]`, `[B, 2, H, W]`, and labels `[B·H·W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub cloudy: Array<f32>,
    pub sar: Array<f32>,
    pub clear: Array<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cloudy.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[&SampleRecord]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(Error::Shape("samples in a batch must share their size".into()));
        }
        let b = samples.len();
        let cat = |f: &dyn Fn(&SampleRecord) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f32>>();
        Ok(Batch {
            cloudy: Array::from_vec(&[b, OPTICAL_BANDS, h, w], cat(&|s| &s.opt_cloudy))?,
            sar: Array::from_vec(&[b, SAR_BANDS, h, w], cat(&|s| &s.sar))?,
            clear: Array::from_vec(&[b, OPTICAL_BANDS, h, w], cat(&|s| &s.opt_clear))?,
            labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
        })
    }
}

/// Epoch-wise shuffled batches: batch `i` of a run depends only on `(seed, i)`.
pub struct BatchSampler {
    seed: u64,
    len: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::Argument(format!("cannot batch {len} samples by {batch_size}")));
        }
        Ok(Self { seed, len, batch_size: batch_size.min(len) })
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut substream(self.seed, &format!("batches/epoch{epoch}")));
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Sample indices of global batch `step`; the tail of each epoch is dropped.
    pub fn indices(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, i) = (step / per, step % per);
        self.epoch_order(epoch)[i * self.batch_size..(i + 1) * self.batch_size].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coverage_is_clear() {
        let s = generate_scene(&SceneSpec::new(4, 32, 0.0)).unwrap();
        assert_eq!(s.opt_cloudy, s.opt_clear);
        assert!(s.cloud_alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::new(9, 32, 0.4);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn coverage_is_hit() {
        for (seed, c) in [(1, 0.1), (2, 0.35), (3, 0.5), (4, 0.8), (5, 1.0)] {
            let s = generate_scene(&SceneSpec::new(seed, 64, c)).unwrap();
            assert!((s.measured_coverage() - c).abs() <= 0.05, "{c} vs {}", s.measured_coverage());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_scene(&SceneSpec::new(0, 30, 0.5)).is_err());
        assert!(generate_scene(&SceneSpec::new(0, 32, 1.5)).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let s = generate_scene(&SceneSpec::new(5, 16, 0.5)).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
    }

    #[test]
    fn sampler_covers_epoch() {
        let bs = BatchSampler::new(1, 10, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|i| bs.indices(i)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(bs.indices(4), bs.indices(4));
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let cfg = DatasetConfig { train: 5, val: 5, test: 5, ..Default::default() };
        let seeds: Vec<u64> = Split::ALL.iter().flat_map(|&s| (0..5).map(move |i| (s, i))).map(|(s, i)| cfg.scene_spec(s, i).seed).collect();
        let mut u = seeds.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), seeds.len());
    }
}
