//! Float rasters, polarization frames and depth/normal maps, plus their file
//! formats: PFM for float data, PNG/PPM for 8-bit RGB.
//!
//! Rasters hold f64 in memory; PFM stores 32-bit floats, so disk round trips
//! are exact for values that are representable in f32 (everything this crate
//! writes). PFM payloads follow the usual convention: rows bottom to top,
//! little-endian when the scale field is negative.

use nalgebra::Vector3;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Hypothesis;

/// Intensities below this have no meaningful polarization signal.
pub const STOKES_INTENSITY_FLOOR: f64 = 1e-6;
/// AoP values this close to pi are treated as wrapped zeros; they appear when
/// f32 quantization rounds a value just below pi up to it.
const AOP_WRAP_SLACK: f64 = 1e-6;

/// Single-channel float raster, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Raster {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when (x, y) lies inside the bilinear sampling domain.
    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear sample; None outside the domain.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !self.in_bounds(x, y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }
}

/// Three-channel float raster (RGB images, normal maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster3 {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl Raster3 {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Raster3 {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// AoP/DoP conversion from a four-polarizer intensity stack (0, 45, 90, 135
/// degrees) through the linear Stokes components:
/// s0 = (i0+i45+i90+i135)/2, s1 = i0-i90, s2 = i45-i135.
///
/// Returns (aop in [0, pi), dop in [0, 1]); a stack with s0 below
/// [`STOKES_INTENSITY_FLOOR`] yields (0, 0).
pub fn aop_dop_from_polarizer_stack(i0: f64, i45: f64, i90: f64, i135: f64) -> Result<(f64, f64)> {
    for (name, v) in [("i0", i0), ("i45", i45), ("i90", i90), ("i135", i135)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("negative or non-finite intensity {name} = {v}")));
        }
    }
    let s0 = 0.5 * (i0 + i45 + i90 + i135);
    if s0 < STOKES_INTENSITY_FLOOR {
        return Ok((0.0, 0.0));
    }
    let s1 = i0 - i90;
    let s2 = i45 - i135;
    let aop = (0.5 * s2.atan2(s1)).rem_euclid(PI);
    let aop = if aop >= PI { 0.0 } else { aop };
    let dop = (s1.hypot(s2) / s0).min(1.0);
    Ok((aop, dop))
}

/// One view's photometric and polarimetric rasters. The doubled-angle AoP
/// rasters are cached so AoP can be interpolated without wraparound trouble.
#[derive(Debug, Clone)]
pub struct PolarFrame {
    pub rgb: Raster3,
    /// Luminance 0.299 R + 0.587 G + 0.114 B, range [0, 255].
    pub gray: Raster,
    /// Angle of polarization, radians in [0, pi).
    pub aop: Raster,
    /// Degree of polarization in [0, 1].
    pub dop: Raster,
    aop_cos2: Raster,
    aop_sin2: Raster,
}

impl PolarFrame {
    pub fn new(rgb: Raster3, mut aop: Raster, dop: Raster) -> Result<Self> {
        let (w, h) = (rgb.width(), rgb.height());
        if (aop.width(), aop.height()) != (w, h) || (dop.width(), dop.height()) != (w, h) {
            return Err(Error::invalid(format!(
                "raster sizes differ: rgb {w}x{h}, aop {}x{}, dop {}x{}",
                aop.width(),
                aop.height(),
                dop.width(),
                dop.height()
            )));
        }
        for v in aop.data.iter_mut() {
            if (PI..PI + AOP_WRAP_SLACK).contains(v) {
                *v -= PI;
            }
            if !(0.0..PI).contains(v) {
                return Err(Error::invalid(format!("AoP sample {v} outside [0, pi)")));
            }
        }
        for v in dop.data() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!("DoP sample {v} outside [0, 1]")));
            }
        }
        let mut gray = Raster::new(w, h, 0.0);
        let mut cos2 = Raster::new(w, h, 0.0);
        let mut sin2 = Raster::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = rgb.get(x, y);
                gray.set(x, y, 0.299 * r + 0.587 * g + 0.114 * b);
                let two_phi = 2.0 * aop.get(x, y);
                cos2.set(x, y, two_phi.cos());
                sin2.set(x, y, two_phi.sin());
            }
        }
        Ok(PolarFrame {
            rgb,
            gray,
            aop,
            dop,
            aop_cos2: cos2,
            aop_sin2: sin2,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Bilinear AoP at (x, y), interpolated on the doubled-angle circle so
    /// values near 0 and near pi blend correctly. Result in [0, pi).
    #[inline]
    pub fn sample_aop(&self, x: f64, y: f64) -> Option<f64> {
        let c = self.aop_cos2.sample(x, y)?;
        let s = self.aop_sin2.sample(x, y)?;
        if c == 0.0 && s == 0.0 {
            // Exactly opposing neighbors; fall back to the nearest sample.
            return Some(self.aop.get(x.round() as usize, y.round() as usize));
        }
        let a = (0.5 * s.atan2(c)).rem_euclid(PI);
        Some(if a >= PI { 0.0 } else { a })
    }

    /// Bilinear DoP at (x, y).
    #[inline]
    pub fn sample_dop(&self, x: f64, y: f64) -> Option<f64> {
        self.dop.sample(x, y)
    }
}

/// Per-pixel plane hypotheses with best cost and validity. Normals live in
/// the owning view's camera frame and face the camera. A cost of +inf marks
/// a pixel whose hypothesis has not been scored yet.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNormalMap {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
    pub normals: Vec<Vector3<f64>>,
    pub costs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthNormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthNormalMap {
            width,
            height,
            depths: vec![0.0; width * height],
            normals: vec![Vector3::new(0.0, 0.0, -1.0); width * height],
            costs: vec![f64::INFINITY; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn hypothesis(&self, x: usize, y: usize) -> Hypothesis {
        let i = self.index(x, y);
        Hypothesis::new(self.depths[i], self.normals[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, hyp: Hypothesis, cost: f64) {
        let i = self.index(x, y);
        self.depths[i] = hyp.depth;
        self.normals[i] = hyp.normal;
        self.costs[i] = cost;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Forgets stored costs (sets them to +inf) while keeping the estimates.
    /// Used when the scoring objective changes between estimation phases:
    /// stored costs act as the commit bar, so stale ones must not carry over.
    pub fn reset_costs(&mut self) {
        self.costs.fill(f64::INFINITY);
    }

    /// Mean stored cost over valid pixels; NaN when none are valid.
    pub fn mean_cost(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, v) in self.costs.iter().zip(&self.valid) {
            if *v && c.is_finite() {
                sum += c;
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

// ---------------------------------------------------------------------------
// PFM

/// A decoded PFM file: `Pf` grayscale or `PF` three-channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Pfm {
    Gray(Raster),
    Rgb(Raster3),
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Reads one whitespace-delimited header token, tracking the byte offset.
/// Next whitespace-delimited header token and the byte offset it starts at.
fn next_token<'a>(bytes: &'a [u8], offset: &mut usize, path: &Path) -> Result<(&'a [u8], usize)> {
    while *offset < bytes.len() && bytes[*offset].is_ascii_whitespace() {
        *offset += 1;
    }
    let start = *offset;
    while *offset < bytes.len() && !bytes[*offset].is_ascii_whitespace() {
        *offset += 1;
    }
    if start == *offset {
        return Err(format_err(path, start, "unexpected end of header"));
    }
    Ok((&bytes[start..*offset], start))
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    let (magic, _) = next_token(&bytes, &mut offset, path)?;
    let channels = match magic {
        b"Pf" => 1,
        b"PF" => 3,
        _ => return Err(format_err(path, 0, "bad magic, expected Pf or PF")),
    };
    let parse_dim = |tok: &[u8], at: usize| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| format_err(path, at, "bad dimension"))
    };
    let (tok, at) = next_token(&bytes, &mut offset, path)?;
    let width = parse_dim(tok, at)?;
    let (tok, at) = next_token(&bytes, &mut offset, path)?;
    let height = parse_dim(tok, at)?;
    let (scale_tok, at) = next_token(&bytes, &mut offset, path)?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| format_err(path, at, "bad scale"))?;
    let little_endian = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    if offset >= bytes.len() || !bytes[offset].is_ascii_whitespace() {
        return Err(format_err(path, offset, "missing header terminator"));
    }
    offset += 1;
    let expected = width * height * channels * 4;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload, expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(width * height * channels);
    for chunk in payload[..expected].chunks_exact(4) {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        values.push(v as f64);
    }
    // PFM rows run bottom to top; flip into top-down rasters.
    if channels == 1 {
        let mut r = Raster::new(width, height, 0.0);
        for y in 0..height {
            for x in 0..width {
                r.set(x, height - 1 - y, values[y * width + x]);
            }
        }
        Ok(Pfm::Gray(r))
    } else {
        let mut r = Raster3::new(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) * 3;
                r.set(x, height - 1 - y, [values[i], values[i + 1], values[i + 2]]);
            }
        }
        Ok(Pfm::Rgb(r))
    }
}

pub fn read_pfm_gray(path: &Path) -> Result<Raster> {
    match read_pfm(path)? {
        Pfm::Gray(r) => Ok(r),
        Pfm::Rgb(_) => Err(format_err(path, 0, "expected grayscale Pf, found PF")),
    }
}

pub fn read_pfm_rgb(path: &Path) -> Result<Raster3> {
    match read_pfm(path)? {
        Pfm::Rgb(r) => Ok(r),
        Pfm::Gray(_) => Err(format_err(path, 0, "expected three-channel PF, found Pf")),
    }
}

fn write_pfm_payload(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    rows: impl Iterator<Item = f32>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let header = format!("{magic}\n{width} {height}\n-1.0\n");
    out.write_all(header.as_bytes())
        .and_then(|_| {
            for v in rows {
                out.write_all(&v.to_le_bytes())?;
            }
            out.flush()
        })
        .map_err(|e| Error::io(path, e))
}

pub fn write_pfm_gray(path: &Path, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width(), raster.height());
    write_pfm_payload(
        path,
        "Pf",
        w,
        h,
        (0..h)
            .rev()
            .flat_map(move |y| (0..w).map(move |x| raster.get(x, y) as f32)),
    )
}

pub fn write_pfm_rgb(path: &Path, raster: &Raster3) -> Result<()> {
    let (w, h) = (raster.width(), raster.height());
    write_pfm_payload(
        path,
        "PF",
        w,
        h,
        (0..h)
            .rev()
            .flat_map(move |y| (0..w).flat_map(move |x| raster.get(x, y).map(|c| c as f32))),
    )
}

// ---------------------------------------------------------------------------
// 8-bit RGB input/output (PNG or PPM, decided by extension)

pub fn read_rgb_image(path: &Path) -> Result<Raster3> {
    let img = image::open(path)
        .map_err(|e| format_err(path, 0, format!("image decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = Raster3::new(w, h, [0.0; 3]);
    for (x, y, p) in img.enumerate_pixels() {
        r.set(x as usize, y as usize, [p[0] as f64, p[1] as f64, p[2] as f64]);
    }
    Ok(r)
}

/// Writes RGB after rounding to 8-bit; values are clamped to [0, 255].
pub fn write_rgb_image(path: &Path, raster: &Raster3) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let c = raster.get(x as usize, y as usize);
        image::Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    img.save(path)
        .map_err(|e| format_err(path, 0, format!("image encode failed: {e}")))
}

// ---------------------------------------------------------------------------
// Dataset layout: view_<id>_{rgb,aop,dop,...} plus cameras.txt

pub fn rgb_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("view_{id}_rgb.png"))
}

pub fn aop_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("view_{id}_aop.pfm"))
}

pub fn dop_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("view_{id}_dop.pfm"))
}

pub fn cameras_path(dir: &Path) -> PathBuf {
    dir.join("cameras.txt")
}

/// Map file names; `prefix` distinguishes estimated maps from ground truth
/// (for example "" and "gt_").
pub fn depth_path(dir: &Path, id: u32, prefix: &str) -> PathBuf {
    dir.join(format!("view_{id}_{prefix}depth.pfm"))
}

pub fn normal_path(dir: &Path, id: u32, prefix: &str) -> PathBuf {
    dir.join(format!("view_{id}_{prefix}normal.pfm"))
}

pub fn cost_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("view_{id}_cost.pfm"))
}

/// Reads the polarization frame of one view from `dir`. The RGB raster may be
/// PNG or PPM; AoP/DoP are PFM.
pub fn read_frame(dir: &Path, id: u32) -> Result<PolarFrame> {
    let rgb_png = rgb_path(dir, id);
    let rgb = if rgb_png.exists() {
        read_rgb_image(&rgb_png)?
    } else {
        read_rgb_image(&dir.join(format!("view_{id}_rgb.ppm")))?
    };
    let aop = read_pfm_gray(&aop_path(dir, id))?;
    let dop = read_pfm_gray(&dop_path(dir, id))?;
    PolarFrame::new(rgb, aop, dop)
}

pub fn write_frame(dir: &Path, id: u32, frame: &PolarFrame) -> Result<()> {
    write_rgb_image(&rgb_path(dir, id), &frame.rgb)?;
    write_pfm_gray(&aop_path(dir, id), &frame.aop)?;
    write_pfm_gray(&dop_path(dir, id), &frame.dop)
}

/// Writes a depth/normal map as a PFM trio. Invalid pixels are stored with
/// depth 0, a zero normal and +inf cost.
pub fn write_map(dir: &Path, id: u32, prefix: &str, map: &DepthNormalMap, with_cost: bool) -> Result<()> {
    let (w, h) = (map.width, map.height);
    let mut depth = Raster::new(w, h, 0.0);
    let mut normal = Raster3::new(w, h, [0.0; 3]);
    let mut cost = Raster::new(w, h, f64::INFINITY);
    for y in 0..h {
        for x in 0..w {
            let i = map.index(x, y);
            if map.valid[i] {
                depth.set(x, y, map.depths[i]);
                let n = map.normals[i];
                normal.set(x, y, [n.x, n.y, n.z]);
                cost.set(x, y, map.costs[i]);
            }
        }
    }
    write_pfm_gray(&depth_path(dir, id, prefix), &depth)?;
    write_pfm_rgb(&normal_path(dir, id, prefix), &normal)?;
    if with_cost {
        write_pfm_gray(&cost_path(dir, id), &cost)?;
    }
    Ok(())
}

/// Reads a map written by [`write_map`]. Pixels with non-positive or
/// non-finite stored depth come back invalid. Stored normal components are
/// kept exactly as stored (unit only to f32 precision) so a read-write cycle
/// reproduces the file byte for byte.
pub fn read_map(dir: &Path, id: u32, prefix: &str) -> Result<DepthNormalMap> {
    let depth = read_pfm_gray(&depth_path(dir, id, prefix))?;
    let normal = read_pfm_rgb(&normal_path(dir, id, prefix))?;
    let (w, h) = (depth.width(), depth.height());
    if (normal.width(), normal.height()) != (w, h) {
        return Err(Error::invalid(format!(
            "depth map {w}x{h} does not match normal map {}x{}",
            normal.width(),
            normal.height()
        )));
    }
    let cost_file = cost_path(dir, id);
    let cost = if prefix.is_empty() && cost_file.exists() {
        Some(read_pfm_gray(&cost_file)?)
    } else {
        None
    };
    let mut map = DepthNormalMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y);
            let [nx, ny, nz] = normal.get(x, y);
            let n = Vector3::new(nx, ny, nz);
            if d.is_finite() && d > 0.0 && n.norm() > 0.5 {
                let i = map.index(x, y);
                map.depths[i] = d;
                map.normals[i] = n;
                map.costs[i] = cost.as_ref().map_or(f64::INFINITY, |r| r.get(x, y));
                map.valid[i] = true;
            }
        }
    }
    Ok(map)
}
