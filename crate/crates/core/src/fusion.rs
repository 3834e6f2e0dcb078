//! Reliability filtering of estimated maps and their fusion into an
//! oriented, colored point cloud, plus PLY export.
//!
//! Filtering keeps a pixel when it has enough polarization signal (DoP) or
//! enough texture (unweighted window variance); fusion back-projects each
//! surviving pixel, checks depth / normal / reprojection agreement in the
//! other views and emits one point per consistent group, consuming the
//! contributing pixels so nothing is emitted twice.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::costs::reprojection_error;
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::polar_image::{DepthNormalMap, PolarFrame, Raster};

/// Thresholds of the reliability filter and the fusion consistency checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Minimum DoP for a pixel to count as polarization-reliable.
    pub rho_t: f64,
    /// Minimum grayscale window variance to count as textured.
    pub lambda_t: f64,
    /// Window half-size for the variance; the window is (2r+1) x (2r+1).
    pub window_radius: usize,
    /// Require both cues instead of either one.
    pub conjunctive: bool,
    /// Maximum relative depth disagreement between views.
    pub eps_rel: f64,
    /// Maximum normal disagreement between views, radians.
    pub theta_fuse: f64,
    /// Maximum forward-backward reprojection error, pixels.
    pub reproj_tol: f64,
    /// Minimum views (seed included) that must agree on a point.
    pub n_min: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            rho_t: 0.05,
            lambda_t: 1.0,
            window_radius: 5,
            conjunctive: false,
            eps_rel: 0.01,
            theta_fuse: 30f64.to_radians(),
            reproj_tol: 2.0,
            n_min: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_t > 0.0 && self.lambda_t > 0.0) {
            return Err(Error::invalid("filter thresholds must be positive"));
        }
        if !(self.eps_rel > 0.0 && self.theta_fuse > 0.0 && self.reproj_tol > 0.0) {
            return Err(Error::invalid("fusion tolerances must be positive"));
        }
        if self.n_min < 1 {
            return Err(Error::invalid("n_min must be at least 1"));
        }
        Ok(())
    }
}

/// Unweighted grayscale variance over the window at (x, y), clipped to the
/// image.
fn window_variance(gray: &Raster, x: usize, y: usize, radius: usize) -> f64 {
    let r = radius as i32;
    let (w, h) = (gray.width() as i32, gray.height() as i32);
    let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let px = x as i32 + dx;
            let py = y as i32 + dy;
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let v = gray.get(px as usize, py as usize);
            n += 1;
            sum += v;
            sum2 += v * v;
        }
    }
    let mean = sum / n as f64;
    (sum2 / n as f64 - mean * mean).max(0.0)
}

/// Which pixels of `map` survive the reliability filter: a pixel is kept when
/// its DoP reaches `rho_t` or its window variance reaches `lambda_t` (both,
/// in conjunctive mode). Already-invalid pixels stay out.
pub fn reliability_filter(frame: &PolarFrame, map: &DepthNormalMap, cfg: &FusionConfig) -> Vec<bool> {
    let mut mask = vec![false; map.width * map.height];
    for y in 0..map.height {
        for x in 0..map.width {
            if !map.is_valid(x, y) {
                continue;
            }
            let polarized = frame.dop.get(x, y) >= cfg.rho_t;
            let textured = window_variance(&frame.gray, x, y, cfg.window_radius) >= cfg.lambda_t;
            mask[map.index(x, y)] = if cfg.conjunctive {
                polarized && textured
            } else {
                polarized || textured
            };
        }
    }
    mask
}

/// Invalidates every pixel the mask rejects.
pub fn apply_mask(map: &mut DepthNormalMap, mask: &[bool]) {
    assert_eq!(mask.len(), map.valid.len());
    for (v, keep) in map.valid.iter_mut().zip(mask) {
        *v = *v && *keep;
    }
}

/// One fused surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    /// Number of views that agreed on this point, seed included.
    pub support: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<FusedPoint>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fuses filtered maps into a point cloud. Seeds are visited in view-id
/// order, pixels row-major; each seed is projected into every other view and
/// a view supports it when the depth stored at the landing pixel agrees
/// within `eps_rel` (relative), the normals agree within `theta_fuse` and the
/// forward-backward reprojection stays within `reproj_tol`. Groups reaching
/// `n_min` views emit one point (mean position, normalized mean normal, seed
/// color) and consume their pixels, so no pixel contributes twice.
pub fn fuse(
    views: &[CameraView],
    frames: &[PolarFrame],
    maps: &[DepthNormalMap],
    cfg: &FusionConfig,
) -> Result<OrientedPointCloud> {
    cfg.validate()?;
    if views.is_empty() || views.len() != frames.len() || views.len() != maps.len() {
        return Err(Error::invalid(format!(
            "{} views, {} frames, {} maps: counts must match and be nonzero",
            views.len(),
            frames.len(),
            maps.len()
        )));
    }
    for (v, m) in views.iter().zip(maps) {
        if v.width != m.width || v.height != m.height {
            return Err(Error::invalid(format!("view {} and its map disagree in size", v.id)));
        }
    }

    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].id);

    let mut consumed: Vec<Vec<bool>> = maps.iter().map(|m| vec![false; m.valid.len()]).collect();
    let mut cloud = OrientedPointCloud::default();
    let cos_fuse = cfg.theta_fuse.cos();

    for &i in &order {
        let rv = &views[i];
        let map = &maps[i];
        for y in 0..map.height {
            for x in 0..map.width {
                let idx = map.index(x, y);
                if !map.valid[idx] || consumed[i][idx] {
                    continue;
                }
                let depth = map.depths[idx];
                let world = rv.camera_to_world(&rv.backproject(x as f64, y as f64, depth));
                let n_world = rv.direction_to_world(&map.normals[idx]);

                let mut members: Vec<(usize, usize)> = vec![(i, idx)];
                let mut positions = vec![world];
                let mut normals = vec![n_world];
                for &j in &order {
                    if j == i {
                        continue;
                    }
                    let sv = &views[j];
                    let smap = &maps[j];
                    let Ok((us, vs, d_expected)) = sv.project(&world) else {
                        continue;
                    };
                    let lx = us.round();
                    let ly = vs.round();
                    if lx < 0.0
                        || ly < 0.0
                        || lx > (sv.width - 1) as f64
                        || ly > (sv.height - 1) as f64
                    {
                        continue;
                    }
                    let (lx, ly) = (lx as usize, ly as usize);
                    let lidx = smap.index(lx, ly);
                    if !smap.valid[lidx] || consumed[j][lidx] {
                        continue;
                    }
                    let d_src = smap.depths[lidx];
                    if (d_src - d_expected).abs() / d_expected > cfg.eps_rel {
                        continue;
                    }
                    let n_src = sv.direction_to_world(&smap.normals[lidx]);
                    if n_world.dot(&n_src) < cos_fuse {
                        continue;
                    }
                    let psi = reprojection_error(rv, sv, smap, x, y, depth, f64::INFINITY);
                    if psi > cfg.reproj_tol {
                        continue;
                    }
                    members.push((j, lidx));
                    positions.push(sv.camera_to_world(&sv.backproject(lx as f64, ly as f64, d_src)));
                    normals.push(n_src);
                }

                if members.len() < cfg.n_min {
                    continue;
                }
                let mean_pos = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
                let mean_normal = normals.iter().sum::<Vector3<f64>>();
                let normal = if mean_normal.norm() > 1e-9 {
                    mean_normal.normalize()
                } else {
                    n_world
                };
                let rgb = frames[i].rgb.get(x, y);
                let color = [
                    rgb[0].round().clamp(0.0, 255.0) as u8,
                    rgb[1].round().clamp(0.0, 255.0) as u8,
                    rgb[2].round().clamp(0.0, 255.0) as u8,
                ];
                cloud.points.push(FusedPoint {
                    position: mean_pos,
                    normal,
                    color,
                    support: members.len() as u32,
                });
                for (j, lidx) in members {
                    consumed[j][lidx] = true;
                }
            }
        }
    }
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    BinaryLittleEndian,
    Ascii,
}

const PLY_PROPERTIES: [(&str, &str); 9] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("float", "nx"),
    ("float", "ny"),
    ("float", "nz"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
];

/// Writes the cloud as a PLY file with x y z nx ny nz red green blue.
/// Coordinates are stored as f32; the support count is not stored.
pub fn write_ply(path: &Path, cloud: &OrientedPointCloud, format: PlyFormat) -> Result<()> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::Ascii => "ascii",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\n",
        cloud.points.len()
    )
    .expect("writing to memory");
    for (ty, name) in PLY_PROPERTIES {
        writeln!(out, "property {ty} {name}").expect("writing to memory");
    }
    writeln!(out, "end_header").expect("writing to memory");
    for p in &cloud.points {
        let fields = [
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            p.normal.x as f32,
            p.normal.y as f32,
            p.normal.z as f32,
        ];
        match format {
            PlyFormat::BinaryLittleEndian => {
                for f in fields {
                    out.extend_from_slice(&f.to_le_bytes());
                }
                out.extend_from_slice(&p.color);
            }
            PlyFormat::Ascii => {
                writeln!(
                    out,
                    "{} {} {} {} {} {} {} {} {}",
                    fields[0],
                    fields[1],
                    fields[2],
                    fields[3],
                    fields[4],
                    fields[5],
                    p.color[0],
                    p.color[1],
                    p.color[2]
                )
                .expect("writing to memory");
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn ply_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a PLY written by [`write_ply`] (either format). Support counts are
/// not stored in PLY, so every point comes back with support 0.
pub fn read_ply(path: &Path) -> Result<OrientedPointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let next_line = |pos: &mut usize, line_no: usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(ply_err(path, line_no, "unexpected end of header"));
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos]).trim_end().to_string();
        *pos += 1;
        Ok(line)
    };

    line_no += 1;
    if next_line(&mut pos, line_no)? != "ply" {
        return Err(ply_err(path, 1, "not a PLY file"));
    }
    line_no += 1;
    let format = match next_line(&mut pos, line_no)?.as_str() {
        "format binary_little_endian 1.0" => PlyFormat::BinaryLittleEndian,
        "format ascii 1.0" => PlyFormat::Ascii,
        other => return Err(ply_err(path, 2, format!("unsupported format line: {other}"))),
    };
    let mut count: Option<usize> = None;
    let mut properties = Vec::new();
    loop {
        line_no += 1;
        let line = next_line(&mut pos, line_no)?;
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| ply_err(path, line_no, "bad vertex count"))?,
            );
        } else if let Some(rest) = line.strip_prefix("property ") {
            let mut it = rest.split_whitespace();
            let ty = it.next().unwrap_or("").to_string();
            let name = it.next().unwrap_or("").to_string();
            properties.push((ty, name));
        } else if line.starts_with("comment") || line.starts_with("element") {
            // comments and foreign elements are skipped
        } else {
            return Err(ply_err(path, line_no, format!("unrecognized header line: {line}")));
        }
    }
    let count = count.ok_or_else(|| ply_err(path, line_no, "missing element vertex"))?;
    let expected: Vec<(String, String)> = PLY_PROPERTIES
        .iter()
        .map(|(t, n)| (t.to_string(), n.to_string()))
        .collect();
    if properties != expected {
        return Err(ply_err(path, line_no, "unexpected vertex property layout"));
    }

    let mut cloud = OrientedPointCloud::default();
    match format {
        PlyFormat::BinaryLittleEndian => {
            let need = count * 27;
            if bytes.len() - pos < need {
                return Err(ply_err(path, line_no, "truncated vertex data"));
            }
            for k in 0..count {
                let base = pos + k * 27;
                let mut f = [0f32; 6];
                for (fi, value) in f.iter_mut().enumerate() {
                    let o = base + fi * 4;
                    *value = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
                }
                let color = [bytes[base + 24], bytes[base + 25], bytes[base + 26]];
                cloud.points.push(FusedPoint {
                    position: Vector3::new(f[0] as f64, f[1] as f64, f[2] as f64),
                    normal: Vector3::new(f[3] as f64, f[4] as f64, f[5] as f64),
                    color,
                    support: 0,
                });
            }
        }
        PlyFormat::Ascii => {
            let body = String::from_utf8_lossy(&bytes[pos..]);
            for (k, line) in body.lines().take(count).enumerate() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 9 {
                    return Err(ply_err(path, line_no + k + 1, "expected 9 fields"));
                }
                let parse_f = |s: &str| -> Result<f64> {
                    s.parse::<f32>()
                        .map(|v| v as f64)
                        .map_err(|_| ply_err(path, line_no + k + 1, format!("bad float {s}")))
                };
                let parse_u = |s: &str| -> Result<u8> {
                    s.parse::<u8>()
                        .map_err(|_| ply_err(path, line_no + k + 1, format!("bad byte {s}")))
                };
                cloud.points.push(FusedPoint {
                    position: Vector3::new(parse_f(fields[0])?, parse_f(fields[1])?, parse_f(fields[2])?),
                    normal: Vector3::new(parse_f(fields[3])?, parse_f(fields[4])?, parse_f(fields[5])?),
                    color: [parse_u(fields[6])?, parse_u(fields[7])?, parse_u(fields[8])?],
                    support: 0,
                });
            }
            if cloud.points.len() != count {
                return Err(ply_err(path, line_no, "truncated vertex data"));
            }
        }
    }
    Ok(cloud)
}
