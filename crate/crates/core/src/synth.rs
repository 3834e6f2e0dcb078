//! Analytic ground-truth scene generator: cameras on a ring around textured
//! or texture-less spheres and planes, emitting RGB, AoP and DoP channels
//! together with ground-truth depth and normal maps.
//!
//! The AoP channel is locked to the geometry: at zero noise, the stored AoP
//! of every hit pixel reduces to exactly zero mismatch against the stored
//! normal's image azimuth under the quarter-turn ambiguity, in both
//! reflection modes. Diffuse AoP is the azimuth modulo pi, which is exact in
//! f64; specular AoP adds a quarter turn, which generically is not, so the
//! generator nudges the stored normal by ulp-scale azimuthal rotations until
//! an exactly matching representable AoP exists.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use crate::costs::ambiguity_min_angle;
use crate::error::{Error, Result};
use crate::geometry::{image_azimuth, write_cameras, CameraView};
use crate::patchmatch::stream_rng;
use crate::polar_image::{write_frame, write_map, DepthNormalMap, PolarFrame, Raster, Raster3};

/// Directional light, world frame (z up).
const LIGHT: [f64; 3] = [0.35, 0.25, 0.9];
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
/// Checkerboard cell colors.
const CHECKER_LIGHT: [f64; 3] = [0.85, 0.8, 0.72];
const CHECKER_DARK: [f64; 3] = [0.2, 0.24, 0.3];
/// Color of texture-less band regions.
const BAND_COLOR: [f64; 3] = [0.55, 0.55, 0.55];
/// Azimuthal normal nudges tried before giving up on an exact specular AoP.
const MAX_NUDGES: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// A disk: all plane points within `extent` of `point`.
    Plane { point: [f64; 3], normal: [f64; 3], extent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// 3D checkerboard in world coordinates.
    Checkerboard { cell: f64 },
    /// Aperiodic cell noise: each world-space cell gets a hashed gray level.
    /// Unlike the checkerboard it never aliases under a wrong-depth warp, so
    /// mismatched correspondences decorrelate instead of accidentally lining
    /// up a period away.
    Noise { cell: f64 },
    /// Smooth sinusoidal shading of a fixed base color.
    Gradient,
    Constant { color: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reflection {
    Diffuse,
    Specular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub shape: Shape,
    pub texture: Texture,
    pub reflection: Reflection,
    /// Latitude half-width (radians) of an equator-centered band where the
    /// texture is replaced by a constant color. Spheres only.
    #[serde(default)]
    pub textureless_band: Option<f64>,
}

/// Full description of a synthetic capture: surfaces, polarization model,
/// noise, camera ring and image geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub surfaces: Vec<SurfaceSpec>,
    /// DoP at grazing incidence; DoP falls off as sin^2 of the zenith angle.
    pub dop_max: f64,
    /// Wrapped Gaussian AoP noise, radians.
    pub aop_noise: f64,
    /// Gaussian intensity noise on the 0..255 scale.
    pub intensity_noise: f64,
    pub cameras: usize,
    /// Camera distance from the origin.
    pub ring_radius: f64,
    /// Camera elevation above the horizontal plane, radians.
    pub ring_elevation: f64,
    /// Angular span of the camera placement, radians. Anything below a full
    /// turn is an open arc with cameras at both ends; a full turn closes the
    /// ring. Small spans give stereo-friendly baselines.
    pub ring_arc: f64,
    /// Alternating per-camera elevation offset, radians. Odd cameras sit at
    /// `ring_elevation + ring_weave`, even ones at `ring_elevation -
    /// ring_weave`, tilting epipolar lines away from the horizontal so that
    /// neighboring views constrain depth in two directions.
    pub ring_weave: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// A sphere with a texture-less latitude band, checkerboard caps and a
    /// six-camera ring: the standard ablation scene.
    fn default() -> Self {
        SceneSpec {
            surfaces: vec![SurfaceSpec {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                },
                texture: Texture::Noise { cell: 0.17 },
                reflection: Reflection::Diffuse,
                textureless_band: Some(14f64.to_radians()),
            }],
            dop_max: 0.8,
            aop_noise: 0.0,
            intensity_noise: 0.0,
            cameras: 6,
            ring_radius: 3.0,
            ring_elevation: 35f64.to_radians(),
            ring_arc: 40f64.to_radians(),
            ring_weave: 8f64.to_radians(),
            width: 96,
            height: 96,
            focal: 110.0,
            d_min: 2.0,
            d_max: 3.2,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() {
            return Err(Error::EmptyInput("scene has no surfaces"));
        }
        for s in &self.surfaces {
            match &s.shape {
                Shape::Sphere { radius, .. } if *radius <= 0.0 => {
                    return Err(Error::invalid("sphere radius must be positive"));
                }
                Shape::Plane { extent, normal, .. } => {
                    if *extent <= 0.0 {
                        return Err(Error::invalid("plane extent must be positive"));
                    }
                    let n = Vector3::from(*normal);
                    if n.norm() < 1e-12 {
                        return Err(Error::invalid("plane normal must be nonzero"));
                    }
                }
                _ => {}
            }
            match s.texture {
                Texture::Checkerboard { cell } | Texture::Noise { cell } if cell <= 0.0 => {
                    return Err(Error::invalid("texture cell must be positive"));
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.dop_max) {
            return Err(Error::invalid("dop_max must lie in [0, 1]"));
        }
        if self.aop_noise < 0.0 || self.intensity_noise < 0.0 {
            return Err(Error::invalid("noise magnitudes must be nonnegative"));
        }
        if self.cameras < 2 {
            return Err(Error::invalid("a scene needs at least two cameras"));
        }
        if self.ring_radius <= 0.0
            || self.ring_elevation.abs() + self.ring_weave.abs() > 80f64.to_radians()
        {
            return Err(Error::invalid("ring radius must be positive, elevation within 80 degrees"));
        }
        if !(self.ring_arc > 0.0 && self.ring_arc <= TAU + 1e-9) {
            return Err(Error::invalid("camera arc must lie in (0, 2*pi]"));
        }
        if self.width < 8 || self.height < 8 || self.focal <= 0.0 {
            return Err(Error::invalid("image must be at least 8x8 with positive focal length"));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::invalid("depth range must satisfy 0 < d_min < d_max"));
        }
        Ok(())
    }
}

/// Rendered dataset: parallel vectors of cameras, polarimetric frames and
/// ground-truth maps (validity = hit mask).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SceneSpec,
    pub views: Vec<CameraView>,
    pub frames: Vec<PolarFrame>,
    pub gt_maps: Vec<DepthNormalMap>,
}

/// Cameras spaced evenly on a ring of the given radius and elevation, all
/// looking at the origin, world z up, image y down.
pub fn ring_views(spec: &SceneSpec) -> Result<Vec<CameraView>> {
    let up = Vector3::new(0.0, 0.0, 1.0);
    let cx = (spec.width as f64 - 1.0) / 2.0;
    let cy = (spec.height as f64 - 1.0) / 2.0;
    let closed = spec.ring_arc >= TAU - 1e-9;
    (0..spec.cameras)
        .map(|k| {
            let theta = if closed {
                TAU * k as f64 / spec.cameras as f64
            } else {
                spec.ring_arc * k as f64 / (spec.cameras - 1).max(1) as f64
            };
            let elev = spec.ring_elevation + if k % 2 == 1 { spec.ring_weave } else { -spec.ring_weave };
            let (ce, se) = (elev.cos(), elev.sin());
            let center = spec.ring_radius * Vector3::new(ce * theta.cos(), ce * theta.sin(), se);
            let fwd = (-center).normalize();
            let x = fwd.cross(&up).normalize();
            let y = fwd.cross(&x);
            let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), fwd.transpose()]);
            CameraView::new(
                k as u32,
                spec.focal,
                spec.focal,
                cx,
                cy,
                spec.width,
                spec.height,
                r,
                -r * center,
            )
        })
        .collect()
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    surface: usize,
}

/// Nearest intersection along `origin + t * dir`; t is camera depth because
/// `dir` is the unnormalized world ray of a pixel (unit camera z component).
fn cast(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, point: Vector3<f64>, normal: Vector3<f64>, surface: usize| {
        if t > 1e-9 && best.as_ref().map_or(true, |b| t < b.t) {
            best = Some(Hit {
                t,
                point,
                normal,
                surface,
            });
        }
    };
    for (si, s) in spec.surfaces.iter().enumerate() {
        match &s.shape {
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let q = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * q;
                if disc < 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    let p = origin + t * dir;
                    consider(t, p, (p - c).normalize(), si);
                }
            }
            Shape::Plane { point, normal, extent } => {
                let n = Vector3::from(*normal).normalize();
                let p0 = Vector3::from(*point);
                let denom = dir.dot(&n);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = (p0 - origin).dot(&n) / denom;
                let p = origin + t * dir;
                if (p - p0).norm() <= *extent {
                    consider(t, p, n, si);
                }
            }
        }
    }
    best
}

/// Base color of a surface at a world point, before shading.
fn texture_color(surface: &SurfaceSpec, point: &Vector3<f64>) -> [f64; 3] {
    if let (Some(half), Shape::Sphere { center, radius }) =
        (surface.textureless_band, &surface.shape)
    {
        let z = (point.z - center[2]) / radius;
        if z.clamp(-1.0, 1.0).asin().abs() <= half {
            return BAND_COLOR;
        }
    }
    match &surface.texture {
        Texture::Checkerboard { cell } => {
            let parity = (point.x / cell).floor() + (point.y / cell).floor()
                + (point.z / cell).floor();
            if (parity as i64).rem_euclid(2) == 0 {
                CHECKER_LIGHT
            } else {
                CHECKER_DARK
            }
        }
        Texture::Noise { cell } => {
            let h = cell_hash(
                (point.x / cell).floor() as i64,
                (point.y / cell).floor() as i64,
                (point.z / cell).floor() as i64,
            );
            let s = 0.15 + 0.8 * (h as f64 / u64::MAX as f64);
            [s, s, s]
        }
        Texture::Gradient => {
            let s = 0.55 + 0.45 * (4.0 * point.x + 7.0 * point.y + 3.0 * point.z).sin();
            [0.8 * s, 0.75 * s, 0.7 * s]
        }
        Texture::Constant { color } => *color,
    }
}

/// SplitMix64-style integer hash of a 3D cell index.
fn cell_hash(ix: i64, iy: i64, iz: i64) -> u64 {
    let mut z = (ix as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((iy as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((iz as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// AoP of a diffuse-dominant surface: azimuth modulo pi. Exact: for
/// azimuth in [0, pi) the value passes through unchanged, and for azimuth in
/// [pi, 2*pi) the subtraction of pi is exact by Sterbenz's lemma, so the
/// mismatch enumeration later recovers exactly 0 or exactly pi.
fn diffuse_aop(alpha: f64) -> f64 {
    let phi = alpha.rem_euclid(PI);
    if phi >= PI {
        0.0
    } else {
        phi
    }
}

/// A representable AoP a quarter turn from `alpha` whose ambiguity-reduced
/// mismatch is exactly zero, if one exists: the enumeration compares
/// alpha - phi against fixed shift constants, so phi must make the floating
/// subtraction land exactly on one of them. Tries the natural branch and its
/// ulp neighbors.
fn exact_specular_aop(alpha: f64) -> Option<f64> {
    for shift in [FRAC_PI_2, -FRAC_PI_2, PI + FRAC_PI_2] {
        let base = alpha - shift;
        if !(-1e-9..PI + 1e-9).contains(&base) {
            continue;
        }
        let candidates = [
            base,
            base.next_up(),
            base.next_down(),
            base.next_up().next_up(),
            base.next_down().next_down(),
        ];
        for phi in candidates {
            if (0.0..PI).contains(&phi) && ambiguity_min_angle(alpha, phi) == 0.0 {
                return Some(phi);
            }
        }
    }
    None
}

/// Rotation of a camera-frame vector about the optical axis by `angle`.
fn rotate_about_optical_axis(n: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    Vector3::new(c * n.x - s * n.y, s * n.x + c * n.y, n.z)
}

fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn render_view(spec: &SceneSpec, view: &CameraView) -> Result<(PolarFrame, DepthNormalMap)> {
    let (w, h) = (spec.width, spec.height);
    let mut rgb = Raster3::new(w, h, [0.0; 3]);
    let mut aop = Raster::new(w, h, 0.0);
    let mut dop = Raster::new(w, h, 0.0);
    let mut map = DepthNormalMap::new(w, h);
    let light = Vector3::from(LIGHT).normalize();
    let origin = view.center();

    for y in 0..h {
        for x in 0..w {
            let ray_cam = view.ray(x as f64, y as f64);
            let dir = view.direction_to_world(&ray_cam);
            let Some(hit) = cast(spec, &origin, &dir) else {
                continue;
            };
            let surface = &spec.surfaces[hit.surface];

            // Camera-facing normal in the camera frame; this is what the
            // map stores and what the AoP must agree with.
            let mut n_cam = view.direction_to_camera(&hit.normal).normalize();
            if n_cam.dot(&ray_cam) > 0.0 {
                n_cam = -n_cam;
            }

            // The azimuth is recomputed from the stored normal through the
            // same world round trip a consumer of the map would use, so the
            // exactness below survives it.
            let azimuth_of = |n: &Vector3<f64>| -> Option<f64> {
                image_azimuth(view, &view.direction_to_world(n)).ok()
            };

            let (n_store, phi_clean) = match surface.reflection {
                Reflection::Diffuse => {
                    let phi = azimuth_of(&n_cam).map_or(0.0, diffuse_aop);
                    (n_cam, phi)
                }
                Reflection::Specular => {
                    // Azimuthal ulp nudges shift the representable lattice
                    // until an exactly matching quarter-turn AoP exists.
                    let mut found = None;
                    'nudge: for k in 0..MAX_NUDGES {
                        let step = ((k + 1) / 2) as f64 * 1e-15;
                        let angle = if k % 2 == 1 { step } else { -step };
                        let cand = rotate_about_optical_axis(&n_cam, angle).normalize();
                        match azimuth_of(&cand) {
                            None => {
                                found = Some((cand, 0.0));
                                break 'nudge;
                            }
                            Some(alpha) => {
                                if let Some(phi) = exact_specular_aop(alpha) {
                                    found = Some((cand, phi));
                                    break 'nudge;
                                }
                            }
                        }
                    }
                    // Give up exactness rather than fail the render; the
                    // convention tests will catch this if it ever happens.
                    found.unwrap_or_else(|| {
                        let phi = azimuth_of(&n_cam)
                            .map_or(0.0, |a| (a + FRAC_PI_2).rem_euclid(PI));
                        (n_cam, phi.min(PI - f64::EPSILON))
                    })
                }
            };

            let cosz = (-n_store.dot(&ray_cam.normalize())).clamp(-1.0, 1.0);
            let rho = (spec.dop_max * (1.0 - cosz * cosz)).clamp(0.0, 1.0);

            let color = texture_color(surface, &hit.point);
            let shade = AMBIENT + DIFFUSE * hit.normal.dot(&light).abs();
            let mut pixel = [
                color[0] * shade * 255.0,
                color[1] * shade * 255.0,
                color[2] * shade * 255.0,
            ];

            let mut phi = phi_clean;
            if spec.intensity_noise > 0.0 || spec.aop_noise > 0.0 {
                let idx = map.index(x, y);
                let mut rng = stream_rng(spec.seed, view.id, idx, 0);
                if spec.intensity_noise > 0.0 {
                    let g = gaussian(&mut rng) * spec.intensity_noise;
                    for c in pixel.iter_mut() {
                        *c = (*c + g).clamp(0.0, 255.0);
                    }
                }
                if spec.aop_noise > 0.0 {
                    phi = (phi + gaussian(&mut rng) * spec.aop_noise).rem_euclid(PI);
                    if phi >= PI {
                        phi = 0.0;
                    }
                }
            }

            rgb.set(x, y, pixel);
            aop.set(x, y, phi);
            dop.set(x, y, rho);
            let idx = map.index(x, y);
            map.depths[idx] = hit.t;
            map.normals[idx] = n_store;
            map.costs[idx] = 0.0;
            map.valid[idx] = true;
        }
    }
    Ok((PolarFrame::new(rgb, aop, dop)?, map))
}

/// Renders every view of the scene. Deterministic under the scene seed.
pub fn render(spec: &SceneSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let views = ring_views(spec)?;
    let rendered: Vec<(PolarFrame, DepthNormalMap)> = views
        .par_iter()
        .map(|v| render_view(spec, v))
        .collect::<Result<_>>()?;
    let (frames, gt_maps) = rendered.into_iter().unzip();
    Ok(SynthDataset {
        spec: spec.clone(),
        views,
        frames,
        gt_maps,
    })
}

/// Area-weighted uniform samples of the scene surfaces as (point, outward
/// normal) pairs, for accuracy/completeness metrics.
pub fn surface_samples(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::EmptyInput("sample count must be positive"));
    }
    let areas: Vec<f64> = spec
        .surfaces
        .iter()
        .map(|s| match &s.shape {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Plane { extent, .. } => PI * extent * extent,
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut rng = stream_rng(seed, u32::MAX, 0, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random::<f64>() * total;
        let mut si = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a || i == areas.len() - 1 {
                si = i;
                break;
            }
            pick -= a;
        }
        match &spec.surfaces[si].shape {
            Shape::Sphere { center, radius } => {
                let z = 2.0 * rng.random::<f64>() - 1.0;
                let phi = TAU * rng.random::<f64>();
                let s = (1.0 - z * z).max(0.0).sqrt();
                let n = Vector3::new(s * phi.cos(), s * phi.sin(), z);
                out.push((Vector3::from(*center) + *radius * n, n));
            }
            Shape::Plane { point, normal, extent } => {
                let n = Vector3::from(*normal).normalize();
                let any = if n.x.abs() < 0.9 {
                    Vector3::new(1.0, 0.0, 0.0)
                } else {
                    Vector3::new(0.0, 1.0, 0.0)
                };
                let u = n.cross(&any).normalize();
                let v = n.cross(&u);
                let r = extent * rng.random::<f64>().sqrt();
                let t = TAU * rng.random::<f64>();
                out.push((Vector3::from(*point) + r * (t.cos() * u + t.sin() * v), n));
            }
        }
    }
    Ok(out)
}

/// Diagonal of the axis-aligned bounding box of all surfaces.
pub fn scene_diameter(spec: &SceneSpec) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vector3<f64>, r: f64| {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - r);
            hi[a] = hi[a].max(p[a] + r);
        }
    };
    for s in &spec.surfaces {
        match &s.shape {
            Shape::Sphere { center, radius } => grow(Vector3::from(*center), *radius),
            Shape::Plane { point, extent, .. } => grow(Vector3::from(*point), *extent),
        }
    }
    (hi - lo).norm()
}

/// Writes cameras, per-view frames and ground-truth maps (prefix `gt_`) into
/// `dir`. The scene config itself is written by callers that own a config
/// format.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cameras(&dir.join("cameras.txt"), &ds.views)?;
    for ((view, frame), map) in ds.views.iter().zip(&ds.frames).zip(&ds.gt_maps) {
        write_frame(dir, view.id, frame)?;
        write_map(dir, view.id, "gt_", map, false)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, FusionConfig};

    fn plane_scene() -> SceneSpec {
        SceneSpec {
            surfaces: vec![SurfaceSpec {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    extent: 4.0,
                },
                texture: Texture::Checkerboard { cell: 0.3 },
                reflection: Reflection::Diffuse,
                textureless_band: None,
            }],
            cameras: 2,
            ring_elevation: 55f64.to_radians(),
            ..SceneSpec::default()
        }
    }

    #[test]
    fn default_scene_is_valid_and_deterministic() {
        let spec = SceneSpec::default();
        spec.validate().unwrap();
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(a.frames.len(), 6);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.gray.data(), fb.gray.data());
            assert_eq!(fa.aop.data(), fb.aop.data());
            assert_eq!(fa.dop.data(), fb.dop.data());
        }
        assert_eq!(a.gt_maps, b.gt_maps);
    }

    #[test]
    fn sphere_is_hit_in_the_image_center_with_plausible_depth() {
        let ds = render(&SceneSpec::default()).unwrap();
        for (view, map) in ds.views.iter().zip(&ds.gt_maps) {
            let (cx, cy) = (view.width / 2, view.height / 2);
            assert!(map.is_valid(cx, cy));
            let d = map.depths[map.index(cx, cy)];
            // Camera distance 3, unit sphere: front face at depth about 2.
            assert!((1.9..2.2).contains(&d), "center depth {d}");
            let edge = map.is_valid(1, 1);
            assert!(!edge, "image corner should miss the sphere");
        }
    }

    #[test]
    fn dop_rises_toward_the_silhouette() {
        let ds = render(&SceneSpec::default()).unwrap();
        let map = &ds.gt_maps[0];
        let frame = &ds.frames[0];
        let (cx, cy) = (48, 48);
        let center_dop = frame.dop.get(cx, cy);
        assert!(center_dop < 0.1, "zenith is near zero at the center: {center_dop}");
        // Walk right until the last hit pixel: zenith approaches 90 degrees.
        let mut edge_dop = 0.0;
        for x in cx..96 {
            if map.is_valid(x, cy) {
                edge_dop = frame.dop.get(x, cy);
            }
        }
        assert!(edge_dop > 0.6, "DoP near the silhouette was {edge_dop}");
    }

    #[test]
    fn fronto_plane_has_constant_depth_and_zero_dop() {
        // A single camera straight above a z-plane, looking down.
        let mut spec = plane_scene();
        spec.cameras = 2;
        spec.ring_elevation = 79f64.to_radians();
        let ds = render(&spec).unwrap();
        // Not fronto-parallel at 79 degrees, but the normal is constant.
        let map = &ds.gt_maps[0];
        let n0 = map.normals[map.index(48, 48)];
        for y in (8..88).step_by(8) {
            for x in (8..88).step_by(8) {
                if map.is_valid(x, y) {
                    assert!((map.normals[map.index(x, y)] - n0).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aop_matches_azimuth_exactly_in_both_modes() {
        for reflection in [Reflection::Diffuse, Reflection::Specular] {
            let mut spec = SceneSpec::default();
            spec.surfaces[0].reflection = reflection;
            spec.cameras = 3;
            let ds = render(&spec).unwrap();
            let mut checked = 0usize;
            for (view, (frame, map)) in ds.views.iter().zip(ds.frames.iter().zip(&ds.gt_maps)) {
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        if !map.is_valid(x, y) {
                            continue;
                        }
                        let n = map.normals[map.index(x, y)];
                        let Ok(alpha) = image_azimuth(view, &view.direction_to_world(&n)) else {
                            continue;
                        };
                        let eta = ambiguity_min_angle(alpha, frame.aop.get(x, y));
                        assert_eq!(
                            eta, 0.0,
                            "nonzero mismatch {eta:e} at view {} pixel ({x},{y}) in {reflection:?}",
                            view.id
                        );
                        checked += 1;
                    }
                }
            }
            assert!(checked > 10_000, "only {checked} pixels checked");
        }
    }

    #[test]
    fn gt_backprojections_lie_on_the_surface() {
        let spec = SceneSpec::default();
        let ds = render(&spec).unwrap();
        for (view, map) in ds.views.iter().zip(&ds.gt_maps) {
            for y in (0..96).step_by(7) {
                for x in (0..96).step_by(7) {
                    if !map.is_valid(x, y) {
                        continue;
                    }
                    let d = map.depths[map.index(x, y)];
                    let p = view.camera_to_world(&view.backproject(x as f64, y as f64, d));
                    assert!(
                        (p.norm() - 1.0).abs() < 1e-6,
                        "GT point {:?} is {:.2e} off the unit sphere",
                        p,
                        (p.norm() - 1.0).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn gt_maps_fuse_densely() {
        let ds = render(&SceneSpec::default()).unwrap();
        let cloud = fuse(&ds.views, &ds.frames, &ds.gt_maps, &FusionConfig::default()).unwrap();
        let visible: usize = ds.gt_maps.iter().map(|m| m.valid_count()).sum();
        // Greedy consumption with rounded landings orphans some pixels in
        // later views, but well over half must fuse, and the cloud must
        // cover every surface region seen by at least two cameras.
        let consumed: usize = cloud.points.iter().map(|p| p.support as usize).sum();
        assert!(
            consumed * 2 > visible,
            "{consumed} consumed of {visible} valid pixels across {} points",
            cloud.len()
        );
        for p in &cloud.points {
            assert!(
                (p.position.norm() - 1.0).abs() < 0.02,
                "fused point off the sphere: {:?}",
                p.position
            );
        }
        let spec = SceneSpec::default();
        let centers: Vec<_> = ds.views.iter().map(|v| v.center()).collect();
        let samples = surface_samples(&spec, 400, 3).unwrap();
        let tol = 0.02 * scene_diameter(&spec);
        for (p, n) in samples {
            // Oblique-visibility only: at grazing incidence one pixel's
            // surface footprint already exceeds the coverage tolerance.
            let seen = centers
                .iter()
                .filter(|c| n.dot(&(*c - p)) > 0.4 * (*c - p).norm())
                .count();
            if seen < 2 {
                continue;
            }
            let nearest = cloud
                .points
                .iter()
                .map(|q| (q.position - p).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest <= tol,
                "visible sample {p:?} is {nearest:.3} from the cloud (tol {tol:.3})"
            );
        }
    }

    #[test]
    fn noise_fields_are_applied_and_seeded() {
        let mut spec = SceneSpec::default();
        spec.aop_noise = 0.05;
        spec.intensity_noise = 3.0;
        spec.cameras = 2;
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(a.frames[0].aop.data(), b.frames[0].aop.data());
        let clean = {
            let mut s = spec.clone();
            s.aop_noise = 0.0;
            s.intensity_noise = 0.0;
            render(&s).unwrap()
        };
        let noisy = a.frames[0].aop.data();
        let quiet = clean.frames[0].aop.data();
        assert!(noisy.iter().zip(quiet).any(|(n, q)| n != q));
        for v in a.frames[0].dop.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn surface_samples_cover_the_sphere() {
        let spec = SceneSpec::default();
        let samples = surface_samples(&spec, 2000, 1).unwrap();
        assert_eq!(samples.len(), 2000);
        for (p, n) in &samples {
            assert!((p.norm() - 1.0).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
        // Both hemispheres represented.
        let above = samples.iter().filter(|(p, _)| p.z > 0.0).count();
        assert!(above > 600 && above < 1400);
        assert!((scene_diameter(&spec) - (2.0f64 * 2.0 * 2.0 + 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let mut spec = SceneSpec::default();
        spec.cameras = 2;
        spec.width = 32;
        spec.height = 32;
        let ds = render(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let views = crate::geometry::read_cameras(&dir.path().join("cameras.txt")).unwrap();
        assert_eq!(views.len(), 2);
        let frame = crate::polar_image::read_frame(dir.path(), 0).unwrap();
        assert_eq!(frame.width(), 32);
        let map = crate::polar_image::read_map(dir.path(), 0, "gt_").unwrap();
        assert_eq!(map.width, 32);
        // PFM stores f32: depths agree to f32 precision.
        let orig = &ds.gt_maps[0];
        for (a, b) in map.depths.iter().zip(&orig.depths) {
            assert!((a - b).abs() <= (*b as f32).abs() as f64 * 1e-6 + 1e-6);
        }
    }
}
