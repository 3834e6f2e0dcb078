//! Per-pixel matching costs for plane hypotheses: photometric (weighted NCC),
//! geometric (forward-backward reprojection), polarimetric (AoP against the
//! normal's image azimuth, DoP-weighted) and a depth-normal coupling term,
//! combined as
//!
//!   total = photometric + tau_geo * geometric + tau_pol * polarimetric
//!           + tau_dep * depth_normal
//!
//! with the geometric term gated off in the first estimation phase, before
//! source depth maps exist.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_homography, image_azimuth, plane_homography, CameraView, Hypothesis,
};
use crate::polar_image::{DepthNormalMap, PolarFrame};

/// Backprojected neighbor triples with a cross product shorter than this are
/// treated as collinear.
const COLLINEAR_TOL: f64 = 1e-12;

/// Shape of the penalty applied to the ambiguity-reduced AoP mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyCurve {
    /// sin(2 eta): flat near zero, saturating at the worst mismatch.
    Sine,
    /// 4 eta / pi: proportional to the mismatch angle.
    Linear,
}

/// Estimation phases: the geometric term needs source depth maps, which only
/// exist after every view has completed a first pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    #[inline]
    pub fn geometric_active(self) -> bool {
        matches!(self, Phase::Two)
    }
}

/// Weights and knobs of the total matching cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub tau_geo: f64,
    pub tau_pol: f64,
    pub tau_dep: f64,
    /// Reprojection error cap, pixels.
    pub psi_max: f64,
    /// DoP saturation point of the reliability weight.
    pub rho0: f64,
    /// Matching window half-size; the window is (2r+1) x (2r+1).
    pub window_radius: usize,
    /// Bilateral range sigma on [0, 255] intensities.
    pub sigma_color: f64,
    /// Use bilateral window weights; uniform weights otherwise.
    pub bilateral: bool,
    /// Self-covariance floor below which a patch counts as texture-less.
    pub eps_var: f64,
    pub penalty: PenaltyCurve,
    /// Score zero-weighted terms instead of skipping them. The total is
    /// unchanged (the weight is still zero); this exists to validate that the
    /// skip path reduces exactly to a two-term matcher.
    pub evaluate_zero_weights: bool,
}

impl CostConfig {
    /// Defaults tuned for synthetic data.
    pub fn synthetic() -> Self {
        CostConfig {
            tau_geo: 0.4,
            tau_pol: 4.0,
            tau_dep: 0.4,
            psi_max: 3.0,
            rho0: 0.005,
            window_radius: 5,
            sigma_color: 0.2 * 255.0,
            bilateral: true,
            eps_var: 1e-6,
            penalty: PenaltyCurve::Sine,
            evaluate_zero_weights: false,
        }
    }

    /// Defaults tuned for real captures: stronger polarization weight, DoP
    /// reliability saturating only at full polarization.
    pub fn real() -> Self {
        CostConfig {
            tau_pol: 10.0,
            rho0: 1.0,
            ..CostConfig::synthetic()
        }
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig::synthetic()
    }
}

/// The four cost terms of one hypothesis at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub photometric: f64,
    pub geometric: f64,
    pub polarimetric: f64,
    pub depth_normal: f64,
}

/// Weighted combination of the terms; the geometric weight applies only in
/// phase two.
#[inline]
pub fn total_cost(terms: &CostTerms, cfg: &CostConfig, phase: Phase) -> f64 {
    let mut c = terms.photometric;
    if phase.geometric_active() {
        c += cfg.tau_geo * terms.geometric;
    }
    c += cfg.tau_pol * terms.polarimetric;
    c += cfg.tau_dep * terms.depth_normal;
    c
}

// ---------------------------------------------------------------------------
// Polarimetric primitives

/// Minimum angular distance between an image azimuth `alpha` in [0, 2*pi) and
/// an AoP `phi` in [0, pi) modulo the quarter-turn ambiguity: the pi
/// ambiguity of the AoP itself plus the diffuse/specular pi/2 offset.
/// Equals the distance from alpha - phi to the nearest multiple of pi/2 and
/// lies in [0, pi/4].
#[inline]
pub fn ambiguity_min_angle(alpha: f64, phi: f64) -> f64 {
    let d = alpha - phi;
    // alpha - phi lies in (-pi, 2*pi); these seven shifts cover every
    // reachable multiple of pi/2.
    let mut best = (d + PI).abs();
    for s in [
        -(d + FRAC_PI_2).abs(),
        -d.abs(),
        -(d - FRAC_PI_2).abs(),
        -(d - PI).abs(),
        -(d - (PI + FRAC_PI_2)).abs(),
        -(d - TAU).abs(),
    ] {
        if -s < best {
            best = -s;
        }
    }
    best
}

/// Penalty of an ambiguity-reduced mismatch angle `eta` in [0, pi/4].
pub fn penalty(eta: f64, curve: PenaltyCurve) -> Result<f64> {
    if !(0.0..=FRAC_PI_4 + 1e-12).contains(&eta) {
        return Err(Error::invalid(format!("mismatch angle {eta} outside [0, pi/4]")));
    }
    Ok(penalty_value(eta, curve))
}

#[inline]
fn penalty_value(eta: f64, curve: PenaltyCurve) -> f64 {
    match curve {
        PenaltyCurve::Sine => (2.0 * eta).sin(),
        PenaltyCurve::Linear => 4.0 * eta / PI,
    }
}

/// Reliability of a polarization sample as a function of its DoP:
/// 1 - ((min(rho, rho0) - rho0) / rho0)^2, ramping from 0 at rho = 0 to 1 at
/// rho >= rho0.
#[inline]
pub fn dop_weight(rho: f64, rho0: f64) -> f64 {
    debug_assert!(rho0 > 0.0);
    let r = (rho.min(rho0) - rho0) / rho0;
    1.0 - r * r
}

// ---------------------------------------------------------------------------
// Patches and NCC

/// A matching window: integer offsets from the center pixel, sampled gray
/// values and the window weights (bilateral weights of the reference patch).
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub center: (usize, usize),
    pub offsets: Vec<(i32, i32)>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gathers the reference window at (u, v), clipped to the image. Weights are
/// bilateral in intensity relative to the center pixel, or uniform when
/// `cfg.bilateral` is off. The center sample always has weight 1.
pub fn gather_patch(frame: &PolarFrame, u: usize, v: usize, cfg: &CostConfig) -> PatchSample {
    let r = cfg.window_radius as i32;
    let (w, h) = (frame.width() as i32, frame.height() as i32);
    let center = frame.gray.get(u, v);
    let inv_two_sigma2 = 1.0 / (2.0 * cfg.sigma_color * cfg.sigma_color);
    let mut patch = PatchSample {
        center: (u, v),
        offsets: Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize),
        values: Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize),
        weights: Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize),
    };
    for dy in -r..=r {
        for dx in -r..=r {
            let x = u as i32 + dx;
            let y = v as i32 + dy;
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let val = frame.gray.get(x as usize, y as usize);
            let weight = if cfg.bilateral {
                let d = val - center;
                (-d * d * inv_two_sigma2).exp()
            } else {
                1.0
            };
            patch.offsets.push((dx, dy));
            patch.values.push(val);
            patch.weights.push(weight);
        }
    }
    patch
}

/// Weighted NCC of two equally long sample runs under shared weights.
/// Returns 0 when either side's self-covariance falls below `eps_var`
/// (texture-less patches are neutral, not mismatched).
fn weighted_ncc(a: &[f64], b: &[f64], w: &[f64], eps_var: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), w.len());
    let (mut sw, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        let wi = w[i];
        sw += wi;
        sa += wi * a[i];
        sb += wi * b[i];
        saa += wi * a[i] * a[i];
        sbb += wi * b[i] * b[i];
        sab += wi * a[i] * b[i];
    }
    if sw <= 0.0 {
        return 0.0;
    }
    let ma = sa / sw;
    let mb = sb / sw;
    let var_a = saa / sw - ma * ma;
    let var_b = sbb / sw - mb * mb;
    if var_a < eps_var || var_b < eps_var {
        return 0.0;
    }
    let cov = sab / sw - ma * mb;
    (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
}

/// Weighted NCC between a reference patch and a warped source patch; weights
/// come from the reference side. Both patches must have equal sample counts.
pub fn color_similarity(reference: &PatchSample, warped: &PatchSample, eps_var: f64) -> f64 {
    assert_eq!(
        reference.values.len(),
        warped.values.len(),
        "patches must pair sample for sample"
    );
    weighted_ncc(&reference.values, &warped.values, &reference.weights, eps_var)
}

// ---------------------------------------------------------------------------
// Geometric consistency

/// Forward-backward reprojection error, pixels. The reference pixel (u, v) at
/// `depth` is projected into the source view; the source depth stored at the
/// nearest pixel is projected back; psi is the image distance to where we
/// started. Every failure along the way (behind a camera, off the source
/// image, invalid source pixel) yields `psi_max`.
pub fn reprojection_error(
    reference: &CameraView,
    source: &CameraView,
    source_map: &DepthNormalMap,
    u: usize,
    v: usize,
    depth: f64,
    psi_max: f64,
) -> f64 {
    let world = reference.camera_to_world(&reference.backproject(u as f64, v as f64, depth));
    let Ok((us, vs, _)) = source.project(&world) else {
        return psi_max;
    };
    let lx = us.round();
    let ly = vs.round();
    if lx < 0.0 || ly < 0.0 || lx > (source.width - 1) as f64 || ly > (source.height - 1) as f64 {
        return psi_max;
    }
    let (lx, ly) = (lx as usize, ly as usize);
    if !source_map.is_valid(lx, ly) {
        return psi_max;
    }
    let d_src = source_map.depths[source_map.index(lx, ly)];
    let world_back = source.camera_to_world(&source.backproject(lx as f64, ly as f64, d_src));
    let Ok((ub, vb, _)) = reference.project(&world_back) else {
        return psi_max;
    };
    (ub - u as f64).hypot(vb - v as f64)
}

// ---------------------------------------------------------------------------
// Depth-normal coupling

/// Mismatch between the hypothesis normal and the normal of the plane through
/// the backprojected pixel (at the hypothesis depth) and one horizontal and
/// one vertical neighbor (at their current depths): 1 - n_hyp . n_dep, in
/// [0, 2]. `du`/`dv` (each -1 or +1) pick the neighbor sides; during a sweep
/// pass the already-visited sides so the term scores against values committed
/// earlier in the same pass, the same pixels propagation flows from. Returns 0
/// when a neighbor is missing or invalid or the three points are collinear.
pub fn depth_normal_cost(
    view: &CameraView,
    map: &DepthNormalMap,
    u: usize,
    v: usize,
    hyp: &Hypothesis,
    du: isize,
    dv: isize,
) -> f64 {
    let uh = u as isize + du;
    let vv = v as isize + dv;
    if uh < 0 || vv < 0 || uh >= map.width as isize || vv >= map.height as isize {
        return 0.0;
    }
    let (uh, vv) = (uh as usize, vv as usize);
    if !map.is_valid(uh, v) || !map.is_valid(u, vv) {
        return 0.0;
    }
    let p0 = view.backproject(u as f64, v as f64, hyp.depth);
    let ph = view.backproject(uh as f64, v as f64, map.depths[map.index(uh, v)]);
    let pv = view.backproject(u as f64, vv as f64, map.depths[map.index(u, vv)]);
    let cross = (ph - p0).cross(&(pv - p0));
    let norm = cross.norm();
    if norm < COLLINEAR_TOL {
        return 0.0;
    }
    let mut n_dep = cross / norm;
    if n_dep.dot(&p0) > 0.0 {
        n_dep = -n_dep;
    }
    1.0 - hyp.normal.dot(&n_dep)
}

// ---------------------------------------------------------------------------
// Evaluator

/// One source view's data as seen from a reference view.
#[derive(Clone, Copy)]
pub struct SourceData<'a> {
    pub view: &'a CameraView,
    pub frame: &'a PolarFrame,
    /// Depth map used by the geometric term (phase two); may be absent.
    pub map: Option<&'a DepthNormalMap>,
}

/// Scores hypotheses at pixels of one reference view. Reuses the gathered
/// reference patch across the hypotheses tried at a pixel, so call
/// [`CostEvaluator::begin_pixel`] before scoring.
pub struct CostEvaluator<'a> {
    pub cfg: &'a CostConfig,
    pub view: &'a CameraView,
    pub frame: &'a PolarFrame,
    pub sources: Vec<SourceData<'a>>,
    /// Neighbor sides for the depth-normal term; sweeps point this at the
    /// already-visited sides of their scan order.
    pub dep_step: (isize, isize),
    pixel: (usize, usize),
    patch: PatchSample,
    kept_ref: Vec<f64>,
    kept_src: Vec<f64>,
    kept_w: Vec<f64>,
}

impl<'a> CostEvaluator<'a> {
    pub fn new(
        cfg: &'a CostConfig,
        view: &'a CameraView,
        frame: &'a PolarFrame,
        sources: Vec<SourceData<'a>>,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::EmptyInput("cost evaluation needs at least one source view"));
        }
        Ok(CostEvaluator {
            cfg,
            view,
            frame,
            sources,
            dep_step: (1, 1),
            pixel: (usize::MAX, usize::MAX),
            patch: PatchSample {
                center: (0, 0),
                offsets: Vec::new(),
                values: Vec::new(),
                weights: Vec::new(),
            },
            kept_ref: Vec::new(),
            kept_src: Vec::new(),
            kept_w: Vec::new(),
        })
    }

    /// Gathers the reference patch for (u, v); must precede scoring there.
    pub fn begin_pixel(&mut self, u: usize, v: usize) {
        self.pixel = (u, v);
        self.patch = gather_patch(self.frame, u, v, self.cfg);
    }

    /// NCC against one source through the hypothesis homography. Drops
    /// samples that warp off the source image; losing more than half the
    /// window (or a degenerate homography) scores the worst value -1.
    fn view_sigma(&mut self, src: &SourceData<'_>, h: &Matrix3<f64>) -> f64 {
        let (u, v) = self.pixel;
        let _ = (u, v);
        self.kept_ref.clear();
        self.kept_src.clear();
        self.kept_w.clear();
        let total = self.patch.offsets.len();
        let (cu, cv) = self.patch.center;
        for i in 0..total {
            let (dx, dy) = self.patch.offsets[i];
            let x = cu as f64 + dx as f64;
            let y = cv as f64 + dy as f64;
            let Some((sx, sy)) = apply_homography(h, x, y) else {
                continue;
            };
            let Some(val) = src.frame.gray.sample(sx, sy) else {
                continue;
            };
            self.kept_ref.push(self.patch.values[i]);
            self.kept_src.push(val);
            self.kept_w.push(self.patch.weights[i]);
        }
        if self.kept_ref.len() * 2 < total {
            return -1.0;
        }
        weighted_ncc(&self.kept_ref, &self.kept_src, &self.kept_w, self.cfg.eps_var)
    }

    /// All four terms of `hyp` at the pixel prepared by `begin_pixel`.
    /// `own_map` is the map being estimated (for the depth-normal term);
    /// zero-weighted polarimetric/depth-normal terms are skipped (scored as
    /// 0) unless the config says otherwise.
    pub fn terms(&mut self, own_map: &DepthNormalMap, hyp: &Hypothesis, phase: Phase) -> CostTerms {
        let (u, v) = self.pixel;
        debug_assert!(u != usize::MAX, "begin_pixel must run first");
        let cfg = self.cfg;
        let n_world = self.view.direction_to_world(&hyp.normal);
        let with_pol = cfg.tau_pol != 0.0 || cfg.evaluate_zero_weights;
        let with_dep = cfg.tau_dep != 0.0 || cfg.evaluate_zero_weights;

        let n_views = self.sources.len() as f64;
        let mut pho_sum = 0.0;
        let mut geo_sum = 0.0;
        let mut pol_num = 0.0;
        let mut pol_den = 0.0;

        if with_pol {
            if let Ok(alpha) = image_azimuth(self.view, &n_world) {
                let phi = self.frame.aop.get(u, v);
                let g = dop_weight(self.frame.dop.get(u, v), cfg.rho0);
                pol_num += g * penalty_value(ambiguity_min_angle(alpha, phi), cfg.penalty);
                pol_den += g;
            }
        }

        for i in 0..self.sources.len() {
            let src = self.sources[i];
            let homography = plane_homography(self.view, src.view, u as f64, v as f64, hyp);
            let sigma = match &homography {
                Ok(h) => self.view_sigma(&src, h),
                Err(_) => -1.0,
            };
            pho_sum += 1.0 - sigma;
            if phase.geometric_active() {
                let psi = match src.map {
                    Some(m) => {
                        reprojection_error(self.view, src.view, m, u, v, hyp.depth, cfg.psi_max)
                    }
                    None => cfg.psi_max,
                };
                geo_sum += (1.0 - sigma) + 0.5 * psi.min(cfg.psi_max);
            }
            if with_pol {
                if let Ok(h) = &homography {
                    if let Some((sx, sy)) = apply_homography(h, u as f64, v as f64) {
                        if let (Some(phi), Some(rho), Ok(alpha)) = (
                            src.frame.sample_aop(sx, sy),
                            src.frame.sample_dop(sx, sy),
                            image_azimuth(src.view, &n_world),
                        ) {
                            let g = dop_weight(rho, cfg.rho0);
                            pol_num += g * penalty_value(ambiguity_min_angle(alpha, phi), cfg.penalty);
                            pol_den += g;
                        }
                    }
                }
            }
        }

        CostTerms {
            photometric: pho_sum / n_views,
            geometric: if phase.geometric_active() {
                geo_sum / n_views
            } else {
                0.0
            },
            polarimetric: if pol_den > 0.0 { pol_num / pol_den } else { 0.0 },
            depth_normal: if with_dep {
                let (du, dv) = self.dep_step;
                depth_normal_cost(self.view, own_map, u, v, hyp, du, dv)
            } else {
                0.0
            },
        }
    }

    /// Total weighted cost; see [`total_cost`].
    pub fn total(&mut self, own_map: &DepthNormalMap, hyp: &Hypothesis, phase: Phase) -> f64 {
        let t = self.terms(own_map, hyp, phase);
        total_cost(&t, self.cfg, phase)
    }
}

// ---------------------------------------------------------------------------
// One-shot helpers

fn one_shot<'a>(
    cfg: &'a CostConfig,
    view: &'a CameraView,
    frame: &'a PolarFrame,
    sources: &[SourceData<'a>],
    u: usize,
    v: usize,
) -> Result<CostEvaluator<'a>> {
    let mut ev = CostEvaluator::new(cfg, view, frame, sources.to_vec())?;
    ev.begin_pixel(u, v);
    Ok(ev)
}

/// Mean over source views of 1 - NCC through the hypothesis homography.
pub fn photometric_cost(
    cfg: &CostConfig,
    view: &CameraView,
    frame: &PolarFrame,
    sources: &[SourceData<'_>],
    u: usize,
    v: usize,
    hyp: &Hypothesis,
) -> Result<f64> {
    let mut ev = one_shot(cfg, view, frame, sources, u, v)?;
    let mut sum = 0.0;
    for i in 0..ev.sources.len() {
        let src = ev.sources[i];
        let sigma = match plane_homography(view, src.view, u as f64, v as f64, hyp) {
            Ok(h) => ev.view_sigma(&src, &h),
            Err(_) => -1.0,
        };
        sum += 1.0 - sigma;
    }
    Ok(sum / sources.len() as f64)
}

/// Mean over source views of 1 - NCC + 0.5 min(psi, psi_max).
pub fn geometric_cost(
    cfg: &CostConfig,
    view: &CameraView,
    frame: &PolarFrame,
    sources: &[SourceData<'_>],
    u: usize,
    v: usize,
    hyp: &Hypothesis,
) -> Result<f64> {
    let mut ev = one_shot(cfg, view, frame, sources, u, v)?;
    let mut sum = 0.0;
    for i in 0..ev.sources.len() {
        let src = ev.sources[i];
        let sigma = match plane_homography(view, src.view, u as f64, v as f64, hyp) {
            Ok(h) => ev.view_sigma(&src, &h),
            Err(_) => -1.0,
        };
        let psi = match src.map {
            Some(m) => reprojection_error(view, src.view, m, u, v, hyp.depth, cfg.psi_max),
            None => cfg.psi_max,
        };
        sum += (1.0 - sigma) + 0.5 * psi.min(cfg.psi_max);
    }
    Ok(sum / sources.len() as f64)
}

/// DoP-weighted mean penalty of the AoP mismatch over the reference pixel and
/// its warps into the source views. Views where the azimuth is undefined or
/// the warp leaves the image contribute weight zero; an all-zero weight sum
/// yields 0.
pub fn polarimetric_cost(
    cfg: &CostConfig,
    view: &CameraView,
    frame: &PolarFrame,
    sources: &[SourceData<'_>],
    u: usize,
    v: usize,
    hyp: &Hypothesis,
) -> Result<f64> {
    let mut forced = cfg.clone();
    forced.evaluate_zero_weights = true;
    let mut ev = CostEvaluator::new(&forced, view, frame, sources.to_vec())?;
    ev.begin_pixel(u, v);
    let own = DepthNormalMap::new(frame.width(), frame.height());
    Ok(ev.terms(&own, hyp, Phase::One).polarimetric)
}
