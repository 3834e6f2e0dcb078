//! Per-view plane-hypothesis estimation: random initialization, sequential
//! propagation sweeps in four scan orders, and a two-phase schedule in which
//! the geometric consistency term joins once every view has a first depth map
//! to check against.
//!
//! Determinism: every random draw comes from a ChaCha stream keyed by
//! (seed, view id, pixel index, stage), so results are bit-identical for a
//! fixed seed no matter how views are scheduled across threads.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_3, PI, TAU};

use crate::costs::{CostConfig, CostEvaluator, Phase, SourceData};
use crate::error::{Error, Result};
use crate::geometry::{CameraView, Hypothesis};
use crate::polar_image::{DepthNormalMap, PolarFrame};

/// Preferred baseline angle between optical axes when ranking source views.
const BEST_BASELINE_ANGLE: f64 = 15.0 * PI / 180.0;
/// Width of the baseline-angle preference.
const BASELINE_ANGLE_SIGMA: f64 = 10.0 * PI / 180.0;
/// Overlap is probed on this many grid columns/rows of the reference image.
const OVERLAP_GRID: usize = 20;

/// Knobs of the estimation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Sweeps per phase; scan orders cycle row, reverse-row, column,
    /// reverse-column across the global sweep count.
    pub iterations: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Initial relative depth perturbation half-width.
    pub eps_depth: f64,
    /// Initial normal perturbation cone angle, radians.
    pub theta_normal: f64,
    /// Per-sweep decay of both perturbation magnitudes.
    pub decay: f64,
    pub seed: u64,
    /// Source views matched against each reference view.
    pub num_sources: usize,
    /// Log one line per sweep to standard error.
    pub progress: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            iterations: 4,
            d_min: 0.5,
            d_max: 10.0,
            eps_depth: 0.25,
            theta_normal: FRAC_PI_3 / 2.0,
            decay: 0.5,
            seed: 0,
            num_sources: 4,
            progress: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if !(self.eps_depth > 0.0 && self.eps_depth < 1.0) {
            return Err(Error::invalid("eps_depth must lie in (0, 1)"));
        }
        if !(self.theta_normal > 0.0 && self.theta_normal < PI / 2.0) {
            return Err(Error::invalid("theta_normal must lie in (0, pi/2)"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1]"));
        }
        if self.num_sources < 1 {
            return Err(Error::invalid("num_sources must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// RNG streams

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent random stream for one pixel of one view at one stage (0 is
/// initialization, 1 + global sweep index afterwards).
pub fn stream_rng(seed: u64, view_id: u32, pixel_index: usize, stage: u64) -> ChaCha8Rng {
    let mut x = seed;
    let a = splitmix64(&mut x);
    x ^= (view_id as u64).wrapping_mul(0xA24BAED4963EE407);
    let b = splitmix64(&mut x);
    x ^= (pixel_index as u64).wrapping_mul(0x9FB21C651E98DF25);
    let c = splitmix64(&mut x);
    x ^= stage.wrapping_mul(0xD6E8FEB86659FD93);
    let d = splitmix64(&mut x);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    let z = 2.0 * rng.random::<f64>() - 1.0;
    let phi = TAU * rng.random::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(s * phi.cos(), s * phi.sin(), z)
}

// ---------------------------------------------------------------------------
// Source selection

/// Ranks the other views for matching against `views[reference]`: a Gaussian
/// preference for a baseline angle near 15 degrees between optical axes,
/// weighted by the fraction of a 20x20 reference pixel grid that, pushed to
/// the middle of the depth range, projects inside the candidate. Returns the
/// indices of the best `num_sources` views (all of them when fewer exist).
pub fn select_source_views(
    reference: usize,
    views: &[CameraView],
    cfg: &EngineConfig,
) -> Result<Vec<usize>> {
    if views.len() < 2 {
        return Err(Error::invalid("source selection needs at least two views"));
    }
    let rv = &views[reference];
    let mid_depth = 0.5 * (cfg.d_min + cfg.d_max);
    let mut grid_points = Vec::with_capacity(OVERLAP_GRID * OVERLAP_GRID);
    for gy in 0..OVERLAP_GRID {
        for gx in 0..OVERLAP_GRID {
            let u = (rv.width - 1) as f64 * gx as f64 / (OVERLAP_GRID - 1) as f64;
            let v = (rv.height - 1) as f64 * gy as f64 / (OVERLAP_GRID - 1) as f64;
            grid_points.push(rv.camera_to_world(&rv.backproject(u, v, mid_depth)));
        }
    }
    let axis_r = rv.optical_axis();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, sv) in views.iter().enumerate() {
        if i == reference {
            continue;
        }
        let beta = axis_r.dot(&sv.optical_axis()).clamp(-1.0, 1.0).acos();
        let db = (beta - BEST_BASELINE_ANGLE) / BASELINE_ANGLE_SIGMA;
        let angle_score = (-0.5 * db * db).exp();
        let inside = grid_points
            .iter()
            .filter(|p| matches!(sv.project(p), Ok((u, v, _)) if sv.contains(u, v)))
            .count();
        let overlap = inside as f64 / grid_points.len() as f64;
        scored.push((angle_score * overlap, i));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(cfg.num_sources);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

// ---------------------------------------------------------------------------
// Initialization and hypothesis generation

/// Random starting map: depth uniform over the configured range, normal
/// uniform on the unit sphere flipped to face the camera along each pixel's
/// ray. Stored costs start at +inf (nothing evaluated yet).
pub fn initialize(view: &CameraView, cfg: &EngineConfig) -> DepthNormalMap {
    let mut map = DepthNormalMap::new(view.width, view.height);
    for y in 0..view.height {
        for x in 0..view.width {
            let idx = map.index(x, y);
            let mut rng = stream_rng(cfg.seed, view.id, idx, 0);
            let depth = rng.random_range(cfg.d_min..cfg.d_max);
            let normal = random_unit_vector(&mut rng);
            let hyp =
                Hypothesis::new(depth, normal).face_camera(&view.ray(x as f64, y as f64));
            map.set(x, y, hyp, f64::INFINITY);
        }
    }
    map
}

/// Pixel visiting orders; each sweep uses one and takes its propagation
/// source from the pixel visited immediately before.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanOrder {
    Row,
    RowReverse,
    Column,
    ColumnReverse,
}

impl ScanOrder {
    pub const CYCLE: [ScanOrder; 4] = [
        ScanOrder::Row,
        ScanOrder::RowReverse,
        ScanOrder::Column,
        ScanOrder::ColumnReverse,
    ];

    /// Neighbor sides already visited by this order: forward orders have
    /// committed the left and upper neighbors by the time a pixel is reached,
    /// reverse orders the right and lower ones. The depth-normal term scores
    /// against these so it sees values updated earlier in the same sweep.
    pub fn dep_step(self) -> (isize, isize) {
        match self {
            ScanOrder::Row | ScanOrder::Column => (-1, -1),
            ScanOrder::RowReverse | ScanOrder::ColumnReverse => (1, 1),
        }
    }

    /// The previously visited pixel, None on the leading border.
    pub fn predecessor(
        self,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    ) -> Option<(usize, usize)> {
        match self {
            ScanOrder::Row => (x > 0).then(|| (x - 1, y)),
            ScanOrder::RowReverse => (x + 1 < width).then(|| (x + 1, y)),
            ScanOrder::Column => (y > 0).then(|| (x, y - 1)),
            ScanOrder::ColumnReverse => (y + 1 < height).then(|| (x, y + 1)),
        }
    }

    fn visit(self, width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            ScanOrder::Row => {
                for y in 0..height {
                    for x in 0..width {
                        f(x, y);
                    }
                }
            }
            ScanOrder::RowReverse => {
                for y in (0..height).rev() {
                    for x in (0..width).rev() {
                        f(x, y);
                    }
                }
            }
            ScanOrder::Column => {
                for x in 0..width {
                    for y in 0..height {
                        f(x, y);
                    }
                }
            }
            ScanOrder::ColumnReverse => {
                for x in (0..width).rev() {
                    for y in (0..height).rev() {
                        f(x, y);
                    }
                }
            }
        }
    }
}

/// The seven candidates tried at a pixel, in commit-preference order:
/// current, propagated, random depth, random normal, both random, perturbed
/// depth, perturbed normal. The propagated candidate intersects this pixel's
/// ray with the predecessor's plane (falling back to the predecessor's raw
/// depth when the plane runs parallel to the ray); on the leading border it
/// duplicates the current estimate. `eps_depth` and `theta_normal` are the
/// already-decayed perturbation magnitudes for this sweep.
#[allow(clippy::too_many_arguments)]
pub fn generate_hypotheses(
    view: &CameraView,
    map: &DepthNormalMap,
    x: usize,
    y: usize,
    order: ScanOrder,
    eps_depth: f64,
    theta_normal: f64,
    depth_range: (f64, f64),
    rng: &mut impl Rng,
) -> [Hypothesis; 7] {
    let current = map.hypothesis(x, y);
    let ray = view.ray(x as f64, y as f64);

    // Fixed draw order, independent of how the draws get used.
    let d_rnd = rng.random_range(depth_range.0..depth_range.1);
    let n_rnd = random_unit_vector(rng);
    let u = eps_depth * (2.0 * rng.random::<f64>() - 1.0);
    let axis = random_unit_vector(rng);
    let angle = theta_normal * rng.random::<f64>();

    let d_prt = (current.depth * (1.0 + u)).clamp(depth_range.0, depth_range.1);
    let n_prt = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle) * current.normal;

    let propagated = match order.predecessor(x, y, view.width, view.height) {
        None => current,
        Some((px, py)) => {
            let prev = map.hypothesis(px, py);
            let anchor = view.backproject(px as f64, py as f64, prev.depth);
            let denom = prev.normal.dot(&ray);
            let t = prev.normal.dot(&anchor) / denom;
            let depth = if denom.abs() < 1e-12 * ray.norm() || !t.is_finite() || t <= 0.0 {
                prev.depth
            } else {
                t
            };
            Hypothesis::new(depth, prev.normal).face_camera(&ray)
        }
    };

    [
        current,
        propagated,
        Hypothesis::new(d_rnd, current.normal),
        Hypothesis::new(current.depth, n_rnd).face_camera(&ray),
        Hypothesis::new(d_rnd, n_rnd).face_camera(&ray),
        Hypothesis::new(d_prt, current.normal),
        Hypothesis::new(current.depth, n_prt).face_camera(&ray),
    ]
}

// ---------------------------------------------------------------------------
// Sweeps and phases

/// One pass over all pixels in the given order. At each pixel the seven
/// candidates are scored and the best commits only if it beats the stored
/// cost strictly, so stored costs never increase within a phase; the
/// incumbent is scored too (first, so ties keep it) and can lower its own
/// stored cost as the neighborhood improves. Updates are immediately visible
/// to later pixels of the same sweep.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    view: &CameraView,
    frame: &PolarFrame,
    sources: &[SourceData<'_>],
    map: &mut DepthNormalMap,
    order: ScanOrder,
    phase: Phase,
    global_iter: usize,
    ecfg: &EngineConfig,
    ccfg: &CostConfig,
) -> Result<()> {
    let mut evaluator = CostEvaluator::new(ccfg, view, frame, sources.to_vec())?;
    evaluator.dep_step = order.dep_step();
    let shrink = ecfg.decay.powi(global_iter as i32);
    let eps_depth = ecfg.eps_depth * shrink;
    let theta_normal = ecfg.theta_normal * shrink;
    order.visit(view.width, view.height, |x, y| {
        let idx = map.index(x, y);
        let mut rng = stream_rng(ecfg.seed, view.id, idx, 1 + global_iter as u64);
        let candidates = generate_hypotheses(
            view,
            map,
            x,
            y,
            order,
            eps_depth,
            theta_normal,
            (ecfg.d_min, ecfg.d_max),
            &mut rng,
        );
        evaluator.begin_pixel(x, y);
        let mut best_cost = map.costs[idx];
        let mut best = None;
        for hyp in &candidates {
            let cost = evaluator.total(map, hyp, phase);
            if cost < best_cost {
                best_cost = cost;
                best = Some(*hyp);
            }
        }
        if let Some(hyp) = best {
            map.set(x, y, hyp, best_cost);
        }
    });
    Ok(())
}

/// Per-sweep summary passed to observers and the progress log.
#[derive(Debug, Clone, Copy)]
pub struct SweepInfo {
    pub view_id: u32,
    pub phase: Phase,
    /// 1-based sweep number within the phase.
    pub iter: usize,
    pub mean_cost: f64,
}

/// Runs one phase (`ecfg.iterations` sweeps) on one view. `first_global_iter`
/// positions the phase in the global schedule, which drives scan-order
/// cycling and perturbation decay. Stored costs are the commit bar: reset
/// them (see [`DepthNormalMap::reset_costs`]) before a phase whose objective
/// differs from the one that produced them.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    view: &CameraView,
    frame: &PolarFrame,
    sources: &[SourceData<'_>],
    map: &mut DepthNormalMap,
    phase: Phase,
    first_global_iter: usize,
    ecfg: &EngineConfig,
    ccfg: &CostConfig,
    mut observer: Option<&mut dyn FnMut(&SweepInfo, &DepthNormalMap)>,
) -> Result<()> {
    for s in 0..ecfg.iterations {
        let global_iter = first_global_iter + s;
        let order = ScanOrder::CYCLE[global_iter % ScanOrder::CYCLE.len()];
        sweep(view, frame, sources, map, order, phase, global_iter, ecfg, ccfg)?;
        let info = SweepInfo {
            view_id: view.id,
            phase,
            iter: s + 1,
            mean_cost: map.mean_cost(),
        };
        if ecfg.progress {
            let p = match phase {
                Phase::One => 1,
                Phase::Two => 2,
            };
            eprintln!(
                "view={} phase={} iter={} mean_cost={:.6}",
                info.view_id, p, info.iter, info.mean_cost
            );
        }
        if let Some(f) = observer.as_deref_mut() {
            f(&info, map);
        }
    }
    Ok(())
}

/// Builds the per-view source lists and checks that views and frames line up.
fn prepare(
    views: &[CameraView],
    frames: &[PolarFrame],
    ecfg: &EngineConfig,
) -> Result<Vec<Vec<usize>>> {
    ecfg.validate()?;
    if views.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} views but {} frames",
            views.len(),
            frames.len()
        )));
    }
    for (v, f) in views.iter().zip(frames) {
        if v.width != f.width() || v.height != f.height() {
            return Err(Error::invalid(format!(
                "view {} is {}x{} but its frame is {}x{}",
                v.id,
                v.width,
                v.height,
                f.width(),
                f.height()
            )));
        }
    }
    (0..views.len())
        .map(|i| select_source_views(i, views, ecfg))
        .collect()
}

/// Estimates depth and normal maps for every view. Phase one matches
/// photometrically (plus the polarimetric and depth-normal terms); the
/// resulting maps are then frozen and phase two re-estimates every view with
/// the geometric consistency term checking against them. Views run in
/// parallel; results are bit-identical for a fixed seed regardless of thread
/// count.
pub fn estimate_all(
    views: &[CameraView],
    frames: &[PolarFrame],
    ecfg: &EngineConfig,
    ccfg: &CostConfig,
) -> Result<Vec<DepthNormalMap>> {
    let source_indices = prepare(views, frames, ecfg)?;

    let phase_one: Vec<DepthNormalMap> = source_indices
        .par_iter()
        .enumerate()
        .map(|(i, chosen)| {
            let sources: Vec<SourceData<'_>> = chosen
                .iter()
                .map(|&j| SourceData {
                    view: &views[j],
                    frame: &frames[j],
                    map: None,
                })
                .collect();
            let mut map = initialize(&views[i], ecfg);
            run_phase(
                &views[i],
                &frames[i],
                &sources,
                &mut map,
                Phase::One,
                0,
                ecfg,
                ccfg,
                None,
            )?;
            Ok(map)
        })
        .collect::<Result<_>>()?;

    source_indices
        .par_iter()
        .enumerate()
        .map(|(i, chosen)| {
            let sources: Vec<SourceData<'_>> = chosen
                .iter()
                .map(|&j| SourceData {
                    view: &views[j],
                    frame: &frames[j],
                    map: Some(&phase_one[j]),
                })
                .collect();
            let mut map = phase_one[i].clone();
            map.reset_costs();
            run_phase(
                &views[i],
                &frames[i],
                &sources,
                &mut map,
                Phase::Two,
                ecfg.iterations,
                ecfg,
                ccfg,
                None,
            )?;
            Ok(map)
        })
        .collect::<Result<_>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polar_image::{Raster, Raster3};
    use nalgebra::Matrix3;
    use rand::RngCore;

    fn identity_view(id: u32, w: usize, h: usize) -> CameraView {
        CameraView::new(
            id,
            80.0,
            80.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    fn shifted_view(id: u32, w: usize, h: usize, baseline: f64) -> CameraView {
        CameraView::new(
            id,
            80.0,
            80.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
            Matrix3::identity(),
            Vector3::new(-baseline, 0.0, 0.0),
        )
        .unwrap()
    }

    fn look_at_view(id: u32, center: Vector3<f64>, target: Vector3<f64>) -> CameraView {
        let fwd = (target - center).normalize();
        let up = Vector3::new(0.0, -1.0, 0.0);
        let x = fwd.cross(&up).normalize();
        let y = fwd.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), fwd.transpose()]);
        CameraView::new(id, 90.0, 90.0, 31.5, 31.5, 64, 64, r, -r * center).unwrap()
    }

    /// Two rectified views of a fronto-parallel noise plane at the given
    /// depth; a reference pixel u matches source pixel u - disparity.
    fn plane_scene(
        w: usize,
        h: usize,
        depth: f64,
        baseline: f64,
        seed: u64,
    ) -> (Vec<CameraView>, Vec<PolarFrame>) {
        let rv = identity_view(0, w, h);
        let sv = shifted_view(1, w, h, baseline);
        let disparity = (80.0 * baseline / depth).round() as usize;
        let wide = w + disparity;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sheet: Vec<f64> = (0..wide * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let grab = |x0: usize| {
            let mut rgb = Raster3::new(w, h, [0.0; 3]);
            for y in 0..h {
                for x in 0..w {
                    let v = sheet[y * wide + x + x0];
                    rgb.set(x, y, [v, v, v]);
                }
            }
            PolarFrame::new(rgb, Raster::new(w, h, 0.0), Raster::new(w, h, 0.0)).unwrap()
        };
        (vec![rv, sv], vec![grab(0), grab(disparity)])
    }

    #[test]
    fn rng_streams_are_stable_and_distinct() {
        let mut a = stream_rng(7, 0, 42, 1);
        let mut b = stream_rng(7, 0, 42, 1);
        assert_eq!(a.next_u64(), b.next_u64());
        for (v, p, s) in [(1u32, 42usize, 1u64), (0, 43, 1), (0, 42, 2)] {
            let mut c = stream_rng(7, v, p, s);
            let mut a = stream_rng(7, 0, 42, 1);
            assert_ne!(a.next_u64(), c.next_u64());
        }
        let mut d = stream_rng(8, 0, 42, 1);
        let mut a = stream_rng(7, 0, 42, 1);
        assert_ne!(a.next_u64(), d.next_u64());
    }

    #[test]
    fn source_selection_two_views_returns_the_other() {
        let views = vec![identity_view(0, 32, 32), shifted_view(1, 32, 32, 0.4)];
        let cfg = EngineConfig {
            d_min: 1.0,
            d_max: 3.0,
            ..EngineConfig::default()
        };
        assert_eq!(select_source_views(0, &views, &cfg).unwrap(), vec![1]);
        assert_eq!(select_source_views(1, &views, &cfg).unwrap(), vec![0]);
    }

    #[test]
    fn source_selection_prefers_angular_neighbors_on_a_ring() {
        let views: Vec<CameraView> = (0..8)
            .map(|i| {
                let a = TAU * i as f64 / 8.0;
                look_at_view(i, Vector3::new(3.0 * a.cos(), 0.3, 3.0 * a.sin()), Vector3::zeros())
            })
            .collect();
        let cfg = EngineConfig {
            d_min: 2.0,
            d_max: 4.0,
            num_sources: 2,
            ..EngineConfig::default()
        };
        let chosen = select_source_views(0, &views, &cfg).unwrap();
        assert_eq!(chosen.len(), 2);
        for c in &chosen {
            assert!(
                [1usize, 7].contains(c),
                "expected ring neighbors, got {chosen:?}"
            );
        }
    }

    #[test]
    fn source_selection_ranks_duplicate_pose_below_good_baseline() {
        let reference = look_at_view(0, Vector3::new(0.0, 0.0, -3.0), Vector3::zeros());
        let duplicate = look_at_view(1, Vector3::new(0.0, 0.0, -3.0), Vector3::zeros());
        let neighbor = look_at_view(
            2,
            Vector3::new(3.0 * (15f64).to_radians().sin(), 0.0, -3.0 * (15f64).to_radians().cos()),
            Vector3::zeros(),
        );
        let beta = reference
            .optical_axis()
            .dot(&neighbor.optical_axis())
            .clamp(-1.0, 1.0)
            .acos();
        assert!((beta - (15f64).to_radians()).abs() < 1e-6);
        let views = vec![reference, duplicate, neighbor];
        let cfg = EngineConfig {
            d_min: 2.0,
            d_max: 4.0,
            num_sources: 2,
            ..EngineConfig::default()
        };
        let chosen = select_source_views(0, &views, &cfg).unwrap();
        assert_eq!(chosen[0], 2, "15 degree neighbor should outrank the duplicate pose");
        assert_eq!(chosen[1], 1);
    }

    #[test]
    fn initialization_is_deterministic_in_range_and_camera_facing() {
        let view = identity_view(3, 24, 20);
        let cfg = EngineConfig {
            d_min: 1.5,
            d_max: 4.5,
            seed: 11,
            ..EngineConfig::default()
        };
        let a = initialize(&view, &cfg);
        let b = initialize(&view, &cfg);
        assert_eq!(a, b);
        for y in 0..20 {
            for x in 0..24 {
                let h = a.hypothesis(x, y);
                assert!(h.depth >= 1.5 && h.depth < 4.5);
                assert!((h.normal.norm() - 1.0).abs() < 1e-9);
                assert!(h.normal.dot(&view.ray(x as f64, y as f64)) <= 0.0);
            }
        }
    }

    #[test]
    fn hypothesis_set_has_seven_valid_members() {
        let view = identity_view(0, 24, 20);
        let cfg = EngineConfig {
            d_min: 1.0,
            d_max: 5.0,
            seed: 4,
            ..EngineConfig::default()
        };
        let map = initialize(&view, &cfg);
        for (x, y) in [(0, 0), (5, 7), (23, 19)] {
            let mut rng = stream_rng(cfg.seed, view.id, map.index(x, y), 1);
            let set = generate_hypotheses(
                &view,
                &map,
                x,
                y,
                ScanOrder::Row,
                0.25,
                FRAC_PI_3 / 2.0,
                (1.0, 5.0),
                &mut rng,
            );
            assert_eq!(set.len(), 7);
            assert_eq!(set[0], map.hypothesis(x, y));
            let ray = view.ray(x as f64, y as f64);
            for h in &set {
                assert!(h.depth > 0.0);
                assert!((h.normal.norm() - 1.0).abs() < 1e-9);
                assert!(h.normal.dot(&ray) <= 1e-12);
            }
            // Shared draws: the random depth appears in slots 2 and 4, the
            // random normal in slots 3 and 4.
            assert_eq!(set[2].depth, set[4].depth);
            assert_eq!(set[3].normal, set[4].normal);
        }
    }

    #[test]
    fn zero_perturbation_reproduces_current_estimate() {
        let view = identity_view(0, 16, 16);
        let cfg = EngineConfig {
            d_min: 1.0,
            d_max: 5.0,
            ..EngineConfig::default()
        };
        let map = initialize(&view, &cfg);
        let mut rng = stream_rng(0, 0, map.index(8, 8), 1);
        let set = generate_hypotheses(
            &view,
            &map,
            8,
            8,
            ScanOrder::Row,
            0.0,
            0.0,
            (1.0, 5.0),
            &mut rng,
        );
        let cur = map.hypothesis(8, 8);
        assert_eq!(set[5].depth, cur.depth);
        assert!((set[6].normal - cur.normal).norm() < 1e-12);
        assert_eq!(set[6].depth, cur.depth);
    }

    #[test]
    fn propagation_depth_matches_world_plane_intersection() {
        // A slanted world plane; the predecessor stores the exact plane, so
        // the propagated depth must equal the analytic ray-plane hit.
        let view = look_at_view(2, Vector3::new(0.5, -0.4, -3.0), Vector3::zeros());
        let m = Vector3::new(0.3, 0.2, -1.0).normalize(); // world plane normal
        let q = Vector3::new(0.0, 0.0, 0.4); // world plane point
        let depth_at = |x: usize, y: usize| -> f64 {
            let c = view.center();
            let dir = view.direction_to_world(&view.ray(x as f64, y as f64));
            (q - c).dot(&m) / dir.dot(&m)
        };
        let cfg = EngineConfig {
            d_min: 0.5,
            d_max: 8.0,
            ..EngineConfig::default()
        };
        let mut map = initialize(&view, &cfg);
        let (px, py) = (30, 31);
        let (x, y) = (31, 31);
        let n_cam = view.direction_to_camera(&m);
        map.set(
            px,
            py,
            Hypothesis::new(depth_at(px, py), n_cam).face_camera(&view.ray(px as f64, py as f64)),
            0.0,
        );
        let mut rng = stream_rng(0, 2, map.index(x, y), 1);
        let set = generate_hypotheses(
            &view,
            &map,
            x,
            y,
            ScanOrder::Row,
            0.1,
            0.1,
            (0.5, 8.0),
            &mut rng,
        );
        let expected = depth_at(x, y);
        assert!(
            (set[1].depth - expected).abs() < 1e-9,
            "propagated {} expected {expected}",
            set[1].depth
        );
    }

    #[test]
    fn border_propagation_duplicates_current() {
        let view = identity_view(0, 16, 16);
        let cfg = EngineConfig {
            d_min: 1.0,
            d_max: 5.0,
            ..EngineConfig::default()
        };
        let map = initialize(&view, &cfg);
        let mut rng = stream_rng(0, 0, map.index(0, 5), 1);
        let set = generate_hypotheses(
            &view,
            &map,
            0,
            5,
            ScanOrder::Row,
            0.1,
            0.1,
            (1.0, 5.0),
            &mut rng,
        );
        assert_eq!(set[1], map.hypothesis(0, 5));
    }

    fn scene_sources<'a>(
        views: &'a [CameraView],
        frames: &'a [PolarFrame],
    ) -> Vec<SourceData<'a>> {
        vec![SourceData {
            view: &views[1],
            frame: &frames[1],
            map: None,
        }]
    }

    #[test]
    fn stored_costs_never_increase_within_a_phase() {
        let (views, frames) = plane_scene(32, 24, 2.0, 0.4, 21);
        let ecfg = EngineConfig {
            d_min: 1.0,
            d_max: 4.0,
            seed: 5,
            iterations: 3,
            ..EngineConfig::default()
        };
        let ccfg = CostConfig::synthetic();
        let sources = scene_sources(&views, &frames);
        let mut map = initialize(&views[0], &ecfg);
        let mut previous = map.costs.clone();
        for g in 0..3 {
            sweep(
                &views[0],
                &frames[0],
                &sources,
                &mut map,
                ScanOrder::CYCLE[g % 4],
                Phase::One,
                g,
                &ecfg,
                &ccfg,
            )
            .unwrap();
            for (now, before) in map.costs.iter().zip(&previous) {
                assert!(now <= before, "cost rose from {before} to {now}");
            }
            previous = map.costs.clone();
        }
    }

    #[test]
    fn seeded_pixel_propagates_along_its_row() {
        let (views, frames) = plane_scene(48, 16, 2.0, 0.4, 33);
        let ecfg = EngineConfig {
            d_min: 1.0,
            d_max: 4.0,
            seed: 17,
            ..EngineConfig::default()
        };
        let ccfg = CostConfig::synthetic();
        let sources = scene_sources(&views, &frames);
        let mut map = initialize(&views[0], &ecfg);
        let row = 8;
        map.set(20, row, Hypothesis::new(2.0, Vector3::new(0.0, 0.0, -1.0)), f64::INFINITY);
        sweep(
            &views[0],
            &frames[0],
            &sources,
            &mut map,
            ScanOrder::Row,
            Phase::One,
            0,
            &ecfg,
            &ccfg,
        )
        .unwrap();
        let xs: Vec<usize> = (20..44).collect();
        let good = xs
            .iter()
            .filter(|&&x| (map.hypothesis(x, row).depth - 2.0).abs() / 2.0 < 0.01)
            .count();
        assert!(
            good * 10 >= xs.len() * 9,
            "only {good}/{} pixels locked onto the plane",
            xs.len()
        );
    }

    #[test]
    fn estimation_is_deterministic_and_thread_count_independent() {
        let (views, frames) = plane_scene(24, 18, 2.0, 0.3, 55);
        let ecfg = EngineConfig {
            d_min: 1.0,
            d_max: 4.0,
            seed: 9,
            iterations: 2,
            num_sources: 1,
            ..EngineConfig::default()
        };
        let ccfg = CostConfig::synthetic();
        let a = estimate_all(&views, &frames, &ecfg, &ccfg).unwrap();
        let b = estimate_all(&views, &frames, &ecfg, &ccfg).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| estimate_all(&views, &frames, &ecfg, &ccfg).unwrap());
        assert_eq!(a, single);
    }

    #[test]
    fn estimation_recovers_a_textured_plane() {
        let (views, frames) = plane_scene(40, 28, 2.0, 0.4, 77);
        let ecfg = EngineConfig {
            d_min: 1.0,
            d_max: 4.0,
            seed: 2,
            num_sources: 1,
            ..EngineConfig::default()
        };
        let ccfg = CostConfig::synthetic();
        let maps = estimate_all(&views, &frames, &ecfg, &ccfg).unwrap();
        let map = &maps[0];
        // Ignore a window-sized margin where warps leave the source image.
        let mut good = 0;
        let mut total = 0;
        for y in 6..22 {
            for x in 18..34 {
                total += 1;
                if (map.hypothesis(x, y).depth - 2.0).abs() / 2.0 < 0.01 {
                    good += 1;
                }
            }
        }
        assert!(
            good * 10 >= total * 8,
            "only {good}/{total} pixels within 1% of the plane"
        );
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = EngineConfig::default();
        cfg.d_min = 2.0;
        cfg.d_max = 1.0;
        assert!(cfg.validate().is_err());
        cfg = EngineConfig::default();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        cfg = EngineConfig::default();
        cfg.eps_depth = 1.5;
        assert!(cfg.validate().is_err());
        assert!(EngineConfig::default().validate().is_ok());
    }
}
