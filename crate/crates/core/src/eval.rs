//! Evaluation: per-pixel depth/normal error statistics against ground
//! truth, point-cloud accuracy/completeness through an exact nearest-neighbor
//! index, and the ablation harness that reruns estimation with the
//! polarimetric and depth-normal terms toggled.

use nalgebra::Vector3;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::costs::CostConfig;
use crate::error::{Error, Result};
use crate::fusion::{apply_mask, fuse, reliability_filter, FusionConfig, OrientedPointCloud};
use crate::patchmatch::{estimate_all, EngineConfig};
use crate::polar_image::DepthNormalMap;
use crate::synth::{surface_samples, SynthDataset};

/// One row of an error-tolerance curve: the fraction of ground-truth-visible
/// pixels whose depth error (absolute) and normal error (degrees) fall
/// within `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub depth_fraction: f64,
    pub normal_fraction: f64,
}

/// Mean per-pixel errors over pixels valid in both maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapErrors {
    pub mean_depth_err: f64,
    pub mean_normal_err_deg: f64,
    /// Pixels that entered the means.
    pub evaluated: usize,
    /// Ground-truth-visible pixels, including ones the estimate missed.
    pub visible: usize,
}

fn normal_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn check_pairing(est: &[DepthNormalMap], gt: &[DepthNormalMap]) -> Result<()> {
    if est.is_empty() || est.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} estimated maps against {} ground-truth maps",
            est.len(),
            gt.len()
        )));
    }
    for (e, g) in est.iter().zip(gt) {
        if e.width != g.width || e.height != g.height {
            return Err(Error::invalid("map dimensions disagree with ground truth"));
        }
    }
    Ok(())
}

/// Pooled error-tolerance curve over all views. A ground-truth-visible pixel
/// with no valid estimate exceeds every threshold. Fractions are
/// nondecreasing in the threshold.
pub fn pixel_error_curves(
    est: &[DepthNormalMap],
    gt: &[DepthNormalMap],
    thresholds: &[f64],
) -> Result<Vec<CurvePoint>> {
    check_pairing(est, gt)?;
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("no thresholds given"));
    }
    let mut errors: Vec<(f64, f64)> = Vec::new();
    let mut visible = 0usize;
    for (e, g) in est.iter().zip(gt) {
        for i in 0..g.depths.len() {
            if !g.valid[i] {
                continue;
            }
            visible += 1;
            if e.valid[i] {
                errors.push((
                    (e.depths[i] - g.depths[i]).abs(),
                    normal_angle_deg(&e.normals[i], &g.normals[i]),
                ));
            }
        }
    }
    if visible == 0 {
        return Err(Error::EmptyInput("ground truth has no visible pixels"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| CurvePoint {
            threshold: t,
            depth_fraction: errors.iter().filter(|(d, _)| *d <= t).count() as f64
                / visible as f64,
            normal_fraction: errors.iter().filter(|(_, n)| *n <= t).count() as f64
                / visible as f64,
        })
        .collect())
}

/// Mean absolute depth error and mean normal angle over pixels where both
/// the estimate and the ground truth are valid.
pub fn mean_map_errors(est: &[DepthNormalMap], gt: &[DepthNormalMap]) -> Result<MapErrors> {
    check_pairing(est, gt)?;
    let (mut dsum, mut nsum, mut count, mut visible) = (0.0, 0.0, 0usize, 0usize);
    for (e, g) in est.iter().zip(gt) {
        for i in 0..g.depths.len() {
            if !g.valid[i] {
                continue;
            }
            visible += 1;
            if e.valid[i] {
                dsum += (e.depths[i] - g.depths[i]).abs();
                nsum += normal_angle_deg(&e.normals[i], &g.normals[i]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no jointly valid pixels to evaluate"));
    }
    Ok(MapErrors {
        mean_depth_err: dsum / count as f64,
        mean_normal_err_deg: nsum / count as f64,
        evaluated: count,
        visible,
    })
}

#[derive(Debug, Clone, Copy)]
struct KdNode {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Exact 3D nearest-neighbor index over a fixed point set. Distances are
/// computed with the same squared-norm expression as a brute-force scan, so
/// the returned distance matches a linear scan bit for bit.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    root: i32,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build(points, &mut order[..], &mut nodes);
        KdTree {
            points: points.to_vec(),
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(points: &[Vector3<f64>], order: &mut [u32], nodes: &mut Vec<KdNode>) -> i32 {
        if order.is_empty() {
            return -1;
        }
        // Split on the widest axis of this subset's bounding box.
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            let p = points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
        });
        let point = order[mid];
        let (left_half, rest) = order.split_at_mut(mid);
        let right_half = &mut rest[1..];
        let left = Self::build(points, left_half, nodes);
        let right = Self::build(points, right_half, nodes);
        nodes.push(KdNode {
            point,
            axis: axis as u8,
            left,
            right,
        });
        nodes.len() as i32 - 1
    }

    /// Index and Euclidean distance of the nearest stored point, or None for
    /// an empty index.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, query, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, node: i32, query: &Vector3<f64>, best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 {
            *best = (n.point as usize, d2);
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, best);
        if delta * delta < best.1 {
            self.search(far, query, best);
        }
    }
}

/// Linear-scan nearest neighbor; the oracle the index must agree with.
pub fn brute_force_nearest(points: &[Vector3<f64>], query: &Vector3<f64>) -> Option<(usize, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    if best.0 == usize::MAX {
        None
    } else {
        Some((best.0, best.1.sqrt()))
    }
}

/// Mean distance from each estimated point to its nearest ground-truth
/// sample: how accurate the reconstruction is where it exists.
pub fn cloud_accuracy(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput("accuracy needs nonempty clouds"));
    }
    let tree = KdTree::new(gt);
    let sum: f64 = est
        .par_iter()
        .map(|p| tree.nearest(p).expect("nonempty index").1)
        .sum();
    Ok(sum / est.len() as f64)
}

/// Mean distance from each ground-truth sample to the nearest estimated
/// point: how completely the surface is covered.
pub fn cloud_completeness(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput("completeness needs nonempty clouds"));
    }
    let tree = KdTree::new(est);
    let sum: f64 = gt
        .par_iter()
        .map(|p| tree.nearest(p).expect("nonempty index").1)
        .sum();
    Ok(sum / gt.len() as f64)
}

/// Number of ground-truth samples with an estimated point within `tol`.
pub fn covered_count(gt: &[Vector3<f64>], est: &[Vector3<f64>], tol: f64) -> Result<usize> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("no ground-truth samples"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("coverage tolerance must be positive"));
    }
    if est.is_empty() {
        return Ok(0);
    }
    let tree = KdTree::new(est);
    Ok(gt
        .par_iter()
        .filter(|p| tree.nearest(p).expect("nonempty index").1 <= tol)
        .count())
}

/// The four term-toggle variants of the estimation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Neither,
    PolarimetricOnly,
    DepthNormalOnly,
    Both,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Neither,
        AblationVariant::PolarimetricOnly,
        AblationVariant::DepthNormalOnly,
        AblationVariant::Both,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Neither => "neither",
            AblationVariant::PolarimetricOnly => "pol_only",
            AblationVariant::DepthNormalOnly => "dep_only",
            AblationVariant::Both => "both",
        }
    }

    /// The base cost configuration with the toggled terms zeroed.
    pub fn cost_config(self, base: &CostConfig) -> CostConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Neither => {
                cfg.tau_pol = 0.0;
                cfg.tau_dep = 0.0;
            }
            AblationVariant::PolarimetricOnly => cfg.tau_dep = 0.0,
            AblationVariant::DepthNormalOnly => cfg.tau_pol = 0.0,
            AblationVariant::Both => {}
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub mean_depth_err: f64,
    pub mean_normal_err_deg: f64,
    pub num_points: usize,
    pub accuracy: f64,
    pub completeness: f64,
}

/// Everything an ablation run produces, keyed by `AblationVariant::ALL`
/// order: summary rows plus the raw maps and fused clouds behind them.
#[derive(Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub maps: Vec<Vec<DepthNormalMap>>,
    pub clouds: Vec<OrientedPointCloud>,
}

/// Runs estimation, filtering, fusion and metrics once per ablation variant
/// on an already-rendered dataset.
pub fn ablation_report(
    ds: &SynthDataset,
    ecfg: &EngineConfig,
    base: &CostConfig,
    fcfg: &FusionConfig,
    gt_sample_count: usize,
) -> Result<AblationOutcome> {
    let samples = surface_samples(&ds.spec, gt_sample_count, ds.spec.seed.wrapping_add(1))?;
    let sample_points: Vec<Vector3<f64>> = samples.iter().map(|(p, _)| *p).collect();
    let mut rows = Vec::new();
    let mut all_maps = Vec::new();
    let mut clouds = Vec::new();
    for variant in AblationVariant::ALL {
        let ccfg = variant.cost_config(base);
        let maps = estimate_all(&ds.views, &ds.frames, ecfg, &ccfg)?;
        let errors = mean_map_errors(&maps, &ds.gt_maps)?;

        let mut filtered = maps.clone();
        for (frame, map) in ds.frames.iter().zip(filtered.iter_mut()) {
            let mask = reliability_filter(frame, map, fcfg);
            apply_mask(map, &mask);
        }
        let cloud = fuse(&ds.views, &ds.frames, &filtered, fcfg)?;
        let positions: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p.position).collect();
        let (accuracy, completeness) = if positions.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            (
                cloud_accuracy(&positions, &sample_points)?,
                cloud_completeness(&positions, &sample_points)?,
            )
        };
        rows.push(AblationRow {
            label: variant.label(),
            mean_depth_err: errors.mean_depth_err,
            mean_normal_err_deg: errors.mean_normal_err_deg,
            num_points: cloud.len(),
            accuracy,
            completeness,
        });
        all_maps.push(maps);
        clouds.push(cloud);
    }
    Ok(AblationOutcome {
        rows,
        maps: all_maps,
        clouds,
    })
}

/// Thresholds that span both plausible depth errors (scene units) and
/// normal errors (degrees) on a log scale.
pub fn default_thresholds() -> Vec<f64> {
    vec![
        0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 45.0,
    ]
}

pub fn write_curves_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut emit = || -> std::io::Result<()> {
        writeln!(out, "threshold,depth_fraction,normal_fraction")?;
        for p in curve {
            writeln!(out, "{},{},{}", p.threshold, p.depth_fraction, p.normal_fraction)?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            out,
            "config,mean_depth_err,mean_normal_err_deg,num_points,accuracy,completeness"
        )?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.label, r.mean_depth_err, r.mean_normal_err_deg, r.num_points, r.accuracy,
                r.completeness
            )?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}
