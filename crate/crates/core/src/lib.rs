//! Polarimetric multi-view stereo: plane-hypothesis depth and normal
//! estimation over calibrated views carrying RGB, angle-of-polarization and
//! degree-of-polarization channels, plus filtering and fusion into an
//! oriented point cloud, a synthetic scene generator and evaluation helpers.

pub mod costs;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod patchmatch;
pub mod polar_image;
pub mod synth;

pub use costs::{
    ambiguity_min_angle, color_similarity, depth_normal_cost, dop_weight, gather_patch,
    geometric_cost, penalty, photometric_cost, polarimetric_cost, reprojection_error, total_cost,
    CostConfig, CostEvaluator, CostTerms, PatchSample, PenaltyCurve, Phase, SourceData,
};
pub use error::{Error, Result};
pub use eval::{
    ablation_report, brute_force_nearest, cloud_accuracy, cloud_completeness, covered_count,
    default_thresholds, mean_map_errors, pixel_error_curves, write_ablation_csv, write_curves_csv,
    AblationOutcome, AblationRow, AblationVariant, CurvePoint, KdTree, MapErrors,
};
pub use fusion::{
    apply_mask, fuse, read_ply, reliability_filter, write_ply, FusedPoint, FusionConfig,
    OrientedPointCloud, PlyFormat,
};
pub use geometry::{
    apply_homography, image_azimuth, plane_homography, read_cameras, write_cameras, CameraView,
    Hypothesis,
};
pub use patchmatch::{
    estimate_all, generate_hypotheses, initialize, run_phase, select_source_views, stream_rng,
    sweep, EngineConfig, ScanOrder, SweepInfo,
};
pub use polar_image::{
    aop_dop_from_polarizer_stack, read_frame, read_map, read_pfm_gray, read_pfm_rgb,
    read_rgb_image, write_frame, write_map, write_pfm_gray, write_pfm_rgb, write_rgb_image,
    DepthNormalMap, PolarFrame, Raster, Raster3,
};
pub use synth::{
    render, ring_views, scene_diameter, surface_samples, write_dataset, Reflection, SceneSpec,
    Shape, SurfaceSpec, SynthDataset, Texture,
};
