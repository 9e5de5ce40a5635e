//! The 3D rectification step: project multi-view images onto mesh-anchored
//! Gaussians and render them back.
//!
//! Rectification runs in two stages. Stage 1 looks up image features at the
//! anchors' rest positions and regresses each Gaussian's surface-local
//! coordinate (where it sits). Stage 2 gathers features again at those new
//! positions and regresses appearance offsets against fixed base attributes.
//! The regressors are pluggable so the geometry pipeline can be exercised
//! with zero, random, or color-copying heads.

mod fit;

pub(crate) use fit::initial_set as fit_initial_set;

pub use fit::{fit_gaussians, write_fit_trace_csv, FitTraceRow, DEFAULT_LAMBDA_MASK,
    DEFAULT_LAMBDA_RGB};

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::feature::{gather_pixel_features, FeatureMap};
use crate::imgbuf::ImageBuffer;
use crate::mesh::{local_to_world, AnchorSet, LocalCoord, TriMesh, DEFAULT_OFFSET_CLAMP};
use crate::raster::{rasterize_labels_depth, DepthMap};
use crate::rng::substream;
use crate::splat::{logit, render, GaussianSet, Gaussian3D, SCALE_MAX, SCALE_MIN};

pub const DEFAULT_ANCHOR_VIEWS: usize = 4;
pub const DEFAULT_RENDER_VIEWS: usize = 8;
pub const DEFAULT_LOG_SCALE_BOUND: f64 = 1.0;
const BASE_COLOR: f64 = 0.5;
const BASE_OPACITY: f64 = 0.9;
/// Base scale when there are not enough anchors to measure spacing.
const FALLBACK_SCALE: f64 = 0.05;

/// Maps an anchor position and its gathered feature vector to a fixed-size
/// output. Implementations must be deterministic and produce finite values.
pub trait AttributeRegressor: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, position: Point3<f64>, features: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Always outputs zeros: geometry and appearance stay at their bases.
#[derive(Debug, Clone)]
pub struct ZeroRegressor {
    pub out_dim: usize,
}

impl AttributeRegressor for ZeroRegressor {
    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn eval(&self, _position: Point3<f64>, _features: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// Dense affine map over [position, features].
#[derive(Debug, Clone)]
pub struct LinearRegressor {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out_dim x (3 + in_dim).
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearRegressor {
    /// Random weights from a named substream, scaled small so outputs stay
    /// tame over property sweeps.
    pub fn seeded(seed: u64, in_dim: usize, out_dim: usize, scale: f64) -> Self {
        let mut rng = substream(seed, "linear-regressor", 0);
        let cols = 3 + in_dim;
        let weights = (0..out_dim * cols)
            .map(|_| crate::rng::next_standard_normal(&mut rng) * scale)
            .collect();
        let bias = (0..out_dim)
            .map(|_| crate::rng::next_standard_normal(&mut rng) * scale)
            .collect();
        LinearRegressor { in_dim, out_dim, weights, bias }
    }
}

impl AttributeRegressor for LinearRegressor {
    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn eval(&self, position: Point3<f64>, features: &[f64], out: &mut [f64]) -> Result<()> {
        if features.len() != self.in_dim {
            return Err(Error::invalid_input(format!(
                "regressor expects {} features, got {}",
                self.in_dim,
                features.len()
            )));
        }
        let cols = 3 + self.in_dim;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * cols..(r + 1) * cols];
            let mut acc = self.bias[r];
            acc += row[0] * position.x + row[1] * position.y + row[2] * position.z;
            for (w, f) in row[3..].iter().zip(features) {
                acc += w * f;
            }
            *o = acc;
        }
        Ok(())
    }
}

/// Routes sampled image color into the color offsets: averages the RGB of
/// every visible view slot and outputs that mean relative to the base color.
/// All other outputs are zero.
#[derive(Debug, Clone)]
pub struct CopyColorRegressor {
    pub views: usize,
    /// Channels per view slot in the gathered feature vector.
    pub channels: usize,
}

impl AttributeRegressor for CopyColorRegressor {
    fn output_dim(&self) -> usize {
        11
    }

    fn eval(&self, _position: Point3<f64>, features: &[f64], out: &mut [f64]) -> Result<()> {
        if features.len() != self.views * self.channels || self.channels < 3 {
            return Err(Error::invalid_input(format!(
                "expected {} views x {} channels, got {} features",
                self.views,
                self.channels,
                features.len()
            )));
        }
        out.fill(0.0);
        let mut mean = [0.0; 3];
        let mut seen = 0usize;
        for v in 0..self.views {
            let slot = &features[v * self.channels..(v + 1) * self.channels];
            // Invisible views are zero-filled by the gather; skip them.
            if slot.iter().all(|&x| x == 0.0) {
                continue;
            }
            for c in 0..3 {
                mean[c] += slot[c];
            }
            seen += 1;
        }
        if seen > 0 {
            for c in 0..3 {
                out[c] = mean[c] / seen as f64 - BASE_COLOR;
            }
        }
        Ok(())
    }
}

/// Serializable regressor description; `build` instantiates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    Zero { out_dim: usize },
    Linear {
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    CopyColor { views: usize, channels: usize },
}

impl RegressorSpec {
    pub fn seeded_linear(seed: u64, in_dim: usize, out_dim: usize, scale: f64) -> Self {
        let r = LinearRegressor::seeded(seed, in_dim, out_dim, scale);
        RegressorSpec::Linear {
            in_dim: r.in_dim,
            out_dim: r.out_dim,
            weights: r.weights,
            bias: r.bias,
        }
    }

    pub fn build(&self) -> Result<Box<dyn AttributeRegressor>> {
        match self {
            RegressorSpec::Zero { out_dim } => Ok(Box::new(ZeroRegressor { out_dim: *out_dim })),
            RegressorSpec::Linear { in_dim, out_dim, weights, bias } => {
                if weights.len() != out_dim * (3 + in_dim) || bias.len() != *out_dim {
                    return Err(Error::validation(format!(
                        "linear regressor shape mismatch: {} weights, {} bias for {}x(3+{})",
                        weights.len(),
                        bias.len(),
                        out_dim,
                        in_dim
                    )));
                }
                if !weights.iter().chain(bias).all(|w| w.is_finite()) {
                    return Err(Error::validation("regressor weights must be finite"));
                }
                Ok(Box::new(LinearRegressor {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                    weights: weights.clone(),
                    bias: bias.clone(),
                }))
            }
            RegressorSpec::CopyColor { views, channels } => {
                if *views == 0 || *channels < 3 {
                    return Err(Error::validation(
                        "copy-color regressor needs views >= 1 and channels >= 3",
                    ));
                }
                Ok(Box::new(CopyColorRegressor { views: *views, channels: *channels }))
            }
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).expect("regressor serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: RegressorSpec = serde_json::from_str(&body)
            .map_err(|e| Error::malformed(path, e.line(), e.to_string()))?;
        spec.build()?;
        Ok(spec)
    }
}

/// Geometry and regressor choices for one rectification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifyConfig {
    pub anchor_views: usize,
    pub render_views: usize,
    /// Bound on the signed surface offset, meters.
    pub offset_clamp: f64,
    /// Bound on stage-2 log-scale offsets.
    pub log_scale_bound: f64,
    pub stage1: RegressorSpec,
    pub stage2: RegressorSpec,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        RectifyConfig {
            anchor_views: DEFAULT_ANCHOR_VIEWS,
            render_views: DEFAULT_RENDER_VIEWS,
            offset_clamp: DEFAULT_OFFSET_CLAMP,
            log_scale_bound: DEFAULT_LOG_SCALE_BOUND,
            stage1: RegressorSpec::Zero { out_dim: 4 },
            stage2: RegressorSpec::Zero { out_dim: 11 },
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_views == 0 || self.render_views == 0 {
            return Err(Error::validation("view counts must be at least 1"));
        }
        if !(self.offset_clamp > 0.0) || !(self.log_scale_bound > 0.0) {
            return Err(Error::validation("offset bounds must be positive"));
        }
        Ok(())
    }
}

/// Mean distance from each point to its nearest other point, via a uniform
/// grid hash. Returns 0 when fewer than two points exist.
pub fn mean_nearest_neighbor_distance(points: &[Point3<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let diag = hi - lo;
    let max_extent = diag.max();
    if !(max_extent > 0.0) {
        return 0.0;
    }
    // Cell size from the typical spacing in the occupied dimensions only; a
    // flat or collinear set would otherwise collapse the cell volume and the
    // ring search below would crawl through millions of empty cells.
    let eps = max_extent * 1e-9;
    let mut measure = 1.0;
    let mut dims = 0u32;
    for extent in [diag.x, diag.y, diag.z] {
        if extent > eps {
            measure *= extent;
            dims += 1;
        }
    }
    let h = (measure / n as f64).powf(1.0 / f64::from(dims)).max(eps);

    let cell = |p: &Point3<f64>| -> (i64, i64, i64) {
        (
            ((p.x - lo.x) / h).floor() as i64,
            ((p.y - lo.y) / h).floor() as i64,
            ((p.z - lo.z) / h).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<u32>> =
        std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i as u32);
    }

    // Any point in a cell at Chebyshev ring r is at least (r-1)h away, so
    // once best <= ring*h no farther ring can improve it.
    let extent = (diag.norm() / h).ceil() as i64 + 1;
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        let mut best = f64::INFINITY;
        let mut ring: i64 = 0;
        while ring <= extent {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in bucket {
                            if j as usize != i {
                                best = best.min((points[j as usize] - p).norm_squared());
                            }
                        }
                    }
                }
            }
            if best.is_finite() && best.sqrt() <= ring as f64 * h {
                break;
            }
            ring += 1;
        }
        total += best.sqrt();
    }
    total / n as f64
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{name} produced a non-finite value")));
    }
    Ok(())
}

/// Stage 1: regress each anchor's surface-local coordinate from its gathered
/// features. The face stays the anchor's own; the regressed weight offsets
/// are folded into the anchor weights (negative weights clip to zero, then
/// the triple renormalizes), and the surface offset is squashed to
/// [-clamp, clamp].
pub fn stage1_query_local_coords(
    anchors: &AnchorSet,
    rest_positions: &[Point3<f64>],
    feats: &[Vec<f64>],
    reg: &dyn AttributeRegressor,
    clamp: f64,
) -> Result<Vec<LocalCoord>> {
    if reg.output_dim() != 4 {
        return Err(Error::invalid_input(format!(
            "stage 1 needs a 4-output regressor, got {}",
            reg.output_dim()
        )));
    }
    if rest_positions.len() != anchors.len() || feats.len() != anchors.len() {
        return Err(Error::invalid_input(format!(
            "{} anchors, {} positions, {} feature rows",
            anchors.len(),
            rest_positions.len(),
            feats.len()
        )));
    }
    if !(clamp > 0.0) {
        return Err(Error::invalid_input("offset clamp must be positive"));
    }
    let mut out = vec![0.0; 4];
    let mut coords = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        reg.eval(rest_positions[i], &feats[i], &mut out)?;
        check_finite("stage 1 regressor", &out)?;
        let base = anchors.barycentric[i];
        let mut l = [0.0; 3];
        for c in 0..3 {
            l[c] = (base[c] + out[c]).max(0.0);
        }
        let sum = l[0] + l[1] + l[2];
        if sum <= 1e-12 {
            // Offsets cancelled every weight; keep the anchor's own point.
            l = base;
        } else {
            for v in &mut l {
                *v /= sum;
            }
        }
        coords.push(LocalCoord {
            face: anchors.faces[i],
            barycentric: l,
            offset: clamp * out[3].tanh(),
        });
    }
    Ok(coords)
}

/// Stage 2: regress appearance offsets at the stage-1 positions and apply
/// them to base attributes (mid-gray, opacity 0.9, isotropic scale set by the
/// mean nearest-anchor spacing, identity rotation). Colors clip to [0, 1],
/// opacity moves in logit space, log-scale offsets clip to the configured
/// bound, and the rotation offset renormalizes to a unit quaternion.
pub fn stage2_query_attributes(
    positions: &[Point3<f64>],
    feats: &[Vec<f64>],
    reg: &dyn AttributeRegressor,
    log_scale_bound: f64,
) -> Result<Vec<Gaussian3D>> {
    if reg.output_dim() != 11 {
        return Err(Error::invalid_input(format!(
            "stage 2 needs an 11-output regressor, got {}",
            reg.output_dim()
        )));
    }
    if feats.len() != positions.len() {
        return Err(Error::invalid_input(format!(
            "{} positions, {} feature rows",
            positions.len(),
            feats.len()
        )));
    }
    if !(log_scale_bound > 0.0) {
        return Err(Error::invalid_input("log-scale bound must be positive"));
    }
    let spacing = mean_nearest_neighbor_distance(positions);
    let base_scale = if spacing > 0.0 { spacing } else { FALLBACK_SCALE }
        .clamp(SCALE_MIN, SCALE_MAX);
    let base_log = base_scale.ln();
    let max_log = SCALE_MAX.ln();
    let min_log = SCALE_MIN.ln();

    let mut out = vec![0.0; 11];
    let mut gaussians = Vec::with_capacity(positions.len());
    for (i, &p) in positions.iter().enumerate() {
        reg.eval(p, &feats[i], &mut out)?;
        check_finite("stage 2 regressor", &out)?;
        let color = [
            (BASE_COLOR + out[0]).clamp(0.0, 1.0),
            (BASE_COLOR + out[1]).clamp(0.0, 1.0),
            (BASE_COLOR + out[2]).clamp(0.0, 1.0),
        ];
        let opacity_logit = logit(BASE_OPACITY) + out[3];
        let log_scale = Vector3::new(
            (base_log + out[4].clamp(-log_scale_bound, log_scale_bound)).clamp(min_log, max_log),
            (base_log + out[5].clamp(-log_scale_bound, log_scale_bound)).clamp(min_log, max_log),
            (base_log + out[6].clamp(-log_scale_bound, log_scale_bound)).clamp(min_log, max_log),
        );
        let mut q = [1.0 + out[7], out[8], out[9], out[10]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            q = [1.0, 0.0, 0.0, 0.0];
        } else {
            q.iter_mut().for_each(|v| *v /= norm);
        }
        gaussians.push(Gaussian3D {
            center: p,
            rotation: q,
            log_scale,
            opacity_logit,
            color,
        });
    }
    Ok(gaussians)
}

/// Full rectification: render condition maps for the input views, run both
/// query stages over the anchors, assemble the Gaussian set (with its
/// surface-local coordinates), and render the requested output views.
pub fn rectify(
    images: &[ImageBuffer],
    mesh: &TriMesh,
    anchors: &AnchorSet,
    cams_in: &[Camera],
    cams_out: &[Camera],
    cfg: &RectifyConfig,
) -> Result<(GaussianSet, Vec<ImageBuffer>)> {
    cfg.validate()?;
    if images.len() != cfg.anchor_views || cams_in.len() != cfg.anchor_views {
        return Err(Error::invalid_input(format!(
            "configured for {} input views, got {} images and {} cameras",
            cfg.anchor_views,
            images.len(),
            cams_in.len()
        )));
    }
    if cams_out.len() != cfg.render_views {
        return Err(Error::invalid_input(format!(
            "configured for {} output views, got {} cameras",
            cfg.render_views,
            cams_out.len()
        )));
    }
    anchors.validate(mesh)?;
    for (i, (img, cam)) in images.iter().zip(cams_in).enumerate() {
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::invalid_input(format!(
                "view {i}: image is {}x{}, camera renders {}x{}",
                img.width, img.height, cam.width, cam.height
            )));
        }
    }

    // Condition maps: the mesh rasterized into every input view.
    let mut maps = Vec::with_capacity(cams_in.len());
    let mut depths: Vec<DepthMap> = Vec::with_capacity(cams_in.len());
    for (img, cam) in images.iter().zip(cams_in) {
        let (labels, depth) = rasterize_labels_depth(mesh, cam)?;
        maps.push(FeatureMap::from_image_with_labels(img, &labels)?);
        depths.push(depth);
    }

    let rest = anchors.positions(mesh);
    let stage1 = cfg.stage1.build()?;
    let feats1 = gather_pixel_features(&rest, &maps, cams_in, &depths)?;
    let coords = stage1_query_local_coords(anchors, &rest, &feats1, stage1.as_ref(), cfg.offset_clamp)?;

    let positions: Vec<Point3<f64>> = coords
        .iter()
        .map(|c| local_to_world(mesh, c))
        .collect::<Result<_>>()?;

    // Second gather at the moved positions, visibility recomputed.
    let stage2 = cfg.stage2.build()?;
    let feats2 = gather_pixel_features(&positions, &maps, cams_in, &depths)?;
    let gaussians = stage2_query_attributes(&positions, &feats2, stage2.as_ref(), cfg.log_scale_bound)?;

    let set = GaussianSet {
        gaussians,
        local_coords: Some(coords),
    };
    set.validate()?;

    let mut renders = Vec::with_capacity(cams_out.len());
    for cam in cams_out {
        renders.push(render(&set, cam)?);
    }
    Ok((set, renders))
}
