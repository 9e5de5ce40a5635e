//! Tiled forward renderer and its exhaustive per-pixel twin.
//!
//! Both renderers share one preparation pass (projection, culling, global
//! depth sort) and one per-splat evaluation, so for any pixel they walk the
//! same splats in the same order with the same arithmetic. The only
//! difference is that the tiled path may stop once transmittance is
//! negligible.

use nalgebra::Matrix2;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuffer;
use crate::splat::{project_gaussian, GaussianSet};

/// Tiles are square, in pixels.
pub const TILE: u32 = 16;
/// Compositing stops once transmittance drops below this.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;
/// Per-splat opacity is capped so transmittance never reaches zero exactly.
pub const ALPHA_CAP: f64 = 0.99;
/// Squared Mahalanobis cutoff: contributions beyond three sigma are dropped.
pub const CUTOFF_MAHALANOBIS2: f64 = 9.0;
/// The exhaustive renderer is quadratic-ish; refuse huge inputs.
pub const ORACLE_MAX_GAUSSIANS: usize = 10_000;

/// One visible splat, ready for per-pixel evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    mean: (f64, f64),
    /// Inverse screen covariance (a, b, c) for [[a, b], [b, c]].
    inv: (f64, f64, f64),
    radius: f64,
    depth: f64,
    alpha: f64,
    pub(crate) color: [f64; 3],
    /// Index into the source `GaussianSet`.
    pub(crate) source: u32,
}

/// Projection and sort state shared by the forward and backward passes.
pub struct RenderGraph {
    pub(crate) splats: Vec<PreparedSplat>,
    pub(crate) width: u32,
    pub(crate) height: u32,
}

impl RenderGraph {
    /// Projects and culls every Gaussian, then orders survivors front to back
    /// by (depth, source index) so ties resolve identically everywhere.
    pub fn new(set: &GaussianSet, camera: &Camera) -> Result<Self> {
        set.validate()?;
        if set.len() > u32::MAX as usize {
            return Err(Error::invalid_input("too many gaussians"));
        }
        let mut splats = Vec::new();
        for (i, g) in set.gaussians.iter().enumerate() {
            let Some(p) = project_gaussian(camera, g) else {
                continue;
            };
            // The isotropic floor keeps the determinant well above zero.
            let inv: Matrix2<f64> = p.cov.try_inverse().ok_or_else(|| {
                Error::validation("projected covariance is not invertible")
            })?;
            splats.push(PreparedSplat {
                mean: (p.mean.x, p.mean.y),
                inv: (inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]),
                radius: p.radius,
                depth: p.depth,
                alpha: g.opacity(),
                color: g.color,
                source: i as u32,
            });
        }
        splats.sort_by(|a, b| {
            a.depth
                .partial_cmp(&b.depth)
                .expect("depths are finite")
                .then(a.source.cmp(&b.source))
        });
        Ok(RenderGraph {
            splats,
            width: camera.width,
            height: camera.height,
        })
    }

    /// Splat indices per tile, each bin in global front-to-back order.
    pub(crate) fn bin_tiles(&self) -> (u32, u32, Vec<Vec<u32>>) {
        let tiles_x = self.width.div_ceil(TILE);
        let tiles_y = self.height.div_ceil(TILE);
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
        for (k, s) in self.splats.iter().enumerate() {
            // Conservative bound: the 3-sigma disc around the mean, clamped to
            // the pixel-center grid.
            let x0 = ((s.mean.0 - s.radius).floor().max(0.0) as u32).min(self.width - 1) / TILE;
            let x1 = ((s.mean.0 + s.radius).ceil().max(0.0) as u32).min(self.width - 1) / TILE;
            let y0 = ((s.mean.1 - s.radius).floor().max(0.0) as u32).min(self.height - 1) / TILE;
            let y1 = ((s.mean.1 + s.radius).ceil().max(0.0) as u32).min(self.height - 1) / TILE;
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    bins[(ty * tiles_x + tx) as usize].push(k as u32);
                }
            }
        }
        (tiles_x, tiles_y, bins)
    }
}

/// Effective opacity of `s` at pixel center (px, py), or `None` beyond the
/// cutoff. `min` keeps transmittance strictly positive.
#[inline]
fn splat_alpha_at(s: &PreparedSplat, px: f64, py: f64) -> Option<(f64, f64)> {
    let dx = px - s.mean.0;
    let dy = py - s.mean.1;
    let d2 = s.inv.0 * dx * dx + 2.0 * s.inv.1 * dx * dy + s.inv.2 * dy * dy;
    if d2 > CUTOFF_MAHALANOBIS2 {
        return None;
    }
    let g = (-0.5 * d2).exp();
    Some(((s.alpha * g).min(ALPHA_CAP), g))
}

/// Front-to-back over-compositing of `order` at one pixel. Returns premultiplied
/// RGB over black plus coverage `1 - T`. When `early_stop` is set, compositing
/// ends as soon as transmittance falls below [`EARLY_STOP_TRANSMITTANCE`];
/// `record` (used by the backward pass) receives every composited layer as
/// (position in `order`, effective alpha, gaussian weight, transmittance in
/// front of the layer).
#[inline]
pub(crate) fn composite_pixel(
    splats: &[PreparedSplat],
    order: &[u32],
    px: f64,
    py: f64,
    early_stop: bool,
    mut record: Option<&mut Vec<(u32, f64, f64, f64)>>,
) -> ([f64; 3], f64, f64) {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    for (slot, &k) in order.iter().enumerate() {
        if early_stop && t < EARLY_STOP_TRANSMITTANCE {
            break;
        }
        let s = &splats[k as usize];
        let Some((a, g)) = splat_alpha_at(s, px, py) else {
            continue;
        };
        let w = a * t;
        rgb[0] += s.color[0] * w;
        rgb[1] += s.color[1] * w;
        rgb[2] += s.color[2] * w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push((slot as u32, a, g, t));
        }
        t *= 1.0 - a;
    }
    (rgb, 1.0 - t, t)
}

/// Tile-parallel forward render over a black background. The alpha channel is
/// the per-pixel coverage `1 - T`.
pub fn render(set: &GaussianSet, camera: &Camera) -> Result<ImageBuffer> {
    let graph = RenderGraph::new(set, camera)?;
    Ok(render_graph(&graph))
}

pub(crate) fn render_graph(graph: &RenderGraph) -> ImageBuffer {
    let (tiles_x, _tiles_y, bins) = graph.bin_tiles();
    let mut img = ImageBuffer::zeros(graph.width, graph.height);
    let (w, h) = (graph.width, graph.height);

    // Each tile owns a disjoint pixel range; collect then scatter.
    let tile_results: Vec<(u32, Vec<([f64; 3], f64)>)> = bins
        .par_iter()
        .enumerate()
        .map(|(ti, bin)| {
            let tx = ti as u32 % tiles_x;
            let ty = ti as u32 / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            let mut out = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
            for py in y0..y1 {
                for px in x0..x1 {
                    let (rgb, alpha, _t) = composite_pixel(
                        &graph.splats,
                        bin,
                        px as f64,
                        py as f64,
                        true,
                        None,
                    );
                    out.push((rgb, alpha));
                }
            }
            (ti as u32, out)
        })
        .collect();

    for (ti, pixels) in tile_results {
        let tx = ti % tiles_x;
        let ty = ti / tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let x1 = (x0 + TILE).min(w);
        let mut it = pixels.into_iter();
        for py in y0..(ty * TILE + TILE).min(h) {
            for px in x0..x1 {
                let (rgb, alpha) = it.next().expect("tile pixel count");
                let o = ((py * w + px) * 3) as usize;
                img.rgb[o] = rgb[0];
                img.rgb[o + 1] = rgb[1];
                img.rgb[o + 2] = rgb[2];
                img.alpha[(py * w + px) as usize] = alpha;
            }
        }
    }
    img
}

/// Exhaustive reference: every pixel composites every prepared splat, never
/// stopping early. Kept deliberately simple; inputs are capped at
/// [`ORACLE_MAX_GAUSSIANS`].
pub fn render_bruteforce(set: &GaussianSet, camera: &Camera) -> Result<ImageBuffer> {
    if set.len() > ORACLE_MAX_GAUSSIANS {
        return Err(Error::guard_rail(format!(
            "exhaustive renderer supports at most {ORACLE_MAX_GAUSSIANS} gaussians, got {}",
            set.len()
        )));
    }
    let graph = RenderGraph::new(set, camera)?;
    let all: Vec<u32> = (0..graph.splats.len() as u32).collect();
    let mut img = ImageBuffer::zeros(graph.width, graph.height);
    let w = graph.width;

    let rows: Vec<Vec<([f64; 3], f64)>> = (0..graph.height)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let (rgb, alpha, _t) = composite_pixel(
                        &graph.splats,
                        &all,
                        px as f64,
                        py as f64,
                        false,
                        None,
                    );
                    (rgb, alpha)
                })
                .collect()
        })
        .collect();
    for (py, row) in rows.into_iter().enumerate() {
        for (px, (rgb, alpha)) in row.into_iter().enumerate() {
            let o = (py * w as usize + px) * 3;
            img.rgb[o] = rgb[0];
            img.rgb[o + 1] = rgb[1];
            img.rgb[o + 2] = rgb[2];
            img.alpha[py * w as usize + px] = alpha;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{logit, Gaussian3D};
    use nalgebra::{Matrix3, Point3, Vector3};

    fn cam(width: u32, height: u32) -> Camera {
        Camera {
            fx: 80.0,
            fy: 80.0,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near: 0.1,
            far: 100.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn iso(center: [f64; 3], s: f64, opacity: f64, color: [f64; 3]) -> Gaussian3D {
        Gaussian3D {
            center: Point3::new(center[0], center[1], center[2]),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::from_element(s.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[test]
    fn single_splat_peaks_at_its_center() {
        let camera = cam(33, 33);
        let set = GaussianSet {
            gaussians: vec![iso([0.0, 0.0, 2.0], 0.05, 0.8, [1.0, 0.5, 0.0])],
            local_coords: None,
        };
        let img = render(&set, &camera).unwrap();
        // Pixel (16, 16) sits exactly on the mean: G = 1, alpha' = 0.8.
        let center = img.rgb_at(16, 16);
        assert!((center[0] - 0.8).abs() < 1e-12);
        assert!((center[1] - 0.4).abs() < 1e-12);
        assert!((img.alpha_at(16, 16) - 0.8).abs() < 1e-12);
        assert!(img.rgb_at(16, 17)[0] < center[0]);
        // Far corner is beyond three sigma: pure background.
        assert_eq!(img.rgb_at(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(img.alpha_at(0, 0), 0.0);
    }

    #[test]
    fn nearer_splat_occludes_through_over_compositing() {
        let camera = cam(33, 33);
        let near = iso([0.0, 0.0, 1.0], 0.05, 0.6, [1.0, 0.0, 0.0]);
        let far = iso([0.0, 0.0, 2.0], 0.10, 0.8, [0.0, 1.0, 0.0]);
        // Insertion order must not matter to the composite.
        let a = render(
            &GaussianSet { gaussians: vec![near.clone(), far.clone()], local_coords: None },
            &camera,
        )
        .unwrap();
        let b = render(
            &GaussianSet { gaussians: vec![far, near], local_coords: None },
            &camera,
        )
        .unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        let c = a.rgb_at(16, 16);
        // 0.6 red over 0.8 green: red contributes 0.6, green 0.8 * 0.4.
        assert!((c[0] - 0.6).abs() < 1e-12);
        assert!((c[1] - 0.32).abs() < 1e-12);
        assert!((a.alpha_at(16, 16) - (1.0 - 0.4 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn equal_depth_ties_composite_in_index_order() {
        let camera = cam(33, 33);
        let g0 = iso([0.0, 0.0, 2.0], 0.05, 0.9, [1.0, 0.0, 0.0]);
        let g1 = iso([0.0, 0.0, 2.0], 0.05, 0.9, [0.0, 0.0, 1.0]);
        let img = render(
            &GaussianSet { gaussians: vec![g0, g1], local_coords: None },
            &camera,
        )
        .unwrap();
        let c = img.rgb_at(16, 16);
        // Index 0 in front: red 0.9, blue 0.9 * 0.1.
        assert!((c[0] - 0.9).abs() < 1e-12);
        assert!((c[2] - 0.09).abs() < 1e-12);
    }

    #[test]
    fn opacity_cap_keeps_transmittance_positive() {
        let camera = cam(33, 33);
        let g = iso([0.0, 0.0, 2.0], 0.05, 0.999999, [1.0, 1.0, 1.0]);
        let img = render(&GaussianSet { gaussians: vec![g], local_coords: None }, &camera).unwrap();
        assert!((img.alpha_at(16, 16) - ALPHA_CAP).abs() < 1e-12);
    }

    #[test]
    fn tiled_matches_exhaustive_on_a_hand_built_scene() {
        let camera = cam(64, 48);
        let mut gaussians = Vec::new();
        for i in 0..30 {
            let t = i as f64 / 29.0;
            gaussians.push(iso(
                [0.3 * (t * 7.0).sin(), 0.2 * (t * 11.0).cos(), 1.5 + t],
                0.02 + 0.01 * t,
                0.2 + 0.6 * t,
                [t, 1.0 - t, 0.5],
            ));
        }
        let set = GaussianSet { gaussians, local_coords: None };
        let fast = render(&set, &camera).unwrap();
        let slow = render_bruteforce(&set, &camera).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5);
    }

    #[test]
    fn exhaustive_renderer_rejects_oversized_sets() {
        let camera = cam(8, 8);
        let set = GaussianSet {
            gaussians: vec![iso([0.0, 0.0, 2.0], 0.05, 0.5, [1.0; 3]); ORACLE_MAX_GAUSSIANS + 1],
            local_coords: None,
        };
        let err = render_bruteforce(&set, &camera).unwrap_err();
        assert!(err.to_string().contains("at most"));
    }

    #[test]
    fn empty_set_renders_black_with_zero_alpha() {
        let camera = cam(16, 16);
        let img = render(&GaussianSet::default(), &camera).unwrap();
        assert_eq!(img.rgb.iter().copied().sum::<f64>(), 0.0);
        assert_eq!(img.alpha.iter().copied().sum::<f64>(), 0.0);
    }
}
