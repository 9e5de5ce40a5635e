//! Reverse-mode gradients of the tiled renderer for color and opacity.
//!
//! The forward pass is replayed per pixel while recording each composited
//! layer (effective alpha, gaussian weight, transmittance in front). A
//! back-to-front sweep then applies the product rule: a layer's alpha affects
//! its own contribution directly and every deeper contribution through the
//! transmittance chain. Per-tile partial sums are merged in tile order so the
//! result is bit-stable across runs and thread counts.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuffer;
use crate::splat::render::composite_pixel;
use crate::splat::{GaussianSet, RenderGraph, ALPHA_CAP, TILE};

/// Gradients with respect to each source Gaussian, indexed like the set.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub color: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
}

/// Backpropagates an upstream image gradient (`grad.rgb` = dL/d(pixel rgb),
/// `grad.alpha` = dL/d(pixel coverage)) through the tiled forward render.
/// Only color and opacity receive gradients; geometry is treated as fixed.
pub fn backward_color_opacity(
    set: &GaussianSet,
    camera: &Camera,
    grad: &ImageBuffer,
) -> Result<Gradients> {
    if grad.width != camera.width || grad.height != camera.height {
        return Err(Error::invalid_input(format!(
            "gradient image is {}x{} but the camera renders {}x{}",
            grad.width, grad.height, camera.width, camera.height
        )));
    }
    let graph = RenderGraph::new(set, camera)?;
    let (tiles_x, _tiles_y, bins) = graph.bin_tiles();
    let (w, h) = (graph.width, graph.height);

    struct TilePartial {
        /// Parallel to the tile's bin: (d_color, d_opacity_logit).
        per_splat: Vec<([f64; 3], f64)>,
    }

    let partials: Vec<TilePartial> = bins
        .par_iter()
        .enumerate()
        .map(|(ti, bin)| {
            let tx = ti as u32 % tiles_x;
            let ty = ti as u32 / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            let mut per_splat = vec![([0.0; 3], 0.0); bin.len()];
            let mut layers: Vec<(u32, f64, f64, f64)> = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    layers.clear();
                    let (_rgb, _alpha, t_final) = composite_pixel(
                        &graph.splats,
                        bin,
                        px as f64,
                        py as f64,
                        true,
                        Some(&mut layers),
                    );
                    if layers.is_empty() {
                        continue;
                    }
                    let dl_rgb = grad.rgb_at(px, py);
                    let dl_alpha = grad.alpha_at(px, py);
                    // Sum over deeper layers of color * alpha * transmittance,
                    // maintained back to front.
                    let mut behind = [0.0f64; 3];
                    for &(slot, a, g, t_before) in layers.iter().rev() {
                        let s = &graph.splats[bin[slot as usize] as usize];
                        let keep = 1.0 - a;
                        let mut d_alpha = dl_alpha * t_final / keep;
                        let (dc, dl) = &mut per_splat[slot as usize];
                        for ch in 0..3 {
                            dc[ch] += dl_rgb[ch] * a * t_before;
                            d_alpha += dl_rgb[ch] * (s.color[ch] * t_before - behind[ch] / keep);
                        }
                        // alpha' = min(opacity * g, cap); the cap is flat.
                        if a < ALPHA_CAP {
                            let o = a / g; // == sigmoid(logit), exact division
                            *dl += d_alpha * g * o * (1.0 - o);
                        }
                        for ch in 0..3 {
                            behind[ch] += s.color[ch] * a * t_before;
                        }
                    }
                }
            }
            TilePartial { per_splat }
        })
        .collect();

    let mut out = Gradients {
        color: vec![[0.0; 3]; set.len()],
        opacity_logit: vec![0.0; set.len()],
    };
    // Sequential merge in tile order keeps floating-point sums reproducible.
    for (bin, partial) in bins.iter().zip(&partials) {
        for (&k, (dc, dl)) in bin.iter().zip(&partial.per_splat) {
            let source = graph.splats[k as usize].source as usize;
            for ch in 0..3 {
                out.color[source][ch] += dc[ch];
            }
            out.opacity_logit[source] += dl;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::splat::{logit, render, Gaussian3D};
    use nalgebra::{Matrix3, Point3, Vector3};
    use rand::Rng;

    fn cam() -> Camera {
        Camera {
            fx: 60.0,
            fy: 60.0,
            cx: 15.5,
            cy: 15.5,
            width: 32,
            height: 32,
            near: 0.1,
            far: 100.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn scene() -> GaussianSet {
        let g = |center: [f64; 3], s: f64, op: f64, color: [f64; 3]| Gaussian3D {
            center: Point3::new(center[0], center[1], center[2]),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::from_element(s.ln()),
            opacity_logit: logit(op),
            color,
        };
        GaussianSet {
            gaussians: vec![
                g([0.02, -0.01, 1.2], 0.05, 0.7, [0.9, 0.2, 0.1]),
                g([-0.04, 0.03, 1.5], 0.08, 0.5, [0.1, 0.8, 0.3]),
                g([0.0, 0.0, 2.0], 0.12, 0.4, [0.2, 0.3, 0.9]),
            ],
            local_coords: None,
        }
    }

    /// Random but fixed upstream gradient, so L = sum(grad . image) is a
    /// scalar functional of the render.
    fn upstream(width: u32, height: u32) -> ImageBuffer {
        let mut rng = substream(7, "backward-upstream", 0);
        let mut g = ImageBuffer::zeros(width, height);
        for v in g.rgb.iter_mut().chain(g.alpha.iter_mut()) {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        g
    }

    fn loss(set: &GaussianSet, camera: &Camera, grad: &ImageBuffer) -> f64 {
        let img = render(set, camera).unwrap();
        let mut l = 0.0;
        for (a, b) in img.rgb.iter().zip(&grad.rgb) {
            l += a * b;
        }
        for (a, b) in img.alpha.iter().zip(&grad.alpha) {
            l += a * b;
        }
        l
    }

    #[test]
    fn color_gradients_match_finite_differences_exactly() {
        let camera = cam();
        let set = scene();
        let grad = upstream(32, 32);
        let analytic = backward_color_opacity(&set, &camera, &grad).unwrap();
        // The composite is linear in color, so a unit step recovers the
        // derivative up to rounding.
        for i in 0..set.len() {
            for ch in 0..3 {
                let mut plus = set.clone();
                plus.gaussians[i].color[ch] = 1.0;
                let mut minus = set.clone();
                minus.gaussians[i].color[ch] = 0.0;
                let fd = loss(&plus, &camera, &grad) - loss(&minus, &camera, &grad);
                assert!(
                    (analytic.color[i][ch] - fd).abs() < 1e-9,
                    "gaussian {i} channel {ch}: analytic {} vs fd {fd}",
                    analytic.color[i][ch]
                );
            }
        }
    }

    #[test]
    fn opacity_gradients_match_central_differences() {
        let camera = cam();
        let set = scene();
        let grad = upstream(32, 32);
        let analytic = backward_color_opacity(&set, &camera, &grad).unwrap();
        let h = 1e-5;
        for i in 0..set.len() {
            let mut plus = set.clone();
            plus.gaussians[i].opacity_logit += h;
            let mut minus = set.clone();
            minus.gaussians[i].opacity_logit -= h;
            let fd = (loss(&plus, &camera, &grad) - loss(&minus, &camera, &grad)) / (2.0 * h);
            let got = analytic.opacity_logit[i];
            let denom = fd.abs().max(1e-6);
            assert!(
                (got - fd).abs() / denom < 1e-4,
                "gaussian {i}: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn capped_alpha_receives_zero_opacity_gradient() {
        let camera = cam();
        // Opacity so high that alpha' hits the cap at the center pixel.
        let set = GaussianSet {
            gaussians: vec![Gaussian3D {
                center: Point3::new(0.0, 0.0, 1.0),
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: Vector3::from_element(0.2f64.ln()),
                opacity_logit: 12.0,
                color: [1.0, 1.0, 1.0],
            }],
            local_coords: None,
        };
        let img = render(&set, &camera).unwrap();
        assert!((img.alpha_at(15, 15) - ALPHA_CAP).abs() < 1e-12);

        let grad = upstream(32, 32);
        let analytic = backward_color_opacity(&set, &camera, &grad).unwrap();
        let h = 1e-4;
        let mut plus = set.clone();
        plus.gaussians[0].opacity_logit += h;
        let mut minus = set.clone();
        minus.gaussians[0].opacity_logit -= h;
        let fd = (loss(&plus, &camera, &grad) - loss(&minus, &camera, &grad)) / (2.0 * h);
        assert!(
            (analytic.opacity_logit[0] - fd).abs() < 1e-3,
            "analytic {} vs fd {fd}",
            analytic.opacity_logit[0]
        );
    }

    #[test]
    fn gradients_are_bitwise_reproducible() {
        let camera = cam();
        let set = scene();
        let grad = upstream(32, 32);
        let a = backward_color_opacity(&set, &camera, &grad).unwrap();
        let b = backward_color_opacity(&set, &camera, &grad).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.opacity_logit, b.opacity_logit);
    }

    #[test]
    fn gradient_image_shape_must_match_camera() {
        let camera = cam();
        let set = scene();
        let grad = ImageBuffer::zeros(16, 16);
        assert!(backward_color_opacity(&set, &camera, &grad).is_err());
    }
}
