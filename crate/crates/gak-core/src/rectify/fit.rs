//! Gradient-descent fitting of anchored Gaussians to multi-view targets.
//!
//! Only color and opacity are optimized (the renderer's backward pass covers
//! exactly those); geometry stays where the anchors put it. Each iteration
//! takes one descent step with a step-halving line search, so the recorded
//! loss curve is non-increasing by construction.

use std::path::Path;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuffer;
use crate::mesh::{AnchorSet, LocalCoord, TriMesh};
use crate::rectify::{stage2_query_attributes, ZeroRegressor, DEFAULT_LOG_SCALE_BOUND};
use crate::splat::{backward_color_opacity, render, GaussianSet, Gradients};

pub const DEFAULT_LAMBDA_RGB: f64 = 1.0;
pub const DEFAULT_LAMBDA_MASK: f64 = 0.1;

/// Most halvings the line search tries before declaring convergence.
const MAX_HALVINGS: u32 = 30;

/// One row of the recorded loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTraceRow {
    pub iteration: u32,
    pub l_rgb: f64,
    pub l_mask: f64,
    pub l3d: f64,
}

/// CSV with header `iteration,l_rgb,l_mask,l3d`.
pub fn write_fit_trace_csv(rows: &[FitTraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::from("iteration,l_rgb,l_mask,l3d\n");
    for r in rows {
        body.push_str(&format!("{},{},{},{}\n", r.iteration, r.l_rgb, r.l_mask, r.l3d));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

struct Objective<'a> {
    cams: &'a [Camera],
    targets: &'a [ImageBuffer],
    lambda_rgb: f64,
    lambda_mask: f64,
}

struct Evaluation {
    l_rgb: f64,
    l_mask: f64,
    l3d: f64,
    renders: Vec<ImageBuffer>,
}

impl Objective<'_> {
    /// Loss summed over views: lambda_rgb * mean squared RGB error plus
    /// lambda_mask * mean squared coverage-vs-mask error.
    fn eval(&self, set: &GaussianSet) -> Result<Evaluation> {
        let mut l_rgb = 0.0;
        let mut l_mask = 0.0;
        let mut renders = Vec::with_capacity(self.cams.len());
        for (cam, target) in self.cams.iter().zip(self.targets) {
            let img = render(set, cam)?;
            let mut acc = 0.0;
            for (a, b) in img.rgb.iter().zip(&target.rgb) {
                acc += (a - b) * (a - b);
            }
            l_rgb += acc / img.rgb.len() as f64;
            let mut acc = 0.0;
            for (a, b) in img.alpha.iter().zip(&target.alpha) {
                acc += (a - b) * (a - b);
            }
            l_mask += acc / img.alpha.len() as f64;
            renders.push(img);
        }
        Ok(Evaluation {
            l_rgb,
            l_mask,
            l3d: self.lambda_rgb * l_rgb + self.lambda_mask * l_mask,
            renders,
        })
    }

    /// Gradient of the total loss for the current renders, summed over views.
    fn gradient(&self, set: &GaussianSet, renders: &[ImageBuffer]) -> Result<Gradients> {
        let mut total = Gradients {
            color: vec![[0.0; 3]; set.len()],
            opacity_logit: vec![0.0; set.len()],
        };
        for ((cam, target), img) in self.cams.iter().zip(self.targets).zip(renders) {
            let mut upstream = ImageBuffer::zeros(img.width, img.height);
            let c_rgb = self.lambda_rgb * 2.0 / img.rgb.len() as f64;
            for ((u, a), b) in upstream.rgb.iter_mut().zip(&img.rgb).zip(&target.rgb) {
                *u = c_rgb * (a - b);
            }
            let c_mask = self.lambda_mask * 2.0 / img.alpha.len() as f64;
            for ((u, a), b) in upstream.alpha.iter_mut().zip(&img.alpha).zip(&target.alpha) {
                *u = c_mask * (a - b);
            }
            let g = backward_color_opacity(set, cam, &upstream)?;
            for i in 0..set.len() {
                for ch in 0..3 {
                    total.color[i][ch] += g.color[i][ch];
                }
                total.opacity_logit[i] += g.opacity_logit[i];
            }
        }
        Ok(total)
    }
}

fn descend(set: &GaussianSet, grad: &Gradients, step: f64) -> GaussianSet {
    let mut out = set.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        for ch in 0..3 {
            g.color[ch] = (g.color[ch] - step * grad.color[i][ch]).clamp(0.0, 1.0);
        }
        g.opacity_logit -= step * grad.opacity_logit[i];
    }
    out
}

/// Initial Gaussians for a fit: anchors dropped on the surface with base
/// attributes.
pub(crate) fn initial_set(mesh: &TriMesh, anchors: &AnchorSet) -> Result<GaussianSet> {
    anchors.validate(mesh)?;
    let coords: Vec<LocalCoord> = (0..anchors.len())
        .map(|i| LocalCoord {
            face: anchors.faces[i],
            barycentric: anchors.barycentric[i],
            offset: 0.0,
        })
        .collect();
    let positions = anchors.positions(mesh);
    let feats = vec![Vec::new(); positions.len()];
    let gaussians = stage2_query_attributes(
        &positions,
        &feats,
        &ZeroRegressor { out_dim: 11 },
        DEFAULT_LOG_SCALE_BOUND,
    )?;
    Ok(GaussianSet {
        gaussians,
        local_coords: Some(coords),
    })
}

/// Fits colors and opacities of surface-anchored Gaussians to the target
/// views. A target's alpha channel is its mask. Returns the fitted set and
/// the per-iteration loss curve (row 0 is the initialization).
#[allow(clippy::too_many_arguments)]
pub fn fit_gaussians(
    targets: &[ImageBuffer],
    mesh: &TriMesh,
    cams: &[Camera],
    anchors: &AnchorSet,
    iters: u32,
    lr: f64,
    lambda_rgb: f64,
    lambda_mask: f64,
) -> Result<(GaussianSet, Vec<FitTraceRow>)> {
    if targets.len() != cams.len() || targets.is_empty() {
        return Err(Error::invalid_input(format!(
            "{} targets for {} cameras",
            targets.len(),
            cams.len()
        )));
    }
    for (i, (t, c)) in targets.iter().zip(cams).enumerate() {
        if t.width != c.width || t.height != c.height {
            return Err(Error::invalid_input(format!(
                "target {i} is {}x{}, camera renders {}x{}",
                t.width, t.height, c.width, c.height
            )));
        }
    }
    if !(lr > 0.0) || !(lambda_rgb >= 0.0) || !(lambda_mask >= 0.0) {
        return Err(Error::invalid_input(
            "learning rate must be positive and loss weights non-negative",
        ));
    }

    let objective = Objective { cams, targets, lambda_rgb, lambda_mask };
    let mut set = initial_set(mesh, anchors)?;
    let mut cur = objective.eval(&set)?;
    let mut rows = vec![FitTraceRow {
        iteration: 0,
        l_rgb: cur.l_rgb,
        l_mask: cur.l_mask,
        l3d: cur.l3d,
    }];

    for it in 1..=iters {
        let grad = objective.gradient(&set, &cur.renders)?;
        let mut step = lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = descend(&set, &grad, step);
            let eval = objective.eval(&cand)?;
            if eval.l3d <= cur.l3d {
                accepted = Some((cand, eval));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, eval)) = accepted else {
            break; // no descent direction left at any step size
        };
        set = cand;
        cur = eval;
        rows.push(FitTraceRow {
            iteration: it,
            l_rgb: cur.l_rgb,
            l_mask: cur.l_mask,
            l3d: cur.l3d,
        });
    }
    Ok((set, rows))
}
