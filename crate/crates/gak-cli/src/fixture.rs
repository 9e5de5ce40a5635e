//! Built-in assets so every command can run without external data: fixture
//! meshes, an orbit camera rig framing them, and checker-textured reference
//! scenes that stand in for captured target images.

use gak_core::camera::Camera;
use gak_core::fixtures::{bending_cylinder, checker_scene, framing, icosphere, orbit_cameras, torus};
use gak_core::imgbuf::ImageBuffer;
use gak_core::mesh::{sample_surface, AnchorSet, TriMesh};
use gak_core::rng::substream;
use gak_core::splat::{render, GaussianSet};
use gak_core::{Error, Result};

use crate::config::RunConfig;

/// Mesh sequence for a run: configured OBJ paths if given, otherwise the
/// named fixture repeated (or bending, for the cylinder) across `frames`.
pub fn load_meshes(cfg: &RunConfig, frames: usize) -> Result<Vec<TriMesh>> {
    if !cfg.meshes.is_empty() {
        return cfg.meshes.iter().map(TriMesh::load_obj).collect();
    }
    Ok(match cfg.fixture.as_str() {
        "icosphere" => vec![icosphere(2); frames],
        "torus" => vec![torus(1.0, 0.4, 48, 24); frames],
        "cylinder" => bending_cylinder(frames, 0.5, 2.0, 16, 24, 0.8),
        other => return Err(Error::validation(format!("unknown fixture '{other}'"))),
    })
}

/// Camera rig: the configured JSON file, or `n` orbit cameras framing the
/// mesh bounding box at the run resolution.
pub fn load_cameras(cfg: &RunConfig, mesh: &TriMesh, n: usize) -> Result<Vec<Camera>> {
    if let Some(path) = &cfg.cameras {
        let rig = gak_core::camera::load_rig(path)?;
        if rig.is_empty() {
            return Err(Error::validation(format!("empty camera rig: {}", path.display())));
        }
        return Ok(rig);
    }
    let (center, half) = framing(mesh);
    let radius = 3.0 * half.max(1e-6);
    let res = cfg.resolution;
    Ok(orbit_cameras(n, radius, 0.25 * radius, center, res, res, f64::from(res)))
}

/// A checker-colored Gaussian scene on the mesh surface, used as the ground
/// truth behind synthetic targets. The anchor draw is derived from the run
/// seed so fits and sampling runs see the same scene.
pub fn reference_scene(
    cfg: &RunConfig,
    mesh: &TriMesh,
) -> Result<(GaussianSet, AnchorSet)> {
    use rand::RngCore;
    let anchor_seed = substream(cfg.seed, "fixture-scene", 0).next_u64();
    let anchors = sample_surface(mesh, cfg.anchor_count, anchor_seed)?;
    let scene = checker_scene(mesh, &anchors, cfg.checker_frequency)?;
    Ok((scene, anchors))
}

/// Renders the reference scene at the given cameras.
pub fn reference_targets(scene: &GaussianSet, cams: &[Camera]) -> Result<Vec<ImageBuffer>> {
    cams.iter().map(|c| render(scene, c)).collect()
}

/// Per-frame oracle targets for sampling runs. File-based runs read
/// `frame{F}_view{V}.png` from the target directory (missing later frames
/// fall back to the last present one inside the oracle denoiser); fixture
/// runs render the per-frame checker scene.
pub fn oracle_targets(
    cfg: &RunConfig,
    meshes: &[TriMesh],
    anchor_cams: &[Camera],
) -> Result<Vec<Vec<ImageBuffer>>> {
    if let Some(dir) = &cfg.targets {
        let mut frames = Vec::new();
        for f in 0..meshes.len() {
            let mut views = Vec::new();
            for v in 0..anchor_cams.len() {
                let path = dir.join(format!("frame{f}_view{v}.png"));
                if !path.exists() {
                    break;
                }
                views.push(ImageBuffer::load_png(&path)?);
            }
            if views.is_empty() {
                break;
            }
            if views.len() != anchor_cams.len() {
                return Err(Error::validation(format!(
                    "target frame {f} has {} views, rig has {}",
                    views.len(),
                    anchor_cams.len()
                )));
            }
            frames.push(views);
        }
        if frames.is_empty() {
            return Err(Error::validation(format!(
                "no frame0_view0.png style targets under {}",
                dir.display()
            )));
        }
        return Ok(frames);
    }
    meshes
        .iter()
        .map(|mesh| {
            let (scene, _) = reference_scene(cfg, mesh)?;
            reference_targets(&scene, anchor_cams)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rig_frames_every_fixture() {
        for name in ["icosphere", "torus", "cylinder"] {
            let cfg = RunConfig { fixture: name.into(), resolution: 32, ..RunConfig::default() };
            let meshes = load_meshes(&cfg, 2).unwrap();
            assert_eq!(meshes.len(), 2);
            let cams = load_cameras(&cfg, &meshes[0], 4).unwrap();
            assert_eq!(cams.len(), 4);
            // Every vertex projects inside the image on every view.
            for cam in &cams {
                for v in &meshes[0].vertices {
                    let p = cam.project(*v);
                    assert!(!p.behind);
                    assert!(p.u >= 0.0 && p.u < 32.0, "u = {}", p.u);
                    assert!(p.v >= 0.0 && p.v < 32.0, "v = {}", p.v);
                }
            }
        }
    }

    #[test]
    fn oracle_targets_render_once_per_frame() {
        let cfg = RunConfig {
            fixture: "cylinder".into(),
            resolution: 16,
            anchor_count: 200,
            ..RunConfig::default()
        };
        let meshes = load_meshes(&cfg, 2).unwrap();
        let cams = load_cameras(&cfg, &meshes[0], 2).unwrap();
        let frames = oracle_targets(&cfg, &meshes, &cams).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].len(), 2);
        // The cylinder bends between frames, so the targets differ.
        assert!(frames[0][0].mean_abs_diff(&frames[1][0]).unwrap() > 0.0);
    }
}
