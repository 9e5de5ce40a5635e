//! Z-buffered triangle rasterization producing per-pixel face labels and
//! camera-space depth. These are the condition maps consumed by the
//! rectifier's feature gather and the occlusion source for visibility tests.

use std::path::Path;

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Per-pixel integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn filled(width: u32, height: u32, label: u32) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![label; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    /// 8-bit grayscale PNG; labels above 255 do not fit and are an error.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(&big) = self.labels.iter().find(|&&l| l > 255) {
            return Err(Error::validation(format!(
                "label {big} exceeds the 8-bit PNG range"
            )));
        }
        let bytes: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        let img = image::GrayImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::validation(format!("png decode {}: {e}", path.display())))?
            .to_luma8();
        let (width, height) = img.dimensions();
        Ok(LabelMap {
            width,
            height,
            labels: img.into_raw().into_iter().map(u32::from).collect(),
        })
    }
}

/// Camera-space z per pixel; +infinity marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn background(width: u32, height: u32) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![f64::INFINITY; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.depth[(y * self.width + x) as usize]
    }
}

/// Boundary ownership for pixels exactly on an edge: top and left edges claim
/// their pixels, so triangles sharing an edge cover each pixel exactly once.
/// Assumes edges normalized to a positive-area winding in y-down screen
/// coordinates.
#[inline]
fn is_top_left(du: f64, dv: f64) -> bool {
    (dv == 0.0 && du > 0.0) || dv < 0.0
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Rasterizes the mesh into a label map and a depth map. Pixel centers sit at
/// integer coordinates; the nearest face wins each pixel, distance ties going
/// to the lower face index. Faces are near-clipped, and fragments beyond the
/// far plane are dropped.
pub fn rasterize_labels_depth(mesh: &TriMesh, camera: &Camera) -> Result<(LabelMap, DepthMap)> {
    camera.validate()?;
    mesh.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut labels = LabelMap::filled(w, h, 0);
    let mut depth = DepthMap::background(w, h);

    for face in 0..mesh.face_count() as u32 {
        let cam_verts: Vec<Vector3<f64>> = mesh
            .face_vertices(face)
            .iter()
            .map(|&p| camera.world_to_camera(p))
            .collect();
        let clipped = clip_near(&cam_verts, camera.near);
        if clipped.len() < 3 {
            continue;
        }
        let label = mesh.labels[face as usize];
        for i in 1..clipped.len() - 1 {
            raster_triangle(
                [clipped[0], clipped[i], clipped[i + 1]],
                camera,
                label,
                &mut labels,
                &mut depth,
            );
        }
    }
    Ok((labels, depth))
}

/// Sutherland-Hodgman against the z = near plane, keeping z >= near.
fn clip_near(poly: &[Vector3<f64>], near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (a_in, b_in) = (a.z >= near, b.z >= near);
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn raster_triangle(
    cam: [Vector3<f64>; 3],
    camera: &Camera,
    label: u32,
    labels: &mut LabelMap,
    depth: &mut DepthMap,
) {
    let project = |p: Vector3<f64>| {
        (
            camera.fx * p.x / p.z + camera.cx,
            camera.fy * p.y / p.z + camera.cy,
            p.z,
        )
    };
    let mut v = [project(cam[0]), project(cam[1]), project(cam[2])];

    let area2 = edge(v[0].0, v[0].1, v[1].0, v[1].1, v[2].0, v[2].1);
    if area2 == 0.0 {
        return;
    }
    if area2 < 0.0 {
        v.swap(1, 2);
    }
    let area2 = area2.abs();

    let min_x = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as i64;
    let max_x = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor() as i64;
    let min_y = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as i64;
    let max_y = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor() as i64;
    let max_x = max_x.min(labels.width as i64 - 1);
    let max_y = max_y.min(labels.height as i64 - 1);

    let inv_z = [1.0 / v[0].2, 1.0 / v[1].2, 1.0 / v[2].2];
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let (px, py) = (x as f64, y as f64);
            let e0 = edge(v[1].0, v[1].1, v[2].0, v[2].1, px, py);
            let e1 = edge(v[2].0, v[2].1, v[0].0, v[0].1, px, py);
            let e2 = edge(v[0].0, v[0].1, v[1].0, v[1].1, px, py);
            let inside = |e: f64, a: (f64, f64, f64), b: (f64, f64, f64)| {
                e > 0.0 || (e == 0.0 && is_top_left(b.0 - a.0, b.1 - a.1))
            };
            if !(inside(e0, v[1], v[2]) && inside(e1, v[2], v[0]) && inside(e2, v[0], v[1])) {
                continue;
            }
            // 1/z is linear in screen space, so this interpolation is
            // perspective-correct for depth.
            let z = area2 / (e0 * inv_z[0] + e1 * inv_z[1] + e2 * inv_z[2]);
            if z > camera.far {
                continue;
            }
            let idx = (y as u32 * labels.width + x as u32) as usize;
            if z < depth.depth[idx] {
                depth.depth[idx] = z;
                labels.labels[idx] = label;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Point3};

    fn camera_64() -> Camera {
        Camera {
            fx: 64.0,
            fy: 64.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
            near: 0.1,
            far: 100.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn screen_to_world(cam: &Camera, u: f64, v: f64, z: f64) -> Point3<f64> {
        cam.unproject(u, v, z)
    }

    #[test]
    fn covering_triangle_labels_every_pixel() {
        let cam = camera_64();
        // Big triangle at z = 2 that covers the whole image.
        let mut mesh = TriMesh::new(
            vec![
                screen_to_world(&cam, -200.0, -200.0, 2.0),
                screen_to_world(&cam, 400.0, -200.0, 2.0),
                screen_to_world(&cam, -200.0, 400.0, 2.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        mesh.labels = vec![7];
        let (labels, depth) = rasterize_labels_depth(&mesh, &cam).unwrap();
        assert!(labels.labels.iter().all(|&l| l == 7));
        for d in &depth.depth {
            assert!((d - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nearer_face_wins_and_background_keeps_sentinel() {
        let cam = camera_64();
        let mut mesh = TriMesh::new(
            vec![
                // Face 0 at z = 3: covers pixels with u + v < 100.
                screen_to_world(&cam, -100.0, -100.0, 3.0),
                screen_to_world(&cam, 200.0, -100.0, 3.0),
                screen_to_world(&cam, -100.0, 200.0, 3.0),
                // Face 1 at z = 1.5: leftward wedge whose apex sits at (20, 32).
                screen_to_world(&cam, 20.0, 32.0, 1.5),
                screen_to_world(&cam, -500.0, -200.0, 1.5),
                screen_to_world(&cam, -500.0, 264.0, 1.5),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        mesh.labels = vec![1, 2];
        let (labels, depth) = rasterize_labels_depth(&mesh, &cam).unwrap();
        // Both faces cover (0, 32); the nearer wedge wins.
        assert_eq!(labels.at(0, 32), 2);
        assert!((depth.at(0, 32) - 1.5).abs() < 1e-9);
        // Only face 0 reaches (63, 32).
        assert_eq!(labels.at(63, 32), 1);
        assert!((depth.at(63, 32) - 3.0).abs() < 1e-9);
        // (63, 63) is past both faces: background.
        assert_eq!(labels.at(63, 63), 0);
        assert_eq!(depth.at(63, 63), f64::INFINITY);
    }

    #[test]
    fn shared_edge_pixels_are_claimed_exactly_once() {
        let cam = camera_64();
        // A quad split along its diagonal; both triangles at the same depth
        // with different labels. Every covered pixel must get exactly one
        // label, so flipping the face order must flip only diagonal pixels.
        let z = 2.0;
        let corners = [
            screen_to_world(&cam, 10.0, 10.0, z),
            screen_to_world(&cam, 50.0, 10.0, z),
            screen_to_world(&cam, 50.0, 50.0, z),
            screen_to_world(&cam, 10.0, 50.0, z),
        ];
        let mut mesh = TriMesh::new(
            corners.to_vec(),
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        mesh.labels = vec![1, 2];
        let (labels, _) = rasterize_labels_depth(&mesh, &cam).unwrap();

        let mut counts = [0usize; 3];
        for y in 0..64 {
            for x in 0..64 {
                counts[labels.at(x, y) as usize] += 1;
            }
        }
        // 40x40 half-open square once the fill rule settles ownership.
        assert_eq!(counts[1] + counts[2], 1600, "counts {counts:?}");

        let mut swapped = mesh.clone();
        swapped.faces.swap(0, 1);
        swapped.labels = vec![2, 1];
        let (labels2, _) = rasterize_labels_depth(&swapped, &cam).unwrap();
        let mut counts2 = [0usize; 3];
        for &l in &labels2.labels {
            counts2[l as usize] += 1;
        }
        assert_eq!(counts[1] + counts[2], counts2[1] + counts2[2]);
    }

    #[test]
    fn depth_ties_keep_the_lower_face_index() {
        let cam = camera_64();
        let z = 2.0;
        // Two identical triangles, identical depth, labels 9 then 4.
        let tri = [
            screen_to_world(&cam, -200.0, -200.0, z),
            screen_to_world(&cam, 400.0, -200.0, z),
            screen_to_world(&cam, -200.0, 400.0, z),
        ];
        let mut mesh = TriMesh::new(
            vec![tri[0], tri[1], tri[2], tri[0], tri[1], tri[2]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        mesh.labels = vec![9, 4];
        let (labels, _) = rasterize_labels_depth(&mesh, &cam).unwrap();
        assert!(labels.labels.iter().all(|&l| l == 9));
    }

    #[test]
    fn faces_behind_the_camera_are_clipped_not_smeared() {
        let cam = camera_64();
        // Triangle spanning the camera plane: one vertex behind.
        let mesh = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 2.0),
                Point3::new(1.0, 0.0, 2.0),
                Point3::new(0.0, 0.0, -1.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (labels, depth) = rasterize_labels_depth(&mesh, &cam).unwrap();
        // Must not panic and must produce only finite depths where labeled.
        for (l, d) in labels.labels.iter().zip(&depth.depth) {
            if *d < f64::INFINITY {
                assert!(*d >= cam.near - 1e-12);
            } else {
                assert_eq!(*l, 0);
            }
        }
    }

    #[test]
    fn label_png_round_trip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.png");
        let map = LabelMap {
            width: 4,
            height: 2,
            labels: vec![0, 1, 2, 3, 250, 251, 252, 255],
        };
        map.save_png(&path).unwrap();
        assert_eq!(LabelMap::load_png(&path).unwrap(), map);

        let bad = LabelMap { width: 1, height: 1, labels: vec![300] };
        assert!(bad.save_png(dir.path().join("bad.png")).is_err());
    }
}
