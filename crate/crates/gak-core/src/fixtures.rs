//! Procedural test assets: canonical meshes, an orbiting camera rig, and a
//! reference Gaussian scene. Everything here is deterministic, so tests and
//! benchmarks can rebuild identical inputs from a few integers.

use nalgebra::{Point3, Vector3};
use std::collections::HashMap;

use crate::camera::Camera;
use crate::error::Result;
use crate::mesh::{AnchorSet, TriMesh};
use crate::splat::GaussianSet;

/// Right triangle in the z = 0 plane with legs of length 1 on the x and y
/// axes. The smallest usable mesh.
pub fn unit_triangle() -> TriMesh {
    TriMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2]],
    )
    .expect("triangle fixture is valid")
}

/// Unit icosahedron vertices in a fixed cyclic-coordinate order.
fn icosahedron_vertices() -> Vec<Point3<f64>> {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts = Vec::with_capacity(12);
    for (a, b) in [(1.0, phi), (-1.0, phi), (1.0, -phi), (-1.0, -phi)] {
        verts.push(Point3::new(a, b, 0.0));
        verts.push(Point3::new(0.0, a, b));
        verts.push(Point3::new(b, 0.0, a));
    }
    for v in &mut verts {
        v.coords.normalize_mut();
    }
    verts
}

const ICOSAHEDRON_FACES: [[u32; 3]; 20] = [
    [1, 0, 3],
    [1, 2, 0],
    [1, 3, 8],
    [1, 4, 2],
    [1, 8, 4],
    [3, 0, 7],
    [4, 6, 2],
    [5, 0, 2],
    [5, 2, 6],
    [5, 6, 10],
    [5, 7, 0],
    [5, 10, 7],
    [9, 4, 8],
    [9, 6, 4],
    [9, 10, 6],
    [11, 3, 7],
    [11, 7, 10],
    [11, 8, 3],
    [11, 9, 8],
    [11, 10, 9],
];

/// Unit sphere built by midpoint subdivision of an icosahedron, with every
/// vertex pushed back onto the sphere. `subdivisions` quadruples the face
/// count each time: 20, 80, 320, 1280, ... Faces are labeled 1..=20 by the
/// icosahedron face they descend from.
pub fn icosphere(subdivisions: u32) -> TriMesh {
    let mut verts = icosahedron_vertices();
    let mut faces: Vec<[u32; 3]> = ICOSAHEDRON_FACES.to_vec();
    let mut labels: Vec<u32> = (1..=20).collect();

    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |i: u32, j: u32, verts: &mut Vec<Point3<f64>>| -> u32 {
            let key = (i.min(j), i.max(j));
            *cache.entry(key).or_insert_with(|| {
                let m = (verts[i as usize].coords + verts[j as usize].coords).normalize();
                verts.push(Point3::from(m));
                (verts.len() - 1) as u32
            })
        };
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        let mut next_labels = Vec::with_capacity(faces.len() * 4);
        for (face, &label) in faces.iter().zip(&labels) {
            let [a, b, c] = *face;
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next_faces.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            next_labels.extend_from_slice(&[label; 4]);
        }
        faces = next_faces;
        labels = next_labels;
    }

    let mut mesh = TriMesh::new(verts, faces).expect("icosphere fixture is valid");
    mesh.labels = labels;
    mesh
}

/// Torus around the z axis: `major` is the center-circle radius, `minor` the
/// tube radius, with `n_major` x `n_minor` quads split into triangles. Faces
/// are labeled 1..=4 by the quadrant of the major angle.
pub fn torus(major: f64, minor: f64, n_major: u32, n_minor: u32) -> TriMesh {
    assert!(n_major >= 3 && n_minor >= 3, "torus needs at least 3x3 segments");
    assert!(minor > 0.0 && major > minor, "torus needs 0 < minor < major");
    let tau = std::f64::consts::TAU;
    let mut verts = Vec::with_capacity((n_major * n_minor) as usize);
    for i in 0..n_major {
        let theta = tau * f64::from(i) / f64::from(n_major);
        let (sin_t, cos_t) = theta.sin_cos();
        for j in 0..n_minor {
            let phi = tau * f64::from(j) / f64::from(n_minor);
            let (sin_p, cos_p) = phi.sin_cos();
            let ring = major + minor * cos_p;
            verts.push(Point3::new(ring * cos_t, ring * sin_t, minor * sin_p));
        }
    }
    let at = |i: u32, j: u32| (i % n_major) * n_minor + (j % n_minor);
    let mut faces = Vec::with_capacity((2 * n_major * n_minor) as usize);
    let mut labels = Vec::with_capacity(faces.capacity());
    for i in 0..n_major {
        let label = 1 + i * 4 / n_major;
        for j in 0..n_minor {
            let (v00, v10) = (at(i, j), at(i + 1, j));
            let (v11, v01) = (at(i + 1, j + 1), at(i, j + 1));
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
            labels.extend_from_slice(&[label; 2]);
        }
    }
    let mut mesh = TriMesh::new(verts, faces).expect("torus fixture is valid");
    mesh.labels = labels;
    mesh
}

/// Open tube of the given radius along +z from 0 to `height`, bent about the
/// y axis by a per-frame angle growing linearly from 0 (frame 0 is straight)
/// to `max_bend` radians. All frames share faces and labels, so the sequence
/// is valid input for cross-frame coordinate transfer. Faces carry one of
/// three labels by height band.
pub fn bending_cylinder(
    frames: usize,
    radius: f64,
    height: f64,
    n_rings: u32,
    n_segments: u32,
    max_bend: f64,
) -> Vec<TriMesh> {
    assert!(frames >= 1, "need at least one frame");
    assert!(n_rings >= 1 && n_segments >= 3, "need at least 1 ring and 3 segments");
    let tau = std::f64::consts::TAU;
    let mut rest = Vec::with_capacity(((n_rings + 1) * n_segments) as usize);
    for k in 0..=n_rings {
        let z = height * f64::from(k) / f64::from(n_rings);
        for s in 0..n_segments {
            let a = tau * f64::from(s) / f64::from(n_segments);
            rest.push(Point3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let at = |k: u32, s: u32| k * n_segments + (s % n_segments);
    let mut faces = Vec::with_capacity((2 * n_rings * n_segments) as usize);
    let mut labels = Vec::with_capacity(faces.capacity());
    for k in 0..n_rings {
        for s in 0..n_segments {
            let (v00, v10) = (at(k, s), at(k, s + 1));
            let (v11, v01) = (at(k + 1, s + 1), at(k + 1, s));
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
            let mid_z = height * (f64::from(k) + 0.5) / f64::from(n_rings);
            let band = ((3.0 * mid_z / height) as u32).min(2);
            labels.extend_from_slice(&[band + 1; 2]);
        }
    }

    (0..frames)
        .map(|f| {
            let bend = if frames == 1 {
                0.0
            } else {
                max_bend * f as f64 / (frames - 1) as f64
            };
            let verts = rest.iter().map(|p| bend_about_y(*p, bend, height)).collect();
            let mut mesh =
                TriMesh::new(verts, faces.clone()).expect("cylinder fixture is valid");
            mesh.labels = labels.clone();
            mesh
        })
        .collect()
}

/// Circular-arc bend: height z maps to arc length along a circle of radius
/// height/angle in the x-z plane. angle = 0 is the identity.
fn bend_about_y(p: Point3<f64>, angle: f64, height: f64) -> Point3<f64> {
    if angle == 0.0 {
        return p;
    }
    let curvature = angle / height;
    let rho = 1.0 / curvature - p.x;
    let turn = curvature * p.z;
    Point3::new(
        1.0 / curvature - rho * turn.cos(),
        p.y,
        rho * turn.sin(),
    )
}

/// Bounding-box center and half-diagonal of a mesh, for framing cameras.
pub fn framing(mesh: &TriMesh) -> (Point3<f64>, f64) {
    let mut lo = mesh.vertices[0].coords;
    let mut hi = lo;
    for v in &mesh.vertices {
        lo = lo.inf(&v.coords);
        hi = hi.sup(&v.coords);
    }
    (Point3::from((lo + hi) / 2.0), (hi - lo).norm() / 2.0)
}

/// `n` cameras on a horizontal circle of the given radius at height `z_eye`,
/// all aimed at `target` with +z up, sharing square pixels, a centered
/// principal point, and the given focal length in pixels.
pub fn orbit_cameras(
    n: usize,
    radius: f64,
    z_eye: f64,
    target: Point3<f64>,
    width: u32,
    height: u32,
    focal: f64,
) -> Vec<Camera> {
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let a = tau * i as f64 / n as f64;
            let eye = target + Vector3::new(radius * a.cos(), radius * a.sin(), z_eye);
            Camera::look_at(eye, target, Vector3::z(), focal, focal, width, height, 0.05, 100.0)
        })
        .collect()
}

/// Two-tone 3D checkerboard color for a world position at the given spatial
/// frequency.
pub fn checker_color(p: &Point3<f64>, freq: f64) -> [f64; 3] {
    let parity = (p.x * freq).floor() + (p.y * freq).floor() + (p.z * freq).floor();
    if (parity as i64).rem_euclid(2) == 0 {
        [0.85, 0.30, 0.20]
    } else {
        [0.15, 0.50, 0.90]
    }
}

/// Reference scene: surface-anchored Gaussians with base geometry and
/// checkerboard colors. Serves as ground truth for fitting and sampling
/// tests, since its renders are reproducible from the mesh and anchors.
pub fn checker_scene(mesh: &TriMesh, anchors: &AnchorSet, freq: f64) -> Result<GaussianSet> {
    let mut set = crate::rectify::fit_initial_set(mesh, anchors)?;
    for g in &mut set.gaussians {
        g.color = checker_color(&g.center, freq);
    }
    Ok(set)
}
