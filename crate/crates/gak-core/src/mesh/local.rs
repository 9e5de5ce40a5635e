//! Surface-local coordinates: barycentric position on a face plus a signed
//! offset along the face normal. The same coordinate evaluated against two
//! poses of one topology transfers a point between them.

use nalgebra::Point3;

use super::{MeshBvh, TriMesh};
use crate::error::{Error, Result};

/// Default bound on the |offset| component of a local coordinate, in meters.
pub const DEFAULT_OFFSET_CLAMP: f64 = 0.10;

/// Closest point on a single triangle together with its barycentric weights.
#[derive(Debug, Clone, Copy)]
pub struct TrianglePoint {
    pub point: Point3<f64>,
    pub barycentric: [f64; 3],
}

/// Point expressed relative to a mesh face: `P = l1*A + l2*B + l3*C + m*n`.
///
/// Weights are clamped to the face (each in [0,1], summing to 1) and the
/// offset `m` is signed: positive on the side the face normal points to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCoord {
    pub face: u32,
    pub barycentric: [f64; 3],
    pub offset: f64,
}

impl LocalCoord {
    pub fn validate(&self, mesh: &TriMesh, offset_clamp: f64) -> Result<()> {
        if self.face as usize >= mesh.face_count() {
            return Err(Error::invalid_input(format!(
                "face {} out of range ({} faces)",
                self.face,
                mesh.face_count()
            )));
        }
        let [l1, l2, l3] = self.barycentric;
        let sum = l1 + l2 + l3;
        if !(l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0 && (sum - 1.0).abs() <= 1e-12) {
            return Err(Error::validation(format!(
                "barycentric weights ({l1}, {l2}, {l3}) are not a clamped partition of 1"
            )));
        }
        if !(self.offset.abs() <= offset_clamp + 1e-12) {
            return Err(Error::validation(format!(
                "offset {} exceeds clamp {offset_clamp}",
                self.offset
            )));
        }
        Ok(())
    }
}

/// Closest point on triangle (a, b, c) to `p`, via the Voronoi-region walk.
/// The returned barycentric weights are exact for the region that matched, so
/// vertex and edge hits come back with exact zeros.
pub fn closest_point_triangle(
    p: Point3<f64>,
    a: Point3<f64>,
    b: Point3<f64>,
    c: Point3<f64>,
) -> TrianglePoint {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return TrianglePoint { point: a, barycentric: [1.0, 0.0, 0.0] };
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return TrianglePoint { point: b, barycentric: [0.0, 1.0, 0.0] };
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return TrianglePoint {
            point: a + ab * v,
            barycentric: [1.0 - v, v, 0.0],
        };
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return TrianglePoint { point: c, barycentric: [0.0, 0.0, 1.0] };
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return TrianglePoint {
            point: a + ac * w,
            barycentric: [1.0 - w, 0.0, w],
        };
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return TrianglePoint {
            point: b + (c - b) * w,
            barycentric: [0.0, 1.0 - w, w],
        };
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    TrianglePoint {
        point: a + ab * v + ac * w,
        barycentric: [1.0 - v - w, v, w],
    }
}

/// Squared distance from `p` to `face` plus the on-face closest point.
pub(crate) fn face_distance2(mesh: &TriMesh, face: u32, p: Point3<f64>) -> (f64, TrianglePoint) {
    let [a, b, c] = mesh.face_vertices(face);
    let tp = closest_point_triangle(p, a, b, c);
    ((p - tp.point).norm_squared(), tp)
}

/// Builds the final coordinate for a chosen face: keeps the clamped
/// barycentric weights and measures the signed normal offset, clamped to
/// `offset_clamp`.
pub(crate) fn finish_coord(
    mesh: &TriMesh,
    face: u32,
    tp: &TrianglePoint,
    p: Point3<f64>,
    offset_clamp: f64,
) -> LocalCoord {
    let n = mesh.face_normal(face);
    let m = (p - tp.point).dot(&n);
    LocalCoord {
        face,
        barycentric: tp.barycentric,
        offset: m.clamp(-offset_clamp, offset_clamp),
    }
}

/// Local coordinate of the point on `mesh` nearest to `p`, found through the
/// spatial index. Distance ties pick the lowest face index, matching an
/// exhaustive scan in face order.
pub fn closest_point_local_coords(
    mesh: &TriMesh,
    index: &MeshBvh,
    p: Point3<f64>,
    offset_clamp: f64,
) -> Result<LocalCoord> {
    let (face, tp) = index.closest_face(mesh, p)?;
    Ok(finish_coord(mesh, face, &tp, p, offset_clamp))
}

/// Evaluates `P = l1*A + l2*B + l3*C + m*n` on the given mesh.
pub fn local_to_world(mesh: &TriMesh, coord: &LocalCoord) -> Result<Point3<f64>> {
    if coord.face as usize >= mesh.face_count() {
        return Err(Error::invalid_input(format!(
            "face {} out of range ({} faces)",
            coord.face,
            mesh.face_count()
        )));
    }
    let [a, b, c] = mesh.face_vertices(coord.face);
    let [l1, l2, l3] = coord.barycentric;
    let on_face = Point3::from(a.coords * l1 + b.coords * l2 + c.coords * l3);
    Ok(on_face + mesh.face_normal(coord.face) * coord.offset)
}

/// Re-poses coordinates captured on one pose against `mesh_cur`, which must
/// share the topology (checked by face count).
pub fn repose(coords: &[LocalCoord], mesh_cur: &TriMesh) -> Result<Vec<Point3<f64>>> {
    if let Some(bad) = coords.iter().find(|c| c.face as usize >= mesh_cur.face_count()) {
        return Err(Error::invalid_input(format!(
            "topology mismatch: coordinate references face {} but mesh has {} faces",
            bad.face,
            mesh_cur.face_count()
        )));
    }
    coords.iter().map(|c| local_to_world(mesh_cur, c)).collect()
}
