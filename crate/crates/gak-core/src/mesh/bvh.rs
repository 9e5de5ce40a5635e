//! Bounding volume hierarchy for nearest-face queries.
//!
//! Median split over face centroids, small leaves, branch-and-bound descent.
//! Pruning keeps nodes whose box distance equals the current best so that
//! distance ties resolve to the lowest face index, exactly like a linear scan.

use nalgebra::Point3;

use super::local::{face_distance2, TrianglePoint};
use super::TriMesh;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Point3<f64>,
    max: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: Point3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    fn distance2(&self, p: Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
            d2 += d * d;
        }
        d2
    }
}

#[derive(Debug)]
enum NodeKind {
    Internal { left: u32, right: u32 },
    // Range into `order`.
    Leaf { start: u32, len: u32 },
}

#[derive(Debug)]
struct Node {
    aabb: Aabb,
    kind: NodeKind,
}

/// Spatial index over the faces of one mesh snapshot. Vertex positions are
/// baked into the node boxes, so rebuild after deforming the mesh.
#[derive(Debug)]
pub struct MeshBvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    face_count: usize,
}

impl MeshBvh {
    pub fn build(mesh: &TriMesh) -> Result<Self> {
        if mesh.face_count() == 0 {
            return Err(Error::invalid_input("cannot index an empty mesh"));
        }
        let mut order: Vec<u32> = (0..mesh.face_count() as u32).collect();
        let mut nodes = Vec::new();
        build_node(mesh, &mut order, 0, mesh.face_count(), &mut nodes);
        Ok(MeshBvh {
            nodes,
            order,
            face_count: mesh.face_count(),
        })
    }

    /// Face nearest to `p` plus its on-face closest point. `mesh` must be the
    /// mesh this index was built from.
    pub fn closest_face(&self, mesh: &TriMesh, p: Point3<f64>) -> Result<(u32, TrianglePoint)> {
        if mesh.face_count() != self.face_count {
            return Err(Error::invalid_input(format!(
                "index built for {} faces, mesh has {}",
                self.face_count,
                mesh.face_count()
            )));
        }
        let mut best_d2 = f64::INFINITY;
        let mut best_face = u32::MAX;
        let mut best_tp: Option<TrianglePoint> = None;
        let mut stack = vec![0u32];
        while let Some(node_idx) = stack.pop() {
            let node = &self.nodes[node_idx as usize];
            // `>` keeps equal-distance nodes alive for the index tie-break.
            if node.aabb.distance2(p) > best_d2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, len } => {
                    for &face in &self.order[start as usize..(start + len) as usize] {
                        let (d2, tp) = face_distance2(mesh, face, p);
                        if d2 < best_d2 || (d2 == best_d2 && face < best_face) {
                            best_d2 = d2;
                            best_face = face;
                            best_tp = Some(tp);
                        }
                    }
                }
                NodeKind::Internal { left, right } => {
                    // Visit the nearer child first for tighter early bounds.
                    let dl = self.nodes[left as usize].aabb.distance2(p);
                    let dr = self.nodes[right as usize].aabb.distance2(p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        Ok((best_face, best_tp.expect("non-empty index")))
    }
}

fn build_node(
    mesh: &TriMesh,
    order: &mut [u32],
    start: usize,
    len: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut aabb = Aabb::empty();
    for &f in &order[start..start + len] {
        for v in mesh.face_vertices(f) {
            aabb.grow(v);
        }
    }
    let idx = nodes.len() as u32;
    if len <= LEAF_SIZE {
        nodes.push(Node {
            aabb,
            kind: NodeKind::Leaf { start: start as u32, len: len as u32 },
        });
        return idx;
    }

    let centroid = |f: u32| {
        let [a, b, c] = mesh.face_vertices(f);
        (a.coords + b.coords + c.coords) / 3.0
    };
    let mut cmin = [f64::INFINITY; 3];
    let mut cmax = [f64::NEG_INFINITY; 3];
    for &f in &order[start..start + len] {
        let c = centroid(f);
        for i in 0..3 {
            cmin[i] = cmin[i].min(c[i]);
            cmax[i] = cmax[i].max(c[i]);
        }
    }
    let axis = (0..3)
        .max_by(|&i, &j| {
            (cmax[i] - cmin[i]).partial_cmp(&(cmax[j] - cmin[j])).unwrap()
        })
        .unwrap();

    let slice = &mut order[start..start + len];
    let mid = len / 2;
    // Tie-break on face id keeps the build order-independent of sort
    // internals, hence deterministic.
    slice.select_nth_unstable_by(mid, |&a, &b| {
        centroid(a)[axis]
            .partial_cmp(&centroid(b)[axis])
            .unwrap()
            .then(a.cmp(&b))
    });

    nodes.push(Node {
        aabb,
        kind: NodeKind::Internal { left: 0, right: 0 },
    });
    let left = build_node(mesh, order, start, mid, nodes);
    let right = build_node(mesh, order, start + mid, len - mid, nodes);
    nodes[idx as usize].kind = NodeKind::Internal { left, right };
    idx
}
