//! Triangle meshes and the surface-local coordinate frame built on them.
//!
//! A [`TriMesh`] is the canonical driving surface: indexed triangles with
//! per-face integer labels and optional vertex colors. Points near the surface
//! are expressed as [`LocalCoord`] values (face, barycentric weights, signed
//! normal offset) so they can be transferred between poses of the same
//! topology. Queries against large meshes go through [`MeshBvh`].

mod bvh;
mod local;
mod sample;

pub use bvh::MeshBvh;
pub use local::{
    closest_point_local_coords, closest_point_triangle, local_to_world, repose, LocalCoord,
    TrianglePoint, DEFAULT_OFFSET_CLAMP,
};
pub use sample::{sample_surface, AnchorSet};

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Smallest face area accepted by validation; anything at or below this is
/// reported as degenerate because its normal is numerically meaningless.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Indexed triangle mesh with per-face labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// One label per face; 0 is the background convention in rendered maps.
    pub labels: Vec<u32>,
    pub vertex_colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let labels = vec![0; faces.len()];
        let mesh = TriMesh {
            vertices,
            faces,
            labels,
            vertex_colors: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: u32) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face as usize];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unit normal of `face` for the current vertex positions. Orientation
    /// follows the winding order in the face record.
    pub fn face_normal(&self, face: u32) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, face: u32) -> f64 {
        let [a, b, c] = self.face_vertices(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len() as u32).map(|f| self.face_area(f)).sum()
    }

    /// Checks index bounds, non-degeneracy, and parallel-array lengths.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.faces.len() {
            return Err(Error::validation(format!(
                "label count {} does not match face count {}",
                self.labels.len(),
                self.faces.len()
            )));
        }
        if let Some(colors) = &self.vertex_colors {
            if colors.len() != self.vertices.len() {
                return Err(Error::validation(format!(
                    "vertex color count {} does not match vertex count {}",
                    colors.len(),
                    self.vertices.len()
                )));
            }
        }
        for (i, face) in self.faces.iter().enumerate() {
            for &v in face {
                if v as usize >= self.vertices.len() {
                    return Err(Error::validation(format!(
                        "face {i} references vertex {v}, but mesh has {} vertices",
                        self.vertices.len()
                    )));
                }
            }
            let [a, b, c] = self.face_vertices(i as u32);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if !(area > MIN_FACE_AREA) {
                return Err(Error::validation(format!(
                    "face {i} is degenerate (area {area:.3e})"
                )));
            }
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.coords.iter().all(|x| x.is_finite()) {
                return Err(Error::validation(format!("vertex {i} is not finite")));
            }
        }
        Ok(())
    }

    /// Loads a Wavefront OBJ restricted to `v` and `f` records (triangles
    /// only). `v` may carry an optional RGB triple after the position. If a
    /// sidecar label file (see [`label_sidecar_path`]) exists it is read as
    /// one integer per face line; otherwise all labels are 0.
    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);

        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces: Vec<[u32; 3]> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let nums: Vec<f64> = tokens
                        .map(|t| {
                            t.parse::<f64>().map_err(|_| {
                                Error::malformed(path, lineno, format!("bad vertex component {t:?}"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    match nums.len() {
                        3 => vertices.push(Point3::new(nums[0], nums[1], nums[2])),
                        6 => {
                            vertices.push(Point3::new(nums[0], nums[1], nums[2]));
                            colors.push((vertices.len() - 1, [nums[3], nums[4], nums[5]]));
                        }
                        n => {
                            return Err(Error::malformed(
                                path,
                                lineno,
                                format!("vertex record has {n} components, expected 3 or 6"),
                            ))
                        }
                    }
                }
                Some("f") => {
                    let idxs: Vec<u32> = tokens
                        .map(|t| parse_face_index(t, vertices.len(), path, lineno))
                        .collect::<Result<_>>()?;
                    match idxs.len() {
                        3 => faces.push([idxs[0], idxs[1], idxs[2]]),
                        n => {
                            return Err(Error::malformed(
                                path,
                                lineno,
                                format!("face has {n} vertices, only triangles are supported"),
                            ))
                        }
                    }
                }
                // Ignore comments and auxiliary records (vn, vt, o, g, ...).
                _ => {}
            }
        }

        let vertex_colors = if colors.is_empty() {
            None
        } else {
            let mut all = vec![[1.0, 1.0, 1.0]; vertices.len()];
            for (i, c) in colors {
                all[i] = c;
            }
            Some(all)
        };

        let labels = load_labels(&label_sidecar_path(path), faces.len())?;
        let mesh = TriMesh {
            vertices,
            faces,
            labels,
            vertex_colors,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Writes `v`/`f` records (plus the label sidecar when any label is
    /// nonzero). Inverse of [`TriMesh::load_obj`] for meshes produced here.
    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let write = |out: &mut dyn Write, s: String| -> Result<()> {
            out.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
        };
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.vertex_colors {
                Some(colors) => {
                    let c = colors[i];
                    write(
                        &mut out,
                        format!("v {} {} {} {} {} {}\n", v.x, v.y, v.z, c[0], c[1], c[2]),
                    )?;
                }
                None => write(&mut out, format!("v {} {} {}\n", v.x, v.y, v.z))?,
            }
        }
        for f in &self.faces {
            write(&mut out, format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1))?;
        }
        drop(out);
        if self.labels.iter().any(|&l| l != 0) {
            let sidecar = label_sidecar_path(path);
            let body: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
            std::fs::write(&sidecar, body).map_err(|e| Error::io(sidecar, e))?;
        }
        Ok(())
    }
}

/// Sidecar file carrying one label per face: the mesh path with `.labels`
/// appended (`mesh.obj` -> `mesh.obj.labels`).
pub fn label_sidecar_path(mesh_path: impl AsRef<Path>) -> PathBuf {
    let mut s = mesh_path.as_ref().as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

fn load_labels(path: &Path, face_count: usize) -> Result<Vec<u32>> {
    if !path.exists() {
        return Ok(vec![0; face_count]);
    }
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::with_capacity(face_count);
    for (idx, line) in body.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        labels.push(trimmed.parse::<u32>().map_err(|_| {
            Error::malformed(path, lineno, format!("bad label {trimmed:?}"))
        })?);
    }
    if labels.len() != face_count {
        return Err(Error::validation(format!(
            "label file {} has {} entries for {} faces",
            path.display(),
            labels.len(),
            face_count
        )));
    }
    Ok(labels)
}

fn parse_face_index(token: &str, vertex_count: usize, path: &Path, lineno: usize) -> Result<u32> {
    // Accept i, i/t, i/t/n, i//n; only the vertex index is used.
    let head = token.split('/').next().unwrap_or("");
    let idx: i64 = head
        .parse()
        .map_err(|_| Error::malformed(path, lineno, format!("bad face index {token:?}")))?;
    if idx < 1 {
        return Err(Error::malformed(
            path,
            lineno,
            format!("face index {idx} is not a positive 1-based index"),
        ));
    }
    let zero_based = (idx - 1) as usize;
    if zero_based >= vertex_count {
        return Err(Error::malformed(
            path,
            lineno,
            format!("face index {idx} exceeds vertex count {vertex_count}"),
        ));
    }
    Ok(zero_based as u32)
}
