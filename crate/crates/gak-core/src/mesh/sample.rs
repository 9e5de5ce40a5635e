//! Area-uniform surface sampling and the anchor-set container.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use rand::Rng;

use super::TriMesh;
use crate::error::{Error, Result};

const ANCH_MAGIC: &[u8; 4] = b"ANCH";
const ANCH_VERSION: u32 = 1;

/// Fixed set of surface anchors: a face id and clamped barycentric weights
/// per anchor. Anchors persist across poses of one topology; only vertex
/// positions move under them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub faces: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self, mesh: &TriMesh) -> Result<()> {
        if self.faces.len() != self.barycentric.len() {
            return Err(Error::validation(format!(
                "anchor set has {} faces but {} weight rows",
                self.faces.len(),
                self.barycentric.len()
            )));
        }
        for (i, &f) in self.faces.iter().enumerate() {
            if f as usize >= mesh.face_count() {
                return Err(Error::validation(format!(
                    "anchor {i} references face {f}, mesh has {} faces",
                    mesh.face_count()
                )));
            }
            let [l1, l2, l3] = self.barycentric[i];
            if !(l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0 && (l1 + l2 + l3 - 1.0).abs() <= 1e-9) {
                return Err(Error::validation(format!(
                    "anchor {i} has invalid weights ({l1}, {l2}, {l3})"
                )));
            }
        }
        Ok(())
    }

    /// Rest-surface position of each anchor (offset 0) on the given pose.
    pub fn positions(&self, mesh: &TriMesh) -> Vec<Point3<f64>> {
        self.faces
            .iter()
            .zip(&self.barycentric)
            .map(|(&f, &[l1, l2, l3])| {
                let [a, b, c] = mesh.face_vertices(f);
                Point3::from(a.coords * l1 + b.coords * l2 + c.coords * l3)
            })
            .collect()
    }

    /// Binary writer: "ANCH", u32 version, u64 count, then per anchor a u32
    /// face and three f32 weights, all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let mut write = |bytes: &[u8]| -> Result<()> {
            out.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        write(ANCH_MAGIC)?;
        write(&ANCH_VERSION.to_le_bytes())?;
        write(&(self.faces.len() as u64).to_le_bytes())?;
        for (i, &face) in self.faces.iter().enumerate() {
            write(&face.to_le_bytes())?;
            for l in self.barycentric[i] {
                write(&(l as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        let mut read4 = |file: &mut dyn Read| -> Result<[u8; 4]> {
            file.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
            Ok(buf4)
        };
        if &read4(&mut file)? != ANCH_MAGIC {
            return Err(Error::malformed(path, 0, "bad magic, expected ANCH"));
        }
        let version = u32::from_le_bytes(read4(&mut file)?);
        if version != ANCH_VERSION {
            return Err(Error::malformed(path, 0, format!("unsupported version {version}")));
        }
        file.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
        let n = u64::from_le_bytes(buf8) as usize;
        let mut faces = Vec::with_capacity(n);
        let mut barycentric = Vec::with_capacity(n);
        for _ in 0..n {
            faces.push(u32::from_le_bytes(read4(&mut file)?));
            let mut l = [0.0f64; 3];
            for li in &mut l {
                *li = f32::from_le_bytes(read4(&mut file)?) as f64;
            }
            // f32 storage perturbs the partition of unity; renormalize so the
            // in-memory invariant (sum exactly ~1) holds again.
            let sum = l[0] + l[1] + l[2];
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::malformed(path, 0, format!("bad weights {l:?}")));
            }
            barycentric.push([l[0] / sum, l[1] / sum, l[2] / sum]);
        }
        Ok(AnchorSet { faces, barycentric })
    }
}

/// Draws `n` anchors distributed uniformly by area: faces are chosen with
/// probability proportional to their area and the in-face position uniformly.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<AnchorSet> {
    if n == 0 {
        return Err(Error::invalid_input("anchor count must be at least 1"));
    }
    if mesh.face_count() == 0 {
        return Err(Error::invalid_input("cannot sample an empty mesh"));
    }
    let mut cumulative = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() as u32 {
        total += mesh.face_area(f);
        cumulative.push(total);
    }

    let mut rng = crate::rng::substream(seed, "surface-sample", 0);
    let mut faces = Vec::with_capacity(n);
    let mut barycentric = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let face = cumulative.partition_point(|&c| c <= u).min(mesh.face_count() - 1);
        // Uniform in the triangle: fold the unit square along its diagonal.
        let mut a: f64 = rng.gen();
        let mut b: f64 = rng.gen();
        if a + b > 1.0 {
            a = 1.0 - a;
            b = 1.0 - b;
        }
        faces.push(face as u32);
        barycentric.push([1.0 - a - b, a, b]);
    }
    Ok(AnchorSet { faces, barycentric })
}
