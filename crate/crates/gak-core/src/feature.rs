//! Pixel-aligned feature gathering: bilinear sampling of per-view feature
//! maps at projected 3D positions, masked by frustum and depth visibility.

use nalgebra::Point3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuffer;
use crate::raster::{DepthMap, LabelMap};

/// Occlusion slack in meters: a point this close behind the rasterized
/// surface still counts as visible, absorbing depth-buffer quantization at
/// silhouettes.
pub const OCCLUSION_EPSILON: f64 = 0.01;

/// Dense float feature plane, row-major, `channels` values per texel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: u32, height: u32, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; (width * height) as usize * channels],
        }
    }

    /// RGB image as a 3-channel feature map.
    pub fn from_image(img: &ImageBuffer) -> Self {
        FeatureMap {
            width: img.width,
            height: img.height,
            channels: 3,
            data: img.rgb.clone(),
        }
    }

    /// RGB plus the label map as a fourth channel (raw label value as float).
    pub fn from_image_with_labels(img: &ImageBuffer, labels: &LabelMap) -> Result<Self> {
        if img.width != labels.width || img.height != labels.height {
            return Err(Error::invalid_input(format!(
                "image {}x{} and label map {}x{} differ",
                img.width, img.height, labels.width, labels.height
            )));
        }
        let mut map = FeatureMap::zeros(img.width, img.height, 4);
        for p in 0..img.pixel_count() {
            map.data[4 * p] = img.rgb[3 * p];
            map.data[4 * p + 1] = img.rgb[3 * p + 1];
            map.data[4 * p + 2] = img.rgb[3 * p + 2];
            map.data[4 * p + 3] = labels.labels[p] as f64;
        }
        Ok(map)
    }

    #[inline]
    fn texel(&self, x: u32, y: u32) -> &[f64] {
        let i = (y * self.width + x) as usize * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Bilinear sample at continuous (u, v), texel centers on integer
/// coordinates. Outside [0, w-1] x [0, h-1] the result is the zero vector;
/// `out` must hold `channels` values.
pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), map.channels);
    let (w, h) = (map.width as f64, map.height as f64);
    if !(u >= 0.0 && u <= w - 1.0 && v >= 0.0 && v <= h - 1.0) {
        out.fill(0.0);
        return;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let x0 = x0 as u32;
    let y0 = y0 as u32;
    // On the far border the +1 texel has weight 0; clamp keeps it in range.
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);

    let t00 = map.texel(x0, y0);
    let t10 = map.texel(x1, y0);
    let t01 = map.texel(x0, y1);
    let t11 = map.texel(x1, y1);
    for c in 0..map.channels {
        let top = t00[c] * (1.0 - fx) + t10[c] * fx;
        let bottom = t01[c] * (1.0 - fx) + t11[c] * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
}

/// Visibility of a world point in one view: inside the frustum (projects into
/// the image with near < depth < far) and not occluded by the rasterized
/// surface at the nearest pixel, with [`OCCLUSION_EPSILON`] slack.
pub fn visible(p: Point3<f64>, camera: &Camera, depth: &DepthMap) -> bool {
    let proj = camera.project(p);
    if proj.behind || proj.depth <= camera.near || proj.depth >= camera.far {
        return false;
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !(proj.u >= 0.0 && proj.u <= w - 1.0 && proj.v >= 0.0 && proj.v <= h - 1.0) {
        return false;
    }
    let x = proj.u.round() as u32;
    let y = proj.v.round() as u32;
    proj.depth <= depth.at(x.min(depth.width - 1), y.min(depth.height - 1)) + OCCLUSION_EPSILON
}

/// Gathers per-view features for each point: the bilinear sample where the
/// point is visible, zeros where it is not, concatenated in camera order.
/// Every map must share one channel count; the output rows have
/// `cameras.len() * channels` values.
pub fn gather_pixel_features(
    points: &[Point3<f64>],
    maps: &[FeatureMap],
    cameras: &[Camera],
    depths: &[DepthMap],
) -> Result<Vec<Vec<f64>>> {
    if maps.len() != cameras.len() || depths.len() != cameras.len() {
        return Err(Error::invalid_input(format!(
            "got {} maps, {} cameras, {} depth buffers; counts must match",
            maps.len(),
            cameras.len(),
            depths.len()
        )));
    }
    if cameras.is_empty() {
        return Err(Error::invalid_input("feature gather needs at least one view"));
    }
    let channels = maps[0].channels;
    for (i, m) in maps.iter().enumerate() {
        if m.channels != channels {
            return Err(Error::invalid_input(format!(
                "map {i} has {} channels, expected {channels}",
                m.channels
            )));
        }
    }
    for (i, (c, (m, d))) in cameras.iter().zip(maps.iter().zip(depths)).enumerate() {
        if c.width != m.width || c.height != m.height || c.width != d.width || c.height != d.height
        {
            return Err(Error::invalid_input(format!(
                "view {i}: camera {}x{}, map {}x{}, depth {}x{} must agree",
                c.width, c.height, m.width, m.height, d.width, d.height
            )));
        }
    }

    let dim = cameras.len() * channels;
    let mut rows = Vec::with_capacity(points.len());
    for &p in points {
        let mut row = vec![0.0; dim];
        for (v, cam) in cameras.iter().enumerate() {
            if visible(p, cam, &depths[v]) {
                let proj = cam.project(p);
                bilinear_sample(
                    &maps[v],
                    proj.u,
                    proj.v,
                    &mut row[v * channels..(v + 1) * channels],
                );
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
