//! ASCII PLY export of the deprojected depth cloud plus box wireframes.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{Sample, DEPTH_RANGE_M};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const GROUND_TRUTH_COLOR: [u8; 3] = [255, 0, 0];
pub const DETECTION_COLOR: [u8; 3] = [255, 255, 0];
/// Points sampled along each wireframe edge, endpoints included.
pub const EDGE_SAMPLES: usize = 20;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx0: f64,
    pub cy0: f64,
}

impl Intrinsics {
    /// Focal length equal to the image size, principal point at the center.
    pub fn default_for(image_size: usize) -> Self {
        let n = image_size as f64;
        Self {
            fx: n,
            fy: n,
            cx0: n / 2.0,
            cy0: n / 2.0,
        }
    }

    /// Pixel `(u, v)` at depth `z` meters to camera-space meters.
    pub fn deproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx0) * z / self.fx, (v - self.cy0) * z / self.fy, z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub pos: [f64; 3],
    pub color: [u8; 3],
}

/// Depth-image points with their RGB; pixels with zero depth are skipped.
pub fn cloud_points(sample: &Sample, intr: &Intrinsics, depth_range_m: f64) -> Vec<PlyVertex> {
    let s = sample.input.shape();
    let plane = s.plane();
    let data = sample.input.data();
    let mut out = Vec::new();
    for v in 0..s.height {
        for u in 0..s.width {
            let p = v * s.width + u;
            let d = data[3 * plane + p];
            if d <= 0.0 {
                continue;
            }
            let rgb = [0, 1, 2].map(|c| (data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push(PlyVertex {
                pos: intr.deproject(u as f64, v as f64, d * depth_range_m),
                color: rgb,
            });
        }
    }
    out
}

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 3),
    (3, 2),
    (2, 0),
    (4, 5),
    (5, 7),
    (7, 6),
    (6, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// The 12 box edges sampled into points. Box x/y are image fractions and z
/// is normalized depth.
pub fn wireframe_points(b: &Box3D, image_size: usize, intr: &Intrinsics, depth_range_m: f64, color: [u8; 3]) -> Vec<PlyVertex> {
    let (lo, hi) = (b.min_corner(), b.max_corner());
    // corner index bits: x, y, z
    let corner = |i: usize| {
        [
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        ]
    };
    let n = image_size as f64;
    let mut out = Vec::with_capacity(EDGES.len() * EDGE_SAMPLES);
    for (a, z) in EDGES {
        let (p, q) = (corner(a), corner(z));
        for s in 0..EDGE_SAMPLES {
            let t = s as f64 / (EDGE_SAMPLES - 1) as f64;
            let at = |k: usize| p[k] + (q[k] - p[k]) * t;
            out.push(PlyVertex {
                pos: intr.deproject(at(0) * n, at(1) * n, at(2) * depth_range_m),
                color,
            });
        }
    }
    out
}

pub fn format_ply(vertices: &[PlyVertex]) -> String {
    let mut out = String::with_capacity(64 * vertices.len() + 200);
    out.push_str("ply\nformat ascii 1.0\ncomment eyolo detections\n");
    let _ = writeln!(out, "element vertex {}", vertices.len());
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for v in vertices {
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {} {} {}",
            v.pos[0], v.pos[1], v.pos[2], v.color[0], v.color[1], v.color[2]
        );
    }
    out
}

/// Writes the cloud, the sample's ground-truth boxes in red and
/// `detections` in yellow.
pub fn export_ply(sample: &Sample, detections: &[Box3D], intr: &Intrinsics, out_path: &Path) -> Result<()> {
    let n = sample.image_size();
    let mut verts = cloud_points(sample, intr, DEPTH_RANGE_M);
    for b in &sample.boxes {
        verts.extend(wireframe_points(b, n, intr, DEPTH_RANGE_M, GROUND_TRUTH_COLOR));
    }
    for b in detections {
        verts.extend(wireframe_points(b, n, intr, DEPTH_RANGE_M, DETECTION_COLOR));
    }
    std::fs::write(out_path, format_ply(&verts)).map_err(|e| Error::io(out_path, e))
}
