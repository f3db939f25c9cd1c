//! Sparse depth rendering with a z-buffer, cone-based occlusion removal and
//! ground-truth image-to-depth flow synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{h_project, project_point, CameraIntrinsics, PoseSE3};
use crate::map::PointCloud;

/// Depths closer than this are treated as equal in the z-buffer.
pub const DEPTH_TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub intrinsics: CameraIntrinsics,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    /// Index into the rendered cloud; meaningful only where `valid`.
    pub source: Vec<u32>,
}

impl DepthMap {
    pub fn empty(k: &CameraIntrinsics) -> Self {
        let n = k.width * k.height;
        Self {
            intrinsics: *k,
            depth: vec![0.0; n],
            valid: vec![false; n],
            source: vec![0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `(pixel index, source index, depth)` for every valid pixel, row-major.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| (i, self.source[i] as usize, self.depth[i]))
    }
}

/// Per-pixel 2D displacement with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            du: vec![0.0; n],
            dv: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Constant flow, valid everywhere.
    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            du: vec![du; n],
            dv: vec![dv; n],
            valid: vec![true; n],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Option<[f64; 2]> {
        self.valid[i].then(|| [self.du[i], self.dv[i]])
    }

    pub fn at(&self, u: usize, v: usize) -> Option<[f64; 2]> {
        self.get(v * self.width + u)
    }

    pub fn set(&mut self, i: usize, f: [f64; 2]) {
        self.du[i] = f[0];
        self.dv[i] = f[1];
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn check_dims(&self, other: &FlowField) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

fn closer(depth: f64, id: u64, best_depth: f64, best_id: u64) -> bool {
    if (depth - best_depth).abs() <= DEPTH_TIE {
        id < best_id
    } else {
        depth < best_depth
    }
}

/// Rasterizes every point in front of the camera to its nearest pixel and
/// keeps the closest one per pixel (ties go to the smaller point id).
pub fn render_depth(cloud: &PointCloud, k: &CameraIntrinsics, t: &PoseSE3) -> DepthMap {
    let hits = exec::map_slice(&cloud.points, |p| {
        let pc = t.transform_point(p);
        let px = project_point(k, &pc).ok()?;
        let (u, v) = k.pixel_of(&px)?;
        Some((v * k.width + u, pc.z))
    });
    let mut map = DepthMap::empty(k);
    let mut ids = vec![0u64; map.depth.len()];
    for (i, hit) in hits.into_iter().enumerate() {
        let Some((pix, z)) = hit else { continue };
        let id = cloud.id(i);
        if !map.valid[pix] || closer(z, id, map.depth[pix], ids[pix]) {
            map.valid[pix] = true;
            map.depth[pix] = z;
            map.source[pix] = i as u32;
            ids[pix] = id;
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionParams {
    /// Half-angle of the visibility cone, degrees.
    pub aperture_deg: f64,
    /// Odd window side length, pixels.
    pub window: usize,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self {
            aperture_deg: 10.0,
            window: 7,
        }
    }
}

impl OcclusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.aperture_deg > 0.0 && self.aperture_deg < 90.0) {
            return Err(Error::config("occlusion.aperture_deg", "must be in (0, 90)"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::config("occlusion.window", "must be odd"));
        }
        Ok(())
    }
}

/// Invalidates pixels hidden behind nearer surfaces.
///
/// A valid pixel `p` is occluded when a nearer valid neighbor `q` inside the
/// window lies within the cone of half-angle `aperture` around the ray from
/// the back-projected point of `p` toward the camera. Only ever removes
/// pixels.
pub fn remove_occlusions(d: &DepthMap, params: &OcclusionParams) -> DepthMap {
    let k = &d.intrinsics;
    let (w, h) = d.dims();
    let r = (params.window / 2) as isize;
    let cos_ap = params.aperture_deg.to_radians().cos();
    let rows: Vec<usize> = (0..h).collect();
    let occluded_rows = exec::map_slice(&rows, |&v| {
        let mut hidden = Vec::new();
        for u in 0..w {
            let i = v * w + u;
            if !d.valid[i] {
                continue;
            }
            let zp = d.depth[i];
            let p = k.back_project(u as f64, v as f64, zp);
            let to_cam = -p / p.norm();
            'nb: for dv in -r..=r {
                let vq = v as isize + dv;
                if vq < 0 || vq >= h as isize {
                    continue;
                }
                for du in -r..=r {
                    let uq = u as isize + du;
                    if uq < 0 || uq >= w as isize || (du == 0 && dv == 0) {
                        continue;
                    }
                    let j = vq as usize * w + uq as usize;
                    if !d.valid[j] || d.depth[j] >= zp {
                        continue;
                    }
                    let q = k.back_project(uq as f64, vq as f64, d.depth[j]);
                    let dir = q - p;
                    let n = dir.norm();
                    if n > 0.0 && dir.dot(&to_cam) / n > cos_ap {
                        hidden.push(i);
                        break 'nb;
                    }
                }
            }
        }
        hidden
    });
    let mut out = d.clone();
    for i in occluded_rows.into_iter().flatten() {
        out.valid[i] = false;
    }
    out
}

/// Image-to-depth flow for an already rendered depth map: at each valid
/// pixel, the displacement from the point's projection under `t_init` to its
/// projection under `t_gt`. Points behind the camera under `t_gt` are masked.
pub fn depth_flow_from_map(
    depth: &DepthMap,
    cloud: &PointCloud,
    t_init: &PoseSE3,
    t_gt: &PoseSE3,
) -> FlowField {
    let k = &depth.intrinsics;
    let (w, h) = depth.dims();
    let mut flow = FlowField::invalid(w, h);
    for (i, src, _) in depth.valid_pixels() {
        let p = &cloud.points[src];
        let (Ok(a), Ok(b)) = (h_project(k, t_init, p), h_project(k, t_gt, p)) else {
            continue;
        };
        flow.set(i, [b.u - a.u, b.v - a.v]);
    }
    flow
}

/// Renders at `t_init`, removes occlusions and returns the ground-truth
/// image-to-depth flow toward `t_gt`.
pub fn gt_depth_flow(cloud: &PointCloud, k: &CameraIntrinsics, t_init: &PoseSE3, t_gt: &PoseSE3) -> FlowField {
    let depth = remove_occlusions(&render_depth(cloud, k, t_init), &OcclusionParams::default());
    depth_flow_from_map(&depth, cloud, t_init, t_gt)
}
