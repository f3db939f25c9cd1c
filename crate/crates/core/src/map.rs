//! Global LiDAR map: aggregation, voxel downsampling, spatial index and
//! local cropping around a pose.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseSE3, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Stable point ids. When absent the index is the id.
    pub ids: Option<Vec<u64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, ids: None }
    }

    pub fn with_ids(points: Vec<Vec3>, ids: Vec<u64>) -> Result<Self> {
        if points.len() != ids.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: ids.len(),
            });
        }
        Ok(Self {
            points,
            ids: Some(ids),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn id(&self, i: usize) -> u64 {
        match &self.ids {
            Some(ids) => ids[i],
            None => i as u64,
        }
    }

    pub fn transformed(&self, t: &PoseSE3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropExtents {
    pub forward: f64,
    pub backward: f64,
    pub lateral: f64,
}

impl Default for CropExtents {
    fn default() -> Self {
        Self {
            forward: 100.0,
            backward: 10.0,
            lateral: 25.0,
        }
    }
}

impl CropExtents {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("crop.forward", self.forward),
            ("crop.backward", self.backward),
            ("crop.lateral", self.lateral),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn max_dim(&self) -> f64 {
        self.forward.max(self.backward).max(self.lateral)
    }

    /// Index cell size used for maps cropped with these extents.
    pub fn index_cell(&self) -> f64 {
        self.max_dim() / 32.0
    }
}

type Key = (i64, i64, i64);

fn key_of(p: &Vec3, cell: f64) -> Key {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Uniform voxel hash over point indices.
#[derive(Clone, Debug)]
pub struct VoxelIndex {
    cell: f64,
    cells: HashMap<Key, Vec<u32>>,
    z_range: (i64, i64),
}

impl VoxelIndex {
    pub fn build(points: &[Vec3], cell: f64) -> Self {
        let mut cells: HashMap<Key, Vec<u32>> = HashMap::new();
        let mut z_range = (i64::MAX, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key_of(p, cell);
            z_range.0 = z_range.0.min(k.2);
            z_range.1 = z_range.1.max(k.2);
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            cell,
            cells,
            z_range,
        }
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    /// Indices of every point whose horizontal position falls inside the
    /// given xy box (inclusive, cell granularity). Unsorted.
    fn candidates_xy(&self, min: (f64, f64), max: (f64, f64)) -> Vec<u32> {
        let mut out = Vec::new();
        if self.cells.is_empty() {
            return out;
        }
        let (x0, y0) = ((min.0 / self.cell).floor() as i64, (min.1 / self.cell).floor() as i64);
        let (x1, y1) = ((max.0 / self.cell).floor() as i64, (max.1 / self.cell).floor() as i64);
        let column_count = (x1 - x0 + 1) * (y1 - y0 + 1) * (self.z_range.1 - self.z_range.0 + 1);
        if column_count as usize > self.cells.len() {
            for (k, idx) in &self.cells {
                if k.0 >= x0 && k.0 <= x1 && k.1 >= y0 && k.1 <= y1 {
                    out.extend_from_slice(idx);
                }
            }
        } else {
            for ix in x0..=x1 {
                for iy in y0..=y1 {
                    for iz in self.z_range.0..=self.z_range.1 {
                        if let Some(idx) = self.cells.get(&(ix, iy, iz)) {
                            out.extend_from_slice(idx);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GlobalMap {
    pub cloud: PointCloud,
    pub index: VoxelIndex,
}

impl GlobalMap {
    pub fn new(cloud: PointCloud, cell: f64) -> Self {
        let cell = if cell > 0.0 { cell } else { CropExtents::default().index_cell() };
        let index = VoxelIndex::build(&cloud.points, cell);
        Self { cloud, index }
    }

    pub fn for_extents(cloud: PointCloud, extents: &CropExtents) -> Self {
        Self::new(cloud, extents.index_cell())
    }

    pub fn voxel_size(&self) -> f64 {
        self.index.cell
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Transforms each sensor-frame scan by its sensor-to-world pose and
/// concatenates the results.
pub fn aggregate_scans(scans: &[PointCloud], poses: &[PoseSE3], cell: f64) -> Result<GlobalMap> {
    if scans.len() != poses.len() {
        return Err(Error::LengthMismatch {
            left: scans.len(),
            right: poses.len(),
        });
    }
    let total = scans.iter().map(|s| s.len()).sum();
    let mut points = Vec::with_capacity(total);
    for (scan, pose) in scans.iter().zip(poses) {
        points.extend(scan.points.iter().map(|p| pose.transform_point(p)));
    }
    Ok(GlobalMap::new(PointCloud::new(points), cell))
}

/// Replaces the points of each occupied voxel by their centroid. Output is
/// ordered by voxel key, so it does not depend on input order.
pub fn downsample(map: &GlobalMap, resolution: f64) -> Result<GlobalMap> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidResolution(resolution));
    }
    let mut acc: BTreeMap<Key, (Vec3, usize)> = BTreeMap::new();
    for p in &map.cloud.points {
        let e = acc.entry(key_of(p, resolution)).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let points = acc.into_values().map(|(s, n)| s / n as f64).collect();
    Ok(GlobalMap::new(PointCloud::new(points), map.voxel_size()))
}

/// Horizontal crop frame of a pose: camera center, forward and lateral unit
/// vectors. Forward is the optical axis projected onto the ground plane
/// (world z is up).
#[derive(Clone, Copy, Debug)]
pub struct CropFrame {
    pub origin: Vec3,
    pub forward: Vec3,
    pub lateral: Vec3,
}

impl CropFrame {
    pub fn of(pose: &PoseSE3) -> Self {
        let inv = pose.rotation.inverse();
        let mut axis = inv * Vec3::z();
        axis.z = 0.0;
        if axis.norm() < 1e-9 {
            // optical axis vertical: fall back to the image-down direction
            axis = inv * Vec3::y();
            axis.z = 0.0;
        }
        let forward = axis.normalize();
        let lateral = Vec3::new(-forward.y, forward.x, 0.0);
        Self {
            origin: pose.center(),
            forward,
            lateral,
        }
    }

    pub fn contains(&self, p: &Vec3, e: &CropExtents) -> bool {
        let d = p - self.origin;
        let f = d.dot(&self.forward);
        let l = d.dot(&self.lateral);
        f >= -e.backward && f <= e.forward && l.abs() <= e.lateral
    }
}

/// Points of `map` inside the crop box of `pose`, in map order. The
/// returned cloud carries the map indices as ids.
pub fn crop_local(map: &GlobalMap, pose: &PoseSE3, extents: &CropExtents) -> PointCloud {
    let frame = CropFrame::of(pose);
    let corners = [
        (extents.forward, extents.lateral),
        (extents.forward, -extents.lateral),
        (-extents.backward, extents.lateral),
        (-extents.backward, -extents.lateral),
    ];
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (f, l) in corners {
        let c = frame.origin + frame.forward * f + frame.lateral * l;
        min = (min.0.min(c.x), min.1.min(c.y));
        max = (max.0.max(c.x), max.1.max(c.y));
    }
    let mut idx = map.index.candidates_xy(min, max);
    idx.retain(|&i| frame.contains(&map.cloud.points[i as usize], extents));
    idx.sort_unstable();
    let points = idx.iter().map(|&i| map.cloud.points[i as usize]).collect();
    let ids = idx.iter().map(|&i| map.cloud.id(i as usize)).collect();
    PointCloud {
        points,
        ids: Some(ids),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::Rng;

    fn camera_looking_along_x(center: Vec3) -> PoseSE3 {
        // camera x = -world y, camera y = -world z, camera z = world x
        let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let rot = PoseSE3::from_rotation_matrix(&r, Vec3::zeros()).rotation;
        PoseSE3::new(rot, -(rot * center))
    }

    #[test]
    fn aggregate_examples() {
        let scan = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)]);
        let m = aggregate_scans(std::slice::from_ref(&scan), &[PoseSE3::identity()], 1.0).unwrap();
        assert_eq!(m.cloud.points, scan.points);

        let one = PointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)]);
        let m = aggregate_scans(&[one], &[PoseSE3::from_translation(Vec3::new(5.0, 0.0, 0.0))], 1.0).unwrap();
        assert_eq!(m.cloud.points, vec![Vec3::new(5.0, 0.0, 1.0)]);

        let m = aggregate_scans(&[], &[], 1.0).unwrap();
        assert!(m.is_empty());
        assert!(matches!(
            aggregate_scans(&[PointCloud::default()], &[], 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn downsample_examples() {
        let m = GlobalMap::new(
            PointCloud::new(vec![Vec3::new(0.02, 0.02, 0.02), Vec3::new(0.03, 0.02, 0.02)]),
            1.0,
        );
        let d = downsample(&m, 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.cloud.points[0] - Vec3::new(0.025, 0.02, 0.02)).norm() < 1e-15);

        let m = GlobalMap::new(
            PointCloud::new(vec![Vec3::new(0.05, 0.05, 0.05), Vec3::new(0.25, 0.05, 0.05), Vec3::new(0.05, 0.55, 0.05)]),
            1.0,
        );
        assert_eq!(downsample(&m, 0.1).unwrap().len(), 3);
        assert!(downsample(&GlobalMap::new(PointCloud::default(), 1.0), 0.1).unwrap().is_empty());
        assert!(matches!(downsample(&m, 0.0), Err(Error::InvalidResolution(_))));
        assert!(downsample(&m, -1.0).is_err());
    }

    #[test]
    fn crop_examples() {
        let e = CropExtents::default();
        let pose = camera_looking_along_x(Vec3::new(0.0, 0.0, 1.7));
        let m = GlobalMap::for_extents(
            PointCloud::new(vec![Vec3::new(50.0, 0.0, 1.7), Vec3::new(-11.0, 0.0, 1.7), Vec3::new(-9.0, 0.0, 30.0)]),
            &e,
        );
        let c = crop_local(&m, &pose, &e);
        assert_eq!(c.points, vec![Vec3::new(50.0, 0.0, 1.7), Vec3::new(-9.0, 0.0, 30.0)]);
        assert_eq!(c.ids, Some(vec![0, 2]));
        let empty = GlobalMap::for_extents(PointCloud::default(), &e);
        assert!(crop_local(&empty, &pose, &e).is_empty());
    }

    #[test]
    fn crop_frame_ignores_pitch_and_roll() {
        let pose = camera_looking_along_x(Vec3::zeros());
        let tilted = PoseSE3::new(
            UnitQuaternion::from_axis_angle(&Vec3::x_axis(), 0.2) * pose.rotation,
            pose.translation,
        );
        let f = CropFrame::of(&tilted);
        assert!(f.forward.z == 0.0 && (f.forward.norm() - 1.0).abs() < 1e-12);
        assert!(f.forward.x > 0.9);
    }

    fn brute_force_crop(map: &GlobalMap, pose: &PoseSE3, e: &CropExtents) -> Vec<usize> {
        let f = CropFrame::of(pose);
        (0..map.len()).filter(|&i| f.contains(&map.cloud.points[i], e)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn crop_matches_linear_scan(seed in any::<u64>(), n in 0usize..10_000, xi in prop::array::uniform6(-1.0f64..1.0)) {
            let mut rng = crate::rng::seeded(seed, 1);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-150.0..150.0), rng.random_range(-60.0..60.0), rng.random_range(-5.0..20.0)))
                .collect();
            let e = CropExtents::default();
            let map = GlobalMap::for_extents(PointCloud::new(pts), &e);
            let mut tw = Twist::from(xi);
            for c in 3..6 { tw[c] *= 30.0; }
            let pose = se3_exp(&tw);
            let got = crop_local(&map, &pose, &e);
            let want = brute_force_crop(&map, &pose, &e);
            prop_assert_eq!(got.ids.unwrap(), want.iter().map(|&i| i as u64).collect::<Vec<_>>());
            prop_assert_eq!(got.points, want.iter().map(|&i| map.cloud.points[i]).collect::<Vec<_>>());
        }

        #[test]
        fn downsample_is_idempotent(seed in any::<u64>(), n in 0usize..3000) {
            let mut rng = crate::rng::seeded(seed, 2);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect();
            let m = GlobalMap::new(PointCloud::new(pts), 1.0);
            let once = downsample(&m, 0.1).unwrap();
            let twice = downsample(&once, 0.1).unwrap();
            prop_assert!(once.len() <= m.len());
            prop_assert_eq!(once.len(), twice.len());
        }

        #[test]
        fn aggregation_is_equivariant(seed in any::<u64>(), g in prop::array::uniform6(-1.0f64..1.0)) {
            let mut rng = crate::rng::seeded(seed, 3);
            let scans: Vec<PointCloud> = (0..3)
                .map(|_| PointCloud::new((0..50).map(|_| Vec3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))).collect()))
                .collect();
            let poses: Vec<PoseSE3> = (0..3)
                .map(|_| se3_exp(&Twist::from_fn(|_, _| rng.random_range(-1.0..1.0))))
                .collect();
            let g = se3_exp(&Twist::from(g));
            let moved: Vec<PoseSE3> = poses.iter().map(|p| g.compose(p)).collect();
            let a = aggregate_scans(&scans, &moved, 1.0).unwrap();
            let b = aggregate_scans(&scans, &poses, 1.0).unwrap();
            for (p, q) in a.cloud.points.iter().zip(&b.cloud.points) {
                prop_assert!((p - g.transform_point(q)).norm() < 1e-9);
            }
        }
    }
}
