use rayon::prelude::*;

use super::{Hit, MeshError, Ray, RayCaster};
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec3};
use crate::raster::{DepthMap, Raster};

pub const SENSOR_WIDTH: u32 = 4096;
pub const SENSOR_HEIGHT: u32 = 3000;
/// Side of the square inputs after padding and downsampling.
pub const DOWNSAMPLED_SIZE: u32 = 1540;

/// Casts one ray per pixel centre through the (distorted) camera and maps
/// each hit with `shade`. `mesh_to_camera` is the scene-frame → camera-frame
/// pose. Rays are parameterised so that `hit.t` is the camera-z depth.
pub fn render_with<T, S, F>(scene: &S, intr: &CameraIntrinsics, mesh_to_camera: &RigidTransform, miss: T, shade: F) -> Raster<T>
where
    T: Copy + Send + Sync,
    S: RayCaster + ?Sized,
    F: Fn(&Ray, &Hit) -> T + Sync,
{
    let camera_to_mesh = mesh_to_camera.inverse();
    let origin = *camera_to_mesh.translation();
    let width = intr.width as usize;
    let mut data = vec![miss; intr.pixel_count()];
    data.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        for (col, px) in out.iter_mut().enumerate() {
            let Ok(dir) = intr.pixel_ray(col as f64, row as f64) else { continue };
            let ray = Ray { origin, dir: camera_to_mesh.apply_vector(&dir) };
            if let Some(hit) = scene.cast(&ray) {
                *px = shade(&ray, &hit);
            }
        }
    });
    Raster::new(intr.width, intr.height, data).expect("buffer sized from intrinsics")
}

/// Per-pixel camera-z depth of the nearest surface; 0 where nothing is hit.
pub fn render_depth<S: RayCaster + ?Sized>(scene: &S, intr: &CameraIntrinsics, mesh_to_camera: &RigidTransform) -> DepthMap {
    render_with(scene, intr, mesh_to_camera, 0.0, |_, hit| hit.t)
}

/// H×W grid of camera-frame points, `None` where the depth was invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedPointCloud {
    pub width: u32,
    pub height: u32,
    pub points: Vec<Option<Vec3>>,
}

impl OrganizedPointCloud {
    pub fn valid_points(&self) -> impl Iterator<Item = &Vec3> {
        self.points.iter().flatten()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_points().count()
    }

    pub fn get(&self, col: u32, row: u32) -> Option<Vec3> {
        self.points[row as usize * self.width as usize + col as usize]
    }
}

/// Lifts every valid depth pixel into the camera frame.
pub fn depth_to_pointcloud(depth: &DepthMap, intr: &CameraIntrinsics) -> Result<OrganizedPointCloud, MeshError> {
    if depth.width() != intr.width || depth.height() != intr.height {
        return Err(MeshError::ResolutionMismatch(depth.width(), depth.height(), intr.width, intr.height));
    }
    let width = depth.width() as usize;
    let points = depth
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                intr.unproject_pixel([(i % width) as f64, (i / width) as f64], d).ok()
            } else {
                None
            }
        })
        .collect();
    Ok(OrganizedPointCloud { width: depth.width(), height: depth.height(), points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::{MeshScene, Sphere, TriangleMesh};

    // Geometric (closest-approach) ray–sphere intersection, independent of
    // the quadratic used by `Sphere`.
    fn analytic_depth(intr: &CameraIntrinsics, col: u32, row: u32, centre: Vec3, radius: f64) -> Option<f64> {
        let dir = Vec3::new((col as f64 - intr.cx) / intr.fx, (row as f64 - intr.cy) / intr.fy, 1.0);
        let unit = dir.normalize();
        let along = centre.dot(&unit);
        let perp2 = centre.norm_squared() - along * along;
        if perp2 > radius * radius {
            return None;
        }
        let dist = along - (radius * radius - perp2).sqrt();
        Some(dist * unit.z)
    }

    #[test]
    fn sphere_depth_matches_closed_form() {
        let intr = CameraIntrinsics::pinhole(20000.0, 20000.0, 63.5, 63.5, 128, 128).unwrap();
        let centre = Vec3::new(0.0, 0.0, 500.0);
        let depth = render_depth(&Sphere { centre, radius: 1.0 }, &intr, &RigidTransform::identity());
        let mut hits = 0;
        for row in 0..128 {
            for col in 0..128 {
                let d = depth.get(col, row);
                match analytic_depth(&intr, col, row, centre, 1.0) {
                    Some(expected) => {
                        assert!((d - expected).abs() < 1e-6, "({col},{row}) {d} vs {expected}");
                        hits += 1;
                    }
                    None => assert_eq!(d, 0.0),
                }
            }
        }
        assert!(hits > 1000);
        let cloud = depth_to_pointcloud(&depth, &intr).unwrap();
        for p in cloud.valid_points() {
            assert!(((p - centre).norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn plane_depth_lifts_to_plane() {
        let intr = CameraIntrinsics::new(80.0, 80.0, 31.5, 31.5, 64, 64, [-0.05, 0.01, 0.0, 0.001, 0.0]).unwrap();
        let v = vec![Vec3::new(-500.0, -500.0, 300.0), Vec3::new(500.0, -500.0, 300.0), Vec3::new(500.0, 500.0, 300.0), Vec3::new(-500.0, 500.0, 300.0)];
        let mesh = TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], None).unwrap();
        let scene = MeshScene::new(&mesh).unwrap();
        let depth = render_depth(&scene, &intr, &RigidTransform::identity());
        let cloud = depth_to_pointcloud(&depth, &intr).unwrap();
        assert_eq!(cloud.valid_count(), 64 * 64);
        for row in 0..64 {
            for col in 0..64 {
                assert!((depth.get(col, row) - 300.0).abs() < 1e-9);
                let p = cloud.get(col, row).unwrap();
                let q = intr.unproject_pixel([col as f64, row as f64], depth.get(col, row)).unwrap();
                assert_eq!(p, q);
                // distortion-aware rays keep the point on its pixel
                let uv = intr.project_point(&p).unwrap();
                assert!((uv[0] - col as f64).abs() < 1e-6 && (uv[1] - row as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_map_gives_empty_cloud() {
        let intr = CameraIntrinsics::pinhole(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let cloud = depth_to_pointcloud(&DepthMap::filled(4, 4, 0.0), &intr).unwrap();
        assert_eq!(cloud.valid_count(), 0);
        assert!(matches!(depth_to_pointcloud(&DepthMap::filled(3, 4, 0.0), &intr), Err(MeshError::ResolutionMismatch(..))));
    }

    #[test]
    fn render_is_independent_of_triangle_order() {
        let sphere = crate::synthbench::BaseShape::Sphere { radius: 40.0 }.tessellate(3);
        let mut tris = sphere.triangles().to_vec();
        tris.reverse();
        let reversed = TriangleMesh::new(sphere.vertices().to_vec(), tris, None).unwrap();
        let intr = CameraIntrinsics::pinhole(300.0, 300.0, 47.5, 47.5, 96, 96).unwrap();
        let pose = RigidTransform::translation_only(Vec3::new(0.0, 0.0, 200.0));
        let a = render_depth(&MeshScene::new(&sphere).unwrap(), &intr, &pose);
        let b = render_depth(&MeshScene::new(&reversed).unwrap(), &intr, &pose);
        assert_eq!(a, b);
        assert!(a.valid_count() > 1000);
    }
}
