//! Projection of 3D Gaussians to screen-space splats (EWA, local-affine
//! Jacobian of the pinhole map).

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussians};

/// Added to the diagonal of the screen-space covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
/// Splat extent in standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;

static DENORMALIZED_QUATERNIONS: AtomicU64 = AtomicU64::new(0);

/// Number of quaternions that had to be renormalized by [`build_covariance`]
/// because their norm was off by more than 1e-3.
pub fn denormalized_quaternion_count() -> u64 {
    DENORMALIZED_QUATERNIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: [f64; 2],
    /// Upper triangle `(a, b, c)` of the inverse regularized covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: u32,
    pub gaussian_index: u32,
}

impl ProjectedSplat {
    /// Squared Mahalanobis distance of a pixel-space point from the mean.
    #[inline]
    pub fn mahalanobis_sq(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }

    /// Inclusive pixel rectangle `[x0, x1] x [y0, y1]` covered by the
    /// square extent, clamped to the image. `None` if it misses the image.
    pub fn pixel_rect(&self, width: u32, height: u32) -> Option<[u32; 4]> {
        let r = self.radius as f64;
        let x0 = (self.mean2d[0] - r).floor().max(0.0);
        let y0 = (self.mean2d[1] - r).floor().max(0.0);
        let x1 = (self.mean2d[0] + r).ceil().min(width as f64 - 1.0);
        let y1 = (self.mean2d[1] + r).ceil().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some([x0 as u32, y0 as u32, x1 as u32, y1 as u32])
    }
}

/// Rotation matrix of a `(w, x, y, z)` quaternion, normalizing it first.
pub fn rotation_from_quaternion(r: [f32; 4]) -> Matrix3<f64> {
    let q = Quaternion::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
    let norm = q.norm();
    if (norm - 1.0).abs() > 1e-3 {
        DENORMALIZED_QUATERNIONS.fetch_add(1, Ordering::Relaxed);
    }
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(s)`.
pub fn build_covariance(r: [f32; 4], s: [f32; 3]) -> Matrix3<f64> {
    let rot = rotation_from_quaternion(r);
    let m = rot * Matrix3::from_diagonal(&Vector3::new(s[0] as f64, s[1] as f64, s[2] as f64));
    m * m.transpose()
}

/// Jacobian of `(x, y, z) -> (fx x / z + cx, fy y / z + cy)` at `t`.
pub fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, fy) = (cam.fx as f64, cam.fy as f64);
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z2,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z2,
    )
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ + LOW_PASS·I` for Gaussian `i`,
/// with the camera-space mean. `None` when the mean is not in front of the
/// near plane.
pub fn screen_covariance(
    gaussians: &Gaussians,
    i: usize,
    cam: &Camera,
) -> Option<(nalgebra::Matrix2<f64>, Vector3<f64>)> {
    let p = gaussians.position(i).map(f64::from);
    let t = cam.world_to_camera(p);
    if !(t.z > cam.near as f64) {
        return None;
    }
    let sigma = build_covariance(gaussians.rotation(i), gaussians.scale(i));
    let w = cam.rotation_matrix();
    let j = perspective_jacobian(cam, &t);
    let jw = j * w;
    let mut cov = jw * sigma * jw.transpose();
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;
    Some((cov, t))
}

/// Projects one Gaussian. Returns `None` (culled) when it is outside the
/// depth range or its extent misses the image.
pub fn project_gaussian(gaussians: &Gaussians, i: usize, cam: &Camera) -> Option<ProjectedSplat> {
    let (cov, t) = screen_covariance(gaussians, i, cam)?;
    if !(t.z < cam.far as f64) {
        return None;
    }
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (EXTENT_SIGMAS * lambda_max.sqrt()).ceil();
    if !radius.is_finite() || radius > u32::MAX as f64 {
        return None;
    }
    let inv_det = 1.0 / det;
    let splat = ProjectedSplat {
        mean2d: [
            cam.fx as f64 * t.x / t.z + cam.cx as f64,
            cam.fy as f64 * t.y / t.z + cam.cy as f64,
        ],
        conic: [c * inv_det, -b * inv_det, a * inv_det],
        depth: t.z,
        radius: (radius as u32).max(1),
        gaussian_index: i as u32,
    };
    if !splat.mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    splat.pixel_rect(cam.width, cam.height)?;
    Some(splat)
}

/// Projects every Gaussian, dropping culled ones. Output is in index order.
pub fn project_all(gaussians: &Gaussians, cam: &Camera) -> Vec<ProjectedSplat> {
    use rayon::prelude::*;
    (0..gaussians.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(gaussians, i, cam))
        .collect()
}

/// Stable front-to-back sort; equal depths keep their input order.
pub fn sort_by_depth(mut splats: Vec<ProjectedSplat>) -> Result<Vec<ProjectedSplat>> {
    if let Some(bad) = splats.iter().find(|s| !s.depth.is_finite()) {
        return Err(Error::Data {
            index: bad.gaussian_index as usize,
            message: format!("non-finite depth {}", bad.depth),
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    Ok(splats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_with(geoms: &[GaussianGeometry]) -> Gaussians {
        let mut g = Gaussians::new(1, 1);
        for &x in geoms {
            g.push(x);
        }
        g
    }

    fn geom(position: [f32; 3], scale: [f32; 3]) -> GaussianGeometry {
        GaussianGeometry {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale,
            opacity: 1.0,
            color: [0.0; 3],
        }
    }

    fn random_quat(rng: &mut impl Rng) -> [f32; 4] {
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        q.map(|x| x / n)
    }

    /// Rotation matrix written out from the quaternion formula, independent
    /// of nalgebra's conversion.
    fn rot_oracle(q: [f32; 4]) -> [[f64; 3]; 3] {
        let n = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v as f64 / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
    }

    #[test]
    fn covariance_identity_cases() {
        let s = build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert_eq!(s, Matrix3::identity());
        let s = build_covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let s: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.01..2.0));
            let r = rot_oracle(q);
            let mut sd = [[0.0; 3]; 3];
            for k in 0..3 {
                sd[k][k] = s[k] as f64;
            }
            let rs = matmul(&r, &sd);
            let want = matmul(&rs, &transpose(&rs));
            let got = build_covariance(q, s);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((got[(i, j)] - want[i][j]).abs() <= 1e-6);
                }
            }
            assert!((got - got.transpose()).abs().max() < 1e-12);
            assert!(got.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn on_axis_projection() {
        let g = scene_with(&[geom([0.0, 0.0, 1.0], [1.0, 1.0, 1.0])]);
        let cam = Camera::identity(64, 64, 100.0);
        let (cov, _) = screen_covariance(&g, 0, &cam).unwrap();
        assert!((cov[(0, 0)] - (100.0f64.powi(2) + 0.3)).abs() < 1e-9);
        assert!((cov[(1, 1)] - (100.0f64.powi(2) + 0.3)).abs() < 1e-9);
        assert!(cov[(0, 1)].abs() < 1e-12);
        let s = project_gaussian(&g, 0, &cam).unwrap();
        assert_eq!(s.mean2d, [32.0, 32.0]);
        assert_eq!(s.depth, 1.0);
        assert_eq!(s.radius, (3.0 * (1e4f64 + 0.3).sqrt()).ceil() as u32);
    }

    #[test]
    fn behind_and_beyond_culled() {
        let cam = Camera::identity(64, 64, 100.0);
        let g = scene_with(&[
            geom([0.0, 0.0, -1.0], [0.1; 3]),
            geom([0.0, 0.0, 200.0], [0.1; 3]),
            geom([50.0, 0.0, 1.0], [0.01; 3]),
        ]);
        for i in 0..3 {
            assert!(project_gaussian(&g, i, &cam).is_none(), "index {i}");
        }
    }

    #[test]
    fn conic_inverts_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = Camera::look_at([0.3, -0.5, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 96, 64, 50.0);
        let mut g = Gaussians::new(1, 1);
        for _ in 0..300 {
            g.push(GaussianGeometry {
                position: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                rotation: random_quat(&mut rng),
                scale: std::array::from_fn(|_| rng.random_range(0.005..0.3)),
                opacity: 0.5,
                color: [0.0; 3],
            });
        }
        let mut survivors = 0;
        for i in 0..g.len() {
            let Some(s) = project_gaussian(&g, i, &cam) else { continue };
            survivors += 1;
            let (cov, _) = screen_covariance(&g, i, &cam).unwrap();
            let [a, b, c] = s.conic;
            let p00 = a * cov[(0, 0)] + b * cov[(1, 0)];
            let p01 = a * cov[(0, 1)] + b * cov[(1, 1)];
            let p10 = b * cov[(0, 0)] + c * cov[(1, 0)];
            let p11 = b * cov[(0, 1)] + c * cov[(1, 1)];
            assert!((p00 - 1.0).abs() < 1e-5 && (p11 - 1.0).abs() < 1e-5);
            assert!(p01.abs() < 1e-5 && p10.abs() < 1e-5);
            assert!(s.radius >= 1);
            let eig = cov.symmetric_eigenvalues();
            assert!(eig.min() > 0.0);
        }
        assert!(survivors > 100);
    }

    #[test]
    fn culling_is_sound() {
        // Any Gaussian with a pixel center inside its 3σ ellipse survives.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = Camera::look_at([0.0, 0.0, -2.5], [0.0; 3], [0.0, -1.0, 0.0], 32, 32, 60.0);
        let mut g = Gaussians::new(1, 1);
        for _ in 0..400 {
            g.push(GaussianGeometry {
                position: std::array::from_fn(|_| rng.random_range(-2.5..2.5)),
                rotation: random_quat(&mut rng),
                scale: std::array::from_fn(|_| rng.random_range(0.01..0.4)),
                opacity: 0.5,
                color: [0.0; 3],
            });
        }
        for i in 0..g.len() {
            let Some((cov, t)) = screen_covariance(&g, i, &cam) else { continue };
            if t.z >= cam.far as f64 {
                continue;
            }
            let inv = cov.try_inverse().unwrap();
            let mean = [
                cam.fx as f64 * t.x / t.z + cam.cx as f64,
                cam.fy as f64 * t.y / t.z + cam.cy as f64,
            ];
            let mut touches = false;
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let d = nalgebra::Vector2::new(x as f64 + 0.5 - mean[0], y as f64 + 0.5 - mean[1]);
                    if (d.transpose() * inv * d)[0] <= 9.0 {
                        touches = true;
                    }
                }
            }
            if touches {
                assert!(project_gaussian(&g, i, &cam).is_some(), "gaussian {i} wrongly culled");
            }
        }
    }

    #[test]
    fn depth_sort_cases() {
        let mk = |depth: f64, idx: u32| ProjectedSplat {
            mean2d: [0.0; 2],
            conic: [1.0, 0.0, 1.0],
            depth,
            radius: 1,
            gaussian_index: idx,
        };
        let sorted = sort_by_depth(vec![mk(3.0, 0), mk(1.0, 1), mk(2.0, 2)]).unwrap();
        let idx: Vec<u32> = sorted.iter().map(|s| s.gaussian_index).collect();
        assert_eq!(idx, vec![1, 2, 0]);

        let sorted = sort_by_depth((0..5).map(|i| mk(1.0, i)).collect()).unwrap();
        let idx: Vec<u32> = sorted.iter().map(|s| s.gaussian_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);

        assert!(matches!(
            sort_by_depth(vec![mk(1.0, 0), mk(f64::NAN, 7)]),
            Err(Error::Data { index: 7, .. })
        ));
    }

    #[test]
    fn depth_sort_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let splats: Vec<_> = (0..10_000)
            .map(|i| ProjectedSplat {
                mean2d: [0.0; 2],
                conic: [1.0, 0.0, 1.0],
                // coarse depths so ties happen
                depth: (rng.random_range(0..500) as f64) * 0.01,
                radius: 1,
                gaussian_index: i,
            })
            .collect();
        // oracle: sort keys (depth, index) lexicographically
        let mut keys: Vec<(u64, u32)> = splats
            .iter()
            .map(|s| (s.depth.to_bits(), s.gaussian_index))
            .collect();
        keys.sort();
        let got: Vec<u32> = sort_by_depth(splats).unwrap().iter().map(|s| s.gaussian_index).collect();
        let want: Vec<u32> = keys.iter().map(|k| k.1).collect();
        assert_eq!(got, want);
    }
}
