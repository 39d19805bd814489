use nalgebra::{Matrix3, Vector3};

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Camera space follows the usual computer-vision convention: `+x` right,
/// `+y` down, `+z` forward. Pixel `(x, y)` has its center at
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
    /// Row-major world-to-camera rotation.
    pub rotation: [f32; 9],
    pub translation: [f32; 3],
    pub near: f32,
    pub far: f32,
}

impl Camera {
    /// Camera at the origin looking down `+z`.
    pub fn identity(width: u32, height: u32, focal: f32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            width,
            height,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            near: 0.01,
            far: 100.0,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world
    /// direction that should appear upward in the image.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: u32,
        height: u32,
        fov_y_degrees: f64,
    ) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        // image y points down
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let focal = 0.5 * height as f64 / (0.5 * fov_y_degrees.to_radians()).tan();
        let mut rotation = [0f32; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[3 * r + c] = rot[(r, c)] as f32;
            }
        }
        Self {
            fx: focal as f32,
            fy: focal as f32,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            width,
            height,
            rotation,
            translation: [t.x as f32, t.y as f32, t.z as f32],
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation.map(f64::from))
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation.map(f64::from))
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(p) + self.translation_vector()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(format!("rotation is not orthonormal (error {err:e})"));
        }
        if !(self.near > 0.0) {
            return Err(format!("near plane {} must be positive", self.near));
        }
        if !(self.far > self.near) {
            return Err(format!("far plane {} must exceed near {}", self.far, self.near));
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        let intr = [self.fx, self.fy, self.cx, self.cy];
        if intr.iter().any(|v| !v.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err("invalid intrinsics".into());
        }
        Ok(())
    }

    /// Errors unless both image dimensions are multiples of `patch`.
    pub fn check_patch_multiple(&self, patch: usize) -> Result<(), String> {
        if patch == 0 || self.width as usize % patch != 0 || self.height as usize % patch != 0 {
            return Err(format!(
                "image {}x{} is not a multiple of patch size {patch}",
                self.width, self.height
            ));
        }
        Ok(())
    }
}
