//! Gaussian scene representation: struct-of-arrays storage, cameras and
//! label images, plus PLY import, CSTF checkpoints and synthetic fixtures.

mod camera;
pub mod ply;
pub mod sidecar;
pub mod synth;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use camera::Camera;
pub use ply::{export_ply, import_ply, ImportOptions};
pub use sidecar::{export_sidecar, import_sidecar, Checkpoint};
pub use synth::{make_synthetic_scene, SynthSpec};

/// Default channel count of the view- and object-level language features.
pub const DEFAULT_FEATURE_DIM: usize = 32;
/// Default channel count of the identity feature.
pub const DEFAULT_IDENTITY_DIM: usize = 16;

/// Per-Gaussian geometry, color and learnable features, stored as flat
/// arrays. Rotations are `(w, x, y, z)` quaternions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussians {
    pub feature_dim: usize,
    pub identity_dim: usize,
    pub positions: Vec<f32>,
    pub rotations: Vec<f32>,
    pub scales: Vec<f32>,
    pub opacities: Vec<f32>,
    pub colors: Vec<f32>,
    pub feat_view: Vec<f32>,
    pub feat_object: Vec<f32>,
    pub identity: Vec<f32>,
}

/// Geometry of a single Gaussian, used when assembling scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGeometry {
    pub position: [f32; 3],
    pub rotation: [f32; 4],
    pub scale: [f32; 3],
    pub opacity: f32,
    pub color: [f32; 3],
}

impl Gaussians {
    pub fn new(feature_dim: usize, identity_dim: usize) -> Self {
        Self {
            feature_dim,
            identity_dim,
            positions: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            colors: Vec::new(),
            feat_view: Vec::new(),
            feat_object: Vec::new(),
            identity: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    /// Appends a Gaussian with zero-initialized features.
    pub fn push(&mut self, g: GaussianGeometry) {
        self.positions.extend_from_slice(&g.position);
        self.rotations.extend_from_slice(&g.rotation);
        self.scales.extend_from_slice(&g.scale);
        self.opacities.push(g.opacity);
        self.colors.extend_from_slice(&g.color);
        self.feat_view
            .extend(std::iter::repeat_n(0.0, self.feature_dim));
        self.feat_object
            .extend(std::iter::repeat_n(0.0, self.feature_dim));
        self.identity
            .extend(std::iter::repeat_n(0.0, self.identity_dim));
    }

    pub fn geometry(&self, i: usize) -> GaussianGeometry {
        GaussianGeometry {
            position: self.position(i),
            rotation: self.rotation(i),
            scale: self.scale(i),
            opacity: self.opacities[i],
            color: self.color(i),
        }
    }

    pub fn position(&self, i: usize) -> [f32; 3] {
        let p = &self.positions[3 * i..3 * i + 3];
        [p[0], p[1], p[2]]
    }

    pub fn rotation(&self, i: usize) -> [f32; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn scale(&self, i: usize) -> [f32; 3] {
        let s = &self.scales[3 * i..3 * i + 3];
        [s[0], s[1], s[2]]
    }

    pub fn color(&self, i: usize) -> [f32; 3] {
        let c = &self.colors[3 * i..3 * i + 3];
        [c[0], c[1], c[2]]
    }

    pub fn feat_view_row(&self, i: usize) -> &[f32] {
        &self.feat_view[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feat_object_row(&self, i: usize) -> &[f32] {
        &self.feat_object[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn identity_row(&self, i: usize) -> &[f32] {
        &self.identity[i * self.identity_dim..(i + 1) * self.identity_dim]
    }

    /// Checks array lengths, quaternion norms, positive scales, opacity range
    /// and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            ("positions", self.positions.len(), 3 * n),
            ("rotations", self.rotations.len(), 4 * n),
            ("scales", self.scales.len(), 3 * n),
            ("colors", self.colors.len(), 3 * n),
            ("feat_view", self.feat_view.len(), self.feature_dim * n),
            ("feat_object", self.feat_object.len(), self.feature_dim * n),
            ("identity", self.identity.len(), self.identity_dim * n),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} has length {got}, expected {want} for {n} Gaussians"
                )));
            }
        }
        for i in 0..n {
            let bad = |message: &str| Error::Data {
                index: i,
                message: message.to_owned(),
            };
            let g = self.geometry(i);
            let all_finite = g
                .position
                .iter()
                .chain(&g.rotation)
                .chain(&g.scale)
                .chain(&g.color)
                .chain(std::iter::once(&g.opacity))
                .chain(self.feat_view_row(i))
                .chain(self.feat_object_row(i))
                .chain(self.identity_row(i))
                .all(|x| x.is_finite());
            if !all_finite {
                return Err(bad("non-finite value"));
            }
            let norm = g.rotation.iter().map(|x| x * x).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(bad(&format!("quaternion norm {norm} is not 1")));
            }
            if g.scale.iter().any(|&s| s <= 0.0) {
                return Err(bad("non-positive scale"));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(bad("opacity outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the frozen parameters (position, rotation, scale,
    /// opacity, color).
    pub fn geometry_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for arr in [
            &self.positions,
            &self.rotations,
            &self.scales,
            &self.opacities,
            &self.colors,
        ] {
            h.update((arr.len() as u64).to_le_bytes());
            for x in arr.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Class id reserved for background in label images and masks. Object `m`
/// uses class `m + 1`.
pub const BACKGROUND_CLASS: u32 = 0;

/// Per-pixel class ids (`0` background, `m + 1` for object `m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND_CLASS; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }
}

/// Geometry, cameras and optional label images for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub gaussians: Gaussians,
    pub cameras: Vec<Camera>,
    pub object_count: usize,
    pub labels: Option<Vec<LabelImage>>,
    /// Ground-truth object of each Gaussian, known for synthetic scenes.
    pub gaussian_objects: Option<Vec<u32>>,
}

impl SceneBundle {
    pub fn new(gaussians: Gaussians, cameras: Vec<Camera>, object_count: usize) -> Self {
        Self {
            gaussians,
            cameras,
            object_count,
            labels: None,
            gaussian_objects: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians.validate()?;
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate()
                .map_err(|e| Error::Config(format!("camera {i}: {e}")))?;
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.cameras.len() {
                return Err(Error::Shape(format!(
                    "{} label images for {} cameras",
                    labels.len(),
                    self.cameras.len()
                )));
            }
            for (i, (lab, cam)) in labels.iter().zip(&self.cameras).enumerate() {
                if lab.width != cam.width as usize || lab.height != cam.height as usize {
                    return Err(Error::Shape(format!(
                        "label image {i} is {}x{}, camera is {}x{}",
                        lab.width, lab.height, cam.width, cam.height
                    )));
                }
                if let Some(&v) = lab.data.iter().find(|&&v| v as usize > self.object_count) {
                    return Err(Error::Data {
                        index: i,
                        message: format!(
                            "label value {v} exceeds object count {}",
                            self.object_count
                        ),
                    });
                }
            }
        }
        if let Some(ids) = &self.gaussian_objects {
            if ids.len() != self.gaussians.len() {
                return Err(Error::Shape("gaussian_objects length mismatch".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> GaussianGeometry {
        GaussianGeometry {
            position: [0.0, 0.0, 1.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [1.0, 1.0, 1.0],
            opacity: 0.5,
            color: [0.1, 0.2, 0.3],
        }
    }

    #[test]
    fn push_zero_initializes_features() {
        let mut g = Gaussians::new(4, 2);
        g.push(unit());
        g.push(unit());
        assert_eq!(g.len(), 2);
        assert_eq!(g.feat_view.len(), 8);
        assert_eq!(g.identity.len(), 4);
        assert!(g.feat_object.iter().all(|&x| x == 0.0));
        g.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut g = Gaussians::new(1, 1);
        g.push(unit());
        g.opacities[0] = 1.5;
        assert!(matches!(g.validate(), Err(Error::Data { index: 0, .. })));
        g.opacities[0] = 0.5;
        g.feat_view[0] = f32::NAN;
        assert!(g.validate().is_err());
        g.feat_view[0] = 0.0;
        g.rotations[0] = 2.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn digest_ignores_features() {
        let mut g = Gaussians::new(2, 2);
        g.push(unit());
        let d = g.geometry_digest();
        g.feat_view[0] = 3.0;
        g.identity[1] = -1.0;
        assert_eq!(d, g.geometry_digest());
        g.opacities[0] = 0.25;
        assert_ne!(d, g.geometry_digest());
    }
}
