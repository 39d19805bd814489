//! Scene checkpoints in the CSTF container.
//!
//! Records:
//!
//! ```text
//! scene.p [N,3]  scene.r [N,4]  scene.s [N,3]  scene.o [N]  scene.h [N,3]
//! scene.f_v [N,D]  scene.f_o [N,D]  scene.e [N,D_id]
//! scene.object_count  scene.camera_count          (u32 scalars)
//! scene.objects [N]                               (u32, optional)
//! cam.{i}.params [18]   fx fy cx cy rot[9] t[3] near far
//! cam.{i}.size [2]      width height (u32)
//! label.{i} [H,W]       class ids (u32, optional)
//! ```
//!
//! A checkpoint of a training session adds the `cfg.*`, `enc.*`, `ss.*`,
//! `cls.*`, `opt.*` and `viz.pca.*` records written by
//! [`TrainingState::write_records`].

use std::path::Path;

use crate::cstf::{Container, Record};
use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussians, LabelImage, SceneBundle};
use crate::train::{Session, TrainingState};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scene: SceneBundle,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn scene_only(scene: SceneBundle) -> Self {
        Self { scene, training: None }
    }

    pub fn of_session(s: &Session) -> Self {
        Self {
            scene: s.scene.clone(),
            training: Some(s.state.clone()),
        }
    }

    pub fn into_session(self) -> Result<Session> {
        let state = self
            .training
            .ok_or_else(|| Error::Config("checkpoint holds no training state".into()))?;
        Session::from_parts(self.scene, state)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        write_scene(&self.scene, &mut c);
        if let Some(t) = &self.training {
            t.write_records(&mut c);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let scene = read_scene(c)?;
        let training = if c.contains("cfg.lr") {
            let cfg = crate::train::TrainConfig::read_records(c)?;
            let cam = scene
                .cameras
                .first()
                .ok_or_else(|| Error::Format("training state without cameras".into()))?;
            let tokens = cfg.encoder.token_count(cam.width as usize, cam.height as usize)?;
            Some(TrainingState::read_records(
                c,
                tokens,
                scene.gaussians.identity_dim,
                scene.object_count,
            )?)
        } else {
            None
        };
        Ok(Self { scene, training })
    }
}

pub fn export_sidecar(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_container().save(path)
}

pub fn import_sidecar(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}

fn write_scene(s: &SceneBundle, c: &mut Container) {
    let g = &s.gaussians;
    let n = g.len();
    c.push(Record::f32("scene.p", &[n, 3], g.positions.clone()));
    c.push(Record::f32("scene.r", &[n, 4], g.rotations.clone()));
    c.push(Record::f32("scene.s", &[n, 3], g.scales.clone()));
    c.push(Record::f32("scene.o", &[n], g.opacities.clone()));
    c.push(Record::f32("scene.h", &[n, 3], g.colors.clone()));
    c.push(Record::f32("scene.f_v", &[n, g.feature_dim], g.feat_view.clone()));
    c.push(Record::f32("scene.f_o", &[n, g.feature_dim], g.feat_object.clone()));
    c.push(Record::f32("scene.e", &[n, g.identity_dim], g.identity.clone()));
    c.push(Record::scalar_u32("scene.object_count", s.object_count as u32));
    c.push(Record::scalar_u32("scene.camera_count", s.cameras.len() as u32));
    if let Some(ids) = &s.gaussian_objects {
        c.push(Record::u32("scene.objects", &[n], ids.clone()));
    }
    for (i, cam) in s.cameras.iter().enumerate() {
        let mut p = vec![cam.fx, cam.fy, cam.cx, cam.cy];
        p.extend_from_slice(&cam.rotation);
        p.extend_from_slice(&cam.translation);
        p.extend_from_slice(&[cam.near, cam.far]);
        c.push(Record::f32(format!("cam.{i}.params"), &[18], p));
        c.push(Record::u32(format!("cam.{i}.size"), &[2], vec![cam.width, cam.height]));
    }
    if let Some(labels) = &s.labels {
        for (i, l) in labels.iter().enumerate() {
            c.push(Record::u32(format!("label.{i}"), &[l.height, l.width], l.data.clone()));
        }
    }
}

fn read_scene(c: &Container) -> Result<SceneBundle> {
    let (o, dims) = c.f32_any("scene.o")?;
    let n = dims.first().copied().unwrap_or(0);
    let width = |name: &str| -> Result<usize> {
        let (_, d) = c.f32_any(name)?;
        d.get(1)
            .copied()
            .ok_or_else(|| Error::Format(format!("{name} must have rank 2")))
    };
    let feature_dim = width("scene.f_v")?;
    let identity_dim = width("scene.e")?;
    let mut g = Gaussians::new(feature_dim, identity_dim);
    g.positions = c.f32_tensor("scene.p", &[n, 3])?.to_vec();
    g.rotations = c.f32_tensor("scene.r", &[n, 4])?.to_vec();
    g.scales = c.f32_tensor("scene.s", &[n, 3])?.to_vec();
    g.opacities = o.to_vec();
    g.colors = c.f32_tensor("scene.h", &[n, 3])?.to_vec();
    g.feat_view = c.f32_tensor("scene.f_v", &[n, feature_dim])?.to_vec();
    g.feat_object = c.f32_tensor("scene.f_o", &[n, feature_dim])?.to_vec();
    g.identity = c.f32_tensor("scene.e", &[n, identity_dim])?.to_vec();

    let n_cams = c.scalar_u32("scene.camera_count")? as usize;
    let mut cameras = Vec::with_capacity(n_cams);
    for i in 0..n_cams {
        let p = c.f32_tensor(&format!("cam.{i}.params"), &[18])?;
        let (size, _) = c.u32_any(&format!("cam.{i}.size"))?;
        let [w, h] = size else {
            return Err(Error::Format(format!("cam.{i}.size must hold two values")));
        };
        cameras.push(Camera {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            width: *w,
            height: *h,
            rotation: p[4..13].try_into().unwrap(),
            translation: p[13..16].try_into().unwrap(),
            near: p[16],
            far: p[17],
        });
    }
    let mut scene = SceneBundle::new(g, cameras, c.scalar_u32("scene.object_count")? as usize);
    if c.contains("label.0") {
        let mut labels = Vec::with_capacity(n_cams);
        for (i, cam) in scene.cameras.iter().enumerate() {
            let (w, h) = (cam.width as usize, cam.height as usize);
            let (data, dims) = c.u32_any(&format!("label.{i}"))?;
            if dims != [h, w] {
                return Err(Error::Shape(format!("label.{i} is {dims:?}, camera is {w}x{h}")));
            }
            labels.push(LabelImage {
                width: w,
                height: h,
                data: data.to_vec(),
            });
        }
        scene.labels = Some(labels);
    }
    if c.contains("scene.objects") {
        let (ids, _) = c.u32_any("scene.objects")?;
        scene.gaussian_objects = Some(ids.to_vec());
    }
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cstf::VERSION;
    use crate::scene::{make_synthetic_scene, SynthSpec};
    use crate::train::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(n: usize) -> SceneBundle {
        let mut spec = SynthSpec::new(2, n / 2, 3);
        spec.width = 28;
        spec.height = 28;
        spec.feature_dim = 5;
        spec.identity_dim = 3;
        let mut s = make_synthetic_scene(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = &mut s.gaussians;
        for arr in [&mut g.feat_view, &mut g.feat_object, &mut g.identity] {
            arr.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        s
    }

    fn round_trip(ckpt: &Checkpoint) -> Checkpoint {
        Checkpoint::from_container(&Container::from_bytes(&ckpt.to_container().to_bytes()).unwrap()).unwrap()
    }

    #[test]
    fn empty_scene_round_trips() {
        let scene = SceneBundle::new(Gaussians::new(32, 16), Vec::new(), 0);
        let back = round_trip(&Checkpoint::scene_only(scene.clone()));
        assert_eq!(back.scene, scene);
        assert_eq!(back.scene.gaussians.len(), 0);
        assert_eq!(back.scene.gaussians.feature_dim, 32);
    }

    #[test]
    fn hundred_gaussians_bit_exact() {
        let scene = random_scene(100);
        assert_eq!(scene.gaussians.len(), 100);
        let back = round_trip(&Checkpoint::scene_only(scene.clone()));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let (a, b) = (&scene.gaussians, &back.scene.gaussians);
        for (x, y) in [
            (&a.positions, &b.positions),
            (&a.rotations, &b.rotations),
            (&a.scales, &b.scales),
            (&a.opacities, &b.opacities),
            (&a.colors, &b.colors),
            (&a.feat_view, &b.feat_view),
            (&a.feat_object, &b.feat_object),
            (&a.identity, &b.identity),
        ] {
            assert_eq!(bits(x), bits(y));
        }
        assert_eq!(back.scene, scene);
    }

    #[test]
    fn session_state_round_trips() {
        let mut cfg = TrainConfig::desk();
        cfg.encoder.mid_dim = 6;
        cfg.encoder.token_dim = 4;
        let mut s = Session::new(random_scene(40), cfg).unwrap();
        s.train_identity(2, |_, _| Ok(())).unwrap();
        s.pca();
        let ckpt = Checkpoint::of_session(&s);
        let back = round_trip(&ckpt);
        assert_eq!(back, ckpt);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.cstf");
        let ckpt = Checkpoint::scene_only(random_scene(10));
        export_sidecar(&ckpt, &path).unwrap();
        assert_eq!(import_sidecar(&path).unwrap(), ckpt);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(Container::from_bytes(&ver), Err(Error::Version { .. })));
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(Container::from_bytes(cut), Err(Error::Format(_))));
    }
}
