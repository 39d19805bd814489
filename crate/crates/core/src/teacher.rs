//! Target token tensors per view and per object: CSTF load/save, import of
//! raw float blobs, and a seeded synthetic generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::cstf::{Container, Record};
use crate::error::{Error, Result};
use crate::scene::{LabelImage, SceneBundle};

pub const DEFAULT_RANGE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
}

impl TensorStats {
    pub fn of(v: &[f32]) -> Self {
        if v.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
                max_abs: 0.0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let max_abs = v.iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max);
        Self {
            mean,
            std: var.sqrt(),
            max_abs,
        }
    }
}

/// `T × D` targets keyed by camera and by `(camera, object)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTokens {
    pub token_count: usize,
    pub token_dim: usize,
    pub views: BTreeMap<usize, Vec<f32>>,
    pub objects: BTreeMap<(usize, usize), Vec<f32>>,
}

impl TeacherTokens {
    pub fn new(token_count: usize, token_dim: usize) -> Self {
        Self {
            token_count,
            token_dim,
            views: BTreeMap::new(),
            objects: BTreeMap::new(),
        }
    }

    pub fn view(&self, cam: usize) -> Option<&[f32]> {
        self.views.get(&cam).map(|v| &v[..])
    }

    pub fn object(&self, cam: usize, m: usize) -> Option<&[f32]> {
        self.objects.get(&(cam, m)).map(|v| &v[..])
    }

    /// Objects with a target in view `cam`, ascending.
    pub fn objects_in_view(&self, cam: usize) -> Vec<usize> {
        self.objects.range((cam, 0)..(cam + 1, 0)).map(|(&(_, m), _)| m).collect()
    }

    pub fn stats(&self) -> BTreeMap<String, TensorStats> {
        let mut out = BTreeMap::new();
        for (c, v) in &self.views {
            out.insert(format!("view/{c}"), TensorStats::of(v));
        }
        for ((c, m), v) in &self.objects {
            out.insert(format!("obj/{c}/{m}"), TensorStats::of(v));
        }
        out
    }

    fn insert_checked(&mut self, name: &str, data: Vec<f32>, dims: &[usize]) -> Result<()> {
        if dims != [self.token_count, self.token_dim] {
            return Err(Error::Config(format!(
                "{name}: tokens are {dims:?}, expected [{}, {}]",
                self.token_count, self.token_dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index: i,
                message: format!("non-finite value in {name}"),
            });
        }
        let parts: Vec<&str> = name.split('/').collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad index in record name {name}")))
        };
        match parts.as_slice() {
            ["view", c] => {
                self.views.insert(parse(c)?, data);
            }
            ["obj", c, m] => {
                self.objects.insert((parse(c)?, parse(m)?), data);
            }
            _ => return Err(Error::Format(format!("unexpected teacher record {name}"))),
        }
        Ok(())
    }

    /// Reads `view/{cam}` and `obj/{cam}/{m}` records. `expect` gives the
    /// `(T, D)` the encoder will produce; mismatches are config errors.
    pub fn from_container(c: &Container, expect: Option<(usize, usize)>) -> Result<Self> {
        let mut dims_seen: Option<(usize, usize)> = None;
        let mut out: Option<TeacherTokens> = None;
        for rec in c.records() {
            if !(rec.name.starts_with("view/") || rec.name.starts_with("obj/")) {
                continue;
            }
            let (data, dims) = c.f32_any(&rec.name)?;
            if dims.len() != 2 {
                return Err(Error::Format(format!("{} has rank {}, expected 2", rec.name, dims.len())));
            }
            if let Some((t, d)) = expect {
                if dims[1] != d {
                    return Err(Error::Config(format!(
                        "{}: teacher token dim {} but encoder token dim {d}",
                        rec.name, dims[1]
                    )));
                }
                if dims[0] != t {
                    return Err(Error::Config(format!(
                        "{}: teacher has {} tokens but encoder produces {t}",
                        rec.name, dims[0]
                    )));
                }
            }
            let first = *dims_seen.get_or_insert((dims[0], dims[1]));
            let tt = out.get_or_insert_with(|| TeacherTokens::new(first.0, first.1));
            tt.insert_checked(&rec.name, data.to_vec(), &dims)?;
        }
        let (t, d) = expect.or(dims_seen).unwrap_or((0, 0));
        Ok(out.unwrap_or_else(|| TeacherTokens::new(t, d)))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let dims = [self.token_count, self.token_dim];
        for (cam, v) in &self.views {
            c.push(Record::f32(format!("view/{cam}"), &dims, v.clone()));
        }
        for ((cam, m), v) in &self.objects {
            c.push(Record::f32(format!("obj/{cam}/{m}"), &dims, v.clone()));
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    /// Checks the view and object indices against a scene.
    pub fn validate_for(&self, n_cameras: usize, n_objects: usize) -> Result<()> {
        if let Some(&c) = self.views.keys().find(|&&c| c >= n_cameras) {
            return Err(Error::Config(format!("teacher view {c} but scene has {n_cameras} cameras")));
        }
        if let Some(&(c, m)) = self.objects.keys().find(|&&(c, m)| c >= n_cameras || m >= n_objects) {
            return Err(Error::Config(format!(
                "teacher object target ({c}, {m}) outside {n_cameras} cameras / {n_objects} objects"
            )));
        }
        Ok(())
    }
}

pub fn load_teacher(path: impl AsRef<Path>, expect: Option<(usize, usize)>) -> Result<TeacherTokens> {
    TeacherTokens::from_container(&Container::load(path)?, expect)
}

#[derive(Debug, Deserialize)]
struct RawManifest {
    token_count: usize,
    token_dim: usize,
    entries: Vec<RawEntry>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    /// `view/{cam}` or `obj/{cam}/{m}`.
    name: String,
    /// Path relative to the manifest.
    file: String,
}

/// Imports raw little-endian row-major f32 blobs listed in a JSON
/// manifest: `{"token_count", "token_dim", "entries": [{"name", "file"}]}`.
pub fn import_raw(manifest: impl AsRef<Path>) -> Result<TeacherTokens> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest)?;
    let m: RawManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("teacher manifest: {e}")))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = TeacherTokens::new(m.token_count, m.token_dim);
    let want = m.token_count * m.token_dim * 4;
    for e in &m.entries {
        let bytes = std::fs::read(base.join(&e.file))?;
        if bytes.len() != want {
            return Err(Error::Format(format!(
                "{}: {} bytes, expected {want} for {}x{} f32 tokens",
                e.file,
                bytes.len(),
                m.token_count,
                m.token_dim
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert_checked(&e.name, data, &[m.token_count, m.token_dim])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherSpec {
    pub token_dim: usize,
    pub patch: usize,
    /// Half-width of the per-token offsets.
    pub range_scale: f64,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn new(token_dim: usize, patch: usize, seed: u64) -> Self {
        Self {
            token_dim,
            patch,
            range_scale: DEFAULT_RANGE_SCALE,
            seed,
        }
    }
}

/// Per-patch descriptors of a label image: class coverage fractions
/// (`M + 1` values summing to 1) followed by the patch center in `[-1, 1]²`.
pub fn patch_descriptors(label: &LabelImage, n_objects: usize, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || label.width % patch != 0 || label.height % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} labels are not a multiple of patch size {patch}",
            label.width, label.height
        )));
    }
    let (rows, cols) = (label.height / patch, label.width / patch);
    let mut out = Vec::with_capacity(rows * cols);
    let area = (patch * patch) as f64;
    for pr in 0..rows {
        for pc in 0..cols {
            let mut d = vec![0.0; n_objects + 3];
            for y in pr * patch..(pr + 1) * patch {
                for x in pc * patch..(pc + 1) * patch {
                    d[label.get(x, y) as usize] += 1.0 / area;
                }
            }
            d[n_objects + 1] = 2.0 * (pc as f64 + 0.5) / cols as f64 - 1.0;
            d[n_objects + 2] = 2.0 * (pr as f64 + 0.5) / rows as f64 - 1.0;
            out.push(d);
        }
    }
    Ok(out)
}

/// Bound on `|target|` for any generated value.
pub fn synthetic_bound(spec: &TeacherSpec) -> f64 {
    spec.range_scale + 3.0
}

/// Synthetic targets: a fixed random projection `A` (entries in
/// `[-1, 1]`) of per-patch descriptors, plus per-token offsets drawn from
/// `[-range_scale, range_scale]`. View and object levels have their own
/// offsets, shared by all cameras. An object gets a target in every view
/// where its label appears; its descriptor puts the object's coverage in
/// slot `m + 1` and the rest in slot 0.
pub fn make_synthetic_teacher(scene: &SceneBundle, spec: &TeacherSpec) -> Result<TeacherTokens> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("synthetic teacher needs label images".into()))?;
    let m_count = scene.object_count;
    let first = labels
        .first()
        .ok_or_else(|| Error::Config("scene has no cameras".into()))?;
    if labels.iter().any(|l| l.width != first.width || l.height != first.height) {
        return Err(Error::Config("all cameras must share one image size".into()));
    }
    let t_count = (first.width / spec.patch.max(1)) * (first.height / spec.patch.max(1));
    let desc_dim = m_count + 3;
    let d = spec.token_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proj: Vec<f64> = (0..d * desc_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let offsets = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..t_count * d)
            .map(|_| spec.range_scale * rng.random_range(-1.0..=1.0))
            .collect()
    };
    let off_view = offsets(&mut rng);
    let off_obj = offsets(&mut rng);

    let project = |desc: &[Vec<f64>], off: &[f64]| -> Vec<f32> {
        let mut out = vec![0.0f32; t_count * d];
        for (t, dv) in desc.iter().enumerate() {
            for k in 0..d {
                let a = &proj[k * desc_dim..(k + 1) * desc_dim];
                let v: f64 = a.iter().zip(dv).map(|(x, y)| x * y).sum();
                out[t * d + k] = (v + off[t * d + k]) as f32;
            }
        }
        out
    };

    let mut tt = TeacherTokens::new(t_count, d);
    for (cam, label) in labels.iter().enumerate() {
        let desc = patch_descriptors(label, m_count, spec.patch)?;
        tt.views.insert(cam, project(&desc, &off_view));
        for m in 0..m_count {
            let class = m as u32 + 1;
            if !label.data.contains(&class) {
                continue;
            }
            let obj_desc: Vec<Vec<f64>> = desc
                .iter()
                .map(|dv| {
                    let mut o = vec![0.0; desc_dim];
                    o[m + 1] = dv[m + 1];
                    o[0] = 1.0 - dv[m + 1];
                    o[m_count + 1] = dv[m_count + 1];
                    o[m_count + 2] = dv[m_count + 2];
                    o
                })
                .collect();
            tt.objects.insert((cam, m), project(&obj_desc, &off_obj));
        }
    }
    Ok(tt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scene, SynthSpec};

    fn scene() -> SceneBundle {
        let mut s = SynthSpec::new(2, 40, 3);
        s.width = 56;
        s.height = 56;
        s.n_cameras = 2;
        make_synthetic_scene(&s)
    }

    #[test]
    fn deterministic_and_bounded() {
        let s = scene();
        let spec = TeacherSpec::new(8, 14, 5);
        let a = make_synthetic_teacher(&s, &spec).unwrap();
        let b = make_synthetic_teacher(&s, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.token_count, 16);
        assert_eq!(a.views.len(), 2);
        let bound = synthetic_bound(&spec);
        for st in a.stats().values() {
            assert!(st.max_abs <= bound);
        }
        // the offsets make use of most of the range
        let max = a.stats().values().map(|s| s.max_abs).fold(0.0, f64::max);
        assert!(max > 0.9 * spec.range_scale);
    }

    #[test]
    fn zero_range_is_pure_projection() {
        let s = scene();
        let mut spec = TeacherSpec::new(4, 14, 9);
        spec.range_scale = 0.0;
        let tt = make_synthetic_teacher(&s, &spec).unwrap();
        // recompute the projection independently
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let desc_dim = s.object_count + 3;
        let proj: Vec<f64> = (0..4 * desc_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let desc = patch_descriptors(&s.labels.as_ref().unwrap()[1], s.object_count, 14).unwrap();
        let v = tt.view(1).unwrap();
        for (t, dv) in desc.iter().enumerate() {
            for k in 0..4 {
                let want: f64 = (0..desc_dim).map(|j| proj[k * desc_dim + j] * dv[j]).sum();
                assert!((v[t * 4 + k] as f64 - want).abs() < 1e-5);
            }
        }
        for st in tt.stats().values() {
            assert!(st.max_abs <= 3.0 + 1e-6);
        }
    }

    #[test]
    fn descriptors_sum_to_one() {
        let s = scene();
        for l in s.labels.as_ref().unwrap() {
            for d in patch_descriptors(l, 2, 14).unwrap() {
                let sum: f64 = d[..3].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let l = LabelImage::new(15, 14);
        assert!(matches!(patch_descriptors(&l, 1, 14), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trip_and_mismatch() {
        let s = scene();
        let tt = make_synthetic_teacher(&s, &TeacherSpec::new(6, 14, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cstf");
        tt.save(&path).unwrap();
        assert_eq!(load_teacher(&path, Some((16, 6))).unwrap(), tt);
        assert_eq!(load_teacher(&path, None).unwrap(), tt);
        match load_teacher(&path, Some((16, 7))) {
            Err(Error::Config(msg)) => assert!(msg.contains('6') && msg.contains('7')),
            other => panic!("expected config error, got {other:?}"),
        }
        std::fs::write(&path, b"CSTF\x01\x00").unwrap();
        assert!(matches!(load_teacher(&path, None), Err(Error::Format(_))));
    }

    #[test]
    fn views_only_file() {
        let mut tt = TeacherTokens::new(4, 2);
        tt.views.insert(0, vec![0.0; 8]);
        tt.views.insert(1, vec![1.0; 8]);
        let back = TeacherTokens::from_container(&tt.to_container(), Some((4, 2))).unwrap();
        assert!(back.objects.is_empty());
        assert!(back.objects_in_view(0).is_empty());
    }

    #[test]
    fn raw_import() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..6).map(|i| i as f32 * 0.5).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.path().join("v0.bin"), &bytes).unwrap();
        std::fs::write(dir.path().join("o.bin"), &bytes).unwrap();
        std::fs::write(
            dir.path().join("m.json"),
            r#"{"token_count": 3, "token_dim": 2, "entries": [
                {"name": "view/0", "file": "v0.bin"},
                {"name": "obj/0/1", "file": "o.bin"}]}"#,
        )
        .unwrap();
        let tt = import_raw(dir.path().join("m.json")).unwrap();
        assert_eq!(tt.view(0).unwrap(), &vals[..]);
        assert_eq!(tt.object(0, 1).unwrap(), &vals[..]);
        assert_eq!(tt.objects_in_view(0), vec![1]);
        std::fs::write(dir.path().join("o.bin"), &bytes[..20]).unwrap();
        assert!(matches!(import_raw(dir.path().join("m.json")), Err(Error::Format(_))));
    }
}
