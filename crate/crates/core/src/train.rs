//! Two-stage training driver.
//!
//! Stage 1 fits identity features and the classifier with cross-entropy
//! against label images. Stage 2 fits view/object language features, the
//! encoder and the scale-shift parameters with the token L1 losses. Geometry
//! and color never change.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::backward::{cross_entropy, grad_encoder, grad_losses, grad_render_features, GradientBundle};
use crate::cstf::{Container, Record};
use crate::encoder::{concat_scene_tokens, Activation, EncoderConfig, Level, TokenGrid, DEFAULT_SCENE_TOKEN_CAP};
use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::masking::{classify_identity, mask_out, object_ious, MaskSet, DEFAULT_ALPHA_THRESHOLD};
use crate::model::Model;
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::raster::{render_tiled, Channels, RenderOptions, RenderOutput, DEFAULT_CONTRIB_CAP};
use crate::scene::{Gaussians, SceneBundle};
use crate::teacher::TeacherTokens;
use crate::viz::Pca;

/// How the token L1 terms are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean absolute error per grid.
    Mean,
    /// Sum of absolute errors per grid.
    Sum,
}

impl LossNorm {
    pub fn name(self) -> &'static str {
        match self {
            LossNorm::Mean => "mean",
            LossNorm::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(LossNorm::Mean),
            "sum" => Some(LossNorm::Sum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub identity_iterations: usize,
    pub language_iterations: usize,
    /// Cameras per step; gradients are averaged over them.
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub loss_norm: LossNorm,
    pub seed: u64,
    /// Steps between checkpoints, 0 for none.
    pub checkpoint_every: usize,
    pub alpha_threshold: f64,
    /// When false, all scale-shift parameters stay at identity.
    pub learn_scale_shift: bool,
    pub per_channel: bool,
    /// Standard deviation of the initial features when the scene has none.
    pub feature_init_std: f64,
    pub contrib_cap: usize,
    /// `feature_dim` is taken from the scene.
    pub encoder: EncoderConfig,
    pub scene_token_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            identity_iterations: 500,
            language_iterations: 1000,
            batch: 1,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            loss_norm: LossNorm::Mean,
            seed: 0,
            checkpoint_every: 0,
            alpha_threshold: DEFAULT_ALPHA_THRESHOLD,
            learn_scale_shift: true,
            per_channel: false,
            feature_init_std: 0.1,
            contrib_cap: DEFAULT_CONTRIB_CAP,
            encoder: EncoderConfig::default(),
            scene_token_cap: DEFAULT_SCENE_TOKEN_CAP,
        }
    }
}

/// A configuration value as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfigValue {
    Int(u64),
    Real(f64),
    Flag(bool),
    Word(&'static str),
}

impl std::fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Real(v) => write!(f, "{v}"),
            ConfigValue::Flag(v) => write!(f, "{v}"),
            ConfigValue::Word(v) => f.write_str(v),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {text:?}")))
}

impl TrainConfig {
    /// Small channel counts for desk-scale runs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder.mid_dim = 32;
        c.encoder.token_dim = 16;
        c
    }

    /// Every settable key with its current value, in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, ConfigValue)> {
        use ConfigValue::*;
        vec![
            ("lr", Real(self.lr)),
            ("identity.iterations", Int(self.identity_iterations as u64)),
            ("language.iterations", Int(self.language_iterations as u64)),
            ("batch", Int(self.batch as u64)),
            ("optimizer", Word(self.optimizer.name())),
            ("adam.beta1", Real(self.adam.beta1)),
            ("adam.beta2", Real(self.adam.beta2)),
            ("adam.eps", Real(self.adam.eps)),
            ("loss_norm", Word(self.loss_norm.name())),
            ("seed", Int(self.seed)),
            ("checkpoint_every", Int(self.checkpoint_every as u64)),
            ("alpha_threshold", Real(self.alpha_threshold)),
            ("learn_scale_shift", Flag(self.learn_scale_shift)),
            ("per_channel", Flag(self.per_channel)),
            ("feature_init_std", Real(self.feature_init_std)),
            ("contrib_cap", Int(self.contrib_cap as u64)),
            ("encoder.mid_dim", Int(self.encoder.mid_dim as u64)),
            ("encoder.token_dim", Int(self.encoder.token_dim as u64)),
            ("encoder.patch", Int(self.encoder.patch as u64)),
            ("encoder.lift_layers", Int(self.encoder.lift_layers as u64)),
            ("encoder.activation", Word(self.encoder.activation.name())),
            ("scene_token_cap", Int(self.scene_token_cap as u64)),
        ]
    }

    /// Sets one key from text. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, text: &str) -> Result<()> {
        let t = text.trim();
        let flag = |t: &str| match t {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::Config(format!("{key}: expected true or false, got {t:?}"))),
        };
        match key {
            "lr" => self.lr = parse_num(key, t)?,
            "identity.iterations" => self.identity_iterations = parse_num(key, t)?,
            "language.iterations" => self.language_iterations = parse_num(key, t)?,
            "batch" => self.batch = parse_num(key, t)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(t)
                    .ok_or_else(|| Error::Config(format!("optimizer: unknown {t:?} (adam, sgd)")))?
            }
            "adam.beta1" => self.adam.beta1 = parse_num(key, t)?,
            "adam.beta2" => self.adam.beta2 = parse_num(key, t)?,
            "adam.eps" => self.adam.eps = parse_num(key, t)?,
            "loss_norm" => {
                self.loss_norm = LossNorm::parse(t)
                    .ok_or_else(|| Error::Config(format!("loss_norm: unknown {t:?} (mean, sum)")))?
            }
            "seed" => self.seed = parse_num(key, t)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, t)?,
            "alpha_threshold" => self.alpha_threshold = parse_num(key, t)?,
            "learn_scale_shift" => self.learn_scale_shift = flag(t)?,
            "per_channel" => self.per_channel = flag(t)?,
            "feature_init_std" => self.feature_init_std = parse_num(key, t)?,
            "contrib_cap" => self.contrib_cap = parse_num(key, t)?,
            "encoder.mid_dim" => self.encoder.mid_dim = parse_num(key, t)?,
            "encoder.token_dim" => self.encoder.token_dim = parse_num(key, t)?,
            "encoder.patch" => self.encoder.patch = parse_num(key, t)?,
            "encoder.lift_layers" => self.encoder.lift_layers = parse_num(key, t)?,
            "encoder.activation" => {
                self.encoder.activation = Activation::parse(t).ok_or_else(|| {
                    Error::Config(format!("encoder.activation: unknown {t:?} (silu, tanh, identity)"))
                })?
            }
            "scene_token_cap" => self.scene_token_cap = parse_num(key, t)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite value >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.contrib_cap == 0 {
            return Err(Error::Config("contrib_cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_threshold) {
            return Err(Error::Config("alpha_threshold must lie in [0, 1]".into()));
        }
        if !(self.feature_init_std >= 0.0) {
            return Err(Error::Config("feature_init_std must be >= 0".into()));
        }
        self.encoder.validate()
    }

    /// Writes every value under `cfg.{key}`. Integers and reals take two
    /// `u32` words (low, high) so they round-trip exactly.
    pub fn write_records(&self, c: &mut Container) {
        for (key, v) in self.values() {
            let name = format!("cfg.{key}");
            let rec = match v {
                ConfigValue::Int(x) => Record::u32(name, &[2], split_u64(x)),
                ConfigValue::Real(x) => Record::u32(name, &[2], split_u64(x.to_bits())),
                ConfigValue::Flag(x) => Record::scalar_u32(name, x as u32),
                ConfigValue::Word(w) => Record::u32(name, &[w.len()], w.bytes().map(u32::from).collect()),
            };
            c.push(rec);
        }
        c.push(Record::scalar_u32("cfg.encoder.feature_dim", self.encoder.feature_dim as u32));
    }

    pub fn read_records(c: &Container) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, kind) in Self::default().values() {
            let name = format!("cfg.{key}");
            let (data, _) = c.u32_any(&name)?;
            let text = match kind {
                ConfigValue::Int(_) => join_u64(&name, data)?.to_string(),
                ConfigValue::Real(_) => f64::from_bits(join_u64(&name, data)?).to_string(),
                ConfigValue::Flag(_) => (data.first() == Some(&1)).to_string(),
                ConfigValue::Word(_) => data
                    .iter()
                    .map(|&b| char::from_u32(b).unwrap_or('?'))
                    .collect(),
            };
            cfg.set(key, &text)?;
        }
        cfg.encoder.feature_dim = c.scalar_u32("cfg.encoder.feature_dim")? as usize;
        Ok(cfg)
    }
}

fn split_u64(x: u64) -> Vec<u32> {
    vec![x as u32, (x >> 32) as u32]
}

fn join_u64(name: &str, d: &[u32]) -> Result<u64> {
    match d {
        [lo, hi] => Ok(*lo as u64 | (*hi as u64) << 32),
        _ => Err(Error::Format(format!("{name}: expected two words"))),
    }
}

/// Everything besides the scene that a checkpoint restores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub model: Model,
    pub identity_opt: Optimizer,
    pub language_opt: Optimizer,
    pub pca: Option<Pca>,
}

impl TrainingState {
    pub fn write_records(&self, c: &mut Container) {
        self.config.write_records(c);
        for (name, dims, data) in self.model.tensors() {
            c.push(Record::f32(name, &dims, data.to_vec()));
        }
        for (stage, opt) in [("identity", &self.identity_opt), ("language", &self.language_opt)] {
            c.push(Record::u32(format!("opt.{stage}.step"), &[2], split_u64(opt.step)));
            for (name, (m, v)) in &opt.moments {
                c.push(Record::f32(format!("opt.{stage}.{name}.m"), &[m.len()], m.clone()));
                c.push(Record::f32(format!("opt.{stage}.{name}.v"), &[v.len()], v.clone()));
            }
        }
        if let Some(p) = &self.pca {
            c.push(Record::f32("viz.pca.mean", &[p.mean.len()], p.mean.clone()));
            c.push(Record::f32("viz.pca.components", &[3, p.mean.len()], p.components.clone()));
            c.push(Record::f32("viz.pca.range", &[3, 2], p.range.clone()));
        }
    }

    /// Reads a state written by [`TrainingState::write_records`] for a scene
    /// with the given token count, identity channels and object count.
    pub fn read_records(c: &Container, tokens: usize, identity_dim: usize, n_objects: usize) -> Result<Self> {
        let config = TrainConfig::read_records(c)?;
        let mut model = Model::new(
            config.encoder,
            tokens,
            config.per_channel,
            identity_dim,
            n_objects,
            0,
        )?;
        let shapes: BTreeMap<String, Vec<usize>> = model
            .tensors()
            .into_iter()
            .map(|(n, d, _)| (n, d))
            .collect();
        for (name, dst) in model.tensors_mut() {
            let data = c.f32_tensor(&name, &shapes[&name])?;
            dst.copy_from_slice(data);
        }
        let mut opts = Vec::new();
        for stage in ["identity", "language"] {
            let mut opt = Optimizer::new(config.optimizer, config.adam);
            opt.step = join_u64("step", c.u32_any(&format!("opt.{stage}.step"))?.0)?;
            let prefix = format!("opt.{stage}.");
            for rec in c.records() {
                let Some(rest) = rec.name.strip_prefix(&prefix) else { continue };
                let Some(param) = rest.strip_suffix(".m") else { continue };
                let m = c.f32_any(&rec.name)?.0.to_vec();
                let v = c.f32_any(&format!("{prefix}{param}.v"))?.0.to_vec();
                if m.len() != v.len() {
                    return Err(Error::Format(format!("{prefix}{param}: moment sizes differ")));
                }
                opt.moments.insert(param.to_string(), (m, v));
            }
            opts.push(opt);
        }
        let language_opt = opts.pop().unwrap();
        let identity_opt = opts.pop().unwrap();
        let pca = if c.contains("viz.pca.mean") {
            let d = config.encoder.feature_dim;
            Some(Pca {
                mean: c.f32_tensor("viz.pca.mean", &[d])?.to_vec(),
                components: c.f32_tensor("viz.pca.components", &[3, d])?.to_vec(),
                range: c.f32_tensor("viz.pca.range", &[3, 2])?.to_vec(),
            })
        } else {
            None
        };
        Ok(Self {
            config,
            model,
            identity_opt,
            language_opt,
            pca,
        })
    }
}

/// One row of the loss log. Stage-1 rows leave the token terms empty and
/// stage-2 rows leave the cross-entropy terms empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub stage: &'static str,
    pub step: u64,
    pub cameras: Vec<usize>,
    pub l_v: Option<f64>,
    pub l_o: Option<f64>,
    pub l_total: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub accuracy: Option<f64>,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
}

pub const LOSS_CSV_HEADER: &str = "stage,step,cameras,l_v,l_o,l_total,cross_entropy,accuracy,grad_norm,elapsed_ms";

impl LossRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let cams: Vec<String> = self.cameras.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.stage,
            self.step,
            cams.join(" "),
            opt(self.l_v),
            opt(self.l_o),
            opt(self.l_total),
            opt(self.cross_entropy),
            opt(self.accuracy),
            self.grad_norm,
            self.elapsed_ms
        )
    }
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Token losses of one camera.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraEval {
    pub camera: usize,
    pub l_v: Option<f64>,
    /// Per object with a target, by object id.
    pub objects: BTreeMap<usize, f64>,
    pub l_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cameras: usize,
    pub identity_steps: u64,
    pub language_steps: u64,
    /// Means over cameras with a view target.
    pub l_v: Option<f64>,
    /// Mean over cameras of each camera's object mean.
    pub l_o: Option<f64>,
    pub l_total: Option<f64>,
    pub per_camera: Vec<CameraEval>,
    /// IoU of predicted against labelled masks, pooled over cameras.
    pub mask_iou: Vec<Option<f64>>,
    pub pixel_accuracy: Option<f64>,
    pub geometry_digest: String,
}

/// Scene plus model, optimizers and cached masks.
#[derive(Debug, Clone)]
pub struct Session {
    pub scene: SceneBundle,
    pub state: TrainingState,
    masks: Vec<Option<MaskSet>>,
}

fn is_zero(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Session {
    /// Checks the scene against the config, draws initial features for
    /// any all-zero feature array and builds a fresh model.
    pub fn new(mut scene: SceneBundle, mut config: TrainConfig) -> Result<Self> {
        config.encoder.feature_dim = scene.gaussians.feature_dim;
        config.validate()?;
        let tokens = check_cameras(&scene, &config)?;
        let g = &mut scene.gaussians;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        if config.feature_init_std > 0.0 {
            let normal = Normal::new(0.0, config.feature_init_std)
                .map_err(|e| Error::Config(format!("feature_init_std: {e}")))?;
            for arr in [&mut g.feat_view, &mut g.feat_object, &mut g.identity] {
                if is_zero(arr) {
                    arr.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
                }
            }
        }
        let model = Model::new(
            config.encoder,
            tokens,
            config.per_channel,
            g.identity_dim,
            scene.object_count,
            config.seed.wrapping_add(1),
        )?;
        let state = TrainingState {
            identity_opt: Optimizer::new(config.optimizer, config.adam),
            language_opt: Optimizer::new(config.optimizer, config.adam),
            config,
            model,
            pca: None,
        };
        let n = scene.cameras.len();
        Ok(Self {
            scene,
            state,
            masks: vec![None; n],
        })
    }

    pub fn from_parts(scene: SceneBundle, state: TrainingState) -> Result<Self> {
        scene.validate()?;
        check_cameras(&scene, &state.config)?;
        state.model.validate()?;
        let n = scene.cameras.len();
        Ok(Self {
            scene,
            state,
            masks: vec![None; n],
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn identity_steps(&self) -> u64 {
        self.state.identity_opt.step
    }

    pub fn language_steps(&self) -> u64 {
        self.state.language_opt.step
    }

    /// `(T, D_tok)` of one view's token grid.
    pub fn token_shape(&self) -> (usize, usize) {
        (self.state.model.ss_view.tokens, self.state.config.encoder.token_dim)
    }

    fn render_options(&self, channels: Channels, contrib: bool) -> RenderOptions {
        let mut o = RenderOptions::new(channels);
        o.record_contrib = contrib;
        o.contrib_cap = self.state.config.contrib_cap;
        o
    }

    pub fn render(&self, cam: usize, channels: Channels) -> Result<RenderOutput> {
        let camera = self.camera(cam)?;
        render_tiled(&self.scene.gaussians, camera, self.render_options(channels, false))
    }

    fn camera(&self, cam: usize) -> Result<&crate::scene::Camera> {
        self.scene
            .cameras
            .get(cam)
            .ok_or_else(|| Error::Arg(format!("camera {cam} out of range ({} cameras)", self.scene.cameras.len())))
    }

    /// Cameras used by the step with the given 0-based index.
    pub fn schedule(&self, step: u64) -> Vec<usize> {
        let n = self.scene.cameras.len() as u64;
        let b = self.state.config.batch as u64;
        (0..b).map(|j| ((step * b + j) % n) as usize).collect()
    }

    /// Object masks of one view: classified identity once stage 1 has run,
    /// otherwise the label image.
    pub fn masks(&mut self, cam: usize) -> Result<&MaskSet> {
        self.camera(cam)?;
        if self.masks[cam].is_none() {
            let m = self.compute_masks(cam)?;
            self.masks[cam] = Some(m);
        }
        Ok(self.masks[cam].as_ref().unwrap())
    }

    pub fn compute_masks(&self, cam: usize) -> Result<MaskSet> {
        let camera = self.camera(cam)?;
        if self.identity_steps() > 0 {
            let out = self.render(cam, Channels::IDENTITY)?;
            let id = out.identity.as_ref().unwrap();
            classify_identity(id, &out.alpha, &self.state.model.classifier, self.state.config.alpha_threshold)
        } else if let Some(labels) = &self.scene.labels {
            MaskSet::from_labels(
                camera.width as usize,
                camera.height as usize,
                self.scene.object_count,
                labels[cam].data.clone(),
            )
        } else {
            Err(Error::Config(
                "object masks need a trained identity stage or label images".into(),
            ))
        }
    }

    /// Runs `iterations` identity steps. `observer` sees the session after
    /// every step.
    pub fn train_identity(
        &mut self,
        iterations: usize,
        mut observer: impl FnMut(&Session, &LossRow) -> Result<()>,
    ) -> Result<Vec<LossRow>> {
        if self.scene.labels.is_none() {
            return Err(Error::Config("identity training needs label images".into()));
        }
        let mut rows = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let row = self.identity_step()?;
            self.masks.iter_mut().for_each(|m| *m = None);
            observer(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Mean cross-entropy, accuracy and gradients over `cams`, without
    /// updating anything.
    pub fn identity_gradients(&self, cams: &[usize]) -> Result<(GradientBundle, f64, f64)> {
        let labels = self
            .scene
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("identity training needs label images".into()))?;
        let n = self.scene.gaussians.len();
        let mut grads = GradientBundle::new();
        let (mut ce, mut acc) = (0.0, 0.0);
        for &c in cams {
            let out = render_tiled(
                &self.scene.gaussians,
                self.camera(c)?,
                self.render_options(Channels::IDENTITY, true),
            )?;
            let r = cross_entropy(
                out.identity.as_ref().unwrap(),
                &out.alpha,
                &labels[c].data,
                &self.state.model.classifier,
                self.state.config.alpha_threshold,
            )?;
            grads.accumulate("scene.e", &grad_render_features(out.contrib.as_ref(), &r.d_identity, n)?);
            grads.accumulate("cls.w", &r.d_weight);
            grads.accumulate("cls.b", &r.d_bias);
            ce += r.loss;
            acc += r.accuracy;
        }
        let b = cams.len().max(1) as f64;
        grads.scale(1.0 / b);
        Ok((grads, ce / b, acc / b))
    }

    fn identity_step(&mut self) -> Result<LossRow> {
        let start = Instant::now();
        let step = self.identity_steps();
        let cams = self.schedule(step);
        let (grads, ce, acc) = self.identity_gradients(&cams)?;
        let grad_norm = total_norm(&grads);
        let st = &mut self.state;
        apply_updates(&mut st.identity_opt, st.config.lr, &grads, &mut self.scene.gaussians, &mut st.model)?;
        Ok(LossRow {
            stage: "identity",
            step: step + 1,
            cameras: cams,
            l_v: None,
            l_o: None,
            l_total: None,
            cross_entropy: Some(ce),
            accuracy: Some(acc),
            grad_norm,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn check_teacher(&self, teacher: &TeacherTokens) -> Result<()> {
        let (t, d) = self.token_shape();
        if teacher.token_count != t || teacher.token_dim != d {
            return Err(Error::Config(format!(
                "teacher tokens are {}x{}, the encoder produces {t}x{d}",
                teacher.token_count, teacher.token_dim
            )));
        }
        teacher.validate_for(self.scene.cameras.len(), self.scene.object_count)
    }

    /// Runs `iterations` language steps against `teacher`. Afterwards the
    /// scene-level scale-shift is copied from the view level and the PCA
    /// basis is refitted.
    pub fn train_language(
        &mut self,
        teacher: &TeacherTokens,
        iterations: usize,
        mut observer: impl FnMut(&Session, &LossRow) -> Result<()>,
    ) -> Result<Vec<LossRow>> {
        self.check_teacher(teacher)?;
        if !teacher.objects.is_empty() {
            for c in 0..self.scene.cameras.len() {
                self.masks(c)?;
            }
        }
        let digest = self.scene.gaussians.geometry_digest();
        let mut rows = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let row = self.language_step(teacher)?;
            self.sync_scene_scale_shift();
            observer(self, &row)?;
            rows.push(row);
        }
        if self.scene.gaussians.geometry_digest() != digest {
            return Err(Error::State("frozen geometry changed during language training".into()));
        }
        self.state.pca = Some(Pca::fit(&self.scene.gaussians));
        Ok(rows)
    }

    fn sync_scene_scale_shift(&mut self) {
        let m = &mut self.state.model;
        m.ss_scene.a.copy_from_slice(&m.ss_view.a);
        m.ss_scene.b.copy_from_slice(&m.ss_view.b);
    }

    /// Loss terms and gradients of one camera.
    fn language_terms(
        &self,
        teacher: &TeacherTokens,
        cam: usize,
        grads: Option<&mut GradientBundle>,
    ) -> Result<CameraEval> {
        let model = &self.state.model;
        let cfg = &self.state.config;
        let want_grads = grads.is_some();
        let out = render_tiled(
            &self.scene.gaussians,
            &self.scene.cameras[cam],
            self.render_options(Channels::FEATURES, want_grads),
        )?;
        let fv = out.feat_view.as_ref().unwrap();
        let fo = out.feat_object.as_ref().unwrap();

        let to_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let view_target = teacher.view(cam).map(to_f64);
        let (tok_v, cache_v) = match view_target {
            Some(_) => {
                let (t, c) = model.encoder.forward(fv, Level::View)?;
                (t, Some(c))
            }
            None => (TokenGrid::zeros(Level::View, 0, 0, cfg.encoder.token_dim), None),
        };
        let pred_v = if cache_v.is_some() { model.ss_view.apply(&tok_v)? } else { tok_v.clone() };

        let objects = teacher.objects_in_view(cam);
        let mut obj_fwd = Vec::with_capacity(objects.len());
        if !objects.is_empty() {
            let masks = self.masks[cam]
                .as_ref()
                .ok_or_else(|| Error::State("masks not prepared".into()))?;
            for &m in &objects {
                let mask = masks.object_mask(m);
                let masked = mask_out(fo, &mask, m)?;
                let (tok, cache) = model.encoder.forward(&masked.data, Level::Object)?;
                let pred = model.ss_object.apply(&tok)?;
                obj_fwd.push((m, mask, tok, cache, pred, to_f64(teacher.object(cam, m).unwrap())));
            }
        }
        let empty: Vec<f64> = Vec::new();
        let pairs: Vec<(&TokenGrid, &[f64])> = obj_fwd.iter().map(|o| (&o.4, &o.5[..])).collect();
        let mut terms = grad_losses(&pred_v, view_target.as_deref().unwrap_or(&empty), &pairs)?;
        let mut per_object = BTreeMap::new();
        if cfg.loss_norm == LossNorm::Sum {
            let nv = pred_v.data.len() as f64;
            terms.l_v *= nv;
            terms.d_view.iter_mut().for_each(|g| *g *= nv);
            let no = (cfg.encoder.token_dim * model.ss_object.tokens) as f64;
            terms.l_o *= no;
            terms.d_objects.iter_mut().flatten().for_each(|g| *g *= no);
            terms.l_total = terms.l_v + terms.l_o;
        }
        for o in &obj_fwd {
            let (l, _) = crate::backward::l1_loss(&o.4.data, &o.5)?;
            let scale = match cfg.loss_norm {
                LossNorm::Mean => 1.0,
                LossNorm::Sum => o.5.len() as f64,
            };
            per_object.insert(o.0, l * scale);
        }

        if let Some(grads) = grads {
            let n = self.scene.gaussians.len();
            let contrib = out.contrib.as_ref();
            if let Some(cache) = &cache_v {
                let (da, db, dx) = model.ss_view.backward(&tok_v, &terms.d_view)?;
                if cfg.learn_scale_shift {
                    grads.accumulate("ss.view.a", &da);
                    grads.accumulate("ss.view.b", &db);
                }
                let eg = grad_encoder(&model.encoder, cache, &dx)?;
                eg.accumulate_into(grads);
                grads.accumulate("scene.f_v", &grad_render_features(contrib, &eg.input, n)?);
            }
            if !obj_fwd.is_empty() {
                let mut d_fo = FeatureMap::zeros(fo.width, fo.height, fo.channels);
                for (o, d_pred) in obj_fwd.iter().zip(&terms.d_objects) {
                    let (da, db, dx) = model.ss_object.backward(&o.2, d_pred)?;
                    if cfg.learn_scale_shift {
                        grads.accumulate("ss.object.a", &da);
                        grads.accumulate("ss.object.b", &db);
                    }
                    let eg = grad_encoder(&model.encoder, &o.3, &dx)?;
                    eg.accumulate_into(grads);
                    let c = fo.channels;
                    for (k, &inside) in o.1.data.iter().enumerate() {
                        if inside != 0 {
                            for j in k * c..(k + 1) * c {
                                d_fo.data[j] += eg.input.data[j];
                            }
                        }
                    }
                }
                grads.accumulate("scene.f_o", &grad_render_features(contrib, &d_fo, n)?);
            }
        }
        Ok(CameraEval {
            camera: cam,
            l_v: cache_v.as_ref().map(|_| terms.l_v),
            objects: per_object,
            l_o: terms.l_o,
        })
    }

    /// Mean `(L_v, L_o)` and gradients over `cams`, without updating
    /// anything.
    pub fn language_gradients(&mut self, teacher: &TeacherTokens, cams: &[usize]) -> Result<(GradientBundle, f64, f64)> {
        self.check_teacher(teacher)?;
        for &c in cams {
            self.camera(c)?;
            if !teacher.objects_in_view(c).is_empty() {
                self.masks(c)?;
            }
        }
        let mut grads = GradientBundle::new();
        let (mut l_v, mut l_o) = (0.0, 0.0);
        for &c in cams {
            let e = self.language_terms(teacher, c, Some(&mut grads))?;
            l_v += e.l_v.unwrap_or(0.0);
            l_o += e.l_o;
        }
        let b = cams.len().max(1) as f64;
        grads.scale(1.0 / b);
        Ok((grads, l_v / b, l_o / b))
    }

    /// Predicted minus target token values of one camera, view grid first,
    /// then objects in ascending order.
    pub fn language_residuals(&mut self, teacher: &TeacherTokens, cam: usize) -> Result<Vec<f64>> {
        self.check_teacher(teacher)?;
        let mut out = Vec::new();
        if let Some(t) = teacher.view(cam) {
            let pred = self.view_tokens(cam)?;
            out.extend(pred.data.iter().zip(t).map(|(p, &t)| p - t as f64));
        }
        for m in teacher.objects_in_view(cam) {
            let pred = self.object_tokens(cam, m)?;
            let t = teacher.object(cam, m).unwrap();
            out.extend(pred.data.iter().zip(t).map(|(p, &t)| p - t as f64));
        }
        Ok(out)
    }

    fn language_step(&mut self, teacher: &TeacherTokens) -> Result<LossRow> {
        let start = Instant::now();
        let step = self.language_steps();
        let cams = self.schedule(step);
        let (grads, l_v, l_o) = self.language_gradients(teacher, &cams)?;
        let grad_norm = total_norm(&grads);
        let st = &mut self.state;
        apply_updates(&mut st.language_opt, st.config.lr, &grads, &mut self.scene.gaussians, &mut st.model)?;
        Ok(LossRow {
            stage: "language",
            step: step + 1,
            cameras: cams,
            l_v: Some(l_v),
            l_o: Some(l_o),
            l_total: Some(l_v + l_o),
            cross_entropy: None,
            accuracy: None,
            grad_norm,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Mutable access to a learnable tensor by its checkpoint name
    /// (`scene.f_v`, `enc.tok.w`, `ss.view.b`, `cls.w`, ...). Cached masks
    /// are dropped since they may depend on the tensor.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.masks.iter_mut().for_each(|m| *m = None);
        if let Some(p) = scene_param(&mut self.scene.gaussians, name) {
            return Some(p);
        }
        self.state
            .model
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    /// Current token losses of every camera, without updating anything.
    pub fn language_losses(&mut self, teacher: &TeacherTokens) -> Result<Vec<CameraEval>> {
        self.check_teacher(teacher)?;
        (0..self.scene.cameras.len())
            .map(|c| {
                if !teacher.objects_in_view(c).is_empty() {
                    self.masks(c)?;
                }
                self.language_terms(teacher, c, None)
            })
            .collect()
    }

    /// Mean of `L_v + L_o` over all cameras.
    pub fn mean_total_loss(&mut self, teacher: &TeacherTokens) -> Result<f64> {
        let evals = self.language_losses(teacher)?;
        let n = evals.len().max(1) as f64;
        Ok(evals.iter().map(|e| e.l_v.unwrap_or(0.0) + e.l_o).sum::<f64>() / n)
    }

    pub fn evaluate(&mut self, teacher: Option<&TeacherTokens>) -> Result<EvalReport> {
        let per_camera = match teacher {
            Some(t) => self.language_losses(t)?,
            None => Vec::new(),
        };
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let l_v = mean(per_camera.iter().filter_map(|e| e.l_v).collect());
        let l_o = mean(per_camera.iter().map(|e| e.l_o).collect());
        let l_total = match (l_v, l_o) {
            (Some(v), Some(o)) => Some(v + o),
            (None, Some(o)) => Some(o),
            _ => None,
        };
        let (mut mask_iou, mut pixel_accuracy) = (Vec::new(), None);
        if self.scene.labels.is_some() && self.identity_steps() > 0 {
            let mut pred = Vec::new();
            for c in 0..self.scene.cameras.len() {
                pred.extend_from_slice(&self.masks(c)?.labels);
            }
            let labels = self.scene.labels.as_ref().unwrap();
            let truth: Vec<u32> = labels.iter().flat_map(|l| l.data.iter().copied()).collect();
            mask_iou = object_ious(&pred, &truth, self.scene.object_count);
            let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            pixel_accuracy = Some(hits as f64 / truth.len().max(1) as f64);
        }
        Ok(EvalReport {
            cameras: self.scene.cameras.len(),
            identity_steps: self.identity_steps(),
            language_steps: self.language_steps(),
            l_v,
            l_o,
            l_total,
            per_camera,
            mask_iou,
            pixel_accuracy,
            geometry_digest: hex(&self.scene.gaussians.geometry_digest()),
        })
    }

    /// Aligned view tokens of one camera.
    pub fn view_tokens(&self, cam: usize) -> Result<TokenGrid> {
        let out = self.render(cam, Channels::FEAT_VIEW)?;
        let tok = self.state.model.encoder.encode(out.feat_view.as_ref().unwrap(), Level::View)?;
        self.state.model.ss_view.apply(&tok)
    }

    /// Aligned tokens of object `m` in camera `cam`, from its masked
    /// object-level feature map.
    pub fn object_tokens(&self, cam: usize, m: usize) -> Result<TokenGrid> {
        self.camera(cam)?;
        if m >= self.scene.object_count {
            return Err(Error::Arg(format!("object {m} out of range ({} objects)", self.scene.object_count)));
        }
        let mask = match &self.masks[cam] {
            Some(set) => set.object_mask(m),
            None => self.compute_masks(cam)?.object_mask(m),
        };
        let out = self.render(cam, Channels::FEAT_OBJECT)?;
        let masked = mask_out(out.feat_object.as_ref().unwrap(), &mask, m)?;
        let tok = self.state.model.encoder.encode(&masked.data, Level::Object)?;
        self.state.model.ss_object.apply(&tok)
    }

    /// View grids of `cams` concatenated under the scene token cap, aligned
    /// per view with the scene-level scale-shift.
    pub fn scene_tokens(&self, cams: &[usize]) -> Result<TokenGrid> {
        if cams.is_empty() {
            return Err(Error::Arg("scene tokens need at least one camera".into()));
        }
        let grids = cams
            .iter()
            .map(|&c| {
                let out = self.render(c, Channels::FEAT_VIEW)?;
                self.state.model.encoder.encode(out.feat_view.as_ref().unwrap(), Level::View)
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = concat_scene_tokens(&grids, self.state.config.scene_token_cap)?;
        self.state.model.ss_scene.apply_repeated(&scene)
    }

    /// Fills the mask cache of every camera.
    pub fn prepare_masks(&mut self) -> Result<()> {
        for c in 0..self.scene.cameras.len() {
            self.masks(c)?;
        }
        Ok(())
    }

    /// Cached masks of one camera, if computed.
    pub fn cached_masks(&self, cam: usize) -> Option<&MaskSet> {
        self.masks.get(cam).and_then(|m| m.as_ref())
    }

    /// The stored PCA basis, fitted now if the session has none.
    pub fn pca(&mut self) -> &Pca {
        if self.state.pca.is_none() {
            self.state.pca = Some(Pca::fit(&self.scene.gaussians));
        }
        self.state.pca.as_ref().unwrap()
    }

    /// Predicted tokens for every view and every object with a non-empty
    /// mask, as a teacher.
    pub fn predicted_teacher(&mut self) -> Result<TeacherTokens> {
        let (t, d) = self.token_shape();
        let mut tt = TeacherTokens::new(t, d);
        for c in 0..self.scene.cameras.len() {
            let to_f32 = |g: TokenGrid| g.data.iter().map(|&x| x as f32).collect::<Vec<_>>();
            tt.views.insert(c, to_f32(self.view_tokens(c)?));
            for m in 0..self.scene.object_count {
                if !self.masks(c)?.object_mask(m).is_empty() {
                    let tok = self.object_tokens(c, m)?;
                    tt.objects.insert((c, m), to_f32(tok));
                }
            }
        }
        Ok(tt)
    }
}

/// A session with its own random features and encoder whose view and
/// object shifts are drawn from `[-range_scale, range_scale]`. Its
/// predictions form a teacher that a fresh session can reach exactly.
pub fn planted_session(scene: &SceneBundle, config: &TrainConfig, seed: u64, range_scale: f64) -> Result<Session> {
    use rand::Rng;
    let mut s = scene.clone();
    for arr in [&mut s.gaussians.feat_view, &mut s.gaussians.feat_object] {
        arr.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut cfg = config.clone();
    cfg.seed = seed;
    cfg.feature_init_std = 1.0;
    let mut planted = Session::new(s, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let m = &mut planted.state.model;
    for ss in [&mut m.ss_view, &mut m.ss_object] {
        ss.b.iter_mut()
            .for_each(|b| *b = (range_scale * rng.random_range(-1.0..=1.0)) as f32);
    }
    Ok(planted)
}

pub fn planted_teacher(scene: &SceneBundle, config: &TrainConfig, seed: u64, range_scale: f64) -> Result<TeacherTokens> {
    planted_session(scene, config, seed, range_scale)?.predicted_teacher()
}

fn check_cameras(scene: &SceneBundle, config: &TrainConfig) -> Result<usize> {
    let first = scene
        .cameras
        .first()
        .ok_or_else(|| Error::Config("scene has no cameras".into()))?;
    for (i, cam) in scene.cameras.iter().enumerate() {
        if (cam.width, cam.height) != (first.width, first.height) {
            return Err(Error::Config(format!(
                "camera {i} is {}x{}, camera 0 is {}x{}; all cameras must share one size",
                cam.width, cam.height, first.width, first.height
            )));
        }
        cam.check_patch_multiple(config.encoder.patch)
            .map_err(|e| Error::Config(format!("camera {i}: {e}")))?;
    }
    config.encoder.token_count(first.width as usize, first.height as usize)
}

fn total_norm(grads: &GradientBundle) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn scene_param<'a>(g: &'a mut Gaussians, name: &str) -> Option<&'a mut [f32]> {
    match name {
        "scene.f_v" => Some(&mut g.feat_view),
        "scene.f_o" => Some(&mut g.feat_object),
        "scene.e" => Some(&mut g.identity),
        _ => None,
    }
}

fn apply_updates(opt: &mut Optimizer, lr: f64, grads: &GradientBundle, g: &mut Gaussians, model: &mut Model) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::State("non-finite gradient".into()));
    }
    opt.begin_step();
    let mut params = model.tensors_mut();
    for (name, grad) in grads.iter() {
        let dst = match scene_param(g, name) {
            Some(p) => p,
            None => params
                .iter_mut()
                .find(|(n, _)| n == name)
                .map(|(_, p)| &mut **p)
                .ok_or_else(|| Error::State(format!("gradient for unknown tensor {name}")))?,
        };
        opt.update(name, dst, grad, lr)?;
    }
    Ok(())
}
