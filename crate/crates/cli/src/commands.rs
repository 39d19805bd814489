use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde_json::json;

use convsplat_core::raster::bench::{bench_render, to_csv, BenchSpec, Rasterizer};
use convsplat_core::scene::{export_ply, export_sidecar, import_sidecar, make_synthetic_scene, Checkpoint, SynthSpec};
use convsplat_core::teacher::{import_raw, load_teacher, make_synthetic_teacher, TeacherSpec, TeacherTokens};
use convsplat_core::train::{loss_csv, planted_teacher, LossRow};
use convsplat_core::viz::{label_bytes, rgb_png};
use convsplat_core::{Channels, Session, TrainConfig};

use crate::cli::*;
use crate::codebook::{object_caption, planted_codebook};
use crate::config::is_structural;
use crate::error::CliError;
use crate::images::{render_png, ImageChannel};
use crate::manifest::Recorder;
use crate::service::{self, checkpoint_session, LoadRequest, ServiceOptions};

pub type CmdResult = Result<serde_json::Value, CliError>;

/// Everything a command needs besides its own arguments.
pub struct Ctx {
    pub out: PathBuf,
    pub config: TrainConfig,
    /// `--config` and `--set` pairs as given, for resumed runs.
    pub overrides: Vec<(String, String)>,
    pub rec: Recorder,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.rec.output(&p);
        Ok(p)
    }
}

fn load_checkpoint(path: &Path, rec: &mut Recorder) -> Result<Checkpoint, CliError> {
    rec.input(path);
    import_sidecar(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(CliError::Runtime)
}

fn load_teacher_file(path: &Path, session: &Session, rec: &mut Recorder) -> Result<TeacherTokens, CliError> {
    rec.input(path);
    Ok(load_teacher(path, Some(session.token_shape()))?)
}

pub fn synth(a: &SynthArgs, ctx: &mut Ctx) -> CmdResult {
    let mut spec = SynthSpec::new(a.objects, a.per_object, ctx.config.seed);
    spec.n_cameras = a.cameras;
    spec.width = a.res;
    spec.height = a.res;
    let patch = ctx.config.encoder.patch;
    if a.res as usize % patch != 0 {
        return Err(CliError::Usage(format!("--res {} is not a multiple of patch size {patch}", a.res)));
    }
    let scene = make_synthetic_scene(&spec);
    let mut bytes = Vec::new();
    Checkpoint::scene_only(scene.clone()).to_container().write_to(&mut bytes)?;
    ctx.write("scene.cstf", &bytes)?;
    let ply = ctx.path("scene.ply");
    export_ply(&scene.gaussians, &ply)?;
    ctx.rec.output(&ply);
    for (i, l) in scene.labels.as_ref().unwrap().iter().enumerate() {
        ctx.write(&format!("labels/cam{i}.png"), &rgb_png(l.width, l.height, label_bytes(&l.data))?)?;
    }
    let teacher = match a.teacher {
        TeacherKind::None => None,
        TeacherKind::Projection => {
            let mut ts = TeacherSpec::new(ctx.config.encoder.token_dim, patch, ctx.config.seed.wrapping_add(100));
            ts.range_scale = a.range;
            Some(make_synthetic_teacher(&scene, &ts)?)
        }
        TeacherKind::Planted => Some(planted_teacher(
            &scene,
            &ctx.config,
            ctx.config.seed.wrapping_add(1000),
            a.range,
        )?),
    };
    if let Some(t) = &teacher {
        ctx.write("teacher.cstf", &t.to_container().to_bytes())?;
    }
    log::info!(
        "synthetic scene: {} gaussians, {} cameras, {} objects",
        scene.gaussians.len(),
        scene.cameras.len(),
        scene.object_count
    );
    Ok(json!({
        "gaussians": scene.gaussians.len(),
        "cameras": scene.cameras.len(),
        "objects": scene.object_count,
        "teacher_grids": teacher.map(|t| t.views.len() + t.objects.len()),
    }))
}

fn progress(every: usize) -> impl FnMut(&Session, &LossRow) -> convsplat_core::Result<()> {
    move |_, r: &LossRow| {
        if every > 0 && r.step as usize % every == 0 {
            match r.l_total {
                Some(l) => log::info!("{} step {}: L_total {l:.5}", r.stage, r.step),
                None => log::info!(
                    "{} step {}: cross-entropy {:.5}, accuracy {:.4}",
                    r.stage,
                    r.step,
                    r.cross_entropy.unwrap_or(0.0),
                    r.accuracy.unwrap_or(0.0)
                ),
            }
        }
        Ok(())
    }
}

fn observer<'a>(
    stage: &'a str,
    log_every: usize,
    ckpt_every: usize,
    snaps: &'a mut Vec<(String, Vec<u8>)>,
) -> impl FnMut(&Session, &LossRow) -> convsplat_core::Result<()> + 'a {
    let mut log = progress(log_every);
    move |s: &Session, r: &LossRow| {
        log(s, r)?;
        if ckpt_every > 0 && r.step as usize % ckpt_every == 0 {
            let bytes = Checkpoint::of_session(s).to_container().to_bytes();
            snaps.push((format!("checkpoints/{stage}_{:06}.cstf", r.step), bytes));
        }
        Ok(())
    }
}

pub fn train(a: &TrainArgs, ctx: &mut Ctx) -> CmdResult {
    let wants_language = matches!(a.stage, Stage::Language | Stage::All);
    if wants_language && a.teacher.is_none() {
        return Err(CliError::Usage(
            "the language stage needs teacher tokens: pass --teacher <file> (see `synth` or `import-teacher`)".into(),
        ));
    }
    let mut session = match (&a.scene, &a.resume) {
        (Some(p), None) => {
            let mut ckpt = load_checkpoint(p, &mut ctx.rec)?;
            ckpt.training = None;
            Session::new(ckpt.scene, ctx.config.clone())?
        }
        (None, Some(p)) => {
            let ckpt = load_checkpoint(p, &mut ctx.rec)?;
            let mut s = ckpt.into_session()?;
            let mut cfg = s.config().clone();
            for (k, v) in &ctx.overrides {
                if is_structural(k) {
                    return Err(CliError::Usage(format!("{k} cannot change when resuming")));
                }
                cfg.set(k, v)?;
            }
            s.state.config = cfg;
            s
        }
        _ => return Err(CliError::Usage("pass --scene or --resume".into())),
    };
    ctx.config = session.config().clone();
    let teacher = match &a.teacher {
        Some(p) if wants_language => Some(load_teacher_file(p, &session, &mut ctx.rec)?),
        _ => None,
    };

    let every = session.config().checkpoint_every;
    let mut rows = Vec::new();
    let mut snapshots: Vec<(String, Vec<u8>)> = Vec::new();
    let start = Instant::now();
    if matches!(a.stage, Stage::Identity | Stage::All) {
        let n = session.config().identity_iterations;
        if session.scene.labels.is_none() {
            if a.stage == Stage::Identity {
                return Err(CliError::Usage("identity stage needs label images in the scene".into()));
            }
            log::warn!("scene has no labels; skipping the identity stage");
        } else {
            log::info!("identity stage: {n} steps");
            rows.extend(session.train_identity(n, observer("identity", a.log_every, every, &mut snapshots))?);
        }
    }
    if let Some(t) = &teacher {
        let n = session.config().language_iterations;
        log::info!("language stage: {n} steps");
        rows.extend(session.train_language(t, n, observer("language", a.log_every, every, &mut snapshots))?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    for (name, bytes) in &snapshots {
        ctx.write(name, bytes)?;
    }
    session.pca();
    let report = session.evaluate(teacher.as_ref())?;
    ctx.write("checkpoint.cstf", &Checkpoint::of_session(&session).to_container().to_bytes())?;
    ctx.write("loss.csv", loss_csv(&rows).as_bytes())?;
    let eval = serde_json::to_string_pretty(&report).context("serializing evaluation")?;
    ctx.write("eval.json", eval.as_bytes())?;
    log::info!("trained {} steps in {elapsed:.1}s", rows.len());
    Ok(json!({
        "identity_steps": session.identity_steps(),
        "language_steps": session.language_steps(),
        "l_total": report.l_total,
        "mask_iou": report.mask_iou,
    }))
}

fn open_session(path: &Path, ctx: &mut Ctx) -> Result<Session, CliError> {
    let ckpt = load_checkpoint(path, &mut ctx.rec)?;
    let s = checkpoint_session(ckpt, &ctx.config)?;
    ctx.config = s.config().clone();
    Ok(s)
}

pub fn render(a: &RenderArgs, ctx: &mut Ctx) -> CmdResult {
    let channels: Vec<ImageChannel> = if a.channel == "all" {
        ImageChannel::ALL.to_vec()
    } else {
        vec![ImageChannel::parse(&a.channel).ok_or_else(|| {
            CliError::Usage(format!("unknown channel {:?} (rgb, feat_v_pca, mask, alpha, all)", a.channel))
        })?]
    };
    let mut s = open_session(&a.ckpt, ctx)?;
    let n = s.scene.cameras.len();
    let cams: Vec<usize> = if a.cams.is_empty() { (0..n).collect() } else { a.cams.clone() };
    if let Some(&c) = cams.iter().find(|&&c| c >= n) {
        return Err(CliError::Usage(format!("camera {c} out of range ({n} cameras)")));
    }
    let masks = s.prepare_masks();
    s.pca();
    let mut written = Vec::new();
    for &c in &cams {
        for &ch in &channels {
            if ch == ImageChannel::Mask {
                if let Err(e) = &masks {
                    if a.channel == "all" {
                        log::warn!("skipping masks: {e}");
                        continue;
                    }
                    return Err(CliError::Usage(format!("mask channel unavailable: {e}")));
                }
            }
            let name = format!("render/cam{c}_{}.png", ch.name());
            ctx.write(&name, &render_png(&s, c, ch)?)?;
            written.push(name);
        }
    }
    Ok(json!({ "images": written }))
}

pub fn eval(a: &EvalArgs, ctx: &mut Ctx) -> CmdResult {
    let mut s = open_session(&a.ckpt, ctx)?;
    let teacher = match &a.teacher {
        Some(p) => Some(load_teacher_file(p, &s, &mut ctx.rec)?),
        None => None,
    };
    let report = s.evaluate(teacher.as_ref())?;
    let text = serde_json::to_string_pretty(&report).context("serializing evaluation")?;
    ctx.write("eval.json", text.as_bytes())?;
    Ok(serde_json::to_value(&report).context("serializing evaluation")?)
}

fn parse_size(s: &str) -> Result<usize, CliError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad scene size {s:?}")))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e9) {
        return Err(CliError::Usage(format!("scene size {s:?} must be a positive whole number")));
    }
    Ok(v as usize)
}

fn parse_channels(s: &str) -> Result<Channels, CliError> {
    Ok(match s {
        "all" => Channels::ALL,
        "features" => Channels::FEATURES,
        "color" => Channels::COLOR,
        "identity" => Channels::IDENTITY,
        _ => {
            return Err(CliError::Usage(format!(
                "unknown channels {s:?} (all, features, color, identity)"
            )))
        }
    })
}

pub fn bench(a: &BenchArgs, ctx: &mut Ctx) -> CmdResult {
    let sizes = a.sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>, _>>()?;
    let mut spec = BenchSpec::new(sizes, a.res.clone(), a.reps);
    spec.seed = ctx.config.seed;
    spec.channels = parse_channels(&a.channels)?;
    spec.rasterizers = a
        .rasterizers
        .iter()
        .map(|r| Rasterizer::parse(r.trim()).ok_or_else(|| CliError::Usage(format!("unknown rasterizer {r:?}"))))
        .collect::<Result<_, _>>()?;
    let rows = bench_render(&spec)?;
    for r in &rows {
        log::info!(
            "{} gaussians at {}x{} ({}): {:.2} ms",
            r.n_gaussians,
            r.width,
            r.height,
            r.rasterizer.name(),
            r.mean_ms
        );
    }
    ctx.write("bench.csv", to_csv(&rows).as_bytes())?;
    let configs = rows.iter().map(|r| r.config_id).max().map_or(0, |m| m + 1);
    Ok(json!({ "configs": configs, "rows": rows.len() }))
}

pub fn serve(a: &ServeArgs, ctx: &mut Ctx) -> CmdResult {
    let options = ServiceOptions {
        llm_url: a.llm_url.clone(),
        llm_timeout: std::time::Duration::from_secs_f64(a.llm_timeout.max(0.001)),
        base_config: ctx.config.clone(),
    };
    let load = LoadRequest {
        checkpoint: a.ckpt.clone(),
        scene: if a.ckpt.is_some() { None } else { a.scene.clone() },
        codebook: a.codebook.clone(),
        captions: a.captions.clone(),
    };
    let state = service::startup_state(options, load)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    rt.block_on(async {
        let (addr, handle) = service::spawn(state, &a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on http://{addr}");
        handle.await.context("server task")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(json!({}))
}

pub fn import_teacher(a: &ImportTeacherArgs, ctx: &mut Ctx) -> CmdResult {
    let tokens = match (&a.manifest, &a.cstf) {
        (Some(m), None) => {
            ctx.rec.input(m);
            import_raw(m)?
        }
        (None, Some(c)) => {
            ctx.rec.input(c);
            load_teacher(c, None)?
        }
        _ => return Err(CliError::Usage("pass exactly one of --manifest or --cstf".into())),
    };
    if let Some(t) = a.tokens {
        if t != tokens.token_count {
            return Err(CliError::Usage(format!("expected {t} tokens per grid, found {}", tokens.token_count)));
        }
    }
    if let Some(d) = a.dim {
        if d != tokens.token_dim {
            return Err(CliError::Usage(format!("expected dimension {d}, found {}", tokens.token_dim)));
        }
    }
    ctx.write("teacher.cstf", &tokens.to_container().to_bytes())?;
    let stats: serde_json::Map<String, serde_json::Value> = tokens
        .stats()
        .into_iter()
        .map(|(k, s)| (k, json!({ "mean": s.mean, "std": s.std, "max_abs": s.max_abs })))
        .collect();
    ctx.write(
        "teacher_stats.json",
        serde_json::to_string_pretty(&stats).context("serializing stats")?.as_bytes(),
    )?;
    Ok(json!({
        "token_count": tokens.token_count,
        "token_dim": tokens.token_dim,
        "views": tokens.views.len(),
        "objects": tokens.objects.len(),
    }))
}

pub fn export(a: &ExportArgs, ctx: &mut Ctx) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt, &mut ctx.rec)?;
    std::fs::create_dir_all(&ctx.out)?;
    let ply = ctx.path("scene.ply");
    export_ply(&ckpt.scene.gaussians, &ply)?;
    ctx.rec.output(&ply);
    let features = ctx.path("features.cstf");
    export_sidecar(&Checkpoint::scene_only(ckpt.scene.clone()), &features)?;
    ctx.rec.output(&features);
    let mut entries = None;
    if a.codebook {
        let mut s = checkpoint_session(ckpt, &ctx.config)?;
        s.prepare_masks()?;
        let n = s.scene.object_count;
        let captions: Vec<String> = (0..n)
            .map(|m| a.captions.get(m).cloned().unwrap_or_else(|| object_caption(m)))
            .collect();
        let cb = planted_codebook(&s, &captions)?;
        let (v, c) = (ctx.path("codebook.cstf"), ctx.path("codebook.json"));
        cb.save(&v, &c)?;
        ctx.rec.output(&v);
        ctx.rec.output(&c);
        entries = Some(cb.entries.len());
    }
    Ok(json!({ "codebook_entries": entries }))
}
