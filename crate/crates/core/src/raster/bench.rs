//! Timing of the tiled and reference rasterizers on generated scenes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_reference, render_tiled, Channels, RenderOptions};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianGeometry, Gaussians};

pub const CSV_HEADER: &str =
    "config_id,n_gaussians,width,height,channels,impl,mean_ms,p50_ms,p95_ms,fps";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rasterizer {
    Tiled,
    Reference,
}

impl Rasterizer {
    pub fn name(self) -> &'static str {
        match self {
            Rasterizer::Tiled => "tiled",
            Rasterizer::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiled" => Some(Self::Tiled),
            "reference" => Some(Self::Reference),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub scene_sizes: Vec<usize>,
    /// Square image sizes in pixels.
    pub resolutions: Vec<u32>,
    pub repetitions: usize,
    pub rasterizers: Vec<Rasterizer>,
    pub channels: Channels,
    pub feature_dim: usize,
    pub identity_dim: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(scene_sizes: Vec<usize>, resolutions: Vec<u32>, repetitions: usize) -> Self {
        Self {
            scene_sizes,
            resolutions,
            repetitions,
            rasterizers: vec![Rasterizer::Tiled, Rasterizer::Reference],
            channels: Channels::ALL,
            feature_dim: crate::scene::DEFAULT_FEATURE_DIM,
            identity_dim: crate::scene::DEFAULT_IDENTITY_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config_id: usize,
    pub n_gaussians: usize,
    pub width: u32,
    pub height: u32,
    pub channels: String,
    pub rasterizer: Rasterizer,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

/// Camera used by [`make_bench_scene`]: at the origin, looking down `+z`.
pub fn bench_camera(resolution: u32) -> Camera {
    Camera::identity(resolution, resolution, resolution as f32)
}

/// Random small Gaussians filling the view frustum of [`bench_camera`]
/// between depths 2 and 6. Features are random; deterministic given `seed`.
pub fn make_bench_scene(n: usize, feature_dim: usize, identity_dim: usize, seed: u64) -> Gaussians {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Gaussians::new(feature_dim, identity_dim);
    // sizes shrink as the count grows so coverage stays comparable
    let base = 0.08 / (n.max(1) as f32 / 1000.0).sqrt().max(1.0);
    for _ in 0..n {
        let z: f32 = rng.random_range(2.0..6.0);
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0f32));
        let qn = q.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        g.push(GaussianGeometry {
            position: [
                rng.random_range(-0.5..0.5) * z,
                rng.random_range(-0.5..0.5) * z,
                z,
            ],
            rotation: q.map(|x| x / qn),
            scale: std::array::from_fn(|_| base * rng.random_range(0.3..1.5f32)),
            opacity: rng.random_range(0.2..0.9),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        });
    }
    for v in g
        .feat_view
        .iter_mut()
        .chain(g.feat_object.iter_mut())
        .chain(g.identity.iter_mut())
    {
        *v = rng.random_range(-1.0..1.0);
    }
    g
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Times every (size, resolution, rasterizer) combination. `config_id`
/// numbers the (size, resolution) pairs; both rasterizers of a pair share it.
pub fn bench_render(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.repetitions < 3 {
        return Err(Error::Arg(format!(
            "repetitions must be at least 3, got {}",
            spec.repetitions
        )));
    }
    let mut rows = Vec::new();
    let mut config_id = 0;
    for &n in &spec.scene_sizes {
        let scene = make_bench_scene(n, spec.feature_dim, spec.identity_dim, spec.seed ^ n as u64);
        for &res in &spec.resolutions {
            let cam = bench_camera(res);
            for &r in &spec.rasterizers {
                let opts = RenderOptions::new(spec.channels);
                let mut times = Vec::with_capacity(spec.repetitions);
                for _ in 0..spec.repetitions {
                    let start = Instant::now();
                    let out = match r {
                        Rasterizer::Tiled => render_tiled(&scene, &cam, opts)?,
                        Rasterizer::Reference => render_reference(&scene, &cam, opts)?,
                    };
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                    std::hint::black_box(out);
                }
                let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
                times.sort_by(f64::total_cmp);
                rows.push(BenchRow {
                    config_id,
                    n_gaussians: n,
                    width: res,
                    height: res,
                    channels: spec.channels.describe(),
                    rasterizer: r,
                    mean_ms,
                    p50_ms: percentile(&times, 0.5),
                    p95_ms: percentile(&times, 0.95),
                    fps: if mean_ms > 0.0 { 1000.0 / mean_ms } else { 0.0 },
                });
            }
            config_id += 1;
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.3}",
            r.config_id,
            r.n_gaussians,
            r.width,
            r.height,
            r.channels,
            r.rasterizer.name(),
            r.mean_ms,
            r.p50_ms,
            r.p95_ms,
            r.fps
        )
        .unwrap();
    }
    out
}
