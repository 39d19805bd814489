use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "convsplat", version, about = "Gaussian language-field rendering, training and chat service")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; every file a command writes goes here.
    #[arg(long, short, global = true, default_value = "out")]
    pub out: PathBuf,
    /// TOML config file, flat dotted keys or tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable: --set lr=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for generation and training; overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log filter, as accepted by env_logger.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with labels and teacher tokens.
    Synth(SynthArgs),
    /// Run the identity and/or language stage.
    Train(TrainArgs),
    /// Write PNG renders of a checkpoint.
    Render(RenderArgs),
    /// Evaluate losses and mask quality of a checkpoint.
    Eval(EvalArgs),
    /// Time the tiled and reference rasterizers.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Convert teacher tokens to the container format, validating shapes.
    ImportTeacher(ImportTeacherArgs),
    /// Export a checkpoint as PLY plus feature container, or a planted codebook.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TeacherKind {
    /// Projected label descriptors plus wide per-token offsets.
    Projection,
    /// Predictions of a randomly initialised model; reachable exactly.
    Planted,
    None,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub objects: usize,
    #[arg(long, default_value_t = 250)]
    pub per_object: usize,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    /// Square image size; must be a multiple of the patch size.
    #[arg(long, default_value_t = 112)]
    pub res: u32,
    #[arg(long, value_enum, default_value_t = TeacherKind::Projection)]
    pub teacher: TeacherKind,
    /// Half-width of the teacher's per-token offsets.
    #[arg(long, default_value_t = 100.0)]
    pub range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Identity,
    Language,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scene container; any training state in it is ignored.
    #[arg(long, conflicts_with = "resume")]
    pub scene: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Teacher token container, needed by the language stage.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Stage::All)]
    pub stage: Stage,
    /// Log every n-th step.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint or scene container.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Camera ids; all cameras when omitted.
    #[arg(long = "cam")]
    pub cams: Vec<usize>,
    /// rgb, feat_v_pca, mask, alpha or all.
    #[arg(long, default_value = "all")]
    pub channel: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene sizes, comma separated; scientific notation allowed.
    #[arg(long, default_value = "1e4,1e5", value_delimiter = ',')]
    pub sizes: Vec<String>,
    /// Square resolutions, comma separated.
    #[arg(long, default_value = "256,512", value_delimiter = ',')]
    pub res: Vec<u32>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Rasterizers to time.
    #[arg(long = "impl", default_value = "tiled,reference", value_delimiter = ',')]
    pub rasterizers: Vec<String>,
    /// Channel groups: all, features, color, identity.
    #[arg(long, default_value = "features")]
    pub channels: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CHATSPLAT_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Scene container loaded at startup with a fresh model.
    #[arg(long, env = "CHATSPLAT_SCENE")]
    pub scene: Option<PathBuf>,
    /// Checkpoint loaded at startup; takes precedence over --scene.
    #[arg(long, env = "CHATSPLAT_CKPT")]
    pub ckpt: Option<PathBuf>,
    /// External chat endpoint for the proxy backend.
    #[arg(long, env = "CHATSPLAT_LLM_URL")]
    pub llm_url: Option<String>,
    /// Proxy timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub llm_timeout: f64,
    /// Codebook vectors for the mock backend.
    #[arg(long, requires = "captions")]
    pub codebook: Option<PathBuf>,
    /// Codebook captions (JSON array of strings).
    #[arg(long, requires = "codebook")]
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportTeacherArgs {
    /// JSON manifest listing raw little-endian f32 files.
    #[arg(long, conflicts_with = "cstf", required_unless_present = "cstf")]
    pub manifest: Option<PathBuf>,
    /// Existing token container to validate and copy.
    #[arg(long)]
    pub cstf: Option<PathBuf>,
    /// Expected tokens per grid.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Expected token dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write a codebook planted from the checkpoint's own tokens.
    #[arg(long)]
    pub codebook: bool,
    /// Object captions for the planted codebook, in object order.
    #[arg(long = "caption")]
    pub captions: Vec<String>,
}
