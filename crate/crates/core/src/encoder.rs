//! Feature-map encoder: pointwise lifting layers followed by a
//! non-overlapping patch convolution, and the learnable per-token
//! scale-shift that aligns tokens with the target embedding range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::map::FeatureMap;

pub const DEFAULT_MID_DIM: usize = 256;
pub const DEFAULT_TOKEN_DIM: usize = 64;
pub const DEFAULT_PATCH: usize = 14;
pub const DEFAULT_SCENE_TOKEN_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        [Activation::Silu, Activation::Tanh, Activation::Identity]
            .into_iter()
            .find(|a| a.code() == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channels of the rendered feature map.
    pub feature_dim: usize,
    pub mid_dim: usize,
    pub token_dim: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    /// Number of pointwise lifting layers.
    pub lift_layers: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: crate::scene::DEFAULT_FEATURE_DIM,
            mid_dim: DEFAULT_MID_DIM,
            token_dim: DEFAULT_TOKEN_DIM,
            patch: DEFAULT_PATCH,
            lift_layers: 2,
            activation: Activation::Silu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if self.lift_layers == 0 {
            return Err(Error::Config("at least one lifting layer is required".into()));
        }
        if self.feature_dim == 0 || self.mid_dim == 0 || self.token_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Token count for an image, or a shape error if a side is not a
    /// multiple of the patch size.
    pub fn token_count(&self, width: usize, height: usize) -> Result<usize> {
        let (rows, cols) = self.grid(width, height)?;
        Ok(rows * cols)
    }

    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if width % self.patch != 0 || height % self.patch != 0 || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "{width}x{height} is not a positive multiple of patch size {}",
                self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.feature_dim } else { self.mid_dim };
        (input, self.mid_dim)
    }
}

/// Pointwise layer, `w` is `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub lift: Vec<Linear>,
    /// `token_dim × mid_dim × patch × patch`.
    pub tok_w: Vec<f32>,
    pub tok_b: Vec<f32>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub width: usize,
    pub height: usize,
    /// Input of each lifting layer, `H·W × in_dim`.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer but the last.
    pub pre: Vec<Vec<f64>>,
    /// Output of the last lifting layer.
    pub lifted: Vec<f64>,
}

impl Encoder {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let lift = (0..config.lift_layers)
            .map(|l| {
                let (i, o) = config.layer_dims(l);
                Linear::zeros(i, o)
            })
            .collect();
        let p2 = config.patch * config.patch;
        Ok(Self {
            config,
            lift,
            tok_w: vec![0.0; config.token_dim * config.mid_dim * p2],
            tok_b: vec![0.0; config.token_dim],
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut enc.lift {
            let bound = 1.0 / (layer.in_dim as f32).sqrt();
            layer.w.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        }
        let fan_in = (config.mid_dim * config.patch * config.patch) as f32;
        let bound = 1.0 / fan_in.sqrt();
        enc.tok_w.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        Ok(enc)
    }

    /// Named parameter tensors with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (l, layer) in self.lift.iter().enumerate() {
            out.push((format!("enc.lift{}.w", l + 1), vec![layer.out_dim, layer.in_dim], &layer.w[..]));
            out.push((format!("enc.lift{}.b", l + 1), vec![layer.out_dim], &layer.b[..]));
        }
        let c = &self.config;
        out.push(("enc.tok.w".into(), vec![c.token_dim, c.mid_dim, c.patch, c.patch], &self.tok_w[..]));
        out.push(("enc.tok.b".into(), vec![c.token_dim], &self.tok_b[..]));
        out
    }

    /// Mutable parameter tensors, in the same order as [`Encoder::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out = Vec::new();
        for (l, layer) in self.lift.iter_mut().enumerate() {
            out.push((format!("enc.lift{}.w", l + 1), &mut layer.w[..]));
            out.push((format!("enc.lift{}.b", l + 1), &mut layer.b[..]));
        }
        out.push(("enc.tok.w".into(), &mut self.tok_w[..]));
        out.push(("enc.tok.b".into(), &mut self.tok_b[..]));
        out
    }

    /// Tokenizer weights as a `token_dim × (mid_dim·patch²)` matrix.
    pub(crate) fn tok_matrix(&self) -> Vec<f64> {
        self.tok_w.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self, feat: &FeatureMap, level: Level) -> Result<TokenGrid> {
        Ok(self.forward(feat, level)?.0)
    }

    /// Forward pass returning tokens and the cache needed for gradients.
    pub fn forward(&self, feat: &FeatureMap, level: Level) -> Result<(TokenGrid, EncoderCache)> {
        let c = &self.config;
        if feat.channels != c.feature_dim {
            return Err(Error::Shape(format!(
                "feature map has {} channels, encoder expects {}",
                feat.channels, c.feature_dim
            )));
        }
        let (rows, cols) = c.grid(feat.width, feat.height)?;
        let n = feat.pixel_count();
        let mut inputs = vec![feat.data.clone()];
        let mut pre = Vec::new();
        let mut lifted = Vec::new();
        for (l, layer) in self.lift.iter().enumerate() {
            let x = inputs.last().unwrap();
            let w: Vec<f64> = layer.w.iter().map(|&v| v as f64).collect();
            let mut out = Vec::with_capacity(n * layer.out_dim);
            for _ in 0..n {
                out.extend(layer.b.iter().map(|&v| v as f64));
            }
            gemm(n, layer.in_dim, layer.out_dim, x, false, &w, true, 1.0, &mut out);
            if l + 1 < self.lift.len() {
                let act: Vec<f64> = out.iter().map(|&v| c.activation.apply(v)).collect();
                pre.push(out);
                inputs.push(act);
            } else {
                lifted = out;
            }
        }

        let t_count = rows * cols;
        let k = c.mid_dim * c.patch * c.patch;
        let patches = gather_patches(c, &lifted, feat.width, rows, cols);
        let mut data = Vec::with_capacity(t_count * c.token_dim);
        for _ in 0..t_count {
            data.extend(self.tok_b.iter().map(|&v| v as f64));
        }
        gemm(t_count, k, c.token_dim, &patches, false, &self.tok_matrix(), true, 1.0, &mut data);
        let grid = TokenGrid {
            level,
            count: t_count,
            dim: c.token_dim,
            grid: (rows, cols),
            data,
        };
        let cache = EncoderCache {
            width: feat.width,
            height: feat.height,
            inputs,
            pre,
            lifted,
        };
        Ok((grid, cache))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of `T × (mid_dim·patch²)`, one per token, ordered like the
/// tokenizer weights: channel-major, then row and column within the patch.
pub(crate) fn gather_patches(c: &EncoderConfig, lifted: &[f64], width: usize, rows: usize, cols: usize) -> Vec<f64> {
    let (p, dm) = (c.patch, c.mid_dim);
    let p2 = p * p;
    let mut out = vec![0.0; rows * cols * dm * p2];
    out.par_chunks_mut(dm * p2).enumerate().for_each(|(t, row)| {
        let (pr, pc) = (t / cols, t % cols);
        for u in 0..p {
            for v in 0..p {
                let pix = (pr * p + u) * width + pc * p + v;
                let h = &lifted[pix * dm..(pix + 1) * dm];
                for (ch, &hv) in h.iter().enumerate() {
                    row[ch * p2 + u * p + v] = hv;
                }
            }
        }
    });
    out
}

/// Adjoint of [`gather_patches`]: adds patch rows back into a per-pixel map.
pub(crate) fn scatter_patches(c: &EncoderConfig, d_patches: &[f64], width: usize, height: usize, cols: usize) -> Vec<f64> {
    let (p, dm) = (c.patch, c.mid_dim);
    let p2 = p * p;
    let mut out = vec![0.0; width * height * dm];
    out.par_chunks_mut(dm).enumerate().for_each(|(pix, dh)| {
        let (y, x) = (pix / width, pix % width);
        let t = (y / p) * cols + x / p;
        let uv = (y % p) * p + x % p;
        let row = &d_patches[t * dm * p2..(t + 1) * dm * p2];
        for (ch, d) in dh.iter_mut().enumerate() {
            *d = row[ch * p2 + uv];
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    View,
    Object,
    Scene,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::View, Level::Object, Level::Scene];

    pub fn name(self) -> &'static str {
        match self {
            Level::View => "view",
            Level::Object => "object",
            Level::Scene => "scene",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Level::ALL.into_iter().find(|l| l.name() == s)
    }
}

/// `count × dim` token matrix, row-major, tokens in patch raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub level: Level,
    pub count: usize,
    pub dim: usize,
    /// Patch rows and columns; for scene grids, views stack along rows.
    pub grid: (usize, usize),
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn zeros(level: Level, rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            level,
            count: rows * cols,
            dim,
            grid: (rows, cols),
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn from_vec(level: Level, rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::Shape(format!(
                "{} values for {rows}x{cols} tokens of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            level,
            count: rows * cols,
            dim,
            grid: (rows, cols),
            data,
        })
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn mean_token(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for t in 0..self.count {
            for (a, v) in m.iter_mut().zip(self.token(t)) {
                *a += v;
            }
        }
        if self.count > 0 {
            m.iter_mut().for_each(|v| *v /= self.count as f64);
        }
        m
    }
}

/// Learnable elementwise affine `x·a + b` over a token grid. In
/// per-channel mode `a` and `b` hold one row shared by all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift {
    pub tokens: usize,
    pub dim: usize,
    pub per_channel: bool,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl ScaleShift {
    pub fn identity(tokens: usize, dim: usize, per_channel: bool) -> Self {
        let rows = if per_channel { 1 } else { tokens };
        Self {
            tokens,
            dim,
            per_channel,
            a: vec![1.0; rows * dim],
            b: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        if self.per_channel {
            1
        } else {
            self.tokens
        }
    }

    #[inline]
    fn param_index(&self, t: usize, d: usize) -> usize {
        if self.per_channel {
            d
        } else {
            (t % self.tokens) * self.dim + d
        }
    }

    fn check(&self, x: &TokenGrid, repeat: bool) -> Result<()> {
        let ok_count = if repeat {
            self.tokens > 0 && x.count % self.tokens == 0
        } else {
            x.count == self.tokens
        };
        if x.dim != self.dim || !(ok_count || self.per_channel) {
            return Err(Error::Shape(format!(
                "scale-shift is {}x{}, tokens are {}x{}",
                self.tokens, self.dim, x.count, x.dim
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &TokenGrid) -> Result<TokenGrid> {
        self.check(x, false)?;
        Ok(self.apply_unchecked(x))
    }

    /// Applies the same per-token parameters to each consecutive block of
    /// `tokens` rows, as for concatenated scene grids.
    pub fn apply_repeated(&self, x: &TokenGrid) -> Result<TokenGrid> {
        self.check(x, true)?;
        Ok(self.apply_unchecked(x))
    }

    fn apply_unchecked(&self, x: &TokenGrid) -> TokenGrid {
        let mut out = x.clone();
        for t in 0..x.count {
            for d in 0..x.dim {
                let i = self.param_index(t, d);
                let k = t * x.dim + d;
                out.data[k] = x.data[k] * self.a[i] as f64 + self.b[i] as f64;
            }
        }
        out
    }

    /// Gradients `(d_a, d_b, d_x)` for upstream gradient `g` at input `x`.
    pub fn backward(&self, x: &TokenGrid, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check(x, false)?;
        if g.len() != x.data.len() {
            return Err(Error::Shape(format!(
                "upstream has {} values, tokens {}",
                g.len(),
                x.data.len()
            )));
        }
        let mut da = vec![0.0; self.a.len()];
        let mut db = vec![0.0; self.b.len()];
        let mut dx = vec![0.0; g.len()];
        for t in 0..x.count {
            for d in 0..x.dim {
                let i = self.param_index(t, d);
                let k = t * x.dim + d;
                da[i] += x.data[k] * g[k];
                db[i] += g[k];
                dx[k] = g[k] * self.a[i] as f64;
            }
        }
        Ok((da, db, dx))
    }
}

/// Indices of the views kept when concatenating grids of the given token
/// counts under `cap`: all of them if they fit, otherwise the largest
/// evenly strided subset `floor(j·n/k)` that does.
pub fn scene_view_selection(counts: &[usize], cap: usize) -> Result<Vec<usize>> {
    let n = counts.len();
    if n == 0 {
        return Err(Error::Arg("no views to concatenate".into()));
    }
    for k in (1..=n).rev() {
        let idx: Vec<usize> = (0..k).map(|j| j * n / k).collect();
        if idx.iter().map(|&i| counts[i]).sum::<usize>() <= cap {
            return Ok(idx);
        }
    }
    Err(Error::Arg(format!(
        "a single view has {} tokens, above the cap of {cap}",
        counts[0]
    )))
}

/// Row-concatenates per-view grids into one scene-level grid, subsampling
/// views evenly when the total would exceed `cap` tokens.
pub fn concat_scene_tokens(per_view: &[TokenGrid], cap: usize) -> Result<TokenGrid> {
    let counts: Vec<usize> = per_view.iter().map(|g| g.count).collect();
    let keep = scene_view_selection(&counts, cap)?;
    let dim = per_view[0].dim;
    if per_view.iter().any(|g| g.dim != dim) {
        return Err(Error::Arg("views have different token dimensions".into()));
    }
    let cols = per_view[0].grid.1;
    let same_cols = keep.iter().all(|&i| per_view[i].grid.1 == cols);
    let mut data = Vec::new();
    let mut count = 0;
    for &i in &keep {
        data.extend_from_slice(&per_view[i].data);
        count += per_view[i].count;
    }
    let grid = if same_cols && cols > 0 {
        (count / cols, cols)
    } else {
        (count, 1)
    };
    Ok(TokenGrid {
        level: Level::Scene,
        count,
        dim,
        grid,
        data,
    })
}
