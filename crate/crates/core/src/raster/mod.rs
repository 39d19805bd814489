//! Front-to-back alpha compositing of color, language features and identity
//! vectors.
//!
//! Two rasterizers share the same per-splat math: [`render_tiled`] bins
//! splats into 16×16 tiles and stops a pixel once its transmittance would
//! drop below [`TRANSMITTANCE_MIN`]; [`render_reference`] walks every splat
//! for every pixel and applies the same saturation rule without leaving the
//! loop. Both produce identical maps.

pub mod bench;
mod reference;
mod tiled;

use crate::map::FeatureMap;
use crate::projection::ProjectedSplat;
use crate::scene::Gaussians;

pub use reference::render_reference;
pub use tiled::render_tiled;

pub const TILE_SIZE: usize = 16;
/// A splat whose contribution would leave less transmittance than this
/// is not composited, and the pixel is finished.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Squared Mahalanobis radius of the splat support (3σ).
pub const SUPPORT_MAHALANOBIS_SQ: f64 = 9.0;
pub const DEFAULT_CONTRIB_CAP: usize = 256;

/// Which payloads to composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub feat_view: bool,
    pub feat_object: bool,
    pub identity: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        color: true,
        feat_view: true,
        feat_object: true,
        identity: true,
    };
    pub const NONE: Channels = Channels {
        color: false,
        feat_view: false,
        feat_object: false,
        identity: false,
    };
    pub const COLOR: Channels = Channels {
        color: true,
        ..Channels::NONE
    };
    pub const FEAT_VIEW: Channels = Channels {
        feat_view: true,
        ..Channels::NONE
    };
    pub const FEAT_OBJECT: Channels = Channels {
        feat_object: true,
        ..Channels::NONE
    };
    pub const FEATURES: Channels = Channels {
        feat_view: true,
        feat_object: true,
        ..Channels::NONE
    };
    pub const IDENTITY: Channels = Channels {
        identity: true,
        ..Channels::NONE
    };

    pub fn is_empty(&self) -> bool {
        *self == Channels::NONE
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.color {
            parts.push("color");
        }
        if self.feat_view {
            parts.push("feat_v");
        }
        if self.feat_object {
            parts.push("feat_o");
        }
        if self.identity {
            parts.push("identity");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub channels: Channels,
    pub record_contrib: bool,
    /// Maximum `(index, weight)` entries kept per pixel.
    pub contrib_cap: usize,
}

impl RenderOptions {
    pub fn new(channels: Channels) -> Self {
        Self {
            channels,
            record_contrib: false,
            contrib_cap: DEFAULT_CONTRIB_CAP,
        }
    }

    pub fn with_contrib(mut self) -> Self {
        self.record_contrib = true;
        self
    }
}

/// Per-pixel `(gaussian_index, weight)` lists in compositing order, stored
/// compressed by pixel (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    /// Entries dropped because a pixel exceeded the cap.
    pub overflow: u64,
}

impl Contributions {
    pub(crate) fn from_lists(
        width: usize,
        height: usize,
        counts: &[u32],
        mut fill: impl FnMut(usize) -> Vec<(u32, f64)>,
        overflow: u64,
    ) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for &c in counts {
            total += c as usize;
            offsets.push(total);
        }
        let mut entries = Vec::with_capacity(total);
        for p in 0..counts.len() {
            let list = fill(p);
            debug_assert_eq!(list.len(), counts[p] as usize);
            entries.extend(list);
        }
        Self {
            width,
            height,
            offsets,
            entries,
            overflow,
        }
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Option<FeatureMap>,
    pub feat_view: Option<FeatureMap>,
    pub feat_object: Option<FeatureMap>,
    pub identity: Option<FeatureMap>,
    /// Accumulated opacity `Σ w_i` per pixel.
    pub alpha: Vec<f64>,
    pub contrib: Option<Contributions>,
}

impl RenderOutput {
    /// Largest absolute difference over alpha and every map present in both.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        let mut m = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let pairs = [
            (&self.color, &other.color),
            (&self.feat_view, &other.feat_view),
            (&self.feat_object, &other.feat_object),
            (&self.identity, &other.identity),
        ];
        for (a, b) in pairs {
            if let (Some(a), Some(b)) = (a, b) {
                m = m.max(a.max_abs_diff(b));
            }
        }
        m
    }
}

/// Opacity of `splat` at pixel center `(px, py)` after the support cutoff,
/// the `ALPHA_MAX` clamp and the `ALPHA_MIN` floor.
#[inline]
pub(crate) fn splat_alpha(splat: &ProjectedSplat, opacity: f64, px: f64, py: f64) -> Option<f64> {
    let m = splat.mahalanobis_sq(px, py);
    if !(m <= SUPPORT_MAHALANOBIS_SQ) {
        return None;
    }
    let alpha = (opacity * (-0.5 * m).exp()).min(ALPHA_MAX);
    (alpha >= ALPHA_MIN).then_some(alpha)
}

/// Per-splat payload rows packed in compositing order:
/// `[color | feat_view | feat_object | identity]`, requested groups only.
pub(crate) struct Payload {
    pub stride: usize,
    pub data: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl Payload {
    pub fn pack(gaussians: &Gaussians, splats: &[ProjectedSplat], channels: Channels) -> Self {
        let stride = channel_count(gaussians, channels);
        let mut data = Vec::with_capacity(splats.len() * stride);
        let mut opacity = Vec::with_capacity(splats.len());
        for s in splats {
            let i = s.gaussian_index as usize;
            opacity.push(gaussians.opacities[i] as f64);
            if channels.color {
                data.extend(gaussians.color(i).iter().map(|&x| x as f64));
            }
            if channels.feat_view {
                data.extend(gaussians.feat_view_row(i).iter().map(|&x| x as f64));
            }
            if channels.feat_object {
                data.extend(gaussians.feat_object_row(i).iter().map(|&x| x as f64));
            }
            if channels.identity {
                data.extend(gaussians.identity_row(i).iter().map(|&x| x as f64));
            }
        }
        Self {
            stride,
            data,
            opacity,
        }
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.stride..(pos + 1) * self.stride]
    }
}

pub(crate) fn channel_count(g: &Gaussians, c: Channels) -> usize {
    3 * c.color as usize
        + g.feature_dim * (c.feat_view as usize + c.feat_object as usize)
        + g.identity_dim * c.identity as usize
}

/// Compositing state of one pixel.
pub(crate) struct PixelState {
    pub transmittance: f64,
    pub alpha: f64,
    pub saturated: bool,
}

impl PixelState {
    pub fn new() -> Self {
        Self {
            transmittance: 1.0,
            alpha: 0.0,
            saturated: false,
        }
    }

    /// Applies one splat with opacity `alpha`. Returns its weight, or `None`
    /// if the pixel saturates instead.
    #[inline]
    pub fn step(&mut self, alpha: f64) -> Option<f64> {
        let next = self.transmittance * (1.0 - alpha);
        if next < TRANSMITTANCE_MIN {
            self.saturated = true;
            return None;
        }
        let w = alpha * self.transmittance;
        self.alpha += w;
        self.transmittance = next;
        Some(w)
    }
}

/// Splits a packed `H×W×C` buffer back into per-group maps.
pub(crate) fn unpack_maps(
    gaussians: &Gaussians,
    channels: Channels,
    width: usize,
    height: usize,
    packed: &[f64],
) -> [Option<FeatureMap>; 4] {
    let stride = channel_count(gaussians, channels);
    let groups = [
        (channels.color, 3),
        (channels.feat_view, gaussians.feature_dim),
        (channels.feat_object, gaussians.feature_dim),
        (channels.identity, gaussians.identity_dim),
    ];
    let mut offset = 0;
    groups.map(|(on, dim)| {
        if !on {
            return None;
        }
        let mut map = FeatureMap::zeros(width, height, dim);
        for p in 0..width * height {
            map.data[p * dim..(p + 1) * dim]
                .copy_from_slice(&packed[p * stride + offset..p * stride + offset + dim]);
        }
        offset += dim;
        Some(map)
    })
}

#[cfg(test)]
mod tests;
