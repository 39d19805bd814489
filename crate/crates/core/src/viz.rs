//! Images for display: PNG encoding, a fixed 3-component PCA of the view
//! features, and label colouring.

use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::scene::Gaussians;

fn encode<P: image::PixelWithColorType>(img: ImageBuffer<P, Vec<u8>>) -> Result<Vec<u8>>
where
    P: image::Pixel<Subpixel = u8>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

pub fn gray_png(width: usize, height: usize, data: Vec<u8>) -> Result<Vec<u8>> {
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Shape("gray buffer does not match image size".into()))?;
    encode(img)
}

pub fn rgb_png(width: usize, height: usize, data: Vec<u8>) -> Result<Vec<u8>> {
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Shape("rgb buffer does not match image size".into()))?;
    encode(img)
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB bytes of a 3-channel map with values in `[0, 1]`.
pub fn color_bytes(map: &FeatureMap) -> Vec<u8> {
    map.data.iter().map(|&v| to_u8(v)).collect()
}

pub fn alpha_bytes(alpha: &[f64]) -> Vec<u8> {
    alpha.iter().map(|&a| to_u8(a)).collect()
}

const LABEL_COLORS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 60, 50],
    [50, 150, 230],
    [70, 200, 80],
    [240, 190, 40],
    [170, 80, 210],
    [240, 130, 180],
    [90, 220, 220],
];

/// RGB bytes of a class-id image, background black.
pub fn label_bytes(labels: &[u32]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            if l == 0 {
                LABEL_COLORS[0]
            } else {
                LABEL_COLORS[1 + (l as usize - 1) % (LABEL_COLORS.len() - 1)]
            }
        })
        .collect()
}

/// Projection of `D`-dimensional features onto three principal axes,
/// with per-axis display ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f32>,
    /// `3 × D`, row-major.
    pub components: Vec<f32>,
    /// `[lo, hi]` per component.
    pub range: Vec<f32>,
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits on the per-Gaussian view features. Component signs are fixed
    /// so the entry of largest magnitude is positive.
    pub fn fit(g: &Gaussians) -> Self {
        let d = g.feature_dim;
        let n = g.len();
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(g.feat_view_row(i)) {
                *m += v as f64;
            }
        }
        if n > 0 {
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = g.feat_view_row(i);
            for a in 0..d {
                let xa = row[a] as f64 - mean[a];
                for b in 0..d {
                    cov[(a, b)] += xa * (row[b] as f64 - mean[b]);
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = vec![0.0f64; 3 * d];
        for (k, &col) in order.iter().take(3).enumerate() {
            let v = eig.eigenvectors.column(col);
            let big = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
            let sign = if v[big] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[k * d + j] = sign * v[j];
            }
        }
        let mut range = vec![0.0f64; 6];
        for k in 0..3 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..n {
                let p: f64 = g
                    .feat_view_row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&components[k * d..(k + 1) * d])
                    .map(|((&x, m), c)| (x as f64 - m) * c)
                    .sum();
                lo = lo.min(p);
                hi = hi.max(p);
            }
            if !(lo < hi) {
                (lo, hi) = (-1.0, 1.0);
            }
            range[2 * k] = lo;
            range[2 * k + 1] = hi;
        }
        Self {
            mean: mean.iter().map(|&v| v as f32).collect(),
            components: components.iter().map(|&v| v as f32).collect(),
            range: range.iter().map(|&v| v as f32).collect(),
        }
    }

    /// RGB bytes for a rendered view-feature map. The mean is weighted by
    /// accumulated alpha so empty pixels stay black.
    pub fn colorize(&self, map: &FeatureMap, alpha: &[f64]) -> Result<Vec<u8>> {
        let d = self.dim();
        if map.channels != d || alpha.len() != map.pixel_count() {
            return Err(Error::Shape(format!(
                "pca expects {d} channels, map has {}",
                map.channels
            )));
        }
        let mut out = Vec::with_capacity(map.pixel_count() * 3);
        for k in 0..map.pixel_count() {
            let f = &map.data[k * d..(k + 1) * d];
            for c in 0..3 {
                let p: f64 = (0..d)
                    .map(|j| (f[j] - alpha[k] * self.mean[j] as f64) * self.components[c * d + j] as f64)
                    .sum();
                let (lo, hi) = (self.range[2 * c] as f64, self.range[2 * c + 1] as f64);
                out.push(to_u8(alpha[k] * (p / alpha[k].max(1e-12) - lo) / (hi - lo)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pca_finds_dominant_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Gaussians::new(4, 1);
        for _ in 0..200 {
            g.push(GaussianGeometry {
                position: [0.0, 0.0, 1.0],
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: [0.1; 3],
                opacity: 0.5,
                color: [0.5; 3],
            });
        }
        for i in 0..200 {
            let t: f32 = rng.random_range(-5.0..5.0);
            let row = [t, 0.1 * rng.random_range(-1.0..1.0f32), 0.0, -t];
            g.feat_view[i * 4..i * 4 + 4].copy_from_slice(&row);
        }
        let pca = Pca::fit(&g);
        let c0 = &pca.components[..4];
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((c0[0].abs() - s).abs() < 1e-3 && (c0[3].abs() - s).abs() < 1e-3);
        assert_eq!(pca, Pca::fit(&g));
    }

    #[test]
    fn png_round_trip() {
        let bytes = gray_png(3, 2, vec![0, 255, 10, 20, 30, 40]).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(img.into_raw(), vec![0, 255, 10, 20, 30, 40]);
        assert!(rgb_png(2, 2, vec![0; 11]).is_err());
    }
}
