//! Identity classification into per-object masks, feature masking and
//! click selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::scene::BACKGROUND_CLASS;

/// Pixels whose accumulated alpha falls below this are background.
pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.5;

/// Linear map from identity features to `M + 1` class logits, class 0
/// being background.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityClassifier {
    pub identity_dim: usize,
    pub classes: usize,
    /// `classes × identity_dim`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl IdentityClassifier {
    pub fn zeros(identity_dim: usize, n_objects: usize) -> Self {
        let classes = n_objects + 1;
        Self {
            identity_dim,
            classes,
            weight: vec![0.0; classes * identity_dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn random(identity_dim: usize, n_objects: usize, seed: u64) -> Self {
        let mut c = Self::zeros(identity_dim, n_objects);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (identity_dim.max(1) as f32).sqrt();
        for w in &mut c.weight {
            *w = rng.random_range(-bound..bound);
        }
        c
    }

    pub fn n_objects(&self) -> usize {
        self.classes - 1
    }

    pub fn logits_into(&self, e: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weight[c * self.identity_dim..(c + 1) * self.identity_dim];
            *o = self.bias[c] as f64 + row.iter().zip(e).map(|(&w, &x)| w as f64 * x).sum::<f64>();
        }
    }
}

/// Numerically stable softmax, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Binary image; `data` holds 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value as u8; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// 0/255 bytes for PNG export.
    pub fn to_gray(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }
}

/// Per-pixel class probabilities and the resulting hard labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// `H × W × classes` softmax probabilities.
    pub probs: Vec<f64>,
    /// Winning class per pixel after the alpha threshold.
    pub labels: Vec<u32>,
}

impl MaskSet {
    pub fn n_objects(&self) -> usize {
        self.classes - 1
    }

    pub fn class_mask(&self, class: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| (l == class) as u8).collect(),
        }
    }

    /// Mask of object `m` (0-based).
    pub fn object_mask(&self, m: usize) -> BinaryMask {
        self.class_mask(m as u32 + 1)
    }

    /// Builds a mask set directly from hard labels (one-hot probabilities).
    pub fn from_labels(width: usize, height: usize, n_objects: usize, labels: Vec<u32>) -> Result<Self> {
        let classes = n_objects + 1;
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} image",
                labels.len()
            )));
        }
        let mut probs = vec![0.0; labels.len() * classes];
        for (k, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Data {
                    index: k,
                    message: format!("label {l} outside {classes} classes"),
                });
            }
            probs[k * classes + l as usize] = 1.0;
        }
        Ok(Self {
            width,
            height,
            classes,
            probs,
            labels,
        })
    }
}

/// Classifies every pixel of a composited identity map. Pixels with
/// `alpha < alpha_threshold` are forced to background.
pub fn classify_identity(
    identity: &FeatureMap,
    alpha: &[f64],
    classifier: &IdentityClassifier,
    alpha_threshold: f64,
) -> Result<MaskSet> {
    if identity.channels != classifier.identity_dim {
        return Err(Error::Config(format!(
            "identity map has {} channels, classifier expects {}",
            identity.channels, classifier.identity_dim
        )));
    }
    if alpha.len() != identity.pixel_count() {
        return Err(Error::Shape(format!(
            "alpha has {} pixels, identity map {}",
            alpha.len(),
            identity.pixel_count()
        )));
    }
    let classes = classifier.classes;
    let n = identity.pixel_count();
    let mut probs = vec![0.0; n * classes];
    let mut labels = vec![BACKGROUND_CLASS; n];
    for k in 0..n {
        let p = &mut probs[k * classes..(k + 1) * classes];
        classifier.logits_into(&identity.data[k * identity.channels..(k + 1) * identity.channels], p);
        softmax_in_place(p);
        if alpha[k] >= alpha_threshold {
            labels[k] = argmax(p) as u32;
        }
    }
    Ok(MaskSet {
        width: identity.width,
        height: identity.height,
        classes,
        probs,
        labels,
    })
}

/// Feature map of one object, zero outside its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFeatureMap {
    pub data: FeatureMap,
    pub object_id: usize,
}

pub fn mask_out(feat: &FeatureMap, mask: &BinaryMask, object_id: usize) -> Result<MaskedFeatureMap> {
    if feat.width != mask.width || feat.height != mask.height {
        return Err(Error::Shape(format!(
            "feature map is {}x{}, mask is {}x{}",
            feat.width, feat.height, mask.width, mask.height
        )));
    }
    let c = feat.channels;
    let mut data = feat.clone();
    for (k, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            data.data[k * c..(k + 1) * c].fill(0.0);
        }
    }
    Ok(MaskedFeatureMap { data, object_id })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Background,
    /// 0-based object id.
    Object(usize),
}

impl Selection {
    pub fn object_id(self) -> Option<usize> {
        match self {
            Selection::Background => None,
            Selection::Object(m) => Some(m),
        }
    }
}

pub fn select_object(masks: &MaskSet, x: i64, y: i64) -> Result<Selection> {
    if x < 0 || y < 0 || x >= masks.width as i64 || y >= masks.height as i64 {
        return Err(Error::Bounds {
            x,
            y,
            width: masks.width,
            height: masks.height,
        });
    }
    Ok(match masks.labels[y as usize * masks.width + x as usize] {
        BACKGROUND_CLASS => Selection::Background,
        c => Selection::Object(c as usize - 1),
    })
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-object IoU between predicted labels and ground truth, objects
/// 0-based. Objects absent from both images are skipped.
pub fn object_ious(pred: &[u32], truth: &[u32], n_objects: usize) -> Vec<Option<f64>> {
    (1..=n_objects as u32)
        .map(|c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &t) in pred.iter().zip(truth) {
                inter += (p == c && t == c) as usize;
                union += (p == c || t == c) as usize;
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}
