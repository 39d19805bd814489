//! Closed-form gradients: transpose of feature compositing, backprop
//! through the encoder and scale-shift, L1 token losses and the identity
//! cross-entropy. Geometry, opacity and color never receive gradients.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::encoder::{dot, gather_patches, scatter_patches, Encoder, EncoderCache, TokenGrid};
use crate::gemm::gemm;
use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::masking::{softmax_in_place, IdentityClassifier};
use crate::raster::{Contributions, TILE_SIZE};

/// Named gradient tensors, keyed like the checkpoint records they update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientBundle {
    tensors: BTreeMap<String, Vec<f64>>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the tensor called `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        match self.tensors.get_mut(name) {
            Some(t) => {
                assert_eq!(t.len(), grad.len(), "gradient size changed for {name}");
                for (a, g) in t.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                self.tensors.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(|v| &v[..])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &v[..]))
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self, name: &str) -> f64 {
        self.get(name)
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-Gaussian gradient `Σ_k w_i(k)·upstream(k)`, `N × C`.
///
/// Pixels are processed tile by tile in parallel; the partial sums are
/// then added in tile order, so the result does not depend on scheduling.
pub fn grad_render_features(
    contrib: Option<&Contributions>,
    upstream: &FeatureMap,
    n_gaussians: usize,
) -> Result<Vec<f64>> {
    let contrib = contrib.ok_or_else(|| {
        Error::State("feature gradients need contributions recorded in the forward pass".into())
    })?;
    if contrib.width != upstream.width || contrib.height != upstream.height {
        return Err(Error::Shape(format!(
            "contributions are {}x{}, upstream is {}x{}",
            contrib.width, contrib.height, upstream.width, upstream.height
        )));
    }
    if contrib.overflow > 0 {
        log::warn!(
            "{} contributions beyond the per-pixel cap are missing from the gradient",
            contrib.overflow
        );
    }
    let c = upstream.channels;
    let (w, h) = (upstream.width, upstream.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);

    let partials: Vec<(Vec<u32>, Vec<f64>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let x0 = (t % tiles_x) * TILE_SIZE;
            let y0 = (t / tiles_x) * TILE_SIZE;
            let mut slot: HashMap<u32, usize> = HashMap::new();
            let mut ids = Vec::new();
            let mut rows: Vec<f64> = Vec::new();
            for y in y0..(y0 + TILE_SIZE).min(h) {
                for x in x0..(x0 + TILE_SIZE).min(w) {
                    let k = y * w + x;
                    let up = &upstream.data[k * c..(k + 1) * c];
                    if up.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for &(i, wt) in contrib.pixel(k) {
                        let s = *slot.entry(i).or_insert_with(|| {
                            ids.push(i);
                            rows.resize(rows.len() + c, 0.0);
                            ids.len() - 1
                        });
                        for (r, u) in rows[s * c..(s + 1) * c].iter_mut().zip(up) {
                            *r += wt * u;
                        }
                    }
                }
            }
            (ids, rows)
        })
        .collect();

    let mut grad = vec![0.0; n_gaussians * c];
    for (ids, rows) in partials {
        for (s, &i) in ids.iter().enumerate() {
            let i = i as usize;
            if i >= n_gaussians {
                return Err(Error::Shape(format!(
                    "contribution index {i} outside {n_gaussians} Gaussians"
                )));
            }
            for (g, r) in grad[i * c..(i + 1) * c].iter_mut().zip(&rows[s * c..(s + 1) * c]) {
                *g += r;
            }
        }
    }
    Ok(grad)
}

/// Encoder parameter gradients plus the gradient of the input map.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    /// `(d_w, d_b)` per lifting layer.
    pub lift: Vec<(Vec<f64>, Vec<f64>)>,
    /// Same layout as [`Encoder::tok_w`].
    pub tok_w: Vec<f64>,
    pub tok_b: Vec<f64>,
    pub input: FeatureMap,
}

impl EncoderGrads {
    /// Adds every parameter gradient into `bundle` under the encoder's
    /// tensor names.
    pub fn accumulate_into(&self, bundle: &mut GradientBundle) {
        for (l, (dw, db)) in self.lift.iter().enumerate() {
            bundle.accumulate(&format!("enc.lift{}.w", l + 1), dw);
            bundle.accumulate(&format!("enc.lift{}.b", l + 1), db);
        }
        bundle.accumulate("enc.tok.w", &self.tok_w);
        bundle.accumulate("enc.tok.b", &self.tok_b);
    }
}

/// Backpropagates token gradients `d_tokens` (`T × D_tok`) through the
/// patch tokenizer and the lifting layers.
pub fn grad_encoder(enc: &Encoder, cache: &EncoderCache, d_tokens: &[f64]) -> Result<EncoderGrads> {
    let c = &enc.config;
    let (rows, cols) = c.grid(cache.width, cache.height)?;
    let n = cache.width * cache.height;
    if cache.inputs.len() != enc.lift.len()
        || cache.pre.len() + 1 != enc.lift.len()
        || cache.lifted.len() != n * c.mid_dim
    {
        return Err(Error::State("encoder cache does not match this encoder".into()));
    }
    if d_tokens.len() != rows * cols * c.token_dim {
        return Err(Error::Shape(format!(
            "token gradient has {} values, expected {}",
            d_tokens.len(),
            rows * cols * c.token_dim
        )));
    }

    let (dt, k) = (c.token_dim, c.mid_dim * c.patch * c.patch);
    let t_count = rows * cols;

    // tokenizer
    let mut d_tok_b = vec![0.0; dt];
    for g in d_tokens.chunks(dt) {
        for (b, v) in d_tok_b.iter_mut().zip(g) {
            *b += v;
        }
    }
    let patches = gather_patches(c, &cache.lifted, cache.width, rows, cols);
    let mut d_tok_w = vec![0.0; dt * k];
    gemm(dt, t_count, k, d_tokens, true, &patches, false, 0.0, &mut d_tok_w);
    let mut d_patches = vec![0.0; t_count * k];
    gemm(t_count, dt, k, d_tokens, false, &enc.tok_matrix(), false, 0.0, &mut d_patches);
    let d_h = scatter_patches(c, &d_patches, cache.width, cache.height, cols);

    // lifting layers, last to first
    let mut lift_grads = vec![(Vec::new(), Vec::new()); enc.lift.len()];
    let mut d_out = d_h;
    for l in (0..enc.lift.len()).rev() {
        let layer = &enc.lift[l];
        let (ni, no) = (layer.in_dim, layer.out_dim);
        let x = &cache.inputs[l];
        let mut dw = vec![0.0; no * ni];
        gemm(no, n, ni, &d_out, true, x, false, 0.0, &mut dw);
        let mut db = vec![0.0; no];
        for g in d_out.chunks(no) {
            for (b, v) in db.iter_mut().zip(g) {
                *b += v;
            }
        }
        let w: Vec<f64> = layer.w.iter().map(|&v| v as f64).collect();
        let mut d_in = vec![0.0; n * ni];
        gemm(n, no, ni, &d_out, false, &w, false, 0.0, &mut d_in);
        if l > 0 {
            let pre = &cache.pre[l - 1];
            for (d, &z) in d_in.iter_mut().zip(pre) {
                *d *= c.activation.derivative(z);
            }
        }
        lift_grads[l] = (dw, db);
        d_out = d_in;
    }
    Ok(EncoderGrads {
        lift: lift_grads,
        tok_w: d_tok_w,
        tok_b: d_tok_b,
        input: FeatureMap::from_vec(cache.width, cache.height, c.feature_dim, d_out)?,
    })
}

/// Mean absolute error and its gradient; the subgradient at a tie is 0.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// View and object L1 terms with their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub l_v: f64,
    pub l_o: f64,
    pub l_total: f64,
    pub d_view: Vec<f64>,
    /// Already divided by the number of objects.
    pub d_objects: Vec<Vec<f64>>,
}

/// `L_v` on the view grid, `L_o` averaged over the given objects (0 when
/// there are none), `L_total = L_v + L_o`.
pub fn grad_losses(
    view_pred: &TokenGrid,
    view_target: &[f64],
    objects: &[(&TokenGrid, &[f64])],
) -> Result<LossTerms> {
    let (l_v, d_view) = l1_loss(&view_pred.data, view_target)?;
    let mut l_o = 0.0;
    let mut d_objects = Vec::with_capacity(objects.len());
    let m = objects.len() as f64;
    for (pred, target) in objects {
        let (l, mut g) = l1_loss(&pred.data, target)?;
        l_o += l / m;
        g.iter_mut().for_each(|v| *v /= m);
        d_objects.push(g);
    }
    Ok(LossTerms {
        l_v,
        l_o,
        l_total: l_v + l_o,
        d_view,
        d_objects,
    })
}

/// Identity-stage loss over one rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Fraction of counted pixels whose argmax matches the label.
    pub accuracy: f64,
    pub pixels: usize,
    pub d_identity: FeatureMap,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Mean softmax cross-entropy of classified identity features against
/// `labels`, over pixels with `alpha ≥ alpha_threshold`.
pub fn cross_entropy(
    identity: &FeatureMap,
    alpha: &[f64],
    labels: &[u32],
    classifier: &IdentityClassifier,
    alpha_threshold: f64,
) -> Result<CrossEntropy> {
    let d = classifier.identity_dim;
    let classes = classifier.classes;
    if identity.channels != d {
        return Err(Error::Config(format!(
            "identity map has {} channels, classifier expects {d}",
            identity.channels
        )));
    }
    let n = identity.pixel_count();
    if alpha.len() != n || labels.len() != n {
        return Err(Error::Shape("alpha, labels and identity map differ in size".into()));
    }
    let counted: Vec<usize> = (0..n).filter(|&k| alpha[k] >= alpha_threshold).collect();
    let mut d_identity = FeatureMap::zeros(identity.width, identity.height, d);
    let mut d_weight = vec![0.0; classes * d];
    let mut d_bias = vec![0.0; classes];
    if counted.is_empty() {
        return Ok(CrossEntropy {
            loss: 0.0,
            accuracy: 1.0,
            pixels: 0,
            d_identity,
            d_weight,
            d_bias,
        });
    }
    let inv = 1.0 / counted.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut p = vec![0.0; classes];
    for &k in &counted {
        let label = labels[k] as usize;
        if label >= classes {
            return Err(Error::Data {
                index: k,
                message: format!("label {label} outside {classes} classes"),
            });
        }
        let e = &identity.data[k * d..(k + 1) * d];
        classifier.logits_into(e, &mut p);
        softmax_in_place(&mut p);
        let best = (0..classes).fold(0, |b, c| if p[c] > p[b] { c } else { b });
        correct += (best == label) as usize;
        loss -= p[label].max(1e-300).ln() * inv;
        let de = &mut d_identity.data[k * d..(k + 1) * d];
        for c in 0..classes {
            let g = (p[c] - (c == label) as u8 as f64) * inv;
            d_bias[c] += g;
            let row = &classifier.weight[c * d..(c + 1) * d];
            for j in 0..d {
                d_weight[c * d + j] += g * e[j];
                de[j] += g * row[j] as f64;
            }
        }
    }
    Ok(CrossEntropy {
        loss,
        accuracy: correct as f64 / counted.len() as f64,
        pixels: counted.len(),
        d_identity,
        d_weight,
        d_bias,
    })
}

/// `⟨a, b⟩` over equally sized slices.
pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}
