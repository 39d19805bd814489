//! Learnable non-scene parameters: encoder, per-level scale-shift and the
//! identity classifier.

use crate::encoder::{Encoder, EncoderConfig, Level, ScaleShift};
use crate::error::{Error, Result};
use crate::masking::IdentityClassifier;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub ss_view: ScaleShift,
    pub ss_object: ScaleShift,
    /// Applied per view to concatenated scene grids.
    pub ss_scene: ScaleShift,
    pub classifier: IdentityClassifier,
}

impl Model {
    /// Random encoder and classifier, identity scale-shift for `tokens`
    /// tokens per view.
    pub fn new(
        encoder: EncoderConfig,
        tokens: usize,
        per_channel: bool,
        identity_dim: usize,
        n_objects: usize,
        seed: u64,
    ) -> Result<Self> {
        let ss = ScaleShift::identity(tokens, encoder.token_dim, per_channel);
        Ok(Self {
            encoder: Encoder::random(encoder, seed)?,
            ss_view: ss.clone(),
            ss_object: ss.clone(),
            ss_scene: ss,
            classifier: IdentityClassifier::random(identity_dim, n_objects, seed ^ 0x5eed),
        })
    }

    pub fn scale_shift(&self, level: Level) -> &ScaleShift {
        match level {
            Level::View => &self.ss_view,
            Level::Object => &self.ss_object,
            Level::Scene => &self.ss_scene,
        }
    }

    /// Named tensors with shapes, as stored in checkpoints.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = self.encoder.tensors();
        for level in Level::ALL {
            let ss = self.scale_shift(level);
            let dims = vec![ss.rows(), ss.dim];
            out.push((format!("ss.{}.a", level.name()), dims.clone(), &ss.a[..]));
            out.push((format!("ss.{}.b", level.name()), dims, &ss.b[..]));
        }
        let c = &self.classifier;
        out.push(("cls.w".into(), vec![c.classes, c.identity_dim], &c.weight[..]));
        out.push(("cls.b".into(), vec![c.classes], &c.bias[..]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out = self.encoder.tensors_mut();
        for (name, ss) in [
            ("view", &mut self.ss_view),
            ("object", &mut self.ss_object),
            ("scene", &mut self.ss_scene),
        ] {
            out.push((format!("ss.{name}.a"), &mut ss.a[..]));
            out.push((format!("ss.{name}.b"), &mut ss.b[..]));
        }
        out.push(("cls.w".into(), &mut self.classifier.weight[..]));
        out.push(("cls.b".into(), &mut self.classifier.bias[..]));
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, _, data) in self.tensors() {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    index: i,
                    message: format!("non-finite value in {name}"),
                });
            }
        }
        Ok(())
    }
}
